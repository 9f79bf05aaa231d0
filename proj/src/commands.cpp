#include "treekv/commands.hpp"

#include <fstream>
#include <iomanip>

#include "treekv/bench.hpp"
#include "treekv/checkpoint.hpp"
#include "treekv/data.hpp"
#include "treekv/pipeline.hpp"

namespace treekv {

namespace {

std::vector<Sample> heldout_samples(const RunConfig& cfg, int count) {
  const SampleFn fn = make_dataset(cfg, /*heldout=*/true);
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(fn(i));
  return out;
}

}  // namespace

int cmd_train(const std::filesystem::path& config_path, const std::filesystem::path& out_dir,
              std::ostream& out) {
  const RunConfig cfg = RunConfig::load_file(config_path);
  std::filesystem::create_directories(out_dir);

  ModelParams params = init_params(cfg.compressor_config(), cfg.decoder_config(), cfg.seed);
  const SampleFn dataset = make_dataset(cfg, /*heldout=*/false);
  const TrainResult result = train_loop(params, dataset, cfg);

  save_checkpoint(out_dir, params);
  {
    std::ofstream snap(out_dir / "config.json", std::ios::trunc);
    snap << cfg.to_json().dump(2) << "\n";
    if (!snap) throw std::runtime_error("cmd_train: cannot write config snapshot");
  }
  {
    std::ofstream csv(out_dir / "loss.csv", std::ios::trunc);
    csv << "step,lr,loss\n";
    csv << std::setprecision(17);
    for (const StepStat& s : result.history)
      csv << s.step << "," << s.lr << "," << s.loss << "\n";
    if (!csv) throw std::runtime_error("cmd_train: cannot write loss.csv");
  }
  nlohmann::json eval_report;
  if (cfg.data.task == "passkey") {
    std::ofstream manifest(out_dir / "heldout_manifest.jsonl", std::ios::trunc);
    for (int i = 0; i < cfg.data.heldout_samples; ++i) {
      const std::uint64_t seed = mix_seed(cfg.seed, 0x48454C44ULL, static_cast<std::uint64_t>(i));
      std::mt19937_64 rng(seed);
      const PasskeySample ps =
          gen_passkey_sample(cfg.data.context_len, cfg.data.key_digits, cfg.tree.chunk_size, rng);
      manifest << task_manifest_line(seed, cfg.data.context_len, ps.answer) << "\n";
    }
    const auto eval_set = make_passkey_eval_set(cfg, cfg.data.heldout_samples);
    eval_report["exact_match"] = eval_passkey_accuracy(params, cfg, eval_set, true);
  } else {
    const auto heldout = heldout_samples(cfg, cfg.data.heldout_samples);
    eval_report["ppl_with_context"] =
        perplexity_from_nll(eval_mean_nll(params, cfg, heldout, true));
    eval_report["ppl_no_context"] =
        perplexity_from_nll(eval_mean_nll(params, cfg, heldout, false));
  }
  {
    std::ofstream ev(out_dir / "eval.json", std::ios::trunc);
    ev << eval_report.dump(2) << "\n";
  }

  out << "trained " << result.history.size() << " steps; final loss "
      << (result.history.empty() ? 0.0 : result.history.back().loss) << "\n";
  out << "held-out: " << eval_report.dump() << "\n";
  out << "checkpoint written to " << out_dir.string() << "\n";
  return 0;
}

int cmd_eval_ppl(const std::filesystem::path& ckpt_dir, const std::filesystem::path& corpus,
                 bool no_context, const std::optional<std::filesystem::path>& config_override,
                 std::ostream& out) {
  const RunConfig cfg =
      RunConfig::load_file(config_override ? *config_override : ckpt_dir / "config.json");
  ModelParams params = init_params(cfg.compressor_config(), cfg.decoder_config(), cfg.seed);
  load_checkpoint(ckpt_dir, params);

  const std::vector<Sample> samples =
      load_corpus(corpus, cfg.tree.chunk_size, cfg.data.running_len, cfg.data.context_len,
                  std::int64_t{1} << cfg.tree.height);

  nlohmann::json report;
  report["corpus"] = corpus.string();
  report["windows"] = samples.size();
  const double nll_without = eval_mean_nll(params, cfg, samples, /*with_context=*/false);
  report["ppl_no_context"] = perplexity_from_nll(nll_without);
  if (!no_context) {
    const double nll_with = eval_mean_nll(params, cfg, samples, /*with_context=*/true);
    report["ppl_with_context"] = perplexity_from_nll(nll_with);
  }
  out << report.dump(2) << "\n";
  return 0;
}

int cmd_inspect_tree(const std::filesystem::path& config_path, std::optional<std::uint64_t> seed,
                     const std::optional<std::filesystem::path>& file, std::ostream& out) {
  const RunConfig cfg = RunConfig::load_file(config_path);

  TokenChunk chunk;
  chunk.offset = 0;
  if (file) {
    std::ifstream in(*file, std::ios::binary);
    if (!in) throw std::runtime_error("inspect-tree: cannot read " + file->string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    chunk.tokens = byte_tokenize(bytes);
    if (chunk.length() > cfg.tree.chunk_size) chunk.tokens.resize(cfg.tree.chunk_size);
  } else {
    std::mt19937_64 rng(seed.value_or(cfg.seed));
    chunk.tokens.resize(static_cast<std::size_t>(cfg.tree.chunk_size));
    for (auto& t : chunk.tokens) t = static_cast<TokenId>('a' + rng() % 26);
  }

  const ContextTreeResult result =
      build_and_search(chunk, cfg.tree.build_config(cfg.tree.noise), cfg.tree.schedule(),
                       deterministic_policy(), seed.value_or(cfg.seed));
  out << tree_to_json(result) << "\n";
  return 0;
}

int cmd_bench(const std::filesystem::path& grid_path,
              const std::optional<std::filesystem::path>& out_csv, std::ostream& out) {
  const BenchGrid grid = BenchGrid::load_file(grid_path);
  const std::vector<BenchRow> rows = run_bench(grid);
  const std::string csv = bench_csv(rows);
  if (out_csv) {
    std::ofstream f(*out_csv, std::ios::trunc);
    f << csv;
    if (!f) throw std::runtime_error("bench: cannot write " + out_csv->string());
    out << "wrote " << rows.size() << " rows to " << out_csv->string() << "\n";
  } else {
    out << csv;
  }
  return 0;
}

}  // namespace treekv
