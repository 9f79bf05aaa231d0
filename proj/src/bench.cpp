#include "treekv/bench.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "treekv/data.hpp"
#include "treekv/pipeline.hpp"

namespace treekv {

Fraction leaf_keep_for_beta(int height, std::int64_t beta) {
  if (height < 1 || beta < 1) throw std::invalid_argument("leaf_keep_for_beta: bad arguments");
  // halving schedule keeps chunk_len * leaf * (h+1) / 2^h positions overall
  return {std::int64_t{1} << height, beta * (height + 1)};
}

CompressionSchedule schedule_for_beta(int height, std::int64_t beta) {
  const Fraction leaf = leaf_keep_for_beta(height, beta);
  if (leaf.at_most_one()) return make_schedule(height, leaf);
  // small global ratios cannot honor the level-halving rule; fall back to the
  // same ratio on every level
  return flat_schedule(height, Fraction{1, beta});
}

BenchGrid BenchGrid::load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("bench: cannot read grid file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("bench: " + path.string() + " is not valid JSON: " + e.what());
  }

  BenchGrid g;
  if (j.contains("base")) g.base = RunConfig::from_json(j.at("base"));
  if (j.contains("defaults")) {
    const auto& d = j.at("defaults");
    g.default_m = d.value("M", g.default_m);
    g.default_beta = d.value("beta", g.default_beta);
    g.default_height = d.value("h", g.default_height);
    g.default_query_aware = d.value("query_aware", g.default_query_aware);
  }
  if (j.contains("axes")) {
    const auto& a = j.at("axes");
    if (a.contains("M")) g.m_values = a.at("M").get<std::vector<int>>();
    if (a.contains("beta")) g.beta_values = a.at("beta").get<std::vector<std::int64_t>>();
    if (a.contains("h")) g.height_values = a.at("h").get<std::vector<int>>();
    if (a.contains("query_aware"))
      g.query_aware_values = a.at("query_aware").get<std::vector<bool>>();
  }
  g.warmup_runs = j.value("warmup_runs", g.warmup_runs);
  g.timed_runs = j.value("timed_runs", g.timed_runs);
  return g;
}

namespace {

struct BenchPoint {
  int m;
  std::int64_t beta;
  int height;
  bool query_aware;
  auto operator<=>(const BenchPoint&) const = default;
};

double one_forward(const ModelParams& params, const RunConfig& cfg,
                   const CompressionSchedule& schedule, const Sample& sample, bool query_aware) {
  TapeSuspend no_grad;
  const CompressorConfig ccfg = cfg.compressor_config();
  const DecoderConfig dcfg = cfg.decoder_config();
  const TreeBuildConfig tcfg = cfg.tree.build_config(/*with_noise=*/false);

  RunConfig policy_cfg = cfg;
  policy_cfg.policy = query_aware ? PolicyMode::query_aware : PolicyMode::deterministic;
  const SplitPolicy policy = make_policy(policy_cfg, params, sample.running_tokens);

  const auto t0 = std::chrono::steady_clock::now();
  std::vector<EncodedChunk> encoded;
  encoded.reserve(sample.context_chunks.size());
  for (std::size_t i = 0; i < sample.context_chunks.size(); ++i)
    encoded.push_back(
        encode_chunk(sample.context_chunks[i], tcfg, schedule, policy, params, ccfg, 7 + i));
  const InjectionBundle bundle = build_bundle(encoded);
  const Tensor logits = decoder_forward(sample.running_tokens, &bundle, params, dcfg);
  const auto t1 = std::chrono::steady_clock::now();
  (void)logits;
  return std::chrono::duration<double, std::milli>(t1 - t0).count();
}

}  // namespace

std::vector<BenchRow> run_bench(const BenchGrid& grid) {
  std::vector<BenchPoint> points;
  std::set<BenchPoint> seen;
  auto push = [&](BenchPoint p) {
    if (seen.insert(p).second) points.push_back(p);
  };
  push({grid.default_m, grid.default_beta, grid.default_height, grid.default_query_aware});
  for (int m : grid.m_values)
    push({m, grid.default_beta, grid.default_height, grid.default_query_aware});
  for (std::int64_t b : grid.beta_values)
    push({grid.default_m, b, grid.default_height, grid.default_query_aware});
  for (int h : grid.height_values)
    push({grid.default_m, grid.default_beta, h, grid.default_query_aware});
  for (bool qa : grid.query_aware_values)
    push({grid.default_m, grid.default_beta, grid.default_height, qa});

  // one fixed synthetic input reused across all grid points
  std::mt19937_64 rng(grid.base.seed);
  const std::int64_t total = grid.base.data.context_len + grid.base.data.running_len;
  std::string text(static_cast<std::size_t>(total), ' ');
  for (auto& c : text) c = static_cast<char>('a' + static_cast<int>(rng() % 26));
  const std::vector<TokenId> tokens = byte_tokenize(text);

  std::vector<BenchRow> rows;
  rows.reserve(points.size());
  for (const BenchPoint& pt : points) {
    RunConfig cfg = grid.base;
    cfg.model.m_layers = pt.m;
    cfg.tree.height = pt.height;
    const CompressionSchedule schedule = schedule_for_beta(pt.height, pt.beta);
    cfg.tree.leaf_keep = schedule.keep_fractions.back();
    cfg.validate();

    const Sample sample = chunk_context(tokens, cfg.tree.chunk_size, cfg.data.running_len,
                                        std::int64_t{1} << pt.height);
    const ModelParams params =
        init_params(cfg.compressor_config(), cfg.decoder_config(), cfg.seed);

    for (int w = 0; w < grid.warmup_runs; ++w)
      one_forward(params, cfg, schedule, sample, pt.query_aware);

    tensor_mem_reset_peak();
    std::vector<double> times;
    times.reserve(static_cast<std::size_t>(grid.timed_runs));
    for (int r = 0; r < grid.timed_runs; ++r)
      times.push_back(one_forward(params, cfg, schedule, sample, pt.query_aware));
    std::sort(times.begin(), times.end());

    BenchRow row;
    row.m = pt.m;
    row.beta = pt.beta;
    row.height = pt.height;
    row.query_aware = pt.query_aware;
    row.time_ms = times[times.size() / 2];
    row.peak_bytes = tensor_mem_stats().peak_bytes;
    rows.push_back(row);
  }
  return rows;
}

std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::ostringstream os;
  os << "M,beta,h,query_aware,time_ms,peak_bytes\n";
  for (const BenchRow& r : rows)
    os << r.m << "," << r.beta << "," << r.height << "," << (r.query_aware ? 1 : 0) << ","
       << r.time_ms << "," << r.peak_bytes << "\n";
  return os.str();
}

}  // namespace treekv
