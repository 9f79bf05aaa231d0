#include <filesystem>
#include <fstream>
#include <sstream>

#include <doctest.h>
#include <nlohmann/json.hpp>

#include "treekv/bench.hpp"
#include "treekv/commands.hpp"

using namespace treekv;
namespace fs = std::filesystem;

namespace {

fs::path write_temp(const std::string& name, const std::string& content) {
  const fs::path p = fs::temp_directory_path() / name;
  std::ofstream out(p, std::ios::trunc | std::ios::binary);
  out << content;
  return p;
}

}  // namespace

TEST_CASE("config parsing: defaults, field errors, fraction forms") {
  SUBCASE("empty object resolves to full defaults") {
    const RunConfig cfg = RunConfig::from_json(nlohmann::json::object());
    CHECK(cfg.tree.height == 3);
    CHECK(cfg.tree.leaf_keep == Fraction{1, 4});
    CHECK(cfg.placement_mode == PlacementMode::continuous_bottom);
    CHECK(cfg.model.n_layers == 4);
  }

  SUBCASE("unknown fields are named") {
    const auto j = nlohmann::json::parse(R"({"model": {"d_modell": 64}})");
    CHECK_THROWS_WITH_AS(RunConfig::from_json(j), doctest::Contains("model.d_modell"),
                         std::invalid_argument);
    const auto top = nlohmann::json::parse(R"({"trian": {}})");
    CHECK_THROWS_WITH_AS(RunConfig::from_json(top), doctest::Contains("trian"),
                         std::invalid_argument);
  }

  SUBCASE("type and range errors are named") {
    const auto j = nlohmann::json::parse(R"({"tree": {"height": "three"}})");
    CHECK_THROWS_WITH_AS(RunConfig::from_json(j), doctest::Contains("tree.height"),
                         std::invalid_argument);
    const auto j2 = nlohmann::json::parse(R"({"train": {"warmup_ratio": 1.5}})");
    CHECK_THROWS_WITH_AS(RunConfig::from_json(j2), doctest::Contains("train.warmup_ratio"),
                         std::invalid_argument);
    const auto j3 = nlohmann::json::parse(R"({"tree": {"leaf_keep": "0/3"}})");
    CHECK_THROWS_WITH_AS(RunConfig::from_json(j3), doctest::Contains("tree.leaf_keep"),
                         std::invalid_argument);
  }

  SUBCASE("fractions accept strings and integers") {
    const auto j = nlohmann::json::parse(R"({"tree": {"leaf_keep": "1/2"}})");
    CHECK(RunConfig::from_json(j).tree.leaf_keep == Fraction{1, 2});
    const auto j2 = nlohmann::json::parse(R"({"tree": {"leaf_keep": 1}})");
    CHECK(RunConfig::from_json(j2).tree.leaf_keep == Fraction{1, 1});
  }

  SUBCASE("round-trips through the resolved snapshot") {
    const auto j = nlohmann::json::parse(
        R"({"tree": {"height": 2, "leaf_keep": "1/2"}, "policy": "query_aware"})");
    const RunConfig cfg = RunConfig::from_json(j);
    const RunConfig back = RunConfig::from_json(cfg.to_json());
    CHECK(back.tree.height == 2);
    CHECK(back.tree.leaf_keep == Fraction{1, 2});
    CHECK(back.policy == PolicyMode::query_aware);
  }
}

TEST_CASE("inspect-tree: default config yields four preserved nodes at beta 8") {
  const fs::path cfg = write_temp("treekv_inspect_cfg.json", "{}");
  std::ostringstream out;
  REQUIRE(cmd_inspect_tree(cfg, 3, std::nullopt, out) == 0);
  const auto j = nlohmann::json::parse(out.str());
  CHECK(j["chunk_len"] == 256);
  CHECK(j["height"] == 3);
  REQUIRE(j["preserved"].size() == 4);
  CHECK(j["beta"] == doctest::Approx(8.0));
  std::int64_t kept = 0;
  for (const auto& p : j["preserved"]) kept += p["kept_len"].get<std::int64_t>();
  CHECK(kept == 32);
  fs::remove(cfg);
}

TEST_CASE("inspect-tree: height 1 yields two preserved nodes; file input works") {
  const fs::path cfg =
      write_temp("treekv_inspect_cfg1.json", R"({"tree": {"height": 1, "leaf_keep": "1/4"}})");
  std::ostringstream out;
  REQUIRE(cmd_inspect_tree(cfg, 1, std::nullopt, out) == 0);
  const auto j = nlohmann::json::parse(out.str());
  REQUIRE(j["preserved"].size() == 2);

  const fs::path data = write_temp("treekv_inspect_data.bin", std::string(300, 'x'));
  std::ostringstream out2;
  REQUIRE(cmd_inspect_tree(cfg, std::nullopt, data, out2) == 0);
  const auto j2 = nlohmann::json::parse(out2.str());
  CHECK(j2["chunk_len"] == 256);  // truncated to the configured chunk size
  fs::remove(cfg);
  fs::remove(data);
}

TEST_CASE("train command writes checkpoint, snapshot, loss history; reruns match") {
  const std::string cfg_json = R"({
    "model": {"n_layers": 2, "m_layers": 1, "d_model": 32, "n_heads": 4, "mlp_hidden": 64,
              "vocab_size": 259},
    "tree": {"height": 2, "chunk_size": 16, "leaf_keep": "1/2"},
    "data": {"task": "copy", "pattern_len": 16, "repeats": 2, "running_len": 16,
             "heldout_samples": 4},
    "train": {"total_steps": 3, "batch_size": 2, "lr_peak": 1e-3},
    "seed": 11
  })";
  const fs::path cfg = write_temp("treekv_train_cfg.json", cfg_json);
  const fs::path out_a = fs::temp_directory_path() / "treekv_run_a";
  const fs::path out_b = fs::temp_directory_path() / "treekv_run_b";

  std::ostringstream log;
  REQUIRE(cmd_train(cfg, out_a, log) == 0);
  CHECK(fs::exists(out_a / "manifest.json"));
  CHECK(fs::exists(out_a / "weights.bin"));
  CHECK(fs::exists(out_a / "config.json"));
  CHECK(fs::exists(out_a / "loss.csv"));
  CHECK(fs::exists(out_a / "eval.json"));

  std::ifstream csv(out_a / "loss.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header == "step,lr,loss");
  int rows = 0;
  for (std::string line; std::getline(csv, line);)
    if (!line.empty()) ++rows;
  CHECK(rows == 3);

  std::ostringstream log2;
  REQUIRE(cmd_train(cfg, out_b, log2) == 0);
  std::ifstream fa(out_a / "loss.csv"), fb(out_b / "loss.csv");
  const std::string ca((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
  const std::string cb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
  CHECK(ca == cb);

  SUBCASE("eval-ppl consumes the checkpoint") {
    std::string corpus_bytes;
    std::mt19937_64 rng(9);
    for (int i = 0; i < 2 * (32 + 16); ++i)
      corpus_bytes.push_back(static_cast<char>('a' + rng() % 26));
    const fs::path corpus = write_temp("treekv_eval_corpus.bin", corpus_bytes);
    // the snapshot's data section drives windowing: context 32 = 2 chunks of 16
    const fs::path override_cfg = write_temp(
        "treekv_eval_cfg.json",
        R"({
      "model": {"n_layers": 2, "m_layers": 1, "d_model": 32, "n_heads": 4, "mlp_hidden": 64,
                "vocab_size": 259},
      "tree": {"height": 2, "chunk_size": 16, "leaf_keep": "1/2"},
      "data": {"task": "copy", "pattern_len": 16, "repeats": 2, "running_len": 16,
               "context_len": 32}
    })");
    std::ostringstream report;
    REQUIRE(cmd_eval_ppl(out_a, corpus, false, override_cfg, report) == 0);
    const auto j = nlohmann::json::parse(report.str());
    CHECK(j.contains("ppl_with_context"));
    CHECK(j.contains("ppl_no_context"));
    CHECK(j["windows"] == 2);
    CHECK(j["ppl_no_context"].get<double>() > 0.0);

    std::ostringstream report2;
    REQUIRE(cmd_eval_ppl(out_a, corpus, true, override_cfg, report2) == 0);
    const auto j2 = nlohmann::json::parse(report2.str());
    CHECK(j2.contains("ppl_no_context"));
    CHECK_FALSE(j2.contains("ppl_with_context"));
    fs::remove(corpus);
    fs::remove(override_cfg);
  }

  fs::remove(cfg);
  fs::remove_all(out_a);
  fs::remove_all(out_b);
}

TEST_CASE("schedule_for_beta honors halving when possible, flat otherwise") {
  const CompressionSchedule s8 = schedule_for_beta(3, 8);
  CHECK(s8.at_level(1) == Fraction{1, 16});
  CHECK(s8.at_level(2) == Fraction{1, 8});
  CHECK(s8.at_level(3) == Fraction{1, 4});

  const CompressionSchedule s1 = schedule_for_beta(3, 1);
  for (int l = 1; l <= 3; ++l) CHECK(s1.at_level(l) == Fraction{1, 1});

  const CompressionSchedule s2 = schedule_for_beta(3, 2);
  for (int l = 1; l <= 3; ++l) CHECK(s2.at_level(l) == Fraction{1, 2});

  const CompressionSchedule s64 = schedule_for_beta(3, 64);
  CHECK(s64.at_level(3) == Fraction{1, 32});
}

TEST_CASE("bench command measures a small grid into well-formed CSV") {
  const std::string grid_json = R"({
    "base": {
      "model": {"n_layers": 2, "m_layers": 1, "d_model": 32, "n_heads": 4, "mlp_hidden": 64,
                "vocab_size": 259},
      "tree": {"height": 2, "chunk_size": 32},
      "data": {"context_len": 64, "running_len": 16}
    },
    "defaults": {"M": 1, "beta": 4, "h": 2, "query_aware": false},
    "axes": {"M": [1, 2], "query_aware": [true]},
    "warmup_runs": 1,
    "timed_runs": 3
  })";
  const fs::path grid = write_temp("treekv_grid.json", grid_json);
  const fs::path csv_path = fs::temp_directory_path() / "treekv_bench.csv";

  std::ostringstream out;
  REQUIRE(cmd_bench(grid, csv_path, out) == 0);
  std::ifstream csv(csv_path);
  std::string header;
  std::getline(csv, header);
  CHECK(header == "M,beta,h,query_aware,time_ms,peak_bytes");
  int rows = 0;
  for (std::string line; std::getline(csv, line);) {
    if (line.empty()) continue;
    ++rows;
    double time_ms = 0;
    long long peak = 0;
    int m = 0, beta = 0, h = 0, qa = 0;
    REQUIRE(std::sscanf(line.c_str(), "%d,%d,%d,%d,%lf,%lld", &m, &beta, &h, &qa, &time_ms,
                        &peak) == 6);
    CHECK(time_ms > 0.0);
    CHECK(peak > 0);
  }
  CHECK(rows == 3);  // default point, M=2, query-aware on
  fs::remove(grid);
  fs::remove(csv_path);
}
