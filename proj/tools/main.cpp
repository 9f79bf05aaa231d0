#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "treekv/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"context-tree KV compression with cross-attention injection"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "run";
  auto* train = app.add_subcommand("train", "train on the configured task");
  train->add_option("--config", config_path, "run config JSON")->required();
  train->add_option("--out", out_dir, "output directory (checkpoint, loss.csv)");

  std::string ckpt, corpus, eval_config;
  bool no_context = false;
  auto* eval = app.add_subcommand("eval-ppl", "perplexity over a byte corpus");
  eval->add_option("--ckpt", ckpt, "checkpoint directory")->required();
  eval->add_option("--corpus", corpus, "raw byte corpus file")->required();
  eval->add_flag("--no-context", no_context, "score only the no-injection ablation");
  eval->add_option("--config", eval_config, "override the checkpoint's config snapshot");

  std::string tree_config, tree_file;
  std::optional<std::uint64_t> tree_seed;
  auto* inspect = app.add_subcommand("inspect-tree", "dump one context tree as JSON");
  inspect->add_option("--config", tree_config, "run config JSON")->required();
  inspect->add_option("--seed", tree_seed, "seed for the generated chunk");
  inspect->add_option("--file", tree_file, "take the chunk from this file instead");

  std::string grid_path, bench_out;
  auto* bench = app.add_subcommand("bench", "forward-overhead benchmark grid");
  bench->add_option("--grid", grid_path, "grid JSON")->required();
  bench->add_option("--out", bench_out, "write CSV here instead of stdout");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return treekv::cmd_train(config_path, out_dir, std::cout);
    if (*eval)
      return treekv::cmd_eval_ppl(
          ckpt, corpus, no_context,
          eval_config.empty() ? std::nullopt
                              : std::optional<std::filesystem::path>(eval_config),
          std::cout);
    if (*inspect)
      return treekv::cmd_inspect_tree(
          tree_config, tree_seed,
          tree_file.empty() ? std::nullopt : std::optional<std::filesystem::path>(tree_file),
          std::cout);
    if (*bench)
      return treekv::cmd_bench(
          grid_path,
          bench_out.empty() ? std::nullopt : std::optional<std::filesystem::path>(bench_out),
          std::cout);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
