#pragma once

#include <filesystem>
#include <optional>
#include <ostream>

#include "treekv/config.hpp"

namespace treekv {

/// Trains per the config; writes checkpoint (manifest.json + weights.bin), a
/// resolved-config snapshot, loss.csv (step,lr,loss) and, for synthetic
/// tasks, a held-out manifest (JSON lines) into out_dir.
int cmd_train(const std::filesystem::path& config_path, const std::filesystem::path& out_dir,
              std::ostream& out);

/// Perplexity over a corpus with and without context injection (epsilon = 0).
/// no_context restricts the report to the ablation. Reads the resolved config
/// from the checkpoint directory; config_override, when given, replaces it.
int cmd_eval_ppl(const std::filesystem::path& ckpt_dir, const std::filesystem::path& corpus,
                 bool no_context, const std::optional<std::filesystem::path>& config_override,
                 std::ostream& out);

/// Builds one context tree (epsilon = 0 unless the config enables noise) and
/// dumps it as JSON with its effective compression ratio. The chunk comes
/// from a file or is generated from the seed.
int cmd_inspect_tree(const std::filesystem::path& config_path, std::optional<std::uint64_t> seed,
                     const std::optional<std::filesystem::path>& file, std::ostream& out);

/// Runs the overhead benchmark grid and writes the CSV.
int cmd_bench(const std::filesystem::path& grid_path,
              const std::optional<std::filesystem::path>& out_csv, std::ostream& out);

}  // namespace treekv
