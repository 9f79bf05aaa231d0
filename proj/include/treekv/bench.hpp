#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "treekv/config.hpp"

namespace treekv {

/// One measured grid point of the forward-overhead benchmark.
struct BenchRow {
  int m = 0;
  std::int64_t beta = 0;
  int height = 0;
  bool query_aware = false;
  double time_ms = 0.0;
  std::int64_t peak_bytes = 0;
};

/// Paper-style one-factor-at-a-time grid: every axis value is measured with
/// the other factors held at their defaults.
struct BenchGrid {
  RunConfig base;  // model dims, chunk size, lengths
  int default_m = 2;
  std::int64_t default_beta = 8;
  int default_height = 3;
  bool default_query_aware = false;
  std::vector<int> m_values;
  std::vector<std::int64_t> beta_values;
  std::vector<int> height_values;
  std::vector<bool> query_aware_values;
  int warmup_runs = 2;
  int timed_runs = 5;

  static BenchGrid load_file(const std::filesystem::path& path);
};

/// Levelwise schedule achieving global ratio beta at the given height via the
/// halving rule; for small beta where that cannot fit, the same ratio is used
/// on every level instead.
CompressionSchedule schedule_for_beta(int height, std::int64_t beta);
Fraction leaf_keep_for_beta(int height, std::int64_t beta);

/// Runs every grid point serially; each measurement is the median of
/// timed_runs full forwards (context encoding + bundle + decoder) after
/// warmup_runs discarded runs. peak_bytes is the instrumented live-tensor
/// high-water mark, not OS RSS.
std::vector<BenchRow> run_bench(const BenchGrid& grid);

std::string bench_csv(const std::vector<BenchRow>& rows);

}  // namespace treekv
