#include "treekv/tree.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace treekv {

const Fraction& CompressionSchedule::at_level(int level) const {
  if (level < 1 || level > height())
    throw std::invalid_argument("CompressionSchedule: level " + std::to_string(level) +
                                " outside [1," + std::to_string(height()) + "]");
  return keep_fractions[static_cast<std::size_t>(level - 1)];
}

CompressionSchedule make_schedule(int height, Fraction leaf_keep) {
  if (height < 1) throw std::invalid_argument("make_schedule: height must be >= 1");
  if (!leaf_keep.positive() || !leaf_keep.at_most_one())
    throw std::invalid_argument("make_schedule: leaf keep fraction must be in (0,1], got " +
                                leaf_keep.str());
  CompressionSchedule s;
  s.keep_fractions.resize(static_cast<std::size_t>(height));
  s.keep_fractions[static_cast<std::size_t>(height - 1)] = leaf_keep;
  for (int level = height - 1; level >= 1; --level)
    s.keep_fractions[static_cast<std::size_t>(level - 1)] =
        s.keep_fractions[static_cast<std::size_t>(level)].half();
  return s;
}

CompressionSchedule flat_schedule(int height, Fraction keep) {
  if (height < 1) throw std::invalid_argument("flat_schedule: height must be >= 1");
  if (!keep.positive() || !keep.at_most_one())
    throw std::invalid_argument("flat_schedule: keep fraction must be in (0,1], got " + keep.str());
  CompressionSchedule s;
  s.keep_fractions.assign(static_cast<std::size_t>(height), keep);
  return s;
}

std::int64_t ContextTreeResult::total_kept() const {
  std::int64_t n = 0;
  for (const auto& p : preserved) n += p.kept_length;
  return n;
}

Side policy_deterministic() { return Side::right; }

SplitPolicy deterministic_policy() {
  return [](std::span<const TokenId>, std::span<const TokenId>) { return policy_deterministic(); };
}

namespace {

double vec_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double vec_dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

Side policy_query_aware(std::span<const double> h_left, std::span<const double> h_right,
                        std::span<const double> h_query) {
  if (h_left.size() != h_right.size() || h_left.size() != h_query.size())
    throw std::invalid_argument("policy_query_aware: representation dimensions disagree");
  const double nl = vec_norm(h_left), nr = vec_norm(h_right), nq = vec_norm(h_query);
  if (nl == 0.0 || nr == 0.0 || nq == 0.0)
    throw std::invalid_argument("policy_query_aware: zero-norm representation");
  const double cos_left = vec_dot(h_left, h_query) / (nl * nq);
  const double cos_right = vec_dot(h_right, h_query) / (nr * nq);
  return cos_left > cos_right ? Side::left : Side::right;
}

std::pair<TreeNode, TreeNode> split_node(const TreeNode& node, double epsilon) {
  if (node.length < 2)
    throw std::invalid_argument("split_node: cannot split node of length " +
                                std::to_string(node.length));
  std::int64_t b = static_cast<std::int64_t>(
      std::floor(static_cast<double>(node.length) / 2.0 - epsilon));
  b = std::clamp<std::int64_t>(b, 1, node.length - 1);
  TreeNode left{node.start, b, node.level + 1};
  TreeNode right{node.start + b, node.length - b, node.level + 1};
  return {left, right};
}

namespace {

std::span<const TokenId> node_tokens(const TokenChunk& chunk, const TreeNode& node) {
  const auto rel = static_cast<std::size_t>(node.start - chunk.offset);
  return std::span<const TokenId>(chunk.tokens).subspan(rel, static_cast<std::size_t>(node.length));
}

PreservedNode make_preserved(const TreeNode& node, const Fraction& keep) {
  PreservedNode p;
  p.node = node;
  p.keep_fraction = keep;
  p.kept_length = std::max<std::int64_t>(1, floor_mul(node.length, keep));
  return p;
}

}  // namespace

ContextTreeResult build_and_search(const TokenChunk& chunk, const TreeBuildConfig& cfg,
                                   const CompressionSchedule& schedule, const SplitPolicy& policy,
                                   std::uint64_t seed) {
  const int h = cfg.height;
  if (h < 1) throw std::invalid_argument("build_and_search: height must be >= 1");
  if (schedule.height() != h)
    throw std::invalid_argument("build_and_search: schedule covers " +
                                std::to_string(schedule.height()) + " levels, tree height is " +
                                std::to_string(h));
  if (chunk.length() < (std::int64_t{1} << h))
    throw std::invalid_argument("build_and_search: chunk of length " +
                                std::to_string(chunk.length()) + " too short for height " +
                                std::to_string(h) + " (needs >= " +
                                std::to_string(std::int64_t{1} << h) + ")");

  std::mt19937_64 rng(seed);
  ContextTreeResult res;
  res.chunk = chunk;
  res.height = h;

  TreeNode current{chunk.offset, chunk.length(), 0};
  for (int i = 0; i < h; ++i) {
    if (i < h - 1) {
      double epsilon = 0.0;
      if (cfg.noise) {
        const double base = cfg.sigma_base == SigmaBase::node_length
                                ? static_cast<double>(current.length)
                                : static_cast<double>(current.length) / 2.0;
        std::normal_distribution<double> dist(0.0, base / cfg.gamma);
        epsilon = dist(rng);
      }
      auto [left, right] = split_node(current, epsilon);
      const Side side = policy(node_tokens(chunk, left), node_tokens(chunk, right));
      res.selected_path.push_back(side);
      const TreeNode& sibling = side == Side::left ? right : left;
      res.preserved.push_back(make_preserved(sibling, schedule.at_level(i + 1)));
      current = side == Side::left ? left : right;
    } else {
      // final level: both children preserved, split without noise
      auto [left, right] = split_node(current, 0.0);
      res.preserved.push_back(make_preserved(left, schedule.at_level(h)));
      res.preserved.push_back(make_preserved(right, schedule.at_level(h)));
    }
  }

  std::sort(res.preserved.begin(), res.preserved.end(),
            [](const PreservedNode& a, const PreservedNode& b) { return a.node.start < b.node.start; });
  return res;
}

Fraction effective_beta(const ContextTreeResult& result) {
  const std::int64_t kept = result.total_kept();
  if (kept <= 0) throw std::invalid_argument("effective_beta: no kept positions");
  return {result.chunk.length(), kept};
}

std::vector<std::int64_t> downsample_indices(std::int64_t length, const Fraction& keep_fraction) {
  if (length < 1) throw std::invalid_argument("downsample_indices: length must be >= 1");
  if (!keep_fraction.positive() || !keep_fraction.at_most_one())
    throw std::invalid_argument("downsample_indices: keep fraction must be in (0,1], got " +
                                keep_fraction.str());
  const std::int64_t kept = std::max<std::int64_t>(1, floor_mul(length, keep_fraction));
  std::vector<std::int64_t> idx(static_cast<std::size_t>(kept));
  for (std::int64_t j = 0; j < kept; ++j)
    idx[static_cast<std::size_t>(j)] = ((j + 1) * length) / kept - 1;  // last index of each block
  return idx;
}

std::string tree_to_json(const ContextTreeResult& result) {
  nlohmann::json j;
  j["chunk_start"] = result.chunk.offset;
  j["chunk_len"] = result.chunk.length();
  j["height"] = result.height;
  j["selected_path"] = nlohmann::json::array();
  for (Side s : result.selected_path) j["selected_path"].push_back(side_name(s));
  j["preserved"] = nlohmann::json::array();
  for (const auto& p : result.preserved) {
    j["preserved"].push_back({{"start", p.node.start},
                              {"len", p.node.length},
                              {"level", p.node.level},
                              {"keep_fraction", p.keep_fraction.value()},
                              {"kept_len", p.kept_length}});
  }
  j["beta"] = effective_beta(result).value();
  return j.dump(2);
}

}  // namespace treekv
