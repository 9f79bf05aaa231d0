#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>

namespace treekv {

// Exact rational arithmetic for keep fractions and compression ratios.
// Always stored in lowest terms with a positive denominator.
struct Fraction {
  std::int64_t num = 0;
  std::int64_t den = 1;

  Fraction() = default;
  Fraction(std::int64_t n, std::int64_t d) : num(n), den(d) { normalize(); }

  void normalize() {
    if (den == 0) throw std::invalid_argument("Fraction: zero denominator");
    if (den < 0) {
      num = -num;
      den = -den;
    }
    const std::int64_t g = std::gcd(num < 0 ? -num : num, den);
    if (g > 1) {
      num /= g;
      den /= g;
    }
  }

  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  Fraction half() const { return {num, den * 2}; }
  Fraction inverse() const {
    if (num == 0) throw std::invalid_argument("Fraction: inverse of zero");
    return {den, num};
  }

  bool operator==(const Fraction&) const = default;
  bool positive() const { return num > 0; }
  bool at_most_one() const { return num <= den; }

  std::string str() const {
    if (den == 1) return std::to_string(num);
    return std::to_string(num) + "/" + std::to_string(den);
  }

  // Accepts "3", "1/4", "-2/8" (normalized on construction).
  static Fraction parse(const std::string& s) {
    const auto slash = s.find('/');
    try {
      if (slash == std::string::npos) return {std::stoll(s), 1};
      return {std::stoll(s.substr(0, slash)), std::stoll(s.substr(slash + 1))};
    } catch (const std::exception&) {
      throw std::invalid_argument("Fraction: cannot parse '" + s + "'");
    }
  }
};

// floor(n * f) for non-negative n, exact in integer arithmetic.
inline std::int64_t floor_mul(std::int64_t n, const Fraction& f) {
  if (n < 0) throw std::invalid_argument("floor_mul: negative operand");
  return (n * f.num) / f.den;
}

}  // namespace treekv
