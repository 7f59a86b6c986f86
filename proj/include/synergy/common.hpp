#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace synergy {

// Error hierarchy. Every error thrown by the library derives from Error so
// callers (the CLI in particular) can map them onto exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataError : Error {
  using Error::Error;
};

struct SchemaError : DataError {
  using DataError::DataError;
};

struct SplitInfeasible : DataError {
  using DataError::DataError;
};

struct PlanInfeasible : DataError {
  using DataError::DataError;
};

struct TemplateError : Error {
  using Error::Error;
};

struct SequenceTooLong : Error {
  SequenceTooLong(std::size_t measured, std::size_t limit)
      : Error("sequence too long: " + std::to_string(measured) + " tokens > " +
              std::to_string(limit)),
        measured_length(measured) {}
  std::size_t measured_length;
};

struct ShapeError : Error {
  using Error::Error;
};

struct NumericalError : Error {
  explicit NumericalError(const std::string& op)
      : Error("non-finite value produced by " + op), op_name(op) {}
  std::string op_name;
};

struct MetricUndefined : Error {
  using Error::Error;
};

struct PretrainDataMissing : Error {
  using Error::Error;
};

struct EmptyTrainingSet : Error {
  using Error::Error;
};

// Versioned name of the pseudo-random generator. It is written into every
// manifest; changing the sampling code below must bump the suffix.
inline constexpr std::string_view kRngName = "mt19937_64/v1";

// Deterministic generator. std::mt19937_64 is bit-exact across standard
// libraries, the std:: distributions are not, so the derived draws are
// implemented here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  // Uniform integer in [0, n) by rejection sampling.
  std::size_t uniform_index(std::size_t n) {
    if (n == 0) throw std::invalid_argument("uniform_index: empty range");
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return static_cast<std::size_t>(x % bound);
  }

  // Uniform real in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; one variate per call.
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return mean + stddev * std::sqrt(-2.0 * std::log(u1)) *
                      std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[uniform_index(i)]);
    }
  }

  // Derive an independent seed for a named sub-stream.
  static std::uint64_t derive(std::uint64_t seed, std::string_view tag);

 private:
  std::mt19937_64 engine_;
};

inline std::uint64_t fnv1a64(std::string_view bytes,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t Rng::derive(std::uint64_t seed, std::string_view tag) {
  std::uint64_t h = fnv1a64(tag);
  h ^= seed + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  // splitmix64 finalizer
  h ^= h >> 30;
  h *= 0xbf58476d1ce4e5b9ULL;
  h ^= h >> 27;
  h *= 0x94d049bb133111ebULL;
  h ^= h >> 31;
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

// Render a real with at most `precision` fractional digits, trailing zeros
// trimmed. Rounding is round-half-even on the shortest decimal form that
// round-trips the double, so 0.0005-style ties are resolved as written.
inline std::string format_real(double value, int precision = 3) {
  if (!std::isfinite(value)) {
    return std::isnan(value) ? "nan" : (value > 0 ? "inf" : "-inf");
  }
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, value,
                           std::chars_format::fixed);
  std::string s(buf, res.ptr);

  bool negative = false;
  if (!s.empty() && s[0] == '-') {
    negative = true;
    s.erase(0, 1);
  }
  auto dot = s.find('.');
  std::string int_part = dot == std::string::npos ? s : s.substr(0, dot);
  std::string frac = dot == std::string::npos ? "" : s.substr(dot + 1);

  if (static_cast<int>(frac.size()) > precision) {
    const std::string kept = frac.substr(0, static_cast<std::size_t>(precision));
    const std::string rest = frac.substr(static_cast<std::size_t>(precision));
    int cmp;  // rest compared with "5000..."
    if (rest[0] > '5') {
      cmp = 1;
    } else if (rest[0] < '5') {
      cmp = -1;
    } else {
      cmp = rest.find_first_not_of('0', 1) == std::string::npos ? 0 : 1;
    }
    std::string digits = int_part + kept;
    bool round_up = cmp > 0;
    if (cmp == 0) {
      const int last = digits.back() - '0';
      round_up = (last % 2) == 1;
    }
    if (round_up) {
      int i = static_cast<int>(digits.size()) - 1;
      while (i >= 0) {
        if (digits[static_cast<std::size_t>(i)] == '9') {
          digits[static_cast<std::size_t>(i)] = '0';
          --i;
        } else {
          ++digits[static_cast<std::size_t>(i)];
          break;
        }
      }
      if (i < 0) digits.insert(digits.begin(), '1');
    }
    int_part = digits.substr(0, digits.size() - static_cast<std::size_t>(precision));
    frac = digits.substr(digits.size() - static_cast<std::size_t>(precision));
  }
  while (!frac.empty() && frac.back() == '0') frac.pop_back();
  std::string out = int_part.empty() ? "0" : int_part;
  if (!frac.empty()) out += "." + frac;
  if (negative && out != "0") out.insert(out.begin(), '-');
  return out;
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

// Strict numeric parse: the whole (trimmed) cell must be a finite real.
inline bool parse_real(std::string_view text, double& out) {
  const std::string t = trim(text);
  if (t.empty()) return false;
  const char* first = t.data();
  if (*first == '+') ++first;
  auto res = std::from_chars(first, t.data() + t.size(), out);
  return res.ec == std::errc() && res.ptr == t.data() + t.size();
}

}  // namespace synergy
