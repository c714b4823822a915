#ifndef MOEX_COMMON_HPP_
#define MOEX_COMMON_HPP_

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <iostream>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace moex {

enum class ErrorKind { Usage, Io, Parse, Precondition, Numeric };

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Usage: return "usage";
    case ErrorKind::Io: return "io";
    case ErrorKind::Parse: return "parse";
    case ErrorKind::Precondition: return "precondition";
    case ErrorKind::Numeric: return "numeric";
  }
  return "unknown";
}

/// Every failure raised by the library carries a category so the CLI can map
/// it onto an exit code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool condition, const std::string& what) {
  if (!condition) fail(ErrorKind::Precondition, what);
}

// ---------------------------------------------------------------------------
// Logging. Verbosity is read once from IAC_EXEC_LOG (error | info | debug).

enum class LogLevel { Error = 0, Info = 1, Debug = 2 };

inline LogLevel& log_level_ref() {
  static LogLevel level = [] {
    const char* env = std::getenv("IAC_EXEC_LOG");
    if (env == nullptr) return LogLevel::Info;
    std::string_view v(env);
    if (v == "error") return LogLevel::Error;
    if (v == "debug") return LogLevel::Debug;
    return LogLevel::Info;
  }();
  return level;
}

inline void set_log_level(LogLevel level) { log_level_ref() = level; }

inline void log(LogLevel level, const std::string& message) {
  if (static_cast<int>(level) > static_cast<int>(log_level_ref())) return;
  static constexpr const char* kTags[] = {"error", "info", "debug"};
  std::cerr << "[" << kTags[static_cast<int>(level)] << "] " << message << '\n';
}

// ---------------------------------------------------------------------------
// Randomness. All streams are std::mt19937_64 seeded through seed_seq so that
// (seed, stream id...) tuples give independent, reproducible generators.

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed, std::uint64_t a = 0, std::uint64_t b = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)};
  return Rng(seq);
}

/// Uniform double in [0, 1) built from the top 53 bits; unlike
/// std::uniform_real_distribution its output is fixed by the standard engine.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

/// Standard normal via Box-Muller on uniform01, for byte-stable generators.
inline double standard_normal(Rng& rng) {
  constexpr double kTwoPi = 6.283185307179586476925286766559;
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
}

/// FNV-1a over raw bytes; used for observation and config digests.
inline std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t h = 1469598103934665603ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace moex

#endif  // MOEX_COMMON_HPP_
