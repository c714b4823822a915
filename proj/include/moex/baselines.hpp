#ifndef MOEX_BASELINES_HPP_
#define MOEX_BASELINES_HPP_

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "moex/common.hpp"
#include "moex/evaluation.hpp"
#include "moex/exec_env.hpp"
#include "moex/market_data.hpp"

namespace moex {

/// Expected share of daily volume traded in each minute.
struct VolumeProfile {
  std::vector<double> fractions;
};

inline void validate(const VolumeProfile& p) {
  require(!p.fractions.empty(), "volume profile is empty");
  double s = 0.0;
  for (double f : p.fractions) {
    require(f >= 0.0, "volume profile entries must be non-negative");
    s += f;
  }
  require(std::abs(s - 1.0) <= 1e-12, "volume profile must sum to 1");
}

/// Pooled per-minute mean volume share over every asset-day.
inline VolumeProfile estimate_volume_profile(const std::vector<TradingDayData>& days) {
  require(!days.empty(), "cannot estimate a volume profile without data");
  const int m = days.front().minutes_per_day;
  std::vector<double> acc(static_cast<std::size_t>(m), 0.0);
  std::size_t count = 0;
  for (const auto& d : days) {
    require(d.minutes_per_day == m, "all days must have the same number of minutes");
    for (const auto& [asset, bars] : d.assets) {
      (void)asset;
      double total = 0.0;
      for (const auto& b : bars) total += b.volume;
      if (!(total > 0.0)) continue;
      for (std::size_t i = 0; i < bars.size(); ++i) acc[i] += bars[i].volume / total;
      ++count;
    }
  }
  require(count > 0, "no asset-day with positive volume");
  VolumeProfile p;
  p.fractions.resize(acc.size());
  double s = 0.0;
  for (std::size_t i = 0; i < acc.size(); ++i) s += (p.fractions[i] = acc[i] / static_cast<double>(count));
  for (double& f : p.fractions) f /= s;
  double head = 0.0;
  for (std::size_t i = 0; i + 1 < p.fractions.size(); ++i) head += p.fractions[i];
  p.fractions.back() = 1.0 - head;
  return p;
}

inline VolumeProfile uniform_profile(int minutes) {
  require(minutes >= 1, "profile needs at least one minute");
  VolumeProfile p;
  p.fractions.assign(static_cast<std::size_t>(minutes), 1.0 / minutes);
  return p;
}

namespace detail {
/// Scales weights to sum to `amount`; the last entry absorbs the rounding residue.
inline std::vector<double> allocate(double amount, const std::vector<double>& weights) {
  std::vector<double> out(weights.size());
  double head = 0.0;
  for (std::size_t i = 0; i + 1 < weights.size(); ++i) head += (out[i] = amount * weights[i]);
  out.back() = amount - head;
  return out;
}
}  // namespace detail

/// Equal volume in every minute; the entries sum to `amount`.
inline std::vector<double> twap_schedule(double amount, int minutes) {
  require(minutes >= 1, "minutes must be >= 1");
  return detail::allocate(amount, std::vector<double>(static_cast<std::size_t>(minutes), 1.0 / minutes));
}

/// Volume proportional to the profile; the entries sum to `amount`.
inline std::vector<double> vwap_schedule(double amount, const VolumeProfile& profile) {
  validate(profile);
  return detail::allocate(amount, profile.fractions);
}

struct ACParams {
  double risk_aversion = 1e-6;
  double temporary_impact = 2.5e-6;
  double permanent_impact = 0.0;
  double volatility_estimate = 0.0025;  // relative price volatility per step
};

inline void validate(const ACParams& p) {
  require(p.risk_aversion >= 0.0, "risk_aversion must be >= 0");
  require(p.temporary_impact > 0.0, "temporary_impact must be > 0");
  require(p.permanent_impact >= 0.0, "permanent_impact must be >= 0");
  require(p.volatility_estimate > 0.0, "volatility_estimate must be > 0");
  require(p.temporary_impact - 0.5 * p.permanent_impact > 0.0, "temporary impact must exceed half the permanent impact");
}

/// Urgency kappa of the discrete Almgren-Chriss solution (unit step length).
inline double ac_kappa(const ACParams& p) {
  validate(p);
  const double eta = p.temporary_impact - 0.5 * p.permanent_impact;
  const double k2 = p.risk_aversion * p.volatility_estimate * p.volatility_estimate / eta;
  return std::acosh(1.0 + 0.5 * k2);
}

/// Remaining inventory x_j = X sinh(kappa (T - j)) / sinh(kappa T), j = 0..T.
inline std::vector<double> ac_inventory(double amount, const ACParams& p, int steps) {
  require(steps >= 1, "steps must be >= 1");
  const double kappa = ac_kappa(p);
  std::vector<double> x(static_cast<std::size_t>(steps) + 1);
  for (int j = 0; j <= steps; ++j) {
    const double frac = kappa * steps < 1e-8 ? static_cast<double>(steps - j) / steps
                                            : std::sinh(kappa * (steps - j)) / std::sinh(kappa * steps);
    x[static_cast<std::size_t>(j)] = amount * frac;
  }
  x.front() = amount;
  x.back() = 0.0;
  return x;
}

/// Per-step volumes x_{j-1} - x_j; they sum to `amount`.
inline std::vector<double> ac_schedule(double amount, const ACParams& p, int steps) {
  const auto x = ac_inventory(amount, p, steps);
  std::vector<double> v(static_cast<std::size_t>(steps));
  for (int j = 1; j <= steps; ++j) v[static_cast<std::size_t>(j - 1)] = x[static_cast<std::size_t>(j - 1)] - x[static_cast<std::size_t>(j)];
  return v;
}

enum class BaselineKind { TWAP, VWAP, AC };

inline BaselineKind baseline_from_string(const std::string& s) {
  if (s == "twap") return BaselineKind::TWAP;
  if (s == "vwap") return BaselineKind::VWAP;
  if (s == "ac") return BaselineKind::AC;
  fail(ErrorKind::Usage, "unknown baseline '" + s + "' (expected twap, vwap or ac)");
}

struct BaselineParams {
  VolumeProfile profile;  // VWAP only
  ACParams ac;
};

/// Per-minute plan of one order for the whole day.
inline std::vector<double> minute_plan(BaselineKind kind, double amount, int minutes, int steps,
                                       const BaselineParams& params) {
  switch (kind) {
    case BaselineKind::TWAP: return twap_schedule(amount, minutes);
    case BaselineKind::VWAP:
      require(static_cast<int>(params.profile.fractions.size()) == minutes, "profile length must equal minutes per day");
      return vwap_schedule(amount, params.profile);
    case BaselineKind::AC: {
      const auto per_step = ac_schedule(amount, params.ac, steps);
      std::vector<double> plan(static_cast<std::size_t>(minutes), 0.0);
      for (int t = 1; t <= steps; ++t) {
        const int b = static_cast<int>((static_cast<long>(t) - 1) * minutes / steps);
        const int e = static_cast<int>(static_cast<long>(t) * minutes / steps);
        for (int m = b; m < e; ++m) plan[static_cast<std::size_t>(m)] = per_step[static_cast<std::size_t>(t - 1)] / (e - b);
      }
      return plan;
    }
  }
  return {};
}

/// Feeds a baseline's minute plan to the environment step by step. Volume
/// withheld by a cash cutoff is spread over the next step's minutes.
inline EpisodeOutcome run_baseline_episode(BaselineKind kind, const BaselineParams& params, const EnvConfig& env_cfg,
                                           const OrderSet& set, const TradingDayData& day) {
  ExecutionEnv env(env_cfg);
  env.reset(set, day);
  const std::size_t n = env.agent_count();
  const int minutes = day.minutes_per_day;
  std::vector<std::vector<double>> plans(n);
  for (std::size_t i = 0; i < n; ++i) plans[i] = minute_plan(kind, env.amount(i), minutes, env.timesteps(), params);
  std::vector<double> carry(n, 0.0);
  while (!env.done()) {
    const int t = env.current_step();
    const int b = env.step_begin(t), e = env.step_end(t);
    std::vector<std::vector<double>> step_volumes(n);
    std::vector<double> intended(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      step_volumes[i].assign(plans[i].begin() + b, plans[i].begin() + e);
      for (double& v : step_volumes[i]) v += carry[i] / (e - b);
      for (double v : step_volumes[i]) intended[i] += v;
    }
    StepResult r = env.step_schedule(step_volumes);
    for (std::size_t i = 0; i < n; ++i) {
      const double done = r.executed_fractions[i] * env.amount(i);
      carry[i] = std::max(intended[i] - done, 0.0);
    }
  }
  return summarize_episode(env, set);
}

inline MetricsReport evaluate_baseline(BaselineKind kind, const BaselineParams& params, const ExecutionDataset& data,
                                       const EnvConfig& env_cfg, int workers = 1, const std::string& digest = "") {
  require(!data.order_sets.empty(), "no order sets to evaluate");
  std::vector<EpisodeOutcome> out(data.order_sets.size());
  parallel_for(data.order_sets.size(), workers, [&](std::size_t i) {
    const auto& set = data.order_sets[i];
    out[i] = run_baseline_episode(kind, params, env_cfg, set, data.day_for(set));
  });
  return aggregate(out, digest);
}

}  // namespace moex

#endif  // MOEX_BASELINES_HPP_
