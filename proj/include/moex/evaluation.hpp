#ifndef MOEX_EVALUATION_HPP_
#define MOEX_EVALUATION_HPP_

#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "moex/common.hpp"
#include "moex/exec_env.hpp"
#include "moex/market_data.hpp"
#include "moex/policy.hpp"

namespace moex {

// ---------------------------------------------------------------------------
// Metric formulas

/// Execution gain in basis points: d * (aep - p~) / p~ * 1e4.
inline double execution_gain(double aep, double day_avg_price, int direction) {
  require(day_avg_price > 0.0, "day average price must be positive");
  return static_cast<double>(direction) * (aep - day_avg_price) / day_avg_price * 1e4;
}

/// Annualised return uplift (%) implied by an execution gain at a fixed daily turnover.
inline double arr_from_eg(double eg_bp, double daily_turnover = 0.10, int trading_days = 250) {
  return (std::pow(1.0 + eg_bp * 1e-4 * daily_turnover, trading_days) - 1.0) * 100.0;
}

/// Share of strictly positive gains.
inline double pos(const std::vector<double>& egs) {
  require(!egs.empty(), "pos of an empty result set");
  std::size_t k = 0;
  for (double e : egs) k += e > 0.0;
  return static_cast<double>(k) / static_cast<double>(egs.size());
}

/// Mean positive gain over mean magnitude of negative gains; absent unless both occur.
inline std::optional<double> glr(const std::vector<double>& egs) {
  double gain = 0.0, loss = 0.0;
  std::size_t ng = 0, nl = 0;
  for (double e : egs) {
    if (e > 0.0) {
      gain += e;
      ++ng;
    } else if (e < 0.0) {
      loss -= e;
      ++nl;
    }
  }
  if (ng == 0 || nl == 0) return std::nullopt;
  return (gain / static_cast<double>(ng)) / (loss / static_cast<double>(nl));
}

// ---------------------------------------------------------------------------
// Episode records

struct OrderResult {
  std::string date;
  std::string asset_id;
  int direction = 1;
  double amount = 0.0;
  double executed = 0.0;
  std::optional<double> aep;
  double average_price = 0.0;
  std::optional<double> eg_bp;
  bool fulfilled = true;
};

struct EpisodeOutcome {
  std::string date;
  std::vector<OrderResult> orders;
  int timesteps = 0;
  int zero_cash_steps = 0;
  bool violation = false;
};

/// Reads the per-order and cash outcomes of a finished episode.
inline EpisodeOutcome summarize_episode(const ExecutionEnv& env, const OrderSet& set) {
  require(env.done(), "episode not finished");
  EpisodeOutcome out;
  out.date = set.date;
  out.timesteps = env.timesteps();
  out.zero_cash_steps = env.zero_cash_steps();
  out.violation = env.fulfillment_violation();
  for (std::size_t i = 0; i < env.agent_count(); ++i) {
    OrderResult r;
    r.date = set.date;
    r.asset_id = set.orders[i].asset_id;
    r.direction = env.direction(i);
    r.amount = env.amount(i);
    r.executed = env.executed_total(i);
    r.aep = env.episode_aep(i);
    r.average_price = env.average_price(i);
    if (r.aep) r.eg_bp = execution_gain(*r.aep, r.average_price, r.direction);
    r.fulfilled = r.executed >= r.amount * (1.0 - 1e-12);
    out.orders.push_back(std::move(r));
  }
  return out;
}

/// Percentage of steps whose closing cash balance is exactly zero, averaged over episodes.
inline double toc(const std::vector<EpisodeOutcome>& episodes) {
  if (episodes.empty()) return 0.0;
  double s = 0.0;
  for (const auto& e : episodes) s += static_cast<double>(e.zero_cash_steps) / e.timesteps;
  return 100.0 * s / static_cast<double>(episodes.size());
}

struct MetricsReport {
  double eg_bp = 0.0;              // mean EG over every order with an execution price
  double eg_bp_fulfilled = 0.0;    // mean EG over fulfilled orders only
  double arr_pct = 0.0;
  double pos = 0.0;
  std::optional<double> glr;
  double toc_pct = 0.0;
  double violation_rate = 0.0;     // share of orders left unfulfilled
  std::size_t order_count = 0;
  std::size_t episode_count = 0;
  std::vector<OrderResult> orders;
  std::string config_digest;
};

inline MetricsReport aggregate(const std::vector<EpisodeOutcome>& episodes, const std::string& digest = "") {
  MetricsReport r;
  r.config_digest = digest;
  r.episode_count = episodes.size();
  std::vector<double> all, fulfilled;
  std::size_t unfulfilled = 0;
  for (const auto& e : episodes) {
    for (const auto& o : e.orders) {
      r.orders.push_back(o);
      if (!o.fulfilled) ++unfulfilled;
      if (!o.eg_bp) continue;
      all.push_back(*o.eg_bp);
      if (o.fulfilled) fulfilled.push_back(*o.eg_bp);
    }
  }
  r.order_count = r.orders.size();
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
  };
  r.eg_bp = mean(all);
  r.eg_bp_fulfilled = mean(fulfilled);
  r.arr_pct = arr_from_eg(r.eg_bp);
  r.pos = all.empty() ? 0.0 : pos(all);
  r.glr = glr(all);
  r.toc_pct = toc(episodes);
  r.violation_rate = r.order_count ? static_cast<double>(unfulfilled) / static_cast<double>(r.order_count) : 0.0;
  return r;
}

// ---------------------------------------------------------------------------
// Running policies

struct EvalOptions {
  ActMode mode = ActMode::Greedy;
  /// Round whose intention is executed; 0 means the final round K.
  int executed_round = 0;
  int workers = 1;
  std::uint64_t seed = 0;  // only used in Sample mode
  std::string config_digest;
};

/// Per-round accumulators of |a_k - a_{k-1}| over decisions that affect the outcome.
struct RoundDiffs {
  std::vector<double> sum;
  std::size_t count = 0;
};

inline bool decision_free(const AgentObservation& o) {
  return o.elapsed_fraction >= 1.0 || o.cumulative_fraction() >= 1.0 - 1e-9;
}

inline EpisodeOutcome run_policy_episode(const Policy& policy, const EnvConfig& env_cfg, const OrderSet& set,
                                         const TradingDayData& day, const EvalOptions& opt, Rng* rng,
                                         RoundDiffs* diffs = nullptr) {
  ExecutionEnv env(env_cfg);
  std::vector<AgentObservation> obs = env.reset(set, day);
  RecurrentState carry;
  const int K = policy.rounds();
  const int k_exec = opt.executed_round <= 0 ? K : opt.executed_round;
  require(k_exec <= K, "executed round exceeds the policy's rounds");
  const auto& fr = policy.config().action_fractions;
  while (!env.done()) {
    IntentionTrace tr = policy.forward_timestep(obs, opt.mode, rng, &carry);
    if (diffs != nullptr) {
      if (diffs->sum.empty()) diffs->sum.assign(static_cast<std::size_t>(std::max(K - 1, 0)), 0.0);
      for (std::size_t i = 0; i < obs.size(); ++i) {
        if (decision_free(obs[i])) continue;
        for (int k = 2; k <= K; ++k)
          diffs->sum[static_cast<std::size_t>(k - 2)] +=
              std::abs(fr[static_cast<std::size_t>(tr.actions[k][i])] - fr[static_cast<std::size_t>(tr.actions[k - 1][i])]);
        ++diffs->count;
      }
    }
    const auto& a = tr.actions[static_cast<std::size_t>(k_exec)];
    std::vector<std::size_t> idx(a.begin(), a.end());
    obs = env.step(idx).next_observations;
  }
  return summarize_episode(env, set);
}

/// Runs f(i) for i in [0, count) over `workers` threads; results land in order.
template <typename F>
void parallel_for(std::size_t count, int workers, F&& f) {
  const auto w = static_cast<std::size_t>(std::max(1, workers));
  if (w == 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) f(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(w);
  for (std::size_t t = 0; t < w; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < count; i += w) f(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline std::vector<EpisodeOutcome> run_policy(const Policy& policy, const ExecutionDataset& data, const EnvConfig& env_cfg,
                                              const EvalOptions& opt, RoundDiffs* diffs = nullptr) {
  std::vector<EpisodeOutcome> out(data.order_sets.size());
  std::vector<RoundDiffs> per(data.order_sets.size());
  parallel_for(data.order_sets.size(), opt.workers, [&](std::size_t i) {
    Rng rng = make_rng(opt.seed, 0xE7A1, i);
    const auto& set = data.order_sets[i];
    out[i] = run_policy_episode(policy, env_cfg, set, data.day_for(set), opt, &rng, diffs ? &per[i] : nullptr);
  });
  if (diffs != nullptr) {
    for (const auto& p : per) {
      if (diffs->sum.empty()) diffs->sum.assign(p.sum.size(), 0.0);
      for (std::size_t k = 0; k < p.sum.size(); ++k) diffs->sum[k] += p.sum[k];
      diffs->count += p.count;
    }
  }
  return out;
}

inline MetricsReport evaluate_policy(const Policy& policy, const ExecutionDataset& data, const EnvConfig& env_cfg,
                                     const EvalOptions& opt = {}) {
  require(!data.order_sets.empty(), "no order sets to evaluate");
  return aggregate(run_policy(policy, data, env_cfg, opt), opt.config_digest);
}

inline MetricsReport evaluate_policy(const std::filesystem::path& checkpoint, const ExecutionDataset& data,
                                     const EnvConfig& env_cfg, const EvalOptions& opt = {}) {
  Policy p = load_policy(checkpoint);
  require(p.config().action_fractions == env_cfg.action_fractions,
          "checkpoint action grid does not match the environment configuration");
  return evaluate_policy(p, data, env_cfg, opt);
}

struct RoundwiseReport {
  std::vector<MetricsReport> rounds;  // index k-1 holds the report for executing a_k
};

/// Executes a_k as the final action for every k in 1..K.
inline RoundwiseReport evaluate_rounds(const Policy& policy, const ExecutionDataset& data, const EnvConfig& env_cfg,
                                       EvalOptions opt = {}) {
  require(policy.rounds() >= 2, "round-wise evaluation needs K >= 2");
  RoundwiseReport r;
  for (int k = 1; k <= policy.rounds(); ++k) {
    opt.executed_round = k;
    r.rounds.push_back(evaluate_policy(policy, data, env_cfg, opt));
  }
  return r;
}

/// Mean |a_k - a_{k-1}| in traded fraction for k = 2..K (length K-1).
inline std::vector<double> round_convergence(const Policy& policy, const ExecutionDataset& data,
                                             const EnvConfig& env_cfg, EvalOptions opt = {}) {
  require(policy.rounds() >= 2, "round convergence needs K >= 2");
  opt.executed_round = 0;
  RoundDiffs d;
  run_policy(policy, data, env_cfg, opt, &d);
  std::vector<double> out(static_cast<std::size_t>(policy.rounds() - 1), 0.0);
  if (d.count == 0) return out;
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = d.sum[k] / static_cast<double>(d.count);
  return out;
}

// ---------------------------------------------------------------------------
// Reports

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json j = {{"eg_bp", r.eg_bp},
                      {"eg_bp_fulfilled", r.eg_bp_fulfilled},
                      {"arr_pct", r.arr_pct},
                      {"pos", r.pos},
                      {"glr", r.glr ? nlohmann::json(*r.glr) : nlohmann::json(nullptr)},
                      {"toc_pct", r.toc_pct},
                      {"violation_rate", r.violation_rate},
                      {"orders", r.order_count},
                      {"episodes", r.episode_count},
                      {"config_digest", r.config_digest}};
  return j;
}

inline std::string fmt_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

/// One row per order.
inline void write_orders_csv(std::ostream& out, const MetricsReport& r) {
  out << "date,asset_id,direction,amount,executed,aep,average_price,eg_bp,fulfilled\n";
  for (const auto& o : r.orders) {
    out << o.date << ',' << o.asset_id << ',' << o.direction << ',' << fmt_num(o.amount) << ','
        << fmt_num(o.executed) << ',' << (o.aep ? fmt_num(*o.aep) : "") << ',' << fmt_num(o.average_price) << ','
        << (o.eg_bp ? fmt_num(*o.eg_bp) : "") << ',' << (o.fulfilled ? 1 : 0) << '\n';
  }
}

inline const char* kSummaryHeader = "eg_bp,arr_pct,pos,glr,toc_pct,violation_rate";

inline std::string summary_row(const MetricsReport& r) {
  return fmt_num(r.eg_bp) + ',' + fmt_num(r.arr_pct) + ',' + fmt_num(r.pos) + ',' + (r.glr ? fmt_num(*r.glr) : "") +
         ',' + fmt_num(r.toc_pct) + ',' + fmt_num(r.violation_rate);
}

/// Writes orders.csv, summary.csv and summary.json into `dir`.
inline void write_report(const std::filesystem::path& dir, const MetricsReport& r) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "orders.csv");
    if (!out) fail(ErrorKind::Io, "cannot write " + (dir / "orders.csv").string());
    write_orders_csv(out, r);
  }
  {
    std::ofstream out(dir / "summary.csv");
    out << kSummaryHeader << '\n' << summary_row(r) << '\n';
  }
  std::ofstream out(dir / "summary.json");
  out << to_json(r).dump(2) << '\n';
  if (!out) fail(ErrorKind::Io, "cannot write report in " + dir.string());
}

}  // namespace moex

#endif  // MOEX_EVALUATION_HPP_
