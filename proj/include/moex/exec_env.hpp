#ifndef MOEX_EXEC_ENV_HPP_
#define MOEX_EXEC_ENV_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "moex/common.hpp"
#include "moex/market_data.hpp"

namespace moex {

struct EnvConfig {
  int timesteps = 8;
  std::vector<double> action_fractions{0.0, 0.25, 0.5, 0.75, 1.0};
  double alpha = 0.01;
  double sigma = 1.0 / 30.0;
  double gamma = 1.0;

  std::size_t action_count() const { return action_fractions.size(); }
};

inline void validate(const EnvConfig& c) {
  require(c.timesteps >= 1, "timesteps must be >= 1");
  const auto& a = c.action_fractions;
  require(a.size() >= 2, "action_fractions needs at least {0, 1}");
  require(a.front() == 0.0 && a.back() == 1.0, "action_fractions must start at 0 and end at 1");
  for (std::size_t i = 1; i < a.size(); ++i) require(a[i] > a[i - 1], "action_fractions must be sorted and unique");
  require(c.alpha >= 0.0 && c.sigma >= 0.0, "penalty coefficients must be non-negative");
  require(c.gamma >= 0.0 && c.gamma <= 1.0, "gamma must lie in [0,1]");
}

/// What agent i sees at the beginning of step t. Market history covers only
/// minutes strictly before the step's first minute.
struct AgentObservation {
  double elapsed_fraction = 0.0;
  std::vector<double> cash_history;           // c_0..c_{t-1}, divided by c_0 (or 1 when c_0 = 0)
  std::vector<double> traded_volume_history;  // q_s / M per past step
  std::vector<double> market_prices;          // p_m / first price of the day
  std::vector<double> market_volumes;         // v_m / first volume of the day
  int direction = 1;

  double cumulative_fraction() const {
    double s = 0.0;
    for (double q : traded_volume_history) s += q;
    return s;
  }
  double last_cash() const { return cash_history.empty() ? 0.0 : cash_history.back(); }

  std::uint64_t digest() const {
    std::uint64_t h = fnv1a(&elapsed_fraction, sizeof(double));
    h = fnv1a(&direction, sizeof(int), h);
    for (const auto* v : {&cash_history, &traded_volume_history, &market_prices, &market_volumes})
      h = fnv1a(v->data(), v->size() * sizeof(double), h);
    return h;
  }
};

struct CashLedger {
  std::vector<double> balance_history;  // c_0..c_t
  std::vector<bool> conflict_flags;     // per executed step: cutoff applied
};

struct CashCutoff {
  std::vector<double> executed_volumes;
  double cash_after = 0.0;
  bool conflict = false;
  double scale = 1.0;
};

/// Liquidations always execute. Acquisitions are scaled uniformly by
/// (cash_before + inflow) / outflow when they would overdraw the account, in
/// which case the balance lands at exactly zero.
inline CashCutoff apply_cash_constraint(std::span<const double> intended_volumes, std::span<const double> step_prices,
                                        std::span<const int> directions, double cash_before) {
  require(intended_volumes.size() == step_prices.size() && intended_volumes.size() == directions.size(),
          "apply_cash_constraint: length mismatch");
  double inflow = 0.0, outflow = 0.0;
  for (std::size_t i = 0; i < intended_volumes.size(); ++i) {
    require(intended_volumes[i] >= 0.0, "apply_cash_constraint: negative volume");
    const double notional = step_prices[i] * intended_volumes[i];
    (directions[i] > 0 ? inflow : outflow) += notional;
  }
  CashCutoff out;
  out.executed_volumes.assign(intended_volumes.begin(), intended_volumes.end());
  const double available = cash_before + inflow;
  if (outflow <= available) {
    out.cash_after = available - outflow;
    return out;
  }
  out.scale = available / outflow;
  for (std::size_t i = 0; i < intended_volumes.size(); ++i)
    if (directions[i] < 0) out.executed_volumes[i] *= out.scale;
  out.cash_after = 0.0;
  out.conflict = true;
  return out;
}

struct RewardParts {
  double execution = 0.0;  // R_e
  double impact = 0.0;     // R_a
  double cash = 0.0;       // R_c
  double total() const { return execution + impact + cash; }
};

struct StepResult {
  int step = 0;  // 1-based step that was executed
  std::vector<double> proposed_fractions;
  std::vector<double> executed_fractions;
  std::vector<double> execution_prices;
  std::vector<RewardParts> reward_parts;
  std::vector<double> agent_rewards;
  double shared_reward = 0.0;
  std::vector<AgentObservation> next_observations;
  double cash_after = 0.0;
  bool done = false;
  bool cash_conflict = false;
  bool fulfillment_violation = false;
};

/// Multi-order execution over one trading day split into T equal steps. Each
/// step's volume is spread evenly over its minutes (TWAP sub-policy) unless a
/// per-minute schedule is supplied.
class ExecutionEnv {
 public:
  explicit ExecutionEnv(EnvConfig config) : config_(std::move(config)) { validate(config_); }

  const EnvConfig& config() const { return config_; }

  std::vector<AgentObservation> reset(const OrderSet& orders, const TradingDayData& day) {
    require(!orders.orders.empty(), "order set is empty");
    require(orders.initial_cash >= 0.0, "initial cash must be non-negative");
    require(day.minutes_per_day >= config_.timesteps, "fewer minutes than timesteps");
    agents_.clear();
    for (const auto& o : orders.orders) {
      if (!day.has_asset(o.asset_id)) fail(ErrorKind::Precondition, "asset " + o.asset_id + " absent on " + day.date);
      require(o.direction == 1 || o.direction == -1, "direction must be +1 or -1");
      require(o.amount > 0.0, "order amount must be positive");
      Agent a;
      a.direction = o.direction;
      a.amount = o.amount;
      a.prices = day.prices(o.asset_id);
      a.volumes = day.volumes(o.asset_id);
      double sum = 0.0;
      for (double p : a.prices) sum += p;
      a.average_price = sum / static_cast<double>(a.prices.size());
      agents_.push_back(std::move(a));
    }
    minutes_ = day.minutes_per_day;
    initial_cash_ = orders.initial_cash;
    cash_scale_ = initial_cash_ > 0.0 ? initial_cash_ : 1.0;
    ledger_ = CashLedger{{initial_cash_}, {}};
    step_ = 1;
    done_ = false;
    violation_ = false;
    trace_.clear();
    return observations();
  }

  std::size_t agent_count() const { return agents_.size(); }
  int timesteps() const { return config_.timesteps; }
  int current_step() const { return step_; }
  bool done() const { return done_; }
  const CashLedger& ledger() const { return ledger_; }
  double initial_cash() const { return initial_cash_; }
  bool fulfillment_violation() const { return violation_; }

  int direction(std::size_t i) const { return agents_.at(i).direction; }
  double amount(std::size_t i) const { return agents_.at(i).amount; }
  double average_price(std::size_t i) const { return agents_.at(i).average_price; }
  const std::vector<double>& minute_prices(std::size_t i) const { return agents_.at(i).prices; }
  const std::vector<double>& minute_volumes(std::size_t i) const { return agents_.at(i).volumes; }
  const std::vector<double>& executed_volumes(std::size_t i) const { return agents_.at(i).executed; }
  const std::vector<double>& execution_prices(std::size_t i) const { return agents_.at(i).exec_prices; }
  double executed_total(std::size_t i) const { return agents_.at(i).executed_sum; }
  double remaining_volume(std::size_t i) const {
    const auto& a = agents_.at(i);
    return std::max(a.amount - a.executed_sum, 0.0);
  }

  /// First minute and one-past-last minute of 1-based step t.
  int step_begin(int t) const { return static_cast<int>((static_cast<long>(t) - 1) * minutes_ / config_.timesteps); }
  int step_end(int t) const { return static_cast<int>(static_cast<long>(t) * minutes_ / config_.timesteps); }

  /// Proposal clipped to what is left of the order; the last step takes the
  /// whole remainder regardless of the proposal.
  double legal_fraction(std::size_t agent, double proposed_fraction) const {
    require(!done_, "legal_fraction after episode end");
    const auto& a = agents_.at(agent);
    const double remaining = std::max(a.amount - a.executed_sum, 0.0) / a.amount;
    if (step_ == config_.timesteps) return remaining;
    return std::clamp(proposed_fraction, 0.0, remaining);
  }

  /// Observations for the current step; empty once the episode is done.
  std::vector<AgentObservation> observations() const {
    std::vector<AgentObservation> out;
    if (done_) return out;
    const int t = step_;
    const auto upto = static_cast<std::size_t>(step_begin(t));
    std::vector<double> cash(ledger_.balance_history.begin(), ledger_.balance_history.begin() + t);
    for (double& c : cash) c /= cash_scale_;
    for (const auto& a : agents_) {
      AgentObservation o;
      o.elapsed_fraction = static_cast<double>(t) / config_.timesteps;
      o.cash_history = cash;
      o.direction = a.direction;
      for (double q : a.executed) o.traded_volume_history.push_back(q / a.amount);
      o.market_prices.resize(upto);
      o.market_volumes.resize(upto);
      if (upto > 0) {
        const double p0 = a.prices[0];
        const double v0 = a.volumes[0] > 0.0 ? a.volumes[0] : 1.0;
        for (std::size_t m = 0; m < upto; ++m) {
          o.market_prices[m] = a.prices[m] / p0;
          o.market_volumes[m] = a.volumes[m] / v0;
        }
      }
      out.push_back(std::move(o));
    }
    return out;
  }

  StepResult step(std::span<const std::size_t> action_indices) {
    std::vector<double> fractions(action_indices.size());
    for (std::size_t i = 0; i < action_indices.size(); ++i) {
      require(action_indices[i] < config_.action_fractions.size(), "action index out of range");
      fractions[i] = config_.action_fractions[action_indices[i]];
    }
    return step_fractions(fractions);
  }

  /// Arbitrary proposed fractions of M, legalised and spread evenly over the step.
  StepResult step_fractions(std::span<const double> proposed) {
    check_step(proposed.size());
    std::vector<double> volumes(agents_.size()), prices(agents_.size());
    const int b = step_begin(step_), e = step_end(step_);
    for (std::size_t i = 0; i < agents_.size(); ++i) {
      const auto& a = agents_[i];
      volumes[i] = step_ == config_.timesteps ? remaining_volume(i) : legal_fraction(i, proposed[i]) * a.amount;
      prices[i] = mean_price(a, b, e);
    }
    return execute(proposed, volumes, prices);
  }

  /// Per-minute volumes for each agent over the current step's minutes (as
  /// used by schedule baselines). Totals are clipped to the remaining amount;
  /// the execution price is the volume-weighted minute price.
  StepResult step_schedule(const std::vector<std::vector<double>>& minute_volumes) {
    check_step(minute_volumes.size());
    const int b = step_begin(step_), e = step_end(step_);
    std::vector<double> volumes(agents_.size()), prices(agents_.size()), proposed(agents_.size());
    for (std::size_t i = 0; i < agents_.size(); ++i) {
      const auto& a = agents_[i];
      const auto& mv = minute_volumes[i];
      require(static_cast<int>(mv.size()) == e - b, "schedule must cover the step's minutes");
      double total = 0.0, weighted = 0.0;
      for (int m = b; m < e; ++m) {
        const double v = mv[static_cast<std::size_t>(m - b)];
        require(v >= 0.0, "schedule volumes must be non-negative");
        total += v;
        weighted += v * a.prices[static_cast<std::size_t>(m)];
      }
      proposed[i] = total / a.amount;
      const double remaining = remaining_volume(i);
      volumes[i] = step_ == config_.timesteps ? remaining : std::min(total, remaining);
      prices[i] = total > 0.0 ? weighted / total : mean_price(a, b, e);
    }
    return execute(proposed, volumes, prices);
  }

  /// Average execution price over executed volume; empty if nothing executed.
  std::optional<double> episode_aep(std::size_t agent) const {
    const auto& a = agents_.at(agent);
    double pq = 0.0, q = 0.0;
    for (std::size_t t = 0; t < a.executed.size(); ++t) {
      pq += a.exec_prices[t] * a.executed[t];
      q += a.executed[t];
    }
    if (!(q > 0.0)) return std::nullopt;
    return pq / q;
  }

  /// Number of executed steps with c_t == 0.
  int zero_cash_steps() const {
    int count = 0;
    for (std::size_t t = 1; t < ledger_.balance_history.size(); ++t) count += ledger_.balance_history[t] == 0.0;
    return count;
  }

  /// Step records are kept only while tracing is on.
  void set_tracing(bool on) { tracing_ = on; }

  /// One JSON object per executed step.
  const std::vector<nlohmann::json>& trace() const { return trace_; }

  void write_trace_jsonl(std::ostream& out) const {
    for (const auto& rec : trace_) out << rec.dump() << '\n';
  }

 private:
  struct Agent {
    int direction = 1;
    double amount = 0.0;
    double average_price = 0.0;
    std::vector<double> prices;
    std::vector<double> volumes;
    std::vector<double> executed;
    std::vector<double> exec_prices;
    double executed_sum = 0.0;
  };

  static double mean_price(const Agent& a, int b, int e) {
    double s = 0.0;
    for (int m = b; m < e; ++m) s += a.prices[static_cast<std::size_t>(m)];
    return s / static_cast<double>(e - b);
  }

  void check_step(std::size_t n) const {
    if (done_) fail(ErrorKind::Precondition, "step after episode end");
    require(n == agents_.size(), "one action per agent required");
  }

  StepResult execute(std::span<const double> proposed, const std::vector<double>& volumes,
                     const std::vector<double>& prices) {
    std::uint64_t obs_digest = 1469598103934665603ULL;
    if (tracing_) {
      for (const auto& o : observations()) {
        const std::uint64_t d = o.digest();
        obs_digest = fnv1a(&d, sizeof(d), obs_digest);
      }
    }

    std::vector<int> dirs(agents_.size());
    for (std::size_t i = 0; i < agents_.size(); ++i) dirs[i] = agents_[i].direction;
    const double cash_before = ledger_.balance_history.back();
    CashCutoff cut = apply_cash_constraint(volumes, prices, dirs, cash_before);

    StepResult r;
    r.step = step_;
    r.proposed_fractions.assign(proposed.begin(), proposed.end());
    r.cash_after = cut.cash_after;
    r.cash_conflict = cut.conflict;
    ledger_.balance_history.push_back(cut.cash_after);
    ledger_.conflict_flags.push_back(cut.conflict);

    const bool cash_event = cut.cash_after == 0.0 && cash_before > 0.0;
    double sum = 0.0;
    for (std::size_t i = 0; i < agents_.size(); ++i) {
      auto& a = agents_[i];
      const double q = cut.executed_volumes[i];
      a.executed.push_back(q);
      a.exec_prices.push_back(prices[i]);
      a.executed_sum += q;
      const double frac = q / a.amount;
      RewardParts parts;
      parts.execution = a.direction * frac * (prices[i] / a.average_price - 1.0);
      parts.impact = -config_.alpha * frac * frac;
      parts.cash = cash_event ? -config_.sigma : 0.0;
      r.executed_fractions.push_back(frac);
      r.execution_prices.push_back(prices[i]);
      r.reward_parts.push_back(parts);
      r.agent_rewards.push_back(parts.total());
      sum += parts.total();
    }
    r.shared_reward = sum / static_cast<double>(agents_.size());

    if (step_ == config_.timesteps) {
      done_ = true;
      for (std::size_t i = 0; i < agents_.size(); ++i)
        if (agents_[i].executed_sum < agents_[i].amount * (1.0 - 1e-12)) violation_ = true;
      r.fulfillment_violation = violation_;
    } else {
      ++step_;
    }
    r.done = done_;
    r.next_observations = observations();

    if (!tracing_) return r;
    trace_.push_back({{"step", r.step},
                      {"obs_digest", obs_digest},
                      {"actions", r.proposed_fractions},
                      {"executed_fractions", r.executed_fractions},
                      {"rewards", r.agent_rewards},
                      {"shared_reward", r.shared_reward},
                      {"cash", r.cash_after},
                      {"cash_conflict", r.cash_conflict}});
    return r;
  }

  EnvConfig config_;
  std::vector<Agent> agents_;
  int minutes_ = 0;
  double initial_cash_ = 0.0;
  double cash_scale_ = 1.0;
  CashLedger ledger_;
  int step_ = 1;
  bool done_ = false;
  bool violation_ = false;
  bool tracing_ = false;
  std::vector<nlohmann::json> trace_;
};

}  // namespace moex

#endif  // MOEX_EXEC_ENV_HPP_
