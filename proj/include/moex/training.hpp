#ifndef MOEX_TRAINING_HPP_
#define MOEX_TRAINING_HPP_

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "moex/common.hpp"
#include "moex/evaluation.hpp"
#include "moex/exec_env.hpp"
#include "moex/market_data.hpp"
#include "moex/nn.hpp"
#include "moex/policy.hpp"

namespace moex {

/// Shared: every agent optimises the mean reward and Q-hat scores the joint
/// action. PerAgent: each agent optimises its own order's reward and Q-hat
/// scores agents one at a time.
enum class RewardMode { Shared, PerAgent };

inline const char* to_string(RewardMode m) { return m == RewardMode::Shared ? "shared" : "per_agent"; }

inline RewardMode reward_mode_from_string(const std::string& s) {
  if (s == "shared") return RewardMode::Shared;
  if (s == "per_agent") return RewardMode::PerAgent;
  fail(ErrorKind::Usage, "unknown reward_mode '" + s + "' (expected shared or per_agent)");
}

struct TrainConfig {
  double lr = 1e-4;
  int batch_size = 128;
  int update_every_steps = 2000;
  double gae_lambda = 0.9;
  double gamma = 1.0;
  double ppo_clip = 0.2;
  int ppo_epochs = 4;
  double value_loss_weight = 0.5;
  double entropy_weight = 0.01;
  long total_env_steps = 200000;
  std::uint64_t seed = 0;
  RewardMode reward_mode = RewardMode::Shared;
  int q_fit_epochs = 4;
  double max_grad_norm = 0.5;
  int workers = 1;
  int eval_every_updates = 0;        // 0 disables periodic validation
  int checkpoint_every_updates = 0;  // 0 keeps only the final checkpoint
};

inline void validate(const TrainConfig& c) {
  require(c.lr > 0.0, "lr must be positive");
  require(c.batch_size >= 1, "batch_size must be positive");
  require(c.update_every_steps >= 1, "update_every_steps must be positive");
  require(c.gae_lambda >= 0.0 && c.gae_lambda <= 1.0, "gae_lambda must lie in [0,1]");
  require(c.gamma >= 0.0 && c.gamma <= 1.0, "gamma must lie in [0,1]");
  require(c.ppo_clip > 0.0, "ppo_clip must be positive");
  require(c.ppo_epochs >= 1 && c.q_fit_epochs >= 0, "epoch counts must be positive");
  require(c.value_loss_weight >= 0.0 && c.entropy_weight >= 0.0, "loss weights must be non-negative");
  require(c.total_env_steps >= 0, "total_env_steps must be >= 0");
  require(c.workers >= 1, "workers must be >= 1");
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},
       {"batch_size", c.batch_size},
       {"update_every_steps", c.update_every_steps},
       {"gae_lambda", c.gae_lambda},
       {"gamma", c.gamma},
       {"ppo_clip", c.ppo_clip},
       {"ppo_epochs", c.ppo_epochs},
       {"value_loss_weight", c.value_loss_weight},
       {"entropy_weight", c.entropy_weight},
       {"total_env_steps", c.total_env_steps},
       {"seed", c.seed},
       {"reward_mode", to_string(c.reward_mode)},
       {"q_fit_epochs", c.q_fit_epochs},
       {"max_grad_norm", c.max_grad_norm},
       {"workers", c.workers},
       {"eval_every_updates", c.eval_every_updates},
       {"checkpoint_every_updates", c.checkpoint_every_updates}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.lr = j.value("lr", c.lr);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.update_every_steps = j.value("update_every_steps", c.update_every_steps);
  c.gae_lambda = j.value("gae_lambda", c.gae_lambda);
  c.gamma = j.value("gamma", c.gamma);
  c.ppo_clip = j.value("ppo_clip", c.ppo_clip);
  c.ppo_epochs = j.value("ppo_epochs", c.ppo_epochs);
  c.value_loss_weight = j.value("value_loss_weight", c.value_loss_weight);
  c.entropy_weight = j.value("entropy_weight", c.entropy_weight);
  c.total_env_steps = j.value("total_env_steps", c.total_env_steps);
  c.seed = j.value("seed", c.seed);
  if (j.contains("reward_mode")) c.reward_mode = reward_mode_from_string(j.at("reward_mode").get<std::string>());
  c.q_fit_epochs = j.value("q_fit_epochs", c.q_fit_epochs);
  c.max_grad_norm = j.value("max_grad_norm", c.max_grad_norm);
  c.workers = j.value("workers", c.workers);
  c.eval_every_updates = j.value("eval_every_updates", c.eval_every_updates);
  c.checkpoint_every_updates = j.value("checkpoint_every_updates", c.checkpoint_every_updates);
}

// ---------------------------------------------------------------------------
// Rollout storage

struct StepRecord {
  IntentionTrace trace;  // hidden keeps h_0 only
  nn::Matrix statics;    // [n x kStaticFeatures]
  std::vector<double> agent_rewards;
  double shared_reward = 0.0;
  std::vector<char> decision_free;
  std::uint64_t obs_digest = 0;
};

struct EpisodeRecord {
  std::size_t agents = 0;
  nn::Matrix minute_inputs;        // row m: agent-major GRU inputs for minute m
  std::vector<int> step_minutes;   // history length observed at steps 1..T
  std::vector<StepRecord> steps;
  EpisodeOutcome outcome;

  // Filled by compute_returns / compute_returns_gae / attribution_advantages.
  std::vector<std::vector<double>> returns;  // [T][groups]
  std::vector<nn::Matrix> q_rounds;          // [T] of [(K+1) x groups]: Q-hat(s, a_k)
  std::vector<std::vector<double>> gae;      // [T][groups]
  std::vector<nn::Matrix> advantages;        // [T] of [K x n]
};

struct RolloutBuffer {
  std::vector<EpisodeRecord> episodes;
  RewardMode reward_mode = RewardMode::Shared;

  std::size_t steps() const {
    std::size_t s = 0;
    for (const auto& e : episodes) s += e.steps.size();
    return s;
  }
  void clear() { episodes.clear(); }
};

inline std::size_t group_size(RewardMode mode, std::size_t agents) { return mode == RewardMode::Shared ? agents : 1; }

// ---------------------------------------------------------------------------
// Rollouts

inline EpisodeRecord run_training_episode(const Policy& policy, const EnvConfig& env_cfg, const OrderSet& set,
                                          const TradingDayData& day, Rng& rng) {
  ExecutionEnv env(env_cfg);
  std::vector<AgentObservation> obs = env.reset(set, day);
  const std::size_t n = obs.size();
  EpisodeRecord ep;
  ep.agents = n;
  RecurrentState carry;
  std::vector<AgentObservation> last_obs;
  while (!env.done()) {
    StepRecord rec;
    std::uint64_t digest = 1469598103934665603ULL;
    for (const auto& o : obs) {
      const std::uint64_t d = o.digest();
      digest = fnv1a(&d, sizeof(d), digest);
    }
    rec.obs_digest = digest;
    rec.trace = policy.forward_timestep(obs, ActMode::Sample, &rng, &carry);
    rec.trace.hidden.resize(1);
    rec.statics.resize(static_cast<Eigen::Index>(n), kStaticFeatures);
    rec.decision_free.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      static_features(obs[i], rec.statics.row(static_cast<Eigen::Index>(i)).data());
      rec.decision_free[i] = decision_free(obs[i]);
    }
    ep.step_minutes.push_back(static_cast<int>(obs[0].market_prices.size()));
    const auto& a = rec.trace.final_actions();
    std::vector<std::size_t> idx(a.begin(), a.end());
    StepResult r = env.step(idx);
    rec.agent_rewards = r.agent_rewards;
    rec.shared_reward = r.shared_reward;
    ep.steps.push_back(std::move(rec));
    last_obs = std::move(obs);
    obs = std::move(r.next_observations);
  }
  const std::size_t minutes = last_obs[0].market_prices.size();
  ep.minute_inputs.resize(static_cast<Eigen::Index>(minutes), static_cast<Eigen::Index>(n * kMinuteFeatures));
  for (std::size_t m = 0; m < minutes; ++m)
    for (std::size_t i = 0; i < n; ++i)
      minute_features(last_obs[i], m, ep.minute_inputs.row(static_cast<Eigen::Index>(m)).data() + i * kMinuteFeatures);
  ep.outcome = summarize_episode(env, set);
  return ep;
}

/// Runs whole episodes until at least n_steps environment steps are stored.
/// Episode j draws its order set and actions from make_rng(seed, stream, j),
/// so the buffer does not depend on the worker count.
inline RolloutBuffer collect_rollouts(const ExecutionDataset& data, const Policy& policy, const EnvConfig& env_cfg,
                                      long n_steps, std::uint64_t seed, std::uint64_t stream, int workers = 1,
                                      RewardMode mode = RewardMode::Shared) {
  RolloutBuffer buf;
  buf.reward_mode = mode;
  if (n_steps <= 0) return buf;
  require(!data.order_sets.empty(), "no order sets to train on");
  const long episodes = (n_steps + env_cfg.timesteps - 1) / env_cfg.timesteps;
  buf.episodes.resize(static_cast<std::size_t>(episodes));
  parallel_for(buf.episodes.size(), workers, [&](std::size_t j) {
    Rng rng = make_rng(seed, stream, j);
    const auto& set = data.order_sets[static_cast<std::size_t>(rng() % data.order_sets.size())];
    buf.episodes[j] = run_training_episode(policy, env_cfg, set, data.day_for(set), rng);
  });
  return buf;
}

// ---------------------------------------------------------------------------
// Returns and advantages

/// G_t = sum_{t' >= t} gamma^{t'-t} r_{t'}.
inline std::vector<double> returns_to_go(const std::vector<double>& rewards, double gamma) {
  std::vector<double> g(rewards.size());
  double acc = 0.0;
  for (std::size_t t = rewards.size(); t-- > 0;) g[t] = acc = rewards[t] + gamma * acc;
  return g;
}

/// GAE over one complete episode; the value after the last step is 0.
inline std::vector<double> gae_advantages(const std::vector<double>& rewards, const std::vector<double>& values,
                                          double gamma, double lambda) {
  require(rewards.size() == values.size(), "one value per reward");
  std::vector<double> adv(rewards.size());
  double acc = 0.0;
  for (std::size_t t = rewards.size(); t-- > 0;) {
    const double next = t + 1 < values.size() ? values[t + 1] : 0.0;
    const double delta = rewards[t] + gamma * next - values[t];
    adv[t] = acc = delta + gamma * lambda * acc;
  }
  return adv;
}

/// Rounds a Q-hat estimate onto the grid 2^-40. On that grid every difference
/// and partial sum is exact for |q| < 2^13, so the per-round attributions below
/// telescope to Q(a_K) bit for bit.
inline double snap_q(double q) { return std::ldexp(std::nearbyint(std::ldexp(q, 40)), -40); }

/// A_k = Q(a_k) - Q(a_{k-1}) for k = 1..K given q = Q(a_0..a_K); Q(a_0) is taken as 0.
inline std::vector<double> attribution_from_q(const std::vector<double>& q) {
  require(q.size() >= 2, "need Q for a_0 and at least one round");
  std::vector<double> a(q.size() - 1);
  for (std::size_t k = 1; k < q.size(); ++k) a[k - 1] = q[k] - (k == 1 ? 0.0 : q[k - 1]);
  return a;
}

inline std::vector<double> group_rewards(const StepRecord& s, RewardMode mode) {
  if (mode == RewardMode::Shared) return {s.shared_reward};
  return s.agent_rewards;
}

/// Fills returns-to-go per value group.
inline void compute_returns(RolloutBuffer& buf, double gamma) {
  for (auto& ep : buf.episodes) {
    const std::size_t groups = ep.agents / group_size(buf.reward_mode, ep.agents);
    const std::size_t T = ep.steps.size();
    ep.returns.assign(T, std::vector<double>(groups));
    for (std::size_t g = 0; g < groups; ++g) {
      std::vector<double> r(T);
      for (std::size_t t = 0; t < T; ++t) r[t] = group_rewards(ep.steps[t], buf.reward_mode)[g];
      const auto G = returns_to_go(r, gamma);
      for (std::size_t t = 0; t < T; ++t) ep.returns[t][g] = G[t];
    }
  }
}

/// Q-hat(s, a_k) for every round k = 0..K and every value group of every step.
inline void compute_q_rounds(RolloutBuffer& buf, const Policy& policy) {
  for (auto& ep : buf.episodes) {
    const auto gs = static_cast<Eigen::Index>(group_size(buf.reward_mode, ep.agents));
    ep.q_rounds.resize(ep.steps.size());
    for (std::size_t t = 0; t < ep.steps.size(); ++t) {
      const auto& tr = ep.steps[t].trace;
      const int K = tr.rounds();
      const auto n = static_cast<Eigen::Index>(ep.agents);
      nn::Matrix h0((K + 1) * n, tr.hidden[0].cols());
      nn::Matrix feats((K + 1) * n, policy.config().action_count() + 1);
      for (int k = 0; k <= K; ++k) {
        h0.middleRows(k * n, n) = tr.hidden[0];
        feats.middleRows(k * n, n) = policy.action_features(tr.actions[k], tr.legal[k]);
      }
      const nn::Matrix q = policy.estimate_q_groups(h0, feats, gs).unaryExpr(&snap_q);
      ep.q_rounds[t] = Eigen::Map<const nn::Matrix>(q.data(), K + 1, n / gs);
    }
  }
}

/// State value used by the final-round GAE: Q-hat(s, a_{K-1}). With a single
/// round and per-agent groups, the expectation of Q-hat under pi_1 instead.
inline std::vector<double> state_values(const EpisodeRecord& ep, const Policy& policy, RewardMode mode, std::size_t g) {
  const std::size_t T = ep.steps.size();
  std::vector<double> v(T);
  for (std::size_t t = 0; t < T; ++t) {
    const auto& tr = ep.steps[t].trace;
    const int K = tr.rounds();
    if (K >= 2 || group_size(mode, ep.agents) > 1) {
      v[t] = ep.q_rounds[t](K - 1, static_cast<Eigen::Index>(g));
      continue;
    }
    const int A = policy.config().action_count();
    const auto row = static_cast<Eigen::Index>(g);
    nn::Matrix h0 = tr.hidden[0].row(row).replicate(A, 1);
    std::vector<int> acts(static_cast<std::size_t>(A));
    std::vector<double> legal(static_cast<std::size_t>(A));
    const double remaining = std::max(1.0 - ep.steps[t].statics(row, 2), 0.0);
    const bool last = ep.steps[t].statics(row, 0) >= 1.0;
    for (int a = 0; a < A; ++a) {
      acts[static_cast<std::size_t>(a)] = a;
      legal[static_cast<std::size_t>(a)] =
          last ? remaining : std::clamp(policy.config().action_fractions[static_cast<std::size_t>(a)], 0.0, remaining);
    }
    const nn::Matrix q = policy.estimate_q_groups(h0, policy.action_features(acts, legal), 1);
    v[t] = tr.probs[0].row(row).dot(q.col(0).transpose());
  }
  return v;
}

/// Returns-to-go, Q-hat for every round's intended joint action, and the
/// final-round GAE advantages.
inline void compute_returns_gae(RolloutBuffer& buf, const Policy& policy, double gamma, double lambda) {
  compute_returns(buf, gamma);
  compute_q_rounds(buf, policy);
  for (auto& ep : buf.episodes) {
    const std::size_t groups = ep.agents / group_size(buf.reward_mode, ep.agents);
    const std::size_t T = ep.steps.size();
    ep.gae.assign(T, std::vector<double>(groups));
    for (std::size_t g = 0; g < groups; ++g) {
      std::vector<double> r(T);
      for (std::size_t t = 0; t < T; ++t) r[t] = group_rewards(ep.steps[t], buf.reward_mode)[g];
      const auto adv = gae_advantages(r, state_values(ep, policy, buf.reward_mode, g), gamma, lambda);
      for (std::size_t t = 0; t < T; ++t) ep.gae[t][g] = adv[t];
    }
  }
}

/// Per-round, per-agent advantages: Q-hat differences for k < K, GAE for k = K.
inline void attribution_advantages(RolloutBuffer& buf) {
  for (auto& ep : buf.episodes) {
    const std::size_t gs = group_size(buf.reward_mode, ep.agents);
    ep.advantages.resize(ep.steps.size());
    for (std::size_t t = 0; t < ep.steps.size(); ++t) {
      const int K = ep.steps[t].trace.rounds();
      nn::Matrix adv(K, static_cast<Eigen::Index>(ep.agents));
      for (std::size_t i = 0; i < ep.agents; ++i) {
        const auto g = static_cast<Eigen::Index>(i / gs);
        std::vector<double> q(static_cast<std::size_t>(K) + 1);
        for (int k = 0; k <= K; ++k) q[static_cast<std::size_t>(k)] = ep.q_rounds[t](k, g);
        const auto a = attribution_from_q(q);
        for (int k = 1; k < K; ++k) adv(k - 1, static_cast<Eigen::Index>(i)) = a[static_cast<std::size_t>(k - 1)];
        adv(K - 1, static_cast<Eigen::Index>(i)) = ep.gae[t][static_cast<std::size_t>(g)];
      }
      ep.advantages[t] = std::move(adv);
    }
  }
}

/// Zero-mean, unit-variance per round over samples whose decision matters.
inline void normalize_advantages(RolloutBuffer& buf) {
  if (buf.episodes.empty()) return;
  const int K = buf.episodes.front().steps.front().trace.rounds();
  for (int k = 0; k < K; ++k) {
    double s = 0.0, s2 = 0.0;
    std::size_t n = 0;
    for (const auto& ep : buf.episodes)
      for (std::size_t t = 0; t < ep.steps.size(); ++t)
        for (std::size_t i = 0; i < ep.agents; ++i) {
          if (ep.steps[t].decision_free[i]) continue;
          const double a = ep.advantages[t](k, static_cast<Eigen::Index>(i));
          s += a;
          s2 += a * a;
          ++n;
        }
    if (n < 2) continue;
    const double mean = s / static_cast<double>(n);
    const double sd = std::sqrt(std::max(s2 / static_cast<double>(n) - mean * mean, 0.0));
    if (!(sd > 1e-12)) continue;
    for (auto& ep : buf.episodes)
      for (auto& a : ep.advantages) a.row(k) = (a.row(k).array() - mean) / sd;
  }
}

// ---------------------------------------------------------------------------
// Q-hat regression

namespace detail {
/// Q-hat on stored h_0 for the executed joint actions of the given steps.
struct QBatch {
  nn::Matrix h0, feats, targets;
  Eigen::Index group = 1;
};

inline QBatch q_batch(const RolloutBuffer& buf, const Policy& policy,
                      const std::vector<std::pair<std::size_t, std::size_t>>& steps) {
  QBatch b;
  const auto& first = buf.episodes[steps.front().first];
  const auto n = static_cast<Eigen::Index>(first.agents);
  b.group = static_cast<Eigen::Index>(group_size(buf.reward_mode, first.agents));
  const Eigen::Index groups = n / b.group;
  const auto S = static_cast<Eigen::Index>(steps.size());
  b.h0.resize(S * n, first.steps.front().trace.hidden[0].cols());
  b.feats.resize(S * n, policy.config().action_count() + 1);
  b.targets.resize(S * groups, 1);
  for (Eigen::Index s = 0; s < S; ++s) {
    const auto& ep = buf.episodes[steps[static_cast<std::size_t>(s)].first];
    const auto& st = ep.steps[steps[static_cast<std::size_t>(s)].second];
    b.h0.middleRows(s * n, n) = st.trace.hidden[0];
    b.feats.middleRows(s * n, n) = policy.action_features(st.trace.final_actions(), st.trace.legal.back());
    for (Eigen::Index g = 0; g < groups; ++g)
      b.targets(s * groups + g, 0) = ep.returns[steps[static_cast<std::size_t>(s)].second][static_cast<std::size_t>(g)];
  }
  return b;
}

inline nn::Var q_mse(ParamBinder& b, const Policy& policy, const QBatch& q) {
  nn::Graph& g = b.graph();
  nn::Var pred = policy.q_value(b, g.constant(q.h0), q.feats, q.group);
  nn::Var err = nn::sub(pred, g.constant(q.targets));
  return nn::mean(nn::square(err));
}

/// (episode, step) pairs bucketed by agent count, so every batch has one group layout.
inline std::map<std::size_t, std::vector<std::pair<std::size_t, std::size_t>>> steps_by_agents(const RolloutBuffer& buf) {
  std::map<std::size_t, std::vector<std::pair<std::size_t, std::size_t>>> out;
  for (std::size_t e = 0; e < buf.episodes.size(); ++e)
    for (std::size_t t = 0; t < buf.episodes[e].steps.size(); ++t) out[buf.episodes[e].agents].emplace_back(e, t);
  return out;
}

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[static_cast<std::size_t>(rng() % i)]);
}
}  // namespace detail

/// Regresses Q-hat(h_0, a_K) on returns-to-go with Adam on the q.* parameters.
/// Returns the mean minibatch loss of each epoch.
inline std::vector<double> fit_q_estimator(const RolloutBuffer& buf, Policy& policy, const TrainConfig& cfg, int epochs,
                                           Rng& rng) {
  require(buf.steps() > 0, "cannot fit Q-hat on an empty buffer");
  for (const auto& ep : buf.episodes) require(ep.returns.size() == ep.steps.size(), "returns not computed");
  auto buckets = detail::steps_by_agents(buf);
  std::vector<double> curve;
  nn::AdamConfig adam{cfg.lr};
  for (int e = 0; e < epochs; ++e) {
    double total = 0.0;
    std::size_t batches = 0;
    for (auto& [n, steps] : buckets) {
      (void)n;
      detail::shuffle(steps, rng);
      for (std::size_t s = 0; s < steps.size(); s += static_cast<std::size_t>(cfg.batch_size)) {
        std::vector<std::pair<std::size_t, std::size_t>> part(
            steps.begin() + static_cast<std::ptrdiff_t>(s),
            steps.begin() + static_cast<std::ptrdiff_t>(std::min(steps.size(), s + static_cast<std::size_t>(cfg.batch_size))));
        policy.params().zero_grad();
        nn::Graph g;
        ParamBinder b(g, policy.params());
        nn::Var loss = detail::q_mse(b, policy, detail::q_batch(buf, policy, part));
        g.backward(loss);
        const double norm = nn::clip_grad_norm(policy.params(), cfg.max_grad_norm);
        if (!std::isfinite(norm) || !std::isfinite(loss.scalar()))
          fail(ErrorKind::Numeric, "non-finite gradient while fitting Q-hat");
        nn::adam_step(policy.params(), adam, "q.");
        total += loss.scalar();
        ++batches;
      }
    }
    curve.push_back(batches ? total / static_cast<double>(batches) : 0.0);
  }
  return curve;
}

// ---------------------------------------------------------------------------
// PPO

/// Policy outputs for a set of episodes with equal agent count and step layout.
/// Rows are ordered (step, episode, agent).
struct BatchForward {
  std::vector<nn::Var> log_probs;  // per round: log pi_k of every row, [rows x A]
  std::vector<nn::Var> probs;      // per round: [rows x A]
  nn::Var h0;                      // [rows x fc_hidden]
  Eigen::Index rows = 0;
};

inline BatchForward forward_batch(const Policy& policy, ParamBinder& b, const RolloutBuffer& buf,
                                  const std::vector<std::size_t>& episodes) {
  nn::Graph& g = b.graph();
  const auto& first = buf.episodes[episodes.front()];
  const auto n = static_cast<Eigen::Index>(first.agents);
  const auto E = static_cast<Eigen::Index>(episodes.size());
  const auto T = static_cast<Eigen::Index>(first.steps.size());
  const Eigen::Index R = E * n;
  for (std::size_t e : episodes) {
    const auto& ep = buf.episodes[e];
    require(static_cast<Eigen::Index>(ep.agents) == n && ep.step_minutes == first.step_minutes,
            "episodes in one batch must share agent count and step layout");
  }

  // GRU over the minute history, keeping the state at every step boundary.
  std::vector<nn::Var> states(static_cast<std::size_t>(T));
  nn::Var h = g.constant(nn::Matrix::Zero(R, policy.config().rnn_hidden));
  const nn::GruParams p = policy.gru(b);
  int consumed = 0;
  nn::Matrix x(R, kMinuteFeatures);
  for (Eigen::Index t = 0; t < T; ++t) {
    const int upto = first.step_minutes[static_cast<std::size_t>(t)];
    for (; consumed < upto; ++consumed) {
      for (Eigen::Index e = 0; e < E; ++e) {
        const auto& mi = buf.episodes[episodes[static_cast<std::size_t>(e)]].minute_inputs;
        for (Eigen::Index i = 0; i < n; ++i)
          x.row(e * n + i) = mi.block(consumed, i * kMinuteFeatures, 1, kMinuteFeatures);
      }
      h = nn::gru_cell(g.constant(x), h, p);
    }
    states[static_cast<std::size_t>(t)] = h;
  }

  nn::Matrix statics(T * R, kStaticFeatures);
  for (Eigen::Index t = 0; t < T; ++t)
    for (Eigen::Index e = 0; e < E; ++e)
      statics.middleRows((t * E + e) * n, n) = buf.episodes[episodes[static_cast<std::size_t>(e)]].steps[static_cast<std::size_t>(t)].statics;

  BatchForward out;
  out.rows = T * R;
  out.h0 = policy.extractor_head(b, nn::concat_rows(states), g.constant(std::move(statics)));
  nn::Var hk = out.h0;
  const int K = policy.rounds();
  for (int k = 1; k <= K; ++k) {
    nn::Matrix prev = nn::Matrix::Zero(out.rows, policy.config().action_count());
    for (Eigen::Index t = 0; t < T; ++t)
      for (Eigen::Index e = 0; e < E; ++e) {
        const auto& tr = buf.episodes[episodes[static_cast<std::size_t>(e)]].steps[static_cast<std::size_t>(t)].trace;
        for (Eigen::Index i = 0; i < n; ++i) prev((t * E + e) * n + i, tr.actions[static_cast<std::size_t>(k - 1)][static_cast<std::size_t>(i)]) = 1.0;
      }
    hk = policy.communicate(b, hk, prev, n);
    nn::Var logits = policy.decision_logits(b, hk);
    out.log_probs.push_back(nn::log_softmax(logits));
    out.probs.push_back(nn::softmax(logits));
  }
  return out;
}

struct UpdateStats {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
  double grad_norm = 0.0;
  std::size_t minibatches = 0;
  bool aborted = false;
  std::string abort_reason;
};

struct LossParts {
  nn::Var total;
  double policy = 0.0, value = 0.0, entropy = 0.0, approx_kl = 0.0, clip_fraction = 0.0;
};

/// L = -(1/K) sum_k J_k - entropy_weight * H + value_loss_weight * MSE(Q-hat).
/// J_k is the clipped surrogate averaged over samples whose decision matters.
inline LossParts ppo_loss(const Policy& policy, ParamBinder& b, const RolloutBuffer& buf,
                          const std::vector<std::size_t>& episodes, const TrainConfig& cfg) {
  nn::Graph& g = b.graph();
  BatchForward f = forward_batch(policy, b, buf, episodes);
  const auto& first = buf.episodes[episodes.front()];
  const auto n = static_cast<Eigen::Index>(first.agents);
  const auto E = static_cast<Eigen::Index>(episodes.size());
  const auto T = static_cast<Eigen::Index>(first.steps.size());
  const int K = policy.rounds();
  const int A = policy.config().action_count();

  nn::Matrix weight = nn::Matrix::Zero(f.rows, 1);
  for (Eigen::Index t = 0; t < T; ++t)
    for (Eigen::Index e = 0; e < E; ++e)
      for (Eigen::Index i = 0; i < n; ++i)
        weight((t * E + e) * n + i, 0) =
            buf.episodes[episodes[static_cast<std::size_t>(e)]].steps[static_cast<std::size_t>(t)].decision_free[static_cast<std::size_t>(i)] ? 0.0 : 1.0;
  const double active = weight.sum();
  if (active > 0.0) weight /= active;

  LossParts out;
  std::vector<nn::Var> terms;
  for (int k = 1; k <= K; ++k) {
    std::vector<Eigen::Index> chosen(static_cast<std::size_t>(f.rows));
    nn::Matrix old_lp(f.rows, 1), adv(f.rows, 1);
    for (Eigen::Index t = 0; t < T; ++t)
      for (Eigen::Index e = 0; e < E; ++e) {
        const auto& ep = buf.episodes[episodes[static_cast<std::size_t>(e)]];
        const auto& tr = ep.steps[static_cast<std::size_t>(t)].trace;
        for (Eigen::Index i = 0; i < n; ++i) {
          const Eigen::Index r = (t * E + e) * n + i;
          chosen[static_cast<std::size_t>(r)] = tr.actions[static_cast<std::size_t>(k)][static_cast<std::size_t>(i)];
          old_lp(r, 0) = tr.log_probs[static_cast<std::size_t>(k - 1)][static_cast<std::size_t>(i)];
          adv(r, 0) = ep.advantages[static_cast<std::size_t>(t)](k - 1, i);
        }
      }
    nn::Var lp = nn::pick(f.log_probs[static_cast<std::size_t>(k - 1)], chosen);
    nn::Var ratio = nn::exp(nn::sub(lp, g.constant(old_lp)));
    nn::Var adv_v = g.constant(adv);
    nn::Var s1 = nn::mul(ratio, adv_v);
    nn::Var s2 = nn::mul(nn::clip(ratio, 1.0 - cfg.ppo_clip, 1.0 + cfg.ppo_clip), adv_v);
    nn::Var j_k = nn::weighted_sum(nn::minimum(s1, s2), weight);
    terms.push_back(nn::scale(j_k, -1.0 / K));
    out.policy -= j_k.scalar() / K;

    const nn::Matrix& rv = ratio.value();
    for (Eigen::Index r = 0; r < f.rows; ++r) {
      if (weight(r, 0) == 0.0) continue;
      out.approx_kl += weight(r, 0) * (old_lp(r, 0) - lp.value()(r, 0)) / K;
      out.clip_fraction += weight(r, 0) * (std::abs(rv(r, 0) - 1.0) > cfg.ppo_clip ? 1.0 : 0.0) / K;
    }

    nn::Matrix ew = weight.replicate(1, A) / K;
    nn::Var plogp = nn::mul(f.probs[static_cast<std::size_t>(k - 1)], f.log_probs[static_cast<std::size_t>(k - 1)]);
    nn::Var neg_entropy = nn::weighted_sum(plogp, std::move(ew));
    out.entropy -= neg_entropy.scalar();
    if (cfg.entropy_weight > 0.0) terms.push_back(nn::scale(neg_entropy, cfg.entropy_weight));
  }

  if (cfg.value_loss_weight > 0.0) {
    std::vector<std::pair<std::size_t, std::size_t>> steps;
    for (Eigen::Index t = 0; t < T; ++t)
      for (std::size_t e : episodes) steps.emplace_back(e, static_cast<std::size_t>(t));
    nn::Var v = detail::q_mse(b, policy, detail::q_batch(buf, policy, steps));
    out.value = v.scalar();
    terms.push_back(nn::scale(v, cfg.value_loss_weight));
  }

  nn::Var total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = nn::add(total, terms[i]);
  out.total = total;
  return out;
}

/// PPO epochs over episode minibatches of about batch_size steps. A non-finite
/// loss or gradient restores the pre-update parameters and reports the abort.
inline UpdateStats ppo_update(const RolloutBuffer& buf, Policy& policy, const TrainConfig& cfg, Rng& rng) {
  UpdateStats stats;
  if (buf.episodes.empty()) return stats;
  for (const auto& ep : buf.episodes) require(ep.advantages.size() == ep.steps.size(), "advantages not computed");
  const nn::ParamStore snapshot = policy.params();
  std::map<std::pair<std::size_t, std::vector<int>>, std::vector<std::size_t>> buckets;
  for (std::size_t e = 0; e < buf.episodes.size(); ++e)
    buckets[{buf.episodes[e].agents, buf.episodes[e].step_minutes}].push_back(e);
  nn::AdamConfig adam{cfg.lr};
  for (int epoch = 0; epoch < cfg.ppo_epochs; ++epoch) {
    for (auto& [key, eps] : buckets) {
      detail::shuffle(eps, rng);
      const std::size_t T = std::max<std::size_t>(1, buf.episodes[eps.front()].steps.size());
      const std::size_t per = std::max<std::size_t>(1, static_cast<std::size_t>(cfg.batch_size) / T);
      for (std::size_t s = 0; s < eps.size(); s += per) {
        std::vector<std::size_t> part(eps.begin() + static_cast<std::ptrdiff_t>(s),
                                      eps.begin() + static_cast<std::ptrdiff_t>(std::min(eps.size(), s + per)));
        policy.params().zero_grad();
        nn::Graph g;
        ParamBinder b(g, policy.params());
        LossParts loss = ppo_loss(policy, b, buf, part, cfg);
        g.backward(loss.total);
        const double norm = nn::clip_grad_norm(policy.params(), cfg.max_grad_norm);
        if (!std::isfinite(norm) || !std::isfinite(loss.total.scalar())) {
          policy.params() = snapshot;
          stats.aborted = true;
          stats.abort_reason = "non-finite loss or gradient";
          log(LogLevel::Error, "ppo_update aborted: non-finite loss or gradient");
          return stats;
        }
        nn::adam_step(policy.params(), adam);
        stats.policy_loss += loss.policy;
        stats.value_loss += loss.value;
        stats.entropy += loss.entropy;
        stats.approx_kl += loss.approx_kl;
        stats.clip_fraction += loss.clip_fraction;
        stats.grad_norm += norm;
        ++stats.minibatches;
      }
    }
  }
  if (stats.minibatches) {
    const double m = static_cast<double>(stats.minibatches);
    stats.policy_loss /= m;
    stats.value_loss /= m;
    stats.entropy /= m;
    stats.approx_kl /= m;
    stats.clip_fraction /= m;
    stats.grad_norm /= m;
  }
  return stats;
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainLogRow {
  long update = 0;
  long env_steps = 0;
  double mean_eg_bp = 0.0;
  double toc_pct = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double q_fit_loss = 0.0;
  double entropy = 0.0;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
  std::optional<double> valid_eg_bp;
  std::optional<double> valid_toc_pct;
};

inline const char* kTrainLogHeader =
    "update,env_steps,mean_eg_bp,toc_pct,policy_loss,value_loss,q_fit_loss,entropy,approx_kl,clip_fraction,valid_eg_bp,"
    "valid_toc_pct";

inline std::string to_csv(const TrainLogRow& r) {
  auto opt = [](const std::optional<double>& v) { return v ? fmt_num(*v) : std::string(); };
  return std::to_string(r.update) + ',' + std::to_string(r.env_steps) + ',' + fmt_num(r.mean_eg_bp) + ',' +
         fmt_num(r.toc_pct) + ',' + fmt_num(r.policy_loss) + ',' + fmt_num(r.value_loss) + ',' + fmt_num(r.q_fit_loss) +
         ',' + fmt_num(r.entropy) + ',' + fmt_num(r.approx_kl) + ',' + fmt_num(r.clip_fraction) + ',' +
         opt(r.valid_eg_bp) + ',' + opt(r.valid_toc_pct);
}

struct TrainResult {
  Policy policy;
  std::vector<TrainLogRow> log;
  long env_steps = 0;
  std::filesystem::path final_checkpoint;
};

struct TrainInputs {
  EnvConfig env;
  PolicyConfig policy;
  TrainConfig train;
  const ExecutionDataset* train_data = nullptr;
  const ExecutionDataset* valid_data = nullptr;  // optional
  std::filesystem::path run_dir;                 // empty: nothing is written
  std::filesystem::path resume_from;             // checkpoint directory to continue from
};

inline void write_train_state(const std::filesystem::path& dir, long env_steps, long updates, const TrainConfig& cfg) {
  std::ofstream out(dir / "train_state.json");
  out << nlohmann::json{{"env_steps", env_steps}, {"updates", updates}, {"train", cfg}}.dump(2) << '\n';
  if (!out) fail(ErrorKind::Io, "cannot write " + (dir / "train_state.json").string());
}

/// One update cycle: rollouts, returns, Q-hat fit, attribution, PPO.
inline TrainLogRow train_iteration(Policy& policy, const TrainInputs& in, long update, long n_steps,
                                   long& env_steps) {
  const TrainConfig& cfg = in.train;
  RolloutBuffer buf = collect_rollouts(*in.train_data, policy, in.env, n_steps, cfg.seed, 1000 + static_cast<std::uint64_t>(update),
                                       cfg.workers, cfg.reward_mode);
  env_steps += static_cast<long>(buf.steps());
  std::vector<EpisodeOutcome> outcomes;
  for (const auto& ep : buf.episodes) outcomes.push_back(ep.outcome);
  const MetricsReport rollout = aggregate(outcomes);

  Rng rng = make_rng(cfg.seed, 2, static_cast<std::uint64_t>(update));
  compute_returns(buf, cfg.gamma);
  const auto curve = fit_q_estimator(buf, policy, cfg, cfg.q_fit_epochs, rng);
  compute_returns_gae(buf, policy, cfg.gamma, cfg.gae_lambda);
  attribution_advantages(buf);
  normalize_advantages(buf);
  const UpdateStats st = ppo_update(buf, policy, cfg, rng);
  if (st.aborted) fail(ErrorKind::Numeric, "update " + std::to_string(update) + " aborted: " + st.abort_reason);

  TrainLogRow row;
  row.update = update;
  row.env_steps = env_steps;
  row.mean_eg_bp = rollout.eg_bp;
  row.toc_pct = rollout.toc_pct;
  row.policy_loss = st.policy_loss;
  row.value_loss = st.value_loss;
  row.q_fit_loss = curve.empty() ? 0.0 : curve.back();
  row.entropy = st.entropy;
  row.approx_kl = st.approx_kl;
  row.clip_fraction = st.clip_fraction;
  return row;
}

/// Alternates rollouts and updates until total_env_steps; writes log.csv and
/// checkpoints/step_N under run_dir when one is given.
inline TrainResult train(const TrainInputs& in) {
  validate(in.train);
  validate(in.env);
  require(in.train_data != nullptr, "training data required");
  PolicyConfig pcfg = in.policy;
  pcfg.action_fractions = in.env.action_fractions;
  TrainResult res{Policy(pcfg), {}, 0, {}};
  long update = 0;
  if (!in.resume_from.empty()) {
    res.policy = load_policy(in.resume_from);
    require(res.policy.config().action_fractions == in.env.action_fractions, "checkpoint action grid mismatch");
    std::ifstream st(in.resume_from / "train_state.json");
    if (!st) fail(ErrorKind::Io, "missing train_state.json in " + in.resume_from.string());
    const auto j = nlohmann::json::parse(st);
    res.env_steps = j.at("env_steps").get<long>();
    update = j.at("updates").get<long>();
  }
  const bool persist = !in.run_dir.empty();
  std::ofstream log_file;
  if (persist) {
    std::filesystem::create_directories(in.run_dir / "checkpoints");
    const auto log_path = in.run_dir / "log.csv";
    const bool append = !in.resume_from.empty() && std::filesystem::exists(log_path);
    log_file.open(log_path, append ? std::ios::app : std::ios::trunc);
    if (!log_file) fail(ErrorKind::Io, "cannot write " + log_path.string());
    if (!append) log_file << kTrainLogHeader << '\n';
  }
  auto checkpoint = [&]() {
    const auto dir = in.run_dir / "checkpoints" / ("step_" + std::to_string(res.env_steps));
    save_policy(res.policy, dir);
    write_train_state(dir, res.env_steps, update, in.train);
    res.final_checkpoint = dir;
  };

  while (res.env_steps < in.train.total_env_steps) {
    const long n = std::min<long>(in.train.update_every_steps, in.train.total_env_steps - res.env_steps);
    TrainLogRow row = train_iteration(res.policy, in, update, n, res.env_steps);
    ++update;
    if (in.valid_data != nullptr && in.train.eval_every_updates > 0 && update % in.train.eval_every_updates == 0) {
      EvalOptions opt;
      opt.workers = in.train.workers;
      const MetricsReport v = evaluate_policy(res.policy, *in.valid_data, in.env, opt);
      row.valid_eg_bp = v.eg_bp;
      row.valid_toc_pct = v.toc_pct;
    }
    log(LogLevel::Debug, "update " + std::to_string(row.update) + " steps " + std::to_string(row.env_steps) +
                             " eg " + fmt_num(row.mean_eg_bp) + " toc " + fmt_num(row.toc_pct));
    res.log.push_back(row);
    if (persist) {
      log_file << to_csv(row) << '\n';
      log_file.flush();
      if (in.train.checkpoint_every_updates > 0 && update % in.train.checkpoint_every_updates == 0) checkpoint();
    }
  }
  if (persist) checkpoint();
  return res;
}

}  // namespace moex

#endif  // MOEX_TRAINING_HPP_
