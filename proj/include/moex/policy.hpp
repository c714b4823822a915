#ifndef MOEX_POLICY_HPP_
#define MOEX_POLICY_HPP_

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "moex/common.hpp"
#include "moex/exec_env.hpp"
#include "moex/nn.hpp"

namespace moex {

enum class Channel { Broadcast, Attention, None };

inline const char* to_string(Channel c) {
  switch (c) {
    case Channel::Broadcast: return "broadcast";
    case Channel::Attention: return "attention";
    case Channel::None: return "none";
  }
  return "none";
}

inline Channel channel_from_string(const std::string& s) {
  if (s == "broadcast") return Channel::Broadcast;
  if (s == "attention") return Channel::Attention;
  if (s == "none") return Channel::None;
  fail(ErrorKind::Usage, "unknown channel '" + s + "' (expected broadcast, attention or none)");
}

struct PolicyConfig {
  int rnn_hidden = 64;
  int fc_hidden = 128;
  int rounds_K = 3;
  Channel channel = Channel::Broadcast;
  int n_heads = 2;
  bool intention_feedback = true;
  std::vector<double> action_fractions{0.0, 0.25, 0.5, 0.75, 1.0};
  std::uint64_t init_seed = 0;

  int action_count() const { return static_cast<int>(action_fractions.size()); }
  /// A policy without a channel makes a single decision pass.
  int effective_rounds() const { return channel == Channel::None ? 1 : rounds_K; }
};

inline void validate(const PolicyConfig& c) {
  require(c.rnn_hidden >= 1 && c.fc_hidden >= 1, "hidden sizes must be positive");
  require(c.rounds_K >= 1, "rounds_K must be >= 1");
  require(c.action_count() >= 2, "need at least two actions");
  if (c.channel == Channel::Attention)
    require(c.n_heads >= 1 && c.fc_hidden % c.n_heads == 0, "fc_hidden must be divisible by n_heads");
}

inline void to_json(nlohmann::json& j, const PolicyConfig& c) {
  j = {{"rnn_hidden", c.rnn_hidden},       {"fc_hidden", c.fc_hidden},
       {"rounds_K", c.rounds_K},           {"channel", to_string(c.channel)},
       {"n_heads", c.n_heads},             {"intention_feedback", c.intention_feedback},
       {"action_fractions", c.action_fractions}, {"init_seed", c.init_seed}};
}

inline void from_json(const nlohmann::json& j, PolicyConfig& c) {
  c.rnn_hidden = j.value("rnn_hidden", c.rnn_hidden);
  c.fc_hidden = j.value("fc_hidden", c.fc_hidden);
  c.rounds_K = j.value("rounds_K", c.rounds_K);
  if (j.contains("channel")) c.channel = channel_from_string(j.at("channel").get<std::string>());
  c.n_heads = j.value("n_heads", c.n_heads);
  c.intention_feedback = j.value("intention_feedback", c.intention_feedback);
  c.action_fractions = j.value("action_fractions", c.action_fractions);
  c.init_seed = j.value("init_seed", c.init_seed);
}

enum class ActMode { Sample, Greedy };

/// Everything produced while refining intentions at one timestep.
/// actions[0] is the dummy a_0; actions[K] is submitted to the environment.
struct IntentionTrace {
  std::vector<nn::Matrix> hidden;              // h_0..h_K, each [n x fc_hidden]
  std::vector<std::vector<int>> actions;       // a_0..a_K
  std::vector<std::vector<double>> legal;      // legalised fraction of each a_k
  std::vector<std::vector<double>> log_probs;  // rounds 1..K: log pi_k(a_k | s, a_{k-1})
  std::vector<nn::Matrix> probs;               // rounds 1..K: [n x action_count]

  int rounds() const { return static_cast<int>(actions.size()) - 1; }
  const std::vector<int>& final_actions() const { return actions.back(); }
};

/// Number of per-minute inputs to the recurrent extractor and of static scalars.
inline constexpr int kMinuteFeatures = 2;
inline constexpr int kStaticFeatures = 4;

inline void minute_features(const AgentObservation& o, std::size_t m, double* out) {
  out[0] = (o.market_prices[m] - 1.0) * 100.0;
  out[1] = std::clamp(std::log(std::max(o.market_volumes[m], 1e-6)), -10.0, 10.0);
}

inline void static_features(const AgentObservation& o, double* out) {
  out[0] = o.elapsed_fraction;
  out[1] = static_cast<double>(o.direction);
  out[2] = o.cumulative_fraction();
  out[3] = std::log1p(std::max(o.last_cash(), 0.0));
}

/// The legal_fraction rule evaluated from what the agent observes.
inline double observed_legal_fraction(const AgentObservation& o, double proposed) {
  const double remaining = std::max(1.0 - o.cumulative_fraction(), 0.0);
  if (o.elapsed_fraction >= 1.0) return remaining;
  return std::clamp(proposed, 0.0, remaining);
}

/// Binds parameters of a store into one graph, once per name.
class ParamBinder {
 public:
  ParamBinder(nn::Graph& g, nn::ParamStore& store) : g_(g), store_(store) {}
  nn::Graph& graph() { return g_; }
  nn::Var operator()(const std::string& name) {
    auto it = cache_.find(name);
    if (it != cache_.end()) return it->second;
    nn::Var v = g_.param(store_.get(name));
    cache_.emplace(name, v);
    return v;
  }

 private:
  nn::Graph& g_;
  nn::ParamStore& store_;
  std::map<std::string, nn::Var> cache_;
};

/// Per-agent recurrent carry so rollouts feed each minute to the GRU once.
struct RecurrentState {
  nn::Matrix h;
  std::size_t minutes = 0;
};

/// Intention-aware communication policy with a joint action-value head.
/// One parameter set serves every agent and every round.
class Policy {
 public:
  explicit Policy(PolicyConfig cfg) : cfg_(std::move(cfg)) {
    validate(cfg_);
    Rng rng = make_rng(cfg_.init_seed, 0x9011C7);
    const int H = cfg_.rnn_hidden, F = cfg_.fc_hidden, A = cfg_.action_count();
    add_gru(rng, "extractor.gru", kMinuteFeatures, H);
    params_.add_dense("extractor.fc1", H + kStaticFeatures, F, rng);
    params_.add_dense("extractor.fc2", F, F, rng);
    params_.add_dense("channel.enc", F + A, F, rng);
    if (cfg_.channel == Channel::Broadcast) params_.add_dense("channel.out", 2 * F, F, rng);
    if (cfg_.channel == Channel::Attention) {
      for (const char* p : {"channel.attn.q", "channel.attn.k", "channel.attn.v", "channel.attn.o"})
        params_.add_dense(p, F, F, rng);
      params_.add_dense("channel.out", 2 * F, F, rng);
    }
    params_.add_dense("decision.fc1", F, F, rng);
    params_.add_dense("decision.fc2", F, F, rng);
    params_.add_dense("decision.fc3", F, A, rng);
    params_.add_dense("q.embed", F + A + 1, F, rng);
    params_.add_dense("q.fc1", F, F, rng);
    params_.add_dense("q.fc2", F, F, rng);
    params_.add_dense("q.fc3", F, 1, rng);
  }

  const PolicyConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }
  int rounds() const { return cfg_.effective_rounds(); }

  // -- graph-level blocks ----------------------------------------------------

  nn::GruParams gru(ParamBinder& b) const {
    return {b("extractor.gru.wx"), b("extractor.gru.wh"), b("extractor.gru.bx"), b("extractor.gru.bh")};
  }

  /// [rnn state || static scalars] -> two FC+ReLU layers -> h_0.
  nn::Var extractor_head(ParamBinder& b, nn::Var rnn_state, nn::Var statics) const {
    nn::Var x = nn::concat_cols({rnn_state, statics});
    x = nn::relu(nn::fc(x, b("extractor.fc1.w"), b("extractor.fc1.b")));
    return nn::relu(nn::fc(x, b("extractor.fc2.w"), b("extractor.fc2.b")));
  }

  /// One communication round over consecutive groups of `group` rows.
  /// `prev_onehot` holds one-hot a_{k-1} per row.
  nn::Var communicate(ParamBinder& b, nn::Var h, const nn::Matrix& prev_onehot, Eigen::Index group) const {
    require(h.rows() > 0, "communicate_round needs at least one agent");
    nn::Graph& g = b.graph();
    nn::Var a = g.constant(cfg_.intention_feedback ? prev_onehot : nn::Matrix::Zero(prev_onehot.rows(), prev_onehot.cols()));
    nn::Var e = nn::fc(nn::concat_cols({h, a}), b("channel.enc.w"), b("channel.enc.b"));
    switch (cfg_.channel) {
      case Channel::None:
        return nn::relu(e);
      case Channel::Broadcast: {
        e = nn::relu(e);
        nn::Var others = nn::others_mean(e, group);
        return nn::relu(nn::fc(nn::concat_cols({e, others}), b("channel.out.w"), b("channel.out.b")));
      }
      case Channel::Attention: {
        e = nn::relu(e);
        nn::AttentionParams p{b("channel.attn.q.w"), b("channel.attn.q.b"), b("channel.attn.k.w"), b("channel.attn.k.b"),
                              b("channel.attn.v.w"), b("channel.attn.v.b"), b("channel.attn.o.w"), b("channel.attn.o.b")};
        nn::Var z = nn::multi_head_attention(e, e, e, p, cfg_.n_heads, group);
        return nn::relu(nn::fc(nn::concat_cols({e, z}), b("channel.out.w"), b("channel.out.b")));
      }
    }
    return e;
  }

  /// Three-layer MLP producing action logits.
  nn::Var decision_logits(ParamBinder& b, nn::Var h) const {
    nn::Var x = nn::relu(nn::fc(h, b("decision.fc1.w"), b("decision.fc1.b")));
    x = nn::relu(nn::fc(x, b("decision.fc2.w"), b("decision.fc2.b")));
    return nn::fc(x, b("decision.fc3.w"), b("decision.fc3.b"));
  }

  /// Q-hat over groups of rows: per-agent embedding of [h_0 || one-hot a || legal
  /// fraction], mean over the group, three-layer MLP. Returns [groups x 1].
  nn::Var q_value(ParamBinder& b, nn::Var h0, const nn::Matrix& action_features, Eigen::Index group) const {
    require(h0.rows() > 0, "estimate_q needs at least one agent");
    nn::Var a = b.graph().constant(action_features);
    nn::Var x = nn::relu(nn::fc(nn::concat_cols({h0, a}), b("q.embed.w"), b("q.embed.b")));
    x = nn::group_mean(x, group);
    x = nn::relu(nn::fc(x, b("q.fc1.w"), b("q.fc1.b")));
    x = nn::relu(nn::fc(x, b("q.fc2.w"), b("q.fc2.b")));
    return nn::fc(x, b("q.fc3.w"), b("q.fc3.b"));
  }

  nn::Matrix onehot(const std::vector<int>& actions) const {
    nn::Matrix m = nn::Matrix::Zero(static_cast<Eigen::Index>(actions.size()), cfg_.action_count());
    for (std::size_t i = 0; i < actions.size(); ++i) m(static_cast<Eigen::Index>(i), actions[i]) = 1.0;
    return m;
  }

  /// Rows of [one-hot a || legal fraction] for Q-hat.
  nn::Matrix action_features(const std::vector<int>& actions, const std::vector<double>& legal) const {
    require(actions.size() == legal.size(), "one legal fraction per action");
    const int A = cfg_.action_count();
    nn::Matrix m = nn::Matrix::Zero(static_cast<Eigen::Index>(actions.size()), A + 1);
    for (std::size_t i = 0; i < actions.size(); ++i) {
      m(static_cast<Eigen::Index>(i), actions[i]) = 1.0;
      m(static_cast<Eigen::Index>(i), A) = legal[i];
    }
    return m;
  }

  // -- inference -------------------------------------------------------------

  /// h_0 per agent. With a carry, only minutes not yet consumed are fed to the GRU.
  nn::Matrix extract(const std::vector<AgentObservation>& obs, RecurrentState* carry = nullptr) const {
    require(!obs.empty(), "extract needs at least one observation");
    const auto n = static_cast<Eigen::Index>(obs.size());
    const std::size_t minutes = obs[0].market_prices.size();
    for (const auto& o : obs) require(o.market_prices.size() == minutes, "agents must share the history length");
    nn::Graph g(false);
    ParamBinder b(g, const_cast<nn::ParamStore&>(params_));
    nn::Matrix h0 = nn::Matrix::Zero(n, cfg_.rnn_hidden);
    std::size_t start = 0;
    if (carry != nullptr && carry->h.rows() == n && carry->minutes <= minutes) {
      h0 = carry->h;
      start = carry->minutes;
    }
    nn::Var h = g.constant(std::move(h0));
    if (start < minutes) {
      nn::GruParams p = gru(b);
      nn::Matrix x(n, kMinuteFeatures);
      for (std::size_t m = start; m < minutes; ++m) {
        for (Eigen::Index i = 0; i < n; ++i) minute_features(obs[static_cast<std::size_t>(i)], m, x.row(i).data());
        h = nn::gru_cell(g.constant(x), h, p);
      }
    }
    if (carry != nullptr) {
      carry->h = h.value();
      carry->minutes = minutes;
    }
    nn::Matrix s(n, kStaticFeatures);
    for (Eigen::Index i = 0; i < n; ++i) static_features(obs[static_cast<std::size_t>(i)], s.row(i).data());
    return extractor_head(b, h, g.constant(std::move(s))).value();
  }

  nn::Matrix communicate_round(const nn::Matrix& h, const std::vector<int>& prev_actions) const {
    require(h.rows() == static_cast<Eigen::Index>(prev_actions.size()), "one previous action per agent");
    nn::Graph g(false);
    ParamBinder b(g, const_cast<nn::ParamStore&>(params_));
    return communicate(b, g.constant(h), onehot(prev_actions), h.rows()).value();
  }

  /// Action probabilities per row.
  nn::Matrix decide(const nn::Matrix& h) const {
    nn::Graph g(false);
    ParamBinder b(g, const_cast<nn::ParamStore&>(params_));
    return nn::softmax_rows(decision_logits(b, g.constant(h)).value());
  }

  double estimate_q(const nn::Matrix& h0, const std::vector<int>& actions, const std::vector<double>& legal) const {
    require(h0.rows() > 0, "estimate_q needs at least one agent");
    require(h0.rows() == static_cast<Eigen::Index>(actions.size()), "one action per agent");
    nn::Graph g(false);
    ParamBinder b(g, const_cast<nn::ParamStore&>(params_));
    return q_value(b, g.constant(h0), action_features(actions, legal), h0.rows()).scalar();
  }

  /// Q-hat for several groups at once: rows of h0 grouped by `group`.
  nn::Matrix estimate_q_groups(const nn::Matrix& h0, const nn::Matrix& features, Eigen::Index group) const {
    nn::Graph g(false);
    ParamBinder b(g, const_cast<nn::ParamStore&>(params_));
    return q_value(b, g.constant(h0), features, group).value();
  }

  /// Extract, then K rounds of communicate + decide. `rng` is required in Sample mode.
  IntentionTrace forward_timestep(const std::vector<AgentObservation>& obs, ActMode mode, Rng* rng = nullptr,
                                  RecurrentState* carry = nullptr) const {
    require(mode == ActMode::Greedy || rng != nullptr, "Sample mode needs a random generator");
    const std::size_t n = obs.size();
    IntentionTrace tr;
    tr.hidden.push_back(extract(obs, carry));
    tr.actions.emplace_back(n, 0);
    tr.legal.emplace_back(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) tr.legal[0][i] = observed_legal_fraction(obs[i], cfg_.action_fractions[0]);

    nn::Graph g(false);
    ParamBinder b(g, const_cast<nn::ParamStore&>(params_));
    nn::Var h = g.constant(tr.hidden[0]);
    for (int k = 1; k <= rounds(); ++k) {
      h = communicate(b, h, onehot(tr.actions.back()), static_cast<Eigen::Index>(n));
      nn::Matrix p = nn::softmax_rows(decision_logits(b, h).value());
      std::vector<int> a(n);
      std::vector<double> lp(n), legal(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto row = static_cast<Eigen::Index>(i);
        if (mode == ActMode::Greedy) {
          Eigen::Index best = 0;
          p.row(row).maxCoeff(&best);
          a[i] = static_cast<int>(best);
        } else {
          a[i] = sample_index(p.row(row), *rng);
        }
        lp[i] = std::log(p(row, a[i]));
        legal[i] = observed_legal_fraction(obs[i], cfg_.action_fractions[static_cast<std::size_t>(a[i])]);
      }
      tr.hidden.push_back(h.value());
      tr.actions.push_back(std::move(a));
      tr.legal.push_back(std::move(legal));
      tr.log_probs.push_back(std::move(lp));
      tr.probs.push_back(std::move(p));
    }
    return tr;
  }

  static int sample_index(const Eigen::Ref<const nn::RowVector>& p, Rng& rng) {
    const double u = uniform01(rng);
    double c = 0.0;
    for (Eigen::Index j = 0; j < p.size(); ++j) {
      c += p(j);
      if (u < c) return static_cast<int>(j);
    }
    for (Eigen::Index j = p.size(); j-- > 0;)
      if (p(j) > 0.0) return static_cast<int>(j);
    return 0;
  }

 private:
  void add_gru(Rng& rng, const std::string& name, int in, int hidden) {
    const double limit_x = std::sqrt(6.0 / (in + 3 * hidden));
    const double limit_h = std::sqrt(6.0 / (hidden + 3 * hidden));
    nn::Matrix wx(in, 3 * hidden), wh(hidden, 3 * hidden);
    for (Eigen::Index i = 0; i < wx.size(); ++i) wx.data()[i] = uniform(rng, -limit_x, limit_x);
    for (Eigen::Index i = 0; i < wh.size(); ++i) wh.data()[i] = uniform(rng, -limit_h, limit_h);
    params_.add(name + ".wx", std::move(wx));
    params_.add(name + ".wh", std::move(wh));
    params_.add(name + ".bx", nn::Matrix::Zero(1, 3 * hidden));
    params_.add(name + ".bh", nn::Matrix::Zero(1, 3 * hidden));
  }

  PolicyConfig cfg_;
  nn::ParamStore params_;
};

// -- persistence ---------------------------------------------------------------

/// Writes `dir/params.bin` (tensor checkpoint) and `dir/policy.json` (config).
inline void save_policy(const Policy& policy, const std::filesystem::path& dir, bool with_optimizer = true) {
  std::filesystem::create_directories(dir);
  nn::save_checkpoint((dir / "params.bin").string(), policy.params(), with_optimizer);
  std::ofstream out(dir / "policy.json");
  if (!out) fail(ErrorKind::Io, "cannot write " + (dir / "policy.json").string());
  out << nlohmann::json(policy.config()).dump(2) << '\n';
}

inline Policy load_policy(const std::filesystem::path& dir) {
  const auto cfg_path = dir / "policy.json";
  std::ifstream in(cfg_path);
  if (!in) fail(ErrorKind::Io, "cannot open " + cfg_path.string());
  PolicyConfig cfg;
  try {
    cfg = nlohmann::json::parse(in).get<PolicyConfig>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Parse, cfg_path.string() + ": " + e.what());
  }
  Policy p(cfg);
  nn::load_checkpoint((dir / "params.bin").string(), p.params());
  return p;
}

}  // namespace moex

#endif  // MOEX_POLICY_HPP_
