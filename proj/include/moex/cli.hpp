#ifndef MOEX_CLI_HPP_
#define MOEX_CLI_HPP_

// Command-line front end: config resolution, run manifests, and the six
// subcommands gen-data, gen-orders, train, eval, baseline and report.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "moex/baselines.hpp"
#include "moex/evaluation.hpp"
#include "moex/training.hpp"

namespace moex {

inline constexpr const char* kCodeVersion = "moex 0.1.0";

// ---------------------------------------------------------------------------
// Config sections without their own JSON mapping.

inline const char* to_string(IntradayShape s) {
  switch (s) {
    case IntradayShape::Flat: return "flat";
    case IntradayShape::EarlyLowLateHigh: return "early_low_late_high";
    case IntradayShape::UShapeVolume: return "u_shape_volume";
  }
  return "?";
}

inline IntradayShape intraday_shape_from_string(const std::string& s) {
  if (s == "flat") return IntradayShape::Flat;
  if (s == "early_low_late_high") return IntradayShape::EarlyLowLateHigh;
  if (s == "u_shape_volume") return IntradayShape::UShapeVolume;
  fail(ErrorKind::Usage, "unknown intraday_shape '" + s + "'");
}

inline void to_json(nlohmann::json& j, const SyntheticMarketConfig& c) {
  j = {{"n_assets", c.n_assets},
       {"days", c.days},
       {"minutes_per_day", c.minutes_per_day},
       {"base_price", c.base_price},
       {"daily_volatility_target", c.daily_volatility_target},
       {"momentum_strength", c.momentum_strength},
       {"intraday_shape", to_string(c.intraday_shape)},
       {"base_volume", c.base_volume},
       {"start_date", c.start_date},
       {"rng_seed", c.rng_seed}};
}

inline void from_json(const nlohmann::json& j, SyntheticMarketConfig& c) {
  c.n_assets = j.value("n_assets", c.n_assets);
  c.days = j.value("days", c.days);
  c.minutes_per_day = j.value("minutes_per_day", c.minutes_per_day);
  c.base_price = j.value("base_price", c.base_price);
  c.daily_volatility_target = j.value("daily_volatility_target", c.daily_volatility_target);
  c.momentum_strength = j.value("momentum_strength", c.momentum_strength);
  if (j.contains("intraday_shape")) c.intraday_shape = intraday_shape_from_string(j.at("intraday_shape").get<std::string>());
  c.base_volume = j.value("base_volume", c.base_volume);
  c.start_date = j.value("start_date", c.start_date);
  c.rng_seed = j.value("rng_seed", c.rng_seed);
}

inline void to_json(nlohmann::json& j, const OrderGenConfig& c) {
  j = {{"orders_per_day", c.orders_per_day},
       {"sets_per_day", c.sets_per_day},
       {"direction_balance", c.direction_balance},
       {"cash_budget_factor", c.cash_budget_factor},
       {"max_volume_fraction", c.max_volume_fraction},
       {"min_volume_fraction", c.min_volume_fraction},
       {"cash_buffer_fraction", c.cash_buffer_fraction},
       {"rng_seed", c.rng_seed}};
}

inline void from_json(const nlohmann::json& j, OrderGenConfig& c) {
  c.orders_per_day = j.value("orders_per_day", c.orders_per_day);
  c.sets_per_day = j.value("sets_per_day", c.sets_per_day);
  c.direction_balance = j.value("direction_balance", c.direction_balance);
  c.cash_budget_factor = j.value("cash_budget_factor", c.cash_budget_factor);
  c.max_volume_fraction = j.value("max_volume_fraction", c.max_volume_fraction);
  c.min_volume_fraction = j.value("min_volume_fraction", c.min_volume_fraction);
  c.cash_buffer_fraction = j.value("cash_buffer_fraction", c.cash_buffer_fraction);
  c.rng_seed = j.value("rng_seed", c.rng_seed);
}

inline void to_json(nlohmann::json& j, const EnvConfig& c) {
  j = {{"timesteps", c.timesteps}, {"action_fractions", c.action_fractions}, {"alpha", c.alpha},
       {"sigma", c.sigma},         {"gamma", c.gamma}};
}

inline void from_json(const nlohmann::json& j, EnvConfig& c) {
  c.timesteps = j.value("timesteps", c.timesteps);
  c.action_fractions = j.value("action_fractions", c.action_fractions);
  c.alpha = j.value("alpha", c.alpha);
  c.sigma = j.value("sigma", c.sigma);
  c.gamma = j.value("gamma", c.gamma);
}

/// Evaluation and data-split settings.
struct EvalConfig {
  double train_fraction = 0.6;
  double valid_fraction = 0.2;
  std::string mode = "greedy";  // greedy | sample
  std::uint64_t seed = 0;
  int workers = 1;
  double ac_risk_aversion = ACParams{}.risk_aversion;
  double ac_temporary_impact = ACParams{}.temporary_impact;
  double ac_volatility_estimate = ACParams{}.volatility_estimate;
};

inline void to_json(nlohmann::json& j, const EvalConfig& c) {
  j = {{"train_fraction", c.train_fraction},
       {"valid_fraction", c.valid_fraction},
       {"mode", c.mode},
       {"seed", c.seed},
       {"workers", c.workers},
       {"ac_risk_aversion", c.ac_risk_aversion},
       {"ac_temporary_impact", c.ac_temporary_impact},
       {"ac_volatility_estimate", c.ac_volatility_estimate}};
}

inline void from_json(const nlohmann::json& j, EvalConfig& c) {
  c.train_fraction = j.value("train_fraction", c.train_fraction);
  c.valid_fraction = j.value("valid_fraction", c.valid_fraction);
  c.mode = j.value("mode", c.mode);
  c.seed = j.value("seed", c.seed);
  c.workers = j.value("workers", c.workers);
  c.ac_risk_aversion = j.value("ac_risk_aversion", c.ac_risk_aversion);
  c.ac_temporary_impact = j.value("ac_temporary_impact", c.ac_temporary_impact);
  c.ac_volatility_estimate = j.value("ac_volatility_estimate", c.ac_volatility_estimate);
}

/// The whole run configuration. `market` nests the order generator under
/// `market.orders`.
struct RunConfig {
  SyntheticMarketConfig market;
  OrderGenConfig orders;
  EnvConfig env;
  PolicyConfig policy;
  TrainConfig train;
  EvalConfig eval;
};

inline nlohmann::json config_to_json(const RunConfig& c) {
  nlohmann::json market = c.market;
  market["orders"] = c.orders;
  nlohmann::json policy = c.policy;
  policy.erase("action_fractions");  // always taken from env
  return {{"market", market}, {"env", c.env}, {"policy", policy}, {"train", c.train}, {"eval", c.eval}};
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  try {
    c.market = j.at("market").get<SyntheticMarketConfig>();
    c.orders = j.at("market").at("orders").get<OrderGenConfig>();
    c.env = j.at("env").get<EnvConfig>();
    c.policy = j.at("policy").get<PolicyConfig>();
    c.train = j.at("train").get<TrainConfig>();
    c.eval = j.at("eval").get<EvalConfig>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Usage, std::string("config: ") + e.what());
  }
  c.policy.action_fractions = c.env.action_fractions;
  validate(c.market);
  validate(c.env);
  validate(c.policy);
  validate(c.train);
  require(c.eval.mode == "greedy" || c.eval.mode == "sample", "eval.mode must be greedy or sample");
  require(c.eval.workers >= 1, "eval.workers must be >= 1");
  return c;
}

namespace detail {

/// Recursively copies `patch` into `base`, rejecting keys `base` lacks.
inline void merge_known(nlohmann::json& base, const nlohmann::json& patch, const std::string& where) {
  if (!patch.is_object()) fail(ErrorKind::Usage, "config" + where + " must be an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string path = where + "." + it.key();
    if (!base.contains(it.key())) fail(ErrorKind::Usage, "unknown config key '" + path.substr(1) + "'");
    auto& slot = base[it.key()];
    if (slot.is_object())
      merge_known(slot, it.value(), path);
    else
      slot = it.value();
  }
}

inline nlohmann::json parse_scalar(const std::string& text) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    return text;  // bare strings such as --set policy.channel=none
  }
}

}  // namespace detail

/// Applies one `dotted.key=value` override.
inline void apply_override(nlohmann::json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) fail(ErrorKind::Usage, "--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  nlohmann::json* node = &cfg;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) fail(ErrorKind::Usage, "unknown config key '" + key + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (node->is_object()) fail(ErrorKind::Usage, "'" + key + "' is a section, not a value");
  *node = detail::parse_scalar(assignment.substr(eq + 1));
}

/// Defaults, then the config file, then --set overrides, then --seed/--workers.
inline RunConfig resolve_config(const std::string& config_path, const std::vector<std::string>& overrides,
                                std::optional<std::uint64_t> seed, std::optional<int> workers) {
  nlohmann::json cfg = config_to_json(RunConfig{});
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) fail(ErrorKind::Io, "cannot open config " + config_path);
    nlohmann::json file;
    try {
      file = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      fail(ErrorKind::Parse, config_path + ": " + e.what());
    }
    detail::merge_known(cfg, file, "");
  }
  for (const auto& o : overrides) apply_override(cfg, o);
  RunConfig c = config_from_json(cfg);
  if (seed) {
    c.train.seed = *seed;
    c.policy.init_seed = *seed;
    c.eval.seed = *seed;
  }
  if (workers) {
    require(*workers >= 1, "--workers must be >= 1");
    c.train.workers = *workers;
    c.eval.workers = *workers;
  }
  return c;
}

inline std::string config_digest(const RunConfig& c) {
  const std::string s = config_to_json(c).dump();
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << fnv1a(s.data(), s.size());
  return out.str();
}

// ---------------------------------------------------------------------------
// Run manifest

inline std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

/// manifest.json in the output directory. Written with status "running"
/// before any work, then finalized once with "ok" or the error.
class RunManifest {
 public:
  RunManifest(std::filesystem::path out_dir, std::string command, const RunConfig& cfg,
              std::vector<std::string> argv)
      : dir_(std::move(out_dir)) {
    doc_ = {{"command", std::move(command)},
            {"argv", std::move(argv)},
            {"config", config_to_json(cfg)},
            {"config_digest", config_digest(cfg)},
            {"seed", cfg.train.seed},
            {"artifacts", nlohmann::json::array()},
            {"code_version", kCodeVersion},
            {"started_at", utc_now()},
            {"finished_at", nullptr},
            {"status", "running"}};
    std::filesystem::create_directories(dir_);
    write();
  }

  void add_artifact(const std::filesystem::path& p) { doc_["artifacts"].push_back(p.string()); }

  void finish_ok() { finish("ok", ""); }
  void finish_error(const std::string& kind, const std::string& message) { finish("failed", kind + ": " + message); }
  bool finished() const { return finished_; }
  const nlohmann::json& json() const { return doc_; }

 private:
  void finish(const std::string& status, const std::string& error) {
    if (finished_) return;
    finished_ = true;
    doc_["status"] = status;
    doc_["finished_at"] = utc_now();
    if (!error.empty()) doc_["error"] = error;
    write();
  }

  void write() const {
    std::ofstream out(dir_ / "manifest.json");
    out << doc_.dump(2) << '\n';
    if (!out) fail(ErrorKind::Io, "cannot write " + (dir_ / "manifest.json").string());
  }

  std::filesystem::path dir_;
  nlohmann::json doc_;
  bool finished_ = false;
};

inline void save_config(const std::filesystem::path& dir, const RunConfig& cfg) {
  std::ofstream out(dir / "config.json");
  out << config_to_json(cfg).dump(2) << '\n';
  if (!out) fail(ErrorKind::Io, "cannot write " + (dir / "config.json").string());
}

// ---------------------------------------------------------------------------
// Commands

struct CommonArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::string out;
};

namespace detail {

inline void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) fail(ErrorKind::Usage, what + " path is required");
  if (!std::filesystem::exists(path)) fail(ErrorKind::Io, what + " not found: " + path);
}

inline ExecutionDataset load_dataset(const std::string& bars, const std::string& orders, const RunConfig& cfg) {
  require_file(bars, "bars");
  require_file(orders, "orders");
  auto loaded = load_bars(bars, cfg.market.minutes_per_day);
  if (loaded.dropped_asset_days > 0)
    log(LogLevel::Info, "dropped " + std::to_string(loaded.dropped_asset_days) + " incomplete asset-days");
  return {std::move(loaded.days), load_order_sets(orders)};
}

inline ExecutionDataset split_of(const ExecutionDataset& data, const RunConfig& cfg, const std::string& split) {
  if (split == "all") return data;
  const auto s = split_by_fraction(dates_of(data.days), cfg.eval.train_fraction, cfg.eval.valid_fraction);
  if (split == "train") return data.subset(s.train);
  if (split == "valid") return data.subset(s.valid);
  if (split == "test") return data.subset(s.test);
  fail(ErrorKind::Usage, "unknown split '" + split + "' (expected train, valid, test or all)");
}

inline EvalOptions eval_options(const RunConfig& cfg) {
  EvalOptions o;
  o.mode = cfg.eval.mode == "sample" ? ActMode::Sample : ActMode::Greedy;
  o.seed = cfg.eval.seed;
  o.workers = cfg.eval.workers;
  o.config_digest = config_digest(cfg);
  return o;
}

}  // namespace detail

inline void cmd_gen_data(const RunConfig& cfg, const std::filesystem::path& out, RunManifest& m) {
  const auto days = generate_synthetic_market(cfg.market);
  const auto path = out / "bars.csv";
  save_bars(path.string(), days);
  m.add_artifact(path);
  const auto st = market_stats(days);
  log(LogLevel::Info, "generated " + std::to_string(days.size()) + " days; AV " + std::to_string(st.av * 1e3) +
                          " permille, ASM " + std::to_string(st.asm_ * 1e3) + " permille");
}

inline void cmd_gen_orders(const RunConfig& cfg, const std::string& bars, const std::filesystem::path& out,
                           RunManifest& m) {
  detail::require_file(bars, "bars");
  const auto loaded = load_bars(bars, cfg.market.minutes_per_day);
  const auto sets = generate_order_sets(loaded.days, cfg.orders);
  const auto path = out / "orders.json";
  save_order_sets(path.string(), sets);
  m.add_artifact(path);
  log(LogLevel::Info, "generated " + std::to_string(sets.size()) + " order sets");
}

inline void cmd_train(const RunConfig& cfg, const ExecutionDataset& data, const std::filesystem::path& out,
                      const std::string& resume, RunManifest& m) {
  const auto s = split_by_fraction(dates_of(data.days), cfg.eval.train_fraction, cfg.eval.valid_fraction);
  const auto train_data = data.subset(s.train);
  const auto valid_data = data.subset(s.valid);
  TrainInputs in;
  in.env = cfg.env;
  in.policy = cfg.policy;
  in.train = cfg.train;
  in.train_data = &train_data;
  in.valid_data = &valid_data;
  in.run_dir = out;
  if (!resume.empty()) {
    detail::require_file(resume, "resume checkpoint");
    in.resume_from = resume;
  }
  const auto res = train(in);
  m.add_artifact(out / "log.csv");
  m.add_artifact(res.final_checkpoint);
  log(LogLevel::Info, "trained " + std::to_string(res.env_steps) + " env steps; checkpoint " +
                          res.final_checkpoint.string());
}

inline void report_to(const std::filesystem::path& out, const MetricsReport& r, RunManifest& m) {
  write_report(out, r);
  for (const char* f : {"summary.csv", "summary.json", "orders.csv"}) m.add_artifact(out / f);
  std::cout << kSummaryHeader << '\n' << summary_row(r) << '\n';
}

inline void cmd_eval(const RunConfig& cfg, const std::string& checkpoint, const ExecutionDataset& split,
                     const std::filesystem::path& out, RunManifest& m) {
  const auto r = evaluate_policy(std::filesystem::path(checkpoint), split, cfg.env, detail::eval_options(cfg));
  report_to(out, r, m);
}

inline void cmd_baseline(const RunConfig& cfg, const std::string& name, const ExecutionDataset& data,
                         const ExecutionDataset& split, const std::filesystem::path& out, RunManifest& m) {
  const auto kind = baseline_from_string(name);
  BaselineParams params;
  params.ac.risk_aversion = cfg.eval.ac_risk_aversion;
  params.ac.temporary_impact = cfg.eval.ac_temporary_impact;
  params.ac.volatility_estimate = cfg.eval.ac_volatility_estimate;
  if (kind == BaselineKind::VWAP) {
    // The profile is fitted on the training days only.
    const auto s = split_by_fraction(dates_of(data.days), cfg.eval.train_fraction, cfg.eval.valid_fraction);
    params.profile = estimate_volume_profile(data.subset(s.train).days);
  }
  const auto r = evaluate_baseline(kind, params, split, cfg.env, cfg.eval.workers, config_digest(cfg));
  report_to(out, r, m);
}

/// Collects every summary.json below run_dir into one table.
inline void cmd_report(const std::filesystem::path& run_dir, const std::filesystem::path& out, RunManifest& m) {
  if (!std::filesystem::is_directory(run_dir)) fail(ErrorKind::Io, "run directory not found: " + run_dir.string());
  std::vector<std::filesystem::path> found;
  for (const auto& e : std::filesystem::recursive_directory_iterator(run_dir))
    if (e.is_regular_file() && e.path().filename() == "summary.json") found.push_back(e.path());
  std::sort(found.begin(), found.end());
  if (found.empty()) fail(ErrorKind::Io, "no summary.json under " + run_dir.string());
  std::ostringstream table;
  table << "source," << kSummaryHeader << '\n';
  for (const auto& p : found) {
    std::ifstream in(p);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      fail(ErrorKind::Parse, p.string() + ": " + e.what());
    }
    auto num = [&](const char* key) { return j.at(key).is_null() ? std::string() : fmt_num(j.at(key).get<double>()); };
    table << std::filesystem::relative(p.parent_path(), run_dir).generic_string() << ',' << num("eg_bp") << ','
          << num("arr_pct") << ',' << num("pos") << ',' << num("glr") << ',' << num("toc_pct") << ','
          << num("violation_rate") << '\n';
  }
  const auto path = out / "report.csv";
  std::ofstream f(path);
  f << table.str();
  if (!f) fail(ErrorKind::Io, "cannot write " + path.string());
  m.add_artifact(path);
  std::cout << table.str();
}

// ---------------------------------------------------------------------------
// Entry point

inline int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::Usage: return 2;
    case ErrorKind::Io: return 3;
    case ErrorKind::Parse: return 4;
    case ErrorKind::Precondition: return 5;
    case ErrorKind::Numeric: return 6;
  }
  return 1;
}

/// Parses argv and runs one command. Returns the process exit code.
inline int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"Multi-order execution with intention-aware communication"};
  app.require_subcommand(1);
  CommonArgs common;
  std::string bars, orders, checkpoint, split = "test", baseline, resume, run_dir;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "JSON config file");
    sub->add_option("--set", common.overrides, "override a config key, dotted.path=value")->take_all();
    sub->add_option("--seed", common.seed, "seed for training, initialization and sampled evaluation");
    sub->add_option("--workers", common.workers, "worker threads");
    sub->add_option("--out", common.out, "output directory")->required();
  };
  auto* gen_data = app.add_subcommand("gen-data", "generate a synthetic minute-bar market");
  add_common(gen_data);
  auto* gen_orders = app.add_subcommand("gen-orders", "generate order sets for a bar file");
  add_common(gen_orders);
  gen_orders->add_option("--bars", bars, "minute bars CSV")->required();
  auto* train_cmd = app.add_subcommand("train", "train a policy");
  add_common(train_cmd);
  train_cmd->add_option("--bars", bars)->required();
  train_cmd->add_option("--orders", orders)->required();
  train_cmd->add_option("--resume", resume, "checkpoint directory to continue from");
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval_cmd);
  eval_cmd->add_option("--checkpoint", checkpoint)->required();
  eval_cmd->add_option("--bars", bars)->required();
  eval_cmd->add_option("--orders", orders)->required();
  eval_cmd->add_option("--split", split, "train, valid, test or all");
  auto* base_cmd = app.add_subcommand("baseline", "evaluate twap, vwap or ac");
  add_common(base_cmd);
  base_cmd->add_option("--name", baseline)->required();
  base_cmd->add_option("--bars", bars)->required();
  base_cmd->add_option("--orders", orders)->required();
  base_cmd->add_option("--split", split, "train, valid, test or all");
  auto* report_cmd = app.add_subcommand("report", "tabulate every report under a run directory");
  add_common(report_cmd);
  report_cmd->add_option("--run", run_dir, "directory to scan")->required();

  std::vector<std::string> rev(args.rbegin(), args.rend());
  if (!rev.empty()) rev.pop_back();  // program name
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : exit_code(ErrorKind::Usage);
  }

  std::unique_ptr<RunManifest> manifest;
  try {
    const RunConfig cfg = resolve_config(common.config, common.overrides, common.seed, common.workers);
    log(LogLevel::Info, "resolved config: " + config_to_json(cfg).dump());
    const std::filesystem::path out = common.out;
    const std::string name = app.get_subcommands().front()->get_name();
    // Inputs are checked before the output directory is touched.
    if (name == "eval") {
      detail::require_file(checkpoint, "checkpoint");
      detail::require_file(checkpoint + "/params.bin", "checkpoint parameters");
    }
    ExecutionDataset data;
    if (name == "train" || name == "eval" || name == "baseline") data = detail::load_dataset(bars, orders, cfg);

    manifest = std::make_unique<RunManifest>(out, name, cfg, args);
    save_config(out, cfg);
    if (name == "gen-data") cmd_gen_data(cfg, out, *manifest);
    if (name == "gen-orders") cmd_gen_orders(cfg, bars, out, *manifest);
    if (name == "train") cmd_train(cfg, data, out, resume, *manifest);
    if (name == "eval") cmd_eval(cfg, checkpoint, detail::split_of(data, cfg, split), out, *manifest);
    if (name == "baseline") cmd_baseline(cfg, baseline, data, detail::split_of(data, cfg, split), out, *manifest);
    if (name == "report") cmd_report(run_dir, out, *manifest);
    manifest->finish_ok();
    return 0;
  } catch (const Error& e) {
    log(LogLevel::Error, std::string(to_string(e.kind())) + ": " + e.what());
    if (manifest) manifest->finish_error(to_string(e.kind()), e.what());
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    log(LogLevel::Error, e.what());
    if (manifest) manifest->finish_error("internal", e.what());
    return 1;
  }
}

}  // namespace moex

#endif  // MOEX_CLI_HPP_
