#ifndef MOEX_MARKET_DATA_HPP_
#define MOEX_MARKET_DATA_HPP_

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "moex/common.hpp"

namespace moex {

struct MinuteBar {
  std::string asset_id;
  int minute_index = 0;
  double price = 0.0;
  double volume = 0.0;
};

/// One trading day of minute bars. Every asset carries exactly
/// minutes_per_day bars, sorted by minute.
struct TradingDayData {
  std::string date;
  int minutes_per_day = 0;
  std::map<std::string, std::vector<MinuteBar>> assets;

  bool has_asset(const std::string& asset) const { return assets.count(asset) != 0; }

  const std::vector<MinuteBar>& bars(const std::string& asset) const {
    auto it = assets.find(asset);
    if (it == assets.end()) fail(ErrorKind::Precondition, "asset " + asset + " missing on " + date);
    return it->second;
  }

  std::vector<double> prices(const std::string& asset) const {
    const auto& b = bars(asset);
    std::vector<double> out(b.size());
    for (std::size_t i = 0; i < b.size(); ++i) out[i] = b[i].price;
    return out;
  }

  std::vector<double> volumes(const std::string& asset) const {
    const auto& b = bars(asset);
    std::vector<double> out(b.size());
    for (std::size_t i = 0; i < b.size(); ++i) out[i] = b[i].volume;
    return out;
  }

  /// Unweighted mean of the asset's minute prices over the day (p-tilde).
  double average_price(const std::string& asset) const {
    const auto& b = bars(asset);
    double sum = 0.0;
    for (const auto& bar : b) sum += bar.price;
    return sum / static_cast<double>(b.size());
  }

  double total_volume(const std::string& asset) const {
    double sum = 0.0;
    for (const auto& bar : bars(asset)) sum += bar.volume;
    return sum;
  }
};

struct OrderSpec {
  std::string asset_id;
  int direction = 1;  // +1 liquidation, -1 acquisition
  double amount = 0.0;
};

struct OrderSet {
  std::string date;
  std::vector<OrderSpec> orders;
  double initial_cash = 0.0;

  std::size_t size() const { return orders.size(); }
};

enum class IntradayShape { Flat, EarlyLowLateHigh, UShapeVolume };

struct SyntheticMarketConfig {
  int n_assets = 8;
  int days = 40;
  int minutes_per_day = 240;
  double base_price = 20.0;
  /// Target within-day standard deviation of p_t / p-tilde (the AV statistic).
  double daily_volatility_target = 0.00718;
  /// Amplitude of the deterministic intraday log-price pattern (EarlyLowLateHigh)
  /// or of the per-day random trend (Flat, UShapeVolume).
  double momentum_strength = 0.002;
  IntradayShape intraday_shape = IntradayShape::EarlyLowLateHigh;
  double base_volume = 1.0e4;
  std::string start_date = "2020-01-02";
  std::uint64_t rng_seed = 7;
};

struct DatasetSplit {
  std::vector<std::string> train;
  std::vector<std::string> valid;
  std::vector<std::string> test;
};

struct MarketStats {
  double av = 0.0;
  double asm_ = 0.0;
};

struct BarLoadResult {
  std::vector<TradingDayData> days;
  std::size_t dropped_asset_days = 0;
};

struct OrderGenConfig {
  int orders_per_day = 4;
  int sets_per_day = 1;
  double direction_balance = 0.5;
  double cash_budget_factor = 1.0;
  /// Cap on each order relative to the asset's daily volume.
  double max_volume_fraction = 0.05;
  /// Order amounts are drawn uniformly in [min_volume_fraction, max_volume_fraction] of day volume.
  double min_volume_fraction = 0.01;
  /// The epsilon buffer added to c0, as a fraction of the set's total notional at day-average prices.
  double cash_buffer_fraction = 0.01;
  std::uint64_t rng_seed = 11;
};

// ---------------------------------------------------------------------------
// Calendar helpers (proleptic Gregorian, days since 1970-01-01).

namespace detail {

inline long days_from_civil(int y, unsigned m, unsigned d) {
  y -= m <= 2;
  const long era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<long>(doe) - 719468;
}

inline void civil_from_days(long z, int& y, unsigned& m, unsigned& d) {
  z += 719468;
  const long era = (z >= 0 ? z : z - 146096) / 146097;
  const unsigned doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  d = doy - (153 * mp + 2) / 5 + 1;
  m = mp < 10 ? mp + 3 : mp - 9;
  y = static_cast<int>(yoe) + static_cast<int>(era) * 400 + (m <= 2);
}

inline long parse_date(const std::string& s) {
  int y = 0;
  unsigned m = 0, d = 0;
  if (std::sscanf(s.c_str(), "%d-%u-%u", &y, &m, &d) != 3 || m < 1 || m > 12 || d < 1 || d > 31)
    fail(ErrorKind::Parse, "bad date '" + s + "'");
  return days_from_civil(y, m, d);
}

inline std::string format_date(long days) {
  int y = 0;
  unsigned m = 0, d = 0;
  civil_from_days(days, y, m, d);
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04d-%02u-%02u", y, m, d);
  return buf;
}

/// Advance to the next Monday-to-Friday date.
inline long next_business_day(long days) {
  do {
    ++days;
  } while (((days + 3) % 7 + 7) % 7 >= 5);  // 1970-01-01 was a Thursday (weekday 3, Mon = 0)
  return days;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::string trim(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\t')) s.pop_back();
  std::size_t i = 0;
  while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
  return s.substr(i);
}

inline double parse_double(const std::string& s, std::size_t row, const char* field) {
  try {
    std::size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size() || !std::isfinite(v)) throw std::invalid_argument(field);
    return v;
  } catch (const std::exception&) {
    fail(ErrorKind::Parse, "row " + std::to_string(row) + ": bad " + field + " '" + s + "'");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Bar CSV: header `date,asset,minute,price,volume`, minute 0-based.

inline BarLoadResult parse_bars(std::istream& in, int minutes_per_day) {
  require(minutes_per_day > 0, "minutes_per_day must be positive");
  std::string line;
  if (!std::getline(in, line)) fail(ErrorKind::Parse, "row 1: missing header");
  if (detail::trim(line) != "date,asset,minute,price,volume")
    fail(ErrorKind::Parse, "row 1: expected header date,asset,minute,price,volume");

  // date -> asset -> bars
  std::map<std::string, std::map<std::string, std::vector<MinuteBar>>> raw;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    line = detail::trim(line);
    if (line.empty()) continue;
    auto cells = detail::split_csv_line(line);
    if (cells.size() != 5)
      fail(ErrorKind::Parse, "row " + std::to_string(row) + ": expected 5 fields, got " + std::to_string(cells.size()));
    for (auto& c : cells) c = detail::trim(c);
    detail::parse_date(cells[0]);
    if (cells[1].empty()) fail(ErrorKind::Parse, "row " + std::to_string(row) + ": empty asset");
    double minute_d = detail::parse_double(cells[2], row, "minute");
    if (minute_d != std::floor(minute_d) || minute_d < 0 || minute_d >= minutes_per_day)
      fail(ErrorKind::Parse, "row " + std::to_string(row) + ": minute out of range '" + cells[2] + "'");
    MinuteBar bar{cells[1], static_cast<int>(minute_d), detail::parse_double(cells[3], row, "price"),
                  detail::parse_double(cells[4], row, "volume")};
    if (bar.price <= 0.0) fail(ErrorKind::Parse, "row " + std::to_string(row) + ": price must be positive");
    if (bar.volume < 0.0) fail(ErrorKind::Parse, "row " + std::to_string(row) + ": volume must be non-negative");
    raw[cells[0]][cells[1]].push_back(std::move(bar));
  }

  BarLoadResult result;
  for (auto& [date, assets] : raw) {
    TradingDayData day{date, minutes_per_day, {}};
    for (auto& [asset, bars] : assets) {
      std::sort(bars.begin(), bars.end(), [](const MinuteBar& a, const MinuteBar& b) { return a.minute_index < b.minute_index; });
      bool complete = static_cast<int>(bars.size()) == minutes_per_day;
      for (std::size_t i = 0; complete && i < bars.size(); ++i) {
        if (i > 0 && bars[i].minute_index == bars[i - 1].minute_index)
          fail(ErrorKind::Parse, "duplicate minute " + std::to_string(bars[i].minute_index) + " for " + asset + " on " + date);
        complete = bars[i].minute_index == static_cast<int>(i);
      }
      if (!complete) {
        ++result.dropped_asset_days;
        continue;
      }
      day.assets.emplace(asset, std::move(bars));
    }
    if (!day.assets.empty()) result.days.push_back(std::move(day));
  }
  if (result.dropped_asset_days > 0)
    log(LogLevel::Info, "dropped " + std::to_string(result.dropped_asset_days) + " incomplete asset-days");
  return result;
}

inline BarLoadResult load_bars(const std::string& path, int minutes_per_day) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open bar file " + path);
  return parse_bars(in, minutes_per_day);
}

inline void write_bars(std::ostream& out, const std::vector<TradingDayData>& days) {
  out << "date,asset,minute,price,volume\n";
  char buf[64];
  for (const auto& day : days) {
    for (const auto& [asset, bars] : day.assets) {
      for (const auto& bar : bars) {
        out << day.date << ',' << asset << ',' << bar.minute_index << ',';
        std::snprintf(buf, sizeof(buf), "%.17g,%.17g\n", bar.price, bar.volume);
        out << buf;
      }
    }
  }
}

inline void save_bars(const std::string& path, const std::vector<TradingDayData>& days) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Io, "cannot write bar file " + path);
  write_bars(out, days);
}

// ---------------------------------------------------------------------------
// Synthetic market

inline void validate(const SyntheticMarketConfig& c) {
  require(c.n_assets >= 1, "n_assets must be >= 1");
  require(c.days >= 1, "days must be >= 1");
  require(c.minutes_per_day == 240 || c.minutes_per_day == 390, "minutes_per_day must be 240 or 390");
  require(c.base_price > 0.0, "base_price must be positive");
  require(c.daily_volatility_target > 0.0, "daily_volatility_target must be positive");
  require(c.momentum_strength >= 0.0, "momentum_strength must be non-negative");
  require(c.base_volume > 0.0, "base_volume must be positive");
}

/// Deterministic intraday log-price profile for EarlyLowLateHigh: low at the
/// open, peaking two thirds into the session.
inline double early_low_late_high_profile(double u) {
  return -std::cos(1.5 * 3.14159265358979323846 * u);
}

inline std::vector<TradingDayData> generate_synthetic_market(const SyntheticMarketConfig& config) {
  validate(config);
  const int m = config.minutes_per_day;
  // Within-day std of a driftless random walk is sigma * sqrt(m / 6) in
  // expectation of the variance; 0.925 corrects E[std] against sqrt(E[var]).
  const double sigma = config.daily_volatility_target / (0.925 * std::sqrt(m / 6.0));
  const double overnight_sigma = 0.3 * config.daily_volatility_target;

  std::vector<TradingDayData> days;
  days.reserve(static_cast<std::size_t>(config.days));
  std::vector<double> open_price(static_cast<std::size_t>(config.n_assets), config.base_price);
  long date = detail::parse_date(config.start_date);
  if (((date + 3) % 7 + 7) % 7 >= 5) date = detail::next_business_day(date);

  for (int d = 0; d < config.days; ++d) {
    TradingDayData day{detail::format_date(date), m, {}};
    for (int a = 0; a < config.n_assets; ++a) {
      Rng rng = make_rng(config.rng_seed, static_cast<std::uint64_t>(d), static_cast<std::uint64_t>(a));
      char name[16];
      std::snprintf(name, sizeof(name), "A%03d", a);
      const double amplitude = config.momentum_strength * uniform(rng, 0.5, 1.5);
      const double trend_sign = uniform01(rng) < 0.5 ? -1.0 : 1.0;
      const double volume_level = config.base_volume * std::exp(0.25 * standard_normal(rng));

      std::vector<MinuteBar> bars(static_cast<std::size_t>(m));
      double log_p = std::log(open_price[static_cast<std::size_t>(a)]);
      for (int t = 0; t < m; ++t) {
        const double u0 = static_cast<double>(t) / m;
        const double u1 = static_cast<double>(t + 1) / m;
        double volume_shape = 1.0;
        double drift = 0.0;
        switch (config.intraday_shape) {
          case IntradayShape::EarlyLowLateHigh:
            drift = amplitude * (early_low_late_high_profile(u1) - early_low_late_high_profile(u0));
            break;
          case IntradayShape::UShapeVolume:
            volume_shape = 0.4 + 2.4 * (2.0 * u0 - 1.0) * (2.0 * u0 - 1.0);
            drift = trend_sign * amplitude / m;
            break;
          case IntradayShape::Flat:
            drift = trend_sign * amplitude / m;
            break;
        }
        const double noise = standard_normal(rng);
        const double vol_noise = std::exp(0.3 * standard_normal(rng) - 0.045);
        bars[static_cast<std::size_t>(t)] = MinuteBar{name, t, std::exp(log_p), volume_level * volume_shape * vol_noise};
        log_p += drift + sigma * noise;
      }
      open_price[static_cast<std::size_t>(a)] = std::exp(log_p + overnight_sigma * standard_normal(rng));
      day.assets.emplace(name, std::move(bars));
    }
    days.push_back(std::move(day));
    date = detail::next_business_day(date);
  }
  return days;
}

// ---------------------------------------------------------------------------
// Dataset statistics

/// AV = mean over asset-days of std(p_t / p-tilde); ASM = mean over asset-days
/// of sum_t |p_t - p_{t-1}| / p-tilde. Standard deviation is the population one.
inline MarketStats market_stats(const std::vector<TradingDayData>& dataset) {
  double av_sum = 0.0, asm_sum = 0.0;
  std::size_t count = 0;
  for (const auto& day : dataset) {
    for (const auto& [asset, bars] : day.assets) {
      if (bars.empty()) continue;
      const double n = static_cast<double>(bars.size());
      double mean = 0.0;
      for (const auto& b : bars) mean += b.price;
      mean /= n;
      double var = 0.0, path = 0.0;
      for (std::size_t t = 0; t < bars.size(); ++t) {
        const double r = bars[t].price / mean - 1.0;
        var += r * r;
        if (t > 0) path += std::abs(bars[t].price - bars[t - 1].price);
      }
      av_sum += std::sqrt(var / n);
      asm_sum += path / mean;
      ++count;
    }
  }
  if (count == 0) fail(ErrorKind::Precondition, "market_stats: empty dataset");
  return {av_sum / static_cast<double>(count), asm_sum / static_cast<double>(count)};
}

// ---------------------------------------------------------------------------
// Order sets

/// Cash left after executing every order at its day-average price.
inline double day_average_cash_balance(const OrderSet& set, const TradingDayData& day) {
  double cash = set.initial_cash;
  for (const auto& o : set.orders) cash += o.direction * o.amount * day.average_price(o.asset_id);
  return cash;
}

inline std::vector<OrderSet> generate_order_sets(const std::vector<TradingDayData>& dataset, const OrderGenConfig& config) {
  require(config.orders_per_day >= 1, "orders_per_day must be >= 1");
  require(config.sets_per_day >= 1, "sets_per_day must be >= 1");
  require(config.direction_balance >= 0.0 && config.direction_balance <= 1.0, "direction_balance must lie in [0,1]");
  require(config.cash_budget_factor >= 0.0, "cash_budget_factor must be non-negative");
  require(config.max_volume_fraction > 0.0 && config.min_volume_fraction > 0.0 &&
              config.min_volume_fraction <= config.max_volume_fraction,
          "volume fractions must satisfy 0 < min <= max");

  std::vector<OrderSet> out;
  for (std::size_t d = 0; d < dataset.size(); ++d) {
    const auto& day = dataset[d];
    std::vector<std::string> assets;
    for (const auto& kv : day.assets) assets.push_back(kv.first);
    const auto n = static_cast<std::size_t>(config.orders_per_day);
    require(assets.size() >= n, "day " + day.date + " has fewer assets than orders_per_day");

    for (int s = 0; s < config.sets_per_day; ++s) {
      Rng rng = make_rng(config.rng_seed, d, static_cast<std::uint64_t>(s));
      std::vector<std::string> pool = assets;
      // Partial Fisher-Yates on the first n slots.
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(uniform01(rng) * static_cast<double>(pool.size() - i));
        std::swap(pool[i], pool[std::min(j, pool.size() - 1)]);
      }
      const auto n_liq = static_cast<std::size_t>(std::lround(config.direction_balance * static_cast<double>(n)));
      std::vector<int> dirs(n, -1);
      std::fill(dirs.begin(), dirs.begin() + static_cast<std::ptrdiff_t>(n_liq), 1);
      for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = std::min(static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i)), i - 1);
        std::swap(dirs[i - 1], dirs[j]);
      }

      OrderSet set{day.date, {}, 0.0};
      double acq = 0.0, liq = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double frac = uniform(rng, config.min_volume_fraction, config.max_volume_fraction);
        const double amount = frac * day.total_volume(pool[i]);
        require(amount > 0.0, "asset " + pool[i] + " has zero volume on " + day.date);
        set.orders.push_back({pool[i], dirs[i], amount});
        const double notional = amount * day.average_price(pool[i]);
        (dirs[i] > 0 ? liq : acq) += notional;
      }
      const double deficit = std::max(acq - liq, 0.0);
      const double buffer = config.cash_buffer_fraction * (acq + liq);
      if (deficit > 0.0 && config.cash_budget_factor < 1.0) {
        // Shrink acquisitions so day-average execution stays funded.
        const double scale = (liq + config.cash_budget_factor * deficit) / acq;
        require(scale > 0.0, "cash_budget_factor 0 leaves an acquisition-only set without funds");
        for (auto& o : set.orders)
          if (o.direction < 0) o.amount *= scale;
      }
      set.initial_cash = config.cash_budget_factor * deficit + buffer;
      out.push_back(std::move(set));
    }
  }
  return out;
}

inline nlohmann::json order_sets_to_json(const std::vector<OrderSet>& sets) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& s : sets) {
    nlohmann::json orders = nlohmann::json::array();
    for (const auto& o : s.orders) orders.push_back({{"asset", o.asset_id}, {"direction", o.direction}, {"amount", o.amount}});
    arr.push_back({{"date", s.date}, {"initial_cash", s.initial_cash}, {"orders", std::move(orders)}});
  }
  return arr;
}

inline std::vector<OrderSet> order_sets_from_json(const nlohmann::json& arr) {
  if (!arr.is_array()) fail(ErrorKind::Parse, "order file must hold a JSON array");
  std::vector<OrderSet> out;
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const auto& j = arr[i];
    try {
      OrderSet s{j.at("date").get<std::string>(), {}, j.at("initial_cash").get<double>()};
      for (const auto& o : j.at("orders")) {
        OrderSpec spec{o.at("asset").get<std::string>(), o.at("direction").get<int>(), o.at("amount").get<double>()};
        if (spec.direction != 1 && spec.direction != -1) fail(ErrorKind::Parse, "direction must be +1 or -1");
        if (!(spec.amount > 0.0)) fail(ErrorKind::Parse, "amount must be positive");
        s.orders.push_back(std::move(spec));
      }
      if (s.orders.empty()) fail(ErrorKind::Parse, "order set without orders");
      if (!(s.initial_cash >= 0.0)) fail(ErrorKind::Parse, "initial_cash must be non-negative");
      out.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::Parse, "order set " + std::to_string(i) + ": " + e.what());
    } catch (const Error& e) {
      fail(ErrorKind::Parse, "order set " + std::to_string(i) + ": " + e.what());
    }
  }
  return out;
}

inline void save_order_sets(const std::string& path, const std::vector<OrderSet>& sets) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Io, "cannot write order file " + path);
  out << order_sets_to_json(sets).dump(1) << '\n';
}

inline std::vector<OrderSet> load_order_sets(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open order file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Parse, path + ": " + e.what());
  }
  return order_sets_from_json(j);
}

// ---------------------------------------------------------------------------
// Splits

/// boundaries = {first validation date, first test date}.
inline DatasetSplit split_dataset(const std::vector<std::string>& dates, const std::vector<std::string>& boundaries) {
  require(boundaries.size() == 2, "split_dataset needs exactly two boundary dates");
  require(!dates.empty(), "split_dataset: empty dataset");
  std::vector<std::string> sorted = dates;
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  const auto b1 = detail::parse_date(boundaries[0]);
  const auto b2 = detail::parse_date(boundaries[1]);
  require(b1 < b2, "split boundaries must be strictly increasing");
  const auto first = detail::parse_date(sorted.front());
  const auto last = detail::parse_date(sorted.back());
  require(b1 > first && b1 <= last && b2 <= last, "split boundary outside dataset range");

  DatasetSplit split;
  for (const auto& d : sorted) {
    const auto v = detail::parse_date(d);
    (v < b1 ? split.train : v < b2 ? split.valid : split.test).push_back(d);
  }
  require(!split.train.empty() && !split.valid.empty() && !split.test.empty(), "split produces an empty partition");
  return split;
}

inline std::vector<std::string> dates_of(const std::vector<TradingDayData>& days) {
  std::vector<std::string> out;
  for (const auto& d : days) out.push_back(d.date);
  return out;
}

/// Chronological split by fractions of the distinct dates (train, valid; rest is test).
inline DatasetSplit split_by_fraction(const std::vector<std::string>& dates, double train_frac, double valid_frac) {
  std::vector<std::string> sorted = dates;
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  require(sorted.size() >= 3, "need at least three dates to split");
  auto n_train = static_cast<std::size_t>(std::floor(train_frac * static_cast<double>(sorted.size())));
  auto n_valid = static_cast<std::size_t>(std::floor(valid_frac * static_cast<double>(sorted.size())));
  n_train = std::clamp<std::size_t>(n_train, 1, sorted.size() - 2);
  n_valid = std::clamp<std::size_t>(n_valid, 1, sorted.size() - n_train - 1);
  return split_dataset(sorted, {sorted[n_train], sorted[n_train + n_valid]});
}

/// Trading days plus the order sets to execute on them.
struct ExecutionDataset {
  std::vector<TradingDayData> days;
  std::vector<OrderSet> order_sets;

  const TradingDayData& day_for(const OrderSet& set) const {
    for (const auto& d : days)
      if (d.date == set.date) return d;
    fail(ErrorKind::Precondition, "no market data for order set date " + set.date);
  }

  /// Days and order sets restricted to `dates`.
  ExecutionDataset subset(const std::vector<std::string>& dates) const {
    const std::set<std::string> keep(dates.begin(), dates.end());
    ExecutionDataset out;
    for (const auto& d : days)
      if (keep.count(d.date)) out.days.push_back(d);
    for (const auto& s : order_sets)
      if (keep.count(s.date)) out.order_sets.push_back(s);
    return out;
  }
};

}  // namespace moex

#endif  // MOEX_MARKET_DATA_HPP_
