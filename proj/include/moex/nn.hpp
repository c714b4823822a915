#ifndef MOEX_NN_HPP_
#define MOEX_NN_HPP_

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <deque>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "moex/common.hpp"

namespace moex::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense 2-D tensor (rows x cols) with an optional gradient buffer.
struct Tensor {
  Matrix value;
  Matrix grad;
  bool requires_grad = true;

  Tensor() = default;
  explicit Tensor(Matrix v, bool needs_grad = true) : value(std::move(v)), requires_grad(needs_grad) {
    if (requires_grad) grad = Matrix::Zero(value.rows(), value.cols());
  }

  std::vector<std::size_t> shape() const {
    return {static_cast<std::size_t>(value.rows()), static_cast<std::size_t>(value.cols())};
  }
  std::size_t size() const { return static_cast<std::size_t>(value.size()); }
  void zero_grad() {
    if (requires_grad) grad.setZero(value.rows(), value.cols());
  }
};

// ---------------------------------------------------------------------------
// Parameters and optimiser state

struct Parameter {
  std::string name;
  Tensor tensor;
  Matrix adam_m;
  Matrix adam_v;
  std::int64_t adam_steps = 0;
};

class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore& other) { *this = other; }
  ParamStore& operator=(const ParamStore& other) {
    if (this == &other) return *this;
    params_.clear();
    index_.clear();
    for (const auto& p : other.params_) {
      params_.push_back(std::make_unique<Parameter>(*p));
      index_[p->name] = params_.size() - 1;
    }
    return *this;
  }
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  Tensor& add(const std::string& name, Matrix init) {
    if (index_.count(name)) fail(ErrorKind::Precondition, "duplicate parameter " + name);
    auto p = std::make_unique<Parameter>();
    p->name = name;
    p->adam_m = Matrix::Zero(init.rows(), init.cols());
    p->adam_v = Matrix::Zero(init.rows(), init.cols());
    p->tensor = Tensor(std::move(init));
    params_.push_back(std::move(p));
    index_[name] = params_.size() - 1;
    return params_.back()->tensor;
  }

  /// Weight [fan_in x fan_out] uniform in +-sqrt(6 / (fan_in + fan_out)); bias zero.
  void add_dense(const std::string& name, int fan_in, int fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    Matrix w(fan_in, fan_out);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = uniform(rng, -limit, limit);
    add(name + ".w", std::move(w));
    add(name + ".b", Matrix::Zero(1, fan_out));
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor& get(const std::string& name) { return param(name).tensor; }
  const Tensor& get(const std::string& name) const { return param(name).tensor; }
  Parameter& param(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) fail(ErrorKind::Precondition, "unknown parameter " + name);
    return *params_[it->second];
  }
  const Parameter& param(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) fail(ErrorKind::Precondition, "unknown parameter " + name);
    return *params_[it->second];
  }

  std::size_t size() const { return params_.size(); }
  Parameter& at(std::size_t i) { return *params_[i]; }
  const Parameter& at(std::size_t i) const { return *params_[i]; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->tensor.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->tensor.zero_grad();
  }

  /// Global L2 norm of all gradients; non-finite if any entry is.
  double grad_norm() const {
    double s = 0.0;
    for (const auto& p : params_) s += p->tensor.grad.squaredNorm();
    return std::sqrt(s);
  }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::map<std::string, std::size_t> index_;
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam on every parameter (or on those whose name starts
/// with `prefix`). Each parameter keeps its own step counter.
inline void adam_step(ParamStore& store, const AdamConfig& cfg, const std::string& prefix = "") {
  for (std::size_t i = 0; i < store.size(); ++i) {
    Parameter& p = store.at(i);
    if (!prefix.empty() && p.name.rfind(prefix, 0) != 0) continue;
    if (!p.tensor.requires_grad) continue;
    ++p.adam_steps;
    const Matrix& g = p.tensor.grad;
    p.adam_m = cfg.beta1 * p.adam_m + (1.0 - cfg.beta1) * g;
    p.adam_v = cfg.beta2 * p.adam_v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(p.adam_steps));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(p.adam_steps));
    p.tensor.value.array() -=
        cfg.lr * (p.adam_m.array() / c1) / ((p.adam_v.array() / c2).sqrt() + cfg.eps);
  }
}

/// Rescales all gradients so the global norm is at most max_norm; returns the
/// norm before clipping.
inline double clip_grad_norm(ParamStore& store, double max_norm) {
  const double norm = store.grad_norm();
  if (max_norm > 0.0 && norm > max_norm && std::isfinite(norm)) {
    const double s = max_norm / norm;
    for (std::size_t i = 0; i < store.size(); ++i) store.at(i).tensor.grad *= s;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Reverse-mode tape

class Graph;

struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
};

/// Records primitive ops and replays them backwards. A graph built with
/// record_gradients = false only evaluates values.
class Graph {
 public:
  using Backward = std::function<void(Graph&, const Matrix& out_grad)>;

  explicit Graph(bool record_gradients = true) : record_(record_gradients) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return record_; }

  Var constant(Matrix value) {
    nodes_.push_back(Node{std::move(value), Matrix(), nullptr, nullptr, false});
    return Var{this, nodes_.size() - 1};
  }

  Var param(Tensor& t) {
    nodes_.push_back(Node{t.value, Matrix(), nullptr, &t, record_ && t.requires_grad});
    return Var{this, nodes_.size() - 1};
  }

  /// Adds a node computed from `inputs`; `backward` receives the output
  /// gradient and must call accumulate() for each input it differentiates.
  Var op(Matrix value, std::initializer_list<Var> inputs, Backward backward) {
    bool needs = false;
    if (record_)
      for (const Var& v : inputs) needs = needs || nodes_[v.id].needs_grad;
    nodes_.push_back(Node{std::move(value), Matrix(), needs ? std::move(backward) : nullptr, nullptr, needs});
    return Var{this, nodes_.size() - 1};
  }

  Var op(Matrix value, const std::vector<Var>& inputs, Backward backward) {
    bool needs = false;
    if (record_)
      for (const Var& v : inputs) needs = needs || nodes_[v.id].needs_grad;
    nodes_.push_back(Node{std::move(value), Matrix(), needs ? std::move(backward) : nullptr, nullptr, needs});
    return Var{this, nodes_.size() - 1};
  }

  const Matrix& value(Var v) const { return nodes_[v.id].value; }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

  template <typename Expr>
  void accumulate(Var v, const Expr& g) {
    Node& n = nodes_[v.id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  /// Gradient of a node after backward() (empty if it did not receive any).
  const Matrix& grad(Var v) const { return nodes_[v.id].grad; }

  /// Back-propagates from a scalar node (seed 1) and adds leaf gradients into
  /// the bound parameter tensors.
  void backward(Var loss, double seed = 1.0) {
    require(loss.rows() == 1 && loss.cols() == 1, "backward needs a scalar node");
    if (!record_) fail(ErrorKind::Precondition, "backward on a non-recording graph");
    if (!nodes_[loss.id].needs_grad) return;
    nodes_[loss.id].grad = Matrix::Constant(1, 1, seed);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.size() == 0) continue;
      if (n.backward) n.backward(*this, n.grad);
      if (n.param != nullptr) n.param->grad += n.grad;
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Backward backward;
    Tensor* param;
    bool needs_grad;
  };
  bool record_;
  std::deque<Node> nodes_;
};

inline const Matrix& Var::value() const { return graph->value(*this); }

// ---------------------------------------------------------------------------
// Primitive ops

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    fail(ErrorKind::Precondition, std::string(op) + ": shape mismatch");
}

inline Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) fail(ErrorKind::Precondition, "matmul: inner dimensions disagree");
  Graph& g = *a.graph;
  return g.op(a.value() * b.value(), {a, b}, [a, b](Graph& g, const Matrix& d) {
    if (g.needs_grad(a)) g.accumulate(a, d * g.value(b).transpose());
    if (g.needs_grad(b)) g.accumulate(b, g.value(a).transpose() * d);
  });
}

/// Affine map x W + b with W [in x out] and b [1 x out].
inline Var fc(Var x, Var w, Var b) {
  if (x.cols() != w.rows()) fail(ErrorKind::Precondition, "fc: input width does not match weight rows");
  if (b.rows() != 1 || b.cols() != w.cols()) fail(ErrorKind::Precondition, "fc: bias shape mismatch");
  Graph& g = *x.graph;
  Matrix out = x.value() * w.value();
  out.rowwise() += b.value().row(0);
  return g.op(std::move(out), {x, w, b}, [x, w, b](Graph& g, const Matrix& d) {
    if (g.needs_grad(x)) g.accumulate(x, d * g.value(w).transpose());
    if (g.needs_grad(w)) g.accumulate(w, g.value(x).transpose() * d);
    if (g.needs_grad(b)) g.accumulate(b, d.colwise().sum());
  });
}

inline Var add(Var a, Var b) {
  check_same_shape(a, b, "add");
  return a.graph->op(a.value() + b.value(), {a, b}, [a, b](Graph& g, const Matrix& d) {
    g.accumulate(a, d);
    g.accumulate(b, d);
  });
}

inline Var sub(Var a, Var b) {
  check_same_shape(a, b, "sub");
  return a.graph->op(a.value() - b.value(), {a, b}, [a, b](Graph& g, const Matrix& d) {
    g.accumulate(a, d);
    g.accumulate(b, -d);
  });
}

inline Var mul(Var a, Var b) {
  check_same_shape(a, b, "mul");
  return a.graph->op(a.value().cwiseProduct(b.value()), {a, b}, [a, b](Graph& g, const Matrix& d) {
    if (g.needs_grad(a)) g.accumulate(a, d.cwiseProduct(g.value(b)));
    if (g.needs_grad(b)) g.accumulate(b, d.cwiseProduct(g.value(a)));
  });
}

inline Var scale(Var a, double s) {
  return a.graph->op(a.value() * s, {a}, [a, s](Graph& g, const Matrix& d) { g.accumulate(a, d * s); });
}

inline Var relu(Var a) {
  Matrix out = a.value().cwiseMax(0.0);
  return a.graph->op(std::move(out), {a}, [a](Graph& g, const Matrix& d) {
    g.accumulate(a, (g.value(a).array() > 0.0).select(d, 0.0));
  });
}

inline Var tanh(Var a) {
  Matrix out = a.value().array().tanh().matrix();
  const std::size_t out_id = a.graph->size();
  return a.graph->op(std::move(out), {a}, [a, out_id](Graph& g, const Matrix& d) {
    const Matrix& y = g.value(Var{&g, out_id});
    g.accumulate(a, d.cwiseProduct((1.0 - y.array().square()).matrix()));
  });
}

inline Var sigmoid(Var a) {
  Matrix out = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  const std::size_t out_id = a.graph->size();
  return a.graph->op(std::move(out), {a}, [a, out_id](Graph& g, const Matrix& d) {
    const Matrix& y = g.value(Var{&g, out_id});
    g.accumulate(a, d.cwiseProduct((y.array() * (1.0 - y.array())).matrix()));
  });
}

inline Var exp(Var a) {
  Matrix out = a.value().array().exp().matrix();
  const std::size_t out_id = a.graph->size();
  return a.graph->op(std::move(out), {a}, [a, out_id](Graph& g, const Matrix& d) {
    g.accumulate(a, d.cwiseProduct(g.value(Var{&g, out_id})));
  });
}

inline Var square(Var a) {
  return a.graph->op(a.value().cwiseProduct(a.value()), {a}, [a](Graph& g, const Matrix& d) {
    g.accumulate(a, 2.0 * d.cwiseProduct(g.value(a)));
  });
}

/// Element-wise clamp; the gradient is zero where the clamp is active.
inline Var clip(Var a, double lo, double hi) {
  return a.graph->op(a.value().cwiseMax(lo).cwiseMin(hi), {a}, [a, lo, hi](Graph& g, const Matrix& d) {
    const auto& x = g.value(a).array();
    g.accumulate(a, ((x >= lo) && (x <= hi)).select(d, 0.0));
  });
}

/// Element-wise minimum; ties send the gradient to the first argument.
inline Var minimum(Var a, Var b) {
  check_same_shape(a, b, "minimum");
  return a.graph->op(a.value().cwiseMin(b.value()), {a, b}, [a, b](Graph& g, const Matrix& d) {
    const auto first = (g.value(a).array() <= g.value(b).array());
    if (g.needs_grad(a)) g.accumulate(a, first.select(d, 0.0));
    if (g.needs_grad(b)) g.accumulate(b, first.select(0.0, d));
  });
}

/// Row-wise softmax with max subtraction.
inline Matrix softmax_rows(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

inline Var softmax(Var a) {
  Matrix out = softmax_rows(a.value());
  const std::size_t out_id = a.graph->size();
  return a.graph->op(std::move(out), {a}, [a, out_id](Graph& g, const Matrix& d) {
    const Matrix& y = g.value(Var{&g, out_id});
    Eigen::VectorXd dot = d.cwiseProduct(y).rowwise().sum();
    Matrix gx = y.cwiseProduct(d);
    gx -= y.cwiseProduct(dot.replicate(1, y.cols()));
    g.accumulate(a, gx);
  });
}

inline Var log_softmax(Var a) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    const double lse = m + std::log((x.row(r).array() - m).exp().sum());
    out.row(r) = (x.row(r).array() - lse).matrix();
  }
  const std::size_t out_id = a.graph->size();
  return a.graph->op(std::move(out), {a}, [a, out_id](Graph& g, const Matrix& d) {
    const Matrix p = g.value(Var{&g, out_id}).array().exp().matrix();
    Eigen::VectorXd total = d.rowwise().sum();
    g.accumulate(a, d - p.cwiseProduct(total.replicate(1, p.cols())));
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) fail(ErrorKind::Precondition, "concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Eigen::Index c = 0;
  for (const Var& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return parts[0].graph->op(std::move(out), parts, [parts](Graph& g, const Matrix& d) {
    Eigen::Index c = 0;
    for (const Var& p : parts) {
      const Eigen::Index w = g.value(p).cols();
      if (g.needs_grad(p)) g.accumulate(p, d.middleCols(c, w));
      c += w;
    }
  });
}

inline Var slice_cols(Var a, Eigen::Index begin, Eigen::Index count) {
  require(begin >= 0 && begin + count <= a.cols(), "slice_cols: out of range");
  return a.graph->op(a.value().middleCols(begin, count), {a}, [a, begin, count](Graph& g, const Matrix& d) {
    Matrix full = Matrix::Zero(g.value(a).rows(), g.value(a).cols());
    full.middleCols(begin, count) = d;
    g.accumulate(a, full);
  });
}

/// Stacks rows of `a` selected by index (repeats allowed).
inline Var gather_rows(Var a, std::vector<Eigen::Index> index) {
  Matrix out(static_cast<Eigen::Index>(index.size()), a.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    require(index[i] >= 0 && index[i] < a.rows(), "gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(index[i]);
  }
  return a.graph->op(std::move(out), {a}, [a, index = std::move(index)](Graph& g, const Matrix& d) {
    Matrix full = Matrix::Zero(g.value(a).rows(), g.value(a).cols());
    for (std::size_t i = 0; i < index.size(); ++i) full.row(index[i]) += d.row(static_cast<Eigen::Index>(i));
    g.accumulate(a, full);
  });
}

/// Vertical stack of equally wide blocks.
inline Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  for (const Var& p : parts) {
    if (p.cols() != cols) fail(ErrorKind::Precondition, "concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  Eigen::Index r = 0;
  for (const Var& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return parts[0].graph->op(std::move(out), parts, [parts](Graph& g, const Matrix& d) {
    Eigen::Index r = 0;
    for (const Var& p : parts) {
      const Eigen::Index h = g.value(p).rows();
      if (g.needs_grad(p)) g.accumulate(p, d.middleRows(r, h));
      r += h;
    }
  });
}

/// out[r] = a[r, column[r]] as an [R x 1] column.
inline Var pick(Var a, std::vector<Eigen::Index> column) {
  require(static_cast<Eigen::Index>(column.size()) == a.rows(), "pick: one column per row");
  Matrix out(a.rows(), 1);
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    require(column[static_cast<std::size_t>(r)] >= 0 && column[static_cast<std::size_t>(r)] < a.cols(), "pick: column out of range");
    out(r, 0) = a.value()(r, column[static_cast<std::size_t>(r)]);
  }
  return a.graph->op(std::move(out), {a}, [a, column = std::move(column)](Graph& g, const Matrix& d) {
    Matrix full = Matrix::Zero(g.value(a).rows(), g.value(a).cols());
    for (Eigen::Index r = 0; r < full.rows(); ++r) full(r, column[static_cast<std::size_t>(r)]) = d(r, 0);
    g.accumulate(a, full);
  });
}

/// Rows are laid out in consecutive groups of `group` rows; returns one mean row per group.
inline Var group_mean(Var a, Eigen::Index group) {
  require(group >= 1 && a.rows() % group == 0, "group_mean: rows not divisible by group size");
  const Eigen::Index n_groups = a.rows() / group;
  Matrix out(n_groups, a.cols());
  for (Eigen::Index k = 0; k < n_groups; ++k) out.row(k) = a.value().middleRows(k * group, group).colwise().mean();
  return a.graph->op(std::move(out), {a}, [a, group, n_groups](Graph& g, const Matrix& d) {
    Matrix full(g.value(a).rows(), g.value(a).cols());
    for (Eigen::Index k = 0; k < n_groups; ++k)
      full.middleRows(k * group, group) = (d.row(k) / static_cast<double>(group)).replicate(group, 1);
    g.accumulate(a, full);
  });
}

/// For each row, the mean of the other rows in its group (zero for singleton groups).
inline Var others_mean(Var a, Eigen::Index group) {
  require(group >= 1 && a.rows() % group == 0, "others_mean: rows not divisible by group size");
  const Eigen::Index n_groups = a.rows() / group;
  Matrix out = Matrix::Zero(a.rows(), a.cols());
  if (group > 1) {
    const double inv = 1.0 / static_cast<double>(group - 1);
    for (Eigen::Index k = 0; k < n_groups; ++k) {
      RowVector total = a.value().middleRows(k * group, group).colwise().sum();
      for (Eigen::Index r = 0; r < group; ++r)
        out.row(k * group + r) = (total - a.value().row(k * group + r)) * inv;
    }
  }
  return a.graph->op(std::move(out), {a}, [a, group, n_groups](Graph& g, const Matrix& d) {
    Matrix full = Matrix::Zero(g.value(a).rows(), g.value(a).cols());
    if (group > 1) {
      const double inv = 1.0 / static_cast<double>(group - 1);
      for (Eigen::Index k = 0; k < n_groups; ++k) {
        RowVector total = d.middleRows(k * group, group).colwise().sum();
        for (Eigen::Index r = 0; r < group; ++r)
          full.row(k * group + r) = (total - d.row(k * group + r)) * inv;
      }
    }
    g.accumulate(a, full);
  });
}

inline Var sum(Var a) {
  return a.graph->op(Matrix::Constant(1, 1, a.value().sum()), {a}, [a](Graph& g, const Matrix& d) {
    g.accumulate(a, Matrix::Constant(g.value(a).rows(), g.value(a).cols(), d(0, 0)));
  });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

/// sum_ij w_ij a_ij with constant weights.
inline Var weighted_sum(Var a, Matrix weights) {
  require(weights.rows() == a.rows() && weights.cols() == a.cols(), "weighted_sum: weight shape mismatch");
  const double v = a.value().cwiseProduct(weights).sum();
  return a.graph->op(Matrix::Constant(1, 1, v), {a}, [a, w = std::move(weights)](Graph& g, const Matrix& d) {
    g.accumulate(a, w * d(0, 0));
  });
}

// ---------------------------------------------------------------------------
// GRU

struct GruParams {
  Var wx;  // [in x 3H], gate order r | z | n
  Var wh;  // [H x 3H]
  Var bx;  // [1 x 3H]
  Var bh;  // [1 x 3H]
};

/// One GRU update:
///   r = sig(x Wx_r + bx_r + h Wh_r + bh_r), z likewise,
///   n = tanh(x Wx_n + bx_n + r * (h Wh_n + bh_n)), h' = (1 - z) * n + z * h.
inline Var gru_cell(Var x, Var h, const GruParams& p) {
  const Eigen::Index H = h.cols();
  if (p.wh.rows() != H || p.wh.cols() != 3 * H || p.wx.cols() != 3 * H || p.wx.rows() != x.cols() ||
      p.bx.cols() != 3 * H || p.bh.cols() != 3 * H || x.rows() != h.rows())
    fail(ErrorKind::Precondition, "gru_cell: shape mismatch");
  Matrix gx = x.value() * p.wx.value();
  gx.rowwise() += p.bx.value().row(0);
  Matrix gh = h.value() * p.wh.value();
  gh.rowwise() += p.bh.value().row(0);
  const Eigen::Index R = x.rows();
  Matrix r = (1.0 / (1.0 + (-(gx.leftCols(H) + gh.leftCols(H)).array()).exp())).matrix();
  Matrix z = (1.0 / (1.0 + (-(gx.middleCols(H, H) + gh.middleCols(H, H)).array()).exp())).matrix();
  Matrix ghn = gh.rightCols(H);
  Matrix n = (gx.rightCols(H).array() + r.array() * ghn.array()).tanh().matrix();
  Matrix out = ((1.0 - z.array()) * n.array() + z.array() * h.value().array()).matrix();
  Graph& g = *x.graph;
  return g.op(std::move(out), {x, h, p.wx, p.wh, p.bx, p.bh},
              [x, h, p, H, R, r = std::move(r), z = std::move(z), n = std::move(n), ghn = std::move(ghn)](
                  Graph& g, const Matrix& d) {
                const Matrix& hv = g.value(h);
                Matrix dn = (d.array() * (1.0 - z.array())).matrix();
                Matrix dz = (d.array() * (hv.array() - n.array())).matrix();
                Matrix dpre_n = (dn.array() * (1.0 - n.array().square())).matrix();
                Matrix dr = (dpre_n.array() * ghn.array()).matrix();
                Matrix dgx(R, 3 * H), dgh(R, 3 * H);
                dgx.leftCols(H) = (dr.array() * r.array() * (1.0 - r.array())).matrix();
                dgx.middleCols(H, H) = (dz.array() * z.array() * (1.0 - z.array())).matrix();
                dgx.rightCols(H) = dpre_n;
                dgh.leftCols(2 * H) = dgx.leftCols(2 * H);
                dgh.rightCols(H) = (dpre_n.array() * r.array()).matrix();
                if (g.needs_grad(x)) g.accumulate(x, dgx * g.value(p.wx).transpose());
                if (g.needs_grad(h)) {
                  Matrix dh = (d.array() * z.array()).matrix();
                  dh.noalias() += dgh * g.value(p.wh).transpose();
                  g.accumulate(h, dh);
                }
                if (g.needs_grad(p.wx)) g.accumulate(p.wx, g.value(x).transpose() * dgx);
                if (g.needs_grad(p.wh)) g.accumulate(p.wh, hv.transpose() * dgh);
                if (g.needs_grad(p.bx)) g.accumulate(p.bx, dgx.colwise().sum());
                if (g.needs_grad(p.bh)) g.accumulate(p.bh, dgh.colwise().sum());
              });
}

// ---------------------------------------------------------------------------
// Attention

/// Per-head attention weights softmax(Q_h K_h^T / sqrt(d)) for every group of
/// `group` consecutive rows. Result: one [group x group] matrix per (group, head),
/// ordered group-major.
inline std::vector<Matrix> attention_weights(const Matrix& q, const Matrix& k, int n_heads, Eigen::Index group) {
  require(n_heads >= 1 && q.cols() % n_heads == 0, "attention: model dim not divisible by heads");
  require(group >= 1 && q.rows() % group == 0 && k.rows() == q.rows() && k.cols() == q.cols(),
          "attention: bad group layout");
  const Eigen::Index dh = q.cols() / n_heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Matrix> out;
  for (Eigen::Index gi = 0; gi < q.rows() / group; ++gi) {
    for (int hd = 0; hd < n_heads; ++hd) {
      Matrix s = q.block(gi * group, hd * dh, group, dh) * k.block(gi * group, hd * dh, group, dh).transpose() * inv;
      out.push_back(softmax_rows(s));
    }
  }
  return out;
}

/// Scaled dot-product attention inside each group of rows, heads side by side
/// along the columns. Q, K, V are already projected.
inline Var grouped_attention(Var q, Var k, Var v, int n_heads, Eigen::Index group) {
  check_same_shape(q, k, "attention");
  check_same_shape(q, v, "attention");
  std::vector<Matrix> weights = attention_weights(q.value(), k.value(), n_heads, group);
  const Eigen::Index dh = q.cols() / n_heads;
  const Eigen::Index n_groups = q.rows() / group;
  Matrix out(q.rows(), q.cols());
  for (Eigen::Index gi = 0; gi < n_groups; ++gi)
    for (int hd = 0; hd < n_heads; ++hd)
      out.block(gi * group, hd * dh, group, dh) =
          weights[static_cast<std::size_t>(gi * n_heads + hd)] * v.value().block(gi * group, hd * dh, group, dh);
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  return q.graph->op(std::move(out), {q, k, v},
                     [q, k, v, n_heads, group, dh, n_groups, inv, weights = std::move(weights)](Graph& g, const Matrix& d) {
                       const Matrix &qv = g.value(q), &kv = g.value(k), &vv = g.value(v);
                       Matrix dq = Matrix::Zero(qv.rows(), qv.cols());
                       Matrix dk = Matrix::Zero(qv.rows(), qv.cols());
                       Matrix dv = Matrix::Zero(qv.rows(), qv.cols());
                       for (Eigen::Index gi = 0; gi < n_groups; ++gi) {
                         for (int hd = 0; hd < n_heads; ++hd) {
                           const Matrix& a = weights[static_cast<std::size_t>(gi * n_heads + hd)];
                           const auto rb = gi * group, cb = hd * dh;
                           Matrix dout = d.block(rb, cb, group, dh);
                           dv.block(rb, cb, group, dh) = a.transpose() * dout;
                           Matrix da = dout * vv.block(rb, cb, group, dh).transpose();
                           Eigen::VectorXd dot = da.cwiseProduct(a).rowwise().sum();
                           Matrix ds = a.cwiseProduct(da - dot.replicate(1, group)) * inv;
                           dq.block(rb, cb, group, dh) = ds * kv.block(rb, cb, group, dh);
                           dk.block(rb, cb, group, dh) = ds.transpose() * qv.block(rb, cb, group, dh);
                         }
                       }
                       g.accumulate(q, dq);
                       g.accumulate(k, dk);
                       g.accumulate(v, dv);
                     });
}

struct AttentionParams {
  Var wq, bq, wk, bk, wv, bv, wo, bo;
};

/// Multi-head attention: per-head scaled dot-product over each group's keys,
/// heads concatenated and projected by Wo.
inline Var multi_head_attention(Var queries, Var keys, Var values, const AttentionParams& p, int n_heads,
                                Eigen::Index group) {
  if (n_heads < 1 || p.wq.cols() % n_heads != 0)
    fail(ErrorKind::Precondition, "multi_head_attention: model dim not divisible by heads");
  Var q = fc(queries, p.wq, p.bq);
  Var k = fc(keys, p.wk, p.bk);
  Var v = fc(values, p.wv, p.bv);
  return fc(grouped_attention(q, k, v, n_heads, group), p.wo, p.bo);
}

// ---------------------------------------------------------------------------
// Finite-difference verification

struct FiniteDiffReport {
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  std::size_t entries_checked = 0;
  bool passed = false;
};

/// Compares the tape gradient of a scalar function with central differences
/// (step h) over every entry of `params`. Relative error uses
/// max(|analytic|, |numeric|, floor) as denominator.
inline FiniteDiffReport finite_diff_check(const std::function<Var(Graph&)>& build, const std::vector<Tensor*>& params,
                                          double tolerance = 1e-5, double h = 1e-6, double floor = 1e-3) {
  for (Tensor* t : params) t->zero_grad();
  {
    Graph g(true);
    Var loss = build(g);
    g.backward(loss);
  }
  auto eval = [&]() {
    Graph g(false);
    return build(g).scalar();
  };
  FiniteDiffReport report;
  for (Tensor* t : params) {
    for (Eigen::Index i = 0; i < t->value.size(); ++i) {
      double& x = t->value.data()[i];
      const double saved = x;
      x = saved + h;
      const double fp = eval();
      x = saved - h;
      const double fm = eval();
      x = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double analytic = t->grad.data()[i];
      const double abs_err = std::abs(numeric - analytic);
      const double rel = abs_err / std::max({std::abs(numeric), std::abs(analytic), floor});
      report.max_absolute_error = std::max(report.max_absolute_error, abs_err);
      report.max_relative_error = std::max(report.max_relative_error, rel);
      ++report.entries_checked;
    }
  }
  report.passed = report.max_relative_error <= tolerance;
  return report;
}

// ---------------------------------------------------------------------------
// Checkpoints: "MOEXCKPT" | u32 version | u64 manifest length | manifest JSON |
// raw little-endian float64 payload. Offsets in the manifest count doubles.

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::string& path, const ParamStore& store, bool with_optimizer = true) {
  static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes little-endian host");
  nlohmann::json manifest;
  manifest["format_version"] = kCheckpointVersion;
  manifest["with_optimizer"] = with_optimizer;
  nlohmann::json entries = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& p = store.at(i);
    nlohmann::json e = {{"name", p.name},
                        {"shape", {p.tensor.value.rows(), p.tensor.value.cols()}},
                        {"offset", offset}};
    offset += static_cast<std::uint64_t>(p.tensor.value.size());
    if (with_optimizer) {
      e["adam_steps"] = p.adam_steps;
      offset += 2 * static_cast<std::uint64_t>(p.tensor.value.size());
    }
    entries.push_back(std::move(e));
  }
  manifest["params"] = std::move(entries);
  const std::string text = manifest.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::Io, "cannot write checkpoint " + path);
  out.write("MOEXCKPT", 8);
  const std::uint32_t version = kCheckpointVersion;
  const std::uint64_t length = text.size();
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  out.write(reinterpret_cast<const char*>(&length), sizeof(length));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& p = store.at(i);
    const auto bytes = static_cast<std::streamsize>(p.tensor.value.size() * sizeof(double));
    out.write(reinterpret_cast<const char*>(p.tensor.value.data()), bytes);
    if (with_optimizer) {
      out.write(reinterpret_cast<const char*>(p.adam_m.data()), bytes);
      out.write(reinterpret_cast<const char*>(p.adam_v.data()), bytes);
    }
  }
  if (!out) fail(ErrorKind::Io, "failed writing checkpoint " + path);
}

/// Loads into an already-shaped store. The manifest must list exactly the
/// store's parameters, in order, with identical shapes.
inline void load_checkpoint(const std::string& path, ParamStore& store) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open checkpoint " + path);
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t length = 0;
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(&length), sizeof(length));
  if (!in || std::memcmp(magic, "MOEXCKPT", 8) != 0) fail(ErrorKind::Parse, path + ": not a checkpoint");
  if (version != kCheckpointVersion) fail(ErrorKind::Parse, path + ": unsupported checkpoint version");
  if (length > (1u << 30)) fail(ErrorKind::Parse, path + ": manifest too large");
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Parse, path + ": bad manifest: " + e.what());
  }
  const auto& entries = manifest.at("params");
  const bool with_opt = manifest.value("with_optimizer", false);
  if (entries.size() != store.size()) fail(ErrorKind::Parse, path + ": parameter count mismatch");
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& p = store.at(i);
    const auto& e = entries[i];
    if (e.at("name").get<std::string>() != p.name) fail(ErrorKind::Parse, path + ": parameter name mismatch at " + p.name);
    if (e.at("shape")[0].get<Eigen::Index>() != p.tensor.value.rows() ||
        e.at("shape")[1].get<Eigen::Index>() != p.tensor.value.cols())
      fail(ErrorKind::Parse, path + ": shape mismatch for " + p.name);
  }
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto& p = store.at(i);
    const auto bytes = static_cast<std::streamsize>(p.tensor.value.size() * sizeof(double));
    in.read(reinterpret_cast<char*>(p.tensor.value.data()), bytes);
    if (with_opt) {
      in.read(reinterpret_cast<char*>(p.adam_m.data()), bytes);
      in.read(reinterpret_cast<char*>(p.adam_v.data()), bytes);
      p.adam_steps = entries[i].value("adam_steps", std::int64_t{0});
    }
  }
  if (!in) fail(ErrorKind::Parse, path + ": truncated payload");
  if (in.peek() != std::char_traits<char>::eof()) fail(ErrorKind::Parse, path + ": trailing bytes after payload");
}

}  // namespace moex::nn

#endif  // MOEX_NN_HPP_
