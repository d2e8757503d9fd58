#include "biasedit/graph.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "biasedit/error.hpp"

namespace biasedit {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const MatR>;
using MutMap = Eigen::Map<MatR>;

namespace {

ConstMap as_mat(const Tensor& t) { return ConstMap(t.data().data(), t.rows(), t.cols()); }
MutMap as_mat(Tensor& t) { return MutMap(t.data().data(), t.rows(), t.cols()); }

void require(bool cond, const char* op, const std::string& what) {
  if (!cond) throw ShapeError(std::string(op) + ": " + what);
}

std::string dims(const Shape& s) { return shape_str(s); }

bool is_matrix(const Shape& s) { return s.size() == 2; }

void check_offsets(const char* op, const std::vector<std::size_t>& offsets, std::size_t n) {
  require(offsets.size() >= 2, op, "need at least one segment");
  require(offsets.front() == 0 && offsets.back() == n, op, "offsets must span [0, N]");
  for (std::size_t i = 1; i < offsets.size(); ++i)
    require(offsets[i] > offsets[i - 1], op, "segments must be non-empty and increasing");
}

}  // namespace

class Op {
 public:
  virtual ~Op() = default;
  virtual const char* name() const = 0;
  virtual Shape output_shape(const std::vector<const Shape*>& in) const = 0;
  virtual Tensor forward(const std::vector<const Tensor*>& in) const = 0;
  // Accumulate into din[i] (nullptr when input i needs no gradient).
  virtual void backward(const std::vector<const Tensor*>& in, const Tensor& out,
                        const Tensor& dout, const std::vector<Tensor*>& din) const = 0;
  virtual bool blocks_gradient() const { return false; }
};

namespace {

// ---------------------------------------------------------------- matmul

enum class Trans { kNN, kNT, kTN };

class MatMulOp final : public Op {
 public:
  explicit MatMulOp(Trans t) : t_(t) {}
  const char* name() const override { return "matmul"; }

  Shape output_shape(const std::vector<const Shape*>& in) const override {
    const Shape& a = *in[0];
    const Shape& b = *in[1];
    require(is_matrix(a) && is_matrix(b), name(), "operands must be matrices");
    switch (t_) {
      case Trans::kNN:
        require(a[1] == b[0], name(), "inner dims " + dims(a) + " · " + dims(b));
        return {a[0], b[1]};
      case Trans::kNT:
        require(a[1] == b[1], name(), "inner dims " + dims(a) + " · " + dims(b) + "ᵀ");
        return {a[0], b[0]};
      case Trans::kTN:
        require(a[0] == b[0], name(), "inner dims " + dims(a) + "ᵀ · " + dims(b));
        return {a[1], b[1]};
    }
    return {};
  }

  Tensor forward(const std::vector<const Tensor*>& in) const override {
    Tensor out(output_shape({&in[0]->shape(), &in[1]->shape()}));
    auto a = as_mat(*in[0]);
    auto b = as_mat(*in[1]);
    auto c = as_mat(out);
    switch (t_) {
      case Trans::kNN: c.noalias() = a * b; break;
      case Trans::kNT: c.noalias() = a * b.transpose(); break;
      case Trans::kTN: c.noalias() = a.transpose() * b; break;
    }
    return out;
  }

  void backward(const std::vector<const Tensor*>& in, const Tensor&, const Tensor& dout,
                const std::vector<Tensor*>& din) const override {
    auto a = as_mat(*in[0]);
    auto b = as_mat(*in[1]);
    auto dc = as_mat(dout);
    if (din[0]) {
      auto da = as_mat(*din[0]);
      switch (t_) {
        case Trans::kNN: da.noalias() += dc * b.transpose(); break;
        case Trans::kNT: da.noalias() += dc * b; break;
        case Trans::kTN: da.noalias() += b * dc.transpose(); break;
      }
    }
    if (din[1]) {
      auto db = as_mat(*din[1]);
      switch (t_) {
        case Trans::kNN: db.noalias() += a.transpose() * dc; break;
        case Trans::kNT: db.noalias() += dc.transpose() * a; break;
        case Trans::kTN: db.noalias() += a * dc; break;
      }
    }
  }

 private:
  Trans t_;
};

// ---------------------------------------------------------------- binary elementwise

enum class Binary { kAdd, kSub, kMul };

class BinaryOp final : public Op {
 public:
  explicit BinaryOp(Binary k) : k_(k) {}
  const char* name() const override {
    switch (k_) {
      case Binary::kAdd: return "add";
      case Binary::kSub: return "sub";
      case Binary::kMul: return "mul";
    }
    return "binary";
  }
  Shape output_shape(const std::vector<const Shape*>& in) const override {
    require(*in[0] == *in[1], name(), dims(*in[0]) + " vs " + dims(*in[1]));
    return *in[0];
  }
  Tensor forward(const std::vector<const Tensor*>& in) const override {
    Tensor out = *in[0];
    const auto b = in[1]->data();
    auto o = out.data();
    switch (k_) {
      case Binary::kAdd: for (std::size_t i = 0; i < o.size(); ++i) o[i] += b[i]; break;
      case Binary::kSub: for (std::size_t i = 0; i < o.size(); ++i) o[i] -= b[i]; break;
      case Binary::kMul: for (std::size_t i = 0; i < o.size(); ++i) o[i] *= b[i]; break;
    }
    return out;
  }
  void backward(const std::vector<const Tensor*>& in, const Tensor&, const Tensor& dout,
                const std::vector<Tensor*>& din) const override {
    const auto g = dout.data();
    for (int side = 0; side < 2; ++side) {
      if (!din[side]) continue;
      auto d = din[side]->data();
      switch (k_) {
        case Binary::kAdd:
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
          break;
        case Binary::kSub:
          if (side == 0)
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
          else
            for (std::size_t i = 0; i < d.size(); ++i) d[i] -= g[i];
          break;
        case Binary::kMul: {
          const auto other = in[1 - side]->data();
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * other[i];
          break;
        }
      }
    }
  }

 private:
  Binary k_;
};

class ScaleOp final : public Op {
 public:
  explicit ScaleOp(double f) : f_(f) {}
  const char* name() const override { return "scale"; }
  Shape output_shape(const std::vector<const Shape*>& in) const override { return *in[0]; }
  Tensor forward(const std::vector<const Tensor*>& in) const override { return *in[0] * f_; }
  void backward(const std::vector<const Tensor*>&, const Tensor&, const Tensor& dout,
                const std::vector<Tensor*>& din) const override {
    if (!din[0]) return;
    auto d = din[0]->data();
    const auto g = dout.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += f_ * g[i];
  }

 private:
  double f_;
};

class ScaleByOp final : public Op {
 public:
  const char* name() const override { return "scale_by"; }
  Shape output_shape(const std::vector<const Shape*>& in) const override {
    require(in[1]->empty(), name(), "scale factor must have shape [], got " + dims(*in[1]));
    return *in[0];
  }
  Tensor forward(const std::vector<const Tensor*>& in) const override {
    return *in[0] * in[1]->item();
  }
  void backward(const std::vector<const Tensor*>& in, const Tensor&, const Tensor& dout,
                const std::vector<Tensor*>& din) const override {
    const auto g = dout.data();
    if (din[0]) {
      const double s = in[1]->item();
      auto d = din[0]->data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += s * g[i];
    }
    if (din[1]) {
      const auto a = in[0]->data();
      double acc = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) acc += g[i] * a[i];
      (*din[1])[0] += acc;
    }
  }
};

class AddBiasOp final : public Op {
 public:
  const char* name() const override { return "add_bias"; }
  Shape output_shape(const std::vector<const Shape*>& in) const override {
    const Shape& x = *in[0];
    const Shape& b = *in[1];
    require(b.size() == 1, name(), "bias must be a vector, got " + dims(b));
    require((x.size() == 2 && x[1] == b[0]) || (x.size() == 1 && x[0] == b[0]), name(),
            dims(x) + " + bias " + dims(b));
    return x;
  }
  Tensor forward(const std::vector<const Tensor*>& in) const override {
    Tensor out = *in[0];
    const auto b = in[1]->data();
    const std::size_t r = out.rows(), c = out.cols();
    for (std::size_t i = 0; i < r; ++i) {
      auto row = out.row(i);
      for (std::size_t j = 0; j < c; ++j) row[j] += b[j];
    }
    return out;
  }
  void backward(const std::vector<const Tensor*>&, const Tensor&, const Tensor& dout,
                const std::vector<Tensor*>& din) const override {
    if (din[0]) *din[0] += dout;
    if (din[1]) {
      auto d = din[1]->data();
      const std::size_t r = dout.rows(), c = dout.cols();
      for (std::size_t i = 0; i < r; ++i) {
        const auto row = dout.row(i);
        for (std::size_t j = 0; j < c; ++j) d[j] += row[j];
      }
    }
  }
};

// x[i, j] * v[j]; the column-wise counterpart of add_bias.
class MulColsOp final : public Op {
 public:
  const char* name() const override { return "mul_cols"; }
  Shape output_shape(const std::vector<const Shape*>& in) const override {
    const Shape& x = *in[0];
    const Shape& v = *in[1];
    require(v.size() == 1, name(), "scale must be a vector, got " + dims(v));
    require((x.size() == 2 && x[1] == v[0]) || (x.size() == 1 && x[0] == v[0]), name(),
            dims(x) + " * cols " + dims(v));
    return x;
  }
  Tensor forward(const std::vector<const Tensor*>& in) const override {
    Tensor out = *in[0];
    const auto v = in[1]->data();
    const std::size_t r = out.rows(), c = out.cols();
    for (std::size_t i = 0; i < r; ++i) {
      auto row = out.row(i);
      for (std::size_t j = 0; j < c; ++j) row[j] *= v[j];
    }
    return out;
  }
  void backward(const std::vector<const Tensor*>& in, const Tensor&, const Tensor& dout,
                const std::vector<Tensor*>& din) const override {
    const std::size_t r = dout.rows(), c = dout.cols();
    const auto v = in[1]->data();
    if (din[0]) {
      for (std::size_t i = 0; i < r; ++i) {
        auto d = din[0]->row(i);
        const auto g = dout.row(i);
        for (std::size_t j = 0; j < c; ++j) d[j] += g[j] * v[j];
      }
    }
    if (din[1]) {
      auto d = din[1]->data();
      for (std::size_t i = 0; i < r; ++i) {
        const auto g = dout.row(i);
        const auto x = in[0]->row(i);
        for (std::size_t j = 0; j < c; ++j) d[j] += g[j] * x[j];
      }
    }
  }
};

// ---------------------------------------------------------------- unary elementwise

enum class Unary { kGelu, kRelu, kTanh, kExp, kLog };

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

class UnaryOp final : public Op {
 public:
  explicit UnaryOp(Unary k) : k_(k) {}
  const char* name() const override {
    switch (k_) {
      case Unary::kGelu: return "gelu";
      case Unary::kRelu: return "relu";
      case Unary::kTanh: return "tanh";
      case Unary::kExp: return "exp";
      case Unary::kLog: return "log";
    }
    return "unary";
  }
  Shape output_shape(const std::vector<const Shape*>& in) const override { return *in[0]; }
  Tensor forward(const std::vector<const Tensor*>& in) const override {
    Tensor out = *in[0];
    for (double& v : out.data()) v = apply(v);
    return out;
  }
  void backward(const std::vector<const Tensor*>& in, const Tensor& out, const Tensor& dout,
                const std::vector<Tensor*>& din) const override {
    if (!din[0]) return;
    const auto x = in[0]->data();
    const auto y = out.data();
    const auto g = dout.data();
    auto d = din[0]->data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * derivative(x[i], y[i]);
  }

 private:
  double apply(double x) const {
    switch (k_) {
      case Unary::kGelu: {
        const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
        return 0.5 * x * (1.0 + t);
      }
      case Unary::kRelu: return x > 0.0 ? x : 0.0;
      case Unary::kTanh: return std::tanh(x);
      case Unary::kExp: return std::exp(x);
      case Unary::kLog: return std::log(x);
    }
    return x;
  }
  double derivative(double x, double y) const {
    switch (k_) {
      case Unary::kGelu: {
        const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
        return 0.5 * (1.0 + t) +
               0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
      }
      case Unary::kRelu: return x > 0.0 ? 1.0 : 0.0;
      case Unary::kTanh: return 1.0 - y * y;
      case Unary::kExp: return y;
      case Unary::kLog: return 1.0 / x;
    }
    return 1.0;
  }
  Unary k_;
};

// ---------------------------------------------------------------- layer norm

class LayerNormOp final : public Op {
 public:
  explicit LayerNormOp(double eps) : eps_(eps) {}
  const char* name() const override { return "layer_norm"; }
  Shape output_shape(const std::vector<const Shape*>& in) const override {
    const Shape& x = *in[0];
    require(x.size() == 2 || x.size() == 1, name(), "input must be a vector or matrix");
    const std::size_t n = x.back();
    require(*in[1] == Shape{n} && *in[2] == Shape{n}, name(), "gain/bias must be [" +
            std::to_string(n) + "]");
    return x;
  }
  Tensor forward(const std::vector<const Tensor*>& in) const override {
    const Tensor& x = *in[0];
    const auto gain = in[1]->data();
    const auto bias = in[2]->data();
    Tensor out(x.shape());
    const std::size_t r = x.rows(), c = x.cols();
    for (std::size_t i = 0; i < r; ++i) {
      const auto xr = x.row(i);
      auto orow = out.row(i);
      double mu = 0.0;
      for (double v : xr) mu += v;
      mu /= static_cast<double>(c);
      double var = 0.0;
      for (double v : xr) var += (v - mu) * (v - mu);
      var /= static_cast<double>(c);
      const double inv = 1.0 / std::sqrt(var + eps_);
      for (std::size_t j = 0; j < c; ++j) orow[j] = (xr[j] - mu) * inv * gain[j] + bias[j];
    }
    return out;
  }
  void backward(const std::vector<const Tensor*>& in, const Tensor&, const Tensor& dout,
                const std::vector<Tensor*>& din) const override {
    const Tensor& x = *in[0];
    const auto gain = in[1]->data();
    const std::size_t r = x.rows(), c = x.cols();
    const double n = static_cast<double>(c);
    std::vector<double> xhat(c), dxhat(c);
    for (std::size_t i = 0; i < r; ++i) {
      const auto xr = x.row(i);
      const auto g = dout.row(i);
      double mu = 0.0;
      for (double v : xr) mu += v;
      mu /= n;
      double var = 0.0;
      for (double v : xr) var += (v - mu) * (v - mu);
      var /= n;
      const double inv = 1.0 / std::sqrt(var + eps_);
      double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        xhat[j] = (xr[j] - mu) * inv;
        dxhat[j] = g[j] * gain[j];
        mean_dxhat += dxhat[j];
        mean_dxhat_xhat += dxhat[j] * xhat[j];
      }
      mean_dxhat /= n;
      mean_dxhat_xhat /= n;
      if (din[0]) {
        auto d = din[0]->row(i);
        for (std::size_t j = 0; j < c; ++j)
          d[j] += inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
      }
      if (din[1]) {
        auto dg = din[1]->data();
        for (std::size_t j = 0; j < c; ++j) dg[j] += g[j] * xhat[j];
      }
      if (din[2]) {
        auto db = din[2]->data();
        for (std::size_t j = 0; j < c; ++j) db[j] += g[j];
      }
    }
  }

 private:
  double eps_;
};

// ---------------------------------------------------------------- lookup / gather

class EmbeddingOp final : public Op {
 public:
  explicit EmbeddingOp(std::vector<std::size_t> ids) : ids_(std::move(ids)) {}
  const char* name() const override { return "embedding"; }
  Shape output_shape(const std::vector<const Shape*>& in) const override {
    const Shape& t = *in[0];
    require(is_matrix(t), name(), "table must be a matrix");
    require(!ids_.empty(), name(), "empty id list");
    for (auto id : ids_)
      require(id < t[0], name(), "id " + std::to_string(id) + " out of vocabulary " + dims(t));
    return {ids_.size(), t[1]};
  }
  Tensor forward(const std::vector<const Tensor*>& in) const override {
    const Tensor& t = *in[0];
    Tensor out(Shape{ids_.size(), t.cols()});
    for (std::size_t i = 0; i < ids_.size(); ++i) {
      const auto src = t.row(ids_[i]);
      std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
  }
  void backward(const std::vector<const Tensor*>&, const Tensor&, const Tensor& dout,
                const std::vector<Tensor*>& din) const override {
    if (!din[0]) return;
    for (std::size_t i = 0; i < ids_.size(); ++i) {
      auto d = din[0]->row(ids_[i]);
      const auto g = dout.row(i);
      for (std::size_t j = 0; j < d.size(); ++j) d[j] += g[j];
    }
  }

 private:
  std::vector<std::size_t> ids_;
};

class PickOp final : public Op {
 public:
  explicit PickOp(std::vector<std::size_t> cols) : cols_(std::move(cols)) {}
  const char* name() const override { return "pick"; }
  Shape output_shape(const std::vector<const Shape*>& in) const override {
    const Shape& x = *in[0];
    require(is_matrix(x), name(), "input must be a matrix");
    require(cols_.size() == x[0], name(), "one column index per row required");
    for (auto c : cols_) require(c < x[1], name(), "column index out of range");
    return {x[0]};
  }
  Tensor forward(const std::vector<const Tensor*>& in) const override {
    Tensor out(Shape{cols_.size()});
    for (std::size_t i = 0; i < cols_.size(); ++i) out[i] = in[0]->at(i, cols_[i]);
    return out;
  }
  void backward(const std::vector<const Tensor*>&, const Tensor&, const Tensor& dout,
                const std::vector<Tensor*>& din) const override {
    if (!din[0]) return;
    for (std::size_t i = 0; i < cols_.size(); ++i) din[0]->at(i, cols_[i]) += dout[i];
  }

 private:
  std::vector<std::size_t> cols_;
};

class GatherOp final : public Op {
 public:
  explicit GatherOp(std::vector<std::size_t> idx) : idx_(std::move(idx)) {}
  const char* name() const override { return "gather"; }
  Shape output_shape(const std::vector<const Shape*>& in) const override {
    require(in[0]->size() == 1, name(), "input must be a vector");
    require(!idx_.empty(), name(), "empty index list");
    for (auto i : idx_) require(i < (*in[0])[0], name(), "index out of range");
    return {idx_.size()};
  }
  Tensor forward(const std::vector<const Tensor*>& in) const override {
    Tensor out(Shape{idx_.size()});
    for (std::size_t j = 0; j < idx_.size(); ++j) out[j] = (*in[0])[idx_[j]];
    return out;
  }
  void backward(const std::vector<const Tensor*>&, const Tensor&, const Tensor& dout,
                const std::vector<Tensor*>& din) const override {
    if (!din[0]) return;
    for (std::size_t j = 0; j < idx_.size(); ++j) (*din[0])[idx_[j]] += dout[j];
  }

 private:
  std::vector<std::size_t> idx_;
};

// ---------------------------------------------------------------- softmax family

class SoftmaxRowsOp final : public Op {
 public:
  explicit SoftmaxRowsOp(bool log) : log_(log) {}
  const char* name() const override { return log_ ? "log_softmax_rows" : "softmax_rows"; }
  Shape output_shape(const std::vector<const Shape*>& in) const override {
    require(in[0]->size() == 1 || in[0]->size() == 2, name(), "input must be a vector or matrix");
    return *in[0];
  }
  Tensor forward(const std::vector<const Tensor*>& in) const override {
    const Tensor& x = *in[0];
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.rows(); ++i) {
      const auto xr = x.row(i);
      auto orow = out.row(i);
      const double m = *std::max_element(xr.begin(), xr.end());
      double z = 0.0;
      for (double v : xr) z += std::exp(v - m);
      const double lse = m + std::log(z);
      for (std::size_t j = 0; j < xr.size(); ++j)
        orow[j] = log_ ? xr[j] - lse : std::exp(xr[j] - lse);
    }
    return out;
  }
  void backward(const std::vector<const Tensor*>&, const Tensor& out, const Tensor& dout,
                const std::vector<Tensor*>& din) const override {
    if (!din[0]) return;
    for (std::size_t i = 0; i < out.rows(); ++i) {
      const auto y = out.row(i);
      const auto g = dout.row(i);
      auto d = din[0]->row(i);
      if (log_) {
        double gs = 0.0;
        for (double v : g) gs += v;
        for (std::size_t j = 0; j < y.size(); ++j) d[j] += g[j] - std::exp(y[j]) * gs;
      } else {
        double dot = 0.0;
        for (std::size_t j = 0; j < y.size(); ++j) dot += y[j] * g[j];
        for (std::size_t j = 0; j < y.size(); ++j) d[j] += y[j] * (g[j] - dot);
      }
    }
  }

 private:
  bool log_;
};

class CausalAttentionOp final : public Op {
 public:
  CausalAttentionOp(std::size_t heads, std::vector<std::size_t> offsets)
      : heads_(heads), offsets_(std::move(offsets)) {}
  const char* name() const override { return "causal_attention"; }
  Shape output_shape(const std::vector<const Shape*>& in) const override {
    const Shape& q = *in[0];
    require(is_matrix(q) && q[1] % 3 == 0, name(), "qkv must be [N × 3d], got " + dims(q));
    const std::size_t d = q[1] / 3;
    require(heads_ > 0 && d % heads_ == 0, name(), "heads must divide model width");
    check_offsets(name(), offsets_, q[0]);
    return {q[0], d};
  }

  Tensor forward(const std::vector<const Tensor*>& in) const override {
    const Tensor& qkv = *in[0];
    const std::size_t d = qkv.cols() / 3, dh = d / heads_;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor out(Shape{qkv.rows(), d});
    std::vector<double> p;
    for (std::size_t s = 0; s + 1 < offsets_.size(); ++s) {
      const std::size_t b = offsets_[s], e = offsets_[s + 1];
      for (std::size_t h = 0; h < heads_; ++h) {
        for (std::size_t i = b; i < e; ++i) {
          probs(qkv, b, i, h, dh, d, inv_sqrt, p);
          auto o = out.row(i).subspan(h * dh, dh);
          for (std::size_t j = b; j <= i; ++j) {
            const auto v = qkv.row(j).subspan(2 * d + h * dh, dh);
            for (std::size_t c = 0; c < dh; ++c) o[c] += p[j - b] * v[c];
          }
        }
      }
    }
    return out;
  }

  void backward(const std::vector<const Tensor*>& in, const Tensor&, const Tensor& dout,
                const std::vector<Tensor*>& din) const override {
    if (!din[0]) return;
    const Tensor& qkv = *in[0];
    Tensor& g = *din[0];
    const std::size_t d = qkv.cols() / 3, dh = d / heads_;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<double> p, dp;
    for (std::size_t s = 0; s + 1 < offsets_.size(); ++s) {
      const std::size_t b = offsets_[s], e = offsets_[s + 1];
      for (std::size_t h = 0; h < heads_; ++h) {
        for (std::size_t i = b; i < e; ++i) {
          probs(qkv, b, i, h, dh, d, inv_sqrt, p);
          const auto go = dout.row(i).subspan(h * dh, dh);
          dp.assign(i - b + 1, 0.0);
          double pdp = 0.0;
          for (std::size_t j = b; j <= i; ++j) {
            const auto v = qkv.row(j).subspan(2 * d + h * dh, dh);
            auto gv = g.row(j).subspan(2 * d + h * dh, dh);
            double acc = 0.0;
            for (std::size_t c = 0; c < dh; ++c) {
              acc += go[c] * v[c];
              gv[c] += p[j - b] * go[c];
            }
            dp[j - b] = acc;
            pdp += p[j - b] * acc;
          }
          const auto q = qkv.row(i).subspan(h * dh, dh);
          auto gq = g.row(i).subspan(h * dh, dh);
          for (std::size_t j = b; j <= i; ++j) {
            const double ds = p[j - b] * (dp[j - b] - pdp) * inv_sqrt;
            const auto k = qkv.row(j).subspan(d + h * dh, dh);
            auto gk = g.row(j).subspan(d + h * dh, dh);
            for (std::size_t c = 0; c < dh; ++c) {
              gq[c] += ds * k[c];
              gk[c] += ds * q[c];
            }
          }
        }
      }
    }
  }

 private:
  static void probs(const Tensor& qkv, std::size_t b, std::size_t i, std::size_t h,
                    std::size_t dh, std::size_t d, double inv_sqrt, std::vector<double>& p) {
    const auto q = qkv.row(i).subspan(h * dh, dh);
    p.assign(i - b + 1, 0.0);
    double m = -INFINITY;
    for (std::size_t j = b; j <= i; ++j) {
      const auto k = qkv.row(j).subspan(d + h * dh, dh);
      double sc = 0.0;
      for (std::size_t c = 0; c < dh; ++c) sc += q[c] * k[c];
      sc *= inv_sqrt;
      p[j - b] = sc;
      m = std::max(m, sc);
    }
    double z = 0.0;
    for (double& v : p) {
      v = std::exp(v - m);
      z += v;
    }
    for (double& v : p) v /= z;
  }

  std::size_t heads_;
  std::vector<std::size_t> offsets_;
};

// ---------------------------------------------------------------- reductions

enum class Reduce { kSum, kMean };

class ReduceOp final : public Op {
 public:
  explicit ReduceOp(Reduce k) : k_(k) {}
  const char* name() const override { return k_ == Reduce::kSum ? "sum" : "mean"; }
  Shape output_shape(const std::vector<const Shape*>&) const override { return {}; }
  Tensor forward(const std::vector<const Tensor*>& in) const override {
    double s = 0.0;
    for (double v : in[0]->data()) s += v;
    if (k_ == Reduce::kMean) s /= static_cast<double>(in[0]->numel());
    return Tensor::scalar(s);
  }
  void backward(const std::vector<const Tensor*>& in, const Tensor&, const Tensor& dout,
                const std::vector<Tensor*>& din) const override {
    if (!din[0]) return;
    double g = dout.item();
    if (k_ == Reduce::kMean) g /= static_cast<double>(in[0]->numel());
    for (double& v : din[0]->data()) v += g;
  }

 private:
  Reduce k_;
};

class RowSumOp final : public Op {
 public:
  const char* name() const override { return "row_sum"; }
  Shape output_shape(const std::vector<const Shape*>& in) const override {
    require(is_matrix(*in[0]), name(), "input must be a matrix");
    return {(*in[0])[0]};
  }
  Tensor forward(const std::vector<const Tensor*>& in) const override {
    Tensor out(Shape{in[0]->rows()});
    for (std::size_t i = 0; i < in[0]->rows(); ++i) {
      double s = 0.0;
      for (double v : in[0]->row(i)) s += v;
      out[i] = s;
    }
    return out;
  }
  void backward(const std::vector<const Tensor*>&, const Tensor&, const Tensor& dout,
                const std::vector<Tensor*>& din) const override {
    if (!din[0]) return;
    for (std::size_t i = 0; i < dout.numel(); ++i)
      for (double& v : din[0]->row(i)) v += dout[i];
  }
};

class SegmentMeanOp final : public Op {
 public:
  explicit SegmentMeanOp(std::vector<std::size_t> offsets) : offsets_(std::move(offsets)) {}
  const char* name() const override { return "segment_mean"; }
  Shape output_shape(const std::vector<const Shape*>& in) const override {
    require(in[0]->size() == 1, name(), "input must be a vector");
    check_offsets(name(), offsets_, (*in[0])[0]);
    return {offsets_.size() - 1};
  }
  Tensor forward(const std::vector<const Tensor*>& in) const override {
    Tensor out(Shape{offsets_.size() - 1});
    for (std::size_t s = 0; s + 1 < offsets_.size(); ++s) {
      double acc = 0.0;
      for (std::size_t k = offsets_[s]; k < offsets_[s + 1]; ++k) acc += (*in[0])[k];
      out[s] = acc / static_cast<double>(offsets_[s + 1] - offsets_[s]);
    }
    return out;
  }
  void backward(const std::vector<const Tensor*>&, const Tensor&, const Tensor& dout,
                const std::vector<Tensor*>& din) const override {
    if (!din[0]) return;
    for (std::size_t s = 0; s + 1 < offsets_.size(); ++s) {
      const double g = dout[s] / static_cast<double>(offsets_[s + 1] - offsets_[s]);
      for (std::size_t k = offsets_[s]; k < offsets_[s + 1]; ++k) (*din[0])[k] += g;
    }
  }

 private:
  std::vector<std::size_t> offsets_;
};

// ---------------------------------------------------------------- structural

class ConcatColsOp final : public Op {
 public:
  const char* name() const override { return "concat_cols"; }
  Shape output_shape(const std::vector<const Shape*>& in) const override {
    require(is_matrix(*in[0]) && is_matrix(*in[1]), name(), "operands must be matrices");
    require((*in[0])[0] == (*in[1])[0], name(), "row counts differ");
    return {(*in[0])[0], (*in[0])[1] + (*in[1])[1]};
  }
  Tensor forward(const std::vector<const Tensor*>& in) const override {
    const std::size_t ca = in[0]->cols();
    Tensor out(output_shape({&in[0]->shape(), &in[1]->shape()}));
    for (std::size_t i = 0; i < out.rows(); ++i) {
      auto o = out.row(i);
      const auto a = in[0]->row(i);
      const auto b = in[1]->row(i);
      std::copy(a.begin(), a.end(), o.begin());
      std::copy(b.begin(), b.end(), o.begin() + static_cast<std::ptrdiff_t>(ca));
    }
    return out;
  }
  void backward(const std::vector<const Tensor*>& in, const Tensor&, const Tensor& dout,
                const std::vector<Tensor*>& din) const override {
    const std::size_t ca = in[0]->cols();
    for (std::size_t i = 0; i < dout.rows(); ++i) {
      const auto g = dout.row(i);
      if (din[0]) {
        auto d = din[0]->row(i);
        for (std::size_t j = 0; j < ca; ++j) d[j] += g[j];
      }
      if (din[1]) {
        auto d = din[1]->row(i);
        for (std::size_t j = 0; j < d.size(); ++j) d[j] += g[ca + j];
      }
    }
  }
};

class SliceColsOp final : public Op {
 public:
  SliceColsOp(std::size_t begin, std::size_t count) : begin_(begin), count_(count) {}
  const char* name() const override { return "slice_cols"; }
  Shape output_shape(const std::vector<const Shape*>& in) const override {
    require(is_matrix(*in[0]), name(), "input must be a matrix");
    require(count_ > 0 && begin_ + count_ <= (*in[0])[1], name(), "slice out of range");
    return {(*in[0])[0], count_};
  }
  Tensor forward(const std::vector<const Tensor*>& in) const override {
    Tensor out(Shape{in[0]->rows(), count_});
    for (std::size_t i = 0; i < out.rows(); ++i) {
      const auto src = in[0]->row(i).subspan(begin_, count_);
      std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
  }
  void backward(const std::vector<const Tensor*>&, const Tensor&, const Tensor& dout,
                const std::vector<Tensor*>& din) const override {
    if (!din[0]) return;
    for (std::size_t i = 0; i < dout.rows(); ++i) {
      auto d = din[0]->row(i).subspan(begin_, count_);
      const auto g = dout.row(i);
      for (std::size_t j = 0; j < count_; ++j) d[j] += g[j];
    }
  }

 private:
  std::size_t begin_, count_;
};

class StopGradientOp final : public Op {
 public:
  const char* name() const override { return "stop_gradient"; }
  Shape output_shape(const std::vector<const Shape*>& in) const override { return *in[0]; }
  Tensor forward(const std::vector<const Tensor*>& in) const override { return *in[0]; }
  void backward(const std::vector<const Tensor*>&, const Tensor&, const Tensor&,
                const std::vector<Tensor*>&) const override {}
  bool blocks_gradient() const override { return true; }
};

class PatchRowsOp final : public Op {
 public:
  explicit PatchRowsOp(std::map<std::size_t, Tensor> rows) : rows_(std::move(rows)) {}
  const char* name() const override { return "patch_rows"; }
  Shape output_shape(const std::vector<const Shape*>& in) const override {
    require(is_matrix(*in[0]), name(), "input must be a matrix");
    for (const auto& [r, v] : rows_) {
      require(r < (*in[0])[0], name(), "row " + std::to_string(r) + " out of range");
      require(v.numel() == (*in[0])[1], name(), "patch width " + dims(v.shape()) +
              " does not match " + dims(*in[0]));
    }
    return *in[0];
  }
  Tensor forward(const std::vector<const Tensor*>& in) const override {
    Tensor out = *in[0];
    for (const auto& [r, v] : rows_) std::copy(v.data().begin(), v.data().end(), out.row(r).begin());
    return out;
  }
  void backward(const std::vector<const Tensor*>&, const Tensor&, const Tensor& dout,
                const std::vector<Tensor*>& din) const override {
    if (!din[0]) return;
    for (std::size_t i = 0; i < dout.rows(); ++i) {
      if (rows_.contains(i)) continue;
      auto d = din[0]->row(i);
      const auto g = dout.row(i);
      for (std::size_t j = 0; j < d.size(); ++j) d[j] += g[j];
    }
  }

 private:
  std::map<std::size_t, Tensor> rows_;
};

}  // namespace

// ---------------------------------------------------------------- Graph

const Graph::Node& Graph::node(NodeRef n) const {
  if (n.id >= nodes_.size()) throw ContractViolation("node reference out of range");
  return nodes_[n.id];
}

NodeRef Graph::leaf(const std::string& name, Tensor value) {
  if (name.empty()) throw ContractViolation("leaf name must be non-empty");
  if (leaf_index_.contains(name)) throw ContractViolation("duplicate leaf name: " + name);
  Node n;
  n.shape = value.shape();
  n.value = std::move(value);
  n.requires_grad = true;
  n.leaf_name = name;
  leaf_index_[name] = nodes_.size();
  nodes_.push_back(std::move(n));
  if (evaluated_upto_ + 1 == nodes_.size()) ++evaluated_upto_;
  return NodeRef{nodes_.size() - 1};
}

NodeRef Graph::constant(Tensor value) {
  Node n;
  n.shape = value.shape();
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  if (evaluated_upto_ + 1 == nodes_.size()) ++evaluated_upto_;
  return NodeRef{nodes_.size() - 1};
}

NodeRef Graph::push(std::shared_ptr<const Op> op, std::vector<std::size_t> inputs) {
  std::vector<const Shape*> shapes;
  bool rg = false;
  for (auto i : inputs) {
    const Node& in = node(NodeRef{i});
    shapes.push_back(&in.shape);
    rg = rg || in.requires_grad;
  }
  Node n;
  n.shape = op->output_shape(shapes);
  n.requires_grad = rg && !op->blocks_gradient();
  n.op = std::move(op);
  n.inputs = std::move(inputs);
  nodes_.push_back(std::move(n));
  return NodeRef{nodes_.size() - 1};
}

NodeRef Graph::matmul(NodeRef a, NodeRef b) {
  return push(std::make_shared<MatMulOp>(Trans::kNN), {a.id, b.id});
}
NodeRef Graph::matmul_nt(NodeRef a, NodeRef b) {
  return push(std::make_shared<MatMulOp>(Trans::kNT), {a.id, b.id});
}
NodeRef Graph::matmul_tn(NodeRef a, NodeRef b) {
  return push(std::make_shared<MatMulOp>(Trans::kTN), {a.id, b.id});
}
NodeRef Graph::add(NodeRef a, NodeRef b) {
  return push(std::make_shared<BinaryOp>(Binary::kAdd), {a.id, b.id});
}
NodeRef Graph::sub(NodeRef a, NodeRef b) {
  return push(std::make_shared<BinaryOp>(Binary::kSub), {a.id, b.id});
}
NodeRef Graph::mul(NodeRef a, NodeRef b) {
  return push(std::make_shared<BinaryOp>(Binary::kMul), {a.id, b.id});
}
NodeRef Graph::scale(NodeRef a, double factor) {
  return push(std::make_shared<ScaleOp>(factor), {a.id});
}
NodeRef Graph::scale_by(NodeRef a, NodeRef s) {
  return push(std::make_shared<ScaleByOp>(), {a.id, s.id});
}
NodeRef Graph::add_bias(NodeRef x, NodeRef b) {
  return push(std::make_shared<AddBiasOp>(), {x.id, b.id});
}
NodeRef Graph::mul_cols(NodeRef x, NodeRef v) {
  return push(std::make_shared<MulColsOp>(), {x.id, v.id});
}
NodeRef Graph::gelu(NodeRef x) { return push(std::make_shared<UnaryOp>(Unary::kGelu), {x.id}); }
NodeRef Graph::relu(NodeRef x) { return push(std::make_shared<UnaryOp>(Unary::kRelu), {x.id}); }
NodeRef Graph::tanh(NodeRef x) { return push(std::make_shared<UnaryOp>(Unary::kTanh), {x.id}); }
NodeRef Graph::exp(NodeRef x) { return push(std::make_shared<UnaryOp>(Unary::kExp), {x.id}); }
NodeRef Graph::log(NodeRef x) { return push(std::make_shared<UnaryOp>(Unary::kLog), {x.id}); }
NodeRef Graph::layer_norm(NodeRef x, NodeRef gain, NodeRef bias, double eps) {
  return push(std::make_shared<LayerNormOp>(eps), {x.id, gain.id, bias.id});
}
NodeRef Graph::embedding(NodeRef table, std::vector<std::size_t> ids) {
  return push(std::make_shared<EmbeddingOp>(std::move(ids)), {table.id});
}
NodeRef Graph::softmax_rows(NodeRef x) {
  return push(std::make_shared<SoftmaxRowsOp>(false), {x.id});
}
NodeRef Graph::log_softmax_rows(NodeRef x) {
  return push(std::make_shared<SoftmaxRowsOp>(true), {x.id});
}
NodeRef Graph::causal_attention(NodeRef qkv, std::size_t n_heads,
                                std::vector<std::size_t> offsets) {
  return push(std::make_shared<CausalAttentionOp>(n_heads, std::move(offsets)), {qkv.id});
}
NodeRef Graph::pick(NodeRef x, std::vector<std::size_t> cols) {
  return push(std::make_shared<PickOp>(std::move(cols)), {x.id});
}
NodeRef Graph::gather(NodeRef v, std::vector<std::size_t> idx) {
  return push(std::make_shared<GatherOp>(std::move(idx)), {v.id});
}
NodeRef Graph::sum(NodeRef x) { return push(std::make_shared<ReduceOp>(Reduce::kSum), {x.id}); }
NodeRef Graph::mean(NodeRef x) { return push(std::make_shared<ReduceOp>(Reduce::kMean), {x.id}); }
NodeRef Graph::row_sum(NodeRef x) { return push(std::make_shared<RowSumOp>(), {x.id}); }
NodeRef Graph::segment_mean(NodeRef v, std::vector<std::size_t> offsets) {
  return push(std::make_shared<SegmentMeanOp>(std::move(offsets)), {v.id});
}
NodeRef Graph::concat_cols(NodeRef a, NodeRef b) {
  return push(std::make_shared<ConcatColsOp>(), {a.id, b.id});
}
NodeRef Graph::slice_cols(NodeRef x, std::size_t begin, std::size_t count) {
  return push(std::make_shared<SliceColsOp>(begin, count), {x.id});
}
NodeRef Graph::stop_gradient(NodeRef x) {
  return push(std::make_shared<StopGradientOp>(), {x.id});
}
NodeRef Graph::patch_rows(NodeRef x, std::map<std::size_t, Tensor> rows) {
  return push(std::make_shared<PatchRowsOp>(std::move(rows)), {x.id});
}

void Graph::evaluate() {
  std::vector<const Tensor*> ins;
  for (std::size_t i = evaluated_upto_; i < nodes_.size(); ++i) {
    Node& n = nodes_[i];
    if (!n.op) continue;
    ins.clear();
    for (auto j : n.inputs) ins.push_back(&nodes_[j].value);
    n.value = n.op->forward(ins);
    if (!n.value.all_finite())
      throw DivergenceError(std::string("non-finite value produced by ") + n.op->name() +
                            " (node " + std::to_string(i) + ")");
  }
  evaluated_upto_ = nodes_.size();
}

const Tensor& Graph::value(NodeRef n) const {
  if (n.id >= evaluated_upto_) throw StateError("node value requested before evaluate()");
  return node(n).value;
}

const Shape& Graph::shape(NodeRef n) const { return node(n).shape; }
bool Graph::requires_grad(NodeRef n) const { return node(n).requires_grad; }

NodeRef Graph::leaf_ref(const std::string& name) const {
  auto it = leaf_index_.find(name);
  if (it == leaf_index_.end()) throw ContractViolation("unknown leaf: " + name);
  return NodeRef{it->second};
}

const Tensor& Graph::leaf_value(const std::string& name) const {
  return nodes_[leaf_ref(name).id].value;
}

void Graph::set_leaf(const std::string& name, Tensor value) {
  const NodeRef r = leaf_ref(name);
  Node& n = nodes_[r.id];
  if (value.shape() != n.shape)
    throw ShapeError("set_leaf(" + name + "): shape " + shape_str(value.shape()) +
                     " does not match " + shape_str(n.shape));
  n.value = std::move(value);
  // Every node after the first leaf may depend on it; replay from the start.
  std::size_t first_op = 0;
  while (first_op < nodes_.size() && !nodes_[first_op].op) ++first_op;
  evaluated_upto_ = std::min(evaluated_upto_, first_op);
}

std::vector<std::string> Graph::leaf_names() const {
  std::vector<std::string> names;
  for (const auto& n : nodes_)
    if (!n.leaf_name.empty()) names.push_back(n.leaf_name);
  return names;
}

Gradients Graph::gradients(NodeRef out) const {
  if (!evaluated()) throw StateError("backward on an unevaluated graph");
  const Node& root = node(out);
  if (!root.shape.empty())
    throw ContractViolation("backward requires a scalar output, got shape " +
                            shape_str(root.shape));
  Gradients g;
  g.node_grads_.resize(nodes_.size());
  g.node_grads_[out.id] = Tensor::scalar(1.0);

  std::vector<const Tensor*> ins;
  std::vector<Tensor*> dins;
  for (std::size_t i = out.id + 1; i-- > 0;) {
    const Node& n = nodes_[i];
    if (!n.op || !n.requires_grad || !g.node_grads_[i]) continue;
    ins.clear();
    dins.clear();
    for (auto j : n.inputs) {
      ins.push_back(&nodes_[j].value);
      if (nodes_[j].requires_grad) {
        if (!g.node_grads_[j]) g.node_grads_[j] = Tensor(nodes_[j].shape);
        dins.push_back(&*g.node_grads_[j]);
      } else {
        dins.push_back(nullptr);
      }
    }
    n.op->backward(ins, n.value, *g.node_grads_[i], dins);
  }
  for (const auto& [name, idx] : leaf_index_) {
    g.leaf_grads_[name] = g.node_grads_[idx] ? *g.node_grads_[idx] : Tensor(nodes_[idx].shape);
  }
  return g;
}

const Tensor& Gradients::param(const std::string& name) const {
  auto it = leaf_grads_.find(name);
  if (it == leaf_grads_.end()) throw ContractViolation("no leaf named " + name);
  return it->second;
}

const Tensor* Gradients::node(NodeRef n) const {
  if (n.id >= node_grads_.size() || !node_grads_[n.id]) return nullptr;
  return &*node_grads_[n.id];
}

std::map<std::string, Tensor> Gradients::params() const { return leaf_grads_; }

std::map<std::string, Tensor> backward(const Graph& graph, NodeRef out) {
  return graph.gradients(out).params();
}

FiniteDiffReport finite_diff_compare(Graph& graph, NodeRef out, const std::string& param,
                                     const Tensor& analytic, double step, double tol) {
  if (!(step > 0.0) || !(tol > 0.0)) throw ContractViolation("finite_diff: step and tol must be > 0");
  const Tensor original = graph.leaf_value(param);
  if (!analytic.same_shape(original)) throw ShapeError("finite_diff: analytic gradient shape");
  FiniteDiffReport rep;
  for (std::size_t i = 0; i < original.numel(); ++i) {
    Tensor plus = original, minus = original;
    plus[i] += step;
    minus[i] -= step;
    graph.set_leaf(param, plus);
    graph.evaluate();
    const double fp = graph.value(out).item();
    graph.set_leaf(param, minus);
    graph.evaluate();
    const double fm = graph.value(out).item();
    const double numeric = (fp - fm) / (2.0 * step);
    const double a = analytic[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    rep.max_rel_err = std::max(rep.max_rel_err, std::abs(a - numeric) / denom);
  }
  graph.set_leaf(param, original);
  graph.evaluate();
  rep.pass = rep.max_rel_err <= tol;
  return rep;
}

FiniteDiffReport finite_diff_check(Graph& graph, NodeRef out, const std::string& param,
                                   double step, double tol) {
  if (!graph.evaluated()) graph.evaluate();
  const Tensor analytic = graph.gradients(out).param(param);
  return finite_diff_compare(graph, out, param, analytic, step, tol);
}

Tensor log_softmax(const Tensor& logits) {
  if (logits.rank() != 1) throw ContractViolation("log_softmax expects a vector");
  const auto x = logits.data();
  const double m = *std::max_element(x.begin(), x.end());
  double z = 0.0;
  for (double v : x) z += std::exp(v - m);
  const double lse = m + std::log(z);
  Tensor out(logits.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - lse;
  return out;
}

}  // namespace biasedit
