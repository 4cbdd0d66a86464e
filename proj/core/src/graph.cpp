#include "demun/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <utility>

#include "detail/gemm.hpp"

// Trajectories are single-threaded by contract; parallelism lives at the
// run/grid level. Pin OpenBLAS to one thread so concurrent runs do not
// oversubscribe the machine.
extern "C" void openblas_set_num_threads(int) __attribute__((weak));

namespace demun {

namespace {
struct BlasThreadPin {
  BlasThreadPin() {
    if (openblas_set_num_threads != nullptr) openblas_set_num_threads(1);
  }
};
const BlasThreadPin blas_thread_pin;
}  // namespace

// ---- node base -----------------------------------------------------------

class Node {
 public:
  virtual ~Node() = default;
  virtual const char* name() const = 0;
  virtual void backward(Graph& g) = 0;

  Tensor value;
  Tensor grad;  // sized lazily by Graph::backward
  std::vector<int32_t> inputs;
};

namespace {

void require_same_graph(Var a, Var b, const char* op) {
  check_shape(a.valid() && b.valid() && a.graph == b.graph,
              std::string(op) + ": operands must belong to the same graph");
}

}  // namespace

// ---- graph ---------------------------------------------------------------

Graph::Graph(Mode mode, bool update_running_stats)
    : mode_(mode), update_running_stats_(mode == Mode::kTraining && update_running_stats) {}

Graph::~Graph() = default;

const Tensor& Graph::value(int32_t id) const { return nodes_[static_cast<size_t>(id)]->value; }
const Tensor& Graph::grad(int32_t id) const { return nodes_[static_cast<size_t>(id)]->grad; }

Var Graph::push(std::unique_ptr<Node> node) {
  if (!node->value.all_finite()) {
    throw NumericError(std::string("non-finite values in output of op '") + node->name() +
                       "' at node " + std::to_string(nodes_.size()));
  }
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int32_t>(nodes_.size() - 1)};
}

Tensor& Graph::accum_grad(int32_t id) {
  Node& n = *nodes_[static_cast<size_t>(id)];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Graph::backward(Var loss) {
  check_shape(loss.valid() && loss.graph == this, "backward: loss is not a node of this graph");
  Node& top = *nodes_[static_cast<size_t>(loss.id)];
  check_shape(top.value.numel() == 1, "backward: loss must be scalar, got " +
                                          shape_str(top.value.shape()));
  if (!std::isfinite(top.value[0])) throw NumericError("backward: loss is not finite");

  for (auto& n : nodes_) n->grad = Tensor();
  accum_grad(loss.id)[0] = 1.0;

  for (int32_t i = loss.id; i >= 0; --i) {
    Node& n = *nodes_[static_cast<size_t>(i)];
    if (n.grad.empty()) continue;
    if (!n.grad.all_finite()) {
      throw NumericError(std::string("non-finite gradient at op '") + n.name() + "' node " +
                         std::to_string(i));
    }
    n.backward(*this);
  }
}

const Tensor& Var::value() const { return graph->value(id); }
const Tensor& Var::grad() const { return graph->grad(id); }
const Shape& Var::shape() const { return graph->value(id).shape(); }

// ---- leaves ----------------------------------------------------------------

namespace {

class LeafNode final : public Node {
 public:
  explicit LeafNode(Tensor v) { value = std::move(v); }
  const char* name() const override { return "leaf"; }
  void backward(Graph&) override {}
};

class ParamNode final : public Node {
 public:
  explicit ParamNode(Parameter& p) : param_(&p) { value = p.value; }
  const char* name() const override { return "param"; }
  void backward(Graph&) override {
    Tensor& pg = param_->grad;
    if (pg.empty()) pg = Tensor(value.shape());
    for (int64_t i = 0; i < grad.numel(); ++i) pg[i] += grad[i];
  }

 private:
  Parameter* param_;
};

// ---- elementwise -----------------------------------------------------------

class AddNode final : public Node {
 public:
  AddNode(Var a, Var b) {
    inputs = {a.id, b.id};
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    check_shape(x.same_shape(y),
                "add: " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
    value = x;
    for (int64_t i = 0; i < value.numel(); ++i) value[i] += y[i];
  }
  const char* name() const override { return "add"; }
  void backward(Graph& g) override {
    Tensor& ga = g.accum_grad(inputs[0]);
    Tensor& gb = g.accum_grad(inputs[1]);
    for (int64_t i = 0; i < grad.numel(); ++i) {
      ga[i] += grad[i];
      gb[i] += grad[i];
    }
  }
};

class SubNode final : public Node {
 public:
  SubNode(Var a, Var b) {
    inputs = {a.id, b.id};
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    check_shape(x.same_shape(y),
                "sub: " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
    value = x;
    for (int64_t i = 0; i < value.numel(); ++i) value[i] -= y[i];
  }
  const char* name() const override { return "sub"; }
  void backward(Graph& g) override {
    Tensor& ga = g.accum_grad(inputs[0]);
    Tensor& gb = g.accum_grad(inputs[1]);
    for (int64_t i = 0; i < grad.numel(); ++i) {
      ga[i] += grad[i];
      gb[i] -= grad[i];
    }
  }
};

class ScaleNode final : public Node {
 public:
  ScaleNode(Var x, Var s) {
    inputs = {x.id, s.id};
    check_shape(s.value().numel() == 1, "scale: scaling factor must be a one-element node");
    const double c = s.value()[0];
    value = x.value();
    for (int64_t i = 0; i < value.numel(); ++i) value[i] *= c;
  }
  const char* name() const override { return "scale"; }
  void backward(Graph& g) override {
    const Tensor& x = g.value(inputs[0]);
    const double c = g.value(inputs[1])[0];
    Tensor& gx = g.accum_grad(inputs[0]);
    Tensor& gs = g.accum_grad(inputs[1]);
    double acc = 0.0;
    for (int64_t i = 0; i < grad.numel(); ++i) {
      gx[i] += c * grad[i];
      acc += x[i] * grad[i];
    }
    gs[0] += acc;
  }
};

class ScaleConstNode final : public Node {
 public:
  ScaleConstNode(Var x, double c) : c_(c) {
    inputs = {x.id};
    value = x.value();
    for (int64_t i = 0; i < value.numel(); ++i) value[i] *= c;
  }
  const char* name() const override { return "scale_const"; }
  void backward(Graph& g) override {
    Tensor& gx = g.accum_grad(inputs[0]);
    for (int64_t i = 0; i < grad.numel(); ++i) gx[i] += c_ * grad[i];
  }

 private:
  double c_;
};

class RowScaleConstNode final : public Node {
 public:
  RowScaleConstNode(Var x, std::vector<double> c) : c_(std::move(c)) {
    inputs = {x.id};
    const Tensor& xv = x.value();
    check_shape(!xv.shape().empty() && xv.shape()[0] == static_cast<int64_t>(c_.size()),
                "row_scale_const: leading dim " + shape_str(xv.shape()) + " vs " +
                    std::to_string(c_.size()) + " coefficients");
    value = xv;
    const int64_t rows = xv.shape()[0];
    const int64_t stride = rows == 0 ? 0 : xv.numel() / rows;
    for (int64_t b = 0; b < rows; ++b)
      for (int64_t j = 0; j < stride; ++j) value[b * stride + j] *= c_[static_cast<size_t>(b)];
  }
  const char* name() const override { return "row_scale_const"; }
  void backward(Graph& g) override {
    Tensor& gx = g.accum_grad(inputs[0]);
    const int64_t rows = static_cast<int64_t>(c_.size());
    const int64_t stride = rows == 0 ? 0 : grad.numel() / rows;
    for (int64_t b = 0; b < rows; ++b)
      for (int64_t j = 0; j < stride; ++j)
        gx[b * stride + j] += c_[static_cast<size_t>(b)] * grad[b * stride + j];
  }

 private:
  std::vector<double> c_;
};

class ReluNode final : public Node {
 public:
  explicit ReluNode(Var x) {
    inputs = {x.id};
    value = x.value();
    for (int64_t i = 0; i < value.numel(); ++i) value[i] = value[i] > 0.0 ? value[i] : 0.0;
  }
  const char* name() const override { return "relu"; }
  void backward(Graph& g) override {
    const Tensor& x = g.value(inputs[0]);
    Tensor& gx = g.accum_grad(inputs[0]);
    // subgradient at exactly 0 is 0
    for (int64_t i = 0; i < grad.numel(); ++i)
      if (x[i] > 0.0) gx[i] += grad[i];
  }
};

class ReshapeNode final : public Node {
 public:
  ReshapeNode(Var x, Shape shape) {
    inputs = {x.id};
    value = x.value().reshaped(std::move(shape));
  }
  const char* name() const override { return "reshape"; }
  void backward(Graph& g) override {
    Tensor& gx = g.accum_grad(inputs[0]);
    for (int64_t i = 0; i < grad.numel(); ++i) gx[i] += grad[i];
  }
};

class MseNode final : public Node {
 public:
  MseNode(Var a, Var b) {
    inputs = {a.id, b.id};
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    check_shape(x.same_shape(y),
                "mse: " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
    double acc = 0.0;
    for (int64_t i = 0; i < x.numel(); ++i) {
      const double d = x[i] - y[i];
      acc += d * d;
    }
    value = Tensor::scalar(acc);
  }
  const char* name() const override { return "mse"; }
  void backward(Graph& g) override {
    const Tensor& x = g.value(inputs[0]);
    const Tensor& y = g.value(inputs[1]);
    Tensor& ga = g.accum_grad(inputs[0]);
    Tensor& gb = g.accum_grad(inputs[1]);
    const double s = 2.0 * grad[0];
    for (int64_t i = 0; i < x.numel(); ++i) {
      const double d = s * (x[i] - y[i]);
      ga[i] += d;
      gb[i] -= d;
    }
  }
};

// ---- dense matrix-vector ----------------------------------------------------

class MatvecNode final : public Node {
 public:
  MatvecNode(Tensor a, Var x, bool transposed) : a_(std::move(a)), transposed_(transposed) {
    inputs = {x.id};
    check_shape(a_.shape().size() == 2, "matvec: matrix must be 2-D");
    const int64_t m = a_.shape()[0];
    const int64_t n = a_.shape()[1];
    const Tensor& xv = x.value();
    const int64_t in_dim = transposed_ ? m : n;
    const int64_t out_dim = transposed_ ? n : m;
    check_shape(xv.shape().size() == 1 && xv.shape()[0] == in_dim,
                std::string(transposed_ ? "matvec_t" : "matvec") + ": matrix " +
                    shape_str(a_.shape()) + " with vector " + shape_str(xv.shape()));
    value = Tensor({out_dim});
    multiply(transposed_, xv.data(), value.data());
  }
  const char* name() const override { return transposed_ ? "matvec_t" : "matvec"; }
  void backward(Graph& g) override {
    Tensor& gx = g.accum_grad(inputs[0]);
    Tensor tmp(gx.shape());
    multiply(!transposed_, grad.data(), tmp.data());
    for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += tmp[i];
  }

 private:
  void multiply(bool trans, const double* x, double* y) const {
    const int64_t m = a_.shape()[0];
    const int64_t n = a_.shape()[1];
    if (!trans) {
      for (int64_t i = 0; i < m; ++i) {
        double acc = 0.0;
        const double* row = a_.data() + i * n;
        for (int64_t j = 0; j < n; ++j) acc += row[j] * x[j];
        y[i] = acc;
      }
    } else {
      for (int64_t j = 0; j < n; ++j) y[j] = 0.0;
      for (int64_t i = 0; i < m; ++i) {
        const double* row = a_.data() + i * n;
        const double xi = x[i];
        for (int64_t j = 0; j < n; ++j) y[j] += row[j] * xi;
      }
    }
  }

  Tensor a_;
  bool transposed_;
};

// ---- generic linear operator -------------------------------------------------

class LinearOpNode final : public Node {
 public:
  LinearOpNode(std::shared_ptr<const LinearMap> map, Var x, bool adjoint)
      : map_(std::move(map)), adjoint_(adjoint) {
    inputs = {x.id};
    const Tensor& xv = x.value();
    const Shape& s = xv.shape();
    check_shape(s.size() == 1 || s.size() == 2,
                "apply_map: input must be [n] or [B,n], got " + shape_str(s));
    const int64_t in_dim = adjoint_ ? map_->rows() : map_->cols();
    const int64_t out_dim = adjoint_ ? map_->cols() : map_->rows();
    const int64_t cols = s.back();
    check_shape(cols == in_dim, "apply_map: operator expects length " + std::to_string(in_dim) +
                                    ", got " + shape_str(s));
    batch_ = s.size() == 2 ? s[0] : 0;
    const int64_t b = s.size() == 2 ? s[0] : 1;
    value = s.size() == 2 ? Tensor({b, out_dim}) : Tensor({out_dim});
    for (int64_t i = 0; i < b; ++i) {
      const double* xi = xv.data() + i * in_dim;
      double* yi = value.data() + i * out_dim;
      if (adjoint_)
        map_->apply_adjoint(xi, yi);
      else
        map_->apply(xi, yi);
    }
  }
  const char* name() const override { return adjoint_ ? "apply_map_adjoint" : "apply_map"; }
  void backward(Graph& g) override {
    Tensor& gx = g.accum_grad(inputs[0]);
    const int64_t in_dim = adjoint_ ? map_->rows() : map_->cols();
    const int64_t out_dim = adjoint_ ? map_->cols() : map_->rows();
    const int64_t b = batch_ > 0 ? batch_ : 1;
    std::vector<double> tmp(static_cast<size_t>(in_dim));
    for (int64_t i = 0; i < b; ++i) {
      const double* gy = grad.data() + i * out_dim;
      if (adjoint_)
        map_->apply(gy, tmp.data());
      else
        map_->apply_adjoint(gy, tmp.data());
      double* gxi = gx.data() + i * in_dim;
      for (int64_t j = 0; j < in_dim; ++j) gxi[j] += tmp[j];
    }
  }

 private:
  std::shared_ptr<const LinearMap> map_;
  bool adjoint_;
  int64_t batch_;
};

// ---- conv2d --------------------------------------------------------------

// Reused uninitialized scratch for the conv lowering; every entry is
// overwritten before use. One set per thread since a graph is single-writer.
struct Scratch {
  std::unique_ptr<double[]> data;
  size_t size = 0;
  double* get(size_t n) {
    if (n > size) {
      data.reset(new double[n]);
      size = n;
    }
    return data.get();
  }
};
thread_local Scratch conv_cols_scratch;
thread_local Scratch conv_out_scratch;

// Lowered to GEMM over im2col columns; the column matrix is rebuilt in
// backward instead of cached, trading FLOPs for a flat activation footprint.
class Conv2dNode final : public Node {
 public:
  Conv2dNode(Var x, Var w, Var b) {
    inputs = {x.id, w.id, b.id};
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    const Tensor& bv = b.value();
    check_shape(xv.shape().size() == 4, "conv2d: input must be [B,C,H,W]");
    check_shape(wv.shape().size() == 4, "conv2d: kernel must be [Cout,Cin,kh,kw]");
    check_shape(bv.shape().size() == 1, "conv2d: bias must be [Cout]");
    check_shape(wv.shape()[1] == xv.shape()[1],
                "conv2d: kernel expects " + std::to_string(wv.shape()[1]) + " input channels, input has " +
                    std::to_string(xv.shape()[1]));
    check_shape(bv.shape()[0] == wv.shape()[0], "conv2d: bias length must equal Cout");
    check_shape(wv.shape()[2] % 2 == 1 && wv.shape()[3] % 2 == 1,
                "conv2d: kernel dims must be odd for same padding");

    const int64_t batch = xv.shape()[0], cin = xv.shape()[1], h = xv.shape()[2], wd = xv.shape()[3];
    const int64_t cout = wv.shape()[0], kh = wv.shape()[2], kw = wv.shape()[3];
    const int64_t ckk = cin * kh * kw;
    const int64_t np = batch * h * wd;

    double* cols = conv_cols_scratch.get(static_cast<size_t>(ckk * np));
    im2col(xv, kh, kw, cols);

    double* out2 = conv_out_scratch.get(static_cast<size_t>(cout * np));
    detail::gemm(false, false, cout, np, ckk, 1.0, wv.data(), ckk, cols, np, 0.0, out2, np);

    value = Tensor({batch, cout, h, wd});
    const int64_t hw = h * wd;
    for (int64_t co = 0; co < cout; ++co) {
      const double bias = bv[co];
      for (int64_t bi = 0; bi < batch; ++bi) {
        const double* src = out2 + co * np + bi * hw;
        double* dst = value.data() + (bi * cout + co) * hw;
        for (int64_t p = 0; p < hw; ++p) dst[p] = src[p] + bias;
      }
    }
  }

  const char* name() const override { return "conv2d"; }

  void backward(Graph& g) override {
    const Tensor& xv = g.value(inputs[0]);
    const Tensor& wv = g.value(inputs[1]);
    Tensor& gx = g.accum_grad(inputs[0]);
    Tensor& gw = g.accum_grad(inputs[1]);
    Tensor& gb = g.accum_grad(inputs[2]);

    const int64_t batch = xv.shape()[0], cin = xv.shape()[1], h = xv.shape()[2], wd = xv.shape()[3];
    const int64_t cout = wv.shape()[0], kh = wv.shape()[2], kw = wv.shape()[3];
    const int64_t ckk = cin * kh * kw;
    const int64_t np = batch * h * wd;
    const int64_t hw = h * wd;

    // dY in [Cout, B*H*W] layout + bias reduction.
    double* gout2 = conv_out_scratch.get(static_cast<size_t>(cout * np));
    for (int64_t co = 0; co < cout; ++co) {
      double bsum = 0.0;
      for (int64_t bi = 0; bi < batch; ++bi) {
        const double* src = grad.data() + (bi * cout + co) * hw;
        double* dst = gout2 + co * np + bi * hw;
        for (int64_t p = 0; p < hw; ++p) {
          dst[p] = src[p];
          bsum += src[p];
        }
      }
      gb[co] += bsum;
    }

    double* cols = conv_cols_scratch.get(static_cast<size_t>(ckk * np));
    im2col(xv, kh, kw, cols);
    detail::gemm(false, true, cout, ckk, np, 1.0, gout2, np, cols, np, 1.0, gw.data(), ckk);

    double* gcols = cols;  // reuse the buffer
    detail::gemm(true, false, ckk, np, cout, 1.0, wv.data(), ckk, gout2, np, 0.0, gcols, np);
    col2im_add(gcols, batch, cin, h, wd, kh, kw, gx);
  }

 private:
  static void im2col(const Tensor& x, int64_t kh, int64_t kw, double* cols) {
    const int64_t batch = x.shape()[0], cin = x.shape()[1], h = x.shape()[2], wd = x.shape()[3];
    const int64_t ph = (kh - 1) / 2, pw = (kw - 1) / 2;
    const int64_t np = batch * h * wd;
    int64_t r = 0;
    for (int64_t ci = 0; ci < cin; ++ci) {
      for (int64_t p = 0; p < kh; ++p) {
        for (int64_t q = 0; q < kw; ++q, ++r) {
          double* dst_row = cols + r * np;
          const int64_t dj = q - pw;
          for (int64_t bi = 0; bi < batch; ++bi) {
            for (int64_t i = 0; i < h; ++i) {
              double* dst = dst_row + bi * h * wd + i * wd;
              const int64_t si = i + p - ph;
              if (si < 0 || si >= h) {
                std::memset(dst, 0, sizeof(double) * static_cast<size_t>(wd));
                continue;
              }
              const double* src = x.data() + ((bi * cin + ci) * h + si) * wd;
              const int64_t j_lo = std::max<int64_t>(0, -dj);
              const int64_t j_hi = std::min<int64_t>(wd, wd - dj);
              for (int64_t j = 0; j < j_lo; ++j) dst[j] = 0.0;
              for (int64_t j = j_lo; j < j_hi; ++j) dst[j] = src[j + dj];
              for (int64_t j = j_hi; j < wd; ++j) dst[j] = 0.0;
            }
          }
        }
      }
    }
  }

  static void col2im_add(const double* cols, int64_t batch, int64_t cin, int64_t h, int64_t wd,
                         int64_t kh, int64_t kw, Tensor& gx) {
    const int64_t ph = (kh - 1) / 2, pw = (kw - 1) / 2;
    const int64_t np = batch * h * wd;
    int64_t r = 0;
    for (int64_t ci = 0; ci < cin; ++ci) {
      for (int64_t p = 0; p < kh; ++p) {
        for (int64_t q = 0; q < kw; ++q, ++r) {
          const double* src_row = cols + r * np;
          const int64_t dj = q - pw;
          for (int64_t bi = 0; bi < batch; ++bi) {
            for (int64_t i = 0; i < h; ++i) {
              const int64_t si = i + p - ph;
              if (si < 0 || si >= h) continue;
              const double* src = src_row + bi * h * wd + i * wd;
              double* dst = gx.data() + ((bi * cin + ci) * h + si) * wd;
              const int64_t j_lo = std::max<int64_t>(0, -dj);
              const int64_t j_hi = std::min<int64_t>(wd, wd - dj);
              for (int64_t j = j_lo; j < j_hi; ++j) dst[j + dj] += src[j];
            }
          }
        }
      }
    }
  }
};

// ---- batch norm -------------------------------------------------------------

class BatchNormNode final : public Node {
 public:
  BatchNormNode(Var x, Var gamma, Var beta, BatchNormStats& stats, bool training,
                bool update_running) {
    inputs = {x.id, gamma.id, beta.id};
    const Tensor& xv = x.value();
    const Tensor& gv = gamma.value();
    const Tensor& bv = beta.value();
    check_shape(xv.shape().size() == 4, "batch_norm: input must be [B,C,H,W]");
    const int64_t c = xv.shape()[1];
    check_shape(gv.shape() == Shape{c} && bv.shape() == Shape{c},
                "batch_norm: gamma/beta must be [C]");
    check_shape(stats.running_mean.shape() == Shape{c} && stats.running_var.shape() == Shape{c},
                "batch_norm: running stats must be [C]");
    training_ = training;
    eps_ = stats.eps;
    mean_ = Tensor({c});
    invstd_ = Tensor({c});

    const int64_t batch = xv.shape()[0], h = xv.shape()[2], w = xv.shape()[3];
    const int64_t n = batch * h * w;
    if (training_ && n < 2)
      throw NumericError("batch_norm: degenerate batch, B*H*W = " + std::to_string(n));
    count_ = n;

    if (training_) {
      for (int64_t ch = 0; ch < c; ++ch) {
        double sum = 0.0;
        for (int64_t bi = 0; bi < batch; ++bi) {
          const double* p = xv.data() + ((bi * c + ch) * h) * w;
          for (int64_t i = 0; i < h * w; ++i) sum += p[i];
        }
        const double mean = sum / static_cast<double>(n);
        double sq = 0.0;
        for (int64_t bi = 0; bi < batch; ++bi) {
          const double* p = xv.data() + ((bi * c + ch) * h) * w;
          for (int64_t i = 0; i < h * w; ++i) {
            const double d = p[i] - mean;
            sq += d * d;
          }
        }
        const double var = sq / static_cast<double>(n);
        mean_[ch] = mean;
        invstd_[ch] = 1.0 / std::sqrt(var + eps_);
        if (update_running) {
          const double unbiased = var * static_cast<double>(n) / static_cast<double>(n - 1);
          stats.running_mean[ch] =
              (1.0 - stats.momentum) * stats.running_mean[ch] + stats.momentum * mean;
          stats.running_var[ch] =
              (1.0 - stats.momentum) * stats.running_var[ch] + stats.momentum * unbiased;
        }
      }
    } else {
      for (int64_t ch = 0; ch < c; ++ch) {
        mean_[ch] = stats.running_mean[ch];
        invstd_[ch] = 1.0 / std::sqrt(stats.running_var[ch] + eps_);
      }
    }

    value = Tensor(xv.shape());
    for (int64_t bi = 0; bi < batch; ++bi) {
      for (int64_t ch = 0; ch < c; ++ch) {
        const double m = mean_[ch], is = invstd_[ch], ga = gv[ch], be = bv[ch];
        const double* src = xv.data() + ((bi * c + ch) * h) * w;
        double* dst = value.data() + ((bi * c + ch) * h) * w;
        for (int64_t i = 0; i < h * w; ++i) dst[i] = ga * (src[i] - m) * is + be;
      }
    }
  }

  const char* name() const override { return "batch_norm"; }

  void backward(Graph& g) override {
    const Tensor& xv = g.value(inputs[0]);
    const Tensor& gv = g.value(inputs[1]);
    Tensor& gx = g.accum_grad(inputs[0]);
    Tensor& ggamma = g.accum_grad(inputs[1]);
    Tensor& gbeta = g.accum_grad(inputs[2]);

    const int64_t batch = xv.shape()[0], c = xv.shape()[1], h = xv.shape()[2], w = xv.shape()[3];
    const int64_t hw = h * w;
    const double n = static_cast<double>(count_);

    for (int64_t ch = 0; ch < c; ++ch) {
      const double m = mean_[ch], is = invstd_[ch], ga = gv[ch];
      double sum_g = 0.0, sum_gxhat = 0.0;
      for (int64_t bi = 0; bi < batch; ++bi) {
        const double* gp = grad.data() + (bi * c + ch) * hw;
        const double* xp = xv.data() + (bi * c + ch) * hw;
        for (int64_t i = 0; i < hw; ++i) {
          sum_g += gp[i];
          sum_gxhat += gp[i] * (xp[i] - m) * is;
        }
      }
      gbeta[ch] += sum_g;
      ggamma[ch] += sum_gxhat;

      if (training_) {
        const double k1 = sum_g / n, k2 = sum_gxhat / n;
        for (int64_t bi = 0; bi < batch; ++bi) {
          const double* gp = grad.data() + (bi * c + ch) * hw;
          const double* xp = xv.data() + (bi * c + ch) * hw;
          double* dst = gx.data() + (bi * c + ch) * hw;
          for (int64_t i = 0; i < hw; ++i) {
            const double xhat = (xp[i] - m) * is;
            dst[i] += ga * is * (gp[i] - k1 - xhat * k2);
          }
        }
      } else {
        for (int64_t bi = 0; bi < batch; ++bi) {
          const double* gp = grad.data() + (bi * c + ch) * hw;
          double* dst = gx.data() + (bi * c + ch) * hw;
          for (int64_t i = 0; i < hw; ++i) dst[i] += ga * is * gp[i];
        }
      }
    }
  }

 private:
  Tensor mean_, invstd_;
  double eps_ = 1e-5;
  int64_t count_ = 0;
  bool training_ = true;
};

}  // namespace

// ---- constructors ----------------------------------------------------------

Var leaf(Graph& g, Tensor value) { return g.push(std::make_unique<LeafNode>(std::move(value))); }

Var param(Graph& g, Parameter& p) { return g.push(std::make_unique<ParamNode>(p)); }

Var zeros(Graph& g, Shape shape) {
  return g.push(std::make_unique<LeafNode>(Tensor(std::move(shape))));
}

Var add(Var a, Var b) {
  require_same_graph(a, b, "add");
  return a.graph->push(std::make_unique<AddNode>(a, b));
}

Var sub(Var a, Var b) {
  require_same_graph(a, b, "sub");
  return a.graph->push(std::make_unique<SubNode>(a, b));
}

Var scale(Var x, Var s) {
  require_same_graph(x, s, "scale");
  return x.graph->push(std::make_unique<ScaleNode>(x, s));
}

Var scale_const(Var x, double c) {
  return x.graph->push(std::make_unique<ScaleConstNode>(x, c));
}

Var row_scale_const(Var x, const std::vector<double>& c) {
  return x.graph->push(std::make_unique<RowScaleConstNode>(x, c));
}

Var relu(Var x) { return x.graph->push(std::make_unique<ReluNode>(x)); }

Var conv2d(Var input, Var kernel, Var bias) {
  require_same_graph(input, kernel, "conv2d");
  require_same_graph(input, bias, "conv2d");
  return input.graph->push(std::make_unique<Conv2dNode>(input, kernel, bias));
}

Var batch_norm(Var x, Var gamma, Var beta, BatchNormStats& stats) {
  require_same_graph(x, gamma, "batch_norm");
  require_same_graph(x, beta, "batch_norm");
  Graph& g = *x.graph;
  return g.push(std::make_unique<BatchNormNode>(x, gamma, beta, stats, g.training(),
                                                g.update_running_stats()));
}

Var matvec(const Tensor& a, Var x) {
  return x.graph->push(std::make_unique<MatvecNode>(a, x, false));
}

Var matvec_t(const Tensor& a, Var r) {
  return r.graph->push(std::make_unique<MatvecNode>(a, r, true));
}

Var apply_map(std::shared_ptr<const LinearMap> map, Var x) {
  return x.graph->push(std::make_unique<LinearOpNode>(std::move(map), x, false));
}

Var apply_map_adjoint(std::shared_ptr<const LinearMap> map, Var r) {
  return r.graph->push(std::make_unique<LinearOpNode>(std::move(map), r, true));
}

Var mse(Var a, Var b) {
  require_same_graph(a, b, "mse");
  return a.graph->push(std::make_unique<MseNode>(a, b));
}

Var reshape(Var x, Shape shape) {
  return x.graph->push(std::make_unique<ReshapeNode>(x, std::move(shape)));
}

}  // namespace demun
