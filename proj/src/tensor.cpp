#include "curvelang/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "curvelang/error.hpp"
#include "curvelang/rng.hpp"

namespace curvelang::ad {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

// -- Tensor -------------------------------------------------------------------

Tensor Tensor::zeros(int rows, int cols, bool requires_grad) {
  if (rows < 0 || cols < 0) {
    throw Error(ErrorCode::ShapeMismatch, "negative tensor dimension");
  }
  Tensor t;
  t.node_ = std::make_shared<Node>();
  t.node_->rows = rows;
  t.node_->cols = cols;
  t.node_->data.assign(static_cast<std::size_t>(rows) * cols, 0.0);
  t.node_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::from(int rows, int cols, std::vector<double> values,
                    bool requires_grad) {
  if (values.size() != static_cast<std::size_t>(rows) * cols) {
    throw Error(ErrorCode::ShapeMismatch,
                "buffer of " + std::to_string(values.size()) +
                    " values does not match shape " + std::to_string(rows) +
                    "x" + std::to_string(cols));
  }
  Tensor t = zeros(0, 0, requires_grad);
  t.node_->rows = rows;
  t.node_->cols = cols;
  t.node_->data.assign(values.begin(), values.end());
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from(1, 1, {value}, requires_grad);
}

double Tensor::item() const {
  if (numel() != 1) {
    throw Error(ErrorCode::NotScalar, "item() on a tensor with " +
                                          std::to_string(numel()) + " entries");
  }
  return node_->data[0];
}

void Tensor::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  Tensor t = from(rows(), cols(), {node_->data.begin(), node_->data.end()}, node_->requires_grad);
  t.node_->grad = node_->grad;
  return t;
}

Tensor Tensor::detach() const {
  return from(rows(), cols(), {node_->data.begin(), node_->data.end()}, false);
}

// -- Tape ---------------------------------------------------------------------

void Tape::record(std::function<void()> adjoint) {
  entries_.push_back(std::move(adjoint));
}

void Tape::check(const Tensor& out, const char* op) const {
  if (!check_finite_) return;
  for (double x : out.data()) {
    if (!std::isfinite(x)) {
      throw Error(ErrorCode::NonFinite, std::string(op) + " produced a non-finite value");
    }
  }
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw Error(ErrorCode::NotScalar, "backward() needs a scalar loss, got " +
                                          std::to_string(loss.rows()) + "x" +
                                          std::to_string(loss.cols()));
  }
  if (!loss.requires_grad()) return;
  Node* n = loss.node();
  n->ensure_grad();
  n->grad[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
}

namespace {

bool tracks(const Tape& tape, std::initializer_list<const Tensor*> inputs) {
  if (!tape.grad_enabled()) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

Tensor make_output(int rows, int cols, bool track) {
  return Tensor::zeros(rows, cols, track);
}

// Gradient buffer of `n` if it participates in differentiation, else null.
double* grad_of(const NodePtr& n) {
  if (!n->requires_grad) return nullptr;
  n->ensure_grad();
  return n->grad.data();
}

MatrixMap grad_map(const NodePtr& n) {
  n->ensure_grad();
  return {n->grad.data(), n->rows, n->cols};
}

ConstMatrixMap value_map(const NodePtr& n) {
  return {n->data.data(), n->rows, n->cols};
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error(ErrorCode::ShapeMismatch,
                std::string(op) + ": " + std::to_string(a.rows()) + "x" +
                    std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) +
                    "x" + std::to_string(b.cols()));
  }
}

}  // namespace

// -- ops ----------------------------------------------------------------------

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw Error(ErrorCode::ShapeMismatch,
                "matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                    " times " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  const bool track = tracks(tape, {&a, &b});
  Tensor out = make_output(a.rows(), b.cols(), track);
  out.mat().noalias() = a.mat() * b.mat();
  tape.check(out, "matmul");
  if (track) {
    tape.record([an = a.shared(), bn = b.shared(), on = out.shared()] {
      if (on->grad.empty()) return;
      const ConstMatrixMap dout(on->grad.data(), on->rows, on->cols);
      if (an->requires_grad) grad_map(an).noalias() += dout * value_map(bn).transpose();
      if (bn->requires_grad) grad_map(bn).noalias() += value_map(an).transpose() * dout;
    });
  }
  return out;
}

namespace {

template <typename Fwd, typename Bwd>
Tensor binary_elementwise(Tape& tape, const Tensor& a, const Tensor& b,
                          const char* name, Fwd fwd, Bwd bwd) {
  require_same_shape(a, b, name);
  const bool track = tracks(tape, {&a, &b});
  Tensor out = make_output(a.rows(), a.cols(), track);
  auto ad = a.data();
  auto bd = b.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = fwd(ad[i], bd[i]);
  tape.check(out, name);
  if (track) {
    tape.record([an = a.shared(), bn = b.shared(), on = out.shared(), bwd] {
      if (on->grad.empty()) return;
      double* ga = grad_of(an);
      double* gb = grad_of(bn);
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        bwd(on->grad[i], an->data[i], bn->data[i], ga ? ga + i : nullptr,
            gb ? gb + i : nullptr);
      }
    });
  }
  return out;
}

template <typename Fwd, typename Deriv>
Tensor unary_elementwise(Tape& tape, const Tensor& a, const char* name, Fwd fwd,
                         Deriv deriv) {
  const bool track = tracks(tape, {&a});
  Tensor out = make_output(a.rows(), a.cols(), track);
  auto ad = a.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = fwd(ad[i]);
  tape.check(out, name);
  if (track) {
    tape.record([an = a.shared(), on = out.shared(), deriv] {
      if (on->grad.empty()) return;
      double* ga = grad_of(an);
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        ga[i] += on->grad[i] * deriv(an->data[i]);
      }
    });
  }
  return out;
}

}  // namespace

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      tape, a, b, "add", [](double x, double y) { return x + y; },
      [](double g, double, double, double* ga, double* gb) {
        if (ga) *ga += g;
        if (gb) *gb += g;
      });
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      tape, a, b, "sub", [](double x, double y) { return x - y; },
      [](double g, double, double, double* ga, double* gb) {
        if (ga) *ga += g;
        if (gb) *gb -= g;
      });
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      tape, a, b, "mul", [](double x, double y) { return x * y; },
      [](double g, double x, double y, double* ga, double* gb) {
        if (ga) *ga += g * y;
        if (gb) *gb += g * x;
      });
}

Tensor scale(Tape& tape, const Tensor& a, double s) {
  return unary_elementwise(
      tape, a, "scale", [s](double x) { return s * x; }, [s](double) { return s; });
}

Tensor scale_by(Tape& tape, const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) {
    throw Error(ErrorCode::ShapeMismatch, "scale_by: factor must be 1x1");
  }
  const bool track = tracks(tape, {&x, &s});
  Tensor out = make_output(x.rows(), x.cols(), track);
  const double f = s.item();
  auto xd = x.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = f * xd[i];
  tape.check(out, "scale_by");
  if (track) {
    tape.record([xn = x.shared(), sn = s.shared(), on = out.shared()] {
      if (on->grad.empty()) return;
      const double factor = sn->data[0];
      double* gx = grad_of(xn);
      double* gs = grad_of(sn);
      double acc = 0.0;
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        if (gx) gx[i] += factor * on->grad[i];
        acc += on->grad[i] * xn->data[i];
      }
      if (gs) gs[0] += acc;
    });
  }
  return out;
}

Tensor add_bias(Tape& tape, const Tensor& x, const Tensor& bias) {
  const bool row_bias = bias.rows() == 1 && bias.cols() == x.cols();
  const bool col_bias = bias.cols() == 1 && bias.rows() == x.rows();
  if (!row_bias && !col_bias) {
    throw Error(ErrorCode::ShapeMismatch,
                "add_bias: bias " + std::to_string(bias.rows()) + "x" +
                    std::to_string(bias.cols()) + " for input " +
                    std::to_string(x.rows()) + "x" + std::to_string(x.cols()));
  }
  const bool track = tracks(tape, {&x, &bias});
  Tensor out = make_output(x.rows(), x.cols(), track);
  if (row_bias) {
    out.mat() = x.mat().rowwise() + Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), x.cols());
  } else {
    out.mat() = x.mat().colwise() + Eigen::Map<const Eigen::VectorXd>(bias.data().data(), x.rows());
  }
  tape.check(out, "add_bias");
  if (track) {
    tape.record([xn = x.shared(), bn = bias.shared(), on = out.shared(), row_bias] {
      if (on->grad.empty()) return;
      const ConstMatrixMap dout(on->grad.data(), on->rows, on->cols);
      if (xn->requires_grad) grad_map(xn) += dout;
      if (bn->requires_grad) {
        double* gb = grad_of(bn);
        if (row_bias) {
          Eigen::Map<Eigen::RowVectorXd>(gb, on->cols) += dout.colwise().sum();
        } else {
          Eigen::Map<Eigen::VectorXd>(gb, on->rows) += dout.rowwise().sum();
        }
      }
    });
  }
  return out;
}

Tensor transpose(Tape& tape, const Tensor& a) {
  const bool track = tracks(tape, {&a});
  Tensor out = make_output(a.cols(), a.rows(), track);
  out.mat() = a.mat().transpose();
  if (track) {
    tape.record([an = a.shared(), on = out.shared()] {
      if (on->grad.empty()) return;
      grad_map(an) += ConstMatrixMap(on->grad.data(), on->rows, on->cols).transpose();
    });
  }
  return out;
}

Tensor reshape(Tape& tape, const Tensor& a, int rows, int cols) {
  if (rows < 0 || cols < 0 || static_cast<std::size_t>(rows) * cols != a.numel()) {
    throw Error(ErrorCode::ShapeMismatch, "reshape changes the element count");
  }
  const bool track = tracks(tape, {&a});
  Tensor out = Tensor::from(rows, cols, std::vector<double>(a.data().begin(), a.data().end()), track);
  if (track) {
    tape.record([an = a.shared(), on = out.shared()] {
      if (on->grad.empty()) return;
      double* g = grad_of(an);
      for (std::size_t i = 0; i < on->grad.size(); ++i) g[i] += on->grad[i];
    });
  }
  return out;
}

Tensor row_scale(Tape& tape, const Tensor& x, const Tensor& s) {
  if (s.cols() != 1 || s.rows() != x.rows()) {
    throw Error(ErrorCode::ShapeMismatch, "row_scale: scale must be rows x 1");
  }
  const bool track = tracks(tape, {&x, &s});
  Tensor out = make_output(x.rows(), x.cols(), track);
  const Eigen::Map<const Eigen::VectorXd> sv(s.data().data(), s.rows());
  out.mat() = sv.asDiagonal() * x.mat();
  tape.check(out, "row_scale");
  if (track) {
    tape.record([xn = x.shared(), sn = s.shared(), on = out.shared()] {
      if (on->grad.empty()) return;
      const ConstMatrixMap dout(on->grad.data(), on->rows, on->cols);
      const Eigen::Map<const Eigen::VectorXd> sv(sn->data.data(), sn->rows);
      if (xn->requires_grad) grad_map(xn) += sv.asDiagonal() * dout;
      if (sn->requires_grad) {
        Eigen::Map<Eigen::VectorXd>(grad_of(sn), sn->rows) +=
            (dout.array() * value_map(xn).array()).matrix().rowwise().sum();
      }
    });
  }
  return out;
}

Tensor concat(Tape& tape, const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw Error(ErrorCode::ShapeMismatch, "concat of nothing");
  if (axis != 0 && axis != 1) throw Error(ErrorCode::ShapeMismatch, "concat axis must be 0 or 1");
  int rows = 0, cols = 0;
  bool track = false;
  for (const auto& p : parts) {
    if (axis == 0) {
      if (p.cols() != parts[0].cols()) throw Error(ErrorCode::ShapeMismatch, "concat: column mismatch");
      rows += p.rows();
      cols = p.cols();
    } else {
      if (p.rows() != parts[0].rows()) throw Error(ErrorCode::ShapeMismatch, "concat: row mismatch");
      cols += p.cols();
      rows = p.rows();
    }
    track = track || (tape.grad_enabled() && p.requires_grad());
  }
  Tensor out = make_output(rows, cols, track);
  int offset = 0;
  for (const auto& p : parts) {
    if (axis == 0) {
      out.mat().middleRows(offset, p.rows()) = p.mat();
      offset += p.rows();
    } else {
      out.mat().middleCols(offset, p.cols()) = p.mat();
      offset += p.cols();
    }
  }
  if (track) {
    std::vector<NodePtr> nodes;
    for (const auto& p : parts) nodes.push_back(p.shared());
    tape.record([nodes, on = out.shared(), axis] {
      if (on->grad.empty()) return;
      const ConstMatrixMap dout(on->grad.data(), on->rows, on->cols);
      int off = 0;
      for (const auto& n : nodes) {
        if (axis == 0) {
          if (n->requires_grad) grad_map(n) += dout.middleRows(off, n->rows);
          off += n->rows;
        } else {
          if (n->requires_grad) grad_map(n) += dout.middleCols(off, n->cols);
          off += n->cols;
        }
      }
    });
  }
  return out;
}

Tensor slice(Tape& tape, const Tensor& a, int axis, int start, int length) {
  const int extent = axis == 0 ? a.rows() : a.cols();
  if ((axis != 0 && axis != 1) || start < 0 || length < 0 || start + length > extent) {
    throw Error(ErrorCode::ShapeMismatch, "slice out of bounds");
  }
  const bool track = tracks(tape, {&a});
  Tensor out = axis == 0 ? make_output(length, a.cols(), track)
                         : make_output(a.rows(), length, track);
  out.mat() = axis == 0 ? RowMatrix(a.mat().middleRows(start, length))
                        : RowMatrix(a.mat().middleCols(start, length));
  if (track) {
    tape.record([an = a.shared(), on = out.shared(), axis, start, length] {
      if (on->grad.empty()) return;
      const ConstMatrixMap dout(on->grad.data(), on->rows, on->cols);
      if (axis == 0) {
        grad_map(an).middleRows(start, length) += dout;
      } else {
        grad_map(an).middleCols(start, length) += dout;
      }
    });
  }
  return out;
}

Tensor gather_rows(Tape& tape, const Tensor& x, std::span<const int> index) {
  for (int i : index) {
    if (i < 0 || i >= x.rows()) {
      throw Error(ErrorCode::ShapeMismatch,
                  "gather index " + std::to_string(i) + " outside " + std::to_string(x.rows()) + " rows");
    }
  }
  const bool track = tracks(tape, {&x});
  const int n = static_cast<int>(index.size());
  Tensor out = make_output(n, x.cols(), track);
  for (int r = 0; r < n; ++r) out.mat().row(r) = x.mat().row(index[r]);
  if (track) {
    tape.record([xn = x.shared(), on = out.shared(),
                 idx = std::vector<int>(index.begin(), index.end())] {
      if (on->grad.empty()) return;
      const ConstMatrixMap dout(on->grad.data(), on->rows, on->cols);
      auto g = grad_map(xn);
      for (std::size_t r = 0; r < idx.size(); ++r) g.row(idx[r]) += dout.row(static_cast<Eigen::Index>(r));
    });
  }
  return out;
}

Tensor embedding_lookup(Tape& tape, const Tensor& table, std::span<const int> ids) {
  return gather_rows(tape, table, ids);
}

Tensor softmax(Tape& tape, const Tensor& a, int axis) {
  if (axis != 0 && axis != 1) throw Error(ErrorCode::ShapeMismatch, "softmax axis must be 0 or 1");
  const bool track = tracks(tape, {&a});
  // Work row-wise on the transposed view for axis 0.
  RowMatrix x = axis == 1 ? RowMatrix(a.mat()) : RowMatrix(a.mat().transpose());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    x.row(r) = (x.row(r).array() - m).exp();
    x.row(r) /= x.row(r).sum();
  }
  Tensor out = make_output(a.rows(), a.cols(), track);
  if (axis == 1) {
    out.mat() = x;
  } else {
    out.mat() = x.transpose();
  }
  tape.check(out, "softmax");
  if (track) {
    tape.record([an = a.shared(), on = out.shared(), axis] {
      if (on->grad.empty()) return;
      const ConstMatrixMap y(on->data.data(), on->rows, on->cols);
      const ConstMatrixMap dy(on->grad.data(), on->rows, on->cols);
      const RowMatrix prod = (y.array() * dy.array()).matrix();
      auto g = grad_map(an);
      if (axis == 1) {
        const Eigen::VectorXd s = prod.rowwise().sum();
        g.array() += y.array() * (dy.colwise() - s).array();
      } else {
        const Eigen::RowVectorXd s = prod.colwise().sum();
        g.array() += y.array() * (dy.rowwise() - s).array();
      }
    });
  }
  return out;
}

Tensor log_softmax(Tape& tape, const Tensor& a) {
  const bool track = tracks(tape, {&a});
  Tensor out = make_output(a.rows(), a.cols(), track);
  for (int r = 0; r < a.rows(); ++r) {
    const auto row = a.mat().row(r);
    const double m = row.maxCoeff();
    const double lse = m + std::log((row.array() - m).exp().sum());
    out.mat().row(r) = row.array() - lse;
  }
  tape.check(out, "log_softmax");
  if (track) {
    tape.record([an = a.shared(), on = out.shared()] {
      if (on->grad.empty()) return;
      const ConstMatrixMap y(on->data.data(), on->rows, on->cols);
      const ConstMatrixMap dy(on->grad.data(), on->rows, on->cols);
      const Eigen::VectorXd s = dy.rowwise().sum();
      grad_map(an).array() += dy.array() - (y.array().exp().colwise() * s.array());
    });
  }
  return out;
}

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain,
                  const Tensor& bias, double eps) {
  const int n = x.cols();
  if (gain.rows() != 1 || gain.cols() != n || bias.rows() != 1 || bias.cols() != n) {
    throw Error(ErrorCode::ShapeMismatch, "layer_norm: gain/bias must be 1 x cols");
  }
  const bool track = tracks(tape, {&x, &gain, &bias});
  Tensor out = make_output(x.rows(), n, track);
  auto xhat = std::make_shared<RowMatrix>(x.rows(), n);
  auto inv_std = std::make_shared<Eigen::VectorXd>(x.rows());
  const Eigen::Map<const Eigen::RowVectorXd> g(gain.data().data(), n);
  const Eigen::Map<const Eigen::RowVectorXd> b(bias.data().data(), n);
  for (int r = 0; r < x.rows(); ++r) {
    const auto row = x.mat().row(r);
    const double mu = row.mean();
    const double var = (row.array() - mu).square().mean();
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    xhat->row(r) = (row.array() - mu) * is;
    out.mat().row(r) = xhat->row(r).cwiseProduct(g) + b;
  }
  tape.check(out, "layer_norm");
  if (track) {
    tape.record([xn = x.shared(), gn = gain.shared(), bn = bias.shared(),
                 on = out.shared(), xhat, inv_std, n] {
      if (on->grad.empty()) return;
      const ConstMatrixMap dy(on->grad.data(), on->rows, on->cols);
      if (gn->requires_grad) {
        Eigen::Map<Eigen::RowVectorXd>(grad_of(gn), n) +=
            (dy.array() * xhat->array()).matrix().colwise().sum();
      }
      if (bn->requires_grad) {
        Eigen::Map<Eigen::RowVectorXd>(grad_of(bn), n) += dy.colwise().sum();
      }
      if (xn->requires_grad) {
        const Eigen::Map<const Eigen::RowVectorXd> gv(gn->data.data(), n);
        auto gx = grad_map(xn);
        for (Eigen::Index r = 0; r < dy.rows(); ++r) {
          const Eigen::RowVectorXd dxhat = dy.row(r).cwiseProduct(gv);
          const double m1 = dxhat.mean();
          const double m2 = dxhat.cwiseProduct(xhat->row(r)).mean();
          gx.row(r) += (*inv_std)[r] *
                       (dxhat.array() - m1 - xhat->row(r).array() * m2).matrix();
        }
      }
    });
  }
  return out;
}

Tensor gelu(Tape& tape, const Tensor& a) {
  constexpr double k = 0.7978845608028654;  // sqrt(2 / pi)
  constexpr double c = 0.044715;
  return unary_elementwise(
      tape, a, "gelu",
      [](double x) { return 0.5 * x * (1.0 + std::tanh(k * (x + c * x * x * x))); },
      [](double x) {
        const double t = std::tanh(k * (x + c * x * x * x));
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * c * x * x);
      });
}

Tensor relu(Tape& tape, const Tensor& a) {
  return unary_elementwise(
      tape, a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sum(Tape& tape, const Tensor& a) {
  const bool track = tracks(tape, {&a});
  Tensor out = make_output(1, 1, track);
  out.data()[0] = a.mat().sum();
  tape.check(out, "sum");
  if (track) {
    tape.record([an = a.shared(), on = out.shared()] {
      if (on->grad.empty()) return;
      grad_map(an).array() += on->grad[0];
    });
  }
  return out;
}

Tensor mean(Tape& tape, const Tensor& a) {
  return scale(tape, sum(tape, a), 1.0 / static_cast<double>(a.numel()));
}

Tensor mse_loss(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse_loss");
  const bool track = tracks(tape, {&a, &b});
  Tensor out = make_output(1, 1, track);
  const double n = static_cast<double>(a.numel());
  out.data()[0] = (a.mat() - b.mat()).squaredNorm() / n;
  tape.check(out, "mse_loss");
  if (track) {
    tape.record([an = a.shared(), bn = b.shared(), on = out.shared(), n] {
      if (on->grad.empty()) return;
      const double g = on->grad[0] * 2.0 / n;
      const RowMatrix diff = value_map(an) - value_map(bn);
      if (an->requires_grad) grad_map(an) += g * diff;
      if (bn->requires_grad) grad_map(bn) -= g * diff;
    });
  }
  return out;
}

Tensor cross_entropy_loss(Tape& tape, const Tensor& logits,
                          std::span<const int> targets,
                          std::span<const double> weights, double normalizer) {
  const int rows = logits.rows();
  if (static_cast<int>(targets.size()) != rows ||
      (!weights.empty() && static_cast<int>(weights.size()) != rows)) {
    throw Error(ErrorCode::ShapeMismatch, "cross_entropy_loss: one target per row");
  }
  for (int t : targets) {
    if (t < 0 || t >= logits.cols()) throw Error(ErrorCode::ShapeMismatch, "target id out of range");
  }
  const double z = normalizer > 0.0 ? normalizer : static_cast<double>(rows);
  const bool track = tracks(tape, {&logits});
  Tensor out = make_output(1, 1, track);
  auto probs = std::make_shared<RowMatrix>(rows, logits.cols());
  double total = 0.0;
  for (int r = 0; r < rows; ++r) {
    const auto row = logits.mat().row(r);
    const double m = row.maxCoeff();
    const double lse = m + std::log((row.array() - m).exp().sum());
    probs->row(r) = (row.array() - lse).exp();
    const double w = weights.empty() ? 1.0 : weights[static_cast<std::size_t>(r)];
    total += w * (lse - row[targets[static_cast<std::size_t>(r)]]);
  }
  out.data()[0] = total / z;
  tape.check(out, "cross_entropy_loss");
  if (track) {
    tape.record([ln = logits.shared(), on = out.shared(), probs, z,
                 tg = std::vector<int>(targets.begin(), targets.end()),
                 wt = std::vector<double>(weights.begin(), weights.end())] {
      if (on->grad.empty()) return;
      auto g = grad_map(ln);
      for (std::size_t r = 0; r < tg.size(); ++r) {
        const double w = (wt.empty() ? 1.0 : wt[r]) * on->grad[0] / z;
        if (w == 0.0) continue;
        const auto ri = static_cast<Eigen::Index>(r);
        g.row(ri) += w * probs->row(ri);
        g(ri, tg[r]) -= w;
      }
    });
  }
  return out;
}

Tensor dropout(Tape& tape, const Tensor& a, double p, Rng& rng, bool training) {
  if (!training || p <= 0.0) return a;
  if (p >= 1.0) throw Error(ErrorCode::InvalidConfig, "dropout probability must be < 1");
  const bool track = tracks(tape, {&a});
  Tensor out = make_output(a.rows(), a.cols(), track);
  auto mask = std::make_shared<std::vector<double>>(a.numel());
  const double keep = 1.0 / (1.0 - p);
  auto ad = a.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) {
    (*mask)[i] = rng.uniform() >= p ? keep : 0.0;
    od[i] = ad[i] * (*mask)[i];
  }
  if (track) {
    tape.record([an = a.shared(), on = out.shared(), mask] {
      if (on->grad.empty()) return;
      double* g = grad_of(an);
      for (std::size_t i = 0; i < on->grad.size(); ++i) g[i] += on->grad[i] * (*mask)[i];
    });
  }
  return out;
}

Tensor block_left_map(Tape& tape, const Tensor& map, const Tensor& x, int n_blocks) {
  const int in_rows = map.cols();
  const int out_rows = map.rows();
  if (n_blocks < 1 || x.rows() != n_blocks * in_rows) {
    throw Error(ErrorCode::ShapeMismatch,
                "block_left_map: input has " + std::to_string(x.rows()) + " rows, expected " +
                    std::to_string(n_blocks) + " blocks of " + std::to_string(in_rows));
  }
  const bool track = tracks(tape, {&map, &x});
  const int d = x.cols();
  Tensor out = make_output(n_blocks * out_rows, d, track);
  for (int b = 0; b < n_blocks; ++b) {
    out.mat().middleRows(b * out_rows, out_rows).noalias() =
        map.mat() * x.mat().middleRows(b * in_rows, in_rows);
  }
  tape.check(out, "block_left_map");
  if (track) {
    tape.record([mn = map.shared(), xn = x.shared(), on = out.shared(), n_blocks,
                 in_rows, out_rows] {
      if (on->grad.empty()) return;
      const ConstMatrixMap dout(on->grad.data(), on->rows, on->cols);
      const auto m = value_map(mn);
      for (int b = 0; b < n_blocks; ++b) {
        const auto db = dout.middleRows(b * out_rows, out_rows);
        if (xn->requires_grad) {
          grad_map(xn).middleRows(b * in_rows, in_rows).noalias() += m.transpose() * db;
        }
        if (mn->requires_grad) {
          grad_map(mn).noalias() +=
              db * value_map(xn).middleRows(b * in_rows, in_rows).transpose();
        }
      }
    });
  }
  return out;
}

Tensor attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v,
                 int n_seq, int seq_len, int heads) {
  require_same_shape(q, k, "attention");
  require_same_shape(q, v, "attention");
  const int width = q.cols();
  if (heads < 1 || width % heads != 0 || q.rows() != n_seq * seq_len) {
    throw Error(ErrorCode::ShapeMismatch, "attention: bad head count or sequence layout");
  }
  const int dh = width / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool track = tracks(tape, {&q, &k, &v});
  Tensor out = make_output(q.rows(), width, track);

  using Strided = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;
  using StridedMut = Eigen::Map<RowMatrix, 0, Eigen::OuterStride<>>;
  auto block = [&](const double* base, int s, int h) {
    return Strided(base + static_cast<std::ptrdiff_t>(s) * seq_len * width + h * dh,
                   seq_len, dh, Eigen::OuterStride<>(width));
  };
  // Attention weights, one seq_len x seq_len block per (sequence, head).
  auto weights = std::make_shared<std::vector<RowMatrix>>();
  weights->reserve(static_cast<std::size_t>(n_seq) * heads);
  for (int s = 0; s < n_seq; ++s) {
    for (int h = 0; h < heads; ++h) {
      RowMatrix scores = inv_sqrt * block(q.data().data(), s, h) *
                         block(k.data().data(), s, h).transpose();
      for (Eigen::Index r = 0; r < scores.rows(); ++r) {
        const double m = scores.row(r).maxCoeff();
        scores.row(r) = (scores.row(r).array() - m).exp();
        scores.row(r) /= scores.row(r).sum();
      }
      StridedMut(out.data().data() + static_cast<std::ptrdiff_t>(s) * seq_len * width + h * dh,
                 seq_len, dh, Eigen::OuterStride<>(width))
          .noalias() = scores * block(v.data().data(), s, h);
      weights->push_back(std::move(scores));
    }
  }
  tape.check(out, "attention");
  if (track) {
    tape.record([qn = q.shared(), kn = k.shared(), vn = v.shared(), on = out.shared(),
                 weights, n_seq, seq_len, heads, dh, width, inv_sqrt] {
      if (on->grad.empty()) return;
      auto cblock = [&](const double* base, int s, int h) {
        return Strided(base + static_cast<std::ptrdiff_t>(s) * seq_len * width + h * dh,
                       seq_len, dh, Eigen::OuterStride<>(width));
      };
      auto mblock = [&](double* base, int s, int h) {
        return StridedMut(base + static_cast<std::ptrdiff_t>(s) * seq_len * width + h * dh,
                          seq_len, dh, Eigen::OuterStride<>(width));
      };
      double* gq = grad_of(qn);
      double* gk = grad_of(kn);
      double* gv = grad_of(vn);
      for (int s = 0; s < n_seq; ++s) {
        for (int h = 0; h < heads; ++h) {
          const RowMatrix& p = (*weights)[static_cast<std::size_t>(s) * heads + h];
          const auto dout = cblock(on->grad.data(), s, h);
          if (gv) mblock(gv, s, h).noalias() += p.transpose() * dout;
          if (!gq && !gk) continue;
          const RowMatrix dp = dout * cblock(vn->data.data(), s, h).transpose();
          const Eigen::VectorXd rs = (dp.array() * p.array()).rowwise().sum();
          const RowMatrix ds = inv_sqrt * (p.array() * (dp.colwise() - rs).array()).matrix();
          if (gq) mblock(gq, s, h).noalias() += ds * cblock(kn->data.data(), s, h);
          if (gk) mblock(gk, s, h).noalias() += ds.transpose() * cblock(qn->data.data(), s, h);
        }
      }
    });
  }
  return out;
}

// -- ParamStore ---------------------------------------------------------------

Tensor& ParamStore::add(const std::string& name, Tensor value) {
  if (params_.contains(name)) {
    throw Error(ErrorCode::InvalidConfig, "duplicate parameter name " + name);
  }
  value.node()->requires_grad = true;
  value.node()->ensure_grad();
  Moments mo;
  mo.m.assign(value.numel(), 0.0);
  mo.v.assign(value.numel(), 0.0);
  moments_.emplace(name, std::move(mo));
  return params_.emplace(name, std::move(value)).first->second;
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw Error(ErrorCode::InvalidConfig, "unknown parameter " + name);
  return it->second;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw Error(ErrorCode::InvalidConfig, "unknown parameter " + name);
  return it->second;
}

bool ParamStore::contains(const std::string& name) const { return params_.contains(name); }

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  for (const auto& [name, _] : params_) out.push_back(name);
  return out;
}

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += t.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [_, t] : params_) t.zero_grad();
}

ParamStore::Moments& ParamStore::moments(const std::string& name) {
  return moments_.at(name);
}

const ParamStore::Moments& ParamStore::moments(const std::string& name) const {
  return moments_.at(name);
}

void ParamStore::adam_step(const AdamConfig& config) {
  ++step_;
  const double t = static_cast<double>(step_);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (auto& [name, p] : params_) {
    auto& mo = moments_.at(name);
    auto data = p.data();
    auto grad = p.grad();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = grad.empty() ? 0.0 : grad[i];
      mo.m[i] = config.beta1 * mo.m[i] + (1.0 - config.beta1) * g;
      mo.v[i] = config.beta2 * mo.v[i] + (1.0 - config.beta2) * g * g;
      const double mhat = mo.m[i] / c1;
      const double vhat = mo.v[i] / c2;
      data[i] -= config.lr * mhat / (std::sqrt(vhat) + config.eps);
    }
    p.zero_grad();
  }
}

}  // namespace curvelang::ad
