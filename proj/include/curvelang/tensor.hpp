#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace curvelang {
class Rng;
}

namespace curvelang::ad {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

// Storage aligned to Eigen's packet size. Vectorized reductions group terms
// by alignment, so a fixed alignment keeps results independent of where the
// heap happened to place a buffer.
using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

namespace detail {
struct Node {
  int rows = 0;
  int cols = 0;
  Buffer data;
  Buffer grad;  // allocated only when requires_grad
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};
}  // namespace detail

// Dense row-major matrix with shared storage. Copies alias the same node, like
// a handle; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(int rows, int cols, bool requires_grad = false);
  static Tensor from(int rows, int cols, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  int rows() const { return node_->rows; }
  int cols() const { return node_->cols; }
  std::vector<int> shape() const { return {rows(), cols()}; }
  std::size_t numel() const { return node_->data.size(); }

  std::span<double> data() { return node_->data; }
  std::span<const double> data() const { return node_->data; }
  // Empty span unless a gradient buffer has been allocated.
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  bool requires_grad() const { return node_->requires_grad; }

  double item() const;
  double at(int r, int c) const {
    return node_->data[static_cast<std::size_t>(r) * cols() + c];
  }
  double& at(int r, int c) {
    return node_->data[static_cast<std::size_t>(r) * cols() + c];
  }

  MatrixMap mat() { return {node_->data.data(), rows(), cols()}; }
  ConstMatrixMap mat() const { return {node_->data.data(), rows(), cols()}; }

  void zero_grad();
  Tensor clone() const;
  // Same values, detached from any gradient tracking.
  Tensor detach() const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& shared() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Records executed operations in order; backward() replays their adjoints in
// reverse. Single-threaded; independent tapes may live on different threads.
class Tape {
 public:
  explicit Tape(bool check_finite = false) : check_finite_(check_finite) {}

  void backward(const Tensor& loss);
  void clear() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }

  // Adds an adjoint closure for an op whose output requires grad.
  void record(std::function<void()> adjoint);
  void check(const Tensor& out, const char* op) const;

  bool grad_enabled() const { return grad_enabled_; }
  void set_grad_enabled(bool on) { grad_enabled_ = on; }

 private:
  std::vector<std::function<void()>> entries_;
  bool check_finite_ = false;
  bool grad_enabled_ = true;
};

// -- core operations --------------------------------------------------------

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, double s);
// Multiplies every entry of x by the 1x1 tensor s.
Tensor scale_by(Tape& tape, const Tensor& x, const Tensor& s);
// bias is 1 x cols (row bias, added to every row) or rows x 1 (column bias).
Tensor add_bias(Tape& tape, const Tensor& x, const Tensor& bias);
Tensor transpose(Tape& tape, const Tensor& a);
// Same row-major buffer viewed with a new shape.
Tensor reshape(Tape& tape, const Tensor& a, int rows, int cols);
// out(i, j) = x(i, j) * s(i); s is rows x 1.
Tensor row_scale(Tape& tape, const Tensor& x, const Tensor& s);
// axis 0 stacks rows, axis 1 stacks columns.
Tensor concat(Tape& tape, const std::vector<Tensor>& parts, int axis);
Tensor slice(Tape& tape, const Tensor& a, int axis, int start, int length);
// out[i] = x[index[i]]; gradients scatter-add back.
Tensor gather_rows(Tape& tape, const Tensor& x, std::span<const int> index);
Tensor embedding_lookup(Tape& tape, const Tensor& table, std::span<const int> ids);
Tensor softmax(Tape& tape, const Tensor& a, int axis = 1);
Tensor log_softmax(Tape& tape, const Tensor& a);
Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain,
                  const Tensor& bias, double eps = 1e-5);
Tensor gelu(Tape& tape, const Tensor& a);
Tensor relu(Tape& tape, const Tensor& a);
Tensor mean(Tape& tape, const Tensor& a);
Tensor sum(Tape& tape, const Tensor& a);
Tensor mse_loss(Tape& tape, const Tensor& a, const Tensor& b);
// sum_i w_i * (-log softmax(logits_i)[target_i]) / normalizer. Empty weights
// mean all ones; normalizer <= 0 means the row count.
Tensor cross_entropy_loss(Tape& tape, const Tensor& logits,
                          std::span<const int> targets,
                          std::span<const double> weights = {},
                          double normalizer = 0.0);
// Inverted dropout; identity when !training or p == 0.
Tensor dropout(Tape& tape, const Tensor& a, double p, Rng& rng, bool training);

// Row-block linear map: x stacks n_blocks blocks of map.cols() rows; block b
// of the output is map * x_b. Used to apply B and B+ per sequence.
Tensor block_left_map(Tape& tape, const Tensor& map, const Tensor& x,
                      int n_blocks);
// Bidirectional multi-head scaled dot-product attention. q, k, v stack n_seq
// sequences of seq_len rows; columns split into `heads` equal groups.
Tensor attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v,
                 int n_seq, int seq_len, int heads);

// -- parameters and optimizer ---------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor value);
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::vector<std::string> names() const;
  std::size_t parameter_count() const;
  void zero_grad();

  // Standard Adam with bias correction; gradients are zeroed afterwards.
  void adam_step(const AdamConfig& config);

  std::int64_t step() const { return step_; }
  void set_step(std::int64_t step) { step_ = step; }

  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };
  Moments& moments(const std::string& name);
  const Moments& moments(const std::string& name) const;

 private:
  std::map<std::string, Tensor> params_;
  std::map<std::string, Moments> moments_;
  std::int64_t step_ = 0;
};

}  // namespace curvelang::ad
