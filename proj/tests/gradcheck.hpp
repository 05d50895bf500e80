#pragma once
// Finite-difference gradient checks shared by the unit tests and the
// acceptance run.

#include <algorithm>
#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "curvelang/rng.hpp"
#include "curvelang/tensor.hpp"
#include "oracles.hpp"

namespace gradcheck {

using namespace curvelang;
using namespace curvelang::ad;


inline Tensor random_tensor(Rng& rng, int rows, int cols, bool grad = true) {
  std::vector<double> v(static_cast<std::size_t>(rows) * cols);
  for (auto& x : v) x = rng.normal();
  return Tensor::from(rows, cols, std::move(v), grad);
}

using Fn = std::function<Tensor(Tape&, std::vector<Tensor>&)>;

// Relative error between the tape gradient and central differences of
// loss = sum(f(inputs) * R) for a fixed random R, worst over all inputs.
inline double gradient_error(std::vector<Tensor> inputs, const Fn& f, std::uint64_t seed) {
  Rng rng(seed);
  Tensor weights;
  auto eval = [&](bool record) {
    Tape tape;
    tape.set_grad_enabled(record);
    Tensor out = f(tape, inputs);
    if (!weights.defined()) weights = random_tensor(rng, out.rows(), out.cols(), false);
    Tensor loss = sum(tape, mul(tape, out, weights));
    if (record) tape.backward(loss);
    return loss.item();
  };
  eval(true);
  double worst = 0.0;
  for (auto& in : inputs) {
    if (!in.requires_grad()) continue;
    const std::vector<double> analytic(in.grad().begin(), in.grad().end());
    const auto numeric = oracle::finite_difference(in.node()->data, [&] { return eval(false); });
    double diff = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
      scale += analytic[i] * analytic[i] + numeric[i] * numeric[i];
    }
    worst = std::max(worst, std::sqrt(diff) / std::max(std::sqrt(scale), 1e-8));
  }
  return worst;
}

struct OpCase {
  const char* name;
  std::function<std::pair<std::vector<Tensor>, Fn>(Rng&)> make;
};

inline int dim(Rng& rng) { return 1 + static_cast<int>(rng.uniform_int(5)); }

inline std::vector<OpCase> op_cases() {
  std::vector<OpCase> cases;
  cases.push_back({"matmul", [](Rng& r) {
    int m = dim(r), k = dim(r), n = dim(r);
    return std::pair{std::vector{random_tensor(r, m, k), random_tensor(r, k, n)},
                     Fn([](Tape& t, std::vector<Tensor>& x) { return matmul(t, x[0], x[1]); })};
  }});
  cases.push_back({"add", [](Rng& r) {
    int m = dim(r), n = dim(r);
    return std::pair{std::vector{random_tensor(r, m, n), random_tensor(r, m, n)},
                     Fn([](Tape& t, std::vector<Tensor>& x) { return add(t, x[0], x[1]); })};
  }});
  cases.push_back({"sub", [](Rng& r) {
    int m = dim(r), n = dim(r);
    return std::pair{std::vector{random_tensor(r, m, n), random_tensor(r, m, n)},
                     Fn([](Tape& t, std::vector<Tensor>& x) { return sub(t, x[0], x[1]); })};
  }});
  cases.push_back({"mul", [](Rng& r) {
    int m = dim(r), n = dim(r);
    return std::pair{std::vector{random_tensor(r, m, n), random_tensor(r, m, n)},
                     Fn([](Tape& t, std::vector<Tensor>& x) { return mul(t, x[0], x[1]); })};
  }});
  cases.push_back({"scale", [](Rng& r) {
    return std::pair{std::vector{random_tensor(r, dim(r), dim(r))},
                     Fn([](Tape& t, std::vector<Tensor>& x) { return scale(t, x[0], -1.7); })};
  }});
  cases.push_back({"scale_by", [](Rng& r) {
    return std::pair{std::vector{random_tensor(r, dim(r), dim(r)), random_tensor(r, 1, 1)},
                     Fn([](Tape& t, std::vector<Tensor>& x) { return scale_by(t, x[0], x[1]); })};
  }});
  cases.push_back({"add_bias_row", [](Rng& r) {
    int m = dim(r), n = dim(r);
    return std::pair{std::vector{random_tensor(r, m, n), random_tensor(r, 1, n)},
                     Fn([](Tape& t, std::vector<Tensor>& x) { return add_bias(t, x[0], x[1]); })};
  }});
  cases.push_back({"add_bias_col", [](Rng& r) {
    int m = dim(r) + 1, n = dim(r) + 1;
    return std::pair{std::vector{random_tensor(r, m, n), random_tensor(r, m, 1)},
                     Fn([](Tape& t, std::vector<Tensor>& x) { return add_bias(t, x[0], x[1]); })};
  }});
  cases.push_back({"transpose", [](Rng& r) {
    return std::pair{std::vector{random_tensor(r, dim(r), dim(r))},
                     Fn([](Tape& t, std::vector<Tensor>& x) { return transpose(t, x[0]); })};
  }});
  cases.push_back({"reshape", [](Rng& r) {
    int m = dim(r), n = dim(r);
    return std::pair{std::vector{random_tensor(r, m, n)},
                     Fn([=](Tape& t, std::vector<Tensor>& x) { return reshape(t, x[0], n, m); })};
  }});
  cases.push_back({"row_scale", [](Rng& r) {
    int m = dim(r), n = dim(r);
    return std::pair{std::vector{random_tensor(r, m, n), random_tensor(r, m, 1)},
                     Fn([](Tape& t, std::vector<Tensor>& x) { return row_scale(t, x[0], x[1]); })};
  }});
  cases.push_back({"concat_rows", [](Rng& r) {
    int n = dim(r);
    return std::pair{std::vector{random_tensor(r, dim(r), n), random_tensor(r, dim(r), n)},
                     Fn([](Tape& t, std::vector<Tensor>& x) { return concat(t, {x[0], x[1]}, 0); })};
  }});
  cases.push_back({"concat_cols", [](Rng& r) {
    int m = dim(r);
    return std::pair{std::vector{random_tensor(r, m, dim(r)), random_tensor(r, m, dim(r))},
                     Fn([](Tape& t, std::vector<Tensor>& x) { return concat(t, {x[0], x[1]}, 1); })};
  }});
  cases.push_back({"slice", [](Rng& r) {
    int m = dim(r) + 1, n = dim(r) + 1;
    int axis = static_cast<int>(r.uniform_int(2));
    int extent = axis == 0 ? m : n;
    int start = static_cast<int>(r.uniform_int(static_cast<std::uint64_t>(extent)));
    int len = 1 + static_cast<int>(r.uniform_int(static_cast<std::uint64_t>(extent - start)));
    return std::pair{std::vector{random_tensor(r, m, n)},
                     Fn([=](Tape& t, std::vector<Tensor>& x) { return slice(t, x[0], axis, start, len); })};
  }});
  cases.push_back({"gather_rows", [](Rng& r) {
    int m = dim(r), n = dim(r);
    std::vector<int> idx(static_cast<std::size_t>(dim(r) + 2));
    for (auto& i : idx) i = static_cast<int>(r.uniform_int(static_cast<std::uint64_t>(m)));
    return std::pair{std::vector{random_tensor(r, m, n)},
                     Fn([idx](Tape& t, std::vector<Tensor>& x) { return gather_rows(t, x[0], idx); })};
  }});
  cases.push_back({"softmax_rows", [](Rng& r) {
    return std::pair{std::vector{random_tensor(r, dim(r), dim(r) + 1)},
                     Fn([](Tape& t, std::vector<Tensor>& x) { return softmax(t, x[0], 1); })};
  }});
  cases.push_back({"softmax_cols", [](Rng& r) {
    return std::pair{std::vector{random_tensor(r, dim(r) + 1, dim(r))},
                     Fn([](Tape& t, std::vector<Tensor>& x) { return softmax(t, x[0], 0); })};
  }});
  cases.push_back({"log_softmax", [](Rng& r) {
    return std::pair{std::vector{random_tensor(r, dim(r), dim(r) + 1)},
                     Fn([](Tape& t, std::vector<Tensor>& x) { return log_softmax(t, x[0]); })};
  }});
  cases.push_back({"layer_norm", [](Rng& r) {
    int m = dim(r), n = dim(r) + 1;
    return std::pair{std::vector{random_tensor(r, m, n), random_tensor(r, 1, n), random_tensor(r, 1, n)},
                     Fn([](Tape& t, std::vector<Tensor>& x) { return layer_norm(t, x[0], x[1], x[2]); })};
  }});
  cases.push_back({"gelu", [](Rng& r) {
    return std::pair{std::vector{random_tensor(r, dim(r), dim(r))},
                     Fn([](Tape& t, std::vector<Tensor>& x) { return gelu(t, x[0]); })};
  }});
  cases.push_back({"relu", [](Rng& r) {
    return std::pair{std::vector{random_tensor(r, dim(r), dim(r))},
                     Fn([](Tape& t, std::vector<Tensor>& x) { return relu(t, x[0]); })};
  }});
  cases.push_back({"mean", [](Rng& r) {
    return std::pair{std::vector{random_tensor(r, dim(r), dim(r))},
                     Fn([](Tape& t, std::vector<Tensor>& x) { return mean(t, x[0]); })};
  }});
  cases.push_back({"sum", [](Rng& r) {
    return std::pair{std::vector{random_tensor(r, dim(r), dim(r))},
                     Fn([](Tape& t, std::vector<Tensor>& x) { return sum(t, x[0]); })};
  }});
  cases.push_back({"mse_loss", [](Rng& r) {
    int m = dim(r), n = dim(r);
    return std::pair{std::vector{random_tensor(r, m, n), random_tensor(r, m, n)},
                     Fn([](Tape& t, std::vector<Tensor>& x) { return mse_loss(t, x[0], x[1]); })};
  }});
  cases.push_back({"cross_entropy", [](Rng& r) {
    int m = dim(r), n = dim(r) + 1;
    std::vector<int> tg(static_cast<std::size_t>(m));
    std::vector<double> w(static_cast<std::size_t>(m));
    for (auto& v : tg) v = static_cast<int>(r.uniform_int(static_cast<std::uint64_t>(n)));
    for (auto& v : w) v = r.uniform();
    return std::pair{std::vector{random_tensor(r, m, n)},
                     Fn([tg, w](Tape& t, std::vector<Tensor>& x) {
                       return cross_entropy_loss(t, x[0], tg, w, 2.5);
                     })};
  }});
  cases.push_back({"dropout", [](Rng& r) {
    const std::uint64_t s = r.next_u64();
    return std::pair{std::vector{random_tensor(r, dim(r), dim(r))},
                     Fn([s](Tape& t, std::vector<Tensor>& x) {
                       Rng local(s);
                       return dropout(t, x[0], 0.3, local, true);
                     })};
  }});
  cases.push_back({"block_left_map", [](Rng& r) {
    int so = dim(r), si = dim(r), blocks = dim(r), d = dim(r);
    return std::pair{std::vector{random_tensor(r, so, si), random_tensor(r, blocks * si, d)},
                     Fn([blocks](Tape& t, std::vector<Tensor>& x) {
                       return block_left_map(t, x[0], x[1], blocks);
                     })};
  }});
  cases.push_back({"attention", [](Rng& r) {
    int seqs = dim(r), len = dim(r), heads = 1 + static_cast<int>(r.uniform_int(2));
    int width = heads * dim(r);
    return std::pair{std::vector{random_tensor(r, seqs * len, width), random_tensor(r, seqs * len, width),
                                 random_tensor(r, seqs * len, width)},
                     Fn([=](Tape& t, std::vector<Tensor>& x) {
                       return attention(t, x[0], x[1], x[2], seqs, len, heads);
                     })};
  }});
  return cases;
}


}  // namespace gradcheck
