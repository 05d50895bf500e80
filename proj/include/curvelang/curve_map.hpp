#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "curvelang/spline.hpp"

namespace curvelang {

struct DegreeRatio {
  double value = 0.1;
};
struct DegreeFixed {
  int value = 5;
};
using DegreeSpec = std::variant<DegreeRatio, DegreeFixed>;

struct CurveConfig {
  double n_ratio = 2.0;
  DegreeSpec degree = DegreeRatio{0.1};
  int min_degree = 2;  // floor applied to the ratio rule
  int k_curves = 1;
  double margin = 0.01;
  int l_min = 2;
  int l_max = 250;
  std::optional<double> rcond;
  bool allow_dynamic = false;

  void validate() const;
};

struct CurveDims {
  int n_control = 0;
  int degree = 0;
};

// N = trunc(L * n_ratio) (at least 2); degree from the ratio rule
// max(trunc(N * ratio), min_degree) or the fixed value, then clamped into
// [1, N - 1].
CurveDims resolve_dims(int length, const CurveConfig& config);

// One precomputed BasisPair per sentence length in [l_min, l_max].
// Immutable after construction; safe to share across threads.
class BasisCache {
 public:
  static BasisCache build(const CurveConfig& config);
  // B = B+ = I_L for every length: the curve-free baseline.
  static BasisCache identity(int l_min, int l_max);

  std::shared_ptr<const spline::BasisPair> pair(int length) const;
  const spline::BasisPair& at(int length) const;
  bool contains(int length) const;

  std::size_t size() const { return pairs_.size(); }
  const CurveConfig& config() const { return config_; }
  bool is_identity() const { return identity_; }
  int l_min() const { return config_.l_min; }
  int l_max() const { return config_.l_max; }

 private:
  CurveConfig config_;
  bool identity_ = false;
  std::vector<std::shared_ptr<const spline::BasisPair>> pairs_;
};

struct EmbeddingSequence {
  spline::Matrix values;  // d x L
};

struct SentenceCurve {
  spline::Matrix points;  // d x N
  int length = 0;         // the L this curve maps to
};

// P = E B+.
SentenceCurve embed_to_curve(const EmbeddingSequence& e,
                             const BasisCache& cache);
// E = P B.
EmbeddingSequence curve_to_embed(const SentenceCurve& p,
                                 const BasisCache& cache);

struct ReconstructionConfig {
  double n_ratio = 2.0;
  DegreeSpec degree = DegreeRatio{0.0};
  int min_degree = 2;
  double margin = 0.01;
  int dim = 16;
  std::optional<double> rcond;
};

// Mean squared error of E -> E B+ B over `trials` standard-Gaussian d x L
// sequences.
double reconstruction_error(int length, const ReconstructionConfig& config,
                            int trials, std::uint64_t seed);

struct ReconstructionRow {
  int length = 0;
  double n_ratio = 0.0;
  double eta_ratio = 0.0;
  int n_control = 0;
  int degree = 0;
  double mse = 0.0;
};

struct SweepSpec {
  std::vector<int> lengths = {25, 50, 75, 100, 125, 150, 175, 200, 225, 250};
  std::vector<double> n_ratios = {1.0, 1.5, 2.0, 2.5, 3.0};
  std::vector<double> eta_ratios = {0.0, 0.33, 0.66};
  int trials = 100;
  int min_degree = 2;
  double margin = 0.01;
  int dim = 16;
};

// Cross product in (L, n_ratio, eta_ratio) order, L outermost.
std::vector<ReconstructionRow> reconstruction_sweep(const SweepSpec& spec,
                                                    std::uint64_t seed);

std::string sweep_to_csv(const std::vector<ReconstructionRow>& rows);
std::string sweep_to_json(const std::vector<ReconstructionRow>& rows);

}  // namespace curvelang
