#pragma once

#include <optional>
#include <vector>

#include <Eigen/Dense>

namespace curvelang::spline {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Clamped (open) uniform knot vector on [0, 1]: degree+1 zeros, uniformly
// spaced interior knots, degree+1 ones. Length is n_control + degree + 1.
struct KnotVector {
  std::vector<double> knots;
  int degree = 0;

  int n_control() const { return static_cast<int>(knots.size()) - degree - 1; }
};

// Curve indices at which a sentence of length L is sampled.
struct SampleIndices {
  std::vector<double> gammas;
  double margin = 0.0;
};

struct PseudoInverse {
  Matrix pinv;  // L x N
  int rank = 0;
  double cond = 0.0;  // sigma_max / sigma_min over retained singular values
};

// The basis matrix B (N x L) and its Moore-Penrose inverse B+ (L x N) for
// one (L, N, degree, margin) configuration.
struct BasisPair {
  Matrix basis;
  Matrix pinv;
  int length = 0;
  int n_control = 0;
  int degree = 0;
  double margin = 0.0;
  int rank = 0;
  double cond = 0.0;
};

// Spectrum of G = B+ (B+)^T and the global/local error importances derived
// from it.
struct SpectralReport {
  std::vector<double> eigenvalues;  // ascending
  double lambda_max = 0.0;
  double lambda_min = 0.0;          // smallest over the full spectrum
  double lambda_min_nonzero = 0.0;  // smallest above rcond * lambda_max
  double ratio_bound = 0.0;         // lambda_max / lambda_min_nonzero
  double ratio_bound_full = 0.0;    // lambda_max / lambda_min (may be inf)
  double importance_global = 0.0;
  std::vector<double> importance_local;
  std::vector<double> position_ratios;
  double ratio = 0.0;  // importance_global / max_i importance_local[i]
  int embedding_dim = 1;
  bool singular = false;  // G has eigenvalues at or below the cutoff
  // Every position ratio is <= ratio_bound_full (+ tolerance). This is the
  // lemma's statement; it is vacuous when G is singular.
  bool bound_holds = false;
  // Every position ratio is <= ratio_bound (+ tolerance). Equivalent to
  // bound_holds for non-singular G; not guaranteed otherwise.
  bool nonzero_bound_holds = false;
};

KnotVector clamped_knots(int n_control, int degree);

// Degree-`degree` B-spline basis weights at gamma via Cox-de Boor. The last
// knot span is closed so gamma = 1 maps to the last unit vector.
Vector basis_vector(double gamma, const KnotVector& knots);

SampleIndices sample_indices(int length, double margin);

Matrix basis_matrix(int length, int n_control, int degree, double margin);

double default_rcond(Eigen::Index rows, Eigen::Index cols);

// SVD-based Moore-Penrose pseudo-inverse. Singular values below
// rcond * sigma_max are truncated; rcond defaults to default_rcond().
PseudoInverse pseudo_inverse(const Matrix& b,
                             std::optional<double> rcond = std::nullopt);

BasisPair make_basis_pair(int length, int n_control, int degree, double margin,
                          std::optional<double> rcond = std::nullopt);

// I(V) = ||V B+||_F^2 for an error matrix V (d x L).
double error_importance(const Matrix& v, const Matrix& pinv);

// Global vs local error importance for V_global = 1_{d x L} / sqrt(dL) and
// V_local,i = 1_d e_i^T, together with the eigenvalue bound on their ratio.
SpectralReport importance_ratio(const Matrix& pinv, int embedding_dim,
                                double tolerance = 1e-9);

}  // namespace curvelang::spline
