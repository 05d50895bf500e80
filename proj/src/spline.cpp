#include "curvelang/spline.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "curvelang/error.hpp"

namespace curvelang::spline {

KnotVector clamped_knots(int n_control, int degree) {
  if (degree < 1) {
    throw Error(ErrorCode::DegreeTooHigh,
                "degree must be >= 1, got " + std::to_string(degree));
  }
  if (degree > n_control - 1) {
    throw Error(ErrorCode::DegreeTooHigh,
                "degree " + std::to_string(degree) + " needs at least " +
                    std::to_string(degree + 1) + " control points, got " +
                    std::to_string(n_control));
  }
  KnotVector kv;
  kv.degree = degree;
  kv.knots.assign(static_cast<std::size_t>(n_control + degree + 1), 0.0);
  const int spans = n_control - degree;
  for (int i = 1; i < spans; ++i) {
    kv.knots[static_cast<std::size_t>(degree + i)] =
        static_cast<double>(i) / spans;
  }
  std::fill(kv.knots.end() - (degree + 1), kv.knots.end(), 1.0);
  return kv;
}

namespace {

// Index k with knots[k] <= gamma < knots[k+1], restricted to the valid spans
// [degree, n_control - 1]; gamma = 1 lands in the last span.
int find_span(double gamma, const KnotVector& kv) {
  const int n = kv.n_control();
  const int p = kv.degree;
  if (gamma >= kv.knots[static_cast<std::size_t>(n)]) return n - 1;
  const auto first = kv.knots.begin() + p;
  const auto last = kv.knots.begin() + n + 1;
  const auto it = std::upper_bound(first, last, gamma);
  return static_cast<int>(it - kv.knots.begin()) - 1;
}

}  // namespace

Vector basis_vector(double gamma, const KnotVector& kv) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) {
    throw Error(ErrorCode::OutOfRange,
                "curve index must lie in [0, 1], got " + std::to_string(gamma));
  }
  const int n = kv.n_control();
  const int p = kv.degree;
  // Clamped ends interpolate the first and last control points exactly; the
  // recurrence alone can land one ulp short at gamma = 1.
  if (gamma == 0.0) return Vector::Unit(n, 0);
  if (gamma == 1.0) return Vector::Unit(n, n - 1);
  const int span = find_span(gamma, kv);
  const auto& u = kv.knots;

  // Non-zero basis functions N_{span-p..span, p}(gamma), triangular scheme.
  std::vector<double> local(static_cast<std::size_t>(p + 1), 0.0);
  std::vector<double> left(static_cast<std::size_t>(p + 1), 0.0);
  std::vector<double> right(static_cast<std::size_t>(p + 1), 0.0);
  local[0] = 1.0;
  for (int j = 1; j <= p; ++j) {
    left[j] = gamma - u[static_cast<std::size_t>(span + 1 - j)];
    right[j] = u[static_cast<std::size_t>(span + j)] - gamma;
    double saved = 0.0;
    for (int r = 0; r < j; ++r) {
      const double denom = right[r + 1] + left[j - r];
      const double temp = denom == 0.0 ? 0.0 : local[r] / denom;
      local[r] = saved + right[r + 1] * temp;
      saved = left[j - r] * temp;
    }
    local[j] = saved;
  }

  Vector out = Vector::Zero(n);
  for (int r = 0; r <= p; ++r) out[span - p + r] = local[r];
  return out;
}

SampleIndices sample_indices(int length, double margin) {
  if (length < 2) {
    throw Error(ErrorCode::LengthTooShort,
                "sentence length must be >= 2, got " + std::to_string(length));
  }
  if (!(margin >= 0.0 && margin < 0.5)) {
    throw Error(ErrorCode::OutOfRange,
                "margin must lie in [0, 0.5), got " + std::to_string(margin));
  }
  SampleIndices s;
  s.margin = margin;
  s.gammas.resize(static_cast<std::size_t>(length));
  const double width = 1.0 - 2.0 * margin;
  for (int i = 0; i < length; ++i) {
    s.gammas[static_cast<std::size_t>(i)] =
        margin + width * static_cast<double>(i) / (length - 1);
  }
  s.gammas.back() = 1.0 - margin;
  return s;
}

Matrix basis_matrix(int length, int n_control, int degree, double margin) {
  const KnotVector kv = clamped_knots(n_control, degree);
  const SampleIndices s = sample_indices(length, margin);
  Matrix b(n_control, length);
  for (int j = 0; j < length; ++j) {
    b.col(j) = basis_vector(s.gammas[static_cast<std::size_t>(j)], kv);
  }
  return b;
}

double default_rcond(Eigen::Index rows, Eigen::Index cols) {
  return 1e-12 * static_cast<double>(std::max(rows, cols));
}

PseudoInverse pseudo_inverse(const Matrix& b, std::optional<double> rcond) {
  if (!b.allFinite()) {
    throw Error(ErrorCode::NumericalFailure, "matrix has non-finite entries");
  }
  const double cutoff_rel = rcond.value_or(default_rcond(b.rows(), b.cols()));
  Eigen::BDCSVD<Matrix> svd(b, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (svd.info() != Eigen::Success) {
    throw Error(ErrorCode::NumericalFailure, "SVD did not converge");
  }
  const Vector& sigma = svd.singularValues();
  PseudoInverse out;
  out.pinv = Matrix::Zero(b.cols(), b.rows());
  if (sigma.size() == 0 || sigma[0] == 0.0) return out;

  const double cutoff = cutoff_rel * sigma[0];
  Vector inv = Vector::Zero(sigma.size());
  double smallest = sigma[0];
  for (Eigen::Index i = 0; i < sigma.size(); ++i) {
    if (sigma[i] > cutoff) {
      inv[i] = 1.0 / sigma[i];
      smallest = sigma[i];
      ++out.rank;
    }
  }
  out.pinv = svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
  out.cond = sigma[0] / smallest;
  if (!out.pinv.allFinite()) {
    throw Error(ErrorCode::NumericalFailure, "pseudo-inverse is non-finite");
  }
  return out;
}

BasisPair make_basis_pair(int length, int n_control, int degree, double margin,
                          std::optional<double> rcond) {
  BasisPair pair;
  pair.basis = basis_matrix(length, n_control, degree, margin);
  PseudoInverse pi = pseudo_inverse(pair.basis, rcond);
  pair.pinv = std::move(pi.pinv);
  pair.length = length;
  pair.n_control = n_control;
  pair.degree = degree;
  pair.margin = margin;
  pair.rank = pi.rank;
  pair.cond = pi.cond;
  return pair;
}

double error_importance(const Matrix& v, const Matrix& pinv) {
  if (v.cols() != pinv.rows()) {
    throw Error(ErrorCode::ShapeMismatch,
                "error matrix has " + std::to_string(v.cols()) +
                    " columns, pseudo-inverse has " +
                    std::to_string(pinv.rows()) + " rows");
  }
  return (v * pinv).squaredNorm();
}

SpectralReport importance_ratio(const Matrix& pinv, int embedding_dim,
                                double tolerance) {
  if (embedding_dim < 1) {
    throw Error(ErrorCode::ShapeMismatch, "embedding dimension must be >= 1");
  }
  const Eigen::Index length = pinv.rows();
  const Matrix gram = pinv * pinv.transpose();
  Eigen::SelfAdjointEigenSolver<Matrix> eig(gram, Eigen::EigenvaluesOnly);
  if (eig.info() != Eigen::Success) {
    throw Error(ErrorCode::NumericalFailure, "eigensolver did not converge");
  }
  const Vector& lambda = eig.eigenvalues();

  SpectralReport r;
  r.embedding_dim = embedding_dim;
  r.eigenvalues.assign(lambda.data(), lambda.data() + lambda.size());
  r.lambda_max = lambda[length - 1];
  r.lambda_min = lambda[0];
  const double cutoff = default_rcond(length, length) * r.lambda_max;
  r.lambda_min_nonzero = r.lambda_max;
  for (Eigen::Index i = 0; i < length; ++i) {
    if (lambda[i] > cutoff) {
      r.lambda_min_nonzero = lambda[i];
      r.singular = i > 0;
      break;
    }
  }
  r.ratio_bound = r.lambda_max / r.lambda_min_nonzero;
  r.ratio_bound_full = r.singular || r.lambda_min <= 0.0
                           ? std::numeric_limits<double>::infinity()
                           : r.lambda_max / r.lambda_min;

  const double d = embedding_dim;
  const double l = static_cast<double>(length);
  // ||1_{d x L} B+||^2 / (dL) = 1^T G 1 / L; ||1_d e_i^T B+||^2 = d G_ii.
  r.importance_global = gram.sum() / l;
  r.importance_local.resize(static_cast<std::size_t>(length));
  r.position_ratios.resize(static_cast<std::size_t>(length));
  double local_max = 0.0;
  r.bound_holds = true;
  r.nonzero_bound_holds = true;
  for (Eigen::Index i = 0; i < length; ++i) {
    const double local = d * gram(i, i);
    const double ratio = r.importance_global / local;
    r.importance_local[static_cast<std::size_t>(i)] = local;
    r.position_ratios[static_cast<std::size_t>(i)] = ratio;
    local_max = std::max(local_max, local);
    if (ratio > r.ratio_bound_full + tolerance) r.bound_holds = false;
    if (ratio > r.ratio_bound + tolerance) r.nonzero_bound_holds = false;
  }
  r.ratio = r.importance_global / local_max;
  return r;
}

}  // namespace curvelang::spline
