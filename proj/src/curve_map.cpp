#include "curvelang/curve_map.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

#include "curvelang/error.hpp"
#include "curvelang/format.hpp"
#include "curvelang/rng.hpp"

namespace curvelang {
namespace {

// trunc() with a guard against products like 0.29 * 100 = 28.999999999999996.
int trunc_product(double a, double b) {
  return static_cast<int>(std::floor(a * b + 1e-9));
}

int resolve_degree(int n_control, const DegreeSpec& spec, int min_degree) {
  int degree = std::visit(
      [&](const auto& s) -> int {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, DegreeRatio>) {
          return std::max(trunc_product(n_control, s.value), min_degree);
        } else {
          return s.value;
        }
      },
      spec);
  return std::max(1, std::min(degree, n_control - 1));
}

}  // namespace

void CurveConfig::validate() const {
  if (!(n_ratio > 0.0)) {
    throw Error(ErrorCode::InvalidConfig, "n_ratio must be positive");
  }
  if (k_curves < 1) {
    throw Error(ErrorCode::InvalidConfig, "k_curves must be >= 1");
  }
  if (l_min < 2 || l_min > l_max) {
    throw Error(ErrorCode::InvalidConfig, "need 2 <= l_min <= l_max");
  }
  if (!(margin >= 0.0 && margin < 0.5)) {
    throw Error(ErrorCode::InvalidConfig, "margin must lie in [0, 0.5)");
  }
  if (const auto* r = std::get_if<DegreeRatio>(&degree); r && r->value < 0.0) {
    throw Error(ErrorCode::InvalidConfig, "degree ratio must be >= 0");
  }
  if (const auto* f = std::get_if<DegreeFixed>(&degree); f && f->value < 1) {
    throw Error(ErrorCode::InvalidConfig, "fixed degree must be >= 1");
  }
}

CurveDims resolve_dims(int length, const CurveConfig& config) {
  if (length < config.l_min || length > config.l_max) {
    if (!config.allow_dynamic || length < 2) {
      throw Error(ErrorCode::LengthOutOfRange,
                  "length " + std::to_string(length) + " outside [" +
                      std::to_string(config.l_min) + ", " +
                      std::to_string(config.l_max) + "]");
    }
  }
  CurveDims dims;
  dims.n_control = std::max(trunc_product(length, config.n_ratio), 2);
  dims.degree = resolve_degree(dims.n_control, config.degree, config.min_degree);
  return dims;
}

BasisCache BasisCache::build(const CurveConfig& config) {
  config.validate();
  BasisCache cache;
  cache.config_ = config;
  cache.pairs_.reserve(static_cast<std::size_t>(config.l_max - config.l_min + 1));
  for (int length = config.l_min; length <= config.l_max; ++length) {
    const CurveDims dims = resolve_dims(length, config);
    cache.pairs_.push_back(std::make_shared<const spline::BasisPair>(
        spline::make_basis_pair(length, dims.n_control, dims.degree,
                                config.margin, config.rcond)));
  }
  return cache;
}

BasisCache BasisCache::identity(int l_min, int l_max) {
  BasisCache cache;
  cache.config_.l_min = l_min;
  cache.config_.l_max = l_max;
  cache.config_.n_ratio = 1.0;
  cache.config_.degree = DegreeFixed{1};
  cache.config_.validate();
  cache.identity_ = true;
  for (int length = l_min; length <= l_max; ++length) {
    auto pair = std::make_shared<spline::BasisPair>();
    pair->basis = spline::Matrix::Identity(length, length);
    pair->pinv = spline::Matrix::Identity(length, length);
    pair->length = length;
    pair->n_control = length;
    pair->degree = 0;
    pair->rank = length;
    pair->cond = 1.0;
    cache.pairs_.push_back(std::move(pair));
  }
  return cache;
}

bool BasisCache::contains(int length) const {
  return length >= config_.l_min && length <= config_.l_max;
}

std::shared_ptr<const spline::BasisPair> BasisCache::pair(int length) const {
  if (contains(length)) {
    return pairs_[static_cast<std::size_t>(length - config_.l_min)];
  }
  if (config_.allow_dynamic && !identity_ && length >= 2) {
    const CurveDims dims = resolve_dims(length, config_);
    return std::make_shared<const spline::BasisPair>(spline::make_basis_pair(
        length, dims.n_control, dims.degree, config_.margin, config_.rcond));
  }
  throw Error(ErrorCode::LengthOutOfRange,
              "no basis cached for length " + std::to_string(length));
}

const spline::BasisPair& BasisCache::at(int length) const {
  if (!contains(length)) {
    throw Error(ErrorCode::LengthOutOfRange,
                "no basis cached for length " + std::to_string(length));
  }
  return *pairs_[static_cast<std::size_t>(length - config_.l_min)];
}

SentenceCurve embed_to_curve(const EmbeddingSequence& e,
                             const BasisCache& cache) {
  const int length = static_cast<int>(e.values.cols());
  const auto pair = cache.pair(length);
  SentenceCurve p;
  p.points = e.values * pair->pinv;
  p.length = length;
  return p;
}

EmbeddingSequence curve_to_embed(const SentenceCurve& p,
                                 const BasisCache& cache) {
  const auto pair = cache.pair(p.length);
  if (p.points.cols() != pair->n_control) {
    throw Error(ErrorCode::ShapeMismatch,
                "curve has " + std::to_string(p.points.cols()) +
                    " control points, length " + std::to_string(p.length) +
                    " expects " + std::to_string(pair->n_control));
  }
  return EmbeddingSequence{p.points * pair->basis};
}

double reconstruction_error(int length, const ReconstructionConfig& config,
                            int trials, std::uint64_t seed) {
  if (trials < 1) {
    throw Error(ErrorCode::InvalidConfig, "trials must be >= 1");
  }
  if (length < 2) {
    throw Error(ErrorCode::LengthOutOfRange,
                "length must be >= 2, got " + std::to_string(length));
  }
  CurveConfig curve;
  curve.n_ratio = config.n_ratio;
  curve.degree = config.degree;
  curve.min_degree = config.min_degree;
  curve.margin = config.margin;
  curve.l_min = 2;
  curve.l_max = std::max(length, 2);
  const CurveDims dims = resolve_dims(length, curve);
  const spline::BasisPair pair = spline::make_basis_pair(
      length, dims.n_control, dims.degree, config.margin, config.rcond);

  // Common random numbers: every configuration at a given (seed, L) sees the
  // same noise sequences.
  Rng rng = Rng(seed).split("reconstruction").split(static_cast<std::uint64_t>(length));
  const Eigen::Index rows = static_cast<Eigen::Index>(trials) * config.dim;
  spline::Matrix e(rows, length);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < length; ++j) e(i, j) = rng.normal();
  }
  const spline::Matrix recon = (e * pair.pinv) * pair.basis;
  return (e - recon).squaredNorm() / static_cast<double>(e.size());
}

std::vector<ReconstructionRow> reconstruction_sweep(const SweepSpec& spec,
                                                    std::uint64_t seed) {
  if (spec.lengths.empty() || spec.n_ratios.empty() || spec.eta_ratios.empty()) {
    throw Error(ErrorCode::InvalidConfig, "sweep sets must be non-empty");
  }
  std::vector<ReconstructionRow> rows;
  rows.reserve(spec.lengths.size() * spec.n_ratios.size() *
               spec.eta_ratios.size());
  for (int length : spec.lengths) {
    for (double n_ratio : spec.n_ratios) {
      for (double eta_ratio : spec.eta_ratios) {
        ReconstructionConfig rc;
        rc.n_ratio = n_ratio;
        rc.degree = DegreeRatio{eta_ratio};
        rc.min_degree = spec.min_degree;
        rc.margin = spec.margin;
        rc.dim = spec.dim;
        CurveConfig cc;
        cc.n_ratio = n_ratio;
        cc.degree = rc.degree;
        cc.min_degree = spec.min_degree;
        cc.l_max = std::max(length, 2);
        const CurveDims dims = resolve_dims(length, cc);
        rows.push_back({length, n_ratio, eta_ratio, dims.n_control, dims.degree,
                        reconstruction_error(length, rc, spec.trials, seed)});
      }
    }
  }
  return rows;
}

std::string sweep_to_csv(const std::vector<ReconstructionRow>& rows) {
  std::ostringstream out;
  out << "L,n_ratio,eta_ratio,mse\n";
  for (const auto& r : rows) {
    out << r.length << ',' << format_double(r.n_ratio) << ','
        << format_double(r.eta_ratio) << ',' << format_double(r.mse) << '\n';
  }
  return out.str();
}

std::string sweep_to_json(const std::vector<ReconstructionRow>& rows) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : rows) {
    arr.push_back({{"L", r.length},
                   {"n_ratio", r.n_ratio},
                   {"eta_ratio", r.eta_ratio},
                   {"N", r.n_control},
                   {"eta", r.degree},
                   {"mse", r.mse}});
  }
  return arr.dump(2);
}

}  // namespace curvelang
