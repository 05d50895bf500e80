#include <doctest.h>

#include <cmath>
#include <numbers>

#include "curvelang/error.hpp"
#include "curvelang/theory.hpp"

using namespace curvelang;
using namespace curvelang::theory;

namespace {

Matrix normal_matrix(Rng& rng, int rows, int cols) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

// d + 1 unit vectors with pairwise inner product -1/d: center the standard
// basis of R^{d+1} and express it in an orthonormal basis of the sum-zero plane.
Matrix regular_simplex(int d) {
  Matrix centered = Matrix::Identity(d + 1, d + 1);
  centered.array() -= 1.0 / (d + 1);
  Eigen::HouseholderQR<Matrix> qr(centered);
  const Matrix q = qr.householderQ();
  Matrix out = q.leftCols(d).transpose() * centered;
  for (int k = 0; k <= d; ++k) out.col(k).normalize();
  return out;
}

model::ModelConfig probe_config(bool identity) {
  model::ModelConfig c;
  c.identity_basis = identity;
  c.embed_dim = 6;
  c.max_length = 8;
  c.backbone.d_model = 8;
  c.backbone.d_ff = 16;
  c.backbone.time_dim = 4;
  c.diffusion_steps = 20;
  return c;
}

}  // namespace

TEST_CASE("relaxation posterior on two orthogonal words") {
  Matrix e = Matrix::Identity(2, 2);
  Vector z(2);
  z << 1.0, 0.0;
  const auto r = relaxation_posterior_check(e, z, 1.0);
  // Hand Bayes: exp(0) / (exp(0) + exp(-1)).
  const double expected = 1.0 / (1.0 + std::exp(-1.0));
  CHECK(r.lhs == doctest::Approx(expected).epsilon(1e-14));
  CHECK(r.rhs == doctest::Approx(expected).epsilon(1e-14));
  CHECK(std::abs(r.residual) < 1e-12);
  CHECK(r.asserted);
  CHECK(r.passed);
}

TEST_CASE("relaxation with identical embeddings is uniform") {
  Matrix e(3, 4);
  for (int k = 0; k < 4; ++k) e.col(k) = Vector::Unit(3, 1);
  Vector z = Vector::Unit(3, 0);
  const auto r = relaxation_posterior_check(e, z, 0.5);
  CHECK(r.lhs == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(r.rhs == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(r.passed);
}

TEST_CASE("relaxation off the sphere is reported, not asserted") {
  Matrix e = Matrix::Identity(2, 2);
  Vector z(2);
  z << 1.1, 0.0;
  const auto r = relaxation_posterior_check(e, z, 1.0);
  CHECK_FALSE(r.asserted);
  CHECK(r.residual > 0.0);
  CHECK(all_passed({r}));

  Matrix bad = 2.0 * Matrix::Identity(2, 2);
  CHECK_THROWS_AS(relaxation_posterior_check(bad, Vector::Unit(2, 0), 1.0), Error);
}

TEST_CASE("relaxation over random unit vocabularies") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Matrix e = normal_matrix(rng, 5, 7);
    e.colwise().normalize();
    Vector z = normal_matrix(rng, 5, 1);
    z.normalize();
    const auto r = relaxation_posterior_check(e, z, 0.1 + rng.uniform());
    CHECK(r.asserted);
    CHECK(std::abs(r.residual) < 1e-12);
  }
}

TEST_CASE("lemma1 on antipodal and simplex vocabularies") {
  Matrix antipodal(2, 4);
  antipodal << 1, -1, 0, 0, 0, 0, 1, -1;
  const auto a = lemma1_stationarity(antipodal, 0);
  CHECK(a.asserted);
  CHECK(a.lhs < 1e-12);
  CHECK(a.passed);

  const Matrix simplex = regular_simplex(4);
  for (int i = 0; i < 5; ++i) {
    for (int j = i + 1; j < 5; ++j) {
      REQUIRE(simplex.col(i).dot(simplex.col(j)) == doctest::Approx(-0.25).epsilon(1e-12));
    }
  }
  for (int y = 0; y < 5; ++y) {
    const auto r = lemma1_stationarity(simplex, y);
    CHECK(r.asserted);
    CHECK(r.lhs < 1e-10);
  }
}

TEST_CASE("lemma1 outside local isotropy") {
  const auto r = lemma1_stationarity(Matrix::Identity(3, 3), 0);
  CHECK_FALSE(r.asserted);
  CHECK(r.lhs > 0.0);
  // Tangent gradient is p_2 e_2 + p_3 e_3 with p_k = 1 / (e + 2).
  CHECK(r.lhs == doctest::Approx(std::sqrt(2.0) / (std::exp(1.0) + 2.0)).epsilon(1e-12));
  CHECK(all_passed({r}));
  CHECK_THROWS_AS(lemma1_stationarity(2.0 * Matrix::Identity(2, 2), 0), Error);
}

TEST_CASE("lemma2 matched model has no KL term") {
  Rng rng(5);
  ToyFiberSpec spec = random_fiber_spec(4, 2, 3, rng);
  spec.model = spec.data;
  const auto t = fiber_terms(spec);
  CHECK(std::abs(t.expected_kl) < 1e-15);
  CHECK(lemma2_decomposition_check(spec).passed);
}

TEST_CASE("lemma2 on a hand-computed instance") {
  // One condition, curves {0,1} -> sentence 0, curve 2 -> sentence 1.
  ToyFiberSpec spec;
  spec.n_sentences = 2;
  spec.fiber_of = {0, 0, 1};
  spec.data = Matrix(1, 3);
  spec.data << 0.5, 0.25, 0.25;
  spec.model = Matrix(1, 3);
  spec.model << 0.25, 0.25, 0.5;
  const auto t = fiber_terms(spec);
  CHECK(t.ce_sentence == doctest::Approx(-0.75 * std::log(0.5) - 0.25 * std::log(0.5)));
  CHECK(t.ce_curve ==
        doctest::Approx(-0.5 * std::log(0.25) - 0.25 * std::log(0.25) - 0.25 * std::log(0.5)));
  // Fiber 0: data posterior (2/3, 1/3) against model posterior (1/2, 1/2).
  const double kl = (2.0 / 3) * std::log(4.0 / 3) + (1.0 / 3) * std::log(2.0 / 3);
  CHECK(t.expected_kl == doctest::Approx(0.75 * kl));
  const double h = -(2.0 / 3) * std::log(2.0 / 3) - (1.0 / 3) * std::log(1.0 / 3);
  CHECK(t.neg_entropy_p_given_y == doctest::Approx(-0.75 * h));
  CHECK(lemma2_decomposition_check(spec).passed);
}

TEST_CASE("lemma2 over random tables") {
  Rng rng(11);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto r = lemma2_decomposition_check(random_fiber_spec(4, 2, 3, rng));
    worst = std::max(worst, std::abs(r.residual));
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("lemma2 is indifferent to where the data mass sits in a fiber") {
  Rng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    ToyFiberSpec spec = random_fiber_spec(6, 3, 2, rng);
    // Move every fiber's data mass onto its first element.
    for (Eigen::Index x = 0; x < spec.data.rows(); ++x) {
      for (int y = 0; y < spec.n_sentences; ++y) {
        double mass = 0.0;
        int first = -1;
        for (int p = 0; p < spec.n_curves(); ++p) {
          if (spec.fiber_of[static_cast<std::size_t>(p)] != y) continue;
          mass += spec.data(x, p);
          spec.data(x, p) = 0.0;
          if (first < 0) first = p;
        }
        spec.data(x, first) = mass;
      }
    }
    CHECK(std::abs(lemma2_decomposition_check(spec).residual) < 1e-12);
  }
}

TEST_CASE("lemma2 with an injective map") {
  Rng rng(13);
  ToyFiberSpec spec = random_fiber_spec(3, 3, 2, rng);
  const auto t = fiber_terms(spec);
  CHECK(std::abs(t.expected_kl) < 1e-15);
  CHECK(std::abs(t.neg_entropy_p_given_y) < 1e-15);
  CHECK(t.ce_sentence == doctest::Approx(t.ce_curve).epsilon(1e-14));
}

TEST_CASE("lemma2 rejects degenerate fibers") {
  ToyFiberSpec spec;
  spec.n_sentences = 2;
  spec.fiber_of = {0, 1};
  spec.data = Matrix(1, 2);
  spec.data << 0.5, 0.5;
  spec.model = Matrix(1, 2);
  spec.model << 1.0, 0.0;
  CHECK_THROWS_AS(fiber_terms(spec), Error);
  spec.model << 0.7, 0.2;
  CHECK_THROWS_AS(fiber_terms(spec), Error);
}

TEST_CASE("lemma3 per-position bound and Rayleigh sandwich") {
  const auto pair = spline::make_basis_pair(10, 30, 8, 0.01);
  const auto records = lemma3_bound_check(pair, 4, 20, 1);
  CHECK(records.size() == 10 + 40);
  for (const auto& r : records) CHECK_MESSAGE(r.passed, r.claim);

  spline::BasisPair identity;
  identity.basis = Matrix::Identity(6, 6);
  identity.pinv = Matrix::Identity(6, 6);
  for (const auto& r : lemma3_bound_check(identity, 1, 5, 2)) {
    CHECK(r.passed);
    if (r.claim.starts_with("lemma3.ratio")) {
      CHECK(r.lhs == 1.0);
      CHECK(r.rhs == 1.0);
    }
  }
}

TEST_CASE("lemma3 over random full-rank configurations") {
  Rng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const int length = 2 + static_cast<int>(rng.uniform_int(30));
    const int degree = 1 + static_cast<int>(rng.uniform_int(6));
    const int n = length + degree + static_cast<int>(rng.uniform_int(20));
    const auto pair = spline::make_basis_pair(length, n, degree, 0.01);
    CHECK(all_passed(lemma3_bound_check(pair, 3, 5, rng.next_u64())));
  }
}

TEST_CASE("smooth against alternating error importance") {
  const auto pair = spline::make_basis_pair(16, 32, 4, 0.01);
  const auto r = smooth_error_preference(pair);
  CHECK_FALSE(r.asserted);
  // Pinned by direct computation: the alternating row sits near the top
  // eigenvector of G and outweighs the smooth one at this configuration.
  CHECK(r.lhs == doctest::Approx(3.09037).epsilon(1e-5));
  CHECK(r.rhs == doctest::Approx(1.91931).epsilon(1e-5));
  CHECK_FALSE(r.passed);
  const auto report = spline::importance_ratio(pair.pinv, 1);
  CHECK(r.lhs <= report.lambda_max + 1e-12);
  CHECK(r.rhs >= report.lambda_min - 1e-12);
}

TEST_CASE("distance correlation basics") {
  Rng rng(8);
  const Matrix x = normal_matrix(rng, 60, 3);
  CHECK(distance_correlation(x, x) == doctest::Approx(1.0).epsilon(1e-9));
  Matrix shifted = 3.0 * x;
  shifted.rowwise() += Eigen::RowVector3d(1.0, -2.0, 5.0);
  CHECK(distance_correlation(x, shifted) == doctest::Approx(1.0).epsilon(1e-9));

  const Matrix y = normal_matrix(rng, 60, 2);
  CHECK(std::abs(distance_correlation(x, y) - distance_correlation(y, x)) < 1e-12);
  Matrix y_shift = y;
  y_shift.rowwise() += Eigen::RowVector2d(10.0, -4.0);
  CHECK(std::abs(distance_correlation(x, y) - distance_correlation(x, y_shift)) < 1e-12);

  CHECK(distance_correlation(x, Matrix::Zero(60, 2)) == 0.0);
  CHECK_THROWS_AS(distance_correlation(x.topRows(1), y.topRows(1)), Error);
  CHECK_THROWS_AS(distance_correlation(x, y.topRows(10)), Error);
}

TEST_CASE("distance correlation of independent samples stays small") {
  Rng rng(9);
  const Matrix x = normal_matrix(rng, 500, 4);
  const Matrix y = normal_matrix(rng, 500, 4);
  // The V-statistic has a positive floor under independence: over 100
  // simulated pairs at this size it averaged 0.168 with maximum 0.188.
  const double v = distance_correlation(x, y);
  CHECK(v < 0.2);
  const Matrix xl = normal_matrix(rng, 2000, 4);
  const Matrix yl = normal_matrix(rng, 2000, 4);
  CHECK(distance_correlation(xl, yl) < v);
}

TEST_CASE("logit probe") {
  const std::vector<std::string> symbols{"a", "b", "c"};
  const auto vocab = model::Vocab::from_symbols(symbols);
  const model::SclmModel m(probe_config(false), vocab, 4);
  model::Batch batch{2, 5, {2, 3, 4, 2, 3, 3, 4, 2, 3, 4}};

  ProbeConfig quiet{.n_noise = 10, .dropout_p = 0.0, .noise_scale = 0.0, .step = 0, .seed = 1};
  const auto zero = logit_correlation_probe(m, batch, quiet);
  CHECK(zero.dcor.cwiseAbs().maxCoeff() == 0.0);
  CHECK(zero.mean_off_diagonal == 0.0);

  ProbeConfig noisy{.n_noise = 40, .dropout_p = 0.1, .noise_scale = 0.1, .step = 0, .seed = 1};
  const auto r = logit_correlation_probe(m, batch, noisy);
  CHECK(r.dcor.rows() == 5);
  for (int i = 0; i < 5; ++i) CHECK(r.dcor(i, i) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK((r.dcor - r.dcor.transpose()).cwiseAbs().maxCoeff() == 0.0);
  CHECK(r.mean_off_diagonal > 0.0);
  CHECK(r.mean_off_diagonal < 1.0);

  const auto again = logit_correlation_probe(m, batch, noisy);
  CHECK(again.dcor == r.dcor);

  const model::SclmModel twin(probe_config(true), vocab, 4);
  CHECK(logit_correlation_probe(twin, batch, noisy).dcor.rows() == 5);

  model::Batch ragged{2, 5, {2, 3}};
  CHECK_THROWS_AS(logit_correlation_probe(m, ragged, noisy), Error);
}

TEST_CASE("record export") {
  std::vector<VerificationRecord> rs{equality_record("a", 1.0, 1.0, 0.0),
                                     upper_bound_record("b", 2.0, 1.0, 0.5)};
  CHECK_FALSE(all_passed(rs));
  const auto j = to_json(rs);
  CHECK(j.size() == 2);
  CHECK(j[1]["residual"] == 1.0);
  CHECK(j[1]["passed"] == false);
  const std::string table = format_table(rs);
  CHECK(table.find("FAIL") != std::string::npos);
  CHECK(table.find("claim") == 0);
}
