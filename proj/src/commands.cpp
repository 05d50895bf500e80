#include "curvelang/commands.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "curvelang/error.hpp"
#include "curvelang/runtime.hpp"

namespace curvelang::cli {

namespace fs = std::filesystem;
using spline::Matrix;
using spline::Vector;

namespace {

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os || !(os << text)) throw Error(ErrorCode::IoError, "cannot write " + path.string());
}

fs::path ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create " + dir + ": " + ec.message());
  return fs::path(dir);
}

std::string loss_header(model::Objective objective) {
  return objective == model::Objective::Gaussian ? "step,diffusion,anchor,total\n"
                                                 : "step,masked_ce\n";
}

std::string loss_row(const model::LossRecord& r, model::Objective objective) {
  if (objective == model::Objective::Gaussian) {
    return std::to_string(r.step) + "," + format_double(r.diffusion) + "," +
           format_double(r.anchor) + "," + format_double(r.total) + "\n";
  }
  return std::to_string(r.step) + "," + format_double(r.total) + "\n";
}

// Token ids of `corpus` re-expressed in `vocab`; every symbol must exist there.
model::Batch remap(const model::Batch& batch, const model::Vocab& from, const model::Vocab& to) {
  model::Batch out = batch;
  for (int& id : out.ids) id = to.id(from.token(id));
  return out;
}

}  // namespace

std::string format_double(double value) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, ptr);
}

data::Corpus load_corpus(const RunConfig& config) {
  const auto tokenizer = data::parse_tokenizer(config.tokenizer);
  if (config.corpus.starts_with("toy:")) {
    const auto kind = data::parse_toy_kind(config.corpus.substr(4));
    return data::ingest_text(data::toy_corpus(kind, config.toy_lines, config.toy_length, config.seed),
                             tokenizer, config.max_len, config.corpus);
  }
  return data::ingest(config.corpus, tokenizer, config.max_len);
}

// -- train ---------------------------------------------------------------------

double TrainReport::head_average(std::size_t window) const {
  const std::size_t n = std::min(window, history.size());
  if (n == 0) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += history[i].total;
  return s / static_cast<double>(n);
}

double TrainReport::tail_average(std::size_t window) const {
  const std::size_t n = std::min(window, history.size());
  if (n == 0) return 0.0;
  double s = 0.0;
  for (std::size_t i = history.size() - n; i < history.size(); ++i) s += history[i].total;
  return s / static_cast<double>(n);
}

TrainReport cmd_train(const RunConfig& config, const std::string& resume) {
  config.validate();
  configure_allocator();
  const data::Corpus corpus = load_corpus(config);
  const fs::path dir = ensure_dir(config.out);

  model::ModelConfig mc = config.model;
  int longest = 0;
  for (const auto& s : corpus.sequences) longest = std::max(longest, static_cast<int>(s.size()));
  if (longest > mc.max_length) {
    throw Error(ErrorCode::InvalidConfig, "corpus has sequences of length " + std::to_string(longest) +
                                              " above max_length " + std::to_string(mc.max_length));
  }

  std::optional<model::SclmModel> model;
  if (resume.empty()) {
    model.emplace(mc, corpus.vocab, config.seed);
  } else {
    model.emplace(model::load_checkpoint(resume));
    if (model->vocab().tokens() != corpus.vocab.tokens()) {
      throw Error(ErrorCode::ShapeMismatch, "checkpoint vocabulary differs from the corpus");
    }
  }

  TrainReport report;
  report.first_step = model->params().step() + 1;
  report.last_step = model->params().step() + config.steps;
  report.losses_csv = (dir / "losses.csv").string();
  report.checkpoint = (dir / "checkpoint.sclm").string();

  const bool append = !resume.empty() && fs::exists(report.losses_csv);
  std::ofstream csv(report.losses_csv, append ? std::ios::app : std::ios::trunc);
  if (!csv) throw Error(ErrorCode::IoError, "cannot write " + report.losses_csv);
  if (!append) csv << loss_header(mc.objective);

  const data::BatchSampler sampler(corpus, config.batch_size, config.seed);
  data::Prefetcher loader([&sampler](std::int64_t step) { return sampler.batch(step); },
                          report.first_step, report.last_step + 1, loader_threads(1));
  const Rng root = Rng(config.seed).split("train");
  report.history.reserve(static_cast<std::size_t>(config.steps));
  for (std::int64_t step = report.first_step; step <= report.last_step; ++step) {
    const model::Batch batch = loader.next();
    Rng rng = root.split(static_cast<std::uint64_t>(step));
    const model::LossRecord rec = model::train_step(*model, batch, config.adam, rng);
    report.history.push_back(rec);
    if (rec.step % config.log_interval == 0) csv << loss_row(rec, mc.objective);
  }
  csv.flush();
  if (!csv) throw Error(ErrorCode::IoError, "failed writing " + report.losses_csv);

  model::Checkpoint meta;
  meta.seed = config.seed;
  meta.extra = {{"tokenizer", config.tokenizer}, {"corpus", config.corpus}};
  model::save_checkpoint(report.checkpoint, *model, meta);
  write_file(dir / "config.txt", config.to_text());
  return report;
}

// -- reconstruct / spectrum --------------------------------------------------------

std::vector<ReconstructionRow> cmd_reconstruct(const SweepSpec& spec, std::uint64_t seed,
                                               const std::string& out) {
  const fs::path dir = ensure_dir(out);
  auto rows = reconstruction_sweep(spec, seed);
  write_file(dir / "reconstruction.csv", sweep_to_csv(rows));
  write_file(dir / "reconstruction.json", sweep_to_json(rows));
  return rows;
}

nlohmann::json spectrum_json(const spline::SpectralReport& r, const spline::BasisPair& pair) {
  auto finite_or_null = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); };
  return {{"length", pair.length},
          {"n_control", pair.n_control},
          {"degree", pair.degree},
          {"rank", pair.rank},
          {"cond", pair.cond},
          {"embedding_dim", r.embedding_dim},
          {"eigenvalues", r.eigenvalues},
          {"lambda_max", r.lambda_max},
          {"lambda_min", r.lambda_min},
          {"lambda_min_nonzero", r.lambda_min_nonzero},
          {"ratio_bound", r.ratio_bound},
          {"ratio_bound_full", finite_or_null(r.ratio_bound_full)},
          {"importance_global", r.importance_global},
          {"importance_local", r.importance_local},
          {"position_ratios", r.position_ratios},
          {"ratio", r.ratio},
          {"singular", r.singular},
          {"bound_holds", r.bound_holds},
          {"nonzero_bound_holds", r.nonzero_bound_holds}};
}

nlohmann::json cmd_spectrum(int length, const CurveConfig& curve, int dim) {
  curve.validate();
  const CurveDims dims = resolve_dims(length, curve);
  const auto pair = spline::make_basis_pair(length, dims.n_control, dims.degree, curve.margin, curve.rcond);
  return spectrum_json(spline::importance_ratio(pair.pinv, dim), pair);
}

// -- verify --------------------------------------------------------------------

namespace {

using theory::VerificationRecord;

void suite_relaxation(std::vector<VerificationRecord>& out, Rng& rng) {
  auto named = [&](VerificationRecord r, const std::string& tag) {
    r.claim += "." + tag;
    out.push_back(std::move(r));
  };
  Vector z = Vector::Unit(2, 0);
  named(theory::relaxation_posterior_check(Matrix::Identity(2, 2), z, 1.0), "two_words");
  Matrix same(3, 4);
  same.colwise() = Vector::Unit(3, 1);
  named(theory::relaxation_posterior_check(same, Vector::Unit(3, 0), 0.5), "identical");
  for (int k = 0; k < 20; ++k) {
    Matrix e(6, 9);
    for (Eigen::Index i = 0; i < e.size(); ++i) e.data()[i] = rng.normal();
    e.colwise().normalize();
    Vector zr(6);
    for (Eigen::Index i = 0; i < zr.size(); ++i) zr[i] = rng.normal();
    zr.normalize();
    named(theory::relaxation_posterior_check(e, zr, 0.2 + rng.uniform()), "random[" + std::to_string(k) + "]");
  }
  named(theory::relaxation_posterior_check(Matrix::Identity(2, 2), 1.1 * z, 1.0), "off_sphere");
}

Matrix simplex(int d) {
  Matrix centered = Matrix::Identity(d + 1, d + 1);
  centered.array() -= 1.0 / (d + 1);
  Eigen::HouseholderQR<Matrix> qr(centered);
  const Matrix q = qr.householderQ();
  Matrix e = q.leftCols(d).transpose() * centered;
  e.colwise().normalize();
  return e;
}

void suite_lemma1(std::vector<VerificationRecord>& out) {
  Matrix antipodal(2, 4);
  antipodal << 1, -1, 0, 0, 0, 0, 1, -1;
  auto r = theory::lemma1_stationarity(antipodal, 0);
  r.claim += ".antipodal";
  out.push_back(r);
  const Matrix s = simplex(4);
  for (int y = 0; y < 5; ++y) {
    auto rs = theory::lemma1_stationarity(s, y);
    rs.claim += ".simplex[" + std::to_string(y) + "]";
    out.push_back(rs);
  }
  auto ro = theory::lemma1_stationarity(Matrix::Identity(3, 3), 0);
  ro.claim += ".orthonormal";
  out.push_back(ro);
}

void suite_lemma2(std::vector<VerificationRecord>& out, Rng& rng) {
  for (int k = 0; k < 100; ++k) {
    auto r = theory::lemma2_decomposition_check(theory::random_fiber_spec(4, 2, 3, rng));
    r.claim += ".random[" + std::to_string(k) + "]";
    out.push_back(r);
  }
  auto matched = theory::random_fiber_spec(4, 2, 3, rng);
  matched.model = matched.data;
  auto rm = theory::lemma2_decomposition_check(matched);
  rm.claim += ".matched";
  out.push_back(rm);
  auto ri = theory::lemma2_decomposition_check(theory::random_fiber_spec(3, 3, 3, rng));
  ri.claim += ".injective";
  out.push_back(ri);
}

// Worst record of a batch: the failing one if any, else the largest residual.
VerificationRecord worst_of(const std::vector<VerificationRecord>& rs) {
  return *std::max_element(rs.begin(), rs.end(), [](const auto& a, const auto& b) {
    if (a.passed != b.passed) return a.passed;
    return a.residual - a.tolerance < b.residual - b.tolerance;
  });
}

void suite_lemma3(std::vector<VerificationRecord>& out, Rng& rng) {
  for (auto& r : theory::lemma3_bound_check(spline::make_basis_pair(10, 30, 8, 0.01), 4, 10,
                                            rng.next_u64())) {
    r.claim = "L10_N30_eta8." + r.claim;
    out.push_back(r);
  }
  spline::BasisPair identity;
  identity.basis = Matrix::Identity(8, 8);
  identity.pinv = identity.basis;
  for (auto& r : theory::lemma3_bound_check(identity, 1, 5, rng.next_u64())) {
    r.claim = "identity." + r.claim;
    out.push_back(r);
  }
  // Random configurations in the full-rank regime N >= L + eta.
  for (int k = 0; k < 50; ++k) {
    const int length = 2 + static_cast<int>(rng.uniform_int(59));
    const int degree = 1 + static_cast<int>(rng.uniform_int(8));
    const int n = length + degree + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(length + 1)));
    const auto records = theory::lemma3_bound_check(spline::make_basis_pair(length, n, degree, 0.01),
                                                    1 + static_cast<int>(rng.uniform_int(8)), 4,
                                                    rng.next_u64());
    auto r = worst_of(records);
    r.claim = "random[" + std::to_string(k) + "]_L" + std::to_string(length) + "_N" +
              std::to_string(n) + "_eta" + std::to_string(degree) + "." + r.claim;
    out.push_back(r);
  }
  out.push_back(theory::smooth_error_preference(spline::make_basis_pair(16, 32, 4, 0.01)));
}

}  // namespace

const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names{"lemma1", "lemma2", "lemma3", "relaxation", "all"};
  return names;
}

std::vector<theory::VerificationRecord> run_suite(const std::string& suite, std::uint64_t seed) {
  if (std::find(suite_names().begin(), suite_names().end(), suite) == suite_names().end()) {
    throw Error(ErrorCode::InvalidConfig, "unknown suite '" + suite + "'");
  }
  const Rng root(seed);
  std::vector<theory::VerificationRecord> out;
  const bool all = suite == "all";
  if (all || suite == "relaxation") {
    Rng rng = root.split("relaxation");
    suite_relaxation(out, rng);
  }
  if (all || suite == "lemma1") suite_lemma1(out);
  if (all || suite == "lemma2") {
    Rng rng = root.split("lemma2");
    suite_lemma2(out, rng);
  }
  if (all || suite == "lemma3") {
    Rng rng = root.split("lemma3");
    suite_lemma3(out, rng);
  }
  return out;
}

// -- sample ----------------------------------------------------------------------

Projection principal_projection(const Matrix& points, int k) {
  if (points.rows() < 1 || k < 1 || k > points.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "projection needs points and 1 <= k <= dim");
  }
  Projection p;
  p.mean = points.colwise().mean().transpose();
  const Matrix centered = points.rowwise() - p.mean.transpose();
  Matrix cov = centered.transpose() * centered / static_cast<double>(points.rows());
  const auto dim = points.cols();
  p.axes = Matrix::Zero(dim, k);
  for (int a = 0; a < k; ++a) {
    // Fixed, non-degenerate start so the result is reproducible.
    Vector v(dim);
    for (Eigen::Index i = 0; i < dim; ++i) v[i] = 1.0 + 0.1 * static_cast<double>(i);
    v.normalize();
    double lambda = 0.0;
    for (int it = 0; it < 1000; ++it) {
      Vector w = cov * v;
      const double norm = w.norm();
      if (norm == 0.0) break;
      w /= norm;
      const double change = (w - v).norm();
      v = w;
      lambda = norm;
      if (change < 1e-13) break;
    }
    Eigen::Index big = 0;
    v.cwiseAbs().maxCoeff(&big);
    if (v[big] < 0.0) v = -v;
    p.axes.col(a) = v;
    cov -= lambda * v * v.transpose();
  }
  p.coordinates = centered * p.axes;
  return p;
}

double projection_stress(const Matrix& points, const Matrix& projected) {
  if (points.rows() != projected.rows()) {
    throw Error(ErrorCode::ShapeMismatch, "stress needs matching point counts");
  }
  double num = 0.0;
  double den = 0.0;
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < points.rows(); ++j) {
      const double d = (points.row(i) - points.row(j)).norm();
      const double e = (projected.row(i) - projected.row(j)).norm();
      num += (d - e) * (d - e);
      den += d * d;
    }
  }
  return den > 0.0 ? std::sqrt(num / den) : 0.0;
}

Matrix trajectory_control_points(const model::SclmModel& model, const std::vector<Matrix>& trajectory) {
  std::vector<Matrix> blocks;
  Eigen::Index rows = 0;
  for (const Matrix& e : trajectory) {
    blocks.push_back(embed_to_curve(EmbeddingSequence{e}, model.cache()).points.transpose());
    rows += blocks.back().rows();
  }
  Matrix out(rows, model.embed_dim());
  Eigen::Index at = 0;
  for (const auto& b : blocks) {
    out.middleRows(at, b.rows()) = b;
    at += b.rows();
  }
  return out;
}

SampleOutput cmd_sample(const std::string& checkpoint, int length, int steps, int n,
                        std::uint64_t seed, const std::string& out) {
  model::Checkpoint meta;
  const model::SclmModel model = model::load_checkpoint(checkpoint, &meta);
  const auto tokenizer = data::parse_tokenizer(
      meta.extra.is_object() ? meta.extra.value("tokenizer", std::string("char")) : "char");
  const fs::path dir = ensure_dir(out);

  Rng rng = Rng(seed).split("sample");
  SampleOutput res;
  res.result = model::sample(model, length, steps, n, rng);
  std::string text;
  for (const auto& ids : res.result.tokens) {
    res.texts.push_back(data::detokenize(model.vocab(), ids, tokenizer));
    text += res.texts.back() + "\n";
  }
  write_file(dir / "samples.txt", text);

  for (int s = 0; s < n; ++s) {
    const auto& traj = res.result.trajectories[static_cast<std::size_t>(s)];
    write_file(dir / ("trajectory_" + std::to_string(s) + ".json"),
               model::trajectory_to_json(traj, res.result.steps).dump() + "\n");

    const Matrix points = trajectory_control_points(model, traj);
    const Projection proj = principal_projection(points, std::min<int>(2, model.embed_dim()));
    const auto per_step = points.rows() / static_cast<Eigen::Index>(traj.size());
    std::string csv = "step,point_index,pc1,pc2\n";
    for (Eigen::Index r = 0; r < points.rows(); ++r) {
      const int step = res.result.steps[static_cast<std::size_t>(r / per_step)];
      const double pc2 = proj.coordinates.cols() > 1 ? proj.coordinates(r, 1) : 0.0;
      csv += std::to_string(step) + "," + std::to_string(r % per_step) + "," +
             format_double(proj.coordinates(r, 0)) + "," + format_double(pc2) + "\n";
    }
    write_file(dir / ("projection_" + std::to_string(s) + ".csv"), csv);
  }
  return res;
}

// -- probe -----------------------------------------------------------------------

nlohmann::json cmd_probe(const std::string& checkpoint_a, const std::string& checkpoint_b,
                         const RunConfig& config) {
  const model::SclmModel a = model::load_checkpoint(checkpoint_a);
  const model::SclmModel b = model::load_checkpoint(checkpoint_b);
  const data::Corpus corpus = load_corpus(config);
  const data::BatchSampler sampler(corpus, 1, config.seed);
  const model::Batch eval = sampler.eval_batch(config.eval_size);
  theory::ProbeConfig probe = config.probe;
  probe.seed = config.seed;

  auto run = [&](const model::SclmModel& m, const std::string& path) {
    const auto r = theory::logit_correlation_probe(m, remap(eval, corpus.vocab, m.vocab()), probe);
    nlohmann::json matrix = nlohmann::json::array();
    for (Eigen::Index i = 0; i < r.dcor.rows(); ++i) {
      std::vector<double> row(r.dcor.row(i).begin(), r.dcor.row(i).end());
      matrix.push_back(row);
    }
    return std::pair{r.mean_off_diagonal,
                     nlohmann::json{{"checkpoint", path},
                                    {"identity_basis", m.config().identity_basis},
                                    {"mean_off_diagonal", r.mean_off_diagonal},
                                    {"dcor", matrix}}};
  };
  const auto [mean_a, json_a] = run(a, checkpoint_a);
  const auto [mean_b, json_b] = run(b, checkpoint_b);
  return {{"a", json_a},
          {"b", json_b},
          {"difference", mean_a - mean_b},
          {"eval_sequences", eval.n_seq},
          {"length", eval.length},
          {"n_noise", probe.n_noise},
          {"dropout_p", probe.dropout_p},
          {"noise_scale", probe.noise_scale},
          {"seed", probe.seed}};
}

}  // namespace curvelang::cli
