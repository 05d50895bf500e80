#include "curvelang/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "curvelang/error.hpp"

namespace curvelang::model {

using ad::Tape;
using ad::Tensor;

// -- Vocab --------------------------------------------------------------------

Vocab Vocab::from_symbols(std::span<const std::string> symbols) {
  Vocab v;
  for (const std::string& t : {std::string("<pad>"), std::string("<mask>")}) {
    v.index_.emplace(t, v.size());
    v.tokens_.push_back(t);
  }
  for (const auto& s : symbols) {
    if (v.index_.contains(s)) {
      throw Error(ErrorCode::InvalidConfig, "duplicate vocabulary entry '" + s + "'");
    }
    v.index_.emplace(s, v.size());
    v.tokens_.push_back(s);
  }
  return v;
}

int Vocab::id(const std::string& token) const {
  auto it = index_.find(token);
  if (it == index_.end()) {
    throw Error(ErrorCode::OutOfRange, "token '" + token + "' not in vocabulary");
  }
  return it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || id >= size()) {
    throw Error(ErrorCode::OutOfRange, "token id " + std::to_string(id) + " out of range");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

// -- NoiseSchedule ------------------------------------------------------------

std::string to_string(ScheduleKind kind) {
  return kind == ScheduleKind::Linear ? "linear" : "sqrt";
}

ScheduleKind parse_schedule_kind(const std::string& text) {
  if (text == "linear") return ScheduleKind::Linear;
  if (text == "sqrt") return ScheduleKind::Sqrt;
  throw Error(ErrorCode::InvalidConfig, "unknown schedule '" + text + "'");
}

NoiseSchedule NoiseSchedule::build(int steps, ScheduleKind kind) {
  if (steps < 1) throw Error(ErrorCode::InvalidConfig, "schedule needs at least one step");
  NoiseSchedule s;
  s.steps = steps;
  s.kind = kind;
  s.alpha_bars.resize(static_cast<std::size_t>(steps) + 1);
  s.alphas.resize(static_cast<std::size_t>(steps) + 1);
  s.alpha_bars[0] = 1.0;
  s.alphas[0] = 1.0;
  for (int t = 1; t <= steps; ++t) {
    const double frac = static_cast<double>(t) / steps;
    double abar = kind == ScheduleKind::Linear ? 1.0 - frac : 1.0 - std::sqrt(frac + 1e-4);
    abar = std::max(abar, 0.0);
    s.alpha_bars[static_cast<std::size_t>(t)] = abar;
    const double prev = s.alpha_bars[static_cast<std::size_t>(t) - 1];
    s.alphas[static_cast<std::size_t>(t)] = prev > 0.0 ? abar / prev : 0.0;
  }
  return s;
}

double NoiseSchedule::alpha_bar(int t) const {
  if (t < 0 || t > steps) {
    throw Error(ErrorCode::StepOutOfRange,
                "step " + std::to_string(t) + " outside [0, " + std::to_string(steps) + "]");
  }
  return alpha_bars[static_cast<std::size_t>(t)];
}

double NoiseSchedule::alpha(int t) const {
  alpha_bar(t);
  return alphas[static_cast<std::size_t>(t)];
}

double NoiseSchedule::mask_weight(int t) const {
  if (t < 1 || t > steps) {
    throw Error(ErrorCode::StepOutOfRange, "mask weight needs 1 <= t <= T");
  }
  const double cur = alpha_bar(t);
  const double prev = alpha_bar(t - 1);
  return steps * (prev - cur) / (1.0 - cur);
}

// -- config -------------------------------------------------------------------

std::string to_string(Objective objective) {
  return objective == Objective::Gaussian ? "gaussian" : "masked";
}

Objective parse_objective(const std::string& text) {
  if (text == "gaussian") return Objective::Gaussian;
  if (text == "masked") return Objective::Masked;
  throw Error(ErrorCode::InvalidConfig, "unknown objective '" + text + "'");
}

void BackboneConfig::validate() const {
  if (layers < 0 || heads < 1 || d_model < 1 || d_ff < 1 || time_dim < 2 || time_dim % 2 != 0) {
    throw Error(ErrorCode::InvalidConfig, "invalid backbone dimensions");
  }
  if (d_model % heads != 0) {
    throw Error(ErrorCode::InvalidConfig, "d_model " + std::to_string(d_model) +
                                              " not divisible by heads " + std::to_string(heads));
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) {
    throw Error(ErrorCode::InvalidConfig, "dropout must lie in [0, 1)");
  }
}

void ModelConfig::validate() const {
  backbone.validate();
  curve.validate();
  if (embed_dim < 1) throw Error(ErrorCode::InvalidConfig, "embed_dim must be positive");
  if (max_length < 2) throw Error(ErrorCode::InvalidConfig, "max_length must be >= 2");
  if (diffusion_steps < 1) throw Error(ErrorCode::InvalidConfig, "diffusion_steps must be >= 1");
  if (scorer_hidden < 1) throw Error(ErrorCode::InvalidConfig, "scorer_hidden must be positive");
  if (anchor_weight < 0.0) throw Error(ErrorCode::InvalidConfig, "anchor_weight must be >= 0");
}

nlohmann::json to_json(const ModelConfig& c) {
  nlohmann::json curve = {
      {"n_ratio", c.curve.n_ratio},   {"min_degree", c.curve.min_degree},
      {"k_curves", c.curve.k_curves}, {"margin", c.curve.margin},
  };
  if (const auto* r = std::get_if<DegreeRatio>(&c.curve.degree)) {
    curve["degree_ratio"] = r->value;
  } else {
    curve["degree_fixed"] = std::get<DegreeFixed>(c.curve.degree).value;
  }
  if (c.curve.rcond) curve["rcond"] = *c.curve.rcond;
  return {
      {"objective", to_string(c.objective)},
      {"identity_basis", c.identity_basis},
      {"embed_dim", c.embed_dim},
      {"unit_norm", c.unit_norm},
      {"separate_output", c.separate_output},
      {"anchor_weight", c.anchor_weight},
      {"max_length", c.max_length},
      {"curve", curve},
      {"k_head", c.k_head},
      {"scorer_hidden", c.scorer_hidden},
      {"backbone",
       {{"layers", c.backbone.layers},
        {"heads", c.backbone.heads},
        {"d_model", c.backbone.d_model},
        {"d_ff", c.backbone.d_ff},
        {"dropout", c.backbone.dropout},
        {"time_dim", c.backbone.time_dim}}},
      {"diffusion_steps", c.diffusion_steps},
      {"schedule", to_string(c.schedule)},
  };
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.objective = parse_objective(j.at("objective").get<std::string>());
  c.identity_basis = j.at("identity_basis").get<bool>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.unit_norm = j.at("unit_norm").get<bool>();
  c.separate_output = j.at("separate_output").get<bool>();
  c.anchor_weight = j.at("anchor_weight").get<double>();
  c.max_length = j.at("max_length").get<int>();
  const auto& cv = j.at("curve");
  c.curve.n_ratio = cv.at("n_ratio").get<double>();
  c.curve.min_degree = cv.at("min_degree").get<int>();
  c.curve.k_curves = cv.at("k_curves").get<int>();
  c.curve.margin = cv.at("margin").get<double>();
  if (cv.contains("degree_fixed")) {
    c.curve.degree = DegreeFixed{cv.at("degree_fixed").get<int>()};
  } else {
    c.curve.degree = DegreeRatio{cv.at("degree_ratio").get<double>()};
  }
  if (cv.contains("rcond")) c.curve.rcond = cv.at("rcond").get<double>();
  c.k_head = j.at("k_head").get<bool>();
  c.scorer_hidden = j.at("scorer_hidden").get<int>();
  const auto& bb = j.at("backbone");
  c.backbone.layers = bb.at("layers").get<int>();
  c.backbone.heads = bb.at("heads").get<int>();
  c.backbone.d_model = bb.at("d_model").get<int>();
  c.backbone.d_ff = bb.at("d_ff").get<int>();
  c.backbone.dropout = bb.at("dropout").get<double>();
  c.backbone.time_dim = bb.at("time_dim").get<int>();
  c.diffusion_steps = j.at("diffusion_steps").get<int>();
  c.schedule = parse_schedule_kind(j.at("schedule").get<std::string>());
  return c;
}

// -- SclmModel ----------------------------------------------------------------

namespace {

Tensor normal_tensor(Rng& rng, int rows, int cols, double std) {
  std::vector<double> v(static_cast<std::size_t>(rows) * cols);
  for (auto& x : v) x = std * rng.normal();
  return Tensor::from(rows, cols, std::move(v));
}

Tensor constant_tensor(int rows, int cols, double value) {
  return Tensor::from(rows, cols, std::vector<double>(static_cast<std::size_t>(rows) * cols, value));
}

// Column-major N x L storage read row-major is the L x N transpose.
Tensor transposed(const Matrix& m) {
  return Tensor::from(static_cast<int>(m.cols()), static_cast<int>(m.rows()),
                      std::vector<double>(m.data(), m.data() + m.size()));
}

Tensor time_features(std::span<const int> steps, int dim) {
  const int half = dim / 2;
  Tensor f = Tensor::zeros(static_cast<int>(steps.size()), dim);
  for (std::size_t i = 0; i < steps.size(); ++i) {
    for (int j = 0; j < half; ++j) {
      const double w = std::exp(-std::log(10000.0) * j / half);
      f.at(static_cast<int>(i), j) = std::sin(steps[i] * w);
      f.at(static_cast<int>(i), half + j) = std::cos(steps[i] * w);
    }
  }
  return f;
}

Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b) {
  return ad::add_bias(tape, ad::matmul(tape, x, w), b);
}

std::vector<int> argmax_rows(const Tensor& probs) {
  std::vector<int> out(static_cast<std::size_t>(probs.rows()));
  for (int r = 0; r < probs.rows(); ++r) {
    int best = 0;
    for (int k = 1; k < probs.cols(); ++k) {
      if (probs.at(r, k) > probs.at(r, best)) best = k;
    }
    out[static_cast<std::size_t>(r)] = best;
  }
  return out;
}

}  // namespace

SclmModel::SclmModel(ModelConfig config, Vocab vocab, std::uint64_t init_seed)
    : config_(std::move(config)), vocab_(std::move(vocab)) {
  config_.validate();
  if (vocab_.size() < 3) throw Error(ErrorCode::EmptyCorpus, "vocabulary has no symbols");
  schedule_ = NoiseSchedule::build(config_.diffusion_steps, config_.schedule);
  if (config_.identity_basis) {
    cache_ = BasisCache::identity(2, config_.max_length);
  } else {
    CurveConfig cc = config_.curve;
    cc.l_min = 2;
    cc.l_max = config_.max_length;
    cache_ = BasisCache::build(cc);
  }
  init_params(init_seed);
}

int SclmModel::curve_length(int length) const {
  return cache_.at(length).n_control;
}

void SclmModel::init_params(std::uint64_t seed) {
  Rng root(seed);
  const int d = config_.embed_dim;
  const auto& bb = config_.backbone;
  const int dm = bb.d_model;
  auto glorot = [&](const std::string& name, int fan_in, int fan_out) {
    Rng r = root.split(name);
    params_.add(name, normal_tensor(r, fan_in, fan_out, 1.0 / std::sqrt(static_cast<double>(fan_in))));
  };
  auto zeros = [&](const std::string& name, int rows, int cols) {
    params_.add(name, Tensor::zeros(rows, cols));
  };
  auto ones = [&](const std::string& name, int cols) {
    params_.add(name, constant_tensor(1, cols, 1.0));
  };
  auto small = [&](const std::string& name, int rows, int cols, double std) {
    Rng r = root.split(name);
    params_.add(name, normal_tensor(r, rows, cols, std));
  };

  {
    Rng r = root.split("embedding");
    Tensor e = normal_tensor(r, vocab_.size(), d, 1.0);
    for (int i = 0; i < e.rows(); ++i) e.mat().row(i).normalize();
    params_.add("embedding", e);
  }
  if (config_.separate_output) {
    Rng r = root.split("output_embedding");
    Tensor e = normal_tensor(r, vocab_.size(), d, 1.0);
    for (int i = 0; i < e.rows(); ++i) e.mat().row(i).normalize();
    params_.add("output_embedding", e);
  }
  int positions = 1;
  for (int length = 2; length <= config_.max_length; ++length) {
    positions = std::max(positions, curve_length(length) + 1);
  }
  glorot("in_proj.w", d, dm);
  zeros("in_proj.b", 1, dm);
  small("positions", positions, dm, 0.02);
  glorot("time.w1", bb.time_dim, dm);
  zeros("time.b1", 1, dm);
  glorot("time.w2", dm, dm);
  zeros("time.b2", 1, dm);
  for (int l = 0; l < bb.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    ones(p + "ln1.g", dm);
    zeros(p + "ln1.b", 1, dm);
    for (const char* w : {"q", "k", "v", "o"}) {
      glorot(p + "w" + w, dm, dm);
      zeros(p + "b" + w, 1, dm);
    }
    ones(p + "ln2.g", dm);
    zeros(p + "ln2.b", 1, dm);
    glorot(p + "ff1.w", dm, bb.d_ff);
    zeros(p + "ff1.b", 1, bb.d_ff);
    glorot(p + "ff2.w", bb.d_ff, dm);
    zeros(p + "ff2.b", 1, dm);
  }
  ones("final_ln.g", dm);
  zeros("final_ln.b", 1, dm);
  small("out_proj.w", dm, d, 0.02);
  zeros("out_proj.b", 1, d);
  if (config_.has_k_head()) {
    small("curve_tokens", config_.curve.k_curves, dm, 0.5);
    glorot("scorer.w1", dm, config_.scorer_hidden);
    zeros("scorer.b1", 1, config_.scorer_hidden);
    glorot("scorer.w2", config_.scorer_hidden, 1);
    zeros("scorer.b2", 1, 1);
  }
}

Tensor SclmModel::embed(Tape& tape, std::span<const int> ids) const {
  return ad::embedding_lookup(tape, param("embedding"), ids);
}

Tensor SclmModel::to_curve(Tape& tape, const Tensor& e, int n_seq, int length) const {
  if (cache_.is_identity()) return e;
  return ad::block_left_map(tape, transposed(cache_.at(length).pinv), e, n_seq);
}

Tensor SclmModel::to_embed(Tape& tape, const Tensor& p, int n_seq, int length) const {
  if (cache_.is_identity()) return p;
  return ad::block_left_map(tape, transposed(cache_.at(length).basis), p, n_seq);
}

SclmModel::Passes SclmModel::backbone(Tape& tape, const Tensor& x, int n_seq, int seq_len,
                                      std::span<const int> steps, Rng& rng,
                                      bool training) const {
  const auto& bb = config_.backbone;
  const bool with_head = config_.has_k_head();
  const int k = with_head ? config_.curve.k_curves : 1;
  const int blocks = n_seq * k;
  const int block_len = with_head ? seq_len + 1 : seq_len;
  const double p_drop = training ? bb.dropout : 0.0;

  Tensor h = linear(tape, x, param("in_proj.w"), param("in_proj.b"));
  if (with_head) {
    std::vector<int> idx;
    idx.reserve(static_cast<std::size_t>(blocks) * block_len);
    for (int s = 0; s < n_seq; ++s) {
      for (int c = 0; c < k; ++c) {
        idx.push_back(n_seq * seq_len + c);
        for (int i = 0; i < seq_len; ++i) idx.push_back(s * seq_len + i);
      }
    }
    h = ad::gather_rows(tape, ad::concat(tape, {h, param("curve_tokens")}, 0), idx);
  }

  std::vector<int> pos_idx, seq_idx;
  for (int b = 0; b < blocks; ++b) {
    for (int i = 0; i < block_len; ++i) {
      pos_idx.push_back(i);
      seq_idx.push_back(b / k);
    }
  }
  h = ad::add(tape, h, ad::gather_rows(tape, param("positions"), pos_idx));
  Tensor temb = linear(tape, time_features(steps, bb.time_dim), param("time.w1"), param("time.b1"));
  temb = linear(tape, ad::gelu(tape, temb), param("time.w2"), param("time.b2"));
  h = ad::add(tape, h, ad::gather_rows(tape, temb, seq_idx));

  for (int l = 0; l < bb.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    Tensor a = ad::layer_norm(tape, h, param(p + "ln1.g"), param(p + "ln1.b"));
    Tensor q = linear(tape, a, param(p + "wq"), param(p + "bq"));
    Tensor kk = linear(tape, a, param(p + "wk"), param(p + "bk"));
    Tensor v = linear(tape, a, param(p + "wv"), param(p + "bv"));
    Tensor att = ad::attention(tape, q, kk, v, blocks, block_len, bb.heads);
    att = linear(tape, att, param(p + "wo"), param(p + "bo"));
    h = ad::add(tape, h, ad::dropout(tape, att, p_drop, rng, training));
    Tensor m = ad::layer_norm(tape, h, param(p + "ln2.g"), param(p + "ln2.b"));
    m = ad::gelu(tape, linear(tape, m, param(p + "ff1.w"), param(p + "ff1.b")));
    m = linear(tape, m, param(p + "ff2.w"), param(p + "ff2.b"));
    h = ad::add(tape, h, ad::dropout(tape, m, p_drop, rng, training));
  }
  h = ad::layer_norm(tape, h, param("final_ln.g"), param("final_ln.b"));

  if (!with_head) return {h, Tensor()};
  std::vector<int> token_rows, content_rows;
  for (int b = 0; b < blocks; ++b) {
    token_rows.push_back(b * block_len);
    for (int i = 1; i < block_len; ++i) content_rows.push_back(b * block_len + i);
  }
  return {ad::gather_rows(tape, h, content_rows), ad::gather_rows(tape, h, token_rows)};
}

Denoised SclmModel::denoise(Tape& tape, const Tensor& curve_in, int n_seq, int length,
                            std::span<const int> steps, Rng& rng, bool training,
                            CombineMode mode) const {
  const int s_len = curve_length(length);
  if (curve_in.rows() != n_seq * s_len || curve_in.cols() != config_.embed_dim) {
    throw Error(ErrorCode::ShapeMismatch,
                "denoise: expected " + std::to_string(n_seq * s_len) + "x" +
                    std::to_string(config_.embed_dim) + " curve input, got " +
                    std::to_string(curve_in.rows()) + "x" + std::to_string(curve_in.cols()));
  }
  if (static_cast<int>(steps.size()) != n_seq) {
    throw Error(ErrorCode::ShapeMismatch, "denoise: one diffusion step per sequence");
  }
  for (int t : steps) schedule_.alpha_bar(t);

  Passes passes = backbone(tape, curve_in, n_seq, s_len, steps, rng, training);
  Denoised out;
  if (!config_.has_k_head()) {
    out.hidden = passes.hidden;
    out.curve = linear(tape, passes.hidden, param("out_proj.w"), param("out_proj.b"));
    out.curves = {out.curve};
    out.embed = to_embed(tape, out.curve, n_seq, length);
    return out;
  }

  const int k = config_.curve.k_curves;
  Tensor all = linear(tape, passes.hidden, param("out_proj.w"), param("out_proj.b"));
  auto block_rows = [&](auto pick) {
    std::vector<int> rows;
    for (int s = 0; s < n_seq; ++s) {
      const int c = pick(s);
      for (int i = 0; i < s_len; ++i) rows.push_back((s * k + c) * s_len + i);
    }
    return rows;
  };
  for (int c = 0; c < k; ++c) {
    out.curves.push_back(ad::gather_rows(tape, all, block_rows([c](int) { return c; })));
  }
  Tensor scores = linear(tape, passes.curve_hidden, param("scorer.w1"), param("scorer.b1"));
  scores = linear(tape, ad::gelu(tape, scores), param("scorer.w2"), param("scorer.b2"));
  out.probs = ad::softmax(tape, ad::reshape(tape, scores, n_seq, k), 1);

  const std::vector<int> best = argmax_rows(out.probs);
  auto chosen = block_rows([&](int s) { return best[static_cast<std::size_t>(s)]; });
  out.hidden = ad::gather_rows(tape, passes.hidden, chosen);
  if (mode == CombineMode::Infer) {
    out.curve = ad::gather_rows(tape, all, chosen);
  } else {
    Tensor flat = ad::reshape(tape, out.probs, n_seq * k, 1);
    for (int c = 0; c < k; ++c) {
      std::vector<int> rows;
      for (int s = 0; s < n_seq; ++s) {
        for (int i = 0; i < s_len; ++i) rows.push_back(s * k + c);
      }
      Tensor term = ad::row_scale(tape, out.curves[static_cast<std::size_t>(c)],
                                  ad::gather_rows(tape, flat, rows));
      out.curve = c == 0 ? term : ad::add(tape, out.curve, term);
    }
  }
  out.embed = to_embed(tape, out.curve, n_seq, length);
  return out;
}

Tensor SclmModel::head(Tape& tape, const Tensor& hidden, int n_seq, int length) const {
  Tensor p = linear(tape, hidden, param("out_proj.w"), param("out_proj.b"));
  return to_embed(tape, p, n_seq, length);
}

Tensor SclmModel::logits(Tape& tape, const Tensor& embed) const {
  const Tensor& w = config_.separate_output ? params_.get("output_embedding") : params_.get("embedding");
  return ad::matmul(tape, embed, ad::transpose(tape, w));
}

namespace {

void check_batch(const Batch& batch, const SclmModel& model) {
  if (batch.n_seq < 1 || batch.ids.size() != static_cast<std::size_t>(batch.n_seq) * batch.length) {
    throw Error(ErrorCode::ShapeMismatch, "batch ids do not match n_seq x length");
  }
  if (!model.cache().contains(batch.length)) {
    throw Error(ErrorCode::LengthOutOfRange,
                "sequence length " + std::to_string(batch.length) + " outside the model's range");
  }
  for (int id : batch.ids) {
    if (id < 0 || id >= model.vocab().size()) {
      throw Error(ErrorCode::OutOfRange, "token id " + std::to_string(id) + " out of range");
    }
  }
}

std::vector<int> draw_steps(int n, int total, Rng& rng) {
  std::vector<int> steps(static_cast<std::size_t>(n));
  for (auto& t : steps) t = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(total)));
  return steps;
}

}  // namespace

GaussianLoss SclmModel::gaussian_loss(Tape& tape, const Batch& batch, Rng& rng,
                                      bool training) const {
  check_batch(batch, *this);
  Rng step_rng = rng.split("steps");
  Rng noise_rng = rng.split("noise");
  Rng drop_rng = rng.split("dropout");
  const std::vector<int> steps = draw_steps(batch.n_seq, schedule_.steps, step_rng);
  Matrix noise(batch.n_seq * batch.length, config_.embed_dim);
  for (Eigen::Index r = 0; r < noise.rows(); ++r) {
    for (Eigen::Index c = 0; c < noise.cols(); ++c) noise(r, c) = noise_rng.normal();
  }
  return gaussian_loss(tape, batch, steps, noise, drop_rng, training);
}

GaussianLoss SclmModel::gaussian_loss(Tape& tape, const Batch& batch,
                                      std::span<const int> steps, const Matrix& noise,
                                      Rng& rng, bool training) const {
  check_batch(batch, *this);
  const int n = batch.n_seq;
  const int L = batch.length;
  const int d = config_.embed_dim;
  if (static_cast<int>(steps.size()) != n || noise.rows() != n * L || noise.cols() != d) {
    throw Error(ErrorCode::ShapeMismatch, "gaussian_loss: steps or noise shape");
  }
  Tensor clean = embed(tape, batch.ids);
  Tensor signal = Tensor::zeros(n * L, 1);
  Tensor scaled_noise = Tensor::zeros(n * L, d);
  for (int s = 0; s < n; ++s) {
    const double abar = schedule_.alpha_bar(steps[static_cast<std::size_t>(s)]);
    for (int i = 0; i < L; ++i) {
      const int r = s * L + i;
      signal.at(r, 0) = std::sqrt(abar);
      for (int c = 0; c < d; ++c) scaled_noise.at(r, c) = std::sqrt(1.0 - abar) * noise(r, c);
    }
  }
  Tensor noisy = ad::add(tape, ad::row_scale(tape, clean, signal), scaled_noise);
  Denoised den = denoise(tape, to_curve(tape, noisy, n, L), n, L, steps, rng, training);
  GaussianLoss out;
  out.diffusion = ad::mse_loss(tape, den.embed, clean);
  out.anchor = ad::cross_entropy_loss(tape, logits(tape, den.embed), batch.ids);
  out.total = ad::add(tape, out.diffusion, ad::scale(tape, out.anchor, config_.anchor_weight));
  return out;
}

Tensor SclmModel::masked_loss(Tape& tape, const Batch& batch, Rng& rng, bool training) const {
  check_batch(batch, *this);
  Rng step_rng = rng.split("steps");
  Rng mask_rng = rng.split("mask");
  Rng drop_rng = rng.split("dropout");
  const std::vector<int> steps = draw_steps(batch.n_seq, schedule_.steps, step_rng);
  std::vector<int> noisy;
  noisy.reserve(batch.ids.size());
  for (int s = 0; s < batch.n_seq; ++s) {
    const auto seq = std::span<const int>(batch.ids).subspan(static_cast<std::size_t>(s) * batch.length,
                                                             static_cast<std::size_t>(batch.length));
    const auto masked = masked_forward(seq, steps[static_cast<std::size_t>(s)], schedule_, mask_rng);
    noisy.insert(noisy.end(), masked.begin(), masked.end());
  }
  return masked_loss(tape, batch, steps, noisy, drop_rng, training);
}

Tensor SclmModel::masked_loss(Tape& tape, const Batch& batch, std::span<const int> steps,
                              std::span<const int> noisy_ids, Rng& rng, bool training) const {
  check_batch(batch, *this);
  const int n = batch.n_seq;
  const int L = batch.length;
  if (static_cast<int>(steps.size()) != n || noisy_ids.size() != batch.ids.size()) {
    throw Error(ErrorCode::ShapeMismatch, "masked_loss: steps or noisy ids shape");
  }
  std::vector<double> weights(batch.ids.size(), 0.0);
  for (int s = 0; s < n; ++s) {
    const double w = schedule_.mask_weight(steps[static_cast<std::size_t>(s)]);
    for (int i = 0; i < L; ++i) {
      const auto r = static_cast<std::size_t>(s * L + i);
      if (noisy_ids[r] == Vocab::kMask) weights[r] = w;
    }
  }
  Tensor x = to_curve(tape, embed(tape, noisy_ids), n, L);
  Denoised den = denoise(tape, x, n, L, steps, rng, training);
  return ad::cross_entropy_loss(tape, logits(tape, den.embed), batch.ids, weights,
                                static_cast<double>(n * L));
}

void SclmModel::project_unit_norm() {
  if (!config_.unit_norm) return;
  for (const char* name : {"embedding", "output_embedding"}) {
    if (!params_.contains(name)) continue;
    Tensor& e = params_.get(name);
    for (int i = 0; i < e.rows(); ++i) {
      const double norm = e.mat().row(i).norm();
      if (norm > 0.0) e.mat().row(i) /= norm;
    }
  }
}

// -- free functions -----------------------------------------------------------

Matrix forward_noise_gaussian(const Matrix& clean, int t, const NoiseSchedule& schedule,
                              Rng& rng) {
  if (t < 1 || t > schedule.steps) {
    throw Error(ErrorCode::StepOutOfRange,
                "step " + std::to_string(t) + " outside [1, " + std::to_string(schedule.steps) + "]");
  }
  const double abar = schedule.alpha_bar(t);
  const double a = std::sqrt(abar);
  const double b = std::sqrt(1.0 - abar);
  Matrix out(clean.rows(), clean.cols());
  for (Eigen::Index j = 0; j < clean.cols(); ++j) {
    for (Eigen::Index i = 0; i < clean.rows(); ++i) out(i, j) = a * clean(i, j) + b * rng.normal();
  }
  return out;
}

std::vector<int> masked_forward(std::span<const int> ids, int t, const NoiseSchedule& schedule,
                                Rng& rng) {
  const double rate = 1.0 - schedule.alpha_bar(t);
  std::vector<int> out(ids.begin(), ids.end());
  for (auto& id : out) {
    if (rng.uniform() < rate) id = Vocab::kMask;
  }
  return out;
}

Matrix combine_curves(std::span<const Matrix> curves, std::span<const double> probs,
                      CombineMode mode) {
  if (curves.empty() || curves.size() != probs.size()) {
    throw Error(ErrorCode::ShapeMismatch, "combine_curves: need one probability per curve");
  }
  for (const auto& c : curves) {
    if (c.rows() != curves[0].rows() || c.cols() != curves[0].cols()) {
      throw Error(ErrorCode::ShapeMismatch, "combine_curves: curve shapes differ");
    }
  }
  if (mode == CombineMode::Infer) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < probs.size(); ++k) {
      if (probs[k] > probs[best]) best = k;
    }
    return curves[best];
  }
  Matrix out = Matrix::Zero(curves[0].rows(), curves[0].cols());
  for (std::size_t k = 0; k < curves.size(); ++k) out += probs[k] * curves[k];
  return out;
}

LossRecord train_step(SclmModel& model, const Batch& batch, const ad::AdamConfig& adam,
                      Rng& rng) {
  LossRecord rec;
  rec.step = model.params().step() + 1;
  Tape tape;
  Tensor loss;
  if (model.config().objective == Objective::Gaussian) {
    GaussianLoss g = model.gaussian_loss(tape, batch, rng, true);
    rec.diffusion = g.diffusion.item();
    rec.anchor = g.anchor.item();
    loss = g.total;
  } else {
    loss = model.masked_loss(tape, batch, rng, true);
  }
  rec.total = loss.item();
  if (!std::isfinite(rec.total)) {
    throw Error(ErrorCode::NonFinite, "non-finite loss at step " + std::to_string(rec.step));
  }
  tape.backward(loss);
  tape.clear();
  model.params().adam_step(adam);
  model.project_unit_norm();
  return rec;
}

std::vector<int> strided_steps(int total, int n_steps) {
  if (n_steps < 1 || n_steps > total) {
    throw Error(ErrorCode::StepOutOfRange, "need 1 <= reverse steps <= " + std::to_string(total));
  }
  std::vector<int> out;
  for (int k = 0; k < n_steps; ++k) {
    out.push_back(total - static_cast<int>(static_cast<std::int64_t>(k) * total / n_steps));
  }
  return out;
}

namespace {

// Per-row argmax over the non-reserved vocabulary.
std::vector<int> decode_tokens(const Tensor& logits) {
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (int r = 0; r < logits.rows(); ++r) {
    int best = 2;
    for (int c = 3; c < logits.cols(); ++c) {
      if (logits.at(r, c) > logits.at(r, best)) best = c;
    }
    out[static_cast<std::size_t>(r)] = best;
  }
  return out;
}

}  // namespace

SampleResult sample(const SclmModel& model, int length, int n_steps, int n_samples, Rng& rng) {
  if (!model.cache().contains(length)) {
    throw Error(ErrorCode::LengthOutOfRange, "sample length " + std::to_string(length) + " out of range");
  }
  if (n_samples < 1) throw Error(ErrorCode::InvalidConfig, "need at least one sample");
  const auto& sched = model.schedule();
  const std::vector<int> steps = strided_steps(sched.steps, n_steps);
  const int n = n_samples;
  const int d = model.embed_dim();
  const int rows = n * length;

  SampleResult res;
  res.length = length;
  res.steps = steps;
  res.trajectories.assign(static_cast<std::size_t>(n), {});
  Tape tape;
  tape.set_grad_enabled(false);
  Rng noise_rng = rng.split("noise");
  Rng drop_rng = rng.split("dropout");
  Rng pick_rng = rng.split("unmask");

  auto record = [&](const Tensor& embed) {
    for (int s = 0; s < n; ++s) {
      res.trajectories[static_cast<std::size_t>(s)].push_back(
          embed.mat().middleRows(s * length, length).transpose());
    }
  };

  const bool gaussian = model.config().objective == Objective::Gaussian;
  Tensor state = Tensor::zeros(rows, d);
  std::vector<int> ids(static_cast<std::size_t>(rows), Vocab::kMask);
  if (gaussian) {
    for (double& x : state.data()) x = noise_rng.normal();
  }
  Tensor last;
  for (std::size_t k = 0; k < steps.size(); ++k) {
    const int t = steps[k];
    const int next = k + 1 < steps.size() ? steps[k + 1] : 0;
    const std::vector<int> step_vec(static_cast<std::size_t>(n), t);
    Tensor input = gaussian ? state : model.embed(tape, ids);
    Denoised den = model.denoise(tape, model.to_curve(tape, input, n, length), n, length,
                                 step_vec, drop_rng, false, CombineMode::Infer);
    record(den.embed);
    last = den.embed;
    if (gaussian) {
      const double abar = sched.alpha_bar(next);
      const double a = std::sqrt(abar);
      const double b = std::sqrt(1.0 - abar);
      for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < d; ++c) {
          state.at(r, c) = a * den.embed.at(r, c) + (next > 0 ? b * noise_rng.normal() : 0.0);
        }
      }
    } else {
      const double cur = sched.alpha_bar(t);
      const double unmask = next == 0 ? 1.0 : (sched.alpha_bar(next) - cur) / (1.0 - cur);
      Tensor probs = ad::softmax(tape, model.logits(tape, den.embed), 1);
      for (int r = 0; r < rows; ++r) {
        auto& id = ids[static_cast<std::size_t>(r)];
        if (id != Vocab::kMask || pick_rng.uniform() >= unmask) continue;
        double total = 0.0;
        for (int c = 2; c < probs.cols(); ++c) total += probs.at(r, c);
        double u = pick_rng.uniform() * total;
        int choice = probs.cols() - 1;
        for (int c = 2; c < probs.cols(); ++c) {
          u -= probs.at(r, c);
          if (u < 0.0) {
            choice = c;
            break;
          }
        }
        id = choice;
      }
    }
  }
  if (gaussian) ids = decode_tokens(model.logits(tape, last));
  for (int s = 0; s < n; ++s) {
    res.tokens.emplace_back(ids.begin() + s * length, ids.begin() + (s + 1) * length);
  }
  return res;
}

nlohmann::json trajectory_to_json(const std::vector<Matrix>& trajectory,
                                  std::span<const int> steps) {
  if (trajectory.size() != steps.size()) {
    throw Error(ErrorCode::ShapeMismatch, "one step index per trajectory entry");
  }
  nlohmann::json out = nlohmann::json::array();
  for (std::size_t k = 0; k < trajectory.size(); ++k) {
    const Matrix& m = trajectory[k];
    std::vector<double> values;
    values.reserve(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) values.push_back(m(i, j));
    }
    out.push_back({{"step", steps[k]}, {"rows", m.rows()}, {"cols", m.cols()}, {"values", values}});
  }
  return out;
}

}  // namespace curvelang::model
