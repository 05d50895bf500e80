#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "curvelang/curve_map.hpp"
#include "curvelang/rng.hpp"
#include "curvelang/tensor.hpp"

namespace curvelang::model {

using spline::Matrix;

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kMask = 1;

  // Reserved ids first, then `symbols` in the given order.
  static Vocab from_symbols(std::span<const std::string> symbols);

  int size() const { return static_cast<int>(tokens_.size()); }
  int id(const std::string& token) const;
  bool contains(const std::string& token) const { return index_.contains(token); }
  const std::string& token(int id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }
  bool is_reserved(int id) const { return id == kPad || id == kMask; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

enum class ScheduleKind { Linear, Sqrt };

std::string to_string(ScheduleKind kind);
ScheduleKind parse_schedule_kind(const std::string& text);

struct NoiseSchedule {
  int steps = 0;
  ScheduleKind kind = ScheduleKind::Sqrt;
  std::vector<double> alpha_bars;  // index t = 0..T, alpha_bars[0] = 1
  std::vector<double> alphas;      // alphas[t] = alpha_bars[t] / alpha_bars[t-1]; alphas[0] = 1

  static NoiseSchedule build(int steps, ScheduleKind kind);

  double alpha_bar(int t) const;
  double alpha(int t) const;
  // Per-position cross-entropy weight of the masked objective,
  // T * (abar[t-1] - abar[t]) / (1 - abar[t]); T / t for the linear schedule.
  double mask_weight(int t) const;
};

enum class Objective { Gaussian, Masked };

std::string to_string(Objective objective);
Objective parse_objective(const std::string& text);

struct BackboneConfig {
  int layers = 2;
  int heads = 2;
  int d_model = 64;
  int d_ff = 128;
  double dropout = 0.0;
  int time_dim = 32;

  void validate() const;
};

struct ModelConfig {
  Objective objective = Objective::Gaussian;
  bool identity_basis = false;  // B = B+ = I: the curve-free twin
  int embed_dim = 32;
  bool unit_norm = true;
  bool separate_output = false;  // own logit matrix instead of the embedding table
  double anchor_weight = 1.0;
  int max_length = 64;
  CurveConfig curve;      // curve.k_curves > 1 attaches the selection head
  bool k_head = false;    // attach the head even when k_curves == 1
  int scorer_hidden = 32;
  BackboneConfig backbone;
  int diffusion_steps = 100;
  ScheduleKind schedule = ScheduleKind::Sqrt;

  void validate() const;
  bool has_k_head() const { return k_head || curve.k_curves > 1; }
};

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Fixed-length token sequences, row-major n_seq x length.
struct Batch {
  int n_seq = 0;
  int length = 0;
  std::vector<int> ids;
};

enum class CombineMode { Train, Infer };

// Output of one denoising pass. Rows are positions, columns features:
// a sequence's d x L embedding matrix is stored transposed as L rows.
struct Denoised {
  ad::Tensor embed;   // n*L x d, predicted clean embeddings
  ad::Tensor curve;   // n*S x d, predicted clean control points (S = N or L)
  ad::Tensor probs;   // n x K when a head is attached
  ad::Tensor hidden;  // n*S x d_model, final hidden state of the chosen curve
  std::vector<ad::Tensor> curves;  // K candidates, each n*S x d
};

struct GaussianLoss {
  ad::Tensor diffusion;
  ad::Tensor anchor;
  ad::Tensor total;
};

class SclmModel {
 public:
  SclmModel(ModelConfig config, Vocab vocab, std::uint64_t init_seed);

  const ModelConfig& config() const { return config_; }
  const Vocab& vocab() const { return vocab_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  const BasisCache& cache() const { return cache_; }
  ad::ParamStore& params() { return params_; }
  const ad::ParamStore& params() const { return params_; }

  int embed_dim() const { return config_.embed_dim; }
  int k_curves() const { return config_.has_k_head() ? config_.curve.k_curves : 1; }
  // Tokens the backbone sees for a sentence of `length`: N, or L for identity.
  int curve_length(int length) const;

  ad::Tensor embed(ad::Tape& tape, std::span<const int> ids) const;
  // Stacked E -> P via B+ and back via B; identity mode passes through.
  ad::Tensor to_curve(ad::Tape& tape, const ad::Tensor& e, int n_seq, int length) const;
  ad::Tensor to_embed(ad::Tape& tape, const ad::Tensor& p, int n_seq, int length) const;

  // Backbone over n_seq curves of `length`-word sentences, each with its
  // diffusion step. Combines K candidates when a head is attached.
  Denoised denoise(ad::Tape& tape, const ad::Tensor& curve_in, int n_seq, int length,
                   std::span<const int> steps, Rng& rng, bool training,
                   CombineMode mode = CombineMode::Train) const;
  // Final hidden state -> predicted embeddings (output projection then B).
  ad::Tensor head(ad::Tape& tape, const ad::Tensor& hidden, int n_seq, int length) const;
  ad::Tensor logits(ad::Tape& tape, const ad::Tensor& embed) const;

  GaussianLoss gaussian_loss(ad::Tape& tape, const Batch& batch, Rng& rng,
                             bool training = true) const;
  // Same, on caller-provided steps and noise (n*L x d).
  GaussianLoss gaussian_loss(ad::Tape& tape, const Batch& batch,
                             std::span<const int> steps, const Matrix& noise, Rng& rng,
                             bool training) const;
  ad::Tensor masked_loss(ad::Tape& tape, const Batch& batch, Rng& rng,
                         bool training = true) const;
  ad::Tensor masked_loss(ad::Tape& tape, const Batch& batch, std::span<const int> steps,
                         std::span<const int> noisy_ids, Rng& rng, bool training) const;

  // Rescales every embedding row to unit length (no-op when unit_norm is off).
  void project_unit_norm();

 private:
  struct Passes {
    ad::Tensor hidden;        // n*K*S x d_model
    ad::Tensor curve_hidden;  // n*K x d_model
  };
  Passes backbone(ad::Tape& tape, const ad::Tensor& x, int n_seq, int seq_len,
                  std::span<const int> steps, Rng& rng, bool training) const;
  ad::Tensor param(const std::string& name) const { return params_.get(name); }
  void init_params(std::uint64_t seed);

  ModelConfig config_;
  Vocab vocab_;
  NoiseSchedule schedule_;
  BasisCache cache_;
  ad::ParamStore params_;
};

// E_t = sqrt(abar) E0 + sqrt(1 - abar) eps, one draw per entry.
Matrix forward_noise_gaussian(const Matrix& clean, int t, const NoiseSchedule& schedule,
                              Rng& rng);
// Each position independently replaced by the mask id with probability 1 - abar^t.
std::vector<int> masked_forward(std::span<const int> ids, int t,
                                const NoiseSchedule& schedule, Rng& rng);

// Weighted sum (Train) or the argmax curve, lowest index on ties (Infer).
Matrix combine_curves(std::span<const Matrix> curves, std::span<const double> probs,
                      CombineMode mode);

struct LossRecord {
  std::int64_t step = 0;
  double diffusion = 0.0;
  double anchor = 0.0;
  double total = 0.0;  // masked objective: the weighted cross-entropy
};

// One forward/backward/Adam step; re-projects embeddings afterwards.
LossRecord train_step(SclmModel& model, const Batch& batch, const ad::AdamConfig& adam,
                      Rng& rng);

struct SampleResult {
  int length = 0;
  std::vector<std::vector<int>> tokens;           // one per sample
  std::vector<std::vector<Matrix>> trajectories;  // [sample][step], each d x L
  std::vector<int> steps;                         // diffusion step of each entry
};

// Reverse process from pure noise (Gaussian) or all-mask (masked) using
// `n_steps` uniformly strided steps from T down to 1.
SampleResult sample(const SclmModel& model, int length, int n_steps, int n_samples,
                    Rng& rng);

std::vector<int> strided_steps(int total, int n_steps);

struct Checkpoint {
  std::int64_t step = 0;
  std::uint64_t seed = 0;
  nlohmann::json extra;
};

void save_checkpoint(const std::string& path, const SclmModel& model, const Checkpoint& meta);
// Restores parameters and optimizer moments into a freshly built model.
SclmModel load_checkpoint(const std::string& path, Checkpoint* meta = nullptr);

// [{"step": t, "rows": d, "cols": L, "values": [...]}, ...]
nlohmann::json trajectory_to_json(const std::vector<Matrix>& trajectory,
                                  std::span<const int> steps);

}  // namespace curvelang::model
