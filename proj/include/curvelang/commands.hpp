#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "curvelang/config.hpp"
#include "curvelang/corpus.hpp"
#include "curvelang/curve_map.hpp"
#include "curvelang/theory.hpp"

namespace curvelang::cli {

// The configured file, or a generated toy corpus for toy:<kind>.
data::Corpus load_corpus(const RunConfig& config);

struct TrainReport {
  std::int64_t first_step = 0;  // global step of the first update this run
  std::int64_t last_step = 0;
  std::vector<model::LossRecord> history;  // every step of this run
  std::string checkpoint;
  std::string losses_csv;

  // Mean total loss over the first / last `window` steps of this run.
  double head_average(std::size_t window = 10) const;
  double tail_average(std::size_t window = 10) const;
};

// Trains for config.steps updates and writes losses.csv, checkpoint.sclm
// and config.txt under config.out. With `resume`, continues from that
// checkpoint's step and appends to an existing losses.csv.
TrainReport cmd_train(const RunConfig& config, const std::string& resume = {});

// reconstruction.csv and reconstruction.json under `out`.
std::vector<ReconstructionRow> cmd_reconstruct(const SweepSpec& spec, std::uint64_t seed,
                                               const std::string& out);

nlohmann::json spectrum_json(const spline::SpectralReport& report, const spline::BasisPair& pair);
// Spectrum of the basis pair for `length` under `curve`.
nlohmann::json cmd_spectrum(int length, const CurveConfig& curve, int dim);

// lemma1 | lemma2 | lemma3 | relaxation | all.
std::vector<theory::VerificationRecord> run_suite(const std::string& suite, std::uint64_t seed);
const std::vector<std::string>& suite_names();

struct SampleOutput {
  std::vector<std::string> texts;
  model::SampleResult result;
};

// samples.txt, trajectory_<i>.json and projection_<i>.csv under `out`.
SampleOutput cmd_sample(const std::string& checkpoint, int length, int steps, int n,
                        std::uint64_t seed, const std::string& out);

// Probes two checkpoints on the same evaluation batch and perturbation seed.
nlohmann::json cmd_probe(const std::string& checkpoint_a, const std::string& checkpoint_b,
                         const RunConfig& config);

// Top principal axes of the rows of `points` by power iteration with
// deflation. Columns are unit axes; signs fixed so the largest entry is positive.
struct Projection {
  spline::Vector mean;
  spline::Matrix axes;  // dim x k
  spline::Matrix coordinates;  // n x k
};
Projection principal_projection(const spline::Matrix& points, int k = 2);

// Kruskal stress of pairwise distances in `projected` against `points`.
double projection_stress(const spline::Matrix& points, const spline::Matrix& projected);

// Control points of every recorded step, stacked as rows (step-major).
spline::Matrix trajectory_control_points(const model::SclmModel& model,
                                         const std::vector<spline::Matrix>& trajectory);

// Shortest round-trip decimal form, for byte-stable CSV output.
std::string format_double(double value);

}  // namespace curvelang::cli
