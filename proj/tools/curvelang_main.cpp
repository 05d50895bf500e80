// curvelang: train, sample and analyse sentence-curve diffusion models.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include <CLI11.hpp>

#include "curvelang/commands.hpp"
#include "curvelang/error.hpp"

using namespace curvelang;

namespace {

// --config file first, then any --<key> flag given on the command line.
struct ConfigFlags {
  std::string path;
  std::map<std::string, std::string> overrides;

  void attach(CLI::App& app) {
    app.add_option("--config", path, "key = value config file")->check(CLI::ExistingFile);
    for (const auto& key : RunConfig::keys()) {
      app.add_option("--" + key, overrides[key], "override config key " + key);
    }
  }

  RunConfig resolve(const CLI::App& app) const {
    RunConfig c = path.empty() ? RunConfig{} : load_run_config(path);
    for (const auto& [key, value] : overrides) {
      if (app.count("--" + key) > 0) c.set(key, value);
    }
    c.validate();
    return c;
  }
};

void print_records(const std::vector<theory::VerificationRecord>& records) {
  std::cout << theory::format_table(records);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sentence-curve language model toolkit"};
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "train a model and write losses.csv and a checkpoint");
  ConfigFlags train_flags;
  train_flags.attach(*train);
  std::string resume;
  train->add_option("--resume", resume, "continue from this checkpoint")->check(CLI::ExistingFile);

  auto* recon = app.add_subcommand("reconstruct", "reconstruction-error sweep to CSV");
  SweepSpec sweep;
  std::uint64_t recon_seed = 0;
  std::string recon_out = "reconstruct";
  recon->add_option("--lengths", sweep.lengths, "sentence lengths");
  recon->add_option("--n-ratios", sweep.n_ratios, "control-point ratios");
  recon->add_option("--eta-ratios", sweep.eta_ratios, "degree ratios");
  recon->add_option("--trials", sweep.trials, "random sequences per cell");
  recon->add_option("--min-degree", sweep.min_degree, "degree floor");
  recon->add_option("--dim", sweep.dim, "embedding dimension");
  recon->add_option("--seed", recon_seed, "random seed");
  recon->add_option("--out", recon_out, "output directory");

  auto* spectrum = app.add_subcommand("spectrum", "eigenvalue report of B+ (B+)^T as JSON");
  ConfigFlags spectrum_flags;
  spectrum_flags.attach(*spectrum);
  int spectrum_length = 16;
  int spectrum_dim = 1;
  spectrum->add_option("--length", spectrum_length, "sentence length L")->required();
  spectrum->add_option("--dim", spectrum_dim, "embedding dimension d");

  auto* verify = app.add_subcommand("verify", "numeric checks of the theory");
  std::string suite = "all";
  std::uint64_t verify_seed = 0;
  std::string verify_out;
  verify->add_option("suite", suite, "lemma1 | lemma2 | lemma3 | relaxation | all")
      ->check(CLI::IsMember(cli::suite_names()));
  verify->add_option("--seed", verify_seed, "random seed");
  verify->add_option("--out", verify_out, "directory for verify.json");

  auto* sample = app.add_subcommand("sample", "sample sentences and trajectories from a checkpoint");
  ConfigFlags sample_flags;
  sample_flags.attach(*sample);
  std::string sample_ckpt;
  sample->add_option("--checkpoint", sample_ckpt, "checkpoint path")->required()->check(CLI::ExistingFile);

  auto* probe = app.add_subcommand("probe", "logit distance-correlation of two checkpoints");
  ConfigFlags probe_flags;
  probe_flags.attach(*probe);
  std::string probe_a;
  std::string probe_b;
  probe->add_option("checkpoint_a", probe_a, "first checkpoint")->required()->check(CLI::ExistingFile);
  probe->add_option("checkpoint_b", probe_b, "second checkpoint")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      const RunConfig cfg = train_flags.resolve(*train);
      const auto report = cli::cmd_train(cfg, resume);
      std::printf("trained steps %lld..%lld, loss %.6g -> %.6g, checkpoint %s\n",
                  static_cast<long long>(report.first_step), static_cast<long long>(report.last_step),
                  report.head_average(), report.tail_average(), report.checkpoint.c_str());
    } else if (*recon) {
      const auto rows = cli::cmd_reconstruct(sweep, recon_seed, recon_out);
      std::printf("%zu cells written to %s/reconstruction.csv\n", rows.size(), recon_out.c_str());
    } else if (*spectrum) {
      const RunConfig cfg = spectrum_flags.resolve(*spectrum);
      std::cout << cli::cmd_spectrum(spectrum_length, cfg.model.curve, spectrum_dim).dump(2) << '\n';
    } else if (*verify) {
      const auto records = cli::run_suite(suite, verify_seed);
      print_records(records);
      if (!verify_out.empty()) {
        std::filesystem::create_directories(verify_out);
        std::ofstream(std::filesystem::path(verify_out) / "verify.json")
            << theory::to_json(records).dump(2) << '\n';
      }
      const bool ok = theory::all_passed(records);
      std::printf("%s\n", ok ? "all asserted checks passed" : "some asserted checks FAILED");
      return ok ? 0 : 1;
    } else if (*sample) {
      const RunConfig cfg = sample_flags.resolve(*sample);
      const auto out = cli::cmd_sample(sample_ckpt, cfg.sample_length, cfg.sample_steps, cfg.n_samples,
                                       cfg.seed, cfg.out);
      for (const auto& t : out.texts) std::cout << t << '\n';
    } else if (*probe) {
      const RunConfig cfg = probe_flags.resolve(*probe);
      const auto j = cli::cmd_probe(probe_a, probe_b, cfg);
      std::filesystem::create_directories(cfg.out);
      std::ofstream(std::filesystem::path(cfg.out) / "probe.json") << j.dump(2) << '\n';
      std::printf("mean off-diagonal dCor: a %.6f, b %.6f, difference %.6f\n",
                  j["a"]["mean_off_diagonal"].get<double>(), j["b"]["mean_off_diagonal"].get<double>(),
                  j["difference"].get<double>());
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
