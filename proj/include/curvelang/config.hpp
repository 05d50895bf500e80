#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "curvelang/model.hpp"
#include "curvelang/tensor.hpp"
#include "curvelang/theory.hpp"

namespace curvelang {

// Everything a command needs. Text form is flat `key = value` lines; `#`
// starts a comment. Keys are listed by RunConfig::keys().
struct RunConfig {
  model::ModelConfig model;
  ad::AdamConfig adam;
  std::uint64_t seed = 0;
  std::int64_t steps = 1000;
  int batch_size = 16;
  int log_interval = 10;

  // A file path, or toy:<alternating|grammar|multimodal> for a generated corpus.
  std::string corpus = "toy:alternating";
  std::string tokenizer = "char";
  int max_len = 64;
  int toy_lines = 512;
  int toy_length = 16;

  std::string out = "run";

  int sample_length = 16;
  int sample_steps = 20;
  int n_samples = 8;

  theory::ProbeConfig probe;
  int eval_size = 8;

  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();

  // Every key in keys() order, one per line.
  std::string to_text() const;
  void validate() const;
};

// Parses `key = value` lines into an ordered map; duplicate keys keep the last.
std::map<std::string, std::string> parse_key_values(const std::string& text);
RunConfig load_run_config(const std::string& path);
RunConfig run_config_from_text(const std::string& text);

}  // namespace curvelang
