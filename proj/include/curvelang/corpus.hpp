#pragma once

#include <condition_variable>
#include <exception>
#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "curvelang/model.hpp"

namespace curvelang::data {

enum class Tokenizer { Char, Whitespace };

std::string to_string(Tokenizer kind);
Tokenizer parse_tokenizer(const std::string& text);

struct Corpus {
  std::vector<std::vector<int>> sequences;
  model::Vocab vocab;
  std::string source;
  Tokenizer tokenizer = Tokenizer::Char;
};

// Vocabulary ordered by descending frequency, ties lexicographic; lines are
// truncated to max_len tokens and dropped below two.
Corpus ingest(const std::string& path, Tokenizer tokenizer, int max_len);
Corpus ingest_text(std::string_view text, Tokenizer tokenizer, int max_len,
                   std::string source = "<memory>");

std::vector<std::string> tokenize(std::string_view line, Tokenizer tokenizer);
std::string detokenize(const model::Vocab& vocab, std::span<const int> ids, Tokenizer tokenizer);

enum class ToyKind {
  Alternating,  // abab... or baba...
  Grammar,      // (abc|acb)+
  Multimodal,   // a prefix symbol, then one of two equally likely continuations
};

std::string to_string(ToyKind kind);
ToyKind parse_toy_kind(const std::string& text);

// `lines` newline-terminated character lines of exactly `length` symbols
// (Grammar rounds length down to a multiple of three).
std::string toy_corpus(ToyKind kind, int lines, int length, std::uint64_t seed);

// Equal-length batches drawn with replacement. The batch for a step depends
// only on (seed, step), so prefetching never changes what training sees.
class BatchSampler {
 public:
  BatchSampler(const Corpus& corpus, int batch_size, std::uint64_t seed);

  model::Batch batch(std::int64_t step) const;
  // The first `count` sequences of the most common length, in corpus order.
  model::Batch eval_batch(int count) const;

 private:
  const Corpus* corpus_;
  int batch_size_;
  std::uint64_t seed_;
  std::vector<int> lengths_;                   // distinct lengths, ascending
  std::vector<std::vector<int>> by_length_;    // sequence indices per length
  std::vector<double> cumulative_;             // length bucket weights
};

// Background producer for steps [first, last) with at most `capacity`
// batches buffered ahead of the consumer. `workers` threads split the steps
// round-robin; zero workers produces inline on next().
class Prefetcher {
 public:
  using Produce = std::function<model::Batch(std::int64_t)>;

  Prefetcher(Produce produce, std::int64_t first, std::int64_t last, int workers,
             int capacity = 4);
  ~Prefetcher();
  Prefetcher(const Prefetcher&) = delete;
  Prefetcher& operator=(const Prefetcher&) = delete;

  // Batch for the next step in order; throws whatever production threw.
  model::Batch next();

 private:
  void run(std::int64_t start);

  Produce produce_;
  std::int64_t next_;
  std::int64_t last_;
  int workers_;
  int capacity_;
  std::mutex mutex_;
  std::condition_variable cv_;
  std::map<std::int64_t, model::Batch> ready_;
  std::exception_ptr failure_;
  bool stop_ = false;
  std::vector<std::thread> threads_;
};

}  // namespace curvelang::data
