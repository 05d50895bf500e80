#include "curvelang/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "curvelang/error.hpp"

namespace curvelang::data {

std::string to_string(Tokenizer kind) { return kind == Tokenizer::Char ? "char" : "whitespace"; }

Tokenizer parse_tokenizer(const std::string& text) {
  if (text == "char") return Tokenizer::Char;
  if (text == "whitespace") return Tokenizer::Whitespace;
  throw Error(ErrorCode::InvalidConfig, "unknown tokenizer '" + text + "'");
}

std::vector<std::string> tokenize(std::string_view line, Tokenizer tokenizer) {
  std::vector<std::string> out;
  if (tokenizer == Tokenizer::Whitespace) {
    std::istringstream is{std::string(line)};
    std::string tok;
    while (is >> tok) out.push_back(tok);
    return out;
  }
  // One token per UTF-8 code point; a trailing CR is dropped.
  std::size_t i = 0;
  while (i < line.size()) {
    const auto lead = static_cast<unsigned char>(line[i]);
    std::size_t len = lead < 0x80 ? 1 : lead >= 0xF0 ? 4 : lead >= 0xE0 ? 3 : lead >= 0xC0 ? 2 : 1;
    len = std::min(len, line.size() - i);
    if (!(len == 1 && (line[i] == '\r' || line[i] == '\n'))) out.emplace_back(line.substr(i, len));
    i += len;
  }
  return out;
}

std::string detokenize(const model::Vocab& vocab, std::span<const int> ids, Tokenizer tokenizer) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (tokenizer == Tokenizer::Whitespace && i > 0) out += ' ';
    out += vocab.token(ids[i]);
  }
  return out;
}

Corpus ingest_text(std::string_view text, Tokenizer tokenizer, int max_len, std::string source) {
  if (max_len < 2) throw Error(ErrorCode::InvalidConfig, "max_len must be at least 2");
  std::vector<std::vector<std::string>> lines;
  std::unordered_map<std::string, long> counts;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    auto toks = tokenize(text.substr(start, end - start), tokenizer);
    start = end + 1;
    if (static_cast<int>(toks.size()) > max_len) toks.resize(static_cast<std::size_t>(max_len));
    if (toks.size() < 2) continue;
    for (const auto& t : toks) ++counts[t];
    lines.push_back(std::move(toks));
  }
  if (lines.empty()) throw Error(ErrorCode::EmptyCorpus, source + " has no usable lines");

  std::vector<std::pair<std::string, long>> ranked(counts.begin(), counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  std::vector<std::string> symbols;
  for (const auto& [tok, count] : ranked) {
    if (tok == "<pad>" || tok == "<mask>") {
      throw Error(ErrorCode::InvalidConfig, "corpus uses reserved token " + tok);
    }
    symbols.push_back(tok);
  }

  Corpus c{{}, model::Vocab::from_symbols(symbols), std::move(source), tokenizer};
  for (const auto& toks : lines) {
    std::vector<int> ids;
    ids.reserve(toks.size());
    for (const auto& t : toks) ids.push_back(c.vocab.id(t));
    c.sequences.push_back(std::move(ids));
  }
  return c;
}

Corpus ingest(const std::string& path, Tokenizer tokenizer, int max_len) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::IoError, "cannot read corpus " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  if (is.bad()) throw Error(ErrorCode::IoError, "failed reading corpus " + path);
  return ingest_text(buf.str(), tokenizer, max_len, path);
}

std::string to_string(ToyKind kind) {
  switch (kind) {
    case ToyKind::Alternating: return "alternating";
    case ToyKind::Grammar: return "grammar";
    case ToyKind::Multimodal: return "multimodal";
  }
  return "?";
}

ToyKind parse_toy_kind(const std::string& text) {
  if (text == "alternating") return ToyKind::Alternating;
  if (text == "grammar") return ToyKind::Grammar;
  if (text == "multimodal") return ToyKind::Multimodal;
  throw Error(ErrorCode::InvalidConfig, "unknown toy corpus '" + text + "'");
}

std::string toy_corpus(ToyKind kind, int lines, int length, std::uint64_t seed) {
  if (lines < 1 || length < 2) throw Error(ErrorCode::InvalidConfig, "toy corpus needs lines and length >= 2");
  if (kind == ToyKind::Grammar && length < 3) {
    throw Error(ErrorCode::InvalidConfig, "grammar lines need at least one block");
  }
  Rng rng = Rng(seed).split(to_string(kind));
  std::string out;
  for (int n = 0; n < lines; ++n) {
    std::string line;
    switch (kind) {
      case ToyKind::Alternating: {
        const int phase = static_cast<int>(rng.uniform_int(2));
        for (int i = 0; i < length; ++i) line += (i + phase) % 2 == 0 ? 'a' : 'b';
        break;
      }
      case ToyKind::Grammar:
        for (int i = 0; i + 3 <= length; i += 3) line += rng.uniform_int(2) == 0 ? "abc" : "acb";
        break;
      case ToyKind::Multimodal: {
        // Prefix x continues as abab.. or cdcd..; prefix y as acac.. or bdbd..
        static constexpr const char* kModes[2][2] = {{"ab", "cd"}, {"ac", "bd"}};
        const int prefix = static_cast<int>(rng.uniform_int(2));
        const char* mode = kModes[prefix][rng.uniform_int(2)];
        line += prefix == 0 ? 'x' : 'y';
        for (int i = 1; i < length; ++i) line += mode[(i - 1) % 2];
        break;
      }
    }
    out += line;
    out += '\n';
  }
  return out;
}

BatchSampler::BatchSampler(const Corpus& corpus, int batch_size, std::uint64_t seed)
    : corpus_(&corpus), batch_size_(batch_size), seed_(seed) {
  if (batch_size < 1) throw Error(ErrorCode::InvalidConfig, "batch_size must be positive");
  if (corpus.sequences.empty()) throw Error(ErrorCode::EmptyCorpus, corpus.source);
  std::map<int, std::vector<int>> buckets;
  for (std::size_t i = 0; i < corpus.sequences.size(); ++i) {
    buckets[static_cast<int>(corpus.sequences[i].size())].push_back(static_cast<int>(i));
  }
  double total = 0.0;
  for (auto& [len, idx] : buckets) {
    lengths_.push_back(len);
    total += static_cast<double>(idx.size());
    cumulative_.push_back(total);
    by_length_.push_back(std::move(idx));
  }
  for (double& c : cumulative_) c /= total;
}

model::Batch BatchSampler::batch(std::int64_t step) const {
  Rng rng = Rng(seed_).split("batch").split(static_cast<std::uint64_t>(step));
  const double u = rng.uniform();
  std::size_t bucket = 0;
  while (bucket + 1 < cumulative_.size() && u >= cumulative_[bucket]) ++bucket;
  const auto& pool = by_length_[bucket];
  model::Batch b{batch_size_, lengths_[bucket], {}};
  b.ids.reserve(static_cast<std::size_t>(batch_size_ * b.length));
  for (int s = 0; s < batch_size_; ++s) {
    const int idx = pool[rng.uniform_int(pool.size())];
    const auto& seq = corpus_->sequences[static_cast<std::size_t>(idx)];
    b.ids.insert(b.ids.end(), seq.begin(), seq.end());
  }
  return b;
}

model::Batch BatchSampler::eval_batch(int count) const {
  std::size_t bucket = 0;
  for (std::size_t i = 1; i < by_length_.size(); ++i) {
    if (by_length_[i].size() > by_length_[bucket].size()) bucket = i;
  }
  const auto& pool = by_length_[bucket];
  const int n = std::min<int>(count, static_cast<int>(pool.size()));
  model::Batch b{n, lengths_[bucket], {}};
  for (int s = 0; s < n; ++s) {
    const auto& seq = corpus_->sequences[static_cast<std::size_t>(pool[static_cast<std::size_t>(s)])];
    b.ids.insert(b.ids.end(), seq.begin(), seq.end());
  }
  return b;
}

Prefetcher::Prefetcher(Produce produce, std::int64_t first, std::int64_t last, int workers,
                       int capacity)
    : produce_(std::move(produce)),
      next_(first),
      last_(last),
      workers_(std::max(0, workers)),
      capacity_(std::max(1, capacity)) {
  for (int w = 0; w < workers_; ++w) threads_.emplace_back([this, w, first] { run(first + w); });
}

Prefetcher::~Prefetcher() {
  {
    std::lock_guard lock(mutex_);
    stop_ = true;
  }
  cv_.notify_all();
  for (auto& t : threads_) t.join();
}

void Prefetcher::run(std::int64_t start) {
  for (std::int64_t step = start; step < last_; step += workers_) {
    {
      std::unique_lock lock(mutex_);
      cv_.wait(lock, [&] { return stop_ || step < next_ + capacity_; });
      if (stop_) return;
    }
    model::Batch b;
    try {
      b = produce_(step);
    } catch (...) {
      std::lock_guard lock(mutex_);
      failure_ = std::current_exception();
      cv_.notify_all();
      return;
    }
    {
      std::lock_guard lock(mutex_);
      ready_.emplace(step, std::move(b));
    }
    cv_.notify_all();
  }
}

model::Batch Prefetcher::next() {
  if (next_ >= last_) throw Error(ErrorCode::OutOfRange, "prefetcher exhausted");
  if (workers_ == 0) return produce_(next_++);
  std::unique_lock lock(mutex_);
  cv_.wait(lock, [&] { return failure_ || ready_.contains(next_); });
  if (failure_) std::rethrow_exception(failure_);
  auto node = ready_.extract(next_);
  ++next_;
  lock.unlock();
  cv_.notify_all();
  return std::move(node.mapped());
}

}  // namespace curvelang::data
