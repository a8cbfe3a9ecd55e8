#include "muxplm/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "muxplm/errors.hpp"
#include "muxplm/vocab.hpp"

namespace muxplm {

namespace {
constexpr std::int32_t kIgnore = -100;
}

std::vector<std::int32_t> tokenize(std::string_view text) {
  std::vector<std::int32_t> out;
  out.reserve(text.size() + 1);
  out.push_back(vocab::kCls);
  for (unsigned char c : text) out.push_back(static_cast<std::int32_t>(c));
  return out;
}

std::string detokenize(std::span<const std::int32_t> tokens) {
  std::string out;
  for (auto t : tokens) {
    if (t >= 0 && t < vocab::kByteCount) out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
  }
  return out;
}

MuxBatch assemble_batch(const Dataset& data, std::span<const std::size_t> indices, std::size_t n, std::size_t seq_len) {
  if (n == 0 || seq_len == 0 || indices.size() % n != 0) {
    throw DimensionError("assemble_batch: " + std::to_string(indices.size()) + " instances do not form groups of " +
                         std::to_string(n));
  }
  MuxBatch b;
  b.groups = indices.size() / n;
  b.n = n;
  b.seq_len = seq_len;
  b.indices.assign(indices.begin(), indices.end());
  const std::size_t total = indices.size() * seq_len;
  b.tokens.assign(total, vocab::kPad);
  b.valid.assign(total, 0);
  b.tag_labels.assign(total, kIgnore);
  b.seq_labels.assign(indices.size(), kIgnore);
  for (std::size_t s = 0; s < indices.size(); ++s) {
    if (indices[s] >= data.size()) throw ValueError("assemble_batch: index " + std::to_string(indices[s]) + " out of range");
    const Example& ex = data.examples[indices[s]];
    const std::size_t len = std::min(seq_len, ex.tokens.size());
    for (std::size_t j = 0; j < len; ++j) {
      b.tokens[s * seq_len + j] = ex.tokens[j];
      b.valid[s * seq_len + j] = 1;
      if (j < ex.tags.size()) b.tag_labels[s * seq_len + j] = ex.tags[j];
    }
    b.seq_labels[s] = ex.label;
  }
  return b;
}

void shuffle_indices(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(v[i - 1], v[j]);
  }
}

BatchSampler::BatchSampler(const Dataset& data, std::size_t n, std::size_t groups, std::size_t seq_len, std::uint64_t seed,
                           SamplingStrategy strategy)
    : data_(&data), n_(n), groups_(groups), seq_len_(seq_len), rng_(seed) {
  if (data.size() == 0) throw ValueError("batch sampler: dataset is empty");
  if (n == 0 || groups == 0 || seq_len == 0) throw ValueError("batch sampler: N, B and L must be positive");
  if (data.size() < n * groups) {
    throw ValueError("batch sampler: dataset of " + std::to_string(data.size()) + " cannot fill one batch of " +
                     std::to_string(n * groups) + " instances");
  }
  if (strategy != SamplingStrategy::uniform) throw ValueError("batch sampler: unsupported strategy");
  order_.resize(data.size());
  reshuffle();
}

void BatchSampler::reshuffle() {
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  shuffle_indices(order_, rng_);
  cursor_ = 0;
}

MuxBatch BatchSampler::next() {
  const std::size_t need = n_ * groups_;
  if (cursor_ + need > order_.size()) {
    reshuffle();
    ++epoch_;
  }
  std::span<const std::size_t> idx(order_.data() + cursor_, need);
  cursor_ += need;
  return assemble_batch(*data_, idx, n_, seq_len_);
}

PrefetchingSampler::PrefetchingSampler(BatchSampler sampler, std::size_t depth)
    : sampler_(std::move(sampler)), depth_(std::max<std::size_t>(depth, 1)) {
  worker_ = std::thread([this] { run(); });
}

PrefetchingSampler::~PrefetchingSampler() {
  {
    std::lock_guard lock(mu_);
    stop_ = true;
  }
  cv_.notify_all();
  worker_.join();
}

void PrefetchingSampler::run() {
  try {
    while (true) {
      {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [this] { return stop_ || queue_.size() < depth_; });
        if (stop_) return;
      }
      MuxBatch batch = sampler_.next();
      {
        std::lock_guard lock(mu_);
        queue_.push_back(std::move(batch));
      }
      cv_.notify_all();
    }
  } catch (...) {
    std::lock_guard lock(mu_);
    error_ = std::current_exception();
    cv_.notify_all();
  }
}

MuxBatch PrefetchingSampler::next() {
  std::unique_lock lock(mu_);
  cv_.wait(lock, [this] { return !queue_.empty() || error_; });
  if (queue_.empty()) std::rethrow_exception(error_);
  MuxBatch batch = std::move(queue_.front());
  queue_.pop_front();
  lock.unlock();
  cv_.notify_all();
  return batch;
}

namespace {

std::size_t draw_length(Rng& rng, std::size_t min_len, std::size_t max_len) {
  if (min_len == 0 || max_len < min_len) throw ValueError("synthetic task: invalid length range");
  return min_len + static_cast<std::size_t>(rng.below(max_len - min_len + 1));
}

constexpr std::string_view kVowels = "aeiou";
constexpr std::string_view kConsonants = "bcdfghklmnprst";

}  // namespace

Dataset synth_seq_task(std::size_t n_examples, std::uint64_t seed, std::size_t min_len, std::size_t max_len) {
  Rng rng(seed);
  Dataset d;
  d.name = "synth_seq";
  d.num_classes = 2;
  d.num_tags = 1;
  d.examples.reserve(n_examples);
  while (d.examples.size() < n_examples) {
    const std::size_t len = draw_length(rng, min_len, max_len);
    std::string text(len, 'a');
    std::size_t a = 0;
    for (auto& c : text) {
      c = rng.bernoulli(0.5) ? 'a' : 'b';
      a += c == 'a';
    }
    if (2 * a == len) continue;
    Example ex;
    ex.tokens = tokenize(text);
    ex.label = 2 * a > len ? 0 : 1;
    d.examples.push_back(std::move(ex));
  }
  return d;
}

int byte_class(std::int32_t byte) {
  if (byte < 0 || byte >= vocab::kByteCount) return -1;
  const char c = static_cast<char>(byte);
  if (kVowels.find(c) != std::string_view::npos) return 0;
  if (kConsonants.find(c) != std::string_view::npos) return 1;
  return -1;
}

Dataset synth_token_task(std::size_t n_examples, std::uint64_t seed, std::size_t min_len, std::size_t max_len) {
  Rng rng(seed);
  Dataset d;
  d.name = "synth_token";
  d.num_classes = 1;
  d.num_tags = 3;
  d.examples.reserve(n_examples);
  for (std::size_t e = 0; e < n_examples; ++e) {
    const std::size_t len = draw_length(rng, min_len, max_len);
    std::string text(len, ' ');
    for (auto& c : text) {
      const auto& pool = rng.bernoulli(0.5) ? kVowels : kConsonants;
      c = pool[rng.below(pool.size())];
    }
    Example ex;
    ex.tokens = tokenize(text);
    ex.tags.assign(ex.tokens.size(), kIgnore);
    ex.tags[1] = 0;
    for (std::size_t k = 2; k < ex.tokens.size(); ++k) ex.tags[k] = 1 + byte_class(ex.tokens[k - 1]);
    d.examples.push_back(std::move(ex));
  }
  return d;
}

std::vector<std::string> synth_text_lines(std::size_t n_lines, std::uint64_t seed) {
  Rng rng(seed);
  // Fixed lexicon built from the same stream so a seed pins the whole corpus.
  static constexpr std::string_view kOnsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "st", "tr"};
  static constexpr std::string_view kNuclei[] = {"a", "e", "i", "o", "u", "ai", "ou"};
  const std::size_t lexicon_size = 200;
  std::vector<std::string> lexicon;
  while (lexicon.size() < lexicon_size) {
    std::string w;
    const std::size_t syllables = 1 + static_cast<std::size_t>(rng.below(3));
    for (std::size_t s = 0; s < syllables; ++s) {
      w += kOnsets[rng.below(std::size(kOnsets))];
      w += kNuclei[rng.below(std::size(kNuclei))];
    }
    if (std::find(lexicon.begin(), lexicon.end(), w) == lexicon.end()) lexicon.push_back(std::move(w));
  }
  std::vector<double> cdf(lexicon_size);
  double total = 0.0;
  for (std::size_t r = 0; r < lexicon_size; ++r) cdf[r] = total += 1.0 / static_cast<double>(r + 1);
  auto draw_word = [&]() -> const std::string& {
    const double u = rng.uniform() * total;
    return lexicon[static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin())];
  };

  std::vector<std::string> lines;
  lines.reserve(n_lines);
  for (std::size_t i = 0; i < n_lines; ++i) {
    std::string line;
    const std::size_t words = 4 + static_cast<std::size_t>(rng.below(12));
    for (std::size_t w = 0; w < words; ++w) {
      if (w > 0) line += ' ';
      line += draw_word();
    }
    line += '.';
    lines.push_back(std::move(line));
  }
  return lines;
}

std::vector<std::string> load_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open corpus file " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  if (lines.empty()) throw ValueError("corpus file " + path.string() + " has no non-empty lines");
  return lines;
}

Dataset text_dataset(const std::vector<std::string>& lines, std::size_t max_tokens, std::string name) {
  if (lines.empty()) throw ValueError("text_dataset: no lines");
  if (max_tokens < 2) throw ValueError("text_dataset: max_tokens must be at least 2");
  Dataset d;
  d.name = std::move(name);
  d.examples.reserve(lines.size());
  for (const auto& line : lines) {
    Example ex;
    ex.tokens = tokenize(line);
    if (ex.tokens.size() > max_tokens) ex.tokens.resize(max_tokens);
    d.examples.push_back(std::move(ex));
  }
  return d;
}

}  // namespace muxplm
