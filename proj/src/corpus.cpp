#include "moesplit/corpus.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numeric>
#include <string>

#include "moesplit/errors.hpp"

namespace moesplit {

std::vector<std::uint8_t> read_corpus_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestError("cannot read corpus " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.empty()) throw IngestError("corpus " + path.string() + " is empty");
  return bytes;
}

std::vector<Window> make_windows(std::span<const std::uint8_t> bytes, std::size_t seq_len,
                                 std::optional<std::uint64_t> shuffle_seed) {
  if (seq_len == 0) throw ContractError("make_windows: seq_len must be positive");
  if (bytes.empty()) throw IngestError("corpus is empty");
  const std::size_t count = (bytes.size() - 1) / seq_len;
  std::vector<Window> windows(count);
  for (std::size_t w = 0; w < count; ++w) {
    const std::size_t base = w * seq_len;
    windows[w].input.assign(bytes.begin() + base, bytes.begin() + base + seq_len);
    windows[w].target.assign(bytes.begin() + base + 1, bytes.begin() + base + seq_len + 1);
  }
  if (shuffle_seed) {
    std::mt19937_64 rng(*shuffle_seed);
    std::shuffle(windows.begin(), windows.end(), rng);
  }
  return windows;
}

std::vector<Window> corpus_ingest(const std::filesystem::path& path, std::size_t seq_len,
                                  std::optional<std::uint64_t> shuffle_seed) {
  const auto bytes = read_corpus_bytes(path);
  return make_windows(bytes, seq_len, shuffle_seed);
}

namespace {

template <std::size_t N>
const char* pick(const char* const (&words)[N], std::mt19937_64& rng) {
  return words[std::uniform_int_distribution<std::size_t>(0, N - 1)(rng)];
}

}  // namespace

std::vector<std::uint8_t> synthetic_corpus(std::size_t size, std::uint64_t seed) {
  static const char* const kAdj[] = {"quiet", "red", "old", "small", "bright", "heavy", "calm", "narrow", "green", "late"};
  static const char* const kNoun[] = {"river", "engine", "garden", "window", "teacher", "market",
                                      "signal", "bridge", "lantern", "village", "machine", "forest"};
  static const char* const kVerb[] = {"watches", "follows", "carries", "finds", "crosses", "builds", "hears", "opens"};
  static const char* const kPlace[] = {"harbor", "station", "hill", "library", "square", "valley"};
  static const char* const kIdent[] = {"count", "total", "index", "value", "node", "buf", "acc", "item"};
  static const char* const kFunc[] = {"load", "parse", "merge", "scale", "push", "emit"};

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> kind(0, 2), small(0, 99), digit(1, 9);
  std::string text;
  text.reserve(size + 128);
  char buf[160];
  // Every draw is sequenced before formatting so the text does not depend on
  // argument evaluation order.
  while (text.size() < size) {
    const int k = kind(rng);
    if (k == 0) {
      const char* a1 = pick(kAdj, rng);
      const char* n1 = pick(kNoun, rng);
      const char* v = pick(kVerb, rng);
      const char* a2 = pick(kAdj, rng);
      const char* n2 = pick(kNoun, rng);
      const char* p = pick(kPlace, rng);
      std::snprintf(buf, sizeof buf, "The %s %s %s the %s %s near the %s.\n", a1, n1, v, a2, n2, p);
    } else if (k == 1) {
      const int a = small(rng);
      const int b = small(rng);
      if (digit(rng) % 2 == 0)
        std::snprintf(buf, sizeof buf, "%d + %d = %d\n", a, b, a + b);
      else
        std::snprintf(buf, sizeof buf, "%d * %d = %d\n", a % 13, b % 13, (a % 13) * (b % 13));
    } else {
      const int form = digit(rng) % 3;
      const char* x = pick(kIdent, rng);
      const char* y = pick(kIdent, rng);
      const char* f = pick(kFunc, rng);
      const int m = digit(rng);
      const int n = small(rng);
      if (form == 0)
        std::snprintf(buf, sizeof buf, "let %s = %s(%s, %d);\n", x, f, y, n);
      else if (form == 1)
        std::snprintf(buf, sizeof buf, "if (%s > %d) { return %s - %d; }\n", x, m, y, n % 10);
      else
        std::snprintf(buf, sizeof buf, "for i in range(%d): %s += i\n", m, x);
    }
    text += buf;
  }
  text.resize(size);
  return {text.begin(), text.end()};
}

CorpusSplit split_corpus(std::span<const std::uint8_t> bytes, double heldout_fraction) {
  if (heldout_fraction <= 0.0 || heldout_fraction >= 1.0) {
    throw ConfigError("data.heldout_fraction must lie in (0, 1)");
  }
  const auto cut = static_cast<std::size_t>(static_cast<double>(bytes.size()) * (1.0 - heldout_fraction));
  return {std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + cut),
          std::vector<std::uint8_t>(bytes.begin() + cut, bytes.end())};
}

LabeledBatch pack_windows(std::span<const Window> windows) {
  LabeledBatch out;
  out.inputs.batch = windows.size();
  out.inputs.seq = windows.empty() ? 0 : windows.front().input.size();
  for (const auto& w : windows) {
    out.inputs.tokens.insert(out.inputs.tokens.end(), w.input.begin(), w.input.end());
    out.targets.insert(out.targets.end(), w.target.begin(), w.target.end());
  }
  return out;
}

BatchSampler::BatchSampler(std::vector<Window> windows, std::size_t batch_size, std::uint64_t seed)
    : windows_(std::move(windows)), batch_size_(batch_size), rng_(seed) {
  if (windows_.empty()) throw IngestError("no training windows: corpus shorter than one sequence");
  if (batch_size_ == 0) throw ConfigError("batch_size must be positive");
  order_.resize(windows_.size());
  reshuffle();
}

void BatchSampler::reshuffle() {
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  std::shuffle(order_.begin(), order_.end(), rng_);
  cursor_ = 0;
}

LabeledBatch BatchSampler::next() {
  std::vector<Window> picked;
  picked.reserve(batch_size_);
  while (picked.size() < batch_size_) {
    if (cursor_ == order_.size()) {
      ++epoch_;
      reshuffle();
    }
    picked.push_back(windows_[order_[cursor_++]]);
  }
  return pack_windows(picked);
}

}  // namespace moesplit
