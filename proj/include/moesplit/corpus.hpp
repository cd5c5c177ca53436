#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "moesplit/transformer.hpp"

namespace moesplit {

/// Byte-level vocabulary size.
inline constexpr std::size_t kByteVocab = 256;

/// One training example: `target` is `input` shifted left by one byte.
struct Window {
  std::vector<int> input;
  std::vector<int> target;
};

/// Whole file as bytes. Throws IngestError when unreadable or empty.
std::vector<std::uint8_t> read_corpus_bytes(const std::filesystem::path& path);

/// Non-overlapping windows of `seq_len`; the trailing partial window is
/// dropped. With a seed the window order is shuffled deterministically.
std::vector<Window> make_windows(std::span<const std::uint8_t> bytes, std::size_t seq_len,
                                 std::optional<std::uint64_t> shuffle_seed = std::nullopt);

/// Deterministic text of about `size` bytes mixing prose sentences,
/// arithmetic facts and code-like lines.
std::vector<std::uint8_t> synthetic_corpus(std::size_t size, std::uint64_t seed);

std::vector<Window> corpus_ingest(const std::filesystem::path& path, std::size_t seq_len,
                                  std::optional<std::uint64_t> shuffle_seed = std::nullopt);

/// Splits off the trailing `heldout_fraction` of the bytes for evaluation.
struct CorpusSplit {
  std::vector<std::uint8_t> train;
  std::vector<std::uint8_t> heldout;
};
CorpusSplit split_corpus(std::span<const std::uint8_t> bytes, double heldout_fraction);

/// Packs windows [first, first+count) into an input batch and flat targets.
struct LabeledBatch {
  TokenBatch inputs;
  std::vector<int> targets;
};
LabeledBatch pack_windows(std::span<const Window> windows);

/// Cycles through the windows in epochs, reshuffling each epoch from its own
/// seeded generator.
class BatchSampler {
 public:
  BatchSampler(std::vector<Window> windows, std::size_t batch_size, std::uint64_t seed);

  LabeledBatch next();
  std::size_t epoch() const noexcept { return epoch_; }
  const std::vector<Window>& windows() const noexcept { return windows_; }

 private:
  void reshuffle();

  std::vector<Window> windows_;
  std::vector<std::size_t> order_;
  std::size_t batch_size_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
  std::mt19937_64 rng_;
};

}  // namespace moesplit
