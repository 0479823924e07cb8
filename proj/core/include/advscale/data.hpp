#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "advscale/tensor.hpp"

namespace advscale {

enum class Split { Train, Test, Synthetic };

// Examples stored one per column of `inputs`, pixel values in [0,255].
struct Dataset {
  Matrix inputs;
  Shape input_shape;
  std::vector<std::size_t> labels;
  std::size_t n_classes = 0;
  Split split = Split::Train;

  std::size_t size() const noexcept { return labels.size(); }
  Tensor input(std::size_t i) const;

  // Throws InvalidArgument if lengths, labels or pixel ranges are inconsistent.
  void validate() const;

  // First `n` examples (or all, if fewer).
  Dataset head(std::size_t n) const;
  Dataset select(std::span<const std::size_t> indices) const;
};

// IDX magic numbers (big-endian on disk).
inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

// Parses an IDX image/label file pair. Throws IdxError with a distinct kind
// for unreadable files, wrong magic, truncation and count mismatches.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 Split split = Split::Train, std::size_t n_classes = 10);

// Serializes a dataset as an IDX pair (pixels rounded and clamped to bytes).
void write_idx(const Dataset& data, const std::filesystem::path& images,
               const std::filesystem::path& labels);

struct SynthConfig {
  std::size_t n_classes = 3;
  std::size_t dims = 10;
  std::size_t per_class = 10;
  double separation = 100.0;  // distance between neighbouring class means, pixel units
  double cluster_std = 1.0;
  std::uint64_t seed = 0;
};

// Gaussian blobs. Class means sit on a line through the centre of the pixel
// cube along a seeded random unit direction, `separation` apart; samples are
// clipped into [0,255].
Dataset synth_blobs(const SynthConfig& cfg);

// Uniform random permutation of the labels; inputs untouched.
Dataset shuffle_labels(const Dataset& data, std::uint64_t seed);

}  // namespace advscale
