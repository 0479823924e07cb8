#include "advscale/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <random>

#include "advscale/error.hpp"

namespace advscale {

Tensor Dataset::input(std::size_t i) const {
  if (i >= size()) throw InvalidArgument("example index out of range");
  const auto col = inputs.col(static_cast<Eigen::Index>(i));
  return Tensor(input_shape, std::vector<double>(col.data(), col.data() + col.size()));
}

void Dataset::validate() const {
  if (static_cast<std::size_t>(inputs.cols()) != labels.size()) {
    throw InvalidArgument("dataset has " + std::to_string(inputs.cols()) + " inputs but " +
                          std::to_string(labels.size()) + " labels");
  }
  if (static_cast<std::size_t>(inputs.rows()) != shape_size(input_shape)) {
    throw InvalidArgument("input rows do not match input shape " + shape_string(input_shape));
  }
  for (auto y : labels) {
    if (y >= n_classes) throw InvalidArgument("label " + std::to_string(y) + " out of range");
  }
  if (inputs.size() && (inputs.minCoeff() < 0.0 || inputs.maxCoeff() > 255.0)) {
    throw InvalidArgument("pixel values must lie in [0,255]");
  }
}

Dataset Dataset::head(std::size_t n) const {
  n = std::min(n, size());
  Dataset out{inputs.leftCols(static_cast<Eigen::Index>(n)), input_shape,
              std::vector<std::size_t>(labels.begin(), labels.begin() + static_cast<long>(n)),
              n_classes, split};
  return out;
}

Dataset Dataset::select(std::span<const std::size_t> indices) const {
  Dataset out{Matrix(inputs.rows(), static_cast<Eigen::Index>(indices.size())), input_shape, {},
              n_classes, split};
  out.labels.reserve(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= size()) throw InvalidArgument("example index out of range");
    out.inputs.col(static_cast<Eigen::Index>(k)) = inputs.col(static_cast<Eigen::Index>(indices[k]));
    out.labels.push_back(labels[indices[k]]);
  }
  return out;
}

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError(IdxError::Kind::Io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t offset,
                        const std::filesystem::path& path) {
  if (buf.size() < offset + 4) {
    throw IdxError(IdxError::Kind::Truncated, path.string() + ": truncated header");
  }
  return (std::uint32_t{buf[offset]} << 24) | (std::uint32_t{buf[offset + 1]} << 16) |
         (std::uint32_t{buf[offset + 2]} << 8) | std::uint32_t{buf[offset + 3]};
}

void write_be32(std::ofstream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                         static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(bytes, 4);
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 Split split, std::size_t n_classes) {
  const auto img = read_file(images);
  const auto lab = read_file(labels);

  const std::uint32_t img_magic = read_be32(img, 0, images);
  if (img_magic != kIdxImagesMagic) {
    throw IdxError(IdxError::Kind::WrongMagic,
                   images.string() + ": expected image magic 2051, got " + std::to_string(img_magic));
  }
  const std::uint32_t lab_magic = read_be32(lab, 0, labels);
  if (lab_magic != kIdxLabelsMagic) {
    throw IdxError(IdxError::Kind::WrongMagic,
                   labels.string() + ": expected label magic 2049, got " + std::to_string(lab_magic));
  }

  const std::size_t n_images = read_be32(img, 4, images);
  const std::size_t rows = read_be32(img, 8, images);
  const std::size_t cols = read_be32(img, 12, images);
  const std::size_t n_labels = read_be32(lab, 4, labels);
  if (n_images != n_labels) {
    throw IdxError(IdxError::Kind::CountMismatch, "images file declares " + std::to_string(n_images) +
                                                      " items, labels file " +
                                                      std::to_string(n_labels));
  }
  const std::size_t pixels = rows * cols;
  if (img.size() < 16 + n_images * pixels) {
    throw IdxError(IdxError::Kind::Truncated, images.string() + ": truncated pixel data");
  }
  if (lab.size() < 8 + n_labels) {
    throw IdxError(IdxError::Kind::Truncated, labels.string() + ": truncated label data");
  }
  if (rows == 0 || cols == 0) throw IdxError(IdxError::Kind::Truncated, "zero image dimensions");

  Dataset out;
  out.input_shape = {rows, cols};
  out.n_classes = n_classes;
  out.split = split;
  out.inputs.resize(static_cast<Eigen::Index>(pixels), static_cast<Eigen::Index>(n_images));
  const unsigned char* src = img.data() + 16;
  for (std::size_t i = 0; i < n_images; ++i) {
    for (std::size_t p = 0; p < pixels; ++p) {
      out.inputs(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(i)) = src[i * pixels + p];
    }
  }
  out.labels.assign(lab.begin() + 8, lab.begin() + 8 + static_cast<long>(n_labels));
  for (auto y : out.labels) {
    if (y >= n_classes) {
      throw IdxError(IdxError::Kind::CountMismatch, "label " + std::to_string(y) +
                                                        " exceeds class count " +
                                                        std::to_string(n_classes));
    }
  }
  return out;
}

void write_idx(const Dataset& data, const std::filesystem::path& images,
               const std::filesystem::path& labels) {
  if (data.input_shape.size() != 2) throw ShapeError("IDX images need a (rows, cols) input shape");
  std::ofstream img(images, std::ios::binary);
  std::ofstream lab(labels, std::ios::binary);
  if (!img || !lab) throw IdxError(IdxError::Kind::Io, "cannot open IDX output files");
  write_be32(img, kIdxImagesMagic);
  write_be32(img, static_cast<std::uint32_t>(data.size()));
  write_be32(img, static_cast<std::uint32_t>(data.input_shape[0]));
  write_be32(img, static_cast<std::uint32_t>(data.input_shape[1]));
  for (Eigen::Index i = 0; i < data.inputs.cols(); ++i) {
    for (Eigen::Index p = 0; p < data.inputs.rows(); ++p) {
      img.put(static_cast<char>(std::clamp(std::lround(data.inputs(p, i)), 0L, 255L)));
    }
  }
  write_be32(lab, kIdxLabelsMagic);
  write_be32(lab, static_cast<std::uint32_t>(data.size()));
  for (auto y : data.labels) lab.put(static_cast<char>(y));
}

Dataset synth_blobs(const SynthConfig& cfg) {
  if (cfg.n_classes == 0 || cfg.dims == 0 || cfg.per_class == 0 || !(cfg.separation > 0) ||
      !(cfg.cluster_std > 0)) {
    throw InvalidArgument("synthetic config fields must all be positive");
  }
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);

  Vector direction(static_cast<Eigen::Index>(cfg.dims));
  for (auto& v : direction) v = gauss(rng);
  direction.normalize();

  const double mid = 0.5 * static_cast<double>(cfg.n_classes - 1);
  const std::size_t n = cfg.n_classes * cfg.per_class;
  Dataset out;
  out.input_shape = {cfg.dims};
  out.n_classes = cfg.n_classes;
  out.split = Split::Synthetic;
  out.inputs.resize(static_cast<Eigen::Index>(cfg.dims), static_cast<Eigen::Index>(n));
  out.labels.reserve(n);
  std::size_t col = 0;
  for (std::size_t k = 0; k < cfg.n_classes; ++k) {
    const Vector mean = Vector::Constant(static_cast<Eigen::Index>(cfg.dims), 127.5) +
                        (static_cast<double>(k) - mid) * cfg.separation * direction;
    for (std::size_t i = 0; i < cfg.per_class; ++i, ++col) {
      for (Eigen::Index d = 0; d < mean.size(); ++d) {
        out.inputs(d, static_cast<Eigen::Index>(col)) =
            std::clamp(mean(d) + cfg.cluster_std * gauss(rng), 0.0, 255.0);
      }
      out.labels.push_back(k);
    }
  }
  return out;
}

Dataset shuffle_labels(const Dataset& data, std::uint64_t seed) {
  if (data.size() == 0) throw InvalidArgument("cannot shuffle an empty dataset");
  Dataset out = data;
  std::mt19937_64 rng(seed);
  std::shuffle(out.labels.begin(), out.labels.end(), rng);
  return out;
}

}  // namespace advscale
