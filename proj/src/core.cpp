#include "proxattack/core.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace proxattack {

std::string Shape::str() const {
  return "(" + std::to_string(channels) + ", " + std::to_string(height) + ", " +
         std::to_string(width) + ")";
}

TensorGrid::TensorGrid(Shape shape, double fill) : shape_(shape), data_(shape.size(), fill) {
  if (!std::isfinite(fill)) throw NumericError("tensor fill value is not finite");
}

TensorGrid::TensorGrid(Shape shape, std::vector<double> data)
    : shape_(shape), data_(std::move(data)) {
  if (data_.size() != shape_.size()) {
    throw ConfigError("tensor data length " + std::to_string(data_.size()) +
                      " does not match shape " + shape_.str());
  }
  if (!all_finite()) throw NumericError("tensor contains non-finite values");
}

double TensorGrid::linf_norm() const {
  double norm = 0.0;
  for (double v : data_) norm = std::max(norm, std::abs(v));
  return norm;
}

bool TensorGrid::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

LabelMap::LabelMap(std::size_t height, std::size_t width, std::size_t num_classes,
                   std::vector<std::uint32_t> labels)
    : height_(height), width_(width), num_classes_(num_classes), labels_(std::move(labels)) {
  if (num_classes_ < 2) throw ConfigError("label map needs at least 2 classes");
  if (labels_.size() != height_ * width_) {
    throw ConfigError("label count does not match " + std::to_string(height_) + "x" +
                      std::to_string(width_));
  }
  for (auto label : labels_) {
    if (label >= num_classes_) {
      throw ConfigError("label " + std::to_string(label) + " out of range for K=" +
                        std::to_string(num_classes_));
    }
  }
}

BinaryMask::BinaryMask(std::size_t height, std::size_t width, std::vector<std::uint8_t> bits)
    : height_(height), width_(width), bits_(std::move(bits)) {
  if (bits_.size() != height_ * width_) throw ConfigError("mask size does not match its shape");
  for (auto& b : bits_) b = b != 0 ? 1 : 0;
  count_ = static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
  if (count_ == 0) throw ConfigError("mask has no active pixel");
}

BinaryMask BinaryMask::full(std::size_t height, std::size_t width) {
  return BinaryMask(height, width, std::vector<std::uint8_t>(height * width, 1));
}

double masked_fraction(std::span<const std::uint8_t> cond, const BinaryMask& mask) {
  if (cond.size() != mask.pixels()) throw ConfigError("masked_fraction: shape mismatch");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < cond.size(); ++i) {
    if (mask[i] && cond[i] != 0) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(mask.count());
}

void require_same_pixels(const TensorGrid& grid, const LabelMap& labels, const BinaryMask& mask) {
  const Shape& s = grid.shape();
  if (labels.height() != s.height || labels.width() != s.width) {
    throw ConfigError("label map shape does not match tensor " + s.str());
  }
  if (mask.height() != s.height || mask.width() != s.width) {
    throw ConfigError("mask shape does not match tensor " + s.str());
  }
}

}  // namespace proxattack
