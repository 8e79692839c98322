#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace proxattack {

class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Invalid arguments or mismatched shapes supplied by the caller.
class ConfigError : public Error {
public:
  using Error::Error;
};

class IoError : public Error {
public:
  using Error::Error;
};

/// A computation produced a NaN/Inf or hit a degenerate input.
class NumericError : public Error {
public:
  using Error::Error;
};

struct Shape {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t pixels() const { return height * width; }
  std::size_t size() const { return channels * height * width; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

/// Dense (C, H, W) array of finite doubles, row-major. Pixel i = r * W + c;
/// element (ch, i) lives at ch * H * W + i.
class TensorGrid {
public:
  TensorGrid() = default;
  explicit TensorGrid(Shape shape, double fill = 0.0);
  /// Throws ConfigError on length mismatch and NumericError on NaN/Inf.
  TensorGrid(Shape shape, std::vector<double> data);

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<const double> values() const { return data_; }
  std::span<double> values() { return data_; }
  const std::vector<double>& data() const { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double at(std::size_t channel, std::size_t pixel) const {
    return data_[channel * shape_.pixels() + pixel];
  }
  double& at(std::size_t channel, std::size_t pixel) {
    return data_[channel * shape_.pixels() + pixel];
  }

  double linf_norm() const;
  bool all_finite() const;

private:
  Shape shape_{};
  std::vector<double> data_;
};

/// Integer class map y or t of shape (H, W), labels in [0, K).
class LabelMap {
public:
  LabelMap() = default;
  LabelMap(std::size_t height, std::size_t width, std::size_t num_classes,
           std::vector<std::uint32_t> labels);

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t pixels() const { return labels_.size(); }
  std::size_t num_classes() const { return num_classes_; }
  std::uint32_t operator[](std::size_t i) const { return labels_[i]; }
  std::span<const std::uint32_t> labels() const { return labels_; }

private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::size_t num_classes_ = 0;
  std::vector<std::uint32_t> labels_;
};

/// 0/1 validity mask of shape (H, W) with at least one active pixel.
class BinaryMask {
public:
  BinaryMask() = default;
  BinaryMask(std::size_t height, std::size_t width, std::vector<std::uint8_t> bits);
  static BinaryMask full(std::size_t height, std::size_t width);

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t pixels() const { return bits_.size(); }
  std::size_t count() const { return count_; }
  bool operator[](std::size_t i) const { return bits_[i] != 0; }
  std::span<const std::uint8_t> bits() const { return bits_; }
  bool operator==(const BinaryMask&) const = default;

private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::size_t count_ = 0;
  std::vector<std::uint8_t> bits_;
};

/// m^T cond / ||m||_1. Entries of cond outside the mask are ignored.
double masked_fraction(std::span<const std::uint8_t> cond, const BinaryMask& mask);

void require_same_pixels(const TensorGrid& grid, const LabelMap& labels, const BinaryMask& mask);

}  // namespace proxattack
