#pragma once

#include <cstddef>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "proxattack/core.hpp"
#include "proxattack/rng.hpp"

namespace proxattack {

/// Differentiable dense classifier f: x (C,H,W) -> logits (K,H,W).
///
/// forward() and vjp() validate shapes and count invocations; subclasses
/// implement do_forward() / do_vjp(). Counters are the only mutable state,
/// so one instance must not be shared between concurrent attack runs.
class SegmentationModel {
public:
  virtual ~SegmentationModel() = default;

  virtual std::size_t num_classes() const = 0;
  virtual Shape input_shape() const = 0;
  virtual std::string architecture() const = 0;
  virtual std::unique_ptr<SegmentationModel> clone() const = 0;
  /// Writes manifest.json plus one tensor file per parameter into `dir`.
  virtual void save(const std::filesystem::path& dir) const = 0;

  TensorGrid forward(const TensorGrid& x) const;
  /// Gradient of <upstream, f(x)> with respect to x.
  TensorGrid vjp(const TensorGrid& x, const TensorGrid& upstream) const;

  std::size_t forward_calls() const { return forward_calls_; }
  std::size_t backward_calls() const { return backward_calls_; }
  void reset_counters() const { forward_calls_ = backward_calls_ = 0; }

protected:
  virtual TensorGrid do_forward(const TensorGrid& x) const = 0;
  virtual TensorGrid do_vjp(const TensorGrid& x, const TensorGrid& upstream) const = 0;

private:
  mutable std::size_t forward_calls_ = 0;
  mutable std::size_t backward_calls_ = 0;
};

/// logits(k, i) = sum_c weight(k, c) * x(c, i) + bias(k).
class PixelAffineModel final : public SegmentationModel {
public:
  /// `weight` is row-major (K, C).
  PixelAffineModel(Shape input_shape, std::size_t num_classes, std::vector<double> weight,
                   std::vector<double> bias);
  static PixelAffineModel random(Shape input_shape, std::size_t num_classes, Rng& rng);

  std::size_t num_classes() const override { return classes_; }
  Shape input_shape() const override { return shape_; }
  std::string architecture() const override { return "pixel_affine"; }
  std::unique_ptr<SegmentationModel> clone() const override;
  void save(const std::filesystem::path& dir) const override;

  const std::vector<double>& weight() const { return weight_; }
  const std::vector<double>& bias() const { return bias_; }

protected:
  TensorGrid do_forward(const TensorGrid& x) const override;
  TensorGrid do_vjp(const TensorGrid& x, const TensorGrid& upstream) const override;

private:
  Shape shape_;
  std::size_t classes_;
  std::vector<double> weight_;
  std::vector<double> bias_;
};

struct TinyConvParams {
  std::size_t in_channels = 0;
  std::size_t hidden = 0;
  std::size_t classes = 0;
  std::vector<double> conv1_weight;  ///< (F, C, 3, 3)
  std::vector<double> conv1_bias;    ///< (F)
  std::vector<double> conv2_weight;  ///< (K, F, 3, 3)
  std::vector<double> conv2_bias;    ///< (K)
};

/// A fault injected into the backward pass only: the named kernel entry is
/// offset by `delta` when computing vjp(). Used to validate gradient checks.
struct BackwardFault {
  std::string tensor;  ///< "conv1_weight" or "conv2_weight"
  std::size_t index = 0;
  double delta = 0.0;
};

/// conv3x3 (same padding) -> softplus -> conv3x3, with manual backprop.
class TinyConvModel final : public SegmentationModel {
public:
  TinyConvModel(Shape input_shape, TinyConvParams params);
  /// Gaussian init with standard deviation 1/sqrt(fan_in), zero biases.
  static TinyConvModel random(Shape input_shape, std::size_t hidden, std::size_t num_classes, Rng& rng);

  std::size_t num_classes() const override { return params_.classes; }
  Shape input_shape() const override { return shape_; }
  std::string architecture() const override { return "tiny_conv"; }
  std::unique_ptr<SegmentationModel> clone() const override;
  void save(const std::filesystem::path& dir) const override;

  const TinyConvParams& params() const { return params_; }
  void set_params(TinyConvParams params);

  /// Gradients of <upstream, f(x)> w.r.t. all parameters. Not counted.
  TinyConvParams parameter_gradients(const TensorGrid& x, const TensorGrid& upstream) const;

  void inject_backward_fault(BackwardFault fault);
  const std::optional<BackwardFault>& backward_fault() const { return fault_; }

protected:
  TensorGrid do_forward(const TensorGrid& x) const override;
  TensorGrid do_vjp(const TensorGrid& x, const TensorGrid& upstream) const override;

private:
  Shape shape_;
  TinyConvParams params_;
  std::optional<BackwardFault> fault_;
};

std::unique_ptr<SegmentationModel> load_model(const std::filesystem::path& dir);

struct GradcheckReport {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
  double tolerance = 0.0;
  bool passed = false;
};

struct GradcheckOptions {
  double tolerance = 1e-4;
  double step = 1e-5;
  std::size_t coordinates = 32;
  std::uint64_t seed = 0;
};

/// Compares vjp() with central differences of <u, f(x)> along random
/// coordinates, for a random upstream u. Relative error is
/// |a - n| / max(|a|, |n|, 1e-6). Failures are reported, not thrown.
GradcheckReport gradcheck(const SegmentationModel& model, const TensorGrid& x,
                          const GradcheckOptions& options = {});

}  // namespace proxattack
