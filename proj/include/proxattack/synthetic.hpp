#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "proxattack/core.hpp"
#include "proxattack/models.hpp"
#include "proxattack/rng.hpp"

namespace proxattack {

/// Toy segmentation scenes: a Voronoi partition of the image into regions,
/// each region a class with its own palette colour plus Gaussian noise.
struct SceneSpec {
  Shape image{3, 16, 16};
  std::size_t num_classes = 3;
  std::size_t regions = 4;
  double color_spread = 0.08;  ///< palette colours in 0.5 +/- spread
  double noise = 0.01;
  std::uint64_t palette_seed = 7;
};

struct Scene {
  TensorGrid image;
  LabelMap labels;
};

/// K x C class colours, fixed by spec.palette_seed.
std::vector<double> scene_palette(const SceneSpec& spec);
Scene make_scene(const SceneSpec& spec, Rng& rng);

struct FitOptions {
  std::size_t steps = 600;
  double learning_rate = 0.02;  ///< Adam step size
};

/// Full-batch Adam on mean cross-entropy. Returns the final pixel accuracy.
double fit_tiny_conv(TinyConvModel& model, const std::vector<Scene>& scenes, const FitOptions& options = {});

/// Fraction of pixels whose argmax (lowest index on ties) equals the label.
double pixel_accuracy(const SegmentationModel& model, const std::vector<Scene>& scenes);

/// A TinyConvModel fitted to `train_scenes` scenes drawn from `spec`.
TinyConvModel make_fitted_tiny_conv(const SceneSpec& spec, std::size_t hidden, std::size_t train_scenes,
                                    std::uint64_t seed, const FitOptions& options = {});

}  // namespace proxattack
