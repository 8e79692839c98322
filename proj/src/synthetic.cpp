#include "proxattack/synthetic.hpp"

#include <algorithm>
#include <cmath>

#include "proxattack/losses.hpp"

namespace proxattack {
namespace {

struct AdamSlot {
  std::vector<double> m, v;
};

void adam_step(std::vector<double>& param, const std::vector<double>& grad, AdamSlot& slot, double lr,
               std::size_t t) {
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  if (slot.m.empty()) {
    slot.m.assign(param.size(), 0.0);
    slot.v.assign(param.size(), 0.0);
  }
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * grad[i];
    slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * grad[i] * grad[i];
    param[i] -= lr * (slot.m[i] / c1) / (std::sqrt(slot.v[i] / c2) + eps);
  }
}

void accumulate(std::vector<double>& into, const std::vector<double>& from, double scale) {
  if (into.empty()) into.assign(from.size(), 0.0);
  for (std::size_t i = 0; i < from.size(); ++i) into[i] += scale * from[i];
}

}  // namespace

std::vector<double> scene_palette(const SceneSpec& spec) {
  Rng rng(spec.palette_seed);
  std::vector<double> palette(spec.num_classes * spec.image.channels);
  for (double& c : palette) c = 0.5 + rng.uniform(-spec.color_spread, spec.color_spread);
  return palette;
}

Scene make_scene(const SceneSpec& spec, Rng& rng) {
  const Shape& s = spec.image;
  const auto palette = scene_palette(spec);
  const std::size_t regions = std::max<std::size_t>(1, spec.regions);

  std::vector<double> cy(regions), cx(regions);
  std::vector<std::uint32_t> region_class(regions);
  for (std::size_t r = 0; r < regions; ++r) {
    cy[r] = rng.uniform(0.0, static_cast<double>(s.height));
    cx[r] = rng.uniform(0.0, static_cast<double>(s.width));
    region_class[r] = static_cast<std::uint32_t>(rng.index(spec.num_classes));
  }

  std::vector<std::uint32_t> labels(s.pixels());
  TensorGrid image(s);
  for (std::size_t row = 0; row < s.height; ++row) {
    for (std::size_t col = 0; col < s.width; ++col) {
      std::size_t best = 0;
      double best_dist = 0.0;
      for (std::size_t r = 0; r < regions; ++r) {
        const double dy = static_cast<double>(row) + 0.5 - cy[r];
        const double dx = static_cast<double>(col) + 0.5 - cx[r];
        const double dist = dy * dy + dx * dx;
        if (r == 0 || dist < best_dist) {
          best = r;
          best_dist = dist;
        }
      }
      const std::size_t i = row * s.width + col;
      labels[i] = region_class[best];
      for (std::size_t c = 0; c < s.channels; ++c) {
        const double base = palette[labels[i] * s.channels + c];
        image.at(c, i) = std::clamp(base + rng.normal(0.0, spec.noise), 0.0, 1.0);
      }
    }
  }
  return Scene{std::move(image), LabelMap(s.height, s.width, spec.num_classes, std::move(labels))};
}

double pixel_accuracy(const SegmentationModel& model, const std::vector<Scene>& scenes) {
  std::size_t hits = 0, total = 0;
  for (const auto& scene : scenes) {
    const TensorGrid z = model.forward(scene.image);
    const std::size_t k = z.shape().channels;
    for (std::size_t i = 0; i < z.shape().pixels(); ++i) {
      std::size_t arg = 0;
      for (std::size_t c = 1; c < k; ++c) {
        if (z.at(c, i) > z.at(arg, i)) arg = c;
      }
      hits += arg == scene.labels[i];
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

double fit_tiny_conv(TinyConvModel& model, const std::vector<Scene>& scenes, const FitOptions& options) {
  if (scenes.empty()) throw ConfigError("fit_tiny_conv: no scenes");
  AdamSlot w1, b1, w2, b2;
  const double scale = 1.0 / static_cast<double>(scenes.size());
  for (std::size_t step = 1; step <= options.steps; ++step) {
    TinyConvParams total;
    for (const auto& scene : scenes) {
      const TensorGrid logits = model.forward(scene.image);
      const BinaryMask all = BinaryMask::full(scene.labels.height(), scene.labels.width());
      TensorGrid upstream;
      masked_cross_entropy(logits, scene.labels, all, &upstream);
      const TinyConvParams g = model.parameter_gradients(scene.image, upstream);
      accumulate(total.conv1_weight, g.conv1_weight, scale);
      accumulate(total.conv1_bias, g.conv1_bias, scale);
      accumulate(total.conv2_weight, g.conv2_weight, scale);
      accumulate(total.conv2_bias, g.conv2_bias, scale);
    }
    TinyConvParams p = model.params();
    adam_step(p.conv1_weight, total.conv1_weight, w1, options.learning_rate, step);
    adam_step(p.conv1_bias, total.conv1_bias, b1, options.learning_rate, step);
    adam_step(p.conv2_weight, total.conv2_weight, w2, options.learning_rate, step);
    adam_step(p.conv2_bias, total.conv2_bias, b2, options.learning_rate, step);
    model.set_params(std::move(p));
  }
  model.reset_counters();
  const double accuracy = pixel_accuracy(model, scenes);
  model.reset_counters();
  return accuracy;
}

TinyConvModel make_fitted_tiny_conv(const SceneSpec& spec, std::size_t hidden, std::size_t train_scenes,
                                    std::uint64_t seed, const FitOptions& options) {
  Rng rng(seed);
  TinyConvModel model = TinyConvModel::random(spec.image, hidden, spec.num_classes, rng);
  std::vector<Scene> scenes;
  scenes.reserve(train_scenes);
  for (std::size_t i = 0; i < train_scenes; ++i) scenes.push_back(make_scene(spec, rng));
  fit_tiny_conv(model, scenes, options);
  return model;
}

}  // namespace proxattack
