#include "proxattack/models.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "proxattack/tensor_io.hpp"

namespace proxattack {
namespace {

using nlohmann::json;

double softplus(double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); }

double sigmoid(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

// Kernels are (out, in, 3, 3) row-major; tensors are (channels, H, W).

std::vector<double> conv3x3(const std::vector<double>& in, std::size_t in_ch, std::size_t height,
                            std::size_t width, const std::vector<double>& kernel,
                            const std::vector<double>& bias, std::size_t out_ch) {
  const std::size_t hw = height * width;
  std::vector<double> out(out_ch * hw);
  for (std::size_t o = 0; o < out_ch; ++o) {
    std::fill(out.begin() + static_cast<std::ptrdiff_t>(o * hw),
              out.begin() + static_cast<std::ptrdiff_t>((o + 1) * hw), bias[o]);
    for (std::size_t c = 0; c < in_ch; ++c) {
      const double* k = &kernel[(o * in_ch + c) * 9];
      const double* src = &in[c * hw];
      double* dst = &out[o * hw];
      for (std::size_t r = 0; r < height; ++r) {
        for (std::size_t col = 0; col < width; ++col) {
          double acc = 0.0;
          for (int dr = -1; dr <= 1; ++dr) {
            const auto rr = static_cast<std::ptrdiff_t>(r) + dr;
            if (rr < 0 || rr >= static_cast<std::ptrdiff_t>(height)) continue;
            for (int dc = -1; dc <= 1; ++dc) {
              const auto cc = static_cast<std::ptrdiff_t>(col) + dc;
              if (cc < 0 || cc >= static_cast<std::ptrdiff_t>(width)) continue;
              acc += k[(dr + 1) * 3 + (dc + 1)] * src[static_cast<std::size_t>(rr) * width + static_cast<std::size_t>(cc)];
            }
          }
          dst[r * width + col] += acc;
        }
      }
    }
  }
  return out;
}

/// Input-gradient of conv3x3 given the output gradient.
std::vector<double> conv3x3_input_grad(const std::vector<double>& grad_out, std::size_t out_ch,
                                       std::size_t height, std::size_t width,
                                       const std::vector<double>& kernel, std::size_t in_ch) {
  const std::size_t hw = height * width;
  std::vector<double> grad_in(in_ch * hw, 0.0);
  for (std::size_t o = 0; o < out_ch; ++o) {
    for (std::size_t c = 0; c < in_ch; ++c) {
      const double* k = &kernel[(o * in_ch + c) * 9];
      const double* g = &grad_out[o * hw];
      double* dst = &grad_in[c * hw];
      for (std::size_t r = 0; r < height; ++r) {
        for (std::size_t col = 0; col < width; ++col) {
          const double go = g[r * width + col];
          if (go == 0.0) continue;
          for (int dr = -1; dr <= 1; ++dr) {
            const auto rr = static_cast<std::ptrdiff_t>(r) + dr;
            if (rr < 0 || rr >= static_cast<std::ptrdiff_t>(height)) continue;
            for (int dc = -1; dc <= 1; ++dc) {
              const auto cc = static_cast<std::ptrdiff_t>(col) + dc;
              if (cc < 0 || cc >= static_cast<std::ptrdiff_t>(width)) continue;
              dst[static_cast<std::size_t>(rr) * width + static_cast<std::size_t>(cc)] += k[(dr + 1) * 3 + (dc + 1)] * go;
            }
          }
        }
      }
    }
  }
  return grad_in;
}

void conv3x3_param_grad(const std::vector<double>& in, std::size_t in_ch, std::size_t height,
                        std::size_t width, const std::vector<double>& grad_out, std::size_t out_ch,
                        std::vector<double>& grad_kernel, std::vector<double>& grad_bias) {
  const std::size_t hw = height * width;
  grad_kernel.assign(out_ch * in_ch * 9, 0.0);
  grad_bias.assign(out_ch, 0.0);
  for (std::size_t o = 0; o < out_ch; ++o) {
    const double* g = &grad_out[o * hw];
    for (std::size_t p = 0; p < hw; ++p) grad_bias[o] += g[p];
    for (std::size_t c = 0; c < in_ch; ++c) {
      double* gk = &grad_kernel[(o * in_ch + c) * 9];
      const double* src = &in[c * hw];
      for (std::size_t r = 0; r < height; ++r) {
        for (std::size_t col = 0; col < width; ++col) {
          const double go = g[r * width + col];
          if (go == 0.0) continue;
          for (int dr = -1; dr <= 1; ++dr) {
            const auto rr = static_cast<std::ptrdiff_t>(r) + dr;
            if (rr < 0 || rr >= static_cast<std::ptrdiff_t>(height)) continue;
            for (int dc = -1; dc <= 1; ++dc) {
              const auto cc = static_cast<std::ptrdiff_t>(col) + dc;
              if (cc < 0 || cc >= static_cast<std::ptrdiff_t>(width)) continue;
              gk[(dr + 1) * 3 + (dc + 1)] += go * src[static_cast<std::size_t>(rr) * width + static_cast<std::size_t>(cc)];
            }
          }
        }
      }
    }
  }
}

TensorGrid as_tensor(const std::vector<double>& v, Shape shape) { return TensorGrid(shape, v); }

std::vector<double> tensor_values(const std::filesystem::path& path, std::size_t expected) {
  const TensorGrid t = load_tensor(path);
  if (t.size() != expected) {
    throw IoError(path.string() + ": expected " + std::to_string(expected) + " values, found " +
                  std::to_string(t.size()));
  }
  return t.data();
}

void write_manifest(const std::filesystem::path& dir, const json& manifest) {
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << '\n';
}

}  // namespace

// ---------------------------------------------------------------------------

TensorGrid SegmentationModel::forward(const TensorGrid& x) const {
  if (!(x.shape() == input_shape())) {
    throw ConfigError("model input " + x.shape().str() + " does not match " + input_shape().str());
  }
  ++forward_calls_;
  return do_forward(x);
}

TensorGrid SegmentationModel::vjp(const TensorGrid& x, const TensorGrid& upstream) const {
  const Shape in = input_shape();
  if (!(x.shape() == in)) {
    throw ConfigError("model input " + x.shape().str() + " does not match " + in.str());
  }
  const Shape out{num_classes(), in.height, in.width};
  if (!(upstream.shape() == out)) {
    throw ConfigError("upstream gradient " + upstream.shape().str() + " does not match " + out.str());
  }
  ++backward_calls_;
  return do_vjp(x, upstream);
}

// ---------------------------------------------------------------------------

PixelAffineModel::PixelAffineModel(Shape input_shape, std::size_t num_classes,
                                   std::vector<double> weight, std::vector<double> bias)
    : shape_(input_shape), classes_(num_classes), weight_(std::move(weight)), bias_(std::move(bias)) {
  if (classes_ < 2) throw ConfigError("pixel affine model needs K >= 2");
  if (weight_.size() != classes_ * shape_.channels) throw ConfigError("pixel affine weight must be (K, C)");
  if (bias_.size() != classes_) throw ConfigError("pixel affine bias must have K entries");
}

PixelAffineModel PixelAffineModel::random(Shape input_shape, std::size_t num_classes, Rng& rng) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(input_shape.channels));
  std::vector<double> weight(num_classes * input_shape.channels);
  std::vector<double> bias(num_classes);
  for (double& w : weight) w = rng.normal(0.0, scale);
  for (double& b : bias) b = rng.normal(0.0, scale);
  return PixelAffineModel(input_shape, num_classes, std::move(weight), std::move(bias));
}

std::unique_ptr<SegmentationModel> PixelAffineModel::clone() const {
  return std::make_unique<PixelAffineModel>(shape_, classes_, weight_, bias_);
}

TensorGrid PixelAffineModel::do_forward(const TensorGrid& x) const {
  const std::size_t hw = shape_.pixels();
  TensorGrid out(Shape{classes_, shape_.height, shape_.width});
  for (std::size_t k = 0; k < classes_; ++k) {
    for (std::size_t i = 0; i < hw; ++i) {
      double acc = bias_[k];
      for (std::size_t c = 0; c < shape_.channels; ++c) acc += weight_[k * shape_.channels + c] * x.at(c, i);
      out.at(k, i) = acc;
    }
  }
  return out;
}

TensorGrid PixelAffineModel::do_vjp(const TensorGrid&, const TensorGrid& upstream) const {
  const std::size_t hw = shape_.pixels();
  TensorGrid grad(shape_);
  for (std::size_t c = 0; c < shape_.channels; ++c) {
    for (std::size_t i = 0; i < hw; ++i) {
      double acc = 0.0;
      for (std::size_t k = 0; k < classes_; ++k) acc += upstream.at(k, i) * weight_[k * shape_.channels + c];
      grad.at(c, i) = acc;
    }
  }
  return grad;
}

void PixelAffineModel::save(const std::filesystem::path& dir) const {
  json manifest = {{"architecture", architecture()},
                   {"num_classes", classes_},
                   {"input_shape", {shape_.channels, shape_.height, shape_.width}},
                   {"tensors", {{"weight", "weight.tensor"}, {"bias", "bias.tensor"}}}};
  write_manifest(dir, manifest);
  save_tensor(dir / "weight.tensor", as_tensor(weight_, Shape{1, classes_, shape_.channels}));
  save_tensor(dir / "bias.tensor", as_tensor(bias_, Shape{1, 1, classes_}));
}

// ---------------------------------------------------------------------------

TinyConvModel::TinyConvModel(Shape input_shape, TinyConvParams params) : shape_(input_shape) {
  if (params.in_channels != shape_.channels) throw ConfigError("tiny conv: channel mismatch");
  set_params(std::move(params));
}

void TinyConvModel::set_params(TinyConvParams params) {
  const std::size_t c = params.in_channels, f = params.hidden, k = params.classes;
  if (c != shape_.channels) throw ConfigError("tiny conv: channel mismatch");
  if (k < 2 || f == 0) throw ConfigError("tiny conv: needs K >= 2 and at least one hidden channel");
  if (params.conv1_weight.size() != f * c * 9 || params.conv1_bias.size() != f ||
      params.conv2_weight.size() != k * f * 9 || params.conv2_bias.size() != k) {
    throw ConfigError("tiny conv: parameter sizes do not match (F, C, K)");
  }
  params_ = std::move(params);
}

TinyConvModel TinyConvModel::random(Shape input_shape, std::size_t hidden, std::size_t num_classes, Rng& rng) {
  TinyConvParams p;
  p.in_channels = input_shape.channels;
  p.hidden = hidden;
  p.classes = num_classes;
  p.conv1_weight.resize(hidden * input_shape.channels * 9);
  p.conv2_weight.resize(num_classes * hidden * 9);
  p.conv1_bias.assign(hidden, 0.0);
  p.conv2_bias.assign(num_classes, 0.0);
  const double s1 = 1.0 / std::sqrt(static_cast<double>(input_shape.channels * 9));
  const double s2 = 1.0 / std::sqrt(static_cast<double>(hidden * 9));
  for (double& w : p.conv1_weight) w = rng.normal(0.0, s1);
  for (double& w : p.conv2_weight) w = rng.normal(0.0, s2);
  return TinyConvModel(input_shape, std::move(p));
}

std::unique_ptr<SegmentationModel> TinyConvModel::clone() const {
  return std::make_unique<TinyConvModel>(*this);
}

void TinyConvModel::inject_backward_fault(BackwardFault fault) {
  const auto& target = fault.tensor == "conv1_weight"   ? params_.conv1_weight
                       : fault.tensor == "conv2_weight" ? params_.conv2_weight
                                                        : throw ConfigError("unknown fault tensor " + fault.tensor);
  if (fault.index >= target.size()) throw ConfigError("fault index out of range");
  fault_ = std::move(fault);
}

TensorGrid TinyConvModel::do_forward(const TensorGrid& x) const {
  const auto& p = params_;
  auto hidden = conv3x3(x.data(), p.in_channels, shape_.height, shape_.width, p.conv1_weight,
                        p.conv1_bias, p.hidden);
  for (double& h : hidden) h = softplus(h);
  auto logits = conv3x3(hidden, p.hidden, shape_.height, shape_.width, p.conv2_weight,
                        p.conv2_bias, p.classes);
  return TensorGrid(Shape{p.classes, shape_.height, shape_.width}, std::move(logits));
}

TensorGrid TinyConvModel::do_vjp(const TensorGrid& x, const TensorGrid& upstream) const {
  const auto& p = params_;
  std::vector<double> w1 = p.conv1_weight;
  std::vector<double> w2 = p.conv2_weight;
  if (fault_) (fault_->tensor == "conv1_weight" ? w1 : w2)[fault_->index] += fault_->delta;

  const auto pre = conv3x3(x.data(), p.in_channels, shape_.height, shape_.width, p.conv1_weight,
                           p.conv1_bias, p.hidden);
  auto grad_hidden = conv3x3_input_grad(upstream.data(), p.classes, shape_.height, shape_.width, w2, p.hidden);
  for (std::size_t i = 0; i < grad_hidden.size(); ++i) grad_hidden[i] *= sigmoid(pre[i]);
  auto grad_x = conv3x3_input_grad(grad_hidden, p.hidden, shape_.height, shape_.width, w1, p.in_channels);
  return TensorGrid(shape_, std::move(grad_x));
}

TinyConvParams TinyConvModel::parameter_gradients(const TensorGrid& x, const TensorGrid& upstream) const {
  const auto& p = params_;
  const std::size_t h = shape_.height, w = shape_.width;
  const auto pre = conv3x3(x.data(), p.in_channels, h, w, p.conv1_weight, p.conv1_bias, p.hidden);
  std::vector<double> act(pre.size());
  std::transform(pre.begin(), pre.end(), act.begin(), softplus);

  TinyConvParams g;
  g.in_channels = p.in_channels;
  g.hidden = p.hidden;
  g.classes = p.classes;
  conv3x3_param_grad(act, p.hidden, h, w, upstream.data(), p.classes, g.conv2_weight, g.conv2_bias);
  auto grad_hidden = conv3x3_input_grad(upstream.data(), p.classes, h, w, p.conv2_weight, p.hidden);
  for (std::size_t i = 0; i < grad_hidden.size(); ++i) grad_hidden[i] *= sigmoid(pre[i]);
  conv3x3_param_grad(x.data(), p.in_channels, h, w, grad_hidden, p.hidden, g.conv1_weight, g.conv1_bias);
  return g;
}

void TinyConvModel::save(const std::filesystem::path& dir) const {
  const auto& p = params_;
  json manifest = {{"architecture", architecture()},
                   {"num_classes", p.classes},
                   {"hidden_channels", p.hidden},
                   {"input_shape", {shape_.channels, shape_.height, shape_.width}},
                   {"tensors",
                    {{"conv1_weight", "conv1_weight.tensor"},
                     {"conv1_bias", "conv1_bias.tensor"},
                     {"conv2_weight", "conv2_weight.tensor"},
                     {"conv2_bias", "conv2_bias.tensor"}}}};
  if (fault_) {
    manifest["backward_fault"] = {{"tensor", fault_->tensor}, {"index", fault_->index}, {"delta", fault_->delta}};
  }
  write_manifest(dir, manifest);
  save_tensor(dir / "conv1_weight.tensor", as_tensor(p.conv1_weight, Shape{p.hidden * p.in_channels, 3, 3}));
  save_tensor(dir / "conv1_bias.tensor", as_tensor(p.conv1_bias, Shape{1, 1, p.hidden}));
  save_tensor(dir / "conv2_weight.tensor", as_tensor(p.conv2_weight, Shape{p.classes * p.hidden, 3, 3}));
  save_tensor(dir / "conv2_bias.tensor", as_tensor(p.conv2_bias, Shape{1, 1, p.classes}));
}

// ---------------------------------------------------------------------------

std::unique_ptr<SegmentationModel> load_model(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open " + manifest_path.string());
  json manifest;
  try {
    manifest = json::parse(in);
    const auto arch = manifest.at("architecture").get<std::string>();
    const auto k = manifest.at("num_classes").get<std::size_t>();
    const auto dims = manifest.at("input_shape").get<std::vector<std::size_t>>();
    if (dims.size() != 3) throw IoError(manifest_path.string() + ": input_shape must be [c,h,w]");
    const Shape shape{dims[0], dims[1], dims[2]};
    const auto& tensors = manifest.at("tensors");
    const auto file = [&](const char* name) { return dir / tensors.at(name).get<std::string>(); };

    if (arch == "pixel_affine") {
      return std::make_unique<PixelAffineModel>(shape, k, tensor_values(file("weight"), k * shape.channels),
                                                tensor_values(file("bias"), k));
    }
    if (arch == "tiny_conv") {
      TinyConvParams p;
      p.in_channels = shape.channels;
      p.hidden = manifest.at("hidden_channels").get<std::size_t>();
      p.classes = k;
      p.conv1_weight = tensor_values(file("conv1_weight"), p.hidden * p.in_channels * 9);
      p.conv1_bias = tensor_values(file("conv1_bias"), p.hidden);
      p.conv2_weight = tensor_values(file("conv2_weight"), k * p.hidden * 9);
      p.conv2_bias = tensor_values(file("conv2_bias"), k);
      auto model = std::make_unique<TinyConvModel>(shape, std::move(p));
      if (manifest.contains("backward_fault")) {
        const auto& f = manifest["backward_fault"];
        model->inject_backward_fault(BackwardFault{f.at("tensor").get<std::string>(),
                                                   f.at("index").get<std::size_t>(),
                                                   f.at("delta").get<double>()});
      }
      return model;
    }
    throw IoError(manifest_path.string() + ": unknown architecture '" + arch + "'");
  } catch (const json::exception& e) {
    throw IoError(manifest_path.string() + ": malformed manifest: " + e.what());
  } catch (const ConfigError& e) {
    throw IoError(manifest_path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------

GradcheckReport gradcheck(const SegmentationModel& model, const TensorGrid& x,
                          const GradcheckOptions& options) {
  Rng rng(options.seed);
  const Shape in = model.input_shape();
  const Shape out{model.num_classes(), in.height, in.width};
  TensorGrid upstream(out);
  for (double& u : upstream.values()) u = rng.normal();

  const TensorGrid analytic = model.vjp(x, upstream);
  // <u, f(x+) - f(x-)> rather than <u, f(x+)> - <u, f(x-)>: outputs the probe
  // does not touch cancel exactly instead of adding rounding noise.
  const auto directional = [&](const TensorGrid& plus, const TensorGrid& minus) {
    const TensorGrid zp = model.forward(plus), zm = model.forward(minus);
    double acc = 0.0;
    for (std::size_t i = 0; i < zp.size(); ++i) acc += upstream[i] * (zp[i] - zm[i]);
    return acc;
  };

  GradcheckReport report;
  report.tolerance = options.tolerance;
  report.coordinates = std::min(options.coordinates, x.size());
  TensorGrid plus = x, minus = x;
  for (std::size_t n = 0; n < report.coordinates; ++n) {
    const std::size_t idx = report.coordinates == x.size() ? n : rng.index(x.size());
    plus[idx] = x[idx] + options.step;
    minus[idx] = x[idx] - options.step;
    const double numeric = directional(plus, minus) / (plus[idx] - minus[idx]);
    plus[idx] = x[idx];
    minus[idx] = x[idx];
    const double a = analytic[idx];
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
    if (rel >= report.max_relative_error) {
      report.max_relative_error = rel;
      report.worst_index = idx;
    }
  }
  report.passed = report.max_relative_error < options.tolerance;
  return report;
}

}  // namespace proxattack
