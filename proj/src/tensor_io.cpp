#include "proxattack/tensor_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include <json.hpp>

namespace proxattack {
namespace {

using nlohmann::json;

struct Container {
  std::vector<std::size_t> dims;
  std::string dtype;
  json header;
  std::string payload;
};

template <typename T>
T from_little_endian(const char* bytes) {
  T value;
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(&value, bytes, sizeof(T));
  } else {
    char swapped[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) swapped[i] = bytes[sizeof(T) - 1 - i];
    std::memcpy(&value, swapped, sizeof(T));
  }
  return value;
}

template <typename T>
void append_little_endian(std::string& out, T value) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native != std::endian::little) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
  }
  out.append(bytes, sizeof(T));
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw IoError(path.string() + ": malformed header (empty file)");

  Container c;
  try {
    c.header = json::parse(line);
    c.dims = c.header.at("dims").get<std::vector<std::size_t>>();
    c.dtype = c.header.at("dtype").get<std::string>();
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": malformed header: " + e.what());
  }
  if (c.dims.empty()) throw IoError(path.string() + ": malformed header: empty dims");
  c.payload.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  return c;
}

std::size_t element_count(const std::vector<std::size_t>& dims) {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

void write_container(const std::filesystem::path& path, const json& header,
                     const std::string& payload) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << header.dump() << '\n';
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

void check_payload(const Container& c, std::size_t element_bytes, const std::filesystem::path& path) {
  const std::size_t expected = element_count(c.dims) * element_bytes;
  if (c.payload.size() != expected) {
    throw IoError(path.string() + ": payload mismatch (expected " + std::to_string(expected) +
                  " bytes, found " + std::to_string(c.payload.size()) + ")");
  }
}

}  // namespace

TensorGrid load_tensor(const std::filesystem::path& path) {
  Container c = read_container(path);
  if (c.dtype != "f32") throw IoError(path.string() + ": expected dtype f32, got " + c.dtype);
  if (c.dims.size() != 3) throw IoError(path.string() + ": malformed header: tensor dims must be [c,h,w]");
  check_payload(c, sizeof(float), path);

  std::vector<double> values(element_count(c.dims));
  for (std::size_t i = 0; i < values.size(); ++i) {
    const float v = from_little_endian<float>(c.payload.data() + i * sizeof(float));
    if (!std::isfinite(v)) throw IoError(path.string() + ": non-finite value at index " + std::to_string(i));
    values[i] = v;
  }
  return TensorGrid(Shape{c.dims[0], c.dims[1], c.dims[2]}, std::move(values));
}

void save_tensor(const std::filesystem::path& path, const TensorGrid& tensor) {
  const Shape& s = tensor.shape();
  std::string payload;
  payload.reserve(tensor.size() * sizeof(float));
  for (double v : tensor.values()) {
    const auto f = static_cast<float>(v);
    if (!std::isfinite(f)) throw IoError(path.string() + ": value not representable as f32");
    append_little_endian(payload, f);
  }
  json header = {{"dims", {s.channels, s.height, s.width}}, {"dtype", "f32"}};
  write_container(path, header, payload);
}

LabelMap load_labels(const std::filesystem::path& path, std::optional<std::size_t> num_classes) {
  Container c = read_container(path);
  if (c.dtype != "u16") throw IoError(path.string() + ": expected dtype u16, got " + c.dtype);
  if (c.dims.size() == 3 && c.dims[0] == 1) c.dims.erase(c.dims.begin());
  if (c.dims.size() != 2) throw IoError(path.string() + ": malformed header: label dims must be [h,w]");
  check_payload(c, sizeof(std::uint16_t), path);

  std::vector<std::uint32_t> labels(element_count(c.dims));
  std::uint32_t max_label = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    labels[i] = from_little_endian<std::uint16_t>(c.payload.data() + i * sizeof(std::uint16_t));
    max_label = std::max(max_label, labels[i]);
  }
  std::size_t k = std::max<std::size_t>(2, max_label + 1);
  if (c.header.contains("num_classes")) {
    k = c.header["num_classes"].get<std::size_t>();
  } else if (num_classes) {
    k = *num_classes;
  }
  try {
    return LabelMap(c.dims[0], c.dims[1], k, std::move(labels));
  } catch (const ConfigError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void save_labels(const std::filesystem::path& path, const LabelMap& labels) {
  if (labels.num_classes() > std::numeric_limits<std::uint16_t>::max() + 1ULL) {
    throw IoError(path.string() + ": too many classes for u16 labels");
  }
  std::string payload;
  payload.reserve(labels.pixels() * sizeof(std::uint16_t));
  for (auto label : labels.labels()) append_little_endian(payload, static_cast<std::uint16_t>(label));
  json header = {{"dims", {labels.height(), labels.width()}},
                 {"dtype", "u16"},
                 {"num_classes", labels.num_classes()}};
  write_container(path, header, payload);
}

BinaryMask load_mask(const std::filesystem::path& path) {
  const LabelMap labels = load_labels(path, 2);
  if (labels.num_classes() != 2) throw IoError(path.string() + ": mask must have K=2");
  std::vector<std::uint8_t> bits(labels.labels().begin(), labels.labels().end());
  try {
    return BinaryMask(labels.height(), labels.width(), std::move(bits));
  } catch (const ConfigError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void save_mask(const std::filesystem::path& path, const BinaryMask& mask) {
  std::vector<std::uint32_t> labels(mask.bits().begin(), mask.bits().end());
  save_labels(path, LabelMap(mask.height(), mask.width(), 2, std::move(labels)));
}

}  // namespace proxattack
