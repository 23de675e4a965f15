#include "sparsematch/container.hpp"

#include "sparsematch/error.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace sparsematch {

namespace {

constexpr bool kLittleEndianHost = std::endian::native == std::endian::little;

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U value) {
  for (std::size_t k = 0; k < sizeof(U); ++k) out.push_back(static_cast<std::uint8_t>(value >> (8 * k)));
}

template <typename U>
U get_le(const std::uint8_t* p) {
  U v = 0;
  for (std::size_t k = 0; k < sizeof(U); ++k) v |= static_cast<U>(p[k]) << (8 * k);
  return v;
}

// Element-wise copy between host order and little-endian.
template <typename Scalar>
void copy_le(std::uint8_t* dst, const std::uint8_t* src, std::size_t count) {
  if constexpr (kLittleEndianHost) {
    std::memcpy(dst, src, count * sizeof(Scalar));
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      for (std::size_t b = 0; b < sizeof(Scalar); ++b) dst[i * sizeof(Scalar) + b] = src[i * sizeof(Scalar) + sizeof(Scalar) - 1 - b];
    }
  }
}

DType parse_dtype(const std::string& s) {
  if (s == "f32") return DType::F32;
  if (s == "f64") return DType::F64;
  throw Error(ErrorCode::CorruptPayload, "unsupported dtype '" + s + "'");
}

}  // namespace

std::string to_string(DType d) { return d == DType::F32 ? "f32" : "f64"; }

std::size_t dtype_size(DType d) { return d == DType::F32 ? 4 : 8; }

std::size_t StoredTensor::element_count() const {
  std::size_t n = 1;
  for (auto s : shape) n *= static_cast<std::size_t>(s);
  return n;
}

StoredTensor StoredTensor::from_f32(std::vector<std::int64_t> shape, const float* data) {
  StoredTensor t;
  t.shape = std::move(shape);
  t.dtype = DType::F32;
  t.bytes.resize(t.element_count() * 4);
  if (!t.bytes.empty()) copy_le<float>(t.bytes.data(), reinterpret_cast<const std::uint8_t*>(data), t.element_count());
  return t;
}

StoredTensor StoredTensor::from_f64(std::vector<std::int64_t> shape, const double* data) {
  StoredTensor t;
  t.shape = std::move(shape);
  t.dtype = DType::F64;
  t.bytes.resize(t.element_count() * 8);
  if (!t.bytes.empty()) copy_le<double>(t.bytes.data(), reinterpret_cast<const std::uint8_t*>(data), t.element_count());
  return t;
}

std::vector<float> StoredTensor::to_f32() const {
  if (dtype != DType::F32) throw Error(ErrorCode::ShapeMismatch, "tensor is not f32");
  std::vector<float> out(element_count());
  if (!out.empty()) copy_le<float>(reinterpret_cast<std::uint8_t*>(out.data()), bytes.data(), out.size());
  return out;
}

std::vector<double> StoredTensor::to_f64() const {
  if (dtype == DType::F32) {
    const auto f = to_f32();
    return {f.begin(), f.end()};
  }
  std::vector<double> out(element_count());
  if (!out.empty()) copy_le<double>(reinterpret_cast<std::uint8_t*>(out.data()), bytes.data(), out.size());
  return out;
}

template <typename T>
StoredTensor StoredTensor::from_matrix(const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>& m) {
  std::vector<std::int64_t> shape{m.rows(), m.cols()};
  if constexpr (std::is_same_v<T, float>) {
    return from_f32(std::move(shape), m.data());
  } else {
    return from_f64(std::move(shape), m.data());
  }
}

template StoredTensor StoredTensor::from_matrix<float>(const Tensor<float>&);
template StoredTensor StoredTensor::from_matrix<double>(const Tensor<double>&);

Eigen::MatrixXd StoredTensor::to_matrix() const {
  if (shape.size() > 2) throw Error(ErrorCode::ShapeMismatch, "tensor rank above 2");
  const Eigen::Index rows = shape.empty() ? 1 : shape[0];
  const Eigen::Index cols = shape.size() < 2 ? 1 : shape[1];
  const auto values = to_f64();
  return Eigen::Map<const Tensor<double>>(values.data(), rows, cols);
}

std::vector<std::uint8_t> TensorContainer::serialize() const {
  nlohmann::json manifest = nlohmann::json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    if (name == "__metadata__") throw Error(ErrorCode::InvalidArgument, "reserved tensor name");
    if (t.bytes.size() != t.element_count() * dtype_size(t.dtype)) {
      throw Error(ErrorCode::CorruptPayload, "tensor " + name + " payload does not match its shape");
    }
    manifest[name] = {{"shape", t.shape}, {"dtype", to_string(t.dtype)}, {"offset", offset}};
    offset += t.bytes.size();
  }
  if (!metadata.is_null()) manifest["__metadata__"] = metadata;
  const std::string text = manifest.dump();

  std::vector<std::uint8_t> out(std::begin(kContainerMagic), std::end(kContainerMagic));
  put_le<std::uint32_t>(out, kContainerVersion);
  put_le<std::uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + offset);
  for (const auto& [name, t] : tensors) out.insert(out.end(), t.bytes.begin(), t.bytes.end());
  return out;
}

TensorContainer TensorContainer::parse(const std::vector<std::uint8_t>& bytes) {
  constexpr std::size_t header = 8 + 4 + 8;
  if (bytes.size() < header || std::memcmp(bytes.data(), kContainerMagic, 8) != 0) {
    throw Error(ErrorCode::CorruptPayload, "not a tensor container (bad magic)");
  }
  const auto version = get_le<std::uint32_t>(bytes.data() + 8);
  if (version != kContainerVersion) {
    throw Error(ErrorCode::SchemaVersionMismatch,
                "container version " + std::to_string(version) + ", expected " + std::to_string(kContainerVersion));
  }
  const auto manifest_len = get_le<std::uint64_t>(bytes.data() + 12);
  if (manifest_len > bytes.size() - header) throw Error(ErrorCode::CorruptPayload, "manifest length exceeds file size");

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + header, bytes.begin() + header + static_cast<std::ptrdiff_t>(manifest_len));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptPayload, std::string("manifest is not valid JSON: ") + e.what());
  }
  if (!manifest.is_object()) throw Error(ErrorCode::CorruptPayload, "manifest is not a JSON object");

  const std::uint8_t* payload = bytes.data() + header + manifest_len;
  const std::uint64_t payload_len = bytes.size() - header - manifest_len;
  TensorContainer c;
  std::uint64_t covered = 0;
  for (const auto& [name, entry] : manifest.items()) {
    if (name == "__metadata__") {
      c.metadata = entry;
      continue;
    }
    StoredTensor t;
    std::uint64_t offset = 0;
    try {
      t.shape = entry.at("shape").get<std::vector<std::int64_t>>();
      t.dtype = parse_dtype(entry.at("dtype").get<std::string>());
      offset = entry.at("offset").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::CorruptPayload, "bad manifest entry for " + name + ": " + e.what());
    }
    for (auto s : t.shape) {
      if (s < 0) throw Error(ErrorCode::CorruptPayload, "negative dimension in " + name);
    }
    const std::uint64_t len = t.element_count() * dtype_size(t.dtype);
    if (offset > payload_len || len > payload_len - offset) {
      throw Error(ErrorCode::CorruptPayload, "tensor " + name + " extends past the end of the payload");
    }
    t.bytes.assign(payload + offset, payload + offset + len);
    covered += len;
    c.tensors.emplace(name, std::move(t));
  }
  if (covered != payload_len) {
    throw Error(ErrorCode::CorruptPayload, "payload length " + std::to_string(payload_len) +
                                               " differs from declared tensors " + std::to_string(covered));
  }
  return c;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::PathNotFound, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path() && !std::filesystem::exists(path.parent_path())) {
    throw Error(ErrorCode::PathNotFound, "directory does not exist: " + path.parent_path().string());
  }
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::PathNotFound, "cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::PathNotFound, "short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void TensorContainer::save(const std::filesystem::path& path) const { write_file_atomic(path, serialize()); }

TensorContainer TensorContainer::load(const std::filesystem::path& path) { return parse(read_file(path)); }

const StoredTensor& TensorContainer::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw Error(ErrorCode::ShapeMismatch, "container has no tensor '" + name + "'");
  return it->second;
}

nlohmann::json to_json(const MatcherConfig& cfg) {
  return {{"num_blocks", cfg.num_blocks},
          {"d_emb", cfg.d_emb},
          {"d_desc", cfg.d_desc},
          {"head_dim", cfg.head_dim},
          {"ff_expansion", cfg.ff_expansion},
          {"stop_layer", cfg.stop_layer},
          {"inv_temperature", cfg.match.inv_temperature},
          {"match_threshold", cfg.match.match_threshold},
          {"rope_base", cfg.rope_base},
          {"rope_scale", cfg.rope_scale},
          {"norm_eps", cfg.norm_eps}};
}

MatcherConfig matcher_config_from_json(const nlohmann::json& j) {
  MatcherConfig c;
  c.num_blocks = j.value("num_blocks", c.num_blocks);
  c.d_emb = j.value("d_emb", c.d_emb);
  c.d_desc = j.value("d_desc", c.d_desc);
  c.head_dim = j.value("head_dim", c.head_dim);
  c.ff_expansion = j.value("ff_expansion", c.ff_expansion);
  c.stop_layer = j.value("stop_layer", c.num_blocks);
  c.match.inv_temperature = j.value("inv_temperature", c.match.inv_temperature);
  c.match.match_threshold = j.value("match_threshold", c.match.match_threshold);
  c.rope_base = j.value("rope_base", c.rope_base);
  c.rope_scale = j.value("rope_scale", c.rope_scale);
  c.norm_eps = j.value("norm_eps", c.norm_eps);
  c.validate();
  return c;
}

TensorContainer weights_to_container(const MatcherConfig& cfg, const MatcherWeights<float>& w) {
  w.check_shapes(cfg);
  TensorContainer c;
  for (const auto& [name, t] : w.tensors()) c.tensors.emplace(name, StoredTensor::from_matrix(*t));
  c.metadata = {{"kind", "matcher_weights"}, {"config", to_json(cfg)}};
  return c;
}

MatcherWeights<float> weights_from_container(const TensorContainer& c, MatcherConfig* cfg_out) {
  if (!c.metadata.is_object() || !c.metadata.contains("config")) {
    throw Error(ErrorCode::ShapeMismatch, "container carries no matcher configuration");
  }
  const MatcherConfig cfg = matcher_config_from_json(c.metadata.at("config"));
  NamedTensors<float> named;
  for (const auto& [name, t] : c.tensors) {
    if (t.dtype != DType::F32 || t.shape.size() != 2) throw Error(ErrorCode::ShapeMismatch, "bad weight tensor " + name);
    const auto values = t.to_f32();
    named.emplace(name, Eigen::Map<const Tensor<float>>(values.data(), t.shape[0], t.shape[1]));
  }
  auto w = MatcherWeights<float>::from_named(cfg, named);
  if (!w.all_finite()) throw Error(ErrorCode::CorruptPayload, "weights contain non-finite values");
  if (cfg_out) *cfg_out = cfg;
  return w;
}

void save_weights(const std::filesystem::path& path, const MatcherConfig& cfg, const MatcherWeights<float>& w) {
  weights_to_container(cfg, w).save(path);
}

MatcherWeights<float> load_weights(const std::filesystem::path& path, MatcherConfig* cfg_out) {
  return weights_from_container(TensorContainer::load(path), cfg_out);
}

}  // namespace sparsematch
