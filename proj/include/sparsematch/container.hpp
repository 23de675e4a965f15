#pragma once

#include "sparsematch/matcher.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace sparsematch {

/// Binary tensor file:
///   "MLWEIGHT" | u32 LE version | u64 LE manifest length | JSON manifest | payload
/// The manifest maps tensor name -> {shape, dtype, offset}; offsets are
/// relative to the payload start and payloads are little-endian row-major.
/// An optional "__metadata__" entry carries free-form JSON.
inline constexpr char kContainerMagic[8] = {'M', 'L', 'W', 'E', 'I', 'G', 'H', 'T'};
inline constexpr std::uint32_t kContainerVersion = 1;

enum class DType { F32, F64 };

std::string to_string(DType d);
std::size_t dtype_size(DType d);

struct StoredTensor {
  std::vector<std::int64_t> shape;
  DType dtype = DType::F32;
  std::vector<std::uint8_t> bytes;  // little-endian payload

  std::size_t element_count() const;

  static StoredTensor from_f32(std::vector<std::int64_t> shape, const float* data);
  static StoredTensor from_f64(std::vector<std::int64_t> shape, const double* data);
  std::vector<float> to_f32() const;   // requires dtype F32
  std::vector<double> to_f64() const;  // F32 payloads are widened

  /// Rank-2 views. Rank-1 tensors become a single column.
  template <typename T>
  static StoredTensor from_matrix(const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>& m);
  Eigen::MatrixXd to_matrix() const;
};

struct TensorContainer {
  std::map<std::string, StoredTensor> tensors;
  nlohmann::json metadata;  // null when absent

  std::vector<std::uint8_t> serialize() const;
  static TensorContainer parse(const std::vector<std::uint8_t>& bytes);

  void save(const std::filesystem::path& path) const;
  static TensorContainer load(const std::filesystem::path& path);

  const StoredTensor& at(const std::string& name) const;
  bool contains(const std::string& name) const { return tensors.count(name) != 0; }
};

nlohmann::json to_json(const MatcherConfig& cfg);
MatcherConfig matcher_config_from_json(const nlohmann::json& j);

/// Weights are stored as f32 with the configuration in the metadata block.
TensorContainer weights_to_container(const MatcherConfig& cfg, const MatcherWeights<float>& w);
MatcherWeights<float> weights_from_container(const TensorContainer& c, MatcherConfig* cfg_out = nullptr);

void save_weights(const std::filesystem::path& path, const MatcherConfig& cfg, const MatcherWeights<float>& w);
MatcherWeights<float> load_weights(const std::filesystem::path& path, MatcherConfig* cfg_out = nullptr);

/// Reads a whole file; PathNotFound when it does not exist.
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
/// Writes via a temporary sibling and rename.
void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace sparsematch
