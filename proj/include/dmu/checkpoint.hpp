#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "dmu/backprop.hpp"
#include "json.hpp"

namespace dmu {

// Layout:
//   "DMU1"                      4 bytes
//   format version              uint32, little endian
//   metadata length L           uint64, little endian
//   metadata                    L bytes of JSON: {"format_version", "topology",
//                               "config", "tensors": [{"name", "shape"}]}
//   payload                     float64 little endian, tensors in declared order
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointErrorKind { io, bad_magic, version_mismatch, shape_mismatch, truncated, malformed };

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(CheckpointErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  CheckpointErrorKind kind() const { return kind_; }

 private:
  CheckpointErrorKind kind_;
};

struct TensorInfo {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t size() const { return rows * cols; }
  friend bool operator==(const TensorInfo&, const TensorInfo&) = default;
};

std::vector<TensorInfo> tensor_layout(const Model& model);

nlohmann::ordered_json topology_to_json(const Topology& topology);
// Throws std::invalid_argument naming the offending key.
Topology topology_from_json(const nlohmann::json& j);

struct Checkpoint {
  Model model;
  nlohmann::ordered_json config;  // echo of the run configuration (may be null)
  std::vector<TensorInfo> tensors;
};

std::string encode_checkpoint(const Model& model, const nlohmann::ordered_json& config = nullptr);
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const nlohmann::ordered_json& config = nullptr);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace dmu
