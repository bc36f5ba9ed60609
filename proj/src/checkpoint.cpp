#include "dmu/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json_fields.hpp"

namespace dmu {

using json_fields::optional;
using json_fields::reject_unknown;
using json_fields::required;

namespace {

constexpr char kMagic[4] = {'D', 'M', 'U', '1'};
constexpr std::size_t kHeaderBytes = 4 + 4 + 8;

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(const std::string& in, std::size_t offset) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    v |= static_cast<U>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
  }
  return v;
}

Model zero_model(const Topology& topology) {
  topology.validate();
  Model m;
  m.topology = topology;
  for (const auto& layer : topology.layers) m.layers.push_back(zero_params(layer));
  m.readout.W = Matrix(topology.num_classes, topology.output_dim());
  m.readout.b = Vector(topology.num_classes);
  return m;
}

}  // namespace

std::vector<TensorInfo> tensor_layout(const Model& model) {
  std::vector<TensorInfo> out;
  for_each_tensor(model, [&](const std::string& name, std::span<const double>, std::size_t rows,
                             std::size_t cols) { out.push_back({name, rows, cols}); });
  return out;
}

nlohmann::ordered_json topology_to_json(const Topology& topology) {
  nlohmann::ordered_json j;
  j["num_classes"] = topology.num_classes;
  j["layers"] = nlohmann::ordered_json::array();
  for (const auto& l : topology.layers) {
    nlohmann::ordered_json layer;
    layer["cell"] = to_string(l.kind);
    layer["input_dim"] = l.input_dim;
    layer["hidden_dim"] = l.hidden_dim;
    layer["num_delays"] = l.delay.num_delays;
    layer["dilation"] = l.delay.dilation;
    layer["gate_threshold"] = l.delay.gate_threshold;
    layer["activation"] = to_string(l.g_activation);
    j["layers"].push_back(layer);
  }
  return j;
}

Topology topology_from_json(const nlohmann::json& j) {
  reject_unknown(j, {"num_classes", "layers"}, "topology");
  Topology t;
  t.num_classes = required<std::size_t>(j, "num_classes", "topology");
  const auto layers = required<nlohmann::json>(j, "layers", "topology");
  if (!layers.is_array()) throw std::invalid_argument("topology.layers must be an array");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string where = "topology.layers[" + std::to_string(i) + "]";
    const auto& lj = layers[i];
    reject_unknown(lj, {"cell", "input_dim", "hidden_dim", "num_delays", "dilation", "gate_threshold",
                        "activation"},
                   where);
    CellConfig c;
    c.kind = parse_cell_kind(required<std::string>(lj, "cell", where));
    c.input_dim = required<std::size_t>(lj, "input_dim", where);
    c.hidden_dim = required<std::size_t>(lj, "hidden_dim", where);
    c.delay.num_delays = optional<std::size_t>(lj, "num_delays", 0, where);
    c.delay.dilation = optional<std::size_t>(lj, "dilation", 1, where);
    c.delay.gate_threshold = optional<double>(lj, "gate_threshold", 0.0, where);
    c.g_activation = parse_activation(optional<std::string>(lj, "activation", "tanh", where));
    t.layers.push_back(c);
  }
  t.validate();
  return t;
}

std::string encode_checkpoint(const Model& model, const nlohmann::ordered_json& config) {
  nlohmann::ordered_json meta;
  meta["format_version"] = kCheckpointVersion;
  meta["topology"] = topology_to_json(model.topology);
  meta["config"] = config;
  meta["tensors"] = nlohmann::ordered_json::array();
  for (const auto& t : tensor_layout(model)) {
    meta["tensors"].push_back({{"name", t.name}, {"shape", {t.rows, t.cols}}});
  }
  const std::string meta_text = meta.dump();

  std::string out(kMagic, 4);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, meta_text.size());
  out += meta_text;
  for_each_tensor(model, [&](const std::string&, std::span<const double> data, std::size_t,
                             std::size_t) {
    for (double v : data) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  });
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw CheckpointError(CheckpointErrorKind::bad_magic, "checkpoint: bad magic (expected DMU1)");
  }
  if (bytes.size() < kHeaderBytes) {
    throw CheckpointError(CheckpointErrorKind::truncated, "checkpoint: truncated header");
  }
  const auto version = get_le<std::uint32_t>(bytes, 4);
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointErrorKind::version_mismatch,
                          "checkpoint: format version " + std::to_string(version) +
                              ", this build reads " + std::to_string(kCheckpointVersion));
  }
  const auto meta_len = get_le<std::uint64_t>(bytes, 8);
  if (meta_len > bytes.size() - kHeaderBytes) {
    throw CheckpointError(CheckpointErrorKind::truncated, "checkpoint: truncated metadata");
  }

  Checkpoint ck;
  Topology topology;
  std::vector<TensorInfo> declared;
  try {
    const auto meta = nlohmann::ordered_json::parse(bytes.substr(kHeaderBytes, meta_len));
    if (meta.at("format_version").get<std::uint32_t>() != version) {
      throw CheckpointError(CheckpointErrorKind::version_mismatch,
                            "checkpoint: header and metadata versions differ");
    }
    topology = topology_from_json(meta.at("topology"));
    ck.config = meta.at("config");
    for (const auto& t : meta.at("tensors")) {
      const auto shape = t.at("shape");
      declared.push_back({t.at("name").get<std::string>(), shape.at(0).get<std::size_t>(),
                          shape.at(1).get<std::size_t>()});
    }
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(CheckpointErrorKind::malformed,
                          std::string("checkpoint: malformed metadata: ") + e.what());
  }

  ck.model = zero_model(topology);
  const auto expected = tensor_layout(ck.model);
  if (declared != expected) {
    std::string detail = "tensor count " + std::to_string(declared.size()) + " vs " +
                         std::to_string(expected.size());
    for (std::size_t i = 0; i < std::min(declared.size(), expected.size()); ++i) {
      if (!(declared[i] == expected[i])) {
        detail = declared[i].name + " declared " + std::to_string(declared[i].rows) + "x" +
                 std::to_string(declared[i].cols) + ", topology implies " + expected[i].name + " " +
                 std::to_string(expected[i].rows) + "x" + std::to_string(expected[i].cols);
        break;
      }
    }
    throw CheckpointError(CheckpointErrorKind::shape_mismatch, "checkpoint: shape mismatch: " + detail);
  }
  ck.tensors = declared;

  std::size_t scalars = 0;
  for (const auto& t : declared) scalars += t.size();
  const std::size_t payload = bytes.size() - kHeaderBytes - meta_len;
  if (payload < scalars * 8) {
    throw CheckpointError(CheckpointErrorKind::truncated,
                          "checkpoint: payload holds " + std::to_string(payload / 8) + " of " +
                              std::to_string(scalars) + " values");
  }
  if (payload > scalars * 8) {
    throw CheckpointError(CheckpointErrorKind::malformed, "checkpoint: trailing bytes after payload");
  }
  std::size_t offset = kHeaderBytes + meta_len;
  for_each_tensor(ck.model, [&](const std::string&, std::span<double> data, std::size_t,
                                std::size_t) {
    for (double& v : data) {
      v = std::bit_cast<double>(get_le<std::uint64_t>(bytes, offset));
      offset += 8;
    }
  });
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const nlohmann::ordered_json& config) {
  const std::string bytes = encode_checkpoint(model, config);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError(CheckpointErrorKind::io, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError(CheckpointErrorKind::io, "write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointErrorKind::io, "cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return decode_checkpoint(buf.str());
}

}  // namespace dmu
