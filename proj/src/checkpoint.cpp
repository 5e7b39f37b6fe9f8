#include "ual/checkpoint.hpp"

#include <bit>
#include <cstring>

#include <json.hpp>

#include "ual/error.hpp"
#include "ual/io.hpp"

namespace ual {

namespace {

using json = nlohmann::ordered_json;

constexpr char kMagic[8] = {'U', 'A', 'L', 'C', 'K', 'P', 'T', '\0'};

template <typename Int>
void put_le(std::string& out, Int value) {
  for (std::size_t i = 0; i < sizeof(Int); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
}

template <typename Int>
Int get_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(Int) > in.size()) throw FormatError("checkpoint truncated");
  Int value = 0;
  for (std::size_t i = 0; i < sizeof(Int); ++i) {
    value |= static_cast<Int>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  }
  pos += sizeof(Int);
  return value;
}

void put_floats(std::string& out, std::span<const float> values) {
  for (float f : values) put_le(out, std::bit_cast<std::uint32_t>(f));
}

void get_floats(const std::string& in, std::size_t& pos, std::span<float> values) {
  for (auto& f : values) f = std::bit_cast<float>(get_le<std::uint32_t>(in, pos));
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  const auto& layout = ckpt.params.layout;
  json header;
  header["config"] = json::parse(nlohmann::json(ckpt.params.config).dump());
  header["step"] = ckpt.step;
  header["optimizer_step"] = ckpt.optimizer ? json(ckpt.optimizer->step) : json(nullptr);
  json dir = json::array();
  auto add_dir = [&](const std::string& prefix) {
    for (const auto& t : layout.tensors) dir.push_back({{"name", prefix + t.name}, {"dtype", "f32"}, {"shape", t.shape}});
  };
  add_dir("");
  if (ckpt.optimizer) {
    add_dir("adam.m.");
    add_dir("adam.v.");
  }
  header["tensors"] = std::move(dir);
  const std::string header_text = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, header_text.size());
  out += header_text;
  put_floats(out, ckpt.params.data);
  if (ckpt.optimizer) {
    put_floats(out, ckpt.optimizer->m);
    put_floats(out, ckpt.optimizer->v);
  }
  return out;
}

Checkpoint parse_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("not a checkpoint (bad magic)");
  }
  std::size_t pos = sizeof(kMagic);
  const auto version = get_le<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const auto header_len = get_le<std::uint64_t>(bytes, pos);
  if (pos + header_len > bytes.size()) throw FormatError("checkpoint truncated");
  json header;
  try {
    header = json::parse(bytes.substr(pos, header_len));
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  pos += header_len;

  Checkpoint ckpt;
  try {
    ckpt.params = Parameters<float>::zeros(nlohmann::json::parse(header.at("config").dump()).get<ModelConfig>());
    ckpt.step = header.at("step").get<std::int64_t>();
    const auto& layout = ckpt.params.layout;
    const auto& dir = header.at("tensors");
    const bool has_optimizer = !header.at("optimizer_step").is_null();
    const std::size_t expected = layout.tensors.size() * (has_optimizer ? 3 : 1);
    if (dir.size() != expected) throw FormatError("tensor directory does not match the config");
    for (std::size_t i = 0; i < dir.size(); ++i) {
      const auto& t = layout.tensors[i % layout.tensors.size()];
      if (dir[i].at("dtype").get<std::string>() != "f32") throw FormatError("unsupported dtype");
      if (dir[i].at("shape").get<std::vector<std::size_t>>() != t.shape) {
        throw FormatError("shape of '" + dir[i].at("name").get<std::string>() + "' does not match the config");
      }
    }
    get_floats(bytes, pos, ckpt.params.data);
    if (has_optimizer) {
      auto state = AdamState<float>::zeros(layout.total);
      state.step = header.at("optimizer_step").get<std::int64_t>();
      get_floats(bytes, pos, state.m);
      get_floats(bytes, pos, state.v);
      ckpt.optimizer = std::move(state);
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  if (pos != bytes.size()) throw FormatError("checkpoint has trailing bytes");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  io::write_file_atomic(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  try {
    return parse_checkpoint(io::read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace ual
