#include "nap/checkpoint.hpp"

#include "nap/binary_io.hpp"
#include "nap/dataset_io.hpp"
#include "nap/errors.hpp"

namespace nap {
namespace {

constexpr std::string_view kMagic = "NAPW";

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ModelConfig& config,
                                            const NapParameters& params) {
  config.validate();
  detail::ByteWriter out;
  out.bytes(kMagic);
  out.u16(kCheckpointFormatVersion);
  const std::string config_text = model_config_to_json(config);
  out.u32(static_cast<std::uint32_t>(config_text.size()));
  out.bytes(config_text);
  std::uint32_t blocks = 0;
  visit_parameters([&blocks](const std::string&, const Tensor&) { ++blocks; }, params);
  out.u32(blocks);
  visit_parameters(
      [&out](const std::string& name, const Tensor& t) {
        out.u16(static_cast<std::uint16_t>(name.size()));
        out.bytes(name);
        out.u8(static_cast<std::uint8_t>(t.rank()));
        for (std::size_t extent : t.shape()) out.u32(static_cast<std::uint32_t>(extent));
        for (double v : t.values()) out.f32(static_cast<float>(v));
      },
      params);
  return std::move(out.buffer());
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes,
                             const std::optional<ModelConfig>& expected) {
  detail::ByteReader in(bytes);
  if (in.bytes(kMagic.size(), "magic") != kMagic) throw ParseError("bad magic, expected NAPW", 0);
  const std::size_t version_offset = in.offset();
  const std::uint16_t version = in.u16("version");
  if (version != kCheckpointFormatVersion) {
    throw UnsupportedVersionError(version, kCheckpointFormatVersion, version_offset);
  }
  const std::uint32_t config_length = in.u32("config length");
  const std::size_t config_offset = in.offset();
  Checkpoint cp;
  try {
    cp.config = model_config_from_json(in.bytes(config_length, "config"));
    cp.config.validate();
  } catch (const ConfigError& e) {
    throw ParseError(e.what(), config_offset);
  }
  if (expected && !(*expected == cp.config)) {
    throw ConfigMismatchError("checkpoint config " + model_config_to_json(cp.config) +
                              " does not match expected " + model_config_to_json(*expected));
  }

  // Shapes come from a freshly initialized model of the stored config.
  cp.params = zeros_like(init_parameters(cp.config, 0));
  std::uint32_t expected_blocks = 0;
  visit_parameters([&](const std::string&, const Tensor&) { ++expected_blocks; }, cp.params);
  const std::size_t count_offset = in.offset();
  const std::uint32_t blocks = in.u32("block count");
  if (blocks != expected_blocks) {
    throw ParseError("checkpoint has " + std::to_string(blocks) + " parameter blocks, config needs " +
                         std::to_string(expected_blocks),
                     count_offset);
  }
  visit_parameters(
      [&in](const std::string& name, Tensor& t) {
        const std::size_t block_offset = in.offset();
        const std::uint16_t name_length = in.u16("block name length");
        const std::string stored = in.bytes(name_length, "block name");
        if (stored != name) {
          throw ParseError("expected parameter block " + name + ", found " + stored, block_offset);
        }
        const std::uint8_t rank = in.u8("block rank");
        Shape shape(rank);
        for (auto& extent : shape) extent = in.u32("block shape");
        if (shape != t.shape()) {
          throw ParseError("parameter " + name + " has shape " + shape_to_string(shape) +
                               ", config implies " + shape_to_string(t.shape()),
                           block_offset);
        }
        for (double& v : t.values()) v = static_cast<double>(in.f32("block values"));
      },
      cp.params);
  if (in.remaining() != 0) {
    throw ParseError("trailing bytes after last parameter block", in.offset());
  }
  return cp;
}

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                     const NapParameters& params) {
  write_file_atomic(path, encode_checkpoint(config, params));
}

Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const std::optional<ModelConfig>& expected) {
  return decode_checkpoint(read_file_bytes(path), expected);
}

NapParameters round_to_checkpoint_precision(const NapParameters& params) {
  NapParameters out = params;
  visit_parameters(
      [](const std::string&, Tensor& t) {
        for (double& v : t.values()) v = static_cast<double>(static_cast<float>(v));
      },
      out);
  return out;
}

}  // namespace nap
