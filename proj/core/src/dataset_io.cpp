#include "nap/dataset_io.hpp"

#include <fstream>
#include <iterator>
#include <json.hpp>

#include "nap/binary_io.hpp"
#include "nap/errors.hpp"

namespace nap {
namespace {

constexpr std::string_view kMagic = "NAPD";

using nlohmann::json;

json header_for(std::span<const PredictionSet> sets) {
  json recordings = json::array();
  for (const PredictionSet& set : sets) {
    json modalities = json::array();
    for (const auto& [m, channels] : set.modalities) {
      json chans = json::array();
      for (const auto& [c, predictors] : channels) {
        json preds = json::array();
        for (const auto& [p, density] : predictors) preds.push_back(p);
        chans.push_back({{"id", c}, {"predictors", std::move(preds)}});
      }
      modalities.push_back({{"id", m}, {"channels", std::move(chans)}});
    }
    recordings.push_back(
        {{"id", set.id}, {"epochs", set.epochs()}, {"modalities", std::move(modalities)}});
  }
  return json{{"recordings", std::move(recordings)}};
}

}  // namespace

std::vector<std::uint8_t> encode_dataset(std::span<const PredictionSet> sets) {
  for (const PredictionSet& set : sets) set.validate();
  detail::ByteWriter out;
  out.bytes(kMagic);
  out.u16(kDatasetFormatVersion);
  const std::string header = header_for(sets).dump();
  out.u32(static_cast<std::uint32_t>(header.size()));
  out.bytes(header);
  for (const PredictionSet& set : sets) {
    for (const Hypnodensity* stream : set.all_streams()) {
      for (double v : stream->values()) out.f32(static_cast<float>(v));
    }
    for (int stage : set.truth.stages) out.u8(static_cast<std::uint8_t>(stage));
  }
  return std::move(out.buffer());
}

std::vector<PredictionSet> decode_dataset(std::span<const std::uint8_t> bytes) {
  detail::ByteReader in(bytes);
  if (in.bytes(kMagic.size(), "magic") != kMagic) throw ParseError("bad magic, expected NAPD", 0);
  const std::size_t version_offset = in.offset();
  const std::uint16_t version = in.u16("version");
  if (version != kDatasetFormatVersion) {
    throw UnsupportedVersionError(version, kDatasetFormatVersion, version_offset);
  }
  const std::uint32_t header_length = in.u32("header length");
  const std::size_t header_offset = in.offset();
  const std::string header_text = in.bytes(header_length, "header");

  json header;
  try {
    header = json::parse(header_text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed header: ") + e.what(), header_offset);
  }

  std::vector<PredictionSet> sets;
  try {
    for (const json& rec : header.at("recordings")) {
      PredictionSet set;
      set.id = rec.at("id").get<std::string>();
      const auto epochs = rec.at("epochs").get<std::size_t>();
      if (epochs == 0) throw ParseError("recording " + set.id + " has zero epochs", header_offset);
      if (epochs > in.remaining()) {
        throw ParseError("recording " + set.id + " declares more epochs than the file holds",
                         header_offset);
      }
      for (const json& mod : rec.at("modalities")) {
        auto& channels = set.modalities[mod.at("id").get<std::string>()];
        for (const json& chan : mod.at("channels")) {
          auto& predictors = channels[chan.at("id").get<std::string>()];
          for (const json& pred : chan.at("predictors")) {
            predictors.emplace(pred.get<std::string>(), Hypnodensity(epochs));
          }
        }
      }
      set.truth.stages.resize(epochs);
      sets.push_back(std::move(set));
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed header: ") + e.what(), header_offset);
  }

  // Header order equals map order, so streams are read back in the order
  // they were written.
  for (PredictionSet& set : sets) {
    for (auto& [m, channels] : set.modalities) {
      for (auto& [c, predictors] : channels) {
        for (auto& [p, density] : predictors) {
          for (double& v : density.values()) v = static_cast<double>(in.f32("probability block"));
        }
      }
    }
    for (int& stage : set.truth.stages) {
      const std::size_t at = in.offset();
      stage = in.u8("stage block");
      if (stage >= static_cast<int>(kNumStages)) {
        throw ParseError("stage value " + std::to_string(stage) + " out of range", at);
      }
    }
  }
  if (in.remaining() != 0) {
    throw ParseError(std::to_string(in.remaining()) + " trailing bytes after last recording",
                     in.offset());
  }
  return sets;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(file), std::istreambuf_iterator<char>()};
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream file(tmp, std::ios::binary | std::ios::trunc);
    if (!file) throw Error("cannot write " + tmp.string());
    file.write(reinterpret_cast<const char*>(bytes.data()),
               static_cast<std::streamsize>(bytes.size()));
    if (!file) throw Error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_dataset(const std::filesystem::path& path, std::span<const PredictionSet> sets) {
  write_file_atomic(path, encode_dataset(sets));
}

std::vector<PredictionSet> read_dataset(const std::filesystem::path& path) {
  return decode_dataset(read_file_bytes(path));
}

}  // namespace nap
