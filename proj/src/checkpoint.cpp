#include "cfun/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <iterator>

#include "cfun/error.hpp"
#include "json.hpp"

namespace cfun::nn {

void save_checkpoint(const ParamStore& params, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  nlohmann::json entries = nlohmann::json::array();
  std::vector<char> bytes;
  for (const auto& [name, var] : params.params()) {
    const std::size_t offset = bytes.size();
    for (float v : var->value.values()) {
      const auto u = std::bit_cast<std::uint32_t>(v);
      for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<char>((u >> (8 * i)) & 0xFFu));
    }
    entries.push_back({{"name", name},
                       {"shape", var->value.shape()},
                       {"dtype", "f32"},
                       {"offset", offset},
                       {"length", bytes.size() - offset}});
  }
  std::ofstream bin(dir / "weights.bin", std::ios::binary | std::ios::trunc);
  bin.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  std::ofstream man(dir / "manifest.json", std::ios::trunc);
  man << nlohmann::json{{"tensors", entries}}.dump(2) << "\n";
  if (!bin || !man) throw IoError("failed to write checkpoint to " + dir.string());
}

void load_checkpoint(ParamStore& params, const std::filesystem::path& dir) {
  std::ifstream man(dir / "manifest.json");
  if (!man) throw IoError("missing " + (dir / "manifest.json").string());
  std::ifstream bin(dir / "weights.bin", std::ios::binary);
  if (!bin) throw IoError("missing " + (dir / "weights.bin").string());
  const std::vector<char> bytes{std::istreambuf_iterator<char>(bin), std::istreambuf_iterator<char>()};
  nlohmann::json j;
  try {
    man >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint manifest: " + std::string(e.what()));
  }
  std::size_t loaded = 0;
  try {
    for (const auto& e : j.at("tensors")) {
      const auto name = e.at("name").get<std::string>();
      const auto shape = e.at("shape").get<std::vector<int>>();
      const auto offset = e.at("offset").get<std::size_t>();
      const auto length = e.at("length").get<std::size_t>();
      if (e.at("dtype").get<std::string>() != "f32") throw FormatError("checkpoint: unsupported dtype for " + name);
      if (!params.contains(name)) throw FormatError("checkpoint has unknown tensor " + name);
      auto var = params.get(name);
      if (var->value.shape() != shape) throw FormatError("checkpoint shape mismatch for " + name);
      if (length != 4 * var->value.size() || offset + length > bytes.size())
        throw FormatError("checkpoint payload out of range for " + name);
      for (std::size_t i = 0; i < var->value.size(); ++i) {
        std::uint32_t u = 0;
        for (int b = 0; b < 4; ++b)
          u |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[offset + 4 * i + static_cast<std::size_t>(b)]))
               << (8 * b);
        var->value[i] = std::bit_cast<float>(u);
      }
      ++loaded;
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint manifest: " + std::string(e.what()));
  }
  if (loaded != params.params().size()) throw FormatError("checkpoint is missing tensors");
}

}  // namespace cfun::nn
