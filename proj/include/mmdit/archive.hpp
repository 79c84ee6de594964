#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "mmdit/tensor.hpp"

namespace mmdit {

// Named-tensor container used for checkpoints and golden fixtures.
//
// Layout: "MMT1" | u64 LE header length | UTF-8 JSON header | zero padding to
// an 8-byte boundary | payloads. The header maps each name to
// {"shape": [...], "dtype": "f64", "byte_offset": n} with offsets relative to
// the start of the payload section; payloads are little-endian and 8-byte
// aligned. Free-form metadata lives under the "__metadata__" key.
struct TensorArchive {
  std::map<std::string, Tensor> tensors;
  nlohmann::json metadata = nlohmann::json::object();
};

inline constexpr char kArchiveMagic[4] = {'M', 'M', 'T', '1'};
inline constexpr const char* kArchiveMetadataKey = "__metadata__";

std::vector<std::uint8_t> encode_archive(const TensorArchive& archive);
TensorArchive decode_archive(const std::vector<std::uint8_t>& bytes);

void save_archive(const std::filesystem::path& path, const TensorArchive& archive);
TensorArchive load_archive(const std::filesystem::path& path);

}  // namespace mmdit
