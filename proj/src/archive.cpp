#include "mmdit/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace mmdit {

namespace {

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

std::size_t align8(std::size_t n) { return (n + 7) & ~std::size_t{7}; }

}  // namespace

std::vector<std::uint8_t> encode_archive(const TensorArchive& archive) {
  nlohmann::json header = nlohmann::json::object();
  std::size_t offset = 0;
  for (const auto& [name, t] : archive.tensors) {
    if (name == kArchiveMetadataKey) throw ContractError("tensor name collides with metadata key");
    header[name] = {{"shape", t.shape()}, {"dtype", "f64"}, {"byte_offset", offset}};
    offset += align8(t.numel() * sizeof(double));
  }
  if (!archive.metadata.empty()) header[kArchiveMetadataKey] = archive.metadata;
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(std::begin(kArchiveMagic), std::end(kArchiveMagic));
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.resize(align8(out.size()), 0);
  const std::size_t base = out.size();
  out.resize(base + offset, 0);
  for (const auto& [name, t] : archive.tensors) {
    std::size_t pos = base + header[name]["byte_offset"].get<std::size_t>();
    for (double v : t.data()) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) out[pos++] = static_cast<std::uint8_t>(bits >> (8 * i));
    }
  }
  return out;
}

TensorArchive decode_archive(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kArchiveMagic, 4) != 0) {
    throw IoError("not a tensor archive (bad magic)");
  }
  const std::uint64_t header_len = get_u64(bytes.data() + 4);
  if (header_len > bytes.size() - 12) throw IoError("tensor archive header truncated");
  const std::string text(bytes.begin() + 12, bytes.begin() + 12 + static_cast<std::ptrdiff_t>(header_len));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("tensor archive header is not valid JSON: ") + e.what());
  }
  const std::size_t base = align8(12 + header_len);

  TensorArchive archive;
  for (auto it = header.begin(); it != header.end(); ++it) {
    if (it.key() == kArchiveMetadataKey) {
      archive.metadata = it.value();
      continue;
    }
    const auto& entry = it.value();
    if (entry.value("dtype", "") != "f64") throw IoError("unsupported dtype for " + it.key());
    Shape shape = entry.at("shape").get<Shape>();
    const std::size_t offset = entry.at("byte_offset").get<std::size_t>();
    const std::size_t n = shape_numel(shape);
    if (offset % 8 != 0 || base + offset + n * 8 > bytes.size()) {
      throw IoError("tensor archive payload out of range for " + it.key());
    }
    std::vector<double> data(n);
    const std::uint8_t* p = bytes.data() + base + offset;
    for (std::size_t i = 0; i < n; ++i) data[i] = std::bit_cast<double>(get_u64(p + 8 * i));
    archive.tensors.emplace(it.key(), Tensor(std::move(shape), std::move(data)));
  }
  return archive;
}

void save_archive(const std::filesystem::path& path, const TensorArchive& archive) {
  const auto bytes = encode_archive(archive);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

TensorArchive load_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_archive(bytes);
}

}  // namespace mmdit
