#include <cstring>
#include <filesystem>

#include "doctest.h"
#include "mmdit/archive.hpp"

using namespace mmdit;

TEST_CASE("archive round-trips tensors and metadata bit-exactly") {
  Rng rng(1);
  TensorArchive a;
  a.tensors["mask/eye"] = Tensor::randn({3, 5}, rng);
  a.tensors["w"] = Tensor(Shape{1}, -0.0);
  a.tensors["z"] = Tensor::randn({2, 2, 2}, rng);
  a.metadata["config"] = {{"d", 4}};
  const auto bytes = encode_archive(a);
  REQUIRE(bytes.size() > 12);
  CHECK(std::memcmp(bytes.data(), "MMT1", 4) == 0);
  const TensorArchive b = decode_archive(bytes);
  CHECK(b.metadata == a.metadata);
  REQUIRE(b.tensors.size() == 3);
  for (const auto& [name, t] : a.tensors) {
    CAPTURE(name);
    CHECK(b.tensors.at(name).shape() == t.shape());
    CHECK(std::memcmp(b.tensors.at(name).data().data(), t.data().data(), t.numel() * 8) == 0);
  }
}

TEST_CASE("archive layout: length-prefixed header and aligned payloads") {
  TensorArchive a;
  a.tensors["a"] = Tensor(Shape{3}, std::vector<double>{1, 2, 3});
  a.tensors["b"] = Tensor(Shape{1}, 4.0);
  const auto bytes = encode_archive(a);
  std::uint64_t len = 0;
  for (int i = 7; i >= 0; --i) len = (len << 8) | bytes[4 + i];
  const std::string header(bytes.begin() + 12, bytes.begin() + 12 + static_cast<long>(len));
  const auto j = nlohmann::json::parse(header);
  CHECK(j.at("a").at("dtype") == "f64");
  CHECK(j.at("a").at("shape") == nlohmann::json::array({3}));
  const std::size_t payload = (12 + len + 7) / 8 * 8;
  for (const auto& name : {"a", "b"}) {
    const std::size_t off = j.at(name).at("byte_offset").get<std::size_t>();
    CHECK((payload + off) % 8 == 0);
  }
  double first = 0.0;
  std::memcpy(&first, bytes.data() + payload + j.at("b").at("byte_offset").get<std::size_t>(), 8);
  CHECK(first == 4.0);
}

TEST_CASE("archive rejects malformed input") {
  CHECK_THROWS_AS(decode_archive({'X', 'X', 'X', 'X', 0, 0, 0, 0, 0, 0, 0, 0}), IoError);
  TensorArchive a;
  a.tensors["x"] = Tensor(Shape{4}, 1.0);
  auto bytes = encode_archive(a);
  bytes.resize(bytes.size() - 8);
  CHECK_THROWS_AS(decode_archive(bytes), IoError);
  CHECK_THROWS_AS(load_archive("/nonexistent/file.mmt"), IoError);
}

TEST_CASE("archive files on disk") {
  const auto path = std::filesystem::temp_directory_path() / "mmdit_archive_test.mmt";
  TensorArchive a;
  a.tensors["mask/mouth"] = Tensor(Shape{2, 2}, std::vector<double>{0, 1, 1, 0});
  save_archive(path, a);
  const auto b = load_archive(path);
  CHECK(bitwise_equal(b.tensors.at("mask/mouth"), a.tensors.at("mask/mouth")));
  std::filesystem::remove(path);
}
