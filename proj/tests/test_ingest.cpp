#include <cmath>
#include <cstring>
#include <limits>

#include <gtest/gtest.h>

#include "pfrouter/binary_io.hpp"
#include "pfrouter/hash.hpp"
#include "pfrouter/ingest.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace pfrouter;
using pfrouter::testing::error_message;
using pfrouter::testing::TempDir;

namespace {

// Byte image of one matrix file, assembled by hand rather than through ByteWriter.
std::vector<char> matrix_bytes(std::uint32_t rows, std::uint32_t cols, std::uint16_t layer, std::uint8_t pooling,
                               const std::vector<float>& values, std::uint8_t reserved = 0,
                               const char* magic = "PFACT\0\1\0") {
  std::vector<char> out(magic, magic + 8);
  auto put = [&](auto v, int n) {
    for (int i = 0; i < n; ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
  };
  put(rows, 4);
  put(cols, 4);
  put(layer, 2);
  put(pooling, 1);
  put(reserved, 1);
  for (float f : values) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put(bits, 4);
  }
  return out;
}

ActivationManifest small_manifest(int rows, int cols) {
  ActivationManifest m;
  m.encoder_id = "enc";
  m.num_layers = 2;
  m.hidden_dim = cols;
  for (int i = 0; i < rows; ++i) m.query_ids.push_back("q" + std::to_string(i));
  m.matrices.push_back({MatrixKey{1, Pooling::kLastToken}, "layer01_last_token.bin"});
  return m;
}

void write_dump(const fs::path& dir, const ActivationManifest& m, const std::vector<char>& bytes) {
  fs::create_directories(dir);
  io::write_text(dir / "manifest.json", m.to_json().dump(2));
  io::write_file(dir / m.matrices.front().path, bytes);
}

ActivationStore random_store(std::uint64_t seed) {
  ActivationManifest m;
  m.encoder_id = "rand";
  m.num_layers = 4;
  m.hidden_dim = 7;
  for (int i = 0; i < 11; ++i) m.query_ids.push_back("id" + std::to_string(i));
  std::map<MatrixKey, MatrixF> mats;
  Rng rng(seed);
  for (int layer : {2, 3, 4}) {
    for (Pooling p : {Pooling::kLastToken, Pooling::kMean}) {
      MatrixKey key{layer, p};
      m.matrices.push_back({key, canonical_matrix_name(key)});
      MatrixF x(11, 7);
      for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = static_cast<float>(rng.normal() * 1e3);
      mats[key] = x;
    }
  }
  return ActivationStore::from_matrices(m, mats);
}

}  // namespace

TEST(ActivationFormat, HeaderBytesAreExact) {
  TempDir dir;
  MatrixF x(2, 3);
  x << 1, 2, 3, 4, 5, 6;
  write_activation_matrix(dir / "m.bin", x, MatrixKey{5, Pooling::kMean});
  const auto bytes = io::read_file(dir / "m.bin");
  EXPECT_EQ(bytes, matrix_bytes(2, 3, 5, 1, {1, 2, 3, 4, 5, 6}));
  EXPECT_EQ(bytes.size(), 20u + 6 * 4);
}

TEST(ActivationFormat, ExtractorStyleDumpLoads) {
  TempDir dir;
  const auto m = small_manifest(2, 3);
  write_dump(dir.path(), m, matrix_bytes(2, 3, 1, 0, {0.5f, -1.f, 2.f, 3.f, 4.f, -0.25f}));
  const auto store = load_activation_store(dir.path());
  EXPECT_EQ(store.encoder_id(), "enc");
  const MatrixF& x = store.matrix(1, Pooling::kLastToken);
  ASSERT_EQ(x.rows(), 2);
  EXPECT_FLOAT_EQ(x(0, 1), -1.f);
  EXPECT_FLOAT_EQ(x(1, 2), -0.25f);
  // opening the manifest file directly is equivalent to opening its directory
  EXPECT_EQ(load_activation_store(dir / "manifest.json").matrix(1, Pooling::kLastToken), x);
}

TEST(ActivationFormat, ZeroPayload) {
  TempDir dir;
  ActivationManifest m;
  m.encoder_id = "z";
  m.num_layers = 1;
  m.hidden_dim = 3;
  m.query_ids = {"a", "b"};
  m.matrices.push_back({MatrixKey{1, Pooling::kLastToken}, "layer01_last_token.bin"});
  write_dump(dir.path(), m, matrix_bytes(2, 3, 1, 0, std::vector<float>(6, 0.f)));
  EXPECT_TRUE(load_activation_store(dir.path()).matrix(1, Pooling::kLastToken).isZero());
}

TEST(ActivationFormat, RejectsBadMagic) {
  TempDir dir;
  write_dump(dir.path(), small_manifest(2, 3), matrix_bytes(2, 3, 1, 0, std::vector<float>(6), 0, "PFXCT\0\1\0"));
  const auto store = load_activation_store(dir.path());
  EXPECT_NE(error_message([&] { store.matrix(1, Pooling::kLastToken); }).find("malformed header magic"),
            std::string::npos);
}

TEST(ActivationFormat, RejectsRowCountMismatch) {
  TempDir dir;
  write_dump(dir.path(), small_manifest(5, 3), matrix_bytes(4, 3, 1, 0, std::vector<float>(12)));
  const auto store = load_activation_store(dir.path());
  EXPECT_THROW(store.matrix(1, Pooling::kLastToken), DataError);
  EXPECT_NE(error_message([&] { store.validate_all(); }).find("row count mismatch"), std::string::npos);
}

TEST(ActivationFormat, RejectsColumnMismatchHeaderDisagreementAndReservedByte) {
  TempDir dir;
  const auto m = small_manifest(2, 3);
  write_dump(dir / "cols", m, matrix_bytes(2, 4, 1, 0, std::vector<float>(8)));
  EXPECT_NE(error_message([&] { load_activation_store(dir / "cols").validate_all(); }).find("column count mismatch"),
            std::string::npos);
  write_dump(dir / "layer", m, matrix_bytes(2, 3, 2, 0, std::vector<float>(6)));
  EXPECT_NE(error_message([&] { load_activation_store(dir / "layer").validate_all(); }).find("disagrees"),
            std::string::npos);
  write_dump(dir / "pool", m, matrix_bytes(2, 3, 1, 1, std::vector<float>(6)));
  EXPECT_NE(error_message([&] { load_activation_store(dir / "pool").validate_all(); }).find("disagrees"),
            std::string::npos);
  write_dump(dir / "res", m, matrix_bytes(2, 3, 1, 0, std::vector<float>(6), 7));
  EXPECT_NE(error_message([&] { load_activation_store(dir / "res").validate_all(); }).find("reserved"),
            std::string::npos);
  write_dump(dir / "short", m, matrix_bytes(2, 3, 1, 0, std::vector<float>(5)));
  EXPECT_NE(error_message([&] { load_activation_store(dir / "short").validate_all(); }).find("payload size"),
            std::string::npos);
}

TEST(ActivationFormat, NonFiniteValueReportsLayerAndRow) {
  TempDir dir;
  std::vector<float> v(6, 1.f);
  v[4] = std::numeric_limits<float>::quiet_NaN();
  write_dump(dir.path(), small_manifest(2, 3), matrix_bytes(2, 3, 1, 0, v));
  const std::string msg = error_message([&] { load_activation_store(dir.path()).validate_all(); });
  EXPECT_NE(msg.find("non-finite value at layer 1 row 1"), std::string::npos) << msg;
}

TEST(ActivationManifest, Invariants) {
  auto m = small_manifest(2, 3);
  EXPECT_NO_THROW(m.validate());
  auto dup = m;
  dup.query_ids = {"a", "a"};
  EXPECT_NE(error_message([&] { dup.validate(); }).find("duplicate query id"), std::string::npos);
  auto layer = m;
  layer.matrices.front().key.layer = 3;
  EXPECT_NE(error_message([&] { layer.validate(); }).find("outside [0, 2]"), std::string::npos);
  auto dtype = m;
  dtype.dtype = "f16le";
  EXPECT_THROW(dtype.validate(), DataError);
  auto empty = m;
  empty.query_ids.clear();
  EXPECT_NE(error_message([&] { empty.validate(); }).find("empty store"), std::string::npos);
  EXPECT_EQ(m.pooling_modes(), std::set<Pooling>{Pooling::kLastToken});
}

TEST(ActivationStore, EmptyStoreCannotBeWritten) {
  TempDir dir;
  auto m = small_manifest(0, 3);
  m.matrices.clear();
  EXPECT_THROW(write_activation_store(ActivationStore::from_matrices(m, {}), dir.path()), DataError);
}

TEST(ActivationStore, RoundtripIsBitExact) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    TempDir dir;
    const auto store = random_store(seed);
    write_activation_store(store, dir.path());
    const auto back = load_activation_store(dir.path());
    EXPECT_EQ(back.manifest().query_ids, store.manifest().query_ids);
    ASSERT_EQ(back.keys(), store.keys());
    for (const auto& key : store.keys()) {
      const MatrixF& a = store.matrix(key);
      const MatrixF& b = back.matrix(key);
      ASSERT_EQ(a.size(), b.size());
      EXPECT_EQ(std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.size())), 0);
    }
  }
}

TEST(ActivationStore, RepeatedWritesHashIdentically) {
  TempDir dir;
  const auto store = random_store(9);
  write_activation_store(store, dir / "a");
  write_activation_store(store, dir / "b");
  for (const auto& key : store.keys()) {
    const std::string name = canonical_matrix_name(key);
    EXPECT_EQ(sha256_file(dir / "a" / name), sha256_file(dir / "b" / name));
  }
  EXPECT_EQ(sha256_file(dir / "a" / "manifest.json"), sha256_file(dir / "b" / "manifest.json"));
  EXPECT_EQ(canonical_matrix_name(MatrixKey{3, Pooling::kMean}), "layer03_mean.bin");
}

TEST(ActivationStore, LazyLoadingTouchesOnlyRequestedFiles) {
  TempDir dir;
  const auto store = random_store(4);
  write_activation_store(store, dir.path());
  // corrupt a matrix that is never requested
  fs::remove(dir / canonical_matrix_name(MatrixKey{4, Pooling::kMean}));
  io::write_text(dir / canonical_matrix_name(MatrixKey{4, Pooling::kMean}), "garbage");
  const auto lazy = load_activation_store(dir.path());
  EXPECT_NO_THROW(lazy.matrix(2, Pooling::kLastToken));
  EXPECT_THROW(lazy.validate_all(), DataError);
}

TEST(ActivationStore, GatherFollowsRequestedOrder) {
  const auto store = random_store(5);
  const std::vector<std::string> ids{"id7", "id0", "id7"};
  const Matrix g = store.gather(MatrixKey{3, Pooling::kMean}, ids);
  const MatrixF& x = store.matrix(3, Pooling::kMean);
  ASSERT_EQ(g.rows(), 3);
  EXPECT_EQ(g.row(0), x.row(7).cast<double>());
  EXPECT_EQ(g.row(1), x.row(0).cast<double>());
  EXPECT_EQ(g.row(2), g.row(0));
  EXPECT_THROW(store.row_of("nope"), DataError);
  EXPECT_THROW(store.matrix(0, Pooling::kLastToken), DataError);
}
