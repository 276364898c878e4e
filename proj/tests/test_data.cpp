#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>

#include <unistd.h>

#include "kflo/data.hpp"

using namespace kflo;

namespace {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() : path_(fs::temp_directory_path() / ("kflo_data_" + std::to_string(::getpid()))) {
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  fs::path path_;
};

void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void put_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}

std::vector<std::uint8_t> idx_images(std::uint32_t n, std::uint32_t magic = 2051) {
  std::vector<std::uint8_t> b;
  put_be32(b, magic);
  put_be32(b, n);
  put_be32(b, 28);
  put_be32(b, 28);
  for (std::uint32_t i = 0; i < n * 784; ++i) b.push_back(static_cast<std::uint8_t>(i % 256));
  return b;
}

std::vector<std::uint8_t> idx_labels(std::uint32_t n) {
  std::vector<std::uint8_t> b;
  put_be32(b, 2049);
  put_be32(b, n);
  for (std::uint32_t i = 0; i < n; ++i) b.push_back(static_cast<std::uint8_t>(i % 10));
  return b;
}

// `per_class` records of every label, interleaved, pixel bytes set to the record index.
std::vector<std::uint8_t> cifar_records(std::size_t per_class) {
  std::vector<std::uint8_t> b;
  for (std::size_t r = 0; r < per_class * 10; ++r) {
    b.push_back(static_cast<std::uint8_t>(r % 10));
    for (std::size_t p = 0; p < 3072; ++p) b.push_back(static_cast<std::uint8_t>(r % 256));
  }
  return b;
}

}  // namespace

TEST(MnistTest, LoadsFixture) {
  TempDir dir;
  write_bytes(dir.file("img"), idx_images(4));
  write_bytes(dir.file("lab"), idx_labels(4));
  const auto ds = load_mnist_idx(dir.file("img"), dir.file("lab"), "test");
  EXPECT_EQ(ds.images.shape(), (Shape{4, 1, 28, 28}));
  EXPECT_EQ(ds.labels, (std::vector<int>{0, 1, 2, 3}));
  EXPECT_EQ(ds.num_classes, 10u);
  EXPECT_EQ(ds.split, "test");
  EXPECT_NEAR(ds.images[255], (1.0 - 0.1307) / 0.3081, 1e-6);
  EXPECT_NEAR(ds.images[0], -0.1307 / 0.3081, 1e-6);
}

TEST(MnistTest, RejectsBadFiles) {
  TempDir dir;
  write_bytes(dir.file("lab"), idx_labels(4));
  write_bytes(dir.file("bad_magic"), idx_images(4, 2049));
  EXPECT_THROW(load_mnist_idx(dir.file("bad_magic"), dir.file("lab")), DataError);
  write_bytes(dir.file("five"), idx_images(5));
  EXPECT_THROW(load_mnist_idx(dir.file("five"), dir.file("lab")), DataError);
  auto cut = idx_images(4);
  cut.resize(cut.size() - 10);
  write_bytes(dir.file("cut"), cut);
  EXPECT_THROW(load_mnist_idx(dir.file("cut"), dir.file("lab")), DataError);
  write_bytes(dir.file("short"), {0, 0, 8});
  EXPECT_THROW(load_mnist_idx(dir.file("short"), dir.file("lab")), DataError);
  try {
    load_mnist_idx(dir.file("missing"), dir.file("lab"));
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(dir.file("missing")), std::string::npos);
  }
}

TEST(MnistTest, RealDataLoads) {
  const std::string root = std::string(KFLO_DATA_DIR) + "/mnist/";
  const auto train = load_mnist_idx(root + "train-images-idx3-ubyte", root + "train-labels-idx1-ubyte");
  const auto test = load_mnist_idx(root + "t10k-images-idx3-ubyte", root + "t10k-labels-idx1-ubyte", "test");
  EXPECT_GE(train.size(), 2000u);
  EXPECT_GE(test.size(), 1000u);
  EXPECT_EQ(train.sample_shape(), (Shape{1, 28, 28}));
  std::map<int, int> counts;
  for (int l : test.labels) ++counts[l];
  EXPECT_EQ(counts.size(), 10u);
}

TEST(CifarTest, FractionIsStratified) {
  TempDir dir;
  write_bytes(dir.file("b1"), cifar_records(100));
  const auto ds = load_cifar10_bin({dir.file("b1")}, 0.4, 3);
  ASSERT_EQ(ds.size(), 400u);
  std::map<int, int> counts;
  for (int l : ds.labels) ++counts[l];
  for (const auto& [label, n] : counts) EXPECT_EQ(n, 40) << label;
  EXPECT_EQ(counts.size(), 10u);

  const auto again = load_cifar10_bin({dir.file("b1")}, 0.4, 3);
  EXPECT_EQ(again.images, ds.images);
  const auto other = load_cifar10_bin({dir.file("b1")}, 0.4, 4);
  EXPECT_NE(other.images, ds.images);
}

TEST(CifarTest, FullFractionKeepsFileOrder) {
  TempDir dir;
  write_bytes(dir.file("b1"), cifar_records(2));
  write_bytes(dir.file("b2"), cifar_records(1));
  const auto ds = load_cifar10_bin({dir.file("b1"), dir.file("b2")}, 1.0, 0);
  ASSERT_EQ(ds.size(), 30u);
  EXPECT_EQ(ds.images.shape(), (Shape{30, 3, 32, 32}));
  for (std::size_t i = 0; i < 30; ++i) EXPECT_EQ(ds.labels[i], static_cast<int>(i % 10));
  // Record 1 in b1 has pixel byte 1 in every channel.
  EXPECT_NEAR(ds.images[3072 + 1024], (1 / 255.0 - 0.4822) / 0.2435, 1e-6);
}

TEST(CifarTest, RejectsBadFiles) {
  TempDir dir;
  auto bytes = cifar_records(1);
  bytes.pop_back();
  write_bytes(dir.file("short"), bytes);
  EXPECT_THROW(load_cifar10_bin({dir.file("short")}, 1.0, 0), DataError);
  auto bad_label = cifar_records(1);
  bad_label[3073 * 2] = 10;
  write_bytes(dir.file("label"), bad_label);
  EXPECT_THROW(load_cifar10_bin({dir.file("label")}, 1.0, 0), DataError);
  write_bytes(dir.file("ok"), cifar_records(1));
  EXPECT_THROW(load_cifar10_bin({dir.file("ok")}, 0.0, 0), ConfigError);
  EXPECT_THROW(load_cifar10_bin({dir.file("ok")}, 1.5, 0), ConfigError);
}

TEST(DatasetTest, SliceAndGather) {
  TempDir dir;
  write_bytes(dir.file("img"), idx_images(4));
  write_bytes(dir.file("lab"), idx_labels(4));
  const auto ds = load_mnist_idx(dir.file("img"), dir.file("lab"));
  const auto s = ds.slice(1, 2);
  EXPECT_EQ(s.labels, (std::vector<int>{1, 2}));
  EXPECT_EQ(s.images[0], ds.images[784]);
  EXPECT_THROW((void)ds.slice(3, 2), DataError);
  const std::vector<std::size_t> idx{3, 0};
  EXPECT_EQ(ds.gather_labels(idx), (std::vector<int>{3, 0}));
  EXPECT_EQ(ds.gather(idx)[0], ds.images[3 * 784]);
}
