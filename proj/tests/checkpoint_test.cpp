#include "vrwkv/checkpoint.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

using namespace vrwkv;

namespace {

Checkpoint sample() {
  Checkpoint c;
  c.meta["channels"] = "8";
  c.meta["note"] = "two words";
  c.add("w", Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
  c.add("b", Tensor({3}, {-1, 0, 1}));
  c.add("s", Tensor({}, {7}));
  return c;
}

}  // namespace

TEST(Checkpoint, RoundTrip) {
  std::stringstream buf;
  write_checkpoint(buf, sample());
  const Checkpoint back = read_checkpoint(buf);
  EXPECT_EQ(back.meta, sample().meta);
  ASSERT_EQ(back.tensors.size(), 3u);
  EXPECT_EQ(back.at("w"), sample().at("w"));
  EXPECT_EQ(back.at("s"), sample().at("s"));
  EXPECT_EQ(back.tensors[1].first, "b");
}

TEST(Checkpoint, HeaderManifest) {
  std::stringstream buf;
  write_checkpoint(buf, sample());
  const std::string text = buf.str();
  EXPECT_EQ(text.rfind("vrwkv-checkpoint 1\n", 0), 0u);
  EXPECT_NE(text.find("tensor w 2x3 0 72\n"), std::string::npos);
  EXPECT_NE(text.find("tensor b 3 72 40\n"), std::string::npos);
  EXPECT_NE(text.find("tensor s - 112 16\n"), std::string::npos);
  EXPECT_NE(text.find("meta note two words\n"), std::string::npos);
}

TEST(Checkpoint, Errors) {
  Checkpoint c;
  c.add("x", Tensor({1}, {0}));
  EXPECT_THROW(c.add("x", Tensor({1}, {0})), ConfigError);
  EXPECT_THROW(c.add("has space", Tensor({1}, {0})), ConfigError);
  EXPECT_THROW(c.at("y"), IoError);
  EXPECT_THROW(c.meta_at("y"), IoError);

  std::stringstream buf;
  write_checkpoint(buf, sample());
  std::string text = buf.str();
  std::stringstream truncated(text.substr(0, text.size() - 4));
  EXPECT_THROW(read_checkpoint(truncated), IoError);
  std::stringstream wrong("not a checkpoint\n");
  EXPECT_THROW(read_checkpoint(wrong), IoError);
  std::stringstream unterminated("vrwkv-checkpoint 1\nmeta a b\n");
  EXPECT_THROW(read_checkpoint(unterminated), IoError);
}

TEST(Checkpoint, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "vrwkv_checkpoint_test.bin";
  save_checkpoint(path, sample());
  EXPECT_EQ(load_checkpoint(path).at("b"), sample().at("b"));
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), IoError);
}
