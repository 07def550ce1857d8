#include <gtest/gtest.h>

#include <string>

#include "cdnet/config.hpp"

using namespace cdnet;

TEST(Config, ReferencePresetGeometry) {
  const auto c = CDNetConfig::reference();
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.grid(), 14u);
  EXPECT_EQ(c.patch_px(), 224u);
  EXPECT_EQ(c.mag_ratio(), 4u);
  EXPECT_EQ(c.detail_px(), 896u);
  EXPECT_EQ(c.q, 4 * c.p);  // 5x -> 20x pair
  EXPECT_EQ(c.m * c.dim2, 384u);
}

TEST(Config, ToyPresetGeometry) {
  const auto c = CDNetConfig::toy();
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.patch_px(), 64u);
  EXPECT_EQ(c.detail_px(), 256u);
  EXPECT_EQ(c.sub_grid(), 4u);
}

TEST(Config, ValidationNamesTheViolatedRelation) {
  auto expect_violation = [](CDNetConfig c, const std::string& fragment) {
    try {
      c.validate();
      FAIL() << "expected ConfigError mentioning " << fragment;
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
    }
  };
  auto c = CDNetConfig::toy();
  c.head1 = 5;
  expect_violation(c, "dim1 % head1");
  c = CDNetConfig::toy();
  c.head2 = 3;
  expect_violation(c, "dim2 % head2");
  c = CDNetConfig::toy();
  c.n = 15;
  expect_violation(c, "perfect square");
  c = CDNetConfig::toy();
  c.q = 40;
  expect_violation(c, "mag_ratio");
  c = CDNetConfig::toy();
  c.m = 9;
  expect_violation(c, "m = (q / s)^2");
}

TEST(Config, TextRoundTrip) {
  for (const auto& c : {CDNetConfig::toy(), CDNetConfig::reference()}) EXPECT_EQ(config_from_text(c.to_text()), c);
}

TEST(Config, ParsesCommentsAndOverridesBase) {
  const auto c = config_from_text("# custom\nL = 3\n\ndim1=64 # wider\nhead1=8\n");
  EXPECT_EQ(c.L, 3u);
  EXPECT_EQ(c.dim1, 64u);
  EXPECT_EQ(c.head1, 8u);
  EXPECT_EQ(c.dim2, CDNetConfig::toy().dim2);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(config_from_text("depth=3\n"), ConfigError);
  EXPECT_THROW(config_from_text("L=three\n"), ConfigError);
  EXPECT_THROW(config_from_text("L 3\n"), ConfigError);
  EXPECT_THROW(config_preset("huge"), ConfigError);
  EXPECT_THROW(config_from_file("/nonexistent/config.txt"), IoError);
}
