#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include <unistd.h>

#include <gtest/gtest.h>

#include "mpcseg/pointcloud.hpp"

namespace mpcseg {
namespace {

namespace fs = std::filesystem;

fs::path temp_path(const std::string& name) {
  return fs::temp_directory_path() / ("mpcseg_pc_" + std::to_string(::getpid()) + "_" + name);
}

SceneSpec two_class_spec(std::size_t count, double label_rate) {
  SceneSpec s;
  s.classes = {{"a", count, 1.0, {0.2, 0.3, 0.4}}, {"b", count, 0.5, {0.6, 0.5, 0.1}}};
  s.label_rate = label_rate;
  s.extent = 10.0;
  s.seed = 3;
  return s;
}

SceneSpec longtail_spec() {
  SceneSpec s;
  s.classes = {{"ground", 4096, 6.0, {0.30, 0.25, 0.20}},
               {"vegetation", 1024, 3.0, {0.20, 0.45, 0.30}},
               {"building", 256, 2.0, {0.55, 0.50, 0.45}},
               {"car", 64, 1.0, {0.70, 0.20, 0.25}},
               {"pole", 16, 0.5, {0.40, 0.35, 0.60}}};
  s.label_rate = 0.3;
  s.extent = 40.0;
  s.seed = 7;
  return s;
}

MultispectralPointCloud random_cloud(std::size_t n, std::size_t d, std::size_t classes,
                                     std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-5.0, 5.0), s(0.0, 1.0);
  std::uniform_int_distribution<int> l(-1, static_cast<int>(classes) - 1);
  MultispectralPointCloud c;
  c.bands = d;
  for (std::size_t k = 0; k < classes; ++k) c.class_names.push_back("c" + std::to_string(k));
  for (std::size_t i = 0; i < n; ++i) {
    c.positions.push_back({u(rng), u(rng), u(rng)});
    for (std::size_t b = 0; b < d; ++b) c.spectra.push_back(s(rng));
    c.labels.push_back(l(rng));
  }
  return c;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream os(p);
  os << text;
}

TEST(Generator, FullLabeling) {
  const auto cloud = generate_synthetic_scene(two_class_spec(100, 1.0));
  EXPECT_EQ(cloud.size(), 200u);
  EXPECT_EQ(class_histogram(cloud).back(), 0u);
}

TEST(Generator, HalfLabeling) {
  const auto cloud = generate_synthetic_scene(two_class_spec(100, 0.5));
  EXPECT_EQ(cloud.size(), 200u);
  EXPECT_EQ(class_histogram(cloud).back(), 100u);
}

TEST(Generator, CeilOfLabelRate) {
  auto spec = two_class_spec(7, 0.3);  // ceil(0.3 * 14) = 5
  const auto cloud = generate_synthetic_scene(spec);
  EXPECT_EQ(cloud.size() - class_histogram(cloud).back(), 5u);
}

TEST(Generator, LongTailCountsBeforeMasking) {
  auto spec = longtail_spec();
  spec.label_rate = 1.0;
  const auto cloud = generate_synthetic_scene(spec);
  const std::vector<std::size_t> expected{4096, 1024, 256, 64, 16, 0};
  EXPECT_EQ(class_histogram(cloud), expected);
}

TEST(Generator, MaskingIsClassStratified) {
  const auto spec = longtail_spec();
  const auto full = [&] {
    auto s = spec;
    s.label_rate = 1.0;
    return generate_synthetic_scene(s);
  }();
  const auto cloud = generate_synthetic_scene(spec);
  ASSERT_EQ(cloud.positions, full.positions);
  std::vector<std::size_t> kept(5, 0);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (cloud.labels[i] == kUnlabeled) continue;
    EXPECT_EQ(cloud.labels[i], full.labels[i]);
    ++kept[static_cast<std::size_t>(cloud.labels[i])];
  }
  const std::vector<std::size_t> counts{4096, 1024, 256, 64, 16};
  std::size_t total = 0;
  for (std::size_t c = 0; c < 5; ++c) {
    EXPECT_GE(kept[c], 1u);
    EXPECT_NEAR(static_cast<double>(kept[c]), 0.3 * static_cast<double>(counts[c]), 1.0);
    total += kept[c];
  }
  EXPECT_EQ(total, static_cast<std::size_t>(std::ceil(0.3 * 5456)));
}

TEST(Generator, Deterministic) {
  const auto spec = longtail_spec();
  EXPECT_EQ(generate_synthetic_scene(spec), generate_synthetic_scene(spec));
  auto other = spec;
  other.seed = 8;
  EXPECT_NE(generate_synthetic_scene(spec).positions, generate_synthetic_scene(other).positions);
}

TEST(Generator, SpectraClampedToUnitRange) {
  auto spec = two_class_spec(500, 1.0);
  spec.noise_sigma = 0.5;
  const auto cloud = generate_synthetic_scene(spec);
  for (double v : cloud.spectra) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Generator, BlobSpreadFollowsObjectScale) {
  SceneSpec spec;
  spec.classes = {{"wide", 2000, 4.0, {0.5}}, {"narrow", 2000, 0.5, {0.5}}};
  spec.extent = 100.0;
  spec.seed = 11;
  const auto cloud = generate_synthetic_scene(spec);
  for (int c = 0; c < 2; ++c) {
    double mean = 0.0, sq = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      if (cloud.labels[i] != c) continue;
      mean += cloud.positions[i][0];
      ++n;
    }
    mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      if (cloud.labels[i] == c) sq += std::pow(cloud.positions[i][0] - mean, 2);
    }
    const double sd = std::sqrt(sq / static_cast<double>(n - 1));
    EXPECT_NEAR(sd, spec.classes[static_cast<std::size_t>(c)].object_scale,
                0.1 * spec.classes[static_cast<std::size_t>(c)].object_scale);
  }
}

TEST(Generator, InvalidSpecNamesField) {
  auto spec = two_class_spec(10, 1.0);
  spec.label_rate = 0.0;
  try {
    generate_synthetic_scene(spec);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("label_rate"), std::string::npos);
  }
  spec = two_class_spec(10, 1.0);
  spec.classes.pop_back();
  EXPECT_THROW(generate_synthetic_scene(spec), ValidationError);
  spec = two_class_spec(10, 1.0);
  spec.classes[1].point_count = 0;
  EXPECT_THROW(generate_synthetic_scene(spec), ValidationError);
}

TEST(Histogram, AllOneClass) {
  auto cloud = random_cloud(20, 2, 3, 1);
  std::fill(cloud.labels.begin(), cloud.labels.end(), 0);
  EXPECT_EQ(class_histogram(cloud), (std::vector<std::size_t>{20, 0, 0, 0}));
}

TEST(Histogram, AllUnlabeled) {
  auto cloud = random_cloud(20, 2, 3, 1);
  std::fill(cloud.labels.begin(), cloud.labels.end(), kUnlabeled);
  EXPECT_EQ(class_histogram(cloud), (std::vector<std::size_t>{0, 0, 0, 20}));
}

TEST(Histogram, SumsToN) {
  const auto cloud = random_cloud(321, 3, 4, 9);
  const auto h = class_histogram(cloud);
  EXPECT_EQ(std::accumulate(h.begin(), h.end(), std::size_t{0}), 321u);
}

TEST(CloudIo, CsvRoundTrip) {
  const auto cloud = random_cloud(10, 3, 4, 5);
  const auto path = temp_path("rt.csv");
  save_cloud(cloud, path);
  EXPECT_EQ(load_cloud(path), cloud);
  fs::remove(path);
}

TEST(CloudIo, BinaryRoundTripOfGeneratedScene) {
  const auto cloud = generate_synthetic_scene(longtail_spec());
  const auto path = temp_path("rt.bin");
  save_cloud(cloud, path);
  EXPECT_EQ(load_cloud(path), cloud);
  fs::remove(path);
}

TEST(CloudIo, ExplicitFormatOverridesExtension) {
  const auto cloud = generate_synthetic_scene(two_class_spec(30, 0.5));
  const auto path = temp_path("data.txt");
  save_cloud(cloud, path, CloudFormat::kBinary);
  EXPECT_EQ(load_cloud(path, CloudFormat::kBinary), cloud);
  EXPECT_THROW(load_cloud(path, CloudFormat::kCsv), ValidationError);
  fs::remove(path);
}

TEST(CloudIo, MinusOneIsUnlabeled) {
  const auto path = temp_path("unl.csv");
  write_file(path, "2 1 2\n0,0,0,0.5,-1\n1,1,1,0.25,1\n");
  const auto cloud = load_cloud(path);
  EXPECT_EQ(cloud.labels, (std::vector<int>{kUnlabeled, 1}));
  EXPECT_EQ(cloud.spectra, (std::vector<double>{0.5, 0.25}));
  fs::remove(path);
}

TEST(CloudIo, LabelEqualToClassCountRejected) {
  const auto path = temp_path("range.csv");
  write_file(path, "1 1 12\n0,0,0,0.5,12\n");
  try {
    load_cloud(path);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("label out of range"), std::string::npos);
  }
  fs::remove(path);
}

TEST(CloudIo, MalformedInputsRejected) {
  const auto path = temp_path("bad.csv");
  for (const char* text : {"", "2 x 2\n", "1 1\n0,0,0,0.5,0\n", "1 1 2\n0,0,0,0.5\n",
                           "1 1 2\n0,0,0,0.5,0,1\n", "2 1 2\n0,0,0,0.5,0\n", "1 1 2\n0,0,zz,0.5,0\n",
                           "1 1 2\n0,0,0,0.5,0.5\n"}) {
    write_file(path, text);
    EXPECT_THROW(load_cloud(path), ValidationError) << text;
  }
  fs::remove(path);
}

TEST(CloudIo, ClassNamesSurvive) {
  auto cloud = random_cloud(5, 2, 3, 2);
  cloud.class_names = {"ground", "tree", "car"};
  const auto path = temp_path("names.csv");
  save_cloud(cloud, path);
  EXPECT_EQ(load_cloud(path).class_names, cloud.class_names);
  fs::remove(path);
}

TEST(CloudIo, FormatParsing) {
  EXPECT_EQ(parse_cloud_format("csv"), CloudFormat::kCsv);
  EXPECT_EQ(parse_cloud_format("bin"), CloudFormat::kBinary);
  EXPECT_THROW(parse_cloud_format("ply"), ValidationError);
  EXPECT_EQ(format_from_path("a/b.bin"), CloudFormat::kBinary);
  EXPECT_EQ(format_from_path("a/b.csv"), CloudFormat::kCsv);
}

TEST(CloudValidation, RejectsBrokenInvariants) {
  auto cloud = random_cloud(4, 2, 2, 1);
  EXPECT_NO_THROW(cloud.validate());
  auto bad = cloud;
  bad.labels[0] = 2;
  EXPECT_THROW(bad.validate(), ValidationError);
  bad = cloud;
  bad.spectra[1] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(bad.validate(), ValidationError);
  bad = cloud;
  bad.labels.pop_back();
  EXPECT_THROW(bad.validate(), ValidationError);
}

}  // namespace
}  // namespace mpcseg
