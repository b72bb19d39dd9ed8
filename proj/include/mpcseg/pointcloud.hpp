#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mpcseg {

/// Label value of a point without ground truth.
inline constexpr int kUnlabeled = -1;

/// Thrown when a user-supplied value violates a documented precondition.
/// The message always names the offending field.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Point3 = std::array<double, 3>;

/// N points with position, d spectral bands and an optional class label.
///
/// Spectra are stored row-major (N x d). Labels are in [0, L) or kUnlabeled.
struct MultispectralPointCloud {
  std::vector<Point3> positions;
  std::size_t bands = 0;
  std::vector<double> spectra;
  std::vector<int> labels;
  std::vector<std::string> class_names;

  std::size_t size() const { return positions.size(); }
  std::size_t num_classes() const { return class_names.size(); }

  std::span<const double> spectrum(std::size_t i) const {
    return {spectra.data() + i * bands, bands};
  }

  /// Throws ValidationError if any invariant is broken.
  void validate() const;

  bool operator==(const MultispectralPointCloud&) const = default;
};

struct ClassSpec {
  std::string name;
  std::size_t point_count = 0;
  double object_scale = 1.0;
  std::vector<double> signature;
};

/// Recipe for a synthetic scene: per-class blob sizes and spectral
/// signatures, a labeling rate and a seed.
struct SceneSpec {
  std::vector<ClassSpec> classes;
  double label_rate = 1.0;
  double noise_sigma = 0.05;
  double extent = 50.0;
  std::uint64_t seed = 0;

  std::size_t bands() const {
    return classes.empty() ? 0 : classes.front().signature.size();
  }
  std::size_t total_points() const;
  void validate() const;
};

/// Points per Gaussian cluster before a class is split into several blobs.
inline constexpr std::size_t kMaxPointsPerCluster = 2048;

/// Builds a cloud with exactly sum(point_count) points. Each class is a set
/// of isotropic Gaussian blobs with standard deviation object_scale; spectra
/// are the class signature plus Gaussian noise clamped to [0, 1]. Exactly
/// ceil(label_rate * N) points keep their label, apportioned per class and
/// chosen as a spatially contiguous patch around a random anchor point.
/// All values are rounded to float32 so the binary format is lossless.
MultispectralPointCloud generate_synthetic_scene(const SceneSpec& spec);

/// Counts per class followed by the UNLABELED count (L + 1 bins).
std::vector<std::size_t> class_histogram(const MultispectralPointCloud& cloud);

enum class CloudFormat { kCsv, kBinary };

/// Parses "csv" / "bin".
CloudFormat parse_cloud_format(const std::string& name);

/// Picks the binary format for a ".bin" extension, CSV otherwise.
CloudFormat format_from_path(const std::filesystem::path& path);

void save_cloud(const MultispectralPointCloud& cloud,
                const std::filesystem::path& path, CloudFormat format);
MultispectralPointCloud load_cloud(const std::filesystem::path& path,
                                   CloudFormat format);

inline void save_cloud(const MultispectralPointCloud& cloud,
                       const std::filesystem::path& path) {
  save_cloud(cloud, path, format_from_path(path));
}
inline MultispectralPointCloud load_cloud(const std::filesystem::path& path) {
  return load_cloud(path, format_from_path(path));
}

}  // namespace mpcseg
