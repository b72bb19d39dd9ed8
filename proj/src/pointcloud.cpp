#include "mpcseg/pointcloud.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace mpcseg {

namespace {

constexpr char kBinaryMagic[4] = {'M', 'P', 'C', 'B'};
constexpr std::uint32_t kBinaryVersion = 1;

double to_float32(double v) { return static_cast<double>(static_cast<float>(v)); }

// ceil/floor of a product that is integral up to rounding noise.
std::size_t stable_ceil(double v) {
  const double r = std::round(v);
  if (std::abs(v - r) < 1e-9 * std::max(1.0, std::abs(v))) return static_cast<std::size_t>(r);
  return static_cast<std::size_t>(std::ceil(v));
}

std::size_t stable_floor(double v) {
  const double r = std::round(v);
  if (std::abs(v - r) < 1e-9 * std::max(1.0, std::abs(v))) return static_cast<std::size_t>(r);
  return static_cast<std::size_t>(std::floor(v));
}

void append_number(std::string& out, double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, end);
}

double parse_double(std::string_view s, std::size_t line_no) {
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\r')) s.remove_suffix(1);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ValidationError("line " + std::to_string(line_no) + ": bad number '" +
                          std::string(s) + "'");
  }
  return v;
}

std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      parts.push_back(line.substr(start));
      break;
    }
    parts.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return parts;
}

template <typename T>
void write_le(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T> && sizeof(T) == 4);
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
  os.write(reinterpret_cast<const char*>(&bits), 4);
}

template <typename T>
T read_le(std::istream& is) {
  std::uint32_t bits = 0;
  if (!is.read(reinterpret_cast<char*>(&bits), 4)) {
    throw ValidationError("binary cloud: unexpected end of file");
  }
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
  T v;
  std::memcpy(&v, &bits, 4);
  return v;
}

void check_label(int label, std::size_t num_classes, std::size_t row) {
  if (label == kUnlabeled) return;
  if (label < 0 || static_cast<std::size_t>(label) >= num_classes) {
    throw ValidationError("row " + std::to_string(row) + ": label out of range (" +
                          std::to_string(label) + " with L=" +
                          std::to_string(num_classes) + ")");
  }
}

}  // namespace

void MultispectralPointCloud::validate() const {
  const std::size_t n = positions.size();
  if (n == 0) throw ValidationError("positions: cloud must contain at least one point");
  if (bands == 0) throw ValidationError("bands: must be at least 1");
  if (spectra.size() != n * bands) throw ValidationError("spectra: expected N*d values");
  if (labels.size() != n) throw ValidationError("labels: expected N values");
  for (std::size_t i = 0; i < n; ++i) check_label(labels[i], num_classes(), i);
  for (double v : spectra) {
    if (!std::isfinite(v)) throw ValidationError("spectra: non-finite value");
  }
}

std::size_t SceneSpec::total_points() const {
  std::size_t n = 0;
  for (const auto& c : classes) n += c.point_count;
  return n;
}

void SceneSpec::validate() const {
  if (classes.size() < 2) throw ValidationError("classes: at least 2 classes required");
  if (!(label_rate > 0.0 && label_rate <= 1.0)) {
    throw ValidationError("label_rate: must lie in (0, 1]");
  }
  if (!(noise_sigma >= 0.0)) throw ValidationError("noise_sigma: must be >= 0");
  if (!(extent > 0.0)) throw ValidationError("extent: must be > 0");
  const std::size_t d = bands();
  if (d == 0) throw ValidationError("classes.spectral_signature: must be non-empty");
  for (const auto& c : classes) {
    if (c.point_count == 0) {
      throw ValidationError("classes.point_count: must be > 0 (class '" + c.name + "')");
    }
    if (!(c.object_scale > 0.0)) {
      throw ValidationError("classes.object_scale: must be > 0 (class '" + c.name + "')");
    }
    if (c.signature.size() != d) {
      throw ValidationError("classes.spectral_signature: all classes need the same band count");
    }
  }
}

MultispectralPointCloud generate_synthetic_scene(const SceneSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> uniform(0.0, spec.extent);
  std::normal_distribution<double> normal(0.0, 1.0);

  MultispectralPointCloud cloud;
  cloud.bands = spec.bands();
  const std::size_t n_total = spec.total_points();
  cloud.positions.reserve(n_total);
  cloud.spectra.reserve(n_total * cloud.bands);
  cloud.labels.reserve(n_total);

  std::vector<std::vector<std::size_t>> members(spec.classes.size());
  for (std::size_t c = 0; c < spec.classes.size(); ++c) {
    const auto& cls = spec.classes[c];
    cloud.class_names.push_back(cls.name);
    const std::size_t clusters =
        std::max<std::size_t>(1, (cls.point_count + kMaxPointsPerCluster - 1) / kMaxPointsPerCluster);
    for (std::size_t k = 0; k < clusters; ++k) {
      const Point3 center{uniform(rng), uniform(rng), uniform(rng)};
      const std::size_t count = cls.point_count / clusters + (k < cls.point_count % clusters ? 1 : 0);
      for (std::size_t p = 0; p < count; ++p) {
        Point3 pos;
        for (int a = 0; a < 3; ++a) pos[a] = to_float32(center[a] + cls.object_scale * normal(rng));
        members[c].push_back(cloud.positions.size());
        cloud.positions.push_back(pos);
        for (std::size_t b = 0; b < cloud.bands; ++b) {
          const double v = cls.signature[b] + spec.noise_sigma * normal(rng);
          cloud.spectra.push_back(to_float32(std::clamp(v, 0.0, 1.0)));
        }
        cloud.labels.push_back(static_cast<int>(c));
      }
    }
  }

  // Per-class quotas by largest remainder so they sum to ceil(rate * N).
  const std::size_t target = stable_ceil(spec.label_rate * static_cast<double>(n_total));
  std::vector<std::size_t> quota(spec.classes.size());
  std::vector<double> remainder(spec.classes.size());
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < quota.size(); ++c) {
    const double exact = spec.label_rate * static_cast<double>(spec.classes[c].point_count);
    quota[c] = std::min(stable_floor(exact), spec.classes[c].point_count);
    remainder[c] = exact - static_cast<double>(quota[c]);
    assigned += quota[c];
  }
  std::vector<std::size_t> order(quota.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::size_t i = 0; assigned < target && i < order.size(); ++i) {
    if (quota[order[i]] < spec.classes[order[i]].point_count) {
      ++quota[order[i]];
      ++assigned;
    }
  }

  // Keep a contiguous labeled patch per class around a random anchor point.
  for (std::size_t c = 0; c < members.size(); ++c) {
    auto& idx = members[c];
    std::uniform_int_distribution<std::size_t> pick(0, idx.size() - 1);
    const Point3 anchor = cloud.positions[idx[pick(rng)]];
    auto dist2 = [&](std::size_t i) {
      const auto& p = cloud.positions[i];
      const double dx = p[0] - anchor[0], dy = p[1] - anchor[1], dz = p[2] - anchor[2];
      return dx * dx + dy * dy + dz * dz;
    };
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return dist2(a) < dist2(b); });
    for (std::size_t j = quota[c]; j < idx.size(); ++j) cloud.labels[idx[j]] = kUnlabeled;
  }
  return cloud;
}

std::vector<std::size_t> class_histogram(const MultispectralPointCloud& cloud) {
  std::vector<std::size_t> hist(cloud.num_classes() + 1, 0);
  for (int label : cloud.labels) {
    if (label == kUnlabeled) {
      ++hist.back();
    } else {
      ++hist[static_cast<std::size_t>(label)];
    }
  }
  return hist;
}

CloudFormat parse_cloud_format(const std::string& name) {
  if (name == "csv") return CloudFormat::kCsv;
  if (name == "bin") return CloudFormat::kBinary;
  throw ValidationError("format: expected 'csv' or 'bin', got '" + name + "'");
}

CloudFormat format_from_path(const std::filesystem::path& path) {
  return path.extension() == ".bin" ? CloudFormat::kBinary : CloudFormat::kCsv;
}

void save_cloud(const MultispectralPointCloud& cloud, const std::filesystem::path& path,
                CloudFormat format) {
  cloud.validate();
  const std::size_t n = cloud.size();
  const std::size_t d = cloud.bands;
  if (format == CloudFormat::kCsv) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    std::string out;
    out += std::to_string(n) + " " + std::to_string(d) + " " +
           std::to_string(cloud.num_classes()) + "\n";
    out += "# classes:";
    for (std::size_t c = 0; c < cloud.class_names.size(); ++c) {
      out += (c == 0 ? " " : ",") + cloud.class_names[c];
    }
    out += "\n";
    for (std::size_t i = 0; i < n; ++i) {
      for (int a = 0; a < 3; ++a) {
        append_number(out, cloud.positions[i][a]);
        out += ',';
      }
      for (std::size_t b = 0; b < d; ++b) {
        append_number(out, cloud.spectra[i * d + b]);
        out += ',';
      }
      out += std::to_string(cloud.labels[i]);
      out += '\n';
    }
    os << out;
    if (!os) throw std::runtime_error("write failed for '" + path.string() + "'");
    return;
  }

  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  os.write(kBinaryMagic, 4);
  write_le(os, kBinaryVersion);
  write_le(os, static_cast<std::uint32_t>(n));
  write_le(os, static_cast<std::uint32_t>(d));
  write_le(os, static_cast<std::uint32_t>(cloud.num_classes()));
  for (const auto& name : cloud.class_names) {
    write_le(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (int a = 0; a < 3; ++a) write_le(os, static_cast<float>(cloud.positions[i][a]));
    for (std::size_t b = 0; b < d; ++b) write_le(os, static_cast<float>(cloud.spectra[i * d + b]));
    write_le(os, static_cast<std::int32_t>(cloud.labels[i]));
  }
  if (!os) throw std::runtime_error("write failed for '" + path.string() + "'");
}

MultispectralPointCloud load_cloud(const std::filesystem::path& path, CloudFormat format) {
  MultispectralPointCloud cloud;
  if (format == CloudFormat::kCsv) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open '" + path.string() + "'");
    std::string line;
    if (!std::getline(is, line)) throw ValidationError("header: missing 'N d L' line");
    std::istringstream header(line);
    long long n = -1, d = -1, num_classes = -1;
    std::string extra;
    if (!(header >> n >> d >> num_classes) || (header >> extra) || n < 1 || d < 1 ||
        num_classes < 1) {
      throw ValidationError("header: malformed 'N d L' line '" + line + "'");
    }
    cloud.bands = static_cast<std::size_t>(d);
    cloud.positions.reserve(static_cast<std::size_t>(n));
    cloud.spectra.reserve(static_cast<std::size_t>(n * d));
    cloud.labels.reserve(static_cast<std::size_t>(n));
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
      ++line_no;
      if (line.empty() || line == "\r") continue;
      if (line.front() == '#') {
        const std::string tag = "# classes:";
        if (line.rfind(tag, 0) == 0) {
          std::string names = line.substr(tag.size());
          if (!names.empty() && names.front() == ' ') names.erase(0, 1);
          if (!names.empty() && names.back() == '\r') names.pop_back();
          cloud.class_names.clear();
          if (!names.empty()) {
            for (auto part : split(names, ',')) cloud.class_names.emplace_back(part);
          }
        }
        continue;
      }
      const auto fields = split(line, ',');
      if (fields.size() != static_cast<std::size_t>(3 + d + 1)) {
        throw ValidationError("line " + std::to_string(line_no) + ": row length mismatch (expected " +
                              std::to_string(3 + d + 1) + " columns, got " +
                              std::to_string(fields.size()) + ")");
      }
      Point3 p;
      for (int a = 0; a < 3; ++a) p[a] = parse_double(fields[a], line_no);
      cloud.positions.push_back(p);
      for (long long b = 0; b < d; ++b) cloud.spectra.push_back(parse_double(fields[3 + b], line_no));
      const double label = parse_double(fields.back(), line_no);
      if (label != std::floor(label)) {
        throw ValidationError("line " + std::to_string(line_no) + ": label must be an integer");
      }
      cloud.labels.push_back(static_cast<int>(label));
    }
    if (cloud.positions.size() != static_cast<std::size_t>(n)) {
      throw ValidationError("header: declares N=" + std::to_string(n) + " but file has " +
                            std::to_string(cloud.positions.size()) + " rows");
    }
    if (cloud.class_names.empty()) {
      for (long long c = 0; c < num_classes; ++c) cloud.class_names.push_back("class_" + std::to_string(c));
    }
    if (cloud.class_names.size() != static_cast<std::size_t>(num_classes)) {
      throw ValidationError("header: class name count does not match L");
    }
  } else {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open '" + path.string() + "'");
    char magic[4] = {};
    if (!is.read(magic, 4) || std::memcmp(magic, kBinaryMagic, 4) != 0) {
      throw ValidationError("header: not a binary cloud file");
    }
    if (read_le<std::uint32_t>(is) != kBinaryVersion) {
      throw ValidationError("header: unsupported binary cloud version");
    }
    const auto n = read_le<std::uint32_t>(is);
    const auto d = read_le<std::uint32_t>(is);
    const auto num_classes = read_le<std::uint32_t>(is);
    if (n == 0 || d == 0 || num_classes == 0) throw ValidationError("header: malformed N, d or L");
    cloud.bands = d;
    for (std::uint32_t c = 0; c < num_classes; ++c) {
      const auto len = read_le<std::uint32_t>(is);
      std::string name(len, '\0');
      if (!is.read(name.data(), len)) throw ValidationError("header: truncated class names");
      cloud.class_names.push_back(std::move(name));
    }
    cloud.positions.resize(n);
    cloud.spectra.resize(static_cast<std::size_t>(n) * d);
    cloud.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (int a = 0; a < 3; ++a) cloud.positions[i][a] = read_le<float>(is);
      for (std::size_t b = 0; b < d; ++b) cloud.spectra[i * d + b] = read_le<float>(is);
      cloud.labels[i] = read_le<std::int32_t>(is);
    }
  }
  cloud.validate();
  return cloud;
}

}  // namespace mpcseg
