#include "ssrseg/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "ssrseg/container.hpp"
#include "ssrseg/errors.hpp"
#include "ssrseg/format.hpp"
#include "ssrseg/ops.hpp"

namespace ssrseg {

namespace {

constexpr double kBackground = 0.3;
constexpr double kForeground = 0.65;
constexpr double kForegroundJitter = 0.1;
constexpr double kNoiseAmplitude = 0.08;

double uniform(std::mt19937_64& rng, double lo, double hi) {
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Uniform noise in [-1, 1] smoothed by a 3x3x3 box (edges replicated), then
// rescaled so the largest magnitude equals kNoiseAmplitude.
std::vector<double> smooth_noise(std::mt19937_64& rng, std::size_t e) {
  const std::size_t n = e * e * e;
  std::vector<double> raw(n), out(n, 0.0);
  for (auto& v : raw) v = uniform(rng, -1.0, 1.0);
  auto clampi = [e](std::ptrdiff_t i) {
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i, 0, static_cast<std::ptrdiff_t>(e) - 1));
  };
  double peak = 0.0;
  for (std::size_t z = 0; z < e; ++z)
    for (std::size_t y = 0; y < e; ++y)
      for (std::size_t x = 0; x < e; ++x) {
        double s = 0.0;
        for (int dz = -1; dz <= 1; ++dz)
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const auto zz = clampi(static_cast<std::ptrdiff_t>(z) + dz);
              const auto yy = clampi(static_cast<std::ptrdiff_t>(y) + dy);
              const auto xx = clampi(static_cast<std::ptrdiff_t>(x) + dx);
              s += raw[(zz * e + yy) * e + xx];
            }
        out[(z * e + y) * e + x] = s / 27.0;
        peak = std::max(peak, std::abs(s / 27.0));
      }
  if (peak > 0.0) {
    for (auto& v : out) v *= kNoiseAmplitude / peak;
  }
  return out;
}

}  // namespace

std::string DiameterRange::label() const { return fmt6(min) + "-" + fmt6(max); }

std::vector<DiameterRange> parse_strata(const std::string& text) {
  std::vector<DiameterRange> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto dash = item.find('-', 1);
    DiameterRange r;
    try {
      if (dash == std::string::npos) throw std::invalid_argument(item);
      std::size_t used = 0;
      r.min = std::stod(item.substr(0, dash), &used);
      if (used != dash) throw std::invalid_argument(item);
      const std::string hi = item.substr(dash + 1);
      r.max = std::stod(hi, &used);
      if (used != hi.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw ConfigError("stratum '" + item + "' is not of the form MIN-MAX");
    }
    out.push_back(r);
  }
  if (out.empty()) throw ConfigError("at least one diameter stratum is required");
  return out;
}

Tensor<float> downsample_hr(const Tensor<float>& hr) {
  if (hr.rank() < 2 || hr.rank() > 4) {
    throw ContractError("downsample_hr: expected [C, spatial...] with 1-3 spatial axes, got " +
                        shape_str(hr.shape()));
  }
  std::vector<std::size_t> half;
  for (std::size_t i = 1; i < hr.rank(); ++i) {
    if (hr.dim(i) % 2 != 0 || hr.dim(i) == 0) {
      throw ConfigError("downsample_hr: extent " + std::to_string(hr.dim(i)) + " on axis " +
                        std::to_string(i) + " is not a positive even number");
    }
    half.push_back(hr.dim(i) / 2);
  }
  Shape batched{1};
  batched.insert(batched.end(), hr.shape().begin(), hr.shape().end());
  Shape out_shape{hr.dim(0)};
  out_shape.insert(out_shape.end(), half.begin(), half.end());
  return reshape(adaptive_avg_pool(reshape(hr.detach(false), batched), half), out_shape);
}

VolumeSample generate_sample(std::uint64_t seed, std::size_t hr_extent, DiameterRange d) {
  if (hr_extent == 0 || hr_extent % 4 != 0) {
    throw ConfigError("hr_extent " + std::to_string(hr_extent) + " must be a positive multiple of 4");
  }
  const double e = static_cast<double>(hr_extent);
  if (!(d.min > 2.0) || !(d.max < 0.8 * e) || d.min > d.max) {
    throw ConfigError("diameter range [" + fmt6(d.min) + ", " + fmt6(d.max) +
                      "] must satisfy 2 < min <= max < " + fmt6(0.8 * e));
  }
  std::mt19937_64 rng(seed);
  std::array<double, 3> radius{}, center{};
  double diameter = 0.0;
  for (int a = 0; a < 3; ++a) {
    const double da = uniform(rng, d.min, d.max);
    radius[a] = 0.5 * da;
    diameter += da / 3.0;
  }
  for (int a = 0; a < 3; ++a) {
    center[a] = uniform(rng, radius[a] + 0.5, e - radius[a] - 0.5);
  }
  const double fg = kForeground + uniform(rng, -kForegroundJitter, kForegroundJitter);
  const auto noise = smooth_noise(rng, hr_extent);
  const double r_min = *std::min_element(radius.begin(), radius.end());

  const std::size_t n = hr_extent * hr_extent * hr_extent;
  std::vector<float> image(n), mask(n);
  for (std::size_t z = 0; z < hr_extent; ++z)
    for (std::size_t y = 0; y < hr_extent; ++y)
      for (std::size_t x = 0; x < hr_extent; ++x) {
        const std::array<double, 3> p{z + 0.5, y + 0.5, x + 0.5};
        double q = 0.0;
        for (int a = 0; a < 3; ++a) q += std::pow((p[a] - center[a]) / radius[a], 2);
        const std::size_t i = (z * hr_extent + y) * hr_extent + x;
        const bool inside = q <= 1.0;
        // Lower bound on the distance to the surface; the ramp spans one voxel.
        const double ramp = inside ? 1.0 : std::max(0.0, 1.0 - (std::sqrt(q) - 1.0) * r_min);
        mask[i] = inside ? 1.0f : 0.0f;
        const double v = kBackground + noise[i] + ramp * (fg - kBackground);
        image[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
  VolumeSample s;
  const Shape shape{1, hr_extent, hr_extent, hr_extent};
  s.hr_image = Tensor<float>(shape, std::move(image));
  s.hr_mask = Tensor<float>(shape, std::move(mask));
  s.lr_image = downsample_hr(s.hr_image);
  s.lesion_diameter = diameter;
  s.seed = seed;
  return s;
}

std::vector<ManifestEntry> build_dataset(const std::filesystem::path& dir, std::uint64_t seed,
                                         std::size_t count, std::size_t hr_extent,
                                         const std::vector<DiameterRange>& strata) {
  if (count == 0) throw ConfigError("dataset count must be at least 1");
  if (strata.empty()) throw ConfigError("at least one diameter stratum is required");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());

  std::vector<std::size_t> quota(strata.size(), count / strata.size());
  quota[0] += count % strata.size();
  std::vector<ManifestEntry> manifest;
  std::size_t next = 0;
  for (std::size_t i = 0; i < count; ++i) {
    while (quota[next] == 0) next = (next + 1) % strata.size();
    const std::size_t s = next;
    --quota[s];
    next = (next + 1) % strata.size();

    const auto sample = generate_sample(mix_seed(seed, i), hr_extent, strata[s]);
    char name[32];
    std::snprintf(name, sizeof name, "sample_%05zu.ssv", i);
    write_container(dir / name, {make_f32_record("hr_image", sample.hr_image),
                                 make_mask_record("hr_mask", sample.hr_mask),
                                 make_f32_record("lr_image", sample.lr_image)});
    manifest.push_back({name, strata[s].label(), sample.lesion_diameter});
  }
  std::ofstream f(dir / kManifestName, std::ios::trunc);
  if (!f) throw IoError("cannot write '" + (dir / kManifestName).string() + "'");
  for (const auto& m : manifest) f << m.file << '\t' << m.stratum << '\t' << fmt6(m.diameter) << '\n';
  if (!f) throw IoError("write failed for '" + (dir / kManifestName).string() + "'");
  return manifest;
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / kManifestName;
  std::ifstream f(path);
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, '\t')) fields.push_back(field);
    ManifestEntry m;
    try {
      if (fields.size() != 3) throw std::invalid_argument("field count");
      m.file = fields[0];
      m.stratum = fields[1];
      m.diameter = std::stod(fields[2]);
    } catch (const std::logic_error&) {
      throw LoadError(path.string() + ":" + std::to_string(lineno) +
                      ": expected 'file<TAB>stratum<TAB>diameter'");
    }
    out.push_back(std::move(m));
  }
  return out;
}

VolumeSample load_sample(const std::filesystem::path& dir, const ManifestEntry& entry) {
  const auto records = read_container(dir / entry.file);
  VolumeSample s;
  s.hr_image = record_tensor(find_record(records, "hr_image"));
  s.hr_mask = record_tensor(find_record(records, "hr_mask"));
  s.lr_image = record_tensor(find_record(records, "lr_image"));
  s.lesion_diameter = entry.diameter;
  if (s.hr_image.shape() != s.hr_mask.shape() || s.hr_image.rank() != 4 ||
      s.lr_image.rank() != 4 || s.lr_image.dim(1) * 2 != s.hr_image.dim(1)) {
    throw LoadError((dir / entry.file).string() + ": inconsistent sample shapes " +
                    shape_str(s.hr_image.shape()) + ", " + shape_str(s.hr_mask.shape()) + ", " +
                    shape_str(s.lr_image.shape()));
  }
  return s;
}

}  // namespace ssrseg
