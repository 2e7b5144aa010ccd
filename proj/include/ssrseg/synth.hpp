#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ssrseg/tensor.hpp"

namespace ssrseg {

struct DiameterRange {
  double min = 4.0;
  double max = 8.0;

  std::string label() const;  // "4-8"
};

// Parses "4-8,12-22".
std::vector<DiameterRange> parse_strata(const std::string& text);

struct VolumeSample {
  Tensor<float> hr_image;  // [1, D2, H2, W2], intensities in [0, 1]
  Tensor<float> hr_mask;   // [1, D2, H2, W2], values in {0, 1}
  Tensor<float> lr_image;  // [1, D, H, W] = downsample_hr(hr_image)
  double lesion_diameter = 0.0;  // mean of the three axis diameters, HR voxels
  std::uint64_t seed = 0;
};

// One random axis-aligned ellipsoid lesion on a noisy background. The mask is
// the set of voxels whose centers lie inside the ellipsoid.
VolumeSample generate_sample(std::uint64_t seed, std::size_t hr_extent, DiameterRange diameters);

// 2x average pooling over every axis after the first (channel) axis.
Tensor<float> downsample_hr(const Tensor<float>& hr);

struct ManifestEntry {
  std::string file;
  std::string stratum;
  double diameter = 0.0;
};

// Writes sample_NNNNN.ssv files (records hr_image, hr_mask, lr_image) and a
// tab-separated manifest.txt into `dir`. Strata get equal counts with the
// remainder going to the first; samples are interleaved across strata.
std::vector<ManifestEntry> build_dataset(const std::filesystem::path& dir, std::uint64_t seed,
                                         std::size_t count, std::size_t hr_extent,
                                         const std::vector<DiameterRange>& strata);

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir);
VolumeSample load_sample(const std::filesystem::path& dir, const ManifestEntry& entry);

inline constexpr const char* kManifestName = "manifest.txt";

}  // namespace ssrseg
