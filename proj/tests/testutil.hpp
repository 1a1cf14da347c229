#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "druseg/dataset.hpp"
#include "druseg/image_io.hpp"
#include "druseg/rng.hpp"

namespace druseg {
namespace testutil {

// One group of generated samples sharing a manifest split.
struct BlobGroup {
  std::int64_t count = 0;
  std::string split = "train";
};

// Writes `size`x`size` PNG pairs into `dir`: a warm elliptical blob on a
// cool noisy background, with the exact blob support as the mask. The task
// is simple enough for tiny networks to overfit quickly yet exercises the
// full decode -> featurize -> segment path.
inline DatasetManifest make_blob_dataset(const std::string& dir,
                                         const std::vector<BlobGroup>& groups,
                                         std::int64_t size = 32,
                                         std::uint64_t seed = 1) {
  std::filesystem::create_directories(dir);
  Rng rng(seed);
  DatasetManifest manifest;
  std::int64_t serial = 0;
  for (const BlobGroup& g : groups) {
    for (std::int64_t k = 0; k < g.count; ++k, ++serial) {
      const double cx = rng.uniform(0.30, 0.70) * static_cast<double>(size);
      const double cy = rng.uniform(0.30, 0.70) * static_cast<double>(size);
      const double rx = rng.uniform(0.14, 0.26) * static_cast<double>(size);
      const double ry = rng.uniform(0.14, 0.26) * static_cast<double>(size);

      ImageU8 img;
      img.width = static_cast<int>(size);
      img.height = static_cast<int>(size);
      img.channels = 3;
      img.pixels.resize(static_cast<std::size_t>(size * size * 3));
      ImageU8 mask;
      mask.width = img.width;
      mask.height = img.height;
      mask.channels = 1;
      mask.pixels.resize(static_cast<std::size_t>(size * size));

      for (std::int64_t y = 0; y < size; ++y) {
        for (std::int64_t x = 0; x < size; ++x) {
          const double nx = (static_cast<double>(x) - cx) / rx;
          const double ny = (static_cast<double>(y) - cy) / ry;
          const bool inside = nx * nx + ny * ny <= 1.0;
          double r, gch, b;
          if (inside) {
            r = 205 + rng.uniform(-18, 18);
            gch = 150 + rng.uniform(-15, 15);
            b = 120 + rng.uniform(-15, 15);
          } else {
            r = 40 + rng.uniform(-20, 20);
            gch = 55 + rng.uniform(-20, 20);
            b = 95 + rng.uniform(-25, 25);
          }
          const std::size_t at =
              static_cast<std::size_t>((y * size + x) * 3);
          img.pixels[at] = static_cast<std::uint8_t>(
              std::clamp(r, 0.0, 255.0));
          img.pixels[at + 1] = static_cast<std::uint8_t>(
              std::clamp(gch, 0.0, 255.0));
          img.pixels[at + 2] = static_cast<std::uint8_t>(
              std::clamp(b, 0.0, 255.0));
          mask.pixels[static_cast<std::size_t>(y * size + x)] =
              inside ? 255 : 0;
        }
      }

      const std::string base = dir + "/blob" + std::to_string(serial);
      write_png(base + ".png", img);
      write_png(base + "_mask.png", mask);
      manifest.entries.push_back(
          {base + ".png", base + "_mask.png", g.split});
    }
  }
  return manifest;
}

inline std::string fresh_dir(const std::string& stem) {
  const std::string dir =
      (std::filesystem::temp_directory_path() / stem).string();
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testutil
}  // namespace druseg
