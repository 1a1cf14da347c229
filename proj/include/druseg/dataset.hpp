#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <openssl/evp.h>

#include "druseg/common.hpp"
#include "druseg/image_io.hpp"
#include "druseg/pipeline.hpp"
#include "druseg/rng.hpp"

namespace druseg {

// One dataset row: an image, its mask, and which split it belongs to.
struct ManifestEntry {
  std::string image_path;
  std::string mask_path;
  std::string split;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
};

inline bool is_valid_split(const std::string& split) {
  return split == "train" || split == "finetune" || split == "eval";
}

// Parse a tab-separated manifest: image_path<TAB>mask_path<TAB>split per
// line, blank lines ignored. Relative paths resolve against the manifest's
// directory. With check_files set, every referenced file must exist.
inline DatasetManifest load_manifest(const std::string& path,
                                     bool check_files = true) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path);
  const std::filesystem::path base =
      std::filesystem::path(path).parent_path();
  DatasetManifest manifest;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      const std::size_t tab = line.find('\t', start);
      if (tab == std::string::npos) {
        fields.push_back(line.substr(start));
        break;
      }
      fields.push_back(line.substr(start, tab - start));
      start = tab + 1;
    }
    if (fields.size() != 3 || fields[0].empty() || fields[1].empty()) {
      throw ConfigError("manifest " + path + " line " +
                        std::to_string(lineno) +
                        ": expected image<TAB>mask<TAB>split");
    }
    if (!is_valid_split(fields[2])) {
      throw ConfigError("manifest " + path + " line " +
                        std::to_string(lineno) + ": unknown split '" +
                        fields[2] + "' (expected train, finetune or eval)");
    }
    ManifestEntry e;
    const auto resolve = [&](const std::string& p) {
      std::filesystem::path fp(p);
      if (fp.is_absolute() || base.empty()) return fp.string();
      return (base / fp).string();
    };
    e.image_path = resolve(fields[0]);
    e.mask_path = resolve(fields[1]);
    e.split = fields[2];
    if (check_files) {
      for (const std::string& f : {e.image_path, e.mask_path}) {
        if (!std::filesystem::exists(f)) {
          throw IoError("manifest " + path + " line " +
                        std::to_string(lineno) + ": missing file " + f);
        }
      }
    }
    manifest.entries.push_back(std::move(e));
  }
  return manifest;
}

inline void save_manifest(const DatasetManifest& manifest,
                          const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open manifest for writing: " + path);
  for (const auto& e : manifest.entries) {
    if (!is_valid_split(e.split)) {
      throw ConfigError("save_manifest: unknown split '" + e.split + "'");
    }
    out << e.image_path << "\t" << e.mask_path << "\t" << e.split << "\n";
  }
  if (!out) throw IoError("manifest write failed: " + path);
}

inline std::vector<ManifestEntry> entries_with_split(
    const DatasetManifest& manifest, const std::string& split) {
  std::vector<ManifestEntry> out;
  for (const auto& e : manifest.entries) {
    if (e.split == split) out.push_back(e);
  }
  return out;
}

// Lowercase hex MD5 digest of a file's bytes.
inline std::string md5_hex_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read file for digest: " + path);
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx) throw Error("digest context allocation failed");
  if (EVP_DigestInit_ex(ctx, EVP_md5(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    throw Error("digest initialization failed");
  }
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    const std::streamsize got = in.gcount();
    if (got > 0 &&
        EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(got)) != 1) {
      EVP_MD_CTX_free(ctx);
      throw Error("digest update failed");
    }
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_DigestFinal_ex(ctx, digest, &len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw Error("digest finalization failed");
  }
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xF]);
  }
  return out;
}

// Deterministic subset selection: order files by the MD5 digest of their
// bytes (ties broken by path) and keep the first `count`.
inline std::vector<std::string> select_subset_md5(
    const std::vector<std::string>& paths, std::size_t count) {
  if (count > paths.size()) {
    throw ValueError("select_subset_md5: requested " + std::to_string(count) +
                     " of " + std::to_string(paths.size()) + " files");
  }
  std::vector<std::pair<std::string, std::string>> keyed;
  keyed.reserve(paths.size());
  for (const auto& p : paths) keyed.emplace_back(md5_hex_file(p), p);
  std::sort(keyed.begin(), keyed.end());
  std::vector<std::string> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(keyed[i].second);
  return out;
}

// Merge several source manifests, drawing `targets[i]` entries from source i
// by seeded sampling without replacement (partial Fisher-Yates on a child
// stream per source). Selections keep their shuffled order and are
// concatenated in source order.
inline DatasetManifest balance_sources(
    const std::vector<DatasetManifest>& sources,
    const std::vector<std::size_t>& targets, std::uint64_t seed) {
  if (sources.size() != targets.size()) {
    throw ConfigError("balance_sources: " + std::to_string(sources.size()) +
                      " sources vs " + std::to_string(targets.size()) +
                      " targets");
  }
  DatasetManifest out;
  Rng root(seed);
  for (std::size_t s = 0; s < sources.size(); ++s) {
    const auto& entries = sources[s].entries;
    const std::size_t want = targets[s];
    if (want > entries.size()) {
      throw ConfigError("balance_sources: source " + std::to_string(s) +
                        " has " + std::to_string(entries.size()) +
                        " entries, requested " + std::to_string(want));
    }
    Rng rng = root.derive({0x62616C, s});  // per-source child stream
    std::vector<std::size_t> idx(entries.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (std::size_t k = 0; k < want; ++k) {
      const std::size_t j =
          k + static_cast<std::size_t>(rng.below(idx.size() - k));
      std::swap(idx[k], idx[j]);
      out.entries.push_back(entries[idx[k]]);
    }
  }
  return out;
}

// Decode, resize to the network resolution and build the six-channel input.
// Images resize bilinearly before colour conversion and standardization;
// masks resize by nearest neighbour and stay binary.
inline Sample load_sample(const ManifestEntry& entry,
                          std::int64_t input_size) {
  Sample s;
  s.id = std::filesystem::path(entry.image_path).stem().string();
  Tensor rgb = decode_image(entry.image_path);
  if (rgb.extent(1) != input_size || rgb.extent(2) != input_size) {
    rgb = resize_bilinear(rgb, input_size, input_size);
  }
  s.image = make_input(rgb);
  Tensor mask = read_mask(entry.mask_path);
  if (mask.extent(0) != input_size || mask.extent(1) != input_size) {
    mask = resize_nearest(mask, input_size, input_size);
  }
  s.mask = mask;
  return s;
}

}  // namespace druseg
