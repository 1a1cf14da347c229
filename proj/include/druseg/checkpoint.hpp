#pragma once

#include <zlib.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "druseg/model.hpp"

namespace druseg {

// Checkpoint container: "DRUS" | u32 version | u32 header length | key=value
// header text | parameters then momentum buffers as raw little-endian f64 in
// registry order | u32 CRC-32 of everything before it.
inline constexpr char kCheckpointMagic[4] = {'D', 'R', 'U', 'S'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");
static_assert(sizeof(double) == 8);

struct CheckpointMeta {
  std::int64_t epochs_completed = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::array<std::uint64_t, 6> rng_state{};
  bool has_rng_state = false;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

inline std::uint32_t get_u32(const std::string& in, std::size_t pos) {
  std::uint32_t v;
  std::memcpy(&v, in.data() + pos, 4);
  return v;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string join_i64(const std::vector<std::int64_t>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(xs[i]);
  }
  return out;
}

inline std::vector<std::int64_t> split_i64(const std::string& s,
                                           const std::string& key) {
  std::vector<std::int64_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoll(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw IoError("checkpoint: bad integer list for " + key + ": '" + s +
                    "'");
    }
  }
  return out;
}

inline std::string u64_hex(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(v));
  return buf;
}

inline std::uint64_t parse_u64_hex(const std::string& s,
                                   const std::string& key) {
  if (s.empty()) throw IoError("checkpoint: empty hex value for " + key);
  char* end = nullptr;
  const unsigned long long v = std::strtoull(s.c_str(), &end, 16);
  if (end != s.c_str() + s.size()) {
    throw IoError("checkpoint: bad hex value for " + key + ": '" + s + "'");
  }
  return static_cast<std::uint64_t>(v);
}

class HeaderMap {
 public:
  explicit HeaderMap(const std::string& text) {
    std::stringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) {
      if (line.empty()) continue;
      const std::size_t eq = line.find('=');
      if (eq == std::string::npos) {
        throw IoError("checkpoint: malformed header line '" + line + "'");
      }
      kv_[line.substr(0, eq)] = line.substr(eq + 1);
    }
  }

  const std::string& need(const std::string& key) const {
    const auto it = kv_.find(key);
    if (it == kv_.end()) {
      throw IoError("checkpoint: header is missing key '" + key + "'");
    }
    return it->second;
  }

  bool has(const std::string& key) const { return kv_.count(key) != 0; }

  std::int64_t need_i64(const std::string& key) const {
    const std::string& s = need(key);
    try {
      std::size_t used = 0;
      const std::int64_t v = std::stoll(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw IoError("checkpoint: bad integer for " + key + ": '" + s + "'");
    }
  }

  double need_f64(const std::string& key) const {
    const std::string& s = need(key);
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end != s.c_str() + s.size()) {
      throw IoError("checkpoint: bad number for " + key + ": '" + s + "'");
    }
    return v;
  }

 private:
  std::map<std::string, std::string> kv_;
};

inline std::string encode_header(const ModelConfig& cfg,
                                 const CheckpointMeta& meta,
                                 std::int64_t param_count) {
  std::string h;
  h += "variant=" + std::string(variant_name(cfg.variant)) + "\n";
  h += "scale=" + std::string(scale_name(cfg.scale)) + "\n";
  h += "input_channels=" + std::to_string(cfg.input_channels) + "\n";
  h += "input_size=" + std::to_string(cfg.input_size) + "\n";
  h += "stage_filters=" + join_i64(cfg.stage_filters) + "\n";
  h += "fc_width=" + std::to_string(cfg.fc_width) + "\n";
  h += "dense_depth=" + std::to_string(cfg.dense_depth) + "\n";
  h += "dense_growth=" + join_i64(cfg.dense_growth) + "\n";
  h += "residual_blocks=" + std::to_string(cfg.residual_blocks) + "\n";
  h += "merge_filters=" + std::to_string(cfg.merge_filters) + "\n";
  h += "noise_sigma=" + format_double(cfg.noise_sigma) + "\n";
  h += "dropout_rate=" + format_double(cfg.dropout_rate) + "\n";
  h += "meta.param_count=" + std::to_string(param_count) + "\n";
  h += "meta.epochs_completed=" + std::to_string(meta.epochs_completed) + "\n";
  h += "meta.best_val_loss_bits=" +
       u64_hex(std::bit_cast<std::uint64_t>(meta.best_val_loss)) + "\n";
  if (meta.has_rng_state) {
    h += "meta.rng_state=";
    for (std::size_t i = 0; i < meta.rng_state.size(); ++i) {
      if (i) h += ' ';
      h += u64_hex(meta.rng_state[i]);
    }
    h += "\n";
  }
  return h;
}

inline ModelConfig decode_config(const HeaderMap& h) {
  ModelConfig cfg;
  cfg.variant = variant_from_string(h.need("variant"));
  cfg.scale = scale_from_string(h.need("scale"));
  cfg.input_channels = h.need_i64("input_channels");
  cfg.input_size = h.need_i64("input_size");
  cfg.stage_filters = split_i64(h.need("stage_filters"), "stage_filters");
  cfg.fc_width = h.need_i64("fc_width");
  cfg.dense_depth = h.need_i64("dense_depth");
  cfg.dense_growth = split_i64(h.need("dense_growth"), "dense_growth");
  cfg.residual_blocks = h.need_i64("residual_blocks");
  cfg.merge_filters = h.need_i64("merge_filters");
  cfg.noise_sigma = h.need_f64("noise_sigma");
  cfg.dropout_rate = h.need_f64("dropout_rate");
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw IoError(std::string("checkpoint: header describes an invalid "
                              "model: ") +
                  e.what());
  }
  return cfg;
}

inline CheckpointMeta decode_meta(const HeaderMap& h) {
  CheckpointMeta meta;
  meta.epochs_completed = h.need_i64("meta.epochs_completed");
  meta.best_val_loss = std::bit_cast<double>(
      parse_u64_hex(h.need("meta.best_val_loss_bits"),
                    "meta.best_val_loss_bits"));
  if (h.has("meta.rng_state")) {
    std::stringstream ss(h.need("meta.rng_state"));
    std::string word;
    std::size_t i = 0;
    while (ss >> word) {
      if (i >= meta.rng_state.size()) {
        throw IoError("checkpoint: meta.rng_state has too many words");
      }
      meta.rng_state[i++] = parse_u64_hex(word, "meta.rng_state");
    }
    if (i != meta.rng_state.size()) {
      throw IoError("checkpoint: meta.rng_state has too few words");
    }
    meta.has_rng_state = true;
  }
  return meta;
}

inline void append_doubles(std::string& out, const std::vector<double>& xs) {
  const std::size_t bytes = xs.size() * sizeof(double);
  const std::size_t base = out.size();
  out.resize(base + bytes);
  std::memcpy(out.data() + base, xs.data(), bytes);
}

inline std::vector<double> read_doubles(const std::string& in,
                                        std::size_t pos, std::size_t count) {
  std::vector<double> xs(count);
  std::memcpy(xs.data(), in.data() + pos, count * sizeof(double));
  return xs;
}

inline std::uint32_t crc32_of(const std::string& bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()),
              static_cast<uInt>(bytes.size())));
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  if (!in.good() && !in.eof()) {
    throw IoError("checkpoint: read failed for '" + path + "'");
  }
  return std::move(buf).str();
}

struct ParsedCheckpoint {
  ModelConfig config;
  CheckpointMeta meta;
  std::int64_t param_count = 0;
  std::vector<double> params;
  std::vector<double> velocity;
};

inline ParsedCheckpoint parse_checkpoint(const std::string& path) {
  const std::string bytes = read_file_bytes(path);
  if (bytes.size() < 16) {
    throw IoError("checkpoint: '" + path + "' is truncated");
  }
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw IoError("checkpoint: '" + path + "' is not a checkpoint file");
  }
  const std::uint32_t version = get_u32(bytes, 4);
  if (version != kCheckpointVersion) {
    throw IoError("checkpoint: unsupported version " +
                  std::to_string(version) + " in '" + path + "'");
  }
  const std::string body = bytes.substr(0, bytes.size() - 4);
  const std::uint32_t stored_crc = get_u32(bytes, bytes.size() - 4);
  if (crc32_of(body) != stored_crc) {
    throw IoError("checkpoint: CRC mismatch in '" + path +
                  "' (file is corrupt)");
  }
  const std::size_t header_len = get_u32(bytes, 8);
  if (12 + header_len > body.size()) {
    throw IoError("checkpoint: '" + path + "' is truncated");
  }
  const HeaderMap header(bytes.substr(12, header_len));
  ParsedCheckpoint parsed;
  parsed.config = decode_config(header);
  parsed.meta = decode_meta(header);
  parsed.param_count = header.need_i64("meta.param_count");
  if (parsed.param_count < 0) {
    throw IoError("checkpoint: negative parameter count in '" + path + "'");
  }
  const std::size_t payload =
      2 * static_cast<std::size_t>(parsed.param_count) * sizeof(double);
  if (12 + header_len + payload != body.size()) {
    throw IoError("checkpoint: '" + path + "' payload size mismatch");
  }
  const std::size_t n = static_cast<std::size_t>(parsed.param_count);
  parsed.params = read_doubles(bytes, 12 + header_len, n);
  parsed.velocity =
      read_doubles(bytes, 12 + header_len + n * sizeof(double), n);
  return parsed;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Network& net,
                            const CheckpointMeta& meta = {}) {
  std::string out;
  out.append(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  const std::string header =
      detail::encode_header(net.config(), meta, net.count_params());
  detail::put_u32(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  detail::append_doubles(out, net.snapshot_params());
  detail::append_doubles(out, net.snapshot_velocity());
  detail::put_u32(out, detail::crc32_of(out));

  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("checkpoint: cannot create '" + tmp + "'");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f.good()) throw IoError("checkpoint: write failed for '" + tmp + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    throw IoError("checkpoint: cannot move '" + tmp + "' to '" + path +
                  "': " + ec.message());
  }
}

// Header-only peek, e.g. to build a matching network before loading.
inline ModelConfig read_checkpoint_config(const std::string& path) {
  return detail::parse_checkpoint(path).config;
}

// Restores parameters and momentum into an existing, structurally identical
// network and returns the stored metadata.
inline CheckpointMeta load_checkpoint(const std::string& path, Network& net) {
  detail::ParsedCheckpoint parsed = detail::parse_checkpoint(path);
  const ModelConfig& want = net.config();
  const ModelConfig& have = parsed.config;
  if (have.variant != want.variant ||
      have.input_channels != want.input_channels ||
      have.input_size != want.input_size ||
      have.stage_filters != want.stage_filters ||
      have.fc_width != want.fc_width ||
      have.dense_depth != want.dense_depth ||
      have.dense_growth != want.dense_growth ||
      have.residual_blocks != want.residual_blocks ||
      have.merge_filters != want.merge_filters) {
    throw StateError("checkpoint: '" + path +
                     "' holds a different architecture (" +
                     variant_name(have.variant) + ", " +
                     std::to_string(parsed.param_count) +
                     " params) than the target network");
  }
  if (parsed.param_count != net.count_params()) {
    throw StateError("checkpoint: '" + path + "' holds " +
                     std::to_string(parsed.param_count) +
                     " parameters, network has " +
                     std::to_string(net.count_params()));
  }
  net.restore_params(parsed.params);
  net.restore_velocity(parsed.velocity);
  return parsed.meta;
}

struct LoadedNetwork {
  Network network;
  CheckpointMeta meta;
};

// Builds the network described by the checkpoint header and loads into it.
inline LoadedNetwork load_checkpoint_network(const std::string& path) {
  detail::ParsedCheckpoint parsed = detail::parse_checkpoint(path);
  LoadedNetwork out{Network(parsed.config), CheckpointMeta{}};
  if (parsed.param_count != out.network.count_params()) {
    throw IoError("checkpoint: '" + path + "' declares " +
                  std::to_string(parsed.param_count) +
                  " parameters but its architecture has " +
                  std::to_string(out.network.count_params()));
  }
  out.network.restore_params(parsed.params);
  out.network.restore_velocity(parsed.velocity);
  out.meta = parsed.meta;
  return out;
}

}  // namespace druseg
