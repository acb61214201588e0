#pragma once

// On-disk formats. Images and sinograms are raw little-endian float32,
// row-major, each with a JSON sidecar ("<name>.json") describing shape and
// provenance. A directory manifest records SHA-256 digests of every data file
// plus a digest of the manifest itself so tampering is detected on load.

#include <openssl/evp.h>
#include <png.h>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "s2s/errors.hpp"
#include "s2s/params.hpp"
#include "s2s/tensor.hpp"

namespace s2s::io {

namespace fs = std::filesystem;
using nlohmann::json;

inline std::string sha256_hex(const void* data, std::size_t size) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data, size, digest, &len, EVP_sha256(), nullptr) != 1)
    throw IoError("sha256: digest failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i)
    os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return os.str();
}

inline std::string sha256_hex(const std::string& s) { return sha256_hex(s.data(), s.size()); }

inline std::string read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_bytes(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

inline std::string file_sha256(const fs::path& path) { return sha256_hex(read_bytes(path)); }

inline json read_json(const fs::path& path) {
  try {
    return json::parse(read_bytes(path));
  } catch (const json::parse_error& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& path, const json& j) { write_bytes(path, j.dump(2) + "\n"); }

// ---------------------------------------------------------------------------
// float32 arrays

inline std::string encode_f32(std::span<const double> values) {
  std::string bytes(values.size() * 4, '\0');
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(values[i]));
    for (int b = 0; b < 4; ++b)
      bytes[i * 4 + static_cast<std::size_t>(b)] = static_cast<char>((bits >> (8 * b)) & 0xFFu);
  }
  return bytes;
}

inline std::vector<double> decode_f32(const std::string& bytes) {
  if (bytes.size() % 4) throw IoError("float32 payload size is not a multiple of 4");
  std::vector<double> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b)
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[i * 4 + static_cast<std::size_t>(b)]))
              << (8 * b);
    out[i] = static_cast<double>(std::bit_cast<float>(bits));
  }
  return out;
}

inline fs::path sidecar_path(const fs::path& data) {
  fs::path p = data;
  p.replace_extension(".json");
  return p;
}

/// Writes `<path>` (float32) and its sidecar. `meta` is merged into the
/// sidecar next to shape, dtype and byte order.
inline void write_array(const fs::path& path, const Tensor<double>& t, json meta = json::object()) {
  write_bytes(path, encode_f32(t.values()));
  meta["shape"] = t.shape();
  meta["dtype"] = "float32";
  meta["byte_order"] = "little";
  meta["layout"] = "row-major";
  write_json(sidecar_path(path), meta);
}

struct LoadedArray {
  Tensor<double> data;
  json meta;
};

inline LoadedArray read_array(const fs::path& path) {
  json meta = read_json(sidecar_path(path));
  if (meta.value("dtype", "") != "float32" || meta.value("byte_order", "") != "little")
    throw IoError(path.string() + ": unsupported dtype or byte order in sidecar");
  const auto shape = meta.at("shape").get<Shape>();
  auto values = decode_f32(read_bytes(path));
  if (values.size() != shape_volume(shape))
    throw IoError(path.string() + ": payload holds " + std::to_string(values.size()) +
                  " values, sidecar shape " + shape_string(shape));
  return {Tensor<double>(shape, std::move(values)), std::move(meta)};
}

// ---------------------------------------------------------------------------
// Manifest

inline constexpr const char* kManifestName = "manifest.json";

/// Digest over the canonical manifest without its own digest field.
inline std::string manifest_digest(json manifest) {
  manifest.erase("manifest_sha256");
  return sha256_hex(manifest.dump());
}

/// Hashes every file listed in `files` (relative to `dir`) and writes the
/// manifest with its self-digest.
inline json write_manifest(const fs::path& dir, json manifest, const std::vector<std::string>& files) {
  json digests = json::object();
  for (const auto& f : files) {
    digests[f] = file_sha256(dir / f);
    const auto side = sidecar_path(f).string();
    if (fs::exists(dir / side) && side != f) digests[side] = file_sha256(dir / side);
  }
  manifest["files"] = digests;
  manifest["manifest_sha256"] = manifest_digest(manifest);
  write_json(dir / kManifestName, manifest);
  return manifest;
}

/// Loads and verifies a manifest: self-digest and every listed file digest.
inline json load_manifest(const fs::path& dir) {
  const fs::path path = dir / kManifestName;
  if (!fs::exists(path)) throw IoError("missing manifest in " + dir.string());
  json manifest = read_json(path);
  if (!manifest.contains("manifest_sha256") || !manifest.contains("files"))
    throw IoError(path.string() + ": manifest lacks digests");
  if (manifest["manifest_sha256"].get<std::string>() != manifest_digest(manifest))
    throw IoError(path.string() + ": manifest digest mismatch (manifest was modified)");
  for (const auto& [name, digest] : manifest["files"].items()) {
    if (!fs::exists(dir / name)) throw IoError("manifest lists missing file " + name);
    if (file_sha256(dir / name) != digest.get<std::string>())
      throw IoError("digest mismatch for " + (dir / name).string());
  }
  return manifest;
}

// ---------------------------------------------------------------------------
// CSV

inline std::string csv_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return os.str();
}

/// Appends rows to a CSV file, writing the header when the file is new.
class CsvWriter {
 public:
  CsvWriter(const fs::path& path, const std::vector<std::string>& header) {
    const bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
    out_.open(path, std::ios::app);
    if (!out_) throw IoError("cannot open " + path.string());
    if (fresh) row(header);
  }

  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
    out_ << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

// ---------------------------------------------------------------------------
// PNG

/// 8-bit gray level of `v` under window [lo, hi], clamped.
inline std::uint8_t window_level(double v, double lo, double hi) {
  const double t = (v - lo) / (hi - lo);
  const double g = std::round(255.0 * std::clamp(t, 0.0, 1.0));
  return static_cast<std::uint8_t>(g);
}

inline void write_png_gray(const fs::path& path, const Tensor<double>& image, double lo, double hi) {
  require_rank(image.shape(), 2, "export-png");
  if (!(hi > lo)) throw std::invalid_argument("export-png: window upper bound must exceed lower");
  const auto h = static_cast<png_uint_32>(image.dim(0));
  const auto w = static_cast<png_uint_32>(image.dim(1));
  std::vector<png_byte> pixels(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) pixels[i] = window_level(image[i], lo, hi);

  std::FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw IoError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw IoError("libpng failed writing " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, w, h, 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (png_uint_32 r = 0; r < h; ++r) png_write_row(png, pixels.data() + static_cast<std::size_t>(r) * w);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

struct GrayImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;
};

inline GrayImage read_png_gray(const fs::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str()))
    throw IoError("cannot read PNG " + path.string());
  img.format = PNG_FORMAT_GRAY;
  GrayImage out{img.height, img.width, std::vector<std::uint8_t>(PNG_IMAGE_SIZE(img))};
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr))
    throw IoError("cannot decode PNG " + path.string());
  return out;
}

// ---------------------------------------------------------------------------
// Network parameters
//
// Layout: 8-byte little-endian header length, the JSON header
// {"format": "s2s-params", "version": 1, "tensors": [{name, shape, offset,
// bytes}]}, then the float32 little-endian payload; offsets are relative to
// the start of the payload.

template <class T>
void write_params(const fs::path& path, const ParamSet<T>& params) {
  json header{{"format", "s2s-params"}, {"version", 1}, {"dtype", "float32"},
              {"byte_order", "little"}};
  json tensors = json::array();
  std::string payload;
  for (const auto& p : params) {
    std::vector<double> v(p.value.values().begin(), p.value.values().end());
    const auto bytes = encode_f32(v);
    tensors.push_back({{"name", p.name}, {"shape", p.value.shape()}, {"offset", payload.size()},
                       {"bytes", bytes.size()}});
    payload += bytes;
  }
  header["tensors"] = tensors;
  const std::string head = header.dump();
  std::string out(8, '\0');
  const auto len = static_cast<std::uint64_t>(head.size());
  for (int b = 0; b < 8; ++b) out[static_cast<std::size_t>(b)] = static_cast<char>((len >> (8 * b)) & 0xFFu);
  write_bytes(path, out + head + payload);
}

/// Loads values into an existing ParamSet; names and shapes must match.
template <class T>
void read_params(const fs::path& path, ParamSet<T>& params) {
  const std::string bytes = read_bytes(path);
  if (bytes.size() < 8) throw IoError(path.string() + ": truncated parameter file");
  std::uint64_t len = 0;
  for (int b = 0; b < 8; ++b)
    len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[static_cast<std::size_t>(b)])) << (8 * b);
  if (8 + len > bytes.size()) throw IoError(path.string() + ": header exceeds file");
  const json header = json::parse(bytes.substr(8, len));
  if (header.value("format", "") != "s2s-params") throw IoError(path.string() + ": not a parameter file");
  const std::string payload = bytes.substr(8 + len);
  const auto& tensors = header.at("tensors");
  if (tensors.size() != params.size()) throw IoError(path.string() + ": parameter count mismatch");
  for (const auto& t : tensors) {
    const auto name = t.at("name").get<std::string>();
    if (!params.contains(name)) throw IoError(path.string() + ": unknown parameter " + name);
    auto& p = params[name];
    if (t.at("shape").get<Shape>() != p.value.shape())
      throw IoError(path.string() + ": shape mismatch for " + name);
    const auto off = t.at("offset").get<std::size_t>(), n = t.at("bytes").get<std::size_t>();
    if (off + n > payload.size()) throw IoError(path.string() + ": payload truncated at " + name);
    const auto values = decode_f32(payload.substr(off, n));
    for (std::size_t i = 0; i < values.size(); ++i) p.value[i] = static_cast<T>(values[i]);
  }
}

}  // namespace s2s::io
