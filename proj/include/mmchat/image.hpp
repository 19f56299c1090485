#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace mmchat::corpus {

// Reserved image id for the all-zero conditioning image.
inline constexpr const char* kDummyImage = "DUMMY";

// 8-bit RGB raster as decoded from disk or rendered from a synthetic spec.
struct RawImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel
};

// side x side x 3 grid of intensities in [-1, 1], stored HWC.
struct PixelImage {
  int side = 0;
  std::vector<float> pixels;

  static PixelImage dummy(int side);
  float at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * side + x) * 3 + c]; }
  bool is_zero() const;
};

// Where an image id's pixels come from.
struct ImageSource {
  enum class Kind { kDummy, kFile, kSynthetic };
  Kind kind = Kind::kDummy;
  std::filesystem::path path;  // kFile
  nlohmann::json spec;         // kSynthetic
};

// Decodes PNG, JPEG or binary/ASCII PPM by content sniffing.
RawImage decode_raster(const std::filesystem::path& path);
RawImage decode_raster(const std::vector<std::uint8_t>& bytes, const std::string& label);
std::vector<std::uint8_t> encode_png(const RawImage& image);

// Synthetic spec: {"pattern": solid|checker|hstripes|vstripes|diagonal|gradient|noise,
//                  "colors": [[r,g,b], [r,g,b]], "cell": int, "size": int, "seed": int}
RawImage render_synthetic(const nlohmann::json& spec);

// Bilinear resample to side x side (half-pixel centers) then x/127.5 - 1.
PixelImage normalize_image(const RawImage& raw, int side);

// Deterministic; throws ImageLoadError carrying the reference on failure.
PixelImage load_image(const ImageSource& source, int side, const std::string& ref = "");
RawImage load_raw(const ImageSource& source, const std::string& ref = "");

// JSON map image_id -> {"path": ...} | {"synthetic": {...}}. Relative paths are
// resolved against the manifest's directory.
class ImageManifest {
 public:
  ImageManifest() = default;
  static ImageManifest load(const std::filesystem::path& path);
  static ImageManifest from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
  nlohmann::json to_json() const;

  void add(const std::string& id, ImageSource source);
  bool contains(const std::string& id) const { return entries_.count(id) != 0; }
  // An id is available when listed and, for files, the file exists.
  bool available(const std::string& id) const;
  const ImageSource& source(const std::string& id) const;
  std::vector<std::string> ids() const;
  std::size_t size() const { return entries_.size(); }

  PixelImage load(const std::string& id, int side) const;

 private:
  std::map<std::string, ImageSource> entries_;
};

}  // namespace mmchat::corpus
