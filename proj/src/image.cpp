#include "mmchat/image.hpp"

#include <png.h>
// jpeglib.h needs FILE and size_t declared first
#include <cstdio>
#include <jpeglib.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mmchat/error.hpp"

namespace mmchat::corpus {
namespace {

RawImage decode_png(const std::vector<std::uint8_t>& bytes, const std::string& label) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw ImageLoadError(label, std::string("png: ") + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  RawImage out;
  out.width = static_cast<int>(image.width);
  out.height = static_cast<int>(image.height);
  out.rgb.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, out.rgb.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw ImageLoadError(label, "png: " + msg);
  }
  return out;
}

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr info) {
  auto* mgr = reinterpret_cast<JpegErrorManager*>(info->err);
  (*info->err->format_message)(info, mgr->message);
  std::longjmp(mgr->jump, 1);
}

RawImage decode_jpeg(const std::vector<std::uint8_t>& bytes, const std::string& label) {
  jpeg_decompress_struct info;
  JpegErrorManager err;
  info.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_error_exit;
  RawImage out;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&info);
    throw ImageLoadError(label, std::string("jpeg: ") + err.message);
  }
  jpeg_create_decompress(&info);
  jpeg_mem_src(&info, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&info, TRUE);
  info.out_color_space = JCS_RGB;
  jpeg_start_decompress(&info);
  out.width = static_cast<int>(info.output_width);
  out.height = static_cast<int>(info.output_height);
  out.rgb.resize(static_cast<std::size_t>(out.width) * out.height * 3);
  while (info.output_scanline < info.output_height) {
    JSAMPROW row = out.rgb.data() + static_cast<std::size_t>(info.output_scanline) * out.width * 3;
    jpeg_read_scanlines(&info, &row, 1);
  }
  jpeg_finish_decompress(&info);
  jpeg_destroy_decompress(&info);
  return out;
}

RawImage decode_ppm(const std::vector<std::uint8_t>& bytes, const std::string& label) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&] {
    skip_space();
    long v = 0;
    bool any = false;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      any = true;
      if (v > 1 << 20) throw ImageLoadError(label, "ppm: value too large");
    }
    if (!any) throw ImageLoadError(label, "ppm: malformed header");
    return static_cast<int>(v);
  };
  const bool binary = bytes[1] == '6';
  pos = 2;
  RawImage out;
  out.width = read_int();
  out.height = read_int();
  const int maxval = read_int();
  if (maxval <= 0 || maxval > 255) throw ImageLoadError(label, "ppm: only 8-bit maxval supported");
  const std::size_t n = static_cast<std::size_t>(out.width) * out.height * 3;
  out.rgb.resize(n);
  if (binary) {
    ++pos;  // single whitespace after maxval
    if (bytes.size() < pos + n) throw ImageLoadError(label, "ppm: truncated pixel data");
    std::copy_n(bytes.begin() + static_cast<long>(pos), n, out.rgb.begin());
  } else {
    for (std::size_t i = 0; i < n; ++i) out.rgb[i] = static_cast<std::uint8_t>(read_int());
  }
  if (maxval != 255) {
    for (auto& v : out.rgb) v = static_cast<std::uint8_t>(std::lround(v * 255.0 / maxval));
  }
  return out;
}

std::array<std::uint8_t, 3> color_at(const nlohmann::json& colors, std::size_t i, std::array<std::uint8_t, 3> fallback) {
  if (!colors.is_array() || i >= colors.size()) return fallback;
  const auto c = colors[i].get<std::vector<int>>();
  if (c.size() != 3) throw ValidationError("synthetic image colors must be [r,g,b]");
  return {static_cast<std::uint8_t>(std::clamp(c[0], 0, 255)), static_cast<std::uint8_t>(std::clamp(c[1], 0, 255)),
          static_cast<std::uint8_t>(std::clamp(c[2], 0, 255))};
}

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

PixelImage PixelImage::dummy(int side) {
  return {side, std::vector<float>(static_cast<std::size_t>(side) * side * 3, 0.0f)};
}

bool PixelImage::is_zero() const {
  return std::all_of(pixels.begin(), pixels.end(), [](float v) { return v == 0.0f; });
}

RawImage decode_raster(const std::vector<std::uint8_t>& bytes, const std::string& label) {
  if (bytes.size() >= 8 && bytes[0] == 0x89 && bytes[1] == 'P' && bytes[2] == 'N' && bytes[3] == 'G') {
    return decode_png(bytes, label);
  }
  if (bytes.size() >= 3 && bytes[0] == 0xFF && bytes[1] == 0xD8 && bytes[2] == 0xFF) {
    return decode_jpeg(bytes, label);
  }
  if (bytes.size() >= 2 && bytes[0] == 'P' && (bytes[1] == '6' || bytes[1] == '3')) {
    return decode_ppm(bytes, label);
  }
  throw ImageLoadError(label, "unrecognized raster format");
}

RawImage decode_raster(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageLoadError(path.string(), "cannot open file");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_raster(bytes, path.string());
}

std::vector<std::uint8_t> encode_png(const RawImage& image) {
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&png, nullptr, &size, 0, image.rgb.data(), 0, nullptr)) {
    throw Error(std::string("png encode: ") + png.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&png, out.data(), &size, 0, image.rgb.data(), 0, nullptr)) {
    throw Error(std::string("png encode: ") + png.message);
  }
  out.resize(size);
  return out;
}

RawImage render_synthetic(const nlohmann::json& spec) {
  const std::string pattern = spec.value("pattern", "solid");
  const int size = spec.value("size", 64);
  const int cell = std::max(1, spec.value("cell", 8));
  if (size <= 0 || size > 4096) throw ValidationError("synthetic image size out of range");
  const auto& colors = spec.contains("colors") ? spec["colors"] : nlohmann::json();
  const auto a = color_at(colors, 0, {255, 255, 255});
  const auto b = color_at(colors, 1, {0, 0, 0});
  std::uint64_t state = spec.value("seed", std::uint64_t{0});

  RawImage out{size, size, std::vector<std::uint8_t>(static_cast<std::size_t>(size) * size * 3)};
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      std::uint8_t* px = out.rgb.data() + (static_cast<std::size_t>(y) * size + x) * 3;
      bool use_b = false;
      if (pattern == "solid") {
        use_b = false;
      } else if (pattern == "checker") {
        use_b = ((x / cell) + (y / cell)) % 2 == 1;
      } else if (pattern == "hstripes") {
        use_b = (y / cell) % 2 == 1;
      } else if (pattern == "vstripes") {
        use_b = (x / cell) % 2 == 1;
      } else if (pattern == "diagonal") {
        use_b = ((x + y) / cell) % 2 == 1;
      } else if (pattern == "gradient") {
        const float t = size > 1 ? static_cast<float>(x) / (size - 1) : 0.0f;
        for (int c = 0; c < 3; ++c) px[c] = static_cast<std::uint8_t>(std::lround(a[c] * (1 - t) + b[c] * t));
        continue;
      } else if (pattern == "noise") {
        const std::uint64_t r = splitmix64(state);
        for (int c = 0; c < 3; ++c) px[c] = static_cast<std::uint8_t>((r >> (8 * c)) & 0xFF);
        continue;
      } else {
        throw ValidationError("unknown synthetic pattern '" + pattern + "'");
      }
      const auto& col = use_b ? b : a;
      std::copy(col.begin(), col.end(), px);
    }
  }
  return out;
}

PixelImage normalize_image(const RawImage& raw, int side) {
  if (side <= 0) throw ValidationError("image side must be positive");
  if (raw.width <= 0 || raw.height <= 0) throw ValidationError("empty raster");
  PixelImage out{side, std::vector<float>(static_cast<std::size_t>(side) * side * 3)};
  const double sx = static_cast<double>(raw.width) / side;
  const double sy = static_cast<double>(raw.height) / side;
  auto src = [&](int y, int x, int c) { return static_cast<double>(raw.rgb[(static_cast<std::size_t>(y) * raw.width + x) * 3 + c]); };
  for (int y = 0; y < side; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(raw.height - 1));
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, raw.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < side; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(raw.width - 1));
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, raw.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const double top = src(y0, x0, c) * (1 - wx) + src(y0, x1, c) * wx;
        const double bottom = src(y1, x0, c) * (1 - wx) + src(y1, x1, c) * wx;
        const double v = top * (1 - wy) + bottom * wy;
        out.pixels[(static_cast<std::size_t>(y) * side + x) * 3 + c] = static_cast<float>(v / 127.5 - 1.0);
      }
    }
  }
  return out;
}

RawImage load_raw(const ImageSource& source, const std::string& ref) {
  switch (source.kind) {
    case ImageSource::Kind::kDummy:
      return {1, 1, {128, 128, 128}};
    case ImageSource::Kind::kFile:
      try {
        return decode_raster(source.path);
      } catch (const ImageLoadError& e) {
        throw ImageLoadError(ref.empty() ? source.path.string() : ref, e.what());
      }
    case ImageSource::Kind::kSynthetic:
      try {
        return render_synthetic(source.spec);
      } catch (const std::exception& e) {
        throw ImageLoadError(ref.empty() ? "synthetic" : ref, e.what());
      }
  }
  throw ImageLoadError(ref, "unknown image source");
}

PixelImage load_image(const ImageSource& source, int side, const std::string& ref) {
  if (source.kind == ImageSource::Kind::kDummy) return PixelImage::dummy(side);
  return normalize_image(load_raw(source, ref), side);
}

ImageManifest ImageManifest::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open image manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return from_json(j, path.parent_path());
}

ImageManifest ImageManifest::from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  if (!j.is_object()) throw ParseError("image manifest must be a JSON object");
  ImageManifest m;
  for (const auto& [id, entry] : j.items()) {
    ImageSource src;
    if (entry.contains("path")) {
      src.kind = ImageSource::Kind::kFile;
      std::filesystem::path p = entry["path"].get<std::string>();
      src.path = p.is_relative() && !base_dir.empty() ? base_dir / p : p;
    } else if (entry.contains("synthetic")) {
      src.kind = ImageSource::Kind::kSynthetic;
      src.spec = entry["synthetic"];
    } else {
      throw ParseError("image manifest entry '" + id + "' needs \"path\" or \"synthetic\"");
    }
    m.add(id, std::move(src));
  }
  return m;
}

nlohmann::json ImageManifest::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [id, src] : entries_) {
    if (src.kind == ImageSource::Kind::kFile) j[id] = {{"path", src.path.string()}};
    if (src.kind == ImageSource::Kind::kSynthetic) j[id] = {{"synthetic", src.spec}};
  }
  return j;
}

void ImageManifest::add(const std::string& id, ImageSource source) {
  if (id == kDummyImage) throw ValidationError("image id DUMMY is reserved");
  entries_[id] = std::move(source);
}

bool ImageManifest::available(const std::string& id) const {
  auto it = entries_.find(id);
  if (it == entries_.end()) return false;
  if (it->second.kind == ImageSource::Kind::kFile) return std::filesystem::is_regular_file(it->second.path);
  return true;
}

const ImageSource& ImageManifest::source(const std::string& id) const {
  auto it = entries_.find(id);
  if (it == entries_.end()) throw ImageLoadError(id, "not in manifest");
  return it->second;
}

std::vector<std::string> ImageManifest::ids() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [id, _] : entries_) out.push_back(id);
  return out;
}

PixelImage ImageManifest::load(const std::string& id, int side) const {
  if (id == kDummyImage) return PixelImage::dummy(side);
  return load_image(source(id), side, id);
}

}  // namespace mmchat::corpus
