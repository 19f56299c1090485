#include <doctest.h>

#include <cmath>

#include "mmchat/error.hpp"
#include "mmchat/image.hpp"
#include "test_util.hpp"

using namespace mmchat;
using namespace mmchat::corpus;

TEST_CASE("dummy image is zero at any side") {
  for (int side : {1, 32, 224}) {
    auto img = PixelImage::dummy(side);
    CHECK(img.pixels.size() == static_cast<std::size_t>(side * side * 3));
    CHECK(img.is_zero());
  }
  ImageManifest m;
  CHECK(m.load(kDummyImage, 8).is_zero());
}

TEST_CASE("uniform gray 128 maps to 128/127.5 - 1") {
  auto img = load_image({ImageSource::Kind::kFile, test::data_dir() / "gray128.png", {}}, 32);
  const float expected = static_cast<float>(128.0 / 127.5 - 1.0);  // 0.00392...
  CHECK(img.side == 32);
  for (float v : img.pixels) CHECK(v == doctest::Approx(expected).epsilon(1e-6));
}

TEST_CASE("rescaling yields exactly side x side") {
  ImageManifest m = ImageManifest::load(test::fixture_dir() / "images.json");
  auto img = m.load("dog_beach", 32);  // 64x64 PNG
  CHECK(img.side == 32);
  CHECK(img.pixels.size() == 32u * 32u * 3u);
  auto jpg = m.load("cat_luna", 16);  // 56x40 JPEG
  CHECK(jpg.pixels.size() == 16u * 16u * 3u);
  auto ppm = m.load("garden", 8);
  CHECK(ppm.pixels.size() == 8u * 8u * 3u);
  for (float v : jpg.pixels) {
    CHECK(v >= -1.0f);
    CHECK(v <= 1.0f);
  }
}

TEST_CASE("bilinear downsample by two averages 2x2 blocks") {
  RawImage raw{4, 4, {}};
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x)
      for (int c = 0; c < 3; ++c) raw.rgb.push_back(static_cast<std::uint8_t>(y * 40 + x * 10 + c));
  auto img = normalize_image(raw, 2);
  // Output pixel (0,0) samples source position (0.5, 0.5): mean of the top-left block.
  const double mean = (0 + 10 + 40 + 50) / 4.0;
  CHECK(img.at(0, 0, 0) == doctest::Approx(mean / 127.5 - 1.0).epsilon(1e-6));
}

TEST_CASE("image loading is deterministic") {
  ImageManifest m = ImageManifest::load(test::fixture_dir() / "images.json");
  for (const auto& id : {"snowman", "sunset", "cat_luna"}) {
    CHECK(m.load(id, 32).pixels == m.load(id, 32).pixels);
  }
  CHECK(m.load("red_car", 32).pixels != m.load("bike", 32).pixels);
}

TEST_CASE("manifest availability and load errors carry the reference") {
  ImageManifest m = ImageManifest::load(test::fixture_dir() / "images.json");
  CHECK(m.available("dog_beach"));
  CHECK(m.contains("pizza"));
  CHECK_FALSE(m.available("pizza"));
  CHECK_FALSE(m.available("coffee"));
  try {
    m.load("pizza", 32);
    FAIL("expected ImageLoadError");
  } catch (const ImageLoadError& e) {
    CHECK(e.ref() == "pizza");
  }
  CHECK_THROWS_AS(m.load("coffee", 32), ImageLoadError);
  CHECK_THROWS_AS(ImageManifest::from_json({{"x", {{"neither", 1}}}}), ParseError);
}

TEST_CASE("png encode/decode round trip and garbage rejection") {
  RawImage raw = render_synthetic({{"pattern", "checker"}, {"size", 12}, {"cell", 3}});
  auto png = encode_png(raw);
  auto back = decode_raster(png, "mem");
  CHECK(back.width == 12);
  CHECK(back.rgb == raw.rgb);
  std::vector<std::uint8_t> junk = {1, 2, 3, 4, 5};
  CHECK_THROWS_AS(decode_raster(junk, "junk"), ImageLoadError);
  CHECK_THROWS_AS(render_synthetic({{"pattern", "spiral"}}), ValidationError);
}

TEST_CASE("ascii ppm") {
  const std::string text = "P3\n# two pixels\n2 1\n255\n255 0 0  0 0 255\n";
  std::vector<std::uint8_t> bytes(text.begin(), text.end());
  auto raw = decode_raster(bytes, "p3");
  CHECK(raw.width == 2);
  CHECK(raw.rgb == std::vector<std::uint8_t>{255, 0, 0, 0, 0, 255});
}
