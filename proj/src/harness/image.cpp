#include <fstream>
#include <sstream>

#include "chart/error.hpp"
#include "chart/harness.hpp"

namespace chart {

void RgbImage::put(std::size_t y, std::size_t x, const std::array<std::uint8_t, 3>& rgb) {
  if (y >= height || x >= width) return;
  std::uint8_t* p = pixels.data() + (y * width + x) * 3;
  p[0] = rgb[0];
  p[1] = rgb[1];
  p[2] = rgb[2];
}

Tensor RgbImage::to_tensor() const {
  std::vector<double> v(3 * height * width);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t k = 0; k < height * width; ++k) v[c * height * width + k] = pixels[k * 3 + c] / 255.0;
  return Tensor::from({3, height, width}, std::move(v));
}

void write_ppm(const std::filesystem::path& path, const RgbImage& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P6\n" << image.width << " " << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
}

RgbImage read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open image " + path.string());
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || w == 0 || h == 0 || maxval != 255) throw InputError("unsupported image (binary 8-bit PPM expected): " + path.string());
  in.get();
  RgbImage img(h, w);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) throw InputError("truncated image " + path.string());
  return img;
}

Tensor load_image_tensor(const std::filesystem::path& root, const std::string& name) {
  const std::filesystem::path p(name);
  return read_ppm(p.is_absolute() ? p : root / p).to_tensor();
}

}  // namespace chart
