#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

#include "sa/synthdata.hpp"

namespace sa {

void write_ppm(const std::string& path, const Tensor& img) {
  if (img.shape.size() != 3 || img.shape[0] != 3)
    throw std::invalid_argument("write_ppm: image must be [3,H,W]");
  int H = img.shape[1], W = img.shape[2];
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_ppm: cannot open " + path);
  f << "P6\n" << W << " " << H << "\n255\n";
  std::vector<unsigned char> row(static_cast<size_t>(W) * 3);
  for (int i = 0; i < H; ++i) {
    for (int j = 0; j < W; ++j)
      for (int c = 0; c < 3; ++c) {
        double v = std::clamp(img.at(c, i, j), 0.0, 1.0);
        row[static_cast<size_t>(j) * 3 + c] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!f) throw std::runtime_error("write_ppm: write failed for " + path);
}

Tensor read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_ppm: cannot open " + path);
  std::string magic;
  int W, H, maxval;
  f >> magic >> W >> H >> maxval;
  if (magic != "P6" || maxval != 255) throw std::runtime_error("read_ppm: unsupported format in " + path);
  f.get();  // single whitespace after header
  Tensor img({3, H, W});
  std::vector<unsigned char> row(static_cast<size_t>(W) * 3);
  for (int i = 0; i < H; ++i) {
    f.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
    if (!f) throw std::runtime_error("read_ppm: truncated file " + path);
    for (int j = 0; j < W; ++j)
      for (int c = 0; c < 3; ++c)
        img.at(c, i, j) = row[static_cast<size_t>(j) * 3 + c] / 255.0;
  }
  return img;
}

void write_pfm(const std::string& path, const Tensor& field) {
  if (field.shape.size() != 3 || field.shape[0] != 1)
    throw std::invalid_argument("write_pfm: field must be [1,H,W]");
  int H = field.shape[1], W = field.shape[2];
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_pfm: cannot open " + path);
  f << "Pf\n" << W << " " << H << "\n-1.0\n";  // negative scale: little endian
  std::vector<float> row(static_cast<size_t>(W));
  for (int i = H - 1; i >= 0; --i) {  // bottom-up row order
    for (int j = 0; j < W; ++j) row[static_cast<size_t>(j)] = static_cast<float>(field.at(0, i, j));
    f.write(reinterpret_cast<const char*>(row.data()),
            static_cast<std::streamsize>(row.size() * sizeof(float)));
  }
  if (!f) throw std::runtime_error("write_pfm: write failed for " + path);
}

Tensor read_pfm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_pfm: cannot open " + path);
  std::string magic;
  int W, H;
  double scale;
  f >> magic >> W >> H >> scale;
  if (magic != "Pf" || scale >= 0) throw std::runtime_error("read_pfm: unsupported format in " + path);
  f.get();
  Tensor field({1, H, W});
  std::vector<float> row(static_cast<size_t>(W));
  for (int i = H - 1; i >= 0; --i) {
    f.read(reinterpret_cast<char*>(row.data()),
           static_cast<std::streamsize>(row.size() * sizeof(float)));
    if (!f) throw std::runtime_error("read_pfm: truncated file " + path);
    for (int j = 0; j < W; ++j) field.at(0, i, j) = row[static_cast<size_t>(j)];
  }
  return field;
}

}  // namespace sa
