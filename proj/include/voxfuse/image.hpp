#pragma once

// PPM (P6) image I/O and bilinear resampling. Images are [3, H, W] tensors
// with values in [0, 1]; files are 8-bit, so a write/read round trip is
// exact to 1/255 quantization.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>

#include "voxfuse/common.hpp"
#include "voxfuse/tensor.hpp"

namespace voxfuse {

template <Scalar T>
Tensor<T> read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("ppm: cannot open '" + path.string() + "'");
  std::string magic;
  in >> magic;
  if (magic != "P6") {
    throw DataError("ppm: unsupported format '" + magic + "' in '" +
                    path.string() + "' (only binary P6)");
  }
  int w = 0, h = 0, maxval = 0;
  if (!(in >> w >> h >> maxval) || w < 1 || h < 1) {
    throw DataError("ppm: corrupt header in '" + path.string() + "'");
  }
  if (maxval != 255) {
    throw DataError("ppm: maxval " + std::to_string(maxval) +
                    " unsupported (expected 255)");
  }
  in.get();  // single whitespace byte after the header
  std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * 3);
  if (!in.read(reinterpret_cast<char*>(raw.data()),
               static_cast<std::streamsize>(raw.size()))) {
    throw DataError("ppm: truncated pixel data in '" + path.string() + "'");
  }
  Tensor<T> img = Tensor<T>::zeros({3, h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        img.ptr()[(static_cast<std::int64_t>(c) * h + y) * w + x] =
            static_cast<T>(raw[(static_cast<std::size_t>(y) * w + x) * 3 + c]) /
            T(255);
      }
    }
  }
  return img;
}

template <Scalar T>
void write_ppm(const Tensor<T>& img, const std::filesystem::path& path) {
  if (img.rank() != 3 || img.extent(0) != 3) {
    throw ShapeError("ppm: image must be [3, H, W], got " + shape_str(img.shape()));
  }
  const int h = img.extent(1), w = img.extent(2);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("ppm: cannot open '" + path.string() + "' for writing");
  out << "P6\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        const T v = img.ptr()[(static_cast<std::int64_t>(c) * h + y) * w + x];
        const double q = std::round(std::min(1.0, std::max(0.0, double(v))) * 255.0);
        raw[(static_cast<std::size_t>(y) * w + x) * 3 + c] =
            static_cast<unsigned char>(q);
      }
    }
  }
  out.write(reinterpret_cast<const char*>(raw.data()),
            static_cast<std::streamsize>(raw.size()));
  if (!out) throw IoError("ppm: short write to '" + path.string() + "'");
}

// Bilinear resize with center-aligned sampling; the identity size is an
// exact copy.
template <Scalar T>
Tensor<T> resize_bilinear(const Tensor<T>& img, int out_h, int out_w) {
  if (img.rank() != 3) throw ShapeError("resize: image must be [C, H, W]");
  const int C = img.extent(0), H = img.extent(1), W = img.extent(2);
  if (out_h < 1 || out_w < 1) throw ShapeError("resize: target must be positive");
  if (out_h == H && out_w == W) return img.clone();
  Tensor<T> out = Tensor<T>::zeros({C, out_h, out_w});
  const double sy = double(H) / out_h, sx = double(W) / out_w;
  for (int c = 0; c < C; ++c) {
    const T* src = img.ptr() + static_cast<std::int64_t>(c) * H * W;
    T* dst = out.ptr() + static_cast<std::int64_t>(c) * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const double fy = std::max(0.0, std::min(double(H) - 1.0, (oy + 0.5) * sy - 0.5));
      const int y0 = static_cast<int>(fy);
      const int y1 = std::min(H - 1, y0 + 1);
      const double wy = fy - y0;
      for (int ox = 0; ox < out_w; ++ox) {
        const double fx = std::max(0.0, std::min(double(W) - 1.0, (ox + 0.5) * sx - 0.5));
        const int x0 = static_cast<int>(fx);
        const int x1 = std::min(W - 1, x0 + 1);
        const double wx = fx - x0;
        const double v =
            (1 - wy) * ((1 - wx) * src[y0 * W + x0] + wx * src[y0 * W + x1]) +
            wy * ((1 - wx) * src[y1 * W + x0] + wx * src[y1 * W + x1]);
        dst[oy * out_w + ox] = static_cast<T>(v);
      }
    }
  }
  return out;
}

template <Scalar T>
Tensor<T> load_image(const std::filesystem::path& path, int target_side) {
  return resize_bilinear(read_ppm<T>(path), target_side, target_side);
}

template <Scalar T>
Tensor<T> crop_and_rescale(const Tensor<T>& img, int x, int y, int w, int h,
                           int target_side) {
  if (img.rank() != 3) throw ShapeError("crop: image must be [C, H, W]");
  const int C = img.extent(0), H = img.extent(1), W = img.extent(2);
  if (x < 0 || y < 0 || w < 1 || h < 1 || x + w > W || y + h > H) {
    throw BoundsError("crop: bbox (" + std::to_string(x) + "," +
                      std::to_string(y) + "," + std::to_string(w) + "," +
                      std::to_string(h) + ") outside " + std::to_string(W) +
                      "x" + std::to_string(H));
  }
  Tensor<T> cropped = Tensor<T>::zeros({C, h, w});
  for (int c = 0; c < C; ++c) {
    for (int yy = 0; yy < h; ++yy) {
      const T* src = img.ptr() + (static_cast<std::int64_t>(c) * H + (y + yy)) * W + x;
      T* dst = cropped.ptr() + (static_cast<std::int64_t>(c) * h + yy) * w;
      std::copy(src, src + w, dst);
    }
  }
  return resize_bilinear(cropped, target_side, target_side);
}

}  // namespace voxfuse
