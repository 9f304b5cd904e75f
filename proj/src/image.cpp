#include "dunet/image.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#ifdef DUNET_WITH_PNG
#include <png.h>
#endif

namespace dunet {

void write_ppm(const std::string& path, const Image& img) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("write_ppm: cannot open " + path);
  os << "P6\n" << img.width << " " << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.rgb.data()),
           static_cast<std::streamsize>(img.rgb.size()));
  if (!os) throw std::runtime_error("write_ppm: write failed for " + path);
}

static int ppm_token(std::istream& is) {
  // Skips whitespace and '#' comments, then parses one integer.
  int c = is.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = is.get();
    } else if (std::isspace(c)) {
      c = is.get();
    } else {
      break;
    }
  }
  if (c == EOF || !std::isdigit(c)) throw std::runtime_error("read_ppm: malformed header");
  int v = 0;
  while (c != EOF && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    c = is.get();
  }
  return v;
}

Image read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_ppm: cannot open " + path);
  char m0 = 0, m1 = 0;
  is.get(m0).get(m1);
  if (m0 != 'P' || m1 != '6') throw std::runtime_error("read_ppm: not a P6 file: " + path);
  const int w = ppm_token(is), h = ppm_token(is), maxval = ppm_token(is);
  if (w <= 0 || h <= 0 || maxval != 255)
    throw std::runtime_error("read_ppm: unsupported header in " + path);
  Image img(w, h);
  is.read(reinterpret_cast<char*>(img.rgb.data()),
          static_cast<std::streamsize>(img.rgb.size()));
  if (!is) throw std::runtime_error("read_ppm: truncated pixel data in " + path);
  return img;
}

#ifdef DUNET_WITH_PNG
static Image read_png(const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw std::runtime_error("read_png: cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw std::runtime_error("read_png: libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw std::runtime_error("read_png: decode failed for " + path);
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY ||
      png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  Image img(static_cast<int>(png_get_image_width(png, info)),
            static_cast<int>(png_get_image_height(png, info)));
  std::vector<png_bytep> rows(static_cast<size_t>(img.height));
  for (int y = 0; y < img.height; ++y) rows[static_cast<size_t>(y)] = img.px(0, y);
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return img;
}
#endif

Image read_image(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_image: cannot open " + path);
  unsigned char magic[2] = {0, 0};
  is.read(reinterpret_cast<char*>(magic), 2);
  is.close();
  if (magic[0] == 'P' && magic[1] == '6') return read_ppm(path);
#ifdef DUNET_WITH_PNG
  if (magic[0] == 0x89 && magic[1] == 'P') return read_png(path);
#endif
  throw std::runtime_error("read_image: unsupported format for " + path);
}

Image resize_nearest(const Image& img, int out_w, int out_h) {
  Image out(out_w, out_h);
  for (int y = 0; y < out_h; ++y) {
    const int sy = std::min(img.height - 1, y * img.height / out_h);
    for (int x = 0; x < out_w; ++x) {
      const int sx = std::min(img.width - 1, x * img.width / out_w);
      const uint8_t* s = img.px(sx, sy);
      uint8_t* d = out.px(x, y);
      d[0] = s[0];
      d[1] = s[1];
      d[2] = s[2];
    }
  }
  return out;
}

Letterbox letterbox(const Image& img, int size) {
  Letterbox lb;
  lb.image = Image(size, size, 114);
  const double r = std::min(static_cast<double>(size) / img.width,
                            static_cast<double>(size) / img.height);
  const int nw = std::max(1, static_cast<int>(img.width * r));
  const int nh = std::max(1, static_cast<int>(img.height * r));
  Image scaled = resize_nearest(img, nw, nh);
  const int ox = (size - nw) / 2, oy = (size - nh) / 2;
  for (int y = 0; y < nh; ++y)
    std::copy(scaled.px(0, y), scaled.px(0, y) + 3 * nw, lb.image.px(ox, oy + y));
  lb.scale_x = static_cast<double>(nw) / size;
  lb.scale_y = static_cast<double>(nh) / size;
  lb.offset_x = static_cast<double>(ox) / size;
  lb.offset_y = static_cast<double>(oy) / size;
  return lb;
}

Tensor image_to_tensor(const Image& img) {
  Tensor t({1, 3, img.height, img.width});
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const uint8_t* p = img.px(x, y);
      for (int c = 0; c < 3; ++c) t.at4(0, c, y, x) = p[c] / 255.0;
    }
  return t;
}

}  // namespace dunet
