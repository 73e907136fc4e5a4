#include "pyramidat/pngio.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "pyramidat/errors.hpp"

namespace pyramidat {

void write_png_rgb(const std::filesystem::path& path, int height, int width,
                   const std::uint8_t* data) {
    FILE* fp = std::fopen(path.string().c_str(), "wb");
    if (!fp) throw DataError("cannot create image file: " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
        std::fclose(fp);
        throw DataError("png write failed: " + path.string());
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height),
                 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < height; ++y)
        png_write_row(png, const_cast<png_bytep>(data + static_cast<std::size_t>(y) * width * 3));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

void write_png_preview(const std::filesystem::path& path, const Tensor<float>& image, float lo,
                       float hi) {
    if (image.ndim() != 3) throw StructureError("png preview expects an H x W x C tensor");
    const int H = image.dim(0), W = image.dim(1), C = image.dim(2);
    if (C != 1 && C != 3) throw StructureError("png preview expects 1 or 3 channels");
    if (lo == hi) {
        float mx = 0.0f;
        for (std::size_t i = 0; i < image.size(); ++i)
            mx = std::max(mx, std::abs(image[i]));
        if (mx == 0.0f) mx = 1.0f;
        lo = -mx;
        hi = mx;
    }
    const float scale = 255.0f / (hi - lo);
    std::vector<std::uint8_t> rgb(static_cast<std::size_t>(H) * W * 3);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c) {
                const float v = image.at(y, x, C == 3 ? c : 0);
                const float s = std::clamp((v - lo) * scale, 0.0f, 255.0f);
                rgb[(static_cast<std::size_t>(y) * W + x) * 3 + c] =
                    static_cast<std::uint8_t>(s + 0.5f);
            }
    write_png_rgb(path, H, W, rgb.data());
}

}  // namespace pyramidat
