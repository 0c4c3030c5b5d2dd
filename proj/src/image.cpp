#include "m2net/image.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

namespace m2net {

Image::Image(Tensor tensor) : t(std::move(tensor)) {
    if (t.rank() != 3 || t.dim(2) != 3)
        throw DimensionError("Image: expected [H,W,3], got " + t.shape_str());
}

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

Image load_image(const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open " + path);

    png_byte header[8];
    if (std::fread(header, 1, 8, fp.get()) != 8 || png_sig_cmp(header, 0, 8))
        throw FormatError(path + ": not a PNG file");

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError(path + ": PNG decode failed");
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    const int depth = png_get_bit_depth(png, info);
    const int color = png_get_color_type(png, info);
    if (depth != 8) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError(path + ": only 8-bit PNG supported (got " +
                          std::to_string(depth) + "-bit)");
    }
    if (color != PNG_COLOR_TYPE_RGB) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError(path + ": only 3-channel RGB PNG supported");
    }

    std::vector<png_byte> row(static_cast<size_t>(w) * 3);
    Image img(h, w);
    for (int y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(y, x, c) = row[static_cast<size_t>(x) * 3 + c] / 255.0;
    }
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

void save_image(const Image& img, const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot write " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError(path + ": PNG encode failed");
    }
    png_init_io(png, fp.get());
    const int h = img.height(), w = img.width();
    png_set_IHDR(png, info, w, h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    std::vector<png_byte> row(static_cast<size_t>(w) * 3);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                double v = std::round(img.at(y, x, c) * 255.0);
                v = std::min(255.0, std::max(0.0, v));
                row[static_cast<size_t>(x) * 3 + c] = static_cast<png_byte>(v);
            }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Tensor load_mask(const std::string& path) {
    Image img = load_image(path);
    Tensor mask({img.height(), img.width()});
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x)
            mask.data[static_cast<size_t>(y) * img.width() + x] =
                img.at(y, x, 0) > 0.5 ? 1.0 : 0.0;
    return mask;
}

void save_mask(const Tensor& mask, const std::string& path) {
    if (mask.rank() != 2) throw DimensionError("save_mask: rank 2 expected");
    Image img(mask.dim(0), mask.dim(1));
    for (int y = 0; y < mask.dim(0); ++y)
        for (int x = 0; x < mask.dim(1); ++x) {
            const double v = mask.data[static_cast<size_t>(y) * mask.dim(1) + x] > 0.5 ? 1.0 : 0.0;
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = v;
        }
    save_image(img, path);
}

namespace {

int reflect_idx(int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
        if (i < 0) i = -i;
        if (i >= n) i = 2 * n - 2 - i;
    }
    return i;
}

}  // namespace

Tensor reflect_pad(const Tensor& x, int top, int bottom, int left, int right) {
    if (x.rank() != 3) throw DimensionError("reflect_pad: rank 3 expected");
    const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
    Tensor out({h + top + bottom, w + left + right, c});
    for (int y = 0; y < out.dim(0); ++y) {
        const int sy = reflect_idx(y - top, h);
        for (int xx = 0; xx < out.dim(1); ++xx) {
            const int sx = reflect_idx(xx - left, w);
            for (int k = 0; k < c; ++k) out.at(y, xx, k) = x.at(sy, sx, k);
        }
    }
    return out;
}

PatchGrid extract_patches(const Tensor& feat, int l, bool allow_pad) {
    if (feat.rank() != 3) throw DimensionError("extract_patches: rank 3 expected");
    if (l < 1) throw DimensionError("extract_patches: patch length must be >= 1");
    const int h = feat.dim(0), w = feat.dim(1), c = feat.dim(2);

    Tensor src = feat;
    if (h % l != 0 || w % l != 0) {
        if (!allow_pad)
            throw DimensionError("extract_patches: " + std::to_string(l) +
                                 " does not divide " + feat.shape_str());
        src = reflect_pad(feat, 0, (l - h % l) % l, 0, (l - w % l) % l);
    }

    PatchGrid g;
    g.patch_len = l;
    g.channels = c;
    g.orig_h = h;
    g.orig_w = w;
    g.grid_rows = src.dim(0) / l;
    g.grid_cols = src.dim(1) / l;
    const int d = l * l * c;
    g.patches = Tensor({g.count(), d});
    for (int r = 0; r < g.count(); ++r) {
        const int cy = (r / g.grid_cols) * l, cx = (r % g.grid_cols) * l;
        double* dst = &g.patches.data[static_cast<size_t>(r) * d];
        for (int py = 0; py < l; ++py)
            for (int px = 0; px < l; ++px)
                for (int k = 0; k < c; ++k) *dst++ = src.at(cy + py, cx + px, k);
    }
    return g;
}

Tensor assemble_patches(const PatchGrid& g) {
    const int l = g.patch_len, c = g.channels;
    const int d = l * l * c;
    if (g.patches.rank() != 2 || g.patches.dim(0) != g.count() || g.patches.dim(1) != d ||
        g.orig_h > g.grid_rows * l || g.orig_w > g.grid_cols * l)
        throw DimensionError("assemble_patches: inconsistent grid metadata");
    Tensor full({g.grid_rows * l, g.grid_cols * l, c});
    for (int r = 0; r < g.count(); ++r) {
        const int cy = (r / g.grid_cols) * l, cx = (r % g.grid_cols) * l;
        const double* src = &g.patches.data[static_cast<size_t>(r) * d];
        for (int py = 0; py < l; ++py)
            for (int px = 0; px < l; ++px)
                for (int k = 0; k < c; ++k) full.at(cy + py, cx + px, k) = *src++;
    }
    if (g.orig_h == full.dim(0) && g.orig_w == full.dim(1)) return full;
    Tensor out({g.orig_h, g.orig_w, c});
    for (int y = 0; y < g.orig_h; ++y)
        for (int x = 0; x < g.orig_w; ++x)
            for (int k = 0; k < c; ++k) out.at(y, x, k) = full.at(y, x, k);
    return out;
}

}  // namespace m2net
