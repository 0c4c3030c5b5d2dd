#pragma once

#include <string>

#include "m2net/tensor.hpp"

namespace m2net {

// An image is a [H, W, 3] tensor with values in [0, 1].
struct Image {
    Tensor t;

    Image() = default;
    explicit Image(Tensor tensor);
    Image(int h, int w) : t({h, w, 3}) {}

    int height() const { return t.dim(0); }
    int width() const { return t.dim(1); }
    int channels() const { return t.dim(2); }

    double& at(int y, int x, int c) { return t.at(y, x, c); }
    double at(int y, int x, int c) const { return t.at(y, x, c); }
};

// 8-bit RGB PNG only; values map v/255 on load. Anything else (16-bit,
// grayscale, palette, alpha) is rejected with FormatError.
Image load_image(const std::string& path);
// round(v*255) with clamping; save-load-save is idempotent.
void save_image(const Image& img, const std::string& path);

// Binary [H, W] mask helpers stored as 0/1 doubles.
Tensor load_mask(const std::string& path);       // from {0,255} PNG
void save_mask(const Tensor& mask, const std::string& path);

// Non-overlapping row-major tiling of a [H, W, C] feature map.
struct PatchGrid {
    Tensor patches;   // [R, l*l*C]
    int grid_rows = 0;
    int grid_cols = 0;
    int patch_len = 0;
    int channels = 0;
    int orig_h = 0;   // pre-padding size, assembly crops back to it
    int orig_w = 0;

    int count() const { return grid_rows * grid_cols; }
};

// l must divide both dims unless allow_pad, in which case the map is
// reflect-padded up to the next multiple of l and assembly crops back.
PatchGrid extract_patches(const Tensor& feat, int l, bool allow_pad = false);
Tensor assemble_patches(const PatchGrid& grid);

Tensor reflect_pad(const Tensor& x, int top, int bottom, int left, int right);

}  // namespace m2net
