#pragma once

#include "m2net/image.hpp"

namespace m2net {

struct MetricReport {
    double psnr_db = 0.0;
    double ssim = 0.0;
};

// 10*log10(1/MSE) with MAX=1; capped at 100 dB when MSE < 1e-10.
double psnr(const Image& a, const Image& b);

// Standard SSIM: 11x11 Gaussian window sigma=1.5, C1=(0.01)^2, C2=(0.03)^2,
// valid-window filtering, mean over channels. Requires H, W >= 11.
double ssim(const Image& a, const Image& b);

MetricReport compare(const Image& a, const Image& b);

// Intersection-over-union of two 0/1 masks; 1.0 when both are empty.
double mask_iou(const Tensor& a, const Tensor& b);

}  // namespace m2net
