#pragma once

#include <array>
#include <vector>

#include "m2net/image.hpp"
#include "m2net/nn.hpp"

namespace m2net {

// Highlight feature extractor: a 4-level strided-residual backbone whose
// levels halve the spatial dims, fused top-down with transposed-conv
// upsampling, projected to 3 per-channel intensity coefficients in [0,1].
struct FeaturePyramid {
    std::vector<ad::Var> levels;  // exactly kLevels entries
};

class HfeNet {
public:
    static constexpr int kLevels = 4;
    static constexpr std::array<int, kLevels> kWidths = {16, 32, 64, 128};

    HfeNet() = default;
    HfeNet(nn::ParamStore& ps, const std::string& prefix, Rng& rng);

    // Input dims must be divisible by 8 (callers pad); dims below 8 throw.
    FeaturePyramid backbone_pyramid(const ad::Var& img) const;
    ad::Var upsample_fuse(const FeaturePyramid& pyr) const;
    ad::Var detect(const ad::Var& img) const;

    // Plain-tensor convenience: pads any input up to a multiple of 8,
    // runs detect, and crops back.
    Tensor detect_plain(const Tensor& img) const;

private:
    nn::Conv stem_;
    std::array<nn::ResBlock, kLevels> blocks_;
    std::array<nn::ConvTr, kLevels - 1> up_;      // up_[i] lifts level i+2 to level i+1
    std::array<nn::Conv, kLevels - 1> fuse_;
    nn::Conv proj_;
};

// pixel = 1 iff channel-mean(hf) > tau (strict).
Tensor binarize_mask(const Tensor& hf, double tau);

// Max-pool a [H, W] 0/1 mask by an integer factor.
Tensor downsample_mask_max(const Tensor& mask, int factor);

}  // namespace m2net
