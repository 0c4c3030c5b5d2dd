#include "m2net/hfe.hpp"

namespace m2net {

HfeNet::HfeNet(nn::ParamStore& ps, const std::string& prefix, Rng& rng) {
    stem_ = nn::Conv::make(ps, prefix + ".stem", rng, 3, kWidths[0], 3, 1);
    for (int u = 0; u < kLevels; ++u) {
        const int cin = u == 0 ? kWidths[0] : kWidths[u - 1];
        blocks_[u] = nn::ResBlock::make(ps, prefix + ".b" + std::to_string(u + 1), rng,
                                        cin, kWidths[u], u == 0 ? 1 : 2);
    }
    for (int u = 0; u < kLevels - 1; ++u) {
        up_[u] = nn::ConvTr::make(ps, prefix + ".up" + std::to_string(u + 1), rng,
                                  kWidths[u + 1], kWidths[u]);
        fuse_[u] = nn::Conv::make(ps, prefix + ".fu" + std::to_string(u + 1), rng,
                                  kWidths[u], kWidths[u], 3, 1);
    }
    proj_ = nn::Conv::make(ps, prefix + ".proj", rng, kWidths[0], 3, 3, 1);
}

FeaturePyramid HfeNet::backbone_pyramid(const ad::Var& img) const {
    const Tensor& t = img.val();
    if (t.rank() != 3) throw DimensionError("backbone_pyramid: rank 3 expected");
    const int h = t.dim(0), w = t.dim(1);
    if (h < 8 || w < 8)
        throw DimensionError("backbone_pyramid: input below minimum size 8x8");
    if (h % 8 != 0 || w % 8 != 0)
        throw DimensionError("backbone_pyramid: dims must be divisible by 8");
    FeaturePyramid pyr;
    ad::Var x = stem_.forward(img);
    for (int u = 0; u < kLevels; ++u) {
        x = blocks_[u].forward(x);
        pyr.levels.push_back(x);
    }
    return pyr;
}

ad::Var HfeNet::upsample_fuse(const FeaturePyramid& pyr) const {
    if (static_cast<int>(pyr.levels.size()) != kLevels)
        throw DimensionError("upsample_fuse: expected a 4-level pyramid");
    // Top-down: deepest level passes through, shallower levels add the
    // upsampled deeper fusion and re-convolve.
    ad::Var fused = pyr.levels[kLevels - 1];
    for (int u = kLevels - 2; u >= 0; --u) {
        ad::Var up = up_[u].forward(fused);
        fused = fuse_[u].forward(ad::add(pyr.levels[u], up));
    }
    return ad::sigmoid(proj_.forward(fused));
}

ad::Var HfeNet::detect(const ad::Var& img) const {
    return upsample_fuse(backbone_pyramid(img));
}

Tensor HfeNet::detect_plain(const Tensor& img) const {
    ad::NoGradGuard ng;
    const int h = img.dim(0), w = img.dim(1);
    const int ph = (8 - h % 8) % 8, pw = (8 - w % 8) % 8;
    if (ph == 0 && pw == 0) return detect(ad::Var::leaf(img)).val();
    Tensor padded = reflect_pad(img, 0, ph, 0, pw);
    ad::Var out = detect(ad::Var::leaf(padded));
    return ad::crop(out, 0, 0, h, w).val();
}

Tensor binarize_mask(const Tensor& hf, double tau) {
    if (hf.rank() != 3) throw DimensionError("binarize_mask: rank 3 expected");
    const int h = hf.dim(0), w = hf.dim(1), c = hf.dim(2);
    Tensor mask({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double m = 0.0;
            for (int k = 0; k < c; ++k) m += hf.at(y, x, k);
            mask.data[static_cast<size_t>(y) * w + x] = (m / c > tau) ? 1.0 : 0.0;
        }
    return mask;
}

Tensor downsample_mask_max(const Tensor& mask, int factor) {
    if (mask.rank() != 2) throw DimensionError("downsample_mask_max: rank 2 expected");
    const int h = mask.dim(0), w = mask.dim(1);
    if (h % factor != 0 || w % factor != 0)
        throw DimensionError("downsample_mask_max: factor does not divide dims");
    Tensor out({h / factor, w / factor});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (mask.data[static_cast<size_t>(y) * w + x] > 0.5)
                out.data[static_cast<size_t>(y / factor) * (w / factor) + x / factor] = 1.0;
    return out;
}

}  // namespace m2net
