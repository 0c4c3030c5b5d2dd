#include "m2net/removal.hpp"

namespace m2net {

RemovalGenerator::RemovalGenerator(nn::ParamStore& ps, const std::string& prefix,
                                   Rng& rng, bool with_cha)
    : with_cha_(with_cha) {
    stem_ = nn::GatedConv::make(ps, prefix + ".stem", rng, 6, 32, 3, 1);
    down1_ = nn::GatedConv::make(ps, prefix + ".d1", rng, 32, 64, 3, 2);
    down2_ = nn::GatedConv::make(ps, prefix + ".d2", rng, 64, 64, 3, 2);
    const int dil[4] = {2, 4, 8, 16};
    for (int i = 0; i < 4; ++i)
        dilated_[i] = nn::GatedConv::make(ps, prefix + ".dil" + std::to_string(dil[i]),
                                          rng, 64, 64, 3, 1, dil[i]);
    up1_ = nn::GatedConv::make(ps, prefix + ".u1", rng, 64, 32, 3, 1);
    up2_ = nn::GatedConv::make(ps, prefix + ".u2", rng, 32, 16, 3, 1);
    head_ = nn::Conv::make(ps, prefix + ".head", rng, 16, 3, 3, 1);
    if (with_cha) {
        cha_.match_w = ps.add_param(prefix + ".cha.w",
                                    nn::he_normal(rng, {3, 3, 192, 64}, 9 * 192));
        cha_.match_b = ps.add_param(prefix + ".cha.b", Tensor({64}));
    }
}

ad::Var RemovalGenerator::forward(const ad::Var& img, const ad::Var& cond,
                                  const Tensor& full_mask, bool use_cha, bool use_ha,
                                  bool use_ba) const {
    const Tensor& t = img.val();
    require_same_shape(t, cond.val(), "RemovalGenerator::forward");
    const int h = t.dim(0), w = t.dim(1);
    if (h % 4 != 0 || w % 4 != 0)
        throw DimensionError("RemovalGenerator: dims must be divisible by 4");

    ad::Var x = ad::concat_c({img, cond});
    x = stem_.forward(x);
    x = down1_.forward(x);
    x = down2_.forward(x);
    for (const auto& blk : dilated_) x = blk.forward(x);
    if (with_cha_ && use_cha) {
        const Tensor small = downsample_mask_max(full_mask, 4);
        x = cha_forward(x, small, 2, cha_, use_ha, use_ba);
    }
    x = up1_.forward(ad::upsample2x(x));
    x = up2_.forward(ad::upsample2x(x));
    return ad::sigmoid(head_.forward(x));
}

Discriminator::Discriminator(nn::ParamStore& ps, const std::string& prefix, Rng& rng) {
    const int widths[kLayers + 1] = {6, 32, 64, 64, 64};
    for (int i = 0; i < kLayers; ++i) {
        convs_[i] = nn::Conv::make(ps, prefix + ".c" + std::to_string(i + 1), rng,
                                   widths[i], widths[i + 1], 4, 2);
        const Tensor& wt = convs_[i].w.val();
        const int cols = wt.dim(3);
        const int rows = static_cast<int>(wt.numel() / cols);
        // Fixed deterministic start vector for the power iteration.
        Tensor u({rows});
        Rng urng(0x5eedu + static_cast<unsigned>(i));
        double nrm = 0.0;
        for (double& v : u.data) {
            v = urng.normal();
            nrm += v * v;
        }
        nrm = std::sqrt(nrm);
        for (double& v : u.data) v /= nrm;
        u_[i] = &ps.add_state(prefix + ".c" + std::to_string(i + 1) + ".u", std::move(u));
    }
    head_ = nn::Conv::make(ps, prefix + ".head", rng, widths[kLayers], 1, 1, 1);
}

ad::Var Discriminator::forward(const ad::Var& img, const ad::Var& cond,
                               bool update_u) const {
    require_same_shape(img.val(), cond.val(), "Discriminator::forward");
    ad::Var x = ad::concat_c({img, cond});
    for (int i = 0; i < kLayers; ++i) {
        const nn::Conv& c = convs_[i];
        Tensor v;
        if (update_u)
            v = ad::power_iteration_step(c.w.val(), *u_[i]);
        else
            v = ad::right_singular_vector(c.w.val(), *u_[i]);
        ad::Var wn = ad::spectral_scale(c.w, *u_[i], v);
        // Same ceil-padding scheme as nn::Conv, with the normalized weight.
        const int hh = x.val().dim(0), ww = x.val().dim(1);
        const int ph = std::max(0, ((hh + 1) / 2 - 1) * 2 + 4 - hh);
        const int pw = std::max(0, ((ww + 1) / 2 - 1) * 2 + 4 - ww);
        ad::Var padded = ad::pad_reflect(x, ph / 2, ph - ph / 2, pw / 2, pw - pw / 2);
        x = ad::leaky_relu(ad::conv2d(padded, wn, c.b, 2, 1), 0.2);
    }
    return head_.forward(x);
}

}  // namespace m2net
