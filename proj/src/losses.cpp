#include "m2net/losses.hpp"

#include "m2net/nn.hpp"

namespace m2net {

PerceptualExtractor::PerceptualExtractor() {
    Rng rng(kSeed);
    const int widths[4] = {3, 16, 32, 64};
    for (int i = 0; i < 3; ++i) {
        const int cin = widths[i], cout = widths[i + 1];
        blocks_[i].w1 = ad::Var::leaf(nn::he_normal(rng, {3, 3, cin, cout}, 9 * cin));
        blocks_[i].b1 = ad::Var::leaf(Tensor({cout}));
        blocks_[i].w2 = ad::Var::leaf(nn::he_normal(rng, {3, 3, cout, cout}, 9 * cout));
        blocks_[i].b2 = ad::Var::leaf(Tensor({cout}));
    }
}

std::array<ad::Var, 3> PerceptualExtractor::taps(const ad::Var& img) const {
    std::array<ad::Var, 3> out;
    ad::Var x = img;
    for (int i = 0; i < 3; ++i) {
        const Block& b = blocks_[i];
        x = ad::relu(ad::conv2d(ad::pad_reflect(x, 1, 1, 1, 1), b.w1, b.b1, 1, 1));
        // Second conv of each block halves the resolution.
        const int h = x.val().dim(0), w = x.val().dim(1);
        const int ph = std::max(0, ((h + 1) / 2 - 1) * 2 + 3 - h);
        const int pw = std::max(0, ((w + 1) / 2 - 1) * 2 + 3 - w);
        x = ad::relu(ad::conv2d(ad::pad_reflect(x, ph / 2, ph - ph / 2, pw / 2, pw - pw / 2),
                                b.w2, b.b2, 2, 1));
        out[i] = x;
    }
    return out;
}

ad::Var hinge_d_loss(const ad::Var& real_scores, const ad::Var& fake_scores) {
    ad::Var real_term = ad::mean_all(ad::relu(ad::add_scalar(ad::neg(real_scores), 1.0)));
    ad::Var fake_term = ad::mean_all(ad::relu(ad::add_scalar(fake_scores, 1.0)));
    return ad::add(real_term, fake_term);
}

ad::Var gan_g_loss(const ad::Var& fake_scores) {
    return ad::neg(ad::mean_all(fake_scores));
}

ad::Var content_loss(const ad::Var& d1, const ad::Var& d2, const ad::Var& gt) {
    return ad::add(ad::mean_abs_diff(d1, gt), ad::mean_abs_diff(d2, gt));
}

ad::Var perceptual_loss(const ad::Var& d2, const ad::Var& gt,
                        const PerceptualExtractor& ext) {
    require_same_shape(d2.val(), gt.val(), "perceptual_loss");
    const auto ta = ext.taps(d2);
    const auto tb = ext.taps(gt);
    ad::Var total = ad::mean_abs_diff(ta[0], tb[0]);
    for (int i = 1; i < 3; ++i) total = ad::add(total, ad::mean_abs_diff(ta[i], tb[i]));
    return total;
}

ad::Var removal_loss(const ad::Var& l_g, const ad::Var& l_content, const ad::Var& l_per,
                     const LossWeights& w) {
    ad::Var total = ad::mul_scalar(l_g, w.lambda_g);
    total = ad::add(total, ad::mul_scalar(l_content, w.lambda_content));
    return ad::add(total, ad::mul_scalar(l_per, w.lambda_per));
}

RemovalLossBreakdown removal_loss_breakdown(double l_g, double l_content, double l_per,
                                            const LossWeights& w) {
    RemovalLossBreakdown b;
    b.g = l_g;
    b.content = l_content;
    b.per = l_per;
    b.total = w.lambda_g * l_g + w.lambda_content * l_content + w.lambda_per * l_per;
    return b;
}

}  // namespace m2net
