#pragma once

#include <array>

#include "m2net/autodiff.hpp"
#include "m2net/rng.hpp"

namespace m2net {

struct LossWeights {
    double lambda_g = 1.0;
    double lambda_content = 10.0;
    double lambda_per = 1.0;
};

// Frozen three-block convolutional stack standing in for a pretrained
// backbone in the perceptual term. Weights come from a pinned seed and are
// never trained, so the loss is bit-stable across runs.
class PerceptualExtractor {
public:
    static constexpr std::uint64_t kSeed = 0xfeedbeef;

    PerceptualExtractor();

    // Returns the three tap activations for a [H,W,3] image.
    std::array<ad::Var, 3> taps(const ad::Var& img) const;

private:
    struct Block {
        ad::Var w1, b1, w2, b2;
    };
    std::array<Block, 3> blocks_;
};

// mean(max(0, 1-real)) + mean(max(0, 1+fake)).
ad::Var hinge_d_loss(const ad::Var& real_scores, const ad::Var& fake_scores);

// -mean(fake): the generator ascends the discriminator score.
ad::Var gan_g_loss(const ad::Var& fake_scores);

// mean L1 of each branch against ground truth, summed.
ad::Var content_loss(const ad::Var& d1, const ad::Var& d2, const ad::Var& gt);

// Sum over taps of mean L1 between feature maps.
ad::Var perceptual_loss(const ad::Var& d2, const ad::Var& gt,
                        const PerceptualExtractor& ext);

struct RemovalLossBreakdown {
    double g = 0.0;
    double content = 0.0;
    double per = 0.0;
    double total = 0.0;
};

ad::Var removal_loss(const ad::Var& l_g, const ad::Var& l_content, const ad::Var& l_per,
                     const LossWeights& w);
RemovalLossBreakdown removal_loss_breakdown(double l_g, double l_content, double l_per,
                                            const LossWeights& w);

}  // namespace m2net
