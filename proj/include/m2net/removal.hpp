#pragma once

#include <array>

#include "m2net/cha.hpp"
#include "m2net/hfe.hpp"
#include "m2net/nn.hpp"

namespace m2net {

// Ablation switches (Table-style toggles). use_hfe swaps the extracted HF
// for a constant 0.5 map; use_cha skips the attention insert entirely;
// use_ha / use_ba zero one of the two attention maps.
struct Toggles {
    bool use_hfe = true;
    bool use_cha = true;
    bool use_ha = true;
    bool use_ba = true;
};

// Shared encoder/dilation/decoder skeleton of both removal generators:
// 6-channel input, two strided gated downsamples, four dilated gated blocks
// (2, 4, 8, 16), two upsample stages, sigmoid head to 3 channels.
class RemovalGenerator {
public:
    RemovalGenerator() = default;
    RemovalGenerator(nn::ParamStore& ps, const std::string& prefix, Rng& rng,
                     bool with_cha);

    // img and cond are [H,W,3] with H, W divisible by 4.
    // mask (bottleneck resolution source) is only used when CHA is active.
    ad::Var forward(const ad::Var& img, const ad::Var& cond, const Tensor& full_mask,
                    bool use_cha, bool use_ha, bool use_ba) const;

private:
    nn::GatedConv stem_, down1_, down2_;
    std::array<nn::GatedConv, 4> dilated_;
    nn::GatedConv up1_, up2_;
    nn::Conv head_;
    bool with_cha_ = false;
    ChaParams cha_;
};

// Four stride-2 spectrally normalized convolutions plus a 1x1 score head;
// output is [ceil(H/16), ceil(W/16), 1].
class Discriminator {
public:
    Discriminator() = default;
    Discriminator(nn::ParamStore& ps, const std::string& prefix, Rng& rng);

    // update_u runs one power-iteration step per layer before normalizing;
    // keep it false outside training steps so forwards stay pure.
    ad::Var forward(const ad::Var& img, const ad::Var& cond, bool update_u = false) const;

private:
    static constexpr int kLayers = 4;
    std::array<nn::Conv, kLayers> convs_;
    std::array<Tensor*, kLayers> u_ = {};
    nn::Conv head_;
};

}  // namespace m2net
