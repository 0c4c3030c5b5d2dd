#pragma once

#include <vector>

#include "m2net/autodiff.hpp"
#include "m2net/tensor.hpp"

namespace m2net {

// Partition of a tiled feature map into highlight and background patches.
// A patch counts as highlight as soon as any pixel of its cell is masked.
struct PatchSplit {
    Tensor hp;                 // [S, d]
    Tensor bp;                 // [T, d]
    std::vector<int> hp_idx;   // grid indices of highlight patches
    std::vector<int> bp_idx;
    int grid_rows = 0;
    int grid_cols = 0;
    int patch_len = 0;
    int channels = 0;

    int s() const { return static_cast<int>(hp_idx.size()); }
    int t() const { return static_cast<int>(bp_idx.size()); }
};

// Softmax-normalized cosine similarities, one row per highlight patch.
struct AttentionMatrix {
    Tensor c;  // [S, T], rows sum to 1
};

struct ChaParams {
    ad::Var match_w;  // [3,3,3C,C]
    ad::Var match_b;  // [C]
};

constexpr double kChaNormFloor = 1e-8;

PatchSplit split_patches(const Tensor& feat, const Tensor& mask, int l);
AttentionMatrix attention_scores(const PatchSplit& split);
// HA_s = sum_t BP_t C(s,t): convex combination of background patches.
Tensor highlight_fill(const PatchSplit& split, const AttentionMatrix& c);
// BA_t = sum_s HP_s C(s,t): literal column sums, not normalized.
Tensor background_fill(const PatchSplit& split, const AttentionMatrix& c);

// Full differentiable pass: split, attend, scatter HA/BA maps, then a 3x3
// matching convolution over (feat, HA-map, BA-map). Degenerate splits
// (S=0 or T=0) use zeroed attention maps. use_ha / use_ba zero the
// corresponding map (ablation toggles).
ad::Var cha_forward(const ad::Var& feat, const Tensor& mask, int l, const ChaParams& p,
                    bool use_ha = true, bool use_ba = true);

// Plain-tensor convenience wrapper.
Tensor cha_forward_plain(const Tensor& feat, const Tensor& mask, int l,
                         const ChaParams& p, bool use_ha = true, bool use_ba = true);

// Triple-nested scalar-loop reference with no shared vectorized code;
// identical contract to cha_forward.
Tensor cha_oracle(const Tensor& feat, const Tensor& mask, int l, const Tensor& match_w,
                  const Tensor& match_b, bool use_ha = true, bool use_ba = true);

}  // namespace m2net
