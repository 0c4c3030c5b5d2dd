#include "m2net/cha.hpp"

#include <cmath>

#include "m2net/image.hpp"

namespace m2net {

PatchSplit split_patches(const Tensor& feat, const Tensor& mask, int l) {
    if (feat.rank() != 3 || mask.rank() != 2)
        throw DimensionError("split_patches: feat rank 3 and mask rank 2 expected");
    if (feat.dim(0) != mask.dim(0) || feat.dim(1) != mask.dim(1))
        throw DimensionError("split_patches: mask does not match feat spatially");
    const int h = feat.dim(0), w = feat.dim(1), c = feat.dim(2);
    if (h % l != 0 || w % l != 0)
        throw DimensionError("split_patches: patch length does not divide dims");

    PatchSplit out;
    out.grid_rows = h / l;
    out.grid_cols = w / l;
    out.patch_len = l;
    out.channels = c;

    const int d = l * l * c;
    std::vector<std::vector<double>> hp_rows, bp_rows;
    for (int r = 0; r < out.grid_rows * out.grid_cols; ++r) {
        const int cy = (r / out.grid_cols) * l, cx = (r % out.grid_cols) * l;
        bool is_highlight = false;
        for (int py = 0; py < l && !is_highlight; ++py)
            for (int px = 0; px < l && !is_highlight; ++px)
                if (mask.data[static_cast<size_t>(cy + py) * w + cx + px] > 0.5)
                    is_highlight = true;
        std::vector<double> row(static_cast<size_t>(d));
        size_t i = 0;
        for (int py = 0; py < l; ++py)
            for (int px = 0; px < l; ++px)
                for (int k = 0; k < c; ++k) row[i++] = feat.at(cy + py, cx + px, k);
        if (is_highlight) {
            out.hp_idx.push_back(r);
            hp_rows.push_back(std::move(row));
        } else {
            out.bp_idx.push_back(r);
            bp_rows.push_back(std::move(row));
        }
    }
    out.hp = Tensor({out.s(), d});
    for (int i = 0; i < out.s(); ++i)
        for (int j = 0; j < d; ++j) out.hp.at(i, j) = hp_rows[static_cast<size_t>(i)][static_cast<size_t>(j)];
    out.bp = Tensor({out.t(), d});
    for (int i = 0; i < out.t(); ++i)
        for (int j = 0; j < d; ++j) out.bp.at(i, j) = bp_rows[static_cast<size_t>(i)][static_cast<size_t>(j)];
    return out;
}

AttentionMatrix attention_scores(const PatchSplit& split) {
    const int s = split.s(), t = split.t();
    if (s < 1 || t < 1)
        throw DimensionError("attention_scores: degenerate split (S=" + std::to_string(s) +
                             ", T=" + std::to_string(t) + ")");
    const int d = split.hp.dim(1);
    AttentionMatrix am;
    am.c = Tensor({s, t});
    std::vector<double> hn(static_cast<size_t>(s)), bn(static_cast<size_t>(t));
    for (int i = 0; i < s; ++i) {
        double q = 0.0;
        for (int j = 0; j < d; ++j) q += split.hp.at(i, j) * split.hp.at(i, j);
        hn[static_cast<size_t>(i)] = std::max(std::sqrt(q), kChaNormFloor);
    }
    for (int i = 0; i < t; ++i) {
        double q = 0.0;
        for (int j = 0; j < d; ++j) q += split.bp.at(i, j) * split.bp.at(i, j);
        bn[static_cast<size_t>(i)] = std::max(std::sqrt(q), kChaNormFloor);
    }
    for (int i = 0; i < s; ++i) {
        double mx = -1e300;
        for (int j = 0; j < t; ++j) {
            double dot = 0.0;
            for (int k = 0; k < d; ++k) dot += split.hp.at(i, k) * split.bp.at(j, k);
            const double cos = dot / (hn[static_cast<size_t>(i)] * bn[static_cast<size_t>(j)]);
            am.c.at(i, j) = cos;
            mx = std::max(mx, cos);
        }
        double sum = 0.0;
        for (int j = 0; j < t; ++j) {
            am.c.at(i, j) = std::exp(am.c.at(i, j) - mx);
            sum += am.c.at(i, j);
        }
        for (int j = 0; j < t; ++j) am.c.at(i, j) /= sum;
    }
    return am;
}

Tensor highlight_fill(const PatchSplit& split, const AttentionMatrix& am) {
    const int s = split.s(), t = split.t(), d = split.bp.dim(1);
    if (am.c.dim(0) != s || am.c.dim(1) != t)
        throw DimensionError("highlight_fill: attention matrix size mismatch");
    Tensor ha({s, d});
    gemm(false, false, s, d, t, 1.0, am.c.data.data(), t, split.bp.data.data(), d, 0.0,
         ha.data.data(), d);
    return ha;
}

Tensor background_fill(const PatchSplit& split, const AttentionMatrix& am) {
    const int s = split.s(), t = split.t(), d = split.hp.dim(1);
    if (am.c.dim(0) != s || am.c.dim(1) != t)
        throw DimensionError("background_fill: attention matrix size mismatch");
    Tensor ba({t, d});
    gemm(true, false, t, d, s, 1.0, am.c.data.data(), t, split.hp.data.data(), d, 0.0,
         ba.data.data(), d);
    return ba;
}

ad::Var cha_forward(const ad::Var& feat, const Tensor& mask, int l, const ChaParams& p,
                    bool use_ha, bool use_ba) {
    const Tensor& ft = feat.val();
    if (ft.rank() != 3) throw DimensionError("cha_forward: feat rank 3 expected");
    const int h = ft.dim(0), w = ft.dim(1), c = ft.dim(2);
    if (mask.rank() != 2 || mask.dim(0) != h || mask.dim(1) != w)
        throw DimensionError("cha_forward: mask shape mismatch");

    // Split indices come from the mask only; the patch contents stay in-graph.
    const PatchSplit split = split_patches(ft, mask, l);
    const int r = split.grid_rows * split.grid_cols;
    const int d = l * l * c;

    ad::Var ha_map, ba_map;
    if (split.s() >= 1 && split.t() >= 1 && (use_ha || use_ba)) {
        ad::Var patches = ad::im2patches(feat, l);                       // [R, d]
        ad::Var hp = ad::gather_rows(patches, split.hp_idx);             // [S, d]
        ad::Var bp = ad::gather_rows(patches, split.bp_idx);             // [T, d]
        ad::Var hp_n = ad::normalize_rows(hp, kChaNormFloor);
        ad::Var bp_n = ad::normalize_rows(bp, kChaNormFloor);
        ad::Var scores = ad::softmax_rows(ad::matmul(hp_n, bp_n, false, true));  // [S, T]
        if (use_ha) {
            ad::Var ha = ad::matmul(scores, bp);                         // [S, d]
            ha_map = ad::patches2im(ad::scatter_rows(ha, split.hp_idx, r), h, w, c, l);
        }
        if (use_ba) {
            ad::Var ba = ad::matmul(scores, hp, true, false);            // [T, d]
            ba_map = ad::patches2im(ad::scatter_rows(ba, split.bp_idx, r), h, w, c, l);
        }
    }
    if (!ha_map.defined()) ha_map = ad::Var::leaf(Tensor({h, w, c}));
    if (!ba_map.defined()) ba_map = ad::Var::leaf(Tensor({h, w, c}));

    ad::Var stacked = ad::concat_c({feat, ha_map, ba_map});
    ad::Var padded = ad::pad_reflect(stacked, 1, 1, 1, 1);
    return ad::conv2d(padded, p.match_w, p.match_b, 1, 1);
}

Tensor cha_forward_plain(const Tensor& feat, const Tensor& mask, int l,
                         const ChaParams& p, bool use_ha, bool use_ba) {
    ad::NoGradGuard ng;
    return cha_forward(ad::Var::leaf(feat), mask, l, p, use_ha, use_ba).val();
}

}  // namespace m2net
