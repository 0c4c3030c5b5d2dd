#include <cmath>
#include <vector>

#include "m2net/cha.hpp"

// Reference implementation of the contextual highlight attention pass,
// written as literal scalar loops with its own index bookkeeping. Nothing
// here is shared with the fast path; it exists to pin that path down.

namespace m2net {

Tensor cha_oracle(const Tensor& feat, const Tensor& mask, int l, const Tensor& match_w,
                  const Tensor& match_b, bool use_ha, bool use_ba) {
    if (feat.rank() != 3) throw DimensionError("cha_oracle: feat rank 3 expected");
    const int h = feat.dim(0), w = feat.dim(1), c = feat.dim(2);
    if (mask.rank() != 2 || mask.dim(0) != h || mask.dim(1) != w)
        throw DimensionError("cha_oracle: mask shape mismatch");
    if (h % l != 0 || w % l != 0)
        throw DimensionError("cha_oracle: patch length does not divide dims");

    const int rows = h / l, cols = w / l;
    const int d = l * l * c;

    // 1. Flatten every patch and classify it.
    std::vector<std::vector<double>> patch(static_cast<size_t>(rows * cols));
    std::vector<bool> is_hp(static_cast<size_t>(rows * cols), false);
    for (int gy = 0; gy < rows; ++gy) {
        for (int gx = 0; gx < cols; ++gx) {
            const int r = gy * cols + gx;
            std::vector<double> v;
            v.reserve(static_cast<size_t>(d));
            bool any_masked = false;
            for (int py = 0; py < l; ++py) {
                for (int px = 0; px < l; ++px) {
                    if (mask.data[static_cast<size_t>(gy * l + py) * w + gx * l + px] > 0.5)
                        any_masked = true;
                    for (int k = 0; k < c; ++k) v.push_back(feat.at(gy * l + py, gx * l + px, k));
                }
            }
            patch[static_cast<size_t>(r)] = v;
            is_hp[static_cast<size_t>(r)] = any_masked;
        }
    }
    std::vector<int> hp, bp;
    for (int r = 0; r < rows * cols; ++r)
        (is_hp[static_cast<size_t>(r)] ? hp : bp).push_back(r);
    const int s_count = static_cast<int>(hp.size());
    const int t_count = static_cast<int>(bp.size());

    // 2. Attention-filled maps (zeros when the split is degenerate).
    std::vector<double> ha_map(static_cast<size_t>(h) * w * c, 0.0);
    std::vector<double> ba_map(static_cast<size_t>(h) * w * c, 0.0);
    if (s_count >= 1 && t_count >= 1) {
        std::vector<std::vector<double>> scores(static_cast<size_t>(s_count),
                                                std::vector<double>(static_cast<size_t>(t_count)));
        for (int s = 0; s < s_count; ++s) {
            double hn = 0.0;
            for (int j = 0; j < d; ++j)
                hn += patch[static_cast<size_t>(hp[static_cast<size_t>(s)])][static_cast<size_t>(j)] *
                      patch[static_cast<size_t>(hp[static_cast<size_t>(s)])][static_cast<size_t>(j)];
            hn = std::sqrt(hn);
            if (hn < kChaNormFloor) hn = kChaNormFloor;
            for (int t = 0; t < t_count; ++t) {
                double bn = 0.0, dot = 0.0;
                for (int j = 0; j < d; ++j) {
                    const double hv = patch[static_cast<size_t>(hp[static_cast<size_t>(s)])][static_cast<size_t>(j)];
                    const double bv = patch[static_cast<size_t>(bp[static_cast<size_t>(t)])][static_cast<size_t>(j)];
                    bn += bv * bv;
                    dot += hv * bv;
                }
                bn = std::sqrt(bn);
                if (bn < kChaNormFloor) bn = kChaNormFloor;
                scores[static_cast<size_t>(s)][static_cast<size_t>(t)] = dot / (hn * bn);
            }
            // softmax over t
            double mx = scores[static_cast<size_t>(s)][0];
            for (int t = 1; t < t_count; ++t)
                if (scores[static_cast<size_t>(s)][static_cast<size_t>(t)] > mx)
                    mx = scores[static_cast<size_t>(s)][static_cast<size_t>(t)];
            double sum = 0.0;
            for (int t = 0; t < t_count; ++t) {
                scores[static_cast<size_t>(s)][static_cast<size_t>(t)] =
                    std::exp(scores[static_cast<size_t>(s)][static_cast<size_t>(t)] - mx);
                sum += scores[static_cast<size_t>(s)][static_cast<size_t>(t)];
            }
            for (int t = 0; t < t_count; ++t)
                scores[static_cast<size_t>(s)][static_cast<size_t>(t)] /= sum;
        }

        if (use_ha) {
            for (int s = 0; s < s_count; ++s) {
                const int r = hp[static_cast<size_t>(s)];
                const int cy = (r / cols) * l, cx = (r % cols) * l;
                for (int py = 0; py < l; ++py)
                    for (int px = 0; px < l; ++px)
                        for (int k = 0; k < c; ++k) {
                            const int j = (py * l + px) * c + k;
                            double acc = 0.0;
                            for (int t = 0; t < t_count; ++t)
                                acc += patch[static_cast<size_t>(bp[static_cast<size_t>(t)])][static_cast<size_t>(j)] *
                                       scores[static_cast<size_t>(s)][static_cast<size_t>(t)];
                            ha_map[(static_cast<size_t>(cy + py) * w + cx + px) * c + k] = acc;
                        }
            }
        }
        if (use_ba) {
            for (int t = 0; t < t_count; ++t) {
                const int r = bp[static_cast<size_t>(t)];
                const int cy = (r / cols) * l, cx = (r % cols) * l;
                for (int py = 0; py < l; ++py)
                    for (int px = 0; px < l; ++px)
                        for (int k = 0; k < c; ++k) {
                            const int j = (py * l + px) * c + k;
                            double acc = 0.0;
                            for (int s = 0; s < s_count; ++s)
                                acc += patch[static_cast<size_t>(hp[static_cast<size_t>(s)])][static_cast<size_t>(j)] *
                                       scores[static_cast<size_t>(s)][static_cast<size_t>(t)];
                            ba_map[(static_cast<size_t>(cy + py) * w + cx + px) * c + k] = acc;
                        }
            }
        }
    }

    // 3. 3x3 matching convolution over (feat | ha | ba) with reflect padding.
    if (match_w.rank() != 4 || match_w.dim(0) != 3 || match_w.dim(1) != 3 ||
        match_w.dim(2) != 3 * c || match_w.dim(3) != c)
        throw DimensionError("cha_oracle: matching conv weight shape mismatch");
    auto reflect = [](int i, int n) {
        if (i < 0) return -i;
        if (i >= n) return 2 * n - 2 - i;
        return i;
    };
    auto in_val = [&](int y, int x, int ch) {
        y = reflect(y, h);
        x = reflect(x, w);
        if (ch < c) return feat.at(y, x, ch);
        if (ch < 2 * c) return ha_map[(static_cast<size_t>(y) * w + x) * c + (ch - c)];
        return ba_map[(static_cast<size_t>(y) * w + x) * c + (ch - 2 * c)];
    };
    Tensor out({h, w, c});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int co = 0; co < c; ++co) {
                double acc = match_b.data[static_cast<size_t>(co)];
                for (int ky = 0; ky < 3; ++ky)
                    for (int kx = 0; kx < 3; ++kx)
                        for (int ci = 0; ci < 3 * c; ++ci)
                            acc += in_val(y + ky - 1, x + kx - 1, ci) *
                                   match_w.data[((static_cast<size_t>(ky) * 3 + kx) * (3 * c) + ci) * c + co];
                out.at(y, x, co) = acc;
            }
    return out;
}

}  // namespace m2net
