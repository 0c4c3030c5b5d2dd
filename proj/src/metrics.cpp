#include "m2net/metrics.hpp"

#include <cmath>
#include <vector>

namespace m2net {

double psnr(const Image& a, const Image& b) {
    require_same_shape(a.t, b.t, "psnr");
    double sq = 0.0;
    for (size_t i = 0; i < a.t.data.size(); ++i) {
        const double d = a.t.data[i] - b.t.data[i];
        sq += d * d;
    }
    const double mse = sq / static_cast<double>(a.t.numel());
    if (mse < 1e-10) return 100.0;
    return 10.0 * std::log10(1.0 / mse);
}

namespace {

std::vector<double> gaussian_window(int size, double sigma) {
    std::vector<double> w(static_cast<size_t>(size) * size);
    const int half = size / 2;
    double sum = 0.0;
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double dy = y - half, dx = x - half;
            const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
            w[static_cast<size_t>(y) * size + x] = v;
            sum += v;
        }
    for (double& v : w) v /= sum;
    return w;
}

}  // namespace

double ssim(const Image& a, const Image& b) {
    require_same_shape(a.t, b.t, "ssim");
    constexpr int kWin = 11;
    constexpr double kSigma = 1.5;
    constexpr double c1 = 0.01 * 0.01;
    constexpr double c2 = 0.03 * 0.03;
    const int h = a.height(), w = a.width();
    if (h < kWin || w < kWin)
        throw DimensionError("ssim: image smaller than 11x11 window");

    static const std::vector<double> win = gaussian_window(kWin, kSigma);

    double total = 0.0;
    long count = 0;
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y + kWin <= h; ++y) {
            for (int x = 0; x + kWin <= w; ++x) {
                double mu_a = 0.0, mu_b = 0.0;
                double saa = 0.0, sbb = 0.0, sab = 0.0;
                for (int wy = 0; wy < kWin; ++wy)
                    for (int wx = 0; wx < kWin; ++wx) {
                        const double g = win[static_cast<size_t>(wy) * kWin + wx];
                        const double va = a.at(y + wy, x + wx, c);
                        const double vb = b.at(y + wy, x + wx, c);
                        mu_a += g * va;
                        mu_b += g * vb;
                        saa += g * va * va;
                        sbb += g * vb * vb;
                        sab += g * va * vb;
                    }
                const double var_a = saa - mu_a * mu_a;
                const double var_b = sbb - mu_b * mu_b;
                const double cov = sab - mu_a * mu_b;
                const double num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
                const double den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
                total += num / den;
                ++count;
            }
        }
    }
    return total / static_cast<double>(count);
}

MetricReport compare(const Image& a, const Image& b) {
    return MetricReport{psnr(a, b), ssim(a, b)};
}

double mask_iou(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mask_iou");
    long inter = 0, uni = 0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        const bool pa = a.data[i] > 0.5, pb = b.data[i] > 0.5;
        inter += (pa && pb);
        uni += (pa || pb);
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace m2net
