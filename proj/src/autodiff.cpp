#include "m2net/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace m2net::ad {

namespace {

thread_local bool g_grad_enabled = true;

NodePtr make_node(Tensor val, std::vector<Var> parents,
                  std::function<void(Node&)> backward_fn) {
    auto n = std::make_shared<Node>();
    n->val = std::move(val);
    if (g_grad_enabled) {
        bool need = false;
        for (const auto& p : parents) need = need || p.requires_grad();
        if (need) {
            n->requires_grad = true;
            n->parents.reserve(parents.size());
            for (auto& p : parents) n->parents.push_back(p.node);
            n->backward_fn = std::move(backward_fn);
        }
    }
    return n;
}

Var unary_ew(const Var& a, double (*f)(double), double (*df)(double)) {
    Tensor out(a.val().shape);
    const auto& x = a.val().data;
    for (size_t i = 0; i < x.size(); ++i) out.data[i] = f(x[i]);
    NodePtr an = a.node;
    return Var(make_node(std::move(out), {a}, [an, df](Node& n) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < n.grad.data.size(); ++i)
            an->grad.data[i] += n.grad.data[i] * df(an->val.data[i]);
    }));
}

int reflect_index(int i, int n) {
    // Mirror without edge repetition: -1 -> 1, n -> n-2. Pads wider than the
    // image keep folding back, which is what the heavily dilated blocks need.
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
        if (i < 0) i = -i;
        if (i >= n) i = 2 * n - 2 - i;
    }
    return i;
}

struct ConvDims {
    int h, w, cin, kh, kw, cout, oh, ow;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int dilation) {
    if (x.rank() != 3 || w.rank() != 4)
        throw DimensionError("conv2d: expected x rank 3 and w rank 4");
    ConvDims d;
    d.h = x.dim(0);
    d.w = x.dim(1);
    d.cin = x.dim(2);
    d.kh = w.dim(0);
    d.kw = w.dim(1);
    d.cout = w.dim(3);
    if (w.dim(2) != d.cin)
        throw DimensionError("conv2d: channel mismatch, x has " + std::to_string(d.cin) +
                             ", w expects " + std::to_string(w.dim(2)));
    const int ekh = (d.kh - 1) * dilation + 1;
    const int ekw = (d.kw - 1) * dilation + 1;
    if (d.h < ekh || d.w < ekw)
        throw DimensionError("conv2d: input smaller than effective kernel");
    d.oh = (d.h - ekh) / stride + 1;
    d.ow = (d.w - ekw) / stride + 1;
    return d;
}

void im2col(const Tensor& x, const ConvDims& d, int stride, int dilation,
            std::vector<double>& col) {
    const int patch = d.kh * d.kw * d.cin;
    col.assign(static_cast<size_t>(d.oh) * d.ow * patch, 0.0);
    for (int oy = 0; oy < d.oh; ++oy) {
        for (int ox = 0; ox < d.ow; ++ox) {
            double* dst = &col[(static_cast<size_t>(oy) * d.ow + ox) * patch];
            for (int ky = 0; ky < d.kh; ++ky) {
                const int iy = oy * stride + ky * dilation;
                for (int kx = 0; kx < d.kw; ++kx) {
                    const int ix = ox * stride + kx * dilation;
                    const double* src = &x.data[(static_cast<size_t>(iy) * d.w + ix) * d.cin];
                    std::copy(src, src + d.cin, dst);
                    dst += d.cin;
                }
            }
        }
    }
}

void col2im_add(const std::vector<double>& col, const ConvDims& d, int stride,
                int dilation, Tensor& gx) {
    const int patch = d.kh * d.kw * d.cin;
    for (int oy = 0; oy < d.oh; ++oy) {
        for (int ox = 0; ox < d.ow; ++ox) {
            const double* src = &col[(static_cast<size_t>(oy) * d.ow + ox) * patch];
            for (int ky = 0; ky < d.kh; ++ky) {
                const int iy = oy * stride + ky * dilation;
                for (int kx = 0; kx < d.kw; ++kx) {
                    const int ix = ox * stride + kx * dilation;
                    double* dst = &gx.data[(static_cast<size_t>(iy) * d.w + ix) * d.cin];
                    for (int c = 0; c < d.cin; ++c) dst[c] += src[c];
                    src += d.cin;
                }
            }
        }
    }
}

}  // namespace

Var Var::leaf(Tensor t, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->val = std::move(t);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
}

NoGradGuard::NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev; }
bool grad_enabled() { return g_grad_enabled; }

void backward(const Var& loss, double seed) {
    if (loss.val().numel() != 1)
        throw DimensionError("backward: loss must be scalar, got " + loss.val().shape_str());
    // Iterative post-order topological sort over the requires_grad subgraph.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.push_back({loss.node.get(), 0});
    seen.insert(loss.node.get());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            Node* p = n->parents[i++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    loss.node->ensure_grad();
    loss.node->grad.data[0] += seed;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn) {
            n->ensure_grad();
            n->backward_fn(*n);
        }
    }
}

// --- elementwise -------------------------------------------------------------

Var add(const Var& a, const Var& b) {
    require_same_shape(a.val(), b.val(), "add");
    Tensor out(a.val().shape);
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = a.val().data[i] + b.val().data[i];
    NodePtr an = a.node, bn = b.node;
    return Var(make_node(std::move(out), {a, b}, [an, bn](Node& n) {
        for (const NodePtr& p : {an, bn}) {
            if (!p->requires_grad) continue;
            p->ensure_grad();
            for (size_t i = 0; i < n.grad.data.size(); ++i)
                p->grad.data[i] += n.grad.data[i];
        }
    }));
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a.val(), b.val(), "sub");
    Tensor out(a.val().shape);
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = a.val().data[i] - b.val().data[i];
    NodePtr an = a.node, bn = b.node;
    return Var(make_node(std::move(out), {a, b}, [an, bn](Node& n) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < n.grad.data.size(); ++i)
                an->grad.data[i] += n.grad.data[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < n.grad.data.size(); ++i)
                bn->grad.data[i] -= n.grad.data[i];
        }
    }));
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a.val(), b.val(), "mul");
    Tensor out(a.val().shape);
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = a.val().data[i] * b.val().data[i];
    NodePtr an = a.node, bn = b.node;
    return Var(make_node(std::move(out), {a, b}, [an, bn](Node& n) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < n.grad.data.size(); ++i)
                an->grad.data[i] += n.grad.data[i] * bn->val.data[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < n.grad.data.size(); ++i)
                bn->grad.data[i] += n.grad.data[i] * an->val.data[i];
        }
    }));
}

Var add_scalar(const Var& a, double s) {
    Tensor out(a.val().shape);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.val().data[i] + s;
    NodePtr an = a.node;
    return Var(make_node(std::move(out), {a}, [an](Node& n) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < n.grad.data.size(); ++i)
            an->grad.data[i] += n.grad.data[i];
    }));
}

Var mul_scalar(const Var& a, double s) {
    Tensor out(a.val().shape);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.val().data[i] * s;
    NodePtr an = a.node;
    return Var(make_node(std::move(out), {a}, [an, s](Node& n) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < n.grad.data.size(); ++i)
            an->grad.data[i] += n.grad.data[i] * s;
    }));
}

Var neg(const Var& a) { return mul_scalar(a, -1.0); }

Var relu(const Var& a) {
    return unary_ew(
        a, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

Var leaky_relu(const Var& a, double slope) {
    Tensor out(a.val().shape);
    for (size_t i = 0; i < out.data.size(); ++i) {
        double v = a.val().data[i];
        out.data[i] = v > 0.0 ? v : slope * v;
    }
    NodePtr an = a.node;
    return Var(make_node(std::move(out), {a}, [an, slope](Node& n) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < n.grad.data.size(); ++i)
            an->grad.data[i] += n.grad.data[i] * (an->val.data[i] > 0.0 ? 1.0 : slope);
    }));
}

Var elu(const Var& a) {
    return unary_ew(
        a, [](double v) { return v > 0.0 ? v : std::expm1(v); },
        [](double v) { return v > 0.0 ? 1.0 : std::exp(v); });
}

Var sigmoid(const Var& a) {
    Tensor out(a.val().shape);
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = 1.0 / (1.0 + std::exp(-a.val().data[i]));
    NodePtr an = a.node;
    NodePtr self;
    Var r(make_node(std::move(out), {a}, [an](Node& n) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < n.grad.data.size(); ++i) {
            double y = n.val.data[i];
            an->grad.data[i] += n.grad.data[i] * y * (1.0 - y);
        }
    }));
    return r;
}

Var abs(const Var& a) {
    return unary_ew(
        a, [](double v) { return std::fabs(v); },
        [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

// --- structure ---------------------------------------------------------------

Var concat_c(const std::vector<Var>& xs) {
    if (xs.empty()) throw DimensionError("concat_c: no inputs");
    const int h = xs[0].val().dim(0), w = xs[0].val().dim(1);
    int ctot = 0;
    for (const auto& x : xs) {
        if (x.val().rank() != 3 || x.val().dim(0) != h || x.val().dim(1) != w)
            throw DimensionError("concat_c: spatial mismatch");
        ctot += x.val().dim(2);
    }
    Tensor out({h, w, ctot});
    int off = 0;
    for (const auto& x : xs) {
        const int c = x.val().dim(2);
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx)
                for (int k = 0; k < c; ++k) out.at(y, xx, off + k) = x.val().at(y, xx, k);
        off += c;
    }
    std::vector<NodePtr> pn;
    for (const auto& x : xs) pn.push_back(x.node);
    return Var(make_node(std::move(out), xs, [pn, h, w](Node& n) {
        int off = 0;
        for (const auto& p : pn) {
            const int c = p->val.dim(2);
            if (p->requires_grad) {
                p->ensure_grad();
                for (int y = 0; y < h; ++y)
                    for (int x = 0; x < w; ++x)
                        for (int k = 0; k < c; ++k)
                            p->grad.at(y, x, k) += n.grad.at(y, x, off + k);
            }
            off += c;
        }
    }));
}

Var pad_reflect(const Var& x, int top, int bottom, int left, int right) {
    const Tensor& t = x.val();
    if (t.rank() != 3) throw DimensionError("pad_reflect: rank 3 expected");
    const int h = t.dim(0), w = t.dim(1), c = t.dim(2);
    Tensor out({h + top + bottom, w + left + right, c});
    for (int y = 0; y < out.dim(0); ++y) {
        const int sy = reflect_index(y - top, h);
        for (int xx = 0; xx < out.dim(1); ++xx) {
            const int sx = reflect_index(xx - left, w);
            for (int k = 0; k < c; ++k) out.at(y, xx, k) = t.at(sy, sx, k);
        }
    }
    NodePtr xn = x.node;
    return Var(make_node(std::move(out), {x}, [xn, top, left, h, w, c](Node& n) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int y = 0; y < n.val.dim(0); ++y) {
            const int sy = reflect_index(y - top, h);
            for (int xx = 0; xx < n.val.dim(1); ++xx) {
                const int sx = reflect_index(xx - left, w);
                for (int k = 0; k < c; ++k) xn->grad.at(sy, sx, k) += n.grad.at(y, xx, k);
            }
        }
    }));
}

Var crop(const Var& x, int top, int left, int h, int w) {
    const Tensor& t = x.val();
    if (t.rank() != 3) throw DimensionError("crop: rank 3 expected");
    if (top + h > t.dim(0) || left + w > t.dim(1))
        throw DimensionError("crop: window out of range");
    const int c = t.dim(2);
    Tensor out({h, w, c});
    for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx)
            for (int k = 0; k < c; ++k) out.at(y, xx, k) = t.at(top + y, left + xx, k);
    NodePtr xn = x.node;
    return Var(make_node(std::move(out), {x}, [xn, top, left, h, w, c](Node& n) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx)
                for (int k = 0; k < c; ++k)
                    xn->grad.at(top + y, left + xx, k) += n.grad.at(y, xx, k);
    }));
}

Var upsample2x(const Var& x) {
    const Tensor& t = x.val();
    const int h = t.dim(0), w = t.dim(1), c = t.dim(2);
    Tensor out({2 * h, 2 * w, c});
    for (int y = 0; y < 2 * h; ++y)
        for (int xx = 0; xx < 2 * w; ++xx)
            for (int k = 0; k < c; ++k) out.at(y, xx, k) = t.at(y / 2, xx / 2, k);
    NodePtr xn = x.node;
    return Var(make_node(std::move(out), {x}, [xn, h, w, c](Node& n) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int y = 0; y < 2 * h; ++y)
            for (int xx = 0; xx < 2 * w; ++xx)
                for (int k = 0; k < c; ++k)
                    xn->grad.at(y / 2, xx / 2, k) += n.grad.at(y, xx, k);
    }));
}

Var detach(const Var& x) { return Var::leaf(x.val(), false); }

// --- convolution ---------------------------------------------------------------

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int dilation) {
    const ConvDims d = conv_dims(x.val(), w.val(), stride, dilation);
    if (b.defined() && b.val().numel() != d.cout)
        throw DimensionError("conv2d: bias size mismatch");
    const int patch = d.kh * d.kw * d.cin;
    std::vector<double> col;
    im2col(x.val(), d, stride, dilation, col);
    Tensor out({d.oh, d.ow, d.cout});
    gemm(false, false, d.oh * d.ow, d.cout, patch, 1.0, col.data(), patch,
         w.val().data.data(), d.cout, 0.0, out.data.data(), d.cout);
    if (b.defined()) {
        for (int i = 0; i < d.oh * d.ow; ++i)
            for (int c = 0; c < d.cout; ++c)
                out.data[static_cast<size_t>(i) * d.cout + c] += b.val().data[c];
    }
    NodePtr xn = x.node, wn = w.node, bn = b.defined() ? b.node : nullptr;
    std::vector<Var> parents = {x, w};
    if (b.defined()) parents.push_back(b);
    return Var(make_node(std::move(out), parents, [xn, wn, bn, d, stride, dilation,
                                                   patch](Node& n) {
        // col is recomputed here rather than cached to keep graph memory flat.
        std::vector<double> col;
        if (wn->requires_grad || xn->requires_grad)
            im2col(xn->val, d, stride, dilation, col);
        const int rows = d.oh * d.ow;
        if (wn->requires_grad) {
            wn->ensure_grad();
            gemm(true, false, patch, d.cout, rows, 1.0, col.data(), patch,
                 n.grad.data.data(), d.cout, 1.0, wn->grad.data.data(), d.cout);
        }
        if (bn && bn->requires_grad) {
            bn->ensure_grad();
            for (int i = 0; i < rows; ++i)
                for (int c = 0; c < d.cout; ++c)
                    bn->grad.data[c] += n.grad.data[static_cast<size_t>(i) * d.cout + c];
        }
        if (xn->requires_grad) {
            xn->ensure_grad();
            std::vector<double> dcol(static_cast<size_t>(rows) * patch);
            gemm(false, true, rows, patch, d.cout, 1.0, n.grad.data.data(), d.cout,
                 wn->val.data.data(), d.cout, 0.0, dcol.data(), patch);
            col2im_add(dcol, d, stride, dilation, xn->grad);
        }
    }));
}

Var conv2d_transpose(const Var& x, const Var& w, const Var& b, int stride) {
    const Tensor& xt = x.val();
    const Tensor& wt = w.val();
    if (xt.rank() != 3 || wt.rank() != 4)
        throw DimensionError("conv2d_transpose: bad ranks");
    const int h = xt.dim(0), wd = xt.dim(1), cin = xt.dim(2);
    const int kh = wt.dim(1), kw = wt.dim(2), cout = wt.dim(3);
    if (wt.dim(0) != cin) throw DimensionError("conv2d_transpose: channel mismatch");
    if (kh < stride || (kh - stride) % 2 != 0 || kw != kh)
        throw DimensionError("conv2d_transpose: kernel/stride combination unsupported");
    const int off = (kh - stride) / 2;
    const int oh = stride * h, ow = stride * wd;
    const int fh = (h - 1) * stride + kh, fw = (wd - 1) * stride + kw;
    const int pcols = kh * kw * cout;

    // P[i, (ky,kx,co)] = sum_ci x[i,ci] * w[ci,ky,kx,co]
    std::vector<double> p(static_cast<size_t>(h) * wd * pcols);
    gemm(false, false, h * wd, pcols, cin, 1.0, xt.data.data(), cin,
         wt.data.data(), pcols, 0.0, p.data(), pcols);

    Tensor full({fh, fw, cout});
    for (int iy = 0; iy < h; ++iy)
        for (int ix = 0; ix < wd; ++ix) {
            const double* src = &p[(static_cast<size_t>(iy) * wd + ix) * pcols];
            for (int ky = 0; ky < kh; ++ky)
                for (int kx = 0; kx < kw; ++kx) {
                    double* dst = &full.data[(static_cast<size_t>(iy * stride + ky) * fw +
                                              ix * stride + kx) * cout];
                    for (int c = 0; c < cout; ++c) dst[c] += src[c];
                    src += cout;
                }
        }
    Tensor out({oh, ow, cout});
    for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx)
            for (int c = 0; c < cout; ++c) out.at(y, xx, c) = full.at(y + off, xx + off, c);
    if (b.defined()) {
        if (b.val().numel() != cout) throw DimensionError("conv2d_transpose: bias mismatch");
        for (int y = 0; y < oh; ++y)
            for (int xx = 0; xx < ow; ++xx)
                for (int c = 0; c < cout; ++c) out.at(y, xx, c) += b.val().data[c];
    }

    NodePtr xn = x.node, wn = w.node, bn = b.defined() ? b.node : nullptr;
    std::vector<Var> parents = {x, w};
    if (b.defined()) parents.push_back(b);
    return Var(make_node(std::move(out), parents,
                         [xn, wn, bn, h, wd, cin, kh, kw, cout, stride, off, fh, fw,
                          pcols](Node& n) {
        const int oh = stride * h, ow = stride * wd;
        // Re-embed the output gradient in the uncropped frame.
        Tensor gfull({fh, fw, cout});
        for (int y = 0; y < oh; ++y)
            for (int xx = 0; xx < ow; ++xx)
                for (int c = 0; c < cout; ++c)
                    gfull.at(y + off, xx + off, c) = n.grad.at(y, xx, c);
        std::vector<double> gp(static_cast<size_t>(h) * wd * pcols);
        for (int iy = 0; iy < h; ++iy)
            for (int ix = 0; ix < wd; ++ix) {
                double* dst = &gp[(static_cast<size_t>(iy) * wd + ix) * pcols];
                for (int ky = 0; ky < kh; ++ky)
                    for (int kx = 0; kx < kw; ++kx) {
                        const double* src =
                            &gfull.data[(static_cast<size_t>(iy * stride + ky) * fw +
                                         ix * stride + kx) * cout];
                        for (int c = 0; c < cout; ++c) dst[c] = src[c];
                        dst += cout;
                    }
            }
        if (xn->requires_grad) {
            xn->ensure_grad();
            gemm(false, true, h * wd, cin, pcols, 1.0, gp.data(), pcols,
                 wn->val.data.data(), pcols, 1.0, xn->grad.data.data(), cin);
        }
        if (wn->requires_grad) {
            wn->ensure_grad();
            gemm(true, false, cin, pcols, h * wd, 1.0, xn->val.data.data(), cin,
                 gp.data(), pcols, 1.0, wn->grad.data.data(), pcols);
        }
        if (bn && bn->requires_grad) {
            bn->ensure_grad();
            for (int y = 0; y < oh; ++y)
                for (int xx = 0; xx < ow; ++xx)
                    for (int c = 0; c < cout; ++c) bn->grad.data[c] += n.grad.at(y, xx, c);
        }
    }));
}

// --- linear algebra ------------------------------------------------------------

Var matmul(const Var& a, const Var& b, bool trans_a, bool trans_b) {
    const Tensor& at = a.val();
    const Tensor& bt = b.val();
    if (at.rank() != 2 || bt.rank() != 2) throw DimensionError("matmul: rank 2 expected");
    const int m = trans_a ? at.dim(1) : at.dim(0);
    const int k = trans_a ? at.dim(0) : at.dim(1);
    const int kb = trans_b ? bt.dim(1) : bt.dim(0);
    const int nn = trans_b ? bt.dim(0) : bt.dim(1);
    if (k != kb) throw DimensionError("matmul: inner dim mismatch");
    Tensor out({m, nn});
    gemm(trans_a, trans_b, m, nn, k, 1.0, at.data.data(), at.dim(1), bt.data.data(),
         bt.dim(1), 0.0, out.data.data(), nn);
    NodePtr an = a.node, bn = b.node;
    return Var(make_node(std::move(out), {a, b}, [an, bn, trans_a, trans_b, m, nn,
                                                  k](Node& n) {
        const Tensor& g = n.grad;
        if (an->requires_grad) {
            an->ensure_grad();
            if (!trans_a) {
                // dA = dC @ op(B)^T
                gemm(false, !trans_b, m, k, nn, 1.0, g.data.data(), nn,
                     bn->val.data.data(), bn->val.dim(1), 1.0, an->grad.data.data(), k);
            } else {
                // A is [k, m]; dA = op(B) @ dC^T
                gemm(trans_b, true, k, m, nn, 1.0, bn->val.data.data(), bn->val.dim(1),
                     g.data.data(), nn, 1.0, an->grad.data.data(), m);
            }
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            if (!trans_b) {
                // dB = op(A)^T @ dC
                gemm(!trans_a, false, k, nn, m, 1.0, an->val.data.data(), an->val.dim(1),
                     g.data.data(), nn, 1.0, bn->grad.data.data(), nn);
            } else {
                // B is [n, k]; dB = dC^T @ op(A)
                gemm(true, trans_a, nn, k, m, 1.0, g.data.data(), nn,
                     an->val.data.data(), an->val.dim(1), 1.0, bn->grad.data.data(), k);
            }
        }
    }));
}

Var softmax_rows(const Var& x) {
    const Tensor& t = x.val();
    if (t.rank() != 2) throw DimensionError("softmax_rows: rank 2 expected");
    const int m = t.dim(0), nn = t.dim(1);
    Tensor out({m, nn});
    for (int i = 0; i < m; ++i) {
        double mx = t.at(i, 0);
        for (int j = 1; j < nn; ++j) mx = std::max(mx, t.at(i, j));
        double sum = 0.0;
        for (int j = 0; j < nn; ++j) {
            double e = std::exp(t.at(i, j) - mx);
            out.at(i, j) = e;
            sum += e;
        }
        for (int j = 0; j < nn; ++j) out.at(i, j) /= sum;
    }
    NodePtr xn = x.node;
    return Var(make_node(std::move(out), {x}, [xn, m, nn](Node& n) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int i = 0; i < m; ++i) {
            double dot = 0.0;
            for (int j = 0; j < nn; ++j) dot += n.grad.at(i, j) * n.val.at(i, j);
            for (int j = 0; j < nn; ++j)
                xn->grad.at(i, j) += n.val.at(i, j) * (n.grad.at(i, j) - dot);
        }
    }));
}

Var normalize_rows(const Var& x, double eps) {
    const Tensor& t = x.val();
    if (t.rank() != 2) throw DimensionError("normalize_rows: rank 2 expected");
    const int m = t.dim(0), d = t.dim(1);
    Tensor out({m, d});
    std::vector<double> norms(m);
    for (int i = 0; i < m; ++i) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += t.at(i, j) * t.at(i, j);
        double nrm = std::max(std::sqrt(s), eps);
        norms[static_cast<size_t>(i)] = nrm;
        for (int j = 0; j < d; ++j) out.at(i, j) = t.at(i, j) / nrm;
    }
    NodePtr xn = x.node;
    return Var(make_node(std::move(out), {x}, [xn, m, d, eps, norms](Node& n) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int i = 0; i < m; ++i) {
            const double nrm = norms[static_cast<size_t>(i)];
            double raw = 0.0;
            for (int j = 0; j < d; ++j) raw += xn->val.at(i, j) * xn->val.at(i, j);
            const bool clipped = std::sqrt(raw) <= eps;
            if (clipped) {
                for (int j = 0; j < d; ++j) xn->grad.at(i, j) += n.grad.at(i, j) / eps;
            } else {
                double dot = 0.0;
                for (int j = 0; j < d; ++j) dot += n.grad.at(i, j) * xn->val.at(i, j);
                for (int j = 0; j < d; ++j)
                    xn->grad.at(i, j) +=
                        n.grad.at(i, j) / nrm - xn->val.at(i, j) * dot / (nrm * nrm * nrm);
            }
        }
    }));
}

Var gather_rows(const Var& x, std::vector<int> idx) {
    const Tensor& t = x.val();
    if (t.rank() != 2) throw DimensionError("gather_rows: rank 2 expected");
    const int d = t.dim(1);
    Tensor out({static_cast<int>(idx.size()), d});
    for (size_t i = 0; i < idx.size(); ++i)
        for (int j = 0; j < d; ++j) out.at(static_cast<int>(i), j) = t.at(idx[i], j);
    NodePtr xn = x.node;
    return Var(make_node(std::move(out), {x}, [xn, idx, d](Node& n) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (size_t i = 0; i < idx.size(); ++i)
            for (int j = 0; j < d; ++j)
                xn->grad.at(idx[i], j) += n.grad.at(static_cast<int>(i), j);
    }));
}

Var scatter_rows(const Var& x, std::vector<int> idx, int total_rows) {
    const Tensor& t = x.val();
    if (t.rank() != 2 || t.dim(0) != static_cast<int>(idx.size()))
        throw DimensionError("scatter_rows: index/row mismatch");
    const int d = t.dim(1);
    Tensor out({total_rows, d});
    for (size_t i = 0; i < idx.size(); ++i)
        for (int j = 0; j < d; ++j) out.at(idx[i], j) = t.at(static_cast<int>(i), j);
    NodePtr xn = x.node;
    return Var(make_node(std::move(out), {x}, [xn, idx, d](Node& n) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (size_t i = 0; i < idx.size(); ++i)
            for (int j = 0; j < d; ++j)
                xn->grad.at(static_cast<int>(i), j) += n.grad.at(idx[i], j);
    }));
}

Var im2patches(const Var& x, int l) {
    const Tensor& t = x.val();
    if (t.rank() != 3) throw DimensionError("im2patches: rank 3 expected");
    const int h = t.dim(0), w = t.dim(1), c = t.dim(2);
    if (h % l != 0 || w % l != 0)
        throw DimensionError("im2patches: dims not divisible by patch length");
    const int gr = h / l, gc = w / l, d = l * l * c;
    Tensor out({gr * gc, d});
    for (int r = 0; r < gr * gc; ++r) {
        const int cy = (r / gc) * l, cx = (r % gc) * l;
        double* dst = &out.data[static_cast<size_t>(r) * d];
        for (int py = 0; py < l; ++py)
            for (int px = 0; px < l; ++px)
                for (int k = 0; k < c; ++k) *dst++ = t.at(cy + py, cx + px, k);
    }
    NodePtr xn = x.node;
    return Var(make_node(std::move(out), {x}, [xn, l, gr, gc, c, d](Node& n) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int r = 0; r < gr * gc; ++r) {
            const int cy = (r / gc) * l, cx = (r % gc) * l;
            const double* src = &n.grad.data[static_cast<size_t>(r) * d];
            for (int py = 0; py < l; ++py)
                for (int px = 0; px < l; ++px)
                    for (int k = 0; k < c; ++k)
                        xn->grad.at(cy + py, cx + px, k) += *src++;
        }
    }));
}

Var patches2im(const Var& p, int h, int w, int c, int l) {
    const Tensor& t = p.val();
    const int gr = h / l, gc = w / l, d = l * l * c;
    if (t.rank() != 2 || t.dim(0) != gr * gc || t.dim(1) != d || h % l != 0 || w % l != 0)
        throw DimensionError("patches2im: inconsistent grid metadata");
    Tensor out({h, w, c});
    for (int r = 0; r < gr * gc; ++r) {
        const int cy = (r / gc) * l, cx = (r % gc) * l;
        const double* src = &t.data[static_cast<size_t>(r) * d];
        for (int py = 0; py < l; ++py)
            for (int px = 0; px < l; ++px)
                for (int k = 0; k < c; ++k) out.at(cy + py, cx + px, k) = *src++;
    }
    NodePtr pn = p.node;
    return Var(make_node(std::move(out), {p}, [pn, l, gr, gc, c, d](Node& n) {
        if (!pn->requires_grad) return;
        pn->ensure_grad();
        for (int r = 0; r < gr * gc; ++r) {
            const int cy = (r / gc) * l, cx = (r % gc) * l;
            double* dst = &pn->grad.data[static_cast<size_t>(r) * d];
            for (int py = 0; py < l; ++py)
                for (int px = 0; px < l; ++px)
                    for (int k = 0; k < c; ++k) *dst++ += n.grad.at(cy + py, cx + px, k);
        }
    }));
}

// --- reductions ------------------------------------------------------------------

Var sum_all(const Var& x) {
    double s = 0.0;
    for (double v : x.val().data) s += v;
    Tensor out({1});
    out.data[0] = s;
    NodePtr xn = x.node;
    return Var(make_node(std::move(out), {x}, [xn](Node& n) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const double g = n.grad.data[0];
        for (double& v : xn->grad.data) v += g;
    }));
}

Var mean_all(const Var& x) {
    return mul_scalar(sum_all(x), 1.0 / static_cast<double>(x.val().numel()));
}

Var spectral_scale(const Var& w, const Tensor& u, const Tensor& v) {
    const Tensor& t = w.val();
    const int cols = t.dim(t.rank() - 1);
    const int rows = static_cast<int>(t.numel() / cols);
    if (u.numel() != rows || v.numel() != cols)
        throw DimensionError("spectral_scale: u/v size mismatch");
    // sigma = u^T W v with u, v treated as constants.
    double sigma = 0.0;
    for (int i = 0; i < rows; ++i) {
        double dot = 0.0;
        for (int j = 0; j < cols; ++j)
            dot += t.data[static_cast<size_t>(i) * cols + j] * v.data[j];
        sigma += u.data[i] * dot;
    }
    if (std::fabs(sigma) < 1e-12) sigma = 1e-12;
    Tensor out(t.shape);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = t.data[i] / sigma;
    NodePtr wn = w.node;
    return Var(make_node(std::move(out), {w}, [wn, u, v, sigma, rows, cols](Node& n) {
        if (!wn->requires_grad) return;
        wn->ensure_grad();
        double gw_dot_w = 0.0;
        for (size_t i = 0; i < n.grad.data.size(); ++i)
            gw_dot_w += n.grad.data[i] * wn->val.data[i];
        const double coef = gw_dot_w / (sigma * sigma);
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j) {
                const size_t k = static_cast<size_t>(i) * cols + j;
                wn->grad.data[k] += n.grad.data[k] / sigma - coef * u.data[i] * v.data[j];
            }
    }));
}

Tensor right_singular_vector(const Tensor& w, const Tensor& u) {
    const int cols = w.dim(w.rank() - 1);
    const int rows = static_cast<int>(w.numel() / cols);
    Tensor v({cols});
    for (int j = 0; j < cols; ++j) {
        double s = 0.0;
        for (int i = 0; i < rows; ++i)
            s += w.data[static_cast<size_t>(i) * cols + j] * u.data[i];
        v.data[j] = s;
    }
    double nrm = 0.0;
    for (double x : v.data) nrm += x * x;
    nrm = std::max(std::sqrt(nrm), 1e-12);
    for (double& x : v.data) x /= nrm;
    return v;
}

Tensor power_iteration_step(const Tensor& w, Tensor& u) {
    const int cols = w.dim(w.rank() - 1);
    const int rows = static_cast<int>(w.numel() / cols);
    Tensor v = right_singular_vector(w, u);
    Tensor nu({rows});
    for (int i = 0; i < rows; ++i) {
        double s = 0.0;
        for (int j = 0; j < cols; ++j)
            s += w.data[static_cast<size_t>(i) * cols + j] * v.data[j];
        nu.data[i] = s;
    }
    double nrm = 0.0;
    for (double x : nu.data) nrm += x * x;
    nrm = std::max(std::sqrt(nrm), 1e-12);
    for (double& x : nu.data) x /= nrm;
    u = nu;
    return v;
}

Var mean_abs_diff(const Var& a, const Var& b) { return mean_all(abs(sub(a, b))); }

}  // namespace m2net::ad
