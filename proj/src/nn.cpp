#include "m2net/nn.hpp"

#include <cmath>

namespace m2net::nn {

ad::Var ParamStore::add_param(const std::string& name, Tensor init) {
    if (params.count(name)) throw DimensionError("duplicate parameter " + name);
    ad::Var v = ad::Var::leaf(std::move(init), true);
    params.emplace(name, v);
    return v;
}

Tensor& ParamStore::add_state(const std::string& name, Tensor init) {
    if (state.count(name)) throw DimensionError("duplicate state " + name);
    return state.emplace(name, std::move(init)).first->second;
}

std::vector<ad::Var> ParamStore::group(const std::string& prefix) const {
    std::vector<ad::Var> out;
    for (const auto& [name, v] : params)
        if (name.rfind(prefix, 0) == 0) out.push_back(v);
    return out;
}

std::vector<std::string> ParamStore::group_names(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& [name, v] : params)
        if (name.rfind(prefix, 0) == 0) out.push_back(name);
    return out;
}

void ParamStore::zero_grads() const {
    for (const auto& [name, v] : params) v.zero_grad();
}

Tensor he_normal(Rng& rng, std::vector<int> shape, int fan_in) {
    Tensor t(std::move(shape));
    const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (double& v : t.data) v = rng.normal(0.0, std);
    return t;
}

namespace {

ad::Var pad_for(const ad::Var& x, int k, int stride, int dilation) {
    const int h = x.val().dim(0), w = x.val().dim(1);
    const int ek = (k - 1) * dilation + 1;
    const int oh = (h + stride - 1) / stride;
    const int ow = (w + stride - 1) / stride;
    const int ph = std::max(0, (oh - 1) * stride + ek - h);
    const int pw = std::max(0, (ow - 1) * stride + ek - w);
    if (ph == 0 && pw == 0) return x;
    return ad::pad_reflect(x, ph / 2, ph - ph / 2, pw / 2, pw - pw / 2);
}

}  // namespace

Conv Conv::make(ParamStore& ps, const std::string& name, Rng& rng, int cin, int cout,
                int k, int stride, int dilation) {
    Conv c;
    c.k = k;
    c.stride = stride;
    c.dilation = dilation;
    c.w = ps.add_param(name + ".w", he_normal(rng, {k, k, cin, cout}, k * k * cin));
    c.b = ps.add_param(name + ".b", Tensor({cout}));
    return c;
}

ad::Var Conv::forward(const ad::Var& x) const {
    return ad::conv2d(pad_for(x, k, stride, dilation), w, b, stride, dilation);
}

ConvTr ConvTr::make(ParamStore& ps, const std::string& name, Rng& rng, int cin, int cout) {
    ConvTr c;
    c.w = ps.add_param(name + ".w", he_normal(rng, {cin, 4, 4, cout}, cin * 4));
    c.b = ps.add_param(name + ".b", Tensor({cout}));
    return c;
}

ad::Var ConvTr::forward(const ad::Var& x) const {
    // Pad by one before upsampling and crop the center so every output
    // pixel sees the full tap density; plain transposed convolution has a
    // thinner accumulation at the borders, which breaks shift consistency.
    const int h = x.val().dim(0), w2 = x.val().dim(1);
    ad::Var y = ad::conv2d_transpose(ad::pad_reflect(x, 1, 1, 1, 1), w, b, stride);
    return ad::crop(y, stride, stride, stride * h, stride * w2);
}

GatedConv GatedConv::make(ParamStore& ps, const std::string& name, Rng& rng, int cin,
                          int cout, int k, int stride, int dilation) {
    GatedConv g;
    g.feature = Conv::make(ps, name + ".f", rng, cin, cout, k, stride, dilation);
    g.gate = Conv::make(ps, name + ".g", rng, cin, cout, k, stride, dilation);
    return g;
}

ad::Var GatedConv::forward(const ad::Var& x) const {
    return ad::mul(ad::elu(feature.forward(x)), ad::sigmoid(gate.forward(x)));
}

ResBlock ResBlock::make(ParamStore& ps, const std::string& name, Rng& rng, int cin,
                        int cout, int stride) {
    ResBlock r;
    r.conv1 = Conv::make(ps, name + ".c1", rng, cin, cout, 3, stride);
    r.conv2 = Conv::make(ps, name + ".c2", rng, cout, cout, 3, 1);
    if (cin != cout || stride != 1) {
        r.skip = Conv::make(ps, name + ".sk", rng, cin, cout, 1, stride);
        r.has_skip = true;
    }
    return r;
}

ad::Var ResBlock::forward(const ad::Var& x) const {
    ad::Var y = conv2.forward(ad::relu(conv1.forward(x)));
    ad::Var s = has_skip ? skip.forward(x) : x;
    return ad::relu(ad::add(y, s));
}

}  // namespace m2net::nn
