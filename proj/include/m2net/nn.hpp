#pragma once

#include <map>
#include <string>
#include <vector>

#include "m2net/autodiff.hpp"
#include "m2net/rng.hpp"

namespace m2net::nn {

// Named parameter registry. Construction order is recorded so that seeded
// initialization is reproducible; lookups go through the sorted map, which
// also fixes the checkpoint record order.
struct ParamStore {
    std::map<std::string, ad::Var> params;
    std::map<std::string, Tensor> state;  // non-trainable (power-iteration vectors)

    ad::Var add_param(const std::string& name, Tensor init);
    Tensor& add_state(const std::string& name, Tensor init);

    std::vector<ad::Var> group(const std::string& prefix) const;
    std::vector<std::string> group_names(const std::string& prefix) const;
    void zero_grads() const;
};

Tensor he_normal(Rng& rng, std::vector<int> shape, int fan_in);

// 3x3 (or kxk) convolution with reflect padding sized so the output is
// ceil(H/stride) x ceil(W/stride).
struct Conv {
    ad::Var w, b;
    int k = 3, stride = 1, dilation = 1;

    static Conv make(ParamStore& ps, const std::string& name, Rng& rng, int cin,
                     int cout, int k, int stride, int dilation = 1);
    ad::Var forward(const ad::Var& x) const;
};

// Transposed convolution, kernel 4 stride 2: exact x2 upsampling.
struct ConvTr {
    ad::Var w, b;
    int k = 4, stride = 2;

    static ConvTr make(ParamStore& ps, const std::string& name, Rng& rng, int cin,
                       int cout);
    ad::Var forward(const ad::Var& x) const;
};

// Gated convolution: elu(feature(x)) * sigmoid(gate(x)).
struct GatedConv {
    Conv feature, gate;

    static GatedConv make(ParamStore& ps, const std::string& name, Rng& rng, int cin,
                          int cout, int k, int stride, int dilation = 1);
    ad::Var forward(const ad::Var& x) const;
};

// Residual block; the first convolution carries the stride, the skip is a
// strided 1x1 projection whenever shape changes.
struct ResBlock {
    Conv conv1, conv2;
    Conv skip;  // undefined when identity
    bool has_skip = false;

    static ResBlock make(ParamStore& ps, const std::string& name, Rng& rng, int cin,
                         int cout, int stride);
    ad::Var forward(const ad::Var& x) const;
};

}  // namespace m2net::nn
