#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "m2net/tensor.hpp"

namespace m2net::ad {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    Tensor val;
    Tensor grad;  // lazily allocated, same shape as val
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backward_fn;

    void ensure_grad() {
        if (grad.data.empty()) grad = Tensor::zeros(val.shape);
    }
};

// Lightweight handle to a graph node.
class Var {
public:
    Var() = default;
    explicit Var(NodePtr n) : node(std::move(n)) {}

    static Var leaf(Tensor t, bool requires_grad = false);

    bool defined() const { return node != nullptr; }
    const Tensor& val() const { return node->val; }
    Tensor& val() { return node->val; }
    Tensor& grad() const {
        node->ensure_grad();
        return node->grad;
    }
    bool requires_grad() const { return node && node->requires_grad; }
    void zero_grad() const {
        if (node) node->grad = Tensor();
    }

    NodePtr node;
};

// While a guard is alive, new nodes record no parents or closures.
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    bool prev;
};
bool grad_enabled();

// Reverse sweep from a scalar loss. Seeds d(loss)/d(loss) = seed, so batch
// members can be back-propagated one at a time with seed = 1/batch_size.
void backward(const Var& loss, double seed = 1.0);

// --- elementwise -----------------------------------------------------------
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var add_scalar(const Var& a, double s);
Var mul_scalar(const Var& a, double s);
Var neg(const Var& a);
Var relu(const Var& a);
Var leaky_relu(const Var& a, double slope);
Var elu(const Var& a);
Var sigmoid(const Var& a);
Var abs(const Var& a);

// --- structure -------------------------------------------------------------
Var concat_c(const std::vector<Var>& xs);                      // [H,W,C..] channel concat
Var pad_reflect(const Var& x, int top, int bottom, int left, int right);
Var crop(const Var& x, int top, int left, int h, int w);
Var upsample2x(const Var& x);
Var detach(const Var& x);

// --- convolution (VALID padding; combine with pad_reflect for same-size) ----
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int dilation);
// Transposed convolution, output exactly stride * input size.
// Weight layout [Cin, kh, kw, Cout]; requires kh >= stride, (kh - stride) even.
Var conv2d_transpose(const Var& x, const Var& w, const Var& b, int stride);

// --- linear algebra / attention --------------------------------------------
Var matmul(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false);
Var softmax_rows(const Var& x);
Var normalize_rows(const Var& x, double eps);
Var gather_rows(const Var& x, std::vector<int> idx);
Var scatter_rows(const Var& x, std::vector<int> idx, int total_rows);
Var im2patches(const Var& x, int l);                            // [R, l*l*C]
Var patches2im(const Var& p, int h, int w, int c, int l);

// --- reductions -------------------------------------------------------------
Var sum_all(const Var& x);
Var mean_all(const Var& x);

// Spectrally normalized weight view: W / (u^T W_mat v) with W_mat the
// [prod(shape[:-1]), shape[-1]] matrix view of W; u and v are constants here.
Var spectral_scale(const Var& w, const Tensor& u, const Tensor& v);

// One power-iteration step on the matrix view of w; updates u in place and
// returns the matching right vector v.
Tensor power_iteration_step(const Tensor& w, Tensor& u);
Tensor right_singular_vector(const Tensor& w, const Tensor& u);

// mean(|a - b|), the L1 building block used by the losses.
Var mean_abs_diff(const Var& a, const Var& b);

}  // namespace m2net::ad
