#include "milstm/tape.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <memory>

#include "milstm/rng.hpp"

namespace milstm {

namespace {

std::atomic<bool> g_debug_checks{false};

// ---- dense kernels (row-major, accumulate into C) ----

// C[m x n] += A[m x k] . B[k x n]
void gemm_nn_acc(const double* __restrict a, const double* __restrict b,
                 double* __restrict c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (size_t p = 0; p < k; ++p) {
            double av = arow[p];
            const double* brow = b + p * n;
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m x k] += A[m x n] . B[k x n]^T   (row-by-row dot products)
void gemm_nt_acc(const double* __restrict a, const double* __restrict b,
                 double* __restrict c, size_t m, size_t n, size_t k) {
    for (size_t i = 0; i < m; ++i) {
        const double* arow = a + i * n;
        double* crow = c + i * k;
        for (size_t p = 0; p < k; ++p) {
            const double* brow = b + p * n;
            double acc = 0.0;
            for (size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
            crow[p] += acc;
        }
    }
}

// C[k x n] += A[m x k]^T . G[m x n]
void gemm_tn_acc(const double* __restrict a, const double* __restrict g,
                 double* __restrict c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* grow = g + i * n;
        for (size_t p = 0; p < k; ++p) {
            double av = arow[p];
            if (av == 0.0) continue;
            double* crow = c + p * n;
            for (size_t j = 0; j < n; ++j) crow[j] += av * grow[j];
        }
    }
}

void gemv_acc(const double* __restrict a, const double* __restrict x,
              double* __restrict y, size_t m, size_t k) {
    for (size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double acc = 0.0;
        for (size_t p = 0; p < k; ++p) acc += arow[p] * x[p];
        y[i] += acc;
    }
}

double act_forward(double x, Act mode) {
    switch (mode) {
        case Act::relu:
            return x > 0.0 ? x : 0.0;
        case Act::tanh:
            return std::tanh(x);
        case Act::sigmoid:
            if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
            {
                double e = std::exp(x);
                return e / (1.0 + e);
            }
        case Act::softplus:
            // log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
            return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
    }
    return 0.0;
}

// derivative expressed via input x and output y
double act_backward(double x, double y, Act mode) {
    switch (mode) {
        case Act::relu:
            return x > 0.0 ? 1.0 : 0.0;
        case Act::tanh:
            return 1.0 - y * y;
        case Act::sigmoid:
            return y * (1.0 - y);
        case Act::softplus:
            return act_forward(x, Act::sigmoid);
    }
    return 0.0;
}

const char* act_name(Act mode) {
    switch (mode) {
        case Act::relu: return "relu";
        case Act::tanh: return "tanh";
        case Act::sigmoid: return "sigmoid";
        case Act::softplus: return "softplus";
    }
    return "?";
}

void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) {
        throw DimensionError(std::string(op) + ": expected rank-2 tensor, got " + t.shape_str());
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) {
        throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_str() +
                             " vs " + b.shape_str());
    }
}

}  // namespace

// ---- Tape ---------------------------------------------------------------

void Tape::set_debug_checks(bool on) { g_debug_checks.store(on); }
bool Tape::debug_checks() { return g_debug_checks.load(); }

Var Tape::push(const char* op, Tensor value, std::vector<int32_t> parents, BackFn back) {
    if (g_debug_checks.load()) value.check_finite(op);
    bool rg = false;
    for (int32_t p : parents) rg = rg || nodes_[p].rg;
    Node n;
    n.value = std::move(value);
    n.parents = std::move(parents);
    n.rg = rg;
    if (rg) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int32_t>(nodes_.size() - 1)};
}

Var Tape::leaf(Tensor value) {
    bool rg = value.requires_grad();
    Node n;
    n.value = std::move(value);
    n.rg = rg;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int32_t>(nodes_.size() - 1)};
}

Var Tape::constant(Tensor value) {
    Node n;
    n.value = std::move(value);
    n.rg = false;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int32_t>(nodes_.size() - 1)};
}

Tensor& Tape::grad_buf(int32_t id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
        n.grad = Tensor(n.value.shape());
        n.has_grad = true;
    }
    return n.grad;
}

const Tensor& Tape::grad(Var v) const {
    const Node& n = nodes_[v.id];
    if (!n.has_grad) throw ContractError("no gradient recorded for this node");
    return n.grad;
}

void Tape::backward(Var loss) {
    Node& ln = nodes_[loss.id];
    if (ln.value.numel() != 1) {
        throw ContractError("backward: loss must be scalar, got shape " + ln.value.shape_str());
    }
    for (Node& n : nodes_) n.has_grad = false;
    grad_buf(loss.id)[0] = 1.0;
    for (int32_t id = loss.id; id >= 0; --id) {
        Node& n = nodes_[id];
        if (n.has_grad && n.rg && n.back) n.back(*this, id);
    }
    // unreached requires_grad leaves still get (zero) buffers
    for (Node& n : nodes_) {
        if (n.rg && n.parents.empty() && !n.back && !n.has_grad) {
            n.grad = Tensor(n.value.shape());
            n.has_grad = true;
        }
    }
}

// ---- elementwise --------------------------------------------------------

Var add(Tape& t, Var a, Var b) {
    const Tensor& A = t.value(a);
    const Tensor& B = t.value(b);
    require_same_shape(A, B, "add");
    Tensor out(A.shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = A[i] + B[i];
    return t.push("add", std::move(out), {a.id, b.id}, [a, b](Tape& t, int32_t self) {
        const Tensor& g = t.node_grad(self);
        for (Var v : {a, b}) {
            if (!t.node_rg(v.id)) continue;
            Tensor& gb = t.grad_buf(v.id);
            for (size_t i = 0; i < g.numel(); ++i) gb[i] += g[i];
        }
    });
}

Var sub(Tape& t, Var a, Var b) {
    const Tensor& A = t.value(a);
    const Tensor& B = t.value(b);
    require_same_shape(A, B, "sub");
    Tensor out(A.shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = A[i] - B[i];
    return t.push("sub", std::move(out), {a.id, b.id}, [a, b](Tape& t, int32_t self) {
        const Tensor& g = t.node_grad(self);
        if (t.node_rg(a.id)) {
            Tensor& ga = t.grad_buf(a.id);
            for (size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        }
        if (t.node_rg(b.id)) {
            Tensor& gb = t.grad_buf(b.id);
            for (size_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
        }
    });
}

Var mul(Tape& t, Var a, Var b) {
    const Tensor& A = t.value(a);
    const Tensor& B = t.value(b);
    require_same_shape(A, B, "mul");
    Tensor out(A.shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = A[i] * B[i];
    return t.push("mul", std::move(out), {a.id, b.id}, [a, b](Tape& t, int32_t self) {
        const Tensor& g = t.node_grad(self);
        const Tensor& A = t.node_value(a.id);
        const Tensor& B = t.node_value(b.id);
        if (t.node_rg(a.id)) {
            Tensor& ga = t.grad_buf(a.id);
            for (size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * B[i];
        }
        if (t.node_rg(b.id)) {
            Tensor& gb = t.grad_buf(b.id);
            for (size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * A[i];
        }
    });
}

Var scale(Tape& t, Var a, double c) {
    const Tensor& A = t.value(a);
    Tensor out(A.shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = A[i] * c;
    return t.push("scale", std::move(out), {a.id}, [a, c](Tape& t, int32_t self) {
        const Tensor& g = t.node_grad(self);
        Tensor& ga = t.grad_buf(a.id);
        for (size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * c;
    });
}

Var activation(Tape& t, Var a, Act mode) {
    const Tensor& A = t.value(a);
    Tensor out(A.shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = act_forward(A[i], mode);
    return t.push(act_name(mode), std::move(out), {a.id}, [a, mode](Tape& t, int32_t self) {
        const Tensor& g = t.node_grad(self);
        const Tensor& x = t.node_value(a.id);
        const Tensor& y = t.node_value(self);
        Tensor& ga = t.grad_buf(a.id);
        for (size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * act_backward(x[i], y[i], mode);
    });
}

Var relu(Tape& t, Var a) { return activation(t, a, Act::relu); }
Var tanh(Tape& t, Var a) { return activation(t, a, Act::tanh); }
Var sigmoid(Tape& t, Var a) { return activation(t, a, Act::sigmoid); }
Var softplus(Tape& t, Var a) { return activation(t, a, Act::softplus); }

// ---- linear algebra ------------------------------------------------------

Var matmul(Tape& t, Var a, Var b) {
    const Tensor& A = t.value(a);
    const Tensor& B = t.value(b);
    require_rank2(A, "matmul");
    require_rank2(B, "matmul");
    if (A.extent(1) != B.extent(0)) {
        throw DimensionError("matmul: inner dimensions disagree, " + A.shape_str() + " . " +
                             B.shape_str());
    }
    size_t m = A.extent(0), k = A.extent(1), n = B.extent(1);
    Tensor C({m, n});
    gemm_nn_acc(A.data(), B.data(), C.data(), m, k, n);
    return t.push("matmul", std::move(C), {a.id, b.id}, [a, b, m, k, n](Tape& t, int32_t self) {
        const Tensor& g = t.node_grad(self);
        if (t.node_rg(a.id)) {
            // dA += G . B^T
            gemm_nt_acc(g.data(), t.node_value(b.id).data(), t.grad_buf(a.id).data(), m, n, k);
        }
        if (t.node_rg(b.id)) {
            // dB += A^T . G
            gemm_tn_acc(t.node_value(a.id).data(), g.data(), t.grad_buf(b.id).data(), m, k, n);
        }
    });
}

Var matvec(Tape& t, Var a, Var x) {
    const Tensor& A = t.value(a);
    const Tensor& X = t.value(x);
    require_rank2(A, "matvec");
    if (X.rank() != 1 || A.extent(1) != X.extent(0)) {
        throw DimensionError("matvec: shapes disagree, " + A.shape_str() + " . " + X.shape_str());
    }
    size_t m = A.extent(0), k = A.extent(1);
    Tensor y({m});
    gemv_acc(A.data(), X.data(), y.data(), m, k);
    return t.push("matvec", std::move(y), {a.id, x.id}, [a, x, m, k](Tape& t, int32_t self) {
        const Tensor& g = t.node_grad(self);
        const Tensor& A = t.node_value(a.id);
        const Tensor& X = t.node_value(x.id);
        if (t.node_rg(a.id)) {
            Tensor& ga = t.grad_buf(a.id);
            for (size_t i = 0; i < m; ++i) {
                double gi = g[i];
                if (gi == 0.0) continue;
                double* garow = ga.data() + i * k;
                const double* xp = X.data();
                for (size_t p = 0; p < k; ++p) garow[p] += gi * xp[p];
            }
        }
        if (t.node_rg(x.id)) {
            Tensor& gx = t.grad_buf(x.id);
            for (size_t i = 0; i < m; ++i) {
                double gi = g[i];
                if (gi == 0.0) continue;
                const double* arow = A.data() + i * k;
                double* gxp = gx.data();
                for (size_t p = 0; p < k; ++p) gxp[p] += gi * arow[p];
            }
        }
    });
}

Var dot(Tape& t, Var a, Var b) {
    const Tensor& A = t.value(a);
    const Tensor& B = t.value(b);
    require_same_shape(A, B, "dot");
    if (A.rank() != 1) throw DimensionError("dot: expected vectors, got " + A.shape_str());
    double acc = 0.0;
    for (size_t i = 0; i < A.numel(); ++i) acc += A[i] * B[i];
    return t.push("dot", Tensor::scalar(acc), {a.id, b.id}, [a, b](Tape& t, int32_t self) {
        double g = t.node_grad(self)[0];
        const Tensor& A = t.node_value(a.id);
        const Tensor& B = t.node_value(b.id);
        if (t.node_rg(a.id)) {
            Tensor& ga = t.grad_buf(a.id);
            for (size_t i = 0; i < A.numel(); ++i) ga[i] += g * B[i];
        }
        if (t.node_rg(b.id)) {
            Tensor& gb = t.grad_buf(b.id);
            for (size_t i = 0; i < A.numel(); ++i) gb[i] += g * A[i];
        }
    });
}

Var transpose(Tape& t, Var a) {
    const Tensor& A = t.value(a);
    require_rank2(A, "transpose");
    size_t m = A.extent(0), n = A.extent(1);
    Tensor out({n, m});
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) out.at(j, i) = A.at(i, j);
    return t.push("transpose", std::move(out), {a.id}, [a, m, n](Tape& t, int32_t self) {
        const Tensor& g = t.node_grad(self);
        Tensor& ga = t.grad_buf(a.id);
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < n; ++j) ga.at(i, j) += g.at(j, i);
    });
}

// ---- convolution stack ----------------------------------------------------

Var conv2d(Tape& t, Var x, Var k, size_t stride) {
    const Tensor& X = t.value(x);
    const Tensor& K = t.value(k);
    if (X.rank() != 3 || K.rank() != 4) {
        throw DimensionError("conv2d: expected x[Cin x H x W], k[Cout x Cin x kh x kw], got " +
                             X.shape_str() + " and " + K.shape_str());
    }
    size_t cin = X.extent(0), h = X.extent(1), w = X.extent(2);
    size_t cout = K.extent(0), kh = K.extent(2), kw = K.extent(3);
    if (K.extent(1) != cin) {
        throw DimensionError("conv2d: channel mismatch, x " + X.shape_str() + " vs k " +
                             K.shape_str());
    }
    if (stride == 0) throw DimensionError("conv2d: stride must be positive");
    if (kh > h || kw > w || (h - kh) % stride != 0 || (w - kw) % stride != 0) {
        throw DimensionError("conv2d: geometry does not divide, x " + X.shape_str() + ", k " +
                             K.shape_str() + ", stride " + std::to_string(stride));
    }
    size_t oh = (h - kh) / stride + 1, ow = (w - kw) / stride + 1;
    size_t patch = cin * kh * kw, cells = oh * ow;

    // im2col: cols[patch x cells], kept alive for the backward pass
    auto cols = std::make_shared<std::vector<double>>(patch * cells);
    {
        double* cp = cols->data();
        for (size_t c = 0; c < cin; ++c) {
            for (size_t u = 0; u < kh; ++u) {
                for (size_t v = 0; v < kw; ++v) {
                    size_t prow = (c * kh + u) * kw + v;
                    double* dst = cp + prow * cells;
                    for (size_t oy = 0; oy < oh; ++oy) {
                        const double* src = X.data() + (c * h + oy * stride + u) * w + v;
                        for (size_t ox = 0; ox < ow; ++ox) dst[oy * ow + ox] = src[ox * stride];
                    }
                }
            }
        }
    }
    Tensor Y({cout, oh, ow});
    gemm_nn_acc(K.data(), cols->data(), Y.data(), cout, patch, cells);

    auto back = [x, k, cols, cin, h, w, cout, kh, kw, oh, ow, stride](Tape& t, int32_t self) {
        const Tensor& g = t.node_grad(self);  // [cout x oh x ow]
        size_t patch = cin * kh * kw, cells = oh * ow;
        if (t.node_rg(k.id)) {
            // dK += G_mat . cols^T
            gemm_nt_acc(g.data(), cols->data(), t.grad_buf(k.id).data(), cout, cells, patch);
        }
        if (t.node_rg(x.id)) {
            // dcols = K^T . G_mat, then scatter back (col2im)
            std::vector<double> dcols(patch * cells, 0.0);
            gemm_tn_acc(t.node_value(k.id).data(), g.data(), dcols.data(), cout, patch, cells);
            Tensor& gx = t.grad_buf(x.id);
            for (size_t c = 0; c < cin; ++c) {
                for (size_t u = 0; u < kh; ++u) {
                    for (size_t v = 0; v < kw; ++v) {
                        size_t prow = (c * kh + u) * kw + v;
                        const double* src = dcols.data() + prow * cells;
                        for (size_t oy = 0; oy < oh; ++oy) {
                            double* dst = gx.data() + (c * h + oy * stride + u) * w + v;
                            for (size_t ox = 0; ox < ow; ++ox) dst[ox * stride] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    };
    return t.push("conv2d", std::move(Y), {x.id, k.id}, std::move(back));
}

Var add_channel_bias(Tape& t, Var x, Var b) {
    const Tensor& X = t.value(x);
    const Tensor& B = t.value(b);
    if (X.rank() != 3 || B.rank() != 1 || B.extent(0) != X.extent(0)) {
        throw DimensionError("add_channel_bias: shapes disagree, " + X.shape_str() + " + " +
                             B.shape_str());
    }
    size_t c = X.extent(0), plane = X.extent(1) * X.extent(2);
    Tensor out(X.shape());
    for (size_t ci = 0; ci < c; ++ci) {
        double bv = B[ci];
        const double* src = X.data() + ci * plane;
        double* dst = out.data() + ci * plane;
        for (size_t i = 0; i < plane; ++i) dst[i] = src[i] + bv;
    }
    return t.push("add_channel_bias", std::move(out), {x.id, b.id},
                  [x, b, c, plane](Tape& t, int32_t self) {
                      const Tensor& g = t.node_grad(self);
                      if (t.node_rg(x.id)) {
                          Tensor& gx = t.grad_buf(x.id);
                          for (size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
                      }
                      if (t.node_rg(b.id)) {
                          Tensor& gb = t.grad_buf(b.id);
                          for (size_t ci = 0; ci < c; ++ci) {
                              const double* grow = g.data() + ci * plane;
                              double acc = 0.0;
                              for (size_t i = 0; i < plane; ++i) acc += grow[i];
                              gb[ci] += acc;
                          }
                      }
                  });
}

Var maxpool2(Tape& t, Var x) {
    const Tensor& X = t.value(x);
    if (X.rank() != 3) throw DimensionError("maxpool2: expected [C x H x W], got " + X.shape_str());
    size_t c = X.extent(0), h = X.extent(1), w = X.extent(2);
    if (h < 2 || w < 2) throw DimensionError("maxpool2: spatial extent too small " + X.shape_str());
    size_t oh = h / 2, ow = w / 2;
    Tensor out({c, oh, ow});
    auto argmax = std::make_shared<std::vector<uint32_t>>(c * oh * ow);
    for (size_t ci = 0; ci < c; ++ci) {
        for (size_t oy = 0; oy < oh; ++oy) {
            for (size_t ox = 0; ox < ow; ++ox) {
                size_t base = (ci * h + 2 * oy) * w + 2 * ox;
                size_t cand[4] = {base, base + 1, base + w, base + w + 1};
                size_t best = cand[0];
                for (int q = 1; q < 4; ++q)
                    if (X[cand[q]] > X[best]) best = cand[q];
                out.at(ci, oy, ox) = X[best];
                (*argmax)[(ci * oh + oy) * ow + ox] = static_cast<uint32_t>(best);
            }
        }
    }
    return t.push("maxpool2", std::move(out), {x.id}, [x, argmax](Tape& t, int32_t self) {
        const Tensor& g = t.node_grad(self);
        Tensor& gx = t.grad_buf(x.id);
        for (size_t i = 0; i < g.numel(); ++i) gx[(*argmax)[i]] += g[i];
    });
}

// ---- structure ops ---------------------------------------------------------

Var reshape(Tape& t, Var a, std::vector<size_t> shape) {
    const Tensor& A = t.value(a);
    if (shape_numel(shape) != A.numel()) {
        throw DimensionError("reshape: element count mismatch, " + A.shape_str());
    }
    Tensor out(std::move(shape), std::vector<double>(A.data(), A.data() + A.numel()));
    return t.push("reshape", std::move(out), {a.id}, [a](Tape& t, int32_t self) {
        const Tensor& g = t.node_grad(self);
        Tensor& ga = t.grad_buf(a.id);
        for (size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    });
}

Var concat(Tape& t, Var a, Var b) {
    const Tensor& A = t.value(a);
    const Tensor& B = t.value(b);
    if (A.rank() != 1 || B.rank() != 1) {
        throw DimensionError("concat: expected vectors, got " + A.shape_str() + " and " +
                             B.shape_str());
    }
    size_t p = A.numel(), q = B.numel();
    Tensor out({p + q});
    std::memcpy(out.data(), A.data(), p * sizeof(double));
    std::memcpy(out.data() + p, B.data(), q * sizeof(double));
    return t.push("concat", std::move(out), {a.id, b.id}, [a, b, p, q](Tape& t, int32_t self) {
        const Tensor& g = t.node_grad(self);
        if (t.node_rg(a.id)) {
            Tensor& ga = t.grad_buf(a.id);
            for (size_t i = 0; i < p; ++i) ga[i] += g[i];
        }
        if (t.node_rg(b.id)) {
            Tensor& gb = t.grad_buf(b.id);
            for (size_t i = 0; i < q; ++i) gb[i] += g[p + i];
        }
    });
}

Var concat_cols(Tape& t, Var a, Var b) {
    const Tensor& A = t.value(a);
    const Tensor& B = t.value(b);
    require_rank2(A, "concat_cols");
    require_rank2(B, "concat_cols");
    if (A.extent(0) != B.extent(0)) {
        throw DimensionError("concat_cols: row counts disagree, " + A.shape_str() + " and " +
                             B.shape_str());
    }
    size_t m = A.extent(0), p = A.extent(1), q = B.extent(1);
    Tensor out({m, p + q});
    for (size_t i = 0; i < m; ++i) {
        std::memcpy(out.data() + i * (p + q), A.data() + i * p, p * sizeof(double));
        std::memcpy(out.data() + i * (p + q) + p, B.data() + i * q, q * sizeof(double));
    }
    return t.push("concat_cols", std::move(out), {a.id, b.id},
                  [a, b, m, p, q](Tape& t, int32_t self) {
                      const Tensor& g = t.node_grad(self);
                      if (t.node_rg(a.id)) {
                          Tensor& ga = t.grad_buf(a.id);
                          for (size_t i = 0; i < m; ++i)
                              for (size_t j = 0; j < p; ++j) ga.at(i, j) += g.at(i, j);
                      }
                      if (t.node_rg(b.id)) {
                          Tensor& gb = t.grad_buf(b.id);
                          for (size_t i = 0; i < m; ++i)
                              for (size_t j = 0; j < q; ++j) gb.at(i, j) += g.at(i, p + j);
                      }
                  });
}

Var row(Tape& t, Var a, size_t i) {
    const Tensor& A = t.value(a);
    require_rank2(A, "row");
    if (i >= A.extent(0)) throw DimensionError("row: index out of range");
    size_t n = A.extent(1);
    Tensor out({n});
    std::memcpy(out.data(), A.data() + i * n, n * sizeof(double));
    return t.push("row", std::move(out), {a.id}, [a, i, n](Tape& t, int32_t self) {
        const Tensor& g = t.node_grad(self);
        Tensor& ga = t.grad_buf(a.id);
        for (size_t j = 0; j < n; ++j) ga.at(i, j) += g[j];
    });
}

Var stack_rows(Tape& t, const std::vector<Var>& vs) {
    if (vs.empty()) throw ContractError("stack_rows: need at least one row");
    size_t n = t.value(vs[0]).numel();
    std::vector<int32_t> parents;
    parents.reserve(vs.size());
    Tensor out({vs.size(), n});
    for (size_t i = 0; i < vs.size(); ++i) {
        const Tensor& r = t.value(vs[i]);
        if (r.rank() != 1 || r.numel() != n) {
            throw DimensionError("stack_rows: row " + std::to_string(i) + " has shape " +
                                 r.shape_str());
        }
        std::memcpy(out.data() + i * n, r.data(), n * sizeof(double));
        parents.push_back(vs[i].id);
    }
    auto rows = vs;
    return t.push("stack_rows", std::move(out), std::move(parents),
                  [rows, n](Tape& t, int32_t self) {
                      const Tensor& g = t.node_grad(self);
                      for (size_t i = 0; i < rows.size(); ++i) {
                          if (!t.node_rg(rows[i].id)) continue;
                          Tensor& gr = t.grad_buf(rows[i].id);
                          for (size_t j = 0; j < n; ++j) gr[j] += g.at(i, j);
                      }
                  });
}

Var permute_rows(Tape& t, Var a, const std::vector<size_t>& perm) {
    const Tensor& A = t.value(a);
    require_rank2(A, "permute_rows");
    size_t m = A.extent(0), n = A.extent(1);
    if (perm.size() != m) throw DimensionError("permute_rows: permutation length mismatch");
    Tensor out({m, n});
    for (size_t i = 0; i < m; ++i) {
        if (perm[i] >= m) throw ContractError("permute_rows: index out of range");
        std::memcpy(out.data() + i * n, A.data() + perm[i] * n, n * sizeof(double));
    }
    auto p = perm;
    return t.push("permute_rows", std::move(out), {a.id}, [a, p, n](Tape& t, int32_t self) {
        const Tensor& g = t.node_grad(self);
        Tensor& ga = t.grad_buf(a.id);
        for (size_t i = 0; i < p.size(); ++i)
            for (size_t j = 0; j < n; ++j) ga.at(p[i], j) += g.at(i, j);
    });
}

Var concat_rows(Tape& t, const std::vector<Var>& mats) {
    if (mats.empty()) throw ContractError("concat_rows: need at least one matrix");
    size_t n = 0, total = 0;
    for (size_t i = 0; i < mats.size(); ++i) {
        const Tensor& M = t.value(mats[i]);
        require_rank2(M, "concat_rows");
        if (i == 0) n = M.extent(1);
        if (M.extent(1) != n) {
            throw DimensionError("concat_rows: column counts disagree, " + M.shape_str());
        }
        total += M.extent(0);
    }
    Tensor out({total, n});
    std::vector<int32_t> parents;
    std::vector<size_t> offsets;
    size_t off = 0;
    for (Var v : mats) {
        const Tensor& M = t.value(v);
        std::memcpy(out.data() + off * n, M.data(), M.numel() * sizeof(double));
        parents.push_back(v.id);
        offsets.push_back(off);
        off += M.extent(0);
    }
    auto ms = mats;
    return t.push("concat_rows", std::move(out), std::move(parents),
                  [ms, offsets, n](Tape& t, int32_t self) {
                      const Tensor& g = t.node_grad(self);
                      for (size_t i = 0; i < ms.size(); ++i) {
                          if (!t.node_rg(ms[i].id)) continue;
                          Tensor& gm = t.grad_buf(ms[i].id);
                          const double* src = g.data() + offsets[i] * n;
                          for (size_t k = 0; k < gm.numel(); ++k) gm[k] += src[k];
                      }
                  });
}

Var repeat_row(Tape& t, Var x, size_t m) {
    const Tensor& X = t.value(x);
    if (X.rank() != 1) throw DimensionError("repeat_row: expected vector, got " + X.shape_str());
    if (m == 0) throw DimensionError("repeat_row: need m >= 1");
    size_t n = X.numel();
    Tensor out({m, n});
    for (size_t i = 0; i < m; ++i) std::memcpy(out.data() + i * n, X.data(), n * sizeof(double));
    return t.push("repeat_row", std::move(out), {x.id}, [x, m, n](Tape& t, int32_t self) {
        const Tensor& g = t.node_grad(self);
        Tensor& gx = t.grad_buf(x.id);
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < n; ++j) gx[j] += g.at(i, j);
    });
}

Var add_row_broadcast(Tape& t, Var a, Var bias) {
    const Tensor& A = t.value(a);
    const Tensor& B = t.value(bias);
    require_rank2(A, "add_row_broadcast");
    if (B.rank() != 1 || B.extent(0) != A.extent(1)) {
        throw DimensionError("add_row_broadcast: shapes disagree, " + A.shape_str() + " + " +
                             B.shape_str());
    }
    size_t m = A.extent(0), n = A.extent(1);
    Tensor out({m, n});
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) out.at(i, j) = A.at(i, j) + B[j];
    return t.push("add_row_broadcast", std::move(out), {a.id, bias.id},
                  [a, bias, m, n](Tape& t, int32_t self) {
                      const Tensor& g = t.node_grad(self);
                      if (t.node_rg(a.id)) {
                          Tensor& ga = t.grad_buf(a.id);
                          for (size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
                      }
                      if (t.node_rg(bias.id)) {
                          Tensor& gb = t.grad_buf(bias.id);
                          for (size_t i = 0; i < m; ++i)
                              for (size_t j = 0; j < n; ++j) gb[j] += g.at(i, j);
                      }
                  });
}

// ---- reductions -----------------------------------------------------------

Var sum_all(Tape& t, Var a) {
    const Tensor& A = t.value(a);
    double acc = 0.0;
    for (size_t i = 0; i < A.numel(); ++i) acc += A[i];
    return t.push("sum_all", Tensor::scalar(acc), {a.id}, [a](Tape& t, int32_t self) {
        double g = t.node_grad(self)[0];
        Tensor& ga = t.grad_buf(a.id);
        for (size_t i = 0; i < ga.numel(); ++i) ga[i] += g;
    });
}

Var mean_all(Tape& t, Var a) {
    return scale(t, sum_all(t, a), 1.0 / static_cast<double>(t.value(a).numel()));
}

Var mean_rows(Tape& t, Var a) {
    const Tensor& A = t.value(a);
    require_rank2(A, "mean_rows");
    size_t m = A.extent(0), n = A.extent(1);
    Tensor out({n});
    // per-column sorted summation: result is bit-identical under any row order
    std::vector<double> col(m);
    for (size_t j = 0; j < n; ++j) {
        for (size_t i = 0; i < m; ++i) col[i] = A.at(i, j);
        std::sort(col.begin(), col.end());
        double acc = 0.0;
        for (double v : col) acc += v;
        out[j] = acc / static_cast<double>(m);
    }
    return t.push("mean_rows", std::move(out), {a.id}, [a, m, n](Tape& t, int32_t self) {
        const Tensor& g = t.node_grad(self);
        Tensor& ga = t.grad_buf(a.id);
        double inv = 1.0 / static_cast<double>(m);
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < n; ++j) ga.at(i, j) += g[j] * inv;
    });
}

Var max_rows(Tape& t, Var a) {
    const Tensor& A = t.value(a);
    require_rank2(A, "max_rows");
    size_t m = A.extent(0), n = A.extent(1);
    Tensor out({n});
    auto arg = std::make_shared<std::vector<uint32_t>>(n, 0);
    for (size_t j = 0; j < n; ++j) {
        size_t best = 0;
        for (size_t i = 1; i < m; ++i)
            if (A.at(i, j) > A.at(best, j)) best = i;
        out[j] = A.at(best, j);
        (*arg)[j] = static_cast<uint32_t>(best);
    }
    return t.push("max_rows", std::move(out), {a.id}, [a, arg, n](Tape& t, int32_t self) {
        const Tensor& g = t.node_grad(self);
        Tensor& ga = t.grad_buf(a.id);
        for (size_t j = 0; j < n; ++j) ga.at((*arg)[j], j) += g[j];
    });
}

Var softmax(Tape& t, Var a) {
    const Tensor& A = t.value(a);
    if (A.rank() != 1) throw DimensionError("softmax: expected vector, got " + A.shape_str());
    size_t n = A.numel();
    Tensor out({n});
    double mx = A[0];
    for (size_t i = 1; i < n; ++i) mx = std::max(mx, A[i]);
    double z = 0.0;
    for (size_t i = 0; i < n; ++i) {
        out[i] = std::exp(A[i] - mx);
        z += out[i];
    }
    for (size_t i = 0; i < n; ++i) out[i] /= z;
    return t.push("softmax", std::move(out), {a.id}, [a, n](Tape& t, int32_t self) {
        const Tensor& g = t.node_grad(self);
        const Tensor& s = t.node_value(self);
        Tensor& ga = t.grad_buf(a.id);
        double gs = 0.0;
        for (size_t i = 0; i < n; ++i) gs += g[i] * s[i];
        for (size_t i = 0; i < n; ++i) ga[i] += s[i] * (g[i] - gs);
    });
}

Var detach(Tape& t, Var a) {
    return t.constant(t.value(a));
}

Var ce_with_logits(Tape& t, Var logits, size_t label) {
    const Tensor& z = t.value(logits);
    if (z.rank() != 1) throw DimensionError("ce_with_logits: expected vector, got " + z.shape_str());
    if (label >= z.numel()) throw ContractError("ce_with_logits: label out of range");
    size_t n = z.numel();
    double mx = z[0];
    for (size_t i = 1; i < n; ++i) mx = std::max(mx, z[i]);
    double sum = 0.0;
    for (size_t i = 0; i < n; ++i) sum += std::exp(z[i] - mx);
    double loss = mx + std::log(sum) - z[label];
    return t.push("ce_with_logits", Tensor::scalar(loss), {logits.id},
                  [logits, label, mx, sum, n](Tape& t, int32_t self) {
                      double g = t.node_grad(self)[0];
                      const Tensor& z = t.node_value(logits.id);
                      Tensor& gz = t.grad_buf(logits.id);
                      for (size_t i = 0; i < n; ++i) {
                          double p = std::exp(z[i] - mx) / sum;
                          gz[i] += g * (p - (i == label ? 1.0 : 0.0));
                      }
                  });
}

// ---- gradient checking ------------------------------------------------------

double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double eps,
                  size_t max_coords, uint64_t seed) {
    Tensor xg = x;
    xg.set_requires_grad(true);
    Tape tape;
    Var xv = tape.leaf(xg);
    Var loss = f(tape, xv);
    tape.backward(loss);
    Tensor analytic = tape.grad(xv);

    auto eval = [&](const Tensor& p) {
        Tape t2;
        Tensor pc = p;
        pc.set_requires_grad(false);
        Var pv = t2.leaf(std::move(pc));
        return t2.value(f(t2, pv)).scalar_value();
    };

    std::vector<size_t> coords;
    if (max_coords == 0 || max_coords >= x.numel()) {
        coords.resize(x.numel());
        for (size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    } else {
        Rng rng(seed);
        std::vector<size_t> all = rng.permutation(x.numel());
        coords.assign(all.begin(), all.begin() + max_coords);
    }

    double worst = 0.0;
    Tensor xp = x;
    for (size_t i : coords) {
        double orig = xp[i];
        xp[i] = orig + eps;
        double fp = eval(xp);
        xp[i] = orig - eps;
        double fm = eval(xp);
        xp[i] = orig;
        double numeric = (fp - fm) / (2.0 * eps);
        double a = analytic[i];
        double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace milstm
