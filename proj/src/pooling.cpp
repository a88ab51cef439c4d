#include "milstm/pooling.hpp"

#include <cmath>

namespace milstm {

namespace {

Tensor uniform_param(std::vector<size_t> shape, double bound, Rng& rng) {
    Tensor t(std::move(shape));
    for (size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-bound, bound);
    t.set_requires_grad(true);
    return t;
}

Tensor const_param(std::vector<size_t> shape, double v) {
    Tensor t = Tensor::full(std::move(shape), v);
    t.set_requires_grad(true);
    return t;
}

LstmDirParams init_dir(size_t n, size_t h, Rng& rng) {
    double bound = 1.0 / std::sqrt(double(h));
    LstmDirParams d;
    d.wi = uniform_param({h, n + h}, bound, rng);
    d.wf = uniform_param({h, n + h}, bound, rng);
    d.wo = uniform_param({h, n + h}, bound, rng);
    d.wg = uniform_param({h, n + h}, bound, rng);
    d.bi = const_param({h}, 0.0);
    d.bf = const_param({h}, 1.0);
    d.bo = const_param({h}, 0.0);
    d.bg = const_param({h}, 0.0);
    return d;
}

}  // namespace

LstmParams LstmParams::init(size_t n, size_t h, Rng& rng) {
    LstmParams p;
    p.n = n;
    p.h = h;
    p.fwd = init_dir(n, h, rng);
    p.bwd = init_dir(n, h, rng);
    return p;
}

LstmDirVars lstm_dir_leaves(Tape& t, const LstmDirParams& p, bool trainable) {
    auto put = [&](const Tensor& param) {
        Tensor copy = param;
        copy.set_requires_grad(trainable);
        return t.leaf(std::move(copy));
    };
    LstmDirVars v;
    v.wi = put(p.wi);
    v.wf = put(p.wf);
    v.wo = put(p.wo);
    v.wg = put(p.wg);
    v.bi = put(p.bi);
    v.bf = put(p.bf);
    v.bo = put(p.bo);
    v.bg = put(p.bg);
    return v;
}

LstmVars lstm_leaves(Tape& t, const LstmParams& p, bool trainable) {
    return {lstm_dir_leaves(t, p.fwd, trainable), lstm_dir_leaves(t, p.bwd, trainable)};
}

LstmState lstm_step(Tape& t, const LstmDirVars& p, Var f_t, LstmState prev) {
    Var x = concat(t, f_t, prev.h);
    Var i = sigmoid(t, add(t, matvec(t, p.wi, x), p.bi));
    Var f = sigmoid(t, add(t, matvec(t, p.wf, x), p.bf));
    Var o = sigmoid(t, add(t, matvec(t, p.wo, x), p.bo));
    Var g = tanh(t, add(t, matvec(t, p.wg, x), p.bg));
    Var c = add(t, mul(t, f, prev.c), mul(t, i, g));
    Var h = mul(t, o, tanh(t, c));
    return {h, c};
}

BagRepresentation bilstm_pool(Tape& t, const LstmVars& p, Var F) {
    const Tensor& Fm = t.value(F);
    if (Fm.rank() != 2 || Fm.extent(0) == 0) {
        throw ContractError("bilstm_pool: need a nonempty m x n feature matrix");
    }
    size_t m = Fm.extent(0);
    size_t h = t.value(p.fwd.bi).numel();

    BagRepresentation rep;
    LstmState s{t.constant(Tensor({h})), t.constant(Tensor({h}))};
    for (size_t i = 0; i < m; ++i) {
        s = lstm_step(t, p.fwd, row(t, F, i), s);
        rep.trace.push_back(s);
    }
    LstmState b{t.constant(Tensor({h})), t.constant(Tensor({h}))};
    for (size_t i = m; i-- > 0;) {
        b = lstm_step(t, p.bwd, row(t, F, i), b);
    }
    rep.S = concat(t, s.h, b.h);
    return rep;
}

std::vector<Var> state_trace(Tape& t, const LstmDirVars& fwd, Var F, size_t h_dim) {
    const Tensor& Fm = t.value(F);
    if (Fm.rank() != 2) throw ContractError("state_trace: need an m x n feature matrix");
    std::vector<Var> hs;
    LstmState s{t.constant(Tensor({h_dim})), t.constant(Tensor({h_dim}))};
    for (size_t i = 0; i < Fm.extent(0); ++i) {
        s = lstm_step(t, fwd, row(t, F, i), s);
        hs.push_back(s.h);
    }
    return hs;
}

AttentionParams AttentionParams::init(size_t n, size_t d, bool gated, Rng& rng) {
    AttentionParams p;
    p.n = n;
    p.d = d;
    p.gated = gated;
    double vb = std::sqrt(6.0 / double(n + d));
    p.V = uniform_param({d, n}, vb, rng);
    p.w = uniform_param({d}, 1.0 / std::sqrt(double(d)), rng);
    if (gated) p.U = uniform_param({d, n}, vb, rng);
    return p;
}

AttentionVars attention_leaves(Tape& t, const AttentionParams& p, bool trainable) {
    auto put = [&](const Tensor& param) {
        Tensor copy = param;
        copy.set_requires_grad(trainable);
        return t.leaf(std::move(copy));
    };
    AttentionVars v;
    v.V = put(p.V);
    v.w = put(p.w);
    v.gated = p.gated;
    if (p.gated) v.U = put(p.U);
    return v;
}

AttentionOut attention_pool(Tape& t, const AttentionVars& p, Var F) {
    const Tensor& Fm = t.value(F);
    if (Fm.rank() != 2 || Fm.extent(0) == 0) {
        throw ContractError("attention_pool: need a nonempty m x n feature matrix");
    }
    Var A = tanh(t, matmul(t, F, transpose(t, p.V)));  // [m x d]
    if (p.gated) {
        A = mul(t, A, sigmoid(t, matmul(t, F, transpose(t, p.U))));
    }
    Var a = softmax(t, matvec(t, A, p.w));  // [m]
    Var S = matvec(t, transpose(t, F), a);  // [n]
    return {S, a};
}

Var mean_pool(Tape& t, Var F) { return mean_rows(t, F); }
Var max_pool(Tape& t, Var F) { return max_rows(t, F); }

}  // namespace milstm
