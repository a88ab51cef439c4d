#pragma once

#include <vector>

#include "milstm/rng.hpp"
#include "milstm/tape.hpp"

namespace milstm {

// one direction of the bag recurrence; weights act on [f_t; h]
struct LstmDirParams {
    Tensor wi, wf, wo, wg;  // [h x (n+h)]
    Tensor bi, bf, bo, bg;  // [h]; forget bias starts at 1.0
};

struct LstmParams {
    size_t n = 500, h = 500;
    LstmDirParams fwd, bwd;

    static LstmParams init(size_t n, size_t h, Rng& rng);

    template <class Fn>
    void visit(Fn&& fn) {
        auto dir = [&](const char* tag, LstmDirParams& d) {
            std::string base = std::string("lstm.") + tag + ".";
            fn((base + "wi").c_str(), d.wi);
            fn((base + "wf").c_str(), d.wf);
            fn((base + "wo").c_str(), d.wo);
            fn((base + "wg").c_str(), d.wg);
            fn((base + "bi").c_str(), d.bi);
            fn((base + "bf").c_str(), d.bf);
            fn((base + "bo").c_str(), d.bo);
            fn((base + "bg").c_str(), d.bg);
        };
        dir("fwd", fwd);
        dir("bwd", bwd);
    }
};

struct LstmDirVars {
    Var wi, wf, wo, wg, bi, bf, bo, bg;
};
struct LstmVars {
    LstmDirVars fwd, bwd;
};

LstmDirVars lstm_dir_leaves(Tape& t, const LstmDirParams& p, bool trainable);
LstmVars lstm_leaves(Tape& t, const LstmParams& p, bool trainable);

struct LstmState {
    Var h, c;
};

LstmState lstm_step(Tape& t, const LstmDirVars& p, Var f_t, LstmState prev);

struct BagRepresentation {
    Var S;                         // [2h], concat of final fwd/bwd hidden states
    std::vector<LstmState> trace;  // forward direction, one entry per instance
};

BagRepresentation bilstm_pool(Tape& t, const LstmVars& p, Var F);

// forward-direction hidden vectors in observation order
std::vector<Var> state_trace(Tape& t, const LstmDirVars& fwd, Var F, size_t h_dim);

struct AttentionParams {
    size_t n = 500, d = 128;
    bool gated = false;
    Tensor V, w, U;  // V,U: [d x n]; w: [d]; U used only when gated

    static AttentionParams init(size_t n, size_t d, bool gated, Rng& rng);

    template <class Fn>
    void visit(Fn&& fn) {
        fn("attn.V", V);
        fn("attn.w", w);
        if (gated) fn("attn.U", U);
    }
};

struct AttentionVars {
    Var V, w, U;
    bool gated = false;
};

AttentionVars attention_leaves(Tape& t, const AttentionParams& p, bool trainable);

struct AttentionOut {
    Var S;  // [n]
    Var a;  // [m], nonnegative, sums to 1
};

AttentionOut attention_pool(Tape& t, const AttentionVars& p, Var F);

Var mean_pool(Tape& t, Var F);
Var max_pool(Tape& t, Var F);

}  // namespace milstm
