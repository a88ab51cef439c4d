#pragma once

#include <vector>

#include "milstm/rng.hpp"
#include "milstm/tape.hpp"

namespace milstm {

struct MiWeights {
    double alpha = 0.5;  // global term
    double beta = 1.0;   // local term
    double gamma = 0.1;  // prior matching
    bool enabled() const { return alpha > 0.0 || beta > 0.0 || gamma > 0.0; }
    void validate() const;
};

struct MiConfig {
    size_t feature_dim = 500;   // n
    size_t map_channels = 50;   // conv2 channel count
    size_t map_side = 4;        // spatial side of the local grid
    size_t hidden = 256;        // discriminator MLP width
};

// T_g scores (f, whole map); T_l scores (f, one map cell); D emits a prior logit on f
struct MiHeads {
    MiConfig cfg;
    Tensor g1w, g1b, g2w, g2b;
    Tensor l1w, l1b, l2w, l2b;
    Tensor d1w, d1b, d2w, d2b;

    static MiHeads init(const MiConfig& cfg, Rng& rng);

    template <class Fn>
    void visit(Fn&& fn) {
        fn("mi.g1.w", g1w);
        fn("mi.g1.b", g1b);
        fn("mi.g2.w", g2w);
        fn("mi.g2.b", g2b);
        fn("mi.l1.w", l1w);
        fn("mi.l1.b", l1b);
        fn("mi.l2.w", l2w);
        fn("mi.l2.b", l2b);
        fn("mi.d1.w", d1w);
        fn("mi.d1.b", d1b);
        fn("mi.d2.w", d2w);
        fn("mi.d2.b", d2b);
    }

    // discriminator (D) parameters get their own update stream
    template <class Fn>
    void visit_disc(Fn&& fn) {
        fn("mi.d1.w", d1w);
        fn("mi.d1.b", d1b);
        fn("mi.d2.w", d2w);
        fn("mi.d2.b", d2b);
    }
};

struct MiVars {
    Var g1w, g1b, g2w, g2b;
    Var l1w, l1b, l2w, l2b;
    Var d1w, d1b, d2w, d2b;
};

MiVars mi_leaves(Tape& t, const MiHeads& p, bool trainable);

// mean softplus(-t_pos) + mean softplus(t_neg); >= 0, equals 2 ln 2 at T == 0
Var jsd_loss(Tape& t, Var t_pos, Var t_neg);

// f_batch: [B x n]; maps: B local grids [C x s x s]; neg_perm: derangement of 0..B-1
Var mi_global(Tape& t, const MiVars& v, Var f_batch, const std::vector<Var>& maps,
              const std::vector<size_t>& neg_perm);
Var mi_local(Tape& t, const MiVars& v, Var f_batch, const std::vector<Var>& maps,
             const std::vector<size_t>& neg_perm);
Var mi_global(Tape& t, const MiVars& v, Var f_batch, const std::vector<Var>& maps, Rng& rng);
Var mi_local(Tape& t, const MiVars& v, Var f_batch, const std::vector<Var>& maps, Rng& rng);

struct PriorTerms {
    Var encoder;        // trains the encoder to push sigmoid(f) toward the prior
    Var discriminator;  // trains D only
};

PriorTerms prior_matching_with(Tape& t, const MiVars& v, Var f_batch, const Tensor& uniform);
PriorTerms prior_matching(Tape& t, const MiVars& v, Var f_batch, Rng& rng);

// alpha * global + beta * local + gamma * prior_encoder
Var mi_total(Tape& t, const MiWeights& w, Var global_loss, Var local_loss, Var prior_encoder);

}  // namespace milstm
