#include "milstm/mi_loss.hpp"

#include <cmath>

namespace milstm {

namespace {

Tensor kaiming_uniform(std::vector<size_t> shape, size_t fan_in, Rng& rng) {
    double bound = std::sqrt(6.0 / double(fan_in));
    Tensor t(std::move(shape));
    for (size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-bound, bound);
    t.set_requires_grad(true);
    return t;
}

Tensor zero_param(std::vector<size_t> shape) {
    Tensor t(std::move(shape));
    t.set_requires_grad(true);
    return t;
}

// [B x in] -> [B] scores
Var mlp_score(Tape& t, Var X, Var w1, Var b1, Var w2, Var b2) {
    Var h = relu(t, add_row_broadcast(t, matmul(t, X, w1), b1));
    Var z = add_row_broadcast(t, matmul(t, h, w2), b2);  // [B x 1]
    return reshape(t, z, {t.value(z).extent(0)});
}

// map [C x s x s] -> [cells x C]
Var map_cells(Tape& t, Var map) {
    const Tensor& M = t.value(map);
    if (M.rank() != 3) throw ContractError("mi: local map must be [C x s x s]");
    size_t c = M.extent(0), cells = M.extent(1) * M.extent(2);
    return transpose(t, reshape(t, map, {c, cells}));
}

void check_batch(size_t B, const std::vector<Var>& maps, const std::vector<size_t>& neg_perm) {
    if (B < 2) throw ContractError("mi: batch must hold at least 2 instances for negatives");
    if (maps.size() != B) throw ContractError("mi: need one local map per feature row");
    if (neg_perm.size() != B) throw ContractError("mi: negative pairing length mismatch");
}

}  // namespace

void MiWeights::validate() const {
    if (alpha < 0 || beta < 0 || gamma < 0) throw ContractError("mi weights must be non-negative");
}

MiHeads MiHeads::init(const MiConfig& cfg, Rng& rng) {
    MiHeads p;
    p.cfg = cfg;
    size_t flat = cfg.map_channels * cfg.map_side * cfg.map_side;
    size_t gin = cfg.feature_dim + flat;
    size_t lin = cfg.feature_dim + cfg.map_channels;
    size_t hid = cfg.hidden;
    p.g1w = kaiming_uniform({gin, hid}, gin, rng);
    p.g1b = zero_param({hid});
    p.g2w = kaiming_uniform({hid, 1}, hid, rng);
    p.g2b = zero_param({1});
    p.l1w = kaiming_uniform({lin, hid}, lin, rng);
    p.l1b = zero_param({hid});
    p.l2w = kaiming_uniform({hid, 1}, hid, rng);
    p.l2b = zero_param({1});
    p.d1w = kaiming_uniform({cfg.feature_dim, hid}, cfg.feature_dim, rng);
    p.d1b = zero_param({hid});
    p.d2w = kaiming_uniform({hid, 1}, hid, rng);
    p.d2b = zero_param({1});
    return p;
}

MiVars mi_leaves(Tape& t, const MiHeads& p, bool trainable) {
    auto put = [&](const Tensor& param) {
        Tensor copy = param;
        copy.set_requires_grad(trainable);
        return t.leaf(std::move(copy));
    };
    MiVars v;
    v.g1w = put(p.g1w);
    v.g1b = put(p.g1b);
    v.g2w = put(p.g2w);
    v.g2b = put(p.g2b);
    v.l1w = put(p.l1w);
    v.l1b = put(p.l1b);
    v.l2w = put(p.l2w);
    v.l2b = put(p.l2b);
    v.d1w = put(p.d1w);
    v.d1b = put(p.d1b);
    v.d2w = put(p.d2w);
    v.d2b = put(p.d2b);
    return v;
}

Var jsd_loss(Tape& t, Var t_pos, Var t_neg) {
    Var pos = mean_all(t, softplus(t, scale(t, t_pos, -1.0)));
    Var neg = mean_all(t, softplus(t, t_neg));
    return add(t, pos, neg);
}

Var mi_global(Tape& t, const MiVars& v, Var f_batch, const std::vector<Var>& maps,
              const std::vector<size_t>& neg_perm) {
    const Tensor& F = t.value(f_batch);
    size_t B = F.extent(0);
    check_batch(B, maps, neg_perm);

    std::vector<Var> flats;
    flats.reserve(B);
    for (Var m : maps) flats.push_back(reshape(t, m, {1, t.value(m).numel()}));
    Var M = concat_rows(t, flats);  // [B x flat]

    Var pos_in = concat_cols(t, f_batch, M);
    Var neg_in = concat_cols(t, f_batch, permute_rows(t, M, neg_perm));
    Var t_pos = mlp_score(t, pos_in, v.g1w, v.g1b, v.g2w, v.g2b);
    Var t_neg = mlp_score(t, neg_in, v.g1w, v.g1b, v.g2w, v.g2b);
    return jsd_loss(t, t_pos, t_neg);
}

Var mi_local(Tape& t, const MiVars& v, Var f_batch, const std::vector<Var>& maps,
             const std::vector<size_t>& neg_perm) {
    const Tensor& F = t.value(f_batch);
    size_t B = F.extent(0);
    check_batch(B, maps, neg_perm);

    std::vector<Var> pos_blocks, neg_blocks;
    pos_blocks.reserve(B);
    neg_blocks.reserve(B);
    for (size_t i = 0; i < B; ++i) {
        Var cells_i = map_cells(t, maps[i]);             // [cells x C]
        Var cells_n = map_cells(t, maps[neg_perm[i]]);
        size_t cells = t.value(cells_i).extent(0);
        Var f_rep = repeat_row(t, row(t, f_batch, i), cells);  // [cells x n]
        pos_blocks.push_back(concat_cols(t, f_rep, cells_i));
        neg_blocks.push_back(concat_cols(t, f_rep, cells_n));
    }
    Var t_pos = mlp_score(t, concat_rows(t, pos_blocks), v.l1w, v.l1b, v.l2w, v.l2b);
    Var t_neg = mlp_score(t, concat_rows(t, neg_blocks), v.l1w, v.l1b, v.l2w, v.l2b);
    return jsd_loss(t, t_pos, t_neg);  // means run over B*cells entries
}

Var mi_global(Tape& t, const MiVars& v, Var f_batch, const std::vector<Var>& maps, Rng& rng) {
    return mi_global(t, v, f_batch, maps, rng.derangement(t.value(f_batch).extent(0)));
}

Var mi_local(Tape& t, const MiVars& v, Var f_batch, const std::vector<Var>& maps, Rng& rng) {
    return mi_local(t, v, f_batch, maps, rng.derangement(t.value(f_batch).extent(0)));
}

PriorTerms prior_matching_with(Tape& t, const MiVars& v, Var f_batch, const Tensor& uniform) {
    const Tensor& F = t.value(f_batch);
    if (F.rank() != 2 || F.extent(0) == 0) throw ContractError("prior_matching: empty batch");
    if (!t.value(f_batch).same_shape(uniform)) {
        throw DimensionError("prior_matching: uniform sample shape mismatch");
    }
    Var z = sigmoid(t, f_batch);
    Var u = t.constant(uniform);

    Var logit_z = mlp_score(t, z, v.d1w, v.d1b, v.d2w, v.d2b);
    Var logit_u = mlp_score(t, u, v.d1w, v.d1b, v.d2w, v.d2b);
    // encoder term flows into f; the discriminator term sees the squashed
    // features through a gradient barrier so its updates touch D alone
    Var logit_z_det = mlp_score(t, detach(t, z), v.d1w, v.d1b, v.d2w, v.d2b);

    PriorTerms out;
    out.encoder = mean_all(t, softplus(t, scale(t, logit_z, -1.0)));
    Var real = mean_all(t, softplus(t, scale(t, logit_u, -1.0)));
    Var fake = mean_all(t, softplus(t, logit_z_det));
    out.discriminator = scale(t, add(t, real, fake), 0.5);
    return out;
}

PriorTerms prior_matching(Tape& t, const MiVars& v, Var f_batch, Rng& rng) {
    const Tensor& F = t.value(f_batch);
    Tensor u(F.shape());
    for (size_t i = 0; i < u.numel(); ++i) u[i] = rng.uniform();
    return prior_matching_with(t, v, f_batch, u);
}

Var mi_total(Tape& t, const MiWeights& w, Var global_loss, Var local_loss, Var prior_encoder) {
    w.validate();
    Var acc = t.constant(Tensor::scalar(0.0));
    if (w.alpha > 0) acc = add(t, acc, scale(t, global_loss, w.alpha));
    if (w.beta > 0) acc = add(t, acc, scale(t, local_loss, w.beta));
    if (w.gamma > 0) acc = add(t, acc, scale(t, prior_encoder, w.gamma));
    return acc;
}

}  // namespace milstm
