#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "milstm/mi_loss.hpp"

using namespace milstm;

namespace {

constexpr double kLn2 = 0.6931471805599453;

struct Toy {
    MiConfig cfg;
    Tensor F;                    // [B x n]
    std::vector<Tensor> maps;    // B of [C x s x s]

    Toy(size_t B, size_t n, size_t C, size_t s, uint64_t seed) {
        cfg = MiConfig{.feature_dim = n, .map_channels = C, .map_side = s, .hidden = 8};
        Rng rng(seed);
        F = Tensor({B, n});
        for (size_t i = 0; i < F.numel(); ++i) F[i] = rng.uniform(-1, 1);
        for (size_t b = 0; b < B; ++b) {
            Tensor m({C, s, s});
            for (size_t i = 0; i < m.numel(); ++i) m[i] = rng.uniform(-1, 1);
            maps.push_back(std::move(m));
        }
    }

    std::vector<Var> map_vars(Tape& t) const {
        std::vector<Var> vs;
        for (const Tensor& m : maps) vs.push_back(t.constant(m));
        return vs;
    }
};

MiHeads zero_heads(const MiConfig& cfg) {
    Rng rng(1);
    MiHeads h = MiHeads::init(cfg, rng);
    h.visit([](const char*, Tensor& w) {
        for (size_t i = 0; i < w.numel(); ++i) w[i] = 0.0;
    });
    return h;
}

double softplus_ref(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

std::vector<size_t> rotate_perm(size_t B) {
    std::vector<size_t> p(B);
    for (size_t i = 0; i < B; ++i) p[i] = (i + 1) % B;
    return p;
}

}  // namespace

TEST_CASE("uninformative heads give exactly 2 ln 2") {
    Toy toy(4, 6, 5, 2, 11);
    MiHeads h = zero_heads(toy.cfg);
    Tape t;
    MiVars v = mi_leaves(t, h, false);
    Var F = t.constant(toy.F);
    auto maps = toy.map_vars(t);
    auto perm = rotate_perm(4);
    CHECK(t.value(mi_global(t, v, F, maps, perm))[0] == doctest::Approx(2 * kLn2).epsilon(1e-15));
    CHECK(t.value(mi_local(t, v, F, maps, perm))[0] == doctest::Approx(2 * kLn2).epsilon(1e-15));
}

TEST_CASE("jsd estimator: separation limit and non-negativity") {
    Tape t;
    Var pos = t.constant(Tensor::full({4}, 40.0));
    Var neg = t.constant(Tensor::full({4}, -40.0));
    CHECK(t.value(jsd_loss(t, pos, neg))[0] < 1e-15);

    Rng rng(3);
    for (int rep = 0; rep < 50; ++rep) {
        Tensor a({5}), b({5});
        for (size_t i = 0; i < 5; ++i) {
            a[i] = rng.uniform(-10, 10);
            b[i] = rng.uniform(-10, 10);
        }
        CHECK(t.value(jsd_loss(t, t.constant(a), t.constant(b)))[0] >= 0.0);
    }
}

TEST_CASE("batch of one is a contract error") {
    Toy toy(1, 4, 3, 2, 5);
    Rng rng(7);
    MiHeads h = MiHeads::init(toy.cfg, rng);
    Tape t;
    MiVars v = mi_leaves(t, h, false);
    auto maps = toy.map_vars(t);
    CHECK_THROWS_AS(mi_global(t, v, t.constant(toy.F), maps, std::vector<size_t>{0}),
                    ContractError);
}

TEST_CASE("1x1 map: local estimator equals global under shared weights") {
    Toy toy(5, 6, 5, 1, 13);
    Rng rng(17);
    MiHeads h = MiHeads::init(toy.cfg, rng);
    // with s=1 both heads take n + C inputs; share the weights
    h.g1w = h.l1w;
    h.g1b = h.l1b;
    h.g2w = h.l2w;
    h.g2b = h.l2b;
    Tape t;
    MiVars v = mi_leaves(t, h, false);
    Var F = t.constant(toy.F);
    auto maps = toy.map_vars(t);
    auto perm = rotate_perm(5);
    double g = t.value(mi_global(t, v, F, maps, perm))[0];
    double l = t.value(mi_local(t, v, F, maps, perm))[0];
    CHECK(g == doctest::Approx(l).epsilon(1e-15));
}

TEST_CASE("local loss matches an explicit per-cell loop oracle") {
    size_t B = 4, n = 5, C = 3, s = 2, hid = 8;
    Toy toy(B, n, C, s, 19);
    toy.cfg.hidden = hid;
    Rng rng(23);
    MiHeads h = MiHeads::init(toy.cfg, rng);
    auto perm = rotate_perm(B);

    Tape t;
    MiVars v = mi_leaves(t, h, false);
    double got = t.value(mi_local(t, v, t.constant(toy.F), toy.map_vars(t), perm))[0];

    // oracle: plain loops, scalar MLP
    auto score = [&](const std::vector<double>& x) {
        std::vector<double> hidv(hid, 0.0);
        size_t in = x.size();
        for (size_t j = 0; j < hid; ++j) {
            double z = h.l1b[j];
            for (size_t k = 0; k < in; ++k) z += h.l1w[k * hid + j] * x[k];
            hidv[j] = std::max(z, 0.0);
        }
        double z = h.l2b[0];
        for (size_t j = 0; j < hid; ++j) z += h.l2w[j] * hidv[j];
        return z;
    };
    auto cell_vec = [&](size_t b, size_t cell) {
        std::vector<double> x;
        for (size_t k = 0; k < n; ++k) x.push_back(toy.F.at(b, k));
        for (size_t c = 0; c < C; ++c) x.push_back(toy.maps[b][c * s * s + cell]);
        return x;
    };
    double pos = 0, neg = 0;
    size_t cells = s * s;
    for (size_t b = 0; b < B; ++b) {
        for (size_t cell = 0; cell < cells; ++cell) {
            pos += softplus_ref(-score(cell_vec(b, cell)));
            std::vector<double> x;
            for (size_t k = 0; k < n; ++k) x.push_back(toy.F.at(b, k));
            for (size_t c = 0; c < C; ++c) x.push_back(toy.maps[perm[b]][c * s * s + cell]);
            neg += softplus_ref(score(x));
        }
    }
    double want = pos / double(B * cells) + neg / double(B * cells);
    CHECK(got == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("discriminator training drives the bound down on a fixed batch") {
    Toy toy(8, 5, 4, 2, 29);
    Rng rng(31);
    MiHeads h = MiHeads::init(toy.cfg, rng);
    auto perm = rotate_perm(8);

    double first = 0, last = 0;
    double lr = 0.05;
    for (int step = 0; step < 200; ++step) {
        Tape t;
        MiVars v = mi_leaves(t, h, true);
        Var loss = add(t, mi_global(t, v, t.constant(toy.F), toy.map_vars(t), perm),
                       mi_local(t, v, t.constant(toy.F), toy.map_vars(t), perm));
        double val = t.value(loss)[0];
        if (step == 0) first = val;
        if (step == 199) last = val;
        t.backward(loss);
        std::vector<std::pair<Var, Tensor*>> upd = {
            {v.g1w, &h.g1w}, {v.g1b, &h.g1b}, {v.g2w, &h.g2w}, {v.g2b, &h.g2b},
            {v.l1w, &h.l1w}, {v.l1b, &h.l1b}, {v.l2w, &h.l2w}, {v.l2b, &h.l2b}};
        for (auto& [var, param] : upd) {
            const Tensor& g = t.grad(var);
            for (size_t i = 0; i < param->numel(); ++i) (*param)[i] -= lr * g[i];
        }
    }
    MESSAGE("bound loss: ", first, " -> ", last);
    CHECK(last < first - 0.05);
}

TEST_CASE("prior matching: uninformative D gives ln 2 on both terms") {
    Toy toy(6, 5, 3, 2, 37);
    MiHeads h = zero_heads(toy.cfg);
    Tape t;
    MiVars v = mi_leaves(t, h, false);
    Rng rng(39);
    PriorTerms pt = prior_matching(t, v, t.constant(toy.F), rng);
    CHECK(t.value(pt.encoder)[0] == doctest::Approx(kLn2).epsilon(1e-15));
    CHECK(t.value(pt.discriminator)[0] == doctest::Approx(kLn2).epsilon(1e-15));
}

TEST_CASE("prior matching: identical real/fake samples floor the D loss at ln 2") {
    size_t B = 16, n = 4;
    MiConfig cfg{.feature_dim = n, .map_channels = 3, .map_side = 2, .hidden = 8};
    Rng rng(41);
    MiHeads h = MiHeads::init(cfg, rng);

    Tensor u({B, n});
    for (size_t i = 0; i < u.numel(); ++i) u[i] = rng.uniform(0.01, 0.99);
    Tensor f(u.shape());
    for (size_t i = 0; i < u.numel(); ++i) f[i] = std::log(u[i] / (1.0 - u[i]));  // sigmoid(f)=u

    // whatever D does, softplus(x) + softplus(-x) >= 2 ln 2 per sample
    for (int step = 0; step < 100; ++step) {
        Tape t;
        MiVars v = mi_leaves(t, h, true);
        PriorTerms pt = prior_matching_with(t, v, t.constant(f), u);
        CHECK(t.value(pt.discriminator)[0] >= kLn2 - 1e-9);
        t.backward(pt.discriminator);
        std::vector<std::pair<Var, Tensor*>> upd = {
            {v.d1w, &h.d1w}, {v.d1b, &h.d1b}, {v.d2w, &h.d2w}, {v.d2b, &h.d2b}};
        for (auto& [var, param] : upd) {
            const Tensor& g = t.grad(var);
            for (size_t i = 0; i < param->numel(); ++i) (*param)[i] -= 0.05 * g[i];
        }
    }
}

TEST_CASE("prior matching: squashed-feature marginal approaches uniform (KS decreases)") {
    size_t B = 32, n = 4;
    MiConfig cfg{.feature_dim = n, .map_channels = 3, .map_side = 2, .hidden = 16};
    Rng rng(43);
    MiHeads h = MiHeads::init(cfg, rng);

    // start with a strongly non-uniform squashed marginal
    Tensor f({B, n});
    for (size_t i = 0; i < f.numel(); ++i) f[i] = 3.0 + rng.uniform(0.0, 0.5);

    auto ks_vs_uniform = [&](const Tensor& feat) {
        std::vector<double> z;
        for (size_t i = 0; i < feat.numel(); ++i) z.push_back(1.0 / (1.0 + std::exp(-feat[i])));
        std::sort(z.begin(), z.end());
        double worst = 0;
        for (size_t i = 0; i < z.size(); ++i) {
            double lo = double(i) / z.size(), hi = double(i + 1) / z.size();
            worst = std::max({worst, std::abs(z[i] - lo), std::abs(z[i] - hi)});
        }
        return worst;
    };

    double before = ks_vs_uniform(f);
    for (int step = 0; step < 300; ++step) {
        Tape t;
        MiVars v = mi_leaves(t, h, true);
        Tensor fv = f;
        fv.set_requires_grad(true);
        Var fvar = t.leaf(fv);
        PriorTerms pt = prior_matching(t, v, fvar, rng);

        t.backward(pt.encoder);
        const Tensor& gf = t.grad(fvar);
        for (size_t i = 0; i < f.numel(); ++i) f[i] -= 0.5 * gf[i];

        t.backward(pt.discriminator);
        std::vector<std::pair<Var, Tensor*>> upd = {
            {v.d1w, &h.d1w}, {v.d1b, &h.d1b}, {v.d2w, &h.d2w}, {v.d2b, &h.d2b}};
        for (auto& [var, param] : upd) {
            const Tensor& g = t.grad(var);
            for (size_t i = 0; i < param->numel(); ++i) (*param)[i] -= 0.1 * g[i];
        }
    }
    double after = ks_vs_uniform(f);
    MESSAGE("KS vs uniform: ", before, " -> ", after);
    CHECK(after < before);
}

TEST_CASE("mi_total: selection and linearity") {
    Toy toy(4, 5, 4, 2, 47);
    Rng rng(53);
    MiHeads h = MiHeads::init(toy.cfg, rng);
    auto perm = rotate_perm(4);
    Tape t;
    MiVars v = mi_leaves(t, h, false);
    Var F = t.constant(toy.F);
    auto maps = toy.map_vars(t);
    Var g = mi_global(t, v, F, maps, perm);
    Var l = mi_local(t, v, F, maps, perm);
    Rng prng(55);
    Var pe = prior_matching(t, v, F, prng).encoder;

    double gv = t.value(g)[0], lv = t.value(l)[0], pv = t.value(pe)[0];

    Var only_g = mi_total(t, MiWeights{1, 0, 0}, g, l, pe);
    CHECK(t.value(only_g)[0] == doctest::Approx(gv).epsilon(1e-15));

    Var t1 = mi_total(t, MiWeights{0.5, 1.0, 0.1}, g, l, pe);
    Var t2 = mi_total(t, MiWeights{1.0, 1.0, 0.1}, g, l, pe);
    CHECK(t.value(t2)[0] - t.value(t1)[0] == doctest::Approx(0.5 * gv).epsilon(1e-12));
    CHECK(t.value(t1)[0] == doctest::Approx(0.5 * gv + lv + 0.1 * pv).epsilon(1e-12));

    Var zero = mi_total(t, MiWeights{0, 0, 0}, g, l, pe);
    CHECK(t.value(zero)[0] == 0.0);

    MiWeights bad{-1, 0, 0};
    CHECK_THROWS_AS(bad.validate(), ContractError);
}

TEST_CASE("discriminator heads pass grad_check") {
    Toy toy(3, 4, 3, 2, 59);
    Rng rng(61);
    MiHeads h = MiHeads::init(toy.cfg, rng);
    auto perm = rotate_perm(3);

    auto full_loss = [&](Tape& t, MiVars v, Var F) {
        auto maps = toy.map_vars(t);
        Var g = mi_global(t, v, F, maps, perm);
        Var l = mi_local(t, v, F, maps, perm);
        Tensor u({3, 4});
        Rng urng(63);
        for (size_t i = 0; i < u.numel(); ++i) u[i] = urng.uniform();
        Var pe = prior_matching_with(t, v, F, u).encoder;
        return mi_total(t, MiWeights{0.5, 1.0, 0.1}, g, l, pe);
    };

    SUBCASE("w.r.t. features") {
        double err = grad_check(
            [&](Tape& t, Var F) { return full_loss(t, mi_leaves(t, h, false), F); }, toy.F, 1e-5);
        CHECK(err < 1e-4);
    }
    SUBCASE("w.r.t. one map") {
        double err = grad_check(
            [&](Tape& t, Var m0) {
                MiVars v = mi_leaves(t, h, false);
                auto maps = toy.map_vars(t);
                maps[0] = m0;
                Var g = mi_global(t, v, t.constant(toy.F), maps, perm);
                Var l = mi_local(t, v, t.constant(toy.F), maps, perm);
                return add(t, g, l);
            },
            toy.maps[0], 1e-5);
        CHECK(err < 1e-4);
    }
    SUBCASE("w.r.t. head weights") {
        auto probe = [&](Var MiVars::* slot, Tensor MiHeads::* field) {
            return grad_check(
                [&, slot](Tape& t, Var w) {
                    MiVars v = mi_leaves(t, h, false);
                    v.*slot = w;
                    return full_loss(t, v, t.constant(toy.F));
                },
                h.*field, 1e-5);
        };
        CHECK(probe(&MiVars::g1w, &MiHeads::g1w) < 1e-4);
        CHECK(probe(&MiVars::l1w, &MiHeads::l1w) < 1e-4);
        CHECK(probe(&MiVars::l2b, &MiHeads::l2b) < 1e-4);
        CHECK(probe(&MiVars::d1w, &MiHeads::d1w) < 1e-4);
    }
}
