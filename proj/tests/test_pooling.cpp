#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "milstm/pooling.hpp"

using namespace milstm;

namespace {

Tensor random_matrix(size_t m, size_t n, Rng& rng) {
    Tensor t({m, n});
    for (size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-1.0, 1.0);
    return t;
}

double sigmoid_ref(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// straight scalar-loop restatement of the gated recurrence
void lstm_step_ref(const LstmDirParams& p, const std::vector<double>& f,
                   const std::vector<double>& h, const std::vector<double>& c,
                   std::vector<double>& h_out, std::vector<double>& c_out) {
    size_t hd = p.bi.numel();
    size_t nin = f.size() + h.size();
    std::vector<double> x(f);
    x.insert(x.end(), h.begin(), h.end());
    h_out.resize(hd);
    c_out.resize(hd);
    for (size_t j = 0; j < hd; ++j) {
        double zi = p.bi[j], zf = p.bf[j], zo = p.bo[j], zg = p.bg[j];
        for (size_t k = 0; k < nin; ++k) {
            zi += p.wi[j * nin + k] * x[k];
            zf += p.wf[j * nin + k] * x[k];
            zo += p.wo[j * nin + k] * x[k];
            zg += p.wg[j * nin + k] * x[k];
        }
        double i = sigmoid_ref(zi), fg = sigmoid_ref(zf), o = sigmoid_ref(zo), g = std::tanh(zg);
        c_out[j] = fg * c[j] + i * g;
        h_out[j] = o * std::tanh(c_out[j]);
    }
}

}  // namespace

TEST_CASE("lstm_step: zero input, zero state, zero weights, forget bias 1 -> zeros") {
    size_t n = 4, h = 3;
    LstmDirParams p;
    p.wi = Tensor({h, n + h});
    p.wf = Tensor({h, n + h});
    p.wo = Tensor({h, n + h});
    p.wg = Tensor({h, n + h});
    p.bi = Tensor({h});
    p.bf = Tensor::full({h}, 1.0);
    p.bo = Tensor({h});
    p.bg = Tensor({h});

    Tape t;
    LstmDirVars v = lstm_dir_leaves(t, p, false);
    LstmState s{t.constant(Tensor({h})), t.constant(Tensor({h}))};
    LstmState out = lstm_step(t, v, t.constant(Tensor({n})), s);
    for (size_t j = 0; j < h; ++j) {
        CHECK(t.value(out.c)[j] == 0.0);
        CHECK(t.value(out.h)[j] == 0.0);
    }
}

TEST_CASE("lstm_step: saturated gates reduce to tanh(tanh(Wg x + bg))") {
    size_t n = 3, h = 4;
    Rng rng(2);
    LstmDirParams p;
    p.wi = Tensor({h, n + h});
    p.wf = Tensor({h, n + h});
    p.wo = Tensor({h, n + h});
    p.wg = random_matrix(h, n + h, rng);
    p.bi = Tensor::full({h}, 50.0);   // i -> 1
    p.bf = Tensor::full({h}, -50.0);  // f -> 0
    p.bo = Tensor::full({h}, 50.0);   // o -> 1
    p.bg = Tensor({h});

    Tensor f({n});
    for (size_t i = 0; i < n; ++i) f[i] = rng.uniform(-1, 1);
    Tensor h0({h}), c0({h});
    for (size_t i = 0; i < h; ++i) {
        h0[i] = rng.uniform(-1, 1);
        c0[i] = rng.uniform(-1, 1);
    }

    Tape t;
    LstmDirVars v = lstm_dir_leaves(t, p, false);
    LstmState out = lstm_step(t, v, t.constant(f), {t.constant(h0), t.constant(c0)});
    for (size_t j = 0; j < h; ++j) {
        double z = 0.0;
        for (size_t k = 0; k < n; ++k) z += p.wg[j * (n + h) + k] * f[k];
        for (size_t k = 0; k < h; ++k) z += p.wg[j * (n + h) + n + k] * h0[k];
        CHECK(t.value(out.h)[j] == doctest::Approx(std::tanh(std::tanh(z))).epsilon(1e-9));
    }
}

TEST_CASE("lstm_step matches the scalar-loop oracle to 1e-12") {
    size_t n = 5, h = 4;
    Rng rng(7);
    LstmParams p = LstmParams::init(n, h, rng);
    for (int rep = 0; rep < 20; ++rep) {
        std::vector<double> f(n), h0(h), c0(h);
        for (auto& v : f) v = rng.uniform(-2, 2);
        for (auto& v : h0) v = rng.uniform(-1, 1);
        for (auto& v : c0) v = rng.uniform(-1, 1);

        Tape t;
        LstmDirVars v = lstm_dir_leaves(t, p.fwd, false);
        Tensor ft({n}, f), ht({h}, h0), ct({h}, c0);
        LstmState out = lstm_step(t, v, t.constant(ft), {t.constant(ht), t.constant(ct)});

        std::vector<double> h_ref, c_ref;
        lstm_step_ref(p.fwd, f, h0, c0, h_ref, c_ref);
        for (size_t j = 0; j < h; ++j) {
            CHECK(t.value(out.h)[j] == doctest::Approx(h_ref[j]).epsilon(1e-12));
            CHECK(t.value(out.c)[j] == doctest::Approx(c_ref[j]).epsilon(1e-12));
        }
    }
}

TEST_CASE("lstm_step: shape mismatch raises") {
    Rng rng(3);
    LstmParams p = LstmParams::init(4, 3, rng);
    Tape t;
    LstmDirVars v = lstm_dir_leaves(t, p.fwd, false);
    LstmState s{t.constant(Tensor({3})), t.constant(Tensor({3}))};
    CHECK_THROWS_AS(lstm_step(t, v, t.constant(Tensor({7})), s), DimensionError);
}

TEST_CASE("bilstm_pool: m=1 gives S = concat of two single-step hiddens") {
    size_t n = 5, h = 3;
    Rng rng(11);
    LstmParams p = LstmParams::init(n, h, rng);
    Tensor F = random_matrix(1, n, rng);

    Tape t;
    LstmVars v = lstm_leaves(t, p, false);
    BagRepresentation rep = bilstm_pool(t, v, t.constant(F));
    REQUIRE(rep.trace.size() == 1);
    REQUIRE(t.value(rep.S).numel() == 2 * h);

    LstmState zf{t.constant(Tensor({h})), t.constant(Tensor({h}))};
    LstmState fstep = lstm_step(t, v.fwd, row(t, t.constant(F), 0), zf);
    LstmState zb{t.constant(Tensor({h})), t.constant(Tensor({h}))};
    LstmState bstep = lstm_step(t, v.bwd, row(t, t.constant(F), 0), zb);
    for (size_t j = 0; j < h; ++j) {
        CHECK(t.value(rep.S)[j] == t.value(fstep.h)[j]);
        CHECK(t.value(rep.S)[h + j] == t.value(bstep.h)[j]);
    }
}

TEST_CASE("bilstm_pool: trace length equals cardinality; S width is constant in m") {
    size_t n = 4, h = 3;
    Rng rng(13);
    LstmParams p = LstmParams::init(n, h, rng);
    for (size_t m : {1u, 3u, 10u, 17u}) {
        Tape t;
        LstmVars v = lstm_leaves(t, p, false);
        BagRepresentation rep = bilstm_pool(t, v, t.constant(random_matrix(m, n, rng)));
        CHECK(rep.trace.size() == m);
        CHECK(t.value(rep.S).numel() == 2 * h);
    }
}

TEST_CASE("bilstm_pool equals an unrolled reference for m <= 5") {
    size_t n = 4, h = 3;
    Rng rng(17);
    LstmParams p = LstmParams::init(n, h, rng);
    for (size_t m = 1; m <= 5; ++m) {
        Tensor F = random_matrix(m, n, rng);
        Tape t;
        LstmVars v = lstm_leaves(t, p, false);
        BagRepresentation rep = bilstm_pool(t, v, t.constant(F));

        // unrolled oracle via the scalar-loop step reference
        std::vector<double> hf(h, 0.0), cf(h, 0.0);
        for (size_t i = 0; i < m; ++i) {
            std::vector<double> fi(F.data() + i * n, F.data() + (i + 1) * n);
            std::vector<double> h2, c2;
            lstm_step_ref(p.fwd, fi, hf, cf, h2, c2);
            hf = h2;
            cf = c2;
            for (size_t j = 0; j < h; ++j)
                CHECK(t.value(rep.trace[i].h)[j] == doctest::Approx(hf[j]).epsilon(1e-12));
        }
        std::vector<double> hb(h, 0.0), cb(h, 0.0);
        for (size_t i = m; i-- > 0;) {
            std::vector<double> fi(F.data() + i * n, F.data() + (i + 1) * n);
            std::vector<double> h2, c2;
            lstm_step_ref(p.bwd, fi, hb, cb, h2, c2);
            hb = h2;
            cb = c2;
        }
        for (size_t j = 0; j < h; ++j) {
            CHECK(t.value(rep.S)[j] == doctest::Approx(hf[j]).epsilon(1e-12));
            CHECK(t.value(rep.S)[h + j] == doctest::Approx(hb[j]).epsilon(1e-12));
        }
    }
}

TEST_CASE("state_trace: deterministic and equal to prefix pooling") {
    size_t n = 4, h = 3, m = 6;
    Rng rng(19);
    LstmParams p = LstmParams::init(n, h, rng);
    Tensor F = random_matrix(m, n, rng);

    Tape t;
    LstmVars v = lstm_leaves(t, p, false);
    auto tr1 = state_trace(t, v.fwd, t.constant(F), h);
    auto tr2 = state_trace(t, v.fwd, t.constant(F), h);
    REQUIRE(tr1.size() == m);
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < h; ++j) CHECK(t.value(tr1[i])[j] == t.value(tr2[i])[j]);

    // trace[t] equals the forward hidden of pooling the prefix F[0..t]
    for (size_t take = 1; take <= m; ++take) {
        Tensor prefix({take, n});
        std::copy(F.data(), F.data() + take * n, prefix.data());
        BagRepresentation rep = bilstm_pool(t, v, t.constant(prefix));
        for (size_t j = 0; j < h; ++j)
            CHECK(t.value(rep.trace[take - 1].h)[j] == t.value(tr1[take - 1])[j]);
    }
}

TEST_CASE("attention_pool: symmetry, singleton, normalization") {
    size_t n = 5, d = 4;
    Rng rng(23);
    for (bool gated : {false, true}) {
        AttentionParams p = AttentionParams::init(n, d, gated, rng);
        Tape t;
        AttentionVars v = attention_leaves(t, p, false);

        // identical rows: uniform weights, S equals the common row
        Tensor F({3, n});
        for (size_t i = 0; i < 3; ++i)
            for (size_t j = 0; j < n; ++j) F.at(i, j) = 0.1 * double(j) - 0.2;
        AttentionOut out = attention_pool(t, v, t.constant(F));
        for (size_t i = 0; i < 3; ++i) CHECK(t.value(out.a)[i] == doctest::Approx(1.0 / 3));
        for (size_t j = 0; j < n; ++j)
            CHECK(t.value(out.S)[j] == doctest::Approx(F.at(0, j)).epsilon(1e-12));

        // m=1
        AttentionOut one = attention_pool(t, v, t.constant(random_matrix(1, n, rng)));
        CHECK(t.value(one.a)[0] == doctest::Approx(1.0));

        // softmax sums to 1 across random sweeps
        for (int rep = 0; rep < 50; ++rep) {
            size_t m = 1 + rng.index(8);
            AttentionOut o = attention_pool(t, v, t.constant(random_matrix(m, n, rng)));
            double sum = 0;
            for (size_t i = 0; i < m; ++i) {
                double ai = t.value(o.a)[i];
                CHECK(ai >= 0.0);
                sum += ai;
            }
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
}

TEST_CASE("mean/max pooling: fixed cases and permutation invariance") {
    Tape t;
    Tensor F({2, 2}, {0, 2, 2, 0});
    const Tensor& mean = t.value(mean_pool(t, t.constant(F)));
    CHECK(mean[0] == 1.0);
    CHECK(mean[1] == 1.0);
    const Tensor& mx = t.value(max_pool(t, t.constant(F)));
    CHECK(mx[0] == 2.0);
    CHECK(mx[1] == 2.0);

    Tensor same({3, 2}, {5, -1, 5, -1, 5, -1});
    const Tensor& meq = t.value(mean_pool(t, t.constant(same)));
    CHECK(meq[0] == 5.0);
    CHECK(meq[1] == -1.0);

    Rng rng(31);
    size_t n = 6;
    AttentionParams ap = AttentionParams::init(n, 4, false, rng);
    AttentionVars av = attention_leaves(t, ap, false);
    for (int rep = 0; rep < 100; ++rep) {
        size_t m = 2 + rng.index(7);
        Tensor A = random_matrix(m, n, rng);
        auto perm = rng.permutation(m);
        Var FA = t.constant(A);
        Var FP = permute_rows(t, FA, perm);

        const Tensor& m1 = t.value(mean_pool(t, FA));
        const Tensor& m2 = t.value(mean_pool(t, FP));
        const Tensor& x1 = t.value(max_pool(t, FA));
        const Tensor& x2 = t.value(max_pool(t, FP));
        AttentionOut a1 = attention_pool(t, av, FA);
        AttentionOut a2 = attention_pool(t, av, FP);
        for (size_t j = 0; j < n; ++j) {
            CHECK(m1[j] == m2[j]);  // bit-level
            CHECK(x1[j] == x2[j]);
            CHECK(t.value(a1.S)[j] == doctest::Approx(t.value(a2.S)[j]).epsilon(1e-12));
        }
    }
}

TEST_CASE("pooling heads pass grad_check composed with a scalar head") {
    size_t n = 4, h = 3, d = 3, m = 3;
    Rng rng(37);
    Tensor F = random_matrix(m, n, rng);

    SUBCASE("bilstm w.r.t. features") {
        LstmParams p = LstmParams::init(n, h, rng);
        double err = grad_check(
            [&](Tape& t, Var f) {
                LstmVars v = lstm_leaves(t, p, false);
                return sum_all(t, tanh(t, bilstm_pool(t, v, f).S));
            },
            F, 1e-5);
        CHECK(err < 1e-4);
    }
    SUBCASE("bilstm w.r.t. a gate weight and forget bias") {
        LstmParams p = LstmParams::init(n, h, rng);
        double err = grad_check(
            [&](Tape& t, Var w) {
                LstmVars v = lstm_leaves(t, p, false);
                v.fwd.wg = w;
                return sum_all(t, bilstm_pool(t, v, t.constant(F)).S);
            },
            p.fwd.wg, 1e-5);
        CHECK(err < 1e-4);

        err = grad_check(
            [&](Tape& t, Var b) {
                LstmVars v = lstm_leaves(t, p, false);
                v.bwd.bf = b;
                return sum_all(t, bilstm_pool(t, v, t.constant(F)).S);
            },
            p.bwd.bf, 1e-5);
        CHECK(err < 1e-4);
    }
    SUBCASE("attention w.r.t. V, w, U and features") {
        AttentionParams p = AttentionParams::init(n, d, true, rng);
        auto scalar = [&](Tape& t, AttentionVars v, Var f) {
            return sum_all(t, mul(t, attention_pool(t, v, f).S, attention_pool(t, v, f).S));
        };
        double err = grad_check(
            [&](Tape& t, Var V) {
                AttentionVars v = attention_leaves(t, p, false);
                v.V = V;
                return scalar(t, v, t.constant(F));
            },
            p.V, 1e-5);
        CHECK(err < 1e-4);
        err = grad_check(
            [&](Tape& t, Var w) {
                AttentionVars v = attention_leaves(t, p, false);
                v.w = w;
                return scalar(t, v, t.constant(F));
            },
            p.w, 1e-5);
        CHECK(err < 1e-4);
        err = grad_check(
            [&](Tape& t, Var U) {
                AttentionVars v = attention_leaves(t, p, false);
                v.U = U;
                return scalar(t, v, t.constant(F));
            },
            p.U, 1e-5);
        CHECK(err < 1e-4);
        err = grad_check(
            [&](Tape& t, Var f) {
                AttentionVars v = attention_leaves(t, p, false);
                return scalar(t, v, f);
            },
            F, 1e-5);
        CHECK(err < 1e-4);
    }
    SUBCASE("mean and max w.r.t. features") {
        double err = grad_check(
            [](Tape& t, Var f) {
                Var p = mean_pool(t, f);
                return sum_all(t, mul(t, p, p));
            },
            F, 1e-5);
        CHECK(err < 1e-4);
        err = grad_check(
            [](Tape& t, Var f) {
                Var p = max_pool(t, f);
                return sum_all(t, mul(t, p, p));
            },
            F, 1e-5);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("lstm step gradient w.r.t. every parameter tensor") {
    size_t n = 4, h = 3;
    Rng rng(53);
    LstmParams p = LstmParams::init(n, h, rng);
    Tensor f({n});
    for (size_t i = 0; i < n; ++i) f[i] = rng.normal();

    using VarSlot = Var LstmDirVars::*;
    using TenSlot = Tensor LstmDirParams::*;
    const std::pair<VarSlot, TenSlot> slots[] = {
        {&LstmDirVars::wi, &LstmDirParams::wi}, {&LstmDirVars::wf, &LstmDirParams::wf},
        {&LstmDirVars::wo, &LstmDirParams::wo}, {&LstmDirVars::wg, &LstmDirParams::wg},
        {&LstmDirVars::bi, &LstmDirParams::bi}, {&LstmDirVars::bf, &LstmDirParams::bf},
        {&LstmDirVars::bo, &LstmDirParams::bo}, {&LstmDirVars::bg, &LstmDirParams::bg},
    };
    for (auto [vs, ts] : slots) {
        double err = grad_check(
            [&, vs](Tape& t, Var w) {
                LstmDirVars dv = lstm_dir_leaves(t, p.fwd, false);
                dv.*vs = w;
                LstmState prev{t.constant(Tensor::zeros({h})),
                               t.constant(Tensor::zeros({h}))};
                LstmState s = lstm_step(t, dv, t.constant(f), prev);
                return sum_all(t, tanh(t, concat(t, s.h, s.c)));
            },
            p.fwd.*ts, 1e-5);
        CHECK(err < 1e-4);
    }
}
