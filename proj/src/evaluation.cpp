#include "milstm/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>

namespace milstm {

void ConfusionCounts::add(int predicted, int target, TargetKind kind) {
    ++total;
    if (predicted == target) ++correct;
    if (kind == TargetKind::binary) {
        if (target != 0 && target != 1)
            throw ContractError("confusion counts: binary target must be 0 or 1");
        if (predicted != 0 && predicted != 1)
            throw ContractError("confusion counts: binary prediction must be 0 or 1");
        if (target == 1)
            predicted == 1 ? ++tp : ++fn;
        else
            predicted == 1 ? ++fp : ++tn;
    }
}

MetricBundle metrics_from_counts(const ConfusionCounts& c) {
    if (c.total == 0) throw ContractError("metrics need at least one outcome");
    MetricBundle m;
    m.counts = c;
    double total = static_cast<double>(c.total);
    m.accuracy = 100.0 * static_cast<double>(c.correct) / total;
    m.error_rate = 100.0 * static_cast<double>(c.total - c.correct) / total;
    if (c.tp > 0) {
        double p = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
        double r = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
        m.f1 = 100.0 * 2.0 * p * r / (p + r);
    }
    return m;
}

namespace {

TargetKind common_kind(const std::vector<Bag>& bags) {
    TargetKind kind = bags[0].target.kind;
    for (const Bag& b : bags)
        if (b.target.kind != kind)
            throw ContractError("bag list mixes binary and count targets");
    return kind;
}

}  // namespace

MetricBundle error_rate(const MilModel& model, const std::vector<Bag>& bags) {
    if (bags.empty()) throw ContractError("error_rate: empty bag list");
    TargetKind kind = common_kind(bags);
    ConfusionCounts counts;
    for (const Bag& bag : bags)
        counts.add(predict(model, bag).label, bag.target.value, kind);
    return metrics_from_counts(counts);
}

MeanStd mean_std(const std::vector<double>& xs) {
    if (xs.empty()) throw ContractError("mean_std: empty sample");
    MeanStd ms;
    for (double x : xs) ms.mean += x;
    ms.mean /= static_cast<double>(xs.size());
    if (xs.size() > 1) {
        double ss = 0;
        for (double x : xs) ss += (x - ms.mean) * (x - ms.mean);
        ms.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
    }
    return ms;
}

namespace {

// pooling + head leaves only; enough for forwards on cached features
ModelVars pool_head_leaves(Tape& t, const MilModel& m) {
    ModelVars v;
    if (m.cfg.pooling == PoolingKind::bilstm) v.lstm = lstm_leaves(t, m.lstm, false);
    if (m.cfg.pooling == PoolingKind::attention ||
        m.cfg.pooling == PoolingKind::gated_attention)
        v.attn = attention_leaves(t, m.attn, false);
    v.head_w = t.leaf(m.head.w);
    v.head_b = t.leaf(m.head.b);
    return v;
}

Tensor rows_permuted(const Tensor& F, const std::vector<size_t>& perm) {
    size_t m = F.extent(0), n = F.extent(1);
    Tensor out({m, n});
    for (size_t r = 0; r < m; ++r)
        std::memcpy(out.data() + r * n, F.data() + perm[r] * n, n * sizeof(double));
    return out;
}

}  // namespace

PermutationReport permutation_robustness(const MilModel& model,
                                         const std::vector<Bag>& bags,
                                         size_t n_perm, uint64_t seed) {
    if (bags.empty()) throw ContractError("permutation_robustness: empty bag list");
    if (n_perm == 0) throw ContractError("permutation_robustness: n_perm must be >= 1");
    TargetKind kind = common_kind(bags);

    // instance features do not depend on bag order; encode once
    std::vector<Tensor> feats;
    feats.reserve(bags.size());
    for (const Bag& bag : bags) {
        Tape t;
        IduVars iv = idu_leaves(t, model.idu, false);
        feats.push_back(t.value(encode_bag(t, iv, bag, false)));
    }

    constexpr size_t kChunk = 64;  // bags per tape; bounds weight-copy overhead
    auto pass_error = [&](Rng* rng) {
        ConfusionCounts counts;
        for (size_t start = 0; start < bags.size(); start += kChunk) {
            Tape t;
            ModelVars v = pool_head_leaves(t, model);
            size_t stop = std::min(start + kChunk, bags.size());
            for (size_t b = start; b < stop; ++b) {
                Var F = rng ? t.constant(rows_permuted(
                                  feats[b], rng->permutation(feats[b].extent(0))))
                            : t.constant(feats[b]);
                Var out = head_out(t, v, pool_bag(t, v, model.cfg, F));
                counts.add(
                    label_from_output(t.value(out).scalar_value(), model.cfg.head),
                    bags[b].target.value, kind);
            }
        }
        return metrics_from_counts(counts).error_rate;
    };

    PermutationReport rep;
    rep.unshuffled_error = pass_error(nullptr);
    Rng rng(derive_seed(seed, "perm-eval"));
    rep.per_perm.reserve(n_perm);
    for (size_t p = 0; p < n_perm; ++p) rep.per_perm.push_back(pass_error(&rng));
    rep.error = mean_std(rep.per_perm);
    return rep;
}

std::vector<Bag> pair_probe_bags(const InstancePool& pool, size_t n_bags,
                                 int cardinality, uint64_t seed) {
    if (cardinality < 2)
        throw ContractError("pair probes need cardinality >= 2");
    if (n_bags == 0) throw ContractError("pair probes need n_bags >= 1");
    if (pool.size() == 0) throw ContractError("pair probes need a non-empty pool");

    bool has3 = false, has6 = false, has_other = false;
    for (uint8_t l : pool.labels) {
        if (l == 3) has3 = true;
        else if (l == 6) has6 = true;
        else has_other = true;
    }
    if (!has3 || !has6 || !has_other)
        throw GenerationError(
            "pair probes need instances of classes 3, 6, and at least one other");

    Rng rng(derive_seed(seed, "pair-probes"));
    auto draw_avoiding = [&](uint8_t a, uint8_t b) {
        for (int tries = 0; tries < (1 << 16); ++tries) {
            size_t i = rng.index(pool.size());
            if (pool.labels[i] != a && pool.labels[i] != b) return i;
        }
        throw GenerationError("pair probes: rejection sampling exhausted");
    };
    auto draw_of_class = [&](uint8_t cls) {
        for (int tries = 0; tries < (1 << 16); ++tries) {
            size_t i = rng.index(pool.size());
            if (pool.labels[i] == cls) return i;
        }
        throw GenerationError("pair probes: rejection sampling exhausted");
    };
    auto put = [&](Bag& bag, size_t slot, size_t idx) {
        bag.instances[slot] = pool.images[idx];
        bag.instance_labels[slot] = pool.labels[idx];
    };

    std::vector<Bag> bags;
    bags.reserve(n_bags);
    size_t n_pos = (n_bags + 1) / 2;
    size_t m = static_cast<size_t>(cardinality);
    for (size_t b = 0; b < n_bags; ++b) {
        bool positive = b < n_pos;
        Bag bag;
        bag.target = {TargetKind::binary, positive ? 1 : 0};
        bag.instances.resize(m);
        bag.instance_labels.resize(m);
        if (positive) {
            // exactly one witness pair; everything else avoids both classes
            for (size_t i = 0; i < m; ++i) put(bag, i, draw_avoiding(3, 6));
            size_t s1 = rng.index(m);
            size_t s2 = rng.index(m - 1);
            if (s2 >= s1) ++s2;
            put(bag, s1, draw_of_class(3));
            put(bag, s2, draw_of_class(6));
        } else {
            // matched negatives: one witness class missing bag-wide
            uint8_t banned = rng.index(2) == 0 ? 3 : 6;
            for (size_t i = 0; i < m; ++i) put(bag, i, draw_avoiding(banned, banned));
        }
        bags.push_back(std::move(bag));
    }
    rng.shuffle(bags);
    return bags;
}

std::vector<CardinalityPoint> cardinality_generalization(
    const MilModel& model, const InstancePool& pool,
    const std::vector<int>& sizes, const CardinalityOptions& opt) {
    if (sizes.empty()) throw ContractError("cardinality probe needs sizes");
    std::vector<CardinalityPoint> out;
    out.reserve(sizes.size());
    for (int size : sizes) {
        std::string tag = std::to_string(size);
        std::vector<Bag> probes = pair_probe_bags(
            pool, opt.test_bags, size, derive_seed(opt.seed, "card-test:" + tag));
        CardinalityPoint pt;
        pt.cardinality = size;
        pt.error = error_rate(model, probes).error_rate;
        if (opt.finetune) {
            MilModel tuned = model;
            std::vector<Bag> tune_bags = pair_probe_bags(
                pool, opt.finetune_bags, size,
                derive_seed(opt.seed, "card-tune:" + tag));
            train(tuned, tune_bags, {}, opt.finetune_train);
            pt.finetuned_error = error_rate(tuned, probes).error_rate;
            pt.finetuned = true;
        }
        out.push_back(pt);
    }
    return out;
}

SingletonFeatures singleton_features(const MilModel& model,
                                     const std::vector<Bag>& bags) {
    if (bags.empty()) throw ContractError("singleton_features: empty bag list");
    std::vector<std::pair<size_t, size_t>> items;
    for (size_t b = 0; b < bags.size(); ++b)
        for (size_t i = 0; i < bags[b].size(); ++i) items.push_back({b, i});

    size_t d = model.cfg.bag_dim();
    SingletonFeatures sf;
    sf.S = Tensor({items.size(), d});
    sf.labels.reserve(items.size());
    sf.bag_index.reserve(items.size());

    constexpr size_t kChunk = 32;
    size_t row = 0;
    for (size_t start = 0; start < items.size(); start += kChunk) {
        Tape t;
        ModelVars v = model_leaves(t, model, false, false);
        size_t stop = std::min(start + kChunk, items.size());
        for (size_t j = start; j < stop; ++j) {
            auto [b, i] = items[j];
            Bag single;
            single.instances = {bags[b].instances[i]};
            single.instance_labels = {bags[b].instance_labels[i]};
            single.target = bags[b].target;
            BagForward f = bag_forward(t, v, model.cfg, single, false);
            const Tensor& S = t.value(f.S);
            std::memcpy(sf.S.data() + row * d, S.data(), d * sizeof(double));
            sf.labels.push_back(bags[b].instance_labels[i]);
            sf.bag_index.push_back(b);
            ++row;
        }
    }
    return sf;
}

namespace {

double sq_dist(const double* a, const double* b, size_t d) {
    double s = 0;
    for (size_t i = 0; i < d; ++i) {
        double t = a[i] - b[i];
        s += t * t;
    }
    return s;
}

struct LloydRun {
    std::vector<size_t> assignment;
    Tensor centroids;
    double sse = std::numeric_limits<double>::infinity();
    std::vector<double> history;
};

LloydRun lloyd_once(const Tensor& X, size_t k, Rng& rng) {
    size_t M = X.extent(0), d = X.extent(1);
    Tensor C({k, d});

    // k-means++ seeding
    std::memcpy(C.data(), X.data() + rng.index(M) * d, d * sizeof(double));
    std::vector<double> d2(M, std::numeric_limits<double>::infinity());
    for (size_t c = 1; c < k; ++c) {
        double total = 0;
        for (size_t i = 0; i < M; ++i) {
            d2[i] = std::min(d2[i], sq_dist(X.data() + i * d,
                                            C.data() + (c - 1) * d, d));
            total += d2[i];
        }
        size_t pick;
        if (total > 0) {
            double u = rng.uniform() * total;
            double acc = 0;
            pick = M - 1;
            for (size_t i = 0; i < M; ++i) {
                acc += d2[i];
                if (u < acc) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = rng.index(M);  // all remaining points coincide
        }
        std::memcpy(C.data() + c * d, X.data() + pick * d, d * sizeof(double));
    }

    LloydRun run;
    run.assignment.assign(M, 0);
    double prev = std::numeric_limits<double>::infinity();
    for (int iter = 0; iter < 200; ++iter) {
        // assignment step
        bool changed = false;
        double sse = 0;
        for (size_t i = 0; i < M; ++i) {
            size_t bestc = 0;
            double bestd = std::numeric_limits<double>::infinity();
            for (size_t c = 0; c < k; ++c) {
                double dist = sq_dist(X.data() + i * d, C.data() + c * d, d);
                if (dist < bestd) {
                    bestd = dist;
                    bestc = c;
                }
            }
            sse += bestd;
            if (run.assignment[i] != bestc) {
                run.assignment[i] = bestc;
                changed = true;
            }
        }
        if (sse > prev + 1e-9 * std::max(1.0, prev))
            throw ContractError("kmeans: SSE increased across Lloyd iterations");
        run.history.push_back(sse);
        prev = sse;
        if (!changed && iter > 0) break;

        // update step
        Tensor sums({k, d});
        std::vector<size_t> counts(k, 0);
        for (size_t i = 0; i < M; ++i) {
            ++counts[run.assignment[i]];
            double* row = sums.data() + run.assignment[i] * d;
            const double* x = X.data() + i * d;
            for (size_t j = 0; j < d; ++j) row[j] += x[j];
        }
        for (size_t c = 0; c < k; ++c) {
            if (counts[c] == 0) {
                // re-seed an empty cluster at the farthest point
                size_t far = 0;
                double fard = -1;
                for (size_t i = 0; i < M; ++i) {
                    double dist = sq_dist(
                        X.data() + i * d,
                        C.data() + run.assignment[i] * d, d);
                    if (dist > fard) {
                        fard = dist;
                        far = i;
                    }
                }
                std::memcpy(C.data() + c * d, X.data() + far * d,
                            d * sizeof(double));
            } else {
                double* row = C.data() + c * d;
                const double* s = sums.data() + c * d;
                for (size_t j = 0; j < d; ++j)
                    row[j] = s[j] / static_cast<double>(counts[c]);
            }
        }
    }
    run.centroids = std::move(C);
    run.sse = prev;
    return run;
}

}  // namespace

KmeansResult kmeans(const Tensor& X, size_t k, uint64_t seed, size_t restarts) {
    if (X.rank() != 2) throw DimensionError("kmeans expects a [rows x dims] matrix");
    if (k == 0) throw ContractError("kmeans: k must be >= 1");
    if (X.extent(0) < k)
        throw ContractError("kmeans: " + std::to_string(X.extent(0)) +
                            " rows cannot fill " + std::to_string(k) + " clusters");
    if (restarts == 0) throw ContractError("kmeans: restarts must be >= 1");

    Rng rng(derive_seed(seed, "kmeans"));
    LloydRun best;
    for (size_t r = 0; r < restarts; ++r) {
        LloydRun run = lloyd_once(X, k, rng);
        if (run.sse < best.sse) best = std::move(run);
    }
    KmeansResult res;
    res.assignment = std::move(best.assignment);
    res.centroids = std::move(best.centroids);
    res.sse = best.sse;
    res.sse_history = std::move(best.history);
    return res;
}

ClusterReport cluster_purity(const std::vector<size_t>& assignment,
                             const std::vector<int>& labels, size_t k) {
    if (assignment.size() != labels.size())
        throw ContractError("cluster_purity: assignment/label length mismatch");
    if (assignment.empty()) throw ContractError("cluster_purity: empty input");

    ClusterReport rep;
    rep.k = k;
    rep.sizes.assign(k, 0);
    std::vector<std::vector<size_t>> members(k);
    for (size_t i = 0; i < assignment.size(); ++i) {
        if (assignment[i] >= k)
            throw ContractError("cluster_purity: assignment id out of range");
        ++rep.sizes[assignment[i]];
        members[assignment[i]].push_back(i);
    }
    double sum = 0;
    size_t nonempty = 0;
    rep.per_cluster.assign(k, -1.0);
    for (size_t c = 0; c < k; ++c) {
        if (members[c].empty()) {
            ++rep.empty_clusters;
            continue;
        }
        std::vector<std::pair<int, size_t>> counts;
        for (size_t i : members[c]) {
            bool found = false;
            for (auto& [lab, n] : counts)
                if (lab == labels[i]) {
                    ++n;
                    found = true;
                    break;
                }
            if (!found) counts.push_back({labels[i], 1});
        }
        size_t majority = 0;
        for (auto& [lab, n] : counts) majority = std::max(majority, n);
        rep.per_cluster[c] = 100.0 * static_cast<double>(majority) /
                             static_cast<double>(members[c].size());
        sum += rep.per_cluster[c];
        ++nonempty;
    }
    rep.avg_purity = sum / static_cast<double>(nonempty);
    return rep;
}

size_t clusters_for_task(ScenarioKind kind) {
    switch (kind) {
        case ScenarioKind::single_digit: return 2;
        case ScenarioKind::multi_digit: return 3;
        case ScenarioKind::counting: return 2;
        case ScenarioKind::outlier: return 10;
    }
    throw ContractError("unknown scenario kind");
}

std::vector<int> task_cluster_labels(ScenarioKind kind,
                                     const std::vector<uint8_t>& digits) {
    std::vector<int> out;
    out.reserve(digits.size());
    for (uint8_t d : digits) {
        switch (kind) {
            case ScenarioKind::single_digit:
            case ScenarioKind::counting:
                out.push_back(d == 9 ? 1 : 0);
                break;
            case ScenarioKind::multi_digit:
                out.push_back(d == 3 ? 1 : d == 6 ? 2 : 0);
                break;
            case ScenarioKind::outlier:
                out.push_back(d);
                break;
        }
    }
    return out;
}

Prediction instance_predict(const MilModel& model, const Image& img) {
    Bag single;
    single.instances = {img};
    single.instance_labels = {0};
    single.target = {TargetKind::binary, 0};
    return predict(model, single);
}

InstanceReport instance_eval(const MilModel& model, const std::vector<Bag>& bags,
                             const std::vector<uint8_t>& witnesses) {
    if (bags.empty()) throw ContractError("instance_eval: empty bag list");
    if (model.cfg.head != HeadKind::classifier)
        throw ContractError("instance_eval needs a binary classifier head");
    InstanceReport rep;
    size_t tp = 0, tn = 0;
    constexpr size_t kChunk = 32;
    std::vector<std::pair<size_t, size_t>> items;
    for (size_t b = 0; b < bags.size(); ++b)
        for (size_t i = 0; i < bags[b].size(); ++i) items.push_back({b, i});
    for (size_t start = 0; start < items.size(); start += kChunk) {
        Tape t;
        ModelVars v = model_leaves(t, model, false, false);
        size_t stop = std::min(start + kChunk, items.size());
        for (size_t j = start; j < stop; ++j) {
            auto [b, i] = items[j];
            Bag single;
            single.instances = {bags[b].instances[i]};
            single.instance_labels = {bags[b].instance_labels[i]};
            single.target = {TargetKind::binary, 0};
            BagForward f = bag_forward(t, v, model.cfg, single, false);
            int pred = label_from_output(t.value(f.out).scalar_value(),
                                         model.cfg.head);
            bool witness =
                std::find(witnesses.begin(), witnesses.end(),
                          bags[b].instance_labels[i]) != witnesses.end();
            if (witness) {
                ++rep.positives;
                tp += pred == 1;
            } else {
                ++rep.negatives;
                tn += pred == 0;
            }
        }
    }
    if (rep.positives == 0 || rep.negatives == 0)
        throw ContractError("instance_eval needs both witness and other instances");
    rep.tp_rate = 100.0 * static_cast<double>(tp) / static_cast<double>(rep.positives);
    rep.tn_rate = 100.0 * static_cast<double>(tn) / static_cast<double>(rep.negatives);
    rep.mean_acc = (rep.tp_rate + rep.tn_rate) / 2.0;
    return rep;
}

void write_features_csv(const std::string& path, const SingletonFeatures& sf) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError("cannot open for writing: " + path);
    out << std::setprecision(17);
    size_t d = sf.S.extent(1);
    out << "bag,label";
    for (size_t j = 0; j < d; ++j) out << ",s" << j;
    out << "\n";
    for (size_t i = 0; i < sf.S.extent(0); ++i) {
        out << sf.bag_index[i] << "," << static_cast<int>(sf.labels[i]);
        for (size_t j = 0; j < d; ++j) out << "," << sf.S.at(i, j);
        out << "\n";
    }
    if (!out) throw FormatError("write failed: " + path);
}

void write_states_csv(const std::string& path, const MilModel& model,
                      const std::vector<Bag>& bags) {
    if (model.cfg.pooling != PoolingKind::bilstm)
        throw ContractError("state export needs the recurrent pooling model");
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError("cannot open for writing: " + path);
    out << std::setprecision(17);
    size_t h = model.cfg.hidden_dim;
    out << "bag,step,label";
    for (size_t j = 0; j < h; ++j) out << ",h" << j;
    out << "\n";
    for (size_t b = 0; b < bags.size(); ++b) {
        Tape t;
        ModelVars v = model_leaves(t, model, false, false);
        BagForward f = bag_forward(t, v, model.cfg, bags[b], false);
        for (size_t s = 0; s < f.trace.size(); ++s) {
            const Tensor& hv = t.value(f.trace[s].h);
            out << b << "," << s << ","
                << static_cast<int>(bags[b].instance_labels[s]);
            for (size_t j = 0; j < h; ++j) out << "," << hv[j];
            out << "\n";
        }
    }
    if (!out) throw FormatError("write failed: " + path);
}

}  // namespace milstm
