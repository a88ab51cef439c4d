#include "milstm/training.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

namespace milstm {

using nlohmann::json;

std::string to_string(PoolingKind k) {
    switch (k) {
        case PoolingKind::bilstm: return "bilstm";
        case PoolingKind::attention: return "attention";
        case PoolingKind::gated_attention: return "gated_attention";
        case PoolingKind::mean: return "mean";
        case PoolingKind::max: return "max";
    }
    throw ContractError("unknown pooling kind");
}

PoolingKind pooling_from_string(const std::string& s) {
    if (s == "bilstm") return PoolingKind::bilstm;
    if (s == "attention") return PoolingKind::attention;
    if (s == "gated_attention") return PoolingKind::gated_attention;
    if (s == "mean") return PoolingKind::mean;
    if (s == "max") return PoolingKind::max;
    throw ContractError("unknown pooling kind: " + s);
}

std::string to_string(HeadKind k) {
    return k == HeadKind::classifier ? "classifier" : "regressor";
}

HeadKind head_from_string(const std::string& s) {
    if (s == "classifier") return HeadKind::classifier;
    if (s == "regressor") return HeadKind::regressor;
    throw ContractError("unknown head kind: " + s);
}

HeadParams HeadParams::init(HeadKind kind, size_t in_dim, Rng& rng) {
    HeadParams p;
    p.kind = kind;
    p.w = Tensor({in_dim});
    double bound = 1.0 / std::sqrt(static_cast<double>(in_dim));
    for (size_t i = 0; i < in_dim; ++i) p.w[i] = rng.uniform(-bound, bound);
    p.b = Tensor({1});
    return p;
}

size_t ModelConfig::bag_dim() const {
    return pooling == PoolingKind::bilstm ? 2 * hidden_dim : idu.feature_dim;
}

MiConfig ModelConfig::mi_config() const {
    MiConfig mc;
    mc.feature_dim = idu.feature_dim;
    mc.map_channels = 50;
    mc.map_side = idu_local_side(idu.input_side);
    mc.hidden = mi_hidden;
    return mc;
}

void ModelConfig::validate() const {
    if (idu.feature_dim == 0) throw ContractError("feature_dim must be positive");
    if (pooling == PoolingKind::bilstm && hidden_dim == 0)
        throw ContractError("hidden_dim must be positive for bilstm pooling");
    if ((pooling == PoolingKind::attention ||
         pooling == PoolingKind::gated_attention) &&
        attn_dim == 0)
        throw ContractError("attn_dim must be positive for attention pooling");
    idu_local_side(idu.input_side);  // throws if the geometry is unusable
}

MilModel MilModel::init(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    MilModel m;
    m.cfg = cfg;
    m.idu = IduParams::init(cfg.idu, rng);
    if (cfg.pooling == PoolingKind::bilstm)
        m.lstm = LstmParams::init(cfg.idu.feature_dim, cfg.hidden_dim, rng);
    if (cfg.pooling == PoolingKind::attention ||
        cfg.pooling == PoolingKind::gated_attention)
        m.attn = AttentionParams::init(cfg.idu.feature_dim, cfg.attn_dim,
                                       cfg.pooling == PoolingKind::gated_attention,
                                       rng);
    m.head = HeadParams::init(cfg.head, cfg.bag_dim(), rng);
    if (cfg.mi_heads) m.mi = MiHeads::init(cfg.mi_config(), rng);
    return m;
}

size_t MilModel::param_count() const {
    size_t n = 0;
    visit([&](const char*, const Tensor& v) { n += v.numel(); });
    return n;
}

ModelVars model_leaves(Tape& t, const MilModel& m, bool trainable, bool with_mi) {
    ModelVars v;
    v.idu = idu_leaves(t, m.idu, trainable);
    if (m.cfg.pooling == PoolingKind::bilstm)
        v.lstm = lstm_leaves(t, m.lstm, trainable);
    if (m.cfg.pooling == PoolingKind::attention ||
        m.cfg.pooling == PoolingKind::gated_attention)
        v.attn = attention_leaves(t, m.attn, trainable);
    Tensor w = m.head.w;
    w.set_requires_grad(trainable);
    v.head_w = t.leaf(std::move(w));
    Tensor b = m.head.b;
    b.set_requires_grad(trainable);
    v.head_b = t.leaf(std::move(b));
    if (m.cfg.mi_heads && with_mi) v.mi = mi_leaves(t, m.mi, trainable);
    return v;
}

std::vector<Var> flat_vars(const ModelVars& v, const ModelConfig& cfg) {
    std::vector<Var> out;
    const IduVars& i = v.idu;
    for (Var p : {i.c1w, i.c1b, i.c2w, i.c2b, i.f1w, i.f1b, i.f2w, i.f2b})
        out.push_back(p);
    if (cfg.pooling == PoolingKind::bilstm) {
        for (const LstmDirVars* d : {&v.lstm.fwd, &v.lstm.bwd})
            for (Var p : {d->wi, d->wf, d->wo, d->wg, d->bi, d->bf, d->bo, d->bg})
                out.push_back(p);
    }
    if (cfg.pooling == PoolingKind::attention ||
        cfg.pooling == PoolingKind::gated_attention) {
        out.push_back(v.attn.V);
        out.push_back(v.attn.w);
        if (cfg.pooling == PoolingKind::gated_attention) out.push_back(v.attn.U);
    }
    out.push_back(v.head_w);
    out.push_back(v.head_b);
    if (cfg.mi_heads) {
        const MiVars& m = v.mi;
        for (Var p : {m.g1w, m.g1b, m.g2w, m.g2b, m.l1w, m.l1b, m.l2w, m.l2b,
                      m.d1w, m.d1b, m.d2w, m.d2b})
            out.push_back(p);
    }
    return out;
}

Var pool_bag(Tape& t, const ModelVars& v, const ModelConfig& cfg, Var F,
             std::vector<LstmState>* trace) {
    switch (cfg.pooling) {
        case PoolingKind::bilstm: {
            BagRepresentation rep = bilstm_pool(t, v.lstm, F);
            if (trace) *trace = std::move(rep.trace);
            return rep.S;
        }
        case PoolingKind::attention:
        case PoolingKind::gated_attention:
            return attention_pool(t, v.attn, F).S;
        case PoolingKind::mean:
            return mean_pool(t, F);
        case PoolingKind::max:
            return max_pool(t, F);
    }
    throw ContractError("unknown pooling kind");
}

Var head_out(Tape& t, const ModelVars& v, Var S) {
    return add(t, reshape(t, dot(t, S, v.head_w), {1}), v.head_b);
}

BagForward bag_forward(Tape& t, const ModelVars& v, const ModelConfig& cfg,
                       const Bag& bag, bool want_local) {
    BagForward f;
    std::vector<Var> locals;
    f.F = encode_bag(t, v.idu, bag, want_local, want_local ? &locals : nullptr);
    f.locals = std::move(locals);
    f.S = pool_bag(t, v, cfg, f.F, &f.trace);
    f.out = head_out(t, v, f.S);
    return f;
}

Var task_loss(Tape& t, Var out, const BagTarget& target, HeadKind head) {
    if (head == HeadKind::classifier) {
        if (target.kind != TargetKind::binary)
            throw ContractError("classifier head needs a binary target");
        if (target.value != 0 && target.value != 1)
            throw ContractError("binary target must be 0 or 1, got " +
                                std::to_string(target.value));
        // softplus(z) - y*z, the log-sum-exp form of -log sigmoid/-log(1-sigmoid)
        Var l = softplus(t, out);
        if (target.value == 1) l = sub(t, l, out);
        return l;
    }
    if (target.kind != TargetKind::count)
        throw ContractError("regressor head needs a count target");
    if (target.value < 0)
        throw ContractError("count target must be non-negative, got " +
                            std::to_string(target.value));
    Var d = sub(t, out, t.constant(Tensor::scalar(target.value)));
    return mul(t, d, d);
}

void TrainConfig::validate() const {
    if (lr <= 0) throw ContractError("lr must be positive");
    if (epochs < 1) throw ContractError("epochs must be >= 1");
    if (batch_bags < 1) throw ContractError("batch_bags must be >= 1");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
        throw ContractError("adam betas must lie in [0, 1)");
    if (eps <= 0) throw ContractError("adam eps must be positive");
    if (weight_decay < 0) throw ContractError("weight_decay must be >= 0");
    mi.validate();
    if (mi.enabled() && mi_batch < 2)
        throw ContractError("mi_batch must be >= 2 when MI weights are set");
}

AdamState AdamState::init(const MilModel& model) {
    AdamState st;
    model.visit([&](const char*, const Tensor& v) {
        st.m.push_back(Tensor(v.shape()));
        st.v.push_back(Tensor(v.shape()));
    });
    return st;
}

void adam_step(const std::vector<Tensor*>& params,
               const std::vector<const Tensor*>& grads, AdamState& st,
               const TrainConfig& tc) {
    if (params.size() != grads.size() || params.size() != st.m.size())
        throw ContractError("adam_step: parameter/gradient/state count mismatch");
    st.step += 1;
    double c1 = 1.0 - std::pow(tc.beta1, static_cast<double>(st.step));
    double c2 = 1.0 - std::pow(tc.beta2, static_cast<double>(st.step));
    for (size_t p = 0; p < params.size(); ++p) {
        Tensor& theta = *params[p];
        const Tensor& g = *grads[p];
        if (!theta.same_shape(g) || !theta.same_shape(st.m[p]))
            throw DimensionError("adam_step: shape mismatch at parameter " +
                                 std::to_string(p));
        double* th = theta.data();
        const double* gd = g.data();
        double* m = st.m[p].data();
        double* v = st.v[p].data();
        for (size_t i = 0; i < theta.numel(); ++i) {
            m[i] = tc.beta1 * m[i] + (1.0 - tc.beta1) * gd[i];
            v[i] = tc.beta2 * v[i] + (1.0 - tc.beta2) * gd[i] * gd[i];
            double mhat = m[i] / c1;
            double vhat = v[i] / c2;
            th[i] -= tc.lr * (mhat / (std::sqrt(vhat) + tc.eps) +
                              tc.weight_decay * th[i]);
        }
    }
}

int label_from_output(double out, HeadKind head) {
    if (head == HeadKind::classifier) return out > 0.0 ? 1 : 0;  // logit space
    long r = std::lround(out);
    return r < 0 ? 0 : static_cast<int>(r);
}

namespace {

struct EvalStats {
    double loss = 0;
    double error = 0;  // percent
};

EvalStats eval_split(const MilModel& model, const std::vector<Bag>& bags) {
    EvalStats s;
    if (bags.empty()) return s;
    size_t wrong = 0;
    for (const Bag& bag : bags) {
        Tape t;
        ModelVars v = model_leaves(t, model, false, false);
        BagForward f = bag_forward(t, v, model.cfg, bag, false);
        Var l = task_loss(t, f.out, bag.target, model.cfg.head);
        s.loss += t.value(l).scalar_value();
        if (label_from_output(t.value(f.out).scalar_value(), model.cfg.head) !=
            bag.target.value)
            ++wrong;
    }
    s.loss /= static_cast<double>(bags.size());
    s.error = 100.0 * static_cast<double>(wrong) / static_cast<double>(bags.size());
    return s;
}

std::vector<Tensor> snapshot_params(const MilModel& model) {
    std::vector<Tensor> out;
    model.visit([&](const char*, const Tensor& v) { out.push_back(v); });
    return out;
}

void restore_params(MilModel& model, const std::vector<Tensor>& snap) {
    size_t i = 0;
    model.visit([&](const char*, Tensor& v) { v = snap[i++]; });
}

}  // namespace

TrainResult train(MilModel& model, const std::vector<Bag>& train_bags,
                  const std::vector<Bag>& val_bags, const TrainConfig& tc,
                  const ProgressFn& progress) {
    tc.validate();
    model.cfg.validate();
    if (train_bags.empty()) throw ContractError("train: empty training split");
    bool mi_on = tc.mi.enabled();
    if (mi_on && !model.cfg.mi_heads)
        throw ContractError("MI weights are set but the model has no MI heads");

    for (const Bag& b : train_bags)
        if (b.size() == 0) throw ContractError("train: empty bag in training split");

    Rng order_rng(derive_seed(tc.seed, "bag-order"));
    Rng inst_rng(derive_seed(tc.seed, "instance-order"));
    Rng mi_rng(derive_seed(tc.seed, "mi"));

    // (bag, instance) index over the whole split; MI batches draw across bags
    std::vector<std::pair<uint32_t, uint32_t>> all_inst;
    for (uint32_t b = 0; b < train_bags.size(); ++b)
        for (uint32_t i = 0; i < train_bags[b].size(); ++i) all_inst.push_back({b, i});

    std::vector<Tensor*> params;
    std::vector<std::string> names;
    model.visit([&](const char* name, Tensor& v) {
        params.push_back(&v);
        names.push_back(name);
    });
    std::vector<bool> is_disc(names.size());
    for (size_t i = 0; i < names.size(); ++i)
        is_disc[i] = names[i].rfind("mi.d", 0) == 0;

    AdamState opt = AdamState::init(model);
    TrainResult res;
    std::vector<Tensor> best = snapshot_params(model);
    double best_err = std::numeric_limits<double>::infinity();
    double best_loss = std::numeric_limits<double>::infinity();
    size_t since_best = 0;

    for (size_t epoch = 0; epoch < tc.epochs; ++epoch) {
        std::vector<size_t> order = order_rng.permutation(train_bags.size());
        double loss_sum = 0;
        size_t steps_this_epoch = 0;
        size_t wrong = 0;

        for (size_t start = 0; start < order.size(); start += tc.batch_bags) {
            size_t count = std::min(tc.batch_bags, order.size() - start);
            Tape t;
            ModelVars v = model_leaves(t, model, true);

            Var batch_loss;
            for (size_t k = 0; k < count; ++k) {
                const Bag* bag = &train_bags[order[start + k]];
                Bag shuffled;
                if (tc.shuffle_instances && bag->size() > 1) {
                    shuffled = shuffle_bag(*bag, inst_rng);
                    bag = &shuffled;
                }
                BagForward f = bag_forward(t, v, model.cfg, *bag, false);
                Var l = task_loss(t, f.out, bag->target, model.cfg.head);
                batch_loss = k == 0 ? l : add(t, batch_loss, l);
                if (label_from_output(t.value(f.out).scalar_value(), model.cfg.head) !=
                    bag->target.value)
                    ++wrong;
            }
            Var main_loss = scale(t, batch_loss, 1.0 / static_cast<double>(count));
            double task_val = t.value(main_loss).scalar_value();

            double mi_val = 0;
            Var disc_loss;
            if (mi_on) {
                size_t B = tc.mi_batch;
                std::vector<Var> feats, maps;
                feats.reserve(B);
                maps.reserve(B);
                for (size_t k = 0; k < B; ++k) {
                    auto [bi, ii] = all_inst[mi_rng.index(all_inst.size())];
                    EncodedInstance e = encode_instance(
                        t, v.idu, train_bags[bi].instances[ii], true);
                    feats.push_back(e.feature);
                    maps.push_back(e.local_map);
                }
                Var F_mi = stack_rows(t, feats);
                std::vector<size_t> perm = mi_rng.derangement(B);
                Var g = mi_global(t, v.mi, F_mi, maps, perm);
                Var l = mi_local(t, v.mi, F_mi, maps, perm);
                Var prior_enc;
                if (tc.mi.gamma > 0) {
                    PriorTerms pt = prior_matching(t, v.mi, F_mi, mi_rng);
                    prior_enc = pt.encoder;
                    disc_loss = pt.discriminator;
                }
                Var mi_enc = mi_total(t, tc.mi, g, l, prior_enc);
                mi_val = t.value(mi_enc).scalar_value();
                main_loss = add(t, main_loss, mi_enc);
            }

            double loss_val = task_val + mi_val;
            if (!std::isfinite(loss_val)) {
                std::ostringstream msg;
                msg << "non-finite training loss at epoch " << epoch + 1 << ", bag "
                    << order[start] << ": task=" << task_val << " mi=" << mi_val;
                throw NumericError(msg.str());
            }
            loss_sum += loss_val;
            ++steps_this_epoch;

            t.backward(main_loss);
            std::vector<Var> leaves = flat_vars(v, model.cfg);
            std::vector<Tensor> gbuf;
            gbuf.reserve(leaves.size());
            for (Var leaf : leaves) gbuf.push_back(t.grad(leaf));
            if (disc_loss.valid()) {
                t.backward(disc_loss);
                for (size_t i = 0; i < leaves.size(); ++i)
                    if (is_disc[i]) gbuf[i] = t.grad(leaves[i]);
            } else if (mi_on) {
                // no prior term: D heads see no gradient this step
                for (size_t i = 0; i < leaves.size(); ++i)
                    if (is_disc[i]) gbuf[i] = Tensor(gbuf[i].shape());
            }
            std::vector<const Tensor*> gptr;
            gptr.reserve(gbuf.size());
            for (const Tensor& g : gbuf) gptr.push_back(&g);
            adam_step(params, gptr, opt, tc);
        }

        EpochStats es;
        es.train_loss = loss_sum / static_cast<double>(steps_this_epoch);
        es.train_error =
            100.0 * static_cast<double>(wrong) / static_cast<double>(train_bags.size());
        if (val_bags.empty()) {
            es.val_loss = es.train_loss;
            es.val_error = es.train_error;
        } else {
            EvalStats vs = eval_split(model, val_bags);
            es.val_loss = vs.loss;
            es.val_error = vs.error;
        }
        res.history.push_back(es);
        res.steps += steps_this_epoch;

        bool err_improved = es.val_error < best_err - 1e-12;
        bool loss_tiebreak = es.val_error <= best_err + 1e-12 && es.val_loss < best_loss;
        if (err_improved || loss_tiebreak) {
            best = snapshot_params(model);
            best_err = es.val_error;
            best_loss = es.val_loss;
            res.best_epoch = epoch;
        }
        // only a strictly lower error rate extends training; a loss tie-break
        // refreshes the snapshot but still counts toward patience
        if (err_improved) {
            since_best = 0;
        } else {
            ++since_best;
        }
        bool keep_going = progress ? progress(epoch, es) : true;
        if (!keep_going) break;
        if (tc.patience > 0 && since_best >= tc.patience) break;
    }

    restore_params(model, best);
    res.best_val_error = best_err;
    return res;
}

Prediction predict(const MilModel& model, const Bag& bag) {
    Tape t;
    ModelVars v = model_leaves(t, model, false, false);
    BagForward f = bag_forward(t, v, model.cfg, bag, false);
    double out = t.value(f.out).scalar_value();
    Prediction p;
    if (model.cfg.head == HeadKind::classifier) {
        p.raw = 1.0 / (1.0 + std::exp(-out));
        p.label = p.raw > 0.5 ? 1 : 0;
    } else {
        p.raw = out;
        long r = std::lround(out);
        p.label = r < 0 ? 0 : static_cast<int>(r);
    }
    return p;
}

double error_percent(const MilModel& model, const std::vector<Bag>& bags) {
    if (bags.empty()) throw ContractError("error_percent: empty bag list");
    size_t wrong = 0;
    for (const Bag& bag : bags)
        if (predict(model, bag).label != bag.target.value) ++wrong;
    return 100.0 * static_cast<double>(wrong) / static_cast<double>(bags.size());
}

// ---- checkpoint file -----------------------------------------------------

namespace {

json model_config_json(const ModelConfig& c) {
    return json{{"feature_dim", c.idu.feature_dim},
                {"input_side", c.idu.input_side},
                {"pooling", to_string(c.pooling)},
                {"hidden_dim", c.hidden_dim},
                {"attn_dim", c.attn_dim},
                {"head", to_string(c.head)},
                {"mi_heads", c.mi_heads},
                {"mi_hidden", c.mi_hidden}};
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    c.idu.feature_dim = j.at("feature_dim").get<size_t>();
    c.idu.input_side = j.at("input_side").get<size_t>();
    c.pooling = pooling_from_string(j.at("pooling").get<std::string>());
    c.hidden_dim = j.at("hidden_dim").get<size_t>();
    c.attn_dim = j.at("attn_dim").get<size_t>();
    c.head = head_from_string(j.at("head").get<std::string>());
    c.mi_heads = j.at("mi_heads").get<bool>();
    c.mi_hidden = j.at("mi_hidden").get<size_t>();
    return c;
}

json train_config_json(const TrainConfig& c) {
    return json{{"lr", c.lr},
                {"beta1", c.beta1},
                {"beta2", c.beta2},
                {"eps", c.eps},
                {"weight_decay", c.weight_decay},
                {"epochs", c.epochs},
                {"batch_bags", c.batch_bags},
                {"shuffle_instances", c.shuffle_instances},
                {"seed", c.seed},
                {"mi_alpha", c.mi.alpha},
                {"mi_beta", c.mi.beta},
                {"mi_gamma", c.mi.gamma},
                {"mi_batch", c.mi_batch},
                {"patience", c.patience}};
}

TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    c.lr = j.at("lr").get<double>();
    c.beta1 = j.at("beta1").get<double>();
    c.beta2 = j.at("beta2").get<double>();
    c.eps = j.at("eps").get<double>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.epochs = j.at("epochs").get<size_t>();
    c.batch_bags = j.at("batch_bags").get<size_t>();
    c.shuffle_instances = j.at("shuffle_instances").get<bool>();
    c.seed = j.at("seed").get<uint64_t>();
    c.mi.alpha = j.at("mi_alpha").get<double>();
    c.mi.beta = j.at("mi_beta").get<double>();
    c.mi.gamma = j.at("mi_gamma").get<double>();
    c.mi_batch = j.at("mi_batch").get<size_t>();
    c.patience = j.at("patience").get<size_t>();
    return c;
}

void write_u32(std::ostream& out, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v),
                          static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::istream& in) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4))
        throw FormatError("checkpoint: truncated header");
    return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
           static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
}

constexpr char kMagic[4] = {'M', 'I', 'L', 'B'};

}  // namespace

void save_checkpoint(const std::string& path, const MilModel& model,
                     const TrainConfig& tc, size_t epoch,
                     const std::vector<uint64_t>& rng_state,
                     const std::string& task) {
    json meta;
    meta["format"] = "mil-checkpoint";
    meta["tool_version"] = kToolVersion;
    meta["model"] = model_config_json(model.cfg);
    meta["train"] = train_config_json(tc);
    meta["epoch"] = epoch;
    meta["task"] = task;
    json rs = json::array();
    for (uint64_t w : rng_state) rs.push_back(hex64(w));
    meta["rng_state"] = rs;
    json plist = json::array();
    model.visit([&](const char* name, const Tensor& v) {
        plist.push_back(json{{"name", name}, {"shape", v.shape()}});
    });
    meta["params"] = plist;

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("checkpoint: cannot open for writing: " + path);
    out.write(kMagic, 4);
    write_u32(out, kCheckpointVersion);
    std::string mtext = meta.dump();
    write_u32(out, static_cast<uint32_t>(mtext.size()));
    out.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
    model.visit([&](const char*, const Tensor& v) {
        out.write(reinterpret_cast<const char*>(v.data()),
                  static_cast<std::streamsize>(v.numel() * sizeof(double)));
    });
    if (!out) throw FormatError("checkpoint: write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("checkpoint: cannot open: " + path);
    char magic[4];
    if (!in.read(magic, 4)) throw FormatError("checkpoint: truncated magic");
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw FormatError("checkpoint: bad magic bytes, not a checkpoint file");
    uint32_t version = read_u32(in);
    if (version != kCheckpointVersion)
        throw CompatError("checkpoint format version " + std::to_string(version) +
                          " is not supported; this build reads version " +
                          std::to_string(kCheckpointVersion) +
                          " and has no migration path");
    uint32_t mlen = read_u32(in);
    std::string mtext(mlen, '\0');
    if (!in.read(mtext.data(), mlen))
        throw FormatError("checkpoint: truncated metadata block");
    json meta;
    try {
        meta = json::parse(mtext);
    } catch (const json::exception& e) {
        throw FormatError(std::string("checkpoint: metadata is not valid JSON: ") +
                          e.what());
    }

    Checkpoint ck;
    ModelConfig cfg;
    try {
        cfg = model_config_from_json(meta.at("model"));
        ck.train = train_config_from_json(meta.at("train"));
        ck.epoch = meta.at("epoch").get<size_t>();
        ck.task = meta.value("task", std::string{});
        for (const auto& w : meta.at("rng_state"))
            ck.rng_state.push_back(
                std::stoull(w.get<std::string>(), nullptr, 16));
    } catch (const json::exception& e) {
        throw FormatError(std::string("checkpoint: metadata field error: ") +
                          e.what());
    }

    Rng dummy(0);
    ck.model = MilModel::init(cfg, dummy);  // shapes; values overwritten below

    const json& plist = meta.at("params");
    size_t idx = 0;
    ck.model.visit([&](const char* name, Tensor& v) {
        if (idx >= plist.size())
            throw FormatError("checkpoint: missing parameter entry for " +
                              std::string(name));
        const json& e = plist[idx++];
        if (e.at("name").get<std::string>() != name)
            throw FormatError("checkpoint: parameter order mismatch at " +
                              std::string(name));
        std::vector<size_t> shape = e.at("shape").get<std::vector<size_t>>();
        if (shape != v.shape())
            throw FormatError("checkpoint: shape mismatch for " + std::string(name));
        if (!in.read(reinterpret_cast<char*>(v.data()),
                     static_cast<std::streamsize>(v.numel() * sizeof(double))))
            throw FormatError("checkpoint: truncated tensor data at " +
                              std::string(name));
    });
    if (idx != plist.size())
        throw FormatError("checkpoint: extra parameter entries in metadata");
    return ck;
}

}  // namespace milstm
