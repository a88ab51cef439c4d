#include "milstm/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>

using nlohmann::json;

namespace milstm {

namespace {

const std::set<std::string>& known_keys() {
    static const std::set<std::string> keys = {
        "task",       "m",          "sigma",        "n_bags",
        "k_outliers", "n",          "h",            "d",
        "pooling",    "mi_hidden",  "mi_heads",     "mi_alpha",
        "mi_beta",    "mi_gamma",   "mi_batch",     "lr",
        "beta1",      "beta2",      "eps",          "weight_decay",
        "epochs",     "batch_bags", "shuffle_instances",
        "patience",   "val_fraction", "seed",       "out_dir",
        "run_id",     "pool_path",  "bags_path"};
    return keys;
}

template <typename T>
void pull(const json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("config key '") + key + "': " + e.what());
    }
}

}  // namespace

RunConfig RunConfig::from_json(const json& j) {
    if (!j.is_object()) throw FormatError("config must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known_keys().count(it.key()))
            throw FormatError("unknown config key '" + it.key() + "'");

    RunConfig c;
    pull(j, "task", c.task);
    pull(j, "m", c.m);
    pull(j, "sigma", c.sigma);
    pull(j, "n_bags", c.n_bags);
    pull(j, "k_outliers", c.k_outliers);
    pull(j, "n", c.n);
    pull(j, "h", c.h);
    pull(j, "d", c.d);
    pull(j, "pooling", c.pooling);
    pull(j, "mi_hidden", c.mi_hidden);
    pull(j, "mi_heads", c.mi_heads);
    pull(j, "mi_alpha", c.mi_alpha);
    pull(j, "mi_beta", c.mi_beta);
    pull(j, "mi_gamma", c.mi_gamma);
    pull(j, "mi_batch", c.mi_batch);
    pull(j, "lr", c.lr);
    pull(j, "beta1", c.beta1);
    pull(j, "beta2", c.beta2);
    pull(j, "eps", c.eps);
    pull(j, "weight_decay", c.weight_decay);
    pull(j, "epochs", c.epochs);
    pull(j, "batch_bags", c.batch_bags);
    pull(j, "shuffle_instances", c.shuffle_instances);
    pull(j, "patience", c.patience);
    pull(j, "val_fraction", c.val_fraction);
    pull(j, "seed", c.seed);
    pull(j, "out_dir", c.out_dir);
    pull(j, "run_id", c.run_id);
    pull(j, "pool_path", c.pool_path);
    pull(j, "bags_path", c.bags_path);
    return c;
}

json RunConfig::to_json() const {
    json j;
    j["task"] = task;
    j["m"] = m;
    j["sigma"] = sigma;
    j["n_bags"] = n_bags;
    j["k_outliers"] = k_outliers;
    j["n"] = n;
    j["h"] = h;
    j["d"] = d;
    j["pooling"] = pooling;
    j["mi_hidden"] = mi_hidden;
    j["mi_heads"] = mi_heads;
    j["mi_alpha"] = mi_alpha;
    j["mi_beta"] = mi_beta;
    j["mi_gamma"] = mi_gamma;
    j["mi_batch"] = mi_batch;
    j["lr"] = lr;
    j["beta1"] = beta1;
    j["beta2"] = beta2;
    j["eps"] = eps;
    j["weight_decay"] = weight_decay;
    j["epochs"] = epochs;
    j["batch_bags"] = batch_bags;
    j["shuffle_instances"] = shuffle_instances;
    j["patience"] = patience;
    j["val_fraction"] = val_fraction;
    j["seed"] = seed;
    j["out_dir"] = out_dir;
    j["run_id"] = run_id;
    j["pool_path"] = pool_path;
    j["bags_path"] = bags_path;
    return j;
}

void RunConfig::validate() const {
    scenario().validate();
    model_config().validate();
    train_config().validate();
    if (val_fraction < 0.0 || val_fraction >= 1.0)
        throw ContractError("val_fraction must lie in [0, 1)");
}

ScenarioKind RunConfig::scenario_kind() const { return scenario_from_string(task); }

ScenarioSpec RunConfig::scenario() const {
    ScenarioSpec spec;
    spec.kind = scenario_kind();
    spec.witnesses = default_witnesses(spec.kind);
    spec.mean_cardinality = m;
    spec.std_cardinality = sigma;
    spec.n_bags = n_bags;
    spec.seed = derive_seed(seed, "data");
    spec.outlier_k = k_outliers;
    return spec;
}

ModelConfig RunConfig::model_config() const {
    ModelConfig mc;
    mc.idu.feature_dim = n;
    mc.pooling = pooling_from_string(pooling);
    mc.hidden_dim = h;
    mc.attn_dim = d;
    mc.head = scenario_kind() == ScenarioKind::counting ? HeadKind::regressor
                                                        : HeadKind::classifier;
    mc.mi_heads = mi_heads;
    mc.mi_hidden = mi_hidden;
    return mc;
}

TrainConfig RunConfig::train_config() const {
    TrainConfig tc;
    tc.lr = lr;
    tc.beta1 = beta1;
    tc.beta2 = beta2;
    tc.eps = eps;
    tc.weight_decay = weight_decay;
    tc.epochs = epochs;
    tc.batch_bags = batch_bags;
    tc.shuffle_instances = shuffle_instances;
    tc.seed = derive_seed(seed, "shuffle");
    tc.mi = MiWeights{mi_alpha, mi_beta, mi_gamma};
    tc.mi_batch = mi_batch;
    tc.patience = patience;
    return tc;
}

uint64_t RunConfig::init_seed() const { return derive_seed(seed, "init"); }
uint64_t RunConfig::eval_seed() const { return derive_seed(seed, "eval"); }

std::string RunConfig::effective_run_id() const {
    if (!run_id.empty()) return run_id;
    return task + "-s" + std::to_string(seed);
}

uint64_t RunConfig::hash() const { return fnv1a64(to_json().dump()); }

std::string RunConfig::hash_hex() const {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(hash()));
    return buf;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open config: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw FormatError("config parse failed: " + path + ": " + e.what());
    }
    return RunConfig::from_json(j);
}

void save_run_config(const std::string& path, const RunConfig& cfg) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError("cannot open for writing: " + path);
    out << cfg.to_json().dump(2) << "\n";
    if (!out) throw FormatError("write failed: " + path);
}

}  // namespace milstm
