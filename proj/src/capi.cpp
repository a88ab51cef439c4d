#include "milstm.h"

#include <cstdlib>
#include <cstring>
#include <string>
#include <vector>

#include <json.hpp>

#include "milstm/config.hpp"

using nlohmann::json;

struct mil_pool {
    milstm::InstancePool pool;
};

struct mil_bagset {
    milstm::ScenarioSpec spec;
    std::vector<milstm::Bag> bags;
    std::string task;
};

struct mil_model {
    milstm::MilModel model;
    milstm::TrainConfig train;
    std::string task;
    size_t epoch = 0;
    std::vector<uint64_t> rng_state;
};

namespace {

thread_local std::string g_error;

int fail(int code, const std::string& msg) {
    g_error = msg;
    return code;
}

template <typename F>
int guard(F&& f) {
    using namespace milstm;
    try {
        f();
        return MIL_OK;
    } catch (const CompatError& e) {
        return fail(MIL_ERR_COMPAT, e.what());
    } catch (const GenerationError& e) {
        return fail(MIL_ERR_GENERATION, e.what());
    } catch (const NumericError& e) {
        return fail(MIL_ERR_NUMERIC, e.what());
    } catch (const DimensionError& e) {
        return fail(MIL_ERR_NUMERIC, e.what());
    } catch (const FormatError& e) {
        return fail(MIL_ERR_INPUT, e.what());
    } catch (const ContractError& e) {
        return fail(MIL_ERR_INPUT, e.what());
    } catch (const std::exception& e) {
        return fail(MIL_ERR_NUMERIC, e.what());
    }
}

char* dup_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (out) std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

int require(bool ok, const char* what) {
    return ok ? MIL_OK : fail(MIL_ERR_INPUT, std::string("null ") + what);
}

milstm::RunConfig parse_config(const char* text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw milstm::FormatError(std::string("config parse failed: ") + e.what());
    }
    return milstm::RunConfig::from_json(j);
}

int check_tasks(const mil_model* model, const mil_bagset* bags) {
    if (model->task.empty() || model->task == bags->task) return MIL_OK;
    return fail(MIL_ERR_COMPAT, "checkpoint task '" + model->task +
                                    "' does not match bag task '" + bags->task +
                                    "'");
}

}  // namespace

extern "C" {

const char* mil_version(void) { return milstm::kToolVersion; }

const char* mil_last_error(void) { return g_error.c_str(); }

void mil_string_free(char* s) { std::free(s); }

int mil_config_normalize(const char* json_text, char** canonical_out,
                         char** hash_hex_out) {
    if (int rc = require(json_text, "config text")) return rc;
    return guard([&] {
        milstm::RunConfig cfg = parse_config(json_text);
        cfg.validate();
        cfg.run_id = cfg.effective_run_id();
        if (canonical_out) *canonical_out = dup_string(cfg.to_json().dump(2));
        if (hash_hex_out) *hash_hex_out = dup_string(cfg.hash_hex());
    });
}

int mil_pool_synthetic(size_t n_per_class, uint64_t seed, mil_pool** out) {
    if (int rc = require(out, "output handle")) return rc;
    return guard([&] {
        auto* handle = new mil_pool{milstm::synth_glyphs(n_per_class, seed)};
        handle->pool.split = "train";
        *out = handle;
    });
}

int mil_pool_from_idx(const char* images_path, const char* labels_path,
                      const char* split, mil_pool** out) {
    if (int rc = require(images_path && labels_path && out, "argument")) return rc;
    return guard([&] {
        auto* handle =
            new mil_pool{milstm::load_mnist_idx(images_path, labels_path)};
        handle->pool.split = split ? split : "train";
        *out = handle;
    });
}

int mil_pool_save(const mil_pool* pool, const char* images_path,
                  const char* labels_path) {
    if (int rc = require(pool && images_path && labels_path, "argument"))
        return rc;
    return guard([&] { milstm::save_idx(images_path, labels_path, pool->pool); });
}

int mil_pool_manifest(const mil_pool* pool, char** json_out) {
    if (int rc = require(pool && json_out, "argument")) return rc;
    return guard([&] {
        const milstm::InstancePool& p = pool->pool;
        std::vector<size_t> per_class(10, 0);
        std::string image_bytes, label_bytes;
        image_bytes.reserve(p.size() * milstm::kImageBytes);
        for (size_t i = 0; i < p.size(); ++i) {
            ++per_class.at(p.labels[i]);
            image_bytes.append(reinterpret_cast<const char*>(p.images[i].data()),
                               p.images[i].size());
            label_bytes.push_back(static_cast<char>(p.labels[i]));
        }
        json j;
        j["split"] = p.split;
        j["size"] = p.size();
        j["per_class"] = per_class;
        j["images_fnv"] = milstm::hex64(milstm::fnv1a64(image_bytes));
        j["labels_fnv"] = milstm::hex64(milstm::fnv1a64(label_bytes));
        *json_out = dup_string(j.dump(2));
    });
}

void mil_pool_free(mil_pool* pool) { delete pool; }

int mil_bags_generate(const mil_pool* pool, const char* config_json,
                      mil_bagset** out) {
    if (int rc = require(pool && config_json && out, "argument")) return rc;
    return guard([&] {
        milstm::RunConfig cfg = parse_config(config_json);
        milstm::ScenarioSpec spec = cfg.scenario();
        spec.validate();
        auto* handle = new mil_bagset;
        handle->spec = spec;
        handle->task = milstm::to_string(spec.kind);
        try {
            handle->bags = milstm::make_bags(spec, pool->pool);
        } catch (...) {
            delete handle;
            throw;
        }
        *out = handle;
    });
}

int mil_bags_save(const mil_bagset* bags, const char* path) {
    if (int rc = require(bags && path, "argument")) return rc;
    return guard([&] { milstm::save_bags(path, bags->spec, bags->bags); });
}

int mil_bags_load(const char* path, mil_bagset** out) {
    if (int rc = require(path && out, "argument")) return rc;
    return guard([&] {
        auto* handle = new mil_bagset;
        try {
            handle->bags = milstm::load_bags(path, &handle->spec);
            handle->task = milstm::to_string(handle->spec.kind);
        } catch (...) {
            delete handle;
            throw;
        }
        *out = handle;
    });
}

int mil_bags_summary(const mil_bagset* bags, char** json_out) {
    if (int rc = require(bags && json_out, "argument")) return rc;
    return guard([&] {
        json cardinality = json::object();
        json targets = json::object();
        size_t positives = 0;
        for (const milstm::Bag& b : bags->bags) {
            std::string m = std::to_string(b.size());
            cardinality[m] = cardinality.value(m, 0) + 1;
            std::string v = std::to_string(b.target.value);
            targets[v] = targets.value(v, 0) + 1;
            if (b.target.kind == milstm::TargetKind::binary)
                positives += b.target.value == 1;
        }
        json j;
        j["task"] = bags->task;
        j["n_bags"] = bags->bags.size();
        j["cardinality_histogram"] = cardinality;
        j["target_histogram"] = targets;
        if (!bags->bags.empty() &&
            bags->bags[0].target.kind == milstm::TargetKind::binary) {
            j["positives"] = positives;
            j["negatives"] = bags->bags.size() - positives;
        }
        *json_out = dup_string(j.dump(2));
    });
}

const char* mil_bags_task(const mil_bagset* bags) {
    return bags ? bags->task.c_str() : "";
}

void mil_bags_free(mil_bagset* bags) { delete bags; }

int mil_model_create(const char* config_json, mil_model** out) {
    if (int rc = require(config_json && out, "argument")) return rc;
    return guard([&] {
        milstm::RunConfig cfg = parse_config(config_json);
        milstm::ModelConfig mc = cfg.model_config();
        mc.validate();
        milstm::Rng rng(cfg.init_seed());
        auto* handle = new mil_model;
        handle->model = milstm::MilModel::init(mc, rng);
        handle->train = cfg.train_config();
        handle->task = cfg.task;
        handle->rng_state = rng.state();
        *out = handle;
    });
}

int mil_model_load(const char* path, mil_model** out) {
    if (int rc = require(path && out, "argument")) return rc;
    return guard([&] {
        milstm::Checkpoint ck = milstm::load_checkpoint(path);
        auto* handle = new mil_model;
        handle->model = std::move(ck.model);
        handle->train = ck.train;
        handle->task = ck.task;
        handle->epoch = ck.epoch;
        handle->rng_state = ck.rng_state;
        *out = handle;
    });
}

int mil_model_save(const mil_model* model, const char* path) {
    if (int rc = require(model && path, "argument")) return rc;
    return guard([&] {
        milstm::save_checkpoint(path, model->model, model->train, model->epoch,
                                model->rng_state, model->task);
    });
}

const char* mil_model_task(const mil_model* model) {
    return model ? model->task.c_str() : "";
}

int mil_model_train(mil_model* model, const mil_bagset* bags,
                    const char* config_json, mil_progress_cb cb, void* user,
                    char** history_json_out) {
    if (int rc = require(model && bags && config_json, "argument")) return rc;
    return guard([&] {
        milstm::RunConfig cfg = parse_config(config_json);
        milstm::TrainConfig tc = cfg.train_config();
        if (!model->task.empty() && model->task != cfg.task)
            throw milstm::CompatError("checkpoint task '" + model->task +
                                      "' does not match config task '" +
                                      cfg.task + "'");
        if (bags->task != cfg.task)
            throw milstm::CompatError("bag task '" + bags->task +
                                      "' does not match config task '" +
                                      cfg.task + "'");

        size_t n_val = static_cast<size_t>(
            cfg.val_fraction * static_cast<double>(bags->bags.size()));
        std::vector<milstm::Bag> train_bags(bags->bags.begin(),
                                            bags->bags.end() - n_val);
        std::vector<milstm::Bag> val_bags(bags->bags.end() - n_val,
                                          bags->bags.end());

        milstm::ProgressFn progress;
        if (cb)
            progress = [&](size_t epoch, const milstm::EpochStats& es) {
                return cb(epoch, es.train_loss, es.train_error, es.val_loss,
                          es.val_error, user) == 0;
            };
        milstm::TrainResult res =
            milstm::train(model->model, train_bags, val_bags, tc, progress);
        model->train = tc;
        model->task = cfg.task;
        model->epoch = res.best_epoch;
        model->rng_state = milstm::Rng(tc.seed).state();

        if (history_json_out) {
            json epochs = json::array();
            for (size_t e = 0; e < res.history.size(); ++e) {
                const milstm::EpochStats& es = res.history[e];
                epochs.push_back(json{{"epoch", e + 1},
                                      {"train_loss", es.train_loss},
                                      {"train_error", es.train_error},
                                      {"val_loss", es.val_loss},
                                      {"val_error", es.val_error}});
            }
            json j;
            j["best_epoch"] = res.best_epoch;
            j["best_val_error"] = res.best_val_error;
            j["steps"] = res.steps;
            j["train_bags"] = train_bags.size();
            j["val_bags"] = val_bags.size();
            j["epochs"] = epochs;
            *history_json_out = dup_string(j.dump(2));
        }
    });
}

void mil_model_free(mil_model* model) { delete model; }

int mil_eval_metrics(const mil_model* model, const mil_bagset* bags,
                     char** json_out) {
    if (int rc = require(model && bags && json_out, "argument")) return rc;
    if (int rc = check_tasks(model, bags)) return rc;
    return guard([&] {
        milstm::MetricBundle mb = milstm::error_rate(model->model, bags->bags);
        json j;
        j["error_rate"] = mb.error_rate;
        j["accuracy"] = mb.accuracy;
        j["f1"] = mb.f1;
        j["counts"] = json{{"tp", mb.counts.tp},     {"tn", mb.counts.tn},
                           {"fp", mb.counts.fp},     {"fn", mb.counts.fn},
                           {"correct", mb.counts.correct},
                           {"total", mb.counts.total}};
        *json_out = dup_string(j.dump(2));
    });
}

int mil_eval_permutations(const mil_model* model, const mil_bagset* bags,
                          size_t n_perm, uint64_t seed, char** json_out) {
    if (int rc = require(model && bags && json_out, "argument")) return rc;
    if (int rc = check_tasks(model, bags)) return rc;
    return guard([&] {
        milstm::PermutationReport rep =
            milstm::permutation_robustness(model->model, bags->bags, n_perm, seed);
        json j;
        j["n_perm"] = n_perm;
        j["unshuffled_error"] = rep.unshuffled_error;
        j["mean"] = rep.error.mean;
        j["std"] = rep.error.std;
        j["per_perm"] = rep.per_perm;
        *json_out = dup_string(j.dump(2));
    });
}

int mil_eval_cardinality(const mil_model* model, const mil_pool* pool,
                         const int* sizes, size_t n_sizes, int finetune,
                         const char* config_json, char** json_out) {
    if (int rc = require(model && pool && sizes && config_json && json_out,
                         "argument"))
        return rc;
    if (n_sizes == 0) return fail(MIL_ERR_INPUT, "no cardinalities given");
    return guard([&] {
        milstm::RunConfig cfg = parse_config(config_json);
        milstm::CardinalityOptions opt;
        opt.test_bags = cfg.n_bags;
        opt.finetune = finetune != 0;
        opt.finetune_bags = std::max<size_t>(1, cfg.n_bags / 5);
        opt.finetune_train = cfg.train_config();
        opt.seed = cfg.eval_seed();
        std::vector<int> size_list(sizes, sizes + n_sizes);
        std::vector<milstm::CardinalityPoint> pts = milstm::cardinality_generalization(
            model->model, pool->pool, size_list, opt);
        json rows = json::array();
        for (const milstm::CardinalityPoint& p : pts) {
            json row{{"cardinality", p.cardinality}, {"error", p.error}};
            if (p.finetuned) row["finetuned_error"] = p.finetuned_error;
            rows.push_back(row);
        }
        json j;
        j["finetune"] = opt.finetune;
        j["test_bags"] = opt.test_bags;
        j["sizes"] = rows;
        *json_out = dup_string(j.dump(2));
    });
}

int mil_cluster(const mil_model* model, const mil_bagset* bags, size_t k,
                uint64_t seed, char** json_out) {
    if (int rc = require(model && bags && json_out, "argument")) return rc;
    if (int rc = check_tasks(model, bags)) return rc;
    return guard([&] {
        milstm::ScenarioKind kind = bags->spec.kind;
        size_t k_eff = k ? k : milstm::clusters_for_task(kind);
        milstm::SingletonFeatures sf =
            milstm::singleton_features(model->model, bags->bags);
        milstm::KmeansResult km = milstm::kmeans(sf.S, k_eff, seed);
        std::vector<int> labels = milstm::task_cluster_labels(kind, sf.labels);
        milstm::ClusterReport rep =
            milstm::cluster_purity(km.assignment, labels, k_eff);
        json j;
        j["k"] = k_eff;
        j["instances"] = sf.labels.size();
        j["avg_purity"] = rep.avg_purity;
        j["per_cluster"] = rep.per_cluster;
        j["sizes"] = rep.sizes;
        j["empty_clusters"] = rep.empty_clusters;
        j["sse"] = km.sse;
        *json_out = dup_string(j.dump(2));
    });
}

int mil_instance_eval(const mil_model* model, const mil_bagset* bags,
                      char** json_out) {
    if (int rc = require(model && bags && json_out, "argument")) return rc;
    if (int rc = check_tasks(model, bags)) return rc;
    if (bags->spec.witnesses.empty())
        return fail(MIL_ERR_INPUT, "scenario '" + bags->task +
                                       "' has no witness classes to score");
    return guard([&] {
        milstm::InstanceReport rep = milstm::instance_eval(
            model->model, bags->bags, bags->spec.witnesses);
        json j;
        j["tp_rate"] = rep.tp_rate;
        j["tn_rate"] = rep.tn_rate;
        j["mean_acc"] = rep.mean_acc;
        j["positives"] = rep.positives;
        j["negatives"] = rep.negatives;
        *json_out = dup_string(j.dump(2));
    });
}

int mil_export_features(const mil_model* model, const mil_bagset* bags,
                        const char* csv_path, char** json_out) {
    if (int rc = require(model && bags && csv_path, "argument")) return rc;
    if (int rc = check_tasks(model, bags)) return rc;
    return guard([&] {
        milstm::SingletonFeatures sf =
            milstm::singleton_features(model->model, bags->bags);
        milstm::write_features_csv(csv_path, sf);
        if (json_out) {
            json j;
            j["rows"] = sf.S.extent(0);
            j["dims"] = sf.S.extent(1);
            j["path"] = csv_path;
            *json_out = dup_string(j.dump(2));
        }
    });
}

int mil_export_states(const mil_model* model, const mil_bagset* bags,
                      const char* csv_path) {
    if (int rc = require(model && bags && csv_path, "argument")) return rc;
    if (int rc = check_tasks(model, bags)) return rc;
    return guard(
        [&] { milstm::write_states_csv(csv_path, model->model, bags->bags); });
}

}  // extern "C"
