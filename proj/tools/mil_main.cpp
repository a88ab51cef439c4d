#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "milstm.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

[[noreturn]] void die(int code) {
    std::cerr << "error: " << mil_last_error() << "\n";
    std::exit(code);
}

void check(int rc) {
    if (rc != MIL_OK) die(rc);
}

// takes ownership of the C string
json take_json(char* s) {
    json j = json::parse(s);
    mil_string_free(s);
    return j;
}

std::string take_string(char* s) {
    std::string out = s;
    mil_string_free(s);
    return out;
}

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        std::cerr << "error: cannot open " << path << "\n";
        std::exit(MIL_ERR_INPUT);
    }
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        std::cerr << "error: " << path << ": " << e.what() << "\n";
        std::exit(MIL_ERR_INPUT);
    }
    return j;
}

void write_file(const std::string& path, const std::string& text) {
    if (fs::path(path).has_parent_path())
        fs::create_directories(fs::path(path).parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        std::cerr << "error: cannot write " << path << "\n";
        std::exit(MIL_ERR_INPUT);
    }
    out << text;
    if (text.empty() || text.back() != '\n') out << "\n";
}

// content fingerprint for cache artifacts (FNV-1a over the raw bytes)
std::string file_fnv_hex(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        std::cerr << "error: cannot open " << path << "\n";
        std::exit(MIL_ERR_INPUT);
    }
    uint64_t h = 14695981039346656037ull;
    char buf[1 << 16];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ull;
        }
        if (in.eof()) break;
    }
    char hex[17];
    std::snprintf(hex, sizeof(hex), "%016llx",
                  static_cast<unsigned long long>(h));
    return hex;
}

// shared config plumbing: optional file, flag overrides on top, then the
// library canonicalizes and fingerprints the result
struct ConfigFlags {
    std::string config_path;
    std::string task, pooling, run_id, out_dir, bags_path, pool_path;
    double m = 0, sigma = 0, lr = 0, val_fraction = 0;
    uint64_t seed = 0;
    size_t n_bags = 0, epochs = 0;
    int k_outliers = 0;

    CLI::Option* o_task = nullptr;
    CLI::Option* o_pooling = nullptr;
    CLI::Option* o_run_id = nullptr;
    CLI::Option* o_out_dir = nullptr;
    CLI::Option* o_bags = nullptr;
    CLI::Option* o_pool = nullptr;
    CLI::Option* o_m = nullptr;
    CLI::Option* o_sigma = nullptr;
    CLI::Option* o_lr = nullptr;
    CLI::Option* o_val = nullptr;
    CLI::Option* o_seed = nullptr;
    CLI::Option* o_n = nullptr;
    CLI::Option* o_epochs = nullptr;
    CLI::Option* o_k = nullptr;

    void attach(CLI::App* cmd, bool scenario, bool training) {
        cmd->add_option("--config", config_path, "run config JSON file");
        o_seed = cmd->add_option("--seed", seed, "run seed");
        if (scenario) {
            o_task = cmd->add_option("--task", task,
                                     "single_digit|multi_digit|counting|outlier");
            o_n = cmd->add_option("--n", n_bags, "number of bags");
            o_m = cmd->add_option("--m", m, "mean bag cardinality");
            o_sigma = cmd->add_option("--sigma", sigma, "cardinality std");
            o_k = cmd->add_option("--k-outliers", k_outliers,
                                  "outlier instances per positive bag");
        }
        if (training) {
            o_pooling = cmd->add_option(
                "--pooling", pooling, "bilstm|attention|gated_attention|mean|max");
            o_epochs = cmd->add_option("--epochs", epochs, "training epochs");
            o_lr = cmd->add_option("--lr", lr, "learning rate");
            o_val = cmd->add_option("--val-fraction", val_fraction,
                                    "tail share of bags held out for validation");
            o_run_id = cmd->add_option("--run-id", run_id, "artifact directory name");
            o_out_dir = cmd->add_option("--out-dir", out_dir, "artifact root");
            o_bags = cmd->add_option("--bags", bags_path, "bag cache to train on");
        }
    }

    json document() const {
        json cfg = config_path.empty() ? json::object()
                                       : read_json_file(config_path);
        auto set = [&](CLI::Option* o, const char* key, const json& v) {
            if (o && o->count()) cfg[key] = v;
        };
        set(o_task, "task", task);
        set(o_pooling, "pooling", pooling);
        set(o_run_id, "run_id", run_id);
        set(o_out_dir, "out_dir", out_dir);
        set(o_bags, "bags_path", bags_path);
        set(o_pool, "pool_path", pool_path);
        set(o_m, "m", m);
        set(o_sigma, "sigma", sigma);
        set(o_lr, "lr", lr);
        set(o_val, "val_fraction", val_fraction);
        set(o_seed, "seed", seed);
        set(o_n, "n_bags", n_bags);
        set(o_epochs, "epochs", epochs);
        set(o_k, "k_outliers", k_outliers);
        return cfg;
    }
};

struct EffectiveConfig {
    json doc;
    std::string text;
    std::string hash;
};

EffectiveConfig normalize(const ConfigFlags& flags) {
    std::string merged = flags.document().dump();
    char* canonical = nullptr;
    char* hash = nullptr;
    check(mil_config_normalize(merged.c_str(), &canonical, &hash));
    EffectiveConfig out;
    out.text = take_string(canonical);
    out.doc = json::parse(out.text);
    out.hash = take_string(hash);
    return out;
}

json envelope(const EffectiveConfig& cfg) {
    json j;
    j["tool_version"] = mil_version();
    j["config_hash"] = cfg.hash;
    j["seed"] = cfg.doc["seed"];
    return j;
}

std::string pool_file(const std::string& dir, const std::string& split,
                      const char* kind) {
    return dir + "/" + split + "-" + kind;
}

mil_pool* load_pool(const std::string& dir, const std::string& split) {
    mil_pool* pool = nullptr;
    check(mil_pool_from_idx(pool_file(dir, split, "images-idx3-ubyte").c_str(),
                            pool_file(dir, split, "labels-idx1-ubyte").c_str(),
                            split.c_str(), &pool));
    return pool;
}

json pool_to_disk(mil_pool* pool, const std::string& dir,
                  const std::string& split) {
    fs::create_directories(dir);
    check(mil_pool_save(pool,
                        pool_file(dir, split, "images-idx3-ubyte").c_str(),
                        pool_file(dir, split, "labels-idx1-ubyte").c_str()));
    char* manifest = nullptr;
    check(mil_pool_manifest(pool, &manifest));
    return take_json(manifest);
}

mil_model* load_model(const std::string& path) {
    mil_model* model = nullptr;
    check(mil_model_load(path.c_str(), &model));
    return model;
}

mil_bagset* load_bagset(const std::string& path) {
    mil_bagset* bags = nullptr;
    check(mil_bags_load(path.c_str(), &bags));
    return bags;
}

int progress_line(size_t epoch, double train_loss, double train_error,
                  double val_loss, double val_error, void*) {
    // 1-based, matching the history entries in results.json
    std::cerr << "epoch " << epoch + 1 << "  loss " << train_loss << "  err "
              << train_error << "%  val_loss " << val_loss << "  val_err "
              << val_error << "%\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multiple-instance learning over bags of digit images"};
    app.require_subcommand(1);

    // data prepare
    CLI::App* data = app.add_subcommand("data", "instance pool management");
    data->require_subcommand(1);
    CLI::App* prepare =
        data->add_subcommand("prepare", "cache a validated instance pool");
    std::string mnist_dir, prep_out = "data";
    size_t synthetic = 0;
    uint64_t prep_seed = 1;
    CLI::Option* o_mnist =
        prepare->add_option("--mnist-dir", mnist_dir, "directory with IDX files");
    CLI::Option* o_synth = prepare->add_option(
        "--synthetic", synthetic, "per-class count for the drawn glyph corpus");
    prepare->add_option("--seed", prep_seed, "glyph corpus seed");
    prepare->add_option("--out-dir", prep_out, "pool cache directory");
    o_mnist->excludes(o_synth);

    // bags generate
    CLI::App* bags_cmd = app.add_subcommand("bags", "bag sampling");
    bags_cmd->require_subcommand(1);
    CLI::App* generate =
        bags_cmd->add_subcommand("generate", "sample bags for one scenario");
    ConfigFlags gen_flags;
    gen_flags.attach(generate, true, false);
    std::string gen_pool = "data", gen_split = "train", gen_out = "bags.bin";
    generate->add_option("--pool", gen_pool, "pool cache directory");
    generate->add_option("--split", gen_split, "pool split to draw from");
    generate->add_option("--out", gen_out, "bag cache file");

    // train
    CLI::App* train_cmd = app.add_subcommand("train", "fit a model on cached bags");
    ConfigFlags train_flags;
    train_flags.attach(train_cmd, true, true);
    bool quiet = false;
    train_cmd->add_flag("--quiet", quiet, "suppress per-epoch lines");

    // eval
    CLI::App* eval_cmd = app.add_subcommand("eval", "score a checkpoint on bags");
    ConfigFlags eval_flags;
    eval_flags.attach(eval_cmd, false, false);
    std::string eval_ckpt, eval_bags, eval_out = "results.json";
    std::string eval_pool = "data", eval_split = "test";
    size_t n_perm = 0;
    std::vector<int> cardinalities;
    bool finetune = false;
    eval_cmd->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
    eval_cmd->add_option("--bags", eval_bags, "bag cache file")->required();
    eval_cmd->add_option("--perm", n_perm,
                         "shuffled evaluation passes (0 = skip)");
    eval_cmd
        ->add_option("--cardinality", cardinalities,
                     "bag sizes for the pair-probe sweep, e.g. 50,100,200")
        ->delimiter(',');
    eval_cmd->add_flag("--finetune", finetune,
                       "adapt a copy of the model per probed size");
    eval_cmd->add_option("--pool", eval_pool,
                         "pool cache directory (pair-probe source)");
    eval_cmd->add_option("--split", eval_split, "pool split for pair probes");
    eval_cmd->add_option("--out", eval_out, "results file");

    // cluster
    CLI::App* cluster_cmd =
        app.add_subcommand("cluster", "k-means over singleton representations");
    ConfigFlags cluster_flags;
    cluster_flags.attach(cluster_cmd, false, false);
    std::string cl_ckpt, cl_bags, cl_k = "auto", cl_out = "results.json";
    std::string cl_features;
    cluster_cmd->add_option("--ckpt", cl_ckpt, "checkpoint file")->required();
    cluster_cmd->add_option("--bags", cl_bags, "bag cache file")->required();
    cluster_cmd->add_option("--k", cl_k, "cluster count or 'auto'");
    cluster_cmd->add_option("--features-out", cl_features,
                            "also write the singleton features CSV here");
    cluster_cmd->add_option("--out", cl_out, "results file");

    // export-states
    CLI::App* states_cmd =
        app.add_subcommand("export-states", "dump per-step hidden states");
    std::string st_ckpt, st_bags, st_out = "states.csv";
    states_cmd->add_option("--ckpt", st_ckpt, "checkpoint file")->required();
    states_cmd->add_option("--bags", st_bags, "bag cache file")->required();
    states_cmd->add_option("--out", st_out, "states CSV file");

    // instance-eval
    CLI::App* inst_cmd = app.add_subcommand(
        "instance-eval", "score witness singletons against the rest");
    ConfigFlags inst_flags;
    inst_flags.attach(inst_cmd, false, false);
    std::string in_ckpt, in_bags, in_out = "results.json";
    inst_cmd->add_option("--ckpt", in_ckpt, "checkpoint file")->required();
    inst_cmd->add_option("--bags", in_bags, "bag cache file")->required();
    inst_cmd->add_option("--out", in_out, "results file");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : MIL_ERR_INPUT;
    }

    if (prepare->parsed()) {
        if (!o_mnist->count() && !o_synth->count()) {
            std::cerr << "error: need --mnist-dir or --synthetic\n";
            return MIL_ERR_INPUT;
        }
        json manifest;
        manifest["tool_version"] = mil_version();
        manifest["seed"] = prep_seed;
        if (o_synth->count()) {
            manifest["source"] = "synthetic";
            manifest["per_class"] = synthetic;
            for (const std::string& split : {"train", "test"}) {
                mil_pool* pool = nullptr;
                // disjoint draw for the held-out split
                uint64_t seed = split == std::string("train") ? prep_seed
                                                              : prep_seed + 1;
                check(mil_pool_synthetic(synthetic, seed, &pool));
                manifest["splits"][split] = pool_to_disk(pool, prep_out, split);
                manifest["splits"][split]["split"] = split;
                mil_pool_free(pool);
            }
        } else {
            manifest["source"] = mnist_dir;
            const char* names[2][3] = {
                {"train", "train-images-idx3-ubyte", "train-labels-idx1-ubyte"},
                {"test", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"}};
            for (auto& row : names) {
                mil_pool* pool = nullptr;
                check(mil_pool_from_idx((mnist_dir + "/" + row[1]).c_str(),
                                        (mnist_dir + "/" + row[2]).c_str(),
                                        row[0], &pool));
                manifest["splits"][row[0]] = pool_to_disk(pool, prep_out, row[0]);
                mil_pool_free(pool);
            }
        }
        write_file(prep_out + "/manifest.json", manifest.dump(2));
        std::cout << manifest.dump(2) << "\n";
        return 0;
    }

    if (generate->parsed()) {
        EffectiveConfig cfg = normalize(gen_flags);
        mil_pool* pool = load_pool(gen_pool, gen_split);
        mil_bagset* bags = nullptr;
        check(mil_bags_generate(pool, cfg.text.c_str(), &bags));
        check(mil_bags_save(bags, gen_out.c_str()));
        char* summary = nullptr;
        check(mil_bags_summary(bags, &summary));
        json report = envelope(cfg);
        report["summary"] = take_json(summary);
        report["cache"] = gen_out;
        report["cache_fnv"] = file_fnv_hex(gen_out);
        write_file(gen_out + ".summary.json", report.dump(2));
        std::cout << report.dump(2) << "\n";
        mil_bags_free(bags);
        mil_pool_free(pool);
        return 0;
    }

    if (train_cmd->parsed()) {
        EffectiveConfig cfg = normalize(train_flags);
        std::string run_dir = cfg.doc["out_dir"].get<std::string>() + "/" +
                              cfg.doc["run_id"].get<std::string>();
        mil_bagset* bags = load_bagset(cfg.doc["bags_path"]);
        mil_model* model = nullptr;
        check(mil_model_create(cfg.text.c_str(), &model));
        char* history = nullptr;
        check(mil_model_train(model, bags, cfg.text.c_str(),
                              quiet ? nullptr : progress_line, nullptr,
                              &history));
        fs::create_directories(run_dir);
        check(mil_model_save(model, (run_dir + "/checkpoint.bin").c_str()));
        write_file(run_dir + "/config.json", cfg.text);
        json results = envelope(cfg);
        results["task"] = cfg.doc["task"];
        results["command"] = "train";
        results["history"] = take_json(history);
        write_file(run_dir + "/results.json", results.dump(2));
        std::cout << run_dir << "/checkpoint.bin\n";
        mil_model_free(model);
        mil_bags_free(bags);
        return 0;
    }

    if (eval_cmd->parsed()) {
        EffectiveConfig cfg = normalize(eval_flags);
        mil_model* model = load_model(eval_ckpt);
        mil_bagset* bags = load_bagset(eval_bags);
        json results = envelope(cfg);
        results["task"] = mil_model_task(model);
        results["command"] = "eval";
        results["checkpoint"] = eval_ckpt;
        results["bags"] = eval_bags;
        char* out = nullptr;
        check(mil_eval_metrics(model, bags, &out));
        results["metrics"] = take_json(out);
        if (n_perm > 0) {
            check(mil_eval_permutations(model, bags, n_perm,
                                        cfg.doc["seed"].get<uint64_t>(), &out));
            results["permutation"] = take_json(out);
        }
        if (!cardinalities.empty()) {
            mil_pool* pool = load_pool(eval_pool, eval_split);
            check(mil_eval_cardinality(model, pool, cardinalities.data(),
                                       cardinalities.size(), finetune ? 1 : 0,
                                       cfg.text.c_str(), &out));
            results["cardinality"] = take_json(out);
            mil_pool_free(pool);
        }
        write_file(eval_out, results.dump(2));
        std::cout << results.dump(2) << "\n";
        mil_model_free(model);
        mil_bags_free(bags);
        return 0;
    }

    if (cluster_cmd->parsed()) {
        EffectiveConfig cfg = normalize(cluster_flags);
        size_t k = 0;
        if (cl_k != "auto") {
            try {
                k = std::stoul(cl_k);
            } catch (const std::exception&) {
                std::cerr << "error: --k wants a number or 'auto'\n";
                return MIL_ERR_INPUT;
            }
        }
        mil_model* model = load_model(cl_ckpt);
        mil_bagset* bags = load_bagset(cl_bags);
        char* out = nullptr;
        check(mil_cluster(model, bags, k, cfg.doc["seed"].get<uint64_t>(), &out));
        json results = envelope(cfg);
        results["task"] = mil_model_task(model);
        results["command"] = "cluster";
        results["clusters"] = take_json(out);
        if (!cl_features.empty()) {
            check(mil_export_features(model, bags, cl_features.c_str(), &out));
            results["features"] = take_json(out);
        }
        write_file(cl_out, results.dump(2));
        std::cout << results.dump(2) << "\n";
        mil_model_free(model);
        mil_bags_free(bags);
        return 0;
    }

    if (states_cmd->parsed()) {
        mil_model* model = load_model(st_ckpt);
        mil_bagset* bags = load_bagset(st_bags);
        check(mil_export_states(model, bags, st_out.c_str()));
        std::cout << st_out << "\n";
        mil_model_free(model);
        mil_bags_free(bags);
        return 0;
    }

    if (inst_cmd->parsed()) {
        EffectiveConfig cfg = normalize(inst_flags);
        mil_model* model = load_model(in_ckpt);
        mil_bagset* bags = load_bagset(in_bags);
        char* out = nullptr;
        check(mil_instance_eval(model, bags, &out));
        json results = envelope(cfg);
        results["task"] = mil_model_task(model);
        results["command"] = "instance-eval";
        results["instances"] = take_json(out);
        write_file(in_out, results.dump(2));
        std::cout << results.dump(2) << "\n";
        mil_model_free(model);
        mil_bags_free(bags);
        return 0;
    }

    return 0;
}
