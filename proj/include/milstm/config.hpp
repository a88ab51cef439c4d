#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "milstm/evaluation.hpp"

namespace milstm {

// flat run description; one JSON document drives every command so experiments
// stay diffable. Unknown keys are rejected, every field has a default.
struct RunConfig {
    std::string task = "single_digit";

    // scenario
    double m = 10.0;
    double sigma = 2.0;
    size_t n_bags = 1000;
    int k_outliers = 1;

    // model dims
    size_t n = 500;  // instance feature width
    size_t h = 500;  // recurrent hidden width per direction
    size_t d = 128;  // attention width
    std::string pooling = "bilstm";
    size_t mi_hidden = 256;
    bool mi_heads = true;

    // mutual-information regularizer
    double mi_alpha = 0.5;
    double mi_beta = 1.0;
    double mi_gamma = 0.1;
    size_t mi_batch = 32;

    // optimizer schedule
    double lr = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
    size_t epochs = 50;
    size_t batch_bags = 1;
    bool shuffle_instances = true;
    size_t patience = 20;
    double val_fraction = 0.0;  // tail share of training bags held out

    uint64_t seed = 1;

    // paths
    std::string out_dir = "runs";
    std::string run_id;  // empty -> "<task>-s<seed>"
    std::string pool_path = "pool.bin";
    std::string bags_path = "bags.bin";

    static RunConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
    void validate() const;

    // component views; sub-streams are labeled off the single run seed so
    // data, init, shuffling, and evaluation can be varied independently
    ScenarioKind scenario_kind() const;
    ScenarioSpec scenario() const;       // seed label "data"
    ModelConfig model_config() const;    // head kind follows the task
    TrainConfig train_config() const;    // seed label "shuffle"
    uint64_t init_seed() const;          // seed label "init"
    uint64_t eval_seed() const;          // seed label "eval"

    std::string effective_run_id() const;
    uint64_t hash() const;
    std::string hash_hex() const;
};

RunConfig load_run_config(const std::string& path);
void save_run_config(const std::string& path, const RunConfig& cfg);

}  // namespace milstm
