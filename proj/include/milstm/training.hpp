#pragma once

#include <functional>
#include <string>
#include <vector>

#include "milstm/datasets.hpp"
#include "milstm/encoders.hpp"
#include "milstm/mi_loss.hpp"
#include "milstm/pooling.hpp"

namespace milstm {

enum class PoolingKind { bilstm, attention, gated_attention, mean, max };
std::string to_string(PoolingKind k);
PoolingKind pooling_from_string(const std::string& s);

enum class HeadKind { classifier, regressor };
std::string to_string(HeadKind k);
HeadKind head_from_string(const std::string& s);

// g(.): affine map from the bag vector to one scalar. The classifier variant
// emits a logit; sigmoid is applied at prediction time so the loss can use the
// stable log-sum-exp form.
struct HeadParams {
    HeadKind kind = HeadKind::classifier;
    Tensor w;  // [in]
    Tensor b;  // [1]

    static HeadParams init(HeadKind kind, size_t in_dim, Rng& rng);

    template <class Fn>
    void visit(Fn&& fn) {
        fn("head.w", w);
        fn("head.b", b);
    }
};

struct ModelConfig {
    IduConfig idu;  // feature width n lives here
    PoolingKind pooling = PoolingKind::bilstm;
    size_t hidden_dim = 500;  // h, bilstm only
    size_t attn_dim = 128;    // d, attention heads only
    HeadKind head = HeadKind::classifier;
    bool mi_heads = true;  // allocate the MI scoring heads
    size_t mi_hidden = 256;

    size_t bag_dim() const;  // 2h for bilstm, n otherwise
    MiConfig mi_config() const;
    void validate() const;
};

struct MilModel {
    ModelConfig cfg;
    IduParams idu;
    LstmParams lstm;       // bilstm pooling
    AttentionParams attn;  // attention / gated_attention pooling
    HeadParams head;
    MiHeads mi;  // when cfg.mi_heads

    static MilModel init(const ModelConfig& cfg, Rng& rng);

    // every parameter tensor of the active architecture, in a fixed
    // declaration order shared by the optimizer state and the checkpoint file
    template <class Fn>
    void visit(Fn&& fn) {
        idu.visit(fn);
        if (cfg.pooling == PoolingKind::bilstm) lstm.visit(fn);
        if (cfg.pooling == PoolingKind::attention ||
            cfg.pooling == PoolingKind::gated_attention)
            attn.visit(fn);
        head.visit(fn);
        if (cfg.mi_heads) mi.visit(fn);
    }
    template <class Fn>
    void visit(Fn&& fn) const {
        const_cast<MilModel*>(this)->visit([&](const char* name, Tensor& v) {
            fn(name, static_cast<const Tensor&>(v));
        });
    }

    size_t param_count() const;  // total scalar count
};

// per-tape handles for one forward/backward pass
struct ModelVars {
    IduVars idu;
    LstmVars lstm;
    AttentionVars attn;
    Var head_w, head_b;
    MiVars mi;
};

// with_mi=false skips the MI head leaves; forward-only passes never read them
ModelVars model_leaves(Tape& t, const MilModel& m, bool trainable,
                       bool with_mi = true);

// leaf handles in MilModel::visit order, for zipping with parameter tensors
std::vector<Var> flat_vars(const ModelVars& v, const ModelConfig& cfg);

// pooling + prediction head applied to an existing feature matrix [m x n]
Var pool_bag(Tape& t, const ModelVars& v, const ModelConfig& cfg, Var F,
             std::vector<LstmState>* trace = nullptr);
Var head_out(Tape& t, const ModelVars& v, Var S);

struct BagForward {
    Var F;    // [m x n] instance features
    Var S;    // bag representation
    Var out;  // scalar logit (classifier) or raw count (regressor)
    std::vector<Var> locals;       // conv2 grids when requested
    std::vector<LstmState> trace;  // bilstm forward-direction states
};

BagForward bag_forward(Tape& t, const ModelVars& v, const ModelConfig& cfg,
                       const Bag& bag, bool want_local);

// stable BCE from the logit for classifiers, squared error for regressors
Var task_loss(Tape& t, Var out, const BagTarget& target, HeadKind head);

struct TrainConfig {
    double lr = 5e-4;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double weight_decay = 1e-4;  // decoupled
    size_t epochs = 1;
    size_t batch_bags = 1;  // gradient accumulation across bags
    bool shuffle_instances = true;
    uint64_t seed = 1;
    MiWeights mi;          // all-zero weights turn the regularizer off
    size_t mi_batch = 32;  // instances per MI draw, sampled across bags
    size_t patience = 20;  // early stop on validation error rate; 0 disables

    void validate() const;
};

struct AdamState {
    std::vector<Tensor> m, v;  // one slot per parameter, visit order
    uint64_t step = 0;

    static AdamState init(const MilModel& model);
};

// bias-corrected Adam with decoupled weight decay, one shared step counter
void adam_step(const std::vector<Tensor*>& params,
               const std::vector<const Tensor*>& grads, AdamState& st,
               const TrainConfig& tc);

struct EpochStats {
    double train_loss = 0;   // mean optimized objective per step (task + MI)
    double train_error = 0;  // percent, predictions taken during the epoch
    double val_loss = 0;     // mean task loss
    double val_error = 0;    // percent
};

struct TrainResult {
    std::vector<EpochStats> history;
    size_t best_epoch = 0;  // index into history
    double best_val_error = 0;
    size_t steps = 0;  // optimizer steps taken
};

// return false to stop after the current epoch
using ProgressFn = std::function<bool(size_t epoch, const EpochStats&)>;

// Trains in place; on return the model holds the best-validation-error
// parameters. Empty val_bags falls back to the training metrics.
TrainResult train(MilModel& model, const std::vector<Bag>& train_bags,
                  const std::vector<Bag>& val_bags, const TrainConfig& tc,
                  const ProgressFn& progress = nullptr);

struct Prediction {
    double raw;  // probability (classifier) or raw count (regressor)
    int label;   // thresholded at 0.5, or rounded and clamped at 0
};

Prediction predict(const MilModel& model, const Bag& bag);

// raw head output (logit or count) to a hard label
int label_from_output(double out, HeadKind head);

// fraction of bags whose predicted label mismatches the target, in percent
double error_percent(const MilModel& model, const std::vector<Bag>& bags);

// checkpoint file: magic "MILB", u32 version, u32 JSON length, JSON metadata
// (configs, names/shapes, epoch, rng state), then raw little-endian f64
// tensors in visit order
inline constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    MilModel model;
    TrainConfig train;
    size_t epoch = 0;
    std::vector<uint64_t> rng_state;
    std::string task;  // scenario tag the model was trained for; may be empty
};

void save_checkpoint(const std::string& path, const MilModel& model,
                     const TrainConfig& tc, size_t epoch,
                     const std::vector<uint64_t>& rng_state,
                     const std::string& task = "");
Checkpoint load_checkpoint(const std::string& path);

}  // namespace milstm
