#pragma once

#include <string>
#include <vector>

#include "milstm/training.hpp"

namespace milstm {

// single source of truth for thresholded outcomes; every metric in this
// module is derived from these counts
struct ConfusionCounts {
    size_t tp = 0, tn = 0, fp = 0, fn = 0;  // binary targets only
    size_t correct = 0, total = 0;          // exact-match tally, all tasks

    void add(int predicted, int target, TargetKind kind);
};

struct MetricBundle {
    double error_rate = 0;  // percent
    double accuracy = 0;    // percent
    double f1 = 0;          // percent; 0 when undefined (no binary positives)
    ConfusionCounts counts;
};

MetricBundle metrics_from_counts(const ConfusionCounts& c);
MetricBundle error_rate(const MilModel& model, const std::vector<Bag>& bags);

struct MeanStd {
    double mean = 0, std = 0;  // sample std (n-1); 0 for a single value
};
MeanStd mean_std(const std::vector<double>& xs);

struct PermutationReport {
    double unshuffled_error = 0;   // percent
    MeanStd error;                 // across the shuffled passes
    std::vector<double> per_perm;  // percent per pass
};

// n_perm full passes, each re-shuffling every bag's internal order.
// Instance features are encoded once and reused; only the pooling head sees
// the permuted order.
PermutationReport permutation_robustness(const MilModel& model,
                                         const std::vector<Bag>& bags,
                                         size_t n_perm, uint64_t seed);

// multi-digit generalization probes: positive bags carry exactly one witness
// pair ('3' and '6') at the probed cardinality, the rest drawn from other
// classes; negatives exclude one witness class bag-wide, like the training
// negatives
std::vector<Bag> pair_probe_bags(const InstancePool& pool, size_t n_bags,
                                 int cardinality, uint64_t seed);

struct CardinalityPoint {
    int cardinality = 0;
    double error = 0;            // percent, frozen model
    double finetuned_error = 0;  // percent; meaningful when finetuned is set
    bool finetuned = false;
};

struct CardinalityOptions {
    size_t test_bags = 1000;
    bool finetune = false;
    size_t finetune_bags = 200;  // a fifth of the usual training bag count
    TrainConfig finetune_train;  // schedule for the per-size finetune runs
    uint64_t seed = 1;
};

std::vector<CardinalityPoint> cardinality_generalization(
    const MilModel& model, const InstancePool& pool,
    const std::vector<int>& sizes, const CardinalityOptions& opt);

struct SingletonFeatures {
    Tensor S;                       // [M x bag_dim], one row per instance
    std::vector<uint8_t> labels;    // latent digit label per row
    std::vector<size_t> bag_index;  // owning bag per row
};

// every instance of every bag pushed through the model as a singleton bag
SingletonFeatures singleton_features(const MilModel& model,
                                     const std::vector<Bag>& bags);

struct KmeansResult {
    std::vector<size_t> assignment;
    Tensor centroids;                 // [k x d]
    double sse = 0;                   // of the best restart
    std::vector<double> sse_history;  // per Lloyd iteration, best restart
};

// k-means++ init, Lloyd iterations, best of `restarts` by within-cluster SSE
KmeansResult kmeans(const Tensor& X, size_t k, uint64_t seed,
                    size_t restarts = 10);

struct ClusterReport {
    size_t k = 0;
    std::vector<double> per_cluster;  // percent; -1 marks an empty cluster
    std::vector<size_t> sizes;
    size_t empty_clusters = 0;
    double avg_purity = 0;  // percent, averaged over non-empty clusters
};

ClusterReport cluster_purity(const std::vector<size_t>& assignment,
                             const std::vector<int>& labels, size_t k);

size_t clusters_for_task(ScenarioKind kind);  // 2 / 3 / 2 / 10

// collapse latent digit labels to the task's cluster alphabet: witness-vs-rest
// (single digit, counting), 3/6/other (multi digit), raw digit (outlier)
std::vector<int> task_cluster_labels(ScenarioKind kind,
                                     const std::vector<uint8_t>& digits);

struct InstanceReport {
    double tp_rate = 0;   // percent of witness singletons predicted positive
    double tn_rate = 0;   // percent of the rest predicted negative
    double mean_acc = 0;  // (tp_rate + tn_rate) / 2
    size_t positives = 0, negatives = 0;
};

Prediction instance_predict(const MilModel& model, const Image& img);
InstanceReport instance_eval(const MilModel& model, const std::vector<Bag>& bags,
                             const std::vector<uint8_t>& witnesses);

// artifact writers
void write_features_csv(const std::string& path, const SingletonFeatures& sf);
// forward-direction hidden state per instance step; bilstm models only
void write_states_csv(const std::string& path, const MilModel& model,
                      const std::vector<Bag>& bags);

}  // namespace milstm
