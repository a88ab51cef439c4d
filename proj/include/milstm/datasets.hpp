#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "milstm/common.hpp"
#include "milstm/rng.hpp"

namespace milstm {

constexpr size_t kImageSide = 28;
constexpr size_t kImageBytes = kImageSide * kImageSide;

using Image = std::vector<uint8_t>;  // 784 bytes, row-major

struct InstancePool {
    std::vector<Image> images;
    std::vector<uint8_t> labels;  // digit class 0-9
    std::string split;            // "train" or "test"

    size_t size() const { return images.size(); }
};

enum class TargetKind { binary, count };

struct BagTarget {
    TargetKind kind = TargetKind::binary;
    int value = 0;  // {0,1} for binary, witness count otherwise
};

struct Bag {
    std::vector<Image> instances;
    std::vector<uint8_t> instance_labels;  // latent; evaluation-only, never fed to losses
    BagTarget target;

    size_t size() const { return instances.size(); }
};

enum class ScenarioKind { single_digit, multi_digit, counting, outlier };

std::string to_string(ScenarioKind k);
ScenarioKind scenario_from_string(const std::string& s);
std::vector<uint8_t> default_witnesses(ScenarioKind k);

struct ScenarioSpec {
    ScenarioKind kind = ScenarioKind::single_digit;
    std::vector<uint8_t> witnesses = {9};
    double mean_cardinality = 10.0;
    double std_cardinality = 2.0;
    size_t n_bags = 0;
    uint64_t seed = 0;
    int outlier_k = 1;  // outlier instances per positive bag

    void validate() const;  // witness sets are pinned per scenario
};

// IDX container I/O (big-endian; 2051 = images, 2049 = labels)
InstancePool load_mnist_idx(const std::string& images_path, const std::string& labels_path);
void save_idx(const std::string& images_path, const std::string& labels_path,
              const InstancePool& pool);

// procedurally drawn 10-class glyph corpus; offline stand-in with the same container shape
InstancePool synth_glyphs(size_t n_per_class, uint64_t seed);

// round(Normal(m, sigma)) clamped below at `floor`
int sample_cardinality(double m, double sigma, Rng& rng, int floor);
int cardinality_floor(ScenarioKind k);

std::vector<Bag> make_bags(const ScenarioSpec& spec, const InstancePool& pool);

Bag shuffle_bag(const Bag& bag, Rng& rng);
std::vector<Bag> singletons(const Bag& bag);

// bag cache: JSON header + raw image blob; lossless round-trip
void save_bags(const std::string& path, const ScenarioSpec& spec, const std::vector<Bag>& bags);
std::vector<Bag> load_bags(const std::string& path, ScenarioSpec* spec_out = nullptr);

}  // namespace milstm
