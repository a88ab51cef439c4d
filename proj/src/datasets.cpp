#include "milstm/datasets.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace milstm {

namespace {

constexpr uint32_t kImagesMagic = 2051;
constexpr uint32_t kLabelsMagic = 2049;

uint32_t read_be32(std::istream& in, const std::string& path) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) {
        throw FormatError(path + ": truncated header");
    }
    return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) | uint32_t(b[3]);
}

void write_be32(std::ostream& out, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<char*>(b), 4);
}

std::vector<std::vector<size_t>> index_by_class(const InstancePool& pool) {
    std::vector<std::vector<size_t>> by_class(10);
    for (size_t i = 0; i < pool.size(); ++i) by_class[pool.labels[i]].push_back(i);
    return by_class;
}

}  // namespace

std::string to_string(ScenarioKind k) {
    switch (k) {
        case ScenarioKind::single_digit: return "single_digit";
        case ScenarioKind::multi_digit: return "multi_digit";
        case ScenarioKind::counting: return "counting";
        case ScenarioKind::outlier: return "outlier";
    }
    return "?";
}

ScenarioKind scenario_from_string(const std::string& s) {
    if (s == "single_digit") return ScenarioKind::single_digit;
    if (s == "multi_digit") return ScenarioKind::multi_digit;
    if (s == "counting") return ScenarioKind::counting;
    if (s == "outlier") return ScenarioKind::outlier;
    throw ContractError("unknown scenario: " + s);
}

std::vector<uint8_t> default_witnesses(ScenarioKind k) {
    switch (k) {
        case ScenarioKind::single_digit: return {9};
        case ScenarioKind::multi_digit: return {3, 6};
        case ScenarioKind::counting: return {9};
        case ScenarioKind::outlier: return {};
    }
    return {};
}

void ScenarioSpec::validate() const {
    auto want = default_witnesses(kind);
    if (kind != ScenarioKind::outlier && witnesses != want) {
        throw ContractError("scenario " + to_string(kind) + " requires its fixed witness set");
    }
    if (mean_cardinality < 1.0) throw ContractError("mean cardinality must be >= 1");
    if (n_bags == 0) throw ContractError("n_bags must be positive");
    if (kind == ScenarioKind::outlier && outlier_k < 1) {
        throw ContractError("outlier_k must be >= 1");
    }
}

InstancePool load_mnist_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream imf(images_path, std::ios::binary);
    if (!imf) throw FormatError("cannot open " + images_path);
    uint32_t magic = read_be32(imf, images_path);
    if (magic != kImagesMagic) {
        throw FormatError(images_path + ": expected image magic " + std::to_string(kImagesMagic) +
                          ", found " + std::to_string(magic));
    }
    uint32_t n = read_be32(imf, images_path);
    uint32_t rows = read_be32(imf, images_path);
    uint32_t cols = read_be32(imf, images_path);
    if (rows != kImageSide || cols != kImageSide) {
        throw FormatError(images_path + ": expected 28x28 images, found " + std::to_string(rows) +
                          "x" + std::to_string(cols));
    }

    std::ifstream lbf(labels_path, std::ios::binary);
    if (!lbf) throw FormatError("cannot open " + labels_path);
    uint32_t lmagic = read_be32(lbf, labels_path);
    if (lmagic != kLabelsMagic) {
        throw FormatError(labels_path + ": expected label magic " + std::to_string(kLabelsMagic) +
                          ", found " + std::to_string(lmagic));
    }
    uint32_t ln = read_be32(lbf, labels_path);
    if (ln != n) {
        throw FormatError("image/label count mismatch: " + std::to_string(n) + " images vs " +
                          std::to_string(ln) + " labels");
    }

    InstancePool pool;
    pool.images.reserve(n);
    pool.labels.resize(n);
    for (uint32_t i = 0; i < n; ++i) {
        Image img(kImageBytes);
        if (!imf.read(reinterpret_cast<char*>(img.data()), kImageBytes)) {
            throw FormatError(images_path + ": truncated at image " + std::to_string(i));
        }
        pool.images.push_back(std::move(img));
    }
    if (!lbf.read(reinterpret_cast<char*>(pool.labels.data()), n)) {
        throw FormatError(labels_path + ": truncated label section");
    }
    for (uint32_t i = 0; i < n; ++i) {
        if (pool.labels[i] > 9) {
            throw FormatError(labels_path + ": label " + std::to_string(pool.labels[i]) +
                              " out of range at index " + std::to_string(i));
        }
    }
    return pool;
}

void save_idx(const std::string& images_path, const std::string& labels_path,
              const InstancePool& pool) {
    std::ofstream imf(images_path, std::ios::binary);
    if (!imf) throw FormatError("cannot write " + images_path);
    write_be32(imf, kImagesMagic);
    write_be32(imf, static_cast<uint32_t>(pool.size()));
    write_be32(imf, kImageSide);
    write_be32(imf, kImageSide);
    for (const Image& img : pool.images) {
        imf.write(reinterpret_cast<const char*>(img.data()), kImageBytes);
    }

    std::ofstream lbf(labels_path, std::ios::binary);
    if (!lbf) throw FormatError("cannot write " + labels_path);
    write_be32(lbf, kLabelsMagic);
    write_be32(lbf, static_cast<uint32_t>(pool.size()));
    lbf.write(reinterpret_cast<const char*>(pool.labels.data()),
              static_cast<std::streamsize>(pool.labels.size()));
}

namespace {

// seven-segment layout; distinct per-class stroke sets keep classes separable
// while 9 shares most strokes with 4 and 7
enum Seg { A, B, C, D, E, F, G };

const std::array<std::vector<Seg>, 10> kSegments = {{
    {A, B, C, D, E, F},     // 0
    {B, C},                 // 1
    {A, B, G, E, D},        // 2
    {A, B, G, C, D},        // 3
    {F, G, B, C},           // 4
    {A, F, G, C, D},        // 5
    {A, F, G, E, C, D},     // 6
    {A, B, C},              // 7
    {A, B, C, D, E, F, G},  // 8
    {A, B, C, D, F, G},     // 9
}};

void draw_hline(Image& img, int y, int x0, int x1, int level) {
    for (int t = 0; t < 2; ++t)
        for (int x = x0; x <= x1; ++x) {
            int yy = y + t;
            if (yy >= 0 && yy < int(kImageSide) && x >= 0 && x < int(kImageSide))
                img[yy * kImageSide + x] = static_cast<uint8_t>(level);
        }
}

void draw_vline(Image& img, int x, int y0, int y1, int level) {
    for (int t = 0; t < 2; ++t)
        for (int y = y0; y <= y1; ++y) {
            int xx = x + t;
            if (y >= 0 && y < int(kImageSide) && xx >= 0 && xx < int(kImageSide))
                img[y * kImageSide + xx] = static_cast<uint8_t>(level);
        }
}

}  // namespace

InstancePool synth_glyphs(size_t n_per_class, uint64_t seed) {
    if (n_per_class < 1) throw ContractError("n_per_class must be >= 1");
    InstancePool pool;
    pool.images.reserve(10 * n_per_class);
    pool.labels.reserve(10 * n_per_class);
    Rng rng(derive_seed(seed, "glyphs"));

    for (size_t rep = 0; rep < n_per_class; ++rep) {
        for (int digit = 0; digit < 10; ++digit) {
            Image img(kImageBytes, 0);
            int dx = int(rng.index(5)) - 2;
            int dy = int(rng.index(5)) - 2;
            int level = 180 + int(rng.index(76));

            int x0 = 8 + dx, x1 = 18 + dx;
            int y0 = 5 + dy, ym = 13 + dy, y1 = 21 + dy;
            for (Seg s : kSegments[digit]) {
                switch (s) {
                    case A: draw_hline(img, y0, x0, x1 + 1, level); break;
                    case G: draw_hline(img, ym, x0, x1 + 1, level); break;
                    case D: draw_hline(img, y1, x0, x1 + 1, level); break;
                    case F: draw_vline(img, x0, y0, ym + 1, level); break;
                    case B: draw_vline(img, x1, y0, ym + 1, level); break;
                    case E: draw_vline(img, x0, ym, y1 + 1, level); break;
                    case C: draw_vline(img, x1, ym, y1 + 1, level); break;
                }
            }
            for (size_t i = 0; i < kImageBytes; ++i) {
                double v = img[i] + rng.normal(0.0, 8.0);
                img[i] = static_cast<uint8_t>(std::clamp(v, 0.0, 255.0));
            }
            pool.images.push_back(std::move(img));
            pool.labels.push_back(static_cast<uint8_t>(digit));
        }
    }
    pool.split = "train";
    return pool;
}

int cardinality_floor(ScenarioKind k) {
    return k == ScenarioKind::counting ? 1 : 2;
}

int sample_cardinality(double m, double sigma, Rng& rng, int floor) {
    long v = std::llround(rng.normal(m, sigma));
    return static_cast<int>(std::max<long>(v, floor));
}

namespace {

bool is_witness(uint8_t label, const std::vector<uint8_t>& witnesses) {
    return std::find(witnesses.begin(), witnesses.end(), label) != witnesses.end();
}

size_t draw_instance(const InstancePool& pool, Rng& rng) { return rng.index(pool.size()); }

// draw until the instance label avoids every class in `excluded`
size_t draw_avoiding(const InstancePool& pool, const std::vector<uint8_t>& excluded, Rng& rng) {
    for (int tries = 0; tries < 1 << 16; ++tries) {
        size_t i = draw_instance(pool, rng);
        if (!is_witness(pool.labels[i], excluded)) return i;
    }
    throw GenerationError("pool has no instances outside the excluded class set");
}

size_t draw_of_class(const std::vector<std::vector<size_t>>& by_class, uint8_t cls, Rng& rng) {
    const auto& ids = by_class[cls];
    if (ids.empty()) {
        throw GenerationError("pool has no instances of class " + std::to_string(int(cls)));
    }
    return ids[rng.index(ids.size())];
}

void push_instance(Bag& bag, const InstancePool& pool, size_t idx) {
    bag.instances.push_back(pool.images[idx]);
    bag.instance_labels.push_back(pool.labels[idx]);
}

}  // namespace

std::vector<Bag> make_bags(const ScenarioSpec& spec, const InstancePool& pool) {
    spec.validate();
    if (pool.size() == 0) throw GenerationError("empty instance pool");
    auto by_class = index_by_class(pool);
    for (uint8_t w : spec.witnesses) {
        if (by_class[w].empty()) {
            throw GenerationError("pool has no instances of witness class " + std::to_string(int(w)));
        }
    }

    Rng rng(derive_seed(spec.seed, "bags:" + to_string(spec.kind)));
    int floor = cardinality_floor(spec.kind);
    std::vector<Bag> bags;
    bags.reserve(spec.n_bags);

    auto card = [&]() { return sample_cardinality(spec.mean_cardinality, spec.std_cardinality, rng, floor); };

    switch (spec.kind) {
        case ScenarioKind::single_digit: {
            size_t n_pos = (spec.n_bags + 1) / 2;
            for (size_t b = 0; b < spec.n_bags; ++b) {
                bool positive = b < n_pos;
                int m = card();
                Bag bag;
                bag.target = {TargetKind::binary, positive ? 1 : 0};
                if (positive) {
                    for (int i = 0; i < m; ++i) push_instance(bag, pool, draw_instance(pool, rng));
                    size_t slot = rng.index(m);
                    size_t w = draw_of_class(by_class, spec.witnesses[0], rng);
                    bag.instances[slot] = pool.images[w];
                    bag.instance_labels[slot] = pool.labels[w];
                } else {
                    for (int i = 0; i < m; ++i)
                        push_instance(bag, pool, draw_avoiding(pool, spec.witnesses, rng));
                }
                bags.push_back(std::move(bag));
            }
            break;
        }
        case ScenarioKind::multi_digit: {
            size_t n_pos = (spec.n_bags + 1) / 2;
            for (size_t b = 0; b < spec.n_bags; ++b) {
                bool positive = b < n_pos;
                int m = card();
                Bag bag;
                bag.target = {TargetKind::binary, positive ? 1 : 0};
                if (positive) {
                    for (int i = 0; i < m; ++i) push_instance(bag, pool, draw_instance(pool, rng));
                    // plant both witnesses at distinct slots
                    size_t s1 = rng.index(m);
                    size_t s2 = rng.index(m - 1);
                    if (s2 >= s1) ++s2;
                    size_t w1 = draw_of_class(by_class, spec.witnesses[0], rng);
                    size_t w2 = draw_of_class(by_class, spec.witnesses[1], rng);
                    bag.instances[s1] = pool.images[w1];
                    bag.instance_labels[s1] = pool.labels[w1];
                    bag.instances[s2] = pool.images[w2];
                    bag.instance_labels[s2] = pool.labels[w2];
                } else {
                    // excluding one witness class guarantees the conjunction fails at any m
                    uint8_t banned = spec.witnesses[rng.index(spec.witnesses.size())];
                    for (int i = 0; i < m; ++i)
                        push_instance(bag, pool, draw_avoiding(pool, {banned}, rng));
                }
                bags.push_back(std::move(bag));
            }
            break;
        }
        case ScenarioKind::counting: {
            for (size_t b = 0; b < spec.n_bags; ++b) {
                int m = card();
                Bag bag;
                for (int i = 0; i < m; ++i) push_instance(bag, pool, draw_instance(pool, rng));
                int count = 0;
                for (uint8_t l : bag.instance_labels) count += is_witness(l, spec.witnesses);
                bag.target = {TargetKind::count, count};
                bags.push_back(std::move(bag));
            }
            break;
        }
        case ScenarioKind::outlier: {
            int nonempty = 0;
            for (const auto& ids : by_class) nonempty += !ids.empty();
            if (nonempty < 2) {
                throw GenerationError("outlier bags need at least two instance classes in the pool");
            }
            size_t n_pos = (spec.n_bags + 1) / 2;
            for (size_t b = 0; b < spec.n_bags; ++b) {
                bool positive = b < n_pos;
                int m = std::max(card(), positive ? spec.outlier_k + 1 : floor);
                Bag bag;
                bag.target = {TargetKind::binary, positive ? 1 : 0};
                uint8_t majority = static_cast<uint8_t>(rng.index(10));
                while (by_class[majority].empty()) majority = static_cast<uint8_t>(rng.index(10));
                for (int i = 0; i < m; ++i)
                    push_instance(bag, pool, draw_of_class(by_class, majority, rng));
                if (positive) {
                    uint8_t other = static_cast<uint8_t>(rng.index(9));
                    if (other >= majority) ++other;
                    while (by_class[other].empty()) {
                        other = static_cast<uint8_t>(rng.index(9));
                        if (other >= majority) ++other;
                    }
                    auto slots = rng.permutation(m);
                    for (int j = 0; j < spec.outlier_k; ++j) {
                        size_t w = draw_of_class(by_class, other, rng);
                        bag.instances[slots[j]] = pool.images[w];
                        bag.instance_labels[slots[j]] = pool.labels[w];
                    }
                }
                bags.push_back(std::move(bag));
            }
            break;
        }
    }

    // decouple label from position in the emitted list
    rng.shuffle(bags);
    return bags;
}

Bag shuffle_bag(const Bag& bag, Rng& rng) {
    auto perm = rng.permutation(bag.size());
    Bag out;
    out.target = bag.target;
    out.instances.reserve(bag.size());
    out.instance_labels.reserve(bag.size());
    for (size_t i : perm) {
        out.instances.push_back(bag.instances[i]);
        out.instance_labels.push_back(bag.instance_labels[i]);
    }
    return out;
}

std::vector<Bag> singletons(const Bag& bag) {
    std::vector<Bag> out;
    out.reserve(bag.size());
    for (size_t i = 0; i < bag.size(); ++i) {
        Bag s;
        s.instances.push_back(bag.instances[i]);
        s.instance_labels.push_back(bag.instance_labels[i]);
        s.target = {TargetKind::binary, 0};  // evaluation-only; target carries no meaning
        out.push_back(std::move(s));
    }
    return out;
}

void save_bags(const std::string& path, const ScenarioSpec& spec, const std::vector<Bag>& bags) {
    nlohmann::json header;
    header["scenario"] = to_string(spec.kind);
    header["seed"] = spec.seed;
    header["n_bags"] = bags.size();
    header["m"] = spec.mean_cardinality;
    header["sigma"] = spec.std_cardinality;
    header["outlier_k"] = spec.outlier_k;
    header["witnesses"] = spec.witnesses;
    nlohmann::json meta = nlohmann::json::array();
    for (const Bag& b : bags) {
        nlohmann::json jb;
        jb["kind"] = b.target.kind == TargetKind::binary ? "binary" : "count";
        jb["target"] = b.target.value;
        jb["labels"] = b.instance_labels;
        meta.push_back(std::move(jb));
    }
    header["bags"] = std::move(meta);
    std::string hs = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write " + path);
    uint32_t len = static_cast<uint32_t>(hs.size());
    out.write(reinterpret_cast<const char*>(&len), 4);
    out.write(hs.data(), len);
    for (const Bag& b : bags)
        for (const Image& img : b.instances)
            out.write(reinterpret_cast<const char*>(img.data()), kImageBytes);
}

std::vector<Bag> load_bags(const std::string& path, ScenarioSpec* spec_out) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path);
    uint32_t len = 0;
    if (!in.read(reinterpret_cast<char*>(&len), 4)) throw FormatError(path + ": truncated header");
    std::string hs(len, '\0');
    if (!in.read(hs.data(), len)) throw FormatError(path + ": truncated header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hs);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": bad header json: " + e.what());
    }

    if (spec_out) {
        spec_out->kind = scenario_from_string(header.at("scenario").get<std::string>());
        spec_out->seed = header.at("seed").get<uint64_t>();
        spec_out->n_bags = header.at("n_bags").get<size_t>();
        spec_out->mean_cardinality = header.at("m").get<double>();
        spec_out->std_cardinality = header.at("sigma").get<double>();
        spec_out->outlier_k = header.at("outlier_k").get<int>();
        spec_out->witnesses = header.at("witnesses").get<std::vector<uint8_t>>();
    }

    std::vector<Bag> bags;
    for (const auto& jb : header.at("bags")) {
        Bag b;
        b.target.kind = jb.at("kind").get<std::string>() == "binary" ? TargetKind::binary
                                                                     : TargetKind::count;
        b.target.value = jb.at("target").get<int>();
        b.instance_labels = jb.at("labels").get<std::vector<uint8_t>>();
        for (size_t i = 0; i < b.instance_labels.size(); ++i) {
            Image img(kImageBytes);
            if (!in.read(reinterpret_cast<char*>(img.data()), kImageBytes)) {
                throw FormatError(path + ": truncated instance blob");
            }
            b.instances.push_back(std::move(img));
        }
        bags.push_back(std::move(b));
    }
    return bags;
}

}  // namespace milstm
