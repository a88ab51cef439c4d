#pragma once

#include <vector>

#include "milstm/datasets.hpp"
#include "milstm/rng.hpp"
#include "milstm/tape.hpp"

namespace milstm {

// LeNet-style instance encoder: conv 20@5x5 / conv 50@5x5, each with relu and
// 2x2 max-pool, then fc 500 relu, then fc to the feature width n.
struct IduConfig {
    size_t feature_dim = 500;  // n, must match the bag encoder's input width
    size_t input_side = 28;
};

size_t idu_local_side(size_t input_side);  // spatial side of the conv2 post-pool grid

struct IduParams {
    IduConfig cfg;
    Tensor c1w, c1b;  // [20x1x5x5], [20]
    Tensor c2w, c2b;  // [50x20x5x5], [50]
    Tensor f1w, f1b;  // [flat x 500], [500]
    Tensor f2w, f2b;  // [500 x n], [n]

    static IduParams init(const IduConfig& cfg, Rng& rng);

    template <class Fn>
    void visit(Fn&& fn) {
        fn("idu.conv1.w", c1w);
        fn("idu.conv1.b", c1b);
        fn("idu.conv2.w", c2w);
        fn("idu.conv2.b", c2b);
        fn("idu.fc1.w", f1w);
        fn("idu.fc1.b", f1b);
        fn("idu.fc2.w", f2w);
        fn("idu.fc2.b", f2b);
    }
};

// per-tape parameter handles
struct IduVars {
    Var c1w, c1b, c2w, c2b, f1w, f1b, f2w, f2b;
};

IduVars idu_leaves(Tape& t, const IduParams& p, bool trainable);

struct EncodedInstance {
    Var feature;             // [n]
    Var local_map;           // [50 x s x s] conv2 post-pool grid, when requested
    bool has_local = false;
};

// image tensor must be [1 x side x side] with values already in [0,1]
EncodedInstance encode_instance(Tape& t, const IduVars& v, Var image01, bool want_local);
EncodedInstance encode_instance(Tape& t, const IduVars& v, const Image& img, bool want_local);

Tensor image_to_tensor(const Image& img);  // bytes -> [1x28x28] scaled to [0,1]

// F[m x n]; row i is the feature of instance i. locals_out, when given, gets
// one conv2 grid per instance in bag order.
Var encode_bag(Tape& t, const IduVars& v, const Bag& bag, bool want_local,
               std::vector<Var>* locals_out = nullptr);

}  // namespace milstm
