#include "milstm/encoders.hpp"

#include <cmath>

namespace milstm {

namespace {

Tensor kaiming_uniform(std::vector<size_t> shape, size_t fan_in, Rng& rng) {
    double bound = std::sqrt(6.0 / double(fan_in));
    Tensor t(std::move(shape));
    for (size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-bound, bound);
    t.set_requires_grad(true);
    return t;
}

Tensor zero_param(std::vector<size_t> shape) {
    Tensor t(std::move(shape));
    t.set_requires_grad(true);
    return t;
}

size_t conv_then_pool(size_t side, const char* stage) {
    if (side < 5) {
        throw DimensionError(std::string("idu ") + stage + ": spatial side " +
                             std::to_string(side) + " too small for a 5x5 kernel");
    }
    size_t after = side - 4;
    if (after < 2) {
        throw DimensionError(std::string("idu ") + stage + ": nothing left to pool");
    }
    return after / 2;
}

}  // namespace

size_t idu_local_side(size_t input_side) {
    return conv_then_pool(conv_then_pool(input_side, "conv1"), "conv2");
}

IduParams IduParams::init(const IduConfig& cfg, Rng& rng) {
    size_t s = idu_local_side(cfg.input_side);
    size_t flat = 50 * s * s;
    IduParams p;
    p.cfg = cfg;
    p.c1w = kaiming_uniform({20, 1, 5, 5}, 1 * 5 * 5, rng);
    p.c1b = zero_param({20});
    p.c2w = kaiming_uniform({50, 20, 5, 5}, 20 * 5 * 5, rng);
    p.c2b = zero_param({50});
    p.f1w = kaiming_uniform({flat, 500}, flat, rng);
    p.f1b = zero_param({500});
    p.f2w = kaiming_uniform({500, cfg.feature_dim}, 500, rng);
    p.f2b = zero_param({cfg.feature_dim});
    return p;
}

IduVars idu_leaves(Tape& t, const IduParams& p, bool trainable) {
    auto put = [&](const Tensor& param) {
        Tensor copy = param;
        copy.set_requires_grad(trainable);
        return t.leaf(std::move(copy));
    };
    IduVars v;
    v.c1w = put(p.c1w);
    v.c1b = put(p.c1b);
    v.c2w = put(p.c2w);
    v.c2b = put(p.c2b);
    v.f1w = put(p.f1w);
    v.f1b = put(p.f1b);
    v.f2w = put(p.f2w);
    v.f2b = put(p.f2b);
    return v;
}

Tensor image_to_tensor(const Image& img) {
    Tensor x({1, kImageSide, kImageSide});
    for (size_t i = 0; i < kImageBytes; ++i) x[i] = img[i] / 255.0;
    return x;
}

EncodedInstance encode_instance(Tape& t, const IduVars& v, Var image01, bool want_local) {
    Var h = conv2d(t, image01, v.c1w, 1);
    h = maxpool2(t, relu(t, add_channel_bias(t, h, v.c1b)));
    h = conv2d(t, h, v.c2w, 1);
    Var local = maxpool2(t, relu(t, add_channel_bias(t, h, v.c2b)));

    const Tensor& lm = t.value(local);
    size_t flat = lm.numel();
    Var z = reshape(t, local, {1, flat});
    z = add_row_broadcast(t, matmul(t, z, v.f1w), v.f1b);
    z = relu(t, z);
    z = add_row_broadcast(t, matmul(t, z, v.f2w), v.f2b);

    EncodedInstance out;
    out.feature = reshape(t, z, {t.value(z).extent(1)});
    if (want_local) {
        out.local_map = local;
        out.has_local = true;
    }
    return out;
}

EncodedInstance encode_instance(Tape& t, const IduVars& v, const Image& img, bool want_local) {
    return encode_instance(t, v, t.constant(image_to_tensor(img)), want_local);
}

Var encode_bag(Tape& t, const IduVars& v, const Bag& bag, bool want_local,
               std::vector<Var>* locals_out) {
    if (bag.size() == 0) throw ContractError("encode_bag: empty bag");
    std::vector<Var> rows;
    rows.reserve(bag.size());
    for (const Image& img : bag.instances) {
        EncodedInstance e = encode_instance(t, v, img, want_local);
        rows.push_back(e.feature);
        if (want_local && locals_out) locals_out->push_back(e.local_map);
    }
    return stack_rows(t, rows);
}

}  // namespace milstm
