#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <vector>

#include "milstm/tensor.hpp"

namespace milstm {

class Tape;

// Handle to a node on a tape. Plain index; the owning tape is passed
// explicitly to every operation.
struct Var {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
};

enum class Act { relu, tanh, sigmoid, softplus };

// Reverse-mode tape. Nodes are appended in evaluation order, which is a
// topological order by construction. One tape per training step; not
// thread-safe.
class Tape {
public:
    using BackFn = std::function<void(Tape&, int32_t self)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor value);      // requires_grad taken from the tensor
    Var constant(Tensor value);  // never differentiated

    const Tensor& value(Var v) const { return nodes_[v.id].value; }
    bool requires_grad(Var v) const { return nodes_[v.id].rg; }

    // Reverse accumulation from a scalar loss. Resets all gradient buffers
    // first, so repeated calls on one tape are independent sweeps. Every
    // requires_grad leaf ends up with a gradient buffer (zeros if the loss
    // does not depend on it).
    void backward(Var loss);

    bool has_grad(Var v) const { return nodes_[v.id].has_grad; }
    const Tensor& grad(Var v) const;

    size_t size() const { return nodes_.size(); }

    // When on, every operation validates its output for NaN/Inf.
    static void set_debug_checks(bool on);
    static bool debug_checks();

    // --- used by the op implementations ---
    Var push(const char* op, Tensor value, std::vector<int32_t> parents, BackFn back);
    Tensor& grad_buf(int32_t id);  // lazily allocated, zero-filled
    const Tensor& node_value(int32_t id) const { return nodes_[id].value; }
    const Tensor& node_grad(int32_t id) const { return nodes_[id].grad; }
    bool node_rg(int32_t id) const { return nodes_[id].rg; }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        std::vector<int32_t> parents;
        BackFn back;
        bool rg = false;
        bool has_grad = false;
    };
    std::deque<Node> nodes_;  // deque: node references stay valid as the tape grows
};

// ---- primitive operations ----------------------------------------------

Var add(Tape& t, Var a, Var b);        // same shape
Var sub(Tape& t, Var a, Var b);        // same shape
Var mul(Tape& t, Var a, Var b);        // elementwise, same shape
Var scale(Tape& t, Var a, double c);
Var matmul(Tape& t, Var a, Var b);     // [m x k] . [k x n]
Var matvec(Tape& t, Var a, Var x);     // [m x k] . [k]
Var dot(Tape& t, Var a, Var b);        // [v] . [v] -> scalar
Var transpose(Tape& t, Var a);         // [m x n] -> [n x m]
Var activation(Tape& t, Var a, Act mode);
Var relu(Tape& t, Var a);
Var tanh(Tape& t, Var a);
Var sigmoid(Tape& t, Var a);
Var softplus(Tape& t, Var a);

// valid (no padding) cross-correlation; x [Cin x H x W], k [Cout x Cin x kh x kw]
Var conv2d(Tape& t, Var x, Var k, size_t stride = 1);
Var add_channel_bias(Tape& t, Var x, Var b);  // x [C x H x W], b [C]
Var maxpool2(Tape& t, Var x);                 // 2x2/stride-2, floor on odd extents

Var reshape(Tape& t, Var a, std::vector<size_t> shape);
Var concat(Tape& t, Var a, Var b);                    // 1-D ++ 1-D
Var concat_cols(Tape& t, Var a, Var b);               // [m x p] ++ [m x q]
Var row(Tape& t, Var a, size_t i);                    // [m x n] -> [n]
Var stack_rows(Tape& t, const std::vector<Var>& vs);  // m x [n] -> [m x n]
Var permute_rows(Tape& t, Var a, const std::vector<size_t>& perm);
Var concat_rows(Tape& t, const std::vector<Var>& mats);  // stack matrices vertically
Var repeat_row(Tape& t, Var x, size_t m);             // [n] -> [m x n]
Var add_row_broadcast(Tape& t, Var a, Var bias);      // [m x n] + [n] per row

Var sum_all(Tape& t, Var a);   // -> scalar
Var mean_all(Tape& t, Var a);  // -> scalar
Var mean_rows(Tape& t, Var a);  // columnwise mean [m x n] -> [n]
Var max_rows(Tape& t, Var a);   // columnwise max  [m x n] -> [n]
Var softmax(Tape& t, Var a);    // 1-D, numerically stable

Var detach(Tape& t, Var a);  // value copy, gradient barrier

Var ce_with_logits(Tape& t, Var logits, size_t label);  // logsumexp(z) - z[label]

// ---- gradient checking ---------------------------------------------------

// Max over checked coordinates of |analytic - central difference| /
// max(1, |analytic|, |numeric|). When max_coords > 0, a deterministic random
// subset of coordinates is checked (seeded internally).
double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x,
                  double eps = 1e-5, size_t max_coords = 0, uint64_t seed = 17);

}  // namespace milstm
