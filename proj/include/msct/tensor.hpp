#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "msct/common.hpp"
#include "msct/rng.hpp"

namespace msct {

// Dense f64 tensor, row-major, rank 1 or 2 in practice. A rank-1 tensor of
// size n behaves as a 1 x n row where a matrix is expected.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int64_t> shape);

    static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int64_t> shape, double v);
    static Tensor scalar(double v);
    static Tensor row(std::vector<double> v);
    static Tensor matrix(int64_t r, int64_t c, std::vector<double> v);

    const std::vector<int64_t>& shape() const { return shape_; }
    int64_t size() const { return static_cast<int64_t>(data_.size()); }
    int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
    // Matrix view: rank-1 tensors are a single row.
    int64_t rows() const { return rank() <= 1 ? (size() > 0 ? 1 : 0) : shape_[0]; }
    int64_t cols() const { return rank() == 0 ? 0 : (rank() == 1 ? shape_[0] : shape_[1]); }

    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }
    double& at(int64_t r, int64_t c) { return data_[static_cast<size_t>(r * cols() + c)]; }
    double at(int64_t r, int64_t c) const { return data_[static_cast<size_t>(r * cols() + c)]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    bool all_finite() const;
    std::string shape_str() const;

private:
    std::vector<int64_t> shape_;
    std::vector<double> data_;
};

Tensor uniform_init(Rng& rng, std::vector<int64_t> shape, double bound);

// Named trainable tensor. The group label drives the selective updates of
// the training procedure.
struct Parameter {
    std::string name;
    std::string group;
    Tensor value;
};

// Handle to a node on a Tape.
struct V {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
};

enum class Mode { Train, Eval };

// Define-by-run reverse-mode tape. Rebuilt per forward pass; backward walks
// the nodes once in reverse creation order and accumulates gradients
// additively at fan-out.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    V leaf(Tensor v, bool track = false);
    V constant(Tensor v) { return leaf(std::move(v), false); }
    V scalar(double v) { return leaf(Tensor::scalar(v), false); }
    // Memoized: the same Parameter always maps to the same node, so shared
    // weights accumulate gradients across reuse.
    V param(Parameter& p);

    const Tensor& val(V v) const;
    const Tensor& grad(V v) const;
    // Zero tensor of the parameter's shape when the parameter never entered
    // this graph.
    Tensor grad_of(const Parameter& p) const;

    // ---- elementwise / structural ops ----
    V add(V a, V b);
    V sub(V a, V b);
    V mul(V a, V b);
    V scale(V a, double c);
    V add_scalar(V a, double c);
    V matmul(V a, V b);
    V matmul_nt(V a, V b);  // a * b^T
    V concat_cols(V a, V b);
    V concat_rows(V a, V b);
    V slice_rows(V a, int64_t r0, int64_t r1);
    V slice_cols(V a, int64_t c0, int64_t c1);
    V relu(V a);
    V elu(V a);
    V sigmoid(V a);
    V tanh_(V a);
    V log_(V a);
    V clamp_min(V a, double floor);
    V softmax_rows(V a, bool causal = false);
    V mean_all(V a);
    V sum_all(V a);
    V layer_norm(V x, V gain, V bias);       // normalizes the last axis; eps 1e-5
    V linear(V x, V w, V b);                 // x*w + row-broadcast bias
    V scale_cols(V x, const Tensor& mask);   // constant per-column factors
    V mul_const(V x, const Tensor& mask);    // constant elementwise factors
    V grad_reverse(V a);                     // identity forward, -1 * grad backward

    void backward(V loss);

    size_t node_count() const { return nodes_.size(); }
    bool check_finite = true;

    static constexpr double kLayerNormEps = 1e-5;

private:
    struct Node {
        Tensor val;
        Tensor grad;
        std::function<void(Tape&)> back;
        bool track = false;
        bool grad_ready = false;
    };

    V push(Tensor v, bool track, std::function<void(Tape&)> back, const char* op);
    Tensor& grad_buf(int32_t id);
    bool tracked(V v) const { return nodes_[static_cast<size_t>(v.id)].track; }
    void expect_valid(V v, const char* op) const;

    std::vector<Node> nodes_;
    std::unordered_map<const Parameter*, int32_t> param_nodes_;
};

// Dropout with the mask sampled once per feature and reused across all rows
// (time steps) of the sequence; inverted scaling so Eval mode is identity.
V variational_dropout(Tape& t, V x, double rate, Mode mode, Rng* rng);
// Plain elementwise dropout (used on attention weights).
V dropout_elementwise(Tape& t, V x, double rate, Mode mode, Rng* rng);

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Standard bias-corrected Adam. Moments are kept per parameter name and a
// parameter's step counter only advances when that parameter is updated.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    void step(Parameter& p, const Tensor& grad);
    void step(std::span<Parameter* const> params, Tape& tape, double lr_override = -1.0);

    struct State {
        Tensor m, v;
        int64_t t = 0;
    };
    const std::map<std::string, State>& states() const { return states_; }
    std::map<std::string, State>& states() { return states_; }
    const AdamConfig& config() const { return cfg_; }

private:
    AdamConfig cfg_;
    std::map<std::string, State> states_;
};

}  // namespace msct
