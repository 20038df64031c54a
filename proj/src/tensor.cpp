#include "msct/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "msct/kernels.hpp"

namespace msct {

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor::Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
    int64_t n = 1;
    for (int64_t d : shape_) {
        if (d < 0) throw ShapeError("tensor: negative dimension in " + shape_str());
        n *= d;
    }
    data_.assign(static_cast<size_t>(n), 0.0);
}

Tensor Tensor::full(std::vector<int64_t> shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
}

Tensor Tensor::scalar(double v) {
    Tensor t({1});
    t.data_[0] = v;
    return t;
}

Tensor Tensor::row(std::vector<double> v) {
    Tensor t;
    t.shape_ = {static_cast<int64_t>(v.size())};
    t.data_ = std::move(v);
    return t;
}

Tensor Tensor::matrix(int64_t r, int64_t c, std::vector<double> v) {
    if (static_cast<int64_t>(v.size()) != r * c)
        throw ShapeError("tensor: matrix(" + std::to_string(r) + "x" + std::to_string(c) +
                         ") given " + std::to_string(v.size()) + " values");
    Tensor t;
    t.shape_ = {r, c};
    t.data_ = std::move(v);
    return t;
}

bool Tensor::all_finite() const {
    for (double x : data_)
        if (!std::isfinite(x)) return false;
    return true;
}

std::string Tensor::shape_str() const {
    std::string s = "(";
    for (size_t i = 0; i < shape_.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape_[i]);
    }
    s += ")";
    return s;
}

Tensor uniform_init(Rng& rng, std::vector<int64_t> shape, double bound) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
    return t;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

void Tape::expect_valid(V v, const char* op) const {
    if (!v.valid() || static_cast<size_t>(v.id) >= nodes_.size())
        throw UsageError(std::string(op) + ": invalid node handle");
}

V Tape::push(Tensor v, bool track, std::function<void(Tape&)> back, const char* op) {
    if (check_finite && !v.all_finite())
        throw NumericError(std::string(op) + ": non-finite value in output " + v.shape_str());
    Node n;
    n.val = std::move(v);
    n.track = track;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return V{static_cast<int32_t>(nodes_.size() - 1)};
}

V Tape::leaf(Tensor v, bool track) { return push(std::move(v), track, nullptr, "leaf"); }

V Tape::param(Parameter& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return V{it->second};
    V v = push(p.value, true, nullptr, "param");
    param_nodes_.emplace(&p, v.id);
    return v;
}

const Tensor& Tape::val(V v) const {
    expect_valid(v, "val");
    return nodes_[static_cast<size_t>(v.id)].val;
}

const Tensor& Tape::grad(V v) const {
    expect_valid(v, "grad");
    const Node& n = nodes_[static_cast<size_t>(v.id)];
    if (!n.grad_ready) throw UsageError("grad: backward has not reached this node");
    return n.grad;
}

Tensor Tape::grad_of(const Parameter& p) const {
    auto it = param_nodes_.find(&p);
    if (it == param_nodes_.end() || !nodes_[static_cast<size_t>(it->second)].grad_ready)
        return Tensor::zeros(p.value.shape());
    return nodes_[static_cast<size_t>(it->second)].grad;
}

Tensor& Tape::grad_buf(int32_t id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.grad_ready) {
        n.grad = Tensor::zeros(n.val.shape());
        n.grad_ready = true;
    }
    return n.grad;
}

namespace {
std::string shapes2(const Tensor& a, const Tensor& b) {
    return a.shape_str() + " vs " + b.shape_str();
}
}  // namespace

// Helper: build a tracked node whose backward closure sees its own id.
#define MSCT_EMIT(out_tensor, track_expr, op_name, ...)                        \
    do {                                                                       \
        const bool track__ = (track_expr);                                     \
        V out__ = push(std::move(out_tensor), track__, nullptr, op_name);      \
        if (track__)                                                           \
            nodes_[static_cast<size_t>(out__.id)].back = [out__,               \
                                                          __VA_ARGS__](Tape& t) { \
                const Tensor& g = t.nodes_[static_cast<size_t>(out__.id)].grad;

#define MSCT_EMIT_END \
    }                 \
    ;                 \
    return out__;     \
    }                 \
    while (0)

V Tape::add(V a, V b) {
    expect_valid(a, "add");
    expect_valid(b, "add");
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (!ta.same_shape(tb)) throw ShapeError("add: shape mismatch " + shapes2(ta, tb));
    Tensor out = ta;
    for (int64_t i = 0; i < out.size(); ++i) out[i] += tb[i];
    MSCT_EMIT(out, tracked(a) || tracked(b), "add", a, b) {
        if (t.tracked(a)) {
            Tensor& ga = t.grad_buf(a.id);
            for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (t.tracked(b)) {
            Tensor& gb = t.grad_buf(b.id);
            for (int64_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
    }
    MSCT_EMIT_END;
}

V Tape::sub(V a, V b) {
    expect_valid(a, "sub");
    expect_valid(b, "sub");
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (!ta.same_shape(tb)) throw ShapeError("sub: shape mismatch " + shapes2(ta, tb));
    Tensor out = ta;
    for (int64_t i = 0; i < out.size(); ++i) out[i] -= tb[i];
    MSCT_EMIT(out, tracked(a) || tracked(b), "sub", a, b) {
        if (t.tracked(a)) {
            Tensor& ga = t.grad_buf(a.id);
            for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (t.tracked(b)) {
            Tensor& gb = t.grad_buf(b.id);
            for (int64_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    }
    MSCT_EMIT_END;
}

V Tape::mul(V a, V b) {
    expect_valid(a, "mul");
    expect_valid(b, "mul");
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (!ta.same_shape(tb)) throw ShapeError("mul: shape mismatch " + shapes2(ta, tb));
    Tensor out = ta;
    for (int64_t i = 0; i < out.size(); ++i) out[i] *= tb[i];
    MSCT_EMIT(out, tracked(a) || tracked(b), "mul", a, b) {
        const Tensor& va = t.val(a);
        const Tensor& vb = t.val(b);
        if (t.tracked(a)) {
            Tensor& ga = t.grad_buf(a.id);
            for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
        }
        if (t.tracked(b)) {
            Tensor& gb = t.grad_buf(b.id);
            for (int64_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
        }
    }
    MSCT_EMIT_END;
}

V Tape::scale(V a, double c) {
    expect_valid(a, "scale");
    Tensor out = val(a);
    for (int64_t i = 0; i < out.size(); ++i) out[i] *= c;
    MSCT_EMIT(out, tracked(a), "scale", a, c) {
        Tensor& ga = t.grad_buf(a.id);
        for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
    }
    MSCT_EMIT_END;
}

V Tape::add_scalar(V a, double c) {
    expect_valid(a, "add_scalar");
    Tensor out = val(a);
    for (int64_t i = 0; i < out.size(); ++i) out[i] += c;
    MSCT_EMIT(out, tracked(a), "add_scalar", a) {
        Tensor& ga = t.grad_buf(a.id);
        for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    MSCT_EMIT_END;
}

V Tape::matmul(V a, V b) {
    expect_valid(a, "matmul");
    expect_valid(b, "matmul");
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    const int64_t m = ta.rows(), k = ta.cols(), k2 = tb.rows(), n = tb.cols();
    if (k != k2) throw ShapeError("matmul: inner dims differ " + shapes2(ta, tb));
    Tensor out({m, n});
    kern::matmul(ta.data(), tb.data(), out.data(), m, k, n);
    MSCT_EMIT(out, tracked(a) || tracked(b), "matmul", a, b, m, k, n) {
        const Tensor& va = t.val(a);
        const Tensor& vb = t.val(b);
        if (t.tracked(a)) {  // dA += G * B^T
            Tensor da({m, k});
            kern::matmul_nt(g.data(), vb.data(), da.data(), m, n, k);
            Tensor& ga = t.grad_buf(a.id);
            for (int64_t i = 0; i < da.size(); ++i) ga[i] += da[i];
        }
        if (t.tracked(b)) {  // dB += A^T * G
            Tensor db({k, n});
            kern::matmul_tn(va.data(), g.data(), db.data(), k, m, n);
            Tensor& gb = t.grad_buf(b.id);
            for (int64_t i = 0; i < db.size(); ++i) gb[i] += db[i];
        }
    }
    MSCT_EMIT_END;
}

V Tape::matmul_nt(V a, V b) {
    expect_valid(a, "matmul_nt");
    expect_valid(b, "matmul_nt");
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    const int64_t m = ta.rows(), k = ta.cols(), n = tb.rows();
    if (k != tb.cols()) throw ShapeError("matmul_nt: inner dims differ " + shapes2(ta, tb));
    Tensor out({m, n});
    kern::matmul_nt(ta.data(), tb.data(), out.data(), m, k, n);
    MSCT_EMIT(out, tracked(a) || tracked(b), "matmul_nt", a, b, m, k, n) {
        const Tensor& va = t.val(a);
        const Tensor& vb = t.val(b);
        if (t.tracked(a)) {  // dA += G * B
            Tensor da({m, k});
            kern::matmul(g.data(), vb.data(), da.data(), m, n, k);
            Tensor& ga = t.grad_buf(a.id);
            for (int64_t i = 0; i < da.size(); ++i) ga[i] += da[i];
        }
        if (t.tracked(b)) {  // dB += G^T * A
            Tensor db({n, k});
            kern::matmul_tn(g.data(), va.data(), db.data(), n, m, k);
            Tensor& gb = t.grad_buf(b.id);
            for (int64_t i = 0; i < db.size(); ++i) gb[i] += db[i];
        }
    }
    MSCT_EMIT_END;
}

V Tape::concat_cols(V a, V b) {
    expect_valid(a, "concat_cols");
    expect_valid(b, "concat_cols");
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    const int64_t m = ta.rows(), ca = ta.cols(), cb = tb.cols();
    if (tb.rows() != m) throw ShapeError("concat_cols: row counts differ " + shapes2(ta, tb));
    Tensor out({m, ca + cb});
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < ca; ++j) out.at(i, j) = ta.at(i, j);
        for (int64_t j = 0; j < cb; ++j) out.at(i, ca + j) = tb.at(i, j);
    }
    MSCT_EMIT(out, tracked(a) || tracked(b), "concat_cols", a, b, m, ca, cb) {
        if (t.tracked(a)) {
            Tensor& ga = t.grad_buf(a.id);
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < ca; ++j) ga[i * ca + j] += g.at(i, j);
        }
        if (t.tracked(b)) {
            Tensor& gb = t.grad_buf(b.id);
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < cb; ++j) gb[i * cb + j] += g.at(i, ca + j);
        }
    }
    MSCT_EMIT_END;
}

V Tape::concat_rows(V a, V b) {
    expect_valid(a, "concat_rows");
    expect_valid(b, "concat_rows");
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    const int64_t c = ta.cols(), ra = ta.rows(), rb = tb.rows();
    if (tb.cols() != c) throw ShapeError("concat_rows: col counts differ " + shapes2(ta, tb));
    Tensor out({ra + rb, c});
    std::copy(ta.data(), ta.data() + ta.size(), out.data());
    std::copy(tb.data(), tb.data() + tb.size(), out.data() + ta.size());
    MSCT_EMIT(out, tracked(a) || tracked(b), "concat_rows", a, b, c, ra, rb) {
        if (t.tracked(a)) {
            Tensor& ga = t.grad_buf(a.id);
            for (int64_t i = 0; i < ra * c; ++i) ga[i] += g[i];
        }
        if (t.tracked(b)) {
            Tensor& gb = t.grad_buf(b.id);
            for (int64_t i = 0; i < rb * c; ++i) gb[i] += g[ra * c + i];
        }
    }
    MSCT_EMIT_END;
}

V Tape::slice_rows(V a, int64_t r0, int64_t r1) {
    expect_valid(a, "slice_rows");
    const Tensor& ta = val(a);
    const int64_t m = ta.rows(), c = ta.cols();
    if (r0 < 0 || r1 > m || r0 >= r1)
        throw ShapeError("slice_rows: [" + std::to_string(r0) + "," + std::to_string(r1) +
                         ") out of " + ta.shape_str());
    Tensor out({r1 - r0, c});
    std::copy(ta.data() + r0 * c, ta.data() + r1 * c, out.data());
    MSCT_EMIT(out, tracked(a), "slice_rows", a, r0, c) {
        Tensor& ga = t.grad_buf(a.id);
        for (int64_t i = 0; i < g.size(); ++i) ga[r0 * c + i] += g[i];
    }
    MSCT_EMIT_END;
}

V Tape::slice_cols(V a, int64_t c0, int64_t c1) {
    expect_valid(a, "slice_cols");
    const Tensor& ta = val(a);
    const int64_t m = ta.rows(), c = ta.cols();
    if (c0 < 0 || c1 > c || c0 >= c1)
        throw ShapeError("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c1) +
                         ") out of " + ta.shape_str());
    Tensor out({m, c1 - c0});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = c0; j < c1; ++j) out.at(i, j - c0) = ta.at(i, j);
    MSCT_EMIT(out, tracked(a), "slice_cols", a, c0, c1, c) {
        Tensor& ga = t.grad_buf(a.id);
        const int64_t w = c1 - c0;
        for (int64_t i = 0; i < g.rows(); ++i)
            for (int64_t j = 0; j < w; ++j) ga[i * c + c0 + j] += g.at(i, j);
    }
    MSCT_EMIT_END;
}

V Tape::relu(V a) {
    expect_valid(a, "relu");
    Tensor out = val(a);
    for (int64_t i = 0; i < out.size(); ++i) out[i] = out[i] > 0 ? out[i] : 0.0;
    MSCT_EMIT(out, tracked(a), "relu", a) {
        const Tensor& va = t.val(a);
        Tensor& ga = t.grad_buf(a.id);
        for (int64_t i = 0; i < g.size(); ++i)
            if (va[i] > 0) ga[i] += g[i];
    }
    MSCT_EMIT_END;
}

V Tape::elu(V a) {
    expect_valid(a, "elu");
    Tensor out = val(a);
    for (int64_t i = 0; i < out.size(); ++i) out[i] = out[i] > 0 ? out[i] : std::expm1(out[i]);
    MSCT_EMIT(out, tracked(a), "elu", a, out_id = V{}) {
        (void)out_id;
        const Tensor& va = t.val(a);
        Tensor& ga = t.grad_buf(a.id);
        for (int64_t i = 0; i < g.size(); ++i)
            ga[i] += g[i] * (va[i] > 0 ? 1.0 : std::exp(va[i]));
    }
    MSCT_EMIT_END;
}

V Tape::sigmoid(V a) {
    expect_valid(a, "sigmoid");
    Tensor out = val(a);
    for (int64_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
    MSCT_EMIT(out, tracked(a), "sigmoid", a) {
        const Tensor& y = t.nodes_[static_cast<size_t>(out__.id)].val;
        Tensor& ga = t.grad_buf(a.id);
        for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
    }
    MSCT_EMIT_END;
}

V Tape::tanh_(V a) {
    expect_valid(a, "tanh");
    Tensor out = val(a);
    for (int64_t i = 0; i < out.size(); ++i) out[i] = std::tanh(out[i]);
    MSCT_EMIT(out, tracked(a), "tanh", a) {
        const Tensor& y = t.nodes_[static_cast<size_t>(out__.id)].val;
        Tensor& ga = t.grad_buf(a.id);
        for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
    }
    MSCT_EMIT_END;
}

V Tape::log_(V a) {
    expect_valid(a, "log");
    Tensor out = val(a);
    for (int64_t i = 0; i < out.size(); ++i) out[i] = std::log(out[i]);
    MSCT_EMIT(out, tracked(a), "log", a) {
        const Tensor& va = t.val(a);
        Tensor& ga = t.grad_buf(a.id);
        for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] / va[i];
    }
    MSCT_EMIT_END;
}

V Tape::clamp_min(V a, double floor) {
    expect_valid(a, "clamp_min");
    Tensor out = val(a);
    for (int64_t i = 0; i < out.size(); ++i) out[i] = std::max(out[i], floor);
    MSCT_EMIT(out, tracked(a), "clamp_min", a, floor) {
        const Tensor& va = t.val(a);
        Tensor& ga = t.grad_buf(a.id);
        for (int64_t i = 0; i < g.size(); ++i)
            if (va[i] >= floor) ga[i] += g[i];
    }
    MSCT_EMIT_END;
}

V Tape::softmax_rows(V a, bool causal) {
    expect_valid(a, "softmax");
    const Tensor& ta = val(a);
    const int64_t m = ta.rows(), n = ta.cols();
    if (causal && m != n)
        throw ShapeError("softmax: causal mask needs a square matrix, got " + ta.shape_str());
    Tensor out({m, n});
    for (int64_t i = 0; i < m; ++i) {
        const int64_t lim = causal ? i + 1 : n;
        double mx = -1e308;
        for (int64_t j = 0; j < lim; ++j) mx = std::max(mx, ta.at(i, j));
        double sum = 0;
        for (int64_t j = 0; j < lim; ++j) {
            const double e = std::exp(ta.at(i, j) - mx);
            out.at(i, j) = e;
            sum += e;
        }
        for (int64_t j = 0; j < lim; ++j) out.at(i, j) /= sum;
        // masked entries stay exactly zero
    }
    MSCT_EMIT(out, tracked(a), "softmax", a, causal, m, n) {
        const Tensor& p = t.nodes_[static_cast<size_t>(out__.id)].val;
        Tensor& ga = t.grad_buf(a.id);
        for (int64_t i = 0; i < m; ++i) {
            const int64_t lim = causal ? i + 1 : n;
            double dot = 0;
            for (int64_t j = 0; j < lim; ++j) dot += p.at(i, j) * g.at(i, j);
            for (int64_t j = 0; j < lim; ++j)
                ga[i * n + j] += p.at(i, j) * (g.at(i, j) - dot);
        }
    }
    MSCT_EMIT_END;
}

V Tape::mean_all(V a) {
    expect_valid(a, "mean");
    const Tensor& ta = val(a);
    if (ta.size() == 0) throw UsageError("mean: empty tensor");
    double s = 0;
    for (int64_t i = 0; i < ta.size(); ++i) s += ta[i];
    const double inv = 1.0 / static_cast<double>(ta.size());
    Tensor out = Tensor::scalar(s * inv);
    MSCT_EMIT(out, tracked(a), "mean", a, inv) {
        Tensor& ga = t.grad_buf(a.id);
        const double gs = g[0] * inv;
        for (int64_t i = 0; i < ga.size(); ++i) ga[i] += gs;
    }
    MSCT_EMIT_END;
}

V Tape::sum_all(V a) {
    expect_valid(a, "sum");
    const Tensor& ta = val(a);
    double s = 0;
    for (int64_t i = 0; i < ta.size(); ++i) s += ta[i];
    Tensor out = Tensor::scalar(s);
    MSCT_EMIT(out, tracked(a), "sum", a) {
        Tensor& ga = t.grad_buf(a.id);
        const double gs = g[0];
        for (int64_t i = 0; i < ga.size(); ++i) ga[i] += gs;
    }
    MSCT_EMIT_END;
}

V Tape::layer_norm(V x, V gain, V bias) {
    expect_valid(x, "layer_norm");
    expect_valid(gain, "layer_norm");
    expect_valid(bias, "layer_norm");
    const Tensor& tx = val(x);
    const Tensor& tg = val(gain);
    const Tensor& tb = val(bias);
    const int64_t m = tx.rows(), n = tx.cols();
    if (tg.size() != n || tb.size() != n)
        throw ShapeError("layer_norm: gain/bias " + shapes2(tg, tb) + " do not match axis " +
                         std::to_string(n));
    Tensor out({m, n});
    Tensor xhat({m, n});
    std::vector<double> inv_std(static_cast<size_t>(m));
    for (int64_t i = 0; i < m; ++i) {
        double mu = 0;
        for (int64_t j = 0; j < n; ++j) mu += tx.at(i, j);
        mu /= static_cast<double>(n);
        double var = 0;
        for (int64_t j = 0; j < n; ++j) {
            const double d = tx.at(i, j) - mu;
            var += d * d;
        }
        var /= static_cast<double>(n);
        const double is = 1.0 / std::sqrt(var + kLayerNormEps);
        inv_std[static_cast<size_t>(i)] = is;
        for (int64_t j = 0; j < n; ++j) {
            const double xh = (tx.at(i, j) - mu) * is;
            xhat.at(i, j) = xh;
            out.at(i, j) = xh * tg[j] + tb[j];
        }
    }
    MSCT_EMIT(out, tracked(x) || tracked(gain) || tracked(bias), "layer_norm", x, gain, bias,
              xh = std::move(xhat), istd = std::move(inv_std), m, n) {
        const Tensor& vg = t.val(gain);
        if (t.tracked(gain)) {
            Tensor& gg = t.grad_buf(gain.id);
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j) gg[j] += g.at(i, j) * xh.at(i, j);
        }
        if (t.tracked(bias)) {
            Tensor& gb = t.grad_buf(bias.id);
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j) gb[j] += g.at(i, j);
        }
        if (t.tracked(x)) {
            Tensor& gx = t.grad_buf(x.id);
            for (int64_t i = 0; i < m; ++i) {
                double mean_gy = 0, mean_gyxh = 0;
                for (int64_t j = 0; j < n; ++j) {
                    const double gy = g.at(i, j) * vg[j];
                    mean_gy += gy;
                    mean_gyxh += gy * xh.at(i, j);
                }
                mean_gy /= static_cast<double>(n);
                mean_gyxh /= static_cast<double>(n);
                const double is = istd[static_cast<size_t>(i)];
                for (int64_t j = 0; j < n; ++j) {
                    const double gy = g.at(i, j) * vg[j];
                    gx[i * n + j] += is * (gy - mean_gy - xh.at(i, j) * mean_gyxh);
                }
            }
        }
    }
    MSCT_EMIT_END;
}

V Tape::linear(V x, V w, V b) {
    expect_valid(x, "linear");
    expect_valid(w, "linear");
    expect_valid(b, "linear");
    const Tensor& tx = val(x);
    const Tensor& tw = val(w);
    const Tensor& tb = val(b);
    const int64_t m = tx.rows(), k = tx.cols(), n = tw.cols();
    if (tw.rows() != k) throw ShapeError("linear: x*w mismatch " + shapes2(tx, tw));
    if (tb.size() != n)
        throw ShapeError("linear: bias " + tb.shape_str() + " does not match width " +
                         std::to_string(n));
    Tensor out({m, n});
    kern::matmul(tx.data(), tw.data(), out.data(), m, k, n);
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out.at(i, j) += tb[j];
    MSCT_EMIT(out, tracked(x) || tracked(w) || tracked(b), "linear", x, w, b, m, k, n) {
        const Tensor& vx = t.val(x);
        const Tensor& vw = t.val(w);
        if (t.tracked(x)) {  // dX += G * W^T
            Tensor dx({m, k});
            kern::matmul_nt(g.data(), vw.data(), dx.data(), m, n, k);
            Tensor& gx = t.grad_buf(x.id);
            for (int64_t i = 0; i < dx.size(); ++i) gx[i] += dx[i];
        }
        if (t.tracked(w)) {  // dW += X^T * G
            Tensor dw({k, n});
            kern::matmul_tn(vx.data(), g.data(), dw.data(), k, m, n);
            Tensor& gw = t.grad_buf(w.id);
            for (int64_t i = 0; i < dw.size(); ++i) gw[i] += dw[i];
        }
        if (t.tracked(b)) {
            Tensor& gb = t.grad_buf(b.id);
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j) gb[j] += g.at(i, j);
        }
    }
    MSCT_EMIT_END;
}

V Tape::scale_cols(V x, const Tensor& mask) {
    expect_valid(x, "scale_cols");
    const Tensor& tx = val(x);
    const int64_t m = tx.rows(), n = tx.cols();
    if (mask.size() != n)
        throw ShapeError("scale_cols: mask " + mask.shape_str() + " does not match width " +
                         std::to_string(n));
    Tensor out = tx;
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out.at(i, j) *= mask[j];
    MSCT_EMIT(out, tracked(x), "scale_cols", x, mk = mask, m, n) {
        Tensor& gx = t.grad_buf(x.id);
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j) gx[i * n + j] += g.at(i, j) * mk[j];
    }
    MSCT_EMIT_END;
}

V Tape::mul_const(V x, const Tensor& mask) {
    expect_valid(x, "mul_const");
    const Tensor& tx = val(x);
    if (!tx.same_shape(mask))
        throw ShapeError("mul_const: shape mismatch " + shapes2(tx, mask));
    Tensor out = tx;
    for (int64_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
    MSCT_EMIT(out, tracked(x), "mul_const", x, mk = mask) {
        Tensor& gx = t.grad_buf(x.id);
        for (int64_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mk[i];
    }
    MSCT_EMIT_END;
}

V Tape::grad_reverse(V a) {
    expect_valid(a, "grad_reverse");
    Tensor out = val(a);
    MSCT_EMIT(out, tracked(a), "grad_reverse", a) {
        Tensor& ga = t.grad_buf(a.id);
        for (int64_t i = 0; i < g.size(); ++i) ga[i] -= g[i];
    }
    MSCT_EMIT_END;
}

void Tape::backward(V loss) {
    expect_valid(loss, "backward");
    const Node& ln = nodes_[static_cast<size_t>(loss.id)];
    if (ln.val.size() != 1)
        throw UsageError("backward: loss must be scalar, got " + ln.val.shape_str());
    if (!ln.track) throw UsageError("backward: loss does not depend on tracked values");
    grad_buf(loss.id)[0] = 1.0;
    for (int32_t id = loss.id; id >= 0; --id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.track && n.grad_ready && n.back) n.back(*this);
    }
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

static void check_rate(double rate) {
    if (!(rate >= 0.0 && rate < 1.0))
        throw ConfigError("dropout: rate must be in [0,1), got " + std::to_string(rate));
}

V variational_dropout(Tape& t, V x, double rate, Mode mode, Rng* rng) {
    check_rate(rate);
    if (mode == Mode::Eval || rate == 0.0) return x;
    if (!rng) throw UsageError("dropout: train mode needs an rng");
    const int64_t n = t.val(x).cols();
    Tensor mask({n});
    const double keep = 1.0 - rate;
    for (int64_t j = 0; j < n; ++j) mask[j] = rng->bernoulli(keep) ? 1.0 / keep : 0.0;
    return t.scale_cols(x, mask);
}

V dropout_elementwise(Tape& t, V x, double rate, Mode mode, Rng* rng) {
    check_rate(rate);
    if (mode == Mode::Eval || rate == 0.0) return x;
    if (!rng) throw UsageError("dropout: train mode needs an rng");
    const Tensor& tx = t.val(x);
    Tensor mask(tx.shape());
    const double keep = 1.0 - rate;
    for (int64_t i = 0; i < mask.size(); ++i) mask[i] = rng->bernoulli(keep) ? 1.0 / keep : 0.0;
    return t.mul_const(x, mask);
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

void Adam::step(Parameter& p, const Tensor& grad) {
    if (!grad.same_shape(p.value))
        throw ShapeError("adam: grad " + grad.shape_str() + " does not match param '" + p.name +
                         "' " + p.value.shape_str());
    State& st = states_[p.name];
    if (st.t == 0) {
        st.m = Tensor::zeros(p.value.shape());
        st.v = Tensor::zeros(p.value.shape());
    }
    st.t += 1;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(st.t));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(st.t));
    for (int64_t i = 0; i < p.value.size(); ++i) {
        const double gi = grad[i];
        st.m[i] = b1 * st.m[i] + (1.0 - b1) * gi;
        st.v[i] = b2 * st.v[i] + (1.0 - b2) * gi * gi;
        const double mhat = st.m[i] / bc1;
        const double vhat = st.v[i] / bc2;
        p.value[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
}

void Adam::step(std::span<Parameter* const> params, Tape& tape, double lr_override) {
    const double saved = cfg_.lr;
    if (lr_override > 0) cfg_.lr = lr_override;
    for (Parameter* p : params) step(*p, tape.grad_of(*p));
    cfg_.lr = saved;
}

}  // namespace msct
