#include "msct/layers.hpp"

#include <cmath>

namespace msct {

Parameter& ParamSet::add(std::string name, std::string group, Tensor init) {
    if (find(name)) throw UsageError("param set: duplicate parameter '" + name + "'");
    items_.push_back(std::make_unique<Parameter>(
        Parameter{std::move(name), std::move(group), std::move(init)}));
    return *items_.back();
}

Parameter* ParamSet::find(const std::string& name) {
    for (auto& p : items_)
        if (p->name == name) return p.get();
    return nullptr;
}

const Parameter* ParamSet::find(const std::string& name) const {
    for (auto& p : items_)
        if (p->name == name) return p.get();
    return nullptr;
}

std::vector<Parameter*> ParamSet::in_groups(const std::vector<std::string>& groups) const {
    std::vector<Parameter*> out;
    for (auto& p : items_)
        for (const auto& g : groups)
            if (p->group == g) {
                out.push_back(p.get());
                break;
            }
    return out;
}

LinearLayer LinearLayer::create(ParamSet& ps, const std::string& name, const std::string& group,
                                int64_t in, int64_t out, Rng& rng) {
    const double bound = std::sqrt(1.0 / static_cast<double>(in));
    LinearLayer l;
    l.w = &ps.add(name + ".w", group, uniform_init(rng, {in, out}, bound));
    l.b = &ps.add(name + ".b", group, uniform_init(rng, {out}, bound));
    return l;
}

HeadLayer HeadLayer::create(ParamSet& ps, const std::string& name, const std::string& group,
                            int64_t in, int64_t hidden, int64_t out, Rng& rng) {
    HeadLayer h;
    h.l1 = LinearLayer::create(ps, name + ".fc1", group, in, hidden, rng);
    h.l2 = LinearLayer::create(ps, name + ".fc2", group, hidden, out, rng);
    return h;
}

AttentionLayer AttentionLayer::create(ParamSet& ps, const std::string& name,
                                      const std::string& group, AttentionConfig cfg, Rng& rng) {
    if (cfg.d_h < 1 || cfg.d_a < 1 || cfg.heads < 1)
        throw ConfigError("attention: dims must be >= 1");
    AttentionLayer a;
    a.cfg = cfg;
    for (int64_t i = 0; i < cfg.heads; ++i) {
        const std::string h = name + ".h" + std::to_string(i);
        a.wq.push_back(LinearLayer::create(ps, h + ".q", group, cfg.d_h, cfg.d_a, rng));
        a.wk.push_back(LinearLayer::create(ps, h + ".k", group, cfg.d_h, cfg.d_a, rng));
        a.wv.push_back(LinearLayer::create(ps, h + ".v", group, cfg.d_h, cfg.d_a, rng));
    }
    a.wo = LinearLayer::create(ps, name + ".out", group, cfg.heads * cfg.d_a, cfg.d_h, rng);
    return a;
}

V scaled_dot_attention(Tape& t, V q, V k, V v, bool causal) {
    const Tensor& tq = t.val(q);
    const Tensor& tk = t.val(k);
    const Tensor& tv = t.val(v);
    if (tq.cols() != tk.cols())
        throw ShapeError("attention: q/k widths differ " + tq.shape_str() + " vs " +
                         tk.shape_str());
    if (tk.rows() != tv.rows())
        throw ShapeError("attention: k/v lengths differ " + tk.shape_str() + " vs " +
                         tv.shape_str());
    V scores = t.scale(t.matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(tq.cols())));
    V probs = t.softmax_rows(scores, causal);
    return t.matmul(probs, v);
}

V multi_head_attention(Tape& t, V h, std::optional<V> context, const AttentionLayer& attn,
                       const DropoutCtx& drop) {
    const AttentionConfig& cfg = attn.cfg;
    const Tensor& th = t.val(h);
    if (th.cols() != cfg.d_h)
        throw ShapeError("multi_head_attention: input width " + th.shape_str() +
                         " does not match d_h=" + std::to_string(cfg.d_h));
    V kv_src = context.value_or(h);
    if (t.val(kv_src).cols() != cfg.d_h)
        throw ShapeError("multi_head_attention: context width " + t.val(kv_src).shape_str() +
                         " does not match d_h=" + std::to_string(cfg.d_h));
    // Cross-attention sees only past context, so the mask applies to
    // self-attention alone. Single-row queries are causal by construction.
    const bool mask = !context.has_value() && cfg.causal && th.rows() > 1;
    V heads;
    for (int64_t i = 0; i < cfg.heads; ++i) {
        V qi = attn.wq[static_cast<size_t>(i)].apply(t, h);
        V ki = attn.wk[static_cast<size_t>(i)].apply(t, kv_src);
        V vi = attn.wv[static_cast<size_t>(i)].apply(t, kv_src);
        V scores = t.scale(t.matmul_nt(qi, ki), 1.0 / std::sqrt(static_cast<double>(cfg.d_a)));
        V probs = t.softmax_rows(scores, mask);
        probs = dropout_elementwise(t, probs, drop.rate, drop.mode, drop.rng);
        V hi = t.matmul(probs, vi);
        heads = (i == 0) ? hi : t.concat_cols(heads, hi);
    }
    return attn.wo.apply(t, heads);
}

FeedForwardLayer FeedForwardLayer::create(ParamSet& ps, const std::string& name,
                                          const std::string& group, int64_t d_h, int64_t inner,
                                          Rng& rng) {
    FeedForwardLayer f;
    f.l1 = LinearLayer::create(ps, name + ".fc1", group, d_h, inner, rng);
    f.l2 = LinearLayer::create(ps, name + ".fc2", group, inner, d_h, rng);
    return f;
}

AddNormLayer AddNormLayer::create(ParamSet& ps, const std::string& name, const std::string& group,
                                  int64_t d_h, Rng& rng) {
    (void)rng;
    AddNormLayer n;
    n.gain = &ps.add(name + ".gain", group, Tensor::full({d_h}, 1.0));
    n.bias = &ps.add(name + ".bias", group, Tensor::zeros({d_h}));
    return n;
}

TransformerBlock TransformerBlock::create(ParamSet& ps, const std::string& name,
                                          const std::string& group, AttentionConfig cfg,
                                          int64_t ff_inner, bool with_cross, Rng& rng) {
    TransformerBlock b;
    b.self_attn = AttentionLayer::create(ps, name + ".self", group, cfg, rng);
    b.norm_self = AddNormLayer::create(ps, name + ".norm1", group, cfg.d_h, rng);
    if (with_cross) {
        AttentionConfig ccfg = cfg;
        ccfg.causal = false;
        b.cross_attn = AttentionLayer::create(ps, name + ".cross", group, ccfg, rng);
        b.norm_cross = AddNormLayer::create(ps, name + ".norm2", group, cfg.d_h, rng);
    }
    b.ff = FeedForwardLayer::create(ps, name + ".ff", group, cfg.d_h, ff_inner, rng);
    b.norm_ff = AddNormLayer::create(ps, name + ".norm3", group, cfg.d_h, rng);
    return b;
}

V TransformerBlock::apply(Tape& t, V h, std::optional<V> phi, const DropoutCtx& drop) const {
    if (cross_attn && !phi)
        throw UsageError("decoder block: missing encoder representation");
    V a = multi_head_attention(t, h, std::nullopt, self_attn, drop);
    V x = norm_self.apply(t, h, a);
    if (cross_attn) {
        V c = multi_head_attention(t, x, phi, *cross_attn, drop);
        x = norm_cross.apply(t, x, c);
    }
    V f = ff.apply(t, x);
    V out = norm_ff.apply(t, x, f);
    if (drop.block_out_mask && drop.mode == Mode::Train && drop.rate > 0.0)
        out = t.scale_cols(out, *drop.block_out_mask);
    return out;
}

LstmLayer LstmLayer::create(ParamSet& ps, const std::string& name, const std::string& group,
                            int64_t d_in, int64_t hidden, Rng& rng) {
    const double bx = std::sqrt(1.0 / static_cast<double>(d_in));
    const double bh = std::sqrt(1.0 / static_cast<double>(hidden));
    LstmLayer l;
    l.hidden = hidden;
    l.wx = &ps.add(name + ".wx", group, uniform_init(rng, {d_in, 4 * hidden}, bx));
    l.wh = &ps.add(name + ".wh", group, uniform_init(rng, {hidden, 4 * hidden}, bh));
    Tensor bias = Tensor::zeros({4 * hidden});
    for (int64_t j = hidden; j < 2 * hidden; ++j) bias[j] = 1.0;  // forget gate
    l.b = &ps.add(name + ".b", group, std::move(bias));
    return l;
}

LstmState lstm_step(Tape& t, const LstmLayer& p, V x_row, const LstmState& prev,
                    const Tensor* in_mask, const Tensor* h_mask) {
    const int64_t H = p.hidden;
    V x = in_mask ? t.scale_cols(x_row, *in_mask) : x_row;
    V h = h_mask ? t.scale_cols(prev.h, *h_mask) : prev.h;
    V gates = t.linear(x, t.param(*p.wx), t.param(*p.b));
    gates = t.add(gates, t.matmul(h, t.param(*p.wh)));
    V i = t.sigmoid(t.slice_cols(gates, 0, H));
    V f = t.sigmoid(t.slice_cols(gates, H, 2 * H));
    V g = t.tanh_(t.slice_cols(gates, 2 * H, 3 * H));
    V o = t.sigmoid(t.slice_cols(gates, 3 * H, 4 * H));
    V c = t.add(t.mul(f, prev.c), t.mul(i, g));
    V hn = t.mul(o, t.tanh_(c));
    return {hn, c};
}

LstmSeqOut lstm_forward(Tape& t, const LstmLayer& p, V inputs, const DropoutCtx& drop,
                        std::optional<LstmState> init) {
    const Tensor& ti = t.val(inputs);
    const int64_t len = ti.rows(), d_in = ti.cols();
    if (d_in != t.val(t.param(*p.wx)).rows())
        throw ShapeError("lstm: input width " + ti.shape_str() + " does not match " +
                         p.wx->value.shape_str());
    Tensor in_mask, h_mask;
    const bool dropping = drop.mode == Mode::Train && drop.rate > 0.0;
    if (dropping) {
        if (!drop.rng) throw UsageError("lstm: train-mode dropout needs an rng");
        const double keep = 1.0 - drop.rate;
        in_mask = Tensor({d_in});
        for (int64_t j = 0; j < d_in; ++j)
            in_mask[j] = drop.rng->bernoulli(keep) ? 1.0 / keep : 0.0;
        h_mask = Tensor({p.hidden});
        for (int64_t j = 0; j < p.hidden; ++j)
            h_mask[j] = drop.rng->bernoulli(keep) ? 1.0 / keep : 0.0;
    }
    LstmState st = init ? *init
                        : LstmState{t.constant(Tensor::zeros({1, p.hidden})),
                                    t.constant(Tensor::zeros({1, p.hidden}))};
    V hs, cs;
    for (int64_t r = 0; r < len; ++r) {
        V x_row = t.slice_rows(inputs, r, r + 1);
        st = lstm_step(t, p, x_row, st, dropping ? &in_mask : nullptr,
                       dropping ? &h_mask : nullptr);
        hs = (r == 0) ? st.h : t.concat_rows(hs, st.h);
        cs = (r == 0) ? st.c : t.concat_rows(cs, st.c);
    }
    return {hs, cs, st};
}

RnnLayer RnnLayer::create(ParamSet& ps, const std::string& name, const std::string& group,
                          int64_t d_in, int64_t hidden, Rng& rng) {
    const double bx = std::sqrt(1.0 / static_cast<double>(d_in));
    const double bh = std::sqrt(1.0 / static_cast<double>(hidden));
    RnnLayer l;
    l.hidden = hidden;
    l.wx = &ps.add(name + ".wx", group, uniform_init(rng, {d_in, hidden}, bx));
    l.wh = &ps.add(name + ".wh", group, uniform_init(rng, {hidden, hidden}, bh));
    l.b = &ps.add(name + ".b", group, Tensor::zeros({hidden}));
    return l;
}

V rnn_step(Tape& t, const RnnLayer& p, V x_row, V h_prev, const Tensor* in_mask,
           const Tensor* h_mask) {
    V x = in_mask ? t.scale_cols(x_row, *in_mask) : x_row;
    V h = h_mask ? t.scale_cols(h_prev, *h_mask) : h_prev;
    V z = t.linear(x, t.param(*p.wx), t.param(*p.b));
    return t.tanh_(t.add(z, t.matmul(h, t.param(*p.wh))));
}

Tensor positional_encoding(int64_t t_max, int64_t d_h, double base) {
    Tensor pe({t_max, d_h});
    for (int64_t pos = 0; pos < t_max; ++pos) {
        for (int64_t d = 0; 2 * d < d_h; ++d) {
            const double angle =
                static_cast<double>(pos) /
                std::pow(base, 2.0 * static_cast<double>(d) / static_cast<double>(d_h));
            pe.at(pos, 2 * d) = std::sin(angle);
            if (2 * d + 1 < d_h) pe.at(pos, 2 * d + 1) = std::cos(angle);
        }
    }
    return pe;
}

}  // namespace msct
