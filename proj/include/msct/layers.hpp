#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "msct/tensor.hpp"

namespace msct {

// Owns every trainable tensor of a model; iteration order is creation order
// and therefore stable, which checkpointing and the optimizer rely on.
class ParamSet {
public:
    Parameter& add(std::string name, std::string group, Tensor init);
    Parameter* find(const std::string& name);
    const Parameter* find(const std::string& name) const;
    std::vector<Parameter*> in_groups(const std::vector<std::string>& groups) const;
    const std::vector<std::unique_ptr<Parameter>>& all() const { return items_; }
    std::vector<std::unique_ptr<Parameter>>& all() { return items_; }
    size_t size() const { return items_.size(); }

private:
    std::vector<std::unique_ptr<Parameter>> items_;
};

// Affine map y = x*W + b with +/- sqrt(1/fan_in) init.
struct LinearLayer {
    Parameter* w = nullptr;
    Parameter* b = nullptr;
    static LinearLayer create(ParamSet& ps, const std::string& name, const std::string& group,
                              int64_t in, int64_t out, Rng& rng);
    V apply(Tape& t, V x) const { return t.linear(x, t.param(*w), t.param(*b)); }
};

// Two fully connected layers with an ELU in between (the output-head shape).
struct HeadLayer {
    LinearLayer l1, l2;
    static HeadLayer create(ParamSet& ps, const std::string& name, const std::string& group,
                            int64_t in, int64_t hidden, int64_t out, Rng& rng);
    V apply(Tape& t, V x) const { return l2.apply(t, t.elu(l1.apply(t, x))); }
};

struct AttentionConfig {
    int64_t d_h = 32;
    int64_t d_a = 32;  // per-head width
    int64_t heads = 2;
    bool causal = true;
};

// Per-head Q/K/V projections (d_h -> d_a) plus the output projection
// (heads*d_a -> d_h) applied to the concatenated heads.
struct AttentionLayer {
    AttentionConfig cfg;
    std::vector<LinearLayer> wq, wk, wv;
    LinearLayer wo;
    static AttentionLayer create(ParamSet& ps, const std::string& name, const std::string& group,
                                 AttentionConfig cfg, Rng& rng);
};

// softmax(q k^T / sqrt(d_a)) v; with the causal flag position i attends
// only to positions <= i.
V scaled_dot_attention(Tape& t, V q, V k, V v, bool causal);

struct DropoutCtx {
    Mode mode = Mode::Eval;
    double rate = 0.0;
    Rng* rng = nullptr;
    // Preset per-block output mask keeps the dropout variational across both
    // encoder rows and sequential decode steps. Empty means "sample nothing".
    const Tensor* block_out_mask = nullptr;
};

// Self-attention when context is absent, cross-attention (keys/values from
// the context) when present. Attention weights get elementwise dropout.
V multi_head_attention(Tape& t, V h, std::optional<V> context, const AttentionLayer& attn,
                       const DropoutCtx& drop);

struct FeedForwardLayer {
    LinearLayer l1, l2;
    static FeedForwardLayer create(ParamSet& ps, const std::string& name,
                                   const std::string& group, int64_t d_h, int64_t inner,
                                   Rng& rng);
    V apply(Tape& t, V x) const { return l2.apply(t, t.relu(l1.apply(t, x))); }
};

struct AddNormLayer {
    Parameter* gain = nullptr;
    Parameter* bias = nullptr;
    static AddNormLayer create(ParamSet& ps, const std::string& name, const std::string& group,
                               int64_t d_h, Rng& rng);
    V apply(Tape& t, V x, V sublayer_out) const {
        return t.layer_norm(t.add(x, sublayer_out), t.param(*gain), t.param(*bias));
    }
};

// Masked self-attention -> Add&Norm -> (cross-attention -> Add&Norm) ->
// feed-forward -> Add&Norm. Cross-attention layers exist only on decoder
// blocks.
struct TransformerBlock {
    AttentionLayer self_attn;
    std::optional<AttentionLayer> cross_attn;
    AddNormLayer norm_self, norm_cross, norm_ff;
    FeedForwardLayer ff;
    static TransformerBlock create(ParamSet& ps, const std::string& name,
                                   const std::string& group, AttentionConfig cfg, int64_t ff_inner,
                                   bool with_cross, Rng& rng);
    // Full-sequence application (causal mask on self-attention).
    V apply(Tape& t, V h, std::optional<V> phi, const DropoutCtx& drop) const;
};

// Gate order inside the fused projections: input, forget, cell, output.
struct LstmLayer {
    Parameter* wx = nullptr;  // (d_in x 4H)
    Parameter* wh = nullptr;  // (H x 4H)
    Parameter* b = nullptr;   // (4H), forget slice initialized to 1
    int64_t hidden = 0;
    static LstmLayer create(ParamSet& ps, const std::string& name, const std::string& group,
                            int64_t d_in, int64_t hidden, Rng& rng);
};

struct LstmState {
    V h, c;
};

struct LstmSeqOut {
    V hs;  // (len x H) hidden states
    V cs;  // (len x H) cell states
    LstmState last;
};

LstmState lstm_step(Tape& t, const LstmLayer& p, V x_row, const LstmState& prev,
                    const Tensor* in_mask, const Tensor* h_mask);
// Runs the recurrence over all rows of `inputs`; variational dropout masks
// (one per input feature, one per hidden unit) stay fixed across time.
LstmSeqOut lstm_forward(Tape& t, const LstmLayer& p, V inputs, const DropoutCtx& drop,
                        std::optional<LstmState> init = std::nullopt);

// Vanilla tanh RNN used by the plain recurrent baseline.
struct RnnLayer {
    Parameter* wx = nullptr;
    Parameter* wh = nullptr;
    Parameter* b = nullptr;
    int64_t hidden = 0;
    static RnnLayer create(ParamSet& ps, const std::string& name, const std::string& group,
                           int64_t d_in, int64_t hidden, Rng& rng);
};
V rnn_step(Tape& t, const RnnLayer& p, V x_row, V h_prev, const Tensor* in_mask,
           const Tensor* h_mask);

// PE(t, 2d) = sin(t / base^(2d/d_h)), PE(t, 2d+1) = cos(t / base^(2d/d_h)).
Tensor positional_encoding(int64_t t_max, int64_t d_h, double base = 1000.0);

}  // namespace msct
