// Copyright (C) 2026 the inferlab authors
// SPDX-License-Identifier: Apache-2.0
//
// Deterministic toy causal transformer: grouped-query attention, GLU feed
// forward, pre-layer-norm, single residual stream per block,
//
//   h^(l) = h^(l-1) + gamma_l * FFN_l(GQA_l(LN_l(h^(l-1))))
//
// with an exact reverse-mode gradient pass. Every inference-side subsystem
// in this library operates on this substrate.
#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "inferlab/common.hpp"
#include "inferlab/matrix.hpp"

namespace inferlab {

using Token = std::uint32_t;
using TokenSeq = std::vector<Token>;

inline constexpr double kLayerNormEps = 1e-5;

struct ModelConfig {
    std::size_t vocab_size = 64;
    std::size_t num_layers = 2;
    std::size_t d_model = 32;
    std::size_t num_q_heads = 4;
    std::size_t num_kv_heads = 2;
    std::size_t d_ff = 64;
    std::size_t max_seq = 512;
    std::uint64_t seed = 0;

    std::size_t head_dim() const { return d_model / num_q_heads; }
    std::size_t group_factor() const { return num_q_heads / num_kv_heads; }

    void validate() const {
        INFERLAB_CHECK_CONFIG(vocab_size >= 2, "vocab_size must be >= 2, got ", vocab_size);
        INFERLAB_CHECK_CONFIG(num_layers >= 1 && d_model >= 1 && num_q_heads >= 1 &&
                                  num_kv_heads >= 1 && d_ff >= 1 && max_seq >= 1,
                              "all model dimensions must be >= 1");
        INFERLAB_CHECK_CONFIG(num_q_heads % num_kv_heads == 0,
                              "num_q_heads (", num_q_heads, ") must be divisible by num_kv_heads (",
                              num_kv_heads, ")");
        INFERLAB_CHECK_CONFIG(d_model % num_q_heads == 0,
                              "d_model (", d_model, ") must be divisible by num_q_heads (",
                              num_q_heads, ")");
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Query head -> key/value head under grouped-query attention. Zero-based:
/// k(i) = floor(i / g) for i in [0, H_q).
inline std::size_t gqa_head_map(std::size_t query_head, std::size_t group_factor) {
    INFERLAB_CHECK(group_factor >= 1, "group factor must be >= 1");
    return query_head / group_factor;
}

struct LayerParams {
    std::vector<double> ln_scale; // d_model
    std::vector<double> ln_shift; // d_model
    Matrix w_q;                   // d_model x (H_q * d_h)
    Matrix w_k;                   // d_model x (H_kv * d_h)
    Matrix w_v;                   // d_model x (H_kv * d_h)
    Matrix w_o;                   // d_model x d_model
    Matrix w1_gate;               // d_ff x d_model
    Matrix w1_up;                 // d_ff x d_model
    Matrix w2;                    // d_model x d_ff

    /// Width pruning shrinks this below the construction-time config value.
    std::size_t ffn_width() const { return w1_gate.rows; }
};

struct ModelParams {
    ModelConfig config;
    Matrix token_embedding;    // |V| x d_model
    Matrix position_embedding; // max_seq x d_model (learned absolute positions)
    std::vector<LayerParams> layers;
    Matrix unembedding;        // d_model x |V|

    void validate() const;
    std::size_t parameter_count() const;

    /// this += s * other (shapes must match). Lets ModelParams double as a
    /// gradient container for SGD-style updates.
    void add_scaled(const ModelParams& other, double s);
    void fill(double value);
};

namespace detail {

inline void check_same_layout(const ModelParams& a, const ModelParams& b) {
    INFERLAB_CHECK(a.layers.size() == b.layers.size() &&
                       a.token_embedding.same_shape(b.token_embedding) &&
                       a.position_embedding.same_shape(b.position_embedding) &&
                       a.unembedding.same_shape(b.unembedding),
                   "parameter layout mismatch");
    for (std::size_t l = 0; l < a.layers.size(); ++l) {
        INFERLAB_CHECK(a.layers[l].w1_gate.same_shape(b.layers[l].w1_gate) &&
                           a.layers[l].w_k.same_shape(b.layers[l].w_k),
                       "parameter layout mismatch at layer ", l);
    }
}

template <typename F>
void for_each_tensor(ModelParams& p, F&& f) {
    f(p.token_embedding);
    f(p.position_embedding);
    for (auto& layer : p.layers) {
        f(layer.w_q);
        f(layer.w_k);
        f(layer.w_v);
        f(layer.w_o);
        f(layer.w1_gate);
        f(layer.w1_up);
        f(layer.w2);
    }
    f(p.unembedding);
}

} // namespace detail

inline void ModelParams::validate() const {
    config.validate();
    const std::size_t d = config.d_model;
    INFERLAB_CHECK_CONFIG(token_embedding.rows == config.vocab_size && token_embedding.cols == d,
                          "token embedding shape mismatch");
    INFERLAB_CHECK_CONFIG(position_embedding.rows == config.max_seq && position_embedding.cols == d,
                          "position embedding shape mismatch");
    INFERLAB_CHECK_CONFIG(layers.size() == config.num_layers, "layer count mismatch");
    const std::size_t qw = config.num_q_heads * config.head_dim();
    const std::size_t kw = config.num_kv_heads * config.head_dim();
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& lp = layers[l];
        INFERLAB_CHECK_CONFIG(lp.ln_scale.size() == d && lp.ln_shift.size() == d,
                              "layernorm shape mismatch at layer ", l);
        INFERLAB_CHECK_CONFIG(lp.w_q.rows == d && lp.w_q.cols == qw, "w_q shape mismatch at layer ", l);
        INFERLAB_CHECK_CONFIG(lp.w_k.rows == d && lp.w_k.cols == kw, "w_k shape mismatch at layer ", l);
        INFERLAB_CHECK_CONFIG(lp.w_v.rows == d && lp.w_v.cols == kw, "w_v shape mismatch at layer ", l);
        INFERLAB_CHECK_CONFIG(lp.w_o.rows == d && lp.w_o.cols == d, "w_o shape mismatch at layer ", l);
        const std::size_t ff = lp.ffn_width();
        INFERLAB_CHECK_CONFIG(ff >= 1, "layer ", l, " has empty FFN");
        INFERLAB_CHECK_CONFIG(lp.w1_gate.cols == d && lp.w1_up.rows == ff && lp.w1_up.cols == d &&
                                  lp.w2.rows == d && lp.w2.cols == ff,
                              "GLU shape mismatch at layer ", l);
    }
    INFERLAB_CHECK_CONFIG(unembedding.rows == d && unembedding.cols == config.vocab_size,
                          "unembedding shape mismatch");
    bool finite = token_embedding.all_finite() && position_embedding.all_finite() &&
                  unembedding.all_finite();
    for (const auto& lp : layers) {
        finite = finite && lp.w_q.all_finite() && lp.w_k.all_finite() && lp.w_v.all_finite() &&
                 lp.w_o.all_finite() && lp.w1_gate.all_finite() && lp.w1_up.all_finite() &&
                 lp.w2.all_finite();
    }
    INFERLAB_CHECK_CONFIG(finite, "parameters contain non-finite entries");
}

inline std::size_t ModelParams::parameter_count() const {
    std::size_t n = token_embedding.data.size() + position_embedding.data.size() +
                    unembedding.data.size();
    for (const auto& lp : layers) {
        n += lp.ln_scale.size() + lp.ln_shift.size() + lp.w_q.data.size() + lp.w_k.data.size() +
             lp.w_v.data.size() + lp.w_o.data.size() + lp.w1_gate.data.size() +
             lp.w1_up.data.size() + lp.w2.data.size();
    }
    return n;
}

inline void ModelParams::add_scaled(const ModelParams& other, double s) {
    detail::check_same_layout(*this, other);
    auto axpy = [s](std::vector<double>& a, const std::vector<double>& b) {
        for (std::size_t i = 0; i < a.size(); ++i) a[i] += s * b[i];
    };
    axpy(token_embedding.data, other.token_embedding.data);
    axpy(position_embedding.data, other.position_embedding.data);
    for (std::size_t l = 0; l < layers.size(); ++l) {
        axpy(layers[l].ln_scale, other.layers[l].ln_scale);
        axpy(layers[l].ln_shift, other.layers[l].ln_shift);
        axpy(layers[l].w_q.data, other.layers[l].w_q.data);
        axpy(layers[l].w_k.data, other.layers[l].w_k.data);
        axpy(layers[l].w_v.data, other.layers[l].w_v.data);
        axpy(layers[l].w_o.data, other.layers[l].w_o.data);
        axpy(layers[l].w1_gate.data, other.layers[l].w1_gate.data);
        axpy(layers[l].w1_up.data, other.layers[l].w1_up.data);
        axpy(layers[l].w2.data, other.layers[l].w2.data);
    }
    axpy(unembedding.data, other.unembedding.data);
}

inline void ModelParams::fill(double value) {
    detail::for_each_tensor(*this, [value](Matrix& m) { std::fill(m.data.begin(), m.data.end(), value); });
    for (auto& layer : layers) {
        std::fill(layer.ln_scale.begin(), layer.ln_scale.end(), value);
        std::fill(layer.ln_shift.begin(), layer.ln_shift.end(), value);
    }
}

/// Seeded parameter initialization. Draw order is fixed and documented:
/// token embedding, position embedding, then per layer w_q, w_k, w_v, w_o,
/// w1_gate, w1_up, w2, then the unembedding; layernorm starts at scale 1,
/// shift 0. Projections are Normal(0, 1/sqrt(fan_in)); embeddings are
/// Normal(0, 0.5). Same (config, seed) gives bit-identical parameters.
inline ModelParams init_params(const ModelConfig& config) {
    config.validate();
    Rng rng(Rng::derive(config.seed, "model-init"));
    auto fill_normal = [&rng](Matrix& m, double scale) {
        for (double& v : m.data) v = scale * rng.normal();
    };

    ModelParams p;
    p.config = config;
    const std::size_t d = config.d_model;
    p.token_embedding = Matrix(config.vocab_size, d);
    fill_normal(p.token_embedding, 0.5);
    p.position_embedding = Matrix(config.max_seq, d);
    fill_normal(p.position_embedding, 0.5);

    const double proj_scale = 1.0 / std::sqrt(static_cast<double>(d));
    const double ffn_scale = 1.0 / std::sqrt(static_cast<double>(config.d_ff));
    p.layers.resize(config.num_layers);
    for (auto& lp : p.layers) {
        lp.ln_scale.assign(d, 1.0);
        lp.ln_shift.assign(d, 0.0);
        lp.w_q = Matrix(d, config.num_q_heads * config.head_dim());
        fill_normal(lp.w_q, proj_scale);
        lp.w_k = Matrix(d, config.num_kv_heads * config.head_dim());
        fill_normal(lp.w_k, proj_scale);
        lp.w_v = Matrix(d, config.num_kv_heads * config.head_dim());
        fill_normal(lp.w_v, proj_scale);
        lp.w_o = Matrix(d, d);
        fill_normal(lp.w_o, proj_scale);
        lp.w1_gate = Matrix(config.d_ff, d);
        fill_normal(lp.w1_gate, proj_scale);
        lp.w1_up = Matrix(config.d_ff, d);
        fill_normal(lp.w1_up, proj_scale);
        lp.w2 = Matrix(d, config.d_ff);
        fill_normal(lp.w2, ffn_scale);
    }
    p.unembedding = Matrix(d, config.vocab_size);
    fill_normal(p.unembedding, proj_scale);
    return p;
}

// ---------------------------------------------------------------------------
// Gates (Concrete-relaxed keep/drop switches used by structural pruning)
// ---------------------------------------------------------------------------

/// Per-layer gate gamma_l scales the whole block contribution; per-neuron
/// gate g_{l,j} scales one GLU hidden output. `*_alpha` are the learnable
/// Concrete logit parameters (alpha > 0); `*_gate` hold realized values in
/// [0,1]; `*_noise` keep the logistic noise (log u - log(1-u)) of the last
/// realization so a gate can be re-evaluated at a perturbed alpha.
struct GateSet {
    std::vector<double> layer_alpha;
    std::vector<std::vector<double>> neuron_alpha;
    double temperature = 0.5;

    std::vector<double> layer_gate;
    std::vector<std::vector<double>> neuron_gate;
    std::vector<double> layer_noise;
    std::vector<std::vector<double>> neuron_noise;

    bool realized() const { return !layer_gate.empty(); }

    static GateSet for_model(const ModelParams& params, double alpha = 1.0, double tau = 0.5) {
        INFERLAB_CHECK_CONFIG(tau > 0.0, "gate temperature must be > 0");
        GateSet g;
        g.temperature = tau;
        g.layer_alpha.assign(params.layers.size(), alpha);
        for (const auto& lp : params.layers)
            g.neuron_alpha.emplace_back(lp.ffn_width(), alpha);
        return g;
    }

    /// All-ones realized gates: forward with these is bitwise identical to
    /// the ungated forward.
    static GateSet ones(const ModelParams& params) {
        GateSet g = for_model(params);
        g.layer_gate.assign(params.layers.size(), 1.0);
        for (const auto& lp : params.layers)
            g.neuron_gate.emplace_back(lp.ffn_width(), 1.0);
        return g;
    }

    void check_shapes(const ModelParams& params) const {
        INFERLAB_CHECK(layer_alpha.size() == params.layers.size() &&
                           neuron_alpha.size() == params.layers.size(),
                       "gate set does not match layer count");
        for (std::size_t l = 0; l < params.layers.size(); ++l)
            INFERLAB_CHECK(neuron_alpha[l].size() == params.layers[l].ffn_width(),
                           "neuron gate width mismatch at layer ", l);
        if (realized()) {
            INFERLAB_CHECK(layer_gate.size() == layer_alpha.size() &&
                               neuron_gate.size() == neuron_alpha.size(),
                           "realized gate shape mismatch");
            for (std::size_t l = 0; l < neuron_gate.size(); ++l)
                INFERLAB_CHECK(neuron_gate[l].size() == neuron_alpha[l].size(),
                               "realized neuron gate width mismatch at layer ", l);
        }
    }
};

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

/// Test probe: adds `delta` to one gradient site during the forward pass so
/// site gradients can be checked against central finite differences.
struct ForwardProbe {
    enum class Site { ffn_activation, residual_output };
    Site site = Site::ffn_activation;
    std::size_t layer = 0;
    std::size_t position = 0;
    std::size_t index = 0;
    double delta = 0.0;
};

enum class AttentionBackend { naive, blockwise };

struct ForwardOptions {
    const GateSet* gates = nullptr;
    const ForwardProbe* probe = nullptr;
    AttentionBackend backend = AttentionBackend::naive;
    std::size_t block_rows = 8; // blockwise backend tile sizes
    std::size_t block_cols = 8;
};

struct ForwardTrace {
    TokenSeq tokens;
    Matrix logits;    // T x |V|
    Matrix probs;     // T x |V|, rows sum to 1
    /// Mean attention over all layers and query heads; row t is query t's
    /// distribution over key positions (empty under the blockwise backend,
    /// which never materializes attention probabilities).
    Matrix attn_mean;
    std::vector<Matrix> ffn_activations;   // per layer: T x d_ff (GLU outputs z)
    std::vector<Matrix> residual_outputs;  // per layer: T x d_model (h^(l))

    std::size_t seq_len() const { return tokens.size(); }
};

namespace detail {

inline double silu(double x) {
    return x / (1.0 + std::exp(-x));
}

inline double sigmoid(double x) {
    return 1.0 / (1.0 + std::exp(-x));
}

/// d/dx silu(x) = sigmoid(x) * (1 + x * (1 - sigmoid(x)))
inline double silu_grad(double x) {
    const double s = sigmoid(x);
    return s * (1.0 + x * (1.0 - s));
}

/// Everything the reverse pass needs, captured per layer.
struct LayerTape {
    std::vector<double> inv_std;  // T
    Matrix normed;                // T x d: (x - mean) / std
    Matrix ln_out;                // T x d
    Matrix q, k, v;               // T x (H*d_h)
    std::vector<Matrix> attn;     // per query head: T x T probabilities (naive backend)
    Matrix heads;                 // T x d: concatenated head outputs
    Matrix attn_proj;             // T x d: heads * w_o
    Matrix gate_pre, up_pre;      // T x d_ff
    Matrix glu;                   // T x d_ff: z (after any probe nudge)
    Matrix gated;                 // T x d_ff: g .* z
    Matrix ffn_out;               // T x d
};

struct Tape {
    Matrix h0;                    // T x d embeddings
    std::vector<LayerTape> layers;
    std::vector<Matrix> h;        // per layer: T x d residual outputs
    Matrix logits, probs;
};

inline void layer_norm_row(std::span<const double> x, std::span<const double> scale,
                           std::span<const double> shift, std::span<double> normed,
                           std::span<double> out, double& inv_std) {
    const std::size_t d = x.size();
    double mean = 0.0;
    for (const double v : x) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (const double v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    inv_std = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t i = 0; i < d; ++i) {
        normed[i] = (x[i] - mean) * inv_std;
        out[i] = normed[i] * scale[i] + shift[i];
    }
}

// x (T x n) times w (n x m) -> out (T x m)
inline void matmul(const Matrix& x, const Matrix& w, Matrix& out) {
    out = Matrix(x.rows, w.cols);
    for (std::size_t t = 0; t < x.rows; ++t) {
        const double* xr = x.data.data() + t * x.cols;
        double* or_ = out.data.data() + t * w.cols;
        for (std::size_t i = 0; i < x.cols; ++i) {
            const double xv = xr[i];
            if (xv == 0.0) continue;
            const double* wr = w.data.data() + i * w.cols;
            for (std::size_t j = 0; j < w.cols; ++j) or_[j] += xv * wr[j];
        }
    }
}

Tape run_forward(const ModelParams& params, std::span<const Token> tokens,
                 const ForwardOptions& options);

} // namespace detail

ForwardTrace forward(const ModelParams& params, std::span<const Token> tokens,
                     const ForwardOptions& options = {});

// ---------------------------------------------------------------------------
// Loss and gradients
// ---------------------------------------------------------------------------

/// Negative log-likelihood, summed over positions: L = -sum_t log P_t(target_t).
/// Targets are aligned one-past the inputs: target_t is the token expected
/// after position t.
inline double nll_loss(const ForwardTrace& trace, std::span<const Token> targets) {
    INFERLAB_CHECK(targets.size() == trace.seq_len(),
                   "nll_loss: targets length ", targets.size(), " != sequence length ",
                   trace.seq_len());
    double loss = 0.0;
    for (std::size_t t = 0; t < targets.size(); ++t) {
        INFERLAB_CHECK(targets[t] < trace.probs.cols, "target token out of vocabulary");
        loss -= std::log(trace.probs(t, targets[t]));
    }
    return loss;
}

/// dL/dlogits of nll_loss: row t is P_t - onehot(target_t).
inline Matrix nll_dlogits(const ForwardTrace& trace, std::span<const Token> targets) {
    INFERLAB_CHECK(targets.size() == trace.seq_len(), "nll_dlogits: length mismatch");
    Matrix d = trace.probs;
    for (std::size_t t = 0; t < targets.size(); ++t) {
        INFERLAB_CHECK(targets[t] < d.cols, "target token out of vocabulary");
        d(t, targets[t]) -= 1.0;
    }
    return d;
}

struct GradientSites {
    Matrix d_logits;                  // T x |V|
    std::vector<Matrix> d_ffn;        // per layer: T x d_ff  (dL/dz)
    std::vector<Matrix> d_residual;   // per layer: T x d_model (dL/dh^(l))
};

struct GateGrads {
    std::vector<double> d_layer_gate;
    std::vector<std::vector<double>> d_neuron_gate;
};

struct BackwardResult {
    GradientSites sites;
    ModelParams param_grads; // same layout as the parameters
    GateGrads gate_grads;    // populated when options.gates != nullptr
};

/// Reverse-mode gradients seeded by an arbitrary dL/dlogits. The forward
/// intermediates are recomputed internally (with the same options the trace
/// was produced under) and checked bitwise against the trace's logits, which
/// catches trace/params mismatches.
BackwardResult backward_from_dlogits(const ModelParams& params, const ForwardTrace& trace,
                                     const Matrix& d_logits, const ForwardOptions& options = {});

/// Gradients of nll_loss(trace, targets) at every site.
inline BackwardResult backward(const ModelParams& params, const ForwardTrace& trace,
                               std::span<const Token> targets, const ForwardOptions& options = {}) {
    return backward_from_dlogits(params, trace, nll_dlogits(trace, targets), options);
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

struct Greedy {};
struct Temperature {
    double tau = 1.0;
};
struct TopK {
    std::size_t k = 1;
};
struct Nucleus {
    double p = 1.0;
};
using SamplingStrategy = std::variant<Greedy, Temperature, TopK, Nucleus>;

inline Token argmax_token(std::span<const double> logits) {
    return static_cast<Token>(argmax_index(logits));
}

namespace detail {

inline Token sample_from_probs(std::span<const double> probs, Rng& rng) {
    const double u = rng.uniform();
    double cum = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        cum += probs[i];
        if (u < cum) return static_cast<Token>(i);
    }
    // Numerical slack: the final cumulative sum can fall a hair short of 1.
    std::size_t last = probs.size() - 1;
    while (last > 0 && probs[last] == 0.0) --last;
    return static_cast<Token>(last);
}

} // namespace detail

/// Samples a token. Greedy takes the argmax with lowest-index tie-break;
/// the stochastic strategies renormalize over their truncated support and
/// invert the CDF with a single uniform draw, so a seeded rng reproduces
/// the choice exactly.
inline Token sample_token(std::span<const double> logits, const SamplingStrategy& strategy,
                          Rng& rng) {
    INFERLAB_CHECK(!logits.empty(), "sample_token: empty logits");
    for (const double v : logits) INFERLAB_CHECK(std::isfinite(v), "sample_token: non-finite logit");

    if (std::holds_alternative<Greedy>(strategy)) {
        return argmax_token(logits);
    }
    if (const auto* t = std::get_if<Temperature>(&strategy)) {
        INFERLAB_CHECK(t->tau > 0.0, "temperature must be > 0");
        std::vector<double> p(logits.begin(), logits.end());
        for (double& v : p) v /= t->tau;
        softmax_inplace(std::span<double>(p));
        return detail::sample_from_probs(p, rng);
    }

    // Truncated strategies: order by (probability desc, index asc).
    std::vector<double> probs(logits.begin(), logits.end());
    softmax_inplace(std::span<double>(probs));
    std::vector<std::size_t> order(probs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&probs](std::size_t a, std::size_t b) {
        if (probs[a] != probs[b]) return probs[a] > probs[b];
        return a < b;
    });

    std::size_t support = 0;
    if (const auto* k = std::get_if<TopK>(&strategy)) {
        INFERLAB_CHECK(k->k > 0, "top-k requires k > 0");
        support = std::min(k->k, probs.size());
    } else {
        const auto& n = std::get<Nucleus>(strategy);
        INFERLAB_CHECK(n.p > 0.0 && n.p <= 1.0, "nucleus p must be in (0, 1]");
        double cum = 0.0;
        while (support < probs.size()) {
            cum += probs[order[support]];
            ++support;
            if (cum >= n.p) break;
        }
    }

    double total = 0.0;
    for (std::size_t i = 0; i < support; ++i) total += probs[order[i]];
    const double u = rng.uniform() * total;
    double cum = 0.0;
    for (std::size_t i = 0; i < support; ++i) {
        cum += probs[order[i]];
        if (u < cum) return static_cast<Token>(order[i]);
    }
    return static_cast<Token>(order[support - 1]);
}

// ---------------------------------------------------------------------------
// Implementation
// ---------------------------------------------------------------------------

namespace detail {

inline Tape run_forward(const ModelParams& params, std::span<const Token> tokens,
                        const ForwardOptions& options) {
    const auto& cfg = params.config;
    const std::size_t seq = tokens.size();
    INFERLAB_CHECK(seq >= 1, "forward: empty token sequence");
    INFERLAB_CHECK(seq <= cfg.max_seq, "forward: sequence length ", seq, " exceeds max_seq ",
                   cfg.max_seq);
    for (const Token t : tokens)
        INFERLAB_CHECK(t < cfg.vocab_size, "forward: token ", t, " out of vocabulary");
    if (options.gates) options.gates->check_shapes(params);

    const std::size_t d = cfg.d_model;
    const std::size_t hq = cfg.num_q_heads;
    const std::size_t hkv = cfg.num_kv_heads;
    const std::size_t dh = cfg.head_dim();
    const std::size_t g = cfg.group_factor();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    Tape tape;
    tape.h0 = Matrix(seq, d);
    for (std::size_t t = 0; t < seq; ++t)
        for (std::size_t i = 0; i < d; ++i)
            tape.h0(t, i) = params.token_embedding(tokens[t], i) + params.position_embedding(t, i);

    tape.layers.resize(params.layers.size());
    tape.h.resize(params.layers.size());

    const Matrix* h_prev = &tape.h0;
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        const auto& lp = params.layers[l];
        auto& lt = tape.layers[l];
        const std::size_t ff = lp.ffn_width();

        lt.inv_std.resize(seq);
        lt.normed = Matrix(seq, d);
        lt.ln_out = Matrix(seq, d);
        for (std::size_t t = 0; t < seq; ++t)
            layer_norm_row(h_prev->row(t), lp.ln_scale, lp.ln_shift, lt.normed.row(t),
                           lt.ln_out.row(t), lt.inv_std[t]);

        matmul(lt.ln_out, lp.w_q, lt.q);
        matmul(lt.ln_out, lp.w_k, lt.k);
        matmul(lt.ln_out, lp.w_v, lt.v);

        lt.heads = Matrix(seq, d);
        lt.attn.assign(hq, Matrix());
        for (std::size_t head = 0; head < hq; ++head) {
            const std::size_t kv = gqa_head_map(head, g);
            const std::size_t qo = head * dh;
            const std::size_t ko = kv * dh;
            auto& attn = lt.attn[head];
            attn = Matrix(seq, seq);
            for (std::size_t t = 0; t < seq; ++t) {
                // Causal scores over positions <= t, stable softmax in place.
                double row_max = -std::numeric_limits<double>::infinity();
                for (std::size_t s = 0; s <= t; ++s) {
                    double score = 0.0;
                    for (std::size_t i = 0; i < dh; ++i)
                        score += lt.q(t, qo + i) * lt.k(s, ko + i);
                    score *= inv_sqrt_dh;
                    attn(t, s) = score;
                    row_max = std::max(row_max, score);
                }
                double denom = 0.0;
                for (std::size_t s = 0; s <= t; ++s) {
                    attn(t, s) = std::exp(attn(t, s) - row_max);
                    denom += attn(t, s);
                }
                for (std::size_t s = 0; s <= t; ++s) attn(t, s) /= denom;
                for (std::size_t i = 0; i < dh; ++i) {
                    double acc = 0.0;
                    for (std::size_t s = 0; s <= t; ++s) acc += attn(t, s) * lt.v(s, ko + i);
                    lt.heads(t, qo + i) = acc;
                }
            }
        }

        matmul(lt.heads, lp.w_o, lt.attn_proj);

        // GLU pre-activations: a = x * w1_gate^T, b = x * w1_up^T (w1 stores
        // neurons as rows).
        lt.gate_pre = Matrix(seq, ff);
        lt.up_pre = Matrix(seq, ff);
        for (std::size_t t = 0; t < seq; ++t) {
            const double* x = lt.attn_proj.data.data() + t * d;
            for (std::size_t j = 0; j < ff; ++j) {
                const double* wg = lp.w1_gate.data.data() + j * d;
                const double* wu = lp.w1_up.data.data() + j * d;
                double a = 0.0, b = 0.0;
                for (std::size_t i = 0; i < d; ++i) {
                    a += wg[i] * x[i];
                    b += wu[i] * x[i];
                }
                lt.gate_pre(t, j) = a;
                lt.up_pre(t, j) = b;
            }
        }

        lt.glu = Matrix(seq, ff);
        for (std::size_t t = 0; t < seq; ++t)
            for (std::size_t j = 0; j < ff; ++j)
                lt.glu(t, j) = silu(lt.gate_pre(t, j)) * lt.up_pre(t, j);

        if (options.probe && options.probe->site == ForwardProbe::Site::ffn_activation &&
            options.probe->layer == l)
            lt.glu(options.probe->position, options.probe->index) += options.probe->delta;

        lt.gated = lt.glu;
        if (options.gates) {
            INFERLAB_CHECK(options.gates->realized(), "gated forward requires realized gates");
            const auto& ng = options.gates->neuron_gate[l];
            for (std::size_t t = 0; t < seq; ++t)
                for (std::size_t j = 0; j < ff; ++j) lt.gated(t, j) *= ng[j];
        }

        lt.ffn_out = Matrix(seq, d);
        for (std::size_t t = 0; t < seq; ++t) {
            const double* y = lt.gated.data.data() + t * ff;
            double* out = lt.ffn_out.data.data() + t * d;
            for (std::size_t j = 0; j < ff; ++j) {
                const double yj = y[j];
                if (yj == 0.0) continue;
                for (std::size_t i = 0; i < d; ++i) out[i] += lp.w2(i, j) * yj;
            }
        }

        const double gamma = options.gates ? options.gates->layer_gate[l] : 1.0;
        Matrix h_out(seq, d);
        for (std::size_t t = 0; t < seq; ++t)
            for (std::size_t i = 0; i < d; ++i)
                h_out(t, i) = (*h_prev)(t, i) + gamma * lt.ffn_out(t, i);

        if (options.probe && options.probe->site == ForwardProbe::Site::residual_output &&
            options.probe->layer == l)
            h_out(options.probe->position, options.probe->index) += options.probe->delta;

        tape.h[l] = std::move(h_out);
        h_prev = &tape.h[l];
    }

    tape.logits = Matrix(seq, cfg.vocab_size);
    matmul(*h_prev, params.unembedding, tape.logits);
    tape.probs = tape.logits;
    for (std::size_t t = 0; t < seq; ++t) softmax_inplace(tape.probs.row(t));
    return tape;
}

} // namespace detail

inline ForwardTrace forward(const ModelParams& params, std::span<const Token> tokens,
                            const ForwardOptions& options) {
    detail::Tape tape = detail::run_forward(params, tokens, options);
    const std::size_t seq = tokens.size();

    ForwardTrace trace;
    trace.tokens.assign(tokens.begin(), tokens.end());
    trace.logits = std::move(tape.logits);
    trace.probs = std::move(tape.probs);
    trace.ffn_activations.reserve(tape.layers.size());
    trace.residual_outputs.reserve(tape.layers.size());
    for (auto& lt : tape.layers) trace.ffn_activations.push_back(std::move(lt.glu));
    for (auto& h : tape.h) trace.residual_outputs.push_back(std::move(h));

    if (options.backend == AttentionBackend::naive) {
        trace.attn_mean = Matrix(seq, seq);
        const double denom =
            static_cast<double>(tape.layers.size()) * static_cast<double>(params.config.num_q_heads);
        for (const auto& lt : tape.layers)
            for (const auto& attn : lt.attn)
                for (std::size_t i = 0; i < attn.data.size(); ++i)
                    trace.attn_mean.data[i] += attn.data[i] / denom;
    }
    return trace;
}

inline BackwardResult backward_from_dlogits(const ModelParams& params, const ForwardTrace& trace,
                                            const Matrix& d_logits, const ForwardOptions& options) {
    const auto& cfg = params.config;
    const std::size_t seq = trace.seq_len();
    INFERLAB_CHECK(seq > 0, "backward: empty trace");
    INFERLAB_CHECK(d_logits.rows == seq && d_logits.cols == cfg.vocab_size,
                   "backward: d_logits shape mismatch");

    detail::Tape tape = detail::run_forward(params, trace.tokens, options);
    INFERLAB_CHECK(tape.logits == trace.logits,
                   "backward: trace does not match these parameters/options");

    const std::size_t d = cfg.d_model;
    const std::size_t hq = cfg.num_q_heads;
    const std::size_t dh = cfg.head_dim();
    const std::size_t g = cfg.group_factor();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    const std::size_t num_layers = params.layers.size();

    BackwardResult result;
    result.sites.d_logits = d_logits;
    result.sites.d_ffn.resize(num_layers);
    result.sites.d_residual.resize(num_layers);

    // Zero-filled gradient container with the parameter layout.
    result.param_grads = params;
    result.param_grads.fill(0.0);

    if (options.gates) {
        result.gate_grads.d_layer_gate.assign(num_layers, 0.0);
        result.gate_grads.d_neuron_gate.resize(num_layers);
        for (std::size_t l = 0; l < num_layers; ++l)
            result.gate_grads.d_neuron_gate[l].assign(params.layers[l].ffn_width(), 0.0);
    }

    // Unembedding: logits = h^(L) * U.
    const Matrix& h_top = tape.h[num_layers - 1];
    Matrix d_h(seq, d);
    auto& d_unembed = result.param_grads.unembedding;
    for (std::size_t t = 0; t < seq; ++t) {
        for (std::size_t v = 0; v < cfg.vocab_size; ++v) {
            const double dl = d_logits(t, v);
            if (dl == 0.0) continue;
            for (std::size_t i = 0; i < d; ++i) {
                d_unembed(i, v) += h_top(t, i) * dl;
                d_h(t, i) += params.unembedding(i, v) * dl;
            }
        }
    }

    for (std::size_t l = num_layers; l-- > 0;) {
        const auto& lp = params.layers[l];
        auto& lt = tape.layers[l];
        auto& pg = result.param_grads.layers[l];
        const std::size_t ff = lp.ffn_width();

        // d_h currently holds dL/dh^(l), the gradient at this block's
        // residual output site.
        result.sites.d_residual[l] = d_h;

        const double gamma = options.gates ? options.gates->layer_gate[l] : 1.0;

        // h^(l) = h^(l-1) + gamma * f
        Matrix d_f(seq, d);
        double d_gamma = 0.0;
        for (std::size_t t = 0; t < seq; ++t)
            for (std::size_t i = 0; i < d; ++i) {
                d_f(t, i) = gamma * d_h(t, i);
                d_gamma += d_h(t, i) * lt.ffn_out(t, i);
            }
        if (options.gates) result.gate_grads.d_layer_gate[l] = d_gamma;

        // f = w2 * y, y = g .* z
        Matrix d_y(seq, ff);
        for (std::size_t t = 0; t < seq; ++t)
            for (std::size_t j = 0; j < ff; ++j) {
                double acc = 0.0;
                const double yj = lt.gated(t, j);
                for (std::size_t i = 0; i < d; ++i) {
                    acc += lp.w2(i, j) * d_f(t, i);
                    pg.w2(i, j) += d_f(t, i) * yj;
                }
                d_y(t, j) = acc;
            }

        Matrix d_z(seq, ff);
        for (std::size_t t = 0; t < seq; ++t)
            for (std::size_t j = 0; j < ff; ++j) {
                const double gate = options.gates ? options.gates->neuron_gate[l][j] : 1.0;
                if (options.gates)
                    result.gate_grads.d_neuron_gate[l][j] += d_y(t, j) * lt.glu(t, j);
                d_z(t, j) = d_y(t, j) * gate;
            }
        result.sites.d_ffn[l] = d_z;

        // z = silu(a) * b
        Matrix d_x_ffn(seq, d);
        for (std::size_t t = 0; t < seq; ++t) {
            const double* x = lt.attn_proj.data.data() + t * d;
            for (std::size_t j = 0; j < ff; ++j) {
                const double a = lt.gate_pre(t, j);
                const double b = lt.up_pre(t, j);
                const double dz = d_z(t, j);
                const double da = dz * b * detail::silu_grad(a);
                const double db = dz * detail::silu(a);
                double* wg_grad = pg.w1_gate.data.data() + j * d;
                double* wu_grad = pg.w1_up.data.data() + j * d;
                const double* wg = lp.w1_gate.data.data() + j * d;
                const double* wu = lp.w1_up.data.data() + j * d;
                for (std::size_t i = 0; i < d; ++i) {
                    wg_grad[i] += da * x[i];
                    wu_grad[i] += db * x[i];
                    d_x_ffn(t, i) += da * wg[i] + db * wu[i];
                }
            }
        }

        // attn_proj = heads * w_o
        Matrix d_heads(seq, d);
        for (std::size_t t = 0; t < seq; ++t)
            for (std::size_t i = 0; i < d; ++i) {
                const double dxo = d_x_ffn(t, i);
                if (dxo == 0.0) continue;
                for (std::size_t j = 0; j < d; ++j) {
                    pg.w_o(j, i) += lt.heads(t, j) * dxo;
                    d_heads(t, j) += lp.w_o(j, i) * dxo;
                }
            }

        // Attention backward per query head.
        Matrix d_q(seq, lt.q.cols);
        Matrix d_k(seq, lt.k.cols);
        Matrix d_v(seq, lt.v.cols);
        for (std::size_t head = 0; head < hq; ++head) {
            const std::size_t kv = gqa_head_map(head, g);
            const std::size_t qo = head * dh;
            const std::size_t ko = kv * dh;
            const Matrix& attn = lt.attn[head];
            for (std::size_t t = 0; t < seq; ++t) {
                // d_p over positions <= t, then softmax backward to scores.
                double dot = 0.0;
                std::vector<double> d_p(t + 1, 0.0);
                for (std::size_t s = 0; s <= t; ++s) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < dh; ++i)
                        acc += d_heads(t, qo + i) * lt.v(s, ko + i);
                    d_p[s] = acc;
                    dot += attn(t, s) * acc;
                    for (std::size_t i = 0; i < dh; ++i)
                        d_v(s, ko + i) += attn(t, s) * d_heads(t, qo + i);
                }
                for (std::size_t s = 0; s <= t; ++s) {
                    const double d_score = attn(t, s) * (d_p[s] - dot) * inv_sqrt_dh;
                    if (d_score == 0.0) continue;
                    for (std::size_t i = 0; i < dh; ++i) {
                        d_q(t, qo + i) += d_score * lt.k(s, ko + i);
                        d_k(s, ko + i) += d_score * lt.q(t, qo + i);
                    }
                }
            }
        }

        // Projections: q = ln_out * w_q, etc.
        Matrix d_ln(seq, d);
        auto proj_backward = [&](const Matrix& d_out, const Matrix& w, Matrix& w_grad) {
            for (std::size_t t = 0; t < seq; ++t)
                for (std::size_t j = 0; j < w.cols; ++j) {
                    const double dv = d_out(t, j);
                    if (dv == 0.0) continue;
                    for (std::size_t i = 0; i < d; ++i) {
                        w_grad(i, j) += lt.ln_out(t, i) * dv;
                        d_ln(t, i) += w(i, j) * dv;
                    }
                }
        };
        proj_backward(d_q, lp.w_q, pg.w_q);
        proj_backward(d_k, lp.w_k, pg.w_k);
        proj_backward(d_v, lp.w_v, pg.w_v);

        // LayerNorm backward; u = normed * scale + shift.
        Matrix d_x_ln(seq, d);
        for (std::size_t t = 0; t < seq; ++t) {
            double mean_dn = 0.0;
            double mean_dn_n = 0.0;
            std::vector<double> d_n(d);
            for (std::size_t i = 0; i < d; ++i) {
                pg.ln_scale[i] += d_ln(t, i) * lt.normed(t, i);
                pg.ln_shift[i] += d_ln(t, i);
                d_n[i] = d_ln(t, i) * lp.ln_scale[i];
                mean_dn += d_n[i];
                mean_dn_n += d_n[i] * lt.normed(t, i);
            }
            mean_dn /= static_cast<double>(d);
            mean_dn_n /= static_cast<double>(d);
            for (std::size_t i = 0; i < d; ++i)
                d_x_ln(t, i) = lt.inv_std[t] * (d_n[i] - mean_dn - lt.normed(t, i) * mean_dn_n);
        }

        // d h^(l-1) = residual passthrough + layernorm branch.
        for (std::size_t t = 0; t < seq; ++t)
            for (std::size_t i = 0; i < d; ++i) d_h(t, i) += d_x_ln(t, i);
    }

    // Embedding scatter.
    for (std::size_t t = 0; t < seq; ++t)
        for (std::size_t i = 0; i < d; ++i) {
            result.param_grads.token_embedding(trace.tokens[t], i) += d_h(t, i);
            result.param_grads.position_embedding(t, i) += d_h(t, i);
        }

    return result;
}

} // namespace inferlab
