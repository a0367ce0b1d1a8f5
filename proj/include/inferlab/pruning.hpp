// Copyright (C) 2026 the inferlab authors
// SPDX-License-Identifier: Apache-2.0
//
// Structural width and depth pruning. Importance estimation is
// gradient-times-activation:
//
//   I_j     = E[ |dL/dz_j * z_j| ]          (FFN neurons)
//   I^(l)   = E[ |<dL/dh^(l), h^(l)>| ]     (whole blocks)
//
// Binary keep/drop gates relax to Concrete samples
// g = sigmoid((log a + log u - log(1-u)) / tau), trained with a sparsity-
// penalized objective, then binarize; physical slicing produces a smaller
// model whose forward equals the binary-gated one.
#pragma once

#include <algorithm>
#include <vector>

#include "inferlab/model.hpp"

namespace inferlab {

struct EvalSample {
    TokenSeq tokens;
    TokenSeq targets;
};
using EvalBatch = std::vector<EvalSample>;

struct ImportanceReport {
    std::vector<std::vector<double>> neuron; // [layer][neuron]
    std::vector<double> layer;               // [layer]
    std::size_t num_samples = 0;
};

/// I_j = mean over batch samples and positions of |dL/dz_j * z_j|.
inline std::vector<std::vector<double>> neuron_importance(const ModelParams& params,
                                                          const EvalBatch& batch) {
    INFERLAB_CHECK(!batch.empty(), "neuron_importance: empty batch");
    std::vector<std::vector<double>> importance(params.layers.size());
    for (std::size_t l = 0; l < params.layers.size(); ++l)
        importance[l].assign(params.layers[l].ffn_width(), 0.0);

    std::size_t total_positions = 0;
    for (const auto& sample : batch) {
        const auto trace = forward(params, sample.tokens);
        const auto grads = backward(params, trace, sample.targets);
        total_positions += sample.tokens.size();
        for (std::size_t l = 0; l < params.layers.size(); ++l)
            for (std::size_t t = 0; t < sample.tokens.size(); ++t)
                for (std::size_t j = 0; j < importance[l].size(); ++j)
                    importance[l][j] += std::abs(grads.sites.d_ffn[l](t, j) *
                                                 trace.ffn_activations[l](t, j));
    }
    for (auto& per_layer : importance)
        for (auto& v : per_layer) v /= static_cast<double>(total_positions);
    return importance;
}

/// I^(l) = mean over batch samples of |<dL/dh^(l), dh^(l)>|, where dh^(l) =
/// h^(l) - h^(l-1) is what block l adds to the residual stream. The inner
/// product runs over all positions and channels; it is the first-order
/// estimate of the loss change from dropping the block.
inline std::vector<double> layer_importance(const ModelParams& params, const EvalBatch& batch) {
    INFERLAB_CHECK(!batch.empty(), "layer_importance: empty batch");
    std::vector<double> importance(params.layers.size(), 0.0);
    for (const auto& sample : batch) {
        const auto trace = forward(params, sample.tokens);
        const auto grads = backward(params, trace, sample.targets);
        Matrix embeddings(sample.tokens.size(), params.config.d_model);
        for (std::size_t t = 0; t < sample.tokens.size(); ++t)
            for (std::size_t i = 0; i < params.config.d_model; ++i)
                embeddings(t, i) = params.token_embedding(sample.tokens[t], i) +
                                   params.position_embedding(t, i);
        for (std::size_t l = 0; l < params.layers.size(); ++l) {
            const Matrix& h = trace.residual_outputs[l];
            const Matrix& h_prev = (l == 0) ? embeddings : trace.residual_outputs[l - 1];
            double inner = 0.0;
            for (std::size_t i = 0; i < h.data.size(); ++i)
                inner += grads.sites.d_residual[l].data[i] * (h.data[i] - h_prev.data[i]);
            importance[l] += std::abs(inner);
        }
    }
    for (auto& v : importance) v /= static_cast<double>(batch.size());
    return importance;
}

inline ImportanceReport importance_report(const ModelParams& params, const EvalBatch& batch) {
    ImportanceReport report;
    report.neuron = neuron_importance(params, batch);
    report.layer = layer_importance(params, batch);
    report.num_samples = batch.size();
    return report;
}

// ---------------------------------------------------------------------------
// Concrete gates
// ---------------------------------------------------------------------------

/// g = sigmoid((log alpha + log u - log(1 - u)) / tau), u in (0, 1).
inline double sample_gate(double alpha, double tau, double u) {
    INFERLAB_CHECK(alpha > 0.0, "sample_gate: alpha must be > 0");
    INFERLAB_CHECK(tau > 0.0, "sample_gate: tau must be > 0");
    INFERLAB_CHECK(u > 0.0 && u < 1.0, "sample_gate: u must be in (0, 1)");
    return detail::sigmoid((std::log(alpha) + std::log(u) - std::log(1.0 - u)) / tau);
}

/// Zero-noise gate value used for binarization decisions.
inline double expected_gate(double alpha, double tau) {
    return detail::sigmoid(std::log(alpha) / tau);
}

/// Recomputes realized gate values from the stored logistic noise, so the
/// same draw can be re-evaluated after an alpha update (finite differences,
/// gradient steps).
inline void refresh_gates_from_noise(GateSet& gates) {
    INFERLAB_CHECK(gates.layer_noise.size() == gates.layer_alpha.size(),
                   "refresh_gates_from_noise: gates were never realized");
    gates.layer_gate.resize(gates.layer_alpha.size());
    gates.neuron_gate.resize(gates.neuron_alpha.size());
    for (std::size_t l = 0; l < gates.layer_alpha.size(); ++l) {
        gates.layer_gate[l] = detail::sigmoid(
            (std::log(gates.layer_alpha[l]) + gates.layer_noise[l]) / gates.temperature);
        gates.neuron_gate[l].resize(gates.neuron_alpha[l].size());
        for (std::size_t j = 0; j < gates.neuron_alpha[l].size(); ++j)
            gates.neuron_gate[l][j] = detail::sigmoid(
                (std::log(gates.neuron_alpha[l][j]) + gates.neuron_noise[l][j]) /
                gates.temperature);
    }
}

/// Draws fresh logistic noise for every gate and realizes the values.
inline void realize_gates(GateSet& gates, Rng& rng) {
    gates.layer_noise.resize(gates.layer_alpha.size());
    gates.neuron_noise.resize(gates.neuron_alpha.size());
    for (std::size_t l = 0; l < gates.layer_alpha.size(); ++l) {
        const double u = rng.uniform_open();
        gates.layer_noise[l] = std::log(u) - std::log(1.0 - u);
        gates.neuron_noise[l].resize(gates.neuron_alpha[l].size());
        for (auto& noise : gates.neuron_noise[l]) {
            const double v = rng.uniform_open();
            noise = std::log(v) - std::log(1.0 - v);
        }
    }
    refresh_gates_from_noise(gates);
}

/// Deterministic realization at the zero-noise point.
inline void realize_expected_gates(GateSet& gates) {
    gates.layer_noise.assign(gates.layer_alpha.size(), 0.0);
    gates.neuron_noise.resize(gates.neuron_alpha.size());
    for (std::size_t l = 0; l < gates.neuron_alpha.size(); ++l)
        gates.neuron_noise[l].assign(gates.neuron_alpha[l].size(), 0.0);
    refresh_gates_from_noise(gates);
}

/// The joint objective as displayed: task loss plus penalties on gates that
/// are off, L + l1 * sum(1 - gamma) + l2 * sum(1 - g). Uses realized gate
/// values when present, zero-noise values otherwise.
inline double sparsity_objective(double task_loss, const GateSet& gates, double lambda1,
                                 double lambda2) {
    INFERLAB_CHECK(lambda1 >= 0.0 && lambda2 >= 0.0, "sparsity penalties must be >= 0");
    double layer_term = 0.0;
    double neuron_term = 0.0;
    for (std::size_t l = 0; l < gates.layer_alpha.size(); ++l) {
        const double gamma = gates.realized() ? gates.layer_gate[l]
                                              : expected_gate(gates.layer_alpha[l], gates.temperature);
        layer_term += 1.0 - gamma;
        for (std::size_t j = 0; j < gates.neuron_alpha[l].size(); ++j) {
            const double g = gates.realized()
                                 ? gates.neuron_gate[l][j]
                                 : expected_gate(gates.neuron_alpha[l][j], gates.temperature);
            neuron_term += 1.0 - g;
        }
    }
    return task_loss + lambda1 * layer_term + lambda2 * neuron_term;
}

// ---------------------------------------------------------------------------
// Physical slicing
// ---------------------------------------------------------------------------

/// Removes FFN neurons: rows of w1_gate / w1_up and columns of w2. The
/// pruned forward equals the binary-gated forward on the same mask.
inline ModelParams apply_width_prune(const ModelParams& params,
                                     const std::vector<std::vector<bool>>& keep) {
    INFERLAB_CHECK(keep.size() == params.layers.size(), "apply_width_prune: mask layer mismatch");
    ModelParams pruned = params;
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        const auto& mask = keep[l];
        const auto& src = params.layers[l];
        INFERLAB_CHECK(mask.size() == src.ffn_width(), "apply_width_prune: mask width mismatch");
        const std::size_t kept =
            static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
        INFERLAB_CHECK(kept >= 1, "apply_width_prune: layer ", l, " would keep no neurons");
        if (kept == src.ffn_width()) continue;

        auto& dst = pruned.layers[l];
        dst.w1_gate = Matrix(kept, src.w1_gate.cols);
        dst.w1_up = Matrix(kept, src.w1_up.cols);
        dst.w2 = Matrix(src.w2.rows, kept);
        std::size_t out = 0;
        for (std::size_t j = 0; j < mask.size(); ++j) {
            if (!mask[j]) continue;
            for (std::size_t i = 0; i < src.w1_gate.cols; ++i) {
                dst.w1_gate(out, i) = src.w1_gate(j, i);
                dst.w1_up(out, i) = src.w1_up(j, i);
            }
            for (std::size_t i = 0; i < src.w2.rows; ++i) dst.w2(i, out) = src.w2(i, j);
            ++out;
        }
    }
    return pruned;
}

/// Keeps the listed layers in their original order.
inline ModelParams apply_depth_prune(const ModelParams& params,
                                     const std::vector<std::size_t>& keep_set) {
    INFERLAB_CHECK(!keep_set.empty(), "apply_depth_prune: empty keep set");
    std::vector<std::size_t> keep = keep_set;
    std::sort(keep.begin(), keep.end());
    keep.erase(std::unique(keep.begin(), keep.end()), keep.end());
    INFERLAB_CHECK(keep.back() < params.layers.size(), "apply_depth_prune: layer index out of range");

    ModelParams pruned = params;
    pruned.layers.clear();
    for (const std::size_t l : keep) pruned.layers.push_back(params.layers[l]);
    pruned.config.num_layers = pruned.layers.size();
    return pruned;
}

/// keep iff the zero-noise gate is at least 1/2.
struct BinaryGates {
    std::vector<bool> keep_layer;
    std::vector<std::vector<bool>> keep_neuron;
};

inline BinaryGates binarize_gates(const GateSet& gates) {
    BinaryGates out;
    out.keep_layer.resize(gates.layer_alpha.size());
    out.keep_neuron.resize(gates.neuron_alpha.size());
    for (std::size_t l = 0; l < gates.layer_alpha.size(); ++l) {
        out.keep_layer[l] = expected_gate(gates.layer_alpha[l], gates.temperature) >= 0.5;
        out.keep_neuron[l].resize(gates.neuron_alpha[l].size());
        for (std::size_t j = 0; j < gates.neuron_alpha[l].size(); ++j)
            out.keep_neuron[l][j] =
                expected_gate(gates.neuron_alpha[l][j], gates.temperature) >= 0.5;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Relaxed-objective training
// ---------------------------------------------------------------------------

/// Objective the gate updates descend: mean task loss under the realized
/// gates plus retention penalties l1 * sum(gamma) + l2 * sum(g). Note the
/// penalty direction: pressure pushes gate logits down, toward pruning.
inline double prune_step_objective(const ModelParams& params, const GateSet& gates,
                                   const EvalBatch& batch, double lambda1, double lambda2) {
    INFERLAB_CHECK(!batch.empty(), "prune_step_objective: empty batch");
    INFERLAB_CHECK(gates.realized(), "prune_step_objective: gates must be realized");
    ForwardOptions options;
    options.gates = &gates;
    double task = 0.0;
    for (const auto& sample : batch)
        task += nll_loss(forward(params, sample.tokens, options), sample.targets);
    task /= static_cast<double>(batch.size());

    double layer_term = 0.0, neuron_term = 0.0;
    for (std::size_t l = 0; l < gates.layer_gate.size(); ++l) {
        layer_term += gates.layer_gate[l];
        for (const double g : gates.neuron_gate[l]) neuron_term += g;
    }
    return task + lambda1 * layer_term + lambda2 * neuron_term;
}

struct GateLogitGrads {
    std::vector<double> layer;               // d objective / d log(alpha_l)
    std::vector<std::vector<double>> neuron; // d objective / d log(alpha_{l,j})
};

/// Gradient of prune_step_objective with respect to the gate log-logits,
/// flowing through the Concrete relaxation at the realized noise:
/// dg/dlog(alpha) = g (1 - g) / tau.
inline GateLogitGrads prune_objective_gate_grads(const ModelParams& params, const GateSet& gates,
                                                 const EvalBatch& batch, double lambda1,
                                                 double lambda2) {
    INFERLAB_CHECK(!batch.empty(), "prune_objective_gate_grads: empty batch");
    INFERLAB_CHECK(gates.realized(), "prune_objective_gate_grads: gates must be realized");
    ForwardOptions options;
    options.gates = &gates;

    GateLogitGrads grads;
    grads.layer.assign(gates.layer_alpha.size(), 0.0);
    grads.neuron.resize(gates.neuron_alpha.size());
    for (std::size_t l = 0; l < gates.neuron_alpha.size(); ++l)
        grads.neuron[l].assign(gates.neuron_alpha[l].size(), 0.0);

    for (const auto& sample : batch) {
        const auto trace = forward(params, sample.tokens, options);
        const auto back = backward(params, trace, sample.targets, options);
        for (std::size_t l = 0; l < grads.layer.size(); ++l) {
            grads.layer[l] += back.gate_grads.d_layer_gate[l];
            for (std::size_t j = 0; j < grads.neuron[l].size(); ++j)
                grads.neuron[l][j] += back.gate_grads.d_neuron_gate[l][j];
        }
    }

    const double inv_batch = 1.0 / static_cast<double>(batch.size());
    for (std::size_t l = 0; l < grads.layer.size(); ++l) {
        const double gamma = gates.layer_gate[l];
        grads.layer[l] = (grads.layer[l] * inv_batch + lambda1) * gamma * (1.0 - gamma) /
                         gates.temperature;
        for (std::size_t j = 0; j < grads.neuron[l].size(); ++j) {
            const double g = gates.neuron_gate[l][j];
            grads.neuron[l][j] = (grads.neuron[l][j] * inv_batch + lambda2) * g * (1.0 - g) /
                                 gates.temperature;
        }
    }
    return grads;
}

struct PruneStepResult {
    double objective = 0.0;
    double task_loss = 0.0;
};

/// One gradient step on the relaxed objective with respect to the gate
/// logits (Concrete noise freshly drawn from `rng`). Parameters stay frozen
/// unless `co_train` is set, in which case they take an SGD step on the
/// same batch.
inline PruneStepResult prune_train_step(ModelParams& params, GateSet& gates,
                                        const EvalBatch& batch, double lambda1, double lambda2,
                                        double lr, Rng& rng, bool co_train = false) {
    INFERLAB_CHECK(lr > 0.0, "prune_train_step: lr must be > 0");
    gates.check_shapes(params);
    realize_gates(gates, rng);

    PruneStepResult result;
    ForwardOptions options;
    options.gates = &gates;
    ModelParams param_grads = params;
    param_grads.fill(0.0);

    GateLogitGrads grads;
    grads.layer.assign(gates.layer_alpha.size(), 0.0);
    grads.neuron.resize(gates.neuron_alpha.size());
    for (std::size_t l = 0; l < gates.neuron_alpha.size(); ++l)
        grads.neuron[l].assign(gates.neuron_alpha[l].size(), 0.0);

    for (const auto& sample : batch) {
        const auto trace = forward(params, sample.tokens, options);
        result.task_loss += nll_loss(trace, sample.targets);
        const auto back = backward(params, trace, sample.targets, options);
        for (std::size_t l = 0; l < grads.layer.size(); ++l) {
            grads.layer[l] += back.gate_grads.d_layer_gate[l];
            for (std::size_t j = 0; j < grads.neuron[l].size(); ++j)
                grads.neuron[l][j] += back.gate_grads.d_neuron_gate[l][j];
        }
        if (co_train) param_grads.add_scaled(back.param_grads, 1.0);
    }
    const double inv_batch = 1.0 / static_cast<double>(batch.size());
    result.task_loss *= inv_batch;

    double layer_term = 0.0, neuron_term = 0.0;
    for (std::size_t l = 0; l < gates.layer_gate.size(); ++l) {
        layer_term += gates.layer_gate[l];
        for (const double g : gates.neuron_gate[l]) neuron_term += g;
    }
    result.objective = result.task_loss + lambda1 * layer_term + lambda2 * neuron_term;

    for (std::size_t l = 0; l < gates.layer_alpha.size(); ++l) {
        const double gamma = gates.layer_gate[l];
        const double d_log_alpha = (grads.layer[l] * inv_batch + lambda1) * gamma *
                                   (1.0 - gamma) / gates.temperature;
        gates.layer_alpha[l] = std::exp(std::log(gates.layer_alpha[l]) - lr * d_log_alpha);
        for (std::size_t j = 0; j < gates.neuron_alpha[l].size(); ++j) {
            const double g = gates.neuron_gate[l][j];
            const double d = (grads.neuron[l][j] * inv_batch + lambda2) * g * (1.0 - g) /
                             gates.temperature;
            gates.neuron_alpha[l][j] = std::exp(std::log(gates.neuron_alpha[l][j]) - lr * d);
        }
    }

    if (co_train) params.add_scaled(param_grads, -lr * inv_batch);
    return result;
}

/// Keep masks that drop the lowest-importance fraction of FFN neurons.
inline std::vector<std::vector<bool>> width_masks_from_importance(
    const std::vector<std::vector<double>>& importance, double prune_fraction) {
    INFERLAB_CHECK(prune_fraction >= 0.0 && prune_fraction < 1.0,
                   "prune_fraction must be in [0, 1)");
    std::vector<std::vector<bool>> keep(importance.size());
    for (std::size_t l = 0; l < importance.size(); ++l) {
        const std::size_t width = importance[l].size();
        std::size_t drop = static_cast<std::size_t>(prune_fraction * static_cast<double>(width));
        drop = std::min(drop, width - 1);
        std::vector<std::size_t> order(width);
        for (std::size_t j = 0; j < width; ++j) order[j] = j;
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            if (importance[l][a] != importance[l][b]) return importance[l][a] < importance[l][b];
            return a < b;
        });
        keep[l].assign(width, true);
        for (std::size_t i = 0; i < drop; ++i) keep[l][order[i]] = false;
    }
    return keep;
}

/// Keep set that drops the lowest-importance fraction of layers.
inline std::vector<std::size_t> depth_keep_from_importance(const std::vector<double>& importance,
                                                           double prune_fraction) {
    INFERLAB_CHECK(prune_fraction >= 0.0 && prune_fraction < 1.0,
                   "prune_fraction must be in [0, 1)");
    const std::size_t layers = importance.size();
    std::size_t drop = static_cast<std::size_t>(prune_fraction * static_cast<double>(layers));
    drop = std::min(drop, layers - 1);
    std::vector<std::size_t> order(layers);
    for (std::size_t l = 0; l < layers; ++l) order[l] = l;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (importance[a] != importance[b]) return importance[a] < importance[b];
        return a < b;
    });
    std::vector<std::size_t> keep(order.begin() + static_cast<std::ptrdiff_t>(drop), order.end());
    std::sort(keep.begin(), keep.end());
    return keep;
}

} // namespace inferlab
