// The adaptation algorithm end to end: pseudo-label assignment with soft
// confidences, class-ratio weights (the alpha of the re-weighted MMD),
// sigmoid warm-up scheduling, the joint objective
//     L = L_s + gamma * MMD^2_weighted + lambda * MMD^2_conditional
// evaluated on the last-hidden-layer features, and the training loop that
// ties it together with pseudo-label refreshes every N_p iterations.
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "ecan/common.hpp"
#include "ecan/data.hpp"
#include "ecan/kernels.hpp"
#include "ecan/mmd.hpp"
#include "ecan/model.hpp"

namespace ecan {

// ---------------------------------------------------------------------------
// Pseudo labels

struct PseudoLabelTable {
    Labels hard;     // argmax class per target sample, ties to the lowest index
    Matrix delta;    // N_t x L soft confidences (softmax rows)
    int iteration = 0;  // training iteration the table was computed at
};

inline int argmax_row(const Matrix& m, Eigen::Index row) {
    int best = 0;
    for (Eigen::Index j = 1; j < m.cols(); ++j)
        if (m(row, j) > m(row, best)) best = static_cast<int>(j);
    return best;
}

inline PseudoLabelTable assign_pseudo_labels(const ModelParams& params, const FeatureBatch& Xt,
                                             int iteration = 0) {
    const Forward f = forward(params, Xt);
    PseudoLabelTable t;
    t.delta = f.probs;
    t.iteration = iteration;
    t.hard.resize(static_cast<std::size_t>(Xt.rows()));
    for (Eigen::Index i = 0; i < Xt.rows(); ++i)
        t.hard[static_cast<std::size_t>(i)] = argmax_row(f.probs, i);
    return t;
}

// ---------------------------------------------------------------------------
// Class-ratio weights (label-shift correction)

struct ClassWeights {
    Vector alpha;                          // one ratio per class
    std::vector<int> missing_from_source;  // classes with zero source samples
};

// alpha_l = (sum_i delta_i(l) / N_t) / (N_s^l / N_s). Classes absent from
// the source get alpha_l = 0 and are flagged. Values are the raw ratios;
// the trainer clamps them before use.
inline ClassWeights compute_class_weights(const PseudoLabelTable& table,
                                          const std::vector<int>& source_counts) {
    require(table.delta.rows() >= 1, "compute_class_weights: empty pseudo-label table");
    require(static_cast<Eigen::Index>(source_counts.size()) == table.delta.cols(),
            "compute_class_weights: source_counts size must match class count");
    double n_s = 0.0;
    for (int c : source_counts) {
        require(c >= 0, "compute_class_weights: negative source count");
        n_s += static_cast<double>(c);
    }
    require(n_s > 0.0, "compute_class_weights: no source samples");
    const double n_t = static_cast<double>(table.delta.rows());
    ClassWeights w;
    w.alpha = Vector::Zero(table.delta.cols());
    for (Eigen::Index l = 0; l < table.delta.cols(); ++l) {
        const double target_mass = table.delta.col(l).sum() / n_t;
        const int cnt = source_counts[static_cast<std::size_t>(l)];
        if (cnt == 0) {
            w.missing_from_source.push_back(static_cast<int>(l));
            w.alpha(l) = 0.0;
        } else {
            w.alpha(l) = target_mass / (static_cast<double>(cnt) / n_s);
        }
    }
    return w;
}

// ---------------------------------------------------------------------------
// Warm-up schedule

// w(p) = 2 / (1 + exp(-10 p)) - 1, mapping progress [0,1] to [0, ~0.99991).
inline double warmup_weight(double progress) {
    require(progress >= 0.0 && progress <= 1.0, "warmup_weight: progress must be in [0, 1]");
    return 2.0 / (1.0 + std::exp(-10.0 * progress)) - 1.0;
}

// ---------------------------------------------------------------------------
// Joint objective

struct JointLossResult {
    double loss = 0.0;            // softmax_weight*L_s + gamma_eff*MMD_w + lambda_eff*MMD_c
    double loss_softmax = 0.0;    // L_s (unweighted)
    double mmd_weighted = 0.0;    // raw MMD^2_weighted on the features
    double mmd_conditional = 0.0; // raw conditional value (0 when degenerate)
    double term_weighted = 0.0;   // gamma_eff * mmd_weighted
    double term_conditional = 0.0;
    bool conditional_degenerate = false;  // every class term skipped this batch
    ParamGrads grads;
};

// Evaluates the joint objective on one batch pair and returns the summed
// parameter gradients of all three terms. Target samples contribute no
// softmax gradient. With gamma_eff = lambda_eff = 0 the target batch is not
// even forwarded, so the computation is exactly a plain source classifier
// step. softmax_weight is a test hook for isolating the MMD paths.
inline JointLossResult joint_loss(const ModelParams& params, const FeatureBatch& Xs,
                                  const Labels& ys, const FeatureBatch& Xt,
                                  const Labels& yt_pseudo, const Vector& alpha,
                                  const KernelSpec& spec, double gamma_eff, double lambda_eff,
                                  double softmax_weight = 1.0) {
    require(gamma_eff >= 0.0 && lambda_eff >= 0.0,
            "joint_loss: effective weights must be non-negative");
    const int L = static_cast<int>(params.num_classes());
    JointLossResult out;
    const Forward fs = forward(params, Xs);
    LossGrad lg = softmax_loss_and_grad(fs.logits, ys);
    out.loss_softmax = lg.loss;
    const Matrix d_logits = softmax_weight * lg.dlogits;

    if (gamma_eff == 0.0 && lambda_eff == 0.0) {
        out.loss = softmax_weight * lg.loss;
        out.grads = backward(params, fs, d_logits);
        return out;
    }

    require(static_cast<Eigen::Index>(alpha.size()) == L,
            "joint_loss: alpha must have one entry per class");
    const Forward ft = forward(params, Xt);
    Matrix d_feat_s = Matrix::Zero(fs.features().rows(), fs.features().cols());
    Matrix d_feat_t = Matrix::Zero(ft.features().rows(), ft.features().cols());

    if (gamma_eff != 0.0) {
        out.mmd_weighted = mmd2_weighted(fs.features(), ys, ft.features(), alpha, spec);
        const MmdGrads g = grad_weighted_mmd(fs.features(), ys, ft.features(), alpha, spec);
        d_feat_s += gamma_eff * g.d_source;
        d_feat_t += gamma_eff * g.d_target;
        out.term_weighted = gamma_eff * out.mmd_weighted;
    }
    if (lambda_eff != 0.0) {
        try {
            const ConditionalResult c =
                mmd2_conditional(fs.features(), ys, ft.features(), yt_pseudo, L, spec);
            const MmdGrads g =
                grad_conditional_mmd(fs.features(), ys, ft.features(), yt_pseudo, L, spec);
            out.mmd_conditional = c.value;
            d_feat_s += lambda_eff * g.d_source;
            d_feat_t += lambda_eff * g.d_target;
            out.term_conditional = lambda_eff * c.value;
        } catch (const DegenerateInput&) {
            out.conditional_degenerate = true;  // contributes 0 with a diagnostic
        }
    }

    out.loss = softmax_weight * lg.loss + out.term_weighted + out.term_conditional;
    const ParamGrads gs = backward(params, fs, d_logits, &d_feat_s);
    const Matrix zero_logits = Matrix::Zero(Xt.rows(), L);
    const ParamGrads gt = backward(params, ft, zero_logits, &d_feat_t);
    out.grads = gs;
    for (std::size_t l = 0; l < out.grads.weights.size(); ++l) {
        out.grads.weights[l] += gt.weights[l];
        out.grads.biases[l] += gt.biases[l];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
    double gamma = 0.0;
    double lambda = 0.0;
    double learning_rate = 0.01;
    double momentum = 0.9;
    int pseudo_interval = 50;  // N_p
    int batch_source = 128;    // n_s
    int batch_target = 128;    // n_t
    int iterations = 700;
    std::uint64_t seed = 0;
    bool reweight_on = true;
    bool condition_on = true;
    bool warmup_on = true;
    std::vector<int> hidden = {64};
    double classifier_lr_multiplier = 10.0;
    double alpha_clamp = 10.0;
    int eval_every = 50;  // history accuracy cadence when evaluation labels exist
    int kernel_count = 5;
    // Test hooks.
    bool force_unit_alpha = false;  // keep the weighted path but pin alpha = 1
    double softmax_weight = 1.0;    // weight on L_s

    void validate() const {
        require(gamma >= 0.0 && lambda >= 0.0, "TrainConfig: gamma and lambda must be >= 0");
        require(learning_rate > 0.0, "TrainConfig: learning rate must be positive");
        require(momentum >= 0.0 && momentum < 1.0, "TrainConfig: momentum must be in [0, 1)");
        require(pseudo_interval >= 1, "TrainConfig: pseudo-label interval must be >= 1");
        require(batch_source >= 2 && batch_target >= 2, "TrainConfig: batch sizes must be >= 2");
        require(iterations >= 1, "TrainConfig: iterations must be >= 1");
        require(eval_every >= 0, "TrainConfig: eval cadence must be >= 0");
        require(kernel_count >= 1, "TrainConfig: kernel count must be >= 1");
        require(alpha_clamp > 0.0, "TrainConfig: alpha clamp must be positive");
        for (int h : hidden) require(h >= 1, "TrainConfig: hidden widths must be >= 1");
    }
};

struct IterationRecord {
    int iteration = 0;
    double loss = 0.0;
    double loss_softmax = 0.0;
    double mmd_weighted_term = 0.0;     // gamma_eff * MMD^2_weighted
    double mmd_conditional_term = 0.0;  // lambda_eff * MMD^2_conditional
    double warmup = 0.0;
    Vector alpha;
    bool conditional_degenerate = false;
    // NaN when not evaluated at this iteration.
    double target_accuracy = std::numeric_limits<double>::quiet_NaN();
};

struct EvalResult {
    double accuracy = 0.0;
    Vector per_class;          // accuracy per true class (NaN for absent classes)
    Eigen::MatrixXi confusion; // rows: true class, cols: predicted
};

inline EvalResult evaluate(const ModelParams& params, const FeatureBatch& X, const Labels& y,
                           int num_classes = -1) {
    require(X.rows() >= 1, "evaluate: empty set");
    require(static_cast<Eigen::Index>(y.size()) == X.rows(),
            "evaluate: label count must match sample count");
    if (num_classes < 0) num_classes = static_cast<int>(params.num_classes());
    const Forward f = forward(params, X);
    EvalResult r;
    r.confusion = Eigen::MatrixXi::Zero(num_classes, num_classes);
    int correct = 0;
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
        const int truth = y[static_cast<std::size_t>(i)];
        require(truth >= 0 && truth < num_classes, "evaluate: label out of range");
        const int pred = argmax_row(f.probs, i);
        r.confusion(truth, pred) += 1;
        if (pred == truth) ++correct;
    }
    r.accuracy = static_cast<double>(correct) / static_cast<double>(X.rows());
    r.per_class = Vector::Constant(num_classes, std::numeric_limits<double>::quiet_NaN());
    for (int l = 0; l < num_classes; ++l) {
        const int row_total = r.confusion.row(l).sum();
        if (row_total > 0)
            r.per_class(l) = static_cast<double>(r.confusion(l, l)) / row_total;
    }
    return r;
}

inline EvalResult evaluate(const ModelParams& params, const FeatureBatch& X,
                           const EvalLabels& y, int num_classes = -1) {
    return evaluate(params, X, y.values, num_classes);
}

struct TrainResult {
    ModelParams params;
    std::vector<IterationRecord> history;
    KernelSpec kernel;             // ladder in effect at the end of training
    PseudoLabelTable final_table;  // recomputed with the final parameters
    Vector final_alpha_raw;        // unclamped Eq. 10 ratios from final_table
};

namespace detail {

// Deterministic strided subsample of at most `cap` rows.
inline FeatureBatch subsample_rows(const FeatureBatch& x, Eigen::Index cap) {
    if (x.rows() <= cap) return x;
    FeatureBatch out(cap, x.cols());
    const double stride = static_cast<double>(x.rows()) / static_cast<double>(cap);
    for (Eigen::Index i = 0; i < cap; ++i)
        out.row(i) = x.row(static_cast<Eigen::Index>(static_cast<double>(i) * stride));
    return out;
}

inline Labels gather(const Labels& y, const std::vector<int>& idx) {
    Labels out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i)
        out[i] = y[static_cast<std::size_t>(idx[i])];
    return out;
}

}  // namespace detail

// Algorithm: initialize the model from the run seed; before iteration 1 and
// every N_p iterations after, recompute pseudo labels and the kernel ladder
// on the full target set with the current parameters; each iteration draw a
// stratified source batch and a uniform target batch, compute alpha from the
// current table (or pin it to 1), scale gamma and lambda by the warm-up
// weight, take one SGD-with-momentum step on the joint objective. Evaluation
// labels, when supplied, feed a read-only accuracy track in the history.
inline TrainResult train_ecan(const TrainConfig& config, const Dataset& source,
                              const FeatureBatch& target,
                              const EvalLabels* eval_labels = nullptr) {
    config.validate();
    source.validate();
    require(source.labeled(), "train_ecan: source must be labeled");
    require(source.features.cols() == target.cols(),
            "train_ecan: source/target dimensions must match");
    const ClassHistogram hist = class_histogram(source);
    for (std::size_t l = 0; l < hist.counts.size(); ++l)
        require(hist.counts[l] != 1,
                "train_ecan: class " + std::to_string(l) + " has a single source sample");
    const int L = static_cast<int>(hist.counts.size());
    if (eval_labels != nullptr)
        require(static_cast<Eigen::Index>(eval_labels->values.size()) == target.rows(),
                "train_ecan: evaluation labels must match target size");

    std::vector<int> layers;
    layers.push_back(static_cast<int>(source.features.cols()));
    for (int h : config.hidden) layers.push_back(h);
    layers.push_back(L);
    TrainResult result;
    result.params = init_params(layers, derive_seed(config.seed, "model-init"));
    OptimizerState opt = OptimizerState::create(result.params, config.learning_rate,
                                                config.momentum,
                                                config.classifier_lr_multiplier);
    MinibatchStream stream(source, target, config.batch_source, config.batch_target,
                           derive_seed(config.seed, "batches"));

    PseudoLabelTable table;
    KernelSpec spec = KernelSpec::single(1.0);
    const int T = config.iterations;
    result.history.reserve(static_cast<std::size_t>(T));

    for (int k = 1; k <= T; ++k) {
        if ((k - 1) % config.pseudo_interval == 0) {
            table = assign_pseudo_labels(result.params, target, k);
            // Re-fit the bandwidth ladder on pooled current features.
            const Forward ft = forward(result.params, detail::subsample_rows(target, 256));
            const Forward fsrc =
                forward(result.params, detail::subsample_rows(source.features, 256));
            FeatureBatch pooled(ft.features().rows() + fsrc.features().rows(),
                                ft.features().cols());
            pooled << fsrc.features(), ft.features();
            spec = median_ladder_spec(pooled, config.kernel_count);
        }

        Vector alpha = Vector::Ones(L);
        if (config.reweight_on && !config.force_unit_alpha) {
            alpha = compute_class_weights(table, hist.counts).alpha;
            alpha = alpha.cwiseMin(config.alpha_clamp).cwiseMax(0.0);
        }
        const double progress = T > 1 ? static_cast<double>(k - 1) / static_cast<double>(T - 1)
                                      : 0.0;
        const double w = config.warmup_on ? warmup_weight(progress) : 1.0;
        const double gamma_eff = w * config.gamma;
        const double lambda_eff = config.condition_on ? w * config.lambda : 0.0;

        const MiniBatch batch = stream.next();
        const Labels batch_pseudo = detail::gather(table.hard, batch.target_indices);
        const JointLossResult step =
            joint_loss(result.params, batch.source_x, batch.source_y, batch.target_x,
                       batch_pseudo, alpha, spec, gamma_eff, lambda_eff, config.softmax_weight);
        if (!std::isfinite(step.loss))
            throw NumericError("train_ecan: non-finite loss at iteration " + std::to_string(k));
        sgd_step(result.params, step.grads, opt);

        IterationRecord rec;
        rec.iteration = k;
        rec.loss = step.loss;
        rec.loss_softmax = step.loss_softmax;
        rec.mmd_weighted_term = step.term_weighted;
        rec.mmd_conditional_term = step.term_conditional;
        rec.warmup = w;
        rec.alpha = alpha;
        rec.conditional_degenerate = step.conditional_degenerate;
        if (eval_labels != nullptr && config.eval_every > 0 &&
            (k % config.eval_every == 0 || k == T))
            rec.target_accuracy = evaluate(result.params, target, eval_labels->values, L).accuracy;
        result.history.push_back(std::move(rec));
    }

    result.kernel = spec;
    result.final_table = assign_pseudo_labels(result.params, target, T + 1);
    result.final_alpha_raw = compute_class_weights(result.final_table, hist.counts).alpha;
    return result;
}

}  // namespace ecan
