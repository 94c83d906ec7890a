#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "ecan/adaptation.hpp"

using namespace ecan;

namespace {

FeatureBatch random_batch(std::mt19937_64& rng, Eigen::Index n, Eigen::Index d,
                          double scale = 1.0, double shift = 0.0) {
    std::normal_distribution<double> normal(shift, scale);
    FeatureBatch x(n, d);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < d; ++j) x(i, j) = normal(rng);
    return x;
}

Labels round_robin_labels(Eigen::Index n, int num_classes) {
    Labels y(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i)
        y[static_cast<std::size_t>(i)] = static_cast<int>(i) % num_classes;
    return y;
}

template <typename F>
ParamGrads fd_param_grads(const ModelParams& params, F f, double h = 1e-5) {
    ParamGrads g;
    ModelParams p = params;
    for (std::size_t l = 0; l < p.weights.size(); ++l) {
        Matrix dw(p.weights[l].rows(), p.weights[l].cols());
        for (Eigen::Index i = 0; i < dw.rows(); ++i)
            for (Eigen::Index j = 0; j < dw.cols(); ++j) {
                const double keep = p.weights[l](i, j);
                p.weights[l](i, j) = keep + h;
                const double up = f(p);
                p.weights[l](i, j) = keep - h;
                const double down = f(p);
                p.weights[l](i, j) = keep;
                dw(i, j) = (up - down) / (2.0 * h);
            }
        g.weights.push_back(dw);
        Vector db(p.biases[l].size());
        for (Eigen::Index i = 0; i < db.size(); ++i) {
            const double keep = p.biases[l](i);
            p.biases[l](i) = keep + h;
            const double up = f(p);
            p.biases[l](i) = keep - h;
            const double down = f(p);
            p.biases[l](i) = keep;
            db(i) = (up - down) / (2.0 * h);
        }
        g.biases.push_back(db);
    }
    return g;
}

double worst_rel_error(const ParamGrads& analytic, const ParamGrads& numeric) {
    double num = 0.0, den = 0.0;
    for (std::size_t l = 0; l < analytic.weights.size(); ++l) {
        num = std::max({num, (analytic.weights[l] - numeric.weights[l]).cwiseAbs().maxCoeff(),
                        (analytic.biases[l] - numeric.biases[l]).cwiseAbs().maxCoeff()});
        den = std::max({den, numeric.weights[l].cwiseAbs().maxCoeff(),
                        numeric.biases[l].cwiseAbs().maxCoeff()});
    }
    return num / std::max(den, 1e-12);
}

// Zero-displacement, balanced scenario used by the degradation-safety check.
ShiftConfig zero_shift_config(std::uint64_t seed) {
    ShiftConfig cfg;
    cfg.num_classes = 3;
    cfg.dims = 8;
    cfg.source_means = Matrix::Zero(3, 8);
    for (int l = 0; l < 3; ++l) cfg.source_means(l, l) = 3.0;
    cfg.target_means = cfg.source_means;
    cfg.source_priors = {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
    cfg.target_priors = cfg.source_priors;
    cfg.source_count = 400;
    cfg.target_count = 400;
    cfg.seed = seed;
    return cfg;
}

}  // namespace

TEST_CASE("pseudo labels: zero-weight model gives uniform confidences and class 0") {
    ModelParams p;
    p.weights = {Matrix::Zero(3, 4)};
    p.biases = {Vector::Zero(4)};
    std::mt19937_64 rng(1);
    const FeatureBatch xt = random_batch(rng, 6, 3);
    const PseudoLabelTable t = assign_pseudo_labels(p, xt, 5);
    CHECK(t.iteration == 5);
    CHECK((t.delta.array() - 0.25).abs().maxCoeff() <= 1e-15);
    for (int h : t.hard) CHECK(h == 0);  // argmax tie-break: lowest index
}

TEST_CASE("pseudo labels: strong logits pick the favored class with high confidence") {
    ModelParams p;
    p.weights = {Matrix::Zero(2, 5)};
    p.biases = {Vector::Zero(5)};
    p.biases[0](3) = 12.0;
    std::mt19937_64 rng(2);
    const PseudoLabelTable t = assign_pseudo_labels(p, random_batch(rng, 4, 2));
    for (std::size_t i = 0; i < t.hard.size(); ++i) {
        CHECK(t.hard[i] == 3);
        CHECK(t.delta(static_cast<Eigen::Index>(i), 3) > 0.99);
    }
}

TEST_CASE("pseudo labels: table matches an independent re-evaluation") {
    const ModelParams p = init_params({4, 6, 3}, 99);
    std::mt19937_64 rng(3);
    const FeatureBatch xt = random_batch(rng, 10, 4);
    const PseudoLabelTable t = assign_pseudo_labels(p, xt);
    const Forward f = forward(p, xt);
    CHECK(t.delta == f.probs);
    for (Eigen::Index i = 0; i < 10; ++i) {
        int best = 0;
        for (int j = 1; j < 3; ++j)
            if (f.probs(i, j) > f.probs(i, best)) best = j;
        CHECK(t.hard[static_cast<std::size_t>(i)] == best);
        CHECK(std::abs(t.delta.row(i).sum() - 1.0) <= 1e-12);
    }
}

TEST_CASE("class weights follow the prior-ratio formula") {
    SECTION("matched distributions give alpha = 1") {
        PseudoLabelTable t;
        t.delta.resize(5, 2);
        // delta column means (0.75, 0.25) equal source frequencies (3/4, 1/4)
        t.delta.col(0).setConstant(0.75);
        t.delta.col(1).setConstant(0.25);
        const ClassWeights w = compute_class_weights(t, {6, 2});
        CHECK_THAT(w.alpha(0), Catch::Matchers::WithinAbs(1.0, 1e-12));
        CHECK_THAT(w.alpha(1), Catch::Matchers::WithinAbs(1.0, 1e-12));
        CHECK(w.missing_from_source.empty());
    }
    SECTION("counts (3,1) with even target mass give alpha = (2/3, 2)") {
        PseudoLabelTable t;
        t.delta.resize(4, 2);
        t.delta.setConstant(0.5);
        const ClassWeights w = compute_class_weights(t, {3, 1});
        CHECK_THAT(w.alpha(0), Catch::Matchers::WithinAbs(2.0 / 3.0, 1e-12));
        CHECK_THAT(w.alpha(1), Catch::Matchers::WithinAbs(2.0, 1e-12));
    }
    SECTION("all target mass on class 0, uniform source over 4 -> (4,0,0,0)") {
        PseudoLabelTable t;
        t.delta = Matrix::Zero(6, 4);
        t.delta.col(0).setOnes();
        const ClassWeights w = compute_class_weights(t, {5, 5, 5, 5});
        CHECK(w.alpha(0) == 4.0);
        CHECK(w.alpha(1) == 0.0);
        CHECK(w.alpha(2) == 0.0);
        CHECK(w.alpha(3) == 0.0);
    }
    SECTION("classes absent from the source are zeroed and flagged") {
        PseudoLabelTable t;
        t.delta.resize(3, 2);
        t.delta.setConstant(0.5);
        const ClassWeights w = compute_class_weights(t, {4, 0});
        CHECK(w.alpha(1) == 0.0);
        CHECK(w.missing_from_source == std::vector<int>{1});
    }
    SECTION("empty table is rejected") {
        PseudoLabelTable t;
        t.delta.resize(0, 2);
        CHECK_THROWS_AS(compute_class_weights(t, {1, 1}), ContractViolation);
    }
    SECTION("mass conservation: sum alpha_l * source_freq_l = 1") {
        std::mt19937_64 rng(4);
        const ModelParams p = init_params({3, 5, 4}, 17);
        const PseudoLabelTable t = assign_pseudo_labels(p, random_batch(rng, 50, 3));
        const std::vector<int> counts = {10, 20, 5, 15};
        const ClassWeights w = compute_class_weights(t, counts);
        double mass = 0.0;
        for (int l = 0; l < 4; ++l)
            mass += w.alpha(l) * counts[static_cast<std::size_t>(l)] / 50.0;
        CHECK_THAT(mass, Catch::Matchers::WithinAbs(1.0, 1e-9));
    }
}

TEST_CASE("warm-up curve") {
    CHECK(warmup_weight(0.0) == 0.0);
    CHECK_THAT(warmup_weight(1.0), Catch::Matchers::WithinAbs(0.999909, 1e-6));
    CHECK_THAT(warmup_weight(0.5), Catch::Matchers::WithinAbs(0.986614, 1e-6));
    double prev = -1.0;
    for (int i = 0; i <= 100; ++i) {
        const double w = warmup_weight(i / 100.0);
        CHECK(w > prev);  // strictly increasing
        CHECK(w >= 0.0);
        CHECK(w < 1.0);
        prev = w;
    }
    CHECK_THROWS_AS(warmup_weight(-0.01), ContractViolation);
    CHECK_THROWS_AS(warmup_weight(1.01), ContractViolation);
}

TEST_CASE("joint loss reductions") {
    std::mt19937_64 rng(5);
    const ModelParams p = init_params({4, 6, 3}, 21);
    const FeatureBatch xs = random_batch(rng, 9, 4), xt = random_batch(rng, 9, 4, 1.2, 0.4);
    const Labels ys = round_robin_labels(9, 3), yt = round_robin_labels(9, 3);
    const Vector alpha = Vector::Ones(3);
    const auto spec = KernelSpec{{0.7, 1.4}, {0.5, 0.5}};

    SECTION("zero effective weights reduce to the plain softmax step") {
        const JointLossResult r = joint_loss(p, xs, ys, xt, yt, alpha, spec, 0.0, 0.0);
        const Forward f = forward(p, xs);
        const LossGrad lg = softmax_loss_and_grad(f.logits, ys);
        CHECK(r.loss == lg.loss);
        CHECK(r.loss_softmax == lg.loss);
        CHECK(r.term_weighted == 0.0);
        CHECK(r.term_conditional == 0.0);
        const ParamGrads plain = backward(p, f, lg.dlogits);
        for (std::size_t l = 0; l < plain.weights.size(); ++l) {
            CHECK(r.grads.weights[l] == plain.weights[l]);
            CHECK(r.grads.biases[l] == plain.biases[l]);
        }
    }
    SECTION("softmax weight 0 with gamma 1 isolates the weighted MMD") {
        const JointLossResult r = joint_loss(p, xs, ys, xt, yt, alpha, spec, 1.0, 0.0, 0.0);
        const double direct = mmd2_weighted(forward(p, xs).features(), ys,
                                            forward(p, xt).features(), alpha, spec);
        CHECK_THAT(r.loss, Catch::Matchers::WithinAbs(direct, 1e-12));
    }
    SECTION("degenerate conditional term contributes zero with a diagnostic") {
        const Labels absent(9, 2);  // all pseudo labels claim class 2
        Labels ys_01 = {0, 0, 0, 0, 1, 1, 1, 1, 0};  // source has no class-2 cluster pair
        const JointLossResult r =
            joint_loss(p, xs, ys_01, xt, absent, alpha, spec, 0.0, 0.5);
        CHECK(r.conditional_degenerate);
        CHECK(r.term_conditional == 0.0);
        CHECK(r.loss == r.loss_softmax);
    }
}

TEST_CASE("joint loss gradients match finite differences") {
    std::mt19937_64 rng(6);
    const ModelParams p = init_params({4, 6, 3}, 31);
    const FeatureBatch xs = random_batch(rng, 10, 4), xt = random_batch(rng, 10, 4, 1.3, 0.5);
    const Labels ys = round_robin_labels(10, 3), yt = round_robin_labels(10, 3);
    Vector alpha(3);
    alpha << 0.6, 1.2, 1.8;
    const auto spec = KernelSpec{{0.8, 1.6}, {0.5, 0.5}};
    const double gamma = 0.37, lambda = 0.21;

    const JointLossResult r = joint_loss(p, xs, ys, xt, yt, alpha, spec, gamma, lambda);
    const ParamGrads numeric = fd_param_grads(p, [&](const ModelParams& q) {
        return joint_loss(q, xs, ys, xt, yt, alpha, spec, gamma, lambda).loss;
    });
    CHECK(worst_rel_error(r.grads, numeric) <= 1e-5);
}

TEST_CASE("zero-weight adaptation run is bit-identical to a plain classifier loop") {
    const SynthResult data = synth_two_domain(zero_shift_config(11));
    TrainConfig cfg;
    cfg.gamma = 0.0;
    cfg.lambda = 0.0;
    cfg.learning_rate = 0.05;
    cfg.iterations = 60;
    cfg.batch_source = 32;
    cfg.batch_target = 32;
    cfg.hidden = {16};
    cfg.seed = 2024;
    const TrainResult adapted = train_ecan(cfg, data.source, data.target.features);

    // Independent source-only loop: same init seed, same stream seed, plain
    // forward/loss/backward/step. No pseudo labels, no alpha, no MMD.
    ModelParams p = init_params({8, 16, 3}, derive_seed(cfg.seed, "model-init"));
    OptimizerState opt = OptimizerState::create(p, cfg.learning_rate, cfg.momentum,
                                                cfg.classifier_lr_multiplier);
    MinibatchStream stream(data.source, data.target.features, 32, 32,
                           derive_seed(cfg.seed, "batches"));
    for (int k = 1; k <= cfg.iterations; ++k) {
        const MiniBatch b = stream.next();
        const Forward f = forward(p, b.source_x);
        const LossGrad lg = softmax_loss_and_grad(f.logits, b.source_y);
        CHECK(adapted.history[static_cast<std::size_t>(k - 1)].loss == lg.loss);
        sgd_step(p, backward(p, f, lg.dlogits), opt);
    }
    for (std::size_t l = 0; l < p.weights.size(); ++l) {
        CHECK(adapted.params.weights[l] == p.weights[l]);
        CHECK(adapted.params.biases[l] == p.biases[l]);
    }
}

TEST_CASE("forced-unit alpha reproduces the plain-MMD baseline exactly") {
    const SynthResult data = synth_two_domain(zero_shift_config(12));
    TrainConfig a;
    a.gamma = 0.1;
    a.lambda = 0.0;
    a.condition_on = false;
    a.reweight_on = true;
    a.force_unit_alpha = true;  // keep re-weighting machinery, pin alpha = 1
    a.learning_rate = 0.05;
    a.iterations = 40;
    a.batch_source = 32;
    a.batch_target = 32;
    a.hidden = {16};
    a.seed = 7;
    TrainConfig b = a;
    b.reweight_on = false;  // the plain-MMD baseline path
    b.force_unit_alpha = false;

    const TrainResult ra = train_ecan(a, data.source, data.target.features);
    const TrainResult rb = train_ecan(b, data.source, data.target.features);
    for (std::size_t k = 0; k < ra.history.size(); ++k) {
        CHECK(ra.history[k].loss == rb.history[k].loss);
        CHECK(ra.history[k].alpha == rb.history[k].alpha);
    }
    for (std::size_t l = 0; l < ra.params.weights.size(); ++l)
        CHECK(ra.params.weights[l] == rb.params.weights[l]);
}

TEST_CASE("training is deterministic and records a coherent history") {
    const SynthResult data = synth_two_domain(zero_shift_config(13));
    TrainConfig cfg;
    cfg.gamma = 0.3;
    cfg.lambda = 0.1;
    cfg.learning_rate = 0.05;
    cfg.iterations = 50;
    cfg.pseudo_interval = 20;
    cfg.batch_source = 32;
    cfg.batch_target = 32;
    cfg.hidden = {16};
    cfg.seed = 99;
    EvalLabels eval = data.target_labels;
    const TrainResult r1 = train_ecan(cfg, data.source, data.target.features, &eval);
    const TrainResult r2 = train_ecan(cfg, data.source, data.target.features, &eval);

    REQUIRE(r1.history.size() == 50);
    for (std::size_t k = 0; k < 50; ++k) {
        CHECK(r1.history[k].loss == r2.history[k].loss);
        CHECK(r1.history[k].alpha == r2.history[k].alpha);
        const double p = static_cast<double>(k) / 49.0;
        CHECK(r1.history[k].warmup == warmup_weight(p));
        CHECK(r1.history[k].iteration == static_cast<int>(k) + 1);
        // alpha stays within the clamp
        CHECK((r1.history[k].alpha.array() >= 0.0).all());
        CHECK((r1.history[k].alpha.array() <= cfg.alpha_clamp).all());
    }
    for (std::size_t l = 0; l < r1.params.weights.size(); ++l)
        CHECK(r1.params.weights[l] == r2.params.weights[l]);
    // accuracy track present at the evaluation cadence
    CHECK(std::isfinite(r1.history[49].target_accuracy));
    CHECK(std::isnan(r1.history[0].target_accuracy));

    // raw Eq. 10 ratios from the final table conserve source mass
    const ClassHistogram h = class_histogram(data.source);
    double mass = 0.0;
    for (int l = 0; l < 3; ++l)
        mass += r1.final_alpha_raw(l) * h.frequencies[static_cast<std::size_t>(l)];
    CHECK_THAT(mass, Catch::Matchers::WithinAbs(1.0, 1e-9));
}

TEST_CASE("regularizers do not destroy a good solution when there is no shift") {
    double worst_gap = 0.0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const SynthResult data = synth_two_domain(zero_shift_config(seed));
        TrainConfig base;
        base.gamma = 0.0;
        base.lambda = 0.0;
        base.learning_rate = 0.05;
        base.iterations = 200;
        base.pseudo_interval = 50;
        base.batch_source = 32;
        base.batch_target = 32;
        base.hidden = {16};
        base.seed = seed;
        base.eval_every = 0;
        TrainConfig full = base;
        full.gamma = 0.3;
        full.lambda = 0.1;

        const TrainResult rb = train_ecan(base, data.source, data.target.features);
        const TrainResult rf = train_ecan(full, data.source, data.target.features);
        const double ab = evaluate(rb.params, data.target.features, data.target_labels).accuracy;
        const double af = evaluate(rf.params, data.target.features, data.target_labels).accuracy;
        worst_gap = std::max(worst_gap, ab - af);
    }
    INFO("worst accuracy drop " << worst_gap);
    CHECK(worst_gap <= 0.02);
}

TEST_CASE("evaluate: hand-checked cases") {
    SECTION("all correct") {
        ModelParams p;
        p.weights = {Matrix::Identity(2, 2)};
        p.biases = {Vector::Zero(2)};
        FeatureBatch x(2, 2);
        x << 2.0, 0.0, 0.0, 2.0;
        const EvalResult r = evaluate(p, x, Labels{0, 1});
        CHECK(r.accuracy == 1.0);
        CHECK(r.confusion(0, 0) == 1);
        CHECK(r.confusion(1, 1) == 1);
        CHECK(r.confusion(0, 1) == 0);
    }
    SECTION("zero-weight model on a balanced 7-class set predicts class 0") {
        ModelParams p;
        p.weights = {Matrix::Zero(3, 7)};
        p.biases = {Vector::Zero(7)};
        std::mt19937_64 rng(8);
        const FeatureBatch x = random_batch(rng, 70, 3);
        const EvalResult r = evaluate(p, x, round_robin_labels(70, 7));
        CHECK_THAT(r.accuracy, Catch::Matchers::WithinAbs(1.0 / 7.0, 1e-12));
        CHECK(r.confusion.col(0).sum() == 70);
    }
    SECTION("one error in four samples") {
        ModelParams p;
        p.weights = {Matrix::Identity(2, 2)};
        p.biases = {Vector::Zero(2)};
        FeatureBatch x(4, 2);
        x << 2.0, 0.0, 0.0, 2.0, 0.0, 2.0, 2.0, 0.0;
        const EvalResult r = evaluate(p, x, Labels{0, 1, 1, 1});
        CHECK(r.accuracy == 0.75);
        CHECK(r.confusion(1, 0) == 1);  // the mistake: true 1 predicted 0
        CHECK(r.confusion(1, 1) == 2);
        CHECK(r.confusion.row(1).sum() == 3);
        CHECK_THAT(r.per_class(1), Catch::Matchers::WithinAbs(2.0 / 3.0, 1e-15));
    }
    SECTION("empty set is rejected") {
        ModelParams p;
        p.weights = {Matrix::Identity(2, 2)};
        p.biases = {Vector::Zero(2)};
        CHECK_THROWS_AS(evaluate(p, FeatureBatch(0, 2), Labels{}), ContractViolation);
    }
}

TEST_CASE("training preconditions") {
    const SynthResult data = synth_two_domain(zero_shift_config(1));
    TrainConfig cfg;
    cfg.iterations = 5;
    cfg.batch_source = 4;
    cfg.batch_target = 4;
    cfg.hidden = {8};

    SECTION("config validation") {
        TrainConfig bad = cfg;
        bad.gamma = -0.1;
        CHECK_THROWS_AS(train_ecan(bad, data.source, data.target.features), ContractViolation);
        bad = cfg;
        bad.batch_source = 1;
        CHECK_THROWS_AS(train_ecan(bad, data.source, data.target.features), ContractViolation);
        bad = cfg;
        bad.momentum = 1.0;
        CHECK_THROWS_AS(train_ecan(bad, data.source, data.target.features), ContractViolation);
    }
    SECTION("singleton source class is rejected") {
        Dataset src = data.source;
        (*src.labels)[0] = 5;  // class 5 has exactly one sample
        CHECK_THROWS_AS(train_ecan(cfg, src, data.target.features), ContractViolation);
    }
    SECTION("unlabeled source is rejected") {
        Dataset src = data.source;
        src.labels.reset();
        CHECK_THROWS_AS(train_ecan(cfg, src, data.target.features), ContractViolation);
    }
}
