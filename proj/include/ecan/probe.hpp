// Dataset-bias measurement protocols over feature vectors:
//   dataset_recognition   "name the dataset": train a linear classifier to
//                         tell K datasets apart from features alone; chance
//                         accuracy means the datasets are indistinguishable
//   cross_dataset_matrix  train on dataset i, test on dataset j, for all
//                         pairs; the per-row percent drop contrasts
//                         in-dataset accuracy with mean cross accuracy
#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "ecan/adaptation.hpp"
#include "ecan/common.hpp"
#include "ecan/data.hpp"
#include "ecan/model.hpp"

namespace ecan {

// Full-batch training settings for the linear softmax classifier both probes
// use (the stand-in for the protocol's linear SVM).
struct FitConfig {
    double learning_rate = 0.2;
    double momentum = 0.9;
    int iterations = 300;
};

// Trains a bare linear softmax classifier (no hidden layer) by full-batch
// gradient descent; deterministic for a fixed seed.
inline ModelParams fit_softmax_classifier(const FeatureBatch& X, const Labels& y,
                                          int num_classes, std::uint64_t seed,
                                          const FitConfig& fit = {}) {
    require(X.rows() >= 1, "fit_softmax_classifier: empty training set");
    require(num_classes >= 2, "fit_softmax_classifier: need at least 2 classes");
    ModelParams p = init_params({static_cast<int>(X.cols()), num_classes}, seed);
    OptimizerState opt = OptimizerState::create(p, fit.learning_rate, fit.momentum);
    for (int k = 0; k < fit.iterations; ++k) {
        const Forward f = forward(p, X);
        const LossGrad lg = softmax_loss_and_grad(f.logits, y);
        sgd_step(p, backward(p, f, lg.dlogits), opt);
    }
    return p;
}

struct RecognitionResult {
    double mean_accuracy = 0.0;
    std::vector<double> per_trial;
    Eigen::MatrixXi confusion;  // true dataset x predicted dataset, summed over trials
};

// "Name the dataset": per trial, sample n_train training and n_test disjoint
// test rows from each dataset, label rows by dataset identity, fit the linear
// classifier, and score it. Near-chance accuracy means the feature
// distributions are indistinguishable; high accuracy exposes dataset bias.
inline RecognitionResult dataset_recognition(const std::vector<Dataset>& datasets, int n_train,
                                             int n_test, int trials, std::uint64_t seed,
                                             const FitConfig& fit = {}) {
    const int K = static_cast<int>(datasets.size());
    require(K >= 2, "dataset_recognition: need at least 2 datasets");
    require(n_train >= 1 && n_test >= 1 && trials >= 1,
            "dataset_recognition: sizes and trials must be positive");
    const Eigen::Index dims = datasets.front().dims();
    for (const Dataset& ds : datasets) {
        ds.validate();
        require(ds.dims() == dims, "dataset_recognition: feature dimensions must agree");
        require(ds.size() >= n_train + n_test,
                "dataset_recognition: dataset '" + ds.domain + "' has fewer than " +
                    std::to_string(n_train + n_test) + " samples");
    }

    std::mt19937_64 rng(derive_seed(seed, "dataset-recognition"));
    RecognitionResult out;
    out.confusion = Eigen::MatrixXi::Zero(K, K);
    for (int t = 0; t < trials; ++t) {
        FeatureBatch train_x(static_cast<Eigen::Index>(n_train) * K, dims);
        Labels train_y(static_cast<std::size_t>(n_train) * K);
        FeatureBatch test_x(static_cast<Eigen::Index>(n_test) * K, dims);
        Labels test_y(static_cast<std::size_t>(n_test) * K);
        for (int k = 0; k < K; ++k) {
            std::vector<int> order(static_cast<std::size_t>(datasets[static_cast<std::size_t>(k)].size()));
            std::iota(order.begin(), order.end(), 0);
            std::shuffle(order.begin(), order.end(), rng);
            for (int i = 0; i < n_train; ++i) {
                train_x.row(k * n_train + i) =
                    datasets[static_cast<std::size_t>(k)].features.row(order[static_cast<std::size_t>(i)]);
                train_y[static_cast<std::size_t>(k * n_train + i)] = k;
            }
            for (int i = 0; i < n_test; ++i) {
                test_x.row(k * n_test + i) = datasets[static_cast<std::size_t>(k)].features.row(
                    order[static_cast<std::size_t>(n_train + i)]);
                test_y[static_cast<std::size_t>(k * n_test + i)] = k;
            }
        }
        const ModelParams p =
            fit_softmax_classifier(train_x, train_y, K, derive_seed(seed, "trial-fit"), fit);
        const EvalResult r = evaluate(p, test_x, test_y, K);
        out.per_trial.push_back(r.accuracy);
        out.confusion += r.confusion;
    }
    out.mean_accuracy = std::accumulate(out.per_trial.begin(), out.per_trial.end(), 0.0) /
                        static_cast<double>(trials);
    return out;
}

struct CrossMatrix {
    std::vector<std::string> names;  // dataset domain tags, row/column order
    Matrix accuracy;                 // (train dataset) x (test dataset)
    Vector mean_others;              // per-row mean of off-diagonal entries
    Vector percent_drop;  // round((diag - mean_others) / diag * 100); NaN when diag <= 0
};

// Train on dataset i, test on dataset j for all ordered pairs. Off-diagonal
// cells use all of both datasets; the diagonal uses a deterministic seeded
// 80/20 split of the one dataset.
inline CrossMatrix cross_dataset_matrix(const std::vector<Dataset>& datasets,
                                        std::uint64_t seed, const FitConfig& fit = {}) {
    const int K = static_cast<int>(datasets.size());
    require(K >= 2, "cross_dataset_matrix: need at least 2 datasets");
    const Eigen::Index dims = datasets.front().dims();
    int num_classes = 0;
    for (const Dataset& ds : datasets) {
        ds.validate();
        require(ds.labeled(), "cross_dataset_matrix: dataset '" + ds.domain + "' is unlabeled");
        require(ds.dims() == dims, "cross_dataset_matrix: feature dimensions must agree");
        require(ds.size() >= 5, "cross_dataset_matrix: dataset too small for an 80/20 split");
        for (int y : *ds.labels) num_classes = std::max(num_classes, y + 1);
    }
    require(num_classes >= 2, "cross_dataset_matrix: need at least 2 classes");

    CrossMatrix out;
    out.accuracy = Matrix::Zero(K, K);
    out.mean_others = Vector::Zero(K);
    out.percent_drop = Vector::Zero(K);
    for (const Dataset& ds : datasets) out.names.push_back(ds.domain);

    for (int i = 0; i < K; ++i) {
        const Dataset& train_ds = datasets[static_cast<std::size_t>(i)];
        const ModelParams full_model =
            fit_softmax_classifier(train_ds.features, *train_ds.labels, num_classes,
                                   derive_seed(seed, "cross-fit"), fit);
        for (int j = 0; j < K; ++j) {
            if (i != j) {
                const Dataset& test_ds = datasets[static_cast<std::size_t>(j)];
                out.accuracy(i, j) =
                    evaluate(full_model, test_ds.features, *test_ds.labels, num_classes)
                        .accuracy;
                continue;
            }
            // 80/20 split, shuffled deterministically per dataset index
            std::mt19937_64 rng(derive_seed(seed, "diag-split-" + std::to_string(i)));
            std::vector<int> order(static_cast<std::size_t>(train_ds.size()));
            std::iota(order.begin(), order.end(), 0);
            std::shuffle(order.begin(), order.end(), rng);
            const int n_train = static_cast<int>(order.size() * 8 / 10);
            const int n_test = static_cast<int>(order.size()) - n_train;
            FeatureBatch tr(n_train, dims), te(n_test, dims);
            Labels try_(static_cast<std::size_t>(n_train)), tey(static_cast<std::size_t>(n_test));
            for (int r = 0; r < n_train; ++r) {
                tr.row(r) = train_ds.features.row(order[static_cast<std::size_t>(r)]);
                try_[static_cast<std::size_t>(r)] =
                    (*train_ds.labels)[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])];
            }
            for (int r = 0; r < n_test; ++r) {
                te.row(r) = train_ds.features.row(order[static_cast<std::size_t>(n_train + r)]);
                tey[static_cast<std::size_t>(r)] =
                    (*train_ds.labels)[static_cast<std::size_t>(order[static_cast<std::size_t>(n_train + r)])];
            }
            const ModelParams split_model = fit_softmax_classifier(
                tr, try_, num_classes, derive_seed(seed, "diag-fit"), fit);
            out.accuracy(i, i) = evaluate(split_model, te, tey, num_classes).accuracy;
        }
    }

    for (int i = 0; i < K; ++i) {
        double sum = 0.0;
        for (int j = 0; j < K; ++j)
            if (j != i) sum += out.accuracy(i, j);
        out.mean_others(i) = sum / static_cast<double>(K - 1);
        const double diag = out.accuracy(i, i);
        out.percent_drop(i) = diag > 0.0
                                  ? std::round((diag - out.mean_others(i)) / diag * 100.0)
                                  : std::numeric_limits<double>::quiet_NaN();
    }
    return out;
}

// ---------------------------------------------------------------------------
// CSV emission

inline void write_cross_matrix_csv(const CrossMatrix& cm, const std::string& matrix_path,
                                   const std::string& summary_path) {
    std::ofstream m(matrix_path);
    if (!m) throw Error("write_cross_matrix_csv: cannot open '" + matrix_path + "'");
    m << "train";
    for (const auto& n : cm.names) m << ',' << n;
    m << "\n";
    for (Eigen::Index i = 0; i < cm.accuracy.rows(); ++i) {
        m << cm.names[static_cast<std::size_t>(i)];
        for (Eigen::Index j = 0; j < cm.accuracy.cols(); ++j)
            m << ',' << detail::format_double(cm.accuracy(i, j));
        m << "\n";
    }
    std::ofstream s(summary_path);
    if (!s) throw Error("write_cross_matrix_csv: cannot open '" + summary_path + "'");
    s << "dataset,self,mean_others,percent_drop\n";
    for (Eigen::Index i = 0; i < cm.accuracy.rows(); ++i) {
        s << cm.names[static_cast<std::size_t>(i)] << ','
          << detail::format_double(cm.accuracy(i, i)) << ','
          << detail::format_double(cm.mean_others(i)) << ','
          << detail::format_double(cm.percent_drop(i)) << "\n";
    }
}

inline void write_confusion_csv(const Eigen::MatrixXi& confusion,
                                const std::vector<std::string>& names,
                                const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("write_confusion_csv: cannot open '" + path + "'");
    out << "true";
    for (const auto& n : names) out << ',' << n;
    out << "\n";
    for (Eigen::Index i = 0; i < confusion.rows(); ++i) {
        out << names[static_cast<std::size_t>(i)];
        for (Eigen::Index j = 0; j < confusion.cols(); ++j) out << ',' << confusion(i, j);
        out << "\n";
    }
}

}  // namespace ecan
