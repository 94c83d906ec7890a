// Maximum mean discrepancy estimators over the Gaussian multi-kernel, plus
// analytic gradients with respect to the input features.
//
// Four estimators:
//   mmd2_biased       V-statistic, all pairs including the diagonal
//   mmd2_unbiased     U-statistic, within-domain diagonal removed
//   mmd2_weighted     U-statistic with per-class source weights alpha_l
//                     (alpha enters pairwise on source-source terms and once
//                     per source sample on the cross terms)
//   mmd2_conditional  sum of per-class U-statistics between source samples
//                     with true label l and target samples with (pseudo)
//                     label l; classes with fewer than 2 samples on either
//                     side are skipped and surfaced in the diagnostics
//
// Scalar estimators reduce kernel values through ExactSum, so reordering
// samples within a domain leaves the result unchanged bit for bit. Gradients
// treat alpha as a constant; they are validated against central finite
// differences of the corresponding estimator.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ecan/common.hpp"
#include "ecan/kernels.hpp"

namespace ecan {

// Entry (i, j) is ||A.row(i) - B.row(j)||^2, evaluated per pair so the value
// of a pair does not depend on where its rows sit in the batch.
inline Matrix pairwise_sqdist(const FeatureBatch& A, const FeatureBatch& B) {
    require(A.cols() == B.cols(), "pairwise_sqdist: dimension mismatch");
    Matrix d2(A.rows(), B.rows());
    for (Eigen::Index i = 0; i < A.rows(); ++i)
        for (Eigen::Index j = 0; j < B.rows(); ++j)
            d2(i, j) = (A.row(i) - B.row(j)).squaredNorm();
    return d2;
}

// Gram matrix of the kernel mixture: G(i, j) = k(A.row(i), B.row(j)).
inline Matrix gram(const FeatureBatch& A, const FeatureBatch& B, const KernelSpec& spec) {
    spec.validate();
    const Matrix d2 = pairwise_sqdist(A, B);
    Matrix g = Matrix::Zero(A.rows(), B.rows());
    for (int u = 0; u < spec.count(); ++u) {
        const double s2 = spec.bandwidths[u] * spec.bandwidths[u];
        g += spec.weights[u] * (-d2 / (2.0 * s2)).array().exp().matrix();
    }
    return g;
}

// C(i, j) = sum_u (beta_u / sigma_u^2) k_u(A.row(i), B.row(j)), so that
// dk/dx evaluated at (A.row(i), B.row(j)) equals -C(i, j) (A.row(i) - B.row(j)).
inline Matrix grad_coeff(const FeatureBatch& A, const FeatureBatch& B, const KernelSpec& spec) {
    spec.validate();
    const Matrix d2 = pairwise_sqdist(A, B);
    Matrix c = Matrix::Zero(A.rows(), B.rows());
    for (int u = 0; u < spec.count(); ++u) {
        const double s2 = spec.bandwidths[u] * spec.bandwidths[u];
        c += spec.weights[u] / s2 * (-d2 / (2.0 * s2)).array().exp().matrix();
    }
    return c;
}

namespace detail {

inline void check_domains(const FeatureBatch& Xs, const FeatureBatch& Xt, int min_each) {
    require(Xs.cols() == Xt.cols(), "mmd: source/target dimension mismatch");
    if (Xs.rows() < min_each || Xt.rows() < min_each)
        throw InsufficientData("mmd: each domain needs at least " + std::to_string(min_each) +
                               " samples");
    require_finite(Xs, "mmd: source features");
    require_finite(Xt, "mmd: target features");
}

inline void check_labels(const Labels& ys, Eigen::Index n, int num_classes, const char* what) {
    require(static_cast<Eigen::Index>(ys.size()) == n,
            std::string(what) + ": label count must match sample count");
    for (int y : ys)
        require(y >= 0 && y < num_classes, std::string(what) + ": label out of range");
}

// Per-source-sample weight a_i = alpha_{y_i}.
inline Vector sample_weights(const Labels& ys, const Vector& alpha) {
    Vector a(static_cast<Eigen::Index>(ys.size()));
    for (std::size_t i = 0; i < ys.size(); ++i) a(static_cast<Eigen::Index>(i)) = alpha(ys[i]);
    return a;
}

inline std::vector<int> rows_with_label(const Labels& ys, int l) {
    std::vector<int> idx;
    for (std::size_t i = 0; i < ys.size(); ++i)
        if (ys[i] == l) idx.push_back(static_cast<int>(i));
    return idx;
}

inline FeatureBatch select_rows(const FeatureBatch& X, const std::vector<int>& idx) {
    FeatureBatch out(static_cast<Eigen::Index>(idx.size()), X.cols());
    for (std::size_t r = 0; r < idx.size(); ++r)
        out.row(static_cast<Eigen::Index>(r)) = X.row(idx[r]);
    return out;
}

// Order-invariant sums over a gram block; `weights` may be empty (all ones).
inline double exact_block_sum(const Matrix& g, bool skip_diagonal) {
    ExactSum acc;
    for (Eigen::Index i = 0; i < g.rows(); ++i)
        for (Eigen::Index j = 0; j < g.cols(); ++j) {
            if (skip_diagonal && i == j) continue;
            acc.add(g(i, j));
        }
    return acc.value();
}

}  // namespace detail

// V-statistic (biased) estimator: all pairs, diagonal included. Non-negative.
inline double mmd2_biased(const FeatureBatch& Xs, const FeatureBatch& Xt,
                          const KernelSpec& spec) {
    detail::check_domains(Xs, Xt, 1);
    const double ns = static_cast<double>(Xs.rows());
    const double nt = static_cast<double>(Xt.rows());
    const double ss = detail::exact_block_sum(gram(Xs, Xs, spec), false);
    const double tt = detail::exact_block_sum(gram(Xt, Xt, spec), false);
    const double st = detail::exact_block_sum(gram(Xs, Xt, spec), false);
    return ss / (ns * ns) + tt / (nt * nt) - 2.0 * st / (ns * nt);
}

// U-statistic (unbiased) estimator: within-domain diagonals removed. May be
// negative; bounded below by -2 for kernels bounded by 1.
inline double mmd2_unbiased(const FeatureBatch& Xs, const FeatureBatch& Xt,
                            const KernelSpec& spec) {
    detail::check_domains(Xs, Xt, 2);
    const double ns = static_cast<double>(Xs.rows());
    const double nt = static_cast<double>(Xt.rows());
    const double ss = detail::exact_block_sum(gram(Xs, Xs, spec), true);
    const double tt = detail::exact_block_sum(gram(Xt, Xt, spec), true);
    const double st = detail::exact_block_sum(gram(Xs, Xt, spec), false);
    return ss / (ns * (ns - 1.0)) + tt / (nt * (nt - 1.0)) - 2.0 * st / (ns * nt);
}

// Class-weighted U-statistic. alpha holds one weight per class; source sample
// i carries a_i = alpha_{y_i}. alpha = 1 recovers mmd2_unbiased exactly.
inline double mmd2_weighted(const FeatureBatch& Xs, const Labels& ys, const FeatureBatch& Xt,
                            const Vector& alpha, const KernelSpec& spec) {
    detail::check_domains(Xs, Xt, 2);
    detail::check_labels(ys, Xs.rows(), static_cast<int>(alpha.size()), "mmd2_weighted");
    require(alpha.allFinite() && (alpha.array() >= 0.0).all(),
            "mmd2_weighted: alpha must be finite and non-negative");
    const double ns = static_cast<double>(Xs.rows());
    const double nt = static_cast<double>(Xt.rows());
    const Vector a = detail::sample_weights(ys, alpha);

    const Matrix kss = gram(Xs, Xs, spec);
    ExactSum ss;
    for (Eigen::Index i = 0; i < Xs.rows(); ++i)
        for (Eigen::Index j = 0; j < Xs.rows(); ++j)
            if (i != j) ss.add(a(i) * a(j) * kss(i, j));
    const double tt = detail::exact_block_sum(gram(Xt, Xt, spec), true);
    const Matrix kst = gram(Xs, Xt, spec);
    ExactSum st;
    for (Eigen::Index i = 0; i < Xs.rows(); ++i)
        for (Eigen::Index j = 0; j < Xt.rows(); ++j) st.add(a(i) * kst(i, j));
    return ss.value() / (ns * (ns - 1.0)) + tt / (nt * (nt - 1.0)) -
           2.0 * st.value() / (ns * nt);
}

struct ConditionalClassStat {
    int label = 0;
    int source_count = 0;
    int target_count = 0;
    bool included = false;
    double value = 0.0;  // per-class unbiased MMD^2 when included
};

struct ConditionalResult {
    double value = 0.0;  // sum of included per-class terms
    std::vector<ConditionalClassStat> per_class;
    int included_classes = 0;
};

// Class-conditional estimator: per-class unbiased MMD^2 between source
// samples with true label l and target samples with (pseudo) label l, summed
// over classes. A class term needs >= 2 samples on both sides; smaller
// classes are skipped and reported in the diagnostics. If every class is
// skipped the input is degenerate and an error is thrown; callers that can
// tolerate a vanishing term handle it explicitly.
inline ConditionalResult mmd2_conditional(const FeatureBatch& Xs, const Labels& ys,
                                          const FeatureBatch& Xt, const Labels& yt,
                                          int num_classes, const KernelSpec& spec) {
    detail::check_domains(Xs, Xt, 1);
    require(num_classes >= 1, "mmd2_conditional: num_classes must be >= 1");
    detail::check_labels(ys, Xs.rows(), num_classes, "mmd2_conditional source");
    detail::check_labels(yt, Xt.rows(), num_classes, "mmd2_conditional target");
    ConditionalResult result;
    for (int l = 0; l < num_classes; ++l) {
        ConditionalClassStat stat;
        stat.label = l;
        const auto si = detail::rows_with_label(ys, l);
        const auto ti = detail::rows_with_label(yt, l);
        stat.source_count = static_cast<int>(si.size());
        stat.target_count = static_cast<int>(ti.size());
        if (stat.source_count >= 2 && stat.target_count >= 2) {
            stat.included = true;
            stat.value =
                mmd2_unbiased(detail::select_rows(Xs, si), detail::select_rows(Xt, ti), spec);
            result.value += stat.value;
            ++result.included_classes;
        }
        result.per_class.push_back(stat);
    }
    if (result.included_classes == 0)
        throw DegenerateInput("mmd2_conditional: no class has >= 2 samples on both sides");
    return result;
}

struct MmdGrads {
    Matrix d_source;  // same shape as Xs
    Matrix d_target;  // same shape as Xt
};

// Analytic gradient of mmd2_weighted with respect to every sample, alpha
// held constant.
//
// With g(x, y) = dk(x, y)/dx = -C(x, y) (x - y):
//   d/dx_a = (2 a_a / (Ns(Ns-1))) sum_{j != a} a_j g(x_a, x_j)
//          - (2 a_a / (Ns Nt))    sum_j        g(x_a, t_j)
//   d/dt_b = (2 / (Nt(Nt-1)))     sum_{j != b} g(t_b, t_j)
//          - (2 / (Ns Nt))        sum_i a_i    g(t_b, x_i)
inline MmdGrads grad_weighted_mmd(const FeatureBatch& Xs, const Labels& ys,
                                  const FeatureBatch& Xt, const Vector& alpha,
                                  const KernelSpec& spec) {
    detail::check_domains(Xs, Xt, 2);
    detail::check_labels(ys, Xs.rows(), static_cast<int>(alpha.size()), "grad_weighted_mmd");
    require(alpha.allFinite() && (alpha.array() >= 0.0).all(),
            "grad_weighted_mmd: alpha must be finite and non-negative");
    const Eigen::Index ns = Xs.rows(), nt = Xt.rows();
    const double cs = 2.0 / (static_cast<double>(ns) * (ns - 1.0));
    const double ct = 2.0 / (static_cast<double>(nt) * (nt - 1.0));
    const double cx = 2.0 / (static_cast<double>(ns) * static_cast<double>(nt));
    const Vector a = detail::sample_weights(ys, alpha);

    Matrix css = grad_coeff(Xs, Xs, spec);
    css.diagonal().setZero();
    Matrix ctt = grad_coeff(Xt, Xt, spec);
    ctt.diagonal().setZero();
    const Matrix cst = grad_coeff(Xs, Xt, spec);

    MmdGrads g{Matrix::Zero(ns, Xs.cols()), Matrix::Zero(nt, Xt.cols())};
    for (Eigen::Index i = 0; i < ns; ++i) {
        // source-source pull: sum_{j != i} a_j g(x_i, x_j) = Xs^T w - (sum w) x_i
        const Vector w = css.row(i).transpose().cwiseProduct(a);
        Vector acc = cs * a(i) * (Xs.transpose() * w - w.sum() * Xs.row(i).transpose());
        // cross push: -cx a_i sum_j g(x_i, t_j) = cx a_i ((sum c) x_i - Xt^T c)
        const Vector c = cst.row(i).transpose();
        acc += cx * a(i) * (c.sum() * Xs.row(i).transpose() - Xt.transpose() * c);
        g.d_source.row(i) = acc.transpose();
    }
    for (Eigen::Index b = 0; b < nt; ++b) {
        const Vector w = ctt.row(b).transpose();
        Vector acc = ct * (Xt.transpose() * w - w.sum() * Xt.row(b).transpose());
        const Vector c = cst.col(b).cwiseProduct(a);
        acc += cx * (c.sum() * Xt.row(b).transpose() - Xs.transpose() * c);
        g.d_target.row(b) = acc.transpose();
    }
    return g;
}

// Analytic gradient of mmd2_conditional. Samples in skipped classes (and in
// classes absent from the other domain) receive zero gradient rows.
inline MmdGrads grad_conditional_mmd(const FeatureBatch& Xs, const Labels& ys,
                                     const FeatureBatch& Xt, const Labels& yt,
                                     int num_classes, const KernelSpec& spec) {
    detail::check_domains(Xs, Xt, 1);
    require(num_classes >= 1, "grad_conditional_mmd: num_classes must be >= 1");
    detail::check_labels(ys, Xs.rows(), num_classes, "grad_conditional_mmd source");
    detail::check_labels(yt, Xt.rows(), num_classes, "grad_conditional_mmd target");
    MmdGrads g{Matrix::Zero(Xs.rows(), Xs.cols()), Matrix::Zero(Xt.rows(), Xt.cols())};
    int included = 0;
    for (int l = 0; l < num_classes; ++l) {
        const auto si = detail::rows_with_label(ys, l);
        const auto ti = detail::rows_with_label(yt, l);
        if (si.size() < 2 || ti.size() < 2) continue;
        ++included;
        const FeatureBatch xs = detail::select_rows(Xs, si);
        const FeatureBatch xt = detail::select_rows(Xt, ti);
        const Labels sub(si.size(), 0);
        const MmdGrads sub_g = grad_weighted_mmd(xs, sub, xt, Vector::Ones(1), spec);
        for (std::size_t r = 0; r < si.size(); ++r)
            g.d_source.row(si[r]) = sub_g.d_source.row(static_cast<Eigen::Index>(r));
        for (std::size_t r = 0; r < ti.size(); ++r)
            g.d_target.row(ti[r]) = sub_g.d_target.row(static_cast<Eigen::Index>(r));
    }
    if (included == 0)
        throw DegenerateInput("grad_conditional_mmd: no class has >= 2 samples on both sides");
    return g;
}

}  // namespace ecan
