// Command-line surface. One command per process:
//   train      pseudo-label training loop; writes metrics.jsonl + model.ckpt
//   eval       score a checkpoint on a labeled file; optional 2-D projection
//   mmd        print the four discrepancy estimators between two feature files
//   probe      dataset recognition or the cross-dataset accuracy matrix
//   synth      write a synthetic two-domain scenario to CSV
//   gradcheck  finite-difference audit of every analytic gradient
//   sweep      grid search over (gamma, lambda); writes a sensitivity table
//
// Exit codes: 0 success, 1 usage error (flags/config syntax), 2 data or
// contract error (unreadable/invalid inputs), 3 numeric failure.
// Config precedence: built-in defaults < --config file < command-line flags.
// Commands with an output directory echo their fully resolved settings to
// <out>/run.resolved; reruns with identical settings are byte-identical.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "ecan/adaptation.hpp"
#include "ecan/common.hpp"
#include "ecan/data.hpp"
#include "ecan/kernels.hpp"
#include "ecan/mmd.hpp"
#include "ecan/model.hpp"
#include "ecan/probe.hpp"

namespace ecan {
namespace cli {

// Usage-level mistakes (bad flags handled by the parser; this covers config
// keys and missing required settings). Mapped to exit code 1.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Formatting and small IO helpers

// Fixed 6-decimal rendering for printed estimates and accuracies.
inline std::string fmt6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
}

inline std::string join_doubles(const std::vector<double>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ',';
        out += detail::format_double(v[i]);
    }
    return out;
}

inline std::string join_ints(const std::vector<int>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ',';
        out += std::to_string(v[i]);
    }
    return out;
}

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

// Applies a flat `key = value` settings file to a parsed subcommand. Keys are
// the long flag names without the leading dashes; `#` starts a comment; later
// duplicates win. Values never override flags given on the command line, so
// the precedence is defaults < config file < flags. Unknown keys are usage
// errors.
inline void apply_config_file(CLI::App* sub, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open config file '" + path + "'");
    std::map<std::string, std::string> kv;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const std::string stripped = trim(line);
        if (stripped.empty()) continue;
        const auto eq = stripped.find('=');
        if (eq == std::string::npos)
            throw UsageError(path + ":" + std::to_string(lineno) +
                             ": expected `key = value`, got '" + stripped + "'");
        const std::string key = trim(stripped.substr(0, eq));
        if (key.empty())
            throw UsageError(path + ":" + std::to_string(lineno) + ": empty key");
        kv[key] = trim(stripped.substr(eq + 1));
    }
    for (const auto& [key, value] : kv) {
        CLI::Option* op = sub->get_option_no_throw("--" + key);
        if (op == nullptr)
            throw UsageError(path + ": unknown config key '" + key + "' for command '" +
                             sub->get_name() + "'");
        if (op->count() > 0) continue;  // command line wins
        op->add_result(value.empty() ? "true" : value);
        op->run_callback();  // a bad value surfaces as a parser ConversionError
    }
}

inline void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw Error("cannot create output directory '" + dir + "': " + ec.message());
}

// Echo of the fully resolved settings, one `key = value` line, sorted by key.
inline void write_resolved(const std::string& dir,
                           const std::map<std::string, std::string>& kv) {
    const std::string path = dir + "/run.resolved";
    std::ofstream out(path);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    for (const auto& [k, v] : kv) out << k << " = " << v << "\n";
}

// One self-contained JSON record per training iteration, append-only.
inline void write_metrics(const std::vector<IterationRecord>& history,
                          const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    for (const IterationRecord& rec : history) {
        nlohmann::json j;
        j["iteration"] = rec.iteration;
        j["loss"] = rec.loss;
        j["loss_softmax"] = rec.loss_softmax;
        j["mmd_weighted"] = rec.mmd_weighted_term;
        j["mmd_conditional"] = rec.mmd_conditional_term;
        j["warmup"] = rec.warmup;
        j["alpha"] = std::vector<double>(rec.alpha.data(), rec.alpha.data() + rec.alpha.size());
        j["conditional_degenerate"] = rec.conditional_degenerate;
        if (!std::isnan(rec.target_accuracy)) j["target_accuracy"] = rec.target_accuracy;
        out << j.dump() << "\n";
    }
}

// Deduplicated display names for a list of datasets (domain tags may repeat).
inline std::vector<std::string> display_names(const std::vector<Dataset>& sets) {
    std::vector<std::string> names;
    for (std::size_t i = 0; i < sets.size(); ++i) {
        std::string n = sets[i].domain;
        if (std::find(names.begin(), names.end(), n) != names.end())
            n += "_" + std::to_string(i);
        names.push_back(n);
    }
    return names;
}

// ---------------------------------------------------------------------------
// 2-D projection (deterministic substitute for t-SNE figures)

// Scores on the top-2 principal directions of the row-centered matrix. Each
// direction's sign is fixed so its largest-magnitude component is positive.
inline Matrix pca_top2(const Matrix& X) {
    require(X.rows() >= 2, "projection: need at least 2 rows");
    require(X.cols() >= 2, "projection: need at least 2 feature dimensions");
    const Vector mu = X.colwise().mean();
    const Matrix centered = X.rowwise() - mu.transpose();
    const Matrix cov = (centered.adjoint() * centered) / static_cast<double>(X.rows() - 1);
    Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
    require(es.info() == Eigen::Success, "projection: eigen decomposition failed");
    Matrix V(X.cols(), 2);
    V.col(0) = es.eigenvectors().col(X.cols() - 1);  // eigenvalues come ascending
    V.col(1) = es.eigenvectors().col(X.cols() - 2);
    for (int c = 0; c < 2; ++c) {
        Eigen::Index idx = 0;
        V.col(c).cwiseAbs().maxCoeff(&idx);
        if (V(idx, c) < 0.0) V.col(c) = -V.col(c);
    }
    return centered * V;
}

// Projects model features of one or two datasets and writes
// id,domain,label,p0,p1 rows (label `?` when unknown).
inline void export_projection(const ModelParams& params, const std::vector<Dataset>& sets,
                              const std::string& path) {
    Eigen::Index total = 0;
    for (const Dataset& ds : sets) total += ds.size();
    Matrix feats(total, params.feature_dim());
    Eigen::Index row = 0;
    for (const Dataset& ds : sets) {
        require(ds.dims() == params.input_dim(),
                "projection: feature width does not match the model input");
        feats.middleRows(row, ds.size()) = forward(params, ds.features).features();
        row += ds.size();
    }
    const Matrix proj = pca_top2(feats);
    std::ofstream out(path);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    out << "id,domain,label,p0,p1\n";
    row = 0;
    for (const Dataset& ds : sets) {
        for (Eigen::Index i = 0; i < ds.size(); ++i, ++row) {
            out << row << ',' << ds.domain << ',';
            if (ds.labeled())
                out << (*ds.labels)[static_cast<std::size_t>(i)];
            else
                out << '?';
            out << ',' << detail::format_double(proj(row, 0)) << ','
                << detail::format_double(proj(row, 1)) << "\n";
        }
    }
}

// ---------------------------------------------------------------------------
// Finite-difference audit used by `gradcheck`

namespace fd {

inline double rel_err(const std::vector<double>& analytic, const std::vector<double>& numeric) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        num = std::max(num, std::abs(analytic[i] - numeric[i]));
        den = std::max(den, std::abs(numeric[i]));
    }
    return num / std::max(den, 1e-8);
}

constexpr double kStep = 1e-5;

template <typename F>
double central(F&& f, double& slot) {
    const double saved = slot;
    slot = saved + kStep;
    const double up = f();
    slot = saved - kStep;
    const double down = f();
    slot = saved;
    return (up - down) / (2.0 * kStep);
}

}  // namespace fd

// Worst relative error between analytic gradients and central finite
// differences across: the kernel gradient, softmax loss, both MMD regularizer
// gradients in feature space, and the full joint objective through a
// 1-hidden-layer network in parameter space.
inline double gradcheck_max_rel_error(std::uint64_t seed, int instances) {
    require(instances >= 1, "gradcheck: need at least one instance");
    double worst = 0.0;
    for (int inst = 0; inst < instances; ++inst) {
        std::mt19937_64 rng(derive_seed(seed, "gradcheck-" + std::to_string(inst)));
        std::normal_distribution<double> normal(0.0, 1.0);
        std::uniform_real_distribution<double> unif(0.5, 2.0);

        // kernel gradient, 5 dimensions, 3 bandwidths
        {
            const KernelSpec spec{{0.7, 1.3, 2.1}, {0.5, 0.3, 0.2}};
            Vector x(5), y(5);
            for (int d = 0; d < 5; ++d) {
                x(d) = normal(rng);
                y(d) = normal(rng);
            }
            const Vector g = multi_kernel_grad(x, y, spec);
            std::vector<double> a, n;
            for (int d = 0; d < 5; ++d) {
                a.push_back(g(d));
                n.push_back(fd::central([&] { return multi_kernel_eval(x, y, spec); }, x(d)));
            }
            worst = std::max(worst, fd::rel_err(a, n));
        }

        // softmax loss w.r.t. logits, 6 samples, 4 classes
        {
            Matrix logits(6, 4);
            for (Eigen::Index i = 0; i < logits.size(); ++i) logits(i) = normal(rng);
            Labels y(6);
            for (int i = 0; i < 6; ++i) y[static_cast<std::size_t>(i)] = i % 4;
            const LossGrad lg = softmax_loss_and_grad(logits, y);
            std::vector<double> a, n;
            for (Eigen::Index i = 0; i < logits.size(); ++i) {
                a.push_back(lg.dlogits(i));
                n.push_back(fd::central(
                    [&] { return softmax_loss_and_grad(logits, y).loss; }, logits(i)));
            }
            worst = std::max(worst, fd::rel_err(a, n));
        }

        // both MMD gradients in feature space: Ns=10, Nt=8, D=4, L=3
        {
            const int L = 3;
            Matrix Xs(10, 4), Xt(8, 4);
            for (Eigen::Index i = 0; i < Xs.size(); ++i) Xs(i) = normal(rng);
            for (Eigen::Index i = 0; i < Xt.size(); ++i) Xt(i) = normal(rng);
            Labels ys(10), yt(8);
            for (int i = 0; i < 10; ++i) ys[static_cast<std::size_t>(i)] = i % L;
            for (int i = 0; i < 8; ++i) yt[static_cast<std::size_t>(i)] = i % L;
            Vector alpha(L);
            for (int l = 0; l < L; ++l) alpha(l) = unif(rng);
            const KernelSpec spec{{0.8, 1.6}, {0.6, 0.4}};

            const MmdGrads gw = grad_weighted_mmd(Xs, ys, Xt, alpha, spec);
            const MmdGrads gc = grad_conditional_mmd(Xs, ys, Xt, yt, L, spec);
            std::vector<double> aw, nw, ac, nc;
            auto fw = [&] { return mmd2_weighted(Xs, ys, Xt, alpha, spec); };
            auto fc = [&] { return mmd2_conditional(Xs, ys, Xt, yt, L, spec).value; };
            for (Eigen::Index i = 0; i < Xs.size(); ++i) {
                aw.push_back(gw.d_source(i));
                nw.push_back(fd::central(fw, Xs(i)));
                ac.push_back(gc.d_source(i));
                nc.push_back(fd::central(fc, Xs(i)));
            }
            for (Eigen::Index i = 0; i < Xt.size(); ++i) {
                aw.push_back(gw.d_target(i));
                nw.push_back(fd::central(fw, Xt(i)));
                ac.push_back(gc.d_target(i));
                nc.push_back(fd::central(fc, Xt(i)));
            }
            worst = std::max(worst, fd::rel_err(aw, nw));
            worst = std::max(worst, fd::rel_err(ac, nc));
        }

        // joint objective through a 1-hidden-layer network, parameter space
        {
            const int D = 6, H = 5, L = 4, Ns = 12, Nt = 12;
            ModelParams params =
                init_params({D, H, L}, derive_seed(seed, "gradcheck-net-" + std::to_string(inst)));
            Matrix Xs(Ns, D), Xt(Nt, D);
            for (Eigen::Index i = 0; i < Xs.size(); ++i) Xs(i) = normal(rng);
            for (Eigen::Index i = 0; i < Xt.size(); ++i) Xt(i) = normal(rng);
            Labels ys(Ns), yt(Nt);
            for (int i = 0; i < Ns; ++i) ys[static_cast<std::size_t>(i)] = i % L;
            for (int i = 0; i < Nt; ++i) yt[static_cast<std::size_t>(i)] = i % L;
            Vector alpha(L);
            for (int l = 0; l < L; ++l) alpha(l) = unif(rng);
            Matrix pooled(Ns + Nt, D);
            pooled << Xs, Xt;
            const KernelSpec spec = median_ladder_spec(pooled, 3);
            const double gamma = 0.37, lambda = 0.21;

            const JointLossResult jl =
                joint_loss(params, Xs, ys, Xt, yt, alpha, spec, gamma, lambda);
            auto loss_at = [&] {
                return joint_loss(params, Xs, ys, Xt, yt, alpha, spec, gamma, lambda).loss;
            };
            std::vector<double> a, n;
            for (int layer = 0; layer < params.layer_count(); ++layer) {
                Matrix& W = params.weights[static_cast<std::size_t>(layer)];
                const Matrix& gW = jl.grads.weights[static_cast<std::size_t>(layer)];
                for (Eigen::Index i = 0; i < W.size(); ++i) {
                    a.push_back(gW(i));
                    n.push_back(fd::central(loss_at, W(i)));
                }
                Vector& b = params.biases[static_cast<std::size_t>(layer)];
                const Vector& gb = jl.grads.biases[static_cast<std::size_t>(layer)];
                for (Eigen::Index i = 0; i < b.size(); ++i) {
                    a.push_back(gb(i));
                    n.push_back(fd::central(loss_at, b(i)));
                }
            }
            worst = std::max(worst, fd::rel_err(a, n));
        }
    }
    return worst;
}

// ---------------------------------------------------------------------------
// Per-command options and execution

struct TrainOpts {
    std::string source, target, target_labels, out, config;
    TrainConfig cfg;
    bool no_reweight = false, no_condition = false, no_warmup = false;
};

inline void require_setting(const std::string& value, const std::string& what) {
    if (value.empty()) throw UsageError(what + " is required (flag or config file)");
}

inline std::map<std::string, std::string> train_resolved(const TrainOpts& o) {
    const TrainConfig& c = o.cfg;
    return {
        {"command", "train"},
        {"source", o.source},
        {"target", o.target},
        {"target_labels", o.target_labels},
        {"out", o.out},
        {"gamma", detail::format_double(c.gamma)},
        {"lambda", detail::format_double(c.lambda)},
        {"learning_rate", detail::format_double(c.learning_rate)},
        {"momentum", detail::format_double(c.momentum)},
        {"pseudo_interval", std::to_string(c.pseudo_interval)},
        {"batch_source", std::to_string(c.batch_source)},
        {"batch_target", std::to_string(c.batch_target)},
        {"iterations", std::to_string(c.iterations)},
        {"seed", std::to_string(c.seed)},
        {"reweight", c.reweight_on ? "true" : "false"},
        {"condition", c.condition_on ? "true" : "false"},
        {"warmup", c.warmup_on ? "true" : "false"},
        {"hidden", join_ints(c.hidden)},
        {"classifier_lr_multiplier", detail::format_double(c.classifier_lr_multiplier)},
        {"alpha_clamp", detail::format_double(c.alpha_clamp)},
        {"eval_every", std::to_string(c.eval_every)},
        {"kernels", std::to_string(c.kernel_count)},
        {"softmax_weight", detail::format_double(c.softmax_weight)},
    };
}

inline int exec_train(TrainOpts& o) {
    require_setting(o.source, "train: --source");
    require_setting(o.target, "train: --target");
    require_setting(o.out, "train: --out");
    o.cfg.reweight_on = !o.no_reweight;
    o.cfg.condition_on = !o.no_condition;
    o.cfg.warmup_on = !o.no_warmup;
    const Dataset source = load_features(o.source);
    const Dataset target = load_features(o.target);
    std::optional<EvalLabels> eval_labels;
    if (!o.target_labels.empty()) {
        const Dataset tl = load_features(o.target_labels);
        require(tl.labeled(), "train: --target-labels file '" + o.target_labels +
                                  "' carries no labels");
        require(tl.size() == target.size(),
                "train: --target-labels row count does not match the target file");
        eval_labels = EvalLabels{*tl.labels};
    } else if (target.labeled()) {
        eval_labels = EvalLabels{*target.labels};
    }

    ensure_dir(o.out);
    const TrainResult result =
        train_ecan(o.cfg, source, target.features, eval_labels ? &*eval_labels : nullptr);
    write_metrics(result.history, o.out + "/metrics.jsonl");
    save_model(result.params, o.out + "/model.ckpt");
    write_resolved(o.out, train_resolved(o));

    std::printf("iterations %d\n", o.cfg.iterations);
    std::printf("final_loss %s\n", fmt6(result.history.back().loss).c_str());
    if (eval_labels) {
        const EvalResult er = evaluate(result.params, target.features, *eval_labels);
        std::printf("final_accuracy %s\n", fmt6(er.accuracy).c_str());
    }
    return 0;
}

struct EvalOpts {
    std::string model, data, second, projection, confusion, out, config;
};

inline int exec_eval(const EvalOpts& o) {
    require_setting(o.model, "eval: --model");
    require_setting(o.data, "eval: --data");
    const ModelParams params = load_model(o.model);
    std::vector<Dataset> sets;
    sets.push_back(load_features(o.data));
    if (!o.second.empty()) sets.push_back(load_features(o.second));
    require(sets[0].labeled() || !o.projection.empty(),
            "eval: data file is unlabeled and no --export-projection was requested");
    require(sets[0].dims() == params.input_dim(),
            "eval: feature width does not match the model input");

    if (!o.out.empty()) {
        ensure_dir(o.out);
        write_resolved(o.out, {{"command", "eval"},
                               {"model", o.model},
                               {"data", o.data},
                               {"second", o.second},
                               {"export_projection", o.projection},
                               {"confusion", o.confusion},
                               {"out", o.out}});
    }
    if (sets[0].labeled()) {
        const EvalResult er = evaluate(params, sets[0].features, *sets[0].labels,
                                       static_cast<int>(params.num_classes()));
        std::printf("accuracy %s\n", fmt6(er.accuracy).c_str());
        for (Eigen::Index l = 0; l < er.per_class.size(); ++l)
            if (!std::isnan(er.per_class(l)))
                std::printf("class_%d %s\n", static_cast<int>(l),
                            fmt6(er.per_class(l)).c_str());
        if (!o.confusion.empty()) {
            std::vector<std::string> names;
            for (Eigen::Index l = 0; l < er.confusion.rows(); ++l)
                names.push_back(std::to_string(l));
            write_confusion_csv(er.confusion, names, o.confusion);
        }
    }
    if (!o.projection.empty()) export_projection(params, sets, o.projection);
    return 0;
}

struct MmdOpts {
    std::string source, target, out, config;
    std::vector<double> bandwidths, weights;
    int kernels = 5;
};

inline int exec_mmd(const MmdOpts& o) {
    require_setting(o.source, "mmd: --source");
    require_setting(o.target, "mmd: --target");
    const Dataset source = load_features(o.source);
    const Dataset target = load_features(o.target);
    require(source.dims() == target.dims(), "mmd: feature widths differ between the files");

    KernelSpec spec;
    if (!o.bandwidths.empty()) {
        spec.bandwidths = o.bandwidths;
        spec.weights = o.weights.empty()
                           ? std::vector<double>(o.bandwidths.size(),
                                                 1.0 / static_cast<double>(o.bandwidths.size()))
                           : o.weights;
        spec.validate();
    } else {
        require(o.weights.empty(), "mmd: --weights requires --bandwidths");
        // median ladder on a strided subsample (at most 256 rows per domain)
        const FeatureBatch ss = ecan::detail::subsample_rows(source.features, 256);
        const FeatureBatch ts = ecan::detail::subsample_rows(target.features, 256);
        Matrix pooled(ss.rows() + ts.rows(), ss.cols());
        pooled << ss, ts;
        spec = median_ladder_spec(pooled, o.kernels);
    }

    std::vector<std::string> lines;
    lines.push_back("biased " + fmt6(mmd2_biased(source.features, target.features, spec)));
    lines.push_back("unbiased " + fmt6(mmd2_unbiased(source.features, target.features, spec)));
    if (source.labeled() && target.labeled()) {
        int num_classes = 0;
        for (int y : *source.labels) num_classes = std::max(num_classes, y + 1);
        for (int y : *target.labels) num_classes = std::max(num_classes, y + 1);
        PseudoLabelTable table;
        table.hard = *target.labels;
        table.delta = Matrix::Zero(target.size(), num_classes);
        for (Eigen::Index i = 0; i < target.size(); ++i)
            table.delta(i, (*target.labels)[static_cast<std::size_t>(i)]) = 1.0;
        const ClassWeights w =
            compute_class_weights(table, class_histogram(source, num_classes).counts);
        lines.push_back("weighted " + fmt6(mmd2_weighted(source.features, *source.labels,
                                                         target.features, w.alpha, spec)));
        lines.push_back("conditional " +
                        fmt6(mmd2_conditional(source.features, *source.labels, target.features,
                                              *target.labels, num_classes, spec)
                                 .value));
    }
    for (const std::string& l : lines) std::printf("%s\n", l.c_str());

    if (!o.out.empty()) {
        ensure_dir(o.out);
        std::ofstream est(o.out + "/estimates.txt");
        for (const std::string& l : lines) est << l << "\n";
        write_resolved(o.out, {{"command", "mmd"},
                               {"source", o.source},
                               {"target", o.target},
                               {"bandwidths", join_doubles(spec.bandwidths)},
                               {"weights", join_doubles(spec.weights)},
                               {"kernels", std::to_string(spec.count())},
                               {"out", o.out}});
    }
    return 0;
}

struct ProbeOpts {
    std::string mode = "recognition";
    std::vector<std::string> data;
    std::string out, config;
    int n_train = 500, n_test = 200, trials = 10;
    std::uint64_t seed = 0;
    FitConfig fit;
};

inline int exec_probe(const ProbeOpts& o) {
    if (o.data.empty()) throw UsageError("probe: --data is required (flag or config file)");
    require_setting(o.out, "probe: --out");
    std::vector<Dataset> sets;
    for (const std::string& path : o.data) sets.push_back(load_features(path));
    const std::vector<std::string> names = display_names(sets);
    ensure_dir(o.out);
    std::map<std::string, std::string> resolved = {
        {"command", "probe"},
        {"mode", o.mode},
        {"data", [&] {
             std::string s;
             for (std::size_t i = 0; i < o.data.size(); ++i) s += (i ? "," : "") + o.data[i];
             return s;
         }()},
        {"out", o.out},
        {"seed", std::to_string(o.seed)},
        {"fit_learning_rate", detail::format_double(o.fit.learning_rate)},
        {"fit_momentum", detail::format_double(o.fit.momentum)},
        {"fit_iterations", std::to_string(o.fit.iterations)},
    };
    if (o.mode == "recognition") {
        resolved["n_train"] = std::to_string(o.n_train);
        resolved["n_test"] = std::to_string(o.n_test);
        resolved["trials"] = std::to_string(o.trials);
        write_resolved(o.out, resolved);
        const RecognitionResult r =
            dataset_recognition(sets, o.n_train, o.n_test, o.trials, o.seed, o.fit);
        write_confusion_csv(r.confusion, names, o.out + "/confusion.csv");
        std::ofstream acc(o.out + "/recognition.csv");
        if (!acc) throw Error("cannot open '" + o.out + "/recognition.csv' for writing");
        acc << "trial,accuracy\n";
        for (std::size_t t = 0; t < r.per_trial.size(); ++t)
            acc << t << ',' << detail::format_double(r.per_trial[t]) << "\n";
        acc << "mean," << detail::format_double(r.mean_accuracy) << "\n";
        std::printf("mean_accuracy %s\n", fmt6(r.mean_accuracy).c_str());
    } else {
        write_resolved(o.out, resolved);
        CrossMatrix cm = cross_dataset_matrix(sets, o.seed, o.fit);
        cm.names = names;
        write_cross_matrix_csv(cm, o.out + "/matrix.csv", o.out + "/summary.csv");
        for (Eigen::Index i = 0; i < cm.percent_drop.size(); ++i)
            std::printf("percent_drop_%s %s\n", names[static_cast<std::size_t>(i)].c_str(),
                        detail::format_double(cm.percent_drop(i)).c_str());
    }
    return 0;
}

struct SynthOpts {
    std::string scenario = "shift-A", out, config;
    std::uint64_t seed = 0;
    int source_count = 0, target_count = 0;  // 0 keeps the scenario default
};

inline int exec_synth(const SynthOpts& o) {
    require_setting(o.out, "synth: --out");
    ShiftConfig cfg = shift_scenario(o.scenario, o.seed);
    if (o.source_count > 0) cfg.source_count = o.source_count;
    if (o.target_count > 0) cfg.target_count = o.target_count;
    const SynthResult res = synth_two_domain(cfg);
    ensure_dir(o.out);
    save_features(res.source, o.out + "/source.csv");
    save_features(res.target, o.out + "/target.csv");
    Dataset labeled_target = res.target;
    labeled_target.labels = res.target_labels.values;
    save_features(labeled_target, o.out + "/target_labels.csv");
    write_resolved(o.out, {{"command", "synth"},
                           {"scenario", o.scenario},
                           {"seed", std::to_string(o.seed)},
                           {"source_count", std::to_string(cfg.source_count)},
                           {"target_count", std::to_string(cfg.target_count)},
                           {"out", o.out}});
    std::printf("source_rows %d\n", static_cast<int>(res.source.size()));
    std::printf("target_rows %d\n", static_cast<int>(res.target.size()));
    return 0;
}

struct GradcheckOpts {
    std::uint64_t seed = 0;
    int instances = 10;
    std::string out, config;
};

inline int exec_gradcheck(const GradcheckOpts& o) {
    const double err = gradcheck_max_rel_error(o.seed, o.instances);
    const bool pass = err <= 1e-5;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6e", err);
    std::vector<std::string> lines = {
        "instances " + std::to_string(o.instances),
        "max_rel_error " + std::string(buf),
        "threshold 1.000000e-05",
        std::string("status ") + (pass ? "pass" : "fail"),
    };
    for (const std::string& l : lines) std::printf("%s\n", l.c_str());
    if (!o.out.empty()) {
        ensure_dir(o.out);
        std::ofstream rep(o.out + "/report.txt");
        for (const std::string& l : lines) rep << l << "\n";
        write_resolved(o.out, {{"command", "gradcheck"},
                               {"seed", std::to_string(o.seed)},
                               {"instances", std::to_string(o.instances)},
                               {"out", o.out}});
    }
    return pass ? 0 : 3;
}

struct SweepOpts {
    std::string source, target, target_labels, out, config;
    std::vector<double> gammas = {0.0, 0.01, 0.03, 0.05, 0.1, 0.3, 0.5, 1.0};
    std::vector<double> lambdas = {0.0, 0.001, 0.01, 0.1};
    TrainConfig cfg;  // gamma/lambda fields are overwritten per grid cell
};

inline int exec_sweep(SweepOpts& o) {
    require_setting(o.source, "sweep: --source");
    require_setting(o.target, "sweep: --target");
    require_setting(o.out, "sweep: --out");
    const Dataset source = load_features(o.source);
    const Dataset target = load_features(o.target);
    Labels truth;
    if (!o.target_labels.empty()) {
        const Dataset tl = load_features(o.target_labels);
        require(tl.labeled(), "sweep: --target-labels file carries no labels");
        require(tl.size() == target.size(),
                "sweep: --target-labels row count does not match the target file");
        truth = *tl.labels;
    } else {
        require(target.labeled(),
                "sweep: need target labels (--target-labels or a labeled target file) to "
                "score the grid");
        truth = *target.labels;
    }
    require(!o.gammas.empty() && !o.lambdas.empty(), "sweep: empty grid");

    ensure_dir(o.out);
    write_resolved(o.out, {{"command", "sweep"},
                           {"source", o.source},
                           {"target", o.target},
                           {"target_labels", o.target_labels},
                           {"out", o.out},
                           {"gammas", join_doubles(o.gammas)},
                           {"lambdas", join_doubles(o.lambdas)},
                           {"iterations", std::to_string(o.cfg.iterations)},
                           {"learning_rate", detail::format_double(o.cfg.learning_rate)},
                           {"momentum", detail::format_double(o.cfg.momentum)},
                           {"pseudo_interval", std::to_string(o.cfg.pseudo_interval)},
                           {"batch_source", std::to_string(o.cfg.batch_source)},
                           {"batch_target", std::to_string(o.cfg.batch_target)},
                           {"hidden", join_ints(o.cfg.hidden)},
                           {"kernels", std::to_string(o.cfg.kernel_count)},
                           {"seed", std::to_string(o.cfg.seed)}});

    std::ofstream csv(o.out + "/sweep.csv");
    if (!csv) throw Error("cannot open '" + o.out + "/sweep.csv' for writing");
    csv << "gamma,lambda,accuracy,final_loss\n";
    double best_acc = -1.0, best_g = 0.0, best_l = 0.0;
    for (double g : o.gammas) {
        for (double l : o.lambdas) {
            TrainConfig cell = o.cfg;
            cell.gamma = g;
            cell.lambda = l;
            const TrainResult r = train_ecan(cell, source, target.features, nullptr);
            const double acc =
                evaluate(r.params, target.features, truth,
                         static_cast<int>(r.params.num_classes()))
                    .accuracy;
            csv << detail::format_double(g) << ',' << detail::format_double(l) << ','
                << detail::format_double(acc) << ','
                << detail::format_double(r.history.back().loss) << "\n";
            if (acc > best_acc) {
                best_acc = acc;
                best_g = g;
                best_l = l;
            }
        }
    }
    std::printf("best_gamma %s\n", detail::format_double(best_g).c_str());
    std::printf("best_lambda %s\n", detail::format_double(best_l).c_str());
    std::printf("best_accuracy %s\n", fmt6(best_acc).c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// Wiring

inline void add_train_flags(CLI::App* sub, TrainConfig& c) {
    sub->add_option("--gamma", c.gamma, "Weight on the re-weighted marginal MMD term");
    sub->add_option("--lambda", c.lambda, "Weight on the class-conditional MMD term");
    sub->add_option("--lr", c.learning_rate, "SGD learning rate");
    sub->add_option("--momentum", c.momentum, "SGD momentum");
    sub->add_option("--pseudo-interval", c.pseudo_interval,
                    "Iterations between pseudo-label refreshes");
    sub->add_option("--batch-source", c.batch_source, "Source minibatch size");
    sub->add_option("--batch-target", c.batch_target, "Target minibatch size");
    sub->add_option("--iterations", c.iterations, "Total SGD iterations");
    sub->add_option("--seed", c.seed, "Run seed");
    sub->add_option("--hidden", c.hidden, "Hidden layer widths, comma separated")
        ->delimiter(',');
    sub->add_option("--classifier-lr-multiplier", c.classifier_lr_multiplier,
                    "Learning-rate multiplier for the output layer");
    sub->add_option("--alpha-clamp", c.alpha_clamp, "Upper clamp for class weights");
    sub->add_option("--eval-every", c.eval_every,
                    "Iterations between accuracy evaluations (needs target labels)");
    sub->add_option("--kernels", c.kernel_count, "Number of kernels in the bandwidth ladder");
    sub->add_option("--softmax-weight", c.softmax_weight, "Weight on the source softmax loss");
}

// Builds the app, parses argv, dispatches. Returns the process exit code.
inline int run_cli(int argc, const char* const* argv) {
    CLI::App app{
        "Unsupervised domain adaptation on feature vectors: kernel two-sample "
        "discrepancy estimators, a pseudo-label training loop with class "
        "re-weighting, and dataset-bias probes.\n"
        "Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure."};
    app.require_subcommand(1);

    static const std::string kConfigHelp =
        "Flat `key = value` settings file; keys are long flag names without dashes; "
        "`#` comments; flags given on the command line win";

    TrainOpts t;
    CLI::App* train = app.add_subcommand("train", "Run the adaptation training loop");
    train->add_option("--config", t.config, kConfigHelp);
    train->add_option("--source", t.source, "Labeled source feature CSV");
    train->add_option("--target", t.target, "Target feature CSV (labels optional)");
    train->add_option("--target-labels", t.target_labels,
                      "Labeled copy of the target file, used only for accuracy reporting");
    train->add_option("--out", t.out, "Output directory");
    add_train_flags(train, t.cfg);
    train->add_flag("--no-reweight", t.no_reweight, "Pin all class weights to 1");
    train->add_flag("--no-condition", t.no_condition, "Drop the class-conditional term");
    train->add_flag("--no-warmup", t.no_warmup, "Use full regularizer weight from the start");

    EvalOpts e;
    CLI::App* eval_cmd = app.add_subcommand("eval", "Score a checkpoint on a feature file");
    eval_cmd->add_option("--config", e.config, kConfigHelp);
    eval_cmd->add_option("--model", e.model, "Checkpoint path");
    eval_cmd->add_option("--data", e.data, "Feature CSV to score");
    eval_cmd->add_option("--second", e.second, "Optional second feature CSV for the projection");
    eval_cmd->add_option("--export-projection", e.projection,
                         "Write a 2-D principal-direction projection of the model features");
    eval_cmd->add_option("--confusion", e.confusion, "Write the confusion matrix CSV here");
    eval_cmd->add_option("--out", e.out, "Optional output directory for run.resolved");

    MmdOpts m;
    CLI::App* mmd_cmd =
        app.add_subcommand("mmd", "Print discrepancy estimates between two feature files");
    mmd_cmd->add_option("--config", m.config, kConfigHelp);
    mmd_cmd->add_option("--source", m.source, "First feature CSV");
    mmd_cmd->add_option("--target", m.target, "Second feature CSV");
    mmd_cmd->add_option("--bandwidths", m.bandwidths,
                        "Explicit kernel bandwidths (default: median ladder)")
        ->delimiter(',');
    mmd_cmd->add_option("--weights", m.weights, "Kernel weights (default: uniform)")
        ->delimiter(',');
    mmd_cmd->add_option("--kernels", m.kernels, "Ladder size when fitting bandwidths");
    mmd_cmd->add_option("--out", m.out, "Optional output directory");

    ProbeOpts p;
    CLI::App* probe_cmd = app.add_subcommand("probe", "Dataset-bias measurements");
    probe_cmd->add_option("--config", p.config, kConfigHelp);
    probe_cmd->add_option("--mode", p.mode, "recognition | matrix")
        ->check(CLI::IsMember({"recognition", "matrix"}));
    probe_cmd->add_option("--data", p.data, "Feature CSVs, comma separated (2 or more)")
        ->delimiter(',');
    probe_cmd->add_option("--out", p.out, "Output directory");
    probe_cmd->add_option("--n-train", p.n_train, "Training rows per dataset per trial");
    probe_cmd->add_option("--n-test", p.n_test, "Test rows per dataset per trial");
    probe_cmd->add_option("--trials", p.trials, "Recognition trials");
    probe_cmd->add_option("--seed", p.seed, "Run seed");
    probe_cmd->add_option("--fit-lr", p.fit.learning_rate, "Probe classifier learning rate");
    probe_cmd->add_option("--fit-momentum", p.fit.momentum, "Probe classifier momentum");
    probe_cmd->add_option("--fit-iterations", p.fit.iterations,
                          "Probe classifier training iterations");

    SynthOpts s;
    CLI::App* synth_cmd = app.add_subcommand("synth", "Write a synthetic two-domain scenario");
    synth_cmd->add_option("--config", s.config, kConfigHelp);
    synth_cmd->add_option("--scenario", s.scenario, "Scenario name (shift-A)");
    synth_cmd->add_option("--seed", s.seed, "Sampling seed");
    synth_cmd->add_option("--source-count", s.source_count, "Override source sample count");
    synth_cmd->add_option("--target-count", s.target_count, "Override target sample count");
    synth_cmd->add_option("--out", s.out, "Output directory");

    GradcheckOpts g;
    CLI::App* grad_cmd =
        app.add_subcommand("gradcheck", "Finite-difference audit of the analytic gradients");
    grad_cmd->add_option("--config", g.config, kConfigHelp);
    grad_cmd->add_option("--seed", g.seed, "Audit seed");
    grad_cmd->add_option("--instances", g.instances, "Seeded instances per gradient family");
    grad_cmd->add_option("--out", g.out, "Optional output directory");

    SweepOpts w;
    CLI::App* sweep_cmd =
        app.add_subcommand("sweep", "Grid search over the regularizer weights");
    sweep_cmd->add_option("--config", w.config, kConfigHelp);
    sweep_cmd->add_option("--source", w.source, "Labeled source feature CSV");
    sweep_cmd->add_option("--target", w.target, "Target feature CSV");
    sweep_cmd->add_option("--target-labels", w.target_labels,
                          "Labeled copy of the target file for scoring");
    sweep_cmd->add_option("--out", w.out, "Output directory");
    sweep_cmd->add_option("--gammas", w.gammas, "Marginal-term grid, comma separated")
        ->delimiter(',');
    sweep_cmd->add_option("--lambdas", w.lambdas, "Conditional-term grid, comma separated")
        ->delimiter(',');
    add_train_flags(sweep_cmd, w.cfg);
    // the grid supplies gamma/lambda; the scalar flags would be dead weight
    sweep_cmd->remove_option(sweep_cmd->get_option("--gamma"));
    sweep_cmd->remove_option(sweep_cmd->get_option("--lambda"));

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& ex) {
        return app.exit(ex);
    } catch (const CLI::CallForAllHelp& ex) {
        return app.exit(ex);
    } catch (const CLI::CallForVersion& ex) {
        return app.exit(ex);
    } catch (const CLI::ParseError& ex) {
        app.exit(ex);
        return 1;
    }

    try {
        if (train->parsed() && !t.config.empty()) apply_config_file(train, t.config);
        if (eval_cmd->parsed() && !e.config.empty()) apply_config_file(eval_cmd, e.config);
        if (mmd_cmd->parsed() && !m.config.empty()) apply_config_file(mmd_cmd, m.config);
        if (probe_cmd->parsed() && !p.config.empty()) apply_config_file(probe_cmd, p.config);
        if (synth_cmd->parsed() && !s.config.empty()) apply_config_file(synth_cmd, s.config);
        if (grad_cmd->parsed() && !g.config.empty()) apply_config_file(grad_cmd, g.config);
        if (sweep_cmd->parsed() && !w.config.empty()) apply_config_file(sweep_cmd, w.config);

        if (train->parsed()) return exec_train(t);
        if (eval_cmd->parsed()) return exec_eval(e);
        if (mmd_cmd->parsed()) return exec_mmd(m);
        if (probe_cmd->parsed()) return exec_probe(p);
        if (synth_cmd->parsed()) return exec_synth(s);
        if (grad_cmd->parsed()) return exec_gradcheck(g);
        if (sweep_cmd->parsed()) return exec_sweep(w);
        std::fprintf(stderr, "error: no command selected\n");
        return 1;
    } catch (const UsageError& ex) {
        std::fprintf(stderr, "usage error: %s\n", ex.what());
        return 1;
    } catch (const CLI::ParseError& ex) {
        std::fprintf(stderr, "usage error: %s\n", ex.what());
        return 1;
    } catch (const NumericError& ex) {
        std::fprintf(stderr, "numeric error: %s\n", ex.what());
        return 3;
    } catch (const Error& ex) {
        std::fprintf(stderr, "error: %s\n", ex.what());
        return 2;
    } catch (const std::exception& ex) {
        std::fprintf(stderr, "internal error: %s\n", ex.what());
        return 3;
    }
}

}  // namespace cli
}  // namespace ecan
