// Multi-layer perceptron classifier with a feature tap on the last hidden
// layer, softmax loss, reverse-mode gradients, SGD with momentum, and a
// versioned binary checkpoint format.
//
// The last hidden layer's activations are the feature space every MMD term
// operates on; with zero hidden layers the features are the raw inputs.
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "ecan/common.hpp"

namespace ecan {

struct ModelParams {
    std::vector<Matrix> weights;  // weights[l] maps layer l width -> layer l+1 width
    std::vector<Vector> biases;   // biases[l] has layer l+1 width
    std::string activation = "tanh";  // hidden-layer nonlinearity

    int layer_count() const { return static_cast<int>(weights.size()); }
    Eigen::Index input_dim() const { return weights.front().rows(); }
    Eigen::Index num_classes() const { return weights.back().cols(); }
    Eigen::Index feature_dim() const {
        return weights.size() > 1 ? weights[weights.size() - 2].cols() : weights.front().rows();
    }

    void validate() const {
        require(!weights.empty() && weights.size() == biases.size(),
                "ModelParams: weights/biases layer counts must match and be non-empty");
        require(activation == "tanh", "ModelParams: unknown activation tag '" + activation + "'");
        for (std::size_t l = 0; l < weights.size(); ++l) {
            require(biases[l].size() == weights[l].cols(),
                    "ModelParams: bias width must equal layer output width");
            if (l + 1 < weights.size())
                require(weights[l].cols() == weights[l + 1].rows(),
                        "ModelParams: consecutive layer shapes must chain");
            require_finite(weights[l], "ModelParams: weights");
            if (!biases[l].allFinite()) throw NumericError("ModelParams: biases contain non-finite values");
        }
    }
};

// Glorot-uniform weights, zero biases, drawn from a generator seeded with
// `seed` alone so identical seeds give identical parameters.
inline ModelParams init_params(const std::vector<int>& layer_sizes, std::uint64_t seed,
                               const std::string& activation = "tanh") {
    require(layer_sizes.size() >= 2, "init_params: need at least input and output sizes");
    for (int s : layer_sizes) require(s >= 1, "init_params: layer sizes must be positive");
    ModelParams p;
    p.activation = activation;
    std::mt19937_64 rng(seed);
    for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) {
        const int fan_in = layer_sizes[l], fan_out = layer_sizes[l + 1];
        const double limit = std::sqrt(6.0 / (fan_in + fan_out));
        std::uniform_real_distribution<double> unif(-limit, limit);
        Matrix w(fan_in, fan_out);
        for (Eigen::Index i = 0; i < w.rows(); ++i)
            for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = unif(rng);
        p.weights.push_back(std::move(w));
        p.biases.push_back(Vector::Zero(fan_out));
    }
    p.validate();
    return p;
}

// Row-wise numerically stable softmax (max subtraction).
inline Matrix softmax_rows(const Matrix& logits) {
    Matrix probs(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const double m = logits.row(i).maxCoeff();
        const Eigen::ArrayXd e = (logits.row(i).array() - m).exp();
        probs.row(i) = (e / e.sum()).matrix();
    }
    return probs;
}

struct Forward {
    std::vector<Matrix> activations;  // activations[0] = X, then hidden outputs
    Matrix logits;
    Matrix probs;

    // Adaptation feature space: output of the last hidden layer (the input
    // itself when the model is a bare linear classifier).
    const Matrix& features() const { return activations.back(); }
};

inline Forward forward(const ModelParams& params, const FeatureBatch& X) {
    params.validate();
    require(X.cols() == params.input_dim(), "forward: input width must match first layer");
    require_finite(X, "forward: input");
    Forward f;
    f.activations.push_back(X);
    for (std::size_t l = 0; l + 1 < params.weights.size(); ++l) {
        Matrix z = (f.activations.back() * params.weights[l]).rowwise() +
                   params.biases[l].transpose();
        f.activations.push_back(z.array().tanh().matrix());
    }
    f.logits = (f.activations.back() * params.weights.back()).rowwise() +
               params.biases.back().transpose();
    require_finite(f.logits, "forward: logits");
    f.probs = softmax_rows(f.logits);
    return f;
}

struct LossGrad {
    double loss = 0.0;
    Matrix dlogits;  // (probs - one_hot) / N
};

// Mean negative log-likelihood via log-sum-exp.
inline LossGrad softmax_loss_and_grad(const Matrix& logits, const Labels& y) {
    require(static_cast<Eigen::Index>(y.size()) == logits.rows(),
            "softmax_loss_and_grad: label count must match logits rows");
    const Eigen::Index n = logits.rows(), L = logits.cols();
    LossGrad out;
    out.dlogits = softmax_rows(logits);
    double loss = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const int yi = y[static_cast<std::size_t>(i)];
        require(yi >= 0 && yi < L, "softmax_loss_and_grad: label out of range");
        const double m = logits.row(i).maxCoeff();
        const double lse = m + std::log((logits.row(i).array() - m).exp().sum());
        loss += lse - logits(i, yi);
        out.dlogits(i, yi) -= 1.0;
    }
    out.loss = loss / static_cast<double>(n);
    out.dlogits /= static_cast<double>(n);
    return out;
}

struct ParamGrads {
    std::vector<Matrix> weights;
    std::vector<Vector> biases;
};

// Reverse-mode gradients. d_logits is the upstream gradient at the logits;
// d_features, when given, is an extra contribution injected at the feature
// tap (the MMD terms enter there) and is summed with the softmax path as in
// the joint objective. Passing nullptr takes the code path with no tap at
// all, so a zero-weight adaptation run reproduces a plain classifier run
// bit for bit.
inline ParamGrads backward(const ModelParams& params, const Forward& fwd, const Matrix& d_logits,
                           const Matrix* d_features = nullptr) {
    params.validate();
    const std::size_t k = params.weights.size();
    require(fwd.activations.size() == k, "backward: forward pass depth mismatch");
    require(d_logits.rows() == fwd.activations[0].rows() &&
                d_logits.cols() == params.num_classes(),
            "backward: d_logits shape mismatch");
    ParamGrads g;
    g.weights.resize(k);
    g.biases.resize(k);
    g.weights[k - 1] = fwd.activations[k - 1].transpose() * d_logits;
    g.biases[k - 1] = d_logits.colwise().sum().transpose();
    Matrix d_act = d_logits * params.weights[k - 1].transpose();
    if (d_features != nullptr) {
        require(d_features->rows() == fwd.activations[k - 1].rows() &&
                    d_features->cols() == fwd.activations[k - 1].cols(),
                "backward: d_features shape mismatch");
        d_act += *d_features;
    }
    for (std::size_t l = k - 1; l-- > 0;) {
        // d_act currently sits on activations[l + 1] = tanh(z)
        const Matrix dz =
            d_act.cwiseProduct((1.0 - fwd.activations[l + 1].array().square()).matrix());
        g.weights[l] = fwd.activations[l].transpose() * dz;
        g.biases[l] = dz.colwise().sum().transpose();
        d_act = dz * params.weights[l].transpose();
    }
    return g;
}

struct OptimizerState {
    std::vector<Matrix> velocity_w;
    std::vector<Vector> velocity_b;
    double learning_rate = 0.01;
    double momentum = 0.9;
    std::vector<double> layer_multipliers;  // per-layer learning-rate scale

    // Zero velocities; every layer at multiplier 1 except the classifier
    // (last) layer, which trains `classifier_multiplier` times faster.
    static OptimizerState create(const ModelParams& params, double learning_rate,
                                 double momentum, double classifier_multiplier = 1.0) {
        require(momentum >= 0.0 && momentum < 1.0, "OptimizerState: momentum must be in [0, 1)");
        require(learning_rate >= 0.0, "OptimizerState: learning rate must be >= 0");
        OptimizerState s;
        s.learning_rate = learning_rate;
        s.momentum = momentum;
        for (std::size_t l = 0; l < params.weights.size(); ++l) {
            s.velocity_w.push_back(Matrix::Zero(params.weights[l].rows(), params.weights[l].cols()));
            s.velocity_b.push_back(Vector::Zero(params.biases[l].size()));
            s.layer_multipliers.push_back(1.0);
        }
        s.layer_multipliers.back() = classifier_multiplier;
        return s;
    }
};

// v <- momentum * v + grad;  theta <- theta - lr * mult(layer) * v
inline void sgd_step(ModelParams& params, const ParamGrads& grads, OptimizerState& state) {
    require(grads.weights.size() == params.weights.size() &&
                state.velocity_w.size() == params.weights.size(),
            "sgd_step: layer count mismatch");
    for (std::size_t l = 0; l < params.weights.size(); ++l) {
        require_finite(grads.weights[l], "sgd_step: weight gradient");
        if (!grads.biases[l].allFinite()) throw NumericError("sgd_step: bias gradient non-finite");
        const double scale = state.learning_rate * state.layer_multipliers[l];
        state.velocity_w[l] = state.momentum * state.velocity_w[l] + grads.weights[l];
        state.velocity_b[l] = state.momentum * state.velocity_b[l] + grads.biases[l];
        params.weights[l] -= scale * state.velocity_w[l];
        params.biases[l] -= scale * state.velocity_b[l];
    }
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic "ECANMODL", u32 version, activation tag, layer
// count, then per layer the weight matrix (rows, cols, row-major doubles)
// and bias vector. Binary doubles round-trip exactly.

namespace detail {

template <typename T>
void write_pod(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw ParseError("checkpoint: truncated file");
    return v;
}

}  // namespace detail

inline void save_model(const ModelParams& params, const std::string& path) {
    params.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("save_model: cannot open '" + path + "' for writing");
    out.write("ECANMODL", 8);
    detail::write_pod<std::uint32_t>(out, 1u);
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(params.activation.size()));
    out.write(params.activation.data(), static_cast<std::streamsize>(params.activation.size()));
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(params.weights.size()));
    for (std::size_t l = 0; l < params.weights.size(); ++l) {
        const Matrix& w = params.weights[l];
        detail::write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(w.rows()));
        detail::write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(w.cols()));
        for (Eigen::Index i = 0; i < w.rows(); ++i)
            for (Eigen::Index j = 0; j < w.cols(); ++j) detail::write_pod<double>(out, w(i, j));
        detail::write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(params.biases[l].size()));
        for (Eigen::Index i = 0; i < params.biases[l].size(); ++i)
            detail::write_pod<double>(out, params.biases[l](i));
    }
    if (!out) throw Error("save_model: write failed for '" + path + "'");
}

inline ModelParams load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("load_model: cannot open '" + path + "'");
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, "ECANMODL", 8) != 0)
        throw ParseError("checkpoint: bad magic (not a model file)");
    const auto version = detail::read_pod<std::uint32_t>(in);
    if (version != 1u) throw ParseError("checkpoint: unsupported version");
    const auto tag_len = detail::read_pod<std::uint32_t>(in);
    if (tag_len > 64u) throw ParseError("checkpoint: implausible activation tag");
    std::string tag(tag_len, '\0');
    in.read(tag.data(), tag_len);
    if (!in) throw ParseError("checkpoint: truncated file");
    const auto layers = detail::read_pod<std::uint32_t>(in);
    if (layers == 0u || layers > 64u) throw ParseError("checkpoint: implausible layer count");
    ModelParams p;
    p.activation = tag;
    for (std::uint32_t l = 0; l < layers; ++l) {
        const auto rows = detail::read_pod<std::uint64_t>(in);
        const auto cols = detail::read_pod<std::uint64_t>(in);
        if (rows == 0 || cols == 0 || rows > (1u << 24) || cols > (1u << 24))
            throw ParseError("checkpoint: implausible layer shape");
        Matrix w(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        for (Eigen::Index i = 0; i < w.rows(); ++i)
            for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = detail::read_pod<double>(in);
        const auto blen = detail::read_pod<std::uint64_t>(in);
        if (blen != cols) throw ParseError("checkpoint: bias length mismatch");
        Vector b(static_cast<Eigen::Index>(blen));
        for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = detail::read_pod<double>(in);
        p.weights.push_back(std::move(w));
        p.biases.push_back(std::move(b));
    }
    p.validate();
    return p;
}

}  // namespace ecan
