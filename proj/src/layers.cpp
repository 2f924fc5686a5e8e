#include <kinoadapt/layers.hpp>

#include <cmath>

namespace kinoadapt::nn {

int Binder::leaf(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    const int id = tape_.param(params_.at(name));
    bound_.emplace(name, id);
    return id;
}

void Binder::harvest(GradTree& into) const {
    for (const auto& [name, id] : bound_) {
        if (!params_.entries.at(name).trainable) continue;
        const Matrix& v = params_.at(name);
        Matrix g = tape_.has_grad(id) ? tape_.grad(id) : Matrix::Zero(v.rows(), v.cols());
        auto it = into.find(name);
        if (it == into.end()) {
            into.emplace(name, std::move(g));
        } else {
            it->second += g;
        }
    }
}

void init_linear(ParamTree& p, const std::string& prefix, int in, int out,
                 std::mt19937_64& rng) {
    const Scalar a = std::sqrt(1.0 / static_cast<Scalar>(in));
    std::uniform_real_distribution<Scalar> dist(-a, a);
    Matrix w(in, out);
    for (Eigen::Index c = 0; c < w.cols(); ++c) {
        for (Eigen::Index r = 0; r < w.rows(); ++r) w(r, c) = dist(rng);
    }
    p.add(prefix + ".w", std::move(w));
    p.add(prefix + ".b", Matrix::Zero(1, out));
}

void init_linear_zero(ParamTree& p, const std::string& prefix, int in, int out) {
    p.add(prefix + ".w", Matrix::Zero(in, out));
    p.add(prefix + ".b", Matrix::Zero(1, out));
}

void init_layer_norm(ParamTree& p, const std::string& prefix, int dim) {
    p.add(prefix + ".gamma", Matrix::Ones(1, dim));
    p.add(prefix + ".beta", Matrix::Zero(1, dim));
}

void init_batch_norm(ParamTree& p, const std::string& prefix, int dim) {
    p.add(prefix + ".gamma", Matrix::Ones(1, dim));
    p.add(prefix + ".beta", Matrix::Zero(1, dim));
    p.add(prefix + ".running_mean", Matrix::Zero(1, dim), /*trainable=*/false);
    p.add(prefix + ".running_var", Matrix::Ones(1, dim), /*trainable=*/false);
}

void init_attention(ParamTree& p, const std::string& prefix, int dim, std::mt19937_64& rng) {
    const Scalar a = std::sqrt(1.0 / static_cast<Scalar>(dim));
    std::uniform_real_distribution<Scalar> dist(-a, a);
    for (const char* name : {"wq", "wk", "wv", "wo"}) {
        Matrix w(dim, dim);
        for (Eigen::Index c = 0; c < w.cols(); ++c) {
            for (Eigen::Index r = 0; r < w.rows(); ++r) w(r, c) = dist(rng);
        }
        p.add(prefix + "." + name, std::move(w));
    }
    for (const char* name : {"bq", "bk", "bv", "bo"}) {
        p.add(prefix + "." + name, Matrix::Zero(1, dim));
    }
}

int linear(Binder& b, const std::string& prefix, int x) {
    Tape& t = b.tape();
    const int w = b.leaf(prefix + ".w");
    require(t.value(x).cols() == t.value(w).rows(),
            "linear '" + prefix + "': input width " + std::to_string(t.value(x).cols()) +
                " does not match weight rows " + std::to_string(t.value(w).rows()));
    return t.add_rowvec(t.matmul(x, w), b.leaf(prefix + ".b"));
}

int layer_norm(Binder& b, const std::string& prefix, int x, Scalar eps) {
    Tape& t = b.tape();
    return t.layer_norm(x, b.leaf(prefix + ".gamma"), b.leaf(prefix + ".beta"), eps);
}

int batch_norm(Binder& b, const std::string& prefix, int x, Mode mode, bool update_running,
               Scalar momentum, Scalar eps) {
    Tape& t = b.tape();
    BatchNormState state;
    state.running_mean = &b.params().at(prefix + ".running_mean");
    state.running_var = &b.params().at(prefix + ".running_var");
    return t.batch_norm(x, b.leaf(prefix + ".gamma"), b.leaf(prefix + ".beta"), state, mode,
                        update_running, momentum, eps);
}

int ffn(Binder& b, const std::string& prefix, int x) {
    Tape& t = b.tape();
    return linear(b, prefix + ".l2", t.relu(linear(b, prefix + ".l1", x)));
}

int attention(Binder& b, const std::string& prefix, int x, int n_heads) {
    Tape& t = b.tape();
    const Eigen::Index d = t.value(x).cols();
    require(d % n_heads == 0, "attention '" + prefix + "': dim not divisible by heads");
    const int dh = static_cast<int>(d) / n_heads;
    const Scalar inv_sqrt = 1.0 / std::sqrt(static_cast<Scalar>(dh));

    const int q = t.add_rowvec(t.matmul(x, b.leaf(prefix + ".wq")), b.leaf(prefix + ".bq"));
    const int k = t.add_rowvec(t.matmul(x, b.leaf(prefix + ".wk")), b.leaf(prefix + ".bk"));
    const int v = t.add_rowvec(t.matmul(x, b.leaf(prefix + ".wv")), b.leaf(prefix + ".bv"));

    std::vector<int> heads;
    heads.reserve(n_heads);
    for (int h = 0; h < n_heads; ++h) {
        const int qh = t.slice_cols(q, h * dh, dh);
        const int kh = t.slice_cols(k, h * dh, dh);
        const int vh = t.slice_cols(v, h * dh, dh);
        const int scores = t.scale(t.matmul(qh, t.transpose(kh)), inv_sqrt);
        heads.push_back(t.matmul(t.softmax_rows(scores), vh));
    }
    const int merged = n_heads == 1 ? heads[0] : t.concat_cols(heads);
    return t.add_rowvec(t.matmul(merged, b.leaf(prefix + ".wo")), b.leaf(prefix + ".bo"));
}

Matrix positional_embedding(int length, int dim) {
    Matrix pe = Matrix::Zero(length, dim);
    for (int pos = 0; pos < length; ++pos) {
        for (int i = 0; i < dim / 2; ++i) {
            const Scalar rate = std::pow(10000.0, -2.0 * i / static_cast<Scalar>(dim));
            pe(pos, 2 * i) = std::sin(pos * rate);
            if (2 * i + 1 < dim) pe(pos, 2 * i + 1) = std::cos(pos * rate);
        }
    }
    return pe;
}

}  // namespace kinoadapt::nn
