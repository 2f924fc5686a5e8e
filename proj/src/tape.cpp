#include <kinoadapt/tape.hpp>

#include <cmath>

namespace kinoadapt::nn {

namespace {

void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    require(a.rows() == b.rows() && a.cols() == b.cols(),
            std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                std::to_string(b.cols()) + ")");
}

}  // namespace

int Tape::push(Matrix value, bool needs_grad, std::function<void()> back) {
    Node n;
    n.value = std::move(value);
    n.back = std::move(back);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

Matrix& Tape::grad_buf(int id) {
    Node& n = nodes_[id];
    if (!n.grad_alloc) {
        n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
        n.grad_alloc = true;
    }
    return n.grad;
}

const Matrix& Tape::grad(int id) const {
    const Node& n = nodes_[id];
    require(n.grad_alloc, "Tape::grad: no gradient recorded for node");
    return n.grad;
}

int Tape::constant(Matrix value) { return push(std::move(value), false); }

int Tape::param(const Matrix& value) { return push(value, true); }

int Tape::add(int a, int b) {
    check_same_shape(value(a), value(b), "add");
    const int out = push(value(a) + value(b), ng(a) || ng(b));
    nodes_[out].back = [this, a, b, out] {
        const Matrix& g = nodes_[out].grad;
        if (ng(a)) grad_buf(a) += g;
        if (ng(b)) grad_buf(b) += g;
    };
    return out;
}

int Tape::sub(int a, int b) {
    check_same_shape(value(a), value(b), "sub");
    const int out = push(value(a) - value(b), ng(a) || ng(b));
    nodes_[out].back = [this, a, b, out] {
        const Matrix& g = nodes_[out].grad;
        if (ng(a)) grad_buf(a) += g;
        if (ng(b)) grad_buf(b) -= g;
    };
    return out;
}

int Tape::hadamard(int a, int b) {
    check_same_shape(value(a), value(b), "hadamard");
    const int out = push(value(a).cwiseProduct(value(b)), ng(a) || ng(b));
    nodes_[out].back = [this, a, b, out] {
        const Matrix& g = nodes_[out].grad;
        if (ng(a)) grad_buf(a) += g.cwiseProduct(value(b));
        if (ng(b)) grad_buf(b) += g.cwiseProduct(value(a));
    };
    return out;
}

int Tape::scale(int a, Scalar s) {
    const int out = push(value(a) * s, ng(a));
    nodes_[out].back = [this, a, s, out] {
        if (ng(a)) grad_buf(a) += s * nodes_[out].grad;
    };
    return out;
}

int Tape::add_scalar(int a, Scalar s) {
    const int out = push(value(a).array() + s, ng(a));
    nodes_[out].back = [this, a, out] {
        if (ng(a)) grad_buf(a) += nodes_[out].grad;
    };
    return out;
}

int Tape::matmul(int a, int b) {
    require(value(a).cols() == value(b).rows(), "matmul: inner dimension mismatch (" +
                                                    std::to_string(value(a).cols()) + " vs " +
                                                    std::to_string(value(b).rows()) + ")");
    Matrix v;
    v.noalias() = value(a) * value(b);
    const int out = push(std::move(v), ng(a) || ng(b));
    nodes_[out].back = [this, a, b, out] {
        const Matrix& g = nodes_[out].grad;
        if (ng(a)) grad_buf(a).noalias() += g * value(b).transpose();
        if (ng(b)) grad_buf(b).noalias() += value(a).transpose() * g;
    };
    return out;
}

int Tape::transpose(int a) {
    const int out = push(value(a).transpose(), ng(a));
    nodes_[out].back = [this, a, out] {
        if (ng(a)) grad_buf(a) += nodes_[out].grad.transpose();
    };
    return out;
}

int Tape::tanh_op(int a) {
    const int out = push(value(a).array().tanh(), ng(a));
    nodes_[out].back = [this, a, out] {
        if (ng(a)) {
            grad_buf(a).array() +=
                nodes_[out].grad.array() * (1.0 - nodes_[out].value.array().square());
        }
    };
    return out;
}

int Tape::relu(int a) {
    const int out = push(value(a).cwiseMax(0.0), ng(a));
    nodes_[out].back = [this, a, out] {
        if (ng(a)) {
            grad_buf(a).array() +=
                nodes_[out].grad.array() * (value(a).array() > 0.0).cast<Scalar>();
        }
    };
    return out;
}

int Tape::softmax_rows(int a) {
    Matrix y = value(a);
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
        const Scalar mx = y.row(r).maxCoeff();
        y.row(r) = (y.row(r).array() - mx).exp();
        y.row(r) /= y.row(r).sum();
    }
    const int out = push(std::move(y), ng(a));
    nodes_[out].back = [this, a, out] {
        if (!ng(a)) return;
        const Matrix& y = nodes_[out].value;
        const Matrix& g = nodes_[out].grad;
        Matrix& da = grad_buf(a);
        for (Eigen::Index r = 0; r < y.rows(); ++r) {
            const Scalar dot = g.row(r).dot(y.row(r));
            da.row(r).array() += y.row(r).array() * (g.row(r).array() - dot);
        }
    };
    return out;
}

int Tape::add_rowvec(int a, int b) {
    require(value(b).rows() == 1 && value(b).cols() == value(a).cols(),
            "add_rowvec: b must be 1 x cols(a)");
    const int out = push(value(a).rowwise() + value(b).row(0), ng(a) || ng(b));
    nodes_[out].back = [this, a, b, out] {
        const Matrix& g = nodes_[out].grad;
        if (ng(a)) grad_buf(a) += g;
        if (ng(b)) grad_buf(b) += g.colwise().sum();
    };
    return out;
}

int Tape::mul_rowvec(int a, int b) {
    require(value(b).rows() == 1 && value(b).cols() == value(a).cols(),
            "mul_rowvec: b must be 1 x cols(a)");
    const int out =
        push(value(a).array().rowwise() * value(b).row(0).array(), ng(a) || ng(b));
    nodes_[out].back = [this, a, b, out] {
        const Matrix& g = nodes_[out].grad;
        if (ng(a)) grad_buf(a).array() += g.array().rowwise() * value(b).row(0).array();
        if (ng(b)) grad_buf(b) += g.cwiseProduct(value(a)).colwise().sum();
    };
    return out;
}

int Tape::slice_cols(int a, int col0, int ncols) {
    require(col0 >= 0 && col0 + ncols <= value(a).cols(), "slice_cols: out of range");
    const int out = push(value(a).middleCols(col0, ncols), ng(a));
    nodes_[out].back = [this, a, col0, ncols, out] {
        if (ng(a)) grad_buf(a).middleCols(col0, ncols) += nodes_[out].grad;
    };
    return out;
}

int Tape::slice_rows(int a, int row0, int nrows) {
    require(row0 >= 0 && row0 + nrows <= value(a).rows(), "slice_rows: out of range");
    const int out = push(value(a).middleRows(row0, nrows), ng(a));
    nodes_[out].back = [this, a, row0, nrows, out] {
        if (ng(a)) grad_buf(a).middleRows(row0, nrows) += nodes_[out].grad;
    };
    return out;
}

int Tape::concat_cols(const std::vector<int>& parts) {
    require(!parts.empty(), "concat_cols: empty");
    Eigen::Index rows = value(parts[0]).rows(), cols = 0;
    bool any_grad = false;
    for (int p : parts) {
        require(value(p).rows() == rows, "concat_cols: row mismatch");
        cols += value(p).cols();
        any_grad = any_grad || ng(p);
    }
    Matrix v(rows, cols);
    Eigen::Index off = 0;
    for (int p : parts) {
        v.middleCols(off, value(p).cols()) = value(p);
        off += value(p).cols();
    }
    const int out = push(std::move(v), any_grad);
    nodes_[out].back = [this, parts, out] {
        const Matrix& g = nodes_[out].grad;
        Eigen::Index off = 0;
        for (int p : parts) {
            const Eigen::Index n = value(p).cols();
            if (ng(p)) grad_buf(p) += g.middleCols(off, n);
            off += n;
        }
    };
    return out;
}

int Tape::concat_rows(const std::vector<int>& parts) {
    require(!parts.empty(), "concat_rows: empty");
    Eigen::Index cols = value(parts[0]).cols(), rows = 0;
    bool any_grad = false;
    for (int p : parts) {
        require(value(p).cols() == cols, "concat_rows: column mismatch");
        rows += value(p).rows();
        any_grad = any_grad || ng(p);
    }
    Matrix v(rows, cols);
    Eigen::Index off = 0;
    for (int p : parts) {
        v.middleRows(off, value(p).rows()) = value(p);
        off += value(p).rows();
    }
    const int out = push(std::move(v), any_grad);
    nodes_[out].back = [this, parts, out] {
        const Matrix& g = nodes_[out].grad;
        Eigen::Index off = 0;
        for (int p : parts) {
            const Eigen::Index n = value(p).rows();
            if (ng(p)) grad_buf(p) += g.middleRows(off, n);
            off += n;
        }
    };
    return out;
}

int Tape::row(int a, int r) { return slice_rows(a, r, 1); }

int Tape::layer_norm(int x, int gamma, int beta, Scalar eps) {
    const Matrix& X = value(x);
    require(value(gamma).rows() == 1 && value(gamma).cols() == X.cols(),
            "layer_norm: gamma must be 1 x cols(x)");
    require(value(beta).rows() == 1 && value(beta).cols() == X.cols(),
            "layer_norm: beta must be 1 x cols(x)");
    const Eigen::Index C = X.cols();
    Matrix xhat(X.rows(), C);
    Vector inv(X.rows());
    for (Eigen::Index r = 0; r < X.rows(); ++r) {
        const Scalar mu = X.row(r).mean();
        const Scalar var = (X.row(r).array() - mu).square().sum() / static_cast<Scalar>(C);
        inv(r) = 1.0 / std::sqrt(var + eps);
        xhat.row(r) = (X.row(r).array() - mu) * inv(r);
    }
    Matrix y = (xhat.array().rowwise() * value(gamma).row(0).array()).rowwise() +
               value(beta).row(0).array();
    const int out = push(std::move(y), ng(x) || ng(gamma) || ng(beta));
    nodes_[out].back = [this, x, gamma, beta, out, xhat = std::move(xhat),
                        inv = std::move(inv)] {
        const Matrix& g = nodes_[out].grad;
        if (ng(gamma)) grad_buf(gamma) += g.cwiseProduct(xhat).colwise().sum();
        if (ng(beta)) grad_buf(beta) += g.colwise().sum();
        if (!ng(x)) return;
        const Eigen::Index C = xhat.cols();
        Matrix dxhat = g.array().rowwise() * value(gamma).row(0).array();
        Matrix& dx = grad_buf(x);
        for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
            const Scalar m1 = dxhat.row(r).mean();
            const Scalar m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).sum() /
                              static_cast<Scalar>(C);
            dx.row(r).array() +=
                inv(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
        }
    };
    return out;
}

int Tape::batch_norm(int x, int gamma, int beta, BatchNormState state, Mode mode,
                     bool update_running, Scalar momentum, Scalar eps) {
    const Matrix& X = value(x);
    const Eigen::Index R = X.rows(), C = X.cols();
    require(value(gamma).cols() == C && value(beta).cols() == C,
            "batch_norm: affine shape mismatch");
    require(state.running_mean && state.running_var, "batch_norm: missing running state");
    require(state.running_mean->cols() == C && state.running_var->cols() == C,
            "batch_norm: running state shape mismatch");

    Eigen::RowVectorXd mu(C), var(C);
    if (mode == Mode::Train) {
        mu = X.colwise().mean();
        var = (X.rowwise() - mu).array().square().colwise().sum() / static_cast<Scalar>(R);
        if (update_running) {
            state.running_mean->row(0) = (1.0 - momentum) * state.running_mean->row(0) +
                                         momentum * mu;
            state.running_var->row(0) = (1.0 - momentum) * state.running_var->row(0) +
                                        momentum * var;
        }
    } else {
        mu = state.running_mean->row(0);
        var = state.running_var->row(0);
    }
    Eigen::RowVectorXd inv = (var.array() + eps).rsqrt();
    Matrix xhat = (X.rowwise() - mu).array().rowwise() * inv.array();
    Matrix y = (xhat.array().rowwise() * value(gamma).row(0).array()).rowwise() +
               value(beta).row(0).array();
    const int out = push(std::move(y), ng(x) || ng(gamma) || ng(beta));
    const bool train_stats = (mode == Mode::Train);
    nodes_[out].back = [this, x, gamma, beta, out, train_stats, xhat = std::move(xhat),
                        inv = std::move(inv)] {
        const Matrix& g = nodes_[out].grad;
        if (ng(gamma)) grad_buf(gamma) += g.cwiseProduct(xhat).colwise().sum();
        if (ng(beta)) grad_buf(beta) += g.colwise().sum();
        if (!ng(x)) return;
        Matrix dxhat = g.array().rowwise() * value(gamma).row(0).array();
        if (!train_stats) {
            grad_buf(x).array() += dxhat.array().rowwise() * inv.array();
            return;
        }
        const Scalar n = static_cast<Scalar>(xhat.rows());
        const Eigen::RowVectorXd m1 = dxhat.colwise().sum() / n;
        const Eigen::RowVectorXd m2 = dxhat.cwiseProduct(xhat).colwise().sum() / n;
        const Matrix contrib = (((dxhat.array().rowwise() - m1.array()) -
                                 xhat.array().rowwise() * m2.array())
                                    .rowwise() *
                                inv.array())
                                   .matrix();
        grad_buf(x) += contrib;
    };
    return out;
}

int Tape::dropout(int x, Scalar p, Mode mode, std::mt19937_64& rng) {
    require(p >= 0.0 && p < 1.0, "dropout: p must be in [0, 1)");
    if (mode == Mode::Infer || p == 0.0) {
        const int out = push(value(x), ng(x));
        nodes_[out].back = [this, x, out] {
            if (ng(x)) grad_buf(x) += nodes_[out].grad;
        };
        return out;
    }
    std::bernoulli_distribution keep(1.0 - p);
    Matrix mask(value(x).rows(), value(x).cols());
    const Scalar scale = 1.0 / (1.0 - p);
    for (Eigen::Index c = 0; c < mask.cols(); ++c) {
        for (Eigen::Index r = 0; r < mask.rows(); ++r) {
            mask(r, c) = keep(rng) ? scale : 0.0;
        }
    }
    const int out = push(value(x).cwiseProduct(mask), ng(x));
    nodes_[out].back = [this, x, out, mask = std::move(mask)] {
        if (ng(x)) grad_buf(x) += nodes_[out].grad.cwiseProduct(mask);
    };
    return out;
}

int Tape::mean_all(int a) {
    const Scalar n = static_cast<Scalar>(value(a).size());
    Matrix v(1, 1);
    v(0, 0) = value(a).sum() / n;
    const int out = push(std::move(v), ng(a));
    nodes_[out].back = [this, a, n, out] {
        if (ng(a)) grad_buf(a).array() += nodes_[out].grad(0, 0) / n;
    };
    return out;
}

int Tape::sum_all(int a) {
    Matrix v(1, 1);
    v(0, 0) = value(a).sum();
    const int out = push(std::move(v), ng(a));
    nodes_[out].back = [this, a, out] {
        if (ng(a)) grad_buf(a).array() += nodes_[out].grad(0, 0);
    };
    return out;
}

int Tape::mse(int a, int b) {
    check_same_shape(value(a), value(b), "mse");
    const Scalar n = static_cast<Scalar>(value(a).size());
    Matrix v(1, 1);
    v(0, 0) = (value(a) - value(b)).squaredNorm() / n;
    const int out = push(std::move(v), ng(a) || ng(b));
    nodes_[out].back = [this, a, b, n, out] {
        const Scalar g = nodes_[out].grad(0, 0);
        const Matrix diff = value(a) - value(b);
        if (ng(a)) grad_buf(a) += (2.0 * g / n) * diff;
        if (ng(b)) grad_buf(b) -= (2.0 * g / n) * diff;
    };
    return out;
}

int Tape::l2_distance(int a, int b) {
    check_same_shape(value(a), value(b), "l2_distance");
    Matrix v(1, 1);
    const Scalar d = (value(a) - value(b)).norm();
    v(0, 0) = d;
    const int out = push(std::move(v), ng(a) || ng(b));
    nodes_[out].back = [this, a, b, d, out] {
        const Scalar g = nodes_[out].grad(0, 0);
        const Matrix dir = (value(a) - value(b)) / std::max(d, 1e-12);
        if (ng(a)) grad_buf(a) += g * dir;
        if (ng(b)) grad_buf(b) -= g * dir;
    };
    return out;
}

void Tape::backward(int loss) {
    require(value(loss).rows() == 1 && value(loss).cols() == 1,
            "backward: loss must be a 1x1 scalar");
    require(std::isfinite(value(loss)(0, 0)), "backward: non-finite loss");
    grad_buf(loss)(0, 0) = 1.0;
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
        Node& n = nodes_[i];
        if (n.needs_grad && n.grad_alloc && n.back) n.back();
    }
}

}  // namespace kinoadapt::nn
