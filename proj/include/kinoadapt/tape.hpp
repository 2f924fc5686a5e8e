#pragma once

#include <kinoadapt/common.hpp>

#include <functional>
#include <random>
#include <vector>

namespace kinoadapt::nn {

enum class Mode { Train, Infer };

/// Running statistics for one batch-normalization layer. Owned by the
/// model's ParamTree as non-trainable entries; the tape mutates them in
/// training mode when stat updates are enabled.
struct BatchNormState {
    Matrix* running_mean = nullptr;  // 1 x C
    Matrix* running_var = nullptr;   // 1 x C
};

/// Define-by-run reverse-mode tape over dense matrices. Values are computed
/// eagerly when an op is recorded; backward() replays the recorded closures
/// in reverse. Node handles are plain ints and stay valid for the lifetime
/// of the tape.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    int constant(Matrix value);        // no gradient
    int param(const Matrix& value);    // gradient leaf

    const Matrix& value(int id) const { return nodes_[id].value; }
    const Matrix& grad(int id) const;
    bool has_grad(int id) const { return nodes_[id].grad_alloc; }

    // --- elementwise / arithmetic ---
    int add(int a, int b);
    int sub(int a, int b);
    int hadamard(int a, int b);
    int scale(int a, Scalar s);
    int add_scalar(int a, Scalar s);
    int matmul(int a, int b);
    int transpose(int a);
    int tanh_op(int a);
    int relu(int a);
    int softmax_rows(int a);

    // --- broadcasting over rows (b is 1 x C) ---
    int add_rowvec(int a, int b);
    int mul_rowvec(int a, int b);

    // --- structure ---
    int slice_cols(int a, int col0, int ncols);
    int slice_rows(int a, int row0, int nrows);
    int concat_cols(const std::vector<int>& parts);
    int concat_rows(const std::vector<int>& parts);
    int row(int a, int r);

    // --- normalization / regularization ---
    int layer_norm(int x, int gamma, int beta, Scalar eps = 1e-5);
    int batch_norm(int x, int gamma, int beta, BatchNormState state, Mode mode,
                   bool update_running = true, Scalar momentum = 0.1, Scalar eps = 1e-5);
    int dropout(int x, Scalar p, Mode mode, std::mt19937_64& rng);

    // --- reductions (1 x 1 results) ---
    int mean_all(int a);
    int sum_all(int a);
    int mse(int a, int b);
    int l2_distance(int a, int b);

    /// Reverse pass from a scalar node; rejects non-finite losses.
    void backward(int loss);

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        std::function<void()> back;
        bool needs_grad = false;
        bool grad_alloc = false;
    };

    int push(Matrix value, bool needs_grad, std::function<void()> back = nullptr);
    Matrix& grad_buf(int id);
    bool ng(int a) const { return nodes_[a].needs_grad; }

    std::vector<Node> nodes_;
};

}  // namespace kinoadapt::nn
