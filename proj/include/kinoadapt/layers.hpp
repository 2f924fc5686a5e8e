#pragma once

#include <kinoadapt/param_tree.hpp>
#include <kinoadapt/tape.hpp>

#include <map>
#include <string>

namespace kinoadapt::nn {

/// Binds ParamTree entries into tape leaves on demand and harvests leaf
/// gradients back into a GradTree after the reverse pass. Parameters that
/// never received gradient contribute zeros.
class Binder {
public:
    Binder(Tape& tape, ParamTree& params) : tape_(tape), params_(params) {}

    int leaf(const std::string& name);
    ParamTree& params() { return params_; }
    Tape& tape() { return tape_; }

    /// Accumulates d(loss)/d(leaf) for every bound trainable leaf.
    void harvest(GradTree& into) const;

private:
    Tape& tape_;
    ParamTree& params_;
    std::map<std::string, int> bound_;
};

// ---- parameter initialization ------------------------------------------

/// U(-a, a) with a = sqrt(1 / fan_in); bias zero.
void init_linear(ParamTree& p, const std::string& prefix, int in, int out,
                 std::mt19937_64& rng);
/// Zero weight and bias (AdaLN-zero style heads).
void init_linear_zero(ParamTree& p, const std::string& prefix, int in, int out);
void init_layer_norm(ParamTree& p, const std::string& prefix, int dim);
void init_batch_norm(ParamTree& p, const std::string& prefix, int dim);
void init_attention(ParamTree& p, const std::string& prefix, int dim, std::mt19937_64& rng);

// ---- forward ops over bound parameters -----------------------------------

int linear(Binder& b, const std::string& prefix, int x);
int layer_norm(Binder& b, const std::string& prefix, int x, Scalar eps = 1e-5);
int batch_norm(Binder& b, const std::string& prefix, int x, Mode mode,
               bool update_running = true, Scalar momentum = 0.1, Scalar eps = 1e-5);
/// Position-wise feed-forward: linear -> ReLU -> linear.
int ffn(Binder& b, const std::string& prefix, int x);
/// Multi-head self-attention over X (T x d) with learned Q/K/V/output
/// projections named prefix.{wq,bq,wk,bk,wv,bv,wo,bo}.
int attention(Binder& b, const std::string& prefix, int x, int n_heads);

/// Standard sinusoidal table, sin/cos interleaved over positions 0..L-1.
Matrix positional_embedding(int length, int dim);

}  // namespace kinoadapt::nn
