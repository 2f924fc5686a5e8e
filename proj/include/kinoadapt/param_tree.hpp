#pragma once

#include <kinoadapt/common.hpp>

#include <filesystem>
#include <map>
#include <string>

namespace kinoadapt::nn {

/// Named collection of dense arrays. Dotted names express the hierarchy
/// ("block0.attn.wq"). Non-trainable entries hold running statistics and
/// are skipped by the optimizer and by gradient flattening.
struct ParamTree {
    struct Entry {
        Matrix value;
        bool trainable = true;
    };

    std::map<std::string, Entry> entries;

    // Adam state, lazily initialized on the first step.
    std::map<std::string, Matrix> adam_m, adam_v;
    long adam_steps = 0;

    void add(const std::string& name, Matrix value, bool trainable = true);
    bool has(const std::string& name) const { return entries.count(name) != 0; }
    Matrix& at(const std::string& name);
    const Matrix& at(const std::string& name) const;

    std::size_t total_size() const;
    bool all_finite() const;

    /// Values of every entry concatenated in name order (column-major
    /// within each array).
    Vector flatten() const;
    void unflatten(const Vector& flat);
};

/// Gradients for the trainable entries of a ParamTree.
using GradTree = std::map<std::string, Matrix>;

GradTree zero_grads_like(const ParamTree& params);
void accumulate(GradTree& into, const GradTree& from);
void scale_grads(GradTree& g, Scalar s);

/// Trainable-entry flattening in name order; requires grads to exactly
/// cover the trainable entries of `reference`.
Vector flatten_grads(const GradTree& grads, const ParamTree& reference);
GradTree unflatten_grads(const Vector& flat, const ParamTree& reference);

/// Standard Adam with bias correction. Throws if the gradient structure
/// does not match or any gradient is non-finite.
void adam_step(ParamTree& params, const GradTree& grads, Scalar lr,
               Scalar beta1 = 0.9, Scalar beta2 = 0.999, Scalar eps = 1e-8);

/// JSON checkpoint: dotted name -> {shape, trainable, values}. Values are
/// reproduced exactly on reload.
void save_param_tree(const ParamTree& params, const std::filesystem::path& file);

/// Loads a checkpoint written by save_param_tree. When `reference` is given,
/// unknown or missing names (or shape mismatches) are rejected.
ParamTree load_param_tree(const std::filesystem::path& file,
                          const ParamTree* reference = nullptr);

}  // namespace kinoadapt::nn
