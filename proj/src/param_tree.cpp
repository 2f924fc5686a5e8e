#include <kinoadapt/param_tree.hpp>

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>

namespace kinoadapt::nn {

void ParamTree::add(const std::string& name, Matrix value, bool trainable) {
    require(!name.empty(), "ParamTree::add: empty name");
    require(entries.find(name) == entries.end(), "ParamTree::add: duplicate name '" + name + "'");
    entries.emplace(name, Entry{std::move(value), trainable});
}

Matrix& ParamTree::at(const std::string& name) {
    auto it = entries.find(name);
    require(it != entries.end(), "ParamTree: unknown name '" + name + "'");
    return it->second.value;
}

const Matrix& ParamTree::at(const std::string& name) const {
    auto it = entries.find(name);
    require(it != entries.end(), "ParamTree: unknown name '" + name + "'");
    return it->second.value;
}

std::size_t ParamTree::total_size() const {
    std::size_t n = 0;
    for (const auto& [name, e] : entries) n += e.value.size();
    return n;
}

bool ParamTree::all_finite() const {
    for (const auto& [name, e] : entries) {
        if (!e.value.allFinite()) return false;
    }
    return true;
}

Vector ParamTree::flatten() const {
    Vector flat(total_size());
    Eigen::Index off = 0;
    for (const auto& [name, e] : entries) {
        flat.segment(off, e.value.size()) =
            Eigen::Map<const Vector>(e.value.data(), e.value.size());
        off += e.value.size();
    }
    return flat;
}

void ParamTree::unflatten(const Vector& flat) {
    require(flat.size() == static_cast<Eigen::Index>(total_size()),
            "ParamTree::unflatten: size mismatch");
    Eigen::Index off = 0;
    for (auto& [name, e] : entries) {
        Eigen::Map<Vector>(e.value.data(), e.value.size()) = flat.segment(off, e.value.size());
        off += e.value.size();
    }
}

GradTree zero_grads_like(const ParamTree& params) {
    GradTree g;
    for (const auto& [name, e] : params.entries) {
        if (e.trainable) g.emplace(name, Matrix::Zero(e.value.rows(), e.value.cols()));
    }
    return g;
}

void accumulate(GradTree& into, const GradTree& from) {
    for (const auto& [name, g] : from) {
        auto it = into.find(name);
        if (it == into.end()) {
            into.emplace(name, g);
        } else {
            require(it->second.rows() == g.rows() && it->second.cols() == g.cols(),
                    "accumulate: shape mismatch for '" + name + "'");
            it->second += g;
        }
    }
}

void scale_grads(GradTree& g, Scalar s) {
    for (auto& [name, m] : g) m *= s;
}

namespace {

void check_structure(const GradTree& grads, const ParamTree& reference) {
    std::size_t n_trainable = 0;
    for (const auto& [name, e] : reference.entries) {
        if (!e.trainable) continue;
        ++n_trainable;
        auto it = grads.find(name);
        require(it != grads.end(), "gradient tree: missing entry '" + name + "'");
        require(it->second.rows() == e.value.rows() && it->second.cols() == e.value.cols(),
                "gradient tree: shape mismatch for '" + name + "'");
    }
    require(grads.size() == n_trainable, "gradient tree: unknown extra entries");
}

}  // namespace

Vector flatten_grads(const GradTree& grads, const ParamTree& reference) {
    check_structure(grads, reference);
    std::size_t total = 0;
    for (const auto& [name, g] : grads) total += g.size();
    Vector flat(total);
    Eigen::Index off = 0;
    for (const auto& [name, g] : grads) {
        flat.segment(off, g.size()) = Eigen::Map<const Vector>(g.data(), g.size());
        off += g.size();
    }
    return flat;
}

GradTree unflatten_grads(const Vector& flat, const ParamTree& reference) {
    GradTree g = zero_grads_like(reference);
    Eigen::Index off = 0;
    for (auto& [name, m] : g) {
        require(off + m.size() <= flat.size(), "unflatten_grads: vector too short");
        Eigen::Map<Vector>(m.data(), m.size()) = flat.segment(off, m.size());
        off += m.size();
    }
    require(off == flat.size(), "unflatten_grads: vector too long");
    return g;
}

void adam_step(ParamTree& params, const GradTree& grads, Scalar lr, Scalar beta1,
               Scalar beta2, Scalar eps) {
    check_structure(grads, params);
    for (const auto& [name, g] : grads) {
        require(g.allFinite(), "adam_step: non-finite gradient for '" + name + "'");
    }
    params.adam_steps += 1;
    const Scalar bc1 = 1.0 - std::pow(beta1, static_cast<Scalar>(params.adam_steps));
    const Scalar bc2 = 1.0 - std::pow(beta2, static_cast<Scalar>(params.adam_steps));
    for (auto& [name, e] : params.entries) {
        if (!e.trainable) continue;
        const Matrix& g = grads.at(name);
        Matrix& m = params.adam_m.try_emplace(name, Matrix::Zero(g.rows(), g.cols()))
                        .first->second;
        Matrix& v = params.adam_v.try_emplace(name, Matrix::Zero(g.rows(), g.cols()))
                        .first->second;
        m = beta1 * m + (1.0 - beta1) * g;
        v = beta2 * v + (1.0 - beta2) * g.cwiseProduct(g);
        e.value.array() -=
            lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps);
        require(e.value.allFinite(), "adam_step: non-finite parameter '" + name + "' after update");
    }
}

void save_param_tree(const ParamTree& params, const std::filesystem::path& file) {
    nlohmann::ordered_json j;
    for (const auto& [name, e] : params.entries) {
        nlohmann::ordered_json je;
        je["shape"] = {e.value.rows(), e.value.cols()};
        je["trainable"] = e.trainable;
        std::vector<Scalar> values(e.value.data(), e.value.data() + e.value.size());
        je["values"] = values;
        j[name] = je;
    }
    std::ofstream out(file);
    require(out.good(), "save_param_tree: cannot open " + file.string());
    out << j.dump() << "\n";
}

ParamTree load_param_tree(const std::filesystem::path& file, const ParamTree* reference) {
    std::ifstream in(file);
    require(in.good(), "load_param_tree: cannot open " + file.string());
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    require(!j.is_discarded() && j.is_object(), "load_param_tree: invalid JSON in " + file.string());

    ParamTree out;
    for (const auto& [name, je] : j.items()) {
        require(je.contains("shape") && je["shape"].size() == 2 && je.contains("values"),
                "load_param_tree: malformed entry '" + name + "'");
        const Eigen::Index rows = je["shape"][0].get<Eigen::Index>();
        const Eigen::Index cols = je["shape"][1].get<Eigen::Index>();
        const auto& vals = je["values"];
        require(static_cast<Eigen::Index>(vals.size()) == rows * cols,
                "load_param_tree: value count mismatch for '" + name + "'");
        Matrix m(rows, cols);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = vals[i].get<Scalar>();
        if (reference) {
            auto it = reference->entries.find(name);
            require(it != reference->entries.end(),
                    "load_param_tree: unknown name '" + name + "'");
            require(it->second.value.rows() == rows && it->second.value.cols() == cols,
                    "load_param_tree: shape mismatch for '" + name + "'");
        }
        out.add(name, std::move(m), je.value("trainable", true));
    }
    if (reference) {
        for (const auto& [name, e] : reference->entries) {
            require(out.has(name), "load_param_tree: missing name '" + name + "'");
        }
    }
    return out;
}

}  // namespace kinoadapt::nn
