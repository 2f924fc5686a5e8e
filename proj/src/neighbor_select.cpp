#include <kinoadapt/neighbor_select.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>

namespace kinoadapt {

Vector PCAProjection::project(const Vector& x) const {
    require(x.size() == mean.size(), "PCAProjection::project: dimension mismatch");
    return components * (x - mean);
}

Vector compute_centroid(const std::vector<Vector>& embeddings) {
    require(!embeddings.empty(), "compute_centroid: empty embedding set");
    Vector mu = Vector::Zero(embeddings.front().size());
    for (const Vector& z : embeddings) {
        require(z.size() == mu.size(), "compute_centroid: dimension mismatch");
        mu += z;
    }
    return mu / static_cast<Scalar>(embeddings.size());
}

PCAProjection fit_pca(const std::vector<Vector>& embeddings, Scalar retain) {
    require(embeddings.size() >= 2, "fit_pca: need at least two samples");
    const Eigen::Index n = static_cast<Eigen::Index>(embeddings.size());
    const Eigen::Index d = embeddings.front().size();
    Matrix X(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        require(embeddings[i].size() == d, "fit_pca: dimension mismatch");
        X.row(i) = embeddings[i].transpose();
    }
    const Vector mean = X.colwise().mean().transpose();
    X.rowwise() -= mean.transpose();
    const Matrix cov = X.transpose() * X / static_cast<Scalar>(n - 1);

    Eigen::SelfAdjointEigenSolver<Matrix> solver(cov);
    require(solver.info() == Eigen::Success, "fit_pca: eigendecomposition failed");
    // Eigenvalues come back ascending; walk them from the largest down.
    const Vector evals = solver.eigenvalues();
    const Matrix evecs = solver.eigenvectors();
    const Scalar total = evals.cwiseMax(0.0).sum();
    require(total > 0.0, "fit_pca: rank-zero data");

    PCAProjection p;
    p.mean = mean;
    Scalar cum = 0;
    std::vector<Eigen::Index> keep;
    for (Eigen::Index i = d - 1; i >= 0; --i) {
        keep.push_back(i);
        cum += std::max(evals(i), 0.0);
        if (cum / total >= retain) break;
    }
    p.components.resize(static_cast<Eigen::Index>(keep.size()), d);
    p.explained_variance_ratio.reserve(keep.size());
    for (std::size_t r = 0; r < keep.size(); ++r) {
        p.components.row(static_cast<Eigen::Index>(r)) = evecs.col(keep[r]).transpose();
        p.explained_variance_ratio.push_back(std::max(evals(keep[r]), 0.0) / total);
    }
    return p;
}

Scalar cosine_distance(const Vector& a, const Vector& b) {
    require(a.size() == b.size(), "cosine_distance: dimension mismatch");
    const Scalar na = a.norm(), nb = b.norm();
    require(na > 0.0 && nb > 0.0, "cosine_distance: zero-norm vector");
    return 1.0 - a.dot(b) / (na * nb);
}

Scalar adaptive_threshold(const std::vector<Vector>& centroids) {
    require(centroids.size() >= 2, "adaptive_threshold: need at least two centroids");
    std::vector<Scalar> dists;
    for (std::size_t i = 0; i < centroids.size(); ++i) {
        for (std::size_t j = i + 1; j < centroids.size(); ++j) {
            dists.push_back(cosine_distance(centroids[i], centroids[j]));
        }
    }
    Scalar mean = 0;
    for (Scalar d : dists) mean += d;
    mean /= static_cast<Scalar>(dists.size());
    Scalar var = 0;
    for (Scalar d : dists) var += (d - mean) * (d - mean);
    var /= static_cast<Scalar>(dists.size());  // population variance
    return mean + 2.0 * std::sqrt(var);
}

NeighborSet select_neighbors(const Vector& mu_new,
                             const std::vector<std::pair<std::string, Vector>>& centroids,
                             Scalar epsilon) {
    require(!centroids.empty(), "select_neighbors: empty centroid set");
    require(mu_new.norm() > 0.0, "select_neighbors: zero-norm query centroid");

    NeighborSet ns;
    ns.epsilon = epsilon;
    std::vector<NeighborSet::Member> candidates;
    for (const auto& [id, mu] : centroids) {
        const Scalar d = cosine_distance(mu_new, mu);
        ns.all_distances.emplace_back(id, d);
        if (d <= epsilon) candidates.push_back({id, d, 0, 0});
    }
    if (candidates.empty()) {
        ns.verdict = NeighborSet::Verdict::OutOfDistribution;
        return ns;
    }

    Scalar sum = 0;
    for (auto& m : candidates) {
        m.raw_weight = 1.0 / std::pow(std::max(m.distance, 1e-8), 2);
        sum += m.raw_weight;
    }
    for (auto& m : candidates) m.raw_weight /= sum;

    std::sort(candidates.begin(), candidates.end(), [](const auto& a, const auto& b) {
        if (a.raw_weight != b.raw_weight) return a.raw_weight > b.raw_weight;
        return a.vehicle_id < b.vehicle_id;
    });

    // Minimal prefix whose cumulative (pre-truncation) weight reaches 0.9.
    Scalar cum = 0;
    std::size_t kept = 0;
    for (; kept < candidates.size(); ++kept) {
        cum += candidates[kept].raw_weight;
        if (cum >= 0.9) {
            ++kept;
            break;
        }
    }
    candidates.resize(kept);

    Scalar kept_sum = 0;
    for (const auto& m : candidates) kept_sum += m.raw_weight;
    for (auto& m : candidates) m.weight = m.raw_weight / kept_sum;

    ns.verdict = NeighborSet::Verdict::Neighbors;
    ns.members = std::move(candidates);
    return ns;
}

void write_neighbor_report(const NeighborSet& ns, const std::filesystem::path& file) {
    nlohmann::ordered_json j;
    j["verdict"] = ns.ood() ? "out_of_distribution" : "neighbors";
    j["epsilon"] = ns.epsilon;
    j["members"] = nlohmann::ordered_json::array();
    for (const auto& m : ns.members) {
        nlohmann::ordered_json jm;
        jm["vehicle_id"] = m.vehicle_id;
        jm["distance"] = m.distance;
        jm["raw_weight"] = m.raw_weight;
        jm["weight"] = m.weight;
        j["members"].push_back(jm);
    }
    j["all_distances"] = nlohmann::ordered_json::array();
    for (const auto& [id, d] : ns.all_distances) {
        j["all_distances"].push_back({{"vehicle_id", id}, {"distance", d}});
    }
    std::ofstream out(file);
    require(out.good(), "write_neighbor_report: cannot open " + file.string());
    out << j.dump(2) << "\n";
}

NeighborSet read_neighbor_report(const std::filesystem::path& file) {
    std::ifstream in(file);
    require(in.good(), "read_neighbor_report: cannot open " + file.string());
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    require(!j.is_discarded(), "read_neighbor_report: invalid JSON");
    NeighborSet ns;
    ns.verdict = j.at("verdict").get<std::string>() == "neighbors"
                     ? NeighborSet::Verdict::Neighbors
                     : NeighborSet::Verdict::OutOfDistribution;
    ns.epsilon = j.at("epsilon").get<Scalar>();
    for (const auto& jm : j.at("members")) {
        NeighborSet::Member m;
        m.vehicle_id = jm.at("vehicle_id").get<std::string>();
        m.distance = jm.at("distance").get<Scalar>();
        m.raw_weight = jm.at("raw_weight").get<Scalar>();
        m.weight = jm.at("weight").get<Scalar>();
        ns.members.push_back(std::move(m));
    }
    if (j.contains("all_distances")) {
        for (const auto& jd : j["all_distances"]) {
            ns.all_distances.emplace_back(jd.at("vehicle_id").get<std::string>(),
                                          jd.at("distance").get<Scalar>());
        }
    }
    return ns;
}

}  // namespace kinoadapt
