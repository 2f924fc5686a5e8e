#pragma once

#include <kinoadapt/common.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace kinoadapt {

/// PCA fit on the training embeddings; new-vehicle centroids are projected
/// with the same transform.
struct PCAProjection {
    Vector mean;                  // d
    Matrix components;            // k x d, orthonormal rows
    std::vector<Scalar> explained_variance_ratio;  // per retained component

    int k() const { return static_cast<int>(components.rows()); }
    Vector project(const Vector& x) const;
};

Vector compute_centroid(const std::vector<Vector>& embeddings);

/// Eigendecomposition of the sample covariance; keeps the minimal number of
/// leading components whose cumulative explained variance reaches `retain`.
PCAProjection fit_pca(const std::vector<Vector>& embeddings, Scalar retain = 0.90);

Scalar cosine_distance(const Vector& a, const Vector& b);

/// epsilon = mean + 2 * population std of pairwise cosine distances.
Scalar adaptive_threshold(const std::vector<Vector>& centroids);

struct NeighborSet {
    enum class Verdict { Neighbors, OutOfDistribution };
    struct Member {
        std::string vehicle_id;
        Scalar distance = 0;    // cosine distance to the query centroid
        Scalar raw_weight = 0;  // pre-truncation normalized weight
        Scalar weight = 0;      // final (re-normalized) weight
    };
    Verdict verdict = Verdict::OutOfDistribution;
    std::vector<Member> members;  // sorted by descending weight
    Scalar epsilon = 0;
    /// All candidate distances (vehicle id, cosine distance), for diagnostics
    /// and out-of-distribution reporting.
    std::vector<std::pair<std::string, Scalar>> all_distances;

    bool ood() const { return verdict == Verdict::OutOfDistribution; }
};

/// Members within epsilon weighted by inverse squared cosine distance,
/// sorted descending (ties by id), truncated at cumulative weight 0.9 and
/// re-normalized. Empty candidate set within epsilon => out-of-distribution.
NeighborSet select_neighbors(const Vector& mu_new,
                             const std::vector<std::pair<std::string, Vector>>& centroids,
                             Scalar epsilon);

void write_neighbor_report(const NeighborSet& ns, const std::filesystem::path& file);
NeighborSet read_neighbor_report(const std::filesystem::path& file);

}  // namespace kinoadapt
