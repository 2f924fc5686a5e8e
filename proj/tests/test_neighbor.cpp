#include <doctest.h>

#include <kinoadapt/neighbor_select.hpp>

#include <Eigen/QR>

#include <filesystem>
#include <random>

using namespace kinoadapt;

namespace {

Vector vec(std::initializer_list<Scalar> v) {
    Vector out(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (Scalar s : v) out(i++) = s;
    return out;
}

/// Unit vector at the given cosine distance from e1, rotated into the plane
/// spanned by e1 and the axis with the given index.
Vector at_cosine_distance(Scalar dist, int axis, int dim = 3) {
    Vector v = Vector::Zero(dim);
    const Scalar c = 1.0 - dist;
    v(0) = c;
    v(axis) = std::sqrt(1.0 - c * c);
    return v;
}

}  // namespace

TEST_CASE("compute_centroid: mean, singleton, permutation invariance") {
    const Vector a = vec({1, 0}), b = vec({0, 1});
    CHECK((compute_centroid({a, b}) - vec({0.5, 0.5})).norm() == 0.0);
    CHECK(compute_centroid({a}) == a);
    const Vector c = vec({0.3, -2});
    CHECK(compute_centroid({a, b, c}) == compute_centroid({c, a, b}));
    CHECK_THROWS(compute_centroid({}));
}

TEST_CASE("fit_pca: collinear points give one component with full variance") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<Scalar> scale(-5.0, 5.0);
    Vector dir = Vector::Zero(16);
    dir(2) = 3.0;
    dir(7) = -1.0;
    std::vector<Vector> pts;
    for (int i = 0; i < 20; ++i) pts.push_back(scale(rng) * dir + Vector::Ones(16));
    const PCAProjection p = fit_pca(pts);
    CHECK(p.k() == 1);
    CHECK(p.explained_variance_ratio[0] == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("fit_pca: equal variances in 16 dims need 15 components") {
    std::vector<Vector> pts;
    for (int i = 0; i < 16; ++i) {
        Vector v = Vector::Zero(16);
        v(i) = 1.0;
        pts.push_back(v);
        pts.push_back(-v);
    }
    const PCAProjection p = fit_pca(pts);
    CHECK(p.k() == 15);
}

TEST_CASE("fit_pca: known constructed spectrum recovers the exact k") {
    const int n = 40, d = 6;
    const Vector lambda = vec({5.0, 3.0, 1.2, 0.4, 0.25, 0.15});

    // Expected k by direct arithmetic on the spectrum.
    const Scalar total = lambda.sum();
    int expected_k = 0;
    Scalar cum = 0;
    for (int i = 0; i < d; ++i) {
        cum += lambda(i);
        ++expected_k;
        if (cum / total >= 0.9) break;
    }
    REQUIRE(expected_k == 3);

    std::mt19937_64 rng(11);
    std::normal_distribution<Scalar> gauss(0.0, 1.0);
    Matrix A(n, d);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) A(i, j) = gauss(rng);
    }
    // Column space orthogonal to the ones vector => exactly zero column means.
    const Vector ones = Vector::Ones(n);
    for (int j = 0; j < d; ++j) A.col(j) -= ones * (ones.dot(A.col(j)) / n);
    const Matrix U = Eigen::HouseholderQR<Matrix>(A).householderQ() * Matrix::Identity(n, d);

    Matrix B(d, d);
    for (int i = 0; i < d; ++i) {
        for (int j = 0; j < d; ++j) B(i, j) = gauss(rng);
    }
    const Matrix Q = Eigen::HouseholderQR<Matrix>(B).householderQ();

    const Matrix X = std::sqrt(static_cast<Scalar>(n - 1)) * U *
                     lambda.cwiseSqrt().asDiagonal() * Q.transpose();
    std::vector<Vector> pts;
    for (int i = 0; i < n; ++i) pts.push_back(X.row(i).transpose());

    const PCAProjection p = fit_pca(pts);
    CHECK(p.k() == expected_k);
    for (int i = 0; i < p.k(); ++i) {
        CHECK(p.explained_variance_ratio[i] ==
              doctest::Approx(lambda(i) / total).epsilon(1e-9));
    }

    // Retention and orthonormality contracts.
    Scalar retained = 0;
    for (Scalar r : p.explained_variance_ratio) retained += r;
    CHECK(retained >= 0.9);
    const Matrix gram = p.components * p.components.transpose();
    CHECK((gram - Matrix::Identity(p.k(), p.k())).cwiseAbs().maxCoeff() < 1e-9);

    // Minimality: dropping the last retained component falls below 0.9.
    CHECK(retained - p.explained_variance_ratio.back() < 0.9);
}

TEST_CASE("fit_pca: rejects rank-zero data") {
    std::vector<Vector> pts(5, vec({1.0, 2.0, 3.0}));
    CHECK_THROWS(fit_pca(pts));
    CHECK_THROWS(fit_pca({vec({1.0})}));
}

TEST_CASE("adaptive_threshold: hand-computed example") {
    // Unit vectors with pairwise cosine distances {0.1, 0.3, 0.2}.
    const Vector v1 = vec({1.0, 0.0, 0.0});
    const Vector v2 = vec({0.9, std::sqrt(1.0 - 0.81), 0.0});
    const Scalar y3 = (0.8 - 0.7 * 0.9) / std::sqrt(1.0 - 0.81);
    const Vector v3 = vec({0.7, y3, std::sqrt(1.0 - 0.49 - y3 * y3)});
    CHECK(cosine_distance(v1, v2) == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(cosine_distance(v1, v3) == doctest::Approx(0.3).epsilon(1e-12));
    CHECK(cosine_distance(v2, v3) == doctest::Approx(0.2).epsilon(1e-12));

    const Scalar eps = adaptive_threshold({v1, v2, v3});
    const Scalar expected = 0.2 + 2.0 * std::sqrt(0.02 / 3.0);
    CHECK(std::abs(eps - expected) <= 1e-9);
}

TEST_CASE("adaptive_threshold: degenerate cases") {
    const Vector v = vec({0.3, 0.4, 0.5});
    CHECK(adaptive_threshold({v, v, v}) == doctest::Approx(0.0).epsilon(1e-12));

    const Vector a = vec({1.0, 0.0});
    const Vector b = vec({0.6, 0.8});
    CHECK(adaptive_threshold({a, b}) == doctest::Approx(0.4).epsilon(1e-12));

    CHECK_THROWS(adaptive_threshold({a}));
    CHECK_THROWS(adaptive_threshold({a, vec({0.0, 0.0})}));
}

TEST_CASE("select_neighbors: inverse-square weighting keeps both members") {
    const Vector q = vec({1.0, 0.0, 0.0});
    std::vector<std::pair<std::string, Vector>> centroids = {
        {"near", at_cosine_distance(0.1, 1)}, {"far", at_cosine_distance(0.2, 2)}};
    const NeighborSet ns = select_neighbors(q, centroids, 0.5);
    REQUIRE_FALSE(ns.ood());
    REQUIRE(ns.members.size() == 2);
    CHECK(ns.members[0].vehicle_id == "near");
    CHECK(std::abs(ns.members[0].weight - 0.8) <= 1e-9);
    CHECK(std::abs(ns.members[1].weight - 0.2) <= 1e-9);
    CHECK(std::abs(ns.members[0].weight + ns.members[1].weight - 1.0) <= 1e-9);
}

TEST_CASE("select_neighbors: cumulative 0.9 truncation and re-normalization") {
    // Distances chosen so pre-truncation weights are exactly (0.8, 0.15, 0.05).
    const Scalar s = 0.1;
    const Vector q = vec({1.0, 0.0, 0.0, 0.0});
    std::vector<std::pair<std::string, Vector>> centroids = {
        {"a", at_cosine_distance(s / std::sqrt(0.80), 1, 4)},
        {"b", at_cosine_distance(s / std::sqrt(0.15), 2, 4)},
        {"c", at_cosine_distance(s / std::sqrt(0.05), 3, 4)}};
    const NeighborSet ns = select_neighbors(q, centroids, 1.0);
    REQUIRE_FALSE(ns.ood());
    REQUIRE(ns.members.size() == 2);
    CHECK(ns.members[0].vehicle_id == "a");
    CHECK(ns.members[1].vehicle_id == "b");
    CHECK(std::abs(ns.members[0].raw_weight - 0.80) <= 1e-9);
    CHECK(std::abs(ns.members[1].raw_weight - 0.15) <= 1e-9);
    CHECK(std::abs(ns.members[0].weight - 0.8 / 0.95) <= 1e-9);
    CHECK(std::abs(ns.members[1].weight - 0.15 / 0.95) <= 1e-9);
}

TEST_CASE("select_neighbors: out-of-distribution when nothing is within epsilon") {
    const Vector q = vec({1.0, 0.0, 0.0});
    std::vector<std::pair<std::string, Vector>> centroids = {
        {"a", at_cosine_distance(0.5, 1)}, {"b", at_cosine_distance(0.9, 2)}};
    const NeighborSet ns = select_neighbors(q, centroids, 0.2);
    CHECK(ns.ood());
    CHECK(ns.members.empty());
    CHECK(ns.all_distances.size() == 2);

    CHECK_THROWS(select_neighbors(Vector::Zero(3), centroids, 0.2));
}

TEST_CASE("select_neighbors: tie break by id and scaling invariance") {
    const Vector q = vec({1.0, 0.0, 0.0});
    std::vector<std::pair<std::string, Vector>> centroids = {
        {"zeta", at_cosine_distance(0.3, 1)}, {"alpha", at_cosine_distance(0.3, 2)}};
    const NeighborSet ns = select_neighbors(q, centroids, 1.0);
    REQUIRE(ns.members.size() == 2);
    CHECK(ns.members[0].vehicle_id == "alpha");

    // Cosine geometry: uniform positive scaling changes nothing.
    std::vector<std::pair<std::string, Vector>> scaled = centroids;
    for (auto& [id, v] : scaled) v *= 37.5;
    const NeighborSet ns2 = select_neighbors(q, scaled, 1.0);
    REQUIRE(ns2.members.size() == ns.members.size());
    for (std::size_t i = 0; i < ns.members.size(); ++i) {
        CHECK(ns2.members[i].vehicle_id == ns.members[i].vehicle_id);
        CHECK(ns2.members[i].weight == doctest::Approx(ns.members[i].weight).epsilon(1e-12));
    }
}

TEST_CASE("select_neighbors: truncation keeps the minimal 0.9 prefix (randomized)") {
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<Scalar> dist(0.02, 0.6);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 2 + static_cast<int>(rng() % 6);
        std::vector<std::pair<std::string, Vector>> centroids;
        for (int i = 0; i < n; ++i) {
            const int dim = 1 + (i % (n >= 8 ? 7 : 7));
            Vector v = Vector::Zero(8);
            const Scalar d = dist(rng);
            v(0) = 1.0 - d;
            v(1 + i % 7) = std::sqrt(1.0 - v(0) * v(0));
            centroids.emplace_back("v" + std::to_string(i), v);
            (void)dim;
        }
        const Vector q = vec({1, 0, 0, 0, 0, 0, 0, 0});
        const NeighborSet ns = select_neighbors(q, centroids, 1.0);
        REQUIRE_FALSE(ns.ood());
        Scalar cum = 0;
        for (std::size_t i = 0; i + 1 < ns.members.size(); ++i) {
            CHECK(ns.members[i].weight >= ns.members[i + 1].weight);
            CHECK(ns.members[i].distance <= ns.members[i + 1].distance);
            cum += ns.members[i].raw_weight;
            CHECK(cum < 0.9);  // prefix before the last member must be below 0.9
        }
        cum += ns.members.back().raw_weight;
        CHECK(cum >= 0.9 - 1e-12);
        Scalar total = 0;
        for (const auto& m : ns.members) total += m.weight;
        CHECK(std::abs(total - 1.0) <= 1e-9);
    }
}

TEST_CASE("neighbor report: round trip") {
    namespace fs = std::filesystem;
    const Vector q = vec({1.0, 0.0, 0.0});
    std::vector<std::pair<std::string, Vector>> centroids = {
        {"a", at_cosine_distance(0.1, 1)}, {"b", at_cosine_distance(0.25, 2)}};
    const NeighborSet ns = select_neighbors(q, centroids, 0.9);
    const fs::path file = fs::temp_directory_path() / "ka_neighbors_test.json";
    write_neighbor_report(ns, file);
    const NeighborSet back = read_neighbor_report(file);
    CHECK(back.ood() == ns.ood());
    CHECK(back.epsilon == ns.epsilon);
    REQUIRE(back.members.size() == ns.members.size());
    for (std::size_t i = 0; i < ns.members.size(); ++i) {
        CHECK(back.members[i].vehicle_id == ns.members[i].vehicle_id);
        CHECK(back.members[i].weight == ns.members[i].weight);
    }
    fs::remove(file);
}
