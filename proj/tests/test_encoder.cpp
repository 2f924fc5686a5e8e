#include <doctest.h>

#include <kinoadapt/mobility_encoder.hpp>

#include "gradcheck.hpp"

#include <filesystem>
#include <random>

using namespace kinoadapt;

namespace {

EncoderHyper tiny_hyper() {
    EncoderHyper h;
    h.n_blocks = 2;
    h.d = 8;
    h.n_heads = 2;
    h.window = 16;
    h.ffn_hidden = 16;
    h.batch = 16;
    h.max_iters = 80;
    h.eval_every = 20;
    h.patience = 10;
    h.lr = 1e-3;
    return h;
}

FleetDataset tiny_fleet(int trajs_per_vehicle = 12, int H = 40) {
    const std::vector<VehicleConfig> configs = {VehicleConfig("a", 0.5, 0.6, 0.6),
                                                VehicleConfig("b", 4.0, 0.9, 1.8)};
    return generate_fleet(configs, trajs_per_vehicle, 21, H, 0.05);
}

ConfigMap tiny_configs() {
    ConfigMap m;
    m.emplace("a", VehicleConfig("a", 0.5, 0.6, 0.6));
    m.emplace("b", VehicleConfig("b", 4.0, 0.9, 1.8));
    return m;
}

}  // namespace

TEST_CASE("normalize_config: range endpoints and clamping") {
    const auto lo = normalize_config(VehicleConfig("x", 0.5, 0.6, 0.6));
    CHECK(lo(0) == 0.0);
    CHECK(lo(1) == 0.0);
    CHECK(lo(2) == 0.0);
    const auto hi = normalize_config(VehicleConfig("x", 4.0, 0.9, 1.8));
    CHECK(hi(0) == 1.0);
    CHECK(hi(1) == 1.0);
    CHECK(hi(2) == 1.0);
    const auto ood = normalize_config(VehicleConfig("x", 12.0, 0.1, 1.0, true));
    CHECK(ood(0) == 1.0);
    CHECK(ood(1) == 0.0);
    CHECK(ood(2) == doctest::Approx((1.0 - 0.6) / 1.2));
}

TEST_CASE("embed_config: tanh range and dimension") {
    EncoderHyper h;
    auto params = init_encoder(h, 3);
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<Scalar> am(0.3, 5.0), mf(0.5, 1.0), as(0.4, 2.0);
    for (int i = 0; i < 10; ++i) {
        const VehicleConfig c("x", am(rng), mf(rng), as(rng), true);
        const Vector e = embed_config(c, params, h);
        REQUIRE(e.size() == h.d);
        for (int k = 0; k < e.size(); ++k) {
            CHECK(e(k) > -1.0);
            CHECK(e(k) < 1.0);
        }
    }
}

TEST_CASE("encode: output dimension, determinism, zero-modulation collapse") {
    EncoderHyper h;
    auto params = init_encoder(h, 7);
    const VehicleConfig c("v", 2.0, 0.75, 1.2);
    const Trajectory traj = generate_trajectory(c, 3, 64, 0.05);
    const Matrix tokens = window_tokens(traj, 5, h.window);

    const Vector z1 = encode(tokens, Conditioning::of(c), params, h);
    REQUIRE(z1.size() == 16);
    const Vector z2 = encode(tokens, Conditioning::of(c), params, h);
    CHECK(z1 == z2);

    // adaln weights start at zero, so conditional == unconditional.
    const Vector zu = encode(tokens, Conditioning::none(), params, h);
    CHECK((z1 - zu).cwiseAbs().maxCoeff() == 0.0);

    CHECK_THROWS(encode(tokens.topRows(10), Conditioning::none(), params, h));
    CHECK_THROWS(encode(tokens.leftCols(8), Conditioning::none(), params, h));
}

TEST_CASE("triplet_loss: hand examples") {
    Vector za = Vector::Zero(4), zp = Vector::Zero(4), zn = Vector::Zero(4);
    zp(0) = 1.0;
    zn(0) = 3.0;
    CHECK(triplet_loss(za, zp, zn, 4.0) == doctest::Approx(2.0));

    zp.setZero();
    zn.setZero();
    zn(1) = 10.0;
    CHECK(triplet_loss(za, zp, zn, 4.0) == 0.0);

    zn.setZero();
    CHECK(triplet_loss(za, zp, zn, 4.0) == doctest::Approx(4.0));
}

TEST_CASE("sample_triplets: vehicle constraints, determinism, anchor frequency") {
    const auto grid = default_fleet_grid();
    const auto fleet = generate_fleet(grid, 4, 5, 40, 0.05);

    std::mt19937_64 rng1(9), rng2(9);
    const auto b1 = sample_triplets(fleet, 64, 16, rng1);
    const auto b2 = sample_triplets(fleet, 64, 16, rng2);
    REQUIRE(b1.size() == 64);
    for (std::size_t i = 0; i < b1.size(); ++i) {
        CHECK(b1[i].anchor.vehicle_id == b1[i].positive.vehicle_id);
        CHECK(b1[i].anchor.vehicle_id != b1[i].negative.vehicle_id);
        const bool same_window = b1[i].anchor.traj_index == b1[i].positive.traj_index &&
                                 b1[i].anchor.start == b1[i].positive.start;
        CHECK_FALSE(same_window);
        CHECK(b1[i].anchor.vehicle_id == b2[i].anchor.vehicle_id);
        CHECK(b1[i].anchor.start == b2[i].anchor.start);
        CHECK(b1[i].negative.start == b2[i].negative.start);
    }

    std::map<std::string, int> counts;
    std::mt19937_64 rng3(11);
    const int n = 10000;
    for (const auto& s : sample_triplets(fleet, n, 16, rng3)) counts[s.anchor.vehicle_id]++;
    for (const auto& [id, cnt] : counts) {
        const Scalar freq = static_cast<Scalar>(cnt) / n;
        CHECK(freq > 0.105);
        CHECK(freq < 0.145);
    }

    FleetDataset single;
    single.emplace("only", fleet.begin()->second);
    std::mt19937_64 rng4(1);
    CHECK_THROWS(sample_triplets(single, 4, 16, rng4));
}

TEST_CASE("gradcheck: composed encoder with dual-path triplet loss") {
    EncoderHyper h = tiny_hyper();
    h.window = 4;
    auto params = init_encoder(h, 13);
    const VehicleConfig ca("a", 1.0, 0.7, 0.9);
    const VehicleConfig cn("b", 3.0, 0.85, 1.5);
    const Trajectory ta = generate_trajectory(ca, 1, 12, 0.05);
    const Trajectory tn = generate_trajectory(cn, 2, 12, 0.05);
    const Matrix wa = window_tokens(ta, 0, h.window);
    const Matrix wp = window_tokens(ta, 4, h.window);
    const Matrix wn = window_tokens(tn, 2, h.window);

    auto fn = [&](nn::ParamTree& p, nn::GradTree* g) {
        nn::Tape t;
        nn::Binder b(t, p);
        const int zu_a = encode_graph(b, wa, Conditioning::none(), h);
        const int zu_p = encode_graph(b, wp, Conditioning::none(), h);
        const int zu_n = encode_graph(b, wn, Conditioning::none(), h);
        const int zc_a = encode_graph(b, wa, Conditioning::of(ca), h);
        const int zc_p = encode_graph(b, wp, Conditioning::of(ca), h);
        // Null conditioning on the negative to exercise the e-null path.
        const int zc_n = encode_graph(b, wn, Conditioning::none(), h);
        auto hinge = [&](int za, int zp, int zn) {
            const int gap = t.sub(t.l2_distance(za, zp), t.l2_distance(za, zn));
            return t.relu(t.add_scalar(gap, h.margin));
        };
        const int loss = t.add(hinge(zu_a, zu_p, zu_n), hinge(zc_a, zc_p, zc_n));
        if (g) {
            t.backward(loss);
            b.harvest(*g);
        }
        return t.value(loss)(0, 0);
    };
    CHECK(kinoadapt::testing::max_rel_grad_error(params, fn) < 1e-4);
}

TEST_CASE("train_encoder: improves separation, logs monotone, configs distinguishable") {
    const EncoderHyper h = tiny_hyper();
    const auto fleet = tiny_fleet();
    const auto configs = tiny_configs();

    auto init = init_encoder(h, splitmix64(5));
    const Scalar sep_before = evaluate_separation(fleet, configs, init, h, true).score;

    const TrainedEncoder trained = train_encoder(fleet, configs, h, 5);
    REQUIRE(!trained.log.rows.empty());
    long prev = 0;
    for (const auto& row : trained.log.rows) {
        CHECK(row.iter > prev);
        prev = row.iter;
        CHECK(std::isfinite(row.loss_u));
        CHECK(std::isfinite(row.loss_c));
        CHECK(std::isfinite(row.separation));
    }
    CHECK(trained.log.best_separation > sep_before);

    // After training, distinct configurations modulate the embedding.
    auto params = trained.params;
    const Trajectory probe =
        generate_trajectory(VehicleConfig("p", 1.0, 0.75, 1.0), 19, 40, 0.05);
    const Matrix tokens = window_tokens(probe, 3, h.window);
    const Vector z1 = encode(tokens, Conditioning::of(configs.at("a")), params, h);
    const Vector z2 = encode(tokens, Conditioning::of(configs.at("b")), params, h);
    CHECK((z1 - z2).norm() > 0.0);

    FleetDataset one;
    one.emplace("a", fleet.at("a"));
    CHECK_THROWS(train_encoder(one, configs, h, 5));
}

TEST_CASE("encoder checkpoint: reload reproduces identical embeddings") {
    namespace fs = std::filesystem;
    const EncoderHyper h = tiny_hyper();
    auto params = init_encoder(h, 31);
    const Trajectory traj =
        generate_trajectory(VehicleConfig("v", 2.0, 0.8, 1.1), 6, 40, 0.05);
    const Matrix tokens = window_tokens(traj, 0, h.window);
    const VehicleConfig c("v", 2.0, 0.8, 1.1);
    const Vector before = encode(tokens, Conditioning::of(c), params, h);

    const fs::path prefix = fs::temp_directory_path() / "ka_encoder_test";
    save_encoder(params, h, prefix);
    auto [loaded, h2] = load_encoder(prefix);
    CHECK(h2.d == h.d);
    CHECK(h2.window == h.window);
    const Vector after = encode(tokens, Conditioning::of(c), loaded, h2);
    CHECK(before == after);
    fs::remove(fs::path(prefix.string() + ".params.json"));
    fs::remove(fs::path(prefix.string() + ".meta.json"));
}

TEST_CASE("sample_triplets: invariant to fleet insertion order") {
    const auto grid = default_fleet_grid();
    const auto fleet = generate_fleet(grid, 4, 5, 40, 0.05);
    FleetDataset permuted;
    for (auto it = fleet.rbegin(); it != fleet.rend(); ++it) {
        permuted.emplace(it->first, it->second);
    }
    std::mt19937_64 r1(3), r2(3);
    const auto b1 = sample_triplets(fleet, 32, 16, r1);
    const auto b2 = sample_triplets(permuted, 32, 16, r2);
    for (std::size_t i = 0; i < b1.size(); ++i) {
        CHECK(b1[i].anchor.vehicle_id == b2[i].anchor.vehicle_id);
        CHECK(b1[i].anchor.traj_index == b2[i].anchor.traj_index);
        CHECK(b1[i].anchor.start == b2[i].anchor.start);
        CHECK(b1[i].negative.vehicle_id == b2[i].negative.vehicle_id);
    }
}
