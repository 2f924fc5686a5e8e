#include <doctest.h>

#include <kinoadapt/dataset_io.hpp>
#include <kinoadapt/fleet_sim.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

using namespace kinoadapt;

namespace {

Scalar position_l2(const std::vector<WorldState>& a, const std::vector<WorldState>& b) {
    REQUIRE(a.size() == b.size());
    Scalar sq = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const Scalar dx = a[i].x - b[i].x;
        const Scalar dy = a[i].y - b[i].y;
        const Scalar dz = a[i].z - b[i].z;
        sq += dx * dx + dy * dy + dz * dz;
    }
    return std::sqrt(sq);
}

std::vector<WorldState> run(const VehicleConfig& c, std::uint64_t seed, int H, Scalar dt) {
    const auto controls = excitation_controls(seed, H * dt, dt);
    return simulate_world(c, initial_state(controls), controls, dt);
}

}  // namespace

TEST_CASE("simulate_step: rest state with zero command is a fixed point") {
    const VehicleConfig c("v", 1.0, 0.75, 1.0);
    WorldState s;
    const WorldState n = simulate_step(s, Control(0, 0), c, 0.05);
    CHECK(n.x == 0.0);
    CHECK(n.y == 0.0);
    CHECK(n.z == 0.0);
    CHECK(n.roll == 0.0);
    CHECK(n.pitch == 0.0);
    CHECK(n.yaw == 0.0);
    CHECK(n.yaw_rate == 0.0);
    CHECK(n.v == 0.0);
}

TEST_CASE("simulate_step: straight line at constant speed") {
    const VehicleConfig c("v", 1.0, 0.75, 1.0);
    WorldState s;
    s.v = 5.0;
    const WorldState n = simulate_step(s, Control(0, 5.0), c, 0.05);
    const auto body = to_body_frame(s, n);
    CHECK(body[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(body[1] == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(body[2] == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(body[5] == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("simulate_step: rejects non-finite state") {
    const VehicleConfig c("v", 1.0, 0.75, 1.0);
    WorldState s;
    s.v = std::numeric_limits<Scalar>::quiet_NaN();
    CHECK_THROWS(simulate_step(s, Control(0, 0), c, 0.05));
    WorldState ok;
    CHECK_THROWS(simulate_step(ok, Control(0, 0), c, 0.2));
}

TEST_CASE("simulate_step: alpha_m alone separates trajectories") {
    const VehicleConfig light("a", 0.5, 0.75, 1.0);
    const VehicleConfig heavy("b", 4.0, 0.75, 1.0);
    const auto ta = run(light, 7, 100, 0.05);
    const auto tb = run(heavy, 7, 100, 0.05);
    CHECK(position_l2(ta, tb) > 0.1);
}

TEST_CASE("config sensitivity: each parameter alone moves the position trace") {
    const Scalar dt = 0.05;
    const int H = 100;
    SUBCASE("mu_f") {
        const auto ta = run(VehicleConfig("a", 1.0, 0.6, 1.0), 3, H, dt);
        const auto tb = run(VehicleConfig("b", 1.0, 0.9, 1.0), 3, H, dt);
        CHECK(position_l2(ta, tb) > 0.1);
    }
    SUBCASE("alpha_s") {
        const auto ta = run(VehicleConfig("a", 1.0, 0.75, 0.6), 3, H, dt);
        const auto tb = run(VehicleConfig("b", 1.0, 0.75, 1.8), 3, H, dt);
        CHECK(position_l2(ta, tb) > 0.1);
    }
    SUBCASE("alpha_m") {
        const auto ta = run(VehicleConfig("a", 0.5, 0.75, 1.0), 3, H, dt);
        const auto tb = run(VehicleConfig("b", 4.0, 0.75, 1.0), 3, H, dt);
        CHECK(position_l2(ta, tb) > 0.1);
    }
}

TEST_CASE("speed never exceeds the max commanded speed by more than 5%") {
    for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
        const auto controls = excitation_controls(seed, 5.0, 0.05);
        Scalar max_cmd = 0;
        for (const auto& u : controls) max_cmd = std::max(max_cmd, u.speed_cmd);
        for (const auto& c : {VehicleConfig("a", 0.5, 0.6, 0.6), VehicleConfig("b", 4.0, 0.9, 1.8)}) {
            const auto states = simulate_world(c, initial_state(controls), controls, 0.05);
            for (const auto& s : states) CHECK(s.v <= max_cmd * 1.05);
        }
    }
}

TEST_CASE("attitude stays within bounds during excitation") {
    for (std::uint64_t seed : {4ull, 5ull}) {
        for (const auto& c : {VehicleConfig("a", 4.0, 0.9, 0.6), VehicleConfig("b", 0.5, 0.6, 1.8)}) {
            for (const auto& s : run(c, seed, 200, 0.05)) {
                CHECK(std::abs(s.roll) < kPi / 2);
                CHECK(std::abs(s.pitch) < kPi / 2);
                CHECK(s.yaw <= kPi);
                CHECK(s.yaw > -kPi);
            }
        }
    }
}

TEST_CASE("speed_params_from_range") {
    const auto sp = speed_params_from_range(3.0, 9.0);
    CHECK(sp.v_center == doctest::Approx(6.0));
    CHECK(sp.amplitude == doctest::Approx(3.0));
}

TEST_CASE("excitation_controls: determinism and speed envelope") {
    const auto a = excitation_controls(42, 5.0, 0.05);
    const auto b = excitation_controls(42, 5.0, 0.05);
    REQUIRE(a.size() == 100);
    REQUIRE(b.size() == a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].steer == b[i].steer);
        CHECK(a[i].speed_cmd == b[i].speed_cmd);
    }
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        for (const auto& u : excitation_controls(seed, 10.0, 0.05)) {
            CHECK(u.speed_cmd >= 3.0);
            CHECK(u.speed_cmd <= 10.0);
            CHECK(std::abs(u.steer) <= 1.0);
        }
    }
}

TEST_CASE("to_body_frame: identity and quarter-turn") {
    WorldState s;
    s.roll = 0.1;
    s.pitch = -0.05;
    s.yaw = 0.7;
    const auto same = to_body_frame(s, s);
    CHECK(same[0] == 0.0);
    CHECK(same[1] == 0.0);
    CHECK(same[2] == 0.0);
    CHECK(same[3] == doctest::Approx(0.1));
    CHECK(same[4] == doctest::Approx(-0.05));
    CHECK(same[5] == 0.0);

    WorldState prev;
    prev.yaw = kPi / 2;
    WorldState next = prev;
    next.y = 1.0;
    const auto body = to_body_frame(prev, next);
    CHECK(body[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(body[1] == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("to_body_frame: invariant to global yaw rotation") {
    const VehicleConfig c("v", 2.0, 0.8, 1.2);
    const auto controls = excitation_controls(11, 5.0, 0.05);
    const auto states = simulate_world(c, initial_state(controls), controls, 0.05);

    std::mt19937_64 rng(99);
    std::uniform_real_distribution<Scalar> angle(-kPi, kPi);
    for (int trial = 0; trial < 5; ++trial) {
        const Scalar rho = angle(rng);
        const Scalar cr = std::cos(rho), sr = std::sin(rho);
        std::vector<WorldState> rotated = states;
        for (auto& s : rotated) {
            const Scalar x = s.x, y = s.y;
            s.x = cr * x - sr * y;
            s.y = sr * x + cr * y;
            s.yaw = wrap_angle(s.yaw + rho);
        }
        for (std::size_t t = 0; t + 1 < states.size(); ++t) {
            const auto a = to_body_frame(states[t], states[t + 1]);
            const auto b = to_body_frame(rotated[t], rotated[t + 1]);
            for (int i = 0; i < 6; ++i) CHECK(std::abs(a[i] - b[i]) <= 1e-9);
        }
    }
}

TEST_CASE("generate_trajectory: shape, determinism, reconstruction") {
    const VehicleConfig c("v", 1.5, 0.7, 0.9);
    const Trajectory t1 = generate_trajectory(c, 5, 100, 0.05);
    REQUIRE(t1.length() == 100);
    for (const auto& tr : t1.transitions) {
        for (Scalar v : tr.s_cur) CHECK(std::isfinite(v));
        for (Scalar v : tr.s_next) CHECK(std::isfinite(v));
        CHECK(std::abs(tr.s_next[5]) < kPi);
    }

    const Trajectory t2 = generate_trajectory(c, 5, 100, 0.05);
    for (std::size_t i = 0; i < t1.length(); ++i) {
        CHECK(t1.transitions[i].s_cur == t2.transitions[i].s_cur);
        CHECK(t1.transitions[i].s_next == t2.transitions[i].s_next);
    }

    // Accumulating body-frame displacements in the world frame recovers the
    // simulator's final position.
    const auto controls = excitation_controls(5, 5.0, 0.05);
    const auto states = simulate_world(c, initial_state(controls), controls, 0.05);
    Scalar x = states[0].x, y = states[0].y, z = states[0].z, yaw = states[0].yaw;
    for (const auto& tr : t1.transitions) {
        const Scalar cy = std::cos(yaw), sy = std::sin(yaw);
        x += cy * tr.s_next[0] - sy * tr.s_next[1];
        y += sy * tr.s_next[0] + cy * tr.s_next[1];
        z += tr.s_next[2];
        yaw = wrap_angle(yaw + tr.s_next[5]);
    }
    CHECK(std::abs(x - states.back().x) < 1e-6);
    CHECK(std::abs(y - states.back().y) < 1e-6);
    CHECK(std::abs(z - states.back().z) < 1e-6);

    // Chaining: s_cur of step t+1 matches the simulator state after step t.
    for (std::size_t t = 0; t + 1 < t1.length(); ++t) {
        const auto& cur = t1.transitions[t + 1].s_cur;
        CHECK(std::abs(cur[0] - t1.transitions[t].s_next[3]) <= 1e-9);
        CHECK(std::abs(cur[1] - t1.transitions[t].s_next[4]) <= 1e-9);
    }
}

TEST_CASE("generate_fleet: counts, defaults, duplicate rejection") {
    const auto grid = default_fleet_grid();
    REQUIRE(grid.size() == 8);
    for (std::size_t i = 0; i < grid.size(); ++i) {
        for (std::size_t j = i + 1; j < grid.size(); ++j) {
            const bool same = grid[i].alpha_m == grid[j].alpha_m &&
                              grid[i].mu_f == grid[j].mu_f &&
                              grid[i].alpha_s == grid[j].alpha_s;
            CHECK_FALSE(same);
        }
    }

    const auto fleet = generate_fleet(grid, 3, 17, 20, 0.05);
    REQUIRE(fleet.size() == 8);
    std::size_t total = 0;
    for (const auto& [id, trajs] : fleet) total += trajs.size();
    CHECK(total == 24);

    std::vector<VehicleConfig> dup = {VehicleConfig("x", 1, 0.7, 1), VehicleConfig("x", 2, 0.8, 1)};
    CHECK_THROWS(generate_fleet(dup, 1, 0));
}

TEST_CASE("fleet files: write, read back, manifest validation") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "ka_fleet_io_test";
    fs::remove_all(dir);

    std::vector<VehicleConfig> configs = {VehicleConfig("a", 0.5, 0.6, 0.6),
                                          VehicleConfig("b", 4.0, 0.9, 1.8)};
    const auto fleet = generate_fleet(configs, 2, 9, 30, 0.05);
    write_fleet(fleet, configs, 9, 0.05, 30, dir);

    const auto manifest = read_manifest(dir);
    CHECK(manifest.H == 30);
    CHECK(manifest.vehicles.size() == 2);
    const auto loaded = read_fleet(dir, manifest);
    REQUIRE(loaded.size() == 2);
    for (const auto& [id, trajs] : loaded) {
        const auto& orig = fleet.at(id);
        REQUIRE(trajs.size() == orig.size());
        for (std::size_t j = 0; j < trajs.size(); ++j) {
            REQUIRE(trajs[j].length() == orig[j].length());
            for (std::size_t t = 0; t < trajs[j].length(); ++t) {
                CHECK(trajs[j].transitions[t].s_cur == orig[j].transitions[t].s_cur);
                CHECK(trajs[j].transitions[t].s_next == orig[j].transitions[t].s_next);
                CHECK(trajs[j].transitions[t].u.steer == orig[j].transitions[t].u.steer);
            }
        }
    }

    {
        std::ofstream bad(dir / "manifest.json");
        bad << "{\"dt\": 0.05, \"vehicles\": []}";
    }
    CHECK_THROWS(read_manifest(dir));
    fs::remove_all(dir);
}

TEST_CASE("control and config bounds are enforced at construction") {
    CHECK_THROWS(Control(1.5, 3.0));
    CHECK_THROWS(Control(0.0, -1.0));
    CHECK_THROWS(VehicleConfig("x", 5.0, 0.75, 1.0));
    CHECK_THROWS(VehicleConfig("x", 1.0, 0.2, 1.0));
    CHECK_NOTHROW(VehicleConfig("x", 5.0, 0.2, 1.0, /*allow_out_of_range=*/true));
    CHECK_THROWS(VehicleConfig("", 1.0, 0.75, 1.0));
}
