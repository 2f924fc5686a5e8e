#include <kinoadapt/fleet_sim.hpp>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

namespace kinoadapt {

namespace {

// Fixed geometry and response constants of the synthetic vehicle.
constexpr Scalar kWheelbase = 2.5;        // [m]
constexpr Scalar kMaxSteerAngle = 0.6;    // [rad] at steer = 1
constexpr Scalar kSpeedTau0 = 0.5;        // [s] per unit alpha_m
constexpr Scalar kYawTau0 = 0.12;         // [s] per unit alpha_m (yaw inertia)
constexpr Scalar kTractionFrac = 0.9;     // longitudinal share of mu*g
constexpr Scalar kRollGain = 0.30;        // [rad] per g of lateral accel
constexpr Scalar kPitchGain = 0.15;       // [rad] per g of longitudinal accel
constexpr Scalar kHeaveGain = 0.12;       // [m] per g of accel magnitude
constexpr Scalar kRollMax = 0.8;          // [rad] target clamp
constexpr Scalar kPitchMax = 0.6;        // [rad] target clamp
constexpr Scalar kAttitudeOmega0 = 30.0;  // [rad/s] natural frequency scale

struct Derivative {
    Scalar dx, dy, dyaw, dyaw_rate, dv;
};

// Planar bicycle subsystem; roll/pitch/heave are integrated separately in
// closed form.
Derivative planar_dynamics(const WorldState& s, const Control& u, const VehicleConfig& c) {
    const Scalar v = std::max(s.v, 0.0);

    const Scalar tau_v = kSpeedTau0 * c.alpha_m;
    const Scalar a_cap = kTractionFrac * c.mu_f * kGravity;
    Scalar a_long = (u.speed_cmd - v) / tau_v;
    a_long = std::clamp(a_long, -a_cap, a_cap);

    const Scalar delta = u.steer * kMaxSteerAngle;
    const Scalar r_kin = v * std::tan(delta) / kWheelbase;
    const Scalar r_max = c.mu_f * kGravity / std::max(v, 0.5);
    const Scalar r_tgt = std::clamp(r_kin, -r_max, r_max);
    const Scalar tau_yaw = kYawTau0 * c.alpha_m;

    Derivative d;
    d.dx = v * std::cos(s.yaw);
    d.dy = v * std::sin(s.yaw);
    d.dyaw = s.yaw_rate;
    d.dyaw_rate = (r_tgt - s.yaw_rate) / tau_yaw;
    d.dv = a_long;
    return d;
}

WorldState advance(const WorldState& s, const Derivative& d, Scalar h) {
    WorldState n = s;
    n.x += h * d.dx;
    n.y += h * d.dy;
    n.yaw += h * d.dyaw;
    n.yaw_rate += h * d.dyaw_rate;
    n.v += h * d.dv;
    return n;
}

/// Exact step of the critically damped system xdd = w^2 (x* - x) - 2 w xd
/// under a constant target.
void critically_damped_step(Scalar& x, Scalar& xd, Scalar target, Scalar omega, Scalar dt) {
    const Scalar a = x - target;
    const Scalar b = xd + omega * a;
    const Scalar decay = std::exp(-omega * dt);
    x = target + decay * (a + b * dt);
    xd = decay * (b - omega * (a + b * dt));
}

}  // namespace

WorldState simulate_step(const WorldState& state, const Control& u,
                         const VehicleConfig& c, Scalar dt) {
    require(dt > 0.0 && dt <= 0.1, "simulate_step: dt must be in (0, 0.1]");
    require(state.finite(), "simulate_step: non-finite input state");

    // Planar subsystem: RK4 with zero-order-hold controls.
    const Derivative k1 = planar_dynamics(state, u, c);
    const Derivative k2 = planar_dynamics(advance(state, k1, 0.5 * dt), u, c);
    const Derivative k3 = planar_dynamics(advance(state, k2, 0.5 * dt), u, c);
    const Derivative k4 = planar_dynamics(advance(state, k3, dt), u, c);

    WorldState n = state;
    auto mix = [&](Scalar a1, Scalar a2, Scalar a3, Scalar a4) {
        return dt / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
    };
    n.x += mix(k1.dx, k2.dx, k3.dx, k4.dx);
    n.y += mix(k1.dy, k2.dy, k3.dy, k4.dy);
    n.yaw = wrap_angle(n.yaw + mix(k1.dyaw, k2.dyaw, k3.dyaw, k4.dyaw));
    n.yaw_rate += mix(k1.dyaw_rate, k2.dyaw_rate, k3.dyaw_rate, k4.dyaw_rate);
    n.v = std::max(n.v + mix(k1.dv, k2.dv, k3.dv, k4.dv), 0.0);

    // Attitude and heave: load-transfer targets from the start-of-step
    // accelerations (zero-order hold), integrated in closed form so the
    // stiff configurations stay stable at any dt.
    const Scalar v0 = std::max(state.v, 0.0);
    const Scalar a_cap = kTractionFrac * c.mu_f * kGravity;
    const Scalar a_long =
        std::clamp((u.speed_cmd - v0) / (kSpeedTau0 * c.alpha_m), -a_cap, a_cap);
    const Scalar a_lat = v0 * state.yaw_rate;
    const Scalar load = c.alpha_m / c.alpha_s;
    const Scalar roll_tgt =
        std::clamp(kRollGain * load * a_lat / kGravity, -kRollMax, kRollMax);
    const Scalar pitch_tgt =
        std::clamp(-kPitchGain * load * a_long / kGravity, -kPitchMax, kPitchMax);
    const Scalar heave_tgt =
        -kHeaveGain * load * (std::abs(a_lat) + std::abs(a_long)) / kGravity;
    const Scalar omega_n = kAttitudeOmega0 * std::sqrt(c.alpha_s / c.alpha_m);

    critically_damped_step(n.roll, n.roll_rate, roll_tgt, omega_n, dt);
    critically_damped_step(n.pitch, n.pitch_rate, pitch_tgt, omega_n, dt);
    n.z = heave_tgt + (state.z - heave_tgt) * std::exp(-0.5 * omega_n * dt);
    return n;
}

SpeedParams speed_params_from_range(Scalar v_min, Scalar v_max) {
    require(v_max > v_min && v_min >= 0.0, "speed_params_from_range: invalid range");
    return {0.5 * (v_min + v_max), 0.5 * (v_max - v_min)};
}

std::vector<Control> excitation_controls(std::uint64_t seed, Scalar duration, Scalar dt) {
    require(dt > 0.0, "excitation_controls: dt must be positive");
    require(duration >= dt, "excitation_controls: duration must be >= dt");

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<Scalar> steer_freq(0.1, 0.5);
    std::uniform_real_distribution<Scalar> speed_freq(0.1, 2.5);
    std::uniform_real_distribution<Scalar> vmin_dist(3.0, 4.0);
    std::uniform_real_distribution<Scalar> vmax_dist(8.0, 10.0);

    const Scalar f_s = steer_freq(rng);
    const Scalar f_v = speed_freq(rng);
    const Scalar v_min = vmin_dist(rng);
    const Scalar v_max = vmax_dist(rng);
    const SpeedParams sp = speed_params_from_range(v_min, v_max);

    const int n = static_cast<int>(std::llround(duration / dt));
    std::vector<Control> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
        const Scalar t = i * dt;
        const Scalar steer = std::sin(2.0 * kPi * f_s * t);
        const Scalar speed = sp.v_center + sp.amplitude * std::sin(2.0 * kPi * f_v * t);
        out.emplace_back(steer, speed);
    }
    return out;
}

std::array<Scalar, 6> to_body_frame(const WorldState& prev, const WorldState& next) {
    require(prev.finite() && next.finite(), "to_body_frame: non-finite state");
    const Scalar c = std::cos(prev.yaw);
    const Scalar s = std::sin(prev.yaw);
    const Scalar wx = next.x - prev.x;
    const Scalar wy = next.y - prev.y;
    return {c * wx + s * wy, -s * wx + c * wy, next.z - prev.z,
            next.roll, next.pitch, wrap_angle(next.yaw - prev.yaw)};
}

std::vector<WorldState> simulate_world(const VehicleConfig& c, const WorldState& start,
                                       const std::vector<Control>& controls, Scalar dt) {
    std::vector<WorldState> states;
    states.reserve(controls.size() + 1);
    states.push_back(start);
    for (const Control& u : controls) {
        states.push_back(simulate_step(states.back(), u, c, dt));
    }
    return states;
}

WorldState initial_state(const std::vector<Control>& controls) {
    WorldState s;
    if (!controls.empty()) s.v = controls.front().speed_cmd;
    return s;
}

Trajectory generate_trajectory(const VehicleConfig& c, std::uint64_t seed, int H, Scalar dt) {
    require(H >= 2, "generate_trajectory: H must be >= 2");
    const std::vector<Control> controls = excitation_controls(seed, H * dt, dt);
    const std::vector<WorldState> states = simulate_world(c, initial_state(controls), controls, dt);

    Trajectory traj;
    traj.vehicle_id = c.id;
    traj.dt = dt;
    traj.transitions.reserve(H);
    for (int t = 0; t < H; ++t) {
        Transition tr;
        tr.s_cur = {states[t].roll, states[t].pitch, states[t].yaw_rate, states[t].v};
        tr.u = controls[t];
        tr.s_next = to_body_frame(states[t], states[t + 1]);
        traj.transitions.push_back(tr);
    }
    return traj;
}

std::vector<VehicleConfig> default_fleet_grid() {
    std::vector<VehicleConfig> configs;
    for (Scalar am : {0.5, 4.0}) {
        for (Scalar mf : {0.6, 0.9}) {
            for (Scalar as : {0.6, 1.8}) {
                char id[48];
                std::snprintf(id, sizeof(id), "m%.2f_f%.2f_s%.2f", am, mf, as);
                configs.emplace_back(id, am, mf, as);
            }
        }
    }
    return configs;
}

std::uint64_t vehicle_seed(std::uint64_t seed, const std::string& id) {
    return splitmix64(seed ^ fnv1a64(id));
}

std::uint64_t trajectory_seed(std::uint64_t vseed, int traj_index) {
    return splitmix64(vseed + 0x51ed270b * static_cast<std::uint64_t>(traj_index + 1));
}

FleetDataset generate_fleet(const std::vector<VehicleConfig>& configs,
                            int trajectories_per_vehicle, std::uint64_t seed,
                            int H, Scalar dt) {
    require(!configs.empty(), "generate_fleet: no configs");
    require(trajectories_per_vehicle > 0, "generate_fleet: trajectories_per_vehicle must be > 0");
    std::set<std::string> ids;
    for (const auto& c : configs) {
        require(ids.insert(c.id).second, "generate_fleet: duplicate vehicle id '" + c.id + "'");
    }

    FleetDataset fleet;
    for (const auto& c : configs) {
        const std::uint64_t vseed = vehicle_seed(seed, c.id);
        std::vector<Trajectory> trajs;
        trajs.reserve(trajectories_per_vehicle);
        for (int j = 0; j < trajectories_per_vehicle; ++j) {
            trajs.push_back(generate_trajectory(c, trajectory_seed(vseed, j), H, dt));
        }
        fleet.emplace(c.id, std::move(trajs));
    }
    return fleet;
}

}  // namespace kinoadapt
