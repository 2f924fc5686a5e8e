#pragma once

#include <kinoadapt/types.hpp>

#include <cstdint>
#include <map>
#include <vector>

namespace kinoadapt {

/// Deterministic ground-truth dynamics: a planar dynamic bicycle model
/// augmented with second-order roll/pitch and a suspension heave term.
/// alpha_m sets the longitudinal time constant, mu_f saturates the lateral
/// (yaw) response, alpha_s shapes the attitude stiffness.
WorldState simulate_step(const WorldState& state, const Control& u,
                         const VehicleConfig& c, Scalar dt);

/// Center speed / amplitude giving the requested speed envelope.
struct SpeedParams {
    Scalar v_center;
    Scalar amplitude;
};
SpeedParams speed_params_from_range(Scalar v_min, Scalar v_max);

/// Sinusoidal excitation: steer(t) = sin(2 pi f_s t) with f_s ~ U(0.1, 0.5) Hz,
/// speed(t) = v_c + A sin(2 pi f_v t) with f_v ~ U(0.1, 2.5) Hz and the
/// envelope drawn so min speed ~ U(3, 4), max speed ~ U(8, 10) m/s.
std::vector<Control> excitation_controls(std::uint64_t seed, Scalar duration, Scalar dt);

/// [dx, dy, dz, roll_next, pitch_next, dyaw]: world displacement rotated by
/// -yaw_prev about the gravity axis; roll/pitch keep their world-frame values.
std::array<Scalar, 6> to_body_frame(const WorldState& prev, const WorldState& next);

/// World-frame rollout under a fixed control sequence (one step per control).
std::vector<WorldState> simulate_world(const VehicleConfig& c, const WorldState& start,
                                       const std::vector<Control>& controls, Scalar dt);

/// Initial state for excitation rollouts: at rest attitude, moving at the
/// first commanded speed so the envelope is respected from step 0.
WorldState initial_state(const std::vector<Control>& controls);

Trajectory generate_trajectory(const VehicleConfig& c, std::uint64_t seed, int H, Scalar dt);

using FleetDataset = std::map<std::string, std::vector<Trajectory>>;

std::vector<VehicleConfig> default_fleet_grid();

FleetDataset generate_fleet(const std::vector<VehicleConfig>& configs,
                            int trajectories_per_vehicle, std::uint64_t seed,
                            int H = 100, Scalar dt = 0.05);

/// Seed for vehicle `id` under fleet seed `seed` (stable across fleet order).
std::uint64_t vehicle_seed(std::uint64_t seed, const std::string& id);
std::uint64_t trajectory_seed(std::uint64_t vehicle_seed, int traj_index);

}  // namespace kinoadapt
