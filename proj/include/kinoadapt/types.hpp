#pragma once

#include <kinoadapt/common.hpp>

#include <array>
#include <string>
#include <vector>

namespace kinoadapt {

/// Physical descriptor of a vehicle: mass scaling, tire friction,
/// suspension stiffness scaling. These three numbers fully determine the
/// simulated dynamics and condition the mobility encoder.
struct VehicleConfig {
    std::string id;
    Scalar alpha_m = 1.0;  // chassis mass scaling ratio
    Scalar mu_f = 0.75;    // tire friction coefficient
    Scalar alpha_s = 1.0;  // suspension stiffness scaling ratio

    static constexpr Scalar kAlphaMLo = 0.5, kAlphaMHi = 4.0;
    static constexpr Scalar kMuFLo = 0.6, kMuFHi = 0.9;
    static constexpr Scalar kAlphaSLo = 0.6, kAlphaSHi = 1.8;

    VehicleConfig() = default;
    /// In-range constructor. Set allow_out_of_range when deliberately
    /// building an out-of-distribution test vehicle.
    VehicleConfig(std::string id_, Scalar am, Scalar mf, Scalar as,
                  bool allow_out_of_range = false);

    bool in_range() const;
    std::array<Scalar, 3> as_array() const { return {alpha_m, mu_f, alpha_s}; }
};

/// World-frame vehicle state. Roll/pitch rates are carried so the
/// second-order suspension response is a pure function of the state.
struct WorldState {
    Scalar x = 0, y = 0, z = 0;           // position [m]
    Scalar roll = 0, pitch = 0, yaw = 0;  // attitude [rad], yaw in (-pi, pi]
    Scalar yaw_rate = 0;                  // [rad/s]
    Scalar v = 0;                         // forward speed [m/s], >= 0
    Scalar roll_rate = 0, pitch_rate = 0;

    bool finite() const;
};

struct Control {
    Scalar steer = 0;      // dimensionless, in [-1, 1]
    Scalar speed_cmd = 0;  // [m/s], >= 0

    Control() = default;
    Control(Scalar s, Scalar sc);
};

/// One kinodynamics step in the gravity-aligned body frame at time t.
/// s_cur = [roll, pitch, yaw_rate, v]; s_next = [dx, dy, dz, roll_next,
/// pitch_next, dyaw] with (dx, dy, dz, dyaw) expressed in the body frame.
struct Transition {
    std::array<Scalar, 4> s_cur{};
    Control u;
    std::array<Scalar, 6> s_next{};
};

struct Trajectory {
    std::string vehicle_id;
    Scalar dt = 0;
    std::vector<Transition> transitions;

    std::size_t length() const { return transitions.size(); }
};

constexpr int kStateDim = 4;       // [roll, pitch, yaw_rate, v]
constexpr int kControlDim = 2;     // [steer, speed_cmd]
constexpr int kNextStateDim = 6;   // [dx, dy, dz, roll, pitch, dyaw]
constexpr int kTokenDim = kStateDim + kControlDim + kNextStateDim;  // 12

}  // namespace kinoadapt
