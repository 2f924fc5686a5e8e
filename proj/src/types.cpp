#include <kinoadapt/types.hpp>

#include <cmath>

namespace kinoadapt {

VehicleConfig::VehicleConfig(std::string id_, Scalar am, Scalar mf, Scalar as,
                             bool allow_out_of_range)
    : id(std::move(id_)), alpha_m(am), mu_f(mf), alpha_s(as) {
    require(!id.empty(), "VehicleConfig: empty id");
    require(std::isfinite(am) && std::isfinite(mf) && std::isfinite(as),
            "VehicleConfig: non-finite parameter");
    if (!allow_out_of_range) {
        require(in_range(), "VehicleConfig '" + id + "': parameter out of range");
    }
}

bool VehicleConfig::in_range() const {
    return alpha_m >= kAlphaMLo && alpha_m <= kAlphaMHi && mu_f >= kMuFLo &&
           mu_f <= kMuFHi && alpha_s >= kAlphaSLo && alpha_s <= kAlphaSHi;
}

bool WorldState::finite() const {
    for (Scalar s : {x, y, z, roll, pitch, yaw, yaw_rate, v, roll_rate, pitch_rate}) {
        if (!std::isfinite(s)) return false;
    }
    return true;
}

Control::Control(Scalar s, Scalar sc) : steer(s), speed_cmd(sc) {
    require(s >= -1.0 && s <= 1.0, "Control: steer outside [-1, 1]");
    require(sc >= 0.0 && std::isfinite(sc), "Control: speed_cmd must be >= 0");
}

}  // namespace kinoadapt
