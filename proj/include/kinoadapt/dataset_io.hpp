#pragma once

#include <kinoadapt/fleet_sim.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace kinoadapt {

struct FleetManifest {
    struct Entry {
        VehicleConfig config;
        int n_trajectories = 0;
        std::uint64_t seed = 0;
        std::string file;
    };
    Scalar dt = 0;
    int H = 0;
    std::uint64_t seed = 0;
    std::vector<Entry> vehicles;
};

/// One JSONL file per vehicle plus manifest.json. Numbers are written with
/// 17 significant digits so reloads are exact.
FleetManifest write_fleet(const FleetDataset& fleet,
                          const std::vector<VehicleConfig>& configs,
                          std::uint64_t seed, Scalar dt, int H,
                          const std::filesystem::path& dir);

FleetManifest read_manifest(const std::filesystem::path& dir);

std::vector<Trajectory> read_trajectories(const std::filesystem::path& file);

/// Loads every vehicle listed in the manifest.
FleetDataset read_fleet(const std::filesystem::path& dir, const FleetManifest& manifest);

std::vector<Trajectory> read_trajectory_file(const std::filesystem::path& file);

void write_trajectories(const std::vector<Trajectory>& trajs, const VehicleConfig& config,
                        const std::filesystem::path& file);

}  // namespace kinoadapt
