#pragma once

#include <kinoadapt/adaptation.hpp>
#include <kinoadapt/dataset_io.hpp>

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace kinoadapt {

/// One experiment description; every command is a pure function of
/// (RunConfig, input files, seed).
struct RunConfig {
    std::string experiment = "desk";
    std::uint64_t seed = 42;

    std::vector<VehicleConfig> fleet_configs;  // defaults to the 2x2x2 grid
    int trajectories_per_vehicle = 100;
    Scalar dt = 0.05;
    int H = 100;

    EncoderHyper encoder;
    AdaptHyper adaptation;

    std::vector<VehicleConfig> new_vehicles;
    int test_trajectories = 50;
    int from_scratch_trajectories = 100;
    std::vector<std::uint64_t> eval_seeds = {1, 2, 3};
    int ablation_vehicle_index = 1;

    void validate() const;
};

RunConfig default_run_config();
RunConfig load_run_config(const std::filesystem::path& file);
void save_run_config(const RunConfig& cfg, const std::filesystem::path& file);

// ---- evaluation report ------------------------------------------------------

struct EvalCell {
    std::string config_id;
    std::array<Scalar, 3> config{};  // [alpha_m, mu_f, alpha_s]
    std::string method;
    Scalar mse_mean = 0;          // mean over seeds
    Scalar std_windows_mean = 0;  // mean over seeds of the window std
    Scalar std_seeds = 0;         // std across seeds
    std::vector<Scalar> per_seed;
    std::vector<std::string> neighbor_ids;  // adapted rows: identified neighbors
};

struct EvalReport {
    std::string experiment;
    std::vector<std::uint64_t> seeds;
    std::vector<EvalCell> rows;
    std::vector<EvalCell> ablation_rows;
    std::vector<EvalCell> encoder_variant_rows;
};

/// Writes <stem>.json, <stem>.tsv and <stem>.txt.
void write_eval_report(const EvalReport& report, const std::filesystem::path& dir,
                       const std::string& stem);
EvalReport read_eval_report(const std::filesystem::path& json_file);

// ---- commands ---------------------------------------------------------------

/// Fleet generation into out_dir; refuses an existing non-empty directory
/// unless force.
FleetManifest cmd_gen_fleet(const RunConfig& cfg, const std::filesystem::path& out_dir,
                            bool force);

/// Trains the mobility encoder on a generated fleet directory and writes
/// checkpoint (<prefix>.params.json/.meta.json), plus the training log as
/// <prefix>.log.tsv. With conditioning_enabled=false this produces the
/// trajectory-only encoder variant.
TrainedEncoder cmd_train_encoder(const RunConfig& cfg, const std::filesystem::path& fleet_dir,
                                 const std::filesystem::path& out_prefix,
                                 bool conditioning_enabled = true);

/// Embeds the fleet and writes the knowledge base (centroids + PCA + epsilon).
KnowledgeBase cmd_embed(const RunConfig& cfg, const std::filesystem::path& fleet_dir,
                        const std::filesystem::path& encoder_prefix,
                        const std::filesystem::path& out_file);

/// Neighbor query for a trajectory file; returns the neighbor set and writes
/// the report.
NeighborSet cmd_select_neighbors(const RunConfig& cfg, const std::filesystem::path& kb_file,
                                 const std::filesystem::path& encoder_prefix,
                                 const std::filesystem::path& query_file,
                                 const std::optional<VehicleConfig>& c_new,
                                 const std::filesystem::path& out_file);

/// Rapid adaptation from a trajectory file; writes the adapted model
/// checkpoint and the adaptation report. Returns the outcome (ood flag set
/// on an out-of-distribution verdict; no model is written in that case).
AdaptOutcome cmd_adapt(const RunConfig& cfg, const std::filesystem::path& fleet_dir,
                       const std::filesystem::path& kb_file,
                       const std::filesystem::path& encoder_prefix,
                       const std::filesystem::path& query_file,
                       const std::optional<VehicleConfig>& c_new,
                       const std::filesystem::path& out_prefix,
                       const std::optional<std::filesystem::path>& eval_file);

/// Adaptation vs. baselines on every configured new vehicle: the adapted
/// model (3 trajectories), each identified neighbor's from-scratch model
/// transferred directly, and a from-scratch model on the full new-vehicle
/// dataset, all evaluated on a common held-out test set.
EvalReport cmd_adapt_eval(const RunConfig& cfg, const std::filesystem::path& fleet_dir,
                          const std::filesystem::path& encoder_prefix,
                          const std::filesystem::path& kb_file,
                          const std::filesystem::path& out_dir);

/// Adaptation-mechanism ablations (full, no neighbor identification, no
/// weighted aggregation, no weighted loss, no gradient regulation) plus the
/// encoder-design variants (conditional, unconditional query, simple
/// trajectory-only encoder) on the designated ablation vehicle.
EvalReport cmd_ablate(const RunConfig& cfg, const std::filesystem::path& fleet_dir,
                      const std::filesystem::path& encoder_prefix,
                      const std::filesystem::path& kb_file,
                      const std::optional<std::filesystem::path>& simple_encoder_prefix,
                      const std::filesystem::path& out_dir);

/// Renders a stored evaluation report back to .txt/.tsv next to the JSON.
void cmd_report(const std::filesystem::path& json_file);

// ---- helpers shared by commands and tests -----------------------------------

/// Deterministic new-vehicle datasets; the test stream depends only on the
/// master seed so every method and eval seed shares the same test set.
std::vector<Trajectory> make_new_vehicle_data(const RunConfig& cfg, const VehicleConfig& c,
                                              std::uint64_t eval_seed, int count,
                                              int stream);
constexpr int kStreamAdapt = 1;
constexpr int kStreamScratch = 2;
constexpr int kStreamTest = 3;

}  // namespace kinoadapt
