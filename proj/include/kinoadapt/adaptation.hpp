#pragma once

#include <kinoadapt/kinodyn.hpp>
#include <kinoadapt/mobility_encoder.hpp>
#include <kinoadapt/neighbor_select.hpp>

#include <optional>

namespace kinoadapt {

/// Conditional fleet embeddings reduced to per-vehicle centroids with a
/// shared PCA projection and the adaptive neighbor threshold.
struct KnowledgeBase {
    std::vector<std::pair<std::string, Vector>> centroids;            // full d
    std::vector<std::pair<std::string, Vector>> projected_centroids;  // PCA space
    PCAProjection pca;
    Scalar epsilon = 0;
};

KnowledgeBase build_knowledge_base(const FleetDataset& fleet, const ConfigMap& configs,
                                   nn::ParamTree& encoder, const EncoderHyper& eh);

void save_knowledge_base(const KnowledgeBase& kb, const std::filesystem::path& file);
KnowledgeBase load_knowledge_base(const std::filesystem::path& file);

/// Projected centroid of the query vehicle's windows (conditional when the
/// configuration is known, unconditional otherwise).
Vector query_centroid(const std::vector<Trajectory>& d_new,
                      const std::optional<VehicleConfig>& c_new, nn::ParamTree& encoder,
                      const EncoderHyper& eh, const PCAProjection& pca);

NeighborSet identify_neighbors(const KnowledgeBase& kb, const std::vector<Trajectory>& d_new,
                               const std::optional<VehicleConfig>& c_new,
                               nn::ParamTree& encoder, const EncoderHyper& eh);

/// Largest-remainder apportionment of `budget` by normalized weights.
std::vector<int> apportion(const std::vector<Scalar>& weights, int budget);

struct AdaptHyper {
    int budget = 400;                  // aggregated training windows
    int refresh_every = 100;           // constraint gradient refresh period
    int n_constraint_trajectories = 3;
    int n_new_trajectories = 3;        // default size of the new-vehicle dataset
    KinoHyper kino;

    void validate() const;
};

/// Per-neighbor window subsets, counts proportional to the weights.
struct AggregatedData {
    std::vector<std::string> vehicle_ids;
    std::vector<std::vector<WindowRef>> windows;  // parallel to vehicle_ids
    std::vector<int> counts;
};

AggregatedData aggregate_datasets(const std::vector<std::string>& neighbor_ids,
                                  const std::vector<Scalar>& weights,
                                  const FleetDataset& datasets, int budget, int T,
                                  std::uint64_t seed);

/// Weighted sum of per-neighbor rollout losses.
int weighted_loss_graph(nn::Binder& b, const KinoHyper& h,
                        const std::vector<RolloutBatch>& batches,
                        const std::vector<Scalar>& weights, nn::Mode mode, bool update_bn,
                        std::mt19937_64& rng);

/// Single-constraint projection: returns g_train unless it conflicts with
/// g_con, in which case it is projected onto the nearest direction that does
/// not increase the constraint loss. Outputs the pre-projection dot product
/// when requested.
nn::GradTree project_gradient(const nn::GradTree& g_train, const nn::GradTree& g_con,
                              const nn::ParamTree& reference, Scalar* dot_out = nullptr);

struct AblationFlags {
    bool neighbor_identification = true;  // MN
    bool weighted_aggregation = true;     // WD
    bool weighted_loss = true;            // WL
    bool gradient_regulation = true;      // GR
};

struct AdaptationReport {
    NeighborSet neighbors;
    std::vector<std::string> plan_vehicle_ids;
    std::vector<int> plan_counts;
    int budget = 0;
    std::string data_note;
    std::vector<std::pair<long, Scalar>> loss_trace;  // subsampled (step, loss)
    long projection_activations = 0;
    Scalar min_constraint_dot = 0;  // min over steps of <g_applied, g_con>
    RolloutMse final_mse;
    bool has_final_mse = false;
};

struct AdaptOutcome {
    bool ood = false;
    nn::ParamTree theta;  // adapted parameters (valid when !ood)
    AdaptationReport report;
};

/// Full rapid-adaptation pipeline: neighbor identification from d_new,
/// weighted aggregation, weighted-loss training with gradient regulation
/// against d_new, fresh theta. Out-of-distribution queries return an OOD
/// outcome carrying every centroid distance and the threshold.
AdaptOutcome adapt(const FleetDataset& fleet, const KnowledgeBase& kb,
                   const std::vector<Trajectory>& d_new,
                   const std::optional<VehicleConfig>& c_new, nn::ParamTree& encoder,
                   const EncoderHyper& eh, const AdaptHyper& ah, std::uint64_t seed,
                   const std::vector<Trajectory>* eval_data = nullptr,
                   const AblationFlags& flags = {});

void write_adaptation_report(const AdaptationReport& report, const std::filesystem::path& file);

}  // namespace kinoadapt
