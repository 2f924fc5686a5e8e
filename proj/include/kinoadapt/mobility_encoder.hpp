#pragma once

#include <kinoadapt/fleet_sim.hpp>
#include <kinoadapt/layers.hpp>

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace kinoadapt {

using ConfigMap = std::map<std::string, VehicleConfig>;

struct EncoderHyper {
    int n_blocks = 4;
    int d = 16;
    int n_heads = 4;
    int window = 32;          // transition tokens per encoded window
    Scalar margin = 4.0;      // triplet margin
    Scalar adaln_scale = 0.5; // multiplies the modulation deltas
    Scalar cond_dropout = 0.1;
    Scalar lr = 1e-4;
    int batch = 128;
    long max_iters = 100000;
    int eval_every = 1000;
    int patience = 10;
    Scalar val_fraction = 0.1;
    int ffn_hidden = 64;
    int token_dim = kTokenDim;
    // When false the encoder has no conditioning pathway at all (the
    // trajectory-only variant): no config MLP, no null embedding, no
    // modulation head, and training uses the unconditional loss alone.
    bool conditioning = true;

    void validate() const;
};

/// Conditioning input for one encode: a physical configuration or the
/// learned null embedding.
struct Conditioning {
    std::optional<VehicleConfig> config;

    static Conditioning none() { return {}; }
    static Conditioning of(const VehicleConfig& c) { return {c}; }
    bool is_null() const { return !config.has_value(); }
};

/// Min-max normalization of the three configuration parameters to [0, 1],
/// clamped so out-of-range query vehicles stay encodable.
Eigen::RowVector3d normalize_config(const VehicleConfig& c);

nn::ParamTree init_encoder(const EncoderHyper& h, std::uint64_t seed);

/// Builds the encoder graph on an existing tape; returns the CLS row (1 x d).
int encode_graph(nn::Binder& b, const Matrix& window_tokens, const Conditioning& cond,
                 const EncoderHyper& h);

/// Inference embedding of one window (window x token_dim).
Vector encode(const Matrix& window_tokens, const Conditioning& cond,
              nn::ParamTree& params, const EncoderHyper& h);

/// Configuration embedding e_c (inference path through the config MLP).
Vector embed_config(const VehicleConfig& c, nn::ParamTree& params, const EncoderHyper& h);

Scalar triplet_loss(const Vector& za, const Vector& zp, const Vector& zn, Scalar delta);

/// Deterministic stride-covering window starts for a trajectory of length H.
std::vector<int> window_starts(int H, int L);

/// Tokens [s_cur, u, s_next] for the window starting at `start`.
Matrix window_tokens(const Trajectory& traj, int start, int L);

/// Embeds every stride window of every trajectory.
std::vector<Vector> embed_trajectories(const std::vector<Trajectory>& trajs,
                                       const Conditioning& cond, nn::ParamTree& params,
                                       const EncoderHyper& h);

// ---- triplet sampling -----------------------------------------------------

struct WindowSpec {
    std::string vehicle_id;
    int traj_index = 0;
    int start = 0;
};

struct TripletSample {
    WindowSpec anchor, positive, negative;
};

/// Anchor/positive from the same vehicle (distinct windows), negative from a
/// uniformly chosen different vehicle; contiguous random windows of length L.
std::vector<TripletSample> sample_triplets(const FleetDataset& fleet, int batch, int L,
                                           std::mt19937_64& rng);

// ---- training ---------------------------------------------------------------

struct SeparationStats {
    Scalar inter_centroid_mean = 0;
    Scalar intra_spread_mean = 0;
    Scalar score = 0;
};

SeparationStats separation_score(const std::map<std::string, std::vector<Vector>>& by_vehicle);

struct EncoderTrainLog {
    struct Row {
        long iter;
        Scalar loss_u;
        Scalar loss_c;
        Scalar separation;       // conditional validation separation
        Scalar separation_uncond;
    };
    std::vector<Row> rows;
    long best_iter = 0;
    Scalar best_separation = 0;
    long iters_run = 0;
    bool early_stopped = false;
};

struct TrainedEncoder {
    nn::ParamTree params;
    EncoderTrainLog log;
};

/// Train with the summed unconditional + conditional triplet losses
/// (unconditional alone when h.conditioning is false).
TrainedEncoder train_encoder(const FleetDataset& fleet, const ConfigMap& configs,
                             const EncoderHyper& h, std::uint64_t seed);

/// Validation split used by train_encoder: per vehicle, the trailing
/// val_fraction of trajectories (at least one).
std::map<std::string, std::vector<int>> validation_indices(const FleetDataset& fleet,
                                                           Scalar val_fraction);

/// Separation of the current parameters on the validation split.
SeparationStats evaluate_separation(const FleetDataset& fleet, const ConfigMap& configs,
                                    nn::ParamTree& params, const EncoderHyper& h,
                                    bool conditional);

// ---- checkpointing ----------------------------------------------------------

void save_encoder(const nn::ParamTree& params, const EncoderHyper& h,
                  const std::filesystem::path& prefix);
std::pair<nn::ParamTree, EncoderHyper> load_encoder(const std::filesystem::path& prefix);

}  // namespace kinoadapt
