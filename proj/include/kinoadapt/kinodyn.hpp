#pragma once

#include <kinoadapt/layers.hpp>
#include <kinoadapt/types.hpp>

#include <filesystem>
#include <functional>
#include <vector>

namespace kinoadapt {

struct KinoHyper {
    int state_w1 = 8, state_w2 = 16;    // state branch widths
    int action_w1 = 8, action_w2 = 16;  // action branch widths
    int head_w1 = 32, head_w2 = 16;     // output head widths
    Scalar dropout = 0.0;
    int t_pred = 16;
    Scalar lr = 1e-3;
    long steps = 2000;
    int batch = 64;

    void validate() const;
};

nn::ParamTree init_kinodyn(const KinoHyper& h, std::uint64_t seed);

/// Forward graph for a batch: s (B x 4), u (B x 2) -> (B x 6) prediction
/// ordered [dx, dy, dz, roll_next, pitch_next, dyaw].
int kino_forward_graph(nn::Binder& b, const KinoHyper& h, int s, int u, nn::Mode mode,
                       bool update_bn, std::mt19937_64& dropout_rng);

/// Plain inference forward (running BN statistics, dropout off).
Matrix kino_forward(const nn::ParamTree& params, const KinoHyper& h, const Matrix& s,
                    const Matrix& u);

/// One rollout window: start state plus recorded controls and targets.
struct RolloutBatch {
    Matrix s0;                     // B x 4
    std::vector<Matrix> controls;  // t_pred entries of B x 2
    std::vector<Matrix> targets;   // t_pred entries of B x 6
    Scalar dt = 0;

    int size() const { return static_cast<int>(s0.rows()); }
    int horizon() const { return static_cast<int>(controls.size()); }
};

/// A window is (trajectory, start index).
using WindowRef = std::pair<const Trajectory*, int>;

RolloutBatch make_rollout_batch(const std::vector<WindowRef>& windows, int T);

/// Autoregressive rollout loss graph; the model's own predictions feed the
/// next state input as [roll, pitch, dyaw/dt, dx/dt].
int rollout_loss_graph(nn::Binder& b, const KinoHyper& h, const RolloutBatch& batch,
                       nn::Mode mode, bool update_bn, std::mt19937_64& dropout_rng);

/// Per-step predictor: (state B x 4, control B x 2, step) -> B x 6.
using Predictor = std::function<Matrix(const Matrix&, const Matrix&, int)>;

/// Inference rollout of one window with an arbitrary predictor.
std::vector<Eigen::Matrix<Scalar, 1, 6>> rollout_with(const Predictor& predict,
                                                      const Trajectory& traj, int start,
                                                      int T, Scalar dt);

std::vector<Eigen::Matrix<Scalar, 1, 6>> rollout(const nn::ParamTree& params,
                                                 const KinoHyper& h, const Trajectory& traj,
                                                 int start, int T);

struct RolloutMse {
    Scalar mse = 0;            // mean over windows of per-window MSE
    Scalar std_windows = 0;    // std of per-window MSE
    Vector per_dim;            // 6 per-dimension mean squared errors
    long n_windows = 0;
};

/// MSE between predicted and recorded next-state sequences over sampled
/// windows (up to max_windows, seed-driven without replacement).
RolloutMse rollout_mse(const nn::ParamTree& params, const KinoHyper& h,
                       const std::vector<Trajectory>& dataset, int T_pred,
                       std::uint64_t seed, int max_windows = 512);

/// Same sampling and metric, arbitrary predictor (oracle baselines).
RolloutMse rollout_mse_with(const Predictor& predict, Scalar dt,
                            const std::vector<Trajectory>& dataset, int T_pred,
                            std::uint64_t seed, int max_windows = 512);

struct KinoTrainResult {
    nn::ParamTree params;
    std::vector<Scalar> loss_trace;  // one entry per gradient step
};

/// Teacher-free rollout-MSE training on uniformly sampled windows.
KinoTrainResult train_kinodyn(const std::vector<Trajectory>& dataset, const KinoHyper& h,
                              std::uint64_t seed);

void save_kinodyn(const nn::ParamTree& params, const KinoHyper& h, Scalar dt,
                  const std::filesystem::path& prefix);
std::tuple<nn::ParamTree, KinoHyper, Scalar> load_kinodyn(const std::filesystem::path& prefix);

}  // namespace kinoadapt
