#include <kinoadapt/kinodyn.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace kinoadapt {

using nn::Binder;
using nn::GradTree;
using nn::Mode;
using nn::ParamTree;
using nn::Tape;

void KinoHyper::validate() const {
    require(state_w1 > 0 && state_w2 > 0 && action_w1 > 0 && action_w2 > 0 &&
                head_w1 > 0 && head_w2 > 0,
            "KinoHyper: non-positive width");
    require(dropout >= 0 && dropout < 1, "KinoHyper: dropout out of range");
    require(t_pred > 0 && lr > 0 && steps > 0 && batch > 0, "KinoHyper: non-positive field");
}

ParamTree init_kinodyn(const KinoHyper& h, std::uint64_t seed) {
    h.validate();
    ParamTree p;
    std::mt19937_64 rng(seed);
    nn::init_linear(p, "state.l1", kStateDim, h.state_w1, rng);
    nn::init_layer_norm(p, "state.ln1", h.state_w1);
    nn::init_linear(p, "state.l2", h.state_w1, h.state_w2, rng);
    nn::init_layer_norm(p, "state.ln2", h.state_w2);
    nn::init_linear(p, "action.l1", kControlDim, h.action_w1, rng);
    nn::init_layer_norm(p, "action.ln1", h.action_w1);
    nn::init_linear(p, "action.l2", h.action_w1, h.action_w2, rng);
    nn::init_layer_norm(p, "action.ln2", h.action_w2);

    const int joint = h.state_w2 + h.action_w2;
    for (const char* head : {"trans", "rp"}) {
        const std::string prefix = head;
        nn::init_linear(p, prefix + ".l1", joint, h.head_w1, rng);
        nn::init_batch_norm(p, prefix + ".bn1", h.head_w1);
        nn::init_linear(p, prefix + ".l2", h.head_w1, h.head_w2, rng);
        nn::init_batch_norm(p, prefix + ".bn2", h.head_w2);
    }
    nn::init_linear(p, "trans.out", h.head_w2, 4, rng);  // [dx, dy, dz, dyaw]
    nn::init_linear(p, "rp.out", h.head_w2, 2, rng);     // [roll, pitch]
    return p;
}

namespace {

// Fixed standardization of the raw inputs. Without it the branch LayerNorm
// sees rows dominated by the speed component and the small attitude
// features lose resolution.
constexpr Scalar kStateCenter[kStateDim] = {0.0, 0.0, 0.0, 6.5};
constexpr Scalar kStateScale[kStateDim] = {0.3, 0.2, 1.0, 3.5};
constexpr Scalar kControlCenter[kControlDim] = {0.0, 6.5};
constexpr Scalar kControlScale[kControlDim] = {1.0, 3.5};

int standardize(Tape& t, int x, const Scalar* center, const Scalar* scale, int dim) {
    Matrix neg_center(1, dim), inv_scale(1, dim);
    for (int k = 0; k < dim; ++k) {
        neg_center(0, k) = -center[k] / scale[k];
        inv_scale(0, k) = 1.0 / scale[k];
    }
    return t.add_rowvec(t.mul_rowvec(x, t.constant(std::move(inv_scale))),
                        t.constant(std::move(neg_center)));
}

int branch_graph(Binder& b, const std::string& prefix, int x) {
    Tape& t = b.tape();
    int hgraph = t.tanh_op(nn::layer_norm(b, prefix + ".ln1", nn::linear(b, prefix + ".l1", x)));
    return t.tanh_op(nn::layer_norm(b, prefix + ".ln2", nn::linear(b, prefix + ".l2", hgraph)));
}

int head_graph(Binder& b, const KinoHyper& h, const std::string& prefix, int x, Mode mode,
               bool update_bn, std::mt19937_64& rng) {
    Tape& t = b.tape();
    int y = t.relu(nn::batch_norm(b, prefix + ".bn1", nn::linear(b, prefix + ".l1", x), mode,
                                  update_bn));
    y = t.dropout(y, h.dropout, mode, rng);
    y = t.relu(nn::batch_norm(b, prefix + ".bn2", nn::linear(b, prefix + ".l2", y), mode,
                              update_bn));
    y = t.dropout(y, h.dropout, mode, rng);
    return nn::linear(b, prefix + ".out", y);
}

}  // namespace

int kino_forward_graph(Binder& b, const KinoHyper& h, int s, int u, Mode mode,
                       bool update_bn, std::mt19937_64& dropout_rng) {
    Tape& t = b.tape();
    require(t.value(s).cols() == kStateDim, "kino_forward: state must have 4 columns");
    require(t.value(u).cols() == kControlDim, "kino_forward: control must have 2 columns");
    require(t.value(s).rows() == t.value(u).rows(), "kino_forward: batch size mismatch");
    require(t.value(s).allFinite() && t.value(u).allFinite(),
            "kino_forward: non-finite input");

    const int s_std = standardize(t, s, kStateCenter, kStateScale, kStateDim);
    const int u_std = standardize(t, u, kControlCenter, kControlScale, kControlDim);
    const int joint =
        t.concat_cols({branch_graph(b, "state", s_std), branch_graph(b, "action", u_std)});
    const int trans = head_graph(b, h, "trans", joint, mode, update_bn, dropout_rng);
    const int rp = head_graph(b, h, "rp", joint, mode, update_bn, dropout_rng);
    // Assemble [dx, dy, dz, roll, pitch, dyaw].
    return t.concat_cols({t.slice_cols(trans, 0, 3), rp, t.slice_cols(trans, 3, 1)});
}

Matrix kino_forward(const ParamTree& params, const KinoHyper& h, const Matrix& s,
                    const Matrix& u) {
    require(s.cols() == kStateDim && u.cols() == kControlDim && s.rows() == u.rows(),
            "kino_forward: bad input shapes");
    require(s.allFinite() && u.allFinite(), "kino_forward: non-finite input");

    auto standardize_plain = [](Matrix x, const Scalar* center, const Scalar* scale) {
        for (Eigen::Index k = 0; k < x.cols(); ++k) {
            x.col(k) = (x.col(k).array() - center[k]) / scale[k];
        }
        return x;
    };
    auto lin = [&](const std::string& prefix, const Matrix& x) -> Matrix {
        return (x * params.at(prefix + ".w")).rowwise() + params.at(prefix + ".b").row(0);
    };
    auto ln = [&](const std::string& prefix, const Matrix& x) -> Matrix {
        Matrix y(x.rows(), x.cols());
        const auto& gamma = params.at(prefix + ".gamma");
        const auto& beta = params.at(prefix + ".beta");
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
            const Scalar mu = x.row(r).mean();
            const Scalar var = (x.row(r).array() - mu).square().sum() / x.cols();
            y.row(r) = ((x.row(r).array() - mu) / std::sqrt(var + 1e-5)) *
                           gamma.row(0).array() +
                       beta.row(0).array();
        }
        return y;
    };
    auto bn = [&](const std::string& prefix, const Matrix& x) -> Matrix {
        const auto& gamma = params.at(prefix + ".gamma").row(0);
        const auto& beta = params.at(prefix + ".beta").row(0);
        const auto& rm = params.at(prefix + ".running_mean").row(0);
        const auto& rv = params.at(prefix + ".running_var").row(0);
        Matrix y = (x.rowwise() - rm).array().rowwise() /
                   (rv.array() + 1e-5).sqrt();
        return (y.array().rowwise() * gamma.array()).rowwise() + beta.array();
    };
    auto branch = [&](const std::string& prefix, const Matrix& x) -> Matrix {
        const Matrix h1 = ln(prefix + ".ln1", lin(prefix + ".l1", x)).array().tanh();
        return ln(prefix + ".ln2", lin(prefix + ".l2", h1)).array().tanh();
    };
    auto head = [&](const std::string& prefix, const Matrix& x) -> Matrix {
        Matrix y = bn(prefix + ".bn1", lin(prefix + ".l1", x)).cwiseMax(0.0);
        y = bn(prefix + ".bn2", lin(prefix + ".l2", y)).cwiseMax(0.0);
        return lin(prefix + ".out", y);
    };

    Matrix joint(s.rows(), params.at("state.l2.w").cols() + params.at("action.l2.w").cols());
    joint << branch("state", standardize_plain(s, kStateCenter, kStateScale)),
        branch("action", standardize_plain(u, kControlCenter, kControlScale));
    const Matrix trans = head("trans", joint);
    const Matrix rp = head("rp", joint);
    Matrix out(s.rows(), 6);
    out << trans.leftCols(3), rp, trans.col(3);
    return out;
}

RolloutBatch make_rollout_batch(const std::vector<WindowRef>& windows, int T) {
    require(!windows.empty(), "make_rollout_batch: empty window set");
    const int B = static_cast<int>(windows.size());
    RolloutBatch batch;
    batch.dt = windows.front().first->dt;
    batch.s0.resize(B, kStateDim);
    batch.controls.assign(T, Matrix(B, kControlDim));
    batch.targets.assign(T, Matrix(B, kNextStateDim));
    for (int w = 0; w < B; ++w) {
        const Trajectory& traj = *windows[w].first;
        const int start = windows[w].second;
        require(traj.dt == batch.dt, "make_rollout_batch: mixed dt");
        require(start >= 0 && start + T <= static_cast<int>(traj.length()),
                "make_rollout_batch: window exceeds trajectory length");
        for (int k = 0; k < kStateDim; ++k) batch.s0(w, k) = traj.transitions[start].s_cur[k];
        for (int step = 0; step < T; ++step) {
            const Transition& tr = traj.transitions[start + step];
            batch.controls[step](w, 0) = tr.u.steer;
            batch.controls[step](w, 1) = tr.u.speed_cmd;
            for (int k = 0; k < kNextStateDim; ++k) batch.targets[step](w, k) = tr.s_next[k];
        }
    }
    return batch;
}

int rollout_loss_graph(Binder& b, const KinoHyper& h, const RolloutBatch& batch, Mode mode,
                       bool update_bn, std::mt19937_64& dropout_rng) {
    Tape& t = b.tape();
    const int T = batch.horizon();
    int s = t.constant(batch.s0);
    int loss = t.constant(Matrix::Zero(1, 1));
    for (int step = 0; step < T; ++step) {
        const int u = t.constant(batch.controls[step]);
        const int pred = kino_forward_graph(b, h, s, u, mode, update_bn, dropout_rng);
        loss = t.add(loss, t.mse(pred, t.constant(batch.targets[step])));
        if (step + 1 < T) {
            // Next input [roll, pitch, dyaw/dt, dx/dt] from the model's own
            // prediction. The feedback is detached: the 1/dt factor compounds
            // across the horizon and blows up gradients when backpropagated
            // through the chain, so each step is trained given the previous
            // prediction as data.
            const Matrix& p = t.value(pred);
            Matrix next(p.rows(), kStateDim);
            next.col(0) = p.col(3);
            next.col(1) = p.col(4);
            next.col(2) = p.col(5) / batch.dt;
            next.col(3) = p.col(0) / batch.dt;
            s = t.constant(std::move(next));
        }
    }
    return t.scale(loss, 1.0 / static_cast<Scalar>(T));
}

std::vector<Eigen::Matrix<Scalar, 1, 6>> rollout_with(const Predictor& predict,
                                                      const Trajectory& traj, int start,
                                                      int T, Scalar dt) {
    require(T >= 1, "rollout: horizon must be >= 1");
    require(start >= 0 && start + T <= static_cast<int>(traj.length()),
            "rollout: window exceeds trajectory length");
    Matrix s(1, kStateDim);
    for (int k = 0; k < kStateDim; ++k) s(0, k) = traj.transitions[start].s_cur[k];

    std::vector<Eigen::Matrix<Scalar, 1, 6>> preds;
    preds.reserve(T);
    for (int step = 0; step < T; ++step) {
        Matrix u(1, kControlDim);
        u(0, 0) = traj.transitions[start + step].u.steer;
        u(0, 1) = traj.transitions[start + step].u.speed_cmd;
        const Matrix p = predict(s, u, step);
        require(p.rows() == 1 && p.cols() == 6, "rollout: predictor must return 1x6");
        preds.emplace_back(p.row(0));
        s(0, 0) = p(0, 3);
        s(0, 1) = p(0, 4);
        s(0, 2) = p(0, 5) / dt;
        s(0, 3) = p(0, 0) / dt;
    }
    return preds;
}

std::vector<Eigen::Matrix<Scalar, 1, 6>> rollout(const ParamTree& params, const KinoHyper& h,
                                                 const Trajectory& traj, int start, int T) {
    const auto predict = [&](const Matrix& s, const Matrix& u, int) {
        return kino_forward(params, h, s, u);
    };
    return rollout_with(predict, traj, start, T, traj.dt);
}

namespace {

std::vector<WindowRef> sample_windows(const std::vector<Trajectory>& dataset, int T,
                                      std::uint64_t seed, int max_windows) {
    std::vector<WindowRef> all;
    for (const Trajectory& traj : dataset) {
        const int H = static_cast<int>(traj.length());
        for (int s = 0; s + T <= H; s += T) all.emplace_back(&traj, s);
    }
    require(!all.empty(), "rollout_mse: no window fits the horizon");
    if (static_cast<int>(all.size()) > max_windows) {
        std::mt19937_64 rng(seed);
        std::shuffle(all.begin(), all.end(), rng);
        all.resize(max_windows);
    }
    return all;
}

}  // namespace

RolloutMse rollout_mse_with(const Predictor& predict, Scalar dt,
                            const std::vector<Trajectory>& dataset, int T_pred,
                            std::uint64_t seed, int max_windows) {
    require(!dataset.empty(), "rollout_mse: empty dataset");
    const auto windows = sample_windows(dataset, T_pred, seed, max_windows);

    std::vector<Scalar> per_window;
    per_window.reserve(windows.size());
    Vector per_dim = Vector::Zero(6);
    for (const auto& [traj, start] : windows) {
        const auto preds = rollout_with(predict, *traj, start, T_pred, dt);
        Scalar sq = 0;
        for (int step = 0; step < T_pred; ++step) {
            const Transition& tr = traj->transitions[start + step];
            for (int k = 0; k < 6; ++k) {
                const Scalar e = preds[step](0, k) - tr.s_next[k];
                sq += e * e;
                per_dim(k) += e * e;
            }
        }
        per_window.push_back(sq / (6.0 * T_pred));
    }
    RolloutMse out;
    out.n_windows = static_cast<long>(per_window.size());
    out.mse = std::accumulate(per_window.begin(), per_window.end(), 0.0) / out.n_windows;
    Scalar var = 0;
    for (Scalar v : per_window) var += (v - out.mse) * (v - out.mse);
    out.std_windows = std::sqrt(var / out.n_windows);
    out.per_dim = per_dim / static_cast<Scalar>(out.n_windows * T_pred);
    return out;
}

RolloutMse rollout_mse(const ParamTree& params, const KinoHyper& h,
                       const std::vector<Trajectory>& dataset, int T_pred,
                       std::uint64_t seed, int max_windows) {
    const auto predict = [&](const Matrix& s, const Matrix& u, int) {
        return kino_forward(params, h, s, u);
    };
    return rollout_mse_with(predict, dataset.front().dt, dataset, T_pred, seed, max_windows);
}

KinoTrainResult train_kinodyn(const std::vector<Trajectory>& dataset, const KinoHyper& h,
                              std::uint64_t seed) {
    h.validate();
    require(!dataset.empty(), "train_kinodyn: empty dataset");
    std::vector<WindowRef> pool;
    for (const Trajectory& traj : dataset) {
        const int H = static_cast<int>(traj.length());
        for (int s = 0; s + h.t_pred <= H; ++s) pool.emplace_back(&traj, s);
    }
    require(!pool.empty(), "train_kinodyn: trajectories shorter than the horizon");

    KinoTrainResult result;
    result.params = init_kinodyn(h, splitmix64(seed));
    std::mt19937_64 rng(splitmix64(seed ^ 0x5eedULL));
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);

    for (long step = 0; step < h.steps; ++step) {
        std::vector<WindowRef> windows;
        windows.reserve(h.batch);
        for (int i = 0; i < h.batch; ++i) windows.push_back(pool[pick(rng)]);
        const RolloutBatch batch = make_rollout_batch(windows, h.t_pred);

        Tape t;
        Binder b(t, result.params);
        const int loss = rollout_loss_graph(b, h, batch, Mode::Train, true, rng);
        result.loss_trace.push_back(t.value(loss)(0, 0));
        t.backward(loss);
        GradTree grads;
        b.harvest(grads);
        nn::adam_step(result.params, grads, h.lr);
    }
    return result;
}

void save_kinodyn(const ParamTree& params, const KinoHyper& h, Scalar dt,
                  const std::filesystem::path& prefix) {
    nn::save_param_tree(params, prefix.string() + ".params.json");
    nlohmann::ordered_json j;
    j["state_w1"] = h.state_w1;
    j["state_w2"] = h.state_w2;
    j["action_w1"] = h.action_w1;
    j["action_w2"] = h.action_w2;
    j["head_w1"] = h.head_w1;
    j["head_w2"] = h.head_w2;
    j["dropout"] = h.dropout;
    j["t_pred"] = h.t_pred;
    j["lr"] = h.lr;
    j["steps"] = h.steps;
    j["batch"] = h.batch;
    j["dt"] = dt;
    std::ofstream out(prefix.string() + ".meta.json");
    require(out.good(), "save_kinodyn: cannot open metadata file");
    out << j.dump(2) << "\n";
}

std::tuple<ParamTree, KinoHyper, Scalar> load_kinodyn(const std::filesystem::path& prefix) {
    std::ifstream in(prefix.string() + ".meta.json");
    require(in.good(), "load_kinodyn: cannot open " + prefix.string() + ".meta.json");
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    require(!j.is_discarded(), "load_kinodyn: invalid metadata JSON");
    KinoHyper h;
    h.state_w1 = j.at("state_w1").get<int>();
    h.state_w2 = j.at("state_w2").get<int>();
    h.action_w1 = j.at("action_w1").get<int>();
    h.action_w2 = j.at("action_w2").get<int>();
    h.head_w1 = j.at("head_w1").get<int>();
    h.head_w2 = j.at("head_w2").get<int>();
    h.dropout = j.at("dropout").get<Scalar>();
    h.t_pred = j.at("t_pred").get<int>();
    h.lr = j.at("lr").get<Scalar>();
    h.steps = j.at("steps").get<long>();
    h.batch = j.at("batch").get<int>();
    const Scalar dt = j.at("dt").get<Scalar>();
    h.validate();
    const ParamTree reference = init_kinodyn(h, 0);
    ParamTree params = nn::load_param_tree(prefix.string() + ".params.json", &reference);
    return {std::move(params), h, dt};
}

}  // namespace kinoadapt
