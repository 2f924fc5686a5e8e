#include <kinoadapt/mobility_encoder.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>

namespace kinoadapt {

using nn::Binder;
using nn::GradTree;
using nn::ParamTree;
using nn::Tape;

void EncoderHyper::validate() const {
    require(n_blocks > 0 && d > 0 && n_heads > 0 && window > 0, "EncoderHyper: non-positive field");
    require(d % n_heads == 0, "EncoderHyper: d must be divisible by n_heads");
    require(margin > 0 && adaln_scale > 0 && lr > 0, "EncoderHyper: non-positive field");
    require(cond_dropout >= 0 && cond_dropout < 1, "EncoderHyper: cond_dropout out of range");
    require(batch > 0 && max_iters > 0 && eval_every > 0 && patience > 0,
            "EncoderHyper: non-positive field");
    require(val_fraction > 0 && val_fraction < 1, "EncoderHyper: val_fraction out of range");
    require(ffn_hidden > 0 && token_dim > 0, "EncoderHyper: non-positive field");
}

Eigen::RowVector3d normalize_config(const VehicleConfig& c) {
    auto norm = [](Scalar v, Scalar lo, Scalar hi) {
        return std::clamp((v - lo) / (hi - lo), 0.0, 1.0);
    };
    Eigen::RowVector3d out;
    out << norm(c.alpha_m, VehicleConfig::kAlphaMLo, VehicleConfig::kAlphaMHi),
        norm(c.mu_f, VehicleConfig::kMuFLo, VehicleConfig::kMuFHi),
        norm(c.alpha_s, VehicleConfig::kAlphaSLo, VehicleConfig::kAlphaSHi);
    return out;
}

ParamTree init_encoder(const EncoderHyper& h, std::uint64_t seed) {
    h.validate();
    ParamTree p;
    std::mt19937_64 rng(seed);
    nn::init_linear(p, "token_proj", h.token_dim, h.d, rng);

    const Scalar a = std::sqrt(1.0 / static_cast<Scalar>(h.d));
    std::uniform_real_distribution<Scalar> dist(-a, a);
    Matrix cls(1, h.d), null_embed(1, h.d);
    for (int i = 0; i < h.d; ++i) cls(0, i) = dist(rng);
    for (int i = 0; i < h.d; ++i) null_embed(0, i) = dist(rng);
    p.add("cls", std::move(cls));
    if (h.conditioning) {
        p.add("cfg.null", std::move(null_embed));
        nn::init_linear(p, "cfg.l1", 3, std::max(2, h.d / 2), rng);
        nn::init_linear(p, "cfg.l2", std::max(2, h.d / 2), h.d, rng);
    }

    for (int i = 0; i < h.n_blocks; ++i) {
        const std::string prefix = "block" + std::to_string(i);
        nn::init_attention(p, prefix + ".attn", h.d, rng);
        nn::init_layer_norm(p, prefix + ".ln1", h.d);
        nn::init_linear(p, prefix + ".ffn.l1", h.d, h.ffn_hidden, rng);
        nn::init_linear(p, prefix + ".ffn.l2", h.ffn_hidden, h.d, rng);
        nn::init_layer_norm(p, prefix + ".ln2", h.d);
    }
    // Zero-initialized modulation head: training starts from the
    // unmodulated encoder.
    if (h.conditioning) nn::init_linear_zero(p, "adaln", h.d, 4 * h.d);
    return p;
}

namespace {

int config_embedding_graph(Binder& b, const Conditioning& cond) {
    Tape& t = b.tape();
    if (cond.is_null()) return b.leaf("cfg.null");
    Matrix x(1, 3);
    x.row(0) = normalize_config(*cond.config);
    const int e = t.tanh_op(nn::linear(b, "cfg.l1", t.constant(std::move(x))));
    return t.tanh_op(nn::linear(b, "cfg.l2", e));
}

}  // namespace

int encode_graph(Binder& b, const Matrix& tokens, const Conditioning& cond,
                 const EncoderHyper& h) {
    Tape& t = b.tape();
    require(tokens.rows() == h.window, "encode: window length " +
                                           std::to_string(tokens.rows()) + " != " +
                                           std::to_string(h.window));
    require(tokens.cols() == h.token_dim, "encode: token width " +
                                              std::to_string(tokens.cols()) + " != " +
                                              std::to_string(h.token_dim));

    const int x = nn::linear(b, "token_proj", t.constant(tokens));
    int H = t.concat_rows({b.leaf("cls"), x});
    H = t.add(H, t.constant(nn::positional_embedding(h.window + 1, h.d)));

    auto plain_block = [&](int i, int x) {
        const std::string prefix = "block" + std::to_string(i);
        x = nn::layer_norm(b, prefix + ".ln1",
                           t.add(x, nn::attention(b, prefix + ".attn", x, h.n_heads)));
        return nn::layer_norm(b, prefix + ".ln2", t.add(x, nn::ffn(b, prefix + ".ffn", x)));
    };
    for (int i = 0; i + 1 < h.n_blocks; ++i) H = plain_block(i, H);

    if (!h.conditioning) return t.row(plain_block(h.n_blocks - 1, H), 0);

    // Final block only: AdaLN modulation of the attention and FFN inputs.
    const std::string prefix = "block" + std::to_string(h.n_blocks - 1);
    const int e_c = config_embedding_graph(b, cond);
    const int mods = t.scale(nn::linear(b, "adaln", e_c), h.adaln_scale);
    const int d_beta1 = t.slice_cols(mods, 0, h.d);
    const int d_gamma1 = t.slice_cols(mods, h.d, h.d);
    const int d_beta2 = t.slice_cols(mods, 2 * h.d, h.d);
    const int d_gamma2 = t.slice_cols(mods, 3 * h.d, h.d);

    int mod = t.add_rowvec(t.mul_rowvec(H, t.add_scalar(d_gamma1, 1.0)), d_beta1);
    H = nn::layer_norm(b, prefix + ".ln1",
                       t.add(H, nn::attention(b, prefix + ".attn", mod, h.n_heads)));
    mod = t.add_rowvec(t.mul_rowvec(H, t.add_scalar(d_gamma2, 1.0)), d_beta2);
    H = nn::layer_norm(b, prefix + ".ln2", t.add(H, nn::ffn(b, prefix + ".ffn", mod)));

    return t.row(H, 0);
}

Vector encode(const Matrix& tokens, const Conditioning& cond, ParamTree& params,
              const EncoderHyper& h) {
    Tape t;
    Binder b(t, params);
    const int z = encode_graph(b, tokens, cond, h);
    return t.value(z).row(0).transpose();
}

Vector embed_config(const VehicleConfig& c, ParamTree& params, const EncoderHyper& h) {
    require(h.conditioning, "embed_config: encoder has no conditioning pathway");
    Tape t;
    Binder b(t, params);
    const int e = config_embedding_graph(b, Conditioning::of(c));
    return t.value(e).row(0).transpose();
}

Scalar triplet_loss(const Vector& za, const Vector& zp, const Vector& zn, Scalar delta) {
    require(za.size() == zp.size() && za.size() == zn.size(),
            "triplet_loss: dimension mismatch");
    return std::max((za - zp).norm() - (za - zn).norm() + delta, 0.0);
}

std::vector<int> window_starts(int H, int L) {
    require(H >= L && L > 0, "window_starts: trajectory shorter than window");
    const int stride = std::max(1, L / 2 + 1);
    std::vector<int> starts;
    for (int s = 0; s <= H - L; s += stride) starts.push_back(s);
    if (starts.back() != H - L) starts.push_back(H - L);
    return starts;
}

Matrix window_tokens(const Trajectory& traj, int start, int L) {
    require(start >= 0 && start + L <= static_cast<int>(traj.length()),
            "window_tokens: window out of range");
    Matrix tokens(L, kTokenDim);
    for (int i = 0; i < L; ++i) {
        const Transition& tr = traj.transitions[start + i];
        for (int k = 0; k < 4; ++k) tokens(i, k) = tr.s_cur[k];
        tokens(i, 4) = tr.u.steer;
        tokens(i, 5) = tr.u.speed_cmd;
        for (int k = 0; k < 6; ++k) tokens(i, 6 + k) = tr.s_next[k];
    }
    return tokens;
}

std::vector<Vector> embed_trajectories(const std::vector<Trajectory>& trajs,
                                       const Conditioning& cond, ParamTree& params,
                                       const EncoderHyper& h) {
    std::vector<Vector> out;
    for (const Trajectory& traj : trajs) {
        for (int s : window_starts(static_cast<int>(traj.length()), h.window)) {
            out.push_back(encode(window_tokens(traj, s, h.window), cond, params, h));
        }
    }
    return out;
}

namespace {

using IndexMap = std::map<std::string, std::vector<int>>;

WindowSpec sample_window(const FleetDataset& fleet, const IndexMap& allowed,
                         const std::string& vehicle, int L, std::mt19937_64& rng) {
    const auto& trajs = fleet.at(vehicle);
    const auto& idx = allowed.at(vehicle);
    std::uniform_int_distribution<int> traj_dist(0, static_cast<int>(idx.size()) - 1);
    const int traj_index = idx[traj_dist(rng)];
    const int H = static_cast<int>(trajs[traj_index].length());
    require(H >= L, "sample_window: trajectory shorter than window");
    std::uniform_int_distribution<int> start_dist(0, H - L);
    return {vehicle, traj_index, start_dist(rng)};
}

std::vector<TripletSample> sample_triplets_from(const FleetDataset& fleet,
                                                const IndexMap& allowed, int batch, int L,
                                                std::mt19937_64& rng) {
    require(fleet.size() >= 2, "sample_triplets: need at least two vehicles");
    std::vector<std::string> vehicles;
    for (const auto& [id, trajs] : fleet) vehicles.push_back(id);

    std::vector<TripletSample> out;
    out.reserve(batch);
    std::uniform_int_distribution<int> veh_dist(0, static_cast<int>(vehicles.size()) - 1);
    for (int i = 0; i < batch; ++i) {
        TripletSample s;
        const int va = veh_dist(rng);
        s.anchor = sample_window(fleet, allowed, vehicles[va], L, rng);
        int attempts = 0;
        do {
            require(++attempts <= 128,
                    "sample_triplets: vehicle '" + vehicles[va] +
                        "' has too few distinct windows for anchor/positive pairs");
            s.positive = sample_window(fleet, allowed, vehicles[va], L, rng);
        } while (s.positive.traj_index == s.anchor.traj_index &&
                 s.positive.start == s.anchor.start);
        int vn = veh_dist(rng);
        while (vn == va) vn = veh_dist(rng);
        s.negative = sample_window(fleet, allowed, vehicles[vn], L, rng);
        out.push_back(std::move(s));
    }
    return out;
}

IndexMap all_indices(const FleetDataset& fleet) {
    IndexMap m;
    for (const auto& [id, trajs] : fleet) {
        std::vector<int> idx(trajs.size());
        for (std::size_t i = 0; i < trajs.size(); ++i) idx[i] = static_cast<int>(i);
        m.emplace(id, std::move(idx));
    }
    return m;
}

}  // namespace

std::vector<TripletSample> sample_triplets(const FleetDataset& fleet, int batch, int L,
                                           std::mt19937_64& rng) {
    return sample_triplets_from(fleet, all_indices(fleet), batch, L, rng);
}

SeparationStats separation_score(const std::map<std::string, std::vector<Vector>>& by_vehicle) {
    require(by_vehicle.size() >= 2, "separation_score: need at least two vehicles");
    std::vector<Vector> centroids;
    Scalar intra = 0;
    std::size_t n_embeddings = 0;
    for (const auto& [id, zs] : by_vehicle) {
        require(!zs.empty(), "separation_score: empty embedding set for '" + id + "'");
        Vector mu = Vector::Zero(zs.front().size());
        for (const Vector& z : zs) mu += z;
        mu /= static_cast<Scalar>(zs.size());
        for (const Vector& z : zs) intra += (z - mu).norm();
        n_embeddings += zs.size();
        centroids.push_back(std::move(mu));
    }
    SeparationStats st;
    Scalar inter = 0;
    int pairs = 0;
    for (std::size_t i = 0; i < centroids.size(); ++i) {
        for (std::size_t j = i + 1; j < centroids.size(); ++j) {
            inter += (centroids[i] - centroids[j]).norm();
            ++pairs;
        }
    }
    st.inter_centroid_mean = inter / pairs;
    st.intra_spread_mean = intra / static_cast<Scalar>(n_embeddings);
    st.score = st.inter_centroid_mean / std::max(st.intra_spread_mean, 1e-12);
    return st;
}

std::map<std::string, std::vector<int>> validation_indices(const FleetDataset& fleet,
                                                           Scalar val_fraction) {
    std::map<std::string, std::vector<int>> val;
    for (const auto& [id, trajs] : fleet) {
        const int n = static_cast<int>(trajs.size());
        const int n_val = std::max(1, static_cast<int>(std::ceil(val_fraction * n)));
        require(n_val < n, "validation split: vehicle '" + id + "' has too few trajectories");
        std::vector<int> idx;
        for (int i = n - n_val; i < n; ++i) idx.push_back(i);
        val.emplace(id, std::move(idx));
    }
    return val;
}

SeparationStats evaluate_separation(const FleetDataset& fleet, const ConfigMap& configs,
                                    ParamTree& params, const EncoderHyper& h,
                                    bool conditional) {
    const auto val = validation_indices(fleet, h.val_fraction);
    std::map<std::string, std::vector<Vector>> by_vehicle;
    for (const auto& [id, trajs] : fleet) {
        const Conditioning cond = (conditional && h.conditioning)
                                      ? Conditioning::of(configs.at(id))
                                      : Conditioning::none();
        std::vector<Vector> zs;
        for (int ti : val.at(id)) {
            const Trajectory& traj = trajs[ti];
            for (int s : window_starts(static_cast<int>(traj.length()), h.window)) {
                zs.push_back(encode(window_tokens(traj, s, h.window), cond, params, h));
            }
        }
        by_vehicle.emplace(id, std::move(zs));
    }
    return separation_score(by_vehicle);
}

TrainedEncoder train_encoder(const FleetDataset& fleet, const ConfigMap& configs,
                             const EncoderHyper& h, std::uint64_t seed) {
    h.validate();
    require(fleet.size() >= 2, "train_encoder: need at least two vehicles");
    for (const auto& [id, trajs] : fleet) {
        require(configs.count(id) != 0, "train_encoder: missing config for '" + id + "'");
        require(!trajs.empty(), "train_encoder: empty dataset for '" + id + "'");
    }

    const auto val = validation_indices(fleet, h.val_fraction);
    IndexMap train_idx;
    for (const auto& [id, trajs] : fleet) {
        const int n_val = static_cast<int>(val.at(id).size());
        std::vector<int> idx;
        for (int i = 0; i < static_cast<int>(trajs.size()) - n_val; ++i) idx.push_back(i);
        train_idx.emplace(id, std::move(idx));
    }

    ParamTree params = init_encoder(h, splitmix64(seed));
    std::mt19937_64 rng(splitmix64(seed ^ 0x7e57ab1eULL));
    std::uniform_real_distribution<Scalar> unit(0.0, 1.0);

    TrainedEncoder result;
    result.params = params;  // replaced at the first evaluation
    EncoderTrainLog& log = result.log;

    Scalar acc_u = 0, acc_c = 0;
    long acc_n = 0;
    int bad_evals = 0;

    for (long iter = 0; iter < h.max_iters; ++iter) {
        const auto batch = sample_triplets_from(fleet, train_idx, h.batch, h.window, rng);
        // Zero-padded so parameters unbound this iteration (the null
        // embedding when no conditional encode drew it) still satisfy the
        // optimizer's structure check.
        GradTree grads = nn::zero_grads_like(params);
        Scalar sum_u = 0, sum_c = 0;
        for (const TripletSample& s : batch) {
            // One conditioning-dropout decision per conditional encode.
            std::array<bool, 3> drop{};
            for (bool& d : drop) d = unit(rng) < h.cond_dropout;

            Tape t;
            Binder b(t, params);
            auto tokens = [&](const WindowSpec& w) {
                return window_tokens(fleet.at(w.vehicle_id)[w.traj_index], w.start, h.window);
            };
            auto cond_of = [&](const WindowSpec& w, bool dropped) {
                if (dropped) return Conditioning::none();
                return Conditioning::of(configs.at(w.vehicle_id));
            };
            auto hinge = [&](int za, int zp, int zn) {
                const int gap = t.sub(t.l2_distance(za, zp), t.l2_distance(za, zn));
                return t.relu(t.add_scalar(gap, h.margin));
            };
            const int zu_a = encode_graph(b, tokens(s.anchor), Conditioning::none(), h);
            const int zu_p = encode_graph(b, tokens(s.positive), Conditioning::none(), h);
            const int zu_n = encode_graph(b, tokens(s.negative), Conditioning::none(), h);
            const int loss_u = hinge(zu_a, zu_p, zu_n);
            int loss = loss_u;
            int loss_c = -1;
            if (h.conditioning) {
                const int zc_a = encode_graph(b, tokens(s.anchor), cond_of(s.anchor, drop[0]), h);
                const int zc_p =
                    encode_graph(b, tokens(s.positive), cond_of(s.positive, drop[1]), h);
                const int zc_n =
                    encode_graph(b, tokens(s.negative), cond_of(s.negative, drop[2]), h);
                loss_c = hinge(zc_a, zc_p, zc_n);
                loss = t.add(loss_u, loss_c);
            }
            if (!std::isfinite(t.value(loss)(0, 0))) {
                throw std::runtime_error("train_encoder: non-finite loss at iteration " +
                                         std::to_string(iter));
            }
            sum_u += t.value(loss_u)(0, 0);
            sum_c += loss_c >= 0 ? t.value(loss_c)(0, 0) : 0.0;
            t.backward(loss);
            b.harvest(grads);
        }
        nn::scale_grads(grads, 1.0 / static_cast<Scalar>(h.batch));
        nn::adam_step(params, grads, h.lr);

        acc_u += sum_u / h.batch;
        acc_c += sum_c / h.batch;
        acc_n += 1;
        log.iters_run = iter + 1;

        const bool eval_now = ((iter + 1) % h.eval_every == 0) || (iter + 1 == h.max_iters);
        if (!eval_now) continue;

        const SeparationStats cond_sep = evaluate_separation(fleet, configs, params, h, true);
        const SeparationStats unc_sep = evaluate_separation(fleet, configs, params, h, false);
        log.rows.push_back(
            {iter + 1, acc_u / acc_n, acc_c / acc_n, cond_sep.score, unc_sep.score});
        acc_u = acc_c = 0;
        acc_n = 0;

        if (log.rows.size() == 1 || cond_sep.score > log.best_separation) {
            log.best_separation = cond_sep.score;
            log.best_iter = iter + 1;
            result.params = params;
            bad_evals = 0;
        } else if (++bad_evals >= h.patience) {
            log.early_stopped = true;
            break;
        }
    }
    return result;
}

void save_encoder(const ParamTree& params, const EncoderHyper& h,
                  const std::filesystem::path& prefix) {
    nn::save_param_tree(params, prefix.string() + ".params.json");
    nlohmann::ordered_json j;
    j["n_blocks"] = h.n_blocks;
    j["d"] = h.d;
    j["n_heads"] = h.n_heads;
    j["window"] = h.window;
    j["margin"] = h.margin;
    j["adaln_scale"] = h.adaln_scale;
    j["cond_dropout"] = h.cond_dropout;
    j["lr"] = h.lr;
    j["batch"] = h.batch;
    j["max_iters"] = h.max_iters;
    j["eval_every"] = h.eval_every;
    j["patience"] = h.patience;
    j["val_fraction"] = h.val_fraction;
    j["ffn_hidden"] = h.ffn_hidden;
    j["token_dim"] = h.token_dim;
    j["conditioning"] = h.conditioning;
    j["config_ranges"] = {{"alpha_m", {VehicleConfig::kAlphaMLo, VehicleConfig::kAlphaMHi}},
                          {"mu_f", {VehicleConfig::kMuFLo, VehicleConfig::kMuFHi}},
                          {"alpha_s", {VehicleConfig::kAlphaSLo, VehicleConfig::kAlphaSHi}}};
    std::ofstream out(prefix.string() + ".meta.json");
    require(out.good(), "save_encoder: cannot open metadata file");
    out << j.dump(2) << "\n";
}

std::pair<ParamTree, EncoderHyper> load_encoder(const std::filesystem::path& prefix) {
    std::ifstream in(prefix.string() + ".meta.json");
    require(in.good(), "load_encoder: cannot open " + prefix.string() + ".meta.json");
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    require(!j.is_discarded(), "load_encoder: invalid metadata JSON");
    EncoderHyper h;
    h.n_blocks = j.at("n_blocks").get<int>();
    h.d = j.at("d").get<int>();
    h.n_heads = j.at("n_heads").get<int>();
    h.window = j.at("window").get<int>();
    h.margin = j.at("margin").get<Scalar>();
    h.adaln_scale = j.at("adaln_scale").get<Scalar>();
    h.cond_dropout = j.at("cond_dropout").get<Scalar>();
    h.lr = j.at("lr").get<Scalar>();
    h.batch = j.at("batch").get<int>();
    h.max_iters = j.at("max_iters").get<long>();
    h.eval_every = j.at("eval_every").get<int>();
    h.patience = j.at("patience").get<int>();
    h.val_fraction = j.at("val_fraction").get<Scalar>();
    h.ffn_hidden = j.at("ffn_hidden").get<int>();
    h.token_dim = j.at("token_dim").get<int>();
    h.conditioning = j.value("conditioning", true);
    h.validate();
    const ParamTree reference = init_encoder(h, 0);
    ParamTree params = nn::load_param_tree(prefix.string() + ".params.json", &reference);
    return {std::move(params), h};
}

}  // namespace kinoadapt
