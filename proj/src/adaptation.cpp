#include <kinoadapt/adaptation.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace kinoadapt {

using nn::Binder;
using nn::GradTree;
using nn::Mode;
using nn::ParamTree;
using nn::Tape;

void AdaptHyper::validate() const {
    require(budget > 0 && refresh_every > 0 && n_constraint_trajectories > 0 &&
                n_new_trajectories > 0,
            "AdaptHyper: non-positive field");
    kino.validate();
}

KnowledgeBase build_knowledge_base(const FleetDataset& fleet, const ConfigMap& configs,
                                   ParamTree& encoder, const EncoderHyper& eh) {
    require(fleet.size() >= 2, "build_knowledge_base: need at least two vehicles");
    KnowledgeBase kb;
    std::vector<Vector> all_embeddings;
    std::vector<std::pair<std::string, std::vector<Vector>>> per_vehicle;
    for (const auto& [id, trajs] : fleet) {
        require(configs.count(id) != 0, "build_knowledge_base: missing config for '" + id + "'");
        auto zs = embed_trajectories(trajs, Conditioning::of(configs.at(id)), encoder, eh);
        all_embeddings.insert(all_embeddings.end(), zs.begin(), zs.end());
        per_vehicle.emplace_back(id, std::move(zs));
    }
    // PCA over the full embedding population, then applied to the centroids.
    kb.pca = fit_pca(all_embeddings);
    std::vector<Vector> projected;
    for (const auto& [id, zs] : per_vehicle) {
        const Vector mu = compute_centroid(zs);
        kb.centroids.emplace_back(id, mu);
        Vector p = kb.pca.project(mu);
        kb.projected_centroids.emplace_back(id, p);
        projected.push_back(std::move(p));
    }
    kb.epsilon = adaptive_threshold(projected);
    return kb;
}

void save_knowledge_base(const KnowledgeBase& kb, const std::filesystem::path& file) {
    nlohmann::ordered_json j;
    auto vec_to_json = [](const Vector& v) {
        return std::vector<Scalar>(v.data(), v.data() + v.size());
    };
    j["epsilon"] = kb.epsilon;
    j["pca"]["mean"] = vec_to_json(kb.pca.mean);
    j["pca"]["explained_variance_ratio"] = kb.pca.explained_variance_ratio;
    j["pca"]["components"] = nlohmann::ordered_json::array();
    for (Eigen::Index r = 0; r < kb.pca.components.rows(); ++r) {
        j["pca"]["components"].push_back(vec_to_json(kb.pca.components.row(r).transpose()));
    }
    j["centroids"] = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < kb.centroids.size(); ++i) {
        nlohmann::ordered_json jc;
        jc["vehicle_id"] = kb.centroids[i].first;
        jc["centroid"] = vec_to_json(kb.centroids[i].second);
        jc["projected"] = vec_to_json(kb.projected_centroids[i].second);
        j["centroids"].push_back(jc);
    }
    std::ofstream out(file);
    require(out.good(), "save_knowledge_base: cannot open " + file.string());
    out << j.dump() << "\n";
}

KnowledgeBase load_knowledge_base(const std::filesystem::path& file) {
    std::ifstream in(file);
    require(in.good(), "load_knowledge_base: cannot open " + file.string());
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    require(!j.is_discarded(), "load_knowledge_base: invalid JSON");
    auto vec_from = [](const nlohmann::json& a) {
        Vector v(a.size());
        for (std::size_t i = 0; i < a.size(); ++i) v(static_cast<Eigen::Index>(i)) = a[i].get<Scalar>();
        return v;
    };
    KnowledgeBase kb;
    kb.epsilon = j.at("epsilon").get<Scalar>();
    kb.pca.mean = vec_from(j.at("pca").at("mean"));
    kb.pca.explained_variance_ratio =
        j.at("pca").at("explained_variance_ratio").get<std::vector<Scalar>>();
    const auto& comps = j.at("pca").at("components");
    require(!comps.empty(), "load_knowledge_base: empty PCA components");
    kb.pca.components.resize(static_cast<Eigen::Index>(comps.size()), kb.pca.mean.size());
    for (std::size_t r = 0; r < comps.size(); ++r) {
        kb.pca.components.row(static_cast<Eigen::Index>(r)) = vec_from(comps[r]).transpose();
    }
    for (const auto& jc : j.at("centroids")) {
        kb.centroids.emplace_back(jc.at("vehicle_id").get<std::string>(),
                                  vec_from(jc.at("centroid")));
        kb.projected_centroids.emplace_back(jc.at("vehicle_id").get<std::string>(),
                                            vec_from(jc.at("projected")));
    }
    require(kb.centroids.size() >= 2, "load_knowledge_base: need at least two centroids");
    return kb;
}

Vector query_centroid(const std::vector<Trajectory>& d_new,
                      const std::optional<VehicleConfig>& c_new, ParamTree& encoder,
                      const EncoderHyper& eh, const PCAProjection& pca) {
    require(!d_new.empty(), "query_centroid: empty query dataset");
    const Conditioning cond = c_new ? Conditioning::of(*c_new) : Conditioning::none();
    const auto zs = embed_trajectories(d_new, cond, encoder, eh);
    return pca.project(compute_centroid(zs));
}

NeighborSet identify_neighbors(const KnowledgeBase& kb, const std::vector<Trajectory>& d_new,
                               const std::optional<VehicleConfig>& c_new, ParamTree& encoder,
                               const EncoderHyper& eh) {
    const Vector mu = query_centroid(d_new, c_new, encoder, eh, kb.pca);
    return select_neighbors(mu, kb.projected_centroids, kb.epsilon);
}

std::vector<int> apportion(const std::vector<Scalar>& weights, int budget) {
    require(!weights.empty(), "apportion: empty weights");
    require(budget > 0, "apportion: non-positive budget");
    Scalar total = 0;
    for (Scalar w : weights) {
        require(w >= 0, "apportion: negative weight");
        total += w;
    }
    require(std::abs(total - 1.0) < 1e-6, "apportion: weights must be normalized");

    std::vector<int> counts(weights.size());
    std::vector<std::pair<Scalar, std::size_t>> remainders;
    int assigned = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const Scalar exact = weights[i] * budget;
        counts[i] = static_cast<int>(std::floor(exact));
        assigned += counts[i];
        remainders.emplace_back(exact - counts[i], i);
    }
    std::sort(remainders.begin(), remainders.end(), [&](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        if (weights[a.second] != weights[b.second]) return weights[a.second] > weights[b.second];
        return a.second < b.second;
    });
    for (int r = 0; r < budget - assigned; ++r) counts[remainders[r].second] += 1;
    return counts;
}

AggregatedData aggregate_datasets(const std::vector<std::string>& neighbor_ids,
                                  const std::vector<Scalar>& weights,
                                  const FleetDataset& datasets, int budget, int T,
                                  std::uint64_t seed) {
    require(!neighbor_ids.empty(), "aggregate_datasets: empty neighbor set");
    require(neighbor_ids.size() == weights.size(), "aggregate_datasets: weight count mismatch");

    AggregatedData agg;
    agg.vehicle_ids = neighbor_ids;
    agg.counts = apportion(weights, budget);
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < neighbor_ids.size(); ++i) {
        const auto it = datasets.find(neighbor_ids[i]);
        require(it != datasets.end(),
                "aggregate_datasets: unknown vehicle '" + neighbor_ids[i] + "'");
        std::vector<WindowRef> pool;
        for (const Trajectory& traj : it->second) {
            for (int s = 0; s + T <= static_cast<int>(traj.length()); ++s) {
                pool.emplace_back(&traj, s);
            }
        }
        require(!pool.empty(), "aggregate_datasets: no usable window for '" + neighbor_ids[i] + "'");
        std::vector<WindowRef> sampled;
        const int want = agg.counts[i];
        if (want <= static_cast<int>(pool.size())) {
            std::shuffle(pool.begin(), pool.end(), rng);  // without replacement
            sampled.assign(pool.begin(), pool.begin() + want);
        } else {
            std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
            for (int k = 0; k < want; ++k) sampled.push_back(pool[pick(rng)]);
        }
        agg.windows.push_back(std::move(sampled));
    }
    return agg;
}

int weighted_loss_graph(Binder& b, const KinoHyper& h,
                        const std::vector<RolloutBatch>& batches,
                        const std::vector<Scalar>& weights, Mode mode, bool update_bn,
                        std::mt19937_64& rng) {
    require(!batches.empty() && batches.size() == weights.size(),
            "weighted_loss: need one batch per neighbor");
    Tape& t = b.tape();
    int total = t.constant(Matrix::Zero(1, 1));
    for (std::size_t i = 0; i < batches.size(); ++i) {
        const int li = rollout_loss_graph(b, h, batches[i], mode, update_bn, rng);
        total = t.add(total, t.scale(li, weights[i]));
    }
    return total;
}

GradTree project_gradient(const GradTree& g_train, const GradTree& g_con,
                          const ParamTree& reference, Scalar* dot_out) {
    const Vector ft = nn::flatten_grads(g_train, reference);
    const Vector fc = nn::flatten_grads(g_con, reference);
    const Scalar dot = ft.dot(fc);
    if (dot_out) *dot_out = dot;
    const Scalar con_sq = fc.squaredNorm();
    if (dot >= 0.0 || con_sq == 0.0) return g_train;
    return nn::unflatten_grads(ft - (dot / con_sq) * fc, reference);
}

namespace {

/// Fixed constraint windows: stride windows of the leading
/// n_constraint_trajectories of d_new.
std::vector<WindowRef> constraint_windows(const std::vector<Trajectory>& d_new, int n_trajs,
                                          int T) {
    std::vector<WindowRef> out;
    const int use = std::min<int>(n_trajs, static_cast<int>(d_new.size()));
    for (int i = 0; i < use; ++i) {
        const int H = static_cast<int>(d_new[i].length());
        for (int s = 0; s + T <= H; s += T) out.emplace_back(&d_new[i], s);
    }
    require(!out.empty(), "adapt: constraint trajectories shorter than the horizon");
    return out;
}

}  // namespace

AdaptOutcome adapt(const FleetDataset& fleet, const KnowledgeBase& kb,
                   const std::vector<Trajectory>& d_new,
                   const std::optional<VehicleConfig>& c_new, ParamTree& encoder,
                   const EncoderHyper& eh, const AdaptHyper& ah, std::uint64_t seed,
                   const std::vector<Trajectory>* eval_data, const AblationFlags& flags) {
    ah.validate();
    require(!d_new.empty(), "adapt: need at least one new-vehicle trajectory");

    AdaptOutcome outcome;
    AdaptationReport& report = outcome.report;
    report.budget = ah.budget;
    {
        std::ostringstream note;
        const Scalar dt = d_new.front().dt;
        const Scalar seconds = static_cast<Scalar>(d_new.size()) *
                               static_cast<Scalar>(d_new.front().length()) * dt;
        note << d_new.size() << " trajectories x " << d_new.front().length() << " steps x "
             << dt << " s = " << seconds << " s of new-vehicle data";
        report.data_note = note.str();
    }

    // (1) Mobility neighbors from the latent space, or every vehicle
    // uniformly when neighbor identification is ablated.
    if (flags.neighbor_identification) {
        report.neighbors = identify_neighbors(kb, d_new, c_new, encoder, eh);
        if (report.neighbors.ood()) {
            outcome.ood = true;
            return outcome;
        }
    } else {
        report.neighbors.verdict = NeighborSet::Verdict::Neighbors;
        report.neighbors.epsilon = kb.epsilon;
        const Scalar w = 1.0 / static_cast<Scalar>(fleet.size());
        for (const auto& [id, trajs] : fleet) {
            report.neighbors.members.push_back({id, 0.0, w, w});
        }
    }

    // (2) Aggregation plan.
    std::vector<std::string> ids;
    std::vector<Scalar> weights;
    for (const auto& m : report.neighbors.members) {
        ids.push_back(m.vehicle_id);
        weights.push_back(m.weight);
    }
    std::vector<Scalar> agg_weights = weights;
    if (!flags.weighted_aggregation) {
        std::fill(agg_weights.begin(), agg_weights.end(), 1.0 / agg_weights.size());
    }
    const AggregatedData agg = aggregate_datasets(ids, agg_weights, fleet, ah.budget,
                                                  ah.kino.t_pred, splitmix64(seed ^ 0xa66ULL));
    report.plan_vehicle_ids = agg.vehicle_ids;
    report.plan_counts = agg.counts;

    std::vector<Scalar> loss_weights = weights;
    if (!flags.weighted_loss) {
        std::fill(loss_weights.begin(), loss_weights.end(), 1.0 / loss_weights.size());
    }

    // (3) Fresh parameters, regulated optimization.
    const KinoHyper& kh = ah.kino;
    outcome.theta = init_kinodyn(kh, splitmix64(seed));
    std::mt19937_64 rng(splitmix64(seed ^ 0xada7ULL));
    const auto con_windows = constraint_windows(d_new, ah.n_constraint_trajectories, kh.t_pred);
    const RolloutBatch con_batch = make_rollout_batch(con_windows, kh.t_pred);

    // Per-step minibatch shares mirror the aggregation proportions.
    std::vector<Scalar> batch_shares(agg.counts.size());
    for (std::size_t i = 0; i < agg.counts.size(); ++i) {
        batch_shares[i] = static_cast<Scalar>(agg.counts[i]) / ah.budget;
    }
    std::vector<int> batch_counts = apportion(batch_shares, kh.batch);
    for (std::size_t i = 0; i < batch_counts.size(); ++i) {
        if (batch_counts[i] == 0 && agg.counts[i] > 0) batch_counts[i] = 1;
    }

    GradTree g_con;
    report.min_constraint_dot = std::numeric_limits<Scalar>::infinity();
    for (long step = 0; step < kh.steps; ++step) {
        // Refresh the cached constraint gradient at the current parameters.
        if (flags.gradient_regulation && step % ah.refresh_every == 0) {
            Tape t;
            Binder b(t, outcome.theta);
            std::mt19937_64 con_rng(splitmix64(seed ^ (0xc0 + step)));
            const int loss =
                rollout_loss_graph(b, kh, con_batch, Mode::Train, /*update_bn=*/false, con_rng);
            t.backward(loss);
            g_con.clear();
            b.harvest(g_con);
        }

        std::vector<RolloutBatch> batches;
        for (std::size_t i = 0; i < agg.windows.size(); ++i) {
            const auto& pool = agg.windows[i];
            std::vector<WindowRef> pick;
            std::uniform_int_distribution<std::size_t> dist(0, pool.size() - 1);
            for (int k = 0; k < batch_counts[i]; ++k) pick.push_back(pool[dist(rng)]);
            batches.push_back(make_rollout_batch(pick, kh.t_pred));
        }

        Tape t;
        Binder b(t, outcome.theta);
        const int loss = weighted_loss_graph(b, kh, batches, loss_weights, Mode::Train,
                                             /*update_bn=*/true, rng);
        const Scalar loss_v = t.value(loss)(0, 0);
        if (step % 10 == 0 || step + 1 == kh.steps) report.loss_trace.emplace_back(step, loss_v);
        t.backward(loss);
        GradTree g_train;
        b.harvest(g_train);

        GradTree* applied = &g_train;
        GradTree projected;
        if (flags.gradient_regulation) {
            Scalar dot = 0;
            projected = project_gradient(g_train, g_con, outcome.theta, &dot);
            if (dot < 0.0) {
                report.projection_activations += 1;
                applied = &projected;
            }
            const Scalar post = nn::flatten_grads(*applied, outcome.theta)
                                    .dot(nn::flatten_grads(g_con, outcome.theta));
            report.min_constraint_dot = std::min(report.min_constraint_dot, post);
        }
        nn::adam_step(outcome.theta, *applied, kh.lr);
    }
    if (!flags.gradient_regulation) report.min_constraint_dot = 0;

    // (4) Held-out evaluation when provided.
    if (eval_data && !eval_data->empty()) {
        report.final_mse =
            rollout_mse(outcome.theta, kh, *eval_data, kh.t_pred, splitmix64(seed ^ 0xe7a1ULL));
        report.has_final_mse = true;
    }
    return outcome;
}

void write_adaptation_report(const AdaptationReport& report, const std::filesystem::path& file) {
    nlohmann::ordered_json j;
    j["verdict"] = report.neighbors.ood() ? "out_of_distribution" : "neighbors";
    j["epsilon"] = report.neighbors.epsilon;
    j["neighbors"] = nlohmann::ordered_json::array();
    for (const auto& m : report.neighbors.members) {
        j["neighbors"].push_back({{"vehicle_id", m.vehicle_id},
                                  {"distance", m.distance},
                                  {"weight", m.weight}});
    }
    j["plan"] = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < report.plan_vehicle_ids.size(); ++i) {
        j["plan"].push_back({{"vehicle_id", report.plan_vehicle_ids[i]},
                             {"windows", report.plan_counts[i]}});
    }
    j["budget"] = report.budget;
    j["data_note"] = report.data_note;
    j["projection_activations"] = report.projection_activations;
    j["min_constraint_dot"] = report.min_constraint_dot;
    j["loss_trace"] = nlohmann::ordered_json::array();
    for (const auto& [step, loss] : report.loss_trace) {
        j["loss_trace"].push_back({{"step", step}, {"loss", loss}});
    }
    if (report.has_final_mse) {
        j["final_mse"] = {{"mse", report.final_mse.mse},
                          {"std_windows", report.final_mse.std_windows},
                          {"n_windows", report.final_mse.n_windows}};
    }
    std::ofstream out(file);
    require(out.good(), "write_adaptation_report: cannot open " + file.string());
    out << j.dump(2) << "\n";
}

}  // namespace kinoadapt
