#include <kinoadapt/experiments.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace kinoadapt {

namespace {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

/// Wall-clock phase timings; written to a sidecar so the reports themselves
/// stay byte-identical across re-runs.
class Timings {
public:
    void record(const std::string& name, Scalar seconds) { entries_.emplace_back(name, seconds); }
    void write(const std::filesystem::path& file) const {
        ojson j = ojson::array();
        for (const auto& [name, s] : entries_) j.push_back({{"phase", name}, {"seconds", s}});
        std::ofstream out(file);
        if (out.good()) out << j.dump(2) << "\n";
    }

private:
    std::vector<std::pair<std::string, Scalar>> entries_;
};

class Stopwatch {
public:
    Stopwatch() : start_(std::chrono::steady_clock::now()) {}
    Scalar seconds() const {
        return std::chrono::duration<Scalar>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_;
};

VehicleConfig config_from_json(const json& j, bool allow_out_of_range) {
    require(j.contains("alpha_m") && j.contains("mu_f") && j.contains("alpha_s"),
            "RunConfig: vehicle config needs alpha_m, mu_f, alpha_s");
    const Scalar am = j.at("alpha_m").get<Scalar>();
    const Scalar mf = j.at("mu_f").get<Scalar>();
    const Scalar as = j.at("alpha_s").get<Scalar>();
    std::string id;
    if (j.contains("id")) {
        id = j.at("id").get<std::string>();
    } else {
        char buf[48];
        std::snprintf(buf, sizeof(buf), "m%.2f_f%.2f_s%.2f", am, mf, as);
        id = buf;
    }
    return VehicleConfig(id, am, mf, as, allow_out_of_range);
}

ojson config_to_json(const VehicleConfig& c) {
    return {{"id", c.id}, {"alpha_m", c.alpha_m}, {"mu_f", c.mu_f}, {"alpha_s", c.alpha_s}};
}

template <typename T>
void maybe(const json& j, const char* key, T& field) {
    if (j.contains(key)) field = j.at(key).get<T>();
}

std::vector<VehicleConfig> default_new_vehicles() {
    std::vector<json> raw = {{{"alpha_m", 3.0}, {"mu_f", 0.75}, {"alpha_s", 1.6}},
                             {{"alpha_m", 0.6}, {"mu_f", 0.7}, {"alpha_s", 0.8}},
                             {{"alpha_m", 0.6}, {"mu_f", 0.75}, {"alpha_s", 1.2}}};
    std::vector<VehicleConfig> out;
    for (const auto& j : raw) out.push_back(config_from_json(j, false));
    return out;
}

}  // namespace

void RunConfig::validate() const {
    require(!experiment.empty(), "RunConfig: empty experiment name");
    require(trajectories_per_vehicle > 1, "RunConfig: trajectories_per_vehicle must be > 1");
    require(dt > 0 && dt <= 0.1, "RunConfig: dt must be in (0, 0.1]");
    require(H >= 2, "RunConfig: H must be >= 2");
    require(H >= encoder.window, "RunConfig: H must cover the encoder window");
    require(H >= adaptation.kino.t_pred, "RunConfig: H must cover the rollout horizon");
    require(!fleet_configs.empty(), "RunConfig: empty fleet");
    require(!new_vehicles.empty(), "RunConfig: no new vehicles configured");
    require(!eval_seeds.empty(), "RunConfig: no eval seeds");
    require(test_trajectories > 0 && from_scratch_trajectories > 0,
            "RunConfig: non-positive dataset size");
    require(ablation_vehicle_index >= 0 &&
                ablation_vehicle_index < static_cast<int>(new_vehicles.size()),
            "RunConfig: ablation_vehicle_index out of range");
    encoder.validate();
    adaptation.validate();
}

RunConfig default_run_config() {
    RunConfig cfg;
    cfg.fleet_configs = default_fleet_grid();
    cfg.new_vehicles = default_new_vehicles();
    // Desk-scale encoder schedule; architecture and optimizer fields keep
    // their full-scale defaults.
    cfg.encoder.max_iters = 800;
    cfg.encoder.eval_every = 100;
    return cfg;
}

RunConfig load_run_config(const std::filesystem::path& file) {
    std::ifstream in(file);
    require(in.good(), "load_run_config: cannot open " + file.string());
    json j = json::parse(in, nullptr, false);
    require(!j.is_discarded() && j.is_object(), "load_run_config: invalid JSON in " + file.string());

    RunConfig cfg = default_run_config();
    maybe(j, "experiment", cfg.experiment);
    maybe(j, "seed", cfg.seed);

    if (j.contains("fleet")) {
        const json& jf = j["fleet"];
        if (jf.contains("configs") && jf["configs"].is_array()) {
            cfg.fleet_configs.clear();
            for (const auto& jc : jf["configs"]) {
                cfg.fleet_configs.push_back(config_from_json(jc, false));
            }
        }
        maybe(jf, "trajectories_per_vehicle", cfg.trajectories_per_vehicle);
        maybe(jf, "dt", cfg.dt);
        maybe(jf, "H", cfg.H);
    }
    if (j.contains("encoder")) {
        const json& je = j["encoder"];
        maybe(je, "n_blocks", cfg.encoder.n_blocks);
        maybe(je, "d", cfg.encoder.d);
        maybe(je, "n_heads", cfg.encoder.n_heads);
        maybe(je, "window", cfg.encoder.window);
        maybe(je, "margin", cfg.encoder.margin);
        maybe(je, "adaln_scale", cfg.encoder.adaln_scale);
        maybe(je, "cond_dropout", cfg.encoder.cond_dropout);
        maybe(je, "lr", cfg.encoder.lr);
        maybe(je, "batch", cfg.encoder.batch);
        maybe(je, "max_iters", cfg.encoder.max_iters);
        maybe(je, "eval_every", cfg.encoder.eval_every);
        maybe(je, "patience", cfg.encoder.patience);
        maybe(je, "val_fraction", cfg.encoder.val_fraction);
        maybe(je, "ffn_hidden", cfg.encoder.ffn_hidden);
    }
    if (j.contains("kinodyn")) {
        const json& jk = j["kinodyn"];
        KinoHyper& kh = cfg.adaptation.kino;
        maybe(jk, "dropout", kh.dropout);
        maybe(jk, "t_pred", kh.t_pred);
        maybe(jk, "lr", kh.lr);
        maybe(jk, "steps", kh.steps);
        maybe(jk, "batch", kh.batch);
    }
    if (j.contains("adaptation")) {
        const json& ja = j["adaptation"];
        maybe(ja, "budget", cfg.adaptation.budget);
        maybe(ja, "refresh_every", cfg.adaptation.refresh_every);
        maybe(ja, "n_constraint_trajectories", cfg.adaptation.n_constraint_trajectories);
        maybe(ja, "n_new_trajectories", cfg.adaptation.n_new_trajectories);
    }
    if (j.contains("new_vehicles")) {
        cfg.new_vehicles.clear();
        for (const auto& jc : j["new_vehicles"]) {
            cfg.new_vehicles.push_back(config_from_json(jc, true));
        }
    }
    if (j.contains("eval")) {
        const json& je = j["eval"];
        maybe(je, "test_trajectories", cfg.test_trajectories);
        maybe(je, "from_scratch_trajectories", cfg.from_scratch_trajectories);
        maybe(je, "seeds", cfg.eval_seeds);
        maybe(je, "ablation_vehicle_index", cfg.ablation_vehicle_index);
    }
    cfg.validate();
    return cfg;
}

void save_run_config(const RunConfig& cfg, const std::filesystem::path& file) {
    ojson j;
    j["experiment"] = cfg.experiment;
    j["seed"] = cfg.seed;
    j["fleet"]["configs"] = ojson::array();
    for (const auto& c : cfg.fleet_configs) j["fleet"]["configs"].push_back(config_to_json(c));
    j["fleet"]["trajectories_per_vehicle"] = cfg.trajectories_per_vehicle;
    j["fleet"]["dt"] = cfg.dt;
    j["fleet"]["H"] = cfg.H;
    j["encoder"] = {{"n_blocks", cfg.encoder.n_blocks},
                    {"d", cfg.encoder.d},
                    {"n_heads", cfg.encoder.n_heads},
                    {"window", cfg.encoder.window},
                    {"margin", cfg.encoder.margin},
                    {"adaln_scale", cfg.encoder.adaln_scale},
                    {"cond_dropout", cfg.encoder.cond_dropout},
                    {"lr", cfg.encoder.lr},
                    {"batch", cfg.encoder.batch},
                    {"max_iters", cfg.encoder.max_iters},
                    {"eval_every", cfg.encoder.eval_every},
                    {"patience", cfg.encoder.patience},
                    {"val_fraction", cfg.encoder.val_fraction},
                    {"ffn_hidden", cfg.encoder.ffn_hidden}};
    j["kinodyn"] = {{"dropout", cfg.adaptation.kino.dropout},
                    {"t_pred", cfg.adaptation.kino.t_pred},
                    {"lr", cfg.adaptation.kino.lr},
                    {"steps", cfg.adaptation.kino.steps},
                    {"batch", cfg.adaptation.kino.batch}};
    j["adaptation"] = {{"budget", cfg.adaptation.budget},
                       {"refresh_every", cfg.adaptation.refresh_every},
                       {"n_constraint_trajectories", cfg.adaptation.n_constraint_trajectories},
                       {"n_new_trajectories", cfg.adaptation.n_new_trajectories}};
    j["new_vehicles"] = ojson::array();
    for (const auto& c : cfg.new_vehicles) j["new_vehicles"].push_back(config_to_json(c));
    j["eval"] = {{"test_trajectories", cfg.test_trajectories},
                 {"from_scratch_trajectories", cfg.from_scratch_trajectories},
                 {"seeds", cfg.eval_seeds},
                 {"ablation_vehicle_index", cfg.ablation_vehicle_index}};
    std::ofstream out(file);
    require(out.good(), "save_run_config: cannot open " + file.string());
    out << j.dump(2) << "\n";
}

// ---- report emission ---------------------------------------------------------

namespace {

ojson cell_to_json(const EvalCell& c) {
    ojson j;
    j["config_id"] = c.config_id;
    j["config"] = {c.config[0], c.config[1], c.config[2]};
    j["method"] = c.method;
    j["mse_mean"] = c.mse_mean;
    j["std_windows_mean"] = c.std_windows_mean;
    j["std_seeds"] = c.std_seeds;
    j["per_seed"] = c.per_seed;
    j["neighbor_ids"] = c.neighbor_ids;
    return j;
}

EvalCell cell_from_json(const json& j) {
    EvalCell c;
    c.config_id = j.at("config_id").get<std::string>();
    for (int k = 0; k < 3; ++k) c.config[k] = j.at("config")[k].get<Scalar>();
    c.method = j.at("method").get<std::string>();
    c.mse_mean = j.at("mse_mean").get<Scalar>();
    c.std_windows_mean = j.at("std_windows_mean").get<Scalar>();
    c.std_seeds = j.at("std_seeds").get<Scalar>();
    c.per_seed = j.at("per_seed").get<std::vector<Scalar>>();
    c.neighbor_ids = j.at("neighbor_ids").get<std::vector<std::string>>();
    return c;
}

void write_cells_tsv(std::ofstream& out, const std::vector<EvalCell>& cells) {
    for (const auto& c : cells) {
        out << c.config_id << '\t' << c.method << '\t' << c.mse_mean << '\t'
            << c.std_windows_mean << '\t' << c.std_seeds << '\t';
        for (std::size_t i = 0; i < c.per_seed.size(); ++i) {
            if (i) out << ',';
            out << c.per_seed[i];
        }
        out << '\t';
        for (std::size_t i = 0; i < c.neighbor_ids.size(); ++i) {
            if (i) out << ',';
            out << c.neighbor_ids[i];
        }
        out << '\n';
    }
}

void write_cells_txt(std::ofstream& out, const std::string& title,
                     const std::vector<EvalCell>& cells) {
    if (cells.empty()) return;
    out << title << "\n";
    std::string last_config;
    for (const auto& c : cells) {
        if (c.config_id != last_config) {
            char cfg[96];
            std::snprintf(cfg, sizeof(cfg), "  config %s [%.2f, %.2f, %.2f]\n",
                          c.config_id.c_str(), c.config[0], c.config[1], c.config[2]);
            out << cfg;
            last_config = c.config_id;
        }
        char line[160];
        std::snprintf(line, sizeof(line), "    %-22s MSE %.6g +/- %.6g (seeds +/- %.6g)\n",
                      c.method.c_str(), c.mse_mean, c.std_windows_mean, c.std_seeds);
        out << line;
        if (!c.neighbor_ids.empty()) {
            out << "      neighbors:";
            for (const auto& id : c.neighbor_ids) out << ' ' << id;
            out << "\n";
        }
    }
    out << "\n";
}

}  // namespace

void write_eval_report(const EvalReport& report, const std::filesystem::path& dir,
                       const std::string& stem) {
    std::filesystem::create_directories(dir);
    ojson j;
    j["experiment"] = report.experiment;
    j["seeds"] = report.seeds;
    j["rows"] = ojson::array();
    for (const auto& c : report.rows) j["rows"].push_back(cell_to_json(c));
    j["ablation_rows"] = ojson::array();
    for (const auto& c : report.ablation_rows) j["ablation_rows"].push_back(cell_to_json(c));
    j["encoder_variant_rows"] = ojson::array();
    for (const auto& c : report.encoder_variant_rows) {
        j["encoder_variant_rows"].push_back(cell_to_json(c));
    }
    {
        std::ofstream out(dir / (stem + ".json"));
        require(out.good(), "write_eval_report: cannot open JSON output");
        out << j.dump(2) << "\n";
    }
    {
        std::ofstream out(dir / (stem + ".tsv"));
        require(out.good(), "write_eval_report: cannot open TSV output");
        out << "config_id\tmethod\tmse_mean\tstd_windows_mean\tstd_seeds\tper_seed\tneighbors\n";
        write_cells_tsv(out, report.rows);
        write_cells_tsv(out, report.ablation_rows);
        write_cells_tsv(out, report.encoder_variant_rows);
    }
    {
        std::ofstream out(dir / (stem + ".txt"));
        require(out.good(), "write_eval_report: cannot open text output");
        out << "experiment: " << report.experiment << "\nseeds:";
        for (auto s : report.seeds) out << ' ' << s;
        out << "\n\n";
        write_cells_txt(out, "adaptation vs baselines", report.rows);
        write_cells_txt(out, "adaptation-mechanism ablations", report.ablation_rows);
        write_cells_txt(out, "encoder variants", report.encoder_variant_rows);
    }
}

EvalReport read_eval_report(const std::filesystem::path& json_file) {
    std::ifstream in(json_file);
    require(in.good(), "read_eval_report: cannot open " + json_file.string());
    json j = json::parse(in, nullptr, false);
    require(!j.is_discarded(), "read_eval_report: invalid JSON");
    EvalReport r;
    r.experiment = j.at("experiment").get<std::string>();
    r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    for (const auto& jc : j.at("rows")) r.rows.push_back(cell_from_json(jc));
    for (const auto& jc : j.at("ablation_rows")) r.ablation_rows.push_back(cell_from_json(jc));
    for (const auto& jc : j.at("encoder_variant_rows")) {
        r.encoder_variant_rows.push_back(cell_from_json(jc));
    }
    return r;
}

// ---- commands -----------------------------------------------------------------

FleetManifest cmd_gen_fleet(const RunConfig& cfg, const std::filesystem::path& out_dir,
                            bool force) {
    cfg.validate();
    namespace fs = std::filesystem;
    if (fs::exists(out_dir) && !fs::is_empty(out_dir)) {
        require(force, "gen-fleet: output directory " + out_dir.string() +
                           " is not empty (use --force to overwrite)");
    }
    const FleetDataset fleet = generate_fleet(cfg.fleet_configs, cfg.trajectories_per_vehicle,
                                              cfg.seed, cfg.H, cfg.dt);
    return write_fleet(fleet, cfg.fleet_configs, cfg.seed, cfg.dt, cfg.H, out_dir);
}

namespace {

struct LoadedFleet {
    FleetManifest manifest;
    FleetDataset data;
    ConfigMap configs;
};

LoadedFleet load_fleet_dir(const std::filesystem::path& dir) {
    LoadedFleet lf;
    lf.manifest = read_manifest(dir);
    lf.data = read_fleet(dir, lf.manifest);
    for (const auto& e : lf.manifest.vehicles) lf.configs.emplace(e.config.id, e.config);
    return lf;
}

}  // namespace

TrainedEncoder cmd_train_encoder(const RunConfig& cfg, const std::filesystem::path& fleet_dir,
                                 const std::filesystem::path& out_prefix,
                                 bool conditioning_enabled) {
    cfg.validate();
    const LoadedFleet lf = load_fleet_dir(fleet_dir);
    EncoderHyper eh = cfg.encoder;
    eh.conditioning = eh.conditioning && conditioning_enabled;
    TrainedEncoder trained = train_encoder(lf.data, lf.configs, eh, cfg.seed);
    save_encoder(trained.params, eh, out_prefix);

    std::ofstream log(out_prefix.string() + ".log.tsv");
    require(log.good(), "train-encoder: cannot open log output");
    log << "iter\tloss_u\tloss_c\tseparation\tseparation_uncond\n";
    for (const auto& r : trained.log.rows) {
        log << r.iter << '\t' << r.loss_u << '\t' << r.loss_c << '\t' << r.separation << '\t'
            << r.separation_uncond << '\n';
    }
    ojson j;
    j["best_iter"] = trained.log.best_iter;
    j["best_separation"] = trained.log.best_separation;
    j["iters_run"] = trained.log.iters_run;
    j["early_stopped"] = trained.log.early_stopped;
    std::ofstream js(out_prefix.string() + ".train.json");
    js << j.dump(2) << "\n";
    return trained;
}

KnowledgeBase cmd_embed(const RunConfig& cfg, const std::filesystem::path& fleet_dir,
                        const std::filesystem::path& encoder_prefix,
                        const std::filesystem::path& out_file) {
    cfg.validate();
    const LoadedFleet lf = load_fleet_dir(fleet_dir);
    auto [encoder, eh] = load_encoder(encoder_prefix);
    const KnowledgeBase kb = build_knowledge_base(lf.data, lf.configs, encoder, eh);
    save_knowledge_base(kb, out_file);
    return kb;
}

NeighborSet cmd_select_neighbors(const RunConfig& cfg, const std::filesystem::path& kb_file,
                                 const std::filesystem::path& encoder_prefix,
                                 const std::filesystem::path& query_file,
                                 const std::optional<VehicleConfig>& c_new,
                                 const std::filesystem::path& out_file) {
    cfg.validate();
    const KnowledgeBase kb = load_knowledge_base(kb_file);
    auto [encoder, eh] = load_encoder(encoder_prefix);
    const auto d_new = read_trajectory_file(query_file);
    require(!d_new.empty(), "select-neighbors: query file holds no trajectories");
    const NeighborSet ns = identify_neighbors(kb, d_new, c_new, encoder, eh);
    write_neighbor_report(ns, out_file);
    return ns;
}

AdaptOutcome cmd_adapt(const RunConfig& cfg, const std::filesystem::path& fleet_dir,
                       const std::filesystem::path& kb_file,
                       const std::filesystem::path& encoder_prefix,
                       const std::filesystem::path& query_file,
                       const std::optional<VehicleConfig>& c_new,
                       const std::filesystem::path& out_prefix,
                       const std::optional<std::filesystem::path>& eval_file) {
    cfg.validate();
    const LoadedFleet lf = load_fleet_dir(fleet_dir);
    const KnowledgeBase kb = load_knowledge_base(kb_file);
    auto [encoder, eh] = load_encoder(encoder_prefix);
    const auto d_new = read_trajectory_file(query_file);
    require(!d_new.empty(), "adapt: query file holds no trajectories");

    std::vector<Trajectory> eval_data;
    if (eval_file) eval_data = read_trajectory_file(*eval_file);

    const AdaptOutcome outcome =
        adapt(lf.data, kb, d_new, c_new, encoder, eh, cfg.adaptation, cfg.seed,
              eval_data.empty() ? nullptr : &eval_data);
    write_adaptation_report(outcome.report, out_prefix.string() + ".report.json");
    if (!outcome.ood) {
        save_kinodyn(outcome.theta, cfg.adaptation.kino, d_new.front().dt, out_prefix);
    }
    return outcome;
}

namespace {

struct EvalContext {
    const RunConfig& cfg;
    const LoadedFleet& lf;
    nn::ParamTree& encoder;
    const EncoderHyper& eh;
    const KnowledgeBase& kb;
    std::map<std::pair<std::string, std::uint64_t>, nn::ParamTree> neighbor_models;
};

const nn::ParamTree& neighbor_model(EvalContext& ctx, const std::string& id,
                                    std::uint64_t eval_seed) {
    const auto key = std::make_pair(id, eval_seed);
    auto it = ctx.neighbor_models.find(key);
    if (it != ctx.neighbor_models.end()) return it->second;
    const std::uint64_t train_seed = splitmix64(ctx.cfg.seed ^ eval_seed ^ fnv1a64(id));
    auto result = train_kinodyn(ctx.lf.data.at(id), ctx.cfg.adaptation.kino, train_seed);
    return ctx.neighbor_models.emplace(key, std::move(result.params)).first->second;
}

Scalar mean_of(const std::vector<Scalar>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<Scalar>(v.size());
}

Scalar std_of(const std::vector<Scalar>& v) {
    const Scalar m = mean_of(v);
    Scalar var = 0;
    for (Scalar x : v) var += (x - m) * (x - m);
    return std::sqrt(var / static_cast<Scalar>(v.size()));
}

EvalCell make_cell(const VehicleConfig& c, const std::string& method,
                   const std::vector<Scalar>& per_seed, const std::vector<Scalar>& window_stds,
                   std::vector<std::string> neighbor_ids = {}) {
    EvalCell cell;
    cell.config_id = c.id;
    cell.config = c.as_array();
    cell.method = method;
    cell.per_seed = per_seed;
    cell.mse_mean = mean_of(per_seed);
    cell.std_windows_mean = mean_of(window_stds);
    cell.std_seeds = per_seed.size() > 1 ? std_of(per_seed) : 0.0;
    cell.neighbor_ids = std::move(neighbor_ids);
    return cell;
}

}  // namespace

std::vector<Trajectory> make_new_vehicle_data(const RunConfig& cfg, const VehicleConfig& c,
                                              std::uint64_t eval_seed, int count, int stream) {
    // The test stream ignores the eval seed so every method within a
    // configuration is scored on the same held-out set.
    const std::uint64_t base = stream == kStreamTest
                                   ? vehicle_seed(cfg.seed, c.id)
                                   : vehicle_seed(cfg.seed ^ (0x517ULL * (eval_seed + 1)), c.id);
    const std::uint64_t vseed = splitmix64(base ^ (0x9e3779b9ULL * stream));
    std::vector<Trajectory> out;
    out.reserve(count);
    for (int j = 0; j < count; ++j) {
        out.push_back(generate_trajectory(c, trajectory_seed(vseed, j), cfg.H, cfg.dt));
    }
    return out;
}

EvalReport cmd_adapt_eval(const RunConfig& cfg, const std::filesystem::path& fleet_dir,
                          const std::filesystem::path& encoder_prefix,
                          const std::filesystem::path& kb_file,
                          const std::filesystem::path& out_dir) {
    cfg.validate();
    const LoadedFleet lf = load_fleet_dir(fleet_dir);
    auto [encoder, eh] = load_encoder(encoder_prefix);
    const KnowledgeBase kb = load_knowledge_base(kb_file);
    EvalContext ctx{cfg, lf, encoder, eh, kb, {}};
    Timings timings;

    EvalReport report;
    report.experiment = cfg.experiment;
    report.seeds = cfg.eval_seeds;

    for (const VehicleConfig& c : cfg.new_vehicles) {
        Stopwatch cfg_watch;
        const auto test = make_new_vehicle_data(cfg, c, 0, cfg.test_trajectories, kStreamTest);

        std::vector<Scalar> adapted_mse, adapted_std;
        std::vector<std::string> adapted_neighbors;
        std::map<int, std::vector<Scalar>> rank_mse, rank_std;  // direct-transfer rows
        std::map<int, std::vector<std::string>> rank_ids;
        std::vector<Scalar> scratch_mse, scratch_std;

        for (std::uint64_t seed_k : cfg.eval_seeds) {
            const auto d_new = make_new_vehicle_data(cfg, c, seed_k,
                                                     cfg.adaptation.n_new_trajectories,
                                                     kStreamAdapt);
            const AdaptOutcome outcome =
                adapt(lf.data, kb, d_new, c, encoder, eh, cfg.adaptation,
                      splitmix64(cfg.seed ^ seed_k), &test);
            if (outcome.ood) {
                std::ostringstream msg;
                msg << "adapt-eval: configuration '" << c.id
                    << "' was classified out-of-distribution (epsilon "
                    << outcome.report.neighbors.epsilon << "); distances:";
                for (const auto& [id, d] : outcome.report.neighbors.all_distances) {
                    msg << ' ' << id << '=' << d;
                }
                throw std::runtime_error(msg.str());
            }
            adapted_mse.push_back(outcome.report.final_mse.mse);
            adapted_std.push_back(outcome.report.final_mse.std_windows);

            const auto& members = outcome.report.neighbors.members;
            for (std::size_t r = 0; r < members.size(); ++r) {
                const std::string& id = members[r].vehicle_id;
                if (std::find(adapted_neighbors.begin(), adapted_neighbors.end(), id) ==
                    adapted_neighbors.end()) {
                    adapted_neighbors.push_back(id);
                }
                const auto& model = neighbor_model(ctx, id, seed_k);
                const RolloutMse m = rollout_mse(model, cfg.adaptation.kino, test,
                                                 cfg.adaptation.kino.t_pred,
                                                 splitmix64(cfg.seed ^ 0xe7a1ULL));
                rank_mse[static_cast<int>(r)].push_back(m.mse);
                rank_std[static_cast<int>(r)].push_back(m.std_windows);
                auto& ids = rank_ids[static_cast<int>(r)];
                if (std::find(ids.begin(), ids.end(), id) == ids.end()) ids.push_back(id);
            }

            const auto full = make_new_vehicle_data(cfg, c, seed_k,
                                                    cfg.from_scratch_trajectories,
                                                    kStreamScratch);
            const auto scratch =
                train_kinodyn(full, cfg.adaptation.kino, splitmix64(cfg.seed ^ seed_k ^ 0xf5ULL));
            const RolloutMse m = rollout_mse(scratch.params, cfg.adaptation.kino, test,
                                             cfg.adaptation.kino.t_pred,
                                             splitmix64(cfg.seed ^ 0xe7a1ULL));
            scratch_mse.push_back(m.mse);
            scratch_std.push_back(m.std_windows);
        }

        report.rows.push_back(make_cell(c, "adapted", adapted_mse, adapted_std,
                                        adapted_neighbors));
        for (const auto& [rank, mses] : rank_mse) {
            report.rows.push_back(make_cell(c, "neighbor_" + std::to_string(rank + 1), mses,
                                            rank_std.at(rank), rank_ids.at(rank)));
        }
        report.rows.push_back(make_cell(c, "from_scratch", scratch_mse, scratch_std));
        timings.record("config " + c.id, cfg_watch.seconds());
    }

    write_eval_report(report, out_dir, "eval_report");
    timings.write(out_dir / "timings.json");
    return report;
}

EvalReport cmd_ablate(const RunConfig& cfg, const std::filesystem::path& fleet_dir,
                      const std::filesystem::path& encoder_prefix,
                      const std::filesystem::path& kb_file,
                      const std::optional<std::filesystem::path>& simple_encoder_prefix,
                      const std::filesystem::path& out_dir) {
    cfg.validate();
    const LoadedFleet lf = load_fleet_dir(fleet_dir);
    auto [encoder, eh] = load_encoder(encoder_prefix);
    const KnowledgeBase kb = load_knowledge_base(kb_file);
    Timings timings;

    EvalReport report;
    report.experiment = cfg.experiment;
    report.seeds = cfg.eval_seeds;

    const VehicleConfig& c = cfg.new_vehicles[cfg.ablation_vehicle_index];
    const auto test = make_new_vehicle_data(cfg, c, 0, cfg.test_trajectories, kStreamTest);

    struct Variant {
        std::string name;
        AblationFlags flags;
    };
    const std::vector<Variant> variants = {
        {"full", {}},
        {"no_neighbor_identification", {false, true, true, true}},
        {"no_weighted_aggregation", {true, false, true, true}},
        {"no_weighted_loss", {true, true, false, true}},
        {"no_gradient_regulation", {true, true, true, false}},
    };

    auto run_variant = [&](const std::string& name, const AblationFlags& flags,
                           const std::optional<VehicleConfig>& c_query,
                           nn::ParamTree& enc, const EncoderHyper& ehv,
                           const KnowledgeBase& kbv) {
        Stopwatch watch;
        std::vector<Scalar> mses, stds;
        for (std::uint64_t seed_k : cfg.eval_seeds) {
            const auto d_new = make_new_vehicle_data(cfg, c, seed_k,
                                                     cfg.adaptation.n_new_trajectories,
                                                     kStreamAdapt);
            const AdaptOutcome outcome =
                adapt(lf.data, kbv, d_new, c_query, enc, ehv, cfg.adaptation,
                      splitmix64(cfg.seed ^ seed_k), &test, flags);
            require(!outcome.ood, "ablate: variant '" + name +
                                      "' hit an out-of-distribution verdict");
            mses.push_back(outcome.report.final_mse.mse);
            stds.push_back(outcome.report.final_mse.std_windows);
        }
        timings.record(name, watch.seconds());
        return make_cell(c, name, mses, stds);
    };

    for (const auto& v : variants) {
        report.ablation_rows.push_back(run_variant(v.name, v.flags, c, encoder, eh, kb));
    }

    // Encoder-design variants. "conditional" is the full pipeline; the
    // unconditional variant queries without the configuration; the simple
    // variant uses a trajectory-only encoder end to end.
    EvalCell conditional = report.ablation_rows.front();
    conditional.method = "encoder_conditional";
    report.encoder_variant_rows.push_back(conditional);
    report.encoder_variant_rows.push_back(
        run_variant("encoder_unconditional", {}, std::nullopt, encoder, eh, kb));
    {
        nn::ParamTree simple_params;
        EncoderHyper simple_eh = cfg.encoder;
        simple_eh.conditioning = false;
        if (simple_encoder_prefix) {
            auto [p, hh] = load_encoder(*simple_encoder_prefix);
            require(!hh.conditioning, "ablate: --simple-encoder must be a trajectory-only encoder");
            simple_params = std::move(p);
            simple_eh = hh;
        } else {
            Stopwatch watch;
            std::filesystem::create_directories(out_dir);
            TrainedEncoder simple = train_encoder(lf.data, lf.configs, simple_eh, cfg.seed);
            simple_params = std::move(simple.params);
            save_encoder(simple_params, simple_eh, out_dir / "simple_encoder");
            timings.record("simple encoder training", watch.seconds());
        }
        const KnowledgeBase simple_kb =
            build_knowledge_base(lf.data, lf.configs, simple_params, simple_eh);
        report.encoder_variant_rows.push_back(run_variant(
            "encoder_simple", {}, std::nullopt, simple_params, simple_eh, simple_kb));
    }

    write_eval_report(report, out_dir, "ablation_report");
    timings.write(out_dir / "timings.json");
    return report;
}

void cmd_report(const std::filesystem::path& json_file) {
    const EvalReport report = read_eval_report(json_file);
    const auto dir = json_file.parent_path();
    const std::string stem = json_file.stem().string();
    write_eval_report(report, dir.empty() ? "." : dir, stem);
}

}  // namespace kinoadapt
