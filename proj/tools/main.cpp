#include <kinoadapt/experiments.hpp>

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <sstream>

namespace {

using namespace kinoadapt;

std::optional<VehicleConfig> parse_query_config(const std::string& text) {
    if (text.empty()) return std::nullopt;
    std::istringstream in(text);
    std::string part;
    std::vector<Scalar> vals;
    while (std::getline(in, part, ',')) vals.push_back(std::stod(part));
    require(vals.size() == 3, "query config must be alpha_m,mu_f,alpha_s");
    return VehicleConfig("query", vals[0], vals[1], vals[2], /*allow_out_of_range=*/true);
}

RunConfig load_config(const std::string& path, std::uint64_t seed_override, bool has_seed) {
    RunConfig cfg = path.empty() ? default_run_config() : load_run_config(path);
    if (has_seed) cfg.seed = seed_override;
    cfg.validate();
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cross-vehicle kinodynamics adaptation pipeline"};
    app.require_subcommand(1);

    std::string config_path, out_path, fleet_dir, encoder_prefix, kb_file, traj_file;
    std::string eval_traj, query_config_text, simple_encoder, report_in;
    std::uint64_t seed_override = 0;
    bool force = false;

    auto add_common = [&](CLI::App* cmd, bool needs_out = true) {
        cmd->add_option("--config", config_path, "RunConfig JSON file");
        cmd->add_option("--seed", seed_override, "override the RunConfig seed");
        if (needs_out) cmd->add_option("--out", out_path, "output path")->required();
    };

    auto* init_cmd = app.add_subcommand("init-config", "write the default RunConfig");
    add_common(init_cmd);

    auto* gen = app.add_subcommand("gen-fleet", "generate the training fleet dataset");
    add_common(gen);
    gen->add_flag("--force", force, "overwrite a non-empty output directory");

    auto* trainenc = app.add_subcommand("train-encoder", "train the mobility encoder");
    add_common(trainenc);
    trainenc->add_option("--fleet", fleet_dir, "fleet dataset directory")->required();
    bool simple_mode = false;
    trainenc->add_flag("--simple", simple_mode, "train without the conditioning pathway");

    auto* embed = app.add_subcommand("embed", "build the mobility knowledge base");
    add_common(embed);
    embed->add_option("--fleet", fleet_dir, "fleet dataset directory")->required();
    embed->add_option("--encoder", encoder_prefix, "encoder checkpoint prefix")->required();

    auto* select = app.add_subcommand("select-neighbors", "identify mobility neighbors");
    add_common(select);
    select->add_option("--kb", kb_file, "knowledge base file")->required();
    select->add_option("--encoder", encoder_prefix, "encoder checkpoint prefix")->required();
    select->add_option("--traj", traj_file, "query trajectory file")->required();
    select->add_option("--query-config", query_config_text, "alpha_m,mu_f,alpha_s of the query");

    auto* adapt_cmd = app.add_subcommand("adapt", "rapid kinodynamics adaptation");
    add_common(adapt_cmd);
    adapt_cmd->add_option("--fleet", fleet_dir, "fleet dataset directory")->required();
    adapt_cmd->add_option("--kb", kb_file, "knowledge base file")->required();
    adapt_cmd->add_option("--encoder", encoder_prefix, "encoder checkpoint prefix")->required();
    adapt_cmd->add_option("--traj", traj_file, "new-vehicle trajectory file")->required();
    adapt_cmd->add_option("--query-config", query_config_text, "alpha_m,mu_f,alpha_s of the query");
    adapt_cmd->add_option("--eval-traj", eval_traj, "held-out trajectories for the final metric");

    auto* eval_cmd = app.add_subcommand("eval", "adaptation vs baselines on new vehicles");
    add_common(eval_cmd);
    eval_cmd->add_option("--fleet", fleet_dir, "fleet dataset directory")->required();
    eval_cmd->add_option("--encoder", encoder_prefix, "encoder checkpoint prefix")->required();
    eval_cmd->add_option("--kb", kb_file, "knowledge base file")->required();

    auto* ablate_cmd = app.add_subcommand("ablate", "component and encoder ablations");
    add_common(ablate_cmd);
    ablate_cmd->add_option("--fleet", fleet_dir, "fleet dataset directory")->required();
    ablate_cmd->add_option("--encoder", encoder_prefix, "encoder checkpoint prefix")->required();
    ablate_cmd->add_option("--kb", kb_file, "knowledge base file")->required();
    ablate_cmd->add_option("--simple-encoder", simple_encoder,
                           "checkpoint prefix of a pre-trained trajectory-only encoder");

    auto* report_cmd = app.add_subcommand("report", "re-render a stored evaluation report");
    report_cmd->add_option("--in", report_in, "evaluation report JSON")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        const bool has_seed = app.get_subcommands().front()->count("--seed") > 0;
        if (init_cmd->parsed()) {
            save_run_config(default_run_config(), out_path);
        } else if (gen->parsed()) {
            const RunConfig cfg = load_config(config_path, seed_override, has_seed);
            cmd_gen_fleet(cfg, out_path, force);
        } else if (trainenc->parsed()) {
            const RunConfig cfg = load_config(config_path, seed_override, has_seed);
            cmd_train_encoder(cfg, fleet_dir, out_path, !simple_mode);
        } else if (embed->parsed()) {
            const RunConfig cfg = load_config(config_path, seed_override, has_seed);
            cmd_embed(cfg, fleet_dir, encoder_prefix, out_path);
        } else if (select->parsed()) {
            const RunConfig cfg = load_config(config_path, seed_override, has_seed);
            const NeighborSet ns =
                cmd_select_neighbors(cfg, kb_file, encoder_prefix, traj_file,
                                     parse_query_config(query_config_text), out_path);
            if (ns.ood()) {
                std::cerr << "verdict: out_of_distribution (epsilon " << ns.epsilon << ")\n";
                for (const auto& [id, d] : ns.all_distances) {
                    std::cerr << "  " << id << ": " << d << "\n";
                }
                return 2;
            }
        } else if (adapt_cmd->parsed()) {
            const RunConfig cfg = load_config(config_path, seed_override, has_seed);
            std::optional<std::filesystem::path> eval_path;
            if (!eval_traj.empty()) eval_path = eval_traj;
            const AdaptOutcome outcome =
                cmd_adapt(cfg, fleet_dir, kb_file, encoder_prefix, traj_file,
                          parse_query_config(query_config_text), out_path, eval_path);
            if (outcome.ood) {
                std::cerr << "verdict: out_of_distribution (epsilon "
                          << outcome.report.neighbors.epsilon << ")\n";
                for (const auto& [id, d] : outcome.report.neighbors.all_distances) {
                    std::cerr << "  " << id << ": " << d << "\n";
                }
                return 2;
            }
        } else if (eval_cmd->parsed()) {
            const RunConfig cfg = load_config(config_path, seed_override, has_seed);
            cmd_adapt_eval(cfg, fleet_dir, encoder_prefix, kb_file, out_path);
        } else if (ablate_cmd->parsed()) {
            const RunConfig cfg = load_config(config_path, seed_override, has_seed);
            std::optional<std::filesystem::path> simple_path;
            if (!simple_encoder.empty()) simple_path = simple_encoder;
            cmd_ablate(cfg, fleet_dir, encoder_prefix, kb_file, simple_path, out_path);
        } else if (report_cmd->parsed()) {
            cmd_report(report_in);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
