#include <kinoadapt/dataset_io.hpp>

#include <nlohmann/json.hpp>

#include <cstdio>
#include <fstream>
#include <sstream>

namespace kinoadapt {

namespace {

using json = nlohmann::ordered_json;

std::string num(Scalar v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

template <std::size_t N>
std::string num_array(const std::array<Scalar, N>& a) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < N; ++i) {
        if (i) os << ',';
        os << num(a[i]);
    }
    os << ']';
    return os.str();
}

json parse_json_file(const std::filesystem::path& file, const char* what) {
    std::ifstream in(file);
    require(in.good(), std::string(what) + ": cannot open " + file.string());
    json j = json::parse(in, nullptr, /*allow_exceptions=*/false);
    require(!j.is_discarded(), std::string(what) + ": invalid JSON in " + file.string());
    return j;
}

Scalar get_number(const json& j, const char* key, const char* what) {
    require(j.contains(key) && j[key].is_number(),
            std::string(what) + ": missing or non-numeric field '" + key + "'");
    return j[key].get<Scalar>();
}

}  // namespace

void write_trajectories(const std::vector<Trajectory>& trajs, const VehicleConfig& config,
                        const std::filesystem::path& file) {
    std::ofstream out(file);
    require(out.good(), "write_trajectories: cannot open " + file.string());
    const std::string cfg = num_array(config.as_array());
    for (std::size_t j = 0; j < trajs.size(); ++j) {
        const Trajectory& traj = trajs[j];
        for (std::size_t t = 0; t < traj.transitions.size(); ++t) {
            const Transition& tr = traj.transitions[t];
            out << "{\"vehicle_id\":\"" << traj.vehicle_id << "\",\"dt\":" << num(traj.dt)
                << ",\"config\":" << cfg << ",\"traj_index\":" << j
                << ",\"step_index\":" << t << ",\"s_cur\":" << num_array(tr.s_cur)
                << ",\"u\":[" << num(tr.u.steer) << ',' << num(tr.u.speed_cmd)
                << "],\"s_next\":" << num_array(tr.s_next) << "}\n";
        }
    }
    require(out.good(), "write_trajectories: write failed for " + file.string());
}

std::vector<Trajectory> read_trajectory_file(const std::filesystem::path& file) {
    std::ifstream in(file);
    require(in.good(), "read_trajectory_file: cannot open " + file.string());
    std::vector<Trajectory> trajs;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, false);
        require(!j.is_discarded(), "read_trajectory_file: bad JSON at " + file.string() +
                                       ":" + std::to_string(line_no));
        const auto traj_index = j.at("traj_index").get<std::size_t>();
        require(traj_index <= trajs.size(), "read_trajectory_file: traj_index out of order");
        if (traj_index == trajs.size()) {
            Trajectory t;
            t.vehicle_id = j.at("vehicle_id").get<std::string>();
            t.dt = get_number(j, "dt", "read_trajectory_file");
            trajs.push_back(std::move(t));
        }
        Transition tr;
        const auto& sc = j.at("s_cur");
        const auto& u = j.at("u");
        const auto& sn = j.at("s_next");
        require(sc.size() == 4 && u.size() == 2 && sn.size() == 6,
                "read_trajectory_file: bad record shape at line " + std::to_string(line_no));
        for (int i = 0; i < 4; ++i) tr.s_cur[i] = sc[i].get<Scalar>();
        tr.u.steer = u[0].get<Scalar>();
        tr.u.speed_cmd = u[1].get<Scalar>();
        for (int i = 0; i < 6; ++i) tr.s_next[i] = sn[i].get<Scalar>();
        trajs[traj_index].transitions.push_back(tr);
    }
    return trajs;
}

FleetManifest write_fleet(const FleetDataset& fleet,
                          const std::vector<VehicleConfig>& configs,
                          std::uint64_t seed, Scalar dt, int H,
                          const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    FleetManifest manifest;
    manifest.dt = dt;
    manifest.H = H;
    manifest.seed = seed;

    json jman;
    jman["dt"] = dt;
    jman["H"] = H;
    jman["seed"] = seed;
    jman["vehicles"] = json::array();
    for (const auto& c : configs) {
        const auto it = fleet.find(c.id);
        require(it != fleet.end(), "write_fleet: missing dataset for '" + c.id + "'");
        const std::string file = c.id + ".jsonl";
        write_trajectories(it->second, c, dir / file);

        FleetManifest::Entry e;
        e.config = c;
        e.n_trajectories = static_cast<int>(it->second.size());
        e.seed = vehicle_seed(seed, c.id);
        e.file = file;
        manifest.vehicles.push_back(e);

        json jv;
        jv["id"] = c.id;
        jv["config"] = {c.alpha_m, c.mu_f, c.alpha_s};
        jv["n_trajectories"] = e.n_trajectories;
        jv["seed"] = e.seed;
        jv["file"] = file;
        jman["vehicles"].push_back(jv);
    }
    std::ofstream out(dir / "manifest.json");
    require(out.good(), "write_fleet: cannot open manifest");
    out << jman.dump(2) << "\n";
    return manifest;
}

FleetManifest read_manifest(const std::filesystem::path& dir) {
    const json j = parse_json_file(dir / "manifest.json", "manifest");
    FleetManifest m;
    m.dt = get_number(j, "dt", "manifest");
    require(j.contains("H") && j["H"].is_number_integer(), "manifest: missing field 'H'");
    m.H = j["H"].get<int>();
    require(j.contains("seed") && j["seed"].is_number(), "manifest: missing field 'seed'");
    m.seed = j["seed"].get<std::uint64_t>();
    require(m.dt > 0, "manifest: dt must be positive");
    require(j.contains("vehicles") && j["vehicles"].is_array() && !j["vehicles"].empty(),
            "manifest: missing or empty 'vehicles'");
    for (const auto& jv : j["vehicles"]) {
        require(jv.contains("id") && jv["id"].is_string(), "manifest: vehicle missing 'id'");
        require(jv.contains("config") && jv["config"].is_array() && jv["config"].size() == 3,
                "manifest: vehicle config must have 3 entries");
        FleetManifest::Entry e;
        e.config = VehicleConfig(jv["id"].get<std::string>(), jv["config"][0].get<Scalar>(),
                                 jv["config"][1].get<Scalar>(), jv["config"][2].get<Scalar>(),
                                 /*allow_out_of_range=*/true);
        require(jv.contains("n_trajectories") && jv["n_trajectories"].is_number_integer(),
                "manifest: vehicle missing 'n_trajectories'");
        e.n_trajectories = jv["n_trajectories"].get<int>();
        require(e.n_trajectories > 0, "manifest: n_trajectories must be positive");
        e.seed = jv.value("seed", std::uint64_t{0});
        require(jv.contains("file") && jv["file"].is_string(), "manifest: vehicle missing 'file'");
        e.file = jv["file"].get<std::string>();
        m.vehicles.push_back(e);
    }
    return m;
}

FleetDataset read_fleet(const std::filesystem::path& dir, const FleetManifest& manifest) {
    FleetDataset fleet;
    for (const auto& e : manifest.vehicles) {
        auto trajs = read_trajectory_file(dir / e.file);
        require(static_cast<int>(trajs.size()) == e.n_trajectories,
                "read_fleet: trajectory count mismatch for '" + e.config.id + "'");
        fleet.emplace(e.config.id, std::move(trajs));
    }
    return fleet;
}

}  // namespace kinoadapt
