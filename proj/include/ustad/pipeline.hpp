#pragma once

// Pipeline stages behind the CLI: simulate, tokenize, train, score,
// evaluate, report. Every stage writes a manifest with content hashes of its
// inputs and outputs; consuming stages re-hash their inputs against the
// producing manifest, so any tampering upstream is caught. All randomness
// derives from the single [run] seed.

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ustad/evalkit.hpp"
#include "ustad/io.hpp"

namespace ustad::cli {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// errors -> exit codes
// ---------------------------------------------------------------------------

enum ExitCode : int {
    kOk = 0,
    kConfigError = 2,
    kMissingArtifact = 3,
    kSchemaMismatch = 4,
    kNumericFailure = 5,
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct MissingArtifact : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct SchemaMismatch : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// run configuration
// ---------------------------------------------------------------------------

struct RunConfig {
    // [run]
    std::uint64_t seed = 0;
    fs::path out_dir = "runs/default";
    int precision = 64;  // 32 or 64
    int threads = 0;
    // [synth]
    int agents = 100;
    int days = 56;
    int n_poi = 28;
    bool emit_gps = false;
    double gps_dt_min = 2.0;
    // [model]
    seqmodel::ModelConfig model;
    // [train]
    seqmodel::TrainOptions train;
    // [score]
    int score_t = 0;  // 0 = model.t_infer
    std::size_t val_ref_max = 4000;
    int subset_agents = 0;  // 0 = all; otherwise anomalous + seeded normals
    // [inject]
    std::vector<synthgen::InjectionSpec> injections;

    std::string raw_text;  // the parsed file, for hashing
};

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

struct KV {
    std::string section;
    std::string key;
    std::string value;
    int line_no;
};

inline double to_double(const KV& kv) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(kv.value, &pos);
        if (pos != kv.value.size()) throw std::invalid_argument("");
        return v;
    } catch (...) {
        throw ConfigError("config line " + std::to_string(kv.line_no) + ": bad number for " + kv.key);
    }
}

inline std::int64_t to_int(const KV& kv) {
    try {
        std::size_t pos = 0;
        const std::int64_t v = std::stoll(kv.value, &pos);
        if (pos != kv.value.size()) throw std::invalid_argument("");
        return v;
    } catch (...) {
        throw ConfigError("config line " + std::to_string(kv.line_no) + ": bad integer for " + kv.key);
    }
}

inline bool to_bool(const KV& kv) {
    if (kv.value == "true" || kv.value == "1") return true;
    if (kv.value == "false" || kv.value == "0") return false;
    throw ConfigError("config line " + std::to_string(kv.line_no) + ": bad bool for " + kv.key);
}

}  // namespace detail

/// Flat key-value config with typed sections; unknown sections or keys are
/// rejected. [inject] sections may repeat, one per injection spec.
inline RunConfig parse_config_text(const std::string& text) {
    RunConfig cfg;
    cfg.raw_text = text;
    std::istringstream in(text);
    std::string line, section;
    int line_no = 0;
    std::vector<detail::KV> kvs;
    std::vector<std::size_t> inject_starts;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string t = detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        if (t.front() == '[' && t.back() == ']') {
            section = detail::trim(t.substr(1, t.size() - 2));
            static const std::set<std::string> known = {"run", "synth", "model", "train", "score",
                                                        "inject"};
            if (!known.count(section))
                throw ConfigError("config line " + std::to_string(line_no) + ": unknown section [" +
                                  section + "]");
            if (section == "inject") inject_starts.push_back(kvs.size());
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
        if (section.empty())
            throw ConfigError("config line " + std::to_string(line_no) + ": key outside any section");
        kvs.push_back({section, detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)), line_no});
    }

    std::size_t inject_idx = 0;
    std::size_t next_inject_start = inject_starts.empty() ? SIZE_MAX : inject_starts[0];
    for (std::size_t i = 0; i < kvs.size(); ++i) {
        const auto& kv = kvs[i];
        if (kv.section == "inject") {
            while (inject_idx + 1 < inject_starts.size() && i >= inject_starts[inject_idx + 1])
                ++inject_idx;
            if (cfg.injections.size() <= inject_idx) cfg.injections.resize(inject_idx + 1);
            auto& spec = cfg.injections[inject_idx];
            if (kv.key == "kind") {
                try {
                    spec.kind = synthgen::kind_from_name(kv.value);
                } catch (const std::invalid_argument& e) {
                    throw ConfigError("config line " + std::to_string(kv.line_no) + ": " + e.what());
                }
            }
            else if (kv.key == "agent_fraction") spec.agent_fraction = detail::to_double(kv);
            else if (kv.key == "seed") spec.rng_seed = static_cast<std::uint64_t>(detail::to_int(kv));
            else if (kv.key == "shift_min_lo") spec.shift_min_lo = detail::to_double(kv);
            else if (kv.key == "shift_min_hi") spec.shift_min_hi = detail::to_double(kv);
            else if (kv.key == "dur_scale_lo") spec.dur_scale_lo = detail::to_double(kv);
            else if (kv.key == "dur_scale_hi") spec.dur_scale_hi = detail::to_double(kv);
            else if (kv.key == "permutation_window") spec.permutation_window = static_cast<int>(detail::to_int(kv));
            else if (kv.key == "high_density_window") spec.high_density_window = static_cast<int>(detail::to_int(kv));
            else if (kv.key == "bottom_poi_count") spec.bottom_poi_count = static_cast<int>(detail::to_int(kv));
            else
                throw ConfigError("config line " + std::to_string(kv.line_no) + ": unknown key " +
                                  kv.key + " in [inject]");
            continue;
        }
        if (kv.section == "run") {
            if (kv.key == "seed") cfg.seed = static_cast<std::uint64_t>(detail::to_int(kv));
            else if (kv.key == "out_dir") cfg.out_dir = kv.value;
            else if (kv.key == "precision") {
                cfg.precision = static_cast<int>(detail::to_int(kv));
                if (cfg.precision != 32 && cfg.precision != 64)
                    throw ConfigError("config line " + std::to_string(kv.line_no) +
                                      ": precision must be 32 or 64");
            } else if (kv.key == "threads") cfg.threads = static_cast<int>(detail::to_int(kv));
            else
                throw ConfigError("config line " + std::to_string(kv.line_no) + ": unknown key " +
                                  kv.key + " in [run]");
        } else if (kv.section == "synth") {
            if (kv.key == "agents") cfg.agents = static_cast<int>(detail::to_int(kv));
            else if (kv.key == "days") cfg.days = static_cast<int>(detail::to_int(kv));
            else if (kv.key == "n_poi") cfg.n_poi = static_cast<int>(detail::to_int(kv));
            else if (kv.key == "emit_gps") cfg.emit_gps = detail::to_bool(kv);
            else if (kv.key == "gps_dt_min") cfg.gps_dt_min = detail::to_double(kv);
            else
                throw ConfigError("config line " + std::to_string(kv.line_no) + ": unknown key " +
                                  kv.key + " in [synth]");
        } else if (kv.section == "model") {
            auto& m = cfg.model;
            if (kv.key == "d") m.d = static_cast<int>(detail::to_int(kv));
            else if (kv.key == "m1") m.m1 = static_cast<int>(detail::to_int(kv));
            else if (kv.key == "m2") m.m2 = static_cast<int>(detail::to_int(kv));
            else if (kv.key == "heads") m.n_head = static_cast<int>(detail::to_int(kv));
            else if (kv.key == "dropout") m.dropout_p = detail::to_double(kv);
            else if (kv.key == "mask_ratio") m.mask_ratio = detail::to_double(kv);
            else if (kv.key == "t") m.t_infer = static_cast<int>(detail::to_int(kv));
            else if (kv.key == "lambda") m.lambda = detail::to_double(kv);
            else if (kv.key == "k") m.knn_k = static_cast<int>(detail::to_int(kv));
            else if (kv.key == "w") m.w = static_cast<int>(detail::to_int(kv));
            else if (kv.key == "max_len") m.max_len = static_cast<int>(detail::to_int(kv));
            else if (kv.key == "time_radius") m.time_radius = detail::to_double(kv);
            else if (kv.key == "ffn_mult") m.ffn_mult = static_cast<int>(detail::to_int(kv));
            else if (kv.key == "max_per_day") m.max_per_day = static_cast<int>(detail::to_int(kv));
            else if (kv.key == "t_train") m.t_train = static_cast<int>(detail::to_int(kv));
            else
                throw ConfigError("config line " + std::to_string(kv.line_no) + ": unknown key " +
                                  kv.key + " in [model]");
        } else if (kv.section == "train") {
            auto& t = cfg.train;
            if (kv.key == "epochs") t.epochs = static_cast<int>(detail::to_int(kv));
            else if (kv.key == "batch") t.batch_size = static_cast<int>(detail::to_int(kv));
            else if (kv.key == "lr") t.lr = detail::to_double(kv);
            else if (kv.key == "weight_decay") t.weight_decay = detail::to_double(kv);
            else
                throw ConfigError("config line " + std::to_string(kv.line_no) + ": unknown key " +
                                  kv.key + " in [train]");
        } else if (kv.section == "score") {
            if (kv.key == "t") cfg.score_t = static_cast<int>(detail::to_int(kv));
            else if (kv.key == "val_ref_max") cfg.val_ref_max = static_cast<std::size_t>(detail::to_int(kv));
            else if (kv.key == "subset_agents") cfg.subset_agents = static_cast<int>(detail::to_int(kv));
            else
                throw ConfigError("config line " + std::to_string(kv.line_no) + ": unknown key " +
                                  kv.key + " in [score]");
        }
    }
    try {
        cfg.model.n_poi = cfg.n_poi;
        cfg.model.validate();
        for (const auto& s : cfg.injections) s.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    if (cfg.agents < 1 || cfg.days < 7) throw ConfigError("synth: agents >= 1 and days >= 7 required");
    cfg.train.seed = cfg.seed;
    cfg.train.n_threads = cfg.threads;
    return cfg;
}

inline RunConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw MissingArtifact("config file not found: " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

// ---------------------------------------------------------------------------
// manifest helpers
// ---------------------------------------------------------------------------

namespace paths {
inline fs::path events(const RunConfig& c) { return c.out_dir / "dataset.jsonl"; }
inline fs::path labels(const RunConfig& c) { return c.out_dir / "labels.jsonl"; }
inline fs::path meta(const RunConfig& c) { return c.out_dir / "dataset_meta.json"; }
inline fs::path venues(const RunConfig& c) { return c.out_dir / "venues.jsonl"; }
inline fs::path gps(const RunConfig& c) { return c.out_dir / "gps.jsonl"; }
inline fs::path checkpoint(const RunConfig& c) { return c.out_dir / "checkpoint.bin"; }
inline fs::path checkpoint_meta(const RunConfig& c) { return c.out_dir / "checkpoint_meta.json"; }
inline fs::path loss_log(const RunConfig& c) { return c.out_dir / "loss_log.csv"; }
inline fs::path scores(const RunConfig& c) { return c.out_dir / "scores.jsonl"; }
inline fs::path uncertainty(const RunConfig& c) { return c.out_dir / "uncertainty.jsonl"; }
inline fs::path agents_csv(const RunConfig& c) { return c.out_dir / "agents.csv"; }
inline fs::path refs(const RunConfig& c) { return c.out_dir / "refs.json"; }
inline fs::path metrics(const RunConfig& c) { return c.out_dir / "metrics.json"; }
inline fs::path report_dir(const RunConfig& c) { return c.out_dir / "report"; }
inline fs::path manifest(const RunConfig& c, const std::string& stage) {
    return c.out_dir / ("manifest_" + stage + ".json");
}
}  // namespace paths

inline std::string config_hash(const RunConfig& c) {
    const auto h = io::fnv1a64(c.raw_text.data(), c.raw_text.size());
    char out[17];
    std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
    return out;
}

/// Re-hashes `path` and checks it against the producing stage's manifest.
inline void verify_input(const RunConfig& c, const std::string& producer_stage, const fs::path& path) {
    if (!fs::exists(path)) throw MissingArtifact("missing artifact: " + path.string());
    const fs::path man_path = paths::manifest(c, producer_stage);
    if (!fs::exists(man_path))
        throw MissingArtifact("missing upstream manifest: " + man_path.string());
    const auto man = io::read_manifest(man_path);
    if (man.schema_version != io::kSchemaVersion)
        throw SchemaMismatch("schema version mismatch in " + man_path.string());
    const auto it = man.outputs.find(path.filename().string());
    if (it == man.outputs.end())
        throw SchemaMismatch("artifact " + path.filename().string() + " not recorded by stage " +
                             producer_stage);
    if (io::hash_file(path) != it->second)
        throw SchemaMismatch("artifact " + path.filename().string() +
                             " does not match its manifest hash (tampered or stale)");
}

inline void finish_manifest(const RunConfig& c, io::Manifest& m) {
    m.schema_version = io::kSchemaVersion;
    m.seed = c.seed;
    m.config_hash = config_hash(c);
    io::write_manifest(paths::manifest(c, m.stage), m);
}

// ---------------------------------------------------------------------------
// stages
// ---------------------------------------------------------------------------

inline void run_simulate(const RunConfig& cfg) {
    fs::create_directories(cfg.out_dir);
    synthgen::GenConfig gc;
    gc.n_poi = cfg.n_poi;
    auto pop = synthgen::generate_population_ex(cfg.agents, cfg.days, cfg.seed, gc);
    LabeledDataset ds = std::move(pop.dataset);
    if (!cfg.injections.empty()) ds = synthgen::inject_anomalies(ds, cfg.injections);

    io::write_events_jsonl(paths::events(cfg), ds);
    io::write_labels_jsonl(paths::labels(cfg), ds);
    // city venues plus every agent's habitual spots, so POI labels can be
    // recovered from coordinates downstream
    auto venues = pop.venues;
    for (const auto& prof : pop.profiles) {
        venues.push_back({synthgen::kPoiHome, prof.home_x, prof.home_y});
        for (const auto& anc : prof.routine) venues.push_back({anc.poi, anc.x, anc.y});
    }
    io::write_venues_jsonl(paths::venues(cfg), venues);
    io::DatasetMeta meta{cfg.agents, cfg.days, cfg.n_poi, ds.split};
    io::write_dataset_meta(paths::meta(cfg), meta);

    io::Manifest m;
    m.stage = "simulate";
    m.outputs["dataset.jsonl"] = io::hash_file(paths::events(cfg));
    m.outputs["labels.jsonl"] = io::hash_file(paths::labels(cfg));
    m.outputs["venues.jsonl"] = io::hash_file(paths::venues(cfg));
    m.outputs["dataset_meta.json"] = io::hash_file(paths::meta(cfg));
    if (cfg.emit_gps) {
        std::vector<GpsPoint> all;
        for (const auto& a : ds.agents) {
            auto track = synthgen::render_gps(a, cfg.gps_dt_min);
            all.insert(all.end(), track.begin(), track.end());
        }
        io::write_gps_jsonl(paths::gps(cfg), all);
        m.outputs["gps.jsonl"] = io::hash_file(paths::gps(cfg));
    }
    finish_manifest(cfg, m);
}

/// Stay-point extraction over a raw GPS file; POI labels resolved by nearest
/// venue when a venue file exists (synthetic pipelines), otherwise 0.
inline void run_tokenize(const RunConfig& cfg) {
    verify_input(cfg, "simulate", paths::gps(cfg));
    const auto points = io::read_gps_jsonl(paths::gps(cfg));
    std::vector<synthgen::Venue> venues;
    if (fs::exists(paths::venues(cfg))) venues = io::read_venues_jsonl(paths::venues(cfg));

    std::map<std::int64_t, std::vector<GpsPoint>> tracks;
    for (const auto& p : points) tracks[p.agent_id].push_back(p);

    LabeledDataset ds;
    ds.n_poi = cfg.n_poi;
    ds.split = make_split(cfg.days);
    for (auto& [agent, track] : tracks) {
        auto res = staypoint::extract_stay_events(track, 5.0, 0.1);
        AgentData ad;
        ad.agent_id = agent;
        for (auto& e : res.events) {
            if (!venues.empty()) {
                double best = 1e300;
                for (const auto& v : venues) {
                    const double d = staypoint::planar_dist(e.x, e.y, v.x, v.y);
                    if (d < best) {
                        best = d;
                        e.poi = v.poi;
                    }
                }
            }
            ad.events.push_back(e);
        }
        ad.labels.assign(ad.events.size(), 0);
        ds.agents.push_back(std::move(ad));
    }

    const fs::path out = cfg.out_dir / "tokenized.jsonl";
    io::write_events_jsonl(out, ds);
    io::Manifest m;
    m.stage = "tokenize";
    m.inputs["gps.jsonl"] = io::hash_file(paths::gps(cfg));
    m.outputs["tokenized.jsonl"] = io::hash_file(out);
    finish_manifest(cfg, m);
}

template <class Real>
void run_train_impl(const RunConfig& cfg) {
    verify_input(cfg, "simulate", paths::events(cfg));
    verify_input(cfg, "simulate", paths::meta(cfg));
    const auto meta = io::read_dataset_meta(paths::meta(cfg));
    const auto ds = io::read_dataset(paths::events(cfg), paths::labels(cfg), meta);

    std::vector<StayEvent> train_events;
    std::vector<EventSequence> train_windows, val_windows;
    for (const auto& a : ds.agents) {
        for (const auto& e : a.events)
            if (ds.split.is_train(e.day)) train_events.push_back(e);
        auto wins = staypoint::build_windows(a.events, cfg.model.w, cfg.model.max_len);
        for (auto& w : wins) {
            if (ds.split.is_train(w.target_day)) train_windows.push_back(std::move(w));
            else if (ds.split.is_val(w.target_day)) val_windows.push_back(std::move(w));
        }
    }
    if (train_events.empty()) throw NumericFailure("train: empty training split");
    const auto stats =
        seqmodel::compute_norm_stats(train_events.begin(), train_events.end(), cfg.model.time_radius);
    seqmodel::Model<Real> model(cfg.model, stats, derive_seed(cfg.seed, 0x51EDull));
    auto opts = cfg.train;
    const auto log = seqmodel::train(model, train_windows, val_windows, opts);

    {
        std::ofstream out(paths::checkpoint(cfg), std::ios::binary);
        model.save(out);
    }
    {
        io::json j;
        j["precision"] = cfg.precision;
        j["seed"] = cfg.seed;
        j["n_train_windows"] = train_windows.size();
        j["n_val_windows"] = val_windows.size();
        j["epochs"] = opts.epochs;
        io::json stats_j;
        stats_j["mean"] = stats.mean;
        stats_j["stdev"] = stats.stdev;
        j["norm_stats"] = stats_j;
        std::ofstream out(paths::checkpoint_meta(cfg));
        out << j.dump(2) << "\n";
    }
    {
        std::ofstream out(paths::loss_log(cfg));
        out.precision(17);
        out << "epoch,train_loss,val_loss\n";
        for (std::size_t e = 0; e < log.size(); ++e)
            out << e << "," << log[e].train_loss << "," << log[e].val_loss << "\n";
    }
    io::Manifest m;
    m.stage = "train";
    m.inputs["dataset.jsonl"] = io::hash_file(paths::events(cfg));
    m.inputs["dataset_meta.json"] = io::hash_file(paths::meta(cfg));
    m.outputs["checkpoint.bin"] = io::hash_file(paths::checkpoint(cfg));
    m.outputs["checkpoint_meta.json"] = io::hash_file(paths::checkpoint_meta(cfg));
    m.outputs["loss_log.csv"] = io::hash_file(paths::loss_log(cfg));
    finish_manifest(cfg, m);
}

template <class Real>
void run_score_impl(const RunConfig& cfg) {
    verify_input(cfg, "simulate", paths::events(cfg));
    verify_input(cfg, "train", paths::checkpoint(cfg));
    const auto meta = io::read_dataset_meta(paths::meta(cfg));
    const auto ds = io::read_dataset(paths::events(cfg), paths::labels(cfg), meta);
    std::ifstream in(paths::checkpoint(cfg), std::ios::binary);
    auto model = seqmodel::Model<Real>::load(in);

    scoring::ScoringOptions sopts;
    sopts.t_mc = cfg.score_t > 0 ? cfg.score_t : model.cfg.t_infer;
    sopts.seed = derive_seed(cfg.seed, 0x5C02Eull);
    sopts.n_threads = cfg.threads;
    sopts.max_val_ref_events = cfg.val_ref_max;
    if (cfg.subset_agents > 0) {
        std::vector<std::int64_t> anomalous, normal;
        for (std::size_t a = 0; a < ds.agents.size(); ++a)
            (ds.agent_label(a) ? anomalous : normal).push_back(ds.agents[a].agent_id);
        Rng rng(derive_seed(cfg.seed, 0x5CA9ull));
        rng.shuffle(normal);
        const auto fill = static_cast<std::size_t>(std::max(0, cfg.subset_agents));
        if (normal.size() > fill) normal.resize(fill);
        sopts.agent_subset = anomalous;
        sopts.agent_subset.insert(sopts.agent_subset.end(), normal.begin(), normal.end());
    }

    const auto index = scoring::build_train_index(ds, model, cfg.threads);
    if (index.rows() < model.cfg.knn_k)
        throw NumericFailure("score: train index smaller than k; reduce k or grow the dataset");
    const auto res = scoring::score_dataset(ds, model, index, sopts);

    io::write_scores_jsonl(paths::scores(cfg), res.test_scores);
    io::write_uncertainty_jsonl(paths::uncertainty(cfg), res.test_scores);
    io::write_refs_json(paths::refs(cfg), res.refs);
    std::map<std::int64_t, bool> agent_labels;
    for (std::size_t a = 0; a < ds.agents.size(); ++a)
        agent_labels[ds.agents[a].agent_id] = ds.agent_label(a);
    io::write_agent_csv(paths::agents_csv(cfg), res.agent_scores, agent_labels);

    io::Manifest m;
    m.stage = "score";
    m.inputs["dataset.jsonl"] = io::hash_file(paths::events(cfg));
    m.inputs["checkpoint.bin"] = io::hash_file(paths::checkpoint(cfg));
    m.outputs["scores.jsonl"] = io::hash_file(paths::scores(cfg));
    m.outputs["uncertainty.jsonl"] = io::hash_file(paths::uncertainty(cfg));
    m.outputs["refs.json"] = io::hash_file(paths::refs(cfg));
    m.outputs["agents.csv"] = io::hash_file(paths::agents_csv(cfg));
    finish_manifest(cfg, m);
}

inline void run_train(const RunConfig& cfg) {
    if (cfg.precision == 32) run_train_impl<float>(cfg);
    else run_train_impl<double>(cfg);
}

inline void run_score(const RunConfig& cfg) {
    if (cfg.precision == 32) run_score_impl<float>(cfg);
    else run_score_impl<double>(cfg);
}

inline void run_evaluate(const RunConfig& cfg) {
    verify_input(cfg, "score", paths::scores(cfg));
    verify_input(cfg, "score", paths::uncertainty(cfg));
    verify_input(cfg, "score", paths::refs(cfg));
    const auto scores = io::read_scores_jsonl(paths::scores(cfg), paths::uncertainty(cfg));
    const auto refs = io::read_refs_json(paths::refs(cfg));
    if (scores.empty()) throw NumericFailure("evaluate: no scored events");

    io::json j;
    const auto pm = evalkit::prediction_metrics(scores);
    io::json pred;
    pred["mae_st_min"] = pm.mae_st;
    pred["mae_sd_min"] = pm.mae_sd;
    pred["mae_x_km"] = pm.mae_x;
    pred["mae_y_km"] = pm.mae_y;
    pred["mape_st"] = pm.mape_st;
    pred["mape_sd"] = pm.mape_sd;
    pred["mape_x"] = pm.mape_x;
    pred["mape_y"] = pm.mape_y;
    pred["acc_poi"] = pm.acc_poi;
    pred["acc_dow"] = pm.acc_dow;
    pred["n_events"] = pm.n;
    j["prediction"] = pred;

    io::json rej = io::json::array();
    for (double keep : {1.0, 0.95, 0.9, 0.85, 0.8, 0.75, 0.7, 0.65, 0.6, 0.55, 0.5}) {
        const auto p = evalkit::rejection_eval(scores, 1.0 - keep, cfg.seed);
        io::json row;
        row["keep"] = keep;
        row["kept_events"] = p.kept;
        row["mae_st_min"] = p.metrics.mae_st;
        row["mae_sd_min"] = p.metrics.mae_sd;
        row["mae_x_km"] = p.metrics.mae_x;
        row["mae_y_km"] = p.metrics.mae_y;
        row["acc_poi"] = p.metrics.acc_poi;
        row["acc_dow"] = p.metrics.acc_dow;
        rej.push_back(row);
    }
    j["rejection"] = rej;

    bool has_pos = false, has_neg = false;
    for (const auto& s : scores) (s.label ? has_pos : has_neg) = true;
    if (has_pos && has_neg) {
        std::vector<bool> labels;
        for (const auto& s : scores) labels.push_back(s.label);
        io::json det;
        for (auto v : {scoring::ScoreVariant::PE, scoring::ScoreVariant::Loss,
                       scoring::ScoreVariant::PEAuEu, scoring::ScoreVariant::EU,
                       scoring::ScoreVariant::KNN, scoring::ScoreVariant::LossKnn}) {
            std::vector<double> vals;
            for (const auto& s : scores) vals.push_back(scoring::ablation_score(v, s, refs));
            io::json cell;
            cell["auroc"] = evalkit::auroc(vals, labels);
            cell["aupr"] = evalkit::aupr(vals, labels);
            det[scoring::variant_name(v)] = cell;
        }
        j["event_detection"] = det;

        // agent level on the default score
        std::map<std::int64_t, double> agent_sc;
        std::map<std::int64_t, bool> agent_lb;
        for (const auto& s : scores) {
            auto& v = agent_sc[s.key.agent_id];
            v = std::max(v, s.score);
            agent_lb[s.key.agent_id] = agent_lb[s.key.agent_id] || s.label;
        }
        std::vector<double> av;
        std::vector<bool> al;
        for (const auto& [agent, sc] : agent_sc) {
            av.push_back(sc);
            al.push_back(agent_lb[agent]);
        }
        bool ap = false, an = false;
        for (bool l : al) (l ? ap : an) = true;
        if (ap && an) {
            io::json ag;
            ag["auroc"] = evalkit::auroc(av, al);
            ag["aupr"] = evalkit::aupr(av, al);
            j["agent_detection"] = ag;
        }
    }

    {
        std::ofstream out(paths::metrics(cfg));
        out << j.dump(2) << "\n";
    }
    io::Manifest m;
    m.stage = "evaluate";
    m.inputs["scores.jsonl"] = io::hash_file(paths::scores(cfg));
    m.inputs["uncertainty.jsonl"] = io::hash_file(paths::uncertainty(cfg));
    m.inputs["refs.json"] = io::hash_file(paths::refs(cfg));
    m.outputs["metrics.json"] = io::hash_file(paths::metrics(cfg));
    finish_manifest(cfg, m);
}

inline void run_report(const RunConfig& cfg) {
    verify_input(cfg, "evaluate", paths::metrics(cfg));
    std::ifstream in(paths::metrics(cfg));
    const io::json j = io::json::parse(in);
    fs::create_directories(paths::report_dir(cfg));

    io::Manifest m;
    m.stage = "report";
    m.inputs["metrics.json"] = io::hash_file(paths::metrics(cfg));

    {
        const fs::path p = paths::report_dir(cfg) / "rejection_curve.csv";
        std::ofstream out(p);
        out.precision(17);
        out << "keep,kept_events,mae_st_min,mae_sd_min,mae_x_km,mae_y_km,acc_poi,acc_dow\n";
        for (const auto& row : j.at("rejection"))
            out << row.at("keep").get<double>() << "," << row.at("kept_events").get<std::size_t>()
                << "," << row.at("mae_st_min").get<double>() << ","
                << row.at("mae_sd_min").get<double>() << "," << row.at("mae_x_km").get<double>()
                << "," << row.at("mae_y_km").get<double>() << "," << row.at("acc_poi").get<double>()
                << "," << row.at("acc_dow").get<double>() << "\n";
        out.close();
        m.outputs["rejection_curve.csv"] = io::hash_file(p);
    }
    {
        const fs::path p = paths::report_dir(cfg) / "prediction_metrics.csv";
        std::ofstream out(p);
        out.precision(17);
        out << "metric,value\n";
        for (const auto& [k, v] : j.at("prediction").items()) out << k << "," << v.dump() << "\n";
        out.close();
        m.outputs["prediction_metrics.csv"] = io::hash_file(p);
    }
    if (j.contains("event_detection")) {
        const fs::path p = paths::report_dir(cfg) / "detection.csv";
        std::ofstream out(p);
        out.precision(17);
        out << "variant,auroc,aupr\n";
        for (const auto& [k, v] : j.at("event_detection").items())
            out << k << "," << v.at("auroc").get<double>() << "," << v.at("aupr").get<double>()
                << "\n";
        out.close();
        m.outputs["detection.csv"] = io::hash_file(p);
    }
    {
        const fs::path p = paths::report_dir(cfg) / "summary.json";
        std::ofstream out(p);
        out << j.dump(2) << "\n";
        out.close();
        m.outputs["summary.json"] = io::hash_file(p);
    }
    finish_manifest(cfg, m);
}

/// Exception -> exit code mapping shared by the CLI and tests.
inline int run_stage_catching(const std::string& stage, const std::function<void()>& fn,
                              std::string* error_out = nullptr) {
    try {
        fn();
        return kOk;
    } catch (const ConfigError& e) {
        if (error_out) *error_out = e.what();
        return kConfigError;
    } catch (const MissingArtifact& e) {
        if (error_out) *error_out = e.what();
        return kMissingArtifact;
    } catch (const SchemaMismatch& e) {
        if (error_out) *error_out = e.what();
        return kSchemaMismatch;
    } catch (const std::exception& e) {
        if (error_out) *error_out = std::string(stage) + ": " + e.what();
        return kNumericFailure;
    }
}

}  // namespace ustad::cli
