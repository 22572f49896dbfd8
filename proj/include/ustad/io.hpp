#pragma once

// File formats: the event/label/GPS/venue/score JSONL schemas, the dataset
// meta block, and FNV-1a content hashing for stage manifests. JSON numbers
// round-trip exactly (shortest-representation printing), so re-reading a
// file reproduces the doubles bit for bit.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ustad/scoring.hpp"
#include "ustad/synthgen.hpp"
#include "ustad/types.hpp"

namespace ustad::io {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// hashing
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hash_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("hash_file: cannot open " + path.string());
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof(buf));
        h = fnv1a64(buf, static_cast<std::size_t>(in.gcount()), h);
    }
    char out[17];
    std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
    return out;
}

// ---------------------------------------------------------------------------
// events + labels
// ---------------------------------------------------------------------------

inline void write_events_jsonl(const fs::path& path, const LabeledDataset& ds) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (const auto& a : ds.agents) {
        for (const auto& e : a.events) {
            json j;
            j["agent_id"] = e.agent_id;
            j["day"] = e.day;
            j["idx"] = e.idx;
            j["st_min"] = e.st;
            j["sd_min"] = e.sd;
            j["x_km"] = e.x;
            j["y_km"] = e.y;
            j["poi"] = e.poi;
            j["dow"] = e.dow;
            j["trip"] = e.trip;
            out << j.dump() << "\n";
        }
    }
}

inline void write_labels_jsonl(const fs::path& path, const LabeledDataset& ds) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (const auto& a : ds.agents) {
        for (std::size_t i = 0; i < a.events.size(); ++i) {
            json j;
            j["agent_id"] = a.events[i].agent_id;
            j["day"] = a.events[i].day;
            j["event_index"] = a.events[i].idx;
            j["is_anomaly"] = a.labels[i] != 0;
            out << j.dump() << "\n";
        }
    }
}

struct DatasetMeta {
    int n_agents = 0;
    int n_days = 0;
    int n_poi = 0;
    SplitBoundaries split;
};

inline void write_dataset_meta(const fs::path& path, const DatasetMeta& m) {
    json j;
    j["n_agents"] = m.n_agents;
    j["n_days"] = m.n_days;
    j["n_poi"] = m.n_poi;
    j["train_end_day"] = m.split.train_end_day;
    j["val_end_day"] = m.split.val_end_day;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

inline DatasetMeta read_dataset_meta(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    json j = json::parse(in);
    DatasetMeta m;
    m.n_agents = j.at("n_agents").get<int>();
    m.n_days = j.at("n_days").get<int>();
    m.n_poi = j.at("n_poi").get<int>();
    m.split.n_days = m.n_days;
    m.split.train_end_day = j.at("train_end_day").get<int>();
    m.split.val_end_day = j.at("val_end_day").get<int>();
    return m;
}

inline LabeledDataset read_dataset(const fs::path& events_path, const fs::path& labels_path,
                                   const DatasetMeta& meta) {
    LabeledDataset ds;
    ds.n_poi = meta.n_poi;
    ds.split = meta.split;
    std::map<std::int64_t, std::size_t> agent_pos;
    {
        std::ifstream in(events_path);
        if (!in) throw std::runtime_error("cannot read " + events_path.string());
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            json j = json::parse(line);
            StayEvent e;
            e.agent_id = j.at("agent_id").get<std::int64_t>();
            e.day = j.at("day").get<int>();
            e.idx = j.at("idx").get<int>();
            e.st = j.at("st_min").get<double>();
            e.sd = j.at("sd_min").get<double>();
            e.x = j.at("x_km").get<double>();
            e.y = j.at("y_km").get<double>();
            e.poi = j.at("poi").get<int>();
            e.dow = j.at("dow").get<int>();
            const auto& t = j.at("trip");
            if (t.size() != kTripFeatureDim)
                throw std::runtime_error("event schema: trip vector must have 14 entries");
            for (std::size_t c = 0; c < kTripFeatureDim; ++c) e.trip[c] = t[c].get<double>();
            auto it = agent_pos.find(e.agent_id);
            if (it == agent_pos.end()) {
                agent_pos[e.agent_id] = ds.agents.size();
                ds.agents.push_back({e.agent_id, {}, {}});
                it = agent_pos.find(e.agent_id);
            }
            ds.agents[it->second].events.push_back(e);
        }
    }
    for (auto& a : ds.agents) a.labels.assign(a.events.size(), 0);
    if (!labels_path.empty() && fs::exists(labels_path)) {
        std::ifstream in(labels_path);
        std::string line;
        std::map<std::int64_t, std::map<std::pair<int, int>, std::size_t>> index;
        for (auto& a : ds.agents)
            for (std::size_t i = 0; i < a.events.size(); ++i)
                index[a.agent_id][{a.events[i].day, a.events[i].idx}] = i;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            json j = json::parse(line);
            const auto agent = j.at("agent_id").get<std::int64_t>();
            const auto key = std::make_pair(j.at("day").get<int>(), j.at("event_index").get<int>());
            const bool anom = j.at("is_anomaly").get<bool>();
            auto ait = agent_pos.find(agent);
            if (ait == agent_pos.end()) continue;
            auto& a = ds.agents[ait->second];
            auto eit = index[agent].find(key);
            if (eit != index[agent].end()) a.labels[eit->second] = anom ? 1 : 0;
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// gps + venues
// ---------------------------------------------------------------------------

inline void write_gps_jsonl(const fs::path& path, const std::vector<GpsPoint>& points) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (const auto& p : points) {
        json j;
        j["agent_id"] = p.agent_id;
        j["t"] = p.t;
        j["x"] = p.x;
        j["y"] = p.y;
        out << j.dump() << "\n";
    }
}

inline std::vector<GpsPoint> read_gps_jsonl(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::vector<GpsPoint> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        out.push_back({j.at("agent_id").get<std::int64_t>(), j.at("t").get<double>(),
                       j.at("x").get<double>(), j.at("y").get<double>()});
    }
    return out;
}

inline void write_venues_jsonl(const fs::path& path, const std::vector<synthgen::Venue>& venues) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (const auto& v : venues) {
        json j;
        j["poi"] = v.poi;
        j["x_km"] = v.x;
        j["y_km"] = v.y;
        out << j.dump() << "\n";
    }
}

inline std::vector<synthgen::Venue> read_venues_jsonl(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::vector<synthgen::Venue> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        out.push_back({j.at("poi").get<int>(), j.at("x_km").get<double>(), j.at("y_km").get<double>()});
    }
    return out;
}

// ---------------------------------------------------------------------------
// scores + uncertainty reports
// ---------------------------------------------------------------------------

inline void write_scores_jsonl(const fs::path& path, const std::vector<scoring::EventScore>& scores) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (const auto& s : scores) {
        json j;
        j["agent_id"] = s.key.agent_id;
        j["day"] = s.key.day;
        j["event_index"] = s.key.idx;
        j["loss_st"] = s.losses.st;
        j["loss_sd"] = s.losses.sd;
        j["loss_x"] = s.losses.x;
        j["loss_y"] = s.losses.y;
        j["loss_poi"] = s.losses.poi;
        j["loss_dow"] = s.losses.dow;
        j["err_st"] = s.errors.st;
        j["err_sd"] = s.errors.sd;
        j["err_x"] = s.errors.x;
        j["err_y"] = s.errors.y;
        j["err_poi"] = s.errors.poi;
        j["err_dow"] = s.errors.dow;
        j["pred_st"] = s.pred.st_minutes;
        j["pred_sd"] = s.pred.sd;
        j["pred_x"] = s.pred.x;
        j["pred_y"] = s.pred.y;
        j["pred_poi"] = s.pred.poi;
        j["pred_dow"] = s.pred.dow;
        j["obs_st"] = s.obs_st_min;
        j["obs_sd"] = s.obs_sd;
        j["obs_x"] = s.obs_x;
        j["obs_y"] = s.obs_y;
        j["obs_poi"] = s.obs_poi;
        j["obs_dow"] = s.obs_dow;
        j["knn"] = s.knn_raw;
        j["loss_pct"] = s.loss_pct;
        j["knn_pct"] = s.knn_pct;
        j["as"] = s.score;
        j["label"] = s.label;
        out << j.dump() << "\n";
    }
}

inline void write_uncertainty_jsonl(const fs::path& path,
                                    const std::vector<scoring::EventScore>& scores) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (const auto& s : scores) {
        json j;
        j["agent_id"] = s.key.agent_id;
        j["day"] = s.key.day;
        j["event_index"] = s.key.idx;
        j["alpha_st"] = s.report.alpha_st;
        j["beta_st"] = s.report.beta_st;
        j["alpha_sd"] = s.report.alpha_sd;
        j["beta_sd"] = s.report.beta_sd;
        j["alpha_x"] = s.report.alpha_x;
        j["beta_x"] = s.report.beta_x;
        j["alpha_y"] = s.report.alpha_y;
        j["beta_y"] = s.report.beta_y;
        j["alpha_poi"] = s.report.alpha_poi;
        j["beta_poi"] = s.report.beta_poi;
        j["alpha_dow"] = s.report.alpha_dow;
        j["beta_dow"] = s.report.beta_dow;
        j["total"] = s.report.total();
        out << j.dump() << "\n";
    }
}

inline std::vector<scoring::EventScore> read_scores_jsonl(const fs::path& scores_path,
                                                          const fs::path& uncertainty_path) {
    std::vector<scoring::EventScore> out;
    {
        std::ifstream in(scores_path);
        if (!in) throw std::runtime_error("cannot read " + scores_path.string());
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            json j = json::parse(line);
            scoring::EventScore s;
            s.key = {j.at("agent_id").get<std::int64_t>(), j.at("day").get<int>(),
                     j.at("event_index").get<int>()};
            s.losses.st = j.at("loss_st").get<double>();
            s.losses.sd = j.at("loss_sd").get<double>();
            s.losses.x = j.at("loss_x").get<double>();
            s.losses.y = j.at("loss_y").get<double>();
            s.losses.poi = j.at("loss_poi").get<double>();
            s.losses.dow = j.at("loss_dow").get<double>();
            s.errors.st = j.at("err_st").get<double>();
            s.errors.sd = j.at("err_sd").get<double>();
            s.errors.x = j.at("err_x").get<double>();
            s.errors.y = j.at("err_y").get<double>();
            s.errors.poi = j.at("err_poi").get<double>();
            s.errors.dow = j.at("err_dow").get<double>();
            s.pred.st_minutes = j.at("pred_st").get<double>();
            s.pred.sd = j.at("pred_sd").get<double>();
            s.pred.x = j.at("pred_x").get<double>();
            s.pred.y = j.at("pred_y").get<double>();
            s.pred.poi = j.at("pred_poi").get<int>();
            s.pred.dow = j.at("pred_dow").get<int>();
            s.obs_st_min = j.at("obs_st").get<double>();
            s.obs_sd = j.at("obs_sd").get<double>();
            s.obs_x = j.at("obs_x").get<double>();
            s.obs_y = j.at("obs_y").get<double>();
            s.obs_poi = j.at("obs_poi").get<int>();
            s.obs_dow = j.at("obs_dow").get<int>();
            s.knn_raw = j.at("knn").get<double>();
            s.loss_pct = j.at("loss_pct").get<double>();
            s.knn_pct = j.at("knn_pct").get<double>();
            s.score = j.at("as").get<double>();
            s.label = j.at("label").get<bool>();
            out.push_back(std::move(s));
        }
    }
    if (!uncertainty_path.empty() && fs::exists(uncertainty_path)) {
        std::ifstream in(uncertainty_path);
        std::string line;
        std::size_t i = 0;
        while (std::getline(in, line) && i < out.size()) {
            if (line.empty()) continue;
            json j = json::parse(line);
            auto& r = out[i].report;
            r.alpha_st = j.at("alpha_st").get<double>();
            r.beta_st = j.at("beta_st").get<double>();
            r.alpha_sd = j.at("alpha_sd").get<double>();
            r.beta_sd = j.at("beta_sd").get<double>();
            r.alpha_x = j.at("alpha_x").get<double>();
            r.beta_x = j.at("beta_x").get<double>();
            r.alpha_y = j.at("alpha_y").get<double>();
            r.beta_y = j.at("beta_y").get<double>();
            r.alpha_poi = j.at("alpha_poi").get<double>();
            r.beta_poi = j.at("beta_poi").get<double>();
            r.alpha_dow = j.at("alpha_dow").get<double>();
            r.beta_dow = j.at("beta_dow").get<double>();
            ++i;
        }
    }
    return out;
}

inline void write_agent_csv(const fs::path& path, const std::map<std::int64_t, double>& agent_scores,
                            const std::map<std::int64_t, bool>& agent_labels) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "agent_id,agent_score,label\n";
    out.precision(17);
    for (const auto& [agent, score] : agent_scores) {
        const auto it = agent_labels.find(agent);
        out << agent << "," << score << "," << (it != agent_labels.end() && it->second ? 1 : 0)
            << "\n";
    }
}

// ---------------------------------------------------------------------------
// percentile references
// ---------------------------------------------------------------------------

inline void write_refs_json(const fs::path& path, const scoring::ScoreRefs& refs) {
    json j;
    j["loss"] = refs.loss.sorted();
    j["knn"] = refs.knn.sorted();
    const char* names[6] = {"err_st", "err_sd", "err_x", "err_y", "err_poi", "err_dow"};
    for (int f = 0; f < 6; ++f) j[names[f]] = refs.err[static_cast<std::size_t>(f)].sorted();
    j["pe_au_eu"] = refs.pe_au_eu.sorted();
    j["eu"] = refs.eu.sorted();
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump() << "\n";
}

inline scoring::ScoreRefs read_refs_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    json j = json::parse(in);
    scoring::ScoreRefs refs;
    refs.loss = scoring::PercentileRef::fit(j.at("loss").get<std::vector<double>>());
    refs.knn = scoring::PercentileRef::fit(j.at("knn").get<std::vector<double>>());
    const char* names[6] = {"err_st", "err_sd", "err_x", "err_y", "err_poi", "err_dow"};
    for (int f = 0; f < 6; ++f)
        refs.err.push_back(scoring::PercentileRef::fit(j.at(names[f]).get<std::vector<double>>()));
    refs.pe_au_eu = scoring::PercentileRef::fit(j.at("pe_au_eu").get<std::vector<double>>());
    refs.eu = scoring::PercentileRef::fit(j.at("eu").get<std::vector<double>>());
    return refs;
}

// ---------------------------------------------------------------------------
// stage manifests
// ---------------------------------------------------------------------------

constexpr int kSchemaVersion = 1;

struct Manifest {
    std::string stage;
    int schema_version = kSchemaVersion;
    std::uint64_t seed = 0;
    std::string config_hash;
    std::map<std::string, std::string> inputs;   // path -> content hash
    std::map<std::string, std::string> outputs;  // path -> content hash
};

inline void write_manifest(const fs::path& path, const Manifest& m) {
    json j;
    j["stage"] = m.stage;
    j["schema_version"] = m.schema_version;
    j["seed"] = m.seed;
    j["config_hash"] = m.config_hash;
    j["inputs"] = m.inputs;
    j["outputs"] = m.outputs;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

inline Manifest read_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    json j = json::parse(in);
    Manifest m;
    m.stage = j.at("stage").get<std::string>();
    m.schema_version = j.at("schema_version").get<int>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
    m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
    return m;
}

}  // namespace ustad::io
