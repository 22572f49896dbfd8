#pragma once

// Domain types shared by every module: raw GPS points, tokenized stay
// events, per-target-day event windows, and the labeled dataset container.

#include <array>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace ustad {

constexpr int kTripFeatureDim = 14;
constexpr double kMinutesPerDay = 1440.0;

struct GpsPoint {
    std::int64_t agent_id = 0;
    double t = 0.0;  // minutes since epoch
    double x = 0.0;  // km, city-local planar frame
    double y = 0.0;
};

/// One stay-point event with the full marker vector: start time / stay
/// duration in minutes, planar coordinates in km, POI and day-of-week
/// categories, and the inbound-trip feature vector.
struct StayEvent {
    std::int64_t agent_id = 0;
    int day = 0;              // day index within the dataset
    int idx = 0;              // within-day index, 0-based
    double st = 0.0;          // start time, minutes since epoch
    double sd = 0.0;          // stay duration, minutes
    double x = 0.0;
    double y = 0.0;
    int poi = 0;
    int dow = 0;              // 0 = Monday
    std::array<double, kTripFeatureDim> trip{};

    double time_of_day() const { return st - double(day) * kMinutesPerDay; }

    bool same_payload(const StayEvent& o) const {
        return agent_id == o.agent_id && day == o.day && idx == o.idx && st == o.st &&
               sd == o.sd && x == o.x && y == o.y && poi == o.poi && dow == o.dow &&
               trip == o.trip;
    }
};

/// Events of one agent covering days [target_day - w, target_day], ordered.
struct EventSequence {
    std::int64_t agent_id = 0;
    int target_day = 0;
    int w = 0;
    std::vector<StayEvent> events;

    int length() const { return static_cast<int>(events.size()); }
};

struct SplitBoundaries {
    int train_end_day = 0;  // train days: [0, train_end_day)
    int val_end_day = 0;    // val days:   [train_end_day, val_end_day)
    int n_days = 0;         // test days:  [val_end_day, n_days)

    bool is_train(int day) const { return day < train_end_day; }
    bool is_val(int day) const { return day >= train_end_day && day < val_end_day; }
    bool is_test(int day) const { return day >= val_end_day && day < n_days; }
};

/// 3/1/4-by-date split expressed over days so short runs still divide.
inline SplitBoundaries make_split(int n_days) {
    if (n_days < 7) throw std::invalid_argument("make_split: need at least 7 days");
    SplitBoundaries s;
    s.n_days = n_days;
    s.train_end_day = (n_days * 3) / 8;
    s.val_end_day = (n_days * 4) / 8;
    if (s.train_end_day < 1) s.train_end_day = 1;
    if (s.val_end_day <= s.train_end_day) s.val_end_day = s.train_end_day + 1;
    return s;
}

struct AgentData {
    std::int64_t agent_id = 0;
    std::vector<StayEvent> events;       // ordered by (day, idx)
    std::vector<std::uint8_t> labels;    // parallel to events; 1 = anomalous
};

struct LabeledDataset {
    std::vector<AgentData> agents;
    SplitBoundaries split;
    int n_poi = 0;

    bool agent_label(std::size_t a) const {
        const auto& ad = agents.at(a);
        for (std::size_t i = 0; i < ad.events.size(); ++i)
            if (ad.labels[i] && split.is_test(ad.events[i].day)) return true;
        return false;
    }

    std::size_t total_events() const {
        std::size_t n = 0;
        for (const auto& a : agents) n += a.events.size();
        return n;
    }
};

}  // namespace ustad
