#pragma once

// Stay-point tokenization: raw GPS tracks -> stay events with inbound-trip
// features, and per-target-day event windows.

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <vector>

#include "ustad/types.hpp"

namespace ustad::staypoint {

inline double planar_dist(double ax, double ay, double bx, double by) {
    const double dx = ax - bx, dy = ay - by;
    return std::sqrt(dx * dx + dy * dy);
}

/// Fixed-length descriptor of a trip segment:
/// [path_km, displacement_km, duration_min, mean_kmh, max_kmh, straightness,
///  8-bin direction histogram weighted by leg length].
inline std::array<double, kTripFeatureDim> featurize_trip(const std::vector<GpsPoint>& seg) {
    std::array<double, kTripFeatureDim> f{};
    if (seg.size() < 2) return f;  // empty or single point: zero vector

    double path = 0.0;
    double max_speed = 0.0;
    std::array<double, 8> hist{};
    for (std::size_t i = 1; i < seg.size(); ++i) {
        const double d = planar_dist(seg[i - 1].x, seg[i - 1].y, seg[i].x, seg[i].y);
        path += d;
        const double dt = seg[i].t - seg[i - 1].t;
        if (dt > 0.0) max_speed = std::max(max_speed, d / dt * 60.0);
        if (d > 0.0) {
            double ang = std::atan2(seg[i].y - seg[i - 1].y, seg[i].x - seg[i - 1].x);
            if (ang < 0.0) ang += 2.0 * M_PI;
            int bin = static_cast<int>(ang / (M_PI / 4.0));
            if (bin > 7) bin = 7;
            hist[static_cast<std::size_t>(bin)] += d;
        }
    }
    const double disp = planar_dist(seg.front().x, seg.front().y, seg.back().x, seg.back().y);
    const double dur = seg.back().t - seg.front().t;

    f[0] = path;
    f[1] = disp;
    f[2] = dur;
    f[3] = dur > 0.0 ? path / dur * 60.0 : 0.0;  // km/h
    f[4] = max_speed;
    f[5] = path > 0.0 ? disp / path : 0.0;
    for (int b = 0; b < 8; ++b) f[static_cast<std::size_t>(6 + b)] = hist[static_cast<std::size_t>(b)];
    return f;
}

namespace detail {

struct Interval {
    std::size_t first = 0, last = 0;  // inclusive point range
    double cx = 0.0, cy = 0.0;
};

// Greedy maximal geometric clustering: grow [i..j] while every member stays
// within `radius` of the running centroid. Duration filtering happens later,
// so raising min_dwell can only remove events (monotonicity contract).
inline std::vector<Interval> cluster_track(const std::vector<GpsPoint>& track, double radius) {
    std::vector<Interval> out;
    std::size_t i = 0;
    const std::size_t n = track.size();
    while (i < n) {
        double sx = track[i].x, sy = track[i].y;
        std::size_t j = i;
        double cx = sx, cy = sy;
        while (j + 1 < n) {
            const double nsx = sx + track[j + 1].x;
            const double nsy = sy + track[j + 1].y;
            const double cnt = static_cast<double>(j + 2 - i);
            const double ncx = nsx / cnt, ncy = nsy / cnt;
            bool ok = true;
            for (std::size_t p = i; p <= j + 1; ++p) {
                if (planar_dist(track[p].x, track[p].y, ncx, ncy) > radius) {
                    ok = false;
                    break;
                }
            }
            if (!ok) break;
            sx = nsx;
            sy = nsy;
            cx = ncx;
            cy = ncy;
            ++j;
        }
        out.push_back({i, j, cx, cy});
        i = j + 1;
    }
    return out;
}

}  // namespace detail

struct ExtractionResult {
    std::vector<StayEvent> events;
    // trip_segments[k] holds the moving points between events k-1 and k;
    // trip_segments[0] is the (possibly empty) lead-in before the first event.
    std::vector<std::vector<GpsPoint>> trip_segments;
};

/// Detects stay events: maximal point runs within `stay_radius` of their
/// centroid lasting at least `min_dwell` minutes. Intervals spanning midnight
/// are split at day boundaries so events stay day-scoped. Gaps become trip
/// segments and each event's trip features describe its inbound segment.
inline ExtractionResult extract_stay_events(const std::vector<GpsPoint>& track, double min_dwell,
                                            double stay_radius) {
    if (min_dwell <= 0.0) throw std::invalid_argument("extract_stay_events: min_dwell must be > 0");
    if (stay_radius < 0.0) throw std::invalid_argument("extract_stay_events: stay_radius must be >= 0");
    ExtractionResult res;
    if (track.empty()) return res;
    for (std::size_t i = 1; i < track.size(); ++i) {
        if (!(track[i].t > track[i - 1].t))
            throw std::invalid_argument("extract_stay_events: track not strictly time-sorted");
        if (track[i].agent_id != track[0].agent_id)
            throw std::invalid_argument("extract_stay_events: mixed agent ids in one track");
    }

    // candidate stays after the midnight split, dwell-filtered
    struct Stay {
        double st, et, cx, cy;
    };
    std::vector<Stay> stays;
    for (const auto& iv : detail::cluster_track(track, stay_radius)) {
        const double t0 = track[iv.first].t;
        const double t1 = track[iv.last].t;
        int d0 = static_cast<int>(std::floor(t0 / kMinutesPerDay));
        const int d1 = static_cast<int>(std::floor(t1 / kMinutesPerDay));
        double cur = t0;
        while (d0 < d1) {
            const double boundary = double(d0 + 1) * kMinutesPerDay;
            if (boundary - cur >= min_dwell) stays.push_back({cur, boundary, iv.cx, iv.cy});
            cur = boundary;
            ++d0;
        }
        if (t1 - cur >= min_dwell) stays.push_back({cur, t1, iv.cx, iv.cy});
    }

    std::size_t p = 0;
    int prev_day = -1;
    int widx = 0;
    for (const auto& s : stays) {
        std::vector<GpsPoint> seg;  // points since the previous emitted stay
        while (p < track.size() && track[p].t < s.st) {
            seg.push_back(track[p]);
            ++p;
        }
        StayEvent e;
        e.agent_id = track[0].agent_id;
        e.st = s.st;
        e.sd = s.et - s.st;
        e.x = s.cx;
        e.y = s.cy;
        e.day = static_cast<int>(std::floor(e.st / kMinutesPerDay));
        if (e.day != prev_day) {
            widx = 0;
            prev_day = e.day;
        }
        e.idx = widx++;
        e.dow = ((e.day % 7) + 7) % 7;
        e.trip = featurize_trip(seg);
        res.trip_segments.push_back(std::move(seg));
        while (p < track.size() && track[p].t <= s.et) ++p;  // consume stay points
        res.events.push_back(e);
    }
    return res;
}

/// One window per (agent, target day): all of the agent's events in days
/// [d-w, d], truncated to the most recent max_len. Days with no events
/// produce no window.
inline std::vector<EventSequence> build_windows(const std::vector<StayEvent>& agent_events, int w,
                                                int max_len) {
    if (w < 0) throw std::invalid_argument("build_windows: w must be >= 0");
    if (max_len < 1) throw std::invalid_argument("build_windows: max_len must be >= 1");
    std::vector<EventSequence> out;
    if (agent_events.empty()) return out;

    std::map<int, std::pair<std::size_t, std::size_t>> day_span;  // day -> [first, last] index
    for (std::size_t i = 0; i < agent_events.size(); ++i) {
        const int d = agent_events[i].day;
        auto it = day_span.find(d);
        if (it == day_span.end())
            day_span[d] = {i, i};
        else
            it->second.second = i;
    }

    for (const auto& [d, span] : day_span) {
        EventSequence seq;
        seq.agent_id = agent_events.front().agent_id;
        seq.target_day = d;
        seq.w = w;
        const int lo_day = d - w;
        // events are stored in (day, idx) order, so the window is contiguous
        std::size_t first = span.first;
        while (first > 0 && agent_events[first - 1].day >= lo_day) --first;
        for (std::size_t i = first; i <= span.second; ++i) seq.events.push_back(agent_events[i]);
        if (static_cast<int>(seq.events.size()) > max_len)
            seq.events.erase(seq.events.begin(),
                             seq.events.end() - max_len);  // keep the most recent
        out.push_back(std::move(seq));
    }
    return out;
}

}  // namespace ustad::staypoint
