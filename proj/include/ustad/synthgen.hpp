#pragma once

// Synthetic mobility population: routine-driven agents (home/work/school
// anchors plus leisure and errands, weekday vs weekend routines, per-agent
// and per-activity noise levels) and the six test-period anomaly injection
// kinds. Everything is a pure function of (config, seed).

#include <algorithm>
#include <array>
#include <tuple>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "ustad/rng.hpp"
#include "ustad/staypoint.hpp"
#include "ustad/types.hpp"

namespace ustad::synthgen {

constexpr int kPoiHome = 0;
constexpr int kPoiWork = 1;
constexpr int kPoiSchool = 2;
constexpr int kFirstLeisurePoi = 3;

struct Venue {
    int poi = 0;
    double x = 0.0;
    double y = 0.0;
};

struct RoutineAnchor {
    int poi = 0;
    double x = 0.0, y = 0.0;        // the agent's habitual venue for this activity
    double typical_start = 0.0;     // minutes of day
    double typical_duration = 0.0;  // median minutes
    double start_sigma = 0.0;       // gaussian start jitter, minutes
    double dur_sigma_log = 0.0;     // lognormal duration jitter
    std::array<bool, 7> dow_mask{};
};

struct AgentProfile {
    std::int64_t agent_id = 0;
    double home_x = 0.0, home_y = 0.0;
    double work_x = 0.0, work_y = 0.0;
    std::vector<RoutineAnchor> routine;
    double noise_mult = 1.0;     // per-agent multiplier on start/duration noise
    double noise_loc_km = 0.02;  // per-event location jitter
    double lunch_p = 0.0;
    double errand_p = 0.0;
};

struct GenConfig {
    int n_poi = 28;
    double city_half_km = 10.0;
    double worker_frac = 0.6;
    double student_frac = 0.2;
};

struct Population {
    LabeledDataset dataset;
    std::vector<Venue> venues;
    std::vector<AgentProfile> profiles;
};

namespace detail {

struct Planned {
    int poi = 0;
    double x = 0.0, y = 0.0;
    double start = 0.0;  // desired minutes of day
    double dur = 0.0;
};

inline double clamp(double v, double lo, double hi) { return std::min(hi, std::max(lo, v)); }

inline std::array<double, kTripFeatureDim> straight_trip(double x0, double y0, double t0, double x1,
                                                         double y1, double t1) {
    if (!(t1 > t0)) return {};
    std::vector<GpsPoint> seg = {{0, t0, x0, y0}, {0, t1, x1, y1}};
    return staypoint::featurize_trip(seg);
}

/// Lays the planned activities onto the day timeline with travel gaps and
/// home bookends; every day starts and ends at home.
inline std::vector<StayEvent> layout_day(const AgentProfile& a, int day, std::vector<Planned> plans,
                                         Rng& rng) {
    const double day0 = double(day) * kMinutesPerDay;
    const int dow = ((day % 7) + 7) % 7;
    std::vector<StayEvent> out;

    auto push_event = [&](int poi, double bx, double by, double st_min, double sd_min,
                          double prev_x, double prev_y, double prev_end, bool first) {
        StayEvent e;
        e.agent_id = a.agent_id;
        e.day = day;
        e.idx = static_cast<int>(out.size());
        e.st = day0 + st_min;
        e.sd = sd_min;
        e.x = bx;
        e.y = by;
        e.poi = poi;
        e.dow = dow;
        if (!first) e.trip = straight_trip(prev_x, prev_y, day0 + prev_end, e.x, e.y, e.st);
        out.push_back(e);
    };

    std::sort(plans.begin(), plans.end(),
              [](const Planned& l, const Planned& r) { return l.start < r.start; });

    if (plans.empty()) {
        push_event(kPoiHome, a.home_x, a.home_y, 0.0, kMinutesPerDay, 0, 0, 0, true);
        return out;
    }

    const double speed_km_min = 0.5;  // 30 km/h door to door
    double cursor = 0.0;
    double px = a.home_x, py = a.home_y;
    double prev_end = 0.0;
    bool first_activity = true;
    for (const auto& p : plans) {
        if (cursor >= 1330.0) break;  // day is full, drop the rest
        const double travel =
            clamp(staypoint::planar_dist(px, py, p.x, p.y) / speed_km_min, 2.0, 45.0);
        double start = std::max(p.start, cursor + travel);
        if (first_activity) {
            start = std::max(start, travel + 10.0);
            // morning stretch at home until departure
            const double dep = start - travel;
            push_event(kPoiHome, a.home_x, a.home_y, 0.0, dep, 0, 0, 0, true);
            px = out.back().x;
            py = out.back().y;
            prev_end = dep;
            first_activity = false;
        }
        if (start >= 1350.0) break;
        double end = clamp(start + std::max(10.0, p.dur), start + 10.0, 1380.0);
        push_event(p.poi, p.x, p.y, start, end - start, px, py, prev_end, false);
        px = out.back().x;
        py = out.back().y;
        prev_end = end;
        cursor = end;
    }
    if (out.empty()) {  // all plans collapsed; stay home
        push_event(kPoiHome, a.home_x, a.home_y, 0.0, kMinutesPerDay, 0, 0, 0, true);
        return out;
    }
    const double travel_home =
        clamp(staypoint::planar_dist(px, py, a.home_x, a.home_y) / speed_km_min, 2.0, 45.0);
    const double ret = std::min(cursor + travel_home, 1435.0);
    push_event(kPoiHome, a.home_x, a.home_y, ret, kMinutesPerDay - ret, px, py, prev_end, false);
    return out;
}

inline std::vector<double> leisure_weights(int n_poi) {
    // Zipf-ish popularity over leisure categories; the tail stays rare so a
    // "least visited POIs" pool exists.
    std::vector<double> w;
    for (int c = kFirstLeisurePoi; c < n_poi; ++c)
        w.push_back(1.0 / std::pow(double(c - kFirstLeisurePoi + 1), 1.15));
    return w;
}

}  // namespace detail

constexpr double kVenueMinSeparationKm = 0.5;

/// Venues keep a minimum separation so distinct stops never fall inside one
/// stay radius of each other.
inline std::vector<Venue> make_city_venues(const GenConfig& cfg, std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0xC17Eull));
    std::vector<Venue> venues;
    auto well_separated = [&](double x, double y) {
        for (const auto& v : venues)
            if (staypoint::planar_dist(x, y, v.x, v.y) < kVenueMinSeparationKm) return false;
        return true;
    };
    for (int c = kFirstLeisurePoi; c < cfg.n_poi; ++c) {
        const int n = 2 + (c % 5);
        for (int v = 0; v < n; ++v) {
            double x = 0.0, y = 0.0;
            do {
                x = rng.uniform(-cfg.city_half_km, cfg.city_half_km);
                y = rng.uniform(-cfg.city_half_km, cfg.city_half_km);
            } while (!well_separated(x, y));
            venues.push_back({c, x, y});
        }
    }
    return venues;
}

inline AgentProfile make_agent_profile(std::int64_t agent_id, const GenConfig& cfg,
                                       const std::vector<Venue>& venues, std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0xA6E0ull, static_cast<std::uint64_t>(agent_id)));
    AgentProfile a;
    a.agent_id = agent_id;
    auto place = [&](double clear_of_x, double clear_of_y, bool check_prev) {
        for (;;) {
            const double x = rng.uniform(-cfg.city_half_km, cfg.city_half_km);
            const double y = rng.uniform(-cfg.city_half_km, cfg.city_half_km);
            bool ok = !check_prev || staypoint::planar_dist(x, y, clear_of_x, clear_of_y) >=
                                         kVenueMinSeparationKm;
            for (const auto& v : venues)
                ok = ok && staypoint::planar_dist(x, y, v.x, v.y) >= kVenueMinSeparationKm;
            if (ok) return std::pair<double, double>{x, y};
        }
    };
    std::tie(a.home_x, a.home_y) = place(0, 0, false);
    std::tie(a.work_x, a.work_y) = place(a.home_x, a.home_y, true);
    a.noise_mult = std::exp(rng.normal(0.0, 0.35));
    a.noise_loc_km = rng.uniform(0.01, 0.03);

    const double kind_draw = rng.uniform01();
    const bool worker = kind_draw < cfg.worker_frac;
    const bool student = !worker && kind_draw < cfg.worker_frac + cfg.student_frac;

    const auto weights = detail::leisure_weights(cfg.n_poi);
    auto pick_leisure_venue = [&]() -> Venue {
        const int cat = kFirstLeisurePoi + static_cast<int>(rng.weighted_index(weights));
        std::vector<const Venue*> pool;
        for (const auto& v : venues)
            if (v.poi == cat) pool.push_back(&v);
        Venue v = *pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(pool.size()) - 1))];
        // one-time habitual-spot offset; visits reuse the exact coordinates
        v.x += detail::clamp(rng.normal(0.0, a.noise_loc_km * 2.0), -0.1, 0.1);
        v.y += detail::clamp(rng.normal(0.0, a.noise_loc_km * 2.0), -0.1, 0.1);
        return v;
    };

    const std::array<bool, 7> weekdays = {true, true, true, true, true, false, false};
    if (worker) {
        RoutineAnchor w;
        w.poi = kPoiWork;
        w.x = a.work_x;
        w.y = a.work_y;
        w.typical_start = detail::clamp(rng.normal(520.0, 40.0), 400.0, 650.0);
        w.typical_duration = 470.0;
        w.start_sigma = 9.0;
        w.dur_sigma_log = 0.07;
        w.dow_mask = weekdays;
        a.routine.push_back(w);
        a.lunch_p = rng.uniform(0.1, 0.45);
    } else if (student) {
        RoutineAnchor s;
        s.poi = kPoiSchool;
        s.x = a.work_x;
        s.y = a.work_y;
        s.typical_start = detail::clamp(rng.normal(490.0, 20.0), 430.0, 560.0);
        s.typical_duration = 400.0;
        s.start_sigma = 7.0;
        s.dur_sigma_log = 0.05;
        s.dow_mask = weekdays;
        a.routine.push_back(s);
    } else {
        // homebody: one or two weekday daytime habits
        const int k = static_cast<int>(rng.uniform_int(1, 2));
        for (int i = 0; i < k; ++i) {
            const Venue v = pick_leisure_venue();
            RoutineAnchor h;
            h.poi = v.poi;
            h.x = v.x;
            h.y = v.y;
            h.typical_start = rng.uniform(540.0, 900.0);
            h.typical_duration = rng.uniform(60.0, 180.0);
            h.start_sigma = 35.0;
            h.dur_sigma_log = 0.45;
            h.dow_mask = weekdays;
            a.routine.push_back(h);
        }
    }

    // evening habit on a few weekdays
    if (rng.bernoulli(0.55)) {
        const Venue v = pick_leisure_venue();
        RoutineAnchor e;
        e.poi = v.poi;
        e.x = v.x;
        e.y = v.y;
        e.typical_start = rng.uniform(1050.0, 1180.0);
        e.typical_duration = rng.uniform(60.0, 140.0);
        e.start_sigma = 40.0;
        e.dur_sigma_log = 0.5;
        for (int d = 0; d < 5; ++d) e.dow_mask[static_cast<std::size_t>(d)] = rng.bernoulli(0.45);
        a.routine.push_back(e);
    }

    // weekend habits, distinct from the weekday routine
    const int wk = static_cast<int>(rng.uniform_int(1, 2));
    for (int i = 0; i < wk; ++i) {
        const Venue v = pick_leisure_venue();
        RoutineAnchor we;
        we.poi = v.poi;
        we.x = v.x;
        we.y = v.y;
        we.typical_start = rng.uniform(600.0, 1100.0);
        we.typical_duration = rng.uniform(80.0, 220.0);
        we.start_sigma = 55.0;
        we.dur_sigma_log = 0.5;
        we.dow_mask[5] = rng.bernoulli(0.75);
        we.dow_mask[6] = rng.bernoulli(0.75);
        a.routine.push_back(we);
    }

    a.errand_p = rng.uniform(0.05, 0.3);
    return a;
}

inline std::vector<StayEvent> generate_agent_day(const AgentProfile& a, const GenConfig& cfg,
                                                 const std::vector<Venue>& venues, int day,
                                                 std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0xDA1ull, static_cast<std::uint64_t>(a.agent_id),
                        static_cast<std::uint64_t>(day)));
    const int dow = ((day % 7) + 7) % 7;
    std::vector<detail::Planned> plans;

    const double m = a.noise_mult;
    bool worked = false;
    double work_start = 0.0, work_end = 0.0;
    for (const auto& anc : a.routine) {
        if (!anc.dow_mask[static_cast<std::size_t>(dow)]) continue;
        if (rng.bernoulli(0.04)) continue;  // occasionally skips a habit
        const double start = detail::clamp(rng.normal(anc.typical_start, anc.start_sigma * m),
                                           60.0, 1340.0);
        const double dur = detail::clamp(rng.lognormal_median(anc.typical_duration, anc.dur_sigma_log * m),
                                         15.0, 760.0);
        if (anc.poi == kPoiWork || anc.poi == kPoiSchool) {
            worked = true;
            work_start = start;
            work_end = start + dur;
            // lunch break splits the block in two
            if (anc.poi == kPoiWork && dur > 300.0 && rng.bernoulli(a.lunch_p)) {
                const double ls = detail::clamp(rng.normal(745.0, 20.0 * m), start + 90.0,
                                                start + dur - 120.0);
                const double ld = detail::clamp(rng.lognormal_median(45.0, 0.25 * m), 20.0, 90.0);
                const auto lw = detail::leisure_weights(cfg.n_poi);
                const int cat = kFirstLeisurePoi + static_cast<int>(rng.weighted_index(lw));
                std::vector<const Venue*> pool;
                for (const auto& v : venues)
                    if (v.poi == cat) pool.push_back(&v);
                const Venue* lv =
                    pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(pool.size()) - 1))];
                plans.push_back({anc.poi, anc.x, anc.y, start, ls - start});
                plans.push_back({lv->poi, lv->x, lv->y, ls, ld});
                plans.push_back({anc.poi, anc.x, anc.y, ls + ld, start + dur - (ls + ld)});
                continue;
            }
        }
        plans.push_back({anc.poi, anc.x, anc.y, start, dur});
    }
    (void)worked;
    (void)work_start;
    (void)work_end;

    if (rng.bernoulli(a.errand_p)) {
        const auto lw = detail::leisure_weights(cfg.n_poi);
        const int cat = kFirstLeisurePoi + static_cast<int>(rng.weighted_index(lw));
        std::vector<const Venue*> pool;
        for (const auto& v : venues)
            if (v.poi == cat) pool.push_back(&v);
        const Venue* ev =
            pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(pool.size()) - 1))];
        const double start = rng.uniform(540.0, 1250.0);
        const double dur = detail::clamp(rng.lognormal_median(35.0, 0.4 * m), 10.0, 150.0);
        plans.push_back({ev->poi, ev->x, ev->y, start, dur});
    }

    return detail::layout_day(a, day, std::move(plans), rng);
}

inline Population generate_population_ex(int n_agents, int n_days, std::uint64_t seed,
                                         const GenConfig& cfg = {}) {
    if (n_agents < 1) throw std::invalid_argument("generate_population: n_agents must be >= 1");
    if (n_days < 7)
        throw std::invalid_argument("generate_population: n_days must be >= 7 (full-week windows)");
    if (cfg.n_poi < kFirstLeisurePoi + 2)
        throw std::invalid_argument("generate_population: n_poi too small");

    Population pop;
    pop.venues = make_city_venues(cfg, seed);
    pop.dataset.split = make_split(n_days);
    pop.dataset.n_poi = cfg.n_poi;
    pop.dataset.agents.reserve(static_cast<std::size_t>(n_agents));
    for (int a = 0; a < n_agents; ++a) {
        AgentProfile prof = make_agent_profile(a, cfg, pop.venues, seed);
        AgentData ad;
        ad.agent_id = a;
        for (int d = 0; d < n_days; ++d) {
            auto day_events = generate_agent_day(prof, cfg, pop.venues, d, seed);
            ad.events.insert(ad.events.end(), day_events.begin(), day_events.end());
        }
        ad.labels.assign(ad.events.size(), 0);
        pop.dataset.agents.push_back(std::move(ad));
        pop.profiles.push_back(std::move(prof));
    }
    return pop;
}

inline LabeledDataset generate_population(int n_agents, int n_days, std::uint64_t seed,
                                          const GenConfig& cfg = {}) {
    return generate_population_ex(n_agents, n_days, seed, cfg).dataset;
}

// ---------------------------------------------------------------------------
// anomaly injection
// ---------------------------------------------------------------------------

struct InjectionSpec {
    enum class Kind { Spatial, Temporal, SpatialTemporal, Swap, Permutation, HighDensity };
    Kind kind = Kind::Spatial;
    double agent_fraction = 0.05;
    std::uint64_t rng_seed = 0;
    // temporal alteration magnitudes
    double shift_min_lo = 120.0, shift_min_hi = 360.0;
    double dur_scale_lo = 2.0, dur_scale_hi = 4.0;
    // window lengths (days)
    int permutation_window = 6;
    int high_density_window = 3;
    int high_density_lo = 12, high_density_hi = 16;  // events per day
    int bottom_poi_count = 20;

    void validate() const {
        if (!(agent_fraction > 0.0 && agent_fraction <= 1.0))
            throw std::invalid_argument("InjectionSpec: agent_fraction must be in (0,1]");
        if (permutation_window < 1 || high_density_window < 1)
            throw std::invalid_argument("InjectionSpec: window lengths must be positive");
        if (shift_min_hi < shift_min_lo || dur_scale_hi < dur_scale_lo)
            throw std::invalid_argument("InjectionSpec: bad magnitude range");
    }
};

inline const char* kind_name(InjectionSpec::Kind k) {
    switch (k) {
        case InjectionSpec::Kind::Spatial: return "spatial";
        case InjectionSpec::Kind::Temporal: return "temporal";
        case InjectionSpec::Kind::SpatialTemporal: return "spatial_temporal";
        case InjectionSpec::Kind::Swap: return "swap";
        case InjectionSpec::Kind::Permutation: return "permutation";
        case InjectionSpec::Kind::HighDensity: return "high_density";
    }
    return "?";
}

inline InjectionSpec::Kind kind_from_name(const std::string& s) {
    using K = InjectionSpec::Kind;
    if (s == "spatial") return K::Spatial;
    if (s == "temporal") return K::Temporal;
    if (s == "spatial_temporal") return K::SpatialTemporal;
    if (s == "swap") return K::Swap;
    if (s == "permutation") return K::Permutation;
    if (s == "high_density") return K::HighDensity;
    throw std::invalid_argument("unknown injection kind: " + s);
}

namespace detail {

struct EventRef {
    std::size_t agent = 0;
    std::size_t pos = 0;
};

inline std::vector<std::size_t> select_agents(const LabeledDataset& ds, double fraction, Rng& rng) {
    const std::size_t n = ds.agents.size();
    const auto n_sel = static_cast<std::size_t>(std::llround(fraction * double(n)));
    if (n_sel == 0) throw std::invalid_argument("inject_anomalies: agent_fraction selects 0 agents");
    return rng.sample_without_replacement(n, n_sel);
}

inline std::vector<std::size_t> test_event_positions(const AgentData& ad, const SplitBoundaries& sp) {
    std::vector<std::size_t> pos;
    for (std::size_t i = 0; i < ad.events.size(); ++i)
        if (sp.is_test(ad.events[i].day)) pos.push_back(i);
    return pos;
}

/// Bottom-k POI categories by empirical visit count (ascending, ties by id).
inline std::vector<int> least_visited_pois(const LabeledDataset& ds, int k) {
    std::vector<std::int64_t> count(static_cast<std::size_t>(ds.n_poi), 0);
    for (const auto& a : ds.agents)
        for (const auto& e : a.events) ++count[static_cast<std::size_t>(e.poi)];
    std::vector<int> order(static_cast<std::size_t>(ds.n_poi));
    for (int i = 0; i < ds.n_poi; ++i) order[static_cast<std::size_t>(i)] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](int l, int r) { return count[static_cast<std::size_t>(l)] < count[static_cast<std::size_t>(r)]; });
    order.resize(static_cast<std::size_t>(std::min<int>(k, ds.n_poi)));
    return order;
}

/// A plausible location for the given category: an observed event of that
/// category anywhere in the dataset, or a uniform point in the data bbox.
inline std::pair<double, double> location_for_poi(const LabeledDataset& ds, int poi, Rng& rng) {
    std::vector<std::pair<double, double>> locs;
    for (const auto& a : ds.agents)
        for (const auto& e : a.events)
            if (e.poi == poi) locs.emplace_back(e.x, e.y);
    if (!locs.empty()) {
        const auto& l = locs[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(locs.size()) - 1))];
        return {l.first + rng.normal(0.0, 0.05), l.second + rng.normal(0.0, 0.05)};
    }
    double lo_x = -1, hi_x = 1, lo_y = -1, hi_y = 1;
    bool first = true;
    for (const auto& a : ds.agents)
        for (const auto& e : a.events) {
            if (first) {
                lo_x = hi_x = e.x;
                lo_y = hi_y = e.y;
                first = false;
            }
            lo_x = std::min(lo_x, e.x);
            hi_x = std::max(hi_x, e.x);
            lo_y = std::min(lo_y, e.y);
            hi_y = std::max(hi_y, e.y);
        }
    return {rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)};
}

inline void alter_spatial(const LabeledDataset& source, StayEvent& e,
                          const std::vector<int>& rare_pois, Rng& rng) {
    std::vector<int> candidates;
    for (int p : rare_pois)
        if (p != e.poi) candidates.push_back(p);
    if (candidates.empty()) throw std::runtime_error("inject_anomalies: no alternative POI available");
    const int new_poi =
        candidates[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(candidates.size()) - 1))];
    const auto [nx, ny] = location_for_poi(source, new_poi, rng);
    e.poi = new_poi;
    e.x = nx;
    e.y = ny;
}

inline void alter_temporal(StayEvent& e, const InjectionSpec& spec, Rng& rng) {
    const double day0 = double(e.day) * kMinutesPerDay;
    const double mag = rng.uniform(spec.shift_min_lo, spec.shift_min_hi);
    const double shift = rng.bernoulli(0.5) ? mag : -mag;
    e.st = clamp(e.st + shift, day0, day0 + kMinutesPerDay - 1.0);
    e.sd = e.sd * rng.uniform(spec.dur_scale_lo, spec.dur_scale_hi);
}

}  // namespace detail

/// Applies the injection specs to the test period only and relabels by
/// diffing against the input, so the label-true set is exactly the mutated
/// set. Train/validation events are never touched.
inline LabeledDataset inject_anomalies(const LabeledDataset& input,
                                       const std::vector<InjectionSpec>& specs) {
    if (input.split.val_end_day >= input.split.n_days)
        throw std::invalid_argument("inject_anomalies: dataset has no test period");
    LabeledDataset ds = input;

    for (const auto& spec : specs) {
        spec.validate();
        Rng rng(derive_seed(spec.rng_seed, 0x1A7Eull, static_cast<std::uint64_t>(spec.kind)));
        const auto& sp = ds.split;
        using K = InjectionSpec::Kind;

        if (spec.kind == K::Swap) {
            if (ds.agents.size() < 2) throw std::invalid_argument("inject_anomalies: Swap needs >= 2 agents");
            auto sel = detail::select_agents(ds, spec.agent_fraction, rng);
            if (sel.size() < 2) throw std::invalid_argument("inject_anomalies: Swap selected < 2 agents");
            for (std::size_t i = 0; i + 1 < sel.size(); i += 2) {
                AgentData& a = ds.agents[sel[i]];
                AgentData& b = ds.agents[sel[i + 1]];
                const int day = static_cast<int>(rng.uniform_int(sp.val_end_day, sp.n_days - 1));
                auto take_day = [&](AgentData& ad) {
                    std::vector<StayEvent> evs;
                    for (const auto& e : ad.events)
                        if (e.day == day) evs.push_back(e);
                    return evs;
                };
                auto day_a = take_day(a);
                auto day_b = take_day(b);
                auto put_day = [&](AgentData& ad, std::vector<StayEvent> evs) {
                    std::vector<StayEvent> merged;
                    bool inserted = false;
                    for (const auto& e : ad.events) {
                        if (e.day == day) {
                            if (!inserted) {
                                int k = 0;
                                for (auto ne : evs) {
                                    ne.agent_id = ad.agent_id;
                                    ne.idx = k++;
                                    merged.push_back(ne);
                                }
                                inserted = true;
                            }
                            continue;
                        }
                        merged.push_back(e);
                    }
                    ad.events = std::move(merged);
                };
                put_day(a, day_b);
                put_day(b, day_a);
            }
        } else {
            auto sel = detail::select_agents(ds, spec.agent_fraction, rng);
            std::vector<int> rare;
            if (spec.kind == K::Spatial || spec.kind == K::SpatialTemporal)
                rare = detail::least_visited_pois(input, spec.bottom_poi_count);

            for (std::size_t ai : sel) {
                AgentData& ad = ds.agents[ai];
                auto test_pos = detail::test_event_positions(ad, sp);
                if (test_pos.empty()) continue;

                switch (spec.kind) {
                    case K::Spatial: {
                        auto& e = ad.events[test_pos[static_cast<std::size_t>(
                            rng.uniform_int(0, static_cast<std::int64_t>(test_pos.size()) - 1))]];
                        detail::alter_spatial(input, e, rare, rng);
                        break;
                    }
                    case K::Temporal: {
                        auto& e = ad.events[test_pos[static_cast<std::size_t>(
                            rng.uniform_int(0, static_cast<std::int64_t>(test_pos.size()) - 1))]];
                        detail::alter_temporal(e, spec, rng);
                        break;
                    }
                    case K::SpatialTemporal: {
                        auto& e = ad.events[test_pos[static_cast<std::size_t>(
                            rng.uniform_int(0, static_cast<std::int64_t>(test_pos.size()) - 1))]];
                        detail::alter_spatial(input, e, rare, rng);
                        detail::alter_temporal(e, spec, rng);
                        break;
                    }
                    case K::Permutation: {
                        const int wlen = std::min(spec.permutation_window, sp.n_days - sp.val_end_day);
                        const int ws = static_cast<int>(
                            rng.uniform_int(sp.val_end_day, sp.n_days - wlen));
                        std::vector<std::size_t> win;
                        for (std::size_t i = 0; i < ad.events.size(); ++i)
                            if (ad.events[i].day >= ws && ad.events[i].day < ws + wlen) win.push_back(i);
                        if (win.size() < 2) break;
                        std::vector<std::size_t> perm(win.size());
                        for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
                        rng.shuffle(perm);
                        std::vector<std::array<double, 2>> xy(win.size());
                        std::vector<int> poi(win.size());
                        for (std::size_t i = 0; i < win.size(); ++i) {
                            xy[i] = {ad.events[win[i]].x, ad.events[win[i]].y};
                            poi[i] = ad.events[win[i]].poi;
                        }
                        for (std::size_t i = 0; i < win.size(); ++i) {
                            auto& e = ad.events[win[i]];
                            e.x = xy[perm[i]][0];
                            e.y = xy[perm[i]][1];
                            e.poi = poi[perm[i]];
                        }
                        break;
                    }
                    case K::HighDensity: {
                        const int wlen = std::min(spec.high_density_window, sp.n_days - sp.val_end_day);
                        const int ws = static_cast<int>(
                            rng.uniform_int(sp.val_end_day, sp.n_days - wlen));
                        std::size_t orig_count = 0;
                        for (const auto& e : ad.events)
                            if (e.day >= ws && e.day < ws + wlen) ++orig_count;
                        std::vector<StayEvent> merged;
                        for (const auto& e : ad.events)
                            if (e.day < ws) merged.push_back(e);
                        const auto per_day_min = static_cast<int>(
                            std::max<std::size_t>(static_cast<std::size_t>(spec.high_density_lo),
                                                  orig_count));
                        for (int d = ws; d < ws + wlen; ++d) {
                            const int n_ev = static_cast<int>(
                                rng.uniform_int(per_day_min, std::max(per_day_min, spec.high_density_hi)));
                            double cursor = rng.uniform(0.0, 90.0);
                            // keep every hop inside the day even for dense replacements
                            const double budget = (kMinutesPerDay - 100.0 - cursor) / double(n_ev);
                            const double max_dur = detail::clamp(budget * 0.6, 12.0, 40.0);
                            const double max_gap = detail::clamp(budget * 0.4, 4.0, 25.0);
                            double px = 0, py = 0, pend = 0;
                            for (int kk = 0; kk < n_ev; ++kk) {
                                // hop to an arbitrary observed location
                                const auto& donor_agent = input.agents[static_cast<std::size_t>(
                                    rng.uniform_int(0, static_cast<std::int64_t>(input.agents.size()) - 1))];
                                const auto& donor = donor_agent.events[static_cast<std::size_t>(
                                    rng.uniform_int(0, static_cast<std::int64_t>(donor_agent.events.size()) - 1))];
                                StayEvent e;
                                e.agent_id = ad.agent_id;
                                e.day = d;
                                e.idx = kk;
                                const double start = cursor + rng.uniform(3.0, max_gap);
                                const double dur = rng.uniform(10.0, max_dur);
                                if (start + dur > kMinutesPerDay - 5.0) break;
                                e.st = double(d) * kMinutesPerDay + start;
                                e.sd = dur;
                                e.x = donor.x + rng.normal(0.0, 0.05);
                                e.y = donor.y + rng.normal(0.0, 0.05);
                                e.poi = donor.poi;
                                e.dow = ((d % 7) + 7) % 7;
                                if (kk > 0)
                                    e.trip = detail::straight_trip(px, py, pend, e.x, e.y, e.st);
                                px = e.x;
                                py = e.y;
                                pend = e.st + e.sd;
                                cursor = start + dur;
                                merged.push_back(e);
                            }
                        }
                        for (const auto& e : ad.events)
                            if (e.day >= ws + wlen) merged.push_back(e);
                        ad.events = std::move(merged);
                        break;
                    }
                    default:
                        throw std::logic_error("unreachable injection kind");
                }
            }
        }
    }

    // relabel by diff
    for (std::size_t ai = 0; ai < ds.agents.size(); ++ai) {
        const AgentData& before = input.agents[ai];
        AgentData& after = ds.agents[ai];
        after.labels.assign(after.events.size(), 0);

        std::map<int, std::vector<std::size_t>> before_days, after_days;
        for (std::size_t i = 0; i < before.events.size(); ++i)
            before_days[before.events[i].day].push_back(i);
        for (std::size_t i = 0; i < after.events.size(); ++i)
            after_days[after.events[i].day].push_back(i);

        for (const auto& [day, apos] : after_days) {
            const auto bit = before_days.find(day);
            const bool count_changed = bit == before_days.end() || bit->second.size() != apos.size();
            for (std::size_t j = 0; j < apos.size(); ++j) {
                if (count_changed) {
                    after.labels[apos[j]] = 1;
                } else {
                    const StayEvent& b = before.events[bit->second[j]];
                    if (!after.events[apos[j]].same_payload(b)) after.labels[apos[j]] = 1;
                }
            }
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// GPS rendering (turns generated events back into a raw track; used by the
// tokenize stage tests and the simulate --emit-gps path)
// ---------------------------------------------------------------------------

inline std::vector<GpsPoint> render_gps(const AgentData& ad, double dt_min = 2.0,
                                        bool trip_points = true, double trip_point_min_km = 0.5) {
    std::vector<GpsPoint> track;
    auto push = [&](double t, double x, double y) {
        if (!track.empty() && !(t > track.back().t)) {
            if (track.back().x == x && track.back().y == y) return;  // duplicate boundary sample
            t = track.back().t + 1e-7;  // colliding timestamps at distinct places (injected data)
        }
        track.push_back({ad.agent_id, t, x, y});
    };
    for (std::size_t i = 0; i < ad.events.size(); ++i) {
        const auto& e = ad.events[i];
        if (trip_points && i > 0) {
            const auto& p = ad.events[i - 1];
            const double gap0 = p.st + p.sd, gap1 = e.st;
            if (gap1 > gap0 &&
                staypoint::planar_dist(p.x, p.y, e.x, e.y) >= trip_point_min_km) {
                for (double f : {1.0 / 3.0, 2.0 / 3.0})
                    push(gap0 + f * (gap1 - gap0), p.x + f * (e.x - p.x), p.y + f * (e.y - p.y));
            }
        }
        for (double t = e.st; t < e.st + e.sd; t += dt_min) push(t, e.x, e.y);
        push(e.st + e.sd, e.x, e.y);
    }
    return track;
}

}  // namespace ustad::synthgen
