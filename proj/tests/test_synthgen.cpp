#include <catch2/catch_amalgamated.hpp>

#include <map>
#include <set>

#include "ustad/synthgen.hpp"

using namespace ustad;
using synthgen::InjectionSpec;

namespace {

bool datasets_equal(const LabeledDataset& a, const LabeledDataset& b) {
    if (a.agents.size() != b.agents.size()) return false;
    for (std::size_t i = 0; i < a.agents.size(); ++i) {
        if (a.agents[i].events.size() != b.agents[i].events.size()) return false;
        for (std::size_t j = 0; j < a.agents[i].events.size(); ++j)
            if (!a.agents[i].events[j].same_payload(b.agents[i].events[j])) return false;
        if (a.agents[i].labels != b.agents[i].labels) return false;
    }
    return true;
}

/// (mutated events, labeled events) over the test period; also checks that
/// they are the same set.
std::pair<std::size_t, std::size_t> check_label_soundness(const LabeledDataset& before,
                                                          const LabeledDataset& after) {
    std::size_t mutated = 0, labeled = 0;
    REQUIRE(after.agents.size() == before.agents.size());
    for (std::size_t a = 0; a < after.agents.size(); ++a) {
        std::map<int, std::vector<const StayEvent*>> bdays;
        std::map<int, std::vector<std::size_t>> adays;
        for (const auto& e : before.agents[a].events) bdays[e.day].push_back(&e);
        for (std::size_t i = 0; i < after.agents[a].events.size(); ++i)
            adays[after.agents[a].events[i].day].push_back(i);
        for (const auto& [day, apos] : adays) {
            const auto bit = bdays.find(day);
            const bool count_changed = bit == bdays.end() || bit->second.size() != apos.size();
            for (std::size_t j = 0; j < apos.size(); ++j) {
                const bool lab = after.agents[a].labels[apos[j]] != 0;
                bool changed = count_changed;
                if (!changed) changed = !after.agents[a].events[apos[j]].same_payload(*bit->second[j]);
                CHECK(lab == changed);
                mutated += changed ? 1 : 0;
                labeled += lab ? 1 : 0;
            }
        }
    }
    return {mutated, labeled};
}

}  // namespace

TEST_CASE("generation contract") {
    auto ds = synthgen::generate_population(1, 7, 0);
    REQUIRE(ds.agents.size() == 1);
    const auto& events = ds.agents[0].events;
    std::map<int, std::vector<const StayEvent*>> days;
    for (const auto& e : events) days[e.day].push_back(&e);
    REQUIRE(days.size() == 7);
    for (const auto& [d, evs] : days) {
        CHECK(evs.front()->poi == synthgen::kPoiHome);
        CHECK(evs.back()->poi == synthgen::kPoiHome);
        CHECK(evs.front()->st == Catch::Approx(d * 1440.0));
        CHECK(evs.back()->st + evs.back()->sd == Catch::Approx((d + 1) * 1440.0));
        for (std::size_t i = 1; i < evs.size(); ++i) {
            CHECK(evs[i]->st >= evs[i - 1]->st + evs[i - 1]->sd - 1e-9);  // ordered, non-overlapping
        }
        for (std::size_t i = 0; i < evs.size(); ++i) CHECK(evs[i]->idx == static_cast<int>(i));
    }
    for (const auto& lab : ds.agents[0].labels) CHECK(lab == 0);
}

TEST_CASE("generation is deterministic") {
    auto a = synthgen::generate_population(5, 14, 1234);
    auto b = synthgen::generate_population(5, 14, 1234);
    CHECK(datasets_equal(a, b));
    auto c = synthgen::generate_population(5, 14, 1235);
    CHECK_FALSE(datasets_equal(a, c));
}

TEST_CASE("generation rejects short horizons") {
    CHECK_THROWS_AS(synthgen::generate_population(1, 6, 0), std::invalid_argument);
    CHECK_THROWS_AS(synthgen::generate_population(0, 7, 0), std::invalid_argument);
}

TEST_CASE("event density matches the target band") {
    const int agents = 500, days = 56;
    auto ds = synthgen::generate_population(agents, days, 1);
    const double mean = double(ds.total_events()) / agents / days;
    INFO("mean events/agent/day = " << mean);
    CHECK(mean >= 3.0);
    CHECK(mean <= 8.0);
}

TEST_CASE("spatial injection picks a rare POI and relabels exactly one event") {
    auto ds = synthgen::generate_population(10, 14, 7);
    InjectionSpec spec;
    spec.kind = InjectionSpec::Kind::Spatial;
    spec.agent_fraction = 0.1;  // exactly one agent
    spec.rng_seed = 3;
    auto out = synthgen::inject_anomalies(ds, {spec});
    auto [mutated, labeled] = check_label_soundness(ds, out);
    CHECK(mutated == 1);
    CHECK(labeled == 1);
    // the altered POI is among the 20 least visited of the original dataset
    std::vector<std::int64_t> count(static_cast<std::size_t>(ds.n_poi), 0);
    for (const auto& a : ds.agents)
        for (const auto& e : a.events) ++count[static_cast<std::size_t>(e.poi)];
    std::vector<int> order(static_cast<std::size_t>(ds.n_poi));
    for (int i = 0; i < ds.n_poi; ++i) order[static_cast<std::size_t>(i)] = i;
    std::stable_sort(order.begin(), order.end(), [&](int l, int r) {
        return count[static_cast<std::size_t>(l)] < count[static_cast<std::size_t>(r)];
    });
    std::set<int> rare(order.begin(), order.begin() + 20);
    for (std::size_t a = 0; a < out.agents.size(); ++a)
        for (std::size_t i = 0; i < out.agents[a].events.size(); ++i)
            if (out.agents[a].labels[i]) {
                const auto& e = out.agents[a].events[i];
                CHECK(rare.count(e.poi) == 1);
                CHECK(ds.split.is_test(e.day));
                const auto& orig = ds.agents[a].events[i];
                CHECK(e.poi != orig.poi);
                CHECK((e.x != orig.x || e.y != orig.y));
                CHECK(e.st == orig.st);
                CHECK(e.sd == orig.sd);
            }
}

TEST_CASE("temporal injection alters timing only, in place") {
    auto ds = synthgen::generate_population(10, 14, 8);
    InjectionSpec spec;
    spec.kind = InjectionSpec::Kind::Temporal;
    spec.agent_fraction = 0.3;
    spec.rng_seed = 5;
    auto out = synthgen::inject_anomalies(ds, {spec});
    auto [mutated, labeled] = check_label_soundness(ds, out);
    CHECK(mutated == 3);
    for (std::size_t a = 0; a < out.agents.size(); ++a)
        for (std::size_t i = 0; i < out.agents[a].events.size(); ++i)
            if (out.agents[a].labels[i]) {
                const auto& e = out.agents[a].events[i];
                const auto& orig = ds.agents[a].events[i];
                CHECK(e.poi == orig.poi);
                CHECK(e.x == orig.x);
                CHECK(e.day == orig.day);
                const double shift = std::abs(e.st - orig.st);
                const double scale = e.sd / orig.sd;
                CHECK(shift <= 360.0 + 1e-9);
                CHECK(scale >= 2.0 - 1e-12);
                CHECK(scale <= 4.0 + 1e-12);
            }
}

TEST_CASE("swap exchanges one test day between agent pairs") {
    auto ds = synthgen::generate_population(10, 14, 9);
    InjectionSpec spec;
    spec.kind = InjectionSpec::Kind::Swap;
    spec.agent_fraction = 0.2;  // one pair
    spec.rng_seed = 11;
    auto out = synthgen::inject_anomalies(ds, {spec});
    check_label_soundness(ds, out);
    // exactly two agents have labeled events, all within the same single day
    std::set<std::int64_t> touched;
    std::set<int> days;
    for (const auto& a : out.agents)
        for (std::size_t i = 0; i < a.events.size(); ++i)
            if (a.labels[i]) {
                touched.insert(a.agent_id);
                days.insert(a.events[i].day);
            }
    CHECK(touched.size() == 2);
    CHECK(days.size() == 1);
    CHECK(ds.split.is_test(*days.begin()));
}

TEST_CASE("swap requires at least two agents") {
    auto ds = synthgen::generate_population(1, 14, 10);
    InjectionSpec spec;
    spec.kind = InjectionSpec::Kind::Swap;
    spec.agent_fraction = 1.0;
    CHECK_THROWS_AS(synthgen::inject_anomalies(ds, {spec}), std::invalid_argument);
}

TEST_CASE("zero selected agents is an error and leaves no side effects") {
    auto ds = synthgen::generate_population(10, 14, 11);
    InjectionSpec spec;
    spec.kind = InjectionSpec::Kind::Spatial;
    spec.agent_fraction = 0.01;  // rounds to zero agents
    CHECK_THROWS_AS(synthgen::inject_anomalies(ds, {spec}), std::invalid_argument);
}

TEST_CASE("high-density replaces a window with many short stays") {
    auto ds = synthgen::generate_population(8, 21, 12);
    InjectionSpec spec;
    spec.kind = InjectionSpec::Kind::HighDensity;
    spec.agent_fraction = 0.125;  // one agent
    spec.rng_seed = 13;
    auto out = synthgen::inject_anomalies(ds, {spec});
    std::size_t orig_in_window = 0, new_in_window = 0;
    for (std::size_t a = 0; a < out.agents.size(); ++a) {
        std::set<int> labeled_days;
        for (std::size_t i = 0; i < out.agents[a].events.size(); ++i)
            if (out.agents[a].labels[i]) labeled_days.insert(out.agents[a].events[i].day);
        if (labeled_days.empty()) continue;
        CHECK(labeled_days.size() == 3);
        for (const auto& e : ds.agents[a].events)
            if (labeled_days.count(e.day)) ++orig_in_window;
        for (std::size_t i = 0; i < out.agents[a].events.size(); ++i)
            if (labeled_days.count(out.agents[a].events[i].day)) {
                ++new_in_window;
                CHECK(out.agents[a].labels[i] == 1);
                CHECK(out.agents[a].events[i].sd <= 40.0 + 1e-9);
            }
    }
    REQUIRE(orig_in_window > 0);
    CHECK(new_in_window >= 3 * orig_in_window);
}

TEST_CASE("permutation shuffles spatial features inside a window") {
    auto ds = synthgen::generate_population(8, 21, 13);
    InjectionSpec spec;
    spec.kind = InjectionSpec::Kind::Permutation;
    spec.agent_fraction = 0.25;
    spec.rng_seed = 17;
    auto out = synthgen::inject_anomalies(ds, {spec});
    check_label_soundness(ds, out);
    for (std::size_t a = 0; a < out.agents.size(); ++a)
        for (std::size_t i = 0; i < out.agents[a].events.size(); ++i)
            if (out.agents[a].labels[i]) {
                const auto& e = out.agents[a].events[i];
                const auto& orig = ds.agents[a].events[i];
                CHECK(e.st == orig.st);
                CHECK(e.sd == orig.sd);
                CHECK((e.x != orig.x || e.y != orig.y || e.poi != orig.poi));
            }
}

TEST_CASE("injection locality: train and validation periods are untouched") {
    auto ds = synthgen::generate_population(12, 16, 14);
    std::vector<InjectionSpec> specs;
    for (auto kind : {InjectionSpec::Kind::Spatial, InjectionSpec::Kind::Temporal,
                      InjectionSpec::Kind::Swap, InjectionSpec::Kind::Permutation,
                      InjectionSpec::Kind::HighDensity, InjectionSpec::Kind::SpatialTemporal}) {
        InjectionSpec s;
        s.kind = kind;
        s.agent_fraction = 0.34;
        s.rng_seed = static_cast<std::uint64_t>(kind) + 100;
        specs.push_back(s);
    }
    auto out = synthgen::inject_anomalies(ds, specs);
    for (std::size_t a = 0; a < out.agents.size(); ++a) {
        std::vector<const StayEvent*> bpre, apre;
        for (const auto& e : ds.agents[a].events)
            if (!ds.split.is_test(e.day)) bpre.push_back(&e);
        for (const auto& e : out.agents[a].events)
            if (!out.split.is_test(e.day)) apre.push_back(&e);
        REQUIRE(bpre.size() == apre.size());
        for (std::size_t i = 0; i < bpre.size(); ++i) CHECK(apre[i]->same_payload(*bpre[i]));
    }
    // agent labels are the OR of test-period event labels
    for (std::size_t a = 0; a < out.agents.size(); ++a) {
        bool any = false;
        for (std::size_t i = 0; i < out.agents[a].events.size(); ++i)
            any = any || (out.agents[a].labels[i] && out.split.is_test(out.agents[a].events[i].day));
        CHECK(out.agent_label(a) == any);
    }
}

TEST_CASE("injection is deterministic in the spec seed") {
    auto ds = synthgen::generate_population(10, 14, 15);
    InjectionSpec spec;
    spec.kind = InjectionSpec::Kind::SpatialTemporal;
    spec.agent_fraction = 0.3;
    spec.rng_seed = 77;
    auto a = synthgen::inject_anomalies(ds, {spec});
    auto b = synthgen::inject_anomalies(ds, {spec});
    CHECK(datasets_equal(a, b));
    spec.rng_seed = 78;
    auto c = synthgen::inject_anomalies(ds, {spec});
    CHECK_FALSE(datasets_equal(a, c));
}
