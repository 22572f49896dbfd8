#include <catch2/catch_amalgamated.hpp>

#include "support/oracles.hpp"
#include "ustad/scoring.hpp"

using namespace ustad;
using namespace ustad::scoring;

namespace {

TrainIndex make_index(int rows, int dim, std::uint64_t seed) {
    TrainIndex idx;
    idx.emb.resize(rows, dim);
    Rng rng(seed);
    for (auto& v : idx.emb.a) v = rng.normal(0, 2);
    for (int i = 0; i < rows; ++i) idx.keys.push_back({i, 0, 0});
    return idx;
}

}  // namespace

TEST_CASE("knn distance basics") {
    TrainIndex idx;
    idx.emb.resize(2, 2);
    idx.emb.at(0, 0) = 0;
    idx.emb.at(0, 1) = 0;
    idx.emb.at(1, 0) = 3;
    idx.emb.at(1, 1) = 4;
    idx.keys = {{0, 0, 0}, {1, 0, 0}};
    const double q0[2] = {0, 0};
    CHECK(knn_distance(q0, idx, 1) == 0.0);
    const double q1[2] = {3, 0};
    CHECK(knn_distance(q1, idx, 1) == Catch::Approx(3.0));
    CHECK(knn_distance(q0, idx, 2) == Catch::Approx(2.5));  // (0 + 5) / 2
    CHECK_THROWS_AS(knn_distance(q0, idx, 3), std::invalid_argument);
    CHECK_THROWS_AS(knn_distance(q0, idx, 0), std::invalid_argument);
}

TEST_CASE("knn equals k duplicated rows at distance zero") {
    TrainIndex idx;
    idx.emb.resize(5, 3);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 3; ++j) idx.emb.at(i, j) = 1.5;
    for (int i = 0; i < 5; ++i) idx.keys.push_back({i, 0, 0});
    const double q[3] = {1.5, 1.5, 1.5};
    CHECK(knn_distance(q, idx, 5) == 0.0);
}

TEST_CASE("knn matches the brute-force full-sort oracle exactly") {
    const auto idx = make_index(1000, 8, 17);
    Rng rng(18);
    for (int trial = 0; trial < 25; ++trial) {
        std::vector<double> q(8);
        for (auto& v : q) v = rng.normal(0, 2);
        for (int k : {1, 5, 150}) {
            const double got = knn_distance(q.data(), idx, k);
            const double want = oracles::brute_force_knn(q.data(), idx, k);
            REQUIRE(got == want);  // bit-exact: same summation order
        }
    }
}

TEST_CASE("knn is invariant under joint orthogonal transforms") {
    const auto idx = make_index(60, 2, 19);
    Rng rng(20);
    const double c = std::cos(0.7), s = std::sin(0.7);
    TrainIndex rot;
    rot.emb.resize(60, 2);
    for (int i = 0; i < 60; ++i) {
        rot.emb.at(i, 0) = c * idx.emb.at(i, 0) - s * idx.emb.at(i, 1);
        rot.emb.at(i, 1) = s * idx.emb.at(i, 0) + c * idx.emb.at(i, 1);
    }
    rot.keys = idx.keys;
    for (int trial = 0; trial < 10; ++trial) {
        const double q[2] = {rng.normal(), rng.normal()};
        const double qr[2] = {c * q[0] - s * q[1], s * q[0] + c * q[1]};
        CHECK(knn_distance(q, idx, 7) == Catch::Approx(knn_distance(qr, rot, 7)).epsilon(1e-12));
    }
}

TEST_CASE("percentile transform boundary and median cases") {
    auto ref = PercentileRef::fit({5.0, 1.0, 3.0, 2.0, 4.0});
    CHECK(ref(0.5) == 0.0);
    CHECK(ref(9.0) == 1.0);
    CHECK(ref(3.0) == Catch::Approx(0.5));  // midpoint rule at the median
    CHECK(ref(2.5) == Catch::Approx(0.4));
    CHECK_THROWS_AS(PercentileRef::fit({}), std::invalid_argument);
}

TEST_CASE("percentile transform is monotone and tie-averaged") {
    auto ref = PercentileRef::fit({1.0, 1.0, 2.0, 2.0});
    CHECK(ref(1.0) == Catch::Approx(0.25));   // (0 + 0.5*2)/4
    CHECK(ref(2.0) == Catch::Approx(0.75));
    double prev = -1.0;
    for (double v : {0.0, 1.0, 1.5, 2.0, 3.0}) {
        CHECK(ref(v) >= prev);
        prev = ref(v);
    }
}

TEST_CASE("event score takes the max of the two percentiles") {
    ScoreRefs refs;
    refs.loss = PercentileRef::fit({1.0, 2.0, 3.0, 4.0});
    refs.knn = PercentileRef::fit({10.0, 20.0, 30.0, 40.0});

    FeatureLosses all_low{};  // every loss below reference minimum
    CHECK(event_score(all_low, 5.0, refs) == 0.0);

    FeatureLosses still_low{};
    CHECK(event_score(still_low, 99.0, refs) == 1.0);  // knn above reference max dominates

    FeatureLosses mid{};
    mid.sd = 2.5;
    double lp = 0, kp = 0;
    const double as = event_score(mid, 15.0, refs, &lp, &kp);
    CHECK(lp == Catch::Approx(0.5));
    CHECK(kp == Catch::Approx(0.25));
    CHECK(as == Catch::Approx(0.5));
}

TEST_CASE("event score is invariant to monotone rescaling of knn values") {
    Rng rng(21);
    std::vector<double> knn_ref;
    for (int i = 0; i < 50; ++i) knn_ref.push_back(rng.uniform(0, 10));
    auto rescale = [](double v) { return std::exp(0.3 * v) + 2.0; };  // strictly monotone
    std::vector<double> knn_ref2;
    for (double v : knn_ref) knn_ref2.push_back(rescale(v));
    ScoreRefs a, b;
    a.loss = b.loss = PercentileRef::fit({1.0, 2.0, 3.0});
    a.knn = PercentileRef::fit(knn_ref);
    b.knn = PercentileRef::fit(knn_ref2);
    FeatureLosses l{};
    l.x = 1.7;
    for (int trial = 0; trial < 20; ++trial) {
        const double knn = rng.uniform(0, 10);
        CHECK(event_score(l, knn, a) == Catch::Approx(event_score(l, rescale(knn), b)));
    }
}

TEST_CASE("agent score is the max over the agent's events") {
    CHECK(agent_score({0.4}) == 0.4);
    CHECK(agent_score({0.2, 0.9, 0.5}) == 0.9);
    auto before = agent_score({0.2, 0.9, 0.5});
    CHECK(agent_score({0.2, 0.9, 0.5, 0.3}) == before);
    CHECK_THROWS_AS(agent_score({}), std::invalid_argument);
}

TEST_CASE("attenuated losses follow the attenuation law") {
    seqmodel::ModelConfig cfg;
    cfg.d = 16;
    cfg.m1 = 1;
    cfg.m2 = 1;
    cfg.n_head = 2;
    cfg.n_poi = 6;
    cfg.ffn_mult = 2;
    cfg.max_per_day = 8;
    cfg.knn_k = 1;
    seqmodel::Model<double> model(cfg, oracles::unit_stats(), 23);

    uncertainty::SampleSet<double> ss;
    seqmodel::DecoderOutput<double> d;
    d.num_mean[seqmodel::kFTimeX] = 1.0;  // predicts midnight
    d.num_mean[seqmodel::kFSd] = 1.0;
    d.num_logvar.fill(0.0);
    for (int fi = 0; fi < seqmodel::kNumCat; ++fi) {
        d.cat_u[static_cast<std::size_t>(fi)].assign(static_cast<std::size_t>(cfg.cat_size(fi)), 0.0);
        d.cat_logsigma[static_cast<std::size_t>(fi)].assign(static_cast<std::size_t>(cfg.cat_size(fi)), -40.0);
    }
    ss.samples.push_back(d);

    StayEvent e;
    e.st = 0.0;  // observed midnight: zero circular residual
    e.sd = 3.0;  // residual 2 against predicted 1
    e.x = 0.0;
    e.y = 0.0;
    e.poi = 2;
    e.dow = 0;

    uncertainty::UncertaintyReport rep;
    rep.beta_st = 1.0;
    rep.beta_sd = 1.0;
    rep.beta_x = 1.0;
    rep.beta_y = 1.0;
    auto L1 = attenuated_losses(e, ss, rep, model, 7);
    CHECK(L1.st == Catch::Approx(0.0).margin(1e-12));
    CHECK(L1.sd == Catch::Approx(2.0));  // (3-1)^2 / (2*1)

    rep.beta_sd = 2.0;  // doubling beta halves the loss
    auto L2 = attenuated_losses(e, ss, rep, model, 7);
    CHECK(L2.sd == Catch::Approx(1.0));

    // sigma ~ 0 reduces the categorical term to plain cross-entropy
    CHECK(L1.poi == Catch::Approx(std::log(double(cfg.n_poi))).margin(1e-6));

    // beta at zero hits the floor guard instead of dividing by zero
    rep.beta_sd = 0.0;
    auto L3 = attenuated_losses(e, ss, rep, model, 7);
    CHECK(std::isfinite(L3.sd));
    CHECK(L3.sd == Catch::Approx(4.0 / (2.0 * kBetaFloor)));
}

TEST_CASE("ablation variants expose the expected structure") {
    Rng rng(29);
    std::vector<EventScore> val;
    for (int i = 0; i < 60; ++i) {
        EventScore s;
        s.losses.sd = rng.uniform(0, 2);
        s.losses.x = rng.uniform(0, 2);
        s.errors.st = rng.uniform(0, 30);
        s.errors.sd = rng.uniform(0, 50);
        s.errors.x = rng.uniform(0, 2);
        s.errors.y = rng.uniform(0, 2);
        s.errors.poi = rng.uniform(0, 1);
        s.errors.dow = rng.uniform(0, 1);
        s.report.alpha_sd = rng.uniform(0, 1);
        s.report.beta_sd = rng.uniform(0, 1);
        s.knn_raw = rng.uniform(0, 5);
        val.push_back(s);
    }
    const auto refs = fit_refs(val);
    EventScore probe = val[7];
    CHECK(ablation_score(ScoreVariant::KNN, probe, refs) ==
          Catch::Approx(refs.knn(probe.knn_raw)));
    CHECK(ablation_score(ScoreVariant::LossKnn, probe, refs) ==
          Catch::Approx(std::max(refs.loss(probe.losses.max_loss()), refs.knn(probe.knn_raw))));
    CHECK(ablation_score(ScoreVariant::Loss, probe, refs) ==
          Catch::Approx(refs.loss(probe.losses.max_loss())));
    CHECK(ablation_score(ScoreVariant::EU, probe, refs) ==
          Catch::Approx(refs.eu(total_alpha(probe.report))));
    // LossKnn always dominates Loss pointwise (max of two nonnegative terms)
    for (const auto& s : val)
        CHECK(ablation_score(ScoreVariant::LossKnn, s, refs) >=
              ablation_score(ScoreVariant::Loss, s, refs));
    CHECK_THROWS_AS(variant_from_name("bogus"), std::invalid_argument);
}

TEST_CASE("train index embeds each train event at its own window position") {
    auto pop = synthgen::generate_population_ex(4, 8, 31);
    auto& ds = pop.dataset;
    seqmodel::ModelConfig cfg;
    cfg.d = 16;
    cfg.m1 = 1;
    cfg.m2 = 1;
    cfg.n_head = 2;
    cfg.n_poi = 28;
    cfg.ffn_mult = 2;
    cfg.w = 1;
    cfg.knn_k = 3;
    std::vector<StayEvent> evs;
    for (auto& a : ds.agents) evs.insert(evs.end(), a.events.begin(), a.events.end());
    const auto stats = seqmodel::compute_norm_stats(evs.begin(), evs.end(), 1.0);
    seqmodel::Model<double> model(cfg, stats, 33);
    const auto index = build_train_index(ds, model, 1);

    std::size_t train_events = 0;
    for (const auto& a : ds.agents)
        for (const auto& e : a.events)
            if (ds.split.is_train(e.day)) ++train_events;
    CHECK(static_cast<std::size_t>(index.rows()) == train_events);

    // spot-check one row against a direct forward
    const auto& key = index.keys[5];
    for (const auto& a : ds.agents) {
        if (a.agent_id != key.agent_id) continue;
        auto wins = staypoint::build_windows(a.events, cfg.w, cfg.max_len);
        for (const auto& w : wins) {
            if (w.target_day != key.day) continue;
            seqmodel::Workspace<double> ws;
            model.forward(w, {}, false, 0, ws);
            for (int i = 0; i < w.length(); ++i)
                if (w.events[static_cast<std::size_t>(i)].day == key.day &&
                    w.events[static_cast<std::size_t>(i)].idx == key.idx)
                    for (int dcol = 0; dcol < cfg.d; ++dcol)
                        CHECK(index.emb.at(5, dcol) == ws.e_bar->at(i, dcol));
        }
    }
}
