#include <catch2/catch_amalgamated.hpp>

#include "support/oracles.hpp"
#include "ustad/evalkit.hpp"

using namespace ustad;
using namespace ustad::evalkit;

TEST_CASE("auroc on separable and degenerate inputs") {
    CHECK(auroc({0.1, 0.2, 0.8, 0.9}, {false, false, true, true}) == 1.0);
    CHECK(auroc({0.9, 0.8, 0.2, 0.1}, {false, false, true, true}) == 0.0);
    CHECK_THROWS_AS(auroc({0.1, 0.2}, {true, true}), std::invalid_argument);
    CHECK_THROWS_AS(auroc({0.1, 0.2}, {false, false}), std::invalid_argument);
}

TEST_CASE("auroc matches the pair-counting oracle on hand cases") {
    const std::vector<double> s = {0.1, 0.4, 0.35, 0.8, 0.35, 0.7};
    const std::vector<bool> l = {false, false, true, true, false, true};
    CHECK(auroc(s, l) == Catch::Approx(oracles::pair_count_auroc(s, l)).epsilon(1e-12));

    Rng rng(3);
    for (int trial = 0; trial < 40; ++trial) {
        std::vector<double> scores;
        std::vector<bool> labels;
        bool p = false, n = false;
        for (int i = 0; i < 25; ++i) {
            scores.push_back(rng.uniform_int(0, 9));  // integer scores force ties
            labels.push_back(rng.bernoulli(0.3));
            (labels.back() ? p : n) = true;
        }
        if (!p || !n) continue;
        CHECK(auroc(scores, labels) ==
              Catch::Approx(oracles::pair_count_auroc(scores, labels)).epsilon(1e-12));
    }
}

TEST_CASE("auroc under the null stays inside the exact 3-sigma band") {
    Rng rng(5);
    const std::size_t n = 4000;
    std::vector<double> scores;
    std::vector<bool> labels;
    std::size_t n_pos = 0;
    for (std::size_t i = 0; i < n; ++i) {
        scores.push_back(rng.normal());
        labels.push_back(rng.bernoulli(0.2));
        n_pos += labels.back() ? 1 : 0;
    }
    const double sigma = null_auroc_sigma(n_pos, n - n_pos);
    CHECK(std::abs(auroc(scores, labels) - 0.5) <= 3.0 * sigma);
}

TEST_CASE("auroc is invariant under strictly increasing transforms") {
    Rng rng(7);
    std::vector<double> scores;
    std::vector<bool> labels;
    for (int i = 0; i < 200; ++i) {
        scores.push_back(rng.normal(0, 2));
        labels.push_back(rng.bernoulli(0.25 + (scores.back() > 0 ? 0.3 : 0.0)));
    }
    const double base = auroc(scores, labels);
    std::vector<double> warped;
    for (double s : scores) warped.push_back(std::atan(3.0 * s) + 10.0);
    CHECK(auroc(warped, labels) == Catch::Approx(base).epsilon(1e-12));
}

TEST_CASE("aupr basics") {
    CHECK(aupr({0.1, 0.2, 0.8, 0.9}, {false, false, true, true}) == 1.0);
    // prevalence floor: random scorer's AUPR approaches the positive rate
    Rng rng(9);
    std::vector<double> scores;
    std::vector<bool> labels;
    for (int i = 0; i < 5000; ++i) {
        scores.push_back(rng.normal());
        labels.push_back(rng.bernoulli(0.3));
    }
    CHECK(aupr(scores, labels) == Catch::Approx(0.3).margin(0.05));
    // perfect anti-scorer: positives at the bottom
    CHECK(aupr({0.9, 0.8, 0.1}, {false, false, true}) == Catch::Approx(1.0 / 3.0));
}

TEST_CASE("prediction metrics aggregate errors and accuracy") {
    std::vector<scoring::EventScore> scores(2);
    scores[0].errors = {10.0, 20.0, 1.0, 2.0, 0.0, 0.0};
    scores[0].obs_st_min = 100;
    scores[0].obs_sd = 40;
    scores[0].obs_x = 2;
    scores[0].obs_y = 4;
    scores[0].pred.poi = scores[0].obs_poi = 3;
    scores[0].pred.dow = 1;
    scores[0].obs_dow = 2;
    scores[1].errors = {30.0, 40.0, 3.0, 4.0, 0.0, 0.0};
    scores[1].obs_st_min = 200;
    scores[1].obs_sd = 80;
    scores[1].obs_x = 4;
    scores[1].obs_y = 8;
    scores[1].pred.poi = 1;
    scores[1].obs_poi = 2;
    scores[1].pred.dow = scores[1].obs_dow = 5;
    const auto m = prediction_metrics(scores);
    CHECK(m.mae_st == Catch::Approx(20.0));
    CHECK(m.mae_sd == Catch::Approx(30.0));
    CHECK(m.mae_x == Catch::Approx(2.0));
    CHECK(m.acc_poi == Catch::Approx(0.5));
    CHECK(m.acc_dow == Catch::Approx(0.5));
    CHECK(m.mape_sd == Catch::Approx(0.5 * (20.0 / 40 + 40.0 / 80) * 100));
}

TEST_CASE("rejection keeps the least uncertain slice") {
    std::vector<scoring::EventScore> scores;
    for (int i = 0; i < 10; ++i) {
        scoring::EventScore s;
        s.report.alpha_sd = double(i);      // total uncertainty grows with i
        s.errors.sd = double(i) * 10.0;     // so does the error
        s.obs_sd = 100.0;
        scores.push_back(s);
    }
    const auto p0 = rejection_eval(scores, 0.0, 1);
    CHECK(p0.kept == 10);
    CHECK(p0.metrics.mae_sd == Catch::Approx(45.0));
    const auto p5 = rejection_eval(scores, 0.5, 1);
    CHECK(p5.kept == 5);
    CHECK(p5.metrics.mae_sd == Catch::Approx(20.0));  // kept i=0..4
    CHECK_THROWS_AS(rejection_eval(scores, 1.0, 1), std::invalid_argument);

    SECTION("identical uncertainties degrade to a seeded arbitrary subset") {
        for (auto& s : scores) s.report = {};
        const auto a = rejection_eval(scores, 0.3, 42);
        const auto b = rejection_eval(scores, 0.3, 42);
        CHECK(a.metrics.mae_sd == b.metrics.mae_sd);
        CHECK(a.kept == 7);
    }
}

TEST_CASE("rejection at fraction zero converges to unrejected metrics") {
    Rng rng(11);
    std::vector<scoring::EventScore> scores;
    for (int i = 0; i < 50; ++i) {
        scoring::EventScore s;
        s.report.alpha_sd = rng.uniform(0, 1);
        s.errors.sd = rng.uniform(0, 100);
        s.obs_sd = 50;
        scores.push_back(s);
    }
    const auto all = prediction_metrics(scores);
    const auto p = rejection_eval(scores, 0.0, 3);
    CHECK(p.metrics.mae_sd == Catch::Approx(all.mae_sd));
}

TEST_CASE("injection benchmark produces a full variant table") {
    // tiny end-to-end: train briefly, then benchmark one injection kind
    auto pop = synthgen::generate_population_ex(12, 16, 41);
    auto& ds = pop.dataset;
    seqmodel::ModelConfig cfg;
    cfg.d = 16;
    cfg.m1 = 1;
    cfg.m2 = 1;
    cfg.n_head = 2;
    cfg.n_poi = 28;
    cfg.ffn_mult = 2;
    cfg.w = 1;
    cfg.knn_k = 5;
    cfg.t_train = 3;
    std::vector<StayEvent> train_events;
    std::vector<EventSequence> windows;
    for (const auto& a : ds.agents) {
        for (const auto& e : a.events)
            if (ds.split.is_train(e.day)) train_events.push_back(e);
        auto w = staypoint::build_windows(a.events, cfg.w, cfg.max_len);
        for (auto& win : w)
            if (ds.split.is_train(win.target_day)) windows.push_back(std::move(win));
    }
    const auto stats = seqmodel::compute_norm_stats(train_events.begin(), train_events.end(), 1.0);
    seqmodel::Model<double> model(cfg, stats, 43);
    seqmodel::TrainOptions topt;
    topt.epochs = 2;
    topt.batch_size = 32;
    topt.n_threads = 1;
    seqmodel::train(model, windows, {}, topt);
    const auto index = scoring::build_train_index(ds, model, 1);

    scoring::ScoringOptions sopt;
    sopt.t_mc = 4;
    sopt.seed = 5;
    sopt.n_threads = 1;
    sopt.max_val_ref_events = 500;
    const auto clean = scoring::score_dataset(ds, model, index, sopt);

    synthgen::InjectionSpec spec;
    spec.kind = synthgen::InjectionSpec::Kind::Spatial;
    spec.agent_fraction = 0.5;
    spec.rng_seed = 7;
    BenchmarkOptions bopt;
    bopt.score = sopt;
    const auto row = injection_benchmark_row<double>(
        "spatial", ds, {spec}, model, index, clean.refs,
        {scoring::ScoreVariant::Loss, scoring::ScoreVariant::KNN, scoring::ScoreVariant::LossKnn},
        bopt);
    CHECK(row.by_variant.size() == 3);
    CHECK(row.n_anomalous >= 1);
    for (const auto& [name, cell] : row.by_variant) {
        CHECK(cell.auroc >= 0.0);
        CHECK(cell.auroc <= 1.0);
        CHECK(cell.aupr >= 0.0);
        CHECK(cell.aupr <= 1.0);
    }
}

TEST_CASE("empty variant list yields an empty table row") {
    // structural check only; no scoring work happens for zero variants
    auto pop = synthgen::generate_population_ex(4, 8, 47);
    auto& ds = pop.dataset;
    seqmodel::ModelConfig cfg;
    cfg.d = 8;
    cfg.m1 = 0;
    cfg.m2 = 1;
    cfg.n_head = 2;
    cfg.n_poi = 28;
    cfg.ffn_mult = 2;
    cfg.w = 1;
    cfg.knn_k = 2;
    std::vector<StayEvent> evs;
    for (auto& a : ds.agents) evs.insert(evs.end(), a.events.begin(), a.events.end());
    const auto stats = seqmodel::compute_norm_stats(evs.begin(), evs.end(), 1.0);
    seqmodel::Model<double> model(cfg, stats, 48);
    const auto index = scoring::build_train_index(ds, model, 1);
    scoring::ScoringOptions sopt;
    sopt.t_mc = 2;
    sopt.n_threads = 1;
    sopt.max_val_ref_events = 100;
    const auto clean = scoring::score_dataset(ds, model, index, sopt);
    synthgen::InjectionSpec spec;
    spec.kind = synthgen::InjectionSpec::Kind::Temporal;
    spec.agent_fraction = 0.5;
    BenchmarkOptions bopt;
    bopt.score = sopt;
    const auto row = injection_benchmark_row<double>("temporal", ds, {spec}, model, index,
                                                     clean.refs, {}, bopt);
    CHECK(row.by_variant.empty());
}
