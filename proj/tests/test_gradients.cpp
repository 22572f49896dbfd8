#include <catch2/catch_amalgamated.hpp>

#include "support/oracles.hpp"
#include "ustad/seqmodel.hpp"
#include "ustad/trainer.hpp"

using namespace ustad;
using namespace ustad::seqmodel;

namespace {

ModelConfig grad_config(int m1, int m2) {
    ModelConfig cfg;
    cfg.d = 8;
    cfg.m1 = m1;
    cfg.m2 = m2;
    cfg.n_head = 2;
    cfg.n_poi = 5;
    cfg.ffn_mult = 2;
    cfg.max_len = 8;
    cfg.max_per_day = 6;
    cfg.t_train = 4;
    cfg.w = 1;
    cfg.knn_k = 1;
    return cfg;
}

}  // namespace

TEST_CASE("feature-level block gradients match finite differences") {
    Model<double> model(grad_config(1, 0), oracles::unit_stats(), 41);
    const auto seq = oracles::random_window(6, model.cfg.n_poi, 51);
    const auto res = oracles::model_gradcheck(model, seq, {1, 4}, false, 900);
    INFO("worst block " << res.worst_block << " analytic " << res.analytic << " numeric "
                        << res.numeric);
    CHECK(res.worst_rel < 1e-4);
}

TEST_CASE("event-level block gradients match finite differences") {
    Model<double> model(grad_config(0, 1), oracles::unit_stats(), 42);
    const auto seq = oracles::random_window(6, model.cfg.n_poi, 52);
    const auto res = oracles::model_gradcheck(model, seq, {0, 3}, false, 901);
    INFO("worst block " << res.worst_block << " analytic " << res.analytic << " numeric "
                        << res.numeric);
    CHECK(res.worst_rel < 1e-4);
}

TEST_CASE("full tiny model gradients match finite differences") {
    Model<double> model(grad_config(1, 1), oracles::unit_stats(), 43);
    const auto seq = oracles::random_window(6, model.cfg.n_poi, 53);
    const auto res = oracles::model_gradcheck(model, seq, {2, 5}, false, 902);
    INFO("worst block " << res.worst_block << " analytic " << res.analytic << " numeric "
                        << res.numeric);
    CHECK(res.worst_rel < 1e-4);
}

TEST_CASE("gradients stay correct with dropout active (fixed seed)") {
    Model<double> model(grad_config(1, 1), oracles::unit_stats(), 44);
    model.cfg.dropout_p = 0.1;
    const auto seq = oracles::random_window(6, model.cfg.n_poi, 54);
    const auto res = oracles::model_gradcheck(model, seq, {1}, true, 903);
    INFO("worst block " << res.worst_block << " analytic " << res.analytic << " numeric "
                        << res.numeric);
    CHECK(res.worst_rel < 1e-4);
}

TEST_CASE("training reduces the loss on a learnable pattern") {
    // agents with rigid routines; a few epochs must cut the masked loss
    auto pop = synthgen::generate_population_ex(10, 14, 77);
    auto& ds = pop.dataset;
    std::vector<StayEvent> train_events;
    std::vector<EventSequence> windows;
    for (const auto& a : ds.agents) {
        for (const auto& e : a.events)
            if (ds.split.is_train(e.day)) train_events.push_back(e);
        auto w = staypoint::build_windows(a.events, 2, 64);
        for (auto& win : w)
            if (ds.split.is_train(win.target_day)) windows.push_back(std::move(win));
    }
    ModelConfig cfg;
    cfg.d = 16;
    cfg.m1 = 1;
    cfg.m2 = 2;
    cfg.n_head = 2;
    cfg.n_poi = 28;
    cfg.ffn_mult = 2;
    cfg.w = 2;
    cfg.t_train = 4;
    const auto stats = compute_norm_stats(train_events.begin(), train_events.end(), cfg.time_radius);
    Model<double> model(cfg, stats, 7);
    TrainOptions opts;
    opts.epochs = 3;
    opts.batch_size = 32;
    opts.n_threads = 1;
    opts.seed = 3;
    const auto log = train(model, windows, {}, opts);
    REQUIRE(log.size() == 3);
    CHECK(log[1].train_loss < log[0].train_loss);
    CHECK(log[2].train_loss < log[0].train_loss);
}

TEST_CASE("chunked training is deterministic across worker counts") {
    auto pop = synthgen::generate_population_ex(6, 10, 78);
    auto& ds = pop.dataset;
    std::vector<StayEvent> train_events;
    std::vector<EventSequence> windows;
    for (const auto& a : ds.agents) {
        for (const auto& e : a.events) train_events.push_back(e);
        auto w = staypoint::build_windows(a.events, 1, 64);
        windows.insert(windows.end(), w.begin(), w.end());
    }
    ModelConfig cfg;
    cfg.d = 8;
    cfg.m1 = 1;
    cfg.m2 = 1;
    cfg.n_head = 2;
    cfg.n_poi = 28;
    cfg.ffn_mult = 2;
    cfg.w = 1;
    cfg.t_train = 2;
    const auto stats = compute_norm_stats(train_events.begin(), train_events.end(), cfg.time_radius);

    auto run = [&](int threads) {
        Model<double> model(cfg, stats, 9);
        TrainOptions opts;
        opts.epochs = 2;
        opts.batch_size = 16;
        opts.chunk_size = 4;
        opts.n_threads = threads;
        opts.seed = 5;
        train(model, windows, {}, opts);
        return model.params;
    };
    const auto p1 = run(1);
    const auto p4 = run(4);
    REQUIRE(p1.size() == p4.size());
    for (std::size_t i = 0; i < p1.size(); ++i) REQUIRE(p1[i] == p4[i]);
}
