#pragma once

// Test-only oracles, independent of the implementation paths they check:
// central finite differences for gradients, brute-force kNN, pair-counting
// AUROC, and small fixture builders.

#include <algorithm>
#include <cmath>
#include <string>
#include <functional>
#include <vector>

#include "ustad/rng.hpp"
#include "ustad/scoring.hpp"
#include "ustad/seqmodel.hpp"
#include "ustad/synthgen.hpp"
#include "ustad/trainer.hpp"

namespace oracles {

/// Central finite difference d f / d x_i over a flat parameter span.
inline std::vector<double> finite_diff(std::vector<double>& x, const std::function<double()>& f,
                                       double h = 1e-5) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double x0 = x[i];
        x[i] = x0 + h;
        const double fp = f();
        x[i] = x0 - h;
        const double fm = f();
        x[i] = x0;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

/// max_i |a_i - b_i| / max(floor, |a_i| + |b_i|). The floor keeps elements
/// whose true gradient is ~0 from amplifying finite-difference noise.
inline double max_rel_err(const std::vector<double>& analytic, const std::vector<double>& numeric,
                          std::size_t* arg = nullptr, double floor = 1e-8) {
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double denom = std::max(floor, std::abs(analytic[i]) + std::abs(numeric[i]));
        const double rel = std::abs(analytic[i] - numeric[i]) / denom;
        if (rel > worst) {
            worst = rel;
            if (arg) *arg = i;
        }
    }
    return worst;
}

/// Brute-force kNN by full sort over (distance, id).
inline double brute_force_knn(const double* query, const ustad::scoring::TrainIndex& index, int k) {
    std::vector<std::pair<double, int>> d;
    for (int i = 0; i < index.rows(); ++i) {
        const double* r = index.emb.row(i);
        double s = 0.0;
        for (int j = 0; j < index.emb.cols; ++j) {
            const double diff = query[j] - r[j];
            s += diff * diff;
        }
        d.emplace_back(std::sqrt(s), i);
    }
    std::sort(d.begin(), d.end());
    double mean = 0.0;
    for (int i = 0; i < k; ++i) mean += d[static_cast<std::size_t>(i)].first;
    return mean / k;
}

/// Pair-counting AUROC with half-credit ties.
inline double pair_count_auroc(const std::vector<double>& scores, const std::vector<bool>& labels) {
    double wins = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (!labels[i]) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j]) continue;
            ++pairs;
            if (scores[i] > scores[j]) wins += 1.0;
            else if (scores[i] == scores[j]) wins += 0.5;
        }
    }
    return wins / double(pairs);
}

/// A random but structurally valid event window for model tests.
inline ustad::EventSequence random_window(int L, int n_poi, std::uint64_t seed) {
    ustad::Rng rng(seed);
    ustad::EventSequence seq;
    seq.agent_id = 1;
    seq.w = 1;
    int day = 10;
    int idx = 0;
    double cursor = day * 1440.0;
    for (int i = 0; i < L; ++i) {
        ustad::StayEvent e;
        e.agent_id = 1;
        if (idx >= 3) {
            ++day;
            idx = 0;
            cursor = day * 1440.0;
        }
        e.day = day;
        e.idx = idx++;
        e.st = cursor + rng.uniform(5.0, 60.0);
        e.sd = rng.uniform(20.0, 300.0);
        cursor = e.st + e.sd;
        e.x = rng.uniform(-5.0, 5.0);
        e.y = rng.uniform(-5.0, 5.0);
        e.poi = static_cast<int>(rng.uniform_int(0, n_poi - 1));
        e.dow = day % 7;
        for (auto& t : e.trip) t = rng.uniform(0.0, 2.0);
        seq.events.push_back(e);
    }
    seq.target_day = day;
    return seq;
}

inline ustad::seqmodel::NormStats unit_stats() { return {}; }

struct GradCheckResult {
    double worst_rel = 0.0;
    std::string worst_block;
    double analytic = 0.0, numeric = 0.0;
};

/// Checks the full analytic backward pass of the model against central
/// finite differences of the same Eq. 8 loss, parameter block by block.
/// Dropout and logit noise are frozen by their seeds, so the loss is a
/// deterministic function of the parameters. The 1e-3 denominator floor
/// compares structurally-zero gradients (e.g. key biases, which softmax
/// shift-invariance kills) absolutely, below finite-difference noise.
inline GradCheckResult model_gradcheck(ustad::seqmodel::Model<double>& model,
                                       const ustad::EventSequence& seq,
                                       const std::vector<int>& mask, bool stochastic,
                                       std::uint64_t seed, double h = 1e-4) {
    using namespace ustad;
    const double scale = 1.0 / double(mask.size());
    seqmodel::Workspace<double> ws;

    auto loss_fn = [&]() {
        model.forward(seq, mask, stochastic, seed, ws);
        double total = 0.0;
        for (int pos : mask)
            total += seqmodel::masked_event_loss<double>(
                model, ws, pos, derive_seed(seed, 0xF00Dull, static_cast<std::uint64_t>(pos)), 1.0,
                nullptr);
        return total * scale;
    };

    // analytic pass
    std::vector<double> grad(model.layout.total, 0.0);
    model.forward(seq, mask, stochastic, seed, ws);
    std::vector<std::pair<int, seqmodel::HeadGrads<double>>> hgs;
    for (int pos : mask) {
        seqmodel::HeadGrads<double> hg;
        seqmodel::masked_event_loss<double>(model, ws, pos,
                                            derive_seed(seed, 0xF00Dull, static_cast<std::uint64_t>(pos)),
                                            scale, &hg);
        hgs.emplace_back(pos, std::move(hg));
    }
    model.backward(seq, ws, hgs, grad);

    GradCheckResult res;
    for (const auto& block : model.layout.blocks) {
        std::vector<double> a(grad.begin() + static_cast<std::ptrdiff_t>(block.offset),
                              grad.begin() + static_cast<std::ptrdiff_t>(block.offset + block.size()));
        std::vector<double> n(block.size());
        for (std::size_t i = 0; i < block.size(); ++i) {
            double& w = model.params[block.offset + i];
            const double w0 = w;
            w = w0 + h;
            const double fp = loss_fn();
            w = w0 - h;
            const double fm = loss_fn();
            w = w0;
            n[i] = (fp - fm) / (2.0 * h);
        }
        std::size_t arg = 0;
        const double rel = max_rel_err(a, n, &arg, 1e-3);
        if (rel > res.worst_rel) {
            res.worst_rel = rel;
            res.worst_block = block.name;
            res.analytic = a[arg];
            res.numeric = n[arg];
        }
    }
    return res;
}

}  // namespace oracles
