#pragma once

// Evaluation toolkit: rank-based AUROC (tie-adjusted), step-integrated AUPR,
// masked-prediction MAE/MAPE/ACC, prediction-with-rejection sweeps, the
// EU-vs-training-size study and the injection-detection benchmark.

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "ustad/scoring.hpp"
#include "ustad/synthgen.hpp"
#include "ustad/trainer.hpp"

namespace ustad::evalkit {

// ---------------------------------------------------------------------------
// ranking metrics
// ---------------------------------------------------------------------------

inline void check_two_classes(const std::vector<bool>& labels) {
    bool pos = false, neg = false;
    for (bool l : labels) (l ? pos : neg) = true;
    if (!pos || !neg) throw std::invalid_argument("metric: labels contain a single class");
}

/// Tie-adjusted rank AUROC (Mann-Whitney).
inline double auroc(const std::vector<double>& scores, const std::vector<bool>& labels) {
    if (scores.size() != labels.size()) throw std::invalid_argument("auroc: size mismatch");
    check_two_classes(labels);
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t l, std::size_t r) { return scores[l] < scores[r]; });
    // average ranks over ties
    std::vector<double> rank(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double avg = 0.5 * (double(i + 1) + double(j + 1));
        for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
        i = j + 1;
    }
    double rank_pos = 0.0;
    std::size_t n_pos = 0;
    for (std::size_t k = 0; k < n; ++k)
        if (labels[k]) {
            rank_pos += rank[k];
            ++n_pos;
        }
    const std::size_t n_neg = n - n_pos;
    return (rank_pos - double(n_pos) * double(n_pos + 1) / 2.0) / (double(n_pos) * double(n_neg));
}

/// Exact null standard deviation of AUROC for label-independent scores.
inline double null_auroc_sigma(std::size_t n_pos, std::size_t n_neg) {
    return std::sqrt(double(n_pos + n_neg + 1) / (12.0 * double(n_pos) * double(n_neg)));
}

/// Step-integrated area under the precision-recall curve (ties grouped).
inline double aupr(const std::vector<double>& scores, const std::vector<bool>& labels) {
    if (scores.size() != labels.size()) throw std::invalid_argument("aupr: size mismatch");
    check_two_classes(labels);
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t l, std::size_t r) { return scores[l] > scores[r]; });
    std::size_t total_pos = 0;
    for (bool l : labels) total_pos += l ? 1 : 0;
    double area = 0.0;
    std::size_t tp = 0, fp = 0;
    double prev_recall = 0.0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        for (std::size_t k = i; k <= j; ++k) (labels[order[k]] ? tp : fp) += 1;
        const double recall = double(tp) / double(total_pos);
        const double precision = double(tp) / double(tp + fp);
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    return area;
}

// ---------------------------------------------------------------------------
// masked-prediction metrics
// ---------------------------------------------------------------------------

struct PredictionMetrics {
    double mae_st = 0, mae_sd = 0, mae_x = 0, mae_y = 0;       // natural units
    double mape_st = 0, mape_sd = 0, mape_x = 0, mape_y = 0;   // percent
    double acc_poi = 0, acc_dow = 0;
    std::size_t n = 0;
};

constexpr double kMapeGuard = 1e-3;

inline PredictionMetrics prediction_metrics(const std::vector<scoring::EventScore>& scores) {
    PredictionMetrics m;
    if (scores.empty()) return m;
    std::size_t n_st = 0, n_sd = 0, n_x = 0, n_y = 0;
    for (const auto& s : scores) {
        m.mae_st += s.errors.st;
        m.mae_sd += s.errors.sd;
        m.mae_x += s.errors.x;
        m.mae_y += s.errors.y;
        if (std::abs(s.obs_st_min) > kMapeGuard) {
            m.mape_st += s.errors.st / std::abs(s.obs_st_min) * 100.0;
            ++n_st;
        }
        if (std::abs(s.obs_sd) > kMapeGuard) {
            m.mape_sd += s.errors.sd / std::abs(s.obs_sd) * 100.0;
            ++n_sd;
        }
        if (std::abs(s.obs_x) > kMapeGuard) {
            m.mape_x += s.errors.x / std::abs(s.obs_x) * 100.0;
            ++n_x;
        }
        if (std::abs(s.obs_y) > kMapeGuard) {
            m.mape_y += s.errors.y / std::abs(s.obs_y) * 100.0;
            ++n_y;
        }
        m.acc_poi += s.pred.poi == s.obs_poi ? 1.0 : 0.0;
        m.acc_dow += s.pred.dow == s.obs_dow ? 1.0 : 0.0;
        ++m.n;
    }
    const double dn = double(m.n);
    m.mae_st /= dn;
    m.mae_sd /= dn;
    m.mae_x /= dn;
    m.mae_y /= dn;
    m.mape_st = n_st ? m.mape_st / double(n_st) : 0.0;
    m.mape_sd = n_sd ? m.mape_sd / double(n_sd) : 0.0;
    m.mape_x = n_x ? m.mape_x / double(n_x) : 0.0;
    m.mape_y = n_y ? m.mape_y / double(n_y) : 0.0;
    m.acc_poi /= dn;
    m.acc_dow /= dn;
    return m;
}

// ---------------------------------------------------------------------------
// prediction with rejection
// ---------------------------------------------------------------------------

struct RejectionPoint {
    double keep_fraction = 1.0;
    std::size_t kept = 0;
    PredictionMetrics metrics;
};

/// Drops the top reject_fraction of events by total uncertainty
/// (sum of all alpha and beta entries); ties broken by a seeded shuffle.
inline RejectionPoint rejection_eval(const std::vector<scoring::EventScore>& scores,
                                     double reject_fraction, std::uint64_t seed) {
    if (!(reject_fraction >= 0.0 && reject_fraction < 1.0))
        throw std::invalid_argument("rejection_eval: reject_fraction must be in [0,1)");
    if (scores.empty()) throw std::invalid_argument("rejection_eval: no scores");
    std::vector<std::size_t> order(scores.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(seed, 0x4E3Cull));
    rng.shuffle(order);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t l, std::size_t r) {
        return scores[l].report.total() < scores[r].report.total();
    });
    const auto keep = static_cast<std::size_t>(
        std::llround((1.0 - reject_fraction) * double(scores.size())));
    if (keep == 0) throw std::invalid_argument("rejection_eval: all samples rejected");
    std::vector<scoring::EventScore> kept;
    kept.reserve(keep);
    for (std::size_t i = 0; i < keep; ++i) kept.push_back(scores[order[i]]);
    RejectionPoint p;
    p.keep_fraction = 1.0 - reject_fraction;
    p.kept = keep;
    p.metrics = prediction_metrics(kept);
    return p;
}

inline std::vector<RejectionPoint> rejection_sweep(const std::vector<scoring::EventScore>& scores,
                                                   const std::vector<double>& keep_fractions,
                                                   std::uint64_t seed) {
    std::vector<RejectionPoint> out;
    for (double kf : keep_fractions) out.push_back(rejection_eval(scores, 1.0 - kf, seed));
    return out;
}

// ---------------------------------------------------------------------------
// EU vs training-data-size study
// ---------------------------------------------------------------------------

struct UncertaintyMeans {
    double alpha_st = 0, beta_st = 0;
    double alpha_sd = 0, beta_sd = 0;
    double alpha_x = 0, beta_x = 0;
    double alpha_y = 0, beta_y = 0;
    double alpha_poi = 0, beta_poi = 0;
    double alpha_dow = 0, beta_dow = 0;
};

inline UncertaintyMeans mean_report(const std::vector<scoring::EventScore>& scores) {
    UncertaintyMeans m;
    if (scores.empty()) return m;
    for (const auto& s : scores) {
        m.alpha_st += s.report.alpha_st;
        m.beta_st += s.report.beta_st;
        m.alpha_sd += s.report.alpha_sd;
        m.beta_sd += s.report.beta_sd;
        m.alpha_x += s.report.alpha_x;
        m.beta_x += s.report.beta_x;
        m.alpha_y += s.report.alpha_y;
        m.beta_y += s.report.beta_y;
        m.alpha_poi += s.report.alpha_poi;
        m.beta_poi += s.report.beta_poi;
        m.alpha_dow += s.report.alpha_dow;
        m.beta_dow += s.report.beta_dow;
    }
    const double n = double(scores.size());
    for (double* v : {&m.alpha_st, &m.beta_st, &m.alpha_sd, &m.beta_sd, &m.alpha_x, &m.beta_x,
                      &m.alpha_y, &m.beta_y, &m.alpha_poi, &m.beta_poi, &m.alpha_dow, &m.beta_dow})
        *v /= n;
    return m;
}

struct DataSizeRow {
    int train_weeks = 0;
    std::size_t train_windows = 0;
    UncertaintyMeans means;
};

/// Restricts the train period to days >= lo_day so the kNN index matches the
/// nested training subset.
inline LabeledDataset ds_subset_for_index(const LabeledDataset& ds, int lo_day) {
    LabeledDataset out = ds;
    for (auto& a : out.agents) {
        std::vector<StayEvent> evs;
        std::vector<std::uint8_t> labs;
        for (std::size_t i = 0; i < a.events.size(); ++i)
            if (a.events[i].day >= lo_day) {
                evs.push_back(a.events[i]);
                labs.push_back(a.labels[i]);
            }
        a.events = std::move(evs);
        a.labels = std::move(labs);
    }
    return out;
}

struct StudyOptions {
    seqmodel::TrainOptions train;
    scoring::ScoringOptions score;
    std::size_t max_eval_events = 2000;
    std::uint64_t model_init_seed = 1;
};

/// Trains one model per requested week count on nested suffixes of the train
/// period (all ending at the train/val boundary), scores the same capped
/// test slice, and reports mean per-feature uncertainties.
template <class Real>
std::vector<DataSizeRow> eu_vs_datasize_study(const LabeledDataset& ds,
                                              const seqmodel::ModelConfig& cfg,
                                              const std::vector<int>& train_weeks,
                                              const StudyOptions& opts) {
    if (train_weeks.empty()) throw std::invalid_argument("eu_vs_datasize_study: no sizes");
    std::vector<DataSizeRow> rows;
    for (int weeks : train_weeks) {
        const int lo_day = std::max(0, ds.split.train_end_day - weeks * 7);
        std::vector<StayEvent> train_events;
        std::vector<EventSequence> train_windows;
        for (const auto& a : ds.agents) {
            for (const auto& e : a.events)
                if (e.day >= lo_day && e.day < ds.split.train_end_day) train_events.push_back(e);
            auto wins = staypoint::build_windows(a.events, cfg.w, cfg.max_len);
            for (auto& w : wins)
                if (w.target_day >= lo_day && w.target_day < ds.split.train_end_day) {
                    // clip window context to the nested subset
                    auto& evs = w.events;
                    evs.erase(std::remove_if(evs.begin(), evs.end(),
                                             [&](const StayEvent& e) { return e.day < lo_day; }),
                              evs.end());
                    if (!evs.empty()) train_windows.push_back(std::move(w));
                }
        }
        auto stats = seqmodel::compute_norm_stats(train_events.begin(), train_events.end(),
                                                  cfg.time_radius);
        seqmodel::Model<Real> model(cfg, stats, opts.model_init_seed);
        seqmodel::train(model, train_windows, {}, opts.train);
        auto index = scoring::build_train_index(ds_subset_for_index(ds, lo_day), model,
                                                opts.train.n_threads);
        auto test_scores =
            scoring::detail::score_period(ds, model, index, opts.score, false, opts.max_eval_events);
        DataSizeRow row;
        row.train_weeks = weeks;
        row.train_windows = train_windows.size();
        row.means = mean_report(test_scores);
        rows.push_back(row);
    }
    return rows;
}

// ---------------------------------------------------------------------------
// injection benchmark
// ---------------------------------------------------------------------------

struct BenchmarkCell {
    double auroc = 0.0;
    double aupr = 0.0;
};

struct BenchmarkRow {
    std::string injection;
    std::map<std::string, BenchmarkCell> by_variant;
    std::size_t n_events = 0;
    std::size_t n_anomalous = 0;
};

struct BenchmarkOptions {
    scoring::ScoringOptions score;
    std::size_t max_normal_agents = 120;  // scored agents = anomalous + this many normals
};

/// Event-level AUROC/AUPR per (injection set x scoring variant) against one
/// trained model. References come from the clean dataset's validation split
/// (injections never touch it) and are shared across variants.
template <class Real>
BenchmarkRow injection_benchmark_row(const std::string& name, const LabeledDataset& clean,
                                     const std::vector<synthgen::InjectionSpec>& specs,
                                     const seqmodel::Model<Real>& model,
                                     const scoring::TrainIndex& index,
                                     const scoring::ScoreRefs& refs,
                                     const std::vector<scoring::ScoreVariant>& variants,
                                     const BenchmarkOptions& opts) {
    const LabeledDataset injected = synthgen::inject_anomalies(clean, specs);

    // scored agents: all anomalous plus a seeded sample of normals
    std::vector<std::int64_t> anomalous, normal;
    for (std::size_t a = 0; a < injected.agents.size(); ++a)
        (injected.agent_label(a) ? anomalous : normal).push_back(injected.agents[a].agent_id);
    Rng rng(derive_seed(opts.score.seed, 0xBE7Cull));
    rng.shuffle(normal);
    if (normal.size() > opts.max_normal_agents) normal.resize(opts.max_normal_agents);
    scoring::ScoringOptions sopts = opts.score;
    sopts.agent_subset = anomalous;
    sopts.agent_subset.insert(sopts.agent_subset.end(), normal.begin(), normal.end());

    auto scores = scoring::detail::score_period(injected, model, index, sopts, false, 0);
    std::vector<bool> labels;
    labels.reserve(scores.size());
    for (const auto& s : scores) labels.push_back(s.label);

    BenchmarkRow row;
    row.injection = name;
    row.n_events = scores.size();
    for (bool l : labels) row.n_anomalous += l ? 1 : 0;
    for (auto v : variants) {
        std::vector<double> vals;
        vals.reserve(scores.size());
        for (const auto& s : scores) vals.push_back(scoring::ablation_score(v, s, refs));
        BenchmarkCell cell;
        cell.auroc = auroc(vals, labels);
        cell.aupr = aupr(vals, labels);
        row.by_variant[scoring::variant_name(v)] = cell;
    }
    return row;
}

}  // namespace ustad::evalkit
