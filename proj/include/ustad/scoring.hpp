#pragma once

// Uncertainty-incorporated anomaly scoring: per-feature attenuated losses,
// exact kNN distance in the encoder embedding space, percentile transforms
// against frozen validation references, the max-of-terms event score, and
// the agent-level max rollup. Ablation variants mirror the scoring study.

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "ustad/linalg.hpp"
#include "ustad/staypoint.hpp"
#include "ustad/trainer.hpp"
#include "ustad/uncertainty.hpp"

namespace ustad::scoring {

struct EventKey {
    std::int64_t agent_id = 0;
    int day = 0;
    int idx = 0;
};

// ---------------------------------------------------------------------------
// train-event embedding index
// ---------------------------------------------------------------------------

struct TrainIndex {
    linalg::Mat<double> emb;  // one row per indexed train event
    std::vector<EventKey> keys;

    int rows() const { return emb.rows; }
};

/// Embeds every train-period event at its own position in its own
/// target-day window under deterministic, unmasked forward.
template <class Real>
TrainIndex build_train_index(const LabeledDataset& ds, const seqmodel::Model<Real>& model,
                             int n_threads = 0) {
    struct Slot {
        EventKey key;
        std::vector<double> row;
    };
    std::vector<std::vector<EventSequence>> per_agent(ds.agents.size());
    for (std::size_t a = 0; a < ds.agents.size(); ++a) {
        auto wins = staypoint::build_windows(ds.agents[a].events, model.cfg.w, model.cfg.max_len);
        for (auto& w : wins)
            if (ds.split.is_train(w.target_day)) per_agent[a].push_back(std::move(w));
    }
    std::vector<std::vector<Slot>> results(ds.agents.size());
    seqmodel::parallel_chunks(
        ds.agents.size(), n_threads, 1, [&](std::size_t, std::size_t lo, std::size_t hi) {
            seqmodel::Workspace<Real> ws;
            for (std::size_t a = lo; a < hi; ++a) {
                for (const auto& win : per_agent[a]) {
                    model.forward(win, {}, false, 0, ws);
                    for (int i = 0; i < win.length(); ++i) {
                        const auto& e = win.events[static_cast<std::size_t>(i)];
                        if (e.day != win.target_day) continue;
                        Slot s;
                        s.key = {e.agent_id, e.day, e.idx};
                        s.row.assign(ws.e_bar->row(i), ws.e_bar->row(i) + model.cfg.d);
                        results[a].push_back(std::move(s));
                    }
                }
            }
        });
    TrainIndex idx;
    std::size_t total = 0;
    for (const auto& r : results) total += r.size();
    idx.emb.resize(static_cast<int>(total), model.cfg.d);
    int row = 0;
    for (const auto& r : results)
        for (const auto& s : r) {
            std::copy(s.row.begin(), s.row.end(), idx.emb.row(row));
            idx.keys.push_back(s.key);
            ++row;
        }
    return idx;
}

/// Mean Euclidean distance to the k nearest index rows; exact, ties at the
/// k-th distance broken by row id, summation in ascending (distance, id)
/// order so a brute-force full sort reproduces it bit for bit.
inline double knn_distance(const double* query, const TrainIndex& index, int k) {
    if (k < 1) throw std::invalid_argument("knn_distance: k must be >= 1");
    if (index.rows() < k) throw std::invalid_argument("knn_distance: index smaller than k");
    const int n = index.rows(), d = index.emb.cols;
    std::vector<std::pair<double, int>> dist(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const double* r = index.emb.row(i);
        double s = 0.0;
        for (int j = 0; j < d; ++j) {
            const double diff = query[j] - r[j];
            s += diff * diff;
        }
        dist[static_cast<std::size_t>(i)] = {std::sqrt(s), i};
    }
    std::nth_element(dist.begin(), dist.begin() + (k - 1), dist.end());
    std::sort(dist.begin(), dist.begin() + k);
    double mean = 0.0;
    for (int i = 0; i < k; ++i) mean += dist[static_cast<std::size_t>(i)].first;
    return mean / k;
}

// ---------------------------------------------------------------------------
// percentile transform
// ---------------------------------------------------------------------------

/// Frozen reference population; transform maps a value to the fraction of
/// the reference <= it, with the midpoint rule for ties.
class PercentileRef {
public:
    static PercentileRef fit(std::vector<double> values) {
        if (values.empty()) throw std::invalid_argument("PercentileRef: empty reference");
        std::sort(values.begin(), values.end());
        PercentileRef r;
        r.sorted_ = std::move(values);
        return r;
    }

    double operator()(double v) const {
        const auto lo = std::lower_bound(sorted_.begin(), sorted_.end(), v);
        const auto hi = std::upper_bound(lo, sorted_.end(), v);
        const double less = static_cast<double>(lo - sorted_.begin());
        const double eq = static_cast<double>(hi - lo);
        return (less + 0.5 * eq) / static_cast<double>(sorted_.size());
    }

    const std::vector<double>& sorted() const { return sorted_; }

private:
    std::vector<double> sorted_;
};

inline double percentile_transform(double value, const PercentileRef& ref) { return ref(value); }

// ---------------------------------------------------------------------------
// per-event losses / errors
// ---------------------------------------------------------------------------

struct FeatureLosses {
    double st = 0, sd = 0, x = 0, y = 0, poi = 0, dow = 0;
    double max_loss() const {
        return std::max({st, sd, x, y, poi, dow});
    }
};

struct FeatureErrors {
    double st = 0, sd = 0, x = 0, y = 0, poi = 0, dow = 0;  // raw prediction errors
    double sum() const { return st + sd + x + y + poi + dow; }
};

constexpr double kBetaFloor = 1e-8;

/// AU-attenuated prediction losses per feature: squared natural-unit
/// residual over twice the (floored) AU for numerics, circular residual for
/// time-of-day, sampled-logit NLL for categoricals.
template <class Real>
FeatureLosses attenuated_losses(const StayEvent& observed, const uncertainty::SampleSet<Real>& ss,
                                const uncertainty::UncertaintyReport& rep,
                                const seqmodel::Model<Real>& model, std::uint64_t seed) {
    FeatureLosses L;
    const auto pred = uncertainty::predict_event(ss, model);
    const double theta_true = observed.time_of_day() / kMinutesPerDay * 2.0 * M_PI;
    const double theta_hat = pred.st_minutes / kMinutesPerDay * 2.0 * M_PI;
    const double d_ang = uncertainty::angle_deviation(theta_true, theta_hat);
    L.st = d_ang * d_ang / (2.0 * std::max(rep.beta_st, kBetaFloor));
    const double d_sd = observed.sd - pred.sd;
    L.sd = d_sd * d_sd / (2.0 * std::max(rep.beta_sd, kBetaFloor));
    const double d_x = observed.x - pred.x;
    L.x = d_x * d_x / (2.0 * std::max(rep.beta_x, kBetaFloor));
    const double d_y = observed.y - pred.y;
    L.y = d_y * d_y / (2.0 * std::max(rep.beta_y, kBetaFloor));

    // Eq. 7 with the T passes' sampled logits
    for (int fi = 0; fi < seqmodel::kNumCat; ++fi) {
        const int C = model.cfg.cat_size(fi);
        const int c_true = fi == 0 ? observed.poi : observed.dow;
        const int T = ss.t();
        std::vector<Real> m(static_cast<std::size_t>(C));
        std::vector<double> ls(static_cast<std::size_t>(T));
        double max_ls = -1e300;
        for (int t = 0; t < T; ++t) {
            Rng rng(derive_seed(seed, 0xCA7ull, static_cast<std::uint64_t>(fi),
                                static_cast<std::uint64_t>(t)));
            const auto& s = ss.samples[static_cast<std::size_t>(t)];
            for (int c = 0; c < C; ++c) {
                const Real sig = std::exp(s.cat_logsigma[static_cast<std::size_t>(fi)][static_cast<std::size_t>(c)]);
                m[static_cast<std::size_t>(c)] =
                    s.cat_u[static_cast<std::size_t>(fi)][static_cast<std::size_t>(c)] +
                    sig * static_cast<Real>(rng.normal());
            }
            const Real lse = linalg::logsumexp(m.data(), C);
            ls[static_cast<std::size_t>(t)] = double(m[static_cast<std::size_t>(c_true)] - lse);
            max_ls = std::max(max_ls, ls[static_cast<std::size_t>(t)]);
        }
        double z = 0.0;
        for (double v : ls) z += std::exp(v - max_ls);
        const double nll = -(max_ls + std::log(z / T));
        (fi == 0 ? L.poi : L.dow) = nll;
    }
    return L;
}

/// Raw prediction errors (the PE ablation): absolute natural-unit residuals,
/// circular minutes for time-of-day, 1 - p(true class) for categoricals.
template <class Real>
FeatureErrors raw_errors(const StayEvent& observed, const uncertainty::SampleSet<Real>& ss,
                         const seqmodel::Model<Real>& model) {
    FeatureErrors e;
    const auto pred = uncertainty::predict_event(ss, model);
    e.st = uncertainty::circular_minutes_error(observed.time_of_day(), pred.st_minutes);
    e.sd = std::abs(observed.sd - pred.sd);
    e.x = std::abs(observed.x - pred.x);
    e.y = std::abs(observed.y - pred.y);
    const auto p_poi = uncertainty::mean_cat_probs(ss, 0);
    const auto p_dow = uncertainty::mean_cat_probs(ss, 1);
    e.poi = 1.0 - p_poi[static_cast<std::size_t>(observed.poi)];
    e.dow = 1.0 - p_dow[static_cast<std::size_t>(observed.dow)];
    return e;
}

// ---------------------------------------------------------------------------
// event + agent scores
// ---------------------------------------------------------------------------

/// Frozen validation references for every score variant.
struct ScoreRefs {
    PercentileRef loss;                  // max_f L'_f
    PercentileRef knn;                   // raw kNN distance
    std::vector<PercentileRef> err;      // per feature, order st,sd,x,y,poi,dow
    PercentileRef pe_au_eu;              // sum of raw errors + total AU + total EU
    PercentileRef eu;                    // total EU
};

struct EventScore {
    EventKey key;
    FeatureLosses losses;
    FeatureErrors errors;
    uncertainty::UncertaintyReport report;
    uncertainty::EventPrediction pred;
    double obs_st_min = 0, obs_sd = 0, obs_x = 0, obs_y = 0;
    int obs_poi = 0, obs_dow = 0;
    double knn_raw = 0.0;
    double loss_pct = 0.0;
    double knn_pct = 0.0;
    double score = 0.0;  // Eq. 9 after percentile transform
    bool label = false;
};

inline double total_alpha(const uncertainty::UncertaintyReport& r) {
    return r.alpha_st + r.alpha_sd + r.alpha_x + r.alpha_y + r.alpha_poi + r.alpha_dow;
}
inline double total_beta(const uncertainty::UncertaintyReport& r) {
    return r.beta_st + r.beta_sd + r.beta_x + r.beta_y + r.beta_poi + r.beta_dow;
}

inline ScoreRefs fit_refs(const std::vector<EventScore>& val_scores) {
    if (val_scores.empty()) throw std::invalid_argument("fit_refs: empty validation population");
    ScoreRefs r;
    std::vector<double> loss_v, knn_v, pae_v, eu_v;
    std::vector<std::vector<double>> err_v(6);
    for (const auto& s : val_scores) {
        loss_v.push_back(s.losses.max_loss());
        knn_v.push_back(s.knn_raw);
        const double errs[6] = {s.errors.st, s.errors.sd, s.errors.x,
                                s.errors.y,  s.errors.poi, s.errors.dow};
        for (int f = 0; f < 6; ++f) err_v[static_cast<std::size_t>(f)].push_back(errs[f]);
        pae_v.push_back(s.errors.sum() + total_alpha(s.report) + total_beta(s.report));
        eu_v.push_back(total_alpha(s.report));
    }
    r.loss = PercentileRef::fit(std::move(loss_v));
    r.knn = PercentileRef::fit(std::move(knn_v));
    for (int f = 0; f < 6; ++f) r.err.push_back(PercentileRef::fit(std::move(err_v[static_cast<std::size_t>(f)])));
    r.pe_au_eu = PercentileRef::fit(std::move(pae_v));
    r.eu = PercentileRef::fit(std::move(eu_v));
    return r;
}

/// Eq. 9: max of the percentile-transformed highest feature loss and the
/// percentile-transformed kNN distance.
inline double event_score(const FeatureLosses& losses, double knn_raw, const ScoreRefs& refs,
                          double* loss_pct_out = nullptr, double* knn_pct_out = nullptr) {
    const double lp = refs.loss(losses.max_loss());
    const double kp = refs.knn(knn_raw);
    if (loss_pct_out) *loss_pct_out = lp;
    if (knn_pct_out) *knn_pct_out = kp;
    return std::max(lp, kp);
}

/// Agent score: max event score over the agent's scored (test) events.
inline double agent_score(const std::vector<double>& event_scores) {
    if (event_scores.empty()) throw std::invalid_argument("agent_score: no scored events");
    double m = event_scores.front();
    for (double s : event_scores) m = std::max(m, s);
    return m;
}

enum class ScoreVariant { PE, Loss, PEAuEu, LossKnn, EU, KNN };

inline const char* variant_name(ScoreVariant v) {
    switch (v) {
        case ScoreVariant::PE: return "pe";
        case ScoreVariant::Loss: return "loss";
        case ScoreVariant::PEAuEu: return "pe_au_eu";
        case ScoreVariant::LossKnn: return "loss_knn";
        case ScoreVariant::EU: return "eu";
        case ScoreVariant::KNN: return "knn";
    }
    return "?";
}

inline ScoreVariant variant_from_name(const std::string& s) {
    if (s == "pe") return ScoreVariant::PE;
    if (s == "loss") return ScoreVariant::Loss;
    if (s == "pe_au_eu") return ScoreVariant::PEAuEu;
    if (s == "loss_knn") return ScoreVariant::LossKnn;
    if (s == "eu") return ScoreVariant::EU;
    if (s == "knn") return ScoreVariant::KNN;
    throw std::invalid_argument("unknown score variant: " + s);
}

/// The scoring-function ablations; LossKnn is the default Eq. 9 score.
inline double ablation_score(ScoreVariant v, const EventScore& s, const ScoreRefs& refs) {
    switch (v) {
        case ScoreVariant::PE: {
            const double errs[6] = {s.errors.st, s.errors.sd, s.errors.x,
                                    s.errors.y,  s.errors.poi, s.errors.dow};
            double m = 0.0;
            for (int f = 0; f < 6; ++f) m = std::max(m, refs.err[static_cast<std::size_t>(f)](errs[f]));
            return m;
        }
        case ScoreVariant::Loss:
            return refs.loss(s.losses.max_loss());
        case ScoreVariant::PEAuEu:
            return refs.pe_au_eu(s.errors.sum() + total_alpha(s.report) + total_beta(s.report));
        case ScoreVariant::EU:
            return refs.eu(total_alpha(s.report));
        case ScoreVariant::KNN:
            return refs.knn(s.knn_raw);
        case ScoreVariant::LossKnn:
            return event_score(s.losses, s.knn_raw, refs);
    }
    throw std::invalid_argument("ablation_score: unknown variant");
}

// ---------------------------------------------------------------------------
// dataset scoring orchestration
// ---------------------------------------------------------------------------

struct ScoringOptions {
    int t_mc = 50;                          // stochastic passes per masked event
    std::uint64_t seed = 0;
    int n_threads = 0;
    std::size_t max_val_ref_events = 4000;  // cap on the reference population
    std::vector<std::int64_t> agent_subset; // empty = every agent
};

struct ScoringResult {
    std::vector<EventScore> val_scores;
    std::vector<EventScore> test_scores;
    ScoreRefs refs;
    std::map<std::int64_t, double> agent_scores;  // Eq. 9 rollup
};

namespace detail {

struct Task {
    std::size_t agent_pos = 0;
    EventSequence window;
};

/// Scores every target-day event of one window: one deterministic forward
/// for embeddings, then T MC passes per event.
template <class Real>
void score_window(const LabeledDataset& ds, std::size_t agent_pos, const EventSequence& win,
                  const seqmodel::Model<Real>& model, const TrainIndex& index,
                  const ScoringOptions& opts, seqmodel::Workspace<Real>& ws,
                  std::vector<EventScore>& out) {
    model.forward(win, {}, false, 0, ws);
    std::vector<std::pair<int, std::vector<double>>> day_rows;
    for (int i = 0; i < win.length(); ++i) {
        const auto& e = win.events[static_cast<std::size_t>(i)];
        if (e.day != win.target_day) continue;
        day_rows.emplace_back(i, std::vector<double>(ws.e_bar->row(i), ws.e_bar->row(i) + model.cfg.d));
    }
    const AgentData& ad = ds.agents[agent_pos];
    for (const auto& [pos, emb] : day_rows) {
        const StayEvent& e = win.events[static_cast<std::size_t>(pos)];
        const std::uint64_t ev_seed =
            derive_seed(opts.seed, 0x5C03ull, static_cast<std::uint64_t>(e.agent_id),
                        static_cast<std::uint64_t>(e.day), static_cast<std::uint64_t>(e.idx));
        const auto ss = uncertainty::mc_sample(win, pos, model, opts.t_mc, ev_seed, ws);
        EventScore s;
        s.key = {e.agent_id, e.day, e.idx};
        s.report = uncertainty::make_report(ss, model, e);
        s.losses = attenuated_losses(e, ss, s.report, model, ev_seed);
        s.errors = raw_errors(e, ss, model);
        s.pred = uncertainty::predict_event(ss, model);
        s.obs_st_min = e.time_of_day();
        s.obs_sd = e.sd;
        s.obs_x = e.x;
        s.obs_y = e.y;
        s.obs_poi = e.poi;
        s.obs_dow = e.dow;
        s.knn_raw = knn_distance(emb.data(), index, model.cfg.knn_k);
        for (std::size_t i = 0; i < ad.events.size(); ++i)
            if (ad.events[i].day == e.day && ad.events[i].idx == e.idx) {
                s.label = ad.labels[i] != 0;
                break;
            }
        out.push_back(std::move(s));
    }
}

template <class Real>
std::vector<EventScore> score_period(const LabeledDataset& ds, const seqmodel::Model<Real>& model,
                                     const TrainIndex& index, const ScoringOptions& opts,
                                     bool val_period, std::size_t max_events) {
    std::set<std::int64_t> subset(opts.agent_subset.begin(), opts.agent_subset.end());
    std::vector<Task> tasks;
    for (std::size_t a = 0; a < ds.agents.size(); ++a) {
        if (!subset.empty() && !subset.count(ds.agents[a].agent_id)) continue;
        auto wins = staypoint::build_windows(ds.agents[a].events, model.cfg.w, model.cfg.max_len);
        for (auto& w : wins) {
            const bool in = val_period ? ds.split.is_val(w.target_day) : ds.split.is_test(w.target_day);
            if (in) tasks.push_back({a, std::move(w)});
        }
    }
    if (max_events > 0) {
        Rng rng(derive_seed(opts.seed, 0x5E1Cull, val_period ? 1u : 0u));
        rng.shuffle(tasks);
        std::size_t acc = 0, keep = 0;
        while (keep < tasks.size() && acc < max_events) {
            const auto& w = tasks[keep].window;
            for (const auto& e : w.events)
                if (e.day == w.target_day) ++acc;
            ++keep;
        }
        tasks.resize(keep);
        // stable output order
        std::sort(tasks.begin(), tasks.end(), [](const Task& l, const Task& r) {
            return l.agent_pos != r.agent_pos ? l.agent_pos < r.agent_pos
                                              : l.window.target_day < r.window.target_day;
        });
    }
    std::vector<std::vector<EventScore>> results(tasks.size());
    seqmodel::parallel_chunks(tasks.size(), opts.n_threads, 1,
                              [&](std::size_t, std::size_t lo, std::size_t hi) {
                                  seqmodel::Workspace<Real> ws;
                                  for (std::size_t i = lo; i < hi; ++i)
                                      score_window(ds, tasks[i].agent_pos, tasks[i].window, model,
                                                   index, opts, ws, results[i]);
                              });
    std::vector<EventScore> out;
    for (auto& r : results)
        for (auto& s : r) out.push_back(std::move(s));
    return out;
}

}  // namespace detail

/// Full scoring pass: validation references, test-event scores, agent rollup.
template <class Real>
ScoringResult score_dataset(const LabeledDataset& ds, const seqmodel::Model<Real>& model,
                            const TrainIndex& index, const ScoringOptions& opts) {
    ScoringResult res;
    res.val_scores =
        detail::score_period(ds, model, index, opts, true, opts.max_val_ref_events);
    res.refs = fit_refs(res.val_scores);
    res.test_scores = detail::score_period(ds, model, index, opts, false, 0);
    std::map<std::int64_t, std::vector<double>> per_agent;
    for (auto& s : res.test_scores) {
        s.score = event_score(s.losses, s.knn_raw, res.refs, &s.loss_pct, &s.knn_pct);
        per_agent[s.key.agent_id].push_back(s.score);
    }
    for (const auto& [agent, scores] : per_agent) res.agent_scores[agent] = agent_score(scores);
    return res;
}

}  // namespace ustad::scoring
