#pragma once

// Monte-Carlo dropout sampling and the per-feature aleatoric/epistemic
// estimators: numeric EU is the population variance of the T predicted
// means, numeric AU the mean predicted variance, categorical EU the entropy
// of the averaged softmax, categorical AU the mean true-class logit
// variance. Time-of-day gets the angular variants on the recovered angle.

#include <cmath>
#include <stdexcept>
#include <vector>

#include "ustad/losses.hpp"
#include "ustad/seqmodel.hpp"

namespace ustad::uncertainty {

template <class Real>
struct SampleSet {
    std::vector<seqmodel::DecoderOutput<Real>> samples;
    std::vector<std::uint64_t> seeds;
    int t() const { return static_cast<int>(samples.size()); }
};

/// T independent stochastic passes with seeds derived from (seed, t).
template <class Real>
SampleSet<Real> mc_sample(const EventSequence& seq, int mask_pos, const seqmodel::Model<Real>& model,
                          int T, std::uint64_t seed, seqmodel::Workspace<Real>& ws) {
    if (T < 1) throw std::invalid_argument("mc_sample: T must be >= 1");
    SampleSet<Real> out;
    out.samples.reserve(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) {
        const std::uint64_t st = derive_seed(seed, 0x3C5Aull, static_cast<std::uint64_t>(t));
        auto dec = model.forward_masked(seq, {mask_pos}, true, st, ws);
        out.samples.push_back(std::move(dec[0]));
        out.seeds.push_back(st);
    }
    return out;
}

// ---- numeric --------------------------------------------------------------

/// Population variance of the predicted means across passes (normalized units).
template <class Real>
double eu_numeric(const SampleSet<Real>& ss, int f) {
    const int T = ss.t();
    double mean = 0.0;
    for (const auto& s : ss.samples) mean += double(s.num_mean[static_cast<std::size_t>(f)]);
    mean /= T;
    double var = 0.0;
    for (const auto& s : ss.samples) {
        const double d = double(s.num_mean[static_cast<std::size_t>(f)]) - mean;
        var += d * d;
    }
    return var / T;
}

/// Mean predicted variance exp(logvar) across passes (normalized units).
template <class Real>
double au_numeric(const SampleSet<Real>& ss, int f) {
    double s = 0.0;
    for (const auto& d : ss.samples) s += std::exp(double(d.num_logvar[static_cast<std::size_t>(f)]));
    return s / ss.t();
}

template <class Real>
double mean_numeric(const SampleSet<Real>& ss, int f) {
    double s = 0.0;
    for (const auto& d : ss.samples) s += double(d.num_mean[static_cast<std::size_t>(f)]);
    return s / ss.t();
}

// ---- categorical ------------------------------------------------------------

/// Mean softmax distribution over the T passes.
template <class Real>
std::vector<double> mean_cat_probs(const SampleSet<Real>& ss, int fi) {
    const auto& first = ss.samples.front().cat_u[static_cast<std::size_t>(fi)];
    const int C = static_cast<int>(first.size());
    std::vector<double> acc(static_cast<std::size_t>(C), 0.0);
    std::vector<Real> p(static_cast<std::size_t>(C));
    for (const auto& s : ss.samples) {
        linalg::softmax(s.cat_u[static_cast<std::size_t>(fi)].data(), p.data(), C);
        for (int c = 0; c < C; ++c) acc[static_cast<std::size_t>(c)] += double(p[static_cast<std::size_t>(c)]);
    }
    for (auto& v : acc) v /= ss.t();
    return acc;
}

/// Entropy (nats) of the averaged predicted distribution.
template <class Real>
double eu_categorical(const SampleSet<Real>& ss, int fi) {
    const auto probs = mean_cat_probs(ss, fi);
    double h = 0.0;
    for (double pc : probs)
        if (pc > 0.0) h -= pc * std::log(pc);
    return h;
}

/// Mean true-class logit variance across passes.
template <class Real>
double au_categorical(const SampleSet<Real>& ss, int fi, int true_class) {
    const int C = static_cast<int>(ss.samples.front().cat_u[static_cast<std::size_t>(fi)].size());
    if (true_class < 0 || true_class >= C)
        throw std::invalid_argument("au_categorical: class out of range");
    double s = 0.0;
    for (const auto& d : ss.samples) {
        const double sig =
            std::exp(double(d.cat_logsigma[static_cast<std::size_t>(fi)][static_cast<std::size_t>(true_class)]));
        s += sig * sig;
    }
    return s / ss.t();
}

// ---- time angle -------------------------------------------------------------

struct TimeAngleStats {
    double theta_bar = 0.0;  // circular mean of the recovered angles
    double alpha = 0.0;      // mean squared shorter-arc deviation
};

/// Circular-mean angle (from averaged de-normalized components) and the mean
/// squared shorter-arc deviation of the per-pass angles.
template <class Real>
TimeAngleStats time_angle_eu(const SampleSet<Real>& ss, const seqmodel::Model<Real>& model) {
    const int T = ss.t();
    double mx = 0.0, my = 0.0;
    std::vector<double> theta(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) {
        const auto& s = ss.samples[static_cast<std::size_t>(t)];
        const double tx = model.denorm_mean(seqmodel::kFTimeX, double(s.num_mean[seqmodel::kFTimeX]));
        const double ty = model.denorm_mean(seqmodel::kFTimeY, double(s.num_mean[seqmodel::kFTimeY]));
        mx += tx;
        my += ty;
        theta[static_cast<std::size_t>(t)] = std::atan2(ty, tx);
        if (theta[static_cast<std::size_t>(t)] < 0.0) theta[static_cast<std::size_t>(t)] += 2.0 * M_PI;
    }
    mx /= T;
    my /= T;
    if (mx == 0.0 && my == 0.0)
        throw std::invalid_argument("time_angle_eu: degenerate mean component vector");
    TimeAngleStats st;
    st.theta_bar = time_angle_recover(mx, my);
    double acc = 0.0;
    for (double th : theta) {
        const double d = angle_deviation(th, st.theta_bar);
        acc += d * d;
    }
    st.alpha = acc / T;
    return st;
}

/// Angular AU: mean of the two de-normalized component AUs.
template <class Real>
double time_angle_au(const SampleSet<Real>& ss, const seqmodel::Model<Real>& model) {
    const double bx = model.denorm_var(seqmodel::kFTimeX, au_numeric(ss, seqmodel::kFTimeX));
    const double by = model.denorm_var(seqmodel::kFTimeY, au_numeric(ss, seqmodel::kFTimeY));
    return 0.5 * (bx + by);
}

// ---- per-event report ---------------------------------------------------------

/// Natural-unit per-feature report: x/y in km^2, SD in min^2, ST angular
/// (rad^2 EU, mean component AU), POI/DOW entropy + true-class variance.
struct UncertaintyReport {
    double alpha_st = 0, beta_st = 0;
    double alpha_sd = 0, beta_sd = 0;
    double alpha_x = 0, beta_x = 0;
    double alpha_y = 0, beta_y = 0;
    double alpha_poi = 0, beta_poi = 0;
    double alpha_dow = 0, beta_dow = 0;

    double total() const {
        return alpha_st + beta_st + alpha_sd + beta_sd + alpha_x + beta_x + alpha_y + beta_y +
               alpha_poi + beta_poi + alpha_dow + beta_dow;
    }
};

struct EventPrediction {
    double st_minutes = 0.0;  // recovered time of day
    double sd = 0.0;
    double x = 0.0;
    double y = 0.0;
    int poi = 0;
    int dow = 0;
};

template <class Real>
EventPrediction predict_event(const SampleSet<Real>& ss, const seqmodel::Model<Real>& model) {
    EventPrediction p;
    const auto ang = time_angle_eu(ss, model);
    p.st_minutes = angle_to_minutes(ang.theta_bar);
    p.sd = model.denorm_mean(seqmodel::kFSd, mean_numeric(ss, seqmodel::kFSd));
    p.x = model.denorm_mean(seqmodel::kFX, mean_numeric(ss, seqmodel::kFX));
    p.y = model.denorm_mean(seqmodel::kFY, mean_numeric(ss, seqmodel::kFY));
    for (int fi = 0; fi < seqmodel::kNumCat; ++fi) {
        const auto probs = mean_cat_probs(ss, fi);
        int arg = 0;
        for (int c = 1; c < static_cast<int>(probs.size()); ++c)
            if (probs[static_cast<std::size_t>(c)] > probs[static_cast<std::size_t>(arg)]) arg = c;
        (fi == 0 ? p.poi : p.dow) = arg;
    }
    return p;
}

template <class Real>
UncertaintyReport make_report(const SampleSet<Real>& ss, const seqmodel::Model<Real>& model,
                              const StayEvent& observed) {
    UncertaintyReport r;
    const auto ang = time_angle_eu(ss, model);
    r.alpha_st = ang.alpha;
    r.beta_st = time_angle_au(ss, model);
    r.alpha_sd = model.denorm_var(seqmodel::kFSd, eu_numeric(ss, seqmodel::kFSd));
    r.beta_sd = model.denorm_var(seqmodel::kFSd, au_numeric(ss, seqmodel::kFSd));
    r.alpha_x = model.denorm_var(seqmodel::kFX, eu_numeric(ss, seqmodel::kFX));
    r.beta_x = model.denorm_var(seqmodel::kFX, au_numeric(ss, seqmodel::kFX));
    r.alpha_y = model.denorm_var(seqmodel::kFY, eu_numeric(ss, seqmodel::kFY));
    r.beta_y = model.denorm_var(seqmodel::kFY, au_numeric(ss, seqmodel::kFY));
    r.alpha_poi = eu_categorical(ss, 0);
    r.beta_poi = au_categorical(ss, 0, observed.poi);
    r.alpha_dow = eu_categorical(ss, 1);
    r.beta_dow = au_categorical(ss, 1, observed.dow);
    return r;
}

}  // namespace ustad::uncertainty
