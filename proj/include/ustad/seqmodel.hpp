#pragma once

// The dual-transformer encoder. Tokens: one per event feature (cyclic
// time-of-day pair, stay duration, x, y, the inbound-trip vector, POI,
// day-of-week). Feature-level blocks attend across the F tokens of each
// event with no positional encoding; event embeddings are the feature sums
// plus learned sequence-position and within-day-position rows; event-level
// blocks attend across the window. Decoder heads emit per-feature means and
// log-variances (numeric) and mean logits plus per-class log-sigmas
// (categorical). Forward and backward are hand-written; backward is checked
// against central finite differences in the test suite.
//
// Sums taken along the feature axis (attention denominators, attention
// averages, the event-embedding feature sum) use compensated summation so
// that permuting feature tokens cannot change the rounded result.

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstring>
#include <istream>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ustad/linalg.hpp"
#include "ustad/losses.hpp"
#include "ustad/rng.hpp"
#include "ustad/types.hpp"

namespace ustad::seqmodel {

using linalg::Mat;

// numeric scalar features, in token order
enum NumFeature : int { kFTimeX = 0, kFTimeY, kFSd, kFX, kFY };
constexpr int kNumScalar = 5;
constexpr int kTokTrip = 5;
constexpr int kTokPoi = 6;
constexpr int kTokDow = 7;
constexpr int kNumTokens = 8;
constexpr int kNumCat = 2;  // poi, dow
constexpr int kNumChannels = kNumScalar + kTripFeatureDim;

inline const char* num_feature_name(int f) {
    static const char* names[kNumScalar] = {"time_x", "time_y", "sd", "x", "y"};
    return names[f];
}

struct ModelConfig {
    int d = 32;
    int m1 = 1;
    int m2 = 3;
    int n_head = 4;
    double dropout_p = 0.05;
    double mask_ratio = 0.15;
    int t_infer = 50;        // stochastic passes at inference
    double lambda = 1.0;     // classification loss weight
    int knn_k = 150;
    int w = 3;               // window days
    int max_len = 256;
    double time_radius = 1.0;
    int n_poi = 28;
    int ffn_mult = 4;
    int max_per_day = 64;
    int t_train = 10;        // logit-noise draws per training step

    int head_dim() const { return d / n_head; }
    int ffn_dim() const { return d * ffn_mult; }
    int cat_size(int fi) const { return fi == 0 ? n_poi : 7; }

    void validate() const {
        if (d < 1 || n_head < 1 || d % n_head != 0)
            throw std::invalid_argument("ModelConfig: d must be a positive multiple of n_head");
        if (m1 < 0 || m2 < 0) throw std::invalid_argument("ModelConfig: negative block count");
        if (!(dropout_p >= 0.0 && dropout_p < 1.0))
            throw std::invalid_argument("ModelConfig: dropout_p must be in [0,1)");
        if (!(mask_ratio > 0.0 && mask_ratio < 1.0))
            throw std::invalid_argument("ModelConfig: mask_ratio must be in (0,1)");
        if (t_infer < 1 || t_train < 1) throw std::invalid_argument("ModelConfig: T must be >= 1");
        if (!(lambda > 0.0)) throw std::invalid_argument("ModelConfig: lambda must be > 0");
        if (knn_k < 1) throw std::invalid_argument("ModelConfig: k must be >= 1");
        if (w < 0) throw std::invalid_argument("ModelConfig: w must be >= 0");
        if (max_len < 1 || max_per_day < 1 || n_poi < 2 || ffn_mult < 1)
            throw std::invalid_argument("ModelConfig: bad size field");
        if (!(time_radius > 0.0)) throw std::invalid_argument("ModelConfig: time_radius must be > 0");
    }
};

/// z-normalization statistics for the numeric input channels
/// [time_x, time_y, sd, x, y, trip(14)].
struct NormStats {
    std::array<double, kNumChannels> mean{};
    std::array<double, kNumChannels> stdev{};

    NormStats() {
        mean.fill(0.0);
        stdev.fill(1.0);
    }
};

inline void raw_channels(const StayEvent& e, double time_radius, double* out) {
    const auto txy = uncertainty::time_encode(e.time_of_day(), time_radius);
    out[kFTimeX] = txy.x;
    out[kFTimeY] = txy.y;
    out[kFSd] = e.sd;
    out[kFX] = e.x;
    out[kFY] = e.y;
    for (int c = 0; c < kTripFeatureDim; ++c) out[kNumScalar + c] = e.trip[static_cast<std::size_t>(c)];
}

template <class It>
NormStats compute_norm_stats(It first, It last, double time_radius) {
    NormStats s;
    std::array<double, kNumChannels> sum{}, sq{};
    double buf[kNumChannels];
    std::size_t n = 0;
    for (It it = first; it != last; ++it) {
        raw_channels(*it, time_radius, buf);
        for (int c = 0; c < kNumChannels; ++c) {
            sum[static_cast<std::size_t>(c)] += buf[c];
            sq[static_cast<std::size_t>(c)] += buf[c] * buf[c];
        }
        ++n;
    }
    if (n == 0) throw std::invalid_argument("compute_norm_stats: no events");
    for (int c = 0; c < kNumChannels; ++c) {
        const double m = sum[static_cast<std::size_t>(c)] / double(n);
        const double var = std::max(0.0, sq[static_cast<std::size_t>(c)] / double(n) - m * m);
        s.mean[static_cast<std::size_t>(c)] = m;
        s.stdev[static_cast<std::size_t>(c)] = std::max(1e-6, std::sqrt(var));
    }
    return s;
}

// ---------------------------------------------------------------------------
// parameter arena
// ---------------------------------------------------------------------------

struct ParamBlockInfo {
    std::string name;
    std::size_t offset = 0;
    int rows = 0;
    int cols = 0;
    std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

struct TransformerBlockOffsets {
    std::size_t wq, bq, wk, bk, wv, bv, wo, bo, w1, b1, w2, b2;
};

struct ParamLayout {
    std::vector<ParamBlockInfo> blocks;
    std::size_t total = 0;

    std::size_t tok_num_w, tok_num_b, tok_trip_w, tok_trip_b, tok_poi, tok_dow;
    std::size_t mask_token, pos_seq, pos_day;
    std::vector<TransformerBlockOffsets> feat_blocks, event_blocks;
    std::size_t head_num_mean_w, head_num_mean_b, head_num_logvar_w, head_num_logvar_b;
    std::array<std::size_t, kNumCat> head_cat_u_w{}, head_cat_u_b{}, head_cat_s_w{}, head_cat_s_b{};

    explicit ParamLayout(const ModelConfig& cfg) {
        auto add = [&](const std::string& name, int rows, int cols) {
            ParamBlockInfo b{name, total, rows, cols};
            blocks.push_back(b);
            total += b.size();
            return b.offset;
        };
        const int D = cfg.d, H = cfg.ffn_dim();
        tok_num_w = add("tok_num_w", kNumScalar, D);
        tok_num_b = add("tok_num_b", kNumScalar, D);
        tok_trip_w = add("tok_trip_w", kTripFeatureDim, D);
        tok_trip_b = add("tok_trip_b", 1, D);
        tok_poi = add("tok_poi", cfg.n_poi, D);
        tok_dow = add("tok_dow", 7, D);
        mask_token = add("mask_token", 1, D);
        pos_seq = add("pos_seq", cfg.max_len, D);
        pos_day = add("pos_day", cfg.max_per_day, D);
        auto add_tblock = [&](const std::string& prefix) {
            TransformerBlockOffsets t;
            t.wq = add(prefix + ".wq", D, D);
            t.bq = add(prefix + ".bq", 1, D);
            t.wk = add(prefix + ".wk", D, D);
            t.bk = add(prefix + ".bk", 1, D);
            t.wv = add(prefix + ".wv", D, D);
            t.bv = add(prefix + ".bv", 1, D);
            t.wo = add(prefix + ".wo", D, D);
            t.bo = add(prefix + ".bo", 1, D);
            t.w1 = add(prefix + ".w1", D, H);
            t.b1 = add(prefix + ".b1", 1, H);
            t.w2 = add(prefix + ".w2", H, D);
            t.b2 = add(prefix + ".b2", 1, D);
            return t;
        };
        for (int m = 0; m < cfg.m1; ++m) feat_blocks.push_back(add_tblock("feat" + std::to_string(m)));
        for (int m = 0; m < cfg.m2; ++m) event_blocks.push_back(add_tblock("event" + std::to_string(m)));
        head_num_mean_w = add("head_num_mean_w", kNumScalar, D);
        head_num_mean_b = add("head_num_mean_b", 1, kNumScalar);
        head_num_logvar_w = add("head_num_logvar_w", kNumScalar, D);
        head_num_logvar_b = add("head_num_logvar_b", 1, kNumScalar);
        for (int fi = 0; fi < kNumCat; ++fi) {
            const int C = cfg.cat_size(fi);
            const std::string nm = fi == 0 ? "poi" : "dow";
            head_cat_u_w[static_cast<std::size_t>(fi)] = add("head_" + nm + "_u_w", D, C);
            head_cat_u_b[static_cast<std::size_t>(fi)] = add("head_" + nm + "_u_b", 1, C);
            head_cat_s_w[static_cast<std::size_t>(fi)] = add("head_" + nm + "_s_w", D, C);
            head_cat_s_b[static_cast<std::size_t>(fi)] = add("head_" + nm + "_s_b", 1, C);
        }
    }
};

// ---------------------------------------------------------------------------
// decoder output
// ---------------------------------------------------------------------------

template <class Real>
struct DecoderOutput {
    std::array<Real, kNumScalar> num_mean{};
    std::array<Real, kNumScalar> num_logvar{};
    std::array<std::vector<Real>, kNumCat> cat_u;         // mean logits
    std::array<std::vector<Real>, kNumCat> cat_logsigma;  // per-class log sigma
};

template <class Real>
struct HeadGrads {
    std::array<Real, kNumScalar> d_mean{};
    std::array<Real, kNumScalar> d_logvar{};
    std::array<std::vector<Real>, kNumCat> d_u;
    std::array<std::vector<Real>, kNumCat> d_logsigma;
};

// ---------------------------------------------------------------------------
// caches
// ---------------------------------------------------------------------------

template <class Real>
struct BlockCache {
    Mat<Real> x, q, k, v, ctx, attn_out, h, f_pre, f_act, y;
    std::vector<Real> attn;  // segments * heads * s * s
};

template <class Real>
struct Workspace {
    int L = 0;
    std::vector<Real> channels;  // L * kNumChannels (normalized inputs = targets)
    std::vector<std::array<int, kNumCat>> cats;
    std::vector<std::uint8_t> masked;  // per event
    Mat<Real> tok0;                    // (L*F) x D after tokenizer + mask replacement
    std::vector<std::uint8_t> keep;    // dropout keep mask, empty when deterministic
    bool stochastic = false;
    std::vector<BlockCache<Real>> fblk;  // m1 entries over (L*F) x D, segment F
    Mat<Real> ev0;                       // L x D event embeddings + positions
    std::vector<BlockCache<Real>> eblk;  // m2 entries over L x D
    const Mat<Real>* e_bar = nullptr;    // output of the last event block (or ev0)

    // backward scratch
    Mat<Real> g_y, g_h, g_fpre, g_fact, g_ctx, g_q, g_k, g_v, g_x, g_ev;
};

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

template <class Real>
class Model {
public:
    ModelConfig cfg;
    NormStats stats;
    ParamLayout layout;
    std::vector<Real> params;

    Model(const ModelConfig& c, const NormStats& s, std::uint64_t init_seed)
        : cfg(c), stats(s), layout(c), params(layout.total, Real(0)) {
        cfg.validate();
        init_params(init_seed);
    }

    const Real* p(std::size_t off) const { return params.data() + off; }
    Real* p(std::size_t off) { return params.data() + off; }

    void init_params(std::uint64_t seed) {
        Rng rng(derive_seed(seed, 0x1217ull));
        for (const auto& b : layout.blocks) {
            Real* w = params.data() + b.offset;
            double sd = 0.08;
            if (b.name.rfind("head_", 0) == 0) sd = 0.02;
            for (std::size_t i = 0; i < b.size(); ++i) w[i] = static_cast<Real>(rng.normal(0.0, sd));
        }
        // attention/FFN/head biases start at zero; tokenizer biases stay random
        // so each feature token has a distinct identity (no positional encoding
        // exists at the feature level)
        auto zero_block = [&](std::size_t off, std::size_t n) {
            std::fill(params.begin() + static_cast<std::ptrdiff_t>(off),
                      params.begin() + static_cast<std::ptrdiff_t>(off + n), Real(0));
        };
        for (const auto& tb : layout.feat_blocks)
            for (std::size_t off : {tb.bq, tb.bk, tb.bv, tb.bo}) zero_block(off, static_cast<std::size_t>(cfg.d));
        for (const auto& tb : layout.event_blocks)
            for (std::size_t off : {tb.bq, tb.bk, tb.bv, tb.bo}) zero_block(off, static_cast<std::size_t>(cfg.d));
        for (const auto& tb : layout.feat_blocks) {
            zero_block(tb.b1, static_cast<std::size_t>(cfg.ffn_dim()));
            zero_block(tb.b2, static_cast<std::size_t>(cfg.d));
        }
        for (const auto& tb : layout.event_blocks) {
            zero_block(tb.b1, static_cast<std::size_t>(cfg.ffn_dim()));
            zero_block(tb.b2, static_cast<std::size_t>(cfg.d));
        }
        zero_block(layout.head_num_mean_b, kNumScalar);
        zero_block(layout.head_num_logvar_b, kNumScalar);
        for (int fi = 0; fi < kNumCat; ++fi) {
            zero_block(layout.head_cat_u_b[static_cast<std::size_t>(fi)],
                       static_cast<std::size_t>(cfg.cat_size(fi)));
            Real* bs = p(layout.head_cat_s_b[static_cast<std::size_t>(fi)]);
            for (int c = 0; c < cfg.cat_size(fi); ++c) bs[c] = Real(-1);
        }
    }

    /// Normalized input channels (also the regression targets) for one event.
    void event_channels(const StayEvent& e, Real* out) const {
        double raw[kNumChannels];
        raw_channels(e, cfg.time_radius, raw);
        for (int c = 0; c < kNumChannels; ++c)
            out[c] = static_cast<Real>((raw[c] - stats.mean[static_cast<std::size_t>(c)]) /
                                       stats.stdev[static_cast<std::size_t>(c)]);
    }

    double denorm_mean(int channel, double v) const {
        return v * stats.stdev[static_cast<std::size_t>(channel)] + stats.mean[static_cast<std::size_t>(channel)];
    }
    double denorm_var(int channel, double v) const {
        return v * stats.stdev[static_cast<std::size_t>(channel)] * stats.stdev[static_cast<std::size_t>(channel)];
    }

    /// Token rows for one event (no masking, no dropout): F x D.
    Mat<Real> tokenize_features(const StayEvent& e) const {
        validate_event(e);
        Mat<Real> t(kNumTokens, cfg.d);
        std::vector<Real> ch(kNumChannels);
        event_channels(e, ch.data());
        write_tokens(ch.data(), {e.poi, e.dow}, t.row(0));
        return t;
    }

    /// Runs the M1 feature-level blocks over one token matrix (rows = one
    /// event's tokens). Deterministic; M1 = 0 is the identity.
    Mat<Real> feature_level_encode(const Mat<Real>& tokens) const {
        std::vector<BlockCache<Real>> caches(static_cast<std::size_t>(cfg.m1));
        const Mat<Real>* cur = &tokens;
        for (int m = 0; m < cfg.m1; ++m) {
            block_forward(layout.feat_blocks[static_cast<std::size_t>(m)], *cur, cur->rows, true,
                          caches[static_cast<std::size_t>(m)]);
            cur = &caches[static_cast<std::size_t>(m)].y;
        }
        return *cur;
    }

    /// Event embeddings from encoded feature tokens: compensated feature sum
    /// plus sequence-position and within-day-position rows, then the M2
    /// event-level blocks. `positions` carries (sequence index, within-day
    /// index) per event; feat_tokens is (L*F) x D.
    Mat<Real> event_level_encode(const Mat<Real>& feat_tokens,
                                 const std::vector<std::pair<int, int>>& positions) const {
        const int F = kNumTokens, D = cfg.d;
        const int L = static_cast<int>(positions.size());
        if (feat_tokens.rows != L * F)
            throw std::invalid_argument("event_level_encode: token row count mismatch");
        Mat<Real> ev(L, D);
        for (int i = 0; i < L; ++i) {
            const auto& [si, wi] = positions[static_cast<std::size_t>(i)];
            if (si < 0 || si >= cfg.max_len)
                throw std::invalid_argument("event_level_encode: sequence index out of range");
            if (wi < 0 || wi >= cfg.max_per_day)
                throw std::invalid_argument("event_level_encode: within-day index exceeds table");
            const Real* ps = p(layout.pos_seq) + static_cast<std::size_t>(si) * D;
            const Real* pd = p(layout.pos_day) + static_cast<std::size_t>(wi) * D;
            Real* out = ev.row(i);
            for (int dcol = 0; dcol < D; ++dcol)
                out[dcol] = linalg::neumaier_sum(feat_tokens.row(i * F) + dcol, F, D) + ps[dcol] + pd[dcol];
        }
        std::vector<BlockCache<Real>> caches(static_cast<std::size_t>(cfg.m2));
        const Mat<Real>* cur = &ev;
        for (int m = 0; m < cfg.m2; ++m) {
            block_forward(layout.event_blocks[static_cast<std::size_t>(m)], *cur, L, false,
                          caches[static_cast<std::size_t>(m)]);
            cur = &caches[static_cast<std::size_t>(m)].y;
        }
        return *cur;
    }

    // ---- forward -----------------------------------------------------------

    void forward(const EventSequence& seq, const std::vector<int>& mask_idx, bool stochastic,
                 std::uint64_t dropout_seed, Workspace<Real>& ws) const {
        const int L = seq.length();
        const int D = cfg.d, F = kNumTokens;
        if (L < 1) throw std::invalid_argument("forward: empty sequence");
        if (L > cfg.max_len) throw std::invalid_argument("forward: sequence longer than max_len");
        ws.L = L;
        ws.stochastic = stochastic;
        ws.channels.assign(static_cast<std::size_t>(L) * kNumChannels, Real(0));
        ws.cats.assign(static_cast<std::size_t>(L), {});
        ws.masked.assign(static_cast<std::size_t>(L), 0);
        for (int i : mask_idx) {
            if (i < 0 || i >= L) throw std::invalid_argument("forward: mask index out of range");
            ws.masked[static_cast<std::size_t>(i)] = 1;
        }

        ws.tok0.resize(L * F, D);
        for (int i = 0; i < L; ++i) {
            const StayEvent& e = seq.events[static_cast<std::size_t>(i)];
            validate_event(e);
            Real* ch = ws.channels.data() + static_cast<std::size_t>(i) * kNumChannels;
            event_channels(e, ch);
            ws.cats[static_cast<std::size_t>(i)] = {e.poi, e.dow};
            Real* rows = ws.tok0.row(i * F);
            if (ws.masked[static_cast<std::size_t>(i)]) {
                const Real* mt = p(layout.mask_token);
                for (int f = 0; f < F; ++f)
                    std::copy(mt, mt + D, rows + static_cast<std::size_t>(f) * D);
            } else {
                write_tokens(ch, ws.cats[static_cast<std::size_t>(i)], rows);
            }
        }

        // dropout after the feature embeddings
        if (stochastic && cfg.dropout_p > 0.0) {
            Rng rng(derive_seed(dropout_seed, 0xD80Full));
            const Real scale = Real(1.0 / (1.0 - cfg.dropout_p));
            ws.keep.assign(ws.tok0.size(), 1);
            for (std::size_t i = 0; i < ws.tok0.size(); ++i) {
                if (rng.uniform01() < cfg.dropout_p) {
                    ws.keep[i] = 0;
                    ws.tok0.a[i] = Real(0);
                } else {
                    ws.tok0.a[i] *= scale;
                }
            }
        } else {
            ws.keep.clear();
        }

        // feature-level blocks: segments of F rows, compensated sums
        ws.fblk.resize(static_cast<std::size_t>(cfg.m1));
        const Mat<Real>* cur = &ws.tok0;
        for (int m = 0; m < cfg.m1; ++m) {
            block_forward(layout.feat_blocks[static_cast<std::size_t>(m)], *cur, F, true,
                          ws.fblk[static_cast<std::size_t>(m)]);
            cur = &ws.fblk[static_cast<std::size_t>(m)].y;
        }

        // event embeddings: compensated feature sum + positional rows
        ws.ev0.resize(L, D);
        for (int i = 0; i < L; ++i) {
            const StayEvent& e = seq.events[static_cast<std::size_t>(i)];
            if (e.idx < 0 || e.idx >= cfg.max_per_day)
                throw std::invalid_argument("forward: within-day index exceeds position table");
            const Real* ps = p(layout.pos_seq) + static_cast<std::size_t>(i) * D;
            const Real* pd = p(layout.pos_day) + static_cast<std::size_t>(e.idx) * D;
            Real* out = ws.ev0.row(i);
            for (int dcol = 0; dcol < D; ++dcol) {
                const Real s = linalg::neumaier_sum(cur->row(i * F) + dcol, F, D);
                out[dcol] = s + ps[dcol] + pd[dcol];
            }
        }

        // event-level blocks
        ws.eblk.resize(static_cast<std::size_t>(cfg.m2));
        const Mat<Real>* ecur = &ws.ev0;
        for (int m = 0; m < cfg.m2; ++m) {
            block_forward(layout.event_blocks[static_cast<std::size_t>(m)], *ecur, L, false,
                          ws.eblk[static_cast<std::size_t>(m)]);
            ecur = &ws.eblk[static_cast<std::size_t>(m)].y;
        }
        ws.e_bar = ecur;
    }

    /// forward_masked: stochastic or deterministic pass returning decoder
    /// outputs at the masked positions.
    std::vector<DecoderOutput<Real>> forward_masked(const EventSequence& seq,
                                                    const std::vector<int>& mask_idx, bool stochastic,
                                                    std::uint64_t seed, Workspace<Real>& ws) const {
        if (mask_idx.empty()) throw std::invalid_argument("forward_masked: empty mask set");
        forward(seq, mask_idx, stochastic, seed, ws);
        std::vector<DecoderOutput<Real>> out;
        out.reserve(mask_idx.size());
        for (int i : mask_idx) out.push_back(decode(ws, i));
        return out;
    }

    DecoderOutput<Real> decode(const Workspace<Real>& ws, int pos) const {
        if (pos < 0 || pos >= ws.L) throw std::invalid_argument("decode: position out of range");
        const Real* e = ws.e_bar->row(pos);
        const int D = cfg.d;
        DecoderOutput<Real> o;
        const Real* mw = p(layout.head_num_mean_w);
        const Real* mb = p(layout.head_num_mean_b);
        const Real* vw = p(layout.head_num_logvar_w);
        const Real* vb = p(layout.head_num_logvar_b);
        for (int f = 0; f < kNumScalar; ++f) {
            Real sm = mb[f], sv = vb[f];
            const Real* mwf = mw + static_cast<std::size_t>(f) * D;
            const Real* vwf = vw + static_cast<std::size_t>(f) * D;
            for (int dcol = 0; dcol < D; ++dcol) {
                sm += mwf[dcol] * e[dcol];
                sv += vwf[dcol] * e[dcol];
            }
            o.num_mean[static_cast<std::size_t>(f)] = sm;
            o.num_logvar[static_cast<std::size_t>(f)] = sv;
        }
        for (int fi = 0; fi < kNumCat; ++fi) {
            const int C = cfg.cat_size(fi);
            auto& u = o.cat_u[static_cast<std::size_t>(fi)];
            auto& ls = o.cat_logsigma[static_cast<std::size_t>(fi)];
            u.assign(static_cast<std::size_t>(C), Real(0));
            ls.assign(static_cast<std::size_t>(C), Real(0));
            const Real* uw = p(layout.head_cat_u_w[static_cast<std::size_t>(fi)]);
            const Real* ub = p(layout.head_cat_u_b[static_cast<std::size_t>(fi)]);
            const Real* sw = p(layout.head_cat_s_w[static_cast<std::size_t>(fi)]);
            const Real* sb = p(layout.head_cat_s_b[static_cast<std::size_t>(fi)]);
            for (int c = 0; c < C; ++c) {
                u[static_cast<std::size_t>(c)] = ub[c];
                ls[static_cast<std::size_t>(c)] = sb[c];
            }
            for (int dcol = 0; dcol < D; ++dcol) {
                const Real ev = e[dcol];
                const Real* uwr = uw + static_cast<std::size_t>(dcol) * C;
                const Real* swr = sw + static_cast<std::size_t>(dcol) * C;
                for (int c = 0; c < C; ++c) {
                    u[static_cast<std::size_t>(c)] += ev * uwr[c];
                    ls[static_cast<std::size_t>(c)] += ev * swr[c];
                }
            }
        }
        return o;
    }

    // ---- backward ----------------------------------------------------------

    /// Accumulates parameter gradients for one sequence given head-output
    /// gradients at the masked positions. `grad` must have layout.total size.
    void backward(const EventSequence& seq, Workspace<Real>& ws,
                  const std::vector<std::pair<int, HeadGrads<Real>>>& head_grads,
                  std::vector<Real>& grad) const {
        const int L = ws.L, D = cfg.d, F = kNumTokens;
        ws.g_ev.resize(L, D);
        ws.g_ev.zero();

        // heads
        for (const auto& [pos, hg] : head_grads) {
            const Real* e = ws.e_bar->row(pos);
            Real* ge = ws.g_ev.row(pos);
            Real* g_mw = grad.data() + layout.head_num_mean_w;
            Real* g_mb = grad.data() + layout.head_num_mean_b;
            Real* g_vw = grad.data() + layout.head_num_logvar_w;
            Real* g_vb = grad.data() + layout.head_num_logvar_b;
            const Real* mw = p(layout.head_num_mean_w);
            const Real* vw = p(layout.head_num_logvar_w);
            for (int f = 0; f < kNumScalar; ++f) {
                const Real gm = hg.d_mean[static_cast<std::size_t>(f)];
                const Real gv = hg.d_logvar[static_cast<std::size_t>(f)];
                if (gm != Real(0)) {
                    g_mb[f] += gm;
                    Real* gw = g_mw + static_cast<std::size_t>(f) * D;
                    const Real* wf = mw + static_cast<std::size_t>(f) * D;
                    for (int dcol = 0; dcol < D; ++dcol) {
                        gw[dcol] += gm * e[dcol];
                        ge[dcol] += gm * wf[dcol];
                    }
                }
                if (gv != Real(0)) {
                    g_vb[f] += gv;
                    Real* gw = g_vw + static_cast<std::size_t>(f) * D;
                    const Real* wf = vw + static_cast<std::size_t>(f) * D;
                    for (int dcol = 0; dcol < D; ++dcol) {
                        gw[dcol] += gv * e[dcol];
                        ge[dcol] += gv * wf[dcol];
                    }
                }
            }
            for (int fi = 0; fi < kNumCat; ++fi) {
                const int C = cfg.cat_size(fi);
                const auto& du = hg.d_u[static_cast<std::size_t>(fi)];
                const auto& dls = hg.d_logsigma[static_cast<std::size_t>(fi)];
                Real* g_uw = grad.data() + layout.head_cat_u_w[static_cast<std::size_t>(fi)];
                Real* g_ub = grad.data() + layout.head_cat_u_b[static_cast<std::size_t>(fi)];
                Real* g_sw = grad.data() + layout.head_cat_s_w[static_cast<std::size_t>(fi)];
                Real* g_sb = grad.data() + layout.head_cat_s_b[static_cast<std::size_t>(fi)];
                const Real* uw = p(layout.head_cat_u_w[static_cast<std::size_t>(fi)]);
                const Real* sw = p(layout.head_cat_s_w[static_cast<std::size_t>(fi)]);
                for (int c = 0; c < C; ++c) {
                    g_ub[c] += du[static_cast<std::size_t>(c)];
                    g_sb[c] += dls[static_cast<std::size_t>(c)];
                }
                for (int dcol = 0; dcol < D; ++dcol) {
                    const Real ev = e[dcol];
                    Real* g_uwr = g_uw + static_cast<std::size_t>(dcol) * C;
                    Real* g_swr = g_sw + static_cast<std::size_t>(dcol) * C;
                    const Real* uwr = uw + static_cast<std::size_t>(dcol) * C;
                    const Real* swr = sw + static_cast<std::size_t>(dcol) * C;
                    Real acc = Real(0);
                    for (int c = 0; c < C; ++c) {
                        g_uwr[c] += ev * du[static_cast<std::size_t>(c)];
                        g_swr[c] += ev * dls[static_cast<std::size_t>(c)];
                        acc += du[static_cast<std::size_t>(c)] * uwr[c] +
                               dls[static_cast<std::size_t>(c)] * swr[c];
                    }
                    ge[dcol] += acc;
                }
            }
        }

        // event-level blocks
        Mat<Real>& g_cur = ws.g_ev;
        for (int m = cfg.m2 - 1; m >= 0; --m)
            block_backward(layout.event_blocks[static_cast<std::size_t>(m)], L,
                           ws.eblk[static_cast<std::size_t>(m)], g_cur, grad, ws);

        // positions + feature sum
        Real* g_pos_seq = grad.data() + layout.pos_seq;
        Real* g_pos_day = grad.data() + layout.pos_day;
        ws.g_x.resize(L * F, D);
        for (int i = 0; i < L; ++i) {
            const StayEvent& e = seq.events[static_cast<std::size_t>(i)];
            const Real* gi = g_cur.row(i);
            Real* gps = g_pos_seq + static_cast<std::size_t>(i) * D;
            Real* gpd = g_pos_day + static_cast<std::size_t>(e.idx) * D;
            for (int dcol = 0; dcol < D; ++dcol) {
                gps[dcol] += gi[dcol];
                gpd[dcol] += gi[dcol];
            }
            for (int f = 0; f < F; ++f)
                std::copy(gi, gi + D, ws.g_x.row(i * F + f));
        }

        // feature-level blocks
        Mat<Real>& g_feat = ws.g_x;
        for (int m = cfg.m1 - 1; m >= 0; --m)
            block_backward(layout.feat_blocks[static_cast<std::size_t>(m)], F,
                           ws.fblk[static_cast<std::size_t>(m)], g_feat, grad, ws);

        // dropout
        if (!ws.keep.empty()) {
            const Real scale = Real(1.0 / (1.0 - cfg.dropout_p));
            for (std::size_t i = 0; i < g_feat.size(); ++i)
                g_feat.a[i] = ws.keep[i] ? g_feat.a[i] * scale : Real(0);
        }

        // tokenizer
        Real* g_mask = grad.data() + layout.mask_token;
        for (int i = 0; i < L; ++i) {
            const Real* ch = ws.channels.data() + static_cast<std::size_t>(i) * kNumChannels;
            if (ws.masked[static_cast<std::size_t>(i)]) {
                for (int f = 0; f < F; ++f) {
                    const Real* g = g_feat.row(i * F + f);
                    for (int dcol = 0; dcol < D; ++dcol) g_mask[dcol] += g[dcol];
                }
                continue;
            }
            for (int f = 0; f < kNumScalar; ++f) {
                const Real* g = g_feat.row(i * F + f);
                Real* gw = grad.data() + layout.tok_num_w + static_cast<std::size_t>(f) * D;
                Real* gb = grad.data() + layout.tok_num_b + static_cast<std::size_t>(f) * D;
                const Real xv = ch[f];
                for (int dcol = 0; dcol < D; ++dcol) {
                    gw[dcol] += xv * g[dcol];
                    gb[dcol] += g[dcol];
                }
            }
            {
                const Real* g = g_feat.row(i * F + kTokTrip);
                Real* gb = grad.data() + layout.tok_trip_b;
                for (int dcol = 0; dcol < D; ++dcol) gb[dcol] += g[dcol];
                for (int c = 0; c < kTripFeatureDim; ++c) {
                    const Real xv = ch[kNumScalar + c];
                    if (xv == Real(0)) continue;
                    Real* gw = grad.data() + layout.tok_trip_w + static_cast<std::size_t>(c) * D;
                    for (int dcol = 0; dcol < D; ++dcol) gw[dcol] += xv * g[dcol];
                }
            }
            {
                const auto& cat = ws.cats[static_cast<std::size_t>(i)];
                Real* gp = grad.data() + layout.tok_poi + static_cast<std::size_t>(cat[0]) * D;
                Real* gd = grad.data() + layout.tok_dow + static_cast<std::size_t>(cat[1]) * D;
                const Real* g_poi = g_feat.row(i * F + kTokPoi);
                const Real* g_dow = g_feat.row(i * F + kTokDow);
                for (int dcol = 0; dcol < D; ++dcol) {
                    gp[dcol] += g_poi[dcol];
                    gd[dcol] += g_dow[dcol];
                }
            }
        }
    }

    // ---- checkpoint --------------------------------------------------------

    void save(std::ostream& os) const {
        const char magic[8] = {'U', 'S', 'T', 'A', 'D', 'C', 'P', '1'};
        os.write(magic, 8);
        const std::uint32_t version = 1;
        const std::uint32_t real_size = sizeof(Real);
        os.write(reinterpret_cast<const char*>(&version), 4);
        os.write(reinterpret_cast<const char*>(&real_size), 4);
        auto wi = [&](std::int64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); };
        auto wd = [&](double v) { os.write(reinterpret_cast<const char*>(&v), 8); };
        wi(cfg.d); wi(cfg.m1); wi(cfg.m2); wi(cfg.n_head);
        wd(cfg.dropout_p); wd(cfg.mask_ratio);
        wi(cfg.t_infer); wd(cfg.lambda); wi(cfg.knn_k); wi(cfg.w); wi(cfg.max_len);
        wd(cfg.time_radius); wi(cfg.n_poi); wi(cfg.ffn_mult); wi(cfg.max_per_day); wi(cfg.t_train);
        for (double m : stats.mean) wd(m);
        for (double s : stats.stdev) wd(s);
        const std::uint64_t n = params.size();
        os.write(reinterpret_cast<const char*>(&n), 8);
        os.write(reinterpret_cast<const char*>(params.data()),
                 static_cast<std::streamsize>(n * sizeof(Real)));
        if (!os) throw std::runtime_error("checkpoint save failed");
    }

    static Model load(std::istream& is) {
        char magic[8];
        is.read(magic, 8);
        if (!is || std::memcmp(magic, "USTADCP1", 8) != 0)
            throw std::runtime_error("checkpoint: bad magic bytes");
        std::uint32_t version = 0, real_size = 0;
        is.read(reinterpret_cast<char*>(&version), 4);
        is.read(reinterpret_cast<char*>(&real_size), 4);
        if (version != 1) throw std::runtime_error("checkpoint: unsupported schema version");
        if (real_size != sizeof(Real))
            throw std::runtime_error("checkpoint: precision mismatch (expected " +
                                     std::to_string(sizeof(Real) * 8) + "-bit)");
        ModelConfig c;
        NormStats s;
        auto ri = [&]() { std::int64_t v; is.read(reinterpret_cast<char*>(&v), 8); return v; };
        auto rd = [&]() { double v; is.read(reinterpret_cast<char*>(&v), 8); return v; };
        c.d = static_cast<int>(ri()); c.m1 = static_cast<int>(ri()); c.m2 = static_cast<int>(ri());
        c.n_head = static_cast<int>(ri());
        c.dropout_p = rd(); c.mask_ratio = rd();
        c.t_infer = static_cast<int>(ri()); c.lambda = rd(); c.knn_k = static_cast<int>(ri());
        c.w = static_cast<int>(ri()); c.max_len = static_cast<int>(ri());
        c.time_radius = rd(); c.n_poi = static_cast<int>(ri()); c.ffn_mult = static_cast<int>(ri());
        c.max_per_day = static_cast<int>(ri()); c.t_train = static_cast<int>(ri());
        for (auto& m : s.mean) m = rd();
        for (auto& sd : s.stdev) sd = rd();
        Model model(c, s, 0);
        std::uint64_t n = 0;
        is.read(reinterpret_cast<char*>(&n), 8);
        if (n != model.params.size()) throw std::runtime_error("checkpoint: parameter count mismatch");
        is.read(reinterpret_cast<char*>(model.params.data()),
                static_cast<std::streamsize>(n * sizeof(Real)));
        if (!is) throw std::runtime_error("checkpoint: truncated file");
        return model;
    }

private:
    void validate_event(const StayEvent& e) const {
        if (e.poi < 0 || e.poi >= cfg.n_poi)
            throw std::invalid_argument("tokenize: poi out of range");
        if (e.dow < 0 || e.dow > 6) throw std::invalid_argument("tokenize: dow out of range");
    }

    /// Writes the F token rows for one event into `rows` ((F x D) row-major).
    void write_tokens(const Real* ch, const std::array<int, kNumCat>& cat, Real* rows) const {
        const int D = cfg.d;
        for (int f = 0; f < kNumScalar; ++f) {
            const Real* w = p(layout.tok_num_w) + static_cast<std::size_t>(f) * D;
            const Real* b = p(layout.tok_num_b) + static_cast<std::size_t>(f) * D;
            Real* r = rows + static_cast<std::size_t>(f) * D;
            const Real xv = ch[f];
            for (int dcol = 0; dcol < D; ++dcol) r[dcol] = b[dcol] + xv * w[dcol];
        }
        {
            Real* r = rows + static_cast<std::size_t>(kTokTrip) * D;
            const Real* b = p(layout.tok_trip_b);
            std::copy(b, b + D, r);
            for (int c = 0; c < kTripFeatureDim; ++c) {
                const Real xv = ch[kNumScalar + c];
                if (xv == Real(0)) continue;
                const Real* w = p(layout.tok_trip_w) + static_cast<std::size_t>(c) * D;
                for (int dcol = 0; dcol < D; ++dcol) r[dcol] += xv * w[dcol];
            }
        }
        {
            const Real* prow = p(layout.tok_poi) + static_cast<std::size_t>(cat[0]) * D;
            std::copy(prow, prow + D, rows + static_cast<std::size_t>(kTokPoi) * D);
            const Real* drow = p(layout.tok_dow) + static_cast<std::size_t>(cat[1]) * D;
            std::copy(drow, drow + D, rows + static_cast<std::size_t>(kTokDow) * D);
        }
    }

    /// One transformer block over `n_seg` segments of length S (rows of x).
    /// Compensated sums along the key axis when `comp` is set.
    void block_forward(const TransformerBlockOffsets& t, const Mat<Real>& x, int S, bool comp,
                       BlockCache<Real>& c) const {
        const int N = x.rows, D = cfg.d, H = cfg.ffn_dim();
        const int nh = cfg.n_head, dh = cfg.head_dim();
        const int n_seg = N / S;
        const Real scale = Real(1) / std::sqrt(Real(dh));

        c.x = x;
        c.q.resize(N, D);
        c.k.resize(N, D);
        c.v.resize(N, D);
        linalg::matmul(x.a.data(), p(t.wq), c.q.a.data(), N, D, D);
        linalg::add_row_bias(c.q.a.data(), p(t.bq), N, D);
        linalg::matmul(x.a.data(), p(t.wk), c.k.a.data(), N, D, D);
        linalg::add_row_bias(c.k.a.data(), p(t.bk), N, D);
        linalg::matmul(x.a.data(), p(t.wv), c.v.a.data(), N, D, D);
        linalg::add_row_bias(c.v.a.data(), p(t.bv), N, D);

        c.attn.assign(static_cast<std::size_t>(n_seg) * nh * S * S, Real(0));
        c.ctx.resize(N, D);
        std::vector<Real> logits(static_cast<std::size_t>(S));
        std::vector<Real> terms(static_cast<std::size_t>(S));
        for (int seg = 0; seg < n_seg; ++seg) {
            const int base = seg * S;
            for (int h = 0; h < nh; ++h) {
                const int col = h * dh;
                Real* a_seg = c.attn.data() +
                              (static_cast<std::size_t>(seg) * nh + h) * S * S;
                for (int qi = 0; qi < S; ++qi) {
                    const Real* qrow = c.q.row(base + qi) + col;
                    for (int ki = 0; ki < S; ++ki) {
                        const Real* krow = c.k.row(base + ki) + col;
                        Real s = Real(0);
                        for (int dd = 0; dd < dh; ++dd) s += qrow[dd] * krow[dd];
                        logits[static_cast<std::size_t>(ki)] = s * scale;
                    }
                    Real mx = logits[0];
                    for (int ki = 1; ki < S; ++ki) mx = std::max(mx, logits[static_cast<std::size_t>(ki)]);
                    Real* arow = a_seg + static_cast<std::size_t>(qi) * S;
                    for (int ki = 0; ki < S; ++ki) arow[ki] = std::exp(logits[static_cast<std::size_t>(ki)] - mx);
                    const Real den = comp ? linalg::neumaier_sum(arow, S)
                                          : [&] {
                                                Real ssum = Real(0);
                                                for (int ki = 0; ki < S; ++ki) ssum += arow[ki];
                                                return ssum;
                                            }();
                    for (int ki = 0; ki < S; ++ki) arow[ki] /= den;
                    Real* orow = c.ctx.row(base + qi) + col;
                    if (comp) {
                        for (int dd = 0; dd < dh; ++dd) {
                            for (int ki = 0; ki < S; ++ki)
                                terms[static_cast<std::size_t>(ki)] = arow[ki] * c.v.at(base + ki, col + dd);
                            orow[dd] = linalg::neumaier_sum(terms.data(), S);
                        }
                    } else {
                        for (int dd = 0; dd < dh; ++dd) orow[dd] = Real(0);
                        for (int ki = 0; ki < S; ++ki) {
                            const Real a = arow[ki];
                            const Real* vrow = c.v.row(base + ki) + col;
                            for (int dd = 0; dd < dh; ++dd) orow[dd] += a * vrow[dd];
                        }
                    }
                }
            }
        }

        c.attn_out.resize(N, D);
        linalg::matmul(c.ctx.a.data(), p(t.wo), c.attn_out.a.data(), N, D, D);
        linalg::add_row_bias(c.attn_out.a.data(), p(t.bo), N, D);

        c.h.resize(N, D);
        for (std::size_t i = 0; i < c.h.size(); ++i) c.h.a[i] = x.a[i] + c.attn_out.a[i];

        c.f_pre.resize(N, H);
        linalg::matmul(c.h.a.data(), p(t.w1), c.f_pre.a.data(), N, D, H);
        linalg::add_row_bias(c.f_pre.a.data(), p(t.b1), N, H);
        c.f_act.resize(N, H);
        for (std::size_t i = 0; i < c.f_pre.size(); ++i) c.f_act.a[i] = linalg::gelu(c.f_pre.a[i]);

        c.y.resize(N, D);
        linalg::matmul(c.f_act.a.data(), p(t.w2), c.y.a.data(), N, H, D);
        linalg::add_row_bias(c.y.a.data(), p(t.b2), N, D);
        for (std::size_t i = 0; i < c.y.size(); ++i) c.y.a[i] += c.h.a[i];
    }

    /// Backward through one block: consumes d(out) in g_io (N x D), leaves
    /// d(in) in the same buffer, accumulates parameter grads.
    void block_backward(const TransformerBlockOffsets& t, int S, const BlockCache<Real>& c,
                        Mat<Real>& g_io, std::vector<Real>& grad, Workspace<Real>& ws) const {
        const int N = c.x.rows, D = cfg.d, H = cfg.ffn_dim();
        const int nh = cfg.n_head, dh = cfg.head_dim();
        const int n_seg = N / S;
        const Real scale = Real(1) / std::sqrt(Real(dh));

        // FFN backward: y = h + gelu(h W1 + b1) W2 + b2
        Mat<Real>& g_h = ws.g_h;
        Mat<Real>& g_fact = ws.g_fact;
        Mat<Real>& g_fpre = ws.g_fpre;
        g_h.resize(N, D);
        g_fact.resize(N, H);
        g_fpre.resize(N, H);

        Real* g_b2 = grad.data() + t.b2;
        for (int i = 0; i < N; ++i) {
            const Real* gy = g_io.row(i);
            for (int j = 0; j < D; ++j) g_b2[j] += gy[j];
        }
        linalg::matmul_tn(c.f_act.a.data(), g_io.a.data(), grad.data() + t.w2, N, H, D, true);
        linalg::matmul_nt(g_io.a.data(), p(t.w2), g_fact.a.data(), N, D, H);
        for (std::size_t i = 0; i < g_fpre.size(); ++i)
            g_fpre.a[i] = g_fact.a[i] * linalg::gelu_grad(c.f_pre.a[i]);
        Real* g_b1 = grad.data() + t.b1;
        for (int i = 0; i < N; ++i) {
            const Real* gf = g_fpre.row(i);
            for (int j = 0; j < H; ++j) g_b1[j] += gf[j];
        }
        linalg::matmul_tn(c.h.a.data(), g_fpre.a.data(), grad.data() + t.w1, N, D, H, true);
        // g_h = g_y (residual) + g_fpre W1^T
        g_h = g_io;
        linalg::matmul_nt(g_fpre.a.data(), p(t.w1), g_h.a.data(), N, H, D, true);

        // attention backward: h = x + ctx Wo + bo
        Real* g_bo = grad.data() + t.bo;
        for (int i = 0; i < N; ++i) {
            const Real* gh = g_h.row(i);
            for (int j = 0; j < D; ++j) g_bo[j] += gh[j];
        }
        linalg::matmul_tn(c.ctx.a.data(), g_h.a.data(), grad.data() + t.wo, N, D, D, true);
        Mat<Real>& g_ctx = ws.g_ctx;
        g_ctx.resize(N, D);
        linalg::matmul_nt(g_h.a.data(), p(t.wo), g_ctx.a.data(), N, D, D);

        Mat<Real>& g_q = ws.g_q;
        Mat<Real>& g_k = ws.g_k;
        Mat<Real>& g_v = ws.g_v;
        g_q.resize(N, D);
        g_q.zero();
        g_k.resize(N, D);
        g_k.zero();
        g_v.resize(N, D);
        g_v.zero();

        std::vector<Real> g_arow(static_cast<std::size_t>(S));
        for (int seg = 0; seg < n_seg; ++seg) {
            const int base = seg * S;
            for (int h = 0; h < nh; ++h) {
                const int col = h * dh;
                const Real* a_seg = c.attn.data() +
                                    (static_cast<std::size_t>(seg) * nh + h) * S * S;
                for (int qi = 0; qi < S; ++qi) {
                    const Real* arow = a_seg + static_cast<std::size_t>(qi) * S;
                    const Real* g_out = g_ctx.row(base + qi) + col;
                    // dA = g_out V^T ; dV += A^T g_out
                    Real dot = Real(0);
                    for (int ki = 0; ki < S; ++ki) {
                        const Real* vrow = c.v.row(base + ki) + col;
                        Real s = Real(0);
                        for (int dd = 0; dd < dh; ++dd) s += g_out[dd] * vrow[dd];
                        g_arow[static_cast<std::size_t>(ki)] = s;
                        dot += s * arow[ki];
                        Real* gv = g_v.row(base + ki) + col;
                        const Real a = arow[ki];
                        for (int dd = 0; dd < dh; ++dd) gv[dd] += a * g_out[dd];
                    }
                    // dS = A o (dA - sum(dA o A)); dQ += dS K scale; dK += dS^T Q scale
                    const Real* qrow = c.q.row(base + qi) + col;
                    Real* gq = g_q.row(base + qi) + col;
                    for (int ki = 0; ki < S; ++ki) {
                        const Real ds = arow[ki] * (g_arow[static_cast<std::size_t>(ki)] - dot) * scale;
                        if (ds == Real(0)) continue;
                        const Real* krow = c.k.row(base + ki) + col;
                        Real* gk = g_k.row(base + ki) + col;
                        for (int dd = 0; dd < dh; ++dd) {
                            gq[dd] += ds * krow[dd];
                            gk[dd] += ds * qrow[dd];
                        }
                    }
                }
            }
        }

        // projections
        Real* g_bq = grad.data() + t.bq;
        Real* g_bk = grad.data() + t.bk;
        Real* g_bv = grad.data() + t.bv;
        for (int i = 0; i < N; ++i) {
            const Real* gq = g_q.row(i);
            const Real* gk = g_k.row(i);
            const Real* gv = g_v.row(i);
            for (int j = 0; j < D; ++j) {
                g_bq[j] += gq[j];
                g_bk[j] += gk[j];
                g_bv[j] += gv[j];
            }
        }
        linalg::matmul_tn(c.x.a.data(), g_q.a.data(), grad.data() + t.wq, N, D, D, true);
        linalg::matmul_tn(c.x.a.data(), g_k.a.data(), grad.data() + t.wk, N, D, D, true);
        linalg::matmul_tn(c.x.a.data(), g_v.a.data(), grad.data() + t.wv, N, D, D, true);

        // d(in) = g_h (both residual paths) + projections' input grads
        Mat<Real>& g_x = g_io;
        g_x = g_h;
        linalg::matmul_nt(g_q.a.data(), p(t.wq), g_x.a.data(), N, D, D, true);
        linalg::matmul_nt(g_k.a.data(), p(t.wk), g_x.a.data(), N, D, D, true);
        linalg::matmul_nt(g_v.a.data(), p(t.wv), g_x.a.data(), N, D, D, true);
    }
};

// ---------------------------------------------------------------------------
// standalone attention op (the Eq. 10 kernel with key masking)
// ---------------------------------------------------------------------------

/// softmax(Q K^T / sqrt(d)) V with optional key validity mask. Masked keys
/// get -inf logits; a query with zero valid keys is an error.
template <class Real>
Mat<Real> attention(const Mat<Real>& Q, const Mat<Real>& K, const Mat<Real>& V,
                    const std::vector<std::uint8_t>* key_valid = nullptr, bool compensated = false) {
    if (Q.cols != K.cols || K.rows != V.rows)
        throw std::invalid_argument("attention: inconsistent shapes");
    if (key_valid && static_cast<int>(key_valid->size()) != K.rows)
        throw std::invalid_argument("attention: mask size mismatch");
    const int n = Q.rows, nk = K.rows, d = Q.cols, dv = V.cols;
    if (key_valid) {
        bool any = false;
        for (auto v : *key_valid) any |= v != 0;
        if (!any) throw std::invalid_argument("attention: all keys masked");
    }
    const Real scale = Real(1) / std::sqrt(Real(d));
    Mat<Real> out(n, dv);
    std::vector<Real> logits(static_cast<std::size_t>(nk));
    std::vector<Real> w(static_cast<std::size_t>(nk));
    std::vector<Real> terms(static_cast<std::size_t>(nk));
    for (int qi = 0; qi < n; ++qi) {
        Real mx = -std::numeric_limits<Real>::infinity();
        for (int ki = 0; ki < nk; ++ki) {
            if (key_valid && !(*key_valid)[static_cast<std::size_t>(ki)]) {
                logits[static_cast<std::size_t>(ki)] = -std::numeric_limits<Real>::infinity();
                continue;
            }
            Real s = Real(0);
            const Real* qr = Q.row(qi);
            const Real* kr = K.row(ki);
            for (int dd = 0; dd < d; ++dd) s += qr[dd] * kr[dd];
            logits[static_cast<std::size_t>(ki)] = s * scale;
            mx = std::max(mx, logits[static_cast<std::size_t>(ki)]);
        }
        for (int ki = 0; ki < nk; ++ki)
            w[static_cast<std::size_t>(ki)] =
                std::isinf(logits[static_cast<std::size_t>(ki)]) ? Real(0)
                                                                 : std::exp(logits[static_cast<std::size_t>(ki)] - mx);
        Real den;
        if (compensated) {
            den = linalg::neumaier_sum(w.data(), nk);
        } else {
            den = Real(0);
            for (int ki = 0; ki < nk; ++ki) den += w[static_cast<std::size_t>(ki)];
        }
        for (int ki = 0; ki < nk; ++ki) w[static_cast<std::size_t>(ki)] /= den;
        for (int dd = 0; dd < dv; ++dd) {
            if (compensated) {
                for (int ki = 0; ki < nk; ++ki)
                    terms[static_cast<std::size_t>(ki)] = w[static_cast<std::size_t>(ki)] * V.at(ki, dd);
                out.at(qi, dd) = linalg::neumaier_sum(terms.data(), nk);
            } else {
                Real s = Real(0);
                for (int ki = 0; ki < nk; ++ki) s += w[static_cast<std::size_t>(ki)] * V.at(ki, dd);
                out.at(qi, dd) = s;
            }
        }
    }
    return out;
}

/// Row-stochastic attention weights for one query row (test hook).
template <class Real>
std::vector<Real> attention_weights(const Mat<Real>& Q, const Mat<Real>& K, int qi,
                                    const std::vector<std::uint8_t>* key_valid = nullptr) {
    const int nk = K.rows, d = Q.cols;
    const Real scale = Real(1) / std::sqrt(Real(d));
    std::vector<Real> logits(static_cast<std::size_t>(nk));
    Real mx = -std::numeric_limits<Real>::infinity();
    for (int ki = 0; ki < nk; ++ki) {
        if (key_valid && !(*key_valid)[static_cast<std::size_t>(ki)]) {
            logits[static_cast<std::size_t>(ki)] = -std::numeric_limits<Real>::infinity();
            continue;
        }
        Real s = Real(0);
        for (int dd = 0; dd < d; ++dd) s += Q.at(qi, dd) * K.at(ki, dd);
        logits[static_cast<std::size_t>(ki)] = s * scale;
        mx = std::max(mx, logits[static_cast<std::size_t>(ki)]);
    }
    if (std::isinf(mx)) throw std::invalid_argument("attention: all keys masked");
    std::vector<Real> w(static_cast<std::size_t>(nk));
    Real den = Real(0);
    for (int ki = 0; ki < nk; ++ki) {
        w[static_cast<std::size_t>(ki)] =
            std::isinf(logits[static_cast<std::size_t>(ki)]) ? Real(0)
                                                             : std::exp(logits[static_cast<std::size_t>(ki)] - mx);
        den += w[static_cast<std::size_t>(ki)];
    }
    for (auto& v : w) v /= den;
    return w;
}

}  // namespace ustad::seqmodel
