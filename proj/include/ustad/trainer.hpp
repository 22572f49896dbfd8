#pragma once

// Masked-event training loop: Adam with L2 weight decay, seeded batch
// shuffling and mask selection, Eq. 5 + Eq. 7 losses summed per Eq. 8 and
// averaged over the batch's masked events.
//
// Parallelism is chunked for determinism: each fixed-size chunk of the batch
// accumulates into its own gradient buffer and buffers merge in chunk order,
// so results are byte-identical for any worker count.

#include <atomic>
#include <cmath>
#include <functional>
#include <thread>
#include <vector>

#include "ustad/losses.hpp"
#include "ustad/seqmodel.hpp"

namespace ustad::seqmodel {

/// parallel_chunks(n, workers, chunk, fn): fn(chunk_index, begin, end).
/// Chunk identity, not worker identity, keys any accumulation.
inline void parallel_chunks(std::size_t n, int n_workers, std::size_t chunk_size,
                            const std::function<void(std::size_t, std::size_t, std::size_t)>& fn) {
    if (n == 0) return;
    const std::size_t n_chunks = (n + chunk_size - 1) / chunk_size;
    if (n_workers <= 0) n_workers = static_cast<int>(std::thread::hardware_concurrency());
    if (n_workers < 1) n_workers = 1;
    const auto workers = static_cast<std::size_t>(n_workers);
    if (workers == 1 || n_chunks == 1) {
        for (std::size_t c = 0; c < n_chunks; ++c)
            fn(c, c * chunk_size, std::min(n, (c + 1) * chunk_size));
        return;
    }
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (;;) {
            const std::size_t c = next.fetch_add(1);
            if (c >= n_chunks) return;
            fn(c, c * chunk_size, std::min(n, (c + 1) * chunk_size));
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < std::min(workers, n_chunks); ++t) pool.emplace_back(work);
    work();
    for (auto& t : pool) t.join();
}

template <class Real>
struct Adam {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-5;
    std::vector<double> m, v;
    std::int64_t t = 0;

    void step(std::vector<Real>& w, const std::vector<Real>& g) {
        if (m.size() != w.size()) {
            m.assign(w.size(), 0.0);
            v.assign(w.size(), 0.0);
        }
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, double(t));
        const double bc2 = 1.0 - std::pow(beta2, double(t));
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = double(g[i]) + weight_decay * double(w[i]);
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            w[i] -= static_cast<Real>(lr * mhat / (std::sqrt(vhat) + eps));
        }
    }
};

struct TrainOptions {
    int epochs = 10;
    int batch_size = 128;
    double lr = 1e-3;
    double weight_decay = 1e-5;
    std::uint64_t seed = 0;
    int n_threads = 0;  // 0 = hardware
    std::size_t chunk_size = 16;
};

struct EpochStats {
    double train_loss = 0.0;
    double val_loss = 0.0;
};

/// Per-event loss + head gradients for the Eq. 8 objective. `scale` is the
/// 1/(batch masked-event count) factor. Returns the unscaled loss.
template <class Real>
double masked_event_loss(const Model<Real>& model, const Workspace<Real>& ws, int pos,
                         std::uint64_t noise_seed, Real scale, HeadGrads<Real>* hg) {
    const DecoderOutput<Real> out = model.decode(ws, pos);
    const Real* ch = ws.channels.data() + static_cast<std::size_t>(pos) * kNumChannels;
    double loss = 0.0;
    if (hg) {
        for (int fi = 0; fi < kNumCat; ++fi) {
            hg->d_u[static_cast<std::size_t>(fi)].assign(
                static_cast<std::size_t>(model.cfg.cat_size(fi)), Real(0));
            hg->d_logsigma[static_cast<std::size_t>(fi)].assign(
                static_cast<std::size_t>(model.cfg.cat_size(fi)), Real(0));
        }
    }
    for (int f = 0; f < kNumScalar; ++f) {
        const Real y = ch[f];
        const Real yhat = out.num_mean[static_cast<std::size_t>(f)];
        const Real r = out.num_logvar[static_cast<std::size_t>(f)];
        loss += double(uncertainty::loss_numeric(y, yhat, r));
        if (hg) {
            Real dy, dr;
            uncertainty::loss_numeric_grad(y, yhat, r, dy, dr);
            hg->d_mean[static_cast<std::size_t>(f)] = dy * scale;
            hg->d_logvar[static_cast<std::size_t>(f)] = dr * scale;
        }
    }
    const int cats[kNumCat] = {0, 1};
    for (int fi : cats) {
        const int C = model.cfg.cat_size(fi);
        const auto& u = out.cat_u[static_cast<std::size_t>(fi)];
        const auto& lsg = out.cat_logsigma[static_cast<std::size_t>(fi)];
        std::vector<Real> sigma(static_cast<std::size_t>(C));
        for (int c = 0; c < C; ++c) sigma[static_cast<std::size_t>(c)] = std::exp(lsg[static_cast<std::size_t>(c)]);
        const int true_class = ws.cats[static_cast<std::size_t>(pos)][static_cast<std::size_t>(fi)];
        const auto eps = uncertainty::sample_logit_noise<Real>(
            model.cfg.t_train, C, derive_seed(noise_seed, 0xE650ull, static_cast<std::uint64_t>(fi)));
        const Real lam = static_cast<Real>(model.cfg.lambda);
        if (hg) {
            std::vector<Real> du(static_cast<std::size_t>(C)), dsg(static_cast<std::size_t>(C));
            const Real l = uncertainty::loss_categorical_with_noise_grad(
                u.data(), sigma.data(), C, true_class, eps.data(), model.cfg.t_train, du.data(),
                dsg.data());
            loss += double(lam) * double(l);
            for (int c = 0; c < C; ++c) {
                hg->d_u[static_cast<std::size_t>(fi)][static_cast<std::size_t>(c)] =
                    lam * du[static_cast<std::size_t>(c)] * scale;
                hg->d_logsigma[static_cast<std::size_t>(fi)][static_cast<std::size_t>(c)] =
                    lam * dsg[static_cast<std::size_t>(c)] * sigma[static_cast<std::size_t>(c)] * scale;
            }
        } else {
            loss += double(lam) * double(uncertainty::loss_categorical_with_noise(
                        u.data(), sigma.data(), C, true_class, eps.data(), model.cfg.t_train));
        }
    }
    return loss;
}

/// Deterministic mask choice for one (epoch, sequence) pair.
inline std::vector<int> choose_mask(int length, double mask_ratio, std::uint64_t seed) {
    Rng rng(seed);
    const int n_mask = std::max(1, static_cast<int>(std::llround(mask_ratio * length)));
    auto idx = rng.sample_without_replacement(static_cast<std::size_t>(length),
                                              static_cast<std::size_t>(std::min(n_mask, length)));
    std::vector<int> out(idx.begin(), idx.end());
    return out;
}

template <class Real>
class Trainer {
public:
    Trainer(Model<Real>& model, TrainOptions opts) : model_(model), opts_(opts) {
        adam_.lr = opts.lr;
        adam_.weight_decay = opts.weight_decay;
    }

    /// One pass over the windows; returns mean loss per masked event.
    double run_epoch(const std::vector<EventSequence>& windows, int epoch) {
        std::vector<std::size_t> order(windows.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffle_rng(derive_seed(opts_.seed, 0x04dE4ull, static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        double epoch_loss = 0.0;
        std::size_t epoch_masked = 0;
        const auto B = static_cast<std::size_t>(opts_.batch_size);
        for (std::size_t start = 0; start < order.size(); start += B) {
            const std::size_t end = std::min(order.size(), start + B);
            const double batch_loss = train_batch(windows, order, start, end, epoch);
            epoch_loss += batch_loss * double(batch_masked_);
            epoch_masked += batch_masked_;
        }
        return epoch_masked ? epoch_loss / double(epoch_masked) : 0.0;
    }

    /// Mean loss per masked event under fixed (epoch-independent) masks and
    /// deterministic forward; used for validation tracking.
    double evaluate(const std::vector<EventSequence>& windows) {
        if (windows.empty()) return 0.0;
        std::vector<double> losses(windows.size(), 0.0);
        std::vector<std::size_t> counts(windows.size(), 0);
        parallel_chunks(windows.size(), opts_.n_threads, opts_.chunk_size,
                        [&](std::size_t, std::size_t lo, std::size_t hi) {
                            Workspace<Real> ws;
                            for (std::size_t i = lo; i < hi; ++i) {
                                const auto& seq = windows[i];
                                const auto mask = choose_mask(
                                    seq.length(), model_.cfg.mask_ratio,
                                    derive_seed(opts_.seed, 0xEA1ull, static_cast<std::uint64_t>(i)));
                                model_.forward(seq, mask, false, 0, ws);
                                for (int pos : mask)
                                    losses[i] += masked_event_loss<Real>(
                                        model_, ws, pos,
                                        derive_seed(opts_.seed, 0xEA2ull, static_cast<std::uint64_t>(i),
                                                    static_cast<std::uint64_t>(pos)),
                                        Real(1), nullptr);
                                counts[i] = mask.size();
                            }
                        });
        double total = 0.0;
        std::size_t n = 0;
        for (std::size_t i = 0; i < windows.size(); ++i) {
            total += losses[i];
            n += counts[i];
        }
        return n ? total / double(n) : 0.0;
    }

private:
    double train_batch(const std::vector<EventSequence>& windows,
                       const std::vector<std::size_t>& order, std::size_t start, std::size_t end,
                       int epoch) {
        const std::size_t n = end - start;
        // pass 1: choose masks, count masked events
        std::vector<std::vector<int>> masks(n);
        std::size_t total_masked = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const auto& seq = windows[order[start + i]];
            masks[i] = choose_mask(seq.length(), model_.cfg.mask_ratio,
                                   derive_seed(opts_.seed, 0x3A5Cull, static_cast<std::uint64_t>(epoch),
                                               order[start + i]));
            total_masked += masks[i].size();
        }
        batch_masked_ = total_masked;
        const Real scale = Real(1.0 / double(total_masked));

        const std::size_t n_chunks = (n + opts_.chunk_size - 1) / opts_.chunk_size;
        std::vector<std::vector<Real>> chunk_grads(n_chunks);
        std::vector<double> chunk_loss(n_chunks, 0.0);

        parallel_chunks(n, opts_.n_threads, opts_.chunk_size,
                        [&](std::size_t c, std::size_t lo, std::size_t hi) {
                            auto& grad = chunk_grads[c];
                            grad.assign(model_.layout.total, Real(0));
                            Workspace<Real> ws;
                            std::vector<std::pair<int, HeadGrads<Real>>> hgs;
                            for (std::size_t i = lo; i < hi; ++i) {
                                const auto& seq = windows[order[start + i]];
                                const std::uint64_t seq_seed =
                                    derive_seed(opts_.seed, 0xD40ull, static_cast<std::uint64_t>(epoch),
                                                order[start + i]);
                                model_.forward(seq, masks[i], true, seq_seed, ws);
                                hgs.clear();
                                for (int pos : masks[i]) {
                                    HeadGrads<Real> hg;
                                    chunk_loss[c] += masked_event_loss<Real>(
                                        model_, ws, pos,
                                        derive_seed(seq_seed, 0x105Eull, static_cast<std::uint64_t>(pos)),
                                        scale, &hg);
                                    hgs.emplace_back(pos, std::move(hg));
                                }
                                model_.backward(seq, ws, hgs, grad);
                            }
                        });

        // merge in chunk order
        grad_.assign(model_.layout.total, Real(0));
        double loss = 0.0;
        for (std::size_t c = 0; c < n_chunks; ++c) {
            if (chunk_grads[c].empty()) continue;
            for (std::size_t i = 0; i < grad_.size(); ++i) grad_[i] += chunk_grads[c][i];
            loss += chunk_loss[c];
        }
        adam_.step(model_.params, grad_);
        return loss / double(total_masked);
    }

    Model<Real>& model_;
    TrainOptions opts_;
    Adam<Real> adam_;
    std::vector<Real> grad_;
    std::size_t batch_masked_ = 0;
};

/// Full training run; returns per-epoch train/val losses.
template <class Real>
std::vector<EpochStats> train(Model<Real>& model, const std::vector<EventSequence>& train_windows,
                              const std::vector<EventSequence>& val_windows, TrainOptions opts) {
    Trainer<Real> tr(model, opts);
    std::vector<EpochStats> log;
    for (int e = 0; e < opts.epochs; ++e) {
        EpochStats st;
        st.train_loss = tr.run_epoch(train_windows, e);
        st.val_loss = val_windows.empty() ? 0.0 : tr.evaluate(val_windows);
        log.push_back(st);
    }
    return log;
}

}  // namespace ustad::seqmodel
