#pragma once

#include <cassert>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "fedmate/data.hpp"
#include "fedmate/losses.hpp"
#include "fedmate/nn.hpp"

namespace fedmate {

// Per-class mean feature vector over the client's data; classes with zero
// samples are absent.
inline PrototypeSet compute_prototypes(const ModelParams& model, const LabeledDataset& data) {
    PrototypeSet p;
    std::map<int, std::size_t> counts;
    for (const auto& s : data.samples) {
        Vec f = forward_features(model, s.x);
        auto it = p.find(s.y);
        if (it == p.end()) {
            p.emplace(s.y, std::move(f));
        } else {
            axpy(1.0, f, it->second);
        }
        counts[s.y]++;
    }
    for (auto& [k, v] : p) {
        const double inv = 1.0 / double(counts[k]);
        for (double& x : v) x *= inv;
    }
    return p;
}

struct Broadcast {
    DenseLayer global_classifier;
    std::optional<PrototypeSet> global_prototypes;       // absent at round 0
    std::optional<std::vector<DenseLayer>> global_extractor;  // present after aggregation rounds
    int round = 0;
};

struct ClientUpdate {
    int client_id = 0;
    DenseLayer classifier;
    PrototypeSet prototypes;
    std::size_t total_count = 0;
    std::map<int, std::size_t> per_class_counts;
    std::optional<std::vector<DenseLayer>> extractor;  // present iff t+1 in Q
};

struct ClientState {
    int id = 0;
    ModelParams model;       // personalized theta_i, phi_i
    Discriminator disc_pr;   // persists across rounds
    Discriminator disc_cl;
    LabeledDataset train_data;
    std::uint64_t rng_seed = 0;
    // phase-order bookkeeping, asserted in local_round
    long phase_counter = 0;
    long classifier_phase_stamp = -1;
    long extractor_phase_stamp = -1;
};

// Local training hyperparameters for one round.
struct LocalConfig {
    int epochs = 5;
    std::size_t batch_size = 32;
    double lr = 0.05;
    // Discriminators take smaller steps than the classifier they play
    // against; equal step sizes let the adversarial loop blow up on easy
    // (near-separable) data.
    double disc_lr_scale = 0.1;
    double lambda_c = 0.6;
    double lambda_e = 0.8;
    int t_max = 1;
    bool upload_extractor = false;  // t+1 in Q
};

// Round-local view of the received globals; the local classifier is never
// overwritten, the global classifier enters only through D_cl.
struct RoundContext {
    const Broadcast* broadcast = nullptr;
    PrototypeSet local_prototypes;  // P_i^t, computed at round start
};

inline void adopt_broadcast(ClientState& state, const Broadcast& b) {
    if (b.global_extractor) {
        const auto& ext = *b.global_extractor;
        if (ext.size() != state.model.extractor.size())
            throw std::runtime_error("adopt_broadcast: extractor layer count mismatch");
        for (std::size_t i = 0; i < ext.size(); ++i)
            if (ext[i].w.rows != state.model.extractor[i].w.rows ||
                ext[i].w.cols != state.model.extractor[i].w.cols)
                throw std::runtime_error("adopt_broadcast: extractor shape mismatch");
        state.model.extractor = ext;
    }
    if (b.global_classifier.w.rows != state.model.classifier.w.rows ||
        b.global_classifier.w.cols != state.model.classifier.w.cols)
        throw std::runtime_error("adopt_broadcast: classifier shape mismatch");
}

namespace detail {

inline std::vector<std::size_t> epoch_order(std::size_t n, std::mt19937_64& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    return idx;
}

inline Batch make_batch(const LabeledDataset& data, const std::vector<std::size_t>& order,
                        std::size_t begin, std::size_t end) {
    Batch b;
    for (std::size_t i = begin; i < end; ++i) b.push_back(&data.samples[order[i]]);
    return b;
}

inline void disc_sgd_step(Discriminator& d, const DiscGradients& g, double lr) {
    sgd_step_layer(d.l1, g.l1, lr);
    sgd_step_layer(d.l2, g.l2, lr);
}

}  // namespace detail

// Classifier phase: per mini-batch, one step for each discriminator
// followed by one classifier step; the extractor stays bit-identical.
inline void train_classifier_phase(ClientState& state, const RoundContext& rc,
                                   const LocalConfig& cfg, Notices* notices = nullptr) {
    const Broadcast& b = *rc.broadcast;
    const bool have_globals = b.global_prototypes.has_value() && !b.global_prototypes->empty();

    PhaseContext ctx;
    ctx.lambda_c = cfg.lambda_c;
    ctx.t = b.round;
    ctx.t_max = cfg.t_max;
    if (have_globals) {
        ctx.global_classifier = &b.global_classifier;
        ctx.global_prototypes = &*b.global_prototypes;
        ctx.local_prototypes = &rc.local_prototypes;
        ctx.disc_pr = &state.disc_pr;
        ctx.disc_cl = &state.disc_cl;
    }

    auto rng = make_engine(child_seed(state.rng_seed, stream::kClient, std::uint64_t(b.round), 1));
    for (int e = 0; e < cfg.epochs; ++e) {
        const auto order = detail::epoch_order(state.train_data.size(), rng);
        for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
            const std::size_t end = std::min(begin + cfg.batch_size, order.size());
            if (have_globals) {
                DiscGradients gpr = zeros_like(state.disc_pr);
                disc_pr_loss(state.disc_pr, state.model.classifier, *b.global_prototypes,
                             rc.local_prototypes, &gpr, notices);
                detail::disc_sgd_step(state.disc_pr, gpr, cfg.lr * cfg.disc_lr_scale);

                DiscGradients gcl = zeros_like(state.disc_cl);
                disc_cl_loss(state.disc_cl, state.model.classifier, b.global_classifier,
                             *b.global_prototypes, &gcl, notices);
                detail::disc_sgd_step(state.disc_cl, gcl, cfg.lr * cfg.disc_lr_scale);
            }
            Gradients g = zeros_like(state.model);
            const Batch batch = detail::make_batch(state.train_data, order, begin, end);
            const double loss = classifier_phase_loss(state.model, batch, ctx, &g, notices);
            if (!std::isfinite(loss))
                throw std::runtime_error("train_classifier_phase: non-finite loss, client " +
                                         std::to_string(state.id) + " round " + std::to_string(b.round));
            sgd_step(state.model, g, cfg.lr, ParamMask::ClassifierOnly);
        }
    }
    state.classifier_phase_stamp = state.phase_counter++;
}

// Extractor phase: runs only when global prototypes were received;
// the classifier stays bit-identical.
inline void train_extractor_phase(ClientState& state, const RoundContext& rc,
                                  const LocalConfig& cfg, Notices* notices = nullptr) {
    const Broadcast& b = *rc.broadcast;
    if (!b.global_prototypes.has_value() || b.global_prototypes->empty()) return;

    PhaseContext ctx;
    ctx.lambda_e = cfg.lambda_e;
    ctx.global_prototypes = &*b.global_prototypes;

    auto rng = make_engine(child_seed(state.rng_seed, stream::kClient, std::uint64_t(b.round), 2));
    for (int e = 0; e < cfg.epochs; ++e) {
        const auto order = detail::epoch_order(state.train_data.size(), rng);
        for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
            const std::size_t end = std::min(begin + cfg.batch_size, order.size());
            Gradients g = zeros_like(state.model);
            const Batch batch = detail::make_batch(state.train_data, order, begin, end);
            const double loss = extractor_phase_loss(state.model, batch, ctx, &g, notices);
            if (!std::isfinite(loss))
                throw std::runtime_error("train_extractor_phase: non-finite loss, client " +
                                         std::to_string(state.id) + " round " + std::to_string(b.round));
            sgd_step(state.model, g, cfg.lr, ParamMask::ExtractorOnly);
        }
    }
    state.extractor_phase_stamp = state.phase_counter++;
}

inline double mean_cross_entropy(const ModelParams& model, const LabeledDataset& data) {
    if (data.samples.empty()) return 0.0;
    double s = 0.0;
    for (const auto& sample : data.samples) {
        const Vec f = forward_features(model, sample.x);
        s += cross_entropy(forward_logits(model.classifier, f), sample.y);
    }
    return s / double(data.size());
}

struct LocalRoundResult {
    ClientUpdate update;
    double train_loss_pre = 0.0;
    double train_loss_post = 0.0;
};

// Full local round: adopt broadcast, compute round-start prototypes,
// classifier phase,
// extractor phase, recompute prototypes, assemble the round payload.
inline LocalRoundResult local_round(ClientState& state, const Broadcast& b, const LocalConfig& cfg,
                                    Notices* notices = nullptr) {
    adopt_broadcast(state, b);
    LocalRoundResult out;
    out.train_loss_pre = mean_cross_entropy(state.model, state.train_data);

    RoundContext rc;
    rc.broadcast = &b;
    rc.local_prototypes = compute_prototypes(state.model, state.train_data);

    if (cfg.epochs > 0) {
        train_classifier_phase(state, rc, cfg, notices);
        train_extractor_phase(state, rc, cfg, notices);
        if (state.extractor_phase_stamp >= 0)
            assert(state.classifier_phase_stamp < state.extractor_phase_stamp);
    }
    out.train_loss_post = mean_cross_entropy(state.model, state.train_data);

    ClientUpdate& u = out.update;
    u.client_id = state.id;
    u.classifier = state.model.classifier;
    u.prototypes = cfg.epochs > 0 ? compute_prototypes(state.model, state.train_data)
                                  : rc.local_prototypes;
    u.total_count = state.train_data.size();
    for (const auto& s : state.train_data.samples) u.per_class_counts[s.y]++;
    if (cfg.upload_extractor) u.extractor = state.model.extractor;
    return out;
}

}  // namespace fedmate
