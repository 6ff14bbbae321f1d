#pragma once

#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <vector>

#include "fedmate/client.hpp"
#include "fedmate/losses.hpp"
#include "fedmate/nn.hpp"

namespace fedmate {

// Per-class weight views over the clients holding the class, their fused
// view coefficients, and the final aggregation weights.
struct AggregationWeights {
    std::vector<std::size_t> clients;  // indices into the round's update list
    Vec alpha;                         // sample-size view
    Vec l;                             // centroid-similarity view
    Vec beta;                          // prediction view
    std::array<double, 3> view_weights{};  // W_mps
    Vec final;
};

inline Vec sample_weights(const std::vector<std::size_t>& counts) {
    if (counts.empty()) throw std::invalid_argument("sample_weights: empty client set");
    double total = 0.0;
    for (std::size_t c : counts) {
        if (c == 0) throw std::invalid_argument("sample_weights: zero count");
        total += double(c);
    }
    Vec w(counts.size());
    for (std::size_t i = 0; i < counts.size(); ++i) w[i] = double(counts[i]) / total;
    return w;
}

// Cosine similarity to the unweighted anchor, affinely mapped to [0,1] via
// (1+cos)/2, then normalized. Zero-norm prototypes get raw similarity 0.
inline Vec centroid_weights(const std::vector<const Vec*>& prototypes, Notices* notices = nullptr) {
    if (prototypes.empty()) throw std::invalid_argument("centroid_weights: empty client set");
    const std::size_t n = prototypes.size();
    Vec anchor(prototypes.front()->size(), 0.0);
    for (const Vec* p : prototypes) axpy(1.0, *p, anchor);
    for (double& v : anchor) v /= double(n);
    const double na = norm2(anchor);

    Vec score(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double np = norm2(*prototypes[i]);
        double cos = 0.0;
        if (np == 0.0 || na == 0.0) {
            note_skip(notices);
        } else {
            cos = dot(*prototypes[i], anchor) / (np * na);
        }
        score[i] = (1.0 + cos) / 2.0;
    }
    double total = 0.0;
    for (double v : score) total += v;
    if (total == 0.0) return Vec(n, 1.0 / double(n));
    for (double& v : score) v /= total;
    return score;
}

// Softmax probability of class k under the previous global classifier,
// normalized over the clients holding the class.
inline Vec prediction_weights(const std::vector<const Vec*>& prototypes, int k,
                              const DenseLayer& phi_prev) {
    if (prototypes.empty()) throw std::invalid_argument("prediction_weights: empty client set");
    Vec score(prototypes.size());
    for (std::size_t i = 0; i < prototypes.size(); ++i)
        score[i] = softmax(forward_logits(phi_prev, *prototypes[i]))[std::size_t(k)];
    double total = 0.0;
    for (double v : score) total += v;
    for (double& v : score) v /= total;
    return score;
}

// Jensen-Shannon divergence in nats, 0*log(0/.) = 0. Bounded by ln 2.
inline double js_divergence(const Vec& p, const Vec& q) {
    if (p.size() != q.size()) throw std::invalid_argument("js_divergence: length mismatch");
    double sp = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] < 0.0 || q[i] < 0.0) throw std::invalid_argument("js_divergence: negative entry");
        sp += p[i];
        sq += q[i];
    }
    if (std::abs(sp - 1.0) > 1e-9 || std::abs(sq - 1.0) > 1e-9)
        throw std::invalid_argument("js_divergence: inputs must sum to 1");
    double js = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double m = 0.5 * (p[i] + q[i]);
        if (p[i] > 0.0) js += 0.5 * p[i] * std::log(p[i] / m);
        if (q[i] > 0.0) js += 0.5 * q[i] * std::log(q[i] / m);
    }
    return js;
}

// W_mps = softmax over the negated total pairwise JS divergence of each
// view; the view most consistent with the others gets the largest weight.
inline std::array<double, 3> mps_view_weights(const Vec& alpha, const Vec& l, const Vec& beta) {
    const double d_al = js_divergence(alpha, l);
    const double d_ab = js_divergence(alpha, beta);
    const double d_lb = js_divergence(l, beta);
    Vec d = {d_al + d_ab, d_al + d_lb, d_ab + d_lb};
    for (double& v : d) v = -v;
    const Vec w = softmax(d);
    return {w[0], w[1], w[2]};
}

// Multi-view prototype aggregation. phi_prev == nullptr replaces the beta view
// by a copy of alpha (bootstrap: no trusted classifier history yet).
inline std::pair<PrototypeSet, std::map<int, AggregationWeights>> aggregate_prototypes(
    const std::vector<ClientUpdate>& updates, const DenseLayer* phi_prev,
    Notices* notices = nullptr) {
    if (updates.empty()) throw std::invalid_argument("aggregate_prototypes: no updates");
    std::set<int> classes;
    for (const auto& u : updates)
        for (const auto& [k, p] : u.prototypes) classes.insert(k);

    PrototypeSet global;
    std::map<int, AggregationWeights> weights;
    for (int k : classes) {
        AggregationWeights w;
        std::vector<std::size_t> counts;
        std::vector<const Vec*> protos;
        for (std::size_t i = 0; i < updates.size(); ++i) {
            auto it = updates[i].prototypes.find(k);
            if (it == updates[i].prototypes.end()) continue;
            auto cit = updates[i].per_class_counts.find(k);
            if (cit == updates[i].per_class_counts.end() || cit->second == 0) continue;
            w.clients.push_back(i);
            counts.push_back(cit->second);
            protos.push_back(&it->second);
        }
        if (w.clients.empty()) continue;

        w.alpha = sample_weights(counts);
        w.l = centroid_weights(protos, notices);
        w.beta = phi_prev ? prediction_weights(protos, k, *phi_prev) : w.alpha;
        w.view_weights = mps_view_weights(w.alpha, w.l, w.beta);
        w.final.resize(w.clients.size());
        for (std::size_t i = 0; i < w.clients.size(); ++i)
            w.final[i] = w.view_weights[0] * w.alpha[i] + w.view_weights[1] * w.l[i] +
                         w.view_weights[2] * w.beta[i];

        Vec p(protos.front()->size(), 0.0);
        for (std::size_t i = 0; i < protos.size(); ++i) axpy(w.final[i], *protos[i], p);
        global.emplace(k, std::move(p));
        weights.emplace(k, std::move(w));
    }
    return {std::move(global), std::move(weights)};
}

// Class-wise classifier fusion: per-class neuron aggregation by per-class
// sample proportion;
// classes nobody holds keep the previous global neuron. Summation runs in
// update order so the FedAvg reduction holds bit-exactly.
inline DenseLayer aggregate_classifier_classwise(const std::vector<ClientUpdate>& updates,
                                                 const DenseLayer& prev_classifier) {
    if (updates.empty()) throw std::invalid_argument("aggregate_classifier_classwise: no updates");
    const std::size_t C = prev_classifier.out_dim();
    const std::size_t K = prev_classifier.in_dim();
    DenseLayer out(C, K);
    for (std::size_t k = 0; k < C; ++k) {
        std::vector<std::size_t> holders;
        std::vector<std::size_t> counts;
        for (std::size_t i = 0; i < updates.size(); ++i) {
            auto it = updates[i].per_class_counts.find(int(k));
            if (it == updates[i].per_class_counts.end() || it->second == 0) continue;
            holders.push_back(i);
            counts.push_back(it->second);
        }
        if (holders.empty()) {
            for (std::size_t c = 0; c < K; ++c) out.w(k, c) = prev_classifier.w(k, c);
            out.b[k] = prev_classifier.b[k];
            continue;
        }
        const Vec alpha = sample_weights(counts);
        for (std::size_t j = 0; j < holders.size(); ++j) {
            const DenseLayer& phi = updates[holders[j]].classifier;
            for (std::size_t c = 0; c < K; ++c) out.w(k, c) += alpha[j] * phi.w(k, c);
            out.b[k] += alpha[j] * phi.b[k];
        }
    }
    return out;
}

// Fine-tuning: gradient steps of cross-entropy on the labeled prototype set
// {(P_k, k)}, per-class gradients summed per step.
inline DenseLayer finetune_classifier(DenseLayer phi, const PrototypeSet& prototypes, double lr,
                                      int steps) {
    if (prototypes.empty()) throw std::invalid_argument("finetune_classifier: empty prototype set");
    for (int s = 0; s < steps; ++s) {
        DenseLayer g(phi.out_dim(), phi.in_dim());
        for (const auto& [k, p] : prototypes) {
            const Vec dlogits = cross_entropy_dlogits(forward_logits(phi, p), k);
            add_outer(1.0, dlogits, p, g.w);
            axpy(1.0, dlogits, g.b);
        }
        sgd_step_layer(phi, g, lr);
    }
    return phi;
}

// Sample-size-weighted extractor aggregation over the updates carrying one.
inline std::vector<DenseLayer> aggregate_extractors(const std::vector<ClientUpdate>& updates,
                                                    const std::vector<DenseLayer>& current) {
    std::vector<std::size_t> carriers;
    std::vector<std::size_t> counts;
    for (std::size_t i = 0; i < updates.size(); ++i)
        if (updates[i].extractor) {
            carriers.push_back(i);
            counts.push_back(updates[i].total_count);
        }
    if (carriers.empty()) return current;
    const Vec alpha = sample_weights(counts);
    std::vector<DenseLayer> out;
    for (const auto& l : current) out.emplace_back(l.out_dim(), l.in_dim());
    for (std::size_t j = 0; j < carriers.size(); ++j) {
        const auto& ext = *updates[carriers[j]].extractor;
        for (std::size_t li = 0; li < out.size(); ++li) {
            axpy(alpha[j], ext[li].w.a, out[li].w.a);
            axpy(alpha[j], ext[li].b, out[li].b);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// cost-aware transmission scheduling

struct CftSchedule {
    double q = 0.0;             // extractor-to-prototype parameter ratio
    double x = 1.0;             // schedule multiplier
    std::size_t skip_stride = 0;  // ceil(x*q)
    std::set<int> upload_rounds;  // Q over 1..T

    bool contains(int t) const { return t >= 1 && std::size_t(t) % skip_stride != 0; }
};

inline CftSchedule cft_schedule(std::size_t par_extractor, std::size_t par_prototypes, double x,
                                int total_rounds) {
    if (par_prototypes == 0) throw std::invalid_argument("cft_schedule: zero prototype parameters");
    CftSchedule s;
    s.q = double(par_extractor) / double(par_prototypes);
    s.x = x;
    s.skip_stride = std::size_t(std::ceil(x * s.q));
    if (s.skip_stride < 2)
        throw std::invalid_argument("cft_schedule: stride < 2 would never upload the extractor");
    for (int t = 1; t <= total_rounds; ++t)
        if (s.contains(t)) s.upload_rounds.insert(t);
    return s;
}

// ---------------------------------------------------------------------------
// server round

struct ServerConfig {
    double finetune_lr = 0.01;
    int finetune_steps = 5;
};

struct GlobalState {
    std::vector<DenseLayer> extractor;
    DenseLayer classifier;
    DenseLayer prev_classifier;
    std::optional<PrototypeSet> prototypes;  // absent only before the first aggregation
    int round = 0;
    bool has_aggregated = false;
    bool extractor_refreshed = true;  // broadcast carries theta at round 0 and after refreshes
    std::map<int, AggregationWeights> last_weights;
};

inline GlobalState make_global_state(const ModelParams& initial) {
    GlobalState s;
    s.extractor = initial.extractor;
    s.classifier = initial.classifier;
    s.prev_classifier = initial.classifier;
    return s;
}

inline Broadcast make_broadcast(const GlobalState& s) {
    Broadcast b;
    b.round = s.round;
    b.global_classifier = s.classifier;
    if (s.prototypes) b.global_prototypes = s.prototypes;
    if (s.extractor_refreshed) b.global_extractor = s.extractor;
    return b;
}

// Aggregate prototypes, then classifier neurons, fine-tune with the fresh
// prototypes, then extractors if any were uploaded. The
// pre-update classifier supplies the beta view (it is the previous
// classifier relative to the one this aggregation produces).
inline void server_round(GlobalState& state, const std::vector<ClientUpdate>& updates,
                         const ServerConfig& cfg, Notices* notices = nullptr) {
    if (updates.empty()) {
        note_empty(notices);
        state.extractor_refreshed = false;
        state.round++;
        return;
    }
    const DenseLayer* phi_for_beta = state.has_aggregated ? &state.classifier : nullptr;
    auto [protos, weights] = aggregate_prototypes(updates, phi_for_beta, notices);

    DenseLayer phi = aggregate_classifier_classwise(updates, state.classifier);
    if (!protos.empty()) phi = finetune_classifier(phi, protos, cfg.finetune_lr, cfg.finetune_steps);

    bool any_extractor = false;
    for (const auto& u : updates)
        if (u.extractor) any_extractor = true;
    if (any_extractor) state.extractor = aggregate_extractors(updates, state.extractor);

    state.prev_classifier = state.classifier;
    state.classifier = std::move(phi);
    state.prototypes = std::move(protos);
    state.last_weights = std::move(weights);
    state.has_aggregated = true;
    state.extractor_refreshed = any_extractor;
    state.round++;
}

}  // namespace fedmate
