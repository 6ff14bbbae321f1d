#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "fedmate/data.hpp"
#include "fedmate/nn.hpp"

namespace fedmate {

// Counters for skipped prototype classes / empty inclusion sets; callers
// that care pass a pointer, everyone else passes nullptr.
struct Notices {
    std::size_t skipped_classes = 0;
    std::size_t empty_sets = 0;
};

inline void note_skip(Notices* n) {
    if (n) n->skipped_classes++;
}
inline void note_empty(Notices* n) {
    if (n) n->empty_sets++;
}

// ---------------------------------------------------------------------------
// cross-entropy

inline double cross_entropy(const Vec& logits, int y) {
    return log_sum_exp(logits) - logits[std::size_t(y)];
}

// dL/dlogits = softmax(logits) - e_y
inline Vec cross_entropy_dlogits(const Vec& logits, int y) {
    Vec d = softmax(logits);
    d[std::size_t(y)] -= 1.0;
    return d;
}

// ---------------------------------------------------------------------------
// center loss (feature-to-global-prototype compactness)

inline double center_loss(const std::vector<std::pair<Vec, int>>& features,
                          const PrototypeSet& global_p, Notices* notices = nullptr) {
    double s = 0.0;
    std::size_t m = 0;
    for (const auto& [f, y] : features) {
        auto it = global_p.find(y);
        if (it == global_p.end()) {
            note_skip(notices);
            continue;
        }
        s += sq_dist(f, it->second);
        ++m;
    }
    if (m == 0) {
        note_empty(notices);
        return 0.0;
    }
    return s / double(m);
}

// ---------------------------------------------------------------------------
// adversarial schedule

inline double kappa(int t, int t_max) {
    if (t_max <= 0) throw std::invalid_argument("kappa: t_max must be positive");
    if (t < 0) throw std::invalid_argument("kappa: t must be nonnegative");
    if (t >= t_max) return 0.0;
    return 1.0 - double(t) / double(t_max);
}

// ---------------------------------------------------------------------------
// discriminators

// Binary discriminator |C| -> 2|C| -> 1, ReLU hidden, sigmoid output.
struct Discriminator {
    DenseLayer l1;
    DenseLayer l2;

    Discriminator() = default;
    explicit Discriminator(std::size_t num_classes)
        : l1(2 * num_classes, num_classes), l2(1, 2 * num_classes) {}

    std::size_t in_dim() const { return l1.in_dim(); }
};

using DiscGradients = Discriminator;

inline Discriminator init_discriminator(std::size_t num_classes, std::uint64_t seed) {
    auto rng = make_engine(child_seed(seed, stream::kDisc));
    Discriminator d;
    d.l1 = init_layer(2 * num_classes, num_classes, rng);
    d.l2 = init_layer(1, 2 * num_classes, rng);
    return d;
}

inline DiscGradients zeros_like(const Discriminator& d) {
    DiscGradients g;
    g.l1 = DenseLayer(d.l1.out_dim(), d.l1.in_dim());
    g.l2 = DenseLayer(d.l2.out_dim(), d.l2.in_dim());
    return g;
}

struct DiscCache {
    Vec input;
    Vec hidden;   // post-ReLU
    double z = 0.0;  // pre-sigmoid
};

// Returns the pre-sigmoid logit z; probability is sigmoid(z).
inline double disc_forward(const Discriminator& d, const Vec& x, DiscCache* cache = nullptr) {
    Vec h = matvec(d.l1.w, x);
    axpy(1.0, d.l1.b, h);
    for (double& v : h) v = v > 0.0 ? v : 0.0;
    double z = dot(d.l2.w.a, h) + d.l2.b[0];
    if (cache) {
        cache->input = x;
        cache->hidden = std::move(h);
        cache->z = z;
    }
    return z;
}

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// BCE against a {0,1} target, expressed on the pre-sigmoid logit.
inline double bce_with_logit(double z, double target) {
    return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))) - target * z;
}

// Accumulates discriminator parameter gradients for dL/dz; returns dL/dx
// through the net when input_grad is requested.
inline void disc_backprop(const Discriminator& d, const DiscCache& cache, double dz,
                          DiscGradients* g, Vec* input_grad) {
    if (g) {
        axpy(dz, cache.hidden, g->l2.w.a);
        g->l2.b[0] += dz;
    }
    Vec dh(cache.hidden.size());
    for (std::size_t i = 0; i < dh.size(); ++i)
        dh[i] = cache.hidden[i] > 0.0 ? dz * d.l2.w.a[i] : 0.0;
    if (g) {
        add_outer(1.0, dh, cache.input, g->l1.w);
        axpy(1.0, dh, g->l1.b);
    }
    if (input_grad) *input_grad = matvec_t(d.l1.w, dh);
}

// ---------------------------------------------------------------------------
// CCF adversarial losses (classifiers enter as generators; each side treats
// the other's parameters as constants)

// Prototype discriminator: target 1 on logits of global prototypes through
// the local classifier, target 0 on logits of local prototypes, over the
// classes the client holds.
inline double disc_pr_loss(const Discriminator& d, const DenseLayer& phi_local,
                           const PrototypeSet& global_p, const PrototypeSet& local_p,
                           DiscGradients* grad = nullptr, Notices* notices = nullptr) {
    double loss = 0.0;
    std::size_t shared = 0;
    for (const auto& [k, pl] : local_p) {
        auto it = global_p.find(k);
        if (it == global_p.end()) {
            note_skip(notices);
            continue;
        }
        ++shared;
        for (const auto& [input, target] :
             {std::pair<const Vec*, double>{&it->second, 1.0}, {&pl, 0.0}}) {
            DiscCache cache;
            const double z = disc_forward(d, forward_logits(phi_local, *input), &cache);
            loss += bce_with_logit(z, target);
            if (grad) disc_backprop(d, cache, sigmoid(z) - target, grad, nullptr);
        }
    }
    if (shared == 0) note_empty(notices);
    return loss;
}

// Classification discriminator: target 1 on global prototypes through the
// global classifier, target 0 on the same prototypes through the local
// classifier, over all classes with a global prototype.
inline double disc_cl_loss(const Discriminator& d, const DenseLayer& phi_local,
                           const DenseLayer& phi_global, const PrototypeSet& global_p,
                           DiscGradients* grad = nullptr, Notices* notices = nullptr) {
    double loss = 0.0;
    if (global_p.empty()) note_empty(notices);
    for (const auto& [k, p] : global_p) {
        for (const auto& [phi, target] :
             {std::pair<const DenseLayer*, double>{&phi_global, 1.0}, {&phi_local, 0.0}}) {
            DiscCache cache;
            const double z = disc_forward(d, forward_logits(*phi, p), &cache);
            loss += bce_with_logit(z, target);
            if (grad) disc_backprop(d, cache, sigmoid(z) - target, grad, nullptr);
        }
    }
    return loss;
}

// Non-saturating generator loss: the local classifier tries to get both
// discriminators to output 1 on its logits. Gradients flow into phi only.
inline double generator_adv_loss(const Discriminator& d_pr, const Discriminator& d_cl,
                                 const DenseLayer& phi_local, const PrototypeSet& local_p,
                                 const PrototypeSet& global_p, DenseLayer* phi_grad = nullptr,
                                 Notices* notices = nullptr) {
    double loss = 0.0;
    auto push = [&](const Discriminator& d, const Vec& proto) {
        DiscCache cache;
        const Vec logits = forward_logits(phi_local, proto);
        const double z = disc_forward(d, logits, &cache);
        loss += bce_with_logit(z, 1.0);
        if (phi_grad) {
            Vec dlogits;
            disc_backprop(d, cache, sigmoid(z) - 1.0, nullptr, &dlogits);
            add_outer(1.0, dlogits, proto, phi_grad->w);
            axpy(1.0, dlogits, phi_grad->b);
        }
    };
    std::size_t shared = 0;
    for (const auto& [k, pl] : local_p) {
        if (global_p.find(k) == global_p.end()) {
            note_skip(notices);
            continue;
        }
        ++shared;
        push(d_pr, pl);
    }
    if (shared == 0) note_empty(notices);
    for (const auto& [k, p] : global_p) push(d_cl, p);
    return loss;
}

// CCF component loss: prototype cross-entropy (anti-forgetting) plus the
// kappa-scheduled adversarial term.
inline double ccf_loss(const DenseLayer& phi_local, const PrototypeSet& local_p,
                       const PrototypeSet& global_p, const Discriminator& d_pr,
                       const Discriminator& d_cl, int t, int t_max,
                       DenseLayer* phi_grad = nullptr, Notices* notices = nullptr) {
    double loss = 0.0;
    for (const auto& [k, pl] : local_p) {
        const Vec logits = forward_logits(phi_local, pl);
        loss += cross_entropy(logits, k);
        if (phi_grad) {
            const Vec dlogits = cross_entropy_dlogits(logits, k);
            add_outer(1.0, dlogits, pl, phi_grad->w);
            axpy(1.0, dlogits, phi_grad->b);
        }
    }
    const double kap = kappa(t, t_max);
    if (kap > 0.0) {
        DenseLayer adv_grad;
        if (phi_grad) adv_grad = DenseLayer(phi_local.out_dim(), phi_local.in_dim());
        loss += kap * generator_adv_loss(d_pr, d_cl, phi_local, local_p, global_p,
                                         phi_grad ? &adv_grad : nullptr, notices);
        if (phi_grad) {
            axpy(kap, adv_grad.w.a, phi_grad->w.a);
            axpy(kap, adv_grad.b, phi_grad->b);
        }
    }
    return loss;
}

// ---------------------------------------------------------------------------
// phase losses (the two local training objectives)

using Batch = std::vector<const Sample*>;

// Round context for the decoupled training phases. Null global pointers
// mean "not received yet" (round-0 bootstrap).
struct PhaseContext {
    const DenseLayer* global_classifier = nullptr;
    const PrototypeSet* global_prototypes = nullptr;
    const PrototypeSet* local_prototypes = nullptr;
    const Discriminator* disc_pr = nullptr;
    const Discriminator* disc_cl = nullptr;
    double lambda_c = 0.0;
    double lambda_e = 0.0;
    int t = 0;
    int t_max = 1;

    bool ccf_active() const {
        return global_prototypes != nullptr && !global_prototypes->empty() &&
               local_prototypes != nullptr && disc_pr != nullptr && disc_cl != nullptr;
    }
};

// Batch-mean cross-entropy plus lambda_c * CCF; gradients restricted to the
// classifier.
inline double classifier_phase_loss(const ModelParams& model, const Batch& batch,
                                    const PhaseContext& ctx, Gradients* grad = nullptr,
                                    Notices* notices = nullptr) {
    double loss = 0.0;
    if (!batch.empty()) {
        const double inv = 1.0 / double(batch.size());
        for (const Sample* s : batch) {
            ForwardCache cache;
            const Vec logits = forward_all(model, s->x, cache);
            loss += inv * cross_entropy(logits, s->y);
            if (grad) {
                Vec dlogits = cross_entropy_dlogits(logits, s->y);
                for (double& v : dlogits) v *= inv;
                backprop(model, cache, dlogits, nullptr, ParamMask::ClassifierOnly, *grad);
            }
        }
    }
    if (ctx.ccf_active() && ctx.lambda_c != 0.0) {
        DenseLayer ccf_grad;
        if (grad) ccf_grad = DenseLayer(model.classifier.out_dim(), model.classifier.in_dim());
        const double ccf = ccf_loss(model.classifier, *ctx.local_prototypes, *ctx.global_prototypes,
                                    *ctx.disc_pr, *ctx.disc_cl, ctx.t, ctx.t_max,
                                    grad ? &ccf_grad : nullptr, notices);
        loss += ctx.lambda_c * ccf;
        if (grad) {
            axpy(ctx.lambda_c, ccf_grad.w.a, grad->classifier.w.a);
            axpy(ctx.lambda_c, ccf_grad.b, grad->classifier.b);
        }
    }
    return loss;
}

// Batch-mean cross-entropy plus lambda_e * center loss; gradients restricted
// to the extractor.
inline double extractor_phase_loss(const ModelParams& model, const Batch& batch,
                                   const PhaseContext& ctx, Gradients* grad = nullptr,
                                   Notices* notices = nullptr) {
    if (batch.empty()) return 0.0;
    const PrototypeSet* gp = ctx.global_prototypes;
    const double inv = 1.0 / double(batch.size());
    std::size_t included = 0;
    if (gp && ctx.lambda_e != 0.0)
        for (const Sample* s : batch)
            if (gp->count(s->y)) ++included;

    double loss = 0.0;
    double center = 0.0;
    for (const Sample* s : batch) {
        ForwardCache cache;
        const Vec logits = forward_all(model, s->x, cache);
        loss += inv * cross_entropy(logits, s->y);

        Vec dfeat_extra;
        const Vec* dfeat_ptr = nullptr;
        if (gp && ctx.lambda_e != 0.0) {
            auto it = gp->find(s->y);
            if (it == gp->end()) {
                note_skip(notices);
            } else {
                const Vec& f = cache.features();
                center += sq_dist(f, it->second) / double(included);
                if (grad) {
                    dfeat_extra.assign(f.size(), 0.0);
                    const double c = ctx.lambda_e * 2.0 / double(included);
                    for (std::size_t i = 0; i < f.size(); ++i)
                        dfeat_extra[i] = c * (f[i] - it->second[i]);
                    dfeat_ptr = &dfeat_extra;
                }
            }
        }
        if (grad) {
            Vec dlogits = cross_entropy_dlogits(logits, s->y);
            for (double& v : dlogits) v *= inv;
            backprop(model, cache, dlogits, dfeat_ptr, ParamMask::ExtractorOnly, *grad);
        }
    }
    if (gp && ctx.lambda_e != 0.0 && included == 0) note_empty(notices);
    return loss + ctx.lambda_e * center;
}

// ---------------------------------------------------------------------------
// generic entry point (loss composition + parameter mask)

enum class LossKind { PlainCE, ClassifierPhase, ExtractorPhase };

struct LossSpec {
    LossKind kind = LossKind::PlainCE;
    PhaseContext ctx;
};

inline double compute_gradients(const ModelParams& model, const Batch& batch, const LossSpec& spec,
                                Gradients& grad, Notices* notices = nullptr) {
    double loss = 0.0;
    switch (spec.kind) {
        case LossKind::PlainCE: {
            if (batch.empty()) return 0.0;
            const double inv = 1.0 / double(batch.size());
            for (const Sample* s : batch) {
                ForwardCache cache;
                const Vec logits = forward_all(model, s->x, cache);
                loss += inv * cross_entropy(logits, s->y);
                Vec dlogits = cross_entropy_dlogits(logits, s->y);
                for (double& v : dlogits) v *= inv;
                backprop(model, cache, dlogits, nullptr, ParamMask::Full, grad);
            }
            break;
        }
        case LossKind::ClassifierPhase:
            loss = classifier_phase_loss(model, batch, spec.ctx, &grad, notices);
            break;
        case LossKind::ExtractorPhase:
            loss = extractor_phase_loss(model, batch, spec.ctx, &grad, notices);
            break;
    }
    if (!std::isfinite(loss)) throw std::runtime_error("compute_gradients: non-finite loss");
    return loss;
}

}  // namespace fedmate
