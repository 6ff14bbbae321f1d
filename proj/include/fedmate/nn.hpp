#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <stdexcept>
#include <vector>

#include "fedmate/linalg.hpp"
#include "fedmate/rng.hpp"

namespace fedmate {

struct DenseLayer {
    Mat w;   // out x in
    Vec b;   // out

    DenseLayer() = default;
    DenseLayer(std::size_t out, std::size_t in) : w(out, in), b(out, 0.0) {}

    std::size_t in_dim() const { return w.cols; }
    std::size_t out_dim() const { return w.rows; }
};

// Dense MLP split into feature extractor (all but last layer, ReLU after
// every extractor layer) and a linear classifier whose row k is the sole
// parameter block for class k.
struct ModelParams {
    std::vector<DenseLayer> extractor;
    DenseLayer classifier;

    std::size_t input_dim() const { return extractor.front().in_dim(); }
    std::size_t feature_dim() const { return extractor.back().out_dim(); }
    std::size_t num_classes() const { return classifier.out_dim(); }
};

// Shape-congruent with ModelParams, one gradient per parameter.
using Gradients = ModelParams;

enum class ParamMask { Full, ClassifierOnly, ExtractorOnly };

// Per-class mean feature vectors; partial, classes may be absent.
using PrototypeSet = std::map<int, Vec>;

inline std::size_t param_count(const DenseLayer& l) { return l.w.a.size() + l.b.size(); }

inline std::size_t param_count(const std::vector<DenseLayer>& layers) {
    std::size_t n = 0;
    for (const auto& l : layers) n += param_count(l);
    return n;
}

inline std::size_t param_count(const ModelParams& m) {
    return param_count(m.extractor) + param_count(m.classifier);
}

inline std::size_t param_count(const PrototypeSet& p) {
    std::size_t n = 0;
    for (const auto& [k, v] : p) n += v.size();
    return n;
}

inline DenseLayer init_layer(std::size_t out, std::size_t in, std::mt19937_64& rng) {
    DenseLayer l(out, in);
    const double a = std::sqrt(6.0 / double(in + out));
    std::uniform_real_distribution<double> u(-a, a);
    for (double& v : l.w.a) v = u(rng);
    for (double& v : l.b) v = u(rng);
    return l;
}

// dims = {d, hidden..., K}; classifier K -> num_classes.
inline ModelParams init_model(const std::vector<std::size_t>& dims, std::size_t num_classes,
                              std::uint64_t seed) {
    if (dims.size() < 2) throw std::invalid_argument("init_model: need at least input and feature dims");
    ModelParams m;
    auto rng = make_engine(child_seed(seed, stream::kInit));
    for (std::size_t i = 0; i + 1 < dims.size(); ++i)
        m.extractor.push_back(init_layer(dims[i + 1], dims[i], rng));
    m.classifier = init_layer(num_classes, dims.back(), rng);
    return m;
}

inline Gradients zeros_like(const ModelParams& m) {
    Gradients g;
    for (const auto& l : m.extractor) g.extractor.emplace_back(l.out_dim(), l.in_dim());
    g.classifier = DenseLayer(m.classifier.out_dim(), m.classifier.in_dim());
    return g;
}

// Activations cached for backprop: post[i] is the ReLU output of extractor
// layer i; post.back() is the feature vector.
struct ForwardCache {
    Vec input;
    std::vector<Vec> post;
    Vec logits;
    const Vec& features() const { return post.back(); }
};

inline Vec forward_features(const ModelParams& m, const Vec& x, ForwardCache* cache = nullptr) {
    if (x.size() != m.input_dim()) throw std::invalid_argument("forward_features: input dimension mismatch");
    if (cache) {
        cache->input = x;
        cache->post.clear();
    }
    Vec h = x;
    for (const auto& l : m.extractor) {
        Vec z = matvec(l.w, h);
        axpy(1.0, l.b, z);
        for (double& v : z) v = v > 0.0 ? v : 0.0;
        h = std::move(z);
        if (cache) cache->post.push_back(h);
    }
    return h;
}

inline Vec forward_logits(const DenseLayer& classifier, const Vec& h) {
    if (h.size() != classifier.in_dim()) throw std::invalid_argument("forward_logits: feature dimension mismatch");
    Vec z = matvec(classifier.w, h);
    axpy(1.0, classifier.b, z);
    return z;
}

inline Vec forward_all(const ModelParams& m, const Vec& x, ForwardCache& cache) {
    Vec h = forward_features(m, x, &cache);
    cache.logits = forward_logits(m.classifier, h);
    return cache.logits;
}

// Accumulates gradients given dL/dlogits and an extra dL/dfeatures term
// (used by the center loss). Honors the parameter mask; gradient blocks of
// masked parameters are left untouched (zero if g started zeroed).
inline void backprop(const ModelParams& m, const ForwardCache& cache, const Vec& dlogits,
                     const Vec* dfeatures_extra, ParamMask mask, Gradients& g) {
    Vec dfeat(m.feature_dim(), 0.0);
    if (!dlogits.empty()) {
        if (mask != ParamMask::ExtractorOnly) {
            add_outer(1.0, dlogits, cache.features(), g.classifier.w);
            axpy(1.0, dlogits, g.classifier.b);
        }
        dfeat = matvec_t(m.classifier.w, dlogits);
    }
    if (dfeatures_extra) axpy(1.0, *dfeatures_extra, dfeat);
    if (mask == ParamMask::ClassifierOnly) return;

    Vec d = std::move(dfeat);
    for (std::size_t li = m.extractor.size(); li-- > 0;) {
        const auto& l = m.extractor[li];
        const Vec& out = cache.post[li];
        for (std::size_t r = 0; r < d.size(); ++r)
            if (out[r] <= 0.0) d[r] = 0.0;  // ReLU gate
        const Vec& in = li == 0 ? cache.input : cache.post[li - 1];
        add_outer(1.0, d, in, g.extractor[li].w);
        axpy(1.0, d, g.extractor[li].b);
        if (li > 0) d = matvec_t(l.w, d);
    }
}

inline void sgd_step_layer(DenseLayer& l, const DenseLayer& g, double lr) {
    for (std::size_t i = 0; i < l.w.a.size(); ++i) l.w.a[i] -= lr * g.w.a[i];
    for (std::size_t i = 0; i < l.b.size(); ++i) l.b[i] -= lr * g.b[i];
}

inline void sgd_step(ModelParams& m, const Gradients& g, double lr, ParamMask mask) {
    if (lr <= 0.0) throw std::invalid_argument("sgd_step: learning rate must be positive");
    if (mask != ParamMask::ClassifierOnly)
        for (std::size_t i = 0; i < m.extractor.size(); ++i)
            sgd_step_layer(m.extractor[i], g.extractor[i], lr);
    if (mask != ParamMask::ExtractorOnly) sgd_step_layer(m.classifier, g.classifier, lr);
}

inline bool all_finite(const ModelParams& m) {
    for (const auto& l : m.extractor)
        if (!all_finite(l.w.a) || !all_finite(l.b)) return false;
    return all_finite(m.classifier.w.a) && all_finite(m.classifier.b);
}

// Flat parameter views, used by finite-difference checks and snapshots.
inline Vec flatten(const ModelParams& m) {
    Vec out;
    for (const auto& l : m.extractor) {
        out.insert(out.end(), l.w.a.begin(), l.w.a.end());
        out.insert(out.end(), l.b.begin(), l.b.end());
    }
    out.insert(out.end(), m.classifier.w.a.begin(), m.classifier.w.a.end());
    out.insert(out.end(), m.classifier.b.begin(), m.classifier.b.end());
    return out;
}

inline void unflatten(const Vec& flat, ModelParams& m) {
    std::size_t p = 0;
    auto take = [&](Vec& dst) {
        std::copy(flat.begin() + long(p), flat.begin() + long(p + dst.size()), dst.begin());
        p += dst.size();
    };
    for (auto& l : m.extractor) {
        take(l.w.a);
        take(l.b);
    }
    take(m.classifier.w.a);
    take(m.classifier.b);
    if (p != flat.size()) throw std::invalid_argument("unflatten: size mismatch");
}

}  // namespace fedmate
