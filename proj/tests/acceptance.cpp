// End-to-end acceptance suite. Each criterion prints one PASS/FAIL line;
// the binary exits nonzero if any fail. Oracles here are deliberately flat
// reimplementations that share only the finite-difference-verified gradient
// primitives with the library.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "fedmate/harness.hpp"
#include "test_support.hpp"

using namespace fedmate;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

bool near(double a, double b, double tol = 1e-10) { return std::abs(a - b) <= tol; }

bool near_vec(const Vec& a, const Vec& b, double tol = 1e-10) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (!near(a[i], b[i], tol)) return false;
    return true;
}

bool near_layer(const DenseLayer& a, const DenseLayer& b, double tol = 1e-10) {
    return a.w.rows == b.w.rows && a.w.cols == b.w.cols && near_vec(a.w.a, b.w.a, tol) &&
           near_vec(a.b, b.b, tol);
}

// ---------------------------------------------------------------------------
// criterion 1: gradient suite

bool crit1_gradients() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(101);
    const std::size_t C = 3, K = 3;
    const std::vector<std::size_t> dims = {3, 4, K};
    double worst = 0.0;
    auto track = [&](double e) { worst = std::max(worst, e); };

    for (int i = 0; i < 100; ++i) {
        ModelParams m = testsup::random_model(rng, dims, C);
        LabeledDataset data = testsup::random_dataset(rng, 4, 3, int(C));
        Batch batch;
        for (const auto& s : data.samples) batch.push_back(&s);
        const PrototypeSet global = testsup::random_prototypes(rng, {0, 1, 2}, K);
        const PrototypeSet local = testsup::random_prototypes(rng, {0, 2}, K);
        Discriminator dpr = testsup::random_disc(rng, C);
        Discriminator dcl = testsup::random_disc(rng, C);
        const int t = int(rng() % 9), t_max = 10;

        // plain cross-entropy over the full model
        {
            Gradients g = zeros_like(m);
            LossSpec spec;
            compute_gradients(m, batch, spec, g);
            track(testsup::fd_max_rel_error(
                testsup::model_param_ptrs(m, ParamMask::Full),
                testsup::model_grad_values(g, ParamMask::Full), [&] {
                    Gradients dummy = zeros_like(m);
                    return compute_gradients(m, batch, spec, dummy);
                }));
        }
        // center loss over the extractor (composed from backprop directly)
        {
            auto loss_fn = [&] {
                std::vector<std::pair<Vec, int>> feats;
                for (const Sample* s : batch) feats.emplace_back(forward_features(m, s->x), s->y);
                return center_loss(feats, global);
            };
            Gradients g = zeros_like(m);
            const double inv = 1.0 / double(batch.size());
            for (const Sample* s : batch) {
                ForwardCache cache;
                forward_all(m, s->x, cache);
                const Vec& f = cache.features();
                Vec dfeat(f.size());
                const Vec& p = global.at(s->y);
                for (std::size_t c = 0; c < f.size(); ++c) dfeat[c] = 2.0 * inv * (f[c] - p[c]);
                const Vec zero_dlogits(C, 0.0);
                backprop(m, cache, zero_dlogits, &dfeat, ParamMask::ExtractorOnly, g);
            }
            track(testsup::fd_max_rel_error(testsup::model_param_ptrs(m, ParamMask::ExtractorOnly),
                                            testsup::model_grad_values(g, ParamMask::ExtractorOnly),
                                            loss_fn));
        }
        // discriminator losses over discriminator parameters
        {
            DiscGradients g = zeros_like(dpr);
            disc_pr_loss(dpr, m.classifier, global, local, &g);
            track(testsup::fd_max_rel_error(
                testsup::disc_param_ptrs(dpr), testsup::disc_grad_values(g),
                [&] { return disc_pr_loss(dpr, m.classifier, global, local); }));
        }
        {
            DenseLayer phi_g(C, K);
            for (double& v : phi_g.w.a) v = std::normal_distribution<double>()(rng);
            DiscGradients g = zeros_like(dcl);
            disc_cl_loss(dcl, m.classifier, phi_g, global, &g);
            track(testsup::fd_max_rel_error(
                testsup::disc_param_ptrs(dcl), testsup::disc_grad_values(g),
                [&] { return disc_cl_loss(dcl, m.classifier, phi_g, global); }));
        }
        // generator and ccf losses over the classifier
        {
            DenseLayer g(C, K);
            generator_adv_loss(dpr, dcl, m.classifier, local, global, &g);
            track(testsup::fd_max_rel_error(
                testsup::layer_param_ptrs(m.classifier), testsup::layer_grad_values(g),
                [&] { return generator_adv_loss(dpr, dcl, m.classifier, local, global); }));
        }
        {
            DenseLayer g(C, K);
            ccf_loss(m.classifier, local, global, dpr, dcl, t, t_max, &g);
            track(testsup::fd_max_rel_error(
                testsup::layer_param_ptrs(m.classifier), testsup::layer_grad_values(g),
                [&] { return ccf_loss(m.classifier, local, global, dpr, dcl, t, t_max); }));
        }
        // the two phase objectives over their trainable blocks
        {
            PhaseContext ctx;
            ctx.global_prototypes = &global;
            ctx.local_prototypes = &local;
            ctx.disc_pr = &dpr;
            ctx.disc_cl = &dcl;
            ctx.lambda_c = 0.6;
            ctx.t = t;
            ctx.t_max = t_max;
            Gradients g = zeros_like(m);
            classifier_phase_loss(m, batch, ctx, &g);
            track(testsup::fd_max_rel_error(
                testsup::model_param_ptrs(m, ParamMask::ClassifierOnly),
                testsup::model_grad_values(g, ParamMask::ClassifierOnly),
                [&] { return classifier_phase_loss(m, batch, ctx); }));
        }
        {
            PhaseContext ctx;
            ctx.global_prototypes = &global;
            ctx.lambda_e = 0.8;
            Gradients g = zeros_like(m);
            extractor_phase_loss(m, batch, ctx, &g);
            track(testsup::fd_max_rel_error(
                testsup::model_param_ptrs(m, ParamMask::ExtractorOnly),
                testsup::model_grad_values(g, ParamMask::ExtractorOnly),
                [&] { return extractor_phase_loss(m, batch, ctx); }));
        }
    }
    const double elapsed = seconds_since(t0);
    const bool pass = worst < 1e-4 && elapsed < 30.0;
    std::printf("%s criterion 1: gradient suite, 8 compositions x 100 instances "
                "(max rel err %.2e, %.1fs)\n",
                pass ? "[PASS]" : "[FAIL]", worst, elapsed);
    return pass;
}

// ---------------------------------------------------------------------------
// criterion 2: MPS brute-force equivalence

bool crit2_mps() {
    std::mt19937_64 rng(202);
    std::normal_distribution<double> nd;
    bool pass = true;
    for (int trial = 0; trial < 1000 && pass; ++trial) {
        const std::size_t n = 1 + rng() % 6;  // |B_k| <= 6
        const std::size_t dim = 2 + rng() % 4;
        const std::size_t C = 3;
        const int k = int(rng() % C);
        const bool bootstrap = trial % 4 == 0;

        DenseLayer phi_prev(C, dim);
        for (double& v : phi_prev.w.a) v = nd(rng);
        for (double& v : phi_prev.b) v = nd(rng);

        std::vector<ClientUpdate> updates(n);
        for (std::size_t i = 0; i < n; ++i) {
            updates[i].client_id = int(i);
            updates[i].classifier = DenseLayer(C, dim);
            updates[i].prototypes.emplace(k, testsup::random_vec(rng, dim));
            updates[i].per_class_counts[k] = 1 + rng() % 20;
            updates[i].total_count = updates[i].per_class_counts[k];
        }
        auto [global, wmap] = aggregate_prototypes(updates, bootstrap ? nullptr : &phi_prev);

        // flat oracle
        double total_count = 0.0;
        for (const auto& u : updates) total_count += double(u.per_class_counts.at(k));
        Vec alpha(n), l(n), beta(n);
        Vec anchor(dim, 0.0);
        for (const auto& u : updates)
            for (std::size_t c = 0; c < dim; ++c) anchor[c] += u.prototypes.at(k)[c] / double(n);
        double na = 0.0;
        for (double v : anchor) na += v * v;
        na = std::sqrt(na);
        double lsum = 0.0, bsum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const Vec& p = updates[i].prototypes.at(k);
            alpha[i] = double(updates[i].per_class_counts.at(k)) / total_count;
            double np = 0.0, dp = 0.0;
            for (std::size_t c = 0; c < dim; ++c) {
                np += p[c] * p[c];
                dp += p[c] * anchor[c];
            }
            np = std::sqrt(np);
            const double cos = (np == 0.0 || na == 0.0) ? 0.0 : dp / (np * na);
            l[i] = (1.0 + cos) / 2.0;
            lsum += l[i];
            if (!bootstrap) {
                Vec z(C, 0.0);
                for (std::size_t r = 0; r < C; ++r) {
                    for (std::size_t c = 0; c < dim; ++c) z[r] += phi_prev.w(r, c) * p[c];
                    z[r] += phi_prev.b[r];
                }
                double denom = 0.0;
                for (double v : z) denom += std::exp(v);
                beta[i] = std::exp(z[std::size_t(k)]) / denom;
                bsum += beta[i];
            }
        }
        for (std::size_t i = 0; i < n; ++i) l[i] /= lsum;
        if (bootstrap) beta = alpha;
        else
            for (std::size_t i = 0; i < n; ++i) beta[i] /= bsum;

        auto js = [](const Vec& p, const Vec& q) {
            double s = 0.0;
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double m = 0.5 * (p[i] + q[i]);
                if (p[i] > 0.0) s += 0.5 * p[i] * std::log(p[i] / m);
                if (q[i] > 0.0) s += 0.5 * q[i] * std::log(q[i] / m);
            }
            return s;
        };
        const double dal = js(alpha, l), dab = js(alpha, beta), dlb = js(l, beta);
        Vec e = {std::exp(-(dal + dab)), std::exp(-(dal + dlb)), std::exp(-(dab + dlb))};
        const double esum = e[0] + e[1] + e[2];
        Vec expect(dim, 0.0), final(n);
        double fsum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            final[i] = (e[0] * alpha[i] + e[1] * l[i] + e[2] * beta[i]) / esum;
            fsum += final[i];
            for (std::size_t c = 0; c < dim; ++c)
                expect[c] += final[i] * updates[i].prototypes.at(k)[c];
        }

        pass = pass && near_vec(global.at(k), expect) && near_vec(wmap.at(k).final, final) &&
               near(fsum, 1.0, 1e-9);
        for (double v : wmap.at(k).final) pass = pass && v >= 0.0;
        // coordinatewise convex-hull bound
        for (std::size_t c = 0; c < dim && pass; ++c) {
            double lo = 1e300, hi = -1e300;
            for (const auto& u : updates) {
                lo = std::min(lo, u.prototypes.at(k)[c]);
                hi = std::max(hi, u.prototypes.at(k)[c]);
            }
            pass = global.at(k)[c] >= lo - 1e-12 && global.at(k)[c] <= hi + 1e-12;
        }
    }
    std::printf("%s criterion 2: MPS brute-force equivalence over 1000 instances\n",
                pass ? "[PASS]" : "[FAIL]");
    return pass;
}

// ---------------------------------------------------------------------------
// criterion 3: CCI bitwise FedAvg reduction

bool crit3_cci() {
    std::mt19937_64 rng(303);
    std::normal_distribution<double> nd;
    bool pass = true;
    std::size_t classifiers_checked = 0, witnesses = 0;

    auto fedavg = [&](const std::vector<ClientUpdate>& u, std::size_t C, std::size_t K) {
        double total = 0.0;
        for (const auto& c : u) total += double(c.total_count);
        DenseLayer out(C, K);
        for (std::size_t i = 0; i < u.size(); ++i) {
            const double w = double(u[i].total_count) / total;
            for (std::size_t j = 0; j < out.w.a.size(); ++j) out.w.a[j] += w * u[i].classifier.w.a[j];
            for (std::size_t j = 0; j < out.b.size(); ++j) out.b[j] += w * u[i].classifier.b[j];
        }
        return out;
    };

    for (int trial = 0; trial < 350 && pass; ++trial) {
        const std::size_t C = 2 + rng() % 3, K = 2 + rng() % 3;
        const std::size_t n = 2 + rng() % 3;
        classifiers_checked += n;
        std::vector<ClientUpdate> u(n);
        for (std::size_t i = 0; i < n; ++i) {
            u[i].classifier = DenseLayer(C, K);
            for (double& v : u[i].classifier.w.a) v = nd(rng);
            for (double& v : u[i].classifier.b) v = nd(rng);
            const std::size_t per_class = 1 + rng() % 20;  // uniform proportions
            for (std::size_t k = 0; k < C; ++k) u[i].per_class_counts[int(k)] = per_class;
            u[i].total_count = C * per_class;
        }
        const DenseLayer prev(C, K);
        const DenseLayer classwise = aggregate_classifier_classwise(u, prev);
        const DenseLayer avg = fedavg(u, C, K);
        pass = pass && classwise.w.a == avg.w.a && classwise.b == avg.b;  // bit equality

        // perturb one per-class proportion: the reduction must break
        u[0].per_class_counts[0] += 5;
        u[0].total_count += 5;
        const DenseLayer skewed = aggregate_classifier_classwise(u, prev);
        const DenseLayer avg2 = fedavg(u, C, K);
        if (skewed.w.a != avg2.w.a || skewed.b != avg2.b) ++witnesses;
    }
    pass = pass && classifiers_checked >= 1000 && witnesses == 350;
    std::printf("%s criterion 3: CCI bitwise FedAvg reduction (%zu classifiers, %zu witnesses)\n",
                pass ? "[PASS]" : "[FAIL]", classifiers_checked, witnesses);
    return pass;
}

// ---------------------------------------------------------------------------
// criterion 4: CFT cost identity

bool crit4_cft() {
    RunConfig cfg;
    cfg.rounds = 20;
    cfg.num_clients = 3;
    cfg.num_classes = 10;
    cfg.input_dim = 11;
    cfg.hidden_dim = 45;
    cfg.feature_dim = 10;  // Par(theta) = 45*12 + 10*46 = 1000, Par(P) = 100, q = 10
    cfg.samples_per_class = 30;
    cfg.test_samples_per_class = 5;
    cfg.skew_s = 100;  // everyone holds every class
    cfg.local_epochs = 0;
    cfg.participation = 1.0;
    cfg.seed = 404;

    const RunResult r = run_simulation(cfg);
    bool pass = r.schedule && r.schedule->q == 10.0 && r.schedule->skip_stride == 10;

    const std::size_t par_theta = param_count(r.global_model.extractor);
    pass = pass && par_theta == 1000;
    std::size_t moved = 0;
    for (const auto& rec : r.ledger) {
        moved += rec.up.extractor + rec.up.prototypes;
        const bool skip = (rec.round + 1) % 10 == 0;
        if (skip) pass = pass && rec.up.extractor == 0;
        else pass = pass && rec.up.extractor == rec.participants.size() * par_theta;
    }
    const std::size_t expect = cfg.num_clients * std::size_t(cfg.rounds) * par_theta;
    pass = pass && moved == expect;
    std::printf("%s criterion 4: CFT cost identity, theta+P uploads == T*Par(theta) "
                "(%zu == %zu) with skips at multiples of q\n",
                pass ? "[PASS]" : "[FAIL]", moved, expect);
    return pass;
}

// ---------------------------------------------------------------------------
// criterion 5: protocol conformance against a monolithic oracle

struct OracleClient {
    ModelParams model;
    Discriminator dpr, dcl;
    LabeledDataset data;
    std::uint64_t seed = 0;
};

PrototypeSet oracle_prototypes(const ModelParams& m, const LabeledDataset& d) {
    PrototypeSet p;
    std::map<int, std::size_t> n;
    for (const auto& s : d.samples) {
        const Vec f = forward_features(m, s.x);
        auto [it, fresh] = p.emplace(s.y, Vec(f.size(), 0.0));
        (void)fresh;
        for (std::size_t c = 0; c < f.size(); ++c) it->second[c] += f[c];
        n[s.y]++;
    }
    for (auto& [k, v] : p)
        for (double& x : v) x /= double(n[k]);
    return p;
}

// One full local round, written straight off the protocol description.
ClientUpdate oracle_local_round(OracleClient& c, const Broadcast& b, const RunConfig& cfg,
                                bool upload_extractor) {
    if (b.global_extractor) c.model.extractor = *b.global_extractor;
    const PrototypeSet local_p = oracle_prototypes(c.model, c.data);
    const bool have_globals = b.global_prototypes.has_value() && !b.global_prototypes->empty();
    const std::size_t C = c.model.classifier.out_dim();

    // classifier phase
    {
        auto rng = make_engine(child_seed(c.seed, stream::kClient, std::uint64_t(b.round), 1));
        for (int e = 0; e < cfg.local_epochs; ++e) {
            std::vector<std::size_t> order(c.data.size());
            std::iota(order.begin(), order.end(), 0);
            std::shuffle(order.begin(), order.end(), rng);
            for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
                const std::size_t end = std::min(begin + cfg.batch_size, order.size());
                if (have_globals) {
                    const double disc_lr = 0.1 * cfg.local_lr;  // protocol: disc steps at lr/10
                    DiscGradients gpr = zeros_like(c.dpr);
                    disc_pr_loss(c.dpr, c.model.classifier, *b.global_prototypes, local_p, &gpr);
                    sgd_step_layer(c.dpr.l1, gpr.l1, disc_lr);
                    sgd_step_layer(c.dpr.l2, gpr.l2, disc_lr);
                    DiscGradients gcl = zeros_like(c.dcl);
                    disc_cl_loss(c.dcl, c.model.classifier, b.global_classifier,
                                 *b.global_prototypes, &gcl);
                    sgd_step_layer(c.dcl.l1, gcl.l1, disc_lr);
                    sgd_step_layer(c.dcl.l2, gcl.l2, disc_lr);
                }
                DenseLayer g(C, c.model.classifier.in_dim());
                const double inv = 1.0 / double(end - begin);
                for (std::size_t i = begin; i < end; ++i) {
                    const Sample& s = c.data.samples[order[i]];
                    const Vec f = forward_features(c.model, s.x);
                    Vec d = cross_entropy_dlogits(forward_logits(c.model.classifier, f), s.y);
                    for (double& v : d) v *= inv;
                    add_outer(1.0, d, f, g.w);
                    axpy(1.0, d, g.b);
                }
                if (have_globals && cfg.lambda_c != 0.0) {
                    DenseLayer gc(C, c.model.classifier.in_dim());
                    ccf_loss(c.model.classifier, local_p, *b.global_prototypes, c.dpr, c.dcl,
                             b.round, cfg.rounds, &gc);
                    axpy(cfg.lambda_c, gc.w.a, g.w.a);
                    axpy(cfg.lambda_c, gc.b, g.b);
                }
                sgd_step_layer(c.model.classifier, g, cfg.local_lr);
            }
        }
    }
    // extractor phase
    if (have_globals) {
        auto rng = make_engine(child_seed(c.seed, stream::kClient, std::uint64_t(b.round), 2));
        for (int e = 0; e < cfg.local_epochs; ++e) {
            std::vector<std::size_t> order(c.data.size());
            std::iota(order.begin(), order.end(), 0);
            std::shuffle(order.begin(), order.end(), rng);
            for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
                const std::size_t end = std::min(begin + cfg.batch_size, order.size());
                const double inv = 1.0 / double(end - begin);
                std::size_t included = 0;
                for (std::size_t i = begin; i < end; ++i)
                    if (b.global_prototypes->count(c.data.samples[order[i]].y)) ++included;
                Gradients g = zeros_like(c.model);
                for (std::size_t i = begin; i < end; ++i) {
                    const Sample& s = c.data.samples[order[i]];
                    ForwardCache cache;
                    const Vec logits = forward_all(c.model, s.x, cache);
                    Vec d = cross_entropy_dlogits(logits, s.y);
                    for (double& v : d) v *= inv;
                    Vec dfeat;
                    const Vec* dfeat_ptr = nullptr;
                    auto it = b.global_prototypes->find(s.y);
                    if (it != b.global_prototypes->end() && cfg.lambda_e != 0.0) {
                        const Vec& f = cache.features();
                        dfeat.resize(f.size());
                        for (std::size_t j = 0; j < f.size(); ++j)
                            dfeat[j] =
                                cfg.lambda_e * 2.0 / double(included) * (f[j] - it->second[j]);
                        dfeat_ptr = &dfeat;
                    }
                    backprop(c.model, cache, d, dfeat_ptr, ParamMask::ExtractorOnly, g);
                }
                sgd_step(c.model, g, cfg.local_lr, ParamMask::ExtractorOnly);
            }
        }
    }

    ClientUpdate u;
    u.classifier = c.model.classifier;
    u.prototypes = cfg.local_epochs > 0 ? oracle_prototypes(c.model, c.data) : local_p;
    u.total_count = c.data.size();
    for (const auto& s : c.data.samples) u.per_class_counts[s.y]++;
    if (upload_extractor) u.extractor = c.model.extractor;
    return u;
}

struct OracleServer {
    std::vector<DenseLayer> extractor;
    DenseLayer classifier;
    std::optional<PrototypeSet> prototypes;
    bool has_aggregated = false;
    bool extractor_refreshed = true;
};

void oracle_server_round(OracleServer& s, const std::vector<ClientUpdate>& updates,
                         const RunConfig& cfg) {
    const std::size_t C = s.classifier.out_dim();
    const std::size_t K = s.classifier.in_dim();

    // multi-view prototype fusion
    PrototypeSet global;
    std::set<int> classes;
    for (const auto& u : updates)
        for (const auto& [k, p] : u.prototypes) classes.insert(k);
    for (int k : classes) {
        std::vector<const Vec*> protos;
        std::vector<double> counts;
        for (const auto& u : updates)
            if (u.prototypes.count(k) && u.per_class_counts.count(k)) {
                protos.push_back(&u.prototypes.at(k));
                counts.push_back(double(u.per_class_counts.at(k)));
            }
        const std::size_t n = protos.size();
        double total = 0.0;
        for (double c : counts) total += c;
        Vec alpha(n), l(n), beta(n);
        Vec anchor(K, 0.0);
        for (const Vec* p : protos)
            for (std::size_t c = 0; c < K; ++c) anchor[c] += (*p)[c] / double(n);
        double na = 0.0;
        for (double v : anchor) na += v * v;
        na = std::sqrt(na);
        double lsum = 0.0, bsum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            alpha[i] = counts[i] / total;
            double np = 0.0, dp = 0.0;
            for (std::size_t c = 0; c < K; ++c) {
                np += (*protos[i])[c] * (*protos[i])[c];
                dp += (*protos[i])[c] * anchor[c];
            }
            np = std::sqrt(np);
            l[i] = (1.0 + ((np == 0.0 || na == 0.0) ? 0.0 : dp / (np * na))) / 2.0;
            lsum += l[i];
            if (s.has_aggregated) {
                const Vec sm = softmax(forward_logits(s.classifier, *protos[i]));
                beta[i] = sm[std::size_t(k)];
                bsum += beta[i];
            }
        }
        for (double& v : l) v /= lsum;
        if (s.has_aggregated)
            for (double& v : beta) v /= bsum;
        else
            beta = alpha;
        const double dal = js_divergence(alpha, l), dab = js_divergence(alpha, beta),
                     dlb = js_divergence(l, beta);
        Vec e = {std::exp(-(dal + dab)), std::exp(-(dal + dlb)), std::exp(-(dab + dlb))};
        const double esum = e[0] + e[1] + e[2];
        Vec p(K, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const double w = (e[0] * alpha[i] + e[1] * l[i] + e[2] * beta[i]) / esum;
            for (std::size_t c = 0; c < K; ++c) p[c] += w * (*protos[i])[c];
        }
        global.emplace(k, std::move(p));
    }

    // class-wise classifier fusion
    DenseLayer phi(C, K);
    for (std::size_t k = 0; k < C; ++k) {
        double total = 0.0;
        for (const auto& u : updates) {
            auto it = u.per_class_counts.find(int(k));
            if (it != u.per_class_counts.end()) total += double(it->second);
        }
        if (total == 0.0) {
            for (std::size_t c = 0; c < K; ++c) phi.w(k, c) = s.classifier.w(k, c);
            phi.b[k] = s.classifier.b[k];
            continue;
        }
        for (const auto& u : updates) {
            auto it = u.per_class_counts.find(int(k));
            if (it == u.per_class_counts.end() || it->second == 0) continue;
            const double w = double(it->second) / total;
            for (std::size_t c = 0; c < K; ++c) phi.w(k, c) += w * u.classifier.w(k, c);
            phi.b[k] += w * u.classifier.b[k];
        }
    }
    // prototype fine-tune
    for (int step = 0; step < cfg.finetune_steps; ++step) {
        DenseLayer g(C, K);
        for (const auto& [k, p] : global) {
            const Vec d = cross_entropy_dlogits(forward_logits(phi, p), k);
            add_outer(1.0, d, p, g.w);
            axpy(1.0, d, g.b);
        }
        sgd_step_layer(phi, g, cfg.server_lr);
    }
    // extractor aggregation
    bool any = false;
    double total = 0.0;
    for (const auto& u : updates)
        if (u.extractor) {
            any = true;
            total += double(u.total_count);
        }
    if (any) {
        std::vector<DenseLayer> ext;
        for (const auto& l : s.extractor) ext.emplace_back(l.out_dim(), l.in_dim());
        for (const auto& u : updates) {
            if (!u.extractor) continue;
            const double w = double(u.total_count) / total;
            for (std::size_t li = 0; li < ext.size(); ++li) {
                axpy(w, (*u.extractor)[li].w.a, ext[li].w.a);
                axpy(w, (*u.extractor)[li].b, ext[li].b);
            }
        }
        s.extractor = std::move(ext);
    }
    s.classifier = std::move(phi);
    s.prototypes = std::move(global);
    s.has_aggregated = true;
    s.extractor_refreshed = any;
}

bool crit5_trace() {
    RunConfig cfg;
    cfg.rounds = 5;
    cfg.num_clients = 3;
    cfg.num_classes = 4;
    cfg.input_dim = 4;
    cfg.hidden_dim = 6;
    cfg.feature_dim = 5;
    cfg.samples_per_class = 12;
    cfg.test_samples_per_class = 4;
    cfg.local_epochs = 1;
    cfg.batch_size = 4;
    cfg.skew_s = 50;
    cfg.seed = 505;
    cfg.validate();
    const SimEnv env = build_env(cfg);

    const ModelParams init = init_model({cfg.input_dim, cfg.hidden_dim, cfg.feature_dim},
                                        std::size_t(cfg.num_classes),
                                        child_seed(cfg.seed, stream::kInit));
    const CftSchedule sched = cft_schedule(param_count(init.extractor),
                                           std::size_t(cfg.num_classes) * cfg.feature_dim,
                                           cfg.cft_x, cfg.rounds);

    // library side
    GlobalState server = make_global_state(init);
    std::vector<ClientState> clients;
    for (std::size_t i = 0; i < cfg.num_clients; ++i) {
        ClientState c;
        c.id = int(i);
        c.model = init;
        c.disc_pr = init_discriminator(std::size_t(cfg.num_classes),
                                       child_seed(cfg.seed, stream::kDisc, i, 0));
        c.disc_cl = init_discriminator(std::size_t(cfg.num_classes),
                                       child_seed(cfg.seed, stream::kDisc, i, 1));
        c.train_data = env.partitions[i];
        c.rng_seed = child_seed(cfg.seed, stream::kClient, i);
        clients.push_back(std::move(c));
    }
    // oracle side (same initial conditions; these are protocol inputs)
    OracleServer oserver{init.extractor, init.classifier, std::nullopt, false, true};
    std::vector<OracleClient> oclients;
    for (std::size_t i = 0; i < cfg.num_clients; ++i)
        oclients.push_back({init,
                            init_discriminator(std::size_t(cfg.num_classes),
                                               child_seed(cfg.seed, stream::kDisc, i, 0)),
                            init_discriminator(std::size_t(cfg.num_classes),
                                               child_seed(cfg.seed, stream::kDisc, i, 1)),
                            env.partitions[i], child_seed(cfg.seed, stream::kClient, i)});

    bool pass = true;
    for (int t = 0; t < cfg.rounds && pass; ++t) {
        const Broadcast b = make_broadcast(server);
        // oracle broadcast
        Broadcast ob;
        ob.round = t;
        ob.global_classifier = oserver.classifier;
        if (oserver.prototypes) ob.global_prototypes = oserver.prototypes;
        if (oserver.extractor_refreshed) ob.global_extractor = oserver.extractor;

        pass = pass && near_layer(b.global_classifier, ob.global_classifier) &&
               b.global_prototypes.has_value() == ob.global_prototypes.has_value() &&
               b.global_extractor.has_value() == ob.global_extractor.has_value();
        if (pass && b.global_prototypes) {
            pass = b.global_prototypes->size() == ob.global_prototypes->size();
            for (const auto& [k, p] : *b.global_prototypes)
                pass = pass && near_vec(p, ob.global_prototypes->at(k));
        }
        if (pass && b.global_extractor)
            for (std::size_t li = 0; li < b.global_extractor->size(); ++li)
                pass = pass && near_layer((*b.global_extractor)[li], (*ob.global_extractor)[li]);

        LocalConfig lc;
        lc.epochs = cfg.local_epochs;
        lc.batch_size = cfg.batch_size;
        lc.lr = cfg.local_lr;
        lc.lambda_c = cfg.lambda_c;
        lc.lambda_e = cfg.lambda_e;
        lc.t_max = cfg.rounds;
        lc.upload_extractor = sched.contains(t + 1);

        std::vector<ClientUpdate> updates, oupdates;
        for (std::size_t i = 0; i < cfg.num_clients && pass; ++i) {
            LocalRoundResult lr = local_round(clients[i], b, lc);
            ClientUpdate ou = oracle_local_round(oclients[i], ob, cfg, lc.upload_extractor);
            const ClientUpdate& u = lr.update;
            pass = pass && near_layer(u.classifier, ou.classifier) &&
                   u.prototypes.size() == ou.prototypes.size() &&
                   u.per_class_counts == ou.per_class_counts && u.total_count == ou.total_count &&
                   u.extractor.has_value() == ou.extractor.has_value();
            for (const auto& [k, p] : u.prototypes) pass = pass && near_vec(p, ou.prototypes.at(k));
            if (pass && u.extractor)
                for (std::size_t li = 0; li < u.extractor->size(); ++li)
                    pass = pass && near_layer((*u.extractor)[li], (*ou.extractor)[li]);
            updates.push_back(lr.update);
            oupdates.push_back(std::move(ou));
        }
        server_round(server, updates, ServerConfig{cfg.server_lr, cfg.finetune_steps});
        oracle_server_round(oserver, oupdates, cfg);
    }
    // final server state comparison
    pass = pass && near_layer(server.classifier, oserver.classifier);
    for (std::size_t li = 0; li < server.extractor.size(); ++li)
        pass = pass && near_layer(server.extractor[li], oserver.extractor[li]);

    std::printf("%s criterion 5: 3-client 5-round trace matches the monolithic oracle\n",
                pass ? "[PASS]" : "[FAIL]");
    return pass;
}

// ---------------------------------------------------------------------------
// criteria 6 + 7 + 9: scaled synthetic experiments

RunConfig scaled_config(Method m, std::uint64_t seed) {
    RunConfig cfg;
    cfg.rounds = 150;
    cfg.num_clients = 20;
    cfg.num_classes = 10;
    cfg.input_dim = 16;
    cfg.hidden_dim = 32;
    cfg.feature_dim = 32;
    cfg.skew_s = 30;
    cfg.local_epochs = 5;
    cfg.lambda_e = 0.8;
    cfg.lambda_c = 0.6;
    cfg.samples_per_class = 200;
    cfg.test_samples_per_class = 20;
    cfg.batch_size = 16;
    cfg.cluster_spread = 1.0;
    cfg.mixture_radius = 4.5;
    cfg.method = m;
    cfg.seed = seed;
    return cfg;
}

bool crit6_scaled(std::string* fedmate_csv_out) {
    const auto t0 = Clock::now();
    const int seeds = 5;
    double fm = 0.0, lo = 0.0, ft = 0.0;
    for (int s = 0; s < seeds; ++s) {
        const RunResult rf = run_simulation(scaled_config(Method::FedMate, std::uint64_t(s)));
        const RunResult rl = run_simulation(scaled_config(Method::LocalOnly, std::uint64_t(s)));
        const RunResult ra = run_simulation(scaled_config(Method::FedAvgFt, std::uint64_t(s)));
        fm += rf.final_balanced;
        lo += rl.final_balanced;
        ft += ra.final_balanced;
        if (s == 0 && fedmate_csv_out) *fedmate_csv_out = metrics_csv(rf);
    }
    fm /= seeds;
    lo /= seeds;
    ft /= seeds;
    const double elapsed = seconds_since(t0);
    const bool pass = fm >= lo + 0.10 && fm >= ft - 0.02 && elapsed < 300.0;
    std::printf("%s criterion 6: scaled experiment, balanced acc fedmate %.3f vs local %.3f "
                "vs fedavg_ft %.3f over %d seeds (%.0fs)\n",
                pass ? "[PASS]" : "[FAIL]", fm, lo, ft, seeds, elapsed);
    return pass;
}

bool crit7_pathological() {
    const int seeds = 5;
    double fm = 0.0, ft_pre = 0.0;
    for (int s = 0; s < seeds; ++s) {
        RunConfig cf = scaled_config(Method::FedMate, std::uint64_t(100 + s));
        cf.partition = "pathological";
        cf.classes_per_client = 3;
        cf.rounds = 60;
        cf.local_lr = 0.03;
        cf.cluster_spread = 2.0;  // global 10-way task hard, local 3-way easy
        cf.mixture_radius = 4.0;
        RunConfig ca = cf;
        ca.method = Method::FedAvgFt;
        fm += run_simulation(cf).final_matched;
        ft_pre += run_simulation(ca).pre_ft_matched;
    }
    fm /= seeds;
    ft_pre /= seeds;
    const bool pass = fm >= ft_pre + 0.05;
    std::printf("%s criterion 7: pathological matched acc fedmate %.3f vs fedavg_ft pre-finetune "
                "%.3f over %d seeds\n",
                pass ? "[PASS]" : "[FAIL]", fm, ft_pre, seeds);
    return pass;
}

// ---------------------------------------------------------------------------
// criterion 8: kappa schedule and round-0 bootstrap

bool crit8_bootstrap() {
    bool pass = kappa(0, 150) == 1.0 && kappa(150, 150) == 0.0;

    // fresh server: round-0 broadcast carries no prototypes
    const ModelParams init = init_model({4, 6, 5}, 3, 801);
    GlobalState server = make_global_state(init);
    const Broadcast b = make_broadcast(server);
    pass = pass && !b.global_prototypes.has_value() && b.round == 0;

    // a client trained on that broadcast runs plain CE only: discriminators
    // and extractor stay bit-identical, no adversarial or center terms fire
    std::mt19937_64 rng(802);
    ClientState c;
    c.id = 0;
    c.model = init;
    c.disc_pr = init_discriminator(3, 803);
    c.disc_cl = init_discriminator(3, 804);
    c.train_data = testsup::random_dataset(rng, 12, 4, 3);
    c.rng_seed = 805;
    const Discriminator dpr0 = c.disc_pr;
    const auto ext0 = c.model.extractor;
    LocalConfig lc;
    lc.epochs = 2;
    lc.batch_size = 4;
    lc.t_max = 150;
    Notices notices;
    local_round(c, b, lc, &notices);
    pass = pass && c.disc_pr.l1.w.a == dpr0.l1.w.a && c.disc_pr.l2.w.a == dpr0.l2.w.a;
    for (std::size_t i = 0; i < ext0.size(); ++i)
        pass = pass && c.model.extractor[i].w.a == ext0[i].w.a;
    pass = pass && c.extractor_phase_stamp == -1;  // extractor phase never ran
    pass = pass && notices.skipped_classes == 0 && notices.empty_sets == 0;

    std::printf("%s criterion 8: kappa endpoints exact, round-0 runs without CCF/center terms\n",
                pass ? "[PASS]" : "[FAIL]");
    return pass;
}

bool crit9_determinism(const std::string& first_csv) {
    const RunResult again = run_simulation(scaled_config(Method::FedMate, 0));
    const bool pass = !first_csv.empty() && metrics_csv(again) == first_csv;
    std::printf("%s criterion 9: bit-identical metrics.csv across reruns of the scaled config\n",
                pass ? "[PASS]" : "[FAIL]");
    return pass;
}

}  // namespace

int main(int argc, char** argv) {
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
    auto want = [&](int k) { return only.empty() || only.count(k); };

    bool ok = true;
    std::string fedmate_csv;
    if (want(1)) ok &= crit1_gradients();
    if (want(2)) ok &= crit2_mps();
    if (want(3)) ok &= crit3_cci();
    if (want(4)) ok &= crit4_cft();
    if (want(5)) ok &= crit5_trace();
    if (want(6) || want(9)) ok &= crit6_scaled(&fedmate_csv);
    if (want(7)) ok &= crit7_pathological();
    if (want(8)) ok &= crit8_bootstrap();
    if (want(9)) ok &= crit9_determinism(fedmate_csv);
    std::printf("acceptance: %s\n", ok ? "ALL PASS" : "FAILURES");
    return ok ? 0 : 1;
}
