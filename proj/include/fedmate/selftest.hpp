#pragma once

#include <cmath>
#include <ostream>
#include <random>

#include "fedmate/harness.hpp"

namespace fedmate {

// Built-in sanity suite behind `fedmate selftest`; the full oracle and
// acceptance suites live in the test tree.
inline bool run_selftest(std::ostream& os) {
    bool ok = true;
    auto report = [&](const char* name, bool pass) {
        os << (pass ? "[pass] " : "[FAIL] ") << name << "\n";
        ok = ok && pass;
    };

    // kappa schedule endpoints
    report("kappa endpoints", kappa(0, 10) == 1.0 && kappa(10, 10) == 0.0 &&
                                  kappa(5, 10) == 0.5 && kappa(12, 10) == 0.0);

    // JS divergence properties
    {
        std::mt19937_64 rng(1);
        bool pass = true;
        for (int i = 0; i < 50; ++i) {
            Vec p(4), q(4);
            double sp = 0, sq = 0;
            for (auto* v : {&p, &q}) (void)v;
            for (int j = 0; j < 4; ++j) {
                p[j] = std::uniform_real_distribution<>(0.01, 1.0)(rng);
                q[j] = std::uniform_real_distribution<>(0.01, 1.0)(rng);
                sp += p[j];
                sq += q[j];
            }
            for (int j = 0; j < 4; ++j) {
                p[j] /= sp;
                q[j] /= sq;
            }
            const double d = js_divergence(p, q);
            pass = pass && d >= 0.0 && d <= std::log(2.0) + 1e-12 &&
                   std::abs(d - js_divergence(q, p)) < 1e-12 && js_divergence(p, p) < 1e-15;
        }
        report("JS symmetry and ln2 bound", pass);
    }

    // gradient spot-check: cross-entropy against central finite differences
    {
        std::mt19937_64 rng(2);
        bool pass = true;
        for (int trial = 0; trial < 5; ++trial) {
            ModelParams m = init_model({4, 6, 3}, 4, rng());
            LabeledDataset data;
            data.num_classes = 4;
            std::normal_distribution<double> n;
            for (int i = 0; i < 3; ++i) {
                Sample s;
                s.x = {n(rng), n(rng), n(rng), n(rng)};
                s.y = int(rng() % 4);
                data.samples.push_back(s);
            }
            Batch batch;
            for (const auto& s : data.samples) batch.push_back(&s);
            LossSpec spec;
            Gradients g = zeros_like(m);
            compute_gradients(m, batch, spec, g);
            // perturb one classifier weight
            const double step = 1e-5;
            double& p = m.classifier.w.a[0];
            const double orig = p;
            auto eval = [&] {
                Gradients dummy = zeros_like(m);
                return compute_gradients(m, batch, spec, dummy);
            };
            p = orig + step;
            const double lp = eval();
            p = orig - step;
            const double lm = eval();
            p = orig;
            const double num = (lp - lm) / (2 * step);
            pass = pass && std::abs(num - g.classifier.w.a[0]) <
                               1e-4 * std::max({std::abs(num), std::abs(g.classifier.w.a[0]), 1e-6});
        }
        report("cross-entropy finite-difference spot check", pass);
    }

    // CFT schedule arithmetic
    {
        const CftSchedule s = cft_schedule(9000, 900, 1.0, 30);
        bool pass = s.q == 10.0 && s.skip_stride == 10;
        pass = pass && !s.contains(10) && !s.contains(20) && !s.contains(30) && s.contains(9) &&
               s.contains(11);
        std::size_t uploaded = 0;
        for (int t = 1; t <= 100; ++t) uploaded += (t % 10 != 0) ? 9000 : 0;
        pass = pass && uploaded + 100 * 900 == std::size_t(100) * 9000;
        report("CFT schedule and cost identity", pass);
    }

    // MPS convexity invariants on random instances
    {
        std::mt19937_64 rng(3);
        bool pass = true;
        for (int trial = 0; trial < 50; ++trial) {
            std::vector<ClientUpdate> updates(3);
            std::normal_distribution<double> n;
            for (std::size_t i = 0; i < 3; ++i) {
                Vec p(4);
                for (double& v : p) v = n(rng);
                updates[i].client_id = int(i);
                updates[i].classifier = DenseLayer(2, 4);
                updates[i].prototypes.emplace(0, p);
                updates[i].per_class_counts[0] = 1 + rng() % 10;
                updates[i].total_count = updates[i].per_class_counts[0];
            }
            auto [protos, weights] = aggregate_prototypes(updates, nullptr);
            const auto& w = weights.at(0);
            double sum = 0.0;
            for (double v : w.final) {
                pass = pass && v >= 0.0;
                sum += v;
            }
            pass = pass && std::abs(sum - 1.0) < 1e-9;
            const Vec& p = protos.at(0);
            for (std::size_t c = 0; c < p.size(); ++c) {
                double lo = 1e300, hi = -1e300;
                for (const auto& u : updates) {
                    lo = std::min(lo, u.prototypes.at(0)[c]);
                    hi = std::max(hi, u.prototypes.at(0)[c]);
                }
                pass = pass && p[c] >= lo - 1e-12 && p[c] <= hi + 1e-12;
            }
        }
        report("MPS convex-combination invariants", pass);
    }

    // determinism of a tiny simulation
    {
        RunConfig cfg;
        cfg.rounds = 2;
        cfg.num_clients = 3;
        cfg.num_classes = 4;
        cfg.input_dim = 4;
        cfg.hidden_dim = 8;
        cfg.feature_dim = 6;
        cfg.samples_per_class = 12;
        cfg.test_samples_per_class = 8;
        cfg.local_epochs = 1;
        cfg.seed = 5;
        const RunResult a = run_simulation(cfg);
        const RunResult b = run_simulation(cfg);
        report("tiny-run determinism", metrics_csv(a) == metrics_csv(b));
    }

    os << (ok ? "selftest passed\n" : "selftest FAILED\n");
    return ok;
}

}  // namespace fedmate
