#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedmate/linalg.hpp"
#include "fedmate/rng.hpp"

namespace fedmate {

struct Sample {
    Vec x;
    int y = 0;
};

struct LabeledDataset {
    std::vector<Sample> samples;
    int num_classes = 0;

    std::vector<std::size_t> class_counts() const {
        std::vector<std::size_t> counts(num_classes, 0);
        for (const auto& s : samples) counts.at(std::size_t(s.y))++;
        return counts;
    }
    std::size_t size() const { return samples.size(); }
};

struct PartitionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Geometry of the synthetic task: class means seeded at random on a sphere
// of radius `radius` (default 4*spread), samples N(mu_k, spread^2 I).
struct MixtureSpec {
    int num_classes = 10;
    std::size_t dim = 16;
    double spread = 1.0;
    double radius = -1.0;  // <0 means 4*spread
    std::uint64_t seed = 0;

    double effective_radius() const { return radius >= 0.0 ? radius : 4.0 * spread; }
};

inline std::vector<Vec> mixture_means(const MixtureSpec& spec) {
    std::vector<Vec> means;
    const double r = spec.effective_radius();
    for (int k = 0; k < spec.num_classes; ++k) {
        auto rng = make_engine(child_seed(spec.seed, stream::kData, 100, std::uint64_t(k)));
        std::normal_distribution<double> n(0.0, 1.0);
        Vec u(spec.dim);
        for (double& v : u) v = n(rng);
        const double nu = norm2(u);
        Vec mu(spec.dim, 0.0);
        if (nu > 0.0)
            for (std::size_t i = 0; i < spec.dim; ++i) mu[i] = r * u[i] / nu;
        means.push_back(std::move(mu));
    }
    return means;
}

// draw_tag keeps train and test draws on disjoint RNG streams.
inline LabeledDataset generate_gaussian_mixture(const MixtureSpec& spec, std::size_t n_per_class,
                                                std::uint64_t draw_tag = 0) {
    if (spec.num_classes < 2) throw std::invalid_argument("generate_gaussian_mixture: need >= 2 classes");
    if (spec.dim < 2) throw std::invalid_argument("generate_gaussian_mixture: need dim >= 2");
    const auto means = mixture_means(spec);
    LabeledDataset d;
    d.num_classes = spec.num_classes;
    for (int k = 0; k < spec.num_classes; ++k) {
        auto rng = make_engine(child_seed(spec.seed, stream::kData, draw_tag, std::uint64_t(k) + 1000));
        std::normal_distribution<double> n(0.0, 1.0);
        for (std::size_t i = 0; i < n_per_class; ++i) {
            Sample s;
            s.y = k;
            s.x = means[std::size_t(k)];
            for (double& v : s.x) v += spec.spread * n(rng);
            d.samples.push_back(std::move(s));
        }
    }
    return d;
}

namespace detail {

// Per-class index pools, shuffled once per seed.
inline std::vector<std::vector<std::size_t>> class_pools(const LabeledDataset& data,
                                                         std::mt19937_64& rng) {
    std::vector<std::vector<std::size_t>> pools(std::size_t(data.num_classes));
    for (std::size_t i = 0; i < data.samples.size(); ++i)
        pools[std::size_t(data.samples[i].y)].push_back(i);
    for (auto& p : pools) std::shuffle(p.begin(), p.end(), rng);
    return pools;
}

inline LabeledDataset subset(const LabeledDataset& data, const std::vector<std::size_t>& idx) {
    LabeledDataset out;
    out.num_classes = data.num_classes;
    for (std::size_t i : idx) out.samples.push_back(data.samples[i]);
    return out;
}

}  // namespace detail

// s% of each client's quota drawn class-uniformly, the remainder biased
// toward per-client dominant classes (default 2). Dominant classes are
// dealt from a balanced multiset so balanced inputs partition cleanly;
// shortfalls fall back to whatever pools still have samples. The union of
// the outputs is an exact partition of the input.
inline std::vector<LabeledDataset> partition_skew(const LabeledDataset& data, std::size_t n_clients,
                                                  int s, std::uint64_t seed,
                                                  int dominant_per_client = 2) {
    if (s < 0 || s > 100) throw std::invalid_argument("partition_skew: s must be in [0,100]");
    if (n_clients == 0) throw std::invalid_argument("partition_skew: need >= 1 client");
    const int C = data.num_classes;
    auto rng = make_engine(child_seed(seed, stream::kData, 1));
    auto pools = detail::class_pools(data, rng);

    // Balanced dominant-class assignment: each class appears as evenly as
    // possible across the n_clients * dominant_per_client slots.
    std::vector<int> slot_classes;
    for (std::size_t i = 0; i < n_clients * std::size_t(dominant_per_client); ++i)
        slot_classes.push_back(int(i) % C);
    std::shuffle(slot_classes.begin(), slot_classes.end(), rng);
    std::vector<std::vector<int>> dominant(n_clients);
    {
        std::size_t cursor = 0;
        for (std::size_t i = 0; i < n_clients; ++i) {
            for (int j = 0; j < dominant_per_client; ++j) {
                // skip duplicates within a client when possible
                std::size_t probe = cursor;
                while (probe < slot_classes.size() &&
                       std::find(dominant[i].begin(), dominant[i].end(), slot_classes[probe]) !=
                           dominant[i].end())
                    ++probe;
                if (probe == slot_classes.size()) probe = cursor;
                std::swap(slot_classes[cursor], slot_classes[probe]);
                dominant[i].push_back(slot_classes[cursor]);
                ++cursor;
            }
        }
    }

    const std::size_t total = data.size();
    std::vector<std::size_t> quota(n_clients, total / n_clients);
    for (std::size_t i = 0; i < total % n_clients; ++i) quota[i]++;

    std::vector<std::vector<std::size_t>> assigned(n_clients);
    auto pop = [&](int k) -> std::size_t {
        auto& p = pools[std::size_t(k)];
        if (p.empty()) throw PartitionError("partition_skew: insufficient samples of class " + std::to_string(k));
        std::size_t idx = p.back();
        p.pop_back();
        return idx;
    };

    // Pass 1: every client's uniform share (round-robin over classes from a
    // rotating offset). Runs before any dominant draw so a biased client
    // cannot exhaust a class another client's uniform share requires.
    std::vector<std::size_t> dominant_quota(n_clients);
    for (std::size_t i = 0; i < n_clients; ++i) {
        const std::size_t uniform_n = quota[i] * std::size_t(s) / 100;
        dominant_quota[i] = quota[i] - uniform_n;
        const int offset = int(rng() % std::uint64_t(C));
        for (std::size_t j = 0; j < uniform_n; ++j) {
            int k = (offset + int(j)) % C;
            assigned[i].push_back(pop(k));
        }
    }
    // Pass 2: dominant draws, equal split across the client's dominant
    // classes, taking what each pool still has.
    for (std::size_t i = 0; i < n_clients; ++i) {
        const std::size_t dominant_n = dominant_quota[i];
        std::size_t want = dominant_n;
        std::size_t per = dominant_n / std::size_t(dominant_per_client);
        for (int j = 0; j < dominant_per_client && want > 0; ++j) {
            const int k = dominant[i][std::size_t(j)];
            std::size_t take = std::min(j + 1 == dominant_per_client ? want : per,
                                        pools[std::size_t(k)].size());
            take = std::min(take, want);
            for (std::size_t m = 0; m < take; ++m) assigned[i].push_back(pop(k));
            want -= take;
        }
        // shortfall: fill from the currently largest pools
        while (want > 0) {
            int best = -1;
            for (int k = 0; k < C; ++k)
                if (!pools[std::size_t(k)].empty() &&
                    (best < 0 || pools[std::size_t(k)].size() > pools[std::size_t(best)].size()))
                    best = k;
            if (best < 0) throw PartitionError("partition_skew: sample pool exhausted");
            assigned[i].push_back(pop(best));
            --want;
        }
    }
    std::vector<LabeledDataset> out;
    for (std::size_t i = 0; i < n_clients; ++i) out.push_back(detail::subset(data, assigned[i]));
    return out;
}

// Each client receives exactly classes_per_client distinct classes via a
// cyclic deal over a seeded class permutation; each class's samples split
// evenly among its holders.
inline std::vector<LabeledDataset> partition_pathological(const LabeledDataset& data,
                                                          std::size_t n_clients,
                                                          int classes_per_client,
                                                          std::uint64_t seed) {
    const int C = data.num_classes;
    if (classes_per_client < 1 || classes_per_client > C)
        throw PartitionError("partition_pathological: classes_per_client out of range");
    if (n_clients * std::size_t(classes_per_client) < std::size_t(C))
        throw PartitionError("partition_pathological: not every class can be assigned");
    auto rng = make_engine(child_seed(seed, stream::kData, 2));
    std::vector<int> perm;
    perm.resize(std::size_t(C));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);

    std::vector<std::vector<std::size_t>> holders;  // class -> client ids
    holders.resize(std::size_t(C));
    for (std::size_t i = 0; i < n_clients; ++i)
        for (int j = 0; j < classes_per_client; ++j)
            holders[std::size_t(perm[(i * std::size_t(classes_per_client) + std::size_t(j)) %
                                     std::size_t(C)])]
                .push_back(i);

    auto pools = detail::class_pools(data, rng);
    std::vector<std::vector<std::size_t>> assigned(n_clients);
    for (int k = 0; k < C; ++k) {
        const auto& h = holders[std::size_t(k)];
        const auto& pool = pools[std::size_t(k)];
        const std::size_t share = pool.size() / h.size();
        std::size_t p = 0;
        for (std::size_t j = 0; j < h.size(); ++j) {
            std::size_t take = share + (j < pool.size() % h.size() ? 1 : 0);
            for (std::size_t m = 0; m < take; ++m) assigned[h[j]].push_back(pool[p++]);
        }
    }
    std::vector<LabeledDataset> out;
    for (std::size_t i = 0; i < n_clients; ++i) out.push_back(detail::subset(data, assigned[i]));
    return out;
}

struct TestSets {
    LabeledDataset global_balanced;
    std::vector<LabeledDataset> per_client_matched;
};

// Fresh draws (disjoint RNG stream from training): a class-balanced global
// set plus one set per client mirroring its training class histogram.
inline TestSets make_test_sets(const MixtureSpec& spec, std::size_t n_test_per_class,
                               const std::vector<LabeledDataset>& clients) {
    TestSets t;
    t.global_balanced = generate_gaussian_mixture(spec, n_test_per_class, /*draw_tag=*/7001);
    const auto means = mixture_means(spec);
    for (std::size_t i = 0; i < clients.size(); ++i) {
        const auto counts = clients[i].class_counts();
        const std::size_t total = clients[i].size();
        LabeledDataset d;
        d.num_classes = spec.num_classes;
        auto rng = make_engine(child_seed(spec.seed, stream::kTest, i));
        std::normal_distribution<double> n(0.0, 1.0);
        const std::size_t target = std::max<std::size_t>(total, 1);
        for (int k = 0; k < spec.num_classes; ++k) {
            if (total == 0) break;
            const std::size_t nk =
                std::size_t(std::llround(double(counts[std::size_t(k)]) / double(total) * double(target)));
            for (std::size_t m = 0; m < nk; ++m) {
                Sample s;
                s.y = k;
                s.x = means[std::size_t(k)];
                for (double& v : s.x) v += spec.spread * n(rng);
                d.samples.push_back(std::move(s));
            }
        }
        t.per_client_matched.push_back(std::move(d));
    }
    return t;
}

inline void export_csv(const LabeledDataset& d, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("export_csv: cannot open " + path);
    const std::size_t dim = d.samples.empty() ? 0 : d.samples.front().x.size();
    f << "label";
    for (std::size_t i = 0; i < dim; ++i) f << ",f" << i;
    f << "\n";
    char buf[64];
    for (const auto& s : d.samples) {
        f << s.y;
        for (double v : s.x) {
            std::snprintf(buf, sizeof(buf), "%.17g", v);
            f << ',' << buf;
        }
        f << "\n";
    }
}

inline LabeledDataset import_csv(const std::string& path, int num_classes) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("import_csv: cannot open " + path);
    std::string line;
    if (!std::getline(f, line)) throw std::runtime_error("import_csv: empty file " + path);
    LabeledDataset d;
    d.num_classes = num_classes;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string tok;
        Sample s;
        if (!std::getline(ss, tok, ',')) continue;
        s.y = std::stoi(tok);
        while (std::getline(ss, tok, ',')) s.x.push_back(std::stod(tok));
        if (s.y < 0 || s.y >= num_classes) throw std::runtime_error("import_csv: label out of range");
        d.samples.push_back(std::move(s));
    }
    return d;
}

}  // namespace fedmate
