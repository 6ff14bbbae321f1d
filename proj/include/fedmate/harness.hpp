#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedmate/client.hpp"
#include "fedmate/config.hpp"
#include "fedmate/data.hpp"
#include "fedmate/io.hpp"
#include "fedmate/server.hpp"

namespace fedmate {

inline constexpr const char* kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// client sampling

inline std::vector<int> select_clients(std::size_t n, double fraction, std::uint64_t seed, int round) {
    if (fraction <= 0.0 || fraction > 1.0) throw std::invalid_argument("select_clients: bad fraction");
    const std::size_t m = std::size_t(std::ceil(fraction * double(n)));
    std::vector<int> ids(n);
    std::iota(ids.begin(), ids.end(), 0);
    auto rng = make_engine(child_seed(seed, stream::kSelect, std::uint64_t(round)));
    std::shuffle(ids.begin(), ids.end(), rng);
    ids.resize(m);
    std::sort(ids.begin(), ids.end());
    return ids;
}

// ---------------------------------------------------------------------------
// ledger and metrics

struct PayloadCounts {
    std::size_t extractor = 0;
    std::size_t classifier = 0;
    std::size_t prototypes = 0;
    std::size_t total() const { return extractor + classifier + prototypes; }
};

struct RoundRecord {
    int round = 0;
    std::vector<int> participants;
    PayloadCounts up;
    PayloadCounts down;
    double mean_loss_pre = 0.0;
    double mean_loss_post = 0.0;
};

struct MetricsRow {
    int round = 0;
    std::string method;
    double mean_balanced_acc = 0.0;
    double mean_matched_acc = 0.0;
    double system_loss = 0.0;
    std::size_t upload_params = 0;
    std::size_t download_params = 0;
};

struct CommSummary {
    PayloadCounts up_total;
    PayloadCounts down_total;
    std::size_t full_model_reference = 0;  // per-round full-model uploads over the same rounds
    double upload_ratio = 0.0;
};

struct RunResult {
    RunConfig cfg;
    std::vector<RoundRecord> ledger;
    std::vector<MetricsRow> metrics;
    std::optional<CftSchedule> schedule;
    std::vector<ModelParams> client_models;
    ModelParams global_model;
    double final_balanced = 0.0;
    double final_matched = 0.0;
    // fedavg_ft only: accuracies before the post-training fine-tune pass
    double pre_ft_balanced = -1.0;
    double pre_ft_matched = -1.0;
    Notices notices;
};

inline CommSummary comm_ledger_totals(const RunResult& r) {
    CommSummary s;
    const std::size_t model_par = param_count(r.global_model);
    for (const auto& rec : r.ledger) {
        s.up_total.extractor += rec.up.extractor;
        s.up_total.classifier += rec.up.classifier;
        s.up_total.prototypes += rec.up.prototypes;
        s.down_total.extractor += rec.down.extractor;
        s.down_total.classifier += rec.down.classifier;
        s.down_total.prototypes += rec.down.prototypes;
        s.full_model_reference += rec.participants.size() * model_par;
    }
    s.upload_ratio = s.full_model_reference == 0
                         ? 0.0
                         : double(s.up_total.total()) / double(s.full_model_reference);
    return s;
}

// ---------------------------------------------------------------------------
// evaluation

inline double accuracy(const ModelParams& model, const LabeledDataset& data) {
    if (data.samples.empty()) return 0.0;
    std::size_t hit = 0;
    for (const auto& s : data.samples) {
        const Vec logits = forward_logits(model.classifier, forward_features(model, s.x));
        const auto arg = std::max_element(logits.begin(), logits.end()) - logits.begin();
        if (int(arg) == s.y) ++hit;
    }
    return double(hit) / double(data.size());
}

// Mean per-client accuracies plus the sample-weighted system loss.
inline MetricsRow evaluate(const std::vector<ModelParams>& models,
                           const std::vector<LabeledDataset>& train,
                           const TestSets& tests) {
    MetricsRow row;
    double total = 0.0;
    for (const auto& d : train) total += double(d.size());
    for (std::size_t i = 0; i < models.size(); ++i) {
        row.mean_balanced_acc += accuracy(models[i], tests.global_balanced);
        row.mean_matched_acc += accuracy(models[i], tests.per_client_matched[i]);
        const double alpha = total > 0.0 ? double(train[i].size()) / total : 0.0;
        row.system_loss += alpha * mean_cross_entropy(models[i], train[i]);
    }
    row.mean_balanced_acc /= double(models.size());
    row.mean_matched_acc /= double(models.size());
    return row;
}

// ---------------------------------------------------------------------------
// simulation environment

struct SimEnv {
    MixtureSpec mixture;
    LabeledDataset train;
    std::vector<LabeledDataset> partitions;
    TestSets tests;
};

inline SimEnv build_env(const RunConfig& cfg) {
    SimEnv env;
    env.mixture.num_classes = cfg.num_classes;
    env.mixture.dim = cfg.input_dim;
    env.mixture.spread = cfg.cluster_spread;
    env.mixture.radius = cfg.mixture_radius;
    env.mixture.seed = child_seed(cfg.seed, stream::kData);
    env.train = generate_gaussian_mixture(env.mixture, cfg.samples_per_class);
    if (cfg.partition == "skew")
        env.partitions = partition_skew(env.train, cfg.num_clients, cfg.skew_s, cfg.seed,
                                        cfg.dominant_classes);
    else
        env.partitions =
            partition_pathological(env.train, cfg.num_clients, cfg.classes_per_client, cfg.seed);
    env.tests = make_test_sets(env.mixture, cfg.test_samples_per_class, env.partitions);
    return env;
}

namespace detail {

inline std::vector<std::size_t> model_dims(const RunConfig& cfg) {
    return {cfg.input_dim, cfg.hidden_dim, cfg.feature_dim};
}

// Plain cross-entropy SGD over the full model, shared by the baselines and
// the fedavg fine-tune pass.
inline void train_plain_ce(ModelParams& model, const LabeledDataset& data, int epochs,
                           std::size_t batch_size, double lr, std::uint64_t seed,
                           std::uint64_t round_tag) {
    auto rng = make_engine(child_seed(seed, stream::kClient, round_tag, 9));
    LossSpec spec;
    spec.kind = LossKind::PlainCE;
    for (int e = 0; e < epochs; ++e) {
        const auto order = epoch_order(data.size(), rng);
        for (std::size_t begin = 0; begin < order.size(); begin += batch_size) {
            const std::size_t end = std::min(begin + batch_size, order.size());
            Gradients g = zeros_like(model);
            const Batch batch = make_batch(data, order, begin, end);
            compute_gradients(model, batch, spec, g);
            sgd_step(model, g, lr, ParamMask::Full);
        }
    }
}

inline MetricsRow eval_row(const std::vector<ModelParams>& models, const SimEnv& env, int round,
                           Method method, std::size_t up, std::size_t down) {
    MetricsRow row = evaluate(models, env.partitions, env.tests);
    row.round = round;
    row.method = to_string(method);
    row.upload_params = up;
    row.download_params = down;
    return row;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// FedMate protocol run

inline RunResult run_fedmate(const RunConfig& cfg, const SimEnv& env) {
    RunResult result;
    result.cfg = cfg;
    const std::size_t C = std::size_t(cfg.num_classes);

    const ModelParams init =
        init_model(detail::model_dims(cfg), C, child_seed(cfg.seed, stream::kInit));
    GlobalState server = make_global_state(init);
    const std::size_t par_theta = param_count(init.extractor);
    const std::size_t par_protos = C * cfg.feature_dim;
    result.schedule = cft_schedule(par_theta, par_protos, cfg.cft_x, cfg.rounds);

    std::vector<ClientState> clients;
    for (std::size_t i = 0; i < cfg.num_clients; ++i) {
        ClientState c;
        c.id = int(i);
        c.model = init;
        c.disc_pr = init_discriminator(C, child_seed(cfg.seed, stream::kDisc, i, 0));
        c.disc_cl = init_discriminator(C, child_seed(cfg.seed, stream::kDisc, i, 1));
        c.train_data = env.partitions[i];
        c.rng_seed = child_seed(cfg.seed, stream::kClient, i);
        clients.push_back(std::move(c));
    }

    auto current_models = [&] {
        std::vector<ModelParams> m;
        for (const auto& c : clients) m.push_back(c.model);
        return m;
    };
    result.metrics.push_back(detail::eval_row(current_models(), env, 0, cfg.method, 0, 0));

    for (int t = 0; t < cfg.rounds; ++t) {
        const Broadcast b = make_broadcast(server);
        const auto selected = select_clients(cfg.num_clients, cfg.participation, cfg.seed, t);

        RoundRecord rec;
        rec.round = t;
        const std::size_t cls_par = param_count(init.classifier);
        for (int id : selected) {
            rec.down.classifier += cls_par;
            if (b.global_prototypes) rec.down.prototypes += param_count(*b.global_prototypes);
            if (b.global_extractor) rec.down.extractor += par_theta;
            (void)id;
        }

        LocalConfig lc;
        lc.epochs = cfg.local_epochs;
        lc.batch_size = cfg.batch_size;
        lc.lr = cfg.local_lr;
        lc.lambda_c = cfg.lambda_c;
        lc.lambda_e = cfg.lambda_e;
        lc.t_max = cfg.rounds;
        lc.upload_extractor = result.schedule->contains(t + 1);

        std::vector<ClientUpdate> updates;
        double loss_pre = 0.0, loss_post = 0.0;
        for (int id : selected) {
            try {
                LocalRoundResult lr = local_round(clients[std::size_t(id)], b, lc, &result.notices);
                loss_pre += lr.train_loss_pre;
                loss_post += lr.train_loss_post;
                rec.up.classifier += cls_par;
                rec.up.prototypes += param_count(lr.update.prototypes);
                if (lr.update.extractor) rec.up.extractor += par_theta;
                rec.participants.push_back(id);
                updates.push_back(std::move(lr.update));
            } catch (const std::exception& e) {
                std::cerr << "client " << id << " failed in round " << t << ": " << e.what()
                          << "\n";
            }
        }
        if (!rec.participants.empty()) {
            rec.mean_loss_pre = loss_pre / double(rec.participants.size());
            rec.mean_loss_post = loss_post / double(rec.participants.size());
        }

        ServerConfig sc;
        sc.finetune_lr = cfg.server_lr;
        sc.finetune_steps = cfg.finetune_steps;
        server_round(server, updates, sc, &result.notices);

        result.ledger.push_back(rec);
        result.metrics.push_back(detail::eval_row(current_models(), env, t + 1, cfg.method,
                                                  rec.up.total(), rec.down.total()));
    }

    result.client_models = current_models();
    result.global_model.extractor = server.extractor;
    result.global_model.classifier = server.classifier;
    result.final_balanced = result.metrics.back().mean_balanced_acc;
    result.final_matched = result.metrics.back().mean_matched_acc;
    return result;
}

// ---------------------------------------------------------------------------
// baselines

// Full-model sample-weighted averaging each round, then a local fine-tune
// pass after the last round.
inline RunResult run_fedavg_ft(const RunConfig& cfg, const SimEnv& env) {
    RunResult result;
    result.cfg = cfg;
    ModelParams global = init_model(detail::model_dims(cfg), std::size_t(cfg.num_classes),
                                    child_seed(cfg.seed, stream::kInit));
    const std::size_t model_par = param_count(global);
    const std::size_t ext_par = param_count(global.extractor);
    const std::size_t cls_par = param_count(global.classifier);

    auto replicate = [&] { return std::vector<ModelParams>(cfg.num_clients, global); };
    result.metrics.push_back(detail::eval_row(replicate(), env, 0, cfg.method, 0, 0));

    for (int t = 0; t < cfg.rounds; ++t) {
        const auto selected = select_clients(cfg.num_clients, cfg.participation, cfg.seed, t);
        RoundRecord rec;
        rec.round = t;
        rec.participants = selected;
        rec.down.extractor = selected.size() * ext_par;
        rec.down.classifier = selected.size() * cls_par;

        std::vector<ModelParams> locals;
        std::vector<std::size_t> counts;
        double loss_pre = 0.0, loss_post = 0.0;
        for (int id : selected) {
            ModelParams m = global;
            const auto& data = env.partitions[std::size_t(id)];
            loss_pre += mean_cross_entropy(m, data);
            detail::train_plain_ce(m, data, cfg.local_epochs, cfg.batch_size, cfg.local_lr,
                                   child_seed(cfg.seed, stream::kClient, std::uint64_t(id)),
                                   std::uint64_t(t));
            loss_post += mean_cross_entropy(m, data);
            rec.up.extractor += ext_par;
            rec.up.classifier += cls_par;
            locals.push_back(std::move(m));
            counts.push_back(data.size());
        }
        rec.mean_loss_pre = loss_pre / double(selected.size());
        rec.mean_loss_post = loss_post / double(selected.size());

        const Vec w = sample_weights(counts);
        ModelParams agg = global;
        for (auto& l : agg.extractor) {
            std::fill(l.w.a.begin(), l.w.a.end(), 0.0);
            std::fill(l.b.begin(), l.b.end(), 0.0);
        }
        std::fill(agg.classifier.w.a.begin(), agg.classifier.w.a.end(), 0.0);
        std::fill(agg.classifier.b.begin(), agg.classifier.b.end(), 0.0);
        for (std::size_t j = 0; j < locals.size(); ++j) {
            for (std::size_t li = 0; li < agg.extractor.size(); ++li) {
                axpy(w[j], locals[j].extractor[li].w.a, agg.extractor[li].w.a);
                axpy(w[j], locals[j].extractor[li].b, agg.extractor[li].b);
            }
            axpy(w[j], locals[j].classifier.w.a, agg.classifier.w.a);
            axpy(w[j], locals[j].classifier.b, agg.classifier.b);
        }
        global = std::move(agg);

        result.ledger.push_back(rec);
        result.metrics.push_back(
            detail::eval_row(replicate(), env, t + 1, cfg.method, rec.up.total(), rec.down.total()));
    }

    result.pre_ft_balanced = result.metrics.back().mean_balanced_acc;
    result.pre_ft_matched = result.metrics.back().mean_matched_acc;

    // post-training personalization pass
    std::vector<ModelParams> personalized;
    for (std::size_t i = 0; i < cfg.num_clients; ++i) {
        ModelParams m = global;
        detail::train_plain_ce(m, env.partitions[i], cfg.local_epochs, cfg.batch_size, cfg.local_lr,
                               child_seed(cfg.seed, stream::kClient, i),
                               std::uint64_t(cfg.rounds) + 1);
        personalized.push_back(std::move(m));
    }
    result.metrics.push_back(
        detail::eval_row(personalized, env, cfg.rounds + 1, cfg.method, 0, 0));
    result.client_models = std::move(personalized);
    result.global_model = global;
    result.final_balanced = result.metrics.back().mean_balanced_acc;
    result.final_matched = result.metrics.back().mean_matched_acc;
    (void)model_par;
    return result;
}

// Isolated local training; zero communication.
inline RunResult run_local_only(const RunConfig& cfg, const SimEnv& env) {
    RunResult result;
    result.cfg = cfg;
    const ModelParams init = init_model(detail::model_dims(cfg), std::size_t(cfg.num_classes),
                                        child_seed(cfg.seed, stream::kInit));
    std::vector<ModelParams> models(cfg.num_clients, init);
    result.metrics.push_back(detail::eval_row(models, env, 0, cfg.method, 0, 0));
    for (int t = 0; t < cfg.rounds; ++t) {
        RoundRecord rec;
        rec.round = t;
        double loss_pre = 0.0, loss_post = 0.0;
        for (std::size_t i = 0; i < cfg.num_clients; ++i) {
            rec.participants.push_back(int(i));
            loss_pre += mean_cross_entropy(models[i], env.partitions[i]);
            detail::train_plain_ce(models[i], env.partitions[i], cfg.local_epochs, cfg.batch_size,
                                   cfg.local_lr, child_seed(cfg.seed, stream::kClient, i),
                                   std::uint64_t(t));
            loss_post += mean_cross_entropy(models[i], env.partitions[i]);
        }
        rec.mean_loss_pre = loss_pre / double(cfg.num_clients);
        rec.mean_loss_post = loss_post / double(cfg.num_clients);
        result.ledger.push_back(rec);
        result.metrics.push_back(detail::eval_row(models, env, t + 1, cfg.method, 0, 0));
    }
    result.client_models = models;
    result.global_model = init;
    result.final_balanced = result.metrics.back().mean_balanced_acc;
    result.final_matched = result.metrics.back().mean_matched_acc;
    return result;
}

inline RunResult run_simulation(const RunConfig& cfg) {
    cfg.validate();
    const SimEnv env = build_env(cfg);
    switch (cfg.method) {
        case Method::FedMate: return run_fedmate(cfg, env);
        case Method::FedAvgFt: return run_fedavg_ft(cfg, env);
        case Method::LocalOnly: return run_local_only(cfg, env);
    }
    throw std::logic_error("run_simulation: unreachable");
}

// ---------------------------------------------------------------------------
// result persistence

inline nlohmann::json config_to_json(const RunConfig& c) {
    return {
        {"rounds", c.rounds},
        {"num_clients", c.num_clients},
        {"participation", c.participation},
        {"local_epochs", c.local_epochs},
        {"local_lr", c.local_lr},
        {"server_lr", c.server_lr},
        {"finetune_steps", c.finetune_steps},
        {"lambda_e", c.lambda_e},
        {"lambda_c", c.lambda_c},
        {"cft_x", c.cft_x},
        {"batch_size", c.batch_size},
        {"method", to_string(c.method)},
        {"seed", c.seed},
        {"out_dir", c.out_dir},
        {"input_dim", c.input_dim},
        {"hidden_dim", c.hidden_dim},
        {"feature_dim", c.feature_dim},
        {"num_classes", c.num_classes},
        {"samples_per_class", c.samples_per_class},
        {"test_samples_per_class", c.test_samples_per_class},
        {"cluster_spread", c.cluster_spread},
        {"mixture_radius", c.mixture_radius},
        {"partition", c.partition},
        {"skew_s", c.skew_s},
        {"dominant_classes", c.dominant_classes},
        {"classes_per_client", c.classes_per_client},
    };
}

inline std::string metrics_csv(const RunResult& r) {
    std::string out =
        "round,method,mean_balanced_acc,mean_matched_acc,system_loss,upload_params,download_params\n";
    for (const auto& m : r.metrics) {
        out += std::to_string(m.round) + "," + m.method + "," + fmt_double(m.mean_balanced_acc) +
               "," + fmt_double(m.mean_matched_acc) + "," + fmt_double(m.system_loss) + "," +
               std::to_string(m.upload_params) + "," + std::to_string(m.download_params) + "\n";
    }
    return out;
}

inline std::string ledger_csv(const RunResult& r) {
    std::string out =
        "round,participants,up_extractor,up_classifier,up_prototypes,down_extractor,"
        "down_classifier,down_prototypes,mean_train_loss_pre,mean_train_loss_post\n";
    for (const auto& rec : r.ledger) {
        std::string ids;
        for (std::size_t i = 0; i < rec.participants.size(); ++i) {
            if (i) ids += ';';
            ids += std::to_string(rec.participants[i]);
        }
        out += std::to_string(rec.round) + "," + ids + "," + std::to_string(rec.up.extractor) +
               "," + std::to_string(rec.up.classifier) + "," + std::to_string(rec.up.prototypes) +
               "," + std::to_string(rec.down.extractor) + "," + std::to_string(rec.down.classifier) +
               "," + std::to_string(rec.down.prototypes) + "," + fmt_double(rec.mean_loss_pre) +
               "," + fmt_double(rec.mean_loss_post) + "\n";
    }
    return out;
}

inline void write_run_outputs(const RunResult& r) {
    namespace fs = std::filesystem;
    const fs::path dir(r.cfg.out_dir);
    fs::create_directories(dir);

    nlohmann::json manifest;
    manifest["version"] = kVersion;
    manifest["seed"] = r.cfg.seed;
    manifest["config"] = config_to_json(r.cfg);
    if (r.schedule) {
        manifest["cft"] = {{"q", r.schedule->q},
                           {"x", r.schedule->x},
                           {"skip_stride", r.schedule->skip_stride}};
    }
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
    std::ofstream(dir / "metrics.csv") << metrics_csv(r);
    std::ofstream(dir / "ledger.csv") << ledger_csv(r);

    save_model(r.global_model, (dir / "global_model.bin").string());
    for (std::size_t i = 0; i < r.client_models.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "client_%03zu.bin", i);
        save_model(r.client_models[i], (dir / name).string());
    }
}

}  // namespace fedmate
