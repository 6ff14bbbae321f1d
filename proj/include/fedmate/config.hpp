#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

namespace fedmate {

enum class Method { FedMate, FedAvgFt, LocalOnly };

inline std::string to_string(Method m) {
    switch (m) {
        case Method::FedMate: return "fedmate";
        case Method::FedAvgFt: return "fedavg_ft";
        case Method::LocalOnly: return "local_only";
    }
    return "?";
}

inline Method parse_method(const std::string& s) {
    if (s == "fedmate") return Method::FedMate;
    if (s == "fedavg_ft") return Method::FedAvgFt;
    if (s == "local_only") return Method::LocalOnly;
    throw std::invalid_argument("unknown method: " + s);
}

struct RunConfig {
    // protocol
    int rounds = 50;
    std::size_t num_clients = 20;
    double participation = 1.0;
    int local_epochs = 5;
    double local_lr = 0.05;
    double server_lr = 0.01;  // prototype fine-tuning
    int finetune_steps = 5;
    double lambda_e = 0.8;
    double lambda_c = 0.6;
    double cft_x = 1.0;
    std::size_t batch_size = 32;
    Method method = Method::FedMate;
    std::uint64_t seed = 0;
    std::string out_dir = "out";
    // architecture
    std::size_t input_dim = 16;
    std::size_t hidden_dim = 64;
    std::size_t feature_dim = 32;
    int num_classes = 10;
    // data
    std::size_t samples_per_class = 50;
    std::size_t test_samples_per_class = 50;
    double cluster_spread = 1.0;
    double mixture_radius = -1.0;  // <0: 4*spread
    std::string partition = "skew";  // skew | pathological
    int skew_s = 30;
    int dominant_classes = 2;
    int classes_per_client = 3;

    void validate() const {
        if (rounds < 0) throw std::invalid_argument("rounds must be >= 0");
        if (num_clients == 0) throw std::invalid_argument("num_clients must be >= 1");
        if (participation <= 0.0 || participation > 1.0)
            throw std::invalid_argument("participation must be in (0,1]");
        if (local_lr <= 0.0 || server_lr <= 0.0) throw std::invalid_argument("learning rates must be > 0");
        if (lambda_e < 0.0 || lambda_c < 0.0) throw std::invalid_argument("lambdas must be >= 0");
        if (partition != "skew" && partition != "pathological")
            throw std::invalid_argument("partition must be skew or pathological");
        if (skew_s < 0 || skew_s > 100) throw std::invalid_argument("skew_s must be in [0,100]");
    }
};

// Flat key=value config files; '#' starts a comment; unknown keys are errors.
inline RunConfig parse_config_text(std::istream& in) {
    RunConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        const auto strip = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            if (b == std::string::npos) return std::string();
            const auto e = s.find_last_not_of(" \t\r");
            return s.substr(b, e - b + 1);
        };
        line = strip(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key=value");
        const std::string key = strip(line.substr(0, eq));
        const std::string val = strip(line.substr(eq + 1));

        if (key == "rounds") cfg.rounds = std::stoi(val);
        else if (key == "num_clients") cfg.num_clients = std::stoul(val);
        else if (key == "participation") cfg.participation = std::stod(val);
        else if (key == "local_epochs") cfg.local_epochs = std::stoi(val);
        else if (key == "local_lr") cfg.local_lr = std::stod(val);
        else if (key == "server_lr") cfg.server_lr = std::stod(val);
        else if (key == "finetune_steps") cfg.finetune_steps = std::stoi(val);
        else if (key == "lambda_e") cfg.lambda_e = std::stod(val);
        else if (key == "lambda_c") cfg.lambda_c = std::stod(val);
        else if (key == "cft_x") cfg.cft_x = std::stod(val);
        else if (key == "batch_size") cfg.batch_size = std::stoul(val);
        else if (key == "method") cfg.method = parse_method(val);
        else if (key == "seed") cfg.seed = std::stoull(val);
        else if (key == "out_dir") cfg.out_dir = val;
        else if (key == "input_dim") cfg.input_dim = std::stoul(val);
        else if (key == "hidden_dim") cfg.hidden_dim = std::stoul(val);
        else if (key == "feature_dim") cfg.feature_dim = std::stoul(val);
        else if (key == "num_classes") cfg.num_classes = std::stoi(val);
        else if (key == "samples_per_class") cfg.samples_per_class = std::stoul(val);
        else if (key == "test_samples_per_class") cfg.test_samples_per_class = std::stoul(val);
        else if (key == "cluster_spread") cfg.cluster_spread = std::stod(val);
        else if (key == "mixture_radius") cfg.mixture_radius = std::stod(val);
        else if (key == "partition") cfg.partition = val;
        else if (key == "skew_s") cfg.skew_s = std::stoi(val);
        else if (key == "dominant_classes") cfg.dominant_classes = std::stoi(val);
        else if (key == "classes_per_client") cfg.classes_per_client = std::stoi(val);
        else throw std::invalid_argument("unknown config key: " + key);
    }
    cfg.validate();
    return cfg;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config file: " + path);
    return parse_config_text(f);
}

}  // namespace fedmate
