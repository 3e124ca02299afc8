#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "semcorr/errors.hpp"
#include "semcorr/losses.hpp"

namespace semcorr {

// One knob set shared by every subcommand; file and flag layers override these
// defaults field by field.
struct RunConfig {
    std::vector<std::size_t> layers{0};
    double t = 0.0007;   // affinity temperature
    double tau = 0.07;   // InfoNCE temperature
    double eps = 0.05;   // entropic transport regularizer
    double lambda_p = 0.0005;
    double lambda_q = 1.0;
    double lambda_r = 0.001;
    double m = 0.999;    // key-encoder momentum
    bool ot = true;
    bool rhm = true;
    bool entropy = true;
    bool attention = false;    // attention-weighted transport marginals
    bool ot_affinity = false;  // run transport on affinity rows instead of raw correlation
    std::uint64_t seed = 0;
    std::size_t threads = 0;  // 0 means all logical cores

    LossWeights loss_weights() const {
        LossWeights w;
        w.lambda_p = lambda_p;
        w.lambda_q = lambda_q;
        w.lambda_r = entropy ? lambda_r : 0.0;
        w.tau = tau;
        w.t = t;
        w.m = m;
        return w;
    }

    void validate() const {
        if (layers.empty()) throw validation_error("layer list cannot be empty");
        if (!(eps > 0)) throw validation_error("transport eps must be > 0");
        loss_weights().validate();
    }
};

namespace detail {

inline double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw validation_error("config key '" + key + "': '" + v + "' is not a number");
    }
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        unsigned long long u = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return u;
    } catch (const std::exception&) {
        throw validation_error("config key '" + key + "': '" + v +
                               "' is not an unsigned integer");
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
    if (v == "0" || v == "false" || v == "off" || v == "no") return false;
    throw validation_error("config key '" + key + "': '" + v + "' is not a boolean");
}

inline std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace detail

inline std::vector<std::size_t> parse_layer_list(const std::string& csv) {
    std::vector<std::size_t> out;
    std::size_t pos = 0;
    while (pos <= csv.size()) {
        std::size_t comma = csv.find(',', pos);
        std::string item = detail::trim(
            csv.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos));
        if (item.empty()) throw validation_error("layer list has an empty entry: '" + csv + "'");
        out.push_back(std::size_t(detail::parse_u64("layers", item)));
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    if (out.empty()) throw validation_error("layer list cannot be empty");
    return out;
}

inline std::vector<double> parse_alpha_list(const std::string& csv) {
    std::vector<double> out;
    std::size_t pos = 0;
    while (pos <= csv.size()) {
        std::size_t comma = csv.find(',', pos);
        std::string item = detail::trim(
            csv.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos));
        if (item.empty()) throw validation_error("alpha list has an empty entry: '" + csv + "'");
        out.push_back(detail::parse_double("alpha", item));
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return out;
}

// Flat key=value lines; '#' starts a comment, blank lines are skipped.
inline std::map<std::string, std::string> read_kv_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open config " + path.string());
    std::map<std::string, std::string> kv;
    std::string line;
    std::size_t offset = 0, line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::string body = line.substr(0, line.find('#'));
        std::string t = detail::trim(body);
        if (!t.empty()) {
            std::size_t eq = t.find('=');
            if (eq == std::string::npos || eq == 0)
                throw parse_error(offset, "config line " + std::to_string(line_no) +
                                              " is not key=value: '" + detail::trim(line) + "'");
            kv[detail::trim(t.substr(0, eq))] = detail::trim(t.substr(eq + 1));
        }
        offset += line.size() + 1;
    }
    return kv;
}

inline void apply_config_kv(RunConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "layers") cfg.layers = parse_layer_list(value);
    else if (key == "t") cfg.t = detail::parse_double(key, value);
    else if (key == "tau") cfg.tau = detail::parse_double(key, value);
    else if (key == "eps") cfg.eps = detail::parse_double(key, value);
    else if (key == "lambda_p") cfg.lambda_p = detail::parse_double(key, value);
    else if (key == "lambda_q") cfg.lambda_q = detail::parse_double(key, value);
    else if (key == "lambda_r") cfg.lambda_r = detail::parse_double(key, value);
    else if (key == "m") cfg.m = detail::parse_double(key, value);
    else if (key == "ot") cfg.ot = detail::parse_bool(key, value);
    else if (key == "rhm") cfg.rhm = detail::parse_bool(key, value);
    else if (key == "entropy") cfg.entropy = detail::parse_bool(key, value);
    else if (key == "attention") cfg.attention = detail::parse_bool(key, value);
    else if (key == "ot_affinity") cfg.ot_affinity = detail::parse_bool(key, value);
    else if (key == "seed") cfg.seed = detail::parse_u64(key, value);
    else if (key == "threads") cfg.threads = std::size_t(detail::parse_u64(key, value));
    else throw validation_error("unknown config key '" + key + "'");
}

inline void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
    for (const auto& [key, value] : read_kv_file(path)) apply_config_kv(cfg, key, value);
}

// Worker count: explicit request, else logical cores; THREADS env caps both.
inline std::size_t resolve_threads(std::size_t requested) {
    std::size_t n = requested != 0 ? requested
                                   : std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("THREADS")) {
        std::uint64_t cap = detail::parse_u64("THREADS", env);
        if (cap == 0) throw validation_error("THREADS must be a positive integer");
        n = std::min<std::size_t>(n, cap);
    }
    return n;
}

}  // namespace semcorr
