#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cffa/domains.hpp"

namespace cffa {

/// Full hyperparameter record for one run. Iteration counts are desk-scale;
/// lr_decay_iter and psa_start_iter are measured in adaptation-phase
/// iterations (the global schedule adds pretrain_iters).
struct TrainConfig {
    double lambda1 = 1.0;
    double lambda2 = 0.01;
    std::size_t batch_size = 2;  // even, one image per domain at 2
    std::size_t pretrain_iters = 1500;
    std::size_t adapt_iters = 2100;
    std::size_t psa_start_iter = 1500;  // adapt_iters * 50/70
    double detector_lr = 1e-3;
    double detector_lr_after_decay = 1e-4;
    std::size_t lr_decay_iter = 1500;
    double classifier_lr = 1e-3;
    double grl_coeff = 0.2;
    double pseudo_score_thresh = 0.8;
    std::uint64_t seed = 1;
    std::size_t category_count = 3;
    bool zero_attention = false;  // "3DC" ablation arm: constant unit weights

    void validate() const {
        if (batch_size == 0 || batch_size % 2 != 0)
            throw std::invalid_argument("train.batch_size must be even and positive");
        if (psa_start_iter > adapt_iters)
            throw std::invalid_argument("train.psa_start_iter must be <= train.adapt_iters");
        if (lambda1 < 0 || lambda2 < 0)
            throw std::invalid_argument("train.lambda1/lambda2 must be >= 0");
    }
};

struct DataConfig {
    std::size_t source_count = 200;
    std::size_t target_count = 200;
    std::size_t test_count = 100;
};

struct FullConfig {
    TrainConfig train;
    SceneConfig scene;
    ShiftConfig shift;
    DataConfig data;
};

namespace detail {

struct ConfigEntry {
    std::function<std::string(const FullConfig&)> get;
    std::function<void(FullConfig&, const std::string&)> set;
};

inline std::string fmt_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

template <typename T>
void parse_into(T& field, const std::string& v) {
    std::istringstream is(v);
    is >> field;
    if (is.fail() || !(is >> std::ws).eof()) throw std::invalid_argument("bad value");
}

inline void parse_into(bool& field, const std::string& v) {
    if (v == "true" || v == "1") field = true;
    else if (v == "false" || v == "0") field = false;
    else throw std::invalid_argument("bad value");
}

inline const std::vector<std::pair<std::string, ConfigEntry>>& config_registry() {
    static const std::vector<std::pair<std::string, ConfigEntry>> reg = [] {
        std::vector<std::pair<std::string, ConfigEntry>> r;
        auto add_num = [&r](const std::string& key, auto accessor) {
            r.push_back({key,
                         {[accessor](const FullConfig& c) {
                              auto& f = accessor(const_cast<FullConfig&>(c));
                              if constexpr (std::is_same_v<std::decay_t<decltype(f)>, double>)
                                  return fmt_double(f);
                              else if constexpr (std::is_same_v<std::decay_t<decltype(f)>, bool>)
                                  return std::string(f ? "true" : "false");
                              else
                                  return std::to_string(f);
                          },
                          [accessor](FullConfig& c, const std::string& v) {
                              parse_into(accessor(c), v);
                          }}});
        };
        add_num("train.lambda1", [](FullConfig& c) -> double& { return c.train.lambda1; });
        add_num("train.lambda2", [](FullConfig& c) -> double& { return c.train.lambda2; });
        add_num("train.batch_size", [](FullConfig& c) -> std::size_t& { return c.train.batch_size; });
        add_num("train.pretrain_iters", [](FullConfig& c) -> std::size_t& { return c.train.pretrain_iters; });
        add_num("train.adapt_iters", [](FullConfig& c) -> std::size_t& { return c.train.adapt_iters; });
        add_num("train.psa_start_iter", [](FullConfig& c) -> std::size_t& { return c.train.psa_start_iter; });
        add_num("train.detector_lr", [](FullConfig& c) -> double& { return c.train.detector_lr; });
        add_num("train.detector_lr_after_decay", [](FullConfig& c) -> double& { return c.train.detector_lr_after_decay; });
        add_num("train.lr_decay_iter", [](FullConfig& c) -> std::size_t& { return c.train.lr_decay_iter; });
        add_num("train.classifier_lr", [](FullConfig& c) -> double& { return c.train.classifier_lr; });
        add_num("train.grl_coeff", [](FullConfig& c) -> double& { return c.train.grl_coeff; });
        add_num("train.pseudo_score_thresh", [](FullConfig& c) -> double& { return c.train.pseudo_score_thresh; });
        add_num("train.seed", [](FullConfig& c) -> std::uint64_t& { return c.train.seed; });
        add_num("train.category_count", [](FullConfig& c) -> std::size_t& { return c.train.category_count; });
        add_num("train.zero_attention", [](FullConfig& c) -> bool& { return c.train.zero_attention; });
        add_num("scene.image_size", [](FullConfig& c) -> std::size_t& { return c.scene.image_size; });
        add_num("scene.num_classes", [](FullConfig& c) -> std::size_t& { return c.scene.num_classes; });
        add_num("scene.min_objects", [](FullConfig& c) -> std::size_t& { return c.scene.min_objects; });
        add_num("scene.max_objects", [](FullConfig& c) -> std::size_t& { return c.scene.max_objects; });
        add_num("scene.min_size", [](FullConfig& c) -> double& { return c.scene.min_size; });
        add_num("scene.max_size", [](FullConfig& c) -> double& { return c.scene.max_size; });
        add_num("scene.background_level", [](FullConfig& c) -> double& { return c.scene.background_level; });
        add_num("scene.background_texture", [](FullConfig& c) -> double& { return c.scene.background_texture; });
        add_num("shift.fog_intensity", [](FullConfig& c) -> double& { return c.shift.fog_intensity; });
        add_num("shift.fog_r", [](FullConfig& c) -> double& { return c.shift.fog_color[0]; });
        add_num("shift.fog_g", [](FullConfig& c) -> double& { return c.shift.fog_color[1]; });
        add_num("shift.fog_b", [](FullConfig& c) -> double& { return c.shift.fog_color[2]; });
        add_num("shift.noise_sigma", [](FullConfig& c) -> double& { return c.shift.noise_sigma; });
        add_num("shift.hue_rotation", [](FullConfig& c) -> double& { return c.shift.hue_rotation; });
        add_num("data.source_count", [](FullConfig& c) -> std::size_t& { return c.data.source_count; });
        add_num("data.target_count", [](FullConfig& c) -> std::size_t& { return c.data.target_count; });
        add_num("data.test_count", [](FullConfig& c) -> std::size_t& { return c.data.test_count; });
        return r;
    }();
    return reg;
}

}  // namespace detail

/// Line-oriented `key = value` parser with dotted keys. Unknown keys are
/// rejected; missing keys keep their defaults.
inline FullConfig parse_config_text(std::istream& in, const std::string& origin = "<config>") {
    FullConfig cfg;
    const auto& reg = detail::config_registry();
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            if (b == std::string::npos) return std::string();
            const auto e = s.find_last_not_of(" \t\r");
            return s.substr(b, e - b + 1);
        };
        if (trim(line).empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument(origin + ":" + std::to_string(lineno) +
                                        ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        bool found = false;
        for (const auto& [k, entry] : reg) {
            if (k != key) continue;
            found = true;
            try {
                entry.set(cfg, value);
            } catch (const std::exception&) {
                throw std::invalid_argument(origin + ":" + std::to_string(lineno) +
                                            ": invalid value for " + key);
            }
            break;
        }
        if (!found)
            throw std::invalid_argument(origin + ":" + std::to_string(lineno) + ": unknown key " +
                                        key);
    }
    cfg.train.validate();
    return cfg;
}

inline FullConfig parse_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read config file " + path);
    return parse_config_text(f, path);
}

/// Every key with its resolved value, suitable for resolved.cfg.
inline std::string serialize_config(const FullConfig& cfg) {
    std::string out;
    for (const auto& [k, entry] : detail::config_registry())
        out += k + " = " + entry.get(cfg) + "\n";
    return out;
}

inline void write_resolved_config(const FullConfig& cfg, const std::string& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream f(dir + "/resolved.cfg");
    f << serialize_config(cfg);
}

}  // namespace cffa
