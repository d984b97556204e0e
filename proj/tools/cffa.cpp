// Command-line driver: dataset generation, training, adaptation, evaluation.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "cffa/cffa.hpp"

namespace fs = std::filesystem;
using namespace cffa;

namespace {

FullConfig load_config(const std::string& path, std::optional<std::uint64_t> seed) {
    FullConfig cfg = path.empty() ? FullConfig{} : parse_config(path);
    if (seed) cfg.train.seed = *seed;
    cfg.scene.num_classes = cfg.train.category_count;
    return cfg;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << text;
}

Dataset generate_domain(const FullConfig& cfg, std::uint64_t seed_base, std::size_t count,
                        bool shifted) {
    Dataset ds;
    for (std::size_t i = 0; i < count; ++i) {
        Sample s = generate_scene(seed_base + i, cfg.scene);
        if (shifted) s = apply_shift(s, cfg.shift, seed_base + i + 0x5A5A5A5AULL);
        ds.push_back(std::move(s));
    }
    return ds;
}

int cmd_generate(const FullConfig& cfg, const std::string& out) {
    const std::uint64_t base = cfg.train.seed * 1000003ULL;
    write_dataset(generate_domain(cfg, base, cfg.data.source_count, false), out + "/source");
    write_dataset(generate_domain(cfg, base + 100000, cfg.data.target_count, true),
                  out + "/target");
    write_dataset(generate_domain(cfg, base + 200000, cfg.data.test_count, true), out + "/test");
    write_resolved_config(cfg, out);
    std::cout << "generated " << cfg.data.source_count << " source, " << cfg.data.target_count
              << " target, " << cfg.data.test_count << " test samples in " << out << "\n";
    return 0;
}

int cmd_pretrain(const FullConfig& cfg, const std::string& data, const std::string& out,
                 const std::string& resume_ckpt) {
    Dataset source = read_dataset(data + "/source");
    TrainState st = resume_ckpt.empty() ? make_train_state(cfg) : load_state(resume_ckpt);
    if (!resume_ckpt.empty()) st.cfg = cfg;
    fs::create_directories(out);
    std::string metrics;
    pretrain(st, source, &metrics);
    save_state(st, out + "/pretrain.ckpt");
    write_text(out + "/metrics.csv", metrics);
    write_resolved_config(st.cfg, out);
    std::cout << "pretrained to iteration " << st.iter << ", checkpoint " << out
              << "/pretrain.ckpt\n";
    return 0;
}

int cmd_adapt(const FullConfig& cfg, bool cfg_given, const std::string& data,
              const std::string& ckpt, const std::string& out) {
    Dataset source = read_dataset(data + "/source");
    Dataset target = read_dataset(data + "/target");
    TrainState st = load_state(ckpt);
    if (cfg_given) st.cfg = cfg;
    fs::create_directories(out);
    std::string metrics;
    adapt(st, source, target, &metrics);
    save_state(st, out + "/adapted.ckpt");
    write_text(out + "/metrics.csv", metrics);
    write_resolved_config(st.cfg, out);
    std::cout << "adapted to iteration " << st.iter << ", checkpoint " << out << "/adapted.ckpt\n";
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& baseline, const std::string& data,
             const std::string& out) {
    Dataset test = read_dataset(data + "/test");
    TrainState st = load_state(ckpt);
    EvalReport rep = evaluate_map(st.model, test);
    bool with_gain = false;
    if (!baseline.empty()) {
        TrainState base = load_state(baseline);
        EvalReport brep = evaluate_map(base.model, test);
        rep.gain = rep.map - brep.map;
        with_gain = true;
    }
    fs::create_directories(out);
    write_text(out + "/eval.csv", eval_csv(rep, with_gain));
    std::cout << "mAP@0.5 = " << rep.map;
    if (with_gain) std::cout << " (gain " << rep.gain << ")";
    std::cout << ", report " << out << "/eval.csv\n";
    return 0;
}

int cmd_adistance(const std::string& ckpt, const std::string& data, const std::string& out,
                  bool hinge) {
    TrainState st = load_state(ckpt);
    Dataset source = read_dataset(data + "/source");
    Dataset target = read_dataset(data + "/target");
    auto src_feats = gt_foreground_features(st.model, source);
    auto tgt_feats = gt_foreground_features(st.model, target);
    std::ostringstream os;
    os.precision(17);
    os << "class,d_a,epsilon\n";
    std::vector<std::vector<double>> src_all, tgt_all;
    for (std::size_t k = 0; k < src_feats.size(); ++k) {
        src_all.insert(src_all.end(), src_feats[k].begin(), src_feats[k].end());
        tgt_all.insert(tgt_all.end(), tgt_feats[k].begin(), tgt_feats[k].end());
        if (src_feats[k].size() < 20 || tgt_feats[k].size() < 20) {
            os << k << ",undefined,undefined\n";
            continue;
        }
        auto r = proxy_a_distance(src_feats[k], tgt_feats[k], 0.8, st.cfg.train.seed, hinge);
        os << k << "," << r.d_a << "," << r.epsilon << "\n";
    }
    if (src_all.size() < 20 || tgt_all.size() < 20) {
        os << "pooled,undefined,undefined\n";
        std::cout << "pooled d_A undefined (too few foreground regions)";
    } else {
        auto pooled = proxy_a_distance(src_all, tgt_all, 0.8, st.cfg.train.seed, hinge);
        os << "pooled," << pooled.d_a << "," << pooled.epsilon << "\n";
        std::cout << "pooled d_A = " << pooled.d_a;
    }
    fs::create_directories(out);
    write_text(out + "/adistance.csv", os.str());
    std::cout << ", report " << out << "/adistance.csv\n";
    return 0;
}

int cmd_errors(const std::string& ckpt, const std::string& data, const std::string& out) {
    TrainState st = load_state(ckpt);
    Dataset test = read_dataset(data + "/test");
    auto [dets, gts] = run_detector(st.model, test);
    ErrorProfile prof = error_analysis(dets, gts, st.model.cfg.num_classes);
    fs::create_directories(out);
    write_text(out + "/errors.csv", errors_csv(prof));
    std::cout << "correct " << prof.correct_pct << "%, misloc " << prof.mislocalization_pct
              << "%, background " << prof.background_pct << "%, report " << out
              << "/errors.csv\n";
    return 0;
}

int cmd_attention(const std::string& ckpt, const std::string& image, const std::string& out) {
    TrainState st = load_state(ckpt);
    Sample s = read_ppm(image);
    export_attention(st.model, s.to_tensor(), out);
    std::cout << "attention map written to " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cffa: coarse-to-fine cross-domain detection at desk scale"};
    app.require_subcommand(1);

    std::string config_path, out = "run", data = "data";
    std::string ckpt, baseline, image;
    std::optional<std::uint64_t> seed;
    bool hinge = false;

    app.add_option("--config", config_path, "config file (key = value lines)");
    app.add_option("--seed", seed, "override train.seed");
    app.add_option("--out", out, "output directory");

    auto* gen = app.add_subcommand("generate", "build source/target/test datasets");
    auto* pre = app.add_subcommand("pretrain", "supervised pretraining on the source domain");
    pre->add_option("--data", data, "dataset directory (from generate)");
    pre->add_option("--checkpoint", ckpt, "resume from a checkpoint");
    auto* ada = app.add_subcommand("adapt", "coarse-to-fine adaptation");
    ada->add_option("--data", data, "dataset directory");
    ada->add_option("--checkpoint", ckpt, "pretrained (or mid-adapt) checkpoint")->required();
    auto* ev = app.add_subcommand("eval", "mAP@0.5 on the target test set");
    ev->add_option("--data", data, "dataset directory");
    ev->add_option("--checkpoint", ckpt, "checkpoint to evaluate")->required();
    ev->add_option("--baseline", baseline, "baseline checkpoint for the gain row");
    auto* ad = app.add_subcommand("adistance", "proxy A-distance on GT foreground features");
    ad->add_option("--data", data, "dataset directory");
    ad->add_option("--checkpoint", ckpt, "checkpoint to probe")->required();
    ad->add_flag("--hinge", hinge, "use a hinge-loss probe instead of logistic");
    auto* er = app.add_subcommand("errors", "top-K error typing on the target test set");
    er->add_option("--data", data, "dataset directory");
    er->add_option("--checkpoint", ckpt, "checkpoint to analyze")->required();
    auto* at = app.add_subcommand("attention", "export the attention map of one image as PGM");
    at->add_option("--checkpoint", ckpt, "checkpoint to use")->required();
    at->add_option("--image", image, "input PPM image")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        const FullConfig cfg = load_config(config_path, seed);
        if (gen->parsed()) return cmd_generate(cfg, out);
        if (pre->parsed()) return cmd_pretrain(cfg, data, out, ckpt);
        if (ada->parsed()) return cmd_adapt(cfg, !config_path.empty(), data, ckpt, out);
        if (ev->parsed()) return cmd_eval(ckpt, baseline, data, out);
        if (ad->parsed()) return cmd_adistance(ckpt, data, out, hinge);
        if (er->parsed()) return cmd_errors(ckpt, data, out);
        if (at->parsed()) return cmd_attention(ckpt, image, out);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
