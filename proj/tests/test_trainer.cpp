#include <catch2/catch_amalgamated.hpp>

#include <set>
#include <sstream>

#include "cffa/trainer.hpp"

using namespace cffa;

namespace {

FullConfig tiny_config(std::uint64_t seed = 1) {
    FullConfig cfg;
    cfg.train.seed = seed;
    cfg.train.pretrain_iters = 4;
    cfg.train.adapt_iters = 4;
    cfg.train.psa_start_iter = 0;
    cfg.train.lr_decay_iter = 1000;
    return cfg;
}

Dataset make_set(std::uint64_t base, std::size_t n, const SceneConfig& sc,
                 const ShiftConfig* shift = nullptr) {
    Dataset ds;
    for (std::size_t i = 0; i < n; ++i) {
        Sample s = generate_scene(base + i, sc);
        if (shift) s = apply_shift(s, *shift, base + 1000 + i);
        ds.push_back(std::move(s));
    }
    return ds;
}

std::vector<std::string> split_csv_row(const std::string& row) {
    std::vector<std::string> out;
    std::istringstream is(row);
    std::string cell;
    while (std::getline(is, cell, ',')) out.push_back(cell);
    if (!row.empty() && row.back() == ',') out.push_back("");
    return out;
}

std::vector<std::string> csv_rows(const std::string& text) {
    std::vector<std::string> rows;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line))
        if (!line.empty()) rows.push_back(line);
    return rows;
}

std::string model_bytes(const TrainState& s) {
    return serialize_checkpoint(state_to_checkpoint(s));
}

}  // namespace

TEST_CASE("epoch sampler visits every index once per epoch") {
    EpochSampler es;
    Rng rng(5);
    for (int epoch = 0; epoch < 3; ++epoch) {
        std::set<std::size_t> seen;
        for (int i = 0; i < 7; ++i) seen.insert(es.next(7, rng));
        CHECK(seen.size() == 7);
    }
    // dataset size change forces a fresh shuffle
    CHECK(es.next(3, rng) < 3);
    CHECK_THROWS_AS(es.next(0, rng), std::invalid_argument);
}

TEST_CASE("metrics identity: l_total = l_det + lambda1*l_art + lambda2*l_psa") {
    FullConfig cfg = tiny_config();
    cfg.train.lambda1 = 0.7;
    cfg.train.lambda2 = 0.05;
    SceneConfig sc;
    ShiftConfig shift;
    shift.fog_intensity = 0.4;
    Dataset source = make_set(100, 6, sc);
    Dataset target = make_set(200, 6, sc, &shift);

    TrainState s = make_train_state(cfg);
    std::string metrics;
    pretrain(s, source, &metrics);
    adapt(s, source, target, &metrics);

    auto rows = csv_rows(metrics);
    REQUIRE(rows.size() == 1 + 8);  // header + 4 pretrain + 4 adapt
    CHECK(rows[0] + "\n" == kMetricsHeader);
    for (std::size_t r = 1; r < rows.size(); ++r) {
        auto cells = split_csv_row(rows[r]);
        REQUIRE(cells.size() == 9);
        CHECK(cells[0] == std::to_string(r - 1));
        const double l_det = std::stod(cells[1]);
        const double l_rpn = std::stod(cells[2]);
        const double l_reg = std::stod(cells[3]);
        const double l_cls = std::stod(cells[4]);
        const double l_total = std::stod(cells[7]);
        CHECK(l_det == Catch::Approx(l_rpn + l_reg + l_cls).margin(1e-9));
        if (r <= 4) {
            // pretraining rows: adaptation columns empty, identity trivial
            CHECK(cells[5].empty());
            CHECK(cells[6].empty());
            CHECK(l_total == Catch::Approx(l_det).margin(1e-12));
            CHECK(std::stod(cells[8]) == Catch::Approx(cfg.train.detector_lr));
        } else {
            REQUIRE(!cells[5].empty());
            REQUIRE(!cells[6].empty());
            const double l_art = std::stod(cells[5]);
            const double l_psa = std::stod(cells[6]);
            CHECK(l_total == Catch::Approx(l_det + cfg.train.lambda1 * l_art +
                                           cfg.train.lambda2 * l_psa)
                                 .margin(1e-9));
        }
    }
}

TEST_CASE("lr decays at the configured adaptation iteration") {
    FullConfig cfg = tiny_config();
    cfg.train.lambda1 = 0.0;
    cfg.train.lambda2 = 0.0;
    cfg.train.lr_decay_iter = 2;
    SceneConfig sc;
    Dataset source = make_set(300, 4, sc);
    Dataset target = make_set(400, 4, sc);
    TrainState s = make_train_state(cfg);
    std::string metrics;
    pretrain(s, source, &metrics);
    adapt(s, source, target, &metrics);
    auto rows = csv_rows(metrics);
    REQUIRE(rows.size() == 9);
    for (std::size_t r = 1; r <= 6; ++r)
        CHECK(std::stod(split_csv_row(rows[r])[8]) == Catch::Approx(1e-3));
    for (std::size_t r = 7; r <= 8; ++r)
        CHECK(std::stod(split_csv_row(rows[r])[8]) == Catch::Approx(1e-4));
}

TEST_CASE("disabling both adaptation modules reproduces plain pretraining bit-exactly") {
    SceneConfig sc;
    Dataset source = make_set(500, 6, sc);
    Dataset target = make_set(600, 6, sc);

    FullConfig longer = tiny_config();
    longer.train.pretrain_iters = 8;
    longer.train.adapt_iters = 0;
    longer.train.psa_start_iter = 0;
    TrainState a = make_train_state(longer);
    std::string metrics_a;
    pretrain(a, source, &metrics_a);

    FullConfig split = tiny_config();
    split.train.pretrain_iters = 4;
    split.train.adapt_iters = 4;
    split.train.lambda1 = 0.0;
    split.train.lambda2 = 0.0;
    TrainState b = make_train_state(split);
    std::string metrics_b;
    pretrain(b, source, &metrics_b);
    adapt(b, source, target, &metrics_b);

    CHECK(metrics_a == metrics_b);
    for (std::size_t i = 0; i < a.det_params.size(); ++i)
        CHECK(a.det_params[i].second->data == b.det_params[i].second->data);
    for (std::size_t i = 0; i < a.dc_params.size(); ++i)
        CHECK(a.dc_params[i].second->data == b.dc_params[i].second->data);
}

TEST_CASE("target annotations are never read during adaptation") {
    FullConfig cfg = tiny_config();
    SceneConfig sc;
    ShiftConfig shift;
    shift.fog_intensity = 0.4;
    Dataset source = make_set(700, 6, sc);
    Dataset target = make_set(800, 6, sc, &shift);

    TrainState s = make_train_state(cfg);
    pretrain(s, source, nullptr);
    reset_annotation_reads(target);
    reset_annotation_reads(source);
    adapt(s, source, target, nullptr);
    CHECK(total_annotation_reads(target) == 0);
    CHECK(total_annotation_reads(source) > 0);  // supervision does read source labels
}

TEST_CASE("identical seed and config give byte-identical runs") {
    FullConfig cfg = tiny_config(9);
    SceneConfig sc;
    Dataset source = make_set(900, 5, sc);
    Dataset target = make_set(950, 5, sc);

    std::string m1, m2;
    TrainState s1 = make_train_state(cfg);
    pretrain(s1, source, &m1);
    adapt(s1, source, target, &m1);
    TrainState s2 = make_train_state(cfg);
    pretrain(s2, source, &m2);
    adapt(s2, source, target, &m2);
    CHECK(m1 == m2);
    CHECK(model_bytes(s1) == model_bytes(s2));

    // a different seed diverges
    FullConfig other = tiny_config(10);
    TrainState s3 = make_train_state(other);
    std::string m3;
    pretrain(s3, source, &m3);
    CHECK(m3 != m1);
}

TEST_CASE("checkpoint save/load/save is byte-identical") {
    FullConfig cfg = tiny_config(3);
    SceneConfig sc;
    Dataset source = make_set(1000, 5, sc);
    TrainState s = make_train_state(cfg);
    pretrain(s, source, nullptr);

    const std::string bytes1 = model_bytes(s);
    TrainState back = checkpoint_to_state(deserialize_checkpoint(bytes1));
    const std::string bytes2 = model_bytes(back);
    CHECK(bytes1 == bytes2);
    CHECK(back.iter == s.iter);
    CHECK(back.cfg.train.seed == s.cfg.train.seed);
    CHECK(back.samp_src.perm == s.samp_src.perm);
    CHECK(back.samp_src.pos == s.samp_src.pos);
    CHECK(back.rng_step.state() == s.rng_step.state());
}

TEST_CASE("a full run equals run-to-midpoint, resume, run-to-end bit-exactly") {
    SceneConfig sc;
    ShiftConfig shift;
    shift.fog_intensity = 0.4;
    Dataset source = make_set(1100, 6, sc);
    Dataset target = make_set(1200, 6, sc, &shift);

    // one-shot run: 4 pretrain + 6 adapt
    FullConfig cfg = tiny_config(7);
    cfg.train.adapt_iters = 6;
    cfg.train.psa_start_iter = 2;
    TrainState whole = make_train_state(cfg);
    std::string mw;
    pretrain(whole, source, &mw);
    adapt(whole, source, target, &mw);

    // interrupted run: stop after 3 adapt iterations, round-trip through the
    // checkpoint bytes, then continue to the same horizon
    FullConfig first = cfg;
    first.train.adapt_iters = 3;
    TrainState part = make_train_state(first);
    std::string mp;
    pretrain(part, source, &mp);
    adapt(part, source, target, &mp);
    TrainState resumed = checkpoint_to_state(deserialize_checkpoint(model_bytes(part)));
    resumed.cfg.train.adapt_iters = 6;
    adapt(resumed, source, target, &mp);

    CHECK(mw == mp);
    resumed.cfg.train.adapt_iters = cfg.train.adapt_iters;  // align config snapshots
    CHECK(model_bytes(whole) == model_bytes(resumed));
}

TEST_CASE("adapt refuses an unpretrained state and non-finite losses carry the batch id") {
    FullConfig cfg = tiny_config();
    SceneConfig sc;
    Dataset source = make_set(1300, 4, sc);
    Dataset target = make_set(1400, 4, sc);
    TrainState s = make_train_state(cfg);
    CHECK_THROWS_AS(adapt(s, source, target, nullptr), std::invalid_argument);

    pretrain(s, source, nullptr);
    // poison the model to force a non-finite loss
    for (auto& v : s.model.rpn_delta.b->data) v = std::numeric_limits<double>::quiet_NaN();
    try {
        adapt(s, source, target, nullptr);
        FAIL("expected a non-finite loss error");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("scene_") != std::string::npos);
    }
}
