#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "cffa/eval.hpp"

using namespace cffa;
namespace fs = std::filesystem;

namespace {

using Dets = std::vector<std::vector<Detection>>;
using Gts = std::vector<std::vector<Annotation>>;

// Independent AP computation: same matching contract, O(n^2) envelope.
double ap_oracle(const Dets& dets, const Gts& gts, std::size_t k, double thresh) {
    struct C {
        double score;
        std::size_t img, idx;
    };
    std::vector<C> cands;
    std::size_t n_gt = 0;
    for (std::size_t im = 0; im < dets.size(); ++im) {
        for (std::size_t i = 0; i < dets[im].size(); ++i)
            if (dets[im][i].category == k) cands.push_back({dets[im][i].score, im, i});
        for (const auto& a : gts[im])
            if (a.category == k) ++n_gt;
    }
    if (n_gt == 0) return std::numeric_limits<double>::quiet_NaN();
    std::stable_sort(cands.begin(), cands.end(),
                     [](const C& a, const C& b) { return a.score > b.score; });
    std::vector<std::vector<bool>> used(gts.size());
    for (std::size_t im = 0; im < gts.size(); ++im) used[im].assign(gts[im].size(), false);
    std::vector<bool> tp(cands.size(), false);
    for (std::size_t c = 0; c < cands.size(); ++c) {
        const auto& d = dets[cands[c].img][cands[c].idx];
        double best = -1.0;
        std::size_t bj = 0;
        for (std::size_t j = 0; j < gts[cands[c].img].size(); ++j) {
            const auto& a = gts[cands[c].img][j];
            if (a.category != k || used[cands[c].img][j]) continue;
            if (iou(d.box, a.box) > best) {
                best = iou(d.box, a.box);
                bj = j;
            }
        }
        if (best >= thresh) {
            tp[c] = true;
            used[cands[c].img][bj] = true;
        }
    }
    double ap = 0.0;
    double prev_r = 0.0;
    std::size_t acc = 0;
    for (std::size_t c = 0; c < cands.size(); ++c) {
        if (tp[c]) ++acc;
        const double r = static_cast<double>(acc) / n_gt;
        // envelope: best precision at any cutoff from here on
        double pmax = 0.0;
        std::size_t acc2 = acc;
        for (std::size_t c2 = c; c2 < cands.size(); ++c2) {
            if (c2 > c && tp[c2]) ++acc2;
            pmax = std::max(pmax, static_cast<double>(acc2) / static_cast<double>(c2 + 1));
        }
        ap += (r - prev_r) * pmax;
        prev_r = r;
    }
    return ap;
}

Detection det(double x0, double y0, double x1, double y1, std::size_t k, double score) {
    return {{x0, y0, x1, y1}, k, score};
}

Annotation ann(double x0, double y0, double x1, double y1, std::size_t k) {
    return {{x0, y0, x1, y1}, k};
}

}  // namespace

TEST_CASE("two-detection example: ordering decides AP 1.0 vs 0.5") {
    Gts gts{{ann(0, 0, 10, 10, 0)}};
    // correct box ranked first: precision 1 at recall 1
    Dets good{{det(0, 0, 10, 10, 0, 0.9), det(30, 30, 40, 40, 0, 0.4)}};
    auto r1 = average_precision(good, gts, 0.5, 1);
    CHECK(r1.per_class_ap[0] == Catch::Approx(1.0));
    // false positive ranked first: the hit arrives at precision 1/2
    Dets bad{{det(30, 30, 40, 40, 0, 0.9), det(0, 0, 10, 10, 0, 0.4)}};
    auto r2 = average_precision(bad, gts, 0.5, 1);
    CHECK(r2.per_class_ap[0] == Catch::Approx(0.5));
}

TEST_CASE("mAP bookkeeping: undefined classes, counts, mean over defined") {
    Gts gts{{ann(0, 0, 10, 10, 0)}, {}};
    Dets dets{{det(0, 0, 10, 10, 0, 0.8), det(2, 2, 12, 12, 1, 0.7)}, {}};
    auto r = average_precision(dets, gts, 0.5, 3);
    CHECK(r.per_class_ap[0] == Catch::Approx(1.0));
    CHECK(std::isnan(r.per_class_ap[1]));
    CHECK(std::isnan(r.per_class_ap[2]));
    CHECK(r.gt_counts == std::vector<std::size_t>{1, 0, 0});
    CHECK(r.det_counts == std::vector<std::size_t>{1, 1, 0});
    CHECK(r.map == Catch::Approx(1.0));  // mean over the one defined class
    CHECK_THROWS_AS(average_precision(dets, Gts{{}}, 0.5, 3), std::invalid_argument);
}

TEST_CASE("one GT cannot be matched twice") {
    Gts gts{{ann(0, 0, 10, 10, 0)}};
    Dets dets{{det(0, 0, 10, 10, 0, 0.9), det(0, 0, 10, 10, 0, 0.8)}};
    auto r = average_precision(dets, gts, 0.5, 1);
    // second duplicate is a false positive; AP stays 1.0 under interpolation
    CHECK(r.per_class_ap[0] == Catch::Approx(1.0));
}

TEST_CASE("average_precision equals the brute-force oracle on random instances") {
    Rng rng(61);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n_img = 1 + rng.uniform_int(3), nc = 2;
        Gts gts(n_img);
        Dets dets(n_img);
        for (std::size_t im = 0; im < n_img; ++im) {
            const std::size_t ng = rng.uniform_int(6);  // up to 5 GTs
            for (std::size_t i = 0; i < ng; ++i) {
                const double x0 = rng.uniform(0, 50), y0 = rng.uniform(0, 50);
                gts[im].push_back(ann(x0, y0, x0 + rng.uniform(5, 20), y0 + rng.uniform(5, 20),
                                      rng.uniform_int(nc)));
            }
            const std::size_t nd = rng.uniform_int(9);  // up to 8 detections
            for (std::size_t i = 0; i < nd; ++i) {
                const double x0 = rng.uniform(0, 50), y0 = rng.uniform(0, 50);
                dets[im].push_back(det(x0, y0, x0 + rng.uniform(5, 20), y0 + rng.uniform(5, 20),
                                       rng.uniform_int(nc), rng.uniform()));
            }
        }
        auto rep = average_precision(dets, gts, 0.5, nc);
        for (std::size_t k = 0; k < nc; ++k) {
            const double oracle = ap_oracle(dets, gts, k, 0.5);
            if (std::isnan(oracle)) {
                CHECK(std::isnan(rep.per_class_ap[k]));
            } else {
                CHECK(rep.per_class_ap[k] == Catch::Approx(oracle).margin(1e-12));
            }
        }
    }
}

TEST_CASE("error bins split exactly at IoU 0.5 and 0.3") {
    Gts gts{{ann(0, 0, 10, 10, 0), ann(20, 0, 30, 10, 0), ann(40, 0, 50, 10, 0)}};
    // IoU exactly 0.5 -> correct; exactly 1/3 -> mislocalization; 0 -> background
    Dets dets{{
        det(0, 0, 5, 10, 0, 0.9),    // IoU 50/100 = 0.5
        det(20, 0, 25, 10, 0, 0.8),  // against [20,30]: 50/100 = 0.5 ... adjust below
        det(70, 0, 80, 10, 0, 0.7),  // IoU 0
    }};
    // make the second a genuine mislocalization: IoU = 50/150 = 1/3
    dets[0][1] = det(25, 0, 35, 10, 0, 0.8);
    auto p = error_analysis(dets, gts, 1);
    CHECK(p.per_class_correct[0] == Catch::Approx(100.0 / 3.0));
    CHECK(p.per_class_misloc[0] == Catch::Approx(100.0 / 3.0));
    CHECK(p.per_class_background[0] == Catch::Approx(100.0 / 3.0));
    CHECK(p.correct_pct + p.mislocalization_pct + p.background_pct == Catch::Approx(100.0));

    // boundary 0.3 exactly: counts as mislocalization, not background
    Gts g2{{ann(0, 0, 10, 10, 0)}};
    Dets d2{{det(0, 0, 10, 3, 0, 0.9)}};  // IoU 30/100 = 0.3
    auto p2 = error_analysis(d2, g2, 1);
    CHECK(p2.per_class_misloc[0] == Catch::Approx(100.0));
    CHECK(p2.per_class_background[0] == 0.0);
}

TEST_CASE("error typing keeps only the top K = GT-count detections per class") {
    Gts gts{{ann(0, 0, 10, 10, 0)}};  // K = 1
    Dets dets{{
        det(50, 50, 60, 60, 0, 0.9),  // higher score, background
        det(0, 0, 10, 10, 0, 0.4),    // perfect box but below the cut
    }};
    auto p = error_analysis(dets, gts, 1);
    CHECK(p.per_class_background[0] == Catch::Approx(100.0));
    CHECK(p.per_class_correct[0] == 0.0);
}

TEST_CASE("a class with GTs but no detections counts as all background") {
    Gts gts{{ann(0, 0, 10, 10, 0), ann(0, 0, 10, 10, 1)}};
    Dets dets{{det(0, 0, 10, 10, 0, 0.9)}};
    auto p = error_analysis(dets, gts, 2);
    CHECK(p.per_class_correct[0] == Catch::Approx(100.0));
    CHECK(p.per_class_background[1] == Catch::Approx(100.0));
    CHECK(p.correct_pct == Catch::Approx(50.0));
    CHECK(p.background_pct == Catch::Approx(50.0));
}

TEST_CASE("percentages sum to 100 on random inputs") {
    Rng rng(62);
    for (int trial = 0; trial < 50; ++trial) {
        Gts gts(2);
        Dets dets(2);
        for (std::size_t im = 0; im < 2; ++im) {
            for (std::size_t i = 0; i < 1 + rng.uniform_int(4); ++i) {
                const double x0 = rng.uniform(0, 40), y0 = rng.uniform(0, 40);
                gts[im].push_back(ann(x0, y0, x0 + 10, y0 + 10, rng.uniform_int(2)));
            }
            for (std::size_t i = 0; i < rng.uniform_int(6); ++i) {
                const double x0 = rng.uniform(0, 40), y0 = rng.uniform(0, 40);
                dets[im].push_back(det(x0, y0, x0 + 10, y0 + 10, rng.uniform_int(2), rng.uniform()));
            }
        }
        auto p = error_analysis(dets, gts, 2);
        for (std::size_t k = 0; k < p.per_class_correct.size(); ++k)
            CHECK(p.per_class_correct[k] + p.per_class_misloc[k] + p.per_class_background[k] ==
                  Catch::Approx(100.0));
        CHECK(p.correct_pct + p.mislocalization_pct + p.background_pct == Catch::Approx(100.0));
    }
}

TEST_CASE("proxy A-distance: separable vs identical distributions") {
    Rng rng(63);
    std::vector<std::vector<double>> a, b, c;
    for (int i = 0; i < 60; ++i) {
        a.push_back({rng.normal() + 6.0, rng.normal()});
        b.push_back({rng.normal() - 6.0, rng.normal()});
        c.push_back({rng.normal() + 6.0, rng.normal()});
    }
    auto sep = proxy_a_distance(a, b, 0.8, 1);
    CHECK(sep.epsilon <= 0.05);
    CHECK(sep.d_a >= 1.9);
    CHECK(sep.d_a <= 2.0);

    auto same = proxy_a_distance(a, c, 0.8, 1);
    CHECK(same.d_a == Catch::Approx(1.0).margin(0.15));

    auto hinge = proxy_a_distance(a, b, 0.8, 1, true);
    CHECK(hinge.d_a >= 1.9);

    CHECK_THROWS_AS(proxy_a_distance({{1.0}}, a, 0.8, 1), std::invalid_argument);
    // epsilon is flipped onto [0, 0.5]
    CHECK(sep.epsilon <= 0.5);
    CHECK(same.epsilon <= 0.5);
}

TEST_CASE("proxy A-distance is deterministic in the seed") {
    Rng rng(64);
    std::vector<std::vector<double>> a, b;
    for (int i = 0; i < 40; ++i) {
        a.push_back({rng.normal(), rng.normal() + 1.0});
        b.push_back({rng.normal() + 1.0, rng.normal()});
    }
    auto r1 = proxy_a_distance(a, b, 0.8, 7);
    auto r2 = proxy_a_distance(a, b, 0.8, 7);
    CHECK(r1.d_a == r2.d_a);
    CHECK(r1.epsilon == r2.epsilon);
}

TEST_CASE("pgm export quantizes endpoints and attention values") {
    const std::string path = (fs::temp_directory_path() /
                              ("cffa_att_" + std::to_string(::getpid()) + ".pgm"))
                                 .string();
    write_pgm(path, 1, 4, {0.0, 1.0, 0.8808, 2.5});
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f);
    std::string magic;
    std::size_t w, h, maxval;
    f >> magic >> w >> h >> maxval;
    CHECK(magic == "P5");
    CHECK(w == 4);
    CHECK(h == 1);
    CHECK(maxval == 255);
    f.get();
    unsigned char px[4];
    f.read(reinterpret_cast<char*>(px), 4);
    CHECK(px[0] == 0);
    CHECK(px[1] == 255);
    CHECK(px[2] == 225);  // round(0.8808 * 255)
    CHECK(px[3] == 255);  // clamped
    fs::remove(path);
}

TEST_CASE("attention export writes an image-sized PGM") {
    Rng rng(65);
    DetectorModel m;
    m.init(rng);
    SceneConfig sc;
    Sample s = generate_scene(3, sc);
    const std::string path = (fs::temp_directory_path() /
                              ("cffa_att_full_" + std::to_string(::getpid()) + ".pgm"))
                                 .string();
    export_attention(m, s.to_tensor(), path);
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f);
    std::string magic;
    std::size_t w, h, maxval;
    f >> magic >> w >> h >> maxval;
    CHECK(magic == "P5");
    CHECK(w == 64);
    CHECK(h == 64);
    f.get();
    std::vector<char> raw(w * h);
    f.read(raw.data(), static_cast<std::streamsize>(raw.size()));
    CHECK(f.gcount() == static_cast<std::streamsize>(w * h));
    fs::remove(path);
}

TEST_CASE("csv reports carry the expected rows") {
    EvalReport rep;
    rep.per_class_ap = {0.5, std::numeric_limits<double>::quiet_NaN()};
    rep.gt_counts = {4, 0};
    rep.det_counts = {6, 1};
    rep.map = 0.5;
    rep.gain = 0.25;
    const std::string plain = eval_csv(rep);
    CHECK(plain.find("class,ap,gt_count,det_count\n") == 0);
    CHECK(plain.find("1,undefined,0,1\n") != std::string::npos);
    CHECK(plain.find("mAP,0.5\n") != std::string::npos);
    CHECK(plain.find("gain,") == std::string::npos);
    const std::string with_gain = eval_csv(rep, true);
    CHECK(with_gain.find("gain,0.25\n") != std::string::npos);

    ErrorProfile p;
    p.per_class_correct = {50.0};
    p.per_class_misloc = {25.0};
    p.per_class_background = {25.0};
    p.correct_pct = 50.0;
    p.mislocalization_pct = 25.0;
    p.background_pct = 25.0;
    const std::string ecsv = errors_csv(p);
    CHECK(ecsv.find("class,correct_pct,misloc_pct,background_pct\n") == 0);
    CHECK(ecsv.find("0,50,25,25\n") != std::string::npos);
    CHECK(ecsv.find("mean,50,25,25\n") != std::string::npos);
}
