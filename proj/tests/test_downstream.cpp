#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include "loft/diffusion.hpp"
#include "loft/downstream.hpp"
#include "loft/io.hpp"
#include "loft/nn.hpp"

using namespace loft;
namespace fs = std::filesystem;

namespace {

// ============================================================================
// Fixtures
// ============================================================================

// Linearly separable 2x2 toy images: pixel `label` is bright, the rest are
// dim.  Any competent classifier reaches 100% on held-out draws.
data::Dataset toy_dataset(int per_class, int n_classes, uint64_t seed, uint64_t id_base) {
    data::Dataset ds;
    ds.H = 2;
    ds.W = 2;
    RngStream st(RngKey::root(seed).child("toy"));
    uint64_t id = id_base;
    for (int c = 0; c < n_classes; ++c) {
        for (int i = 0; i < per_class; ++i) {
            std::vector<float> px(4);
            for (auto& v : px) v = static_cast<float>(0.1 * st.uniform());
            px[static_cast<size_t>(c)] = static_cast<float>(0.8 + 0.2 * st.uniform());
            ds.items.push_back({id++, static_cast<uint32_t>(c), std::move(px)});
        }
    }
    ds.validate();
    return ds;
}

cls::ClassifierConfig toy_config() {
    cls::ClassifierConfig cfg;
    cfg.input_dim = 4;
    cfg.hidden = 16;
    cfg.n_classes = 3;
    cfg.epochs = 30;
    cfg.batch_size = 16;
    return cfg;
}

// All-zero classifier with one logit bias raised, so every input maps to a
// known class and evaluation arithmetic can be checked by hand.
cls::TrainedClassifier constant_classifier(int winner) {
    cls::TrainedClassifier c;
    c.cfg.input_dim = 4;
    c.cfg.hidden = 8;
    c.cfg.n_classes = 3;
    const auto lay = c.cfg.spec().layout();
    c.params.assign(lay.total, 0.0f);
    if (winner >= 0) {
        const auto& seg = lay.find("b2");
        c.params[seg.offset + static_cast<size_t>(winner)] = 1.0f;
    }
    return c;
}

fs::path tmp_path(const char* name) {
    return fs::temp_directory_path() / name;
}

std::string read_text_file(const fs::path& p) {
    const auto bytes = io::read_file(p);
    return std::string(bytes.begin(), bytes.end());
}

}  // namespace

// ============================================================================
// Training
// ============================================================================

TEST_CASE("downstream: training separates a toy dataset") {
    const auto train = toy_dataset(30, 3, 11, 1000);
    const auto test = toy_dataset(20, 3, 12, 5000);
    std::vector<double> trace;
    const auto c = cls::train_classifier(train, toy_config(), RngKey::root(21), &trace);

    // One trace entry per optimizer step: epochs * ceil(n / batch).
    CHECK(trace.size() == 30u * 6u);

    // Cross-entropy collapses from ~ln(3) to near zero on separable data.
    double head = 0.0;
    double tail = 0.0;
    for (int i = 0; i < 20; ++i) {
        head += trace[static_cast<size_t>(i)];
        tail += trace[trace.size() - 1 - static_cast<size_t>(i)];
    }
    CHECK(tail < 0.2 * head);

    const auto rep = cls::evaluate(c, test);
    CHECK(rep.accuracy == 1.0);
    for (double v : rep.per_class) CHECK(v == 1.0);
}

TEST_CASE("downstream: zero-epoch training returns the initializer") {
    const auto train = toy_dataset(10, 3, 31, 1000);
    auto cfg = toy_config();
    cfg.epochs = 0;
    const auto a = cls::train_classifier(train, cfg, RngKey::root(7));
    const auto b = cls::train_classifier(train, cfg, RngKey::root(7));
    REQUIRE(a.params.size() == b.params.size());
    CHECK(std::memcmp(a.params.data(), b.params.data(), a.params.size() * sizeof(float)) == 0);

    // Biases start at zero; weights are random.
    const auto lay = cfg.spec().layout();
    for (const char* name : {"b0", "b1", "b2"}) {
        const auto& seg = lay.find(name);
        for (size_t i = 0; i < seg.size; ++i) CHECK(a.params[seg.offset + i] == 0.0f);
    }
    double wsum = 0.0;
    for (float v : a.params) wsum += std::fabs(v);
    CHECK(wsum > 0.0);

    // An untrained classifier scores near chance on the toy problem.
    const auto rep = cls::evaluate(a, toy_dataset(50, 3, 32, 5000));
    CHECK(rep.accuracy <= 0.7);

    // One epoch of updates moves the parameters.
    cfg.epochs = 1;
    const auto t = cls::train_classifier(train, cfg, RngKey::root(7));
    CHECK(std::memcmp(a.params.data(), t.params.data(), a.params.size() * sizeof(float)) != 0);
}

TEST_CASE("downstream: training is deterministic per key") {
    const auto train = toy_dataset(12, 3, 41, 1000);
    auto cfg = toy_config();
    cfg.epochs = 3;
    const auto a = cls::train_classifier(train, cfg, RngKey::root(101));
    const auto b = cls::train_classifier(train, cfg, RngKey::root(101));
    const auto c = cls::train_classifier(train, cfg, RngKey::root(102));
    CHECK(std::memcmp(a.params.data(), b.params.data(), a.params.size() * sizeof(float)) == 0);
    CHECK(std::memcmp(a.params.data(), c.params.data(), a.params.size() * sizeof(float)) != 0);
}

TEST_CASE("downstream: training rejects malformed inputs") {
    const auto train = toy_dataset(5, 3, 51, 1000);
    const auto cfg = toy_config();

    data::Dataset empty;
    empty.H = 2;
    empty.W = 2;
    CHECK_THROWS_WITH_AS(cls::train_classifier(empty, cfg, RngKey::root(1)),
                         "classifier dataset is empty", ConfigError);

    auto wide = toy_dataset(5, 3, 52, 1000);
    wide.H = 3;
    wide.W = 3;
    for (auto& it : wide.items) it.pixels.resize(9, 0.0f);
    CHECK_THROWS_AS(cls::train_classifier(wide, cfg, RngKey::root(1)), ShapeError);

    auto bad_label = train;
    bad_label.items[0].label = 7;
    CHECK_THROWS_WITH_AS(cls::train_classifier(bad_label, cfg, RngKey::root(1)),
                         "label 7 out of range [0,3)", ShapeError);

    auto bad_epochs = cfg;
    bad_epochs.epochs = -1;
    CHECK_THROWS_WITH_AS(cls::train_classifier(train, bad_epochs, RngKey::root(1)),
                         "bad epoch/batch configuration", ConfigError);

    auto bad_batch = cfg;
    bad_batch.batch_size = 0;
    CHECK_THROWS_WITH_AS(cls::train_classifier(train, bad_batch, RngKey::root(1)),
                         "bad epoch/batch configuration", ConfigError);

    cls::ClassifierConfig bad_dims;
    bad_dims.input_dim = 4;
    bad_dims.hidden = 8;
    bad_dims.n_classes = 1;
    CHECK_THROWS_WITH_AS(cls::train_classifier(train, bad_dims, RngKey::root(1)),
                         "classifier dimensions must be positive (and >= 2 classes)", ConfigError);
}

// ============================================================================
// Prediction and evaluation
// ============================================================================

TEST_CASE("downstream: evaluation splits accuracy by class") {
    const auto c = constant_classifier(2);
    const auto test = toy_dataset(10, 3, 61, 1000);

    const auto preds = cls::predict(c, test);
    for (int p : preds) CHECK(p == 2);

    const auto rep = cls::evaluate(c, test);
    CHECK(rep.accuracy == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    REQUIRE(rep.per_class.size() == 3u);
    CHECK(rep.per_class[0] == 0.0);
    CHECK(rep.per_class[1] == 0.0);
    CHECK(rep.per_class[2] == 1.0);
    for (int n : rep.per_class_count) CHECK(n == 10);

    // The bitmap is consistent with the aggregate numbers.
    REQUIRE(rep.correct.size() == test.items.size());
    int hits = 0;
    for (size_t i = 0; i < rep.correct.size(); ++i) {
        CHECK(rep.correct[i] == (test.items[i].label == 2 ? 1 : 0));
        hits += rep.correct[i];
    }
    CHECK(rep.accuracy == static_cast<double>(hits) / static_cast<double>(test.items.size()));
}

TEST_CASE("downstream: argmax ties resolve to the lowest class index") {
    const auto c = constant_classifier(-1);  // all logits identically zero
    const auto test = toy_dataset(4, 3, 71, 1000);
    for (int p : cls::predict(c, test)) CHECK(p == 0);
    const auto rep = cls::evaluate(c, test);
    CHECK(rep.per_class[0] == 1.0);
    CHECK(rep.per_class[1] == 0.0);
    CHECK(rep.per_class[2] == 0.0);
}

TEST_CASE("downstream: evaluation rejects malformed inputs") {
    const auto c = constant_classifier(0);

    data::Dataset empty;
    empty.H = 2;
    empty.W = 2;
    CHECK_THROWS_WITH_AS(cls::evaluate(c, empty), "evaluation set is empty", ConfigError);

    auto bad_label = toy_dataset(2, 3, 81, 1000);
    bad_label.items[1].label = 3;
    CHECK_THROWS_WITH_AS(cls::evaluate(c, bad_label), "test label out of range", ShapeError);

    auto wide = toy_dataset(2, 3, 82, 1000);
    wide.H = 3;
    wide.W = 3;
    for (auto& it : wide.items) it.pixels.resize(9, 0.0f);
    CHECK_THROWS_WITH_AS(
        cls::predict(c, wide),
        doctest::Contains("pixels, classifier expects 4"), ShapeError);
}

// ============================================================================
// Oracle gate
// ============================================================================

TEST_CASE("downstream: oracle training gates on class counts and accuracy") {
    auto cfg = toy_config();
    const auto test = toy_dataset(40, 3, 92, 5000);

    // Thin training data is rejected up front.
    const auto thin = toy_dataset(10, 3, 91, 1000);
    CHECK_THROWS_WITH_AS(cls::train_oracle(thin, test, cfg, RngKey::root(1)),
                         doctest::Contains("oracle training needs >= 500 images per class"),
                         ConfigError);

    const auto train = toy_dataset(500, 3, 93, 10000);

    // An untrained oracle cannot clear the accuracy bar.
    auto zero = cfg;
    zero.epochs = 0;
    CHECK_THROWS_WITH_AS(cls::train_oracle(train, test, zero, RngKey::root(2), 0.9),
                         doctest::Contains("below the required 0.9"), ConfigError);

    // The trained oracle clears the default 0.95 gate on separable data.
    cfg.epochs = 8;
    const auto oracle = cls::train_oracle(train, test, cfg, RngKey::root(3));
    CHECK(cls::evaluate(oracle, test).accuracy >= 0.95);
}

// ============================================================================
// Feature extraction
// ============================================================================

TEST_CASE("downstream: features come from the penultimate layer") {
    const auto train = toy_dataset(20, 3, 101, 1000);
    const auto c = cls::train_classifier(train, toy_config(), RngKey::root(5));

    auto probe = toy_dataset(3, 3, 102, 5000);
    probe.items[2].pixels = probe.items[0].pixels;  // duplicate image, distinct id
    const auto feats = cls::extract_features(c, probe);
    REQUIRE(feats.shape == std::vector<int>({9, 16}));

    // Identical pixels produce identical rows; the map is not degenerate.
    CHECK(std::memcmp(feats.data.data(), feats.data.data() + 2 * 16, 16 * sizeof(float)) == 0);
    double sum = 0.0;
    for (float v : feats.data) sum += std::fabs(v);
    CHECK(sum > 0.0);

    // A single-item dataset yields the same row as the batch.
    data::Dataset one;
    one.H = 2;
    one.W = 2;
    one.items.push_back(probe.items[1]);
    const auto row = cls::extract_features(c, one);
    REQUIRE(row.shape == std::vector<int>({1, 16}));
    CHECK(std::memcmp(row.data.data(), feats.data.data() + 16, 16 * sizeof(float)) == 0);

    auto wide = toy_dataset(2, 3, 103, 1000);
    wide.H = 3;
    wide.W = 3;
    for (auto& it : wide.items) it.pixels.resize(9, 0.0f);
    CHECK_THROWS_AS(cls::extract_features(c, wide), ShapeError);
}

// ============================================================================
// Checkpoints
// ============================================================================

TEST_CASE("downstream: classifier checkpoints round-trip") {
    const auto train = toy_dataset(10, 3, 111, 1000);
    auto cfg = toy_config();
    cfg.epochs = 2;
    const auto c = cls::train_classifier(train, cfg, RngKey::root(9));

    const auto path = tmp_path("cls_roundtrip.lftm");
    cls::save_classifier(path, c);
    const auto back = cls::load_classifier(path);
    CHECK(back.cfg.input_dim == c.cfg.input_dim);
    CHECK(back.cfg.hidden == c.cfg.hidden);
    CHECK(back.cfg.n_classes == c.cfg.n_classes);
    REQUIRE(back.params.size() == c.params.size());
    CHECK(std::memcmp(back.params.data(), c.params.data(), c.params.size() * sizeof(float)) == 0);

    // Saving the loaded copy reproduces the file byte for byte.
    const auto bytes = io::read_file(path);
    const auto path2 = tmp_path("cls_roundtrip2.lftm");
    cls::save_classifier(path2, back);
    CHECK(io::read_file(path2) == bytes);
    fs::remove(path);
    fs::remove(path2);
}

TEST_CASE("downstream: classifier loading rejects malformed checkpoints") {
    const auto path = tmp_path("cls_malformed.lftm");
    const std::vector<float> params(10, 0.5f);

    diff::save_checkpoint(path, R"({"kind":"denoiser"})", params);
    CHECK_THROWS_WITH_AS(cls::load_classifier(path),
                         doctest::Contains("not a classifier checkpoint"), FormatError);

    diff::save_checkpoint(path, R"({"kind":"classifier"})", params);
    CHECK_THROWS_WITH_AS(cls::load_classifier(path),
                         doctest::Contains("bad classifier descriptor"), FormatError);

    diff::save_checkpoint(path,
                          R"({"kind":"classifier","input_dim":4,"hidden":8,"n_classes":3})",
                          params);
    CHECK_THROWS_WITH_AS(cls::load_classifier(path),
                         doctest::Contains("parameter payload does not match architecture"),
                         FormatError);
    fs::remove(path);

    CHECK_THROWS_AS(cls::load_classifier(tmp_path("cls_absent.lftm")), ArtifactNotFound);
}

// ============================================================================
// Reports
// ============================================================================

TEST_CASE("downstream: evaluation reports export as CSV") {
    const auto c = constant_classifier(2);
    const auto rep = cls::evaluate(c, toy_dataset(10, 3, 121, 1000));

    const auto path = tmp_path("cls_report.csv");
    cls::write_eval_report(path, "toy", 7, rep);
    CHECK(read_text_file(path) ==
          "dataset,seed,accuracy,class0,class1,class2\n"
          "toy,7,0.333333333,0,0,1\n");

    // Re-export is byte-stable.
    const auto bytes = io::read_file(path);
    cls::write_eval_report(path, "toy", 7, rep);
    CHECK(io::read_file(path) == bytes);
    fs::remove(path);
}
