#include <doctest.h>

#include <Eigen/Dense>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <vector>

#include "loft/datagen.hpp"
#include "loft/diffusion.hpp"
#include "loft/io.hpp"
#include "loft/kernels.hpp"
#include "loft/lora.hpp"

using namespace loft;
namespace fs = std::filesystem;

namespace {

diff::DenoiserArch small_arch() {
    diff::DenoiserArch a;
    a.image_hw = 4;
    a.n_classes = 3;
    a.width = 12;
    a.n_hidden = 2;
    a.time_features = 4;
    a.T = 10;
    return a;
}

// Adapter with non-trivial factors (fresh adapters have B = 0, which hides
// most fusion arithmetic); B entries drawn from the given key.
lora::LoraAdapter noisy_adapter(const diff::DenoiserArch& arch, int rank, uint32_t cls,
                                uint64_t id, RngKey key) {
    lora::LoraAdapter a = lora::init_adapter(arch, rank, cls, id, key.child("init"));
    RngStream st(key.child("b"));
    for (auto& l : a.layers) {
        for (auto& v : l.B) v = static_cast<float>(0.3 * st.normal());
    }
    return a;
}

// One pretrained base model + a downstream image pool, built once and shared
// by the fine-tune behavior tests. Training is small but real: the output
// layer must move off its zero init before adapter gradients exist at all.
struct FinetuneFixture {
    diff::DenoiserArch arch;
    diff::DenoiserWeights base;
    data::Dataset pool;

    FinetuneFixture() {
        arch.image_hw = 8;
        arch.n_classes = 6;
        arch.width = 48;
        arch.n_hidden = 2;
        arch.time_features = 8;
        arch.T = 50;
        const auto train = gen::make_dataset(gen::RegimeConfig::pretrain(), 40, 515, "train", 8);
        diff::TrainBaseConfig cfg;
        cfg.steps = 4000;  // adapter effects need a reasonably converged base
        cfg.batch_size = 16;
        base = diff::train_base(train, arch, cfg, RngKey::root(515));
        pool = gen::make_dataset(gen::RegimeConfig::downstream(), 2, 516, "pool", 8);
    }
};

const FinetuneFixture& fixture() {
    static FinetuneFixture f;
    return f;
}

fs::path tmp_dir() {
    const fs::path p = fs::temp_directory_path() / "loft-test-lora";
    fs::create_directories(p);
    return p;
}

// Objective on one image estimated over `reps` fresh (t, eps) draws, with and
// without an overlay; fixed key, so the before/after comparison is exact.
double expected_loss(const diff::DenoiserWeights& base, const diff::BranchOverlay* ov,
                     const data::Item& img, int reps, RngKey key) {
    auto chain = diff::build_chain(base, ov);
    diff::DenoiseScratch sc;
    diff::DenoiseFn fn = [&](const float* z_t, int t, int token, float* eps_out) {
        diff::denoise(base, chain, z_t, t, token, eps_out, sc);
    };
    std::vector<diff::LossItem> batch(static_cast<size_t>(reps));
    for (auto& it : batch) {
        it.pixels = img.pixels.data();
        it.label = static_cast<int>(img.label);
    }
    return diff::diffusion_loss_value(fn, base.arch.input_dim(), batch, base.arch.schedule(), key,
                                      0.0, base.arch.n_classes);
}

}  // namespace

// ===========================================================================
// Initialization
// ===========================================================================

TEST_CASE("lora: fresh adapters have zero B and fan-in scaled A") {
    diff::DenoiserArch arch;
    arch.image_hw = 8;
    arch.n_classes = 6;
    arch.width = 48;
    arch.n_hidden = 3;
    arch.time_features = 8;
    arch.T = 10;
    const auto a = lora::init_adapter(arch, 8, 2, 99, RngKey::root(61));
    REQUIRE(a.layers.size() == 3);
    CHECK(a.rank == 8);
    CHECK(a.class_label == 2);
    CHECK(a.source_id == 99);

    double sum = 0.0, sum2 = 0.0;
    size_t n = 0;
    for (const auto& l : a.layers) {
        for (float v : l.B) CHECK(v == 0.0f);
        // A entries are N(0, 1/d_in); normalize by sqrt(d_in) and pool.
        const double s = std::sqrt(static_cast<double>(l.d_in));
        for (float v : l.A) {
            const double x = s * static_cast<double>(v);
            sum += x;
            sum2 += x * x;
            ++n;
        }
    }
    const double mean = sum / static_cast<double>(n);
    const double var = sum2 / static_cast<double>(n) - mean * mean;
    CHECK(std::abs(mean) < 0.1);
    CHECK(std::abs(var - 1.0) < 0.15);
}

TEST_CASE("lora: adapter layer names and dims mirror the network") {
    const auto arch = small_arch();
    const auto a = lora::init_adapter(arch, 2, 0, 1, RngKey::root(62));
    REQUIRE(a.layers.size() == 2);
    CHECK(a.layers[0].name == "h0");
    CHECK(a.layers[0].d_out == 12);
    CHECK(a.layers[0].d_in == 16);
    CHECK(a.layers[1].name == "h1");
    CHECK(a.layers[1].d_in == 12);
}

TEST_CASE("lora: oversized rank is rejected") {
    const auto arch = small_arch();  // min dimension is 12
    CHECK_THROWS_AS(lora::init_adapter(arch, 13, 0, 1, RngKey::root(63)), ConfigError);
    CHECK_THROWS_AS(lora::init_adapter(arch, 0, 0, 1, RngKey::root(63)), ConfigError);
    CHECK_NOTHROW(lora::init_adapter(arch, 12, 0, 1, RngKey::root(63)));
}

TEST_CASE("lora: fresh adapter leaves sampling bitwise unchanged") {
    const auto arch = small_arch();
    const auto w = diff::init_denoiser(arch, RngKey::root(64).child("w"));
    const auto sched = arch.schedule();
    const auto fresh = lora::init_adapter(arch, 2, 1, 5, RngKey::root(64).child("a"));

    lora::FusionSpec spec;
    spec.adapters = {&fresh};
    spec.weights = {1.0};
    const auto overlay = lora::make_overlay(w, spec);

    diff::GuidanceConfig g;
    const RngKey key = RngKey::root(64).child("img");
    const Tensor plain = diff::sample(w, 1, g, sched, key, nullptr);
    const Tensor adapted = diff::sample(w, 1, g, sched, key, &overlay);
    CHECK(plain.data == adapted.data);
}

// ===========================================================================
// Fusion forward
// ===========================================================================

TEST_CASE("lora: one-hot fusion weights reproduce the singleton bytes") {
    const auto arch = small_arch();
    const auto w = diff::init_denoiser(arch, RngKey::root(65).child("w"));
    const auto a1 = noisy_adapter(arch, 2, 0, 1, RngKey::root(65).child("a1"));
    const auto a2 = noisy_adapter(arch, 2, 0, 2, RngKey::root(65).child("a2"));

    lora::FusionSpec onehot;
    onehot.adapters = {&a1, &a2};
    onehot.weights = {1.0, 0.0};
    lora::FusionSpec solo;
    solo.adapters = {&a1};
    solo.weights = {1.0};

    std::vector<float> h(16);
    RngStream st(RngKey::root(65).child("h"));
    st.fill_uniform(h);
    CHECK(lora::fused_forward(w, "h0", onehot, h) == lora::fused_forward(w, "h0", solo, h));

    // And through the full sampler: zero-weight branches are skipped exactly.
    const auto sched = arch.schedule();
    diff::GuidanceConfig g;
    const auto ov_pair = lora::make_overlay(w, onehot);
    const auto ov_solo = lora::make_overlay(w, solo);
    const RngKey key = RngKey::root(65).child("img");
    CHECK(diff::sample(w, 0, g, sched, key, &ov_pair).data ==
          diff::sample(w, 0, g, sched, key, &ov_solo).data);
}

TEST_CASE("lora: fusion is linear in the adapter deltas") {
    const auto arch = small_arch();
    const auto w = diff::init_denoiser(arch, RngKey::root(66).child("w"));
    const auto a1 = noisy_adapter(arch, 2, 0, 1, RngKey::root(66).child("a1"));
    const auto a2 = noisy_adapter(arch, 2, 0, 2, RngKey::root(66).child("a2"));
    const auto a3 = noisy_adapter(arch, 2, 0, 3, RngKey::root(66).child("a3"));
    const std::vector<const lora::LoraAdapter*> all = {&a1, &a2, &a3};

    RngStream st(RngKey::root(66).child("inst"));
    for (int trial = 0; trial < 8; ++trial) {
        std::vector<double> wts(3);
        double sum = 0.0;
        for (auto& v : wts) {
            v = st.uniform() + 0.05;
            sum += v;
        }
        for (auto& v : wts) v /= sum;

        std::vector<float> h(16);
        st.fill_uniform(h);

        lora::FusionSpec spec;
        spec.adapters = all;
        spec.weights = wts;
        const auto fused = lora::fused_forward(w, "h0", spec, h);

        // Base output without any adapter.
        std::vector<float> base_out(12);
        kern::affine(w.params.data() + w.layout.find("h0.w").offset,
                     w.params.data() + w.layout.find("h0.b").offset, h.data(), base_out.data(),
                     12, 16);

        // Weighted sum of singleton deltas.
        std::vector<double> want(12, 0.0);
        for (int i = 0; i < 3; ++i) {
            lora::FusionSpec s1;
            s1.adapters = {all[static_cast<size_t>(i)]};
            s1.weights = {1.0};
            const auto out1 = lora::fused_forward(w, "h0", s1, h);
            for (int j = 0; j < 12; ++j) {
                want[static_cast<size_t>(j)] +=
                    wts[static_cast<size_t>(i)] *
                    (static_cast<double>(out1[static_cast<size_t>(j)]) -
                     static_cast<double>(base_out[static_cast<size_t>(j)]));
            }
        }
        double num = 0.0, den = 0.0;
        for (int j = 0; j < 12; ++j) {
            const double got = static_cast<double>(fused[static_cast<size_t>(j)]) -
                               static_cast<double>(base_out[static_cast<size_t>(j)]);
            num += (got - want[static_cast<size_t>(j)]) * (got - want[static_cast<size_t>(j)]);
            den += want[static_cast<size_t>(j)] * want[static_cast<size_t>(j)];
        }
        CHECK(std::sqrt(num) <= 1e-5 * std::max(1.0, std::sqrt(den)));
    }
}

TEST_CASE("lora: branch-wise forward matches the materialized delta") {
    const auto arch = small_arch();
    const auto w = diff::init_denoiser(arch, RngKey::root(67).child("w"));
    RngStream st(RngKey::root(67).child("inst"));

    for (int trial = 0; trial < 10; ++trial) {
        const auto a1 = noisy_adapter(arch, 2, 0, 1, RngKey::root(67).child("a").child(
                                                         static_cast<uint64_t>(3 * trial)));
        const auto a2 = noisy_adapter(arch, 2, 0, 2, RngKey::root(67).child("a").child(
                                                         static_cast<uint64_t>(3 * trial + 1)));
        const double lam = st.uniform();
        lora::FusionSpec spec;
        spec.adapters = {&a1, &a2};
        spec.weights = {lam, 1.0 - lam};

        std::vector<float> h(16);
        st.fill_uniform(h);
        const std::string layer = trial % 2 == 0 ? "h0" : "h1";
        const int d_in = layer == "h0" ? 16 : 12;
        h.resize(static_cast<size_t>(d_in));

        const auto fused = lora::fused_forward(w, layer, spec, h);
        const auto delta = lora::materialize_delta(spec, layer);

        std::vector<double> want(12, 0.0);
        const float* bw = w.params.data() + w.layout.find(layer + ".w").offset;
        const float* bb = w.params.data() + w.layout.find(layer + ".b").offset;
        for (int o = 0; o < 12; ++o) {
            double acc = static_cast<double>(bb[o]);
            for (int j = 0; j < d_in; ++j) {
                acc += (static_cast<double>(bw[o * d_in + j]) +
                        delta.data[static_cast<size_t>(o * d_in + j)]) *
                       static_cast<double>(h[static_cast<size_t>(j)]);
            }
            want[static_cast<size_t>(o)] = acc;
        }
        for (int o = 0; o < 12; ++o) {
            CHECK(std::abs(static_cast<double>(fused[static_cast<size_t>(o)]) -
                           want[static_cast<size_t>(o)]) <=
                  1e-5 * std::max(1.0, std::abs(want[static_cast<size_t>(o)])));
        }
    }
}

TEST_CASE("lora: unknown layer name is rejected") {
    const auto arch = small_arch();
    const auto w = diff::init_denoiser(arch, RngKey::root(68).child("w"));
    const auto a = noisy_adapter(arch, 2, 0, 1, RngKey::root(68).child("a"));
    lora::FusionSpec spec;
    spec.adapters = {&a};
    spec.weights = {1.0};
    std::vector<float> h(16, 0.5f);
    CHECK_THROWS_AS(lora::fused_forward(w, "out", spec, h), ShapeError);
    CHECK_THROWS_AS(lora::fused_forward(w, "h7", spec, h), ShapeError);
}

// ===========================================================================
// Materialization oracle
// ===========================================================================

TEST_CASE("lora: single-adapter delta is scale times B A") {
    const auto arch = small_arch();
    const auto a = noisy_adapter(arch, 2, 0, 1, RngKey::root(69));
    lora::FusionSpec spec;
    spec.adapters = {&a};
    spec.weights = {1.0};
    const auto delta = lora::materialize_delta(spec, "h0");
    REQUIRE(delta.shape == std::vector<int>{12, 16});
    const auto& l = a.layers[0];
    for (int o = 0; o < 12; ++o) {
        for (int j = 0; j < 16; ++j) {
            double want = 0.0;
            for (int q = 0; q < 2; ++q) {
                want += static_cast<double>(l.B[static_cast<size_t>(o * 2 + q)]) *
                        static_cast<double>(l.A[static_cast<size_t>(q * 16 + j)]);
            }
            want *= static_cast<double>(a.scale);
            CHECK(delta.data[static_cast<size_t>(o * 16 + j)] ==
                  doctest::Approx(want).epsilon(1e-12));
        }
    }
}

TEST_CASE("lora: orthogonal rank-1 pair fuses to a rank-2 delta") {
    // Two hand-built rank-1 adapters over a single 4x4 layer: B_i A_i = e_i e_i^T.
    auto make = [](int axis) {
        lora::LoraAdapter a;
        a.rank = 1;
        a.class_label = 0;
        a.source_id = static_cast<uint64_t>(axis + 1);
        lora::LoraAdapter::Layer l;
        l.name = "h0";
        l.d_out = 4;
        l.d_in = 4;
        l.B.assign(4, 0.0f);
        l.A.assign(4, 0.0f);
        l.B[static_cast<size_t>(axis)] = 1.0f;
        l.A[static_cast<size_t>(axis)] = 1.0f;
        a.layers.push_back(std::move(l));
        return a;
    };
    const auto a0 = make(0);
    const auto a1 = make(1);
    lora::FusionSpec spec;
    spec.adapters = {&a0, &a1};
    spec.weights = {0.5, 0.5};
    const auto delta = lora::materialize_delta(spec, "h0");

    Eigen::MatrixXd m(4, 4);
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 4; ++j) m(i, j) = delta.data[static_cast<size_t>(i * 4 + j)];
    }
    CHECK(m(0, 0) == doctest::Approx(0.5));
    CHECK(m(1, 1) == doctest::Approx(0.5));
    const Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
    int nonzero = 0;
    for (int i = 0; i < 4; ++i) {
        if (svd.singularValues()(i) > 1e-9) ++nonzero;
    }
    CHECK(nonzero == 2);
}

TEST_CASE("lora: all-zero adapters materialize to the zero matrix") {
    const auto arch = small_arch();
    auto a1 = lora::init_adapter(arch, 2, 0, 1, RngKey::root(70).child("a1"));
    auto a2 = lora::init_adapter(arch, 2, 0, 2, RngKey::root(70).child("a2"));
    for (auto& l : a1.layers) std::fill(l.A.begin(), l.A.end(), 0.0f);
    for (auto& l : a2.layers) std::fill(l.A.begin(), l.A.end(), 0.0f);
    lora::FusionSpec spec;
    spec.adapters = {&a1, &a2};
    spec.weights = {0.5, 0.5};
    const auto delta = lora::materialize_delta(spec, "h1");
    for (double v : delta.data) CHECK(v == 0.0);
}

// ===========================================================================
// FusionSpec validation
// ===========================================================================

TEST_CASE("lora: fusion spec invariants are enforced") {
    const auto arch = small_arch();
    const auto a1 = noisy_adapter(arch, 2, 0, 1, RngKey::root(71).child("a1"));
    const auto a2 = noisy_adapter(arch, 2, 0, 2, RngKey::root(71).child("a2"));
    const auto other_cls = noisy_adapter(arch, 2, 1, 3, RngKey::root(71).child("a3"));
    const auto other_rank = noisy_adapter(arch, 3, 0, 4, RngKey::root(71).child("a4"));

    lora::FusionSpec s;
    CHECK_THROWS_AS(s.validate(), ConfigError);  // empty

    s.adapters = {&a1, &a2};
    s.weights = {1.0};
    CHECK_THROWS_AS(s.validate(), ConfigError);  // length mismatch

    s.weights = {0.8, 0.1};
    CHECK_THROWS_WITH_AS(s.validate(), doctest::Contains("sum"), ConfigError);

    s.weights = {1.3, -0.3};
    CHECK_THROWS_AS(s.validate(), ConfigError);  // negative weight

    s.weights = {0.5, 0.5};
    CHECK_NOTHROW(s.validate());

    s.adapters = {&a1, &other_cls};
    CHECK_THROWS_WITH_AS(s.validate(), doctest::Contains("classes"), ConfigError);

    s.adapters = {&a1, &other_rank};
    CHECK_THROWS_WITH_AS(s.validate(), doctest::Contains("rank"), ConfigError);
}

// ===========================================================================
// Lambda sampling
// ===========================================================================

TEST_CASE("lora: fixed sampler picks distinct ordered pairs with exact weights") {
    const auto arch = small_arch();
    const auto a1 = noisy_adapter(arch, 2, 0, 1, RngKey::root(72).child("a1"));
    const auto a2 = noisy_adapter(arch, 2, 0, 2, RngKey::root(72).child("a2"));
    const auto a3 = noisy_adapter(arch, 2, 0, 3, RngKey::root(72).child("a3"));
    const std::vector<const lora::LoraAdapter*> pool = {&a1, &a2, &a3};

    lora::LambdaSampler smp;  // Fixed 0.5
    const RngKey key = RngKey::root(72).child("draws");
    std::vector<int> pair_seen(9, 0);
    for (int i = 0; i < 600; ++i) {
        const auto spec = lora::sample_fusion(pool, smp, key.child(static_cast<uint64_t>(i)));
        REQUIRE(spec.adapters.size() == 2);
        CHECK(spec.adapters[0] != spec.adapters[1]);
        CHECK(spec.weights[0] == 0.5);
        CHECK(spec.weights[1] == 0.5);
        int ia = 0, ib = 0;
        for (int j = 0; j < 3; ++j) {
            if (pool[static_cast<size_t>(j)] == spec.adapters[0]) ia = j;
            if (pool[static_cast<size_t>(j)] == spec.adapters[1]) ib = j;
        }
        pair_seen[static_cast<size_t>(ia * 3 + ib)] += 1;
    }
    // All six ordered distinct pairs occur; the diagonal never does.
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            if (i == j) {
                CHECK(pair_seen[static_cast<size_t>(i * 3 + j)] == 0);
            } else {
                CHECK(pair_seen[static_cast<size_t>(i * 3 + j)] > 40);
            }
        }
    }
}

TEST_CASE("lora: beta sampler concentrates around one half") {
    const auto arch = small_arch();
    const auto a1 = noisy_adapter(arch, 2, 0, 1, RngKey::root(73).child("a1"));
    const auto a2 = noisy_adapter(arch, 2, 0, 2, RngKey::root(73).child("a2"));
    const std::vector<const lora::LoraAdapter*> pool = {&a1, &a2};

    lora::LambdaSampler smp;
    smp.kind = lora::LambdaSampler::Kind::Beta;
    smp.alpha = 10.0;
    const RngKey key = RngKey::root(73).child("draws");
    double sum = 0.0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        const auto spec = lora::sample_fusion(pool, smp, key.child(static_cast<uint64_t>(i)));
        const double lam = spec.weights[0];
        REQUIRE(lam > 0.0);
        REQUIRE(lam < 1.0);
        CHECK(spec.weights[1] == doctest::Approx(1.0 - lam).epsilon(1e-12));
        sum += lam;
    }
    CHECK(std::abs(sum / n - 0.5) < 0.01);
}

TEST_CASE("lora: explicit vector sampler honors the given weights") {
    const auto arch = small_arch();
    const auto a1 = noisy_adapter(arch, 2, 0, 1, RngKey::root(74).child("a1"));
    const auto a2 = noisy_adapter(arch, 2, 0, 2, RngKey::root(74).child("a2"));
    const auto a3 = noisy_adapter(arch, 2, 0, 3, RngKey::root(74).child("a3"));
    const auto a4 = noisy_adapter(arch, 2, 0, 4, RngKey::root(74).child("a4"));
    const std::vector<const lora::LoraAdapter*> pool = {&a1, &a2, &a3, &a4};

    lora::LambdaSampler smp;
    smp.kind = lora::LambdaSampler::Kind::Explicit;
    smp.vec = {0.7, 0.15, 0.15};
    for (int i = 0; i < 50; ++i) {
        const auto spec =
            lora::sample_fusion(pool, smp, RngKey::root(74).child(static_cast<uint64_t>(i)));
        REQUIRE(spec.adapters.size() == 3);
        CHECK(spec.adapters[0] != spec.adapters[1]);
        CHECK(spec.adapters[0] != spec.adapters[2]);
        CHECK(spec.adapters[1] != spec.adapters[2]);
        CHECK(spec.weights[0] == 0.7);
        CHECK(spec.weights[1] == 0.15);
        CHECK(spec.weights[2] == 0.15);
    }
}

TEST_CASE("lora: off-simplex explicit vectors are normalized at sample time") {
    const auto arch = small_arch();
    const auto a1 = noisy_adapter(arch, 2, 0, 1, RngKey::root(75).child("a1"));
    const auto a2 = noisy_adapter(arch, 2, 0, 2, RngKey::root(75).child("a2"));
    const auto a3 = noisy_adapter(arch, 2, 0, 3, RngKey::root(75).child("a3"));
    const std::vector<const lora::LoraAdapter*> pool = {&a1, &a2, &a3};

    lora::LambdaSampler smp;
    smp.kind = lora::LambdaSampler::Kind::Explicit;
    smp.vec = {0.33, 0.33, 0.33};
    const auto spec = lora::sample_fusion(pool, smp, RngKey::root(75).child("d"));
    double sum = 0.0;
    for (double w : spec.weights) {
        CHECK(w == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
        sum += w;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("lora: sampler edge cases") {
    const auto arch = small_arch();
    const auto a1 = noisy_adapter(arch, 2, 0, 1, RngKey::root(76).child("a1"));
    const std::vector<const lora::LoraAdapter*> one = {&a1};

    // Singleton fallback: one adapter, weight exactly 1.
    lora::LambdaSampler smp;
    const auto spec = lora::sample_fusion(one, smp, RngKey::root(76).child("d"));
    REQUIRE(spec.adapters.size() == 1);
    CHECK(spec.adapters[0] == &a1);
    CHECK(spec.weights[0] == 1.0);

    // Explicit vector longer than the pool.
    lora::LambdaSampler vec3;
    vec3.kind = lora::LambdaSampler::Kind::Explicit;
    vec3.vec = {0.5, 0.25, 0.25};
    CHECK_THROWS_AS(lora::sample_fusion(one, vec3, RngKey::root(76)), ConfigError);

    // Empty pool.
    CHECK_THROWS_AS(lora::sample_fusion({}, smp, RngKey::root(76)), ConfigError);

    // Invalid sampler parameters.
    lora::LambdaSampler bad;
    bad.lambda = 1.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = {};
    bad.kind = lora::LambdaSampler::Kind::Beta;
    bad.alpha = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = {};
    bad.kind = lora::LambdaSampler::Kind::Explicit;
    bad.vec = {};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad.vec = {0.5, -0.5};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("lora: sample_fusion is deterministic per key") {
    const auto arch = small_arch();
    const auto a1 = noisy_adapter(arch, 2, 0, 1, RngKey::root(77).child("a1"));
    const auto a2 = noisy_adapter(arch, 2, 0, 2, RngKey::root(77).child("a2"));
    const auto a3 = noisy_adapter(arch, 2, 0, 3, RngKey::root(77).child("a3"));
    const std::vector<const lora::LoraAdapter*> pool = {&a1, &a2, &a3};
    lora::LambdaSampler smp;
    smp.kind = lora::LambdaSampler::Kind::Beta;
    smp.alpha = 2.0;
    const RngKey key = RngKey::root(77).child("d");
    const auto s1 = lora::sample_fusion(pool, smp, key);
    const auto s2 = lora::sample_fusion(pool, smp, key);
    CHECK(s1.adapters == s2.adapters);
    CHECK(s1.weights == s2.weights);
}

// ===========================================================================
// Fine-tuning behavior (shared pretrained fixture)
// ===========================================================================

TEST_CASE("lora: zero-step fine-tune returns the fresh init") {
    const auto& fx = fixture();
    lora::FinetuneConfig cfg;
    cfg.steps = 0;
    const auto& img = fx.pool.items[0];
    const auto a = lora::finetune_single_image(fx.base, img, static_cast<int>(img.label), cfg,
                                               RngKey::root(301));
    const auto init = lora::init_adapter(fx.arch, cfg.rank, img.label, img.id,
                                         RngKey::root(301).child("init"));
    REQUIRE(a.layers.size() == init.layers.size());
    for (size_t l = 0; l < a.layers.size(); ++l) {
        CHECK(a.layers[l].B == init.layers[l].B);
        CHECK(a.layers[l].A == init.layers[l].A);
    }
    CHECK(a.source_id == img.id);
}

TEST_CASE("lora: per-image fine-tune reduces the source-image loss") {
    const auto& fx = fixture();
    lora::FinetuneConfig cfg;  // defaults: rank 2, 300 steps, lr 1e-3
    const auto& img = fx.pool.items[0];
    std::vector<double> trace;
    const auto base_params = fx.base.params;
    const auto a = lora::finetune_single_image(fx.base, img, static_cast<int>(img.label), cfg,
                                               RngKey::root(302), &trace);
    REQUIRE(trace.size() == 300);

    // Mean trace loss over the last 10% of steps sits below the first 10%.
    double head = 0.0, tail = 0.0;
    for (int i = 0; i < 30; ++i) {
        head += trace[static_cast<size_t>(i)];
        tail += trace[trace.size() - 30 + static_cast<size_t>(i)];
    }
    CHECK(tail < 0.98 * head);

    // The improvement also shows up in a fresh estimate of the objective on
    // the source image (64 draws, same key for both sides).
    lora::FusionSpec spec;
    spec.adapters = {&a};
    spec.weights = {1.0};
    const auto ov = lora::make_overlay(fx.base, spec);
    const double loss_base = expected_loss(fx.base, nullptr, img, 64, RngKey::root(9001));
    const double loss_fit = expected_loss(fx.base, &ov, img, 64, RngKey::root(9001));
    CHECK(loss_fit < 0.98 * loss_base);

    // Base weights are bitwise untouched; the factors moved.
    CHECK(fx.base.params == base_params);
    bool b_moved = false;
    for (const auto& l : a.layers) {
        for (float v : l.B) {
            if (v != 0.0f) b_moved = true;
        }
    }
    CHECK(b_moved);
}

TEST_CASE("lora: fine-tune is bit-deterministic per key") {
    const auto& fx = fixture();
    lora::FinetuneConfig cfg;
    cfg.steps = 40;
    const auto& img = fx.pool.items[1];
    const auto a1 = lora::finetune_single_image(fx.base, img, static_cast<int>(img.label), cfg,
                                                RngKey::root(303));
    const auto a2 = lora::finetune_single_image(fx.base, img, static_cast<int>(img.label), cfg,
                                                RngKey::root(303));
    REQUIRE(a1.layers.size() == a2.layers.size());
    for (size_t l = 0; l < a1.layers.size(); ++l) {
        CHECK(a1.layers[l].B == a2.layers[l].B);
        CHECK(a1.layers[l].A == a2.layers[l].A);
    }
    const auto a3 = lora::finetune_single_image(fx.base, img, static_cast<int>(img.label), cfg,
                                                RngKey::root(304));
    CHECK(a1.layers[0].B != a3.layers[0].B);
}

TEST_CASE("lora: single-image fit is the one-element class-set fit") {
    const auto& fx = fixture();
    lora::FinetuneConfig cfg;
    cfg.steps = 25;
    const auto& img = fx.pool.items[2];
    const auto a = lora::finetune_single_image(fx.base, img, static_cast<int>(img.label), cfg,
                                               RngKey::root(305));
    const auto b = lora::finetune_class_set(fx.base, std::span(&img, 1),
                                            static_cast<int>(img.label), cfg, RngKey::root(305));
    for (size_t l = 0; l < a.layers.size(); ++l) {
        CHECK(a.layers[l].B == b.layers[l].B);
        CHECK(a.layers[l].A == b.layers[l].A);
    }
}

TEST_CASE("lora: class-set fine-tune batches shots and rejects mixed labels") {
    const auto& fx = fixture();
    lora::FinetuneConfig cfg;  // default step count; the windows below assume it

    // Two images of class 3 from the pool.
    std::vector<data::Item> shots;
    for (const auto& it : fx.pool.items) {
        if (it.label == 3) shots.push_back(it);
    }
    REQUIRE(shots.size() == 2);
    std::vector<double> trace;
    const auto a = lora::finetune_class_set(fx.base, shots, 3, cfg, RngKey::root(306), &trace);
    CHECK(a.class_label == 3);
    REQUIRE(trace.size() == 300);
    double head = 0.0, tail = 0.0;
    for (int i = 0; i < 30; ++i) {
        head += trace[static_cast<size_t>(i)];
        tail += trace[trace.size() - 30 + static_cast<size_t>(i)];
    }
    CHECK(tail < 0.9 * head);

    shots[1].label = 4;
    CHECK_THROWS_WITH_AS(lora::finetune_class_set(fx.base, shots, 3, cfg, RngKey::root(306)),
                         doctest::Contains("mixes labels"), ConfigError);
    CHECK_THROWS_AS(lora::finetune_class_set(fx.base, {}, 3, cfg, RngKey::root(306)),
                    ConfigError);
    CHECK_THROWS_AS(lora::finetune_class_set(fx.base, std::span(&fx.pool.items[0], 1), 99, cfg,
                                             RngKey::root(306)),
                    ShapeError);
}

// ===========================================================================
// Persistence
// ===========================================================================

TEST_CASE("lora: adapter files roundtrip losslessly") {
    const auto arch = small_arch();
    const auto a = noisy_adapter(arch, 2, 1, 77, RngKey::root(307));
    const fs::path p1 = tmp_dir() / "adapter-a.lfta";
    const fs::path p2 = tmp_dir() / "adapter-b.lfta";
    lora::save_adapter(p1, a);
    const auto r = lora::load_adapter(p1);
    CHECK(r.class_label == a.class_label);
    CHECK(r.source_id == a.source_id);
    CHECK(r.rank == a.rank);
    REQUIRE(r.layers.size() == a.layers.size());
    for (size_t l = 0; l < a.layers.size(); ++l) {
        CHECK(r.layers[l].name == a.layers[l].name);
        CHECK(r.layers[l].B == a.layers[l].B);
        CHECK(r.layers[l].A == a.layers[l].A);
    }
    lora::save_adapter(p2, r);
    CHECK(io::read_file(p1) == io::read_file(p2));
}

TEST_CASE("lora: adapter file corruption is diagnosed") {
    const auto arch = small_arch();
    const auto a = noisy_adapter(arch, 2, 1, 77, RngKey::root(308));
    const fs::path good = tmp_dir() / "good.lfta";
    lora::save_adapter(good, a);
    const auto bytes = io::read_file(good);

    const fs::path bad_magic = tmp_dir() / "bad-magic.lfta";
    {
        auto b = bytes;
        b[0] = '?';
        io::write_file(bad_magic, b);
    }
    CHECK_THROWS_WITH_AS(lora::load_adapter(bad_magic), doctest::Contains("bad magic"),
                         FormatError);

    const fs::path truncated = tmp_dir() / "short.lfta";
    {
        auto b = bytes;
        b.resize(b.size() - 7);
        io::write_file(truncated, b);
    }
    CHECK_THROWS_WITH_AS(lora::load_adapter(truncated),
                         doctest::Contains("unexpected end of file"), FormatError);

    const fs::path trailing = tmp_dir() / "long.lfta";
    {
        auto b = bytes;
        b.push_back(0);
        io::write_file(trailing, b);
    }
    CHECK_THROWS_WITH_AS(lora::load_adapter(trailing), doctest::Contains("trailing"),
                         FormatError);

    CHECK_THROWS_AS(lora::load_adapter(tmp_dir() / "absent.lfta"), ArtifactNotFound);
}
