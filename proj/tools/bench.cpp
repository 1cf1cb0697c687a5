// Timing comparison of the serial and job-parallel execution modes on the
// pipeline's hot paths, plus raw kernel throughput. The parallel mode must
// produce byte-identical results; only wall time is allowed to differ.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <vector>

#include "loft/datagen.hpp"
#include "loft/diffusion.hpp"
#include "loft/kernels.hpp"
#include "loft/lora.hpp"
#include "loft/par.hpp"
#include "loft/rng.hpp"

using namespace loft;

namespace {

double now_s() {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

template <typename Fn>
double time_best(int trials, Fn&& fn) {
    double best = 1e300;
    for (int t = 0; t < trials; ++t) {
        const double t0 = now_s();
        fn();
        best = std::min(best, now_s() - t0);
    }
    return best;
}

void bench_kernel() {
    const int d = 256;
    std::vector<float> w(static_cast<size_t>(d) * d), x(d), b(d), y(d);
    RngStream st(RngKey::root(7).child("bench"));
    st.fill_normal(w);
    st.fill_normal(x);
    st.fill_normal(b);

    const int reps = 20000;
    const double sec = time_best(3, [&] {
        for (int r = 0; r < reps; ++r) kern::affine(w.data(), b.data(), x.data(), y.data(), d, d);
    });
    const double gflops = 2.0 * d * d * reps / sec / 1e9;
    std::printf("%-34s %8.2f GFLOP/s\n", "affine 256x256 (single thread)", gflops);
}

template <typename Fn>
void bench_modes(const char* name, Fn&& run) {
    par::set_mode(par::Mode::Serial);
    std::vector<uint8_t> serial_bytes;
    const double t_serial = time_best(1, [&] { serial_bytes = run(); });

    par::set_mode(par::Mode::Parallel);
    std::vector<uint8_t> parallel_bytes;
    const double t_parallel = time_best(1, [&] { parallel_bytes = run(); });

    const bool same = serial_bytes == parallel_bytes;
    std::printf("%-34s serial %7.3fs   parallel(%d) %7.3fs   x%.2f   bytes %s\n", name, t_serial,
                par::worker_count(), t_parallel, t_serial / t_parallel,
                same ? "identical" : "DIFFER");
}

std::vector<uint8_t> pack_floats(const float* p, size_t n) {
    std::vector<uint8_t> out(n * sizeof(float));
    std::memcpy(out.data(), p, out.size());
    return out;
}

}  // namespace

int main() {
    std::printf("workers available: %d\n\n", par::worker_count());
    bench_kernel();

    diff::DenoiserArch arch;
    const auto base = diff::init_denoiser(arch, RngKey::root(11).child("init"));
    const auto sched = arch.schedule();
    const auto ds =
        gen::make_dataset(gen::RegimeConfig::downstream(), 16, 3, "train", arch.image_hw);

    // Batched training gradient (chunk-reduced, thread-count independent).
    {
        std::vector<diff::LossItem> batch;
        for (size_t i = 0; i < 32; ++i) {
            const auto& it = ds.items[i % ds.items.size()];
            batch.push_back({it.pixels.data(), static_cast<int>(it.label)});
        }
        std::vector<float> grads(base.params.size());
        bench_modes("loss gradient, batch 32 x20", [&] {
            std::vector<uint8_t> out;
            for (int r = 0; r < 20; ++r) {
                std::fill(grads.begin(), grads.end(), 0.0f);
                diff::diffusion_loss_grad(base, batch, sched, RngKey::root(5).child(r), 0.1,
                                          grads.data());
                if (r == 0) out = pack_floats(grads.data(), grads.size());
            }
            return out;
        });
    }

    // Ancestral sampling, job-parallel over images.
    {
        const int n = 24;
        diff::GuidanceConfig g;
        bench_modes("sampling, 24 images", [&] {
            std::vector<float> pixels(static_cast<size_t>(n) * arch.input_dim());
            par::parallel_for(n, [&](int i) {
                const Tensor img = diff::sample(base, i % arch.n_classes, g, sched,
                                                RngKey::root(21).child(static_cast<uint64_t>(i)));
                std::memcpy(pixels.data() + static_cast<size_t>(i) * arch.input_dim(),
                            img.data.data(), sizeof(float) * img.data.size());
            });
            return pack_floats(pixels.data(), pixels.size());
        });
    }

    // Per-image adapter fitting, job-parallel over images.
    {
        const int n = 6;
        lora::FinetuneConfig fcfg;
        fcfg.steps = 60;
        bench_modes("adapter fit, 6 images x60 steps", [&] {
            std::vector<std::vector<float>> firsts(n);
            par::parallel_for(n, [&](int i) {
                const auto& it = ds.items[static_cast<size_t>(i)];
                const auto a = lora::finetune_single_image(
                    base, it, static_cast<int>(it.label), fcfg,
                    RngKey::root(31).child(static_cast<uint64_t>(i)));
                firsts[static_cast<size_t>(i)] = a.layers[0].B;
            });
            std::vector<uint8_t> out;
            for (const auto& f : firsts) {
                const auto b = pack_floats(f.data(), f.size());
                out.insert(out.end(), b.begin(), b.end());
            }
            return out;
        });
    }
    return 0;
}
