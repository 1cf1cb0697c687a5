#include "loft/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include <json.hpp>

#include "loft/io.hpp"
#include "loft/kernels.hpp"
#include "loft/optim.hpp"
#include "loft/par.hpp"

namespace loft::diff {

using namespace loft::kern;
using json = nlohmann::json;

// ===========================================================================
// Noise schedule
// ===========================================================================

NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
    if (T < 2) throw ConfigError("schedule needs at least 2 steps");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
        throw ConfigError("schedule betas must satisfy 0 < beta_start <= beta_end < 1");
    }
    NoiseSchedule s;
    s.T = T;
    s.beta.resize(static_cast<size_t>(T));
    s.alpha.resize(static_cast<size_t>(T));
    s.alpha_bar.resize(static_cast<size_t>(T));
    double prod = 1.0;
    for (int i = 0; i < T; ++i) {
        const double b =
            beta_start + (beta_end - beta_start) * static_cast<double>(i) / static_cast<double>(T - 1);
        s.beta[static_cast<size_t>(i)] = b;
        s.alpha[static_cast<size_t>(i)] = 1.0 - b;
        prod *= 1.0 - b;
        s.alpha_bar[static_cast<size_t>(i)] = prod;
    }
    return s;
}

void q_sample(std::span<const float> z0, int t, std::span<const float> eps,
              const NoiseSchedule& sched, std::span<float> z_t) {
    if (z0.size() != eps.size() || z0.size() != z_t.size()) {
        throw ShapeError("q_sample buffers disagree in size");
    }
    if (t < 1 || t > sched.T) {
        throw ShapeError("timestep " + std::to_string(t) + " outside [1," +
                         std::to_string(sched.T) + "]");
    }
    const double ab = sched.alpha_bar[static_cast<size_t>(t - 1)];
    const float c0 = static_cast<float>(std::sqrt(ab));
    const float c1 = static_cast<float>(std::sqrt(1.0 - ab));
    for (size_t i = 0; i < z0.size(); ++i) z_t[i] = c0 * z0[i] + c1 * eps[i];
}

// ===========================================================================
// Architecture and parameters
// ===========================================================================

std::vector<std::string> DenoiserArch::hidden_layer_names() const {
    std::vector<std::string> names;
    for (int l = 0; l < n_hidden; ++l) names.push_back("h" + std::to_string(l));
    return names;
}

nn::ParamLayout DenoiserArch::layout() const {
    if (n_classes < 1 || width < 1 || n_hidden < 1 || image_hw < 1) {
        throw ConfigError("denoiser architecture fields must be positive");
    }
    if (time_features < 2 || time_features % 2 != 0) {
        throw ConfigError("time feature count must be even and >= 2");
    }
    const size_t d = static_cast<size_t>(input_dim());
    const size_t wd = static_cast<size_t>(width);
    nn::ParamLayout lay;
    lay.add("class_emb", static_cast<size_t>(n_classes + 1) * d);
    lay.add("time_w", d * static_cast<size_t>(time_features));
    lay.add("time_b", d);
    for (int l = 0; l < n_hidden; ++l) {
        const std::string h = "h" + std::to_string(l);
        lay.add(h + ".w", wd * (l == 0 ? d : wd));
        lay.add(h + ".b", wd);
    }
    lay.add("out.w", d * wd);
    lay.add("out.b", d);
    return lay;
}

std::string DenoiserArch::to_json() const {
    json j;
    j["image_hw"] = image_hw;
    j["n_classes"] = n_classes;
    j["width"] = width;
    j["n_hidden"] = n_hidden;
    j["time_features"] = time_features;
    j["T"] = T;
    j["beta_start"] = beta_start;
    j["beta_end"] = beta_end;
    return j.dump();
}

DenoiserArch DenoiserArch::from_json(const std::string& text) {
    try {
        const json j = json::parse(text);
        DenoiserArch a;
        a.image_hw = j.at("image_hw").get<int>();
        a.n_classes = j.at("n_classes").get<int>();
        a.width = j.at("width").get<int>();
        a.n_hidden = j.at("n_hidden").get<int>();
        a.time_features = j.at("time_features").get<int>();
        a.T = j.at("T").get<int>();
        a.beta_start = j.at("beta_start").get<double>();
        a.beta_end = j.at("beta_end").get<double>();
        a.layout();  // field validation
        return a;
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad architecture descriptor: ") + e.what());
    }
}

namespace {

void fill_scaled_normal(RngStream& st, std::span<float> out, double scale) {
    for (auto& v : out) v = static_cast<float>(scale * st.normal());
}

}  // namespace

DenoiserWeights init_denoiser(const DenoiserArch& arch, RngKey key) {
    DenoiserWeights w;
    w.arch = arch;
    w.layout = arch.layout();
    w.params.assign(w.layout.total, 0.0f);
    RngStream st(key);

    auto seg = [&](const std::string& name) {
        const auto& s = w.layout.find(name);
        return std::span<float>(w.params.data() + s.offset, s.size);
    };

    // Class embeddings start small; the output layer starts at zero so the
    // first prediction is the zero vector. Hidden layers get fan-in scaling.
    fill_scaled_normal(st, seg("class_emb"), 0.1);
    fill_scaled_normal(st, seg("time_w"), 1.0 / std::sqrt(static_cast<double>(arch.time_features)));
    for (int l = 0; l < arch.n_hidden; ++l) {
        const int d_in = l == 0 ? arch.input_dim() : arch.width;
        fill_scaled_normal(st, seg("h" + std::to_string(l) + ".w"),
                           std::sqrt(2.0 / static_cast<double>(d_in)));
    }
    return w;
}

uint64_t weights_hash(const DenoiserWeights& w) {
    const std::string arch = w.arch.to_json();
    uint64_t h = io::fnv1a64(arch.data(), arch.size());
    return io::fnv1a64(w.params.data(), w.params.size() * sizeof(float), h);
}

std::vector<nn::ChainLayer<float>> build_chain(const DenoiserWeights& w,
                                               const BranchOverlay* overlay) {
    if (overlay && overlay->per_hidden.size() != static_cast<size_t>(w.arch.n_hidden)) {
        throw ShapeError("branch overlay covers " + std::to_string(overlay->per_hidden.size()) +
                         " layers, network has " + std::to_string(w.arch.n_hidden));
    }
    std::vector<nn::ChainLayer<float>> chain;
    for (int l = 0; l < w.arch.n_hidden; ++l) {
        nn::ChainLayer<float> ly;
        ly.name = "h" + std::to_string(l);
        ly.d_in = l == 0 ? w.arch.input_dim() : w.arch.width;
        ly.d_out = w.arch.width;
        ly.w = w.params.data() + w.layout.find(ly.name + ".w").offset;
        ly.b = w.params.data() + w.layout.find(ly.name + ".b").offset;
        ly.act = true;
        if (overlay) ly.branches = overlay->per_hidden[static_cast<size_t>(l)];
        chain.push_back(std::move(ly));
    }
    nn::ChainLayer<float> out;
    out.name = "out";
    out.d_in = w.arch.width;
    out.d_out = w.arch.input_dim();
    out.w = w.params.data() + w.layout.find("out.w").offset;
    out.b = w.params.data() + w.layout.find("out.b").offset;
    out.act = false;
    chain.push_back(std::move(out));
    nn::check_chain(chain, w.arch.input_dim());
    return chain;
}

void time_features(int t, int n, float* out) {
    const int half = n / 2;
    for (int j = 0; j < half; ++j) {
        const double scale =
            half > 1 ? std::exp(-std::log(10000.0) * static_cast<double>(j) /
                                static_cast<double>(half - 1))
                     : 1.0;
        const double arg = static_cast<double>(t) * scale;
        out[j] = static_cast<float>(std::sin(arg));
        out[half + j] = static_cast<float>(std::cos(arg));
    }
}

void denoise(const DenoiserWeights& w, const std::vector<nn::ChainLayer<float>>& chain,
             const float* z_t, int t, int token, float* eps_out, DenoiseScratch& s) {
    const int d = w.arch.input_dim();
    if (token < 0 || token > w.arch.null_token()) {
        throw ShapeError("conditioning token " + std::to_string(token) + " out of range");
    }
    if (t < 1 || t > w.arch.T) {
        throw ShapeError("timestep " + std::to_string(t) + " out of range");
    }
    s.x_in.resize(static_cast<size_t>(d));
    s.feat.resize(static_cast<size_t>(w.arch.time_features));
    s.time_emb.resize(static_cast<size_t>(d));
    time_features(t, w.arch.time_features, s.feat.data());
    affine(w.params.data() + w.layout.find("time_w").offset,
           w.params.data() + w.layout.find("time_b").offset, s.feat.data(), s.time_emb.data(), d,
           w.arch.time_features);
    const float* emb = w.params.data() + w.layout.find("class_emb").offset +
                       static_cast<size_t>(token) * static_cast<size_t>(d);
    for (int i = 0; i < d; ++i) s.x_in[static_cast<size_t>(i)] = z_t[i] + emb[i] + s.time_emb[static_cast<size_t>(i)];
    s.chain.prepare(chain);
    nn::chain_forward(chain, s.x_in.data(), s.chain);
    std::memcpy(eps_out, s.chain.x.back().data(), static_cast<size_t>(d) * sizeof(float));
}

// ===========================================================================
// Training objective
// ===========================================================================

void draw_item_noise(RngKey item_key, const NoiseSchedule& sched, double p_uncond, int label,
                     int null_token, std::span<float> eps, int& t_out, int& token_out) {
    // Draw order is part of the artifact contract: t, then the dropout coin,
    // then the noise vector.
    RngStream st(item_key);
    t_out = 1 + static_cast<int>(st.uniform_below(static_cast<uint64_t>(sched.T)));
    const bool drop = st.uniform() < p_uncond;
    token_out = drop ? null_token : label;
    st.fill_normal(eps);
}

namespace {

void check_label(int label, int n_classes) {
    if (label < 0 || label >= n_classes) {
        throw ShapeError("label " + std::to_string(label) + " out of range [0," +
                         std::to_string(n_classes) + ")");
    }
}

}  // namespace

double diffusion_loss_value(const DenoiseFn& fn, int input_dim, std::span<const LossItem> batch,
                            const NoiseSchedule& sched, RngKey key, double p_uncond,
                            int n_classes, std::vector<int>* used_tokens) {
    if (batch.empty()) throw ConfigError("loss batch is empty");
    if (used_tokens) used_tokens->assign(batch.size(), -1);
    const size_t d = static_cast<size_t>(input_dim);
    std::vector<float> eps(d), z_t(d), eps_hat(d);
    double total = 0.0;
    for (size_t i = 0; i < batch.size(); ++i) {
        check_label(batch[i].label, n_classes);
        int t = 0, token = 0;
        draw_item_noise(key.child(static_cast<uint64_t>(i)), sched, p_uncond, batch[i].label,
                        n_classes, eps, t, token);
        q_sample(std::span<const float>(batch[i].pixels, d), t, eps, sched, z_t);
        fn(z_t.data(), t, token, eps_hat.data());
        total += mse(eps_hat.data(), eps.data(), input_dim);
        if (used_tokens) (*used_tokens)[i] = token;
    }
    return total / static_cast<double>(batch.size());
}

double diffusion_loss_grad(const DenoiserWeights& w, std::span<const LossItem> batch,
                           const NoiseSchedule& sched, RngKey key, double p_uncond, float* grads,
                           std::vector<int>* used_tokens) {
    if (batch.empty()) throw ConfigError("loss batch is empty");
    const int n = static_cast<int>(batch.size());
    const int d = w.arch.input_dim();
    const size_t P = w.layout.total;
    if (used_tokens) used_tokens->assign(batch.size(), -1);
    for (const auto& it : batch) check_label(it.label, w.arch.n_classes);

    // Fixed-size chunks; each chunk accumulates its own partial gradient and
    // the partials are folded in chunk order afterwards, so results never
    // depend on how many workers ran.
    constexpr int kChunk = 16;
    const int n_chunks = (n + kChunk - 1) / kChunk;
    std::vector<std::vector<float>> partial(static_cast<size_t>(n_chunks));
    std::vector<double> item_loss(static_cast<size_t>(n), 0.0);

    const size_t emb_off = w.layout.find("class_emb").offset;
    const size_t tw_off = w.layout.find("time_w").offset;
    const size_t tb_off = w.layout.find("time_b").offset;

    par::parallel_for(n_chunks, [&](int c) {
        auto& g = partial[static_cast<size_t>(c)];
        g.assign(P, 0.0f);
        auto chain = build_chain(w, nullptr);
        DenoiseScratch sc;
        std::vector<float> eps(static_cast<size_t>(d)), z_t(static_cast<size_t>(d));
        std::vector<float> eps_hat(static_cast<size_t>(d)), dy(static_cast<size_t>(d));
        std::vector<float> d_in(static_cast<size_t>(d));

        std::vector<nn::ChainGrad<float>> cg(chain.size());
        for (size_t l = 0; l < chain.size(); ++l) {
            cg[l].dw = g.data() + w.layout.find(chain[l].name + ".w").offset;
            cg[l].db = g.data() + w.layout.find(chain[l].name + ".b").offset;
        }

        const int lo = c * kChunk;
        const int hi = std::min(n, lo + kChunk);
        for (int i = lo; i < hi; ++i) {
            int t = 0, token = 0;
            draw_item_noise(key.child(static_cast<uint64_t>(i)), sched, p_uncond,
                            batch[static_cast<size_t>(i)].label, w.arch.null_token(), eps, t,
                            token);
            q_sample(std::span<const float>(batch[static_cast<size_t>(i)].pixels,
                                            static_cast<size_t>(d)),
                     t, eps, sched, z_t);
            denoise(w, chain, z_t.data(), t, token, eps_hat.data(), sc);
            item_loss[static_cast<size_t>(i)] = mse(eps_hat.data(), eps.data(), d);
            if (used_tokens) (*used_tokens)[static_cast<size_t>(i)] = token;

            mse_backward(eps_hat.data(), eps.data(), dy.data(), d);
            nn::chain_backward(chain, sc.chain, dy.data(), cg, d_in.data());
            // Input terms: class embedding row, time projection, time bias.
            axpy(g.data() + emb_off + static_cast<size_t>(token) * static_cast<size_t>(d),
                 d_in.data(), d, 1.0f);
            scaled_outer_acc(g.data() + tw_off, d_in.data(), sc.feat.data(), d,
                             w.arch.time_features, 1.0f);
            axpy(g.data() + tb_off, d_in.data(), d, 1.0f);
        }
    });

    for (int c = 0; c < n_chunks; ++c) {
        axpy(grads, partial[static_cast<size_t>(c)].data(), static_cast<int>(P), 1.0f);
    }
    const float inv_n = static_cast<float>(1.0 / static_cast<double>(n));
    for (size_t i = 0; i < P; ++i) grads[i] *= inv_n;

    double total = 0.0;
    for (int i = 0; i < n; ++i) total += item_loss[static_cast<size_t>(i)];
    return total / static_cast<double>(n);
}

double diffusion_loss_grad64(const DenoiserArch& arch, const nn::ParamLayout& layout,
                             std::span<const double> params64, std::span<const LossItem> batch,
                             const NoiseSchedule& sched, RngKey key, double p_uncond,
                             double* grads) {
    if (batch.empty()) throw ConfigError("loss batch is empty");
    if (params64.size() != layout.total) {
        throw ShapeError("64-bit parameter vector does not match layout");
    }
    const int d = arch.input_dim();
    const size_t dd = static_cast<size_t>(d);

    // Double view of the affine stack, mirroring build_chain.
    std::vector<nn::ChainLayer<double>> chain;
    for (int l = 0; l < arch.n_hidden; ++l) {
        nn::ChainLayer<double> ly;
        ly.name = "h" + std::to_string(l);
        ly.d_in = l == 0 ? d : arch.width;
        ly.d_out = arch.width;
        ly.w = params64.data() + layout.find(ly.name + ".w").offset;
        ly.b = params64.data() + layout.find(ly.name + ".b").offset;
        ly.act = true;
        chain.push_back(std::move(ly));
    }
    nn::ChainLayer<double> out;
    out.name = "out";
    out.d_in = arch.width;
    out.d_out = d;
    out.w = params64.data() + layout.find("out.w").offset;
    out.b = params64.data() + layout.find("out.b").offset;
    chain.push_back(std::move(out));

    nn::ChainScratch<double> sc;
    sc.prepare(chain);
    std::vector<nn::ChainGrad<double>> cg(chain.size());
    if (grads) {
        for (size_t l = 0; l < chain.size(); ++l) {
            cg[l].dw = grads + layout.find(chain[l].name + ".w").offset;
            cg[l].db = grads + layout.find(chain[l].name + ".b").offset;
        }
    }
    const size_t emb_off = layout.find("class_emb").offset;
    const size_t tw_off = layout.find("time_w").offset;
    const size_t tb_off = layout.find("time_b").offset;

    std::vector<float> eps32(dd);
    std::vector<double> eps(dd), z_t(dd), x_in(dd), feat(static_cast<size_t>(arch.time_features));
    std::vector<double> time_emb(dd), dy(dd), d_in(dd);

    double total = 0.0;
    for (size_t i = 0; i < batch.size(); ++i) {
        check_label(batch[i].label, arch.n_classes);
        int t = 0, token = 0;
        draw_item_noise(key.child(static_cast<uint64_t>(i)), sched, p_uncond, batch[i].label,
                        arch.null_token(), eps32, t, token);
        for (size_t j = 0; j < dd; ++j) eps[j] = static_cast<double>(eps32[j]);

        const double ab = sched.alpha_bar[static_cast<size_t>(t - 1)];
        const double c0 = std::sqrt(ab);
        const double c1 = std::sqrt(1.0 - ab);
        for (size_t j = 0; j < dd; ++j) {
            z_t[j] = c0 * static_cast<double>(batch[i].pixels[j]) + c1 * eps[j];
        }

        const int half = arch.time_features / 2;
        for (int j = 0; j < half; ++j) {
            const double scale = half > 1 ? std::exp(-std::log(10000.0) * static_cast<double>(j) /
                                                     static_cast<double>(half - 1))
                                          : 1.0;
            feat[static_cast<size_t>(j)] = std::sin(static_cast<double>(t) * scale);
            feat[static_cast<size_t>(half + j)] = std::cos(static_cast<double>(t) * scale);
        }
        affine(params64.data() + tw_off, params64.data() + tb_off, feat.data(), time_emb.data(), d,
               arch.time_features);
        const double* emb = params64.data() + emb_off + static_cast<size_t>(token) * dd;
        for (size_t j = 0; j < dd; ++j) x_in[j] = z_t[j] + emb[j] + time_emb[j];

        nn::chain_forward(chain, x_in.data(), sc);
        total += mse(sc.x.back().data(), eps.data(), d);
        if (grads) {
            mse_backward(sc.x.back().data(), eps.data(), dy.data(), d);
            nn::chain_backward(chain, sc, dy.data(), cg, d_in.data());
            axpy(grads + emb_off + static_cast<size_t>(token) * dd, d_in.data(), d, 1.0);
            scaled_outer_acc(grads + tw_off, d_in.data(), feat.data(), d, arch.time_features, 1.0);
            axpy(grads + tb_off, d_in.data(), d, 1.0);
        }
    }
    const double inv_n = 1.0 / static_cast<double>(batch.size());
    if (grads) {
        for (size_t j = 0; j < layout.total; ++j) grads[j] *= inv_n;
    }
    return total * inv_n;
}

DenoiserWeights train_base(const data::Dataset& ds, const DenoiserArch& arch,
                           const TrainBaseConfig& cfg, RngKey key, std::vector<double>* trace) {
    ds.validate();
    if (ds.items.empty()) throw ConfigError("training dataset is empty");
    if (ds.pixel_count() != arch.input_dim()) {
        throw ShapeError("dataset images are " + std::to_string(ds.pixel_count()) +
                         " pixels, network expects " + std::to_string(arch.input_dim()));
    }
    std::vector<bool> seen(static_cast<size_t>(arch.n_classes), false);
    for (const auto& it : ds.items) {
        check_label(static_cast<int>(it.label), arch.n_classes);
        seen[it.label] = true;
    }
    for (int c = 0; c < arch.n_classes; ++c) {
        if (!seen[static_cast<size_t>(c)]) {
            throw ConfigError("training dataset is missing class " + std::to_string(c));
        }
    }
    if (cfg.steps < 1 || cfg.batch_size < 1) throw ConfigError("steps and batch size must be positive");

    DenoiserWeights w = init_denoiser(arch, key.child("init"));
    const NoiseSchedule sched = arch.schedule();
    optim::AdamWState<float> opt(w.layout.total);
    optim::AdamWConfig ocfg;
    ocfg.lr = cfg.lr;
    ocfg.weight_decay = cfg.weight_decay;
    const long warmup = std::lround(cfg.warmup_frac * static_cast<double>(cfg.steps));

    std::vector<float> grads(w.layout.total);
    std::vector<LossItem> batch(static_cast<size_t>(cfg.batch_size));
    const RngKey batch_key = key.child("batch");
    const RngKey loss_key = key.child("loss");

    for (long s = 0; s < cfg.steps; ++s) {
        RngStream bs(batch_key.child(static_cast<uint64_t>(s)));
        for (int i = 0; i < cfg.batch_size; ++i) {
            const auto& item = ds.items[bs.uniform_below(ds.items.size())];
            batch[static_cast<size_t>(i)] = {item.pixels.data(), static_cast<int>(item.label)};
        }
        std::fill(grads.begin(), grads.end(), 0.0f);
        const double loss = diffusion_loss_grad(w, batch, sched,
                                                loss_key.child(static_cast<uint64_t>(s)),
                                                cfg.p_uncond, grads.data());
        if (!std::isfinite(loss)) {
            throw DivergenceError("training loss became non-finite at step " + std::to_string(s));
        }
        const double lr_now = optim::cosine_lr(s, cfg.steps, warmup, cfg.lr);
        optim::adamw_step(w.params.data(), grads.data(), opt, ocfg, lr_now, &w.layout);
        if (trace) trace->push_back(loss);
    }
    return w;
}

// ===========================================================================
// Ancestral sampler with classifier-free guidance
// ===========================================================================

namespace {

Tensor sample_core(const DenoiseFn& fn, int input_dim, int image_hw, int cls, int null_token,
                   double w, const NoiseSchedule& sched, RngKey key) {
    const size_t d = static_cast<size_t>(input_dim);
    RngStream st(key);
    std::vector<float> z(d), noise(d);
    std::vector<float> eps_hat(d), eps_c(d), eps_u(d);
    st.fill_normal(z);

    const float wf = static_cast<float>(w);
    for (int t = sched.T; t >= 1; --t) {
        // w==1 and w==0 collapse to a single branch so those runs are exactly
        // the single-branch bytes, not an algebraic near-miss.
        if (w == 1.0) {
            fn(z.data(), t, cls, eps_hat.data());
        } else if (w == 0.0) {
            fn(z.data(), t, null_token, eps_hat.data());
        } else {
            fn(z.data(), t, cls, eps_c.data());
            fn(z.data(), t, null_token, eps_u.data());
            for (size_t i = 0; i < d; ++i) eps_hat[i] = eps_u[i] + wf * (eps_c[i] - eps_u[i]);
        }
        const size_t ti = static_cast<size_t>(t - 1);
        const double ab = sched.alpha_bar[ti];
        const float c1 = static_cast<float>(1.0 / std::sqrt(sched.alpha[ti]));
        const float c2 = static_cast<float>(sched.beta[ti] / std::sqrt(1.0 - ab));
        for (size_t i = 0; i < d; ++i) z[i] = c1 * (z[i] - c2 * eps_hat[i]);
        if (t > 1) {
            const double ab_prev = sched.alpha_bar[ti - 1];
            const double var = (1.0 - ab_prev) / (1.0 - ab) * sched.beta[ti];
            const float sigma = static_cast<float>(std::sqrt(var));
            st.fill_normal(noise);
            for (size_t i = 0; i < d; ++i) z[i] += sigma * noise[i];
        }
    }
    for (auto& v : z) v = std::clamp(v, 0.0f, 1.0f);
    Tensor img({image_hw, image_hw});
    img.data = std::move(z);
    return img;
}

}  // namespace

Tensor sample(const DenoiserWeights& w, int cls, const GuidanceConfig& g,
              const NoiseSchedule& sched, RngKey key, const BranchOverlay* overlay) {
    check_label(cls, w.arch.n_classes);
    if (g.w < 0.0) throw ConfigError("guidance scale must be >= 0");
    auto chain = build_chain(w, overlay);
    DenoiseScratch sc;
    const DenoiseFn fn = [&](const float* z_t, int t, int token, float* out) {
        denoise(w, chain, z_t, t, token, out, sc);
    };
    return sample_core(fn, w.arch.input_dim(), w.arch.image_hw, cls, w.arch.null_token(), g.w,
                       sched, key);
}

Tensor sample_with(const DenoiseFn& fn, int input_dim, int image_hw, int cls, int null_token,
                   double w, const NoiseSchedule& sched, RngKey key) {
    return sample_core(fn, input_dim, image_hw, cls, null_token, w, sched, key);
}

// ===========================================================================
// Checkpoint container
// ===========================================================================

void save_checkpoint(const std::filesystem::path& path, const std::string& desc_json,
                     std::span<const float> params) {
    io::BinWriter bw;
    bw.magic("LFTM");
    bw.u32(1);
    bw.u32(static_cast<uint32_t>(desc_json.size()));
    bw.raw(desc_json.data(), desc_json.size());
    bw.f32_array(params);
    bw.save(path);
}

std::pair<std::string, std::vector<float>> load_checkpoint(const std::filesystem::path& path) {
    io::BinReader br = io::BinReader::open(path);
    br.expect_magic("LFTM");
    const uint32_t version = br.u32();
    if (version != 1) {
        throw FormatError(path.string() + ": unsupported checkpoint version " +
                          std::to_string(version));
    }
    const uint32_t jlen = br.u32();
    std::string desc = br.raw_str(jlen);
    return {desc, br.f32_rest()};
}

void save_denoiser(const std::filesystem::path& path, const DenoiserWeights& w) {
    if (w.params.size() != w.layout.total) {
        throw ShapeError("parameter vector does not match layout");
    }
    save_checkpoint(path, w.arch.to_json(), w.params);
}

DenoiserWeights load_denoiser(const std::filesystem::path& path) {
    auto [desc, params] = load_checkpoint(path);
    DenoiserWeights w;
    w.arch = DenoiserArch::from_json(desc);
    w.layout = w.arch.layout();
    w.params = std::move(params);
    if (w.params.size() != w.layout.total) {
        throw FormatError(path.string() + ": parameter payload has " +
                          std::to_string(w.params.size()) + " values, architecture needs " +
                          std::to_string(w.layout.total));
    }
    return w;
}

}  // namespace loft::diff
