#include "loft/lora.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "loft/io.hpp"
#include "loft/kernels.hpp"
#include "loft/optim.hpp"

namespace loft::lora {

using namespace loft::kern;

// ===========================================================================
// Adapter construction
// ===========================================================================

void LoraAdapter::validate() const {
    if (rank < 1) throw ShapeError("adapter rank must be >= 1");
    if (layers.empty()) throw ShapeError("adapter has no layers");
    for (const auto& l : layers) {
        if (l.name.empty()) throw ShapeError("adapter layer with empty name");
        if (rank > std::min(l.d_out, l.d_in)) {
            throw ShapeError("rank " + std::to_string(rank) + " exceeds min dimension of layer '" +
                             l.name + "'");
        }
        if (l.B.size() != static_cast<size_t>(l.d_out) * static_cast<size_t>(rank) ||
            l.A.size() != static_cast<size_t>(rank) * static_cast<size_t>(l.d_in)) {
            throw ShapeError("factor sizes inconsistent in layer '" + l.name + "'");
        }
    }
}

LoraAdapter init_adapter(const diff::DenoiserArch& arch, int rank, uint32_t class_label,
                         uint64_t source_id, RngKey key) {
    if (rank < 1) throw ConfigError("adapter rank must be >= 1");
    LoraAdapter a;
    a.source_id = source_id;
    a.class_label = class_label;
    a.rank = rank;
    RngStream st(key);
    for (int l = 0; l < arch.n_hidden; ++l) {
        LoraAdapter::Layer layer;
        layer.name = "h" + std::to_string(l);
        layer.d_in = l == 0 ? arch.input_dim() : arch.width;
        layer.d_out = arch.width;
        if (rank > std::min(layer.d_out, layer.d_in)) {
            throw ConfigError("rank " + std::to_string(rank) + " exceeds min dimension of layer '" +
                              layer.name + "'");
        }
        layer.B.assign(static_cast<size_t>(layer.d_out) * static_cast<size_t>(rank), 0.0f);
        layer.A.resize(static_cast<size_t>(rank) * static_cast<size_t>(layer.d_in));
        const double std_a = std::sqrt(1.0 / static_cast<double>(layer.d_in));
        for (auto& v : layer.A) v = static_cast<float>(std_a * st.normal());
        a.layers.push_back(std::move(layer));
    }
    return a;
}

// ===========================================================================
// Fusion
// ===========================================================================

void FusionSpec::validate() const {
    if (adapters.empty()) throw ConfigError("fusion needs at least one adapter");
    if (adapters.size() != weights.size()) {
        throw ConfigError("fusion has " + std::to_string(adapters.size()) + " adapters but " +
                          std::to_string(weights.size()) + " weights");
    }
    double sum = 0.0;
    for (double w : weights) {
        if (!(w >= 0.0)) throw ConfigError("fusion weights must be non-negative");
        sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-6) {
        throw ConfigError("fusion weights sum to " + io::fmt_g9(sum) + ", expected 1");
    }
    const auto* first = adapters.front();
    first->validate();
    for (const auto* a : adapters) {
        a->validate();
        if (a->rank != first->rank) throw ConfigError("fused adapters disagree on rank");
        if (a->class_label != first->class_label) {
            throw ConfigError("fused adapters belong to different classes");
        }
        if (a->layers.size() != first->layers.size()) {
            throw ConfigError("fused adapters disagree on layer set");
        }
        for (size_t l = 0; l < a->layers.size(); ++l) {
            if (a->layers[l].name != first->layers[l].name ||
                a->layers[l].d_out != first->layers[l].d_out ||
                a->layers[l].d_in != first->layers[l].d_in) {
                throw ConfigError("fused adapters disagree on layer set");
            }
        }
    }
}

namespace {

// Index of the named layer within the adapters' shared layer list.
size_t adapted_layer_index(const FusionSpec& spec, const std::string& layer_name) {
    const auto& layers = spec.adapters.front()->layers;
    for (size_t l = 0; l < layers.size(); ++l) {
        if (layers[l].name == layer_name) return l;
    }
    throw ShapeError("layer '" + layer_name + "' is not in the adaptation set");
}

}  // namespace

diff::BranchOverlay make_overlay(const diff::DenoiserWeights& base, const FusionSpec& spec) {
    spec.validate();
    const auto names = base.arch.hidden_layer_names();
    const auto& ref = spec.adapters.front()->layers;
    if (ref.size() != names.size()) {
        throw ShapeError("adapters cover " + std::to_string(ref.size()) +
                         " layers, network adapts " + std::to_string(names.size()));
    }
    diff::BranchOverlay ov;
    ov.per_hidden.resize(names.size());
    for (size_t l = 0; l < names.size(); ++l) {
        if (ref[l].name != names[l]) {
            throw ShapeError("adapter layer '" + ref[l].name + "' does not match network layer '" +
                             names[l] + "'");
        }
        const int d_in = l == 0 ? base.arch.input_dim() : base.arch.width;
        if (ref[l].d_out != base.arch.width || ref[l].d_in != d_in) {
            throw ShapeError("adapter layer '" + ref[l].name + "' has wrong dimensions");
        }
        for (size_t i = 0; i < spec.adapters.size(); ++i) {
            const auto& al = spec.adapters[i]->layers[l];
            ov.per_hidden[l].push_back({al.B.data(), al.A.data(), spec.adapters[i]->rank,
                                        static_cast<float>(spec.weights[i]) *
                                            spec.adapters[i]->scale});
        }
    }
    return ov;
}

std::vector<float> fused_forward(const diff::DenoiserWeights& base, const std::string& layer_name,
                                 const FusionSpec& spec, std::span<const float> h_in) {
    spec.validate();
    const size_t li = adapted_layer_index(spec, layer_name);
    const auto& ref = spec.adapters.front()->layers[li];
    if (h_in.size() != static_cast<size_t>(ref.d_in)) {
        throw ShapeError("input has " + std::to_string(h_in.size()) + " values, layer '" +
                         layer_name + "' expects " + std::to_string(ref.d_in));
    }
    const float* w = base.params.data() + base.layout.find(layer_name + ".w").offset;
    const float* b = base.params.data() + base.layout.find(layer_name + ".b").offset;
    std::vector<float> out(static_cast<size_t>(ref.d_out));
    affine(w, b, h_in.data(), out.data(), ref.d_out, ref.d_in);
    std::vector<float> u(static_cast<size_t>(spec.adapters.front()->rank));
    for (size_t i = 0; i < spec.adapters.size(); ++i) {
        const float wt = static_cast<float>(spec.weights[i]) * spec.adapters[i]->scale;
        if (wt == 0.0f) continue;
        const auto& al = spec.adapters[i]->layers[li];
        affine<float>(al.A.data(), nullptr, h_in.data(), u.data(), spec.adapters[i]->rank,
                      al.d_in);
        matvec_acc(al.B.data(), u.data(), out.data(), al.d_out, spec.adapters[i]->rank, wt);
    }
    return out;
}

Tensor64 materialize_delta(const FusionSpec& spec, const std::string& layer_name) {
    spec.validate();
    const size_t li = adapted_layer_index(spec, layer_name);
    const auto& ref = spec.adapters.front()->layers[li];
    Tensor64 delta({ref.d_out, ref.d_in});
    for (size_t i = 0; i < spec.adapters.size(); ++i) {
        const auto& al = spec.adapters[i]->layers[li];
        const double wt = spec.weights[i] * static_cast<double>(spec.adapters[i]->scale);
        const int r = spec.adapters[i]->rank;
        for (int o = 0; o < al.d_out; ++o) {
            for (int j = 0; j < al.d_in; ++j) {
                double acc = 0.0;
                for (int q = 0; q < r; ++q) {
                    acc += static_cast<double>(al.B[static_cast<size_t>(o * r + q)]) *
                           static_cast<double>(al.A[static_cast<size_t>(q * al.d_in + j)]);
                }
                delta.data[static_cast<size_t>(o) * static_cast<size_t>(al.d_in) +
                           static_cast<size_t>(j)] += wt * acc;
            }
        }
    }
    return delta;
}

// ===========================================================================
// Lambda sampling
// ===========================================================================

void LambdaSampler::validate() const {
    switch (kind) {
        case Kind::Fixed:
            if (!(lambda >= 0.0 && lambda <= 1.0)) {
                throw ConfigError("fixed lambda must lie in [0,1]");
            }
            break;
        case Kind::Beta:
            if (!(alpha > 0.0)) throw ConfigError("beta concentration must be positive");
            break;
        case Kind::Explicit: {
            if (vec.empty()) throw ConfigError("explicit weight vector is empty");
            double sum = 0.0;
            for (double w : vec) {
                if (!(w >= 0.0)) throw ConfigError("explicit weights must be non-negative");
                sum += w;
            }
            // Vectors are normalized at sampling time, so near-uniform
            // shorthand like 0.33,0.33,0.33 is accepted as written.
            if (!(sum > 0.0)) throw ConfigError("explicit weights sum to zero");
            break;
        }
    }
}

std::string LambdaSampler::describe() const {
    switch (kind) {
        case Kind::Fixed:
            return "fixed(" + io::fmt_g9(lambda) + ")";
        case Kind::Beta:
            return "beta(" + io::fmt_g9(alpha) + ")";
        case Kind::Explicit: {
            std::string s = "vector(";
            for (size_t i = 0; i < vec.size(); ++i) {
                if (i) s += ",";
                s += io::fmt_g9(vec[i]);
            }
            return s + ")";
        }
    }
    return "?";
}

double gamma_draw(RngStream& st, double alpha) {
    if (!(alpha > 0.0)) throw ConfigError("gamma shape must be positive");
    if (alpha < 1.0) {
        // Boost to shape alpha+1, then scale by a uniform power.
        const double g = gamma_draw(st, alpha + 1.0);
        const double u = 1.0 - st.uniform();  // keep strictly positive
        return g * std::pow(u, 1.0 / alpha);
    }
    // Marsaglia-Tsang squeeze method.
    const double d = alpha - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
        double x, v;
        do {
            x = st.normal();
            v = 1.0 + c * x;
        } while (v <= 0.0);
        v = v * v * v;
        const double u = 1.0 - st.uniform();
        if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
        if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
}

FusionSpec sample_fusion(std::span<const LoraAdapter* const> adapters,
                         const LambdaSampler& sampler, RngKey key) {
    sampler.validate();
    const size_t n = adapters.size();
    if (n == 0) throw ConfigError("no adapters available for fusion");

    FusionSpec spec;
    RngStream st(key);
    if (sampler.kind == LambdaSampler::Kind::Explicit) {
        const size_t k = sampler.vec.size();
        if (k > n) {
            throw ConfigError("explicit weight vector needs " + std::to_string(k) +
                              " adapters, only " + std::to_string(n) + " available");
        }
        std::vector<size_t> idx(n);
        std::iota(idx.begin(), idx.end(), size_t{0});
        for (size_t i = 0; i < k; ++i) {
            const size_t j = i + st.uniform_below(n - i);
            std::swap(idx[i], idx[j]);
            spec.adapters.push_back(adapters[idx[i]]);
        }
        double sum = 0.0;
        for (double w : sampler.vec) sum += w;
        spec.weights = sampler.vec;
        for (double& w : spec.weights) w /= sum;
        spec.validate();
        return spec;
    }

    if (n == 1) {
        spec.adapters = {adapters[0]};
        spec.weights = {1.0};
        spec.validate();
        return spec;
    }

    // Ordered pair of distinct indices, uniform; draw order (i, j, lambda)
    // is part of the artifact contract.
    const size_t i = st.uniform_below(n);
    size_t j = st.uniform_below(n - 1);
    if (j >= i) ++j;
    double lambda = sampler.lambda;
    if (sampler.kind == LambdaSampler::Kind::Beta) {
        const double g1 = gamma_draw(st, sampler.alpha);
        const double g2 = gamma_draw(st, sampler.alpha);
        lambda = g1 / (g1 + g2);
    }
    spec.adapters = {adapters[i], adapters[j]};
    spec.weights = {lambda, 1.0 - lambda};
    spec.validate();
    return spec;
}

// ===========================================================================
// Fine-tuning
// ===========================================================================

LoraAdapter finetune_class_set(const diff::DenoiserWeights& base,
                               std::span<const data::Item> images, int label,
                               const FinetuneConfig& cfg, RngKey key,
                               std::vector<double>* trace) {
    if (images.empty()) throw ConfigError("fine-tune needs at least one image");
    if (label < 0 || label >= base.arch.n_classes) {
        throw ShapeError("label " + std::to_string(label) + " out of range");
    }
    for (const auto& im : images) {
        if (static_cast<int>(im.label) != label) {
            throw ConfigError("fine-tune set mixes labels (" + std::to_string(im.label) +
                              " vs " + std::to_string(label) + ")");
        }
        if (im.pixels.size() != static_cast<size_t>(base.arch.input_dim())) {
            throw ShapeError("fine-tune image pixel count mismatch");
        }
    }
    if (cfg.steps < 0) throw ConfigError("negative step count");

    uint64_t source_id = images[0].id;
    if (images.size() > 1) {
        std::vector<uint64_t> ids;
        for (const auto& im : images) ids.push_back(im.id);
        source_id = io::fnv1a64(ids.data(), ids.size() * sizeof(uint64_t));
    }
    LoraAdapter a = init_adapter(base.arch, cfg.rank, static_cast<uint32_t>(label), source_id,
                                 key.child("init"));
    if (cfg.steps == 0) return a;

    // Flat view of the trainable factors, ordered like the adapter file.
    nn::ParamLayout lay;
    for (const auto& l : a.layers) {
        lay.add(l.name + ".B", l.B.size());
        lay.add(l.name + ".A", l.A.size());
    }
    std::vector<float> params(lay.total);
    {
        size_t off = 0;
        for (const auto& l : a.layers) {
            std::memcpy(params.data() + off, l.B.data(), l.B.size() * sizeof(float));
            off += l.B.size();
            std::memcpy(params.data() + off, l.A.data(), l.A.size() * sizeof(float));
            off += l.A.size();
        }
    }

    // Chain with a single unit-weight branch per hidden layer, pointing into
    // the flat parameter vector; base weights and embeddings stay untouched.
    diff::BranchOverlay ov;
    ov.per_hidden.resize(a.layers.size());
    for (size_t l = 0; l < a.layers.size(); ++l) {
        const auto& seg_b = lay.find(a.layers[l].name + ".B");
        const auto& seg_a = lay.find(a.layers[l].name + ".A");
        ov.per_hidden[l].push_back(
            {params.data() + seg_b.offset, params.data() + seg_a.offset, a.rank, a.scale});
    }
    auto chain = diff::build_chain(base, &ov);

    std::vector<float> grads(lay.total);
    std::vector<nn::ChainGrad<float>> cg(chain.size());
    for (size_t l = 0; l < a.layers.size(); ++l) {
        const auto& seg_b = lay.find(a.layers[l].name + ".B");
        const auto& seg_a = lay.find(a.layers[l].name + ".A");
        cg[l].branches.push_back({grads.data() + seg_b.offset, grads.data() + seg_a.offset});
    }

    const diff::NoiseSchedule sched = base.arch.schedule();
    optim::AdamWState<float> opt(lay.total);
    optim::AdamWConfig ocfg;
    ocfg.lr = cfg.lr;
    ocfg.weight_decay = cfg.weight_decay;
    const long warmup = std::lround(cfg.warmup_frac * static_cast<double>(cfg.steps));

    const int d = base.arch.input_dim();
    diff::DenoiseScratch sc;
    std::vector<float> eps(static_cast<size_t>(d)), z_t(static_cast<size_t>(d));
    std::vector<float> eps_hat(static_cast<size_t>(d)), dy(static_cast<size_t>(d));
    const RngKey loss_key = key.child("loss");
    const int k = static_cast<int>(images.size());

    for (long s = 0; s < cfg.steps; ++s) {
        std::fill(grads.begin(), grads.end(), 0.0f);
        const RngKey step_key = loss_key.child(static_cast<uint64_t>(s));
        double loss = 0.0;
        for (int i = 0; i < k; ++i) {
            int t = 0, token = 0;
            // Conditioning always uses the class token: dropout is a
            // pretraining device, not part of adapter fitting.
            diff::draw_item_noise(step_key.child(static_cast<uint64_t>(i)), sched, 0.0, label,
                                  base.arch.null_token(), eps, t, token);
            diff::q_sample(std::span<const float>(images[static_cast<size_t>(i)].pixels.data(),
                                                  static_cast<size_t>(d)),
                           t, eps, sched, z_t);
            diff::denoise(base, chain, z_t.data(), t, token, eps_hat.data(), sc);
            loss += mse(eps_hat.data(), eps.data(), d);
            mse_backward(eps_hat.data(), eps.data(), dy.data(), d);
            nn::chain_backward(chain, sc.chain, dy.data(), cg, static_cast<float*>(nullptr));
        }
        loss /= k;
        if (!std::isfinite(loss)) {
            throw DivergenceError("adapter fine-tune diverged at step " + std::to_string(s));
        }
        const float inv_k = static_cast<float>(1.0 / static_cast<double>(k));
        for (auto& g : grads) g *= inv_k;
        const double lr_now = optim::cosine_lr(s, cfg.steps, warmup, cfg.lr);
        optim::adamw_step(params.data(), grads.data(), opt, ocfg, lr_now, &lay);
        if (trace) trace->push_back(loss);
    }

    // Copy the trained factors back into the adapter.
    {
        size_t off = 0;
        for (auto& l : a.layers) {
            std::memcpy(l.B.data(), params.data() + off, l.B.size() * sizeof(float));
            off += l.B.size();
            std::memcpy(l.A.data(), params.data() + off, l.A.size() * sizeof(float));
            off += l.A.size();
        }
    }
    return a;
}

LoraAdapter finetune_single_image(const diff::DenoiserWeights& base, const data::Item& image,
                                  int label, const FinetuneConfig& cfg, RngKey key,
                                  std::vector<double>* trace) {
    return finetune_class_set(base, std::span<const data::Item>(&image, 1), label, cfg, key,
                              trace);
}

// ===========================================================================
// Persistence
// ===========================================================================

void save_adapter(const std::filesystem::path& path, const LoraAdapter& a) {
    a.validate();
    io::BinWriter bw;
    bw.magic("LFTA");
    bw.u32(1);
    bw.u32(a.class_label);
    bw.u64(a.source_id);
    bw.u32(static_cast<uint32_t>(a.rank));
    bw.u32(static_cast<uint32_t>(a.layers.size()));
    for (const auto& l : a.layers) {
        bw.str(l.name);
        bw.u32(static_cast<uint32_t>(l.d_out));
        bw.u32(static_cast<uint32_t>(l.d_in));
        bw.f32_array(l.B);
        bw.f32_array(l.A);
    }
    bw.save(path);
}

LoraAdapter load_adapter(const std::filesystem::path& path) {
    io::BinReader br = io::BinReader::open(path);
    br.expect_magic("LFTA");
    const uint32_t version = br.u32();
    if (version != 1) {
        throw FormatError(path.string() + ": unsupported adapter version " +
                          std::to_string(version));
    }
    LoraAdapter a;
    a.class_label = br.u32();
    a.source_id = br.u64();
    a.rank = static_cast<int>(br.u32());
    const uint32_t n_layers = br.u32();
    if (a.rank < 1 || a.rank > 4096 || n_layers == 0 || n_layers > 1024) {
        throw FormatError(path.string() + ": implausible adapter header");
    }
    for (uint32_t l = 0; l < n_layers; ++l) {
        LoraAdapter::Layer layer;
        layer.name = br.str();
        layer.d_out = static_cast<int>(br.u32());
        layer.d_in = static_cast<int>(br.u32());
        if (layer.d_out < 1 || layer.d_in < 1 || a.rank > std::min(layer.d_out, layer.d_in)) {
            throw FormatError(path.string() + ": inconsistent shape for layer '" + layer.name +
                              "'");
        }
        layer.B.resize(static_cast<size_t>(layer.d_out) * static_cast<size_t>(a.rank));
        layer.A.resize(static_cast<size_t>(a.rank) * static_cast<size_t>(layer.d_in));
        br.f32_array(layer.B);
        br.f32_array(layer.A);
        a.layers.push_back(std::move(layer));
    }
    br.expect_end();
    a.validate();
    return a;
}

}  // namespace loft::lora
