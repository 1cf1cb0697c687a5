#include "loft/pipelines.hpp"

#include <json.hpp>

#include <algorithm>

#include "loft/datagen.hpp"
#include "loft/errors.hpp"
#include "loft/io.hpp"
#include "loft/par.hpp"

namespace loft::pipe {

using nlohmann::json;

// ===========================================================================
// Method tags
// ===========================================================================

std::string GenMethod::tag() const {
    switch (kind) {
        case Kind::ClassCond:
            return "classcond";
        case Kind::PerClassLoRA:
            return "perclass";
        case Kind::Loft:
            break;
    }
    std::string t = "loft-";
    switch (sampler.kind) {
        case lora::LambdaSampler::Kind::Fixed:
            t += "fixed" + io::fmt_g9(sampler.lambda);
            break;
        case lora::LambdaSampler::Kind::Beta:
            t += "beta" + io::fmt_g9(sampler.alpha);
            break;
        case lora::LambdaSampler::Kind::Explicit:
            t += "vec";
            for (size_t i = 0; i < sampler.vec.size(); ++i) {
                t += (i ? "-" : "") + io::fmt_g9(sampler.vec[i]);
            }
            break;
    }
    return t;
}

// ===========================================================================
// Provenance manifest
// ===========================================================================

std::string SyntheticDataset::manifest_json() const {
    json images = json::array();
    for (size_t i = 0; i < ds.items.size(); ++i) {
        const auto& it = ds.items[i];
        json rec;
        rec["id"] = it.id;
        rec["label"] = it.label;
        if (i < fusion.size() && !fusion[i].adapter_ids.empty()) {
            rec["adapters"] = fusion[i].adapter_ids;
            rec["weights"] = fusion[i].weights;
        }
        images.push_back(std::move(rec));
    }
    json m;
    m["method"] = method_tag;
    m["seed"] = seed;
    m["base_hash"] = io::hash_hex(base_hash);
    m["count"] = ds.items.size();
    m["images"] = std::move(images);
    return m.dump(2) + "\n";
}

// ===========================================================================
// Generation
// ===========================================================================

namespace {

// Adapters grouped by class label; validates the per-method availability
// invariants and reports absent classes by name-free label list.
std::vector<std::vector<const lora::LoraAdapter*>> group_adapters(
    const GenMethod& method, int n_classes, std::span<const lora::LoraAdapter* const> adapters) {
    std::vector<std::vector<const lora::LoraAdapter*>> by_class(
        static_cast<size_t>(n_classes));
    for (const auto* a : adapters) {
        if (a == nullptr) throw ConfigError("null adapter pointer");
        if (a->class_label >= static_cast<uint32_t>(n_classes)) {
            throw ConfigError("adapter class " + std::to_string(a->class_label) +
                              " outside the model's " + std::to_string(n_classes) + " classes");
        }
        by_class[a->class_label].push_back(a);
    }

    if (method.kind == GenMethod::Kind::ClassCond) {
        if (!adapters.empty()) {
            throw ConfigError("class-conditional generation takes no adapters");
        }
        return by_class;
    }

    std::string missing;
    for (int c = 0; c < n_classes; ++c) {
        if (by_class[static_cast<size_t>(c)].empty()) {
            missing += (missing.empty() ? "" : ", ") + std::to_string(c);
        }
    }
    if (!missing.empty()) {
        throw ArtifactNotFound("no adapter for classes: " + missing);
    }
    if (method.kind == GenMethod::Kind::PerClassLoRA) {
        for (int c = 0; c < n_classes; ++c) {
            if (by_class[static_cast<size_t>(c)].size() != 1) {
                throw ConfigError("per-class generation needs exactly one adapter per class; class " +
                                  std::to_string(c) + " has " +
                                  std::to_string(by_class[static_cast<size_t>(c)].size()));
            }
        }
    }
    return by_class;
}

}  // namespace

SyntheticDataset generate_dataset(const GenMethod& method, int s_per_class,
                                  const diff::DenoiserWeights& base,
                                  std::span<const lora::LoraAdapter* const> adapters,
                                  uint64_t seed) {
    if (s_per_class < 1) throw ConfigError("need at least one image per class");
    if (method.kind == GenMethod::Kind::Loft) method.sampler.validate();
    const int C = base.arch.n_classes;
    const auto by_class = group_adapters(method, C, adapters);
    const diff::NoiseSchedule sched = base.arch.schedule();

    SyntheticDataset out;
    out.method_tag = method.tag();
    out.base_hash = diff::weights_hash(base);
    out.seed = seed;
    out.ds.H = base.arch.image_hw;
    out.ds.W = base.arch.image_hw;
    const size_t total = static_cast<size_t>(C) * static_cast<size_t>(s_per_class);
    out.ds.items.resize(total);
    out.fusion.resize(total);

    const RngKey root = RngKey::root(seed).child("gen");
    par::parallel_for(static_cast<int>(total), [&](int j) {
        const int cls = j / s_per_class;
        const int idx = j % s_per_class;
        const RngKey k = root.child(static_cast<uint64_t>(cls)).child(static_cast<uint64_t>(idx));

        lora::FusionSpec spec;
        const diff::BranchOverlay* overlay_ptr = nullptr;
        diff::BranchOverlay overlay;
        if (method.kind == GenMethod::Kind::PerClassLoRA) {
            spec.adapters = {by_class[static_cast<size_t>(cls)][0]};
            spec.weights = {1.0};
        } else if (method.kind == GenMethod::Kind::Loft) {
            spec = lora::sample_fusion(by_class[static_cast<size_t>(cls)], method.sampler,
                                       k.child("fuse"));
        }
        if (!spec.adapters.empty()) {
            overlay = lora::make_overlay(base, spec);
            overlay_ptr = &overlay;
            auto& rec = out.fusion[static_cast<size_t>(j)];
            for (const auto* a : spec.adapters) rec.adapter_ids.push_back(a->source_id);
            rec.weights = spec.weights;
        }

        Tensor img = diff::sample(base, cls, method.guidance, sched, k.child("noise"), overlay_ptr);
        auto& item = out.ds.items[static_cast<size_t>(j)];
        item.id = k.child("id").state;
        item.label = static_cast<uint32_t>(cls);
        item.pixels = std::move(img.data);
    });
    out.ds.validate();
    return out;
}

// ===========================================================================
// Few-shot adaptation + generation
// ===========================================================================

LoftRunResult run_loft_end_to_end(const data::Dataset& pool, int k, int s_per_class,
                                  const diff::DenoiserWeights& base, const LoftRunConfig& cfg,
                                  uint64_t seed, const std::filesystem::path& out_dir) {
    LoftRunResult res;
    res.fewshot = gen::make_fewshot(pool, k, seed);
    const size_t n = res.fewshot.items.size();

    // Slot = position of the image within its class, so adapter keys do not
    // depend on how the few-shot set happens to be ordered globally.
    std::vector<std::pair<int, int>> slot_of(n);
    std::vector<int> seen(static_cast<size_t>(base.arch.n_classes), 0);
    for (size_t i = 0; i < n; ++i) {
        const int cls = static_cast<int>(res.fewshot.items[i].label);
        slot_of[i] = {cls, seen[static_cast<size_t>(cls)]++};
    }

    const RngKey lroot = RngKey::root(seed).child("lora");
    res.adapters.resize(n);
    par::parallel_for(static_cast<int>(n), [&](int i) {
        const auto [cls, slot] = slot_of[static_cast<size_t>(i)];
        const RngKey key =
            lroot.child(static_cast<uint64_t>(cls)).child(static_cast<uint64_t>(slot));
        res.adapters[static_cast<size_t>(i)] = lora::finetune_single_image(
            base, res.fewshot.items[static_cast<size_t>(i)], cls, cfg.finetune, key);
    });

    std::vector<const lora::LoraAdapter*> ptrs;
    ptrs.reserve(n);
    for (const auto& a : res.adapters) ptrs.push_back(&a);

    GenMethod method;
    method.kind = GenMethod::Kind::Loft;
    method.sampler = cfg.sampler;
    method.guidance = cfg.guidance;
    res.synth = generate_dataset(method, s_per_class, base, ptrs, seed);

    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        json adapter_list = json::array();
        for (size_t i = 0; i < n; ++i) {
            const auto [cls, slot] = slot_of[i];
            char name[64];
            std::snprintf(name, sizeof name, "adapter-c%d-%d.lfta", cls, slot);
            const auto path = out_dir / name;
            lora::save_adapter(path, res.adapters[i]);
            json a;
            a["file"] = std::string(name);
            a["class"] = cls;
            a["source_id"] = res.adapters[i].source_id;
            a["hash"] = io::hash_hex(io::hash_file(path));
            adapter_list.push_back(std::move(a));
        }
        const auto ds_path = out_dir / "synthetic.lfds";
        data::save_dataset(ds_path, res.synth.ds);

        json m = json::parse(res.synth.manifest_json());
        m["k"] = k;
        m["adapters"] = std::move(adapter_list);
        m["dataset"] = {{"file", "synthetic.lfds"},
                        {"hash", io::hash_hex(io::hash_file(ds_path))}};
        io::write_text(out_dir / "manifest.json", m.dump(2) + "\n");
    }
    return res;
}

}  // namespace loft::pipe
