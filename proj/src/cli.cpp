#include "loft/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <iostream>
#include <map>

#include "loft/analysis.hpp"
#include "loft/datagen.hpp"
#include "loft/downstream.hpp"
#include "loft/errors.hpp"
#include "loft/io.hpp"
#include "loft/par.hpp"

namespace loft::cli {

namespace fs = std::filesystem;
using nlohmann::json;

// The held-out test split and the judge live on their own fixed seeds so that
// every cell of every grid is scored against the same data.
constexpr uint64_t kTestSeed = 9001;
constexpr uint64_t kOracleSeed = 9002;

// ===========================================================================
// Helpers
// ===========================================================================

namespace {

struct Timer {
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
};

json artifact_entry(const fs::path& path) {
    json a;
    a["file"] = path.filename().string();
    a["hash"] = io::hash_hex(io::hash_file(path));
    return a;
}

// Per-command run manifest: configuration echo, seed, artifact hashes, wall
// time. The artifact hashes are the reproducible part; timings are not.
void write_cmd_manifest(const fs::path& path, const std::string& command,
                        const cfg::RunConfig& rc, uint64_t seed,
                        const std::vector<fs::path>& artifacts, double wall_seconds) {
    json m;
    m["command"] = command;
    m["seed"] = seed;
    m["config"] = rc.echo();
    json arts = json::array();
    for (const auto& p : artifacts) arts.push_back(artifact_entry(p));
    m["artifacts"] = std::move(arts);
    m["wall_seconds"] = wall_seconds;
    io::write_text(path, m.dump(2) + "\n");
}

// Default corpora, derived from the fixed regime tables.
data::Dataset default_pretrain_data(const cfg::RunConfig& rc, uint64_t seed) {
    return gen::make_dataset(gen::RegimeConfig::pretrain(), rc.pretrain_per_class, seed, "train",
                             rc.image_hw);
}
data::Dataset default_pool(const cfg::RunConfig& rc, uint64_t seed) {
    return gen::make_dataset(gen::RegimeConfig::downstream(), rc.pool_per_class, seed, "train",
                             rc.image_hw);
}
data::Dataset default_test(const cfg::RunConfig& rc) {
    return gen::make_dataset(gen::RegimeConfig::downstream(), rc.test_per_class, kTestSeed, "test",
                             rc.image_hw);
}
data::Dataset default_oracle_train(const cfg::RunConfig& rc) {
    return gen::make_dataset(gen::RegimeConfig::downstream(), rc.oracle_per_class, kOracleSeed,
                             "train", rc.image_hw);
}

// Adapter fitting shared by the lora-fit subcommand and the experiment
// runner. Mode "image" fits one adapter per few-shot image, mode "class" one
// adapter on each class's whole shot set. Keys depend only on (seed, class,
// slot) so the same artifacts come out regardless of who drives the fit.
struct FittedAdapters {
    std::vector<lora::LoraAdapter> adapters;
    std::vector<std::string> names;  // file basenames, aligned
};

FittedAdapters fit_adapters(const diff::DenoiserWeights& base, const data::Dataset& fewshot,
                            const std::string& mode, const lora::FinetuneConfig& fcfg,
                            uint64_t seed) {
    const int C = base.arch.n_classes;
    FittedAdapters out;
    if (mode == "image") {
        const size_t n = fewshot.items.size();
        std::vector<std::pair<int, int>> slot_of(n);
        std::vector<int> seen(static_cast<size_t>(C), 0);
        for (size_t i = 0; i < n; ++i) {
            const int cls = static_cast<int>(fewshot.items[i].label);
            slot_of[i] = {cls, seen[static_cast<size_t>(cls)]++};
        }
        out.adapters.resize(n);
        out.names.resize(n);
        const RngKey root = RngKey::root(seed).child("lora");
        par::parallel_for(static_cast<int>(n), [&](int i) {
            const auto [cls, slot] = slot_of[static_cast<size_t>(i)];
            const RngKey key =
                root.child(static_cast<uint64_t>(cls)).child(static_cast<uint64_t>(slot));
            out.adapters[static_cast<size_t>(i)] = lora::finetune_single_image(
                base, fewshot.items[static_cast<size_t>(i)], cls, fcfg, key);
            char buf[64];
            std::snprintf(buf, sizeof buf, "adapter-c%d-%02d.lfta", cls, slot);
            out.names[static_cast<size_t>(i)] = buf;
        });
    } else if (mode == "class") {
        // Few-shot sets are class-major, so each class's shots are contiguous.
        std::vector<std::pair<size_t, size_t>> extent(static_cast<size_t>(C), {0, 0});
        for (size_t i = 0; i < fewshot.items.size(); ++i) {
            const auto cls = static_cast<size_t>(fewshot.items[i].label);
            if (extent[cls].second == 0) extent[cls].first = i;
            extent[cls].second++;
        }
        out.adapters.resize(static_cast<size_t>(C));
        out.names.resize(static_cast<size_t>(C));
        const RngKey root = RngKey::root(seed).child("lora-class");
        par::parallel_for(C, [&](int c) {
            const auto [off, cnt] = extent[static_cast<size_t>(c)];
            if (cnt == 0) throw ConfigError("class " + std::to_string(c) + " has no shots");
            out.adapters[static_cast<size_t>(c)] = lora::finetune_class_set(
                base, std::span(fewshot.items).subspan(off, cnt), c, fcfg,
                root.child(static_cast<uint64_t>(c)));
            char buf[64];
            std::snprintf(buf, sizeof buf, "adapter-c%d.lfta", c);
            out.names[static_cast<size_t>(c)] = buf;
        });
    } else {
        throw ConfigError("unknown adapter mode '" + mode + "' (expected image or class)");
    }
    return out;
}

std::vector<lora::LoraAdapter> load_adapter_dir(const fs::path& dir) {
    std::vector<fs::path> files;
    if (fs::is_directory(dir)) {
        for (const auto& e : fs::directory_iterator(dir)) {
            if (e.path().extension() == ".lfta") files.push_back(e.path());
        }
    }
    std::sort(files.begin(), files.end());
    std::vector<lora::LoraAdapter> out;
    out.reserve(files.size());
    for (const auto& f : files) out.push_back(lora::load_adapter(f));
    return out;
}

pipe::GenMethod parse_method(const std::string& name, const cfg::RunConfig& rc) {
    pipe::GenMethod m;
    m.guidance = rc.guidance();
    if (name == "classcond") {
        m.kind = pipe::GenMethod::Kind::ClassCond;
    } else if (name == "perclass") {
        m.kind = pipe::GenMethod::Kind::PerClassLoRA;
    } else if (name == "loft") {
        m.kind = pipe::GenMethod::Kind::Loft;
        m.sampler = rc.lambda();
    } else {
        throw ConfigError("unknown method '" + name +
                          "' (expected classcond, perclass, or loft)");
    }
    return m;
}

}  // namespace

// ===========================================================================
// Experiment grid
// ===========================================================================

namespace {
const std::vector<int> kGridS = {50, 100, 200};
const std::vector<int> kGridK = {2, 4, 8};
const std::vector<int> kAblationS = {50, 200};
constexpr int kAblationK = 8;
}  // namespace

std::vector<Cell> default_grid(const cfg::RunConfig& rc) {
    std::vector<pipe::GenMethod> methods(4);
    methods[0].kind = pipe::GenMethod::Kind::ClassCond;
    methods[1].kind = pipe::GenMethod::Kind::PerClassLoRA;
    methods[2].kind = pipe::GenMethod::Kind::Loft;
    methods[2].sampler.kind = lora::LambdaSampler::Kind::Fixed;
    methods[2].sampler.lambda = 0.5;
    methods[3].kind = pipe::GenMethod::Kind::Loft;
    methods[3].sampler.kind = lora::LambdaSampler::Kind::Fixed;
    methods[3].sampler.lambda = 1.0;
    for (auto& m : methods) m.guidance = rc.guidance();

    std::vector<Cell> grid;
    for (const auto& m : methods)
        for (int s : kGridS)
            for (int k : kGridK)
                for (uint64_t seed : rc.seeds) grid.push_back({m, s, k, seed});
    return grid;
}

std::vector<Cell> ablation_grid(const cfg::RunConfig& rc) {
    std::vector<lora::LambdaSampler> samplers;
    for (double l : {0.0, 0.3, 0.5, 0.7, 1.0}) {
        lora::LambdaSampler s;
        s.kind = lora::LambdaSampler::Kind::Fixed;
        s.lambda = l;
        samplers.push_back(s);
    }
    for (double a : {2.0, 5.0, 10.0}) {
        lora::LambdaSampler s;
        s.kind = lora::LambdaSampler::Kind::Beta;
        s.alpha = a;
        samplers.push_back(s);
    }
    for (const auto& v : std::vector<std::vector<double>>{
             {0.5, 0.25, 0.25}, {0.33, 0.33, 0.33}, {0.7, 0.15, 0.15}}) {
        lora::LambdaSampler s;
        s.kind = lora::LambdaSampler::Kind::Explicit;
        s.vec = v;
        samplers.push_back(s);
    }

    std::vector<Cell> grid;
    for (const auto& smp : samplers) {
        pipe::GenMethod m;
        m.kind = pipe::GenMethod::Kind::Loft;
        m.sampler = smp;
        m.guidance = rc.guidance();
        for (int s : kAblationS)
            for (uint64_t seed : rc.seeds) grid.push_back({m, s, kAblationK, seed});
    }
    return grid;
}

// ===========================================================================
// Stage cache keys
//
// Every cached artifact's file name embeds a hash of exactly the
// configuration fields its content depends on (chained through its inputs),
// so a stale artifact can never be picked up after a config change.
// ===========================================================================

namespace {

std::string model_desc(const cfg::RunConfig& rc, uint64_t seed) {
    return "model|hw=" + std::to_string(rc.image_hw) + "|w=" + std::to_string(rc.width) +
           "|nh=" + std::to_string(rc.n_hidden) + "|tf=" + std::to_string(rc.time_features) +
           "|T=" + std::to_string(rc.T) + "|beta=" + io::fmt_g9(rc.beta_start) + ":" +
           io::fmt_g9(rc.beta_end) + "|npc=" + std::to_string(rc.pretrain_per_class) +
           "|steps=" + std::to_string(rc.pretrain_steps) +
           "|batch=" + std::to_string(rc.pretrain_batch) + "|lr=" + io::fmt_g9(rc.pretrain_lr) +
           "|pu=" + io::fmt_g9(rc.p_uncond) + "|seed=" + std::to_string(seed);
}

std::string oracle_desc(const cfg::RunConfig& rc) {
    return "oracle|hw=" + std::to_string(rc.image_hw) +
           "|opc=" + std::to_string(rc.oracle_per_class) +
           "|tpc=" + std::to_string(rc.test_per_class) +
           "|hidden=" + std::to_string(rc.cls_hidden) +
           "|epochs=" + std::to_string(rc.cls_epochs) +
           "|batch=" + std::to_string(rc.cls_batch) + "|lr=" + io::fmt_g9(rc.cls_lr) +
           "|seeds=" + std::to_string(kTestSeed) + ":" + std::to_string(kOracleSeed);
}

std::string adapters_desc(const cfg::RunConfig& rc, uint64_t seed, int k,
                          const std::string& mode) {
    return model_desc(rc, seed) + "|adapt|mode=" + mode +
           "|ppc=" + std::to_string(rc.pool_per_class) + "|k=" + std::to_string(k) +
           "|rank=" + std::to_string(rc.rank) + "|steps=" + std::to_string(rc.lora_steps) +
           "|lr=" + io::fmt_g9(rc.lora_lr);
}

std::string gen_desc(const cfg::RunConfig& rc, const Cell& cell, int s_max) {
    std::string upstream;
    switch (cell.method.kind) {
        case pipe::GenMethod::Kind::ClassCond:
            upstream = model_desc(rc, cell.seed);
            break;
        case pipe::GenMethod::Kind::PerClassLoRA:
            upstream = adapters_desc(rc, cell.seed, cell.k, "class");
            break;
        case pipe::GenMethod::Kind::Loft:
            upstream = adapters_desc(rc, cell.seed, cell.k, "image");
            break;
    }
    return upstream + "|gen|m=" + cell.label() + "|gw=" + io::fmt_g9(rc.guidance_w) +
           "|smax=" + std::to_string(s_max);
}

std::string cell_desc(const cfg::RunConfig& rc, const Cell& cell, int s_max) {
    return gen_desc(rc, cell, s_max) + "|cell|s=" + std::to_string(cell.s) + "|" +
           oracle_desc(rc);
}

fs::path keyed_path(const fs::path& cache, const std::string& prefix, const std::string& desc,
                    const std::string& ext) {
    return cache / (prefix + "-" + io::hash_hex(io::fnv1a64(desc.data(), desc.size())) + ext);
}

// ===========================================================================
// Experiment runner
// ===========================================================================

struct ExpState {
    const cfg::RunConfig& rc;
    fs::path cache;
    int s_max;
    std::map<std::string, double> timings;

    data::Dataset test;
    cls::TrainedClassifier oracle;
    std::vector<Tensor> real_feats;  // oracle features of the test split, per class

    std::map<uint64_t, diff::DenoiserWeights> models;             // by seed
    std::map<uint64_t, data::Dataset> pools;                      // by seed
    std::map<std::string, std::vector<lora::LoraAdapter>> sets;   // by adapters desc
    std::map<std::string, data::Dataset> generated;               // by gen desc
};

const diff::DenoiserWeights& get_model(ExpState& st, uint64_t seed) {
    auto it = st.models.find(seed);
    if (it != st.models.end()) return it->second;
    const auto path = keyed_path(st.cache, "model", model_desc(st.rc, seed), ".lftm");
    if (fs::exists(path)) {
        return st.models.emplace(seed, diff::load_denoiser(path)).first->second;
    }
    Timer t;
    const auto ds = default_pretrain_data(st.rc, seed);
    auto w = diff::train_base(ds, st.rc.arch(), st.rc.pretrain(),
                              RngKey::root(seed).child("pretrain"));
    diff::save_denoiser(path, w);
    st.timings["pretrain"] += t.seconds();
    std::cout << "  pretrained base model (seed " << seed << ") in " << io::fmt_g9(t.seconds())
              << "s\n";
    return st.models.emplace(seed, std::move(w)).first->second;
}

const data::Dataset& get_pool(ExpState& st, uint64_t seed) {
    auto it = st.pools.find(seed);
    if (it != st.pools.end()) return it->second;
    return st.pools.emplace(seed, default_pool(st.rc, seed)).first->second;
}

const std::vector<lora::LoraAdapter>& get_adapters(ExpState& st, uint64_t seed, int k,
                                                   const std::string& mode) {
    const std::string desc = adapters_desc(st.rc, seed, k, mode);
    auto it = st.sets.find(desc);
    if (it != st.sets.end()) return it->second;

    const auto dir = keyed_path(st.cache, "adapters", desc, "");
    const auto index = dir / "index.json";
    std::vector<lora::LoraAdapter> set;
    if (fs::exists(index)) {
        const json idx = json::parse(io::read_text(index));
        for (const auto& name : idx.at("files")) {
            set.push_back(lora::load_adapter(dir / name.get<std::string>()));
        }
    } else {
        Timer t;
        const auto& base = get_model(st, seed);
        const auto fewshot = gen::make_fewshot(get_pool(st, seed), k, seed);
        auto fitted = fit_adapters(base, fewshot, mode, st.rc.finetune(), seed);
        fs::create_directories(dir);
        for (size_t i = 0; i < fitted.adapters.size(); ++i) {
            lora::save_adapter(dir / fitted.names[i], fitted.adapters[i]);
        }
        json idx;
        idx["files"] = fitted.names;
        io::write_text(index, idx.dump(2) + "\n");
        st.timings["adapters"] += t.seconds();
        set = std::move(fitted.adapters);
    }
    return st.sets.emplace(desc, std::move(set)).first->second;
}

const data::Dataset& get_generated(ExpState& st, const Cell& cell) {
    const std::string desc = gen_desc(st.rc, cell, st.s_max);
    auto it = st.generated.find(desc);
    if (it != st.generated.end()) return it->second;

    const auto path = keyed_path(st.cache, "gen", desc, ".lfds");
    if (fs::exists(path)) {
        return st.generated.emplace(desc, data::load_dataset(path)).first->second;
    }
    Timer t;
    const auto& base = get_model(st, cell.seed);
    std::vector<const lora::LoraAdapter*> ptrs;
    if (cell.method.kind != pipe::GenMethod::Kind::ClassCond) {
        const std::string mode =
            cell.method.kind == pipe::GenMethod::Kind::PerClassLoRA ? "class" : "image";
        for (const auto& a : get_adapters(st, cell.seed, cell.k, mode)) ptrs.push_back(&a);
    }
    auto synth = pipe::generate_dataset(cell.method, st.s_max, base, ptrs, cell.seed);
    data::save_dataset(path, synth.ds);
    io::write_text(fs::path(path) += ".manifest.json", synth.manifest_json());
    st.timings["generate"] += t.seconds();
    std::cout << "  generated " << synth.ds.items.size() << " images (" << cell.label() << ", k="
              << cell.k << ", seed " << cell.seed << ") in " << io::fmt_g9(t.seconds()) << "s\n";
    return st.generated.emplace(desc, std::move(synth.ds)).first->second;
}

// First s images of every class; the generator keys images by (class, index),
// so this equals generating with s per class directly.
data::Dataset slice_per_class(const data::Dataset& full, int s, int s_max) {
    data::Dataset out;
    out.H = full.H;
    out.W = full.W;
    const int C = static_cast<int>(full.items.size()) / s_max;
    for (int c = 0; c < C; ++c) {
        for (int i = 0; i < s; ++i) {
            out.items.push_back(full.items[static_cast<size_t>(c) * s_max + i]);
        }
    }
    return out;
}

json compute_cell(ExpState& st, const Cell& cell) {
    const auto& full = get_generated(st, cell);
    const data::Dataset synth = slice_per_class(full, cell.s, st.s_max);

    const std::string desc = cell_desc(st.rc, cell, st.s_max);
    const RngKey ckey = RngKey::root(io::fnv1a64(desc.data(), desc.size()));
    auto clf = cls::train_classifier(synth, st.rc.classifier(), ckey.child("train"));
    const auto rep = cls::evaluate(clf, st.test);

    const int C = st.rc.arch().n_classes;
    const auto recog = metrics::recognizability(st.oracle, synth);
    const Tensor feats = cls::extract_features(st.oracle, synth);
    const int fd = st.oracle.feature_dim();

    std::vector<double> div(C, 0.0), fid(C, 0.0);
    for (int c = 0; c < C; ++c) {
        Tensor fc;
        fc.shape = {cell.s, fd};
        fc.data.reserve(static_cast<size_t>(cell.s) * static_cast<size_t>(fd));
        for (size_t i = 0; i < synth.items.size(); ++i) {
            if (static_cast<int>(synth.items[i].label) != c) continue;
            const float* row = feats.data.data() + i * static_cast<size_t>(fd);
            fc.data.insert(fc.data.end(), row, row + fd);
        }
        div[static_cast<size_t>(c)] = metrics::diversity_from_features(fc);
        fid[static_cast<size_t>(c)] =
            metrics::fid_from_features(fc, st.real_feats[static_cast<size_t>(c)]);
    }

    json r;
    r["method"] = cell.label();
    r["s"] = cell.s;
    r["k"] = cell.k;
    r["seed"] = cell.seed;
    r["status"] = "ok";
    r["accuracy"] = rep.accuracy;
    r["acc_class"] = rep.per_class;
    json rg = json::array();
    for (const auto& cv : recog) rg.push_back(cv.present ? cv.value : 0.0);
    r["recognizability"] = std::move(rg);
    r["diversity"] = div;
    r["fid"] = fid;
    std::string bits(rep.correct.size(), '0');
    for (size_t i = 0; i < rep.correct.size(); ++i) bits[i] = rep.correct[i] ? '1' : '0';
    r["correct"] = std::move(bits);
    return r;
}

// ===========================================================================
// Result collection
// ===========================================================================

std::string csv_header(int C) {
    std::string h = "method,s,k,seed,status,accuracy";
    const char* groups[] = {"recog", "div", "fid", "acc"};
    for (const char* g : groups)
        for (int c = 0; c < C; ++c) h += "," + std::string(g) + "_c" + std::to_string(c);
    return h + "\n";
}

std::string csv_row(const Cell& cell, const json* r, int C) {
    std::string row = cell.label() + "," + std::to_string(cell.s) + "," + std::to_string(cell.k) +
                      "," + std::to_string(cell.seed);
    if (r == nullptr || !r->contains("status")) {
        row += ",missing";
        for (int i = 0; i < 1 + 4 * C; ++i) row += ",";
        return row + "\n";
    }
    const std::string status = (*r)["status"].get<std::string>();
    if (status != "ok") {
        // Keep the grid rectangular: error rows carry empty metric cells.
        std::string cleaned = status;
        for (char& ch : cleaned)
            if (ch == ',' || ch == '\n') ch = ';';
        row += "," + cleaned;
        for (int i = 0; i < 1 + 4 * C; ++i) row += ",";
        return row + "\n";
    }
    row += ",ok," + io::fmt_g9((*r)["accuracy"].get<double>());
    for (const char* key : {"recognizability", "diversity", "fid", "acc_class"}) {
        for (int c = 0; c < C; ++c) {
            row += "," + io::fmt_g9((*r)[key][static_cast<size_t>(c)].get<double>());
        }
    }
    return row + "\n";
}

using ReportMap = std::map<std::string, json>;  // cell desc -> report

const json* find_report(const ReportMap& overlay, const fs::path& cache,
                        const cfg::RunConfig& rc, const Cell& cell, int s_max,
                        ReportMap& loaded) {
    const std::string desc = cell_desc(rc, cell, s_max);
    if (auto it = overlay.find(desc); it != overlay.end()) return &it->second;
    if (auto it = loaded.find(desc); it != loaded.end()) return &it->second;
    const auto path = keyed_path(cache, "cell", desc, ".json");
    if (!fs::exists(path)) return nullptr;
    return &loaded.emplace(desc, json::parse(io::read_text(path))).first->second;
}

void collect_grid(const cfg::RunConfig& rc, const fs::path& out_dir, bool ablation,
                  const ReportMap& overlay) {
    const auto grid = ablation ? ablation_grid(rc) : default_grid(rc);
    const int s_max = *std::max_element(ablation ? kAblationS.begin() : kGridS.begin(),
                                        ablation ? kAblationS.end() : kGridS.end());
    const fs::path cache = out_dir / "cache";
    const int C = rc.arch().n_classes;
    ReportMap loaded;

    std::string csv = csv_header(C);
    for (const auto& cell : grid) {
        csv += csv_row(cell, find_report(overlay, cache, rc, cell, s_max, loaded), C);
    }
    io::write_text(out_dir / "results.csv", csv);

    if (ablation) return;

    // Prediction flips of the fused method against each baseline.
    const std::string base_label = "loft-fixed0.5";
    std::string flips = "method_a,method_b,s,k,seed,flip_ratio\n";
    for (const std::string other : {"classcond", "perclass", "loft-fixed1"}) {
        for (int s : kGridS)
            for (int k : kGridK)
                for (uint64_t seed : rc.seeds) {
                    Cell a, b;
                    for (const auto& cell : grid) {
                        if (cell.s != s || cell.k != k || cell.seed != seed) continue;
                        if (cell.label() == base_label) a = cell;
                        if (cell.label() == other) b = cell;
                    }
                    const json* ra = find_report(overlay, cache, rc, a, s_max, loaded);
                    const json* rb = find_report(overlay, cache, rc, b, s_max, loaded);
                    if (ra == nullptr || rb == nullptr) continue;
                    if ((*ra)["status"] != "ok" || (*rb)["status"] != "ok") continue;
                    cls::EvalReport ea, eb;
                    for (char ch : (*ra)["correct"].get<std::string>())
                        ea.correct.push_back(ch == '1');
                    for (char ch : (*rb)["correct"].get<std::string>())
                        eb.correct.push_back(ch == '1');
                    flips += base_label + "," + other + "," + std::to_string(s) + "," +
                             std::to_string(k) + "," + std::to_string(seed) + "," +
                             io::fmt_g9(metrics::flip_ratio(ea, eb)) + "\n";
                }
    }
    io::write_text(out_dir / "flips.csv", flips);

    // Fidelity/diversity scatter at the largest scale, seed-averaged.
    const int scat_s = 200, scat_k = 8;
    std::vector<metrics::MetricsRecord> records;
    for (const std::string method : {"classcond", "perclass", "loft-fixed0.5", "loft-fixed1"}) {
        std::vector<double> rec(static_cast<size_t>(C), 0.0), dv(static_cast<size_t>(C), 0.0),
            fd(static_cast<size_t>(C), 0.0), ac(static_cast<size_t>(C), 0.0);
        int n_seeds = 0;
        for (uint64_t seed : rc.seeds) {
            Cell cell;
            for (const auto& g : grid) {
                if (g.label() == method && g.s == scat_s && g.k == scat_k && g.seed == seed)
                    cell = g;
            }
            const json* r = find_report(overlay, cache, rc, cell, s_max, loaded);
            if (r == nullptr || (*r)["status"] != "ok") continue;
            ++n_seeds;
            for (int c = 0; c < C; ++c) {
                rec[static_cast<size_t>(c)] += (*r)["recognizability"][static_cast<size_t>(c)].get<double>();
                dv[static_cast<size_t>(c)] += (*r)["diversity"][static_cast<size_t>(c)].get<double>();
                fd[static_cast<size_t>(c)] += (*r)["fid"][static_cast<size_t>(c)].get<double>();
                ac[static_cast<size_t>(c)] += (*r)["acc_class"][static_cast<size_t>(c)].get<double>();
            }
        }
        if (n_seeds == 0) continue;
        for (int c = 0; c < C; ++c) {
            metrics::MetricsRecord m;
            m.method = method;
            m.class_id = c;
            m.recognizability = rec[static_cast<size_t>(c)] / n_seeds;
            m.diversity = dv[static_cast<size_t>(c)] / n_seeds;
            m.fid = fd[static_cast<size_t>(c)] / n_seeds;
            m.accuracy = ac[static_cast<size_t>(c)] / n_seeds;
            m.n_samples = scat_s;
            records.push_back(std::move(m));
        }
    }
    metrics::export_scatter(out_dir / "scatter.csv", records);
}

}  // namespace

void run_experiment(const cfg::RunConfig& rc, const std::filesystem::path& out_dir,
                    bool ablation) {
    Timer total;
    const fs::path cache = out_dir / "cache";
    fs::create_directories(cache);
    io::write_text(out_dir / "config.txt", rc.echo());

    const auto grid = ablation ? ablation_grid(rc) : default_grid(rc);
    const int s_max = *std::max_element(ablation ? kAblationS.begin() : kGridS.begin(),
                                        ablation ? kAblationS.end() : kGridS.end());
    std::cout << "experiment: " << grid.size() << " cells, cache " << cache.string() << "\n";

    ExpState st{rc, cache, s_max, {}, {}, {}, {}, {}, {}, {}, {}};

    // Fixed scoring side: test split, judge, and its per-class test features.
    {
        Timer t;
        st.test = default_test(rc);
        const auto opath = keyed_path(cache, "oracle", oracle_desc(rc), ".lftm");
        if (fs::exists(opath)) {
            st.oracle = cls::load_classifier(opath);
        } else {
            st.oracle = cls::train_oracle(default_oracle_train(rc), st.test, rc.classifier(),
                                          RngKey::root(kOracleSeed).child("oracle"));
            cls::save_classifier(opath, st.oracle);
        }
        const Tensor tf = cls::extract_features(st.oracle, st.test);
        const int C = rc.arch().n_classes;
        const int fd = st.oracle.feature_dim();
        st.real_feats.assign(static_cast<size_t>(C), {});
        for (int c = 0; c < C; ++c) {
            auto& fc = st.real_feats[static_cast<size_t>(c)];
            for (size_t i = 0; i < st.test.items.size(); ++i) {
                if (static_cast<int>(st.test.items[i].label) != c) continue;
                const float* row = tf.data.data() + i * static_cast<size_t>(fd);
                fc.data.insert(fc.data.end(), row, row + fd);
            }
            fc.shape = {static_cast<int>(fc.data.size()) / fd, fd};
        }
        st.timings["oracle"] += t.seconds();
    }

    ReportMap overlay;
    int done = 0;
    for (const auto& cell : grid) {
        const std::string desc = cell_desc(rc, cell, s_max);
        const auto path = keyed_path(cache, "cell", desc, ".json");
        ++done;
        if (fs::exists(path) || overlay.count(desc)) continue;
        try {
            Timer t;
            json r = compute_cell(st, cell);
            io::write_text(path, r.dump(2) + "\n");
            st.timings["cells"] += t.seconds();
            std::cout << "[" << done << "/" << grid.size() << "] " << cell.label()
                      << " s=" << cell.s << " k=" << cell.k << " seed=" << cell.seed
                      << ": accuracy " << io::fmt_g9(r["accuracy"].get<double>()) << "\n";
        } catch (const std::exception& e) {
            // A failed cell is reported in the CSV but never cached, so a
            // rerun retries it.
            json r;
            r["status"] = std::string("error: ") + e.what();
            overlay.emplace(desc, std::move(r));
            std::cout << "[" << done << "/" << grid.size() << "] " << cell.label()
                      << " s=" << cell.s << " k=" << cell.k << " seed=" << cell.seed
                      << ": FAILED (" << e.what() << ")\n";
        }
    }

    collect_grid(rc, out_dir, ablation, overlay);

    json m;
    m["config"] = rc.echo();
    m["seeds"] = rc.seeds;
    m["grid_cells"] = grid.size();
    json arts = json::array();
    arts.push_back(artifact_entry(out_dir / "results.csv"));
    if (!ablation) {
        arts.push_back(artifact_entry(out_dir / "flips.csv"));
        arts.push_back(artifact_entry(out_dir / "scatter.csv"));
    }
    m["artifacts"] = std::move(arts);
    json tm;
    for (const auto& [k, v] : st.timings) tm[k] = v;
    tm["total"] = total.seconds();
    m["timings"] = std::move(tm);
    io::write_text(out_dir / "manifest.json", m.dump(2) + "\n");
    std::cout << "wrote " << (out_dir / "results.csv").string() << " ("
              << io::fmt_g9(total.seconds()) << "s)\n";
}

void export_grid(const std::filesystem::path& out_dir, bool ablation) {
    io::require_exists(out_dir / "cache", "experiment cache");
    // The directory's config.txt is the configuration that produced the cache;
    // anything else would address different cache keys and report every cell
    // as missing.
    const auto rc = cfg::from_echo(io::read_text(out_dir / "config.txt"));
    collect_grid(rc, out_dir, ablation, {});
    std::cout << "wrote " << (out_dir / "results.csv").string() << "\n";
}

// ===========================================================================
// Subcommands
// ===========================================================================

namespace {

void attach_config(CLI::App* sc, cfg::RunConfig& rc, bool& serial) {
    sc->set_config("--config", "", "configuration file (TOML key=value; flags win)");
    sc->add_option("--pretrain-per-class", rc.pretrain_per_class,
                   "broad-regime images per class for base training");
    sc->add_option("--pool-per-class", rc.pool_per_class, "downstream few-shot pool size");
    sc->add_option("--test-per-class", rc.test_per_class, "held-out test images per class");
    sc->add_option("--oracle-per-class", rc.oracle_per_class, "judge training images per class");
    sc->add_option("--image-hw", rc.image_hw, "image side length");
    sc->add_option("--width", rc.width, "denoiser hidden width");
    sc->add_option("--n-hidden", rc.n_hidden, "denoiser hidden layer count");
    sc->add_option("--time-features", rc.time_features, "sinusoidal time feature count");
    sc->add_option("--T", rc.T, "diffusion step count");
    sc->add_option("--beta-start", rc.beta_start, "noise schedule start");
    sc->add_option("--beta-end", rc.beta_end, "noise schedule end");
    sc->add_option("--pretrain-steps", rc.pretrain_steps, "base training steps");
    sc->add_option("--pretrain-batch", rc.pretrain_batch, "base training batch size");
    sc->add_option("--pretrain-lr", rc.pretrain_lr, "base training learning rate");
    sc->add_option("--p-uncond", rc.p_uncond, "conditioning dropout probability");
    sc->add_option("--rank", rc.rank, "adapter rank");
    sc->add_option("--lora-steps", rc.lora_steps, "adapter fine-tuning steps");
    sc->add_option("--lora-lr", rc.lora_lr, "adapter learning rate");
    sc->add_option("--w", rc.guidance_w, "guidance scale");
    sc->add_option("--lambda", rc.lambda_spec,
                   "fusion weight sampler (fixed:L | beta:A | vec:w1,w2,...)");
    sc->add_option("--s-per-class", rc.s_per_class, "generated images per class");
    sc->add_option("--k-shots", rc.k_shots, "few-shot images per class");
    sc->add_option("--cls-epochs", rc.cls_epochs, "classifier epochs");
    sc->add_option("--cls-batch", rc.cls_batch, "classifier batch size");
    sc->add_option("--cls-lr", rc.cls_lr, "classifier learning rate");
    sc->add_option("--cls-hidden", rc.cls_hidden, "classifier hidden width");
    sc->add_option("--seeds", rc.seeds, "experiment seeds")->delimiter(',');
    sc->add_option("--out-root", rc.out_root, "output root directory (env LOFT_OUT)")
        ->envname("LOFT_OUT");
    sc->add_flag("--serial", serial, "single-threaded execution (bytes are identical)");
}

struct Opts {
    std::string data, model, adapters, out, test, report, trace, pgm, dir;
    std::string regime = "downstream";
    std::string ns = "train";
    std::string mode = "image";
    std::string method = "loft";
    int per_class = 200;
    int pgm_cols = 16;
    uint64_t seed = 1;
    uint64_t oracle_seed = kOracleSeed;
    double min_acc = 0.95;
    bool ablation = false;
};

fs::path or_default(const std::string& flag, const fs::path& fallback) {
    return flag.empty() ? fallback : fs::path(flag);
}

void cmd_make_data(const cfg::RunConfig& rc, const Opts& o) {
    Timer t;
    const auto regime = o.regime == "pretrain"     ? gen::RegimeConfig::pretrain()
                        : o.regime == "downstream" ? gen::RegimeConfig::downstream()
                                                   : throw ConfigError("unknown regime '" +
                                                                       o.regime + "'");
    const auto ds = gen::make_dataset(regime, o.per_class, o.seed, o.ns, rc.image_hw);
    const auto out = or_default(o.out, fs::path(rc.out_root) / "data" /
                                           (o.regime + "-" + o.ns + "-s" +
                                            std::to_string(o.seed) + ".lfds"));
    data::save_dataset(out, ds);
    std::vector<fs::path> arts = {out};
    if (!o.pgm.empty()) {
        data::save_pgm_grid(o.pgm, ds, o.pgm_cols);
        arts.push_back(o.pgm);
    }
    write_cmd_manifest(fs::path(out) += ".manifest.json", "make-data", rc, o.seed, arts,
                       t.seconds());
    std::cout << "wrote " << out.string() << " (" << ds.items.size() << " images)\n";
}

void cmd_pretrain(const cfg::RunConfig& rc, const Opts& o) {
    Timer t;
    data::Dataset ds = o.data.empty() ? default_pretrain_data(rc, o.seed)
                                      : data::load_dataset(o.data);
    std::vector<double> trace;
    auto w = diff::train_base(ds, rc.arch(), rc.pretrain(), RngKey::root(o.seed).child("pretrain"),
                              o.trace.empty() ? nullptr : &trace);
    const auto out = or_default(o.out, fs::path(rc.out_root) / "model.lftm");
    diff::save_denoiser(out, w);
    std::vector<fs::path> arts = {out};
    if (!o.trace.empty()) {
        io::write_loss_trace(o.trace, trace);
        arts.push_back(o.trace);
    }
    write_cmd_manifest(fs::path(out) += ".manifest.json", "pretrain", rc, o.seed, arts,
                       t.seconds());
    std::cout << "wrote " << out.string() << " (hash "
              << io::hash_hex(diff::weights_hash(w)) << ", " << io::fmt_g9(t.seconds())
              << "s)\n";
}

void cmd_train_oracle(const cfg::RunConfig& rc, const Opts& o) {
    Timer t;
    const data::Dataset train =
        o.data.empty() ? default_oracle_train(rc) : data::load_dataset(o.data);
    const data::Dataset test = o.test.empty() ? default_test(rc) : data::load_dataset(o.test);
    auto judge = cls::train_oracle(train, test, rc.classifier(),
                                   RngKey::root(o.oracle_seed).child("oracle"), o.min_acc);
    const auto out = or_default(o.out, fs::path(rc.out_root) / "oracle.lftm");
    cls::save_classifier(out, judge);
    std::vector<fs::path> arts = {out};
    const auto rep = cls::evaluate(judge, test);
    if (!o.report.empty()) {
        cls::write_eval_report(o.report, "oracle-test", o.oracle_seed, rep);
        arts.push_back(o.report);
    }
    write_cmd_manifest(fs::path(out) += ".manifest.json", "train-oracle", rc, o.oracle_seed, arts,
                       t.seconds());
    std::cout << "wrote " << out.string() << " (test accuracy " << io::fmt_g9(rep.accuracy)
              << ")\n";
}

void cmd_lora_fit(const cfg::RunConfig& rc, const Opts& o) {
    Timer t;
    const auto model = or_default(o.model, fs::path(rc.out_root) / "model.lftm");
    const auto base = diff::load_denoiser(model);
    const data::Dataset pool = o.data.empty() ? default_pool(rc, o.seed)
                                              : data::load_dataset(o.data);
    const auto fewshot = gen::make_fewshot(pool, rc.k_shots, o.seed);
    auto fitted = fit_adapters(base, fewshot, o.mode, rc.finetune(), o.seed);
    const auto dir = or_default(o.out, fs::path(rc.out_root) / "adapters");
    fs::create_directories(dir);
    std::vector<fs::path> arts;
    for (size_t i = 0; i < fitted.adapters.size(); ++i) {
        lora::save_adapter(dir / fitted.names[i], fitted.adapters[i]);
        arts.push_back(dir / fitted.names[i]);
    }
    write_cmd_manifest(dir / "manifest.json", "lora-fit", rc, o.seed, arts, t.seconds());
    std::cout << "wrote " << fitted.adapters.size() << " adapters to " << dir.string() << " ("
              << io::fmt_g9(t.seconds()) << "s)\n";
}

void cmd_generate(const cfg::RunConfig& rc, const Opts& o) {
    Timer t;
    const auto model = or_default(o.model, fs::path(rc.out_root) / "model.lftm");
    const auto base = diff::load_denoiser(model);
    const pipe::GenMethod method = parse_method(o.method, rc);

    std::vector<lora::LoraAdapter> storage;
    std::vector<const lora::LoraAdapter*> ptrs;
    if (method.kind != pipe::GenMethod::Kind::ClassCond) {
        storage = load_adapter_dir(or_default(o.adapters, fs::path(rc.out_root) / "adapters"));
        for (const auto& a : storage) ptrs.push_back(&a);
    }
    auto synth = pipe::generate_dataset(method, rc.s_per_class, base, ptrs, o.seed);

    const auto out = or_default(o.out, fs::path(rc.out_root) /
                                           ("synth-" + method.tag() + "-s" +
                                            std::to_string(o.seed) + ".lfds"));
    data::save_dataset(out, synth.ds);
    io::write_text(fs::path(out) += ".manifest.json", synth.manifest_json());
    if (!o.pgm.empty()) data::save_pgm_grid(o.pgm, synth.ds, o.pgm_cols);
    std::cout << "wrote " << out.string() << " (" << synth.ds.items.size() << " images, "
              << io::fmt_g9(t.seconds()) << "s)\n";
}

void cmd_train_classifier(const cfg::RunConfig& rc, const Opts& o) {
    Timer t;
    const data::Dataset train = data::load_dataset(o.data);
    const data::Dataset test = o.test.empty() ? default_test(rc) : data::load_dataset(o.test);
    auto clf = cls::train_classifier(train, rc.classifier(),
                                     RngKey::root(o.seed).child("train-classifier"));
    const auto rep = cls::evaluate(clf, test);
    const auto out = or_default(o.out, fs::path(rc.out_root) / "classifier.lftm");
    cls::save_classifier(out, clf);
    std::vector<fs::path> arts = {out};
    const auto report = or_default(o.report, fs::path(rc.out_root) / "eval.csv");
    cls::write_eval_report(report, fs::path(o.data).filename().string(), o.seed, rep);
    arts.push_back(report);
    write_cmd_manifest(fs::path(out) += ".manifest.json", "train-classifier", rc, o.seed, arts,
                       t.seconds());
    std::cout << "wrote " << out.string() << " (test accuracy " << io::fmt_g9(rep.accuracy)
              << ")\n";
}

void cmd_analyze(const cfg::RunConfig& rc, const Opts& o) {
    const auto judge_path = or_default(o.model, fs::path(rc.out_root) / "oracle.lftm");
    const auto judge = cls::load_classifier(judge_path);
    const data::Dataset synth = data::load_dataset(o.data);
    const data::Dataset real = o.test.empty() ? default_test(rc) : data::load_dataset(o.test);

    const auto recog = metrics::recognizability(judge, synth);
    const auto div = metrics::diversity(judge, synth);
    const int C = static_cast<int>(recog.size());
    std::vector<int> counts(static_cast<size_t>(C), 0);
    for (const auto& it : synth.items) counts[it.label]++;

    std::string csv = "class,n,recognizability,diversity,fid\n";
    for (int c = 0; c < C; ++c) {
        if (!recog[static_cast<size_t>(c)].present) continue;
        csv += std::to_string(c) + "," + std::to_string(counts[static_cast<size_t>(c)]) + "," +
               io::fmt_g9(recog[static_cast<size_t>(c)].value) + "," +
               io::fmt_g9(div[static_cast<size_t>(c)].value) + "," +
               io::fmt_g9(metrics::alignment_fid(judge, synth, real, c)) + "\n";
    }
    const auto out = or_default(o.report, fs::path(rc.out_root) / "metrics.csv");
    io::write_text(out, csv);
    std::cout << "wrote " << out.string() << "\n";
}

}  // namespace

// ===========================================================================
// Dispatch
// ===========================================================================

int cli_dispatch(int argc, const char* const* argv) {
    CLI::App app{"few-shot synthetic data via per-image low-rank adapter fusion"};
    app.require_subcommand(1);

    cfg::RunConfig rc;
    Opts o;
    bool serial = false;
    const auto apply_mode = [&serial] {
        if (serial) par::set_mode(par::Mode::Serial);
    };

    auto* mk = app.add_subcommand("make-data", "render a labeled shape corpus");
    mk->add_option("--regime", o.regime, "parameter regime: pretrain | downstream");
    mk->add_option("--ns", o.ns, "draw namespace (train | test)");
    mk->add_option("--per-class", o.per_class, "images per class");
    mk->add_option("--seed", o.seed, "corpus seed");
    mk->add_option("--out", o.out, "output dataset file");
    mk->add_option("--pgm", o.pgm, "also write a sample-sheet PGM here");
    mk->add_option("--pgm-cols", o.pgm_cols, "sample-sheet columns");
    attach_config(mk, rc, serial);
    mk->callback([&] { apply_mode(); cmd_make_data(rc, o); });

    auto* pt = app.add_subcommand("pretrain", "train the base denoiser");
    pt->add_option("--data", o.data, "training dataset (default: fresh broad-regime corpus)");
    pt->add_option("--seed", o.seed, "training seed");
    pt->add_option("--out", o.out, "output checkpoint");
    pt->add_option("--trace", o.trace, "write per-step loss CSV here");
    attach_config(pt, rc, serial);
    pt->callback([&] { apply_mode(); cmd_pretrain(rc, o); });

    auto* to = app.add_subcommand("train-oracle", "train and gate the judge classifier");
    to->add_option("--train", o.data, "judge training set (default: fixed-seed corpus)");
    to->add_option("--test", o.test, "held-out gate set (default: fixed test split)");
    to->add_option("--seed", o.oracle_seed, "judge training seed");
    to->add_option("--min-accuracy", o.min_acc, "gate threshold");
    to->add_option("--out", o.out, "output classifier");
    to->add_option("--report", o.report, "write the gate evaluation CSV here");
    attach_config(to, rc, serial);
    to->callback([&] { apply_mode(); cmd_train_oracle(rc, o); });

    auto* lf = app.add_subcommand("lora-fit", "fit low-rank adapters on few-shot images");
    lf->add_option("--model", o.model, "base checkpoint (default: <out-root>/model.lftm)");
    lf->add_option("--data", o.data, "few-shot pool (default: fresh narrow-regime corpus)");
    lf->add_option("--k", rc.k_shots, "shots per class");
    lf->add_option("--mode", o.mode, "one adapter per: image | class");
    lf->add_option("--seed", o.seed, "shot selection / fitting seed");
    lf->add_option("--out", o.out, "adapter output directory");
    attach_config(lf, rc, serial);
    lf->callback([&] { apply_mode(); cmd_lora_fit(rc, o); });

    auto* ge = app.add_subcommand("generate", "sample a synthetic dataset");
    ge->add_option("--model", o.model, "base checkpoint (default: <out-root>/model.lftm)");
    ge->add_option("--method", o.method, "classcond | perclass | loft");
    ge->add_option("--adapters", o.adapters, "adapter directory (default: <out-root>/adapters)");
    ge->add_option("--per-class", rc.s_per_class, "images per class");
    ge->add_option("--seed", o.seed, "generation seed");
    ge->add_option("--out", o.out, "output dataset file");
    ge->add_option("--pgm", o.pgm, "also write a sample-sheet PGM here");
    ge->add_option("--pgm-cols", o.pgm_cols, "sample-sheet columns");
    attach_config(ge, rc, serial);
    ge->callback([&] { apply_mode(); cmd_generate(rc, o); });

    auto* tc = app.add_subcommand("train-classifier", "train a classifier on synthetic data");
    tc->add_option("--data", o.data, "training dataset")->required();
    tc->add_option("--test", o.test, "evaluation set (default: fixed test split)");
    tc->add_option("--seed", o.seed, "training seed");
    tc->add_option("--out", o.out, "output classifier");
    tc->add_option("--report", o.report, "evaluation CSV");
    attach_config(tc, rc, serial);
    tc->callback([&] { apply_mode(); cmd_train_classifier(rc, o); });

    auto* an = app.add_subcommand("analyze", "score a synthetic set under the judge");
    an->add_option("--judge", o.model, "judge classifier (default: <out-root>/oracle.lftm)");
    an->add_option("--data", o.data, "synthetic dataset")->required();
    an->add_option("--real", o.test, "real reference set (default: fixed test split)");
    an->add_option("--report", o.report, "output CSV");
    attach_config(an, rc, serial);
    an->callback([&] { apply_mode(); cmd_analyze(rc, o); });

    auto* ex = app.add_subcommand("experiment", "run the full evaluation grid");
    ex->add_option("--out-dir", o.dir, "experiment directory");
    ex->add_flag("--ablation", o.ablation, "sweep fusion-weight samplers instead");
    attach_config(ex, rc, serial);
    ex->callback([&] {
        apply_mode();
        const auto dir = or_default(o.dir, fs::path(rc.out_root) /
                                               (o.ablation ? "ablation" : "experiment"));
        run_experiment(rc, dir, o.ablation);
    });

    auto* eg = app.add_subcommand("export-grid", "rebuild result CSVs from cached cells");
    eg->add_option("--dir", o.dir, "experiment directory");
    eg->add_flag("--ablation", o.ablation, "the directory holds an ablation grid");
    attach_config(eg, rc, serial);
    eg->callback([&] {
        apply_mode();
        const auto dir = or_default(o.dir, fs::path(rc.out_root) /
                                               (o.ablation ? "ablation" : "experiment"));
        export_grid(dir, o.ablation);
    });

    try {
        app.parse(argc, argv);
        return 0;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const ArtifactNotFound& e) {
        std::cerr << "missing artifact: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace loft::cli
