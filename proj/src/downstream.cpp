#include "loft/downstream.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include <json.hpp>

#include "loft/diffusion.hpp"
#include "loft/io.hpp"
#include "loft/kernels.hpp"
#include "loft/optim.hpp"

namespace loft::cls {

using namespace loft::kern;
using json = nlohmann::json;

nn::MlpSpec ClassifierConfig::spec() const {
    if (input_dim < 1 || hidden < 1 || n_classes < 2) {
        throw ConfigError("classifier dimensions must be positive (and >= 2 classes)");
    }
    nn::MlpSpec s;
    s.dims = {input_dim, hidden, hidden, n_classes};
    s.hidden_act = true;
    return s;
}

namespace {

void check_dataset(const data::Dataset& ds, const ClassifierConfig& cfg) {
    if (ds.items.empty()) throw ConfigError("classifier dataset is empty");
    if (ds.pixel_count() != cfg.input_dim) {
        throw ShapeError("dataset images are " + std::to_string(ds.pixel_count()) +
                         " pixels, classifier expects " + std::to_string(cfg.input_dim));
    }
    for (const auto& it : ds.items) {
        if (static_cast<int>(it.label) >= cfg.n_classes) {
            throw ShapeError("label " + std::to_string(it.label) + " out of range [0," +
                             std::to_string(cfg.n_classes) + ")");
        }
    }
}

// Softmax cross-entropy on one item; returns the loss and writes
// dloss/dlogits into dlogits.
double ce_loss_grad(const float* logits, int n, int label, float* dlogits) {
    double m = logits[0];
    for (int i = 1; i < n; ++i) m = std::max(m, static_cast<double>(logits[i]));
    double z = 0.0;
    for (int i = 0; i < n; ++i) z += std::exp(static_cast<double>(logits[i]) - m);
    const double log_z = std::log(z);
    for (int i = 0; i < n; ++i) {
        const double p = std::exp(static_cast<double>(logits[i]) - m) / z;
        dlogits[i] = static_cast<float>(p - (i == label ? 1.0 : 0.0));
    }
    return -(static_cast<double>(logits[label]) - m - log_z);
}

std::vector<float> init_params(const nn::MlpSpec& spec, RngKey key) {
    const auto lay = spec.layout();
    std::vector<float> params(lay.total, 0.0f);
    RngStream st(key);
    for (int l = 0; l < spec.layer_count(); ++l) {
        const auto& seg = lay.find("w" + std::to_string(l));
        const double std_w = std::sqrt(2.0 / static_cast<double>(spec.dims[l]));
        for (size_t i = 0; i < seg.size; ++i) {
            params[seg.offset + i] = static_cast<float>(std_w * st.normal());
        }
    }
    return params;
}

}  // namespace

TrainedClassifier train_classifier(const data::Dataset& ds, const ClassifierConfig& cfg,
                                   RngKey key, std::vector<double>* trace) {
    check_dataset(ds, cfg);
    if (cfg.epochs < 0 || cfg.batch_size < 1) throw ConfigError("bad epoch/batch configuration");

    const nn::MlpSpec spec = cfg.spec();
    const auto lay = spec.layout();
    TrainedClassifier c;
    c.cfg = cfg;
    c.params = init_params(spec, key.child("init"));
    if (cfg.epochs == 0) return c;

    auto chain = nn::mlp_chain(spec, c.params.data());
    nn::ChainScratch<float> sc;
    sc.prepare(chain);
    std::vector<float> grads(lay.total);
    std::vector<float> dlogits(static_cast<size_t>(cfg.n_classes));
    std::vector<nn::ChainGrad<float>> cg(chain.size());
    for (int l = 0; l < spec.layer_count(); ++l) {
        cg[static_cast<size_t>(l)].dw = grads.data() + lay.find("w" + std::to_string(l)).offset;
        cg[static_cast<size_t>(l)].db = grads.data() + lay.find("b" + std::to_string(l)).offset;
    }

    const size_t n = ds.items.size();
    const long steps_per_epoch =
        static_cast<long>((n + static_cast<size_t>(cfg.batch_size) - 1) /
                          static_cast<size_t>(cfg.batch_size));
    const long total_steps = cfg.epochs * steps_per_epoch;
    const long warmup = std::lround(cfg.warmup_frac * static_cast<double>(total_steps));

    optim::AdamWState<float> opt(lay.total);
    optim::AdamWConfig ocfg;
    ocfg.lr = cfg.lr;
    ocfg.weight_decay = cfg.weight_decay;

    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    long step = 0;
    for (long e = 0; e < cfg.epochs; ++e) {
        RngStream sh(key.child("shuffle").child(static_cast<uint64_t>(e)));
        for (size_t i = n; i > 1; --i) {
            const size_t j = sh.uniform_below(i);
            std::swap(order[i - 1], order[j]);
        }
        for (size_t lo = 0; lo < n; lo += static_cast<size_t>(cfg.batch_size)) {
            const size_t hi = std::min(n, lo + static_cast<size_t>(cfg.batch_size));
            std::fill(grads.begin(), grads.end(), 0.0f);
            double loss = 0.0;
            for (size_t i = lo; i < hi; ++i) {
                const auto& item = ds.items[order[i]];
                nn::chain_forward(chain, item.pixels.data(), sc);
                loss += ce_loss_grad(sc.x.back().data(), cfg.n_classes,
                                     static_cast<int>(item.label), dlogits.data());
                nn::chain_backward(chain, sc, dlogits.data(), cg, static_cast<float*>(nullptr));
            }
            const int bsz = static_cast<int>(hi - lo);
            loss /= bsz;
            if (!std::isfinite(loss)) {
                throw DivergenceError("classifier training diverged at step " +
                                      std::to_string(step));
            }
            const float inv_b = static_cast<float>(1.0 / static_cast<double>(bsz));
            for (auto& g : grads) g *= inv_b;
            const double lr_now = optim::cosine_lr(step, total_steps, warmup, cfg.lr);
            optim::adamw_step(c.params.data(), grads.data(), opt, ocfg, lr_now, &lay);
            if (trace) trace->push_back(loss);
            ++step;
        }
    }
    return c;
}

std::vector<int> predict(const TrainedClassifier& c, const data::Dataset& ds) {
    if (ds.pixel_count() != c.cfg.input_dim) {
        throw ShapeError("dataset images are " + std::to_string(ds.pixel_count()) +
                         " pixels, classifier expects " + std::to_string(c.cfg.input_dim));
    }
    const nn::MlpSpec spec = c.cfg.spec();
    auto chain = nn::mlp_chain(spec, c.params.data());
    nn::ChainScratch<float> sc;
    sc.prepare(chain);
    std::vector<int> out(ds.items.size());
    for (size_t i = 0; i < ds.items.size(); ++i) {
        nn::chain_forward(chain, ds.items[i].pixels.data(), sc);
        const auto& logits = sc.x.back();
        int best = 0;
        for (int j = 1; j < c.cfg.n_classes; ++j) {
            if (logits[static_cast<size_t>(j)] > logits[static_cast<size_t>(best)]) best = j;
        }
        out[i] = best;
    }
    return out;
}

EvalReport evaluate(const TrainedClassifier& c, const data::Dataset& test) {
    if (test.items.empty()) throw ConfigError("evaluation set is empty");
    const auto preds = predict(c, test);
    EvalReport r;
    r.per_class.assign(static_cast<size_t>(c.cfg.n_classes), 0.0);
    r.per_class_count.assign(static_cast<size_t>(c.cfg.n_classes), 0);
    r.correct.resize(test.items.size());
    std::vector<int> hits(static_cast<size_t>(c.cfg.n_classes), 0);
    for (size_t i = 0; i < test.items.size(); ++i) {
        const int label = static_cast<int>(test.items[i].label);
        if (label >= c.cfg.n_classes) throw ShapeError("test label out of range");
        const bool ok = preds[i] == label;
        r.correct[i] = ok ? 1 : 0;
        r.per_class_count[static_cast<size_t>(label)] += 1;
        if (ok) hits[static_cast<size_t>(label)] += 1;
    }
    size_t total_hits = 0;
    for (size_t c2 = 0; c2 < hits.size(); ++c2) {
        total_hits += static_cast<size_t>(hits[c2]);
        r.per_class[c2] = r.per_class_count[c2] > 0
                              ? static_cast<double>(hits[c2]) / r.per_class_count[c2]
                              : 0.0;
    }
    r.accuracy = static_cast<double>(total_hits) / static_cast<double>(test.items.size());
    return r;
}

TrainedClassifier train_oracle(const data::Dataset& train, const data::Dataset& test,
                               const ClassifierConfig& cfg, RngKey key, double min_accuracy,
                               std::vector<double>* trace) {
    std::vector<int> per_class(static_cast<size_t>(cfg.n_classes), 0);
    check_dataset(train, cfg);
    for (const auto& it : train.items) per_class[it.label] += 1;
    for (int c = 0; c < cfg.n_classes; ++c) {
        if (per_class[static_cast<size_t>(c)] < 500) {
            throw ConfigError("oracle training needs >= 500 images per class; class " +
                              std::to_string(c) + " has " +
                              std::to_string(per_class[static_cast<size_t>(c)]));
        }
    }
    TrainedClassifier oracle = train_classifier(train, cfg, key, trace);
    const EvalReport rep = evaluate(oracle, test);
    if (rep.accuracy < min_accuracy) {
        throw ConfigError("oracle reached accuracy " + io::fmt_g9(rep.accuracy) +
                          ", below the required " + io::fmt_g9(min_accuracy) +
                          "; increase epochs or training data");
    }
    return oracle;
}

Tensor extract_features(const TrainedClassifier& c, const data::Dataset& ds) {
    if (ds.pixel_count() != c.cfg.input_dim) {
        throw ShapeError("dataset images are " + std::to_string(ds.pixel_count()) +
                         " pixels, classifier expects " + std::to_string(c.cfg.input_dim));
    }
    const nn::MlpSpec spec = c.cfg.spec();
    auto chain = nn::mlp_chain(spec, c.params.data());
    nn::ChainScratch<float> sc;
    sc.prepare(chain);
    const int fd = c.feature_dim();
    Tensor feats({static_cast<int>(ds.items.size()), fd});
    for (size_t i = 0; i < ds.items.size(); ++i) {
        nn::chain_forward(chain, ds.items[i].pixels.data(), sc);
        // Penultimate activation: output of the last hidden layer.
        const auto& h = sc.x[sc.x.size() - 2];
        std::memcpy(feats.data.data() + i * static_cast<size_t>(fd), h.data(),
                    static_cast<size_t>(fd) * sizeof(float));
    }
    return feats;
}

void save_classifier(const std::filesystem::path& path, const TrainedClassifier& c) {
    json j;
    j["kind"] = "classifier";
    j["input_dim"] = c.cfg.input_dim;
    j["hidden"] = c.cfg.hidden;
    j["n_classes"] = c.cfg.n_classes;
    diff::save_checkpoint(path, j.dump(), c.params);
}

TrainedClassifier load_classifier(const std::filesystem::path& path) {
    auto [desc, params] = diff::load_checkpoint(path);
    TrainedClassifier c;
    try {
        const json j = json::parse(desc);
        if (j.at("kind").get<std::string>() != "classifier") {
            throw FormatError(path.string() + ": not a classifier checkpoint");
        }
        c.cfg.input_dim = j.at("input_dim").get<int>();
        c.cfg.hidden = j.at("hidden").get<int>();
        c.cfg.n_classes = j.at("n_classes").get<int>();
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": bad classifier descriptor: " + e.what());
    }
    c.params = std::move(params);
    if (c.params.size() != c.cfg.spec().layout().total) {
        throw FormatError(path.string() + ": parameter payload does not match architecture");
    }
    return c;
}

void write_eval_report(const std::filesystem::path& path, const std::string& dataset_id,
                       uint64_t seed, const EvalReport& report) {
    std::string out = "dataset,seed,accuracy";
    for (size_t c = 0; c < report.per_class.size(); ++c) {
        out += ",class" + std::to_string(c);
    }
    out += "\n" + dataset_id + "," + std::to_string(seed) + "," + io::fmt_g9(report.accuracy);
    for (double v : report.per_class) out += "," + io::fmt_g9(v);
    out += "\n";
    io::write_text(path, out);
}

}  // namespace loft::cls
