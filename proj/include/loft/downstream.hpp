#pragma once

#include <filesystem>
#include <vector>

#include "loft/data.hpp"
#include "loft/nn.hpp"
#include "loft/rng.hpp"
#include "loft/tensor.hpp"

namespace loft::cls {

struct ClassifierConfig {
    int input_dim = 256;
    int hidden = 128;  // two hidden layers of this width
    int n_classes = 6;
    long epochs = 40;
    int batch_size = 64;
    double lr = 1e-3;
    double warmup_frac = 0.1;
    double weight_decay = 0.0;

    nn::MlpSpec spec() const;  // input -> hidden -> hidden -> logits
};

struct TrainedClassifier {
    ClassifierConfig cfg;
    std::vector<float> params;

    int feature_dim() const { return cfg.hidden; }
};

// Cross-entropy training from random init; per-epoch shuffled batches over
// the dataset, cosine schedule with warmup.
TrainedClassifier train_classifier(const data::Dataset& ds, const ClassifierConfig& cfg,
                                   RngKey key, std::vector<double>* trace = nullptr);

struct EvalReport {
    double accuracy = 0.0;
    std::vector<double> per_class;      // accuracy per class (0 when class absent)
    std::vector<int> per_class_count;
    std::vector<uint8_t> correct;       // correctness bitmap in dataset order
};

EvalReport evaluate(const TrainedClassifier& c, const data::Dataset& test);

// Argmax over logits (ties resolved to the lowest index).
std::vector<int> predict(const TrainedClassifier& c, const data::Dataset& ds);

// The judge used for recognizability/diversity/alignment metrics: same
// architecture, trained on plentiful real data, gated on held-out accuracy.
TrainedClassifier train_oracle(const data::Dataset& train, const data::Dataset& test,
                               const ClassifierConfig& cfg, RngKey key, double min_accuracy = 0.95,
                               std::vector<double>* trace = nullptr);

// Penultimate activations (n x feature_dim), no normalization.
Tensor extract_features(const TrainedClassifier& c, const data::Dataset& ds);

void save_classifier(const std::filesystem::path& path, const TrainedClassifier& c);
TrainedClassifier load_classifier(const std::filesystem::path& path);

// Eval-report CSV row: dataset id, seed, overall accuracy, per-class columns.
void write_eval_report(const std::filesystem::path& path, const std::string& dataset_id,
                       uint64_t seed, const EvalReport& report);

}  // namespace loft::cls
