#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "loft/data.hpp"
#include "loft/downstream.hpp"
#include "loft/tensor.hpp"

namespace loft::metrics {

// Per-class value that may be absent (no images of that class in the set).
struct ClassValue {
    bool present = false;
    double value = 0.0;
};

// One-vs-rest F1 of judge predictions against intended labels, per class.
// A class with no labeled images is reported absent rather than 0.
std::vector<ClassValue> recognizability(const cls::TrainedClassifier& judge,
                                        const data::Dataset& ds);

// Mean over feature dimensions of the per-dimension population standard
// deviation. Throws when fewer than 2 rows are given.
double diversity_from_features(const Tensor& feats);

// Per-class diversity of judge features. Every present class needs >= 2
// images; classes absent from the set are reported absent.
std::vector<ClassValue> diversity(const cls::TrainedClassifier& judge, const data::Dataset& ds);

// Frechet distance between Gaussian fits of the two feature sets:
// |mu1-mu2|^2 + Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2), with covariances
// regularized by +1e-6 I and negative eigenvalues clamped.
double fid_from_features(const Tensor& a, const Tensor& b);

// FID on judge features restricted to one class on both sides.
double alignment_fid(const cls::TrainedClassifier& judge, const data::Dataset& synth,
                     const data::Dataset& real, int cls_id);

// Fraction of test points where exactly one of the two models is correct.
double flip_ratio(const cls::EvalReport& a, const cls::EvalReport& b);

struct MetricsRecord {
    std::string method;
    int class_id = 0;
    double recognizability = 0.0;
    double diversity = 0.0;
    double fid = 0.0;
    double accuracy = 0.0;  // downstream per-class accuracy
    int n_samples = 0;
};

// One CSV row per (method, class), sorted by that pair; byte-stable.
void export_scatter(const std::filesystem::path& path, std::vector<MetricsRecord> records);

}  // namespace loft::metrics
