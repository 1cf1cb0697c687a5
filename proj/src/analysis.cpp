#include "loft/analysis.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>

#include "loft/io.hpp"

namespace loft::metrics {

std::vector<ClassValue> recognizability(const cls::TrainedClassifier& judge,
                                        const data::Dataset& ds) {
    const int C = judge.cfg.n_classes;
    const auto preds = cls::predict(judge, ds);
    std::vector<long> tp(static_cast<size_t>(C), 0), fp(static_cast<size_t>(C), 0),
        fn(static_cast<size_t>(C), 0), labeled(static_cast<size_t>(C), 0);
    for (size_t i = 0; i < ds.items.size(); ++i) {
        const int y = static_cast<int>(ds.items[i].label);
        const int p = preds[i];
        if (y >= C) throw ShapeError("label out of range for the judge");
        labeled[static_cast<size_t>(y)] += 1;
        if (p == y) {
            tp[static_cast<size_t>(y)] += 1;
        } else {
            fn[static_cast<size_t>(y)] += 1;
            fp[static_cast<size_t>(p)] += 1;
        }
    }
    std::vector<ClassValue> out(static_cast<size_t>(C));
    for (int c = 0; c < C; ++c) {
        const size_t ci = static_cast<size_t>(c);
        if (labeled[ci] == 0) continue;  // absent, not zero
        const long denom = 2 * tp[ci] + fp[ci] + fn[ci];
        out[ci].present = true;
        out[ci].value = denom > 0 ? 2.0 * static_cast<double>(tp[ci]) / static_cast<double>(denom)
                                  : 0.0;
    }
    return out;
}

double diversity_from_features(const Tensor& feats) {
    if (feats.shape.size() != 2) throw ShapeError("feature matrix must be 2-D");
    const int n = feats.shape[0];
    const int d = feats.shape[1];
    if (n < 2) throw ConfigError("diversity needs at least 2 feature rows");
    double acc = 0.0;
    for (int j = 0; j < d; ++j) {
        double mean = 0.0;
        for (int i = 0; i < n; ++i) {
            mean += static_cast<double>(feats.data[static_cast<size_t>(i) * d + j]);
        }
        mean /= n;
        double var = 0.0;
        for (int i = 0; i < n; ++i) {
            const double dv = static_cast<double>(feats.data[static_cast<size_t>(i) * d + j]) - mean;
            var += dv * dv;
        }
        var /= n;  // population variance
        acc += std::sqrt(std::max(0.0, var));
    }
    return acc / d;
}

namespace {

data::Dataset subset_by_class(const data::Dataset& ds, int cls_id) {
    data::Dataset out;
    out.H = ds.H;
    out.W = ds.W;
    for (const auto& it : ds.items) {
        if (static_cast<int>(it.label) == cls_id) out.items.push_back(it);
    }
    return out;
}

}  // namespace

std::vector<ClassValue> diversity(const cls::TrainedClassifier& judge, const data::Dataset& ds) {
    const int C = judge.cfg.n_classes;
    std::vector<ClassValue> out(static_cast<size_t>(C));
    for (int c = 0; c < C; ++c) {
        data::Dataset sub = subset_by_class(ds, c);
        if (sub.items.empty()) continue;
        if (sub.items.size() < 2) {
            throw ConfigError("diversity needs >= 2 images of class " + std::to_string(c));
        }
        out[static_cast<size_t>(c)].present = true;
        out[static_cast<size_t>(c)].value =
            diversity_from_features(cls::extract_features(judge, sub));
    }
    return out;
}

double fid_from_features(const Tensor& a, const Tensor& b) {
    if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[1]) {
        throw ShapeError("feature matrices must be 2-D with matching width");
    }
    const int d = a.shape[1];
    if (a.shape[0] < 2 || b.shape[0] < 2) {
        throw ConfigError("distribution distance needs >= 2 rows on each side");
    }

    auto stats = [d](const Tensor& f) {
        const int n = f.shape[0];
        Eigen::MatrixXd X(n, d);
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < d; ++j) {
                X(i, j) = static_cast<double>(f.data[static_cast<size_t>(i) * d + j]);
            }
        }
        Eigen::VectorXd mu = X.colwise().mean();
        Eigen::MatrixXd centered = X.rowwise() - mu.transpose();
        // Population covariance, regularized against small sample counts.
        Eigen::MatrixXd sigma = (centered.transpose() * centered) / static_cast<double>(n);
        sigma += 1e-6 * Eigen::MatrixXd::Identity(d, d);
        return std::make_pair(mu, sigma);
    };

    const auto [mu1, s1] = stats(a);
    const auto [mu2, s2] = stats(b);

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es1(s1);
    if (es1.info() != Eigen::Success) throw Error("eigendecomposition failed on first covariance");
    Eigen::VectorXd ev1 = es1.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    const Eigen::MatrixXd sqrt_s1 =
        es1.eigenvectors() * ev1.asDiagonal() * es1.eigenvectors().transpose();

    Eigen::MatrixXd inner = sqrt_s1 * s2 * sqrt_s1;
    inner = 0.5 * (inner + inner.transpose());  // symmetrize against round-off
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es2(inner);
    if (es2.info() != Eigen::Success) throw Error("eigendecomposition failed on cross term");
    const double tr_cross = es2.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

    const double mean_term = (mu1 - mu2).squaredNorm();
    const double fid = mean_term + s1.trace() + s2.trace() - 2.0 * tr_cross;
    return std::max(0.0, fid);
}

double alignment_fid(const cls::TrainedClassifier& judge, const data::Dataset& synth,
                     const data::Dataset& real, int cls_id) {
    data::Dataset s = subset_by_class(synth, cls_id);
    data::Dataset r = subset_by_class(real, cls_id);
    if (s.items.size() < 2 || r.items.size() < 2) {
        throw ConfigError("alignment distance needs >= 2 images of class " +
                          std::to_string(cls_id) + " on both sides");
    }
    return fid_from_features(cls::extract_features(judge, s), cls::extract_features(judge, r));
}

double flip_ratio(const cls::EvalReport& a, const cls::EvalReport& b) {
    if (a.correct.size() != b.correct.size()) {
        throw ShapeError("flip ratio needs bitmaps over the same test set (got " +
                         std::to_string(a.correct.size()) + " vs " +
                         std::to_string(b.correct.size()) + ")");
    }
    if (a.correct.empty()) throw ConfigError("flip ratio over an empty test set");
    size_t flips = 0;
    for (size_t i = 0; i < a.correct.size(); ++i) {
        if ((a.correct[i] != 0) != (b.correct[i] != 0)) ++flips;
    }
    return static_cast<double>(flips) / static_cast<double>(a.correct.size());
}

void export_scatter(const std::filesystem::path& path, std::vector<MetricsRecord> records) {
    std::sort(records.begin(), records.end(), [](const MetricsRecord& x, const MetricsRecord& y) {
        if (x.method != y.method) return x.method < y.method;
        return x.class_id < y.class_id;
    });
    std::string out = "method,class,recognizability,diversity,fid,accuracy,n\n";
    for (const auto& r : records) {
        out += r.method + "," + std::to_string(r.class_id) + "," + io::fmt_g9(r.recognizability) +
               "," + io::fmt_g9(r.diversity) + "," + io::fmt_g9(r.fid) + "," +
               io::fmt_g9(r.accuracy) + "," + std::to_string(r.n_samples) + "\n";
    }
    io::write_text(path, out);
}

}  // namespace loft::metrics
