#pragma once

// Multinomial logistic regression on mean-pooled features, trained by
// full-batch gradient descent. Used as an independent learnability oracle.

#include <cmath>
#include <vector>

#include "ravqa/synthetic.hpp"

namespace ravqa::testing {

struct ProbeStreams {
    bool audio = true;
    bool visual = true;
    bool question = true;
};

inline std::vector<double> pooled_features(const ModalityBundle& s, ProbeStreams use) {
    std::vector<double> f;
    auto pool = [&](const Tensor& x) {
        for (std::size_t j = 0; j < x.cols(); ++j) {
            double acc = 0.0;
            for (std::size_t t = 0; t < x.rows(); ++t) acc += x.at(t, j);
            f.push_back(acc / static_cast<double>(x.rows()));
        }
    };
    if (use.audio) pool(*s.audio);
    if (use.visual) pool(*s.visual);
    if (use.question) pool(s.question);
    return f;
}

class LinearProbe {
public:
    LinearProbe(const Dataset& train, std::size_t classes, ProbeStreams use, std::size_t iters = 400, double lr = 0.5,
                double l2 = 1e-4)
        : use_(use), classes_(classes) {
        std::vector<std::vector<double>> xs;
        for (const auto& s : train.samples) xs.push_back(pooled_features(s, use));
        const std::size_t d = xs.front().size();
        const double n = static_cast<double>(xs.size());
        mean_.assign(d, 0.0);
        scale_.assign(d, 0.0);
        for (const auto& x : xs)
            for (std::size_t j = 0; j < d; ++j) mean_[j] += x[j] / n;
        for (const auto& x : xs)
            for (std::size_t j = 0; j < d; ++j) scale_[j] += (x[j] - mean_[j]) * (x[j] - mean_[j]) / n;
        for (double& v : scale_) v = 1.0 / std::sqrt(v + 1e-12);
        for (auto& x : xs) standardize(x);

        w_.assign(classes, std::vector<double>(d + 1, 0.0));
        for (std::size_t it = 0; it < iters; ++it) {
            std::vector<std::vector<double>> grad(classes, std::vector<double>(d + 1, 0.0));
            for (std::size_t i = 0; i < xs.size(); ++i) {
                const auto p = probabilities(xs[i]);
                for (std::size_t c = 0; c < classes; ++c) {
                    const double e = p[c] - (train.samples[i].label == c ? 1.0 : 0.0);
                    for (std::size_t j = 0; j < d; ++j) grad[c][j] += e * xs[i][j] / n;
                    grad[c][d] += e / n;
                }
            }
            for (std::size_t c = 0; c < classes; ++c)
                for (std::size_t j = 0; j <= d; ++j) w_[c][j] -= lr * (grad[c][j] + l2 * w_[c][j]);
        }
    }

    std::size_t predict(const ModalityBundle& s) const {
        auto x = pooled_features(s, use_);
        standardize(x);
        const auto p = probabilities(x);
        std::size_t best = 0;
        for (std::size_t c = 1; c < classes_; ++c)
            if (p[c] > p[best]) best = c;
        return best;
    }

    double accuracy(const Dataset& d) const {
        double hits = 0.0;
        for (const auto& s : d.samples) hits += predict(s) == s.label;
        return hits / static_cast<double>(d.size());
    }

private:
    void standardize(std::vector<double>& x) const {
        for (std::size_t j = 0; j < x.size(); ++j) x[j] = (x[j] - mean_[j]) * scale_[j];
    }

    std::vector<double> probabilities(const std::vector<double>& x) const {
        std::vector<double> z(classes_);
        double mx = -1e300;
        for (std::size_t c = 0; c < classes_; ++c) {
            double acc = w_[c].back();
            for (std::size_t j = 0; j < x.size(); ++j) acc += w_[c][j] * x[j];
            z[c] = acc;
            mx = std::max(mx, acc);
        }
        double sum = 0.0;
        for (double& v : z) sum += (v = std::exp(v - mx));
        for (double& v : z) v /= sum;
        return z;
    }

    ProbeStreams use_;
    std::size_t classes_;
    std::vector<double> mean_, scale_;
    std::vector<std::vector<double>> w_;
};

}  // namespace ravqa::testing
