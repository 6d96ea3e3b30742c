#pragma once

#include <string>

#include "bsim/datagen.hpp"
#include "bsim/models.hpp"

namespace bsim {

struct FeatureSet {
    Tensor features;  // [M x D]
    std::vector<int64_t> labels;
    int64_t classes = 0;

    void validate() const;
};

/// Frozen-feature extraction through the encoder (global-average-pooled h).
FeatureSet encoder_features(const ModelState& model, const LabeledImageSet& data,
                            int64_t batch = 64);

/// Per-channel intensity histograms; the color-shortcut baseline.
FeatureSet color_histogram_features(const LabeledImageSet& data, int64_t bins = 8);

struct ProbeOptions {
    double lr = 0.1;
    int64_t iters = 5000;
    double l2 = 1e-4;
};

/// Multinomial logistic regression on standardized features, trained with
/// full-batch gradient descent until the gradient norm falls below 1e-6 or
/// the iteration budget runs out. Returns top-1 accuracy on test.
double linear_probe(const FeatureSet& train, const FeatureSet& test,
                    const ProbeOptions& opts = {});

/// Cosine-similarity k-nearest-neighbor majority vote; ties are broken by
/// the single nearest neighbor among the tied classes.
double knn_eval(const FeatureSet& train, const FeatureSet& test, int64_t k = 5);

/// Projection onto the top-2 principal components of the centered features,
/// computed by power iteration (tol 1e-9). Component signs are fixed by
/// making the largest-magnitude loading positive.
Tensor pca2(const Tensor& features);

/// CSV: header then one row per sample: id, label, h.
void export_embeddings(const ModelState& model, const LabeledImageSet& data,
                       const std::string& path);

}  // namespace bsim
