#include "bsim/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace bsim {

void FeatureSet::validate() const {
    check(features.rows() == static_cast<int64_t>(labels.size()),
          "FeatureSet: labels misaligned with features");
    if (classes < 1) throw ValidationError("FeatureSet: class count must be positive");
    for (int64_t l : labels)
        if (l < 0 || l >= classes) throw ValidationError("FeatureSet: label out of range");
}

FeatureSet encoder_features(const ModelState& model, const LabeledImageSet& data,
                            int64_t batch) {
    check(!data.images.empty(), "encoder_features: empty dataset");
    const int64_t m = data.size();
    FeatureSet out;
    out.labels = data.labels;
    out.classes = static_cast<int64_t>(data.class_names.size());
    out.features = Tensor({m, model.dh()});
    for (int64_t start = 0; start < m; start += batch) {
        const int64_t count = std::min(batch, m - start);
        Tensor packed = pack_images({data.images.data() + start, static_cast<size_t>(count)});
        Tensor h = encode_features(model, packed);
        for (int64_t i = 0; i < count; ++i)
            for (int64_t j = 0; j < model.dh(); ++j)
                out.features.at(start + i, j) = h.at(i, j);
    }
    return out;
}

FeatureSet color_histogram_features(const LabeledImageSet& data, int64_t bins) {
    check(!data.images.empty(), "color_histogram_features: empty dataset");
    const int64_t c = data.images[0].c;
    FeatureSet out;
    out.labels = data.labels;
    out.classes = static_cast<int64_t>(data.class_names.size());
    out.features = Tensor({data.size(), c * bins});
    for (int64_t i = 0; i < data.size(); ++i) {
        const ImageTensor& img = data.images[i];
        const double inv = 1.0 / static_cast<double>(img.h * img.w);
        for (int64_t y = 0; y < img.h; ++y)
            for (int64_t x = 0; x < img.w; ++x)
                for (int64_t ch = 0; ch < c; ++ch) {
                    int64_t b = static_cast<int64_t>(img.at(y, x, ch) * static_cast<double>(bins));
                    b = std::min(b, bins - 1);
                    out.features.at(i, ch * bins + b) += inv;
                }
    }
    return out;
}

namespace {

/// Column mean/std from the training set, applied to both sets. Keeps the
/// fixed probe learning rate usable across feature scales.
void standardize(Tensor& train, Tensor& test) {
    const int64_t d = train.cols();
    for (int64_t j = 0; j < d; ++j) {
        double mu = 0.0;
        for (int64_t i = 0; i < train.rows(); ++i) mu += train.at(i, j);
        mu /= static_cast<double>(train.rows());
        double var = 0.0;
        for (int64_t i = 0; i < train.rows(); ++i) {
            const double c = train.at(i, j) - mu;
            var += c * c;
        }
        var /= static_cast<double>(train.rows());
        const double sd = std::sqrt(var) + 1e-8;
        for (int64_t i = 0; i < train.rows(); ++i) train.at(i, j) = (train.at(i, j) - mu) / sd;
        for (int64_t i = 0; i < test.rows(); ++i) test.at(i, j) = (test.at(i, j) - mu) / sd;
    }
}

}  // namespace

double linear_probe(const FeatureSet& train_in, const FeatureSet& test_in,
                    const ProbeOptions& opts) {
    train_in.validate();
    test_in.validate();
    check(train_in.features.cols() == test_in.features.cols(), "linear_probe: dim mismatch");
    check(train_in.classes == test_in.classes, "linear_probe: class count mismatch");
    const int64_t k = train_in.classes;
    {
        std::vector<bool> present(static_cast<size_t>(k), false);
        for (int64_t l : train_in.labels) present[l] = true;
        if (std::count(present.begin(), present.end(), true) < 2)
            throw ValidationError("linear_probe: training set is single-class");
    }

    Tensor x = train_in.features;
    Tensor xt = test_in.features;
    standardize(x, xt);
    const int64_t m = x.rows(), d = x.cols();
    Tensor w({d, k});
    Tensor b({k});

    std::vector<double> p(static_cast<size_t>(k));
    Tensor gw({d, k});
    Tensor gb({k});
    for (int64_t it = 0; it < opts.iters; ++it) {
        std::fill(gw.data().begin(), gw.data().end(), 0.0);
        std::fill(gb.data().begin(), gb.data().end(), 0.0);
        for (int64_t i = 0; i < m; ++i) {
            double mx = -1e300;
            for (int64_t c = 0; c < k; ++c) {
                double z = b[c];
                for (int64_t j = 0; j < d; ++j) z += x.at(i, j) * w.at(j, c);
                p[c] = z;
                mx = std::max(mx, z);
            }
            double s = 0.0;
            for (int64_t c = 0; c < k; ++c) {
                p[c] = std::exp(p[c] - mx);
                s += p[c];
            }
            for (int64_t c = 0; c < k; ++c) {
                const double diff = p[c] / s - (train_in.labels[i] == c ? 1.0 : 0.0);
                gb[c] += diff;
                for (int64_t j = 0; j < d; ++j) gw.at(j, c) += x.at(i, j) * diff;
            }
        }
        double gnorm = 0.0;
        const double inv_m = 1.0 / static_cast<double>(m);
        for (int64_t idx = 0; idx < gw.size(); ++idx) {
            gw[idx] = gw[idx] * inv_m + opts.l2 * w[idx];
            gnorm += gw[idx] * gw[idx];
        }
        for (int64_t c = 0; c < k; ++c) {
            gb[c] *= inv_m;
            gnorm += gb[c] * gb[c];
        }
        for (int64_t idx = 0; idx < w.size(); ++idx) w[idx] -= opts.lr * gw[idx];
        for (int64_t c = 0; c < k; ++c) b[c] -= opts.lr * gb[c];
        if (std::sqrt(gnorm) < 1e-6) break;
    }

    int64_t hits = 0;
    for (int64_t i = 0; i < xt.rows(); ++i) {
        int64_t best = 0;
        double best_z = -1e300;
        for (int64_t c = 0; c < k; ++c) {
            double z = b[c];
            for (int64_t j = 0; j < d; ++j) z += xt.at(i, j) * w.at(j, c);
            if (z > best_z) {
                best_z = z;
                best = c;
            }
        }
        if (best == test_in.labels[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(xt.rows());
}

double knn_eval(const FeatureSet& train, const FeatureSet& test, int64_t k) {
    train.validate();
    test.validate();
    if (train.features.rows() == 0 || test.features.rows() == 0)
        throw ValidationError("knn_eval: empty feature set");
    if (k < 1 || k > train.features.rows())
        throw ValidationError("knn_eval: k outside [1, train size]");

    const int64_t mtr = train.features.rows(), d = train.features.cols();
    int64_t hits = 0;
    std::vector<std::pair<double, int64_t>> sims(static_cast<size_t>(mtr));
    for (int64_t i = 0; i < test.features.rows(); ++i) {
        Tensor q({d});
        for (int64_t j = 0; j < d; ++j) q[j] = test.features.at(i, j);
        for (int64_t r = 0; r < mtr; ++r) {
            Tensor t({d});
            for (int64_t j = 0; j < d; ++j) t[j] = train.features.at(r, j);
            sims[r] = {cosine_sim(q, t), r};
        }
        std::stable_sort(sims.begin(), sims.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        std::vector<int64_t> votes(static_cast<size_t>(train.classes), 0);
        for (int64_t r = 0; r < k; ++r) ++votes[train.labels[sims[r].second]];
        const int64_t top = *std::max_element(votes.begin(), votes.end());
        int64_t winner = -1;
        for (int64_t r = 0; r < k; ++r) {
            const int64_t cls = train.labels[sims[r].second];
            if (votes[cls] == top) {
                winner = cls;  // nearest member of a tied class decides
                break;
            }
        }
        if (winner == test.labels[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(test.features.rows());
}

namespace {

Tensor power_iteration(const Tensor& cov, const Tensor& deflate, double deflate_eig,
                       double tol) {
    const int64_t d = cov.rows();
    Rng rng(0x9e3779b9u);  // fixed; pca2 is deterministic by contract
    Tensor v({d});
    for (int64_t i = 0; i < d; ++i) v[i] = rng.normal();
    double n = norm2(v);
    for (int64_t i = 0; i < d; ++i) v[i] /= n;
    for (int64_t it = 0; it < 100000; ++it) {
        Tensor next = matmul(cov, v);
        if (!deflate.empty()) {
            const double proj = dot(deflate, v) * deflate_eig;
            for (int64_t i = 0; i < d; ++i) next[i] -= proj * deflate[i];
        }
        n = norm2(next);
        if (!(n > 1e-300)) return v;  // zero eigenvalue direction; keep current
        double delta = 0.0;
        for (int64_t i = 0; i < d; ++i) {
            next[i] /= n;
            delta = std::max(delta, std::abs(std::abs(next[i]) - std::abs(v[i])));
        }
        const bool done = delta < tol;
        v = next;
        if (done) break;
    }
    return v;
}

}  // namespace

Tensor pca2(const Tensor& features) {
    const int64_t m = features.rows(), d = features.cols();
    if (m < 3) throw ValidationError("pca2: need at least 3 rows");
    Tensor x = features;
    for (int64_t j = 0; j < d; ++j) {
        double mu = 0.0;
        for (int64_t i = 0; i < m; ++i) mu += x.at(i, j);
        mu /= static_cast<double>(m);
        for (int64_t i = 0; i < m; ++i) x.at(i, j) -= mu;
    }
    double total_var = 0.0;
    for (int64_t i = 0; i < x.size(); ++i) total_var += x[i] * x[i];
    if (!(total_var > 0.0)) throw ValidationError("pca2: all rows identical");

    Tensor cov({d, d});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t a = 0; a < d; ++a) {
            const double xa = x.at(i, a);
            if (xa == 0.0) continue;
            for (int64_t b = 0; b < d; ++b) cov.at(a, b) += xa * x.at(i, b);
        }
    const double inv = 1.0 / static_cast<double>(m - 1);
    for (int64_t i = 0; i < cov.size(); ++i) cov[i] *= inv;

    Tensor v1 = power_iteration(cov, Tensor(), 0.0, 1e-9);
    const double eig1 = dot(v1, matmul(cov, v1));
    Tensor v2 = power_iteration(cov, v1, eig1, 1e-9);

    auto fix_sign = [d](Tensor& v) {
        int64_t arg = 0;
        for (int64_t i = 1; i < d; ++i)
            if (std::abs(v[i]) > std::abs(v[arg])) arg = i;
        if (v[arg] < 0.0)
            for (int64_t i = 0; i < d; ++i) v[i] = -v[i];
    };
    fix_sign(v1);
    fix_sign(v2);

    Tensor out({m, 2});
    for (int64_t i = 0; i < m; ++i) {
        double p1 = 0.0, p2 = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            p1 += x.at(i, j) * v1[j];
            p2 += x.at(i, j) * v2[j];
        }
        out.at(i, 0) = p1;
        out.at(i, 1) = p2;
    }
    return out;
}

void export_embeddings(const ModelState& model, const LabeledImageSet& data,
                       const std::string& path) {
    FeatureSet fs = encoder_features(model, data);
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw IoError("cannot open embeddings file: " + path);
    std::fprintf(f, "id,label");
    for (int64_t j = 0; j < fs.features.cols(); ++j) std::fprintf(f, ",h%lld", static_cast<long long>(j));
    std::fprintf(f, "\n");
    for (int64_t i = 0; i < fs.features.rows(); ++i) {
        std::fprintf(f, "%lld,%lld", static_cast<long long>(i),
                     static_cast<long long>(fs.labels[i]));
        for (int64_t j = 0; j < fs.features.cols(); ++j)
            std::fprintf(f, ",%.17g", fs.features.at(i, j));
        std::fprintf(f, "\n");
    }
    std::fclose(f);
}

}  // namespace bsim
