#pragma once

// Evaluation harness: word relatedness, semantic-feature prediction, lexical
// relation probing, context understanding, windowed perplexity, and the two
// concreteness analyses (rank regression, per-word NLL differences).  All
// statistics are computed with plain strict-FP loops so that identical inputs
// produce identical bytes in every report.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <boost/math/distributions/students_t.hpp>
#include <json.hpp>

#include "lcg/train.hpp"

namespace lcg {

// ---------------------------------------------------------------------------
// Ranks and rank correlation.
// ---------------------------------------------------------------------------

// 1-based ranks; tied values share the mean of their rank span.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
    size_t n = v.size();
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(n, 0.0);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
        double r = 0.5 * static_cast<double>(i + j) + 1.0;  // mean of ranks i+1 .. j+1
        for (size_t k = i; k <= j; ++k) ranks[order[k]] = r;
        i = j + 1;
    }
    return ranks;
}

namespace detail {

inline double pearson(const std::vector<double>& xs, const std::vector<double>& ys) {
    size_t n = xs.size();
    double mx = 0, my = 0;
    for (size_t i = 0; i < n; ++i) {
        mx += xs[i];
        my += ys[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxy = 0, sxx = 0, syy = 0;
    for (size_t i = 0; i < n; ++i) {
        double dx = xs[i] - mx, dy = ys[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) throw NumericError("correlation undefined for constant input");
    return sxy / std::sqrt(sxx * syy);
}

inline double dot(const double* a, const double* b, size_t n) {
    double s = 0;
    for (size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

inline double cosine_or_zero(const std::vector<double>& a, const std::vector<double>& b) {
    double na = std::sqrt(dot(a.data(), a.data(), a.size()));
    double nb = std::sqrt(dot(b.data(), b.data(), b.size()));
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot(a.data(), b.data(), a.size()) / (na * nb);
}

// argmax with ties resolved to the lowest index
inline int argmax_low(const std::vector<double>& v) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(v.size()); ++i) {
        if (v[static_cast<size_t>(i)] > v[static_cast<size_t>(best)]) best = i;
    }
    return best;
}

}  // namespace detail

// Spearman rank correlation: Pearson of average ranks.
inline double spearman(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size()) throw UsageError("spearman inputs must have equal length");
    if (xs.size() < 2) throw UsageError("spearman needs at least two observations");
    return detail::pearson(average_ranks(xs), average_ranks(ys));
}

// ---------------------------------------------------------------------------
// Word representations.
// ---------------------------------------------------------------------------

struct WordRepresentation {
    std::string word;
    std::vector<std::vector<double>> layers;  // [0..n_layers], each of dim d
};

// Forward [BOS, word tokens] and keep every layer's vector at the final token.
inline WordRepresentation word_representation(const TransformerLM& model, const Tokenizer& tok,
                                              const std::string& word) {
    std::vector<int> ids = tok.encode(word);
    if (ids.empty()) throw DataError("word tokenizes to nothing: '" + word + "'");
    std::vector<int> seq;
    seq.push_back(kBosId);
    seq.insert(seq.end(), ids.begin(), ids.end());
    if (static_cast<int>(seq.size()) > model.config().max_seq_len) {
        throw DataError(format_msg("word '%s' needs %zu positions but the model allows %d", word.c_str(), seq.size(),
                                   model.config().max_seq_len));
    }
    Tape tape;
    ForwardResult fwd = model.forward(tape, TokenBatch::from_sequences({seq}, kPadId));
    WordRepresentation rep;
    rep.word = word;
    int64_t d = model.config().d_model;
    int64_t row = static_cast<int64_t>(seq.size()) - 1;
    for (const Tensor& h : fwd.layers) {
        const double* p = h.values().data() + row * d;
        rep.layers.emplace_back(p, p + d);
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Reports.
// ---------------------------------------------------------------------------

struct BenchmarkReport {
    std::string benchmark;
    std::vector<double> per_layer;  // selection score per layer (empty if not layered)
    int best_layer = -1;
    double score = 0.0;
    nlohmann::json meta;

    nlohmann::json to_json() const {
        return nlohmann::json{{"benchmark", benchmark},
                              {"per_layer", per_layer},
                              {"best_layer", best_layer},
                              {"score", score},
                              {"meta", meta}};
    }
};

// ---------------------------------------------------------------------------
// Benchmark file readers (TSV).
// ---------------------------------------------------------------------------

struct ScoredPair {
    std::string a, b;
    double score = 0.0;
};

struct RelationExample {
    std::string a, b;
    int label = 0;
};

struct ContextPair {
    std::string original, modified, target, pos;
};

struct FeatureTable {
    std::vector<std::string> words;
    std::vector<std::string> features;
    std::vector<double> values;  // words x features, row-major

    double at(size_t w, size_t f) const { return values[w * features.size() + f]; }
};

inline const std::vector<std::string>& relation_labels() {
    static const std::vector<std::string> labels = {"SYN", "ANT", "HYPER", "PART_OF", "RANDOM"};
    return labels;
}

namespace detail {

inline std::vector<std::vector<std::string>> read_tsv(const std::string& path, size_t n_cols) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot read file: " + path);
    std::vector<std::vector<std::string>> rows;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> cols;
        size_t start = 0;
        while (true) {
            size_t tab = line.find('\t', start);
            cols.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
            if (tab == std::string::npos) break;
            start = tab + 1;
        }
        if (cols.size() != n_cols) {
            throw DataError(format_msg("%s line %d: expected %zu tab-separated columns, found %zu", path.c_str(),
                                       lineno, n_cols, cols.size()));
        }
        rows.push_back(std::move(cols));
    }
    return rows;
}

inline double parse_double(const std::string& s, const std::string& what) {
    try {
        size_t used = 0;
        double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw DataError("cannot parse " + what + ": '" + s + "'");
    }
}

}  // namespace detail

inline std::vector<ScoredPair> read_scored_pairs(const std::string& path) {
    std::vector<ScoredPair> out;
    for (auto& r : detail::read_tsv(path, 3)) {
        out.push_back({r[0], r[1], detail::parse_double(r[2], "pair score in " + path)});
    }
    return out;
}

inline std::map<std::string, double> read_concreteness(const std::string& path) {
    std::map<std::string, double> out;
    for (auto& r : detail::read_tsv(path, 2)) out[r[0]] = detail::parse_double(r[1], "concreteness in " + path);
    return out;
}

inline std::vector<RelationExample> read_relations(const std::string& path) {
    std::vector<RelationExample> out;
    for (auto& r : detail::read_tsv(path, 3)) {
        const auto& labels = relation_labels();
        auto it = std::find(labels.begin(), labels.end(), r[2]);
        if (it == labels.end()) {
            std::string valid;
            for (const auto& l : labels) valid += (valid.empty() ? "" : ", ") + l;
            throw DataError("unknown relation label '" + r[2] + "' in " + path + " (valid: " + valid + ")");
        }
        out.push_back({r[0], r[1], static_cast<int>(it - labels.begin())});
    }
    return out;
}

inline std::vector<ContextPair> read_context_pairs(const std::string& path) {
    std::vector<ContextPair> out;
    for (auto& r : detail::read_tsv(path, 4)) {
        if (r[3] != "noun" && r[3] != "verb" && r[3] != "adj") {
            throw DataError("unknown part-of-speech tag '" + r[3] + "' in " + path);
        }
        out.push_back({r[0], r[1], r[2], r[3]});
    }
    return out;
}

// Triplets word\tfeature\tstrength; features keep first-appearance order.
inline FeatureTable read_feature_norms(const std::string& path) {
    auto rows = detail::read_tsv(path, 3);
    FeatureTable t;
    std::map<std::string, size_t> word_idx, feat_idx;
    std::vector<std::tuple<size_t, size_t, double>> cells;
    for (auto& r : rows) {
        auto wi = word_idx.find(r[0]);
        if (wi == word_idx.end()) {
            wi = word_idx.emplace(r[0], t.words.size()).first;
            t.words.push_back(r[0]);
        }
        auto fi = feat_idx.find(r[1]);
        if (fi == feat_idx.end()) {
            fi = feat_idx.emplace(r[1], t.features.size()).first;
            t.features.push_back(r[1]);
        }
        double v = detail::parse_double(r[2], "feature strength in " + path);
        if (v < 0.0) throw DataError("negative feature strength in " + path);
        cells.emplace_back(wi->second, fi->second, v);
    }
    if (t.words.empty()) throw DataError("feature norms file is empty: " + path);
    t.values.assign(t.words.size() * t.features.size(), 0.0);
    for (auto& [w, f, v] : cells) t.values[w * t.features.size() + f] = v;
    return t;
}

// ---------------------------------------------------------------------------
// Word relatedness.
// ---------------------------------------------------------------------------

inline BenchmarkReport relatedness_benchmark(const TransformerLM& model, const Tokenizer& tok,
                                             const std::vector<ScoredPair>& pairs) {
    if (pairs.empty()) throw UsageError("relatedness benchmark needs at least one pair");
    std::map<std::string, WordRepresentation> reps;
    int skipped = 0;
    std::vector<const ScoredPair*> used;
    for (const ScoredPair& p : pairs) {
        bool ok = true;
        for (const std::string& w : {p.a, p.b}) {
            if (reps.count(w)) continue;
            try {
                reps.emplace(w, word_representation(model, tok, w));
            } catch (const DataError&) {
                ok = false;
            }
        }
        if (ok && reps.count(p.a) && reps.count(p.b)) {
            used.push_back(&p);
        } else {
            ++skipped;
        }
    }
    if (used.size() < 2) throw DataError("fewer than two scorable relatedness pairs");

    int n_layers = static_cast<int>(reps.begin()->second.layers.size());
    std::vector<double> human;
    for (const ScoredPair* p : used) human.push_back(p->score);
    BenchmarkReport rep;
    rep.benchmark = "relatedness";
    for (int l = 0; l < n_layers; ++l) {
        std::vector<double> cos;
        for (const ScoredPair* p : used) {
            cos.push_back(detail::cosine_or_zero(reps.at(p->a).layers[static_cast<size_t>(l)],
                                                 reps.at(p->b).layers[static_cast<size_t>(l)]));
        }
        rep.per_layer.push_back(spearman(cos, human));
    }
    rep.best_layer = detail::argmax_low(rep.per_layer);
    rep.score = rep.per_layer[static_cast<size_t>(rep.best_layer)];
    rep.meta = {{"pairs_used", used.size()}, {"pairs_skipped", skipped}};
    return rep;
}

// ---------------------------------------------------------------------------
// Partial least squares (PLS2, NIPALS with deflation).
// ---------------------------------------------------------------------------

struct PLSModel {
    int n_components = 0;  // attained (may stop early on rank deficiency)
    int d = 0, f = 0;
    std::vector<double> x_mean, y_mean;
    std::vector<double> coef;  // d x f regression matrix on centered data
};

inline PLSModel pls_fit(const std::vector<double>& X, const std::vector<double>& Y, int N, int d, int f,
                        int n_components) {
    if (N < 2 || d < 1 || f < 1) throw UsageError("pls_fit needs N >= 2 and positive dimensions");
    if (static_cast<int64_t>(X.size()) != static_cast<int64_t>(N) * d ||
        static_cast<int64_t>(Y.size()) != static_cast<int64_t>(N) * f) {
        throw ShapeError("pls_fit data sizes disagree with N, d, f");
    }
    if (n_components < 1 || n_components > std::min(N - 1, d)) {
        throw UsageError(format_msg("n_components %d outside [1, min(N-1, d)] = [1, %d]", n_components,
                                    std::min(N - 1, d)));
    }

    PLSModel m;
    m.d = d;
    m.f = f;
    m.x_mean.assign(static_cast<size_t>(d), 0.0);
    m.y_mean.assign(static_cast<size_t>(f), 0.0);
    std::vector<double> Xc = X, Yc = Y;
    for (int j = 0; j < d; ++j) {
        double s = 0;
        for (int i = 0; i < N; ++i) s += Xc[static_cast<size_t>(i) * d + j];
        m.x_mean[static_cast<size_t>(j)] = s / N;
        for (int i = 0; i < N; ++i) Xc[static_cast<size_t>(i) * d + j] -= m.x_mean[static_cast<size_t>(j)];
    }
    for (int j = 0; j < f; ++j) {
        double s = 0;
        for (int i = 0; i < N; ++i) s += Yc[static_cast<size_t>(i) * f + j];
        m.y_mean[static_cast<size_t>(j)] = s / N;
        for (int i = 0; i < N; ++i) Yc[static_cast<size_t>(i) * f + j] -= m.y_mean[static_cast<size_t>(j)];
    }

    double x_scale = 0, y_scale = 0;
    for (double v : Xc) x_scale += v * v;
    for (double v : Yc) y_scale += v * v;
    const double tol_x = 1e-12 * (x_scale + 1.0), tol_y = 1e-12 * (y_scale + 1.0);

    std::vector<std::vector<double>> Ws, Ps, Cs, Rs;
    m.coef.assign(static_cast<size_t>(d) * f, 0.0);

    for (int a = 0; a < n_components; ++a) {
        // start u at the dominant remaining response column
        int u_col = 0;
        double best = -1.0;
        for (int j = 0; j < f; ++j) {
            double s = 0;
            for (int i = 0; i < N; ++i) {
                double v = Yc[static_cast<size_t>(i) * f + j];
                s += v * v;
            }
            if (s > best) {
                best = s;
                u_col = j;
            }
        }
        if (best <= tol_y) break;  // response fully explained
        std::vector<double> u(static_cast<size_t>(N));
        for (int i = 0; i < N; ++i) u[static_cast<size_t>(i)] = Yc[static_cast<size_t>(i) * f + u_col];

        std::vector<double> w(static_cast<size_t>(d)), t(static_cast<size_t>(N)), c(static_cast<size_t>(f));
        std::vector<double> t_prev(static_cast<size_t>(N), 0.0);
        double tt = 0;
        bool deficient = false;
        for (int iter = 0; iter < 500; ++iter) {
            // w = X^T u, normalized
            double ww = 0;
            for (int j = 0; j < d; ++j) {
                double s = 0;
                for (int i = 0; i < N; ++i) s += Xc[static_cast<size_t>(i) * d + j] * u[static_cast<size_t>(i)];
                w[static_cast<size_t>(j)] = s;
                ww += s * s;
            }
            if (ww <= tol_x) {
                deficient = true;
                break;
            }
            double inv = 1.0 / std::sqrt(ww);
            for (int j = 0; j < d; ++j) w[static_cast<size_t>(j)] *= inv;
            // t = X w
            tt = 0;
            for (int i = 0; i < N; ++i) {
                double s = detail::dot(Xc.data() + static_cast<size_t>(i) * d, w.data(), static_cast<size_t>(d));
                t[static_cast<size_t>(i)] = s;
                tt += s * s;
            }
            if (tt <= tol_x) {
                deficient = true;
                break;
            }
            // c = Y^T t / (t^T t)
            for (int j = 0; j < f; ++j) {
                double s = 0;
                for (int i = 0; i < N; ++i) s += Yc[static_cast<size_t>(i) * f + j] * t[static_cast<size_t>(i)];
                c[static_cast<size_t>(j)] = s / tt;
            }
            double diff = 0;
            for (int i = 0; i < N; ++i) {
                double e = t[static_cast<size_t>(i)] - t_prev[static_cast<size_t>(i)];
                diff += e * e;
            }
            if (f == 1 || diff <= 1e-24 * tt) break;
            t_prev = t;
            double cc = detail::dot(c.data(), c.data(), static_cast<size_t>(f));
            if (cc == 0.0) break;
            for (int i = 0; i < N; ++i) {
                double s = 0;
                for (int j = 0; j < f; ++j) s += Yc[static_cast<size_t>(i) * f + j] * c[static_cast<size_t>(j)];
                u[static_cast<size_t>(i)] = s / cc;
            }
        }
        if (deficient) break;

        // loadings and deflation
        std::vector<double> p(static_cast<size_t>(d));
        for (int j = 0; j < d; ++j) {
            double s = 0;
            for (int i = 0; i < N; ++i) s += Xc[static_cast<size_t>(i) * d + j] * t[static_cast<size_t>(i)];
            p[static_cast<size_t>(j)] = s / tt;
        }
        for (int i = 0; i < N; ++i) {
            for (int j = 0; j < d; ++j) Xc[static_cast<size_t>(i) * d + j] -= t[static_cast<size_t>(i)] * p[static_cast<size_t>(j)];
            for (int j = 0; j < f; ++j) Yc[static_cast<size_t>(i) * f + j] -= t[static_cast<size_t>(i)] * c[static_cast<size_t>(j)];
        }

        // r_a = w_a - sum_{b<a} r_b (p_b . w_a); coefficients B += r_a c_a^T
        std::vector<double> r = w;
        for (size_t b = 0; b < Rs.size(); ++b) {
            double pw = detail::dot(Ps[b].data(), w.data(), static_cast<size_t>(d));
            for (int j = 0; j < d; ++j) r[static_cast<size_t>(j)] -= pw * Rs[b][static_cast<size_t>(j)];
        }
        for (int j = 0; j < d; ++j) {
            for (int k = 0; k < f; ++k) {
                m.coef[static_cast<size_t>(j) * f + k] += r[static_cast<size_t>(j)] * c[static_cast<size_t>(k)];
            }
        }
        Ws.push_back(std::move(w));
        Ps.push_back(std::move(p));
        Cs.push_back(std::move(c));
        Rs.push_back(std::move(r));
        m.n_components = a + 1;
    }
    return m;
}

inline std::vector<double> pls_predict(const PLSModel& m, const std::vector<double>& X, int N) {
    if (static_cast<int64_t>(X.size()) != static_cast<int64_t>(N) * m.d) {
        throw ShapeError("pls_predict input size disagrees with the fitted dimension");
    }
    std::vector<double> Y(static_cast<size_t>(N) * m.f);
    std::vector<double> xc(static_cast<size_t>(m.d));
    for (int i = 0; i < N; ++i) {
        for (int j = 0; j < m.d; ++j) {
            xc[static_cast<size_t>(j)] = X[static_cast<size_t>(i) * m.d + j] - m.x_mean[static_cast<size_t>(j)];
        }
        for (int k = 0; k < m.f; ++k) {
            double s = m.y_mean[static_cast<size_t>(k)];
            for (int j = 0; j < m.d; ++j) s += xc[static_cast<size_t>(j)] * m.coef[static_cast<size_t>(j) * m.f + k];
            Y[static_cast<size_t>(i) * m.f + k] = s;
        }
    }
    return Y;
}

// ---------------------------------------------------------------------------
// Semantic feature prediction (PLS + top-k overlap score).
// ---------------------------------------------------------------------------

// |top-k predicted ∩ true nonzero| / k with k = count of true nonzero features.
inline double topk_overlap_score(const std::vector<double>& predicted, const std::vector<double>& truth) {
    if (predicted.size() != truth.size()) throw UsageError("overlap score needs equal-length vectors");
    size_t f = truth.size();
    size_t k = 0;
    for (double v : truth) {
        if (v != 0.0) ++k;
    }
    if (k == 0) throw UsageError("overlap score is undefined when the truth has no nonzero feature");
    std::vector<size_t> order(f);
    for (size_t i = 0; i < f; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return predicted[a] > predicted[b]; });
    size_t hit = 0;
    for (size_t i = 0; i < k; ++i) {
        if (truth[order[i]] != 0.0) ++hit;
    }
    return static_cast<double>(hit) / static_cast<double>(k);
}

inline BenchmarkReport feature_prediction_benchmark(const TransformerLM& model, const Tokenizer& tok,
                                                    const FeatureTable& norms, uint64_t split_seed) {
    size_t F = norms.features.size();
    if (F == 0) throw DataError("feature norms table has no features");

    // usable words: tokenizable with at least one nonzero feature
    std::vector<size_t> usable;
    int skipped_zero = 0, skipped_token = 0;
    std::vector<WordRepresentation> reps;
    for (size_t w = 0; w < norms.words.size(); ++w) {
        bool any = false;
        for (size_t j = 0; j < F; ++j) {
            if (norms.at(w, j) != 0.0) any = true;
        }
        if (!any) {
            ++skipped_zero;
            continue;
        }
        try {
            reps.push_back(word_representation(model, tok, norms.words[w]));
            usable.push_back(w);
        } catch (const DataError&) {
            ++skipped_token;
        }
    }
    size_t N = usable.size();
    if (N < 10) throw DataError(format_msg("feature prediction needs at least 10 usable words, found %zu", N));

    int n_layers = static_cast<int>(reps.front().layers.size());
    int d = static_cast<int>(reps.front().layers.front().size());

    // fixed test slice, then two separate train/validation partitions
    std::vector<size_t> idx(N);
    for (size_t i = 0; i < N; ++i) idx[i] = i;
    Rng rng(derive_seed(split_seed, 0x66737074ULL));
    for (size_t i = N - 1; i > 0; --i) {
        std::uniform_int_distribution<size_t> u(0, i);
        std::swap(idx[i], idx[u(rng)]);
    }
    size_t n_test = std::max<size_t>(1, N / 10);
    std::vector<size_t> test(idx.begin(), idx.begin() + static_cast<int64_t>(n_test));
    std::vector<size_t> rest(idx.begin() + static_cast<int64_t>(n_test), idx.end());
    size_t n_val = std::max<size_t>(1, rest.size() / 9);
    if (rest.size() <= n_val) throw DataError("feature prediction split leaves no training words");

    std::array<std::vector<size_t>, 2> vals, trains;
    for (int s = 0; s < 2; ++s) {
        std::vector<size_t> r = rest;
        Rng srng(derive_seed(split_seed, 0x6673706cULL + static_cast<uint64_t>(s)));
        for (size_t i = r.size() - 1; i > 0; --i) {
            std::uniform_int_distribution<size_t> u(0, i);
            std::swap(r[i], r[u(srng)]);
        }
        vals[static_cast<size_t>(s)].assign(r.begin(), r.begin() + static_cast<int64_t>(n_val));
        trains[static_cast<size_t>(s)].assign(r.begin() + static_cast<int64_t>(n_val), r.end());
    }

    int n_comp = std::min<int>(100, std::min<int>(static_cast<int>(trains[0].size()) - 1, d));
    if (n_comp < 1) throw DataError("feature prediction training split is too small for PLS");

    auto gather_x = [&](const std::vector<size_t>& rows, int layer) {
        std::vector<double> X;
        X.reserve(rows.size() * static_cast<size_t>(d));
        for (size_t r : rows) {
            const auto& v = reps[r].layers[static_cast<size_t>(layer)];
            X.insert(X.end(), v.begin(), v.end());
        }
        return X;
    };
    auto gather_y = [&](const std::vector<size_t>& rows) {
        std::vector<double> Y;
        Y.reserve(rows.size() * F);
        for (size_t r : rows) {
            for (size_t j = 0; j < F; ++j) Y.push_back(norms.at(usable[r], j));
        }
        return Y;
    };
    auto mean_overlap = [&](const PLSModel& mdl, const std::vector<size_t>& rows, int layer) {
        std::vector<double> pred = pls_predict(mdl, gather_x(rows, layer), static_cast<int>(rows.size()));
        double total = 0;
        for (size_t i = 0; i < rows.size(); ++i) {
            std::vector<double> p(pred.begin() + static_cast<int64_t>(i * F),
                                  pred.begin() + static_cast<int64_t>((i + 1) * F));
            std::vector<double> t;
            for (size_t j = 0; j < F; ++j) t.push_back(norms.at(usable[rows[i]], j));
            total += topk_overlap_score(p, t);
        }
        return total / static_cast<double>(rows.size());
    };

    BenchmarkReport rep;
    rep.benchmark = "features";
    for (int l = 0; l < n_layers; ++l) {
        double score = 0;
        for (int s = 0; s < 2; ++s) {
            PLSModel m = pls_fit(gather_x(trains[static_cast<size_t>(s)], l), gather_y(trains[static_cast<size_t>(s)]),
                                 static_cast<int>(trains[static_cast<size_t>(s)].size()), d, static_cast<int>(F),
                                 n_comp);
            score += mean_overlap(m, vals[static_cast<size_t>(s)], l);
        }
        rep.per_layer.push_back(score / 2.0);
    }
    rep.best_layer = detail::argmax_low(rep.per_layer);

    double test_score = 0;
    for (int s = 0; s < 2; ++s) {
        PLSModel m = pls_fit(gather_x(trains[static_cast<size_t>(s)], rep.best_layer),
                             gather_y(trains[static_cast<size_t>(s)]),
                             static_cast<int>(trains[static_cast<size_t>(s)].size()), d, static_cast<int>(F), n_comp);
        test_score += mean_overlap(m, test, rep.best_layer);
    }
    rep.score = test_score / 2.0;
    rep.meta = {{"n_words", N},          {"skipped_zero_feature", skipped_zero}, {"skipped_untokenized", skipped_token},
                {"n_components", n_comp}, {"n_test", n_test},                     {"n_val", n_val},
                {"n_train", trains[0].size()}};
    return rep;
}

// ---------------------------------------------------------------------------
// Lexical relation probing (MLP on representation differences, macro-F1).
// ---------------------------------------------------------------------------

// Per-class F1 with empty-denominator classes scored 0, averaged over all
// n_classes whether or not they appear.
inline double macro_f1(const std::vector<int>& truth, const std::vector<int>& pred, int n_classes) {
    if (truth.size() != pred.size()) throw UsageError("macro_f1 needs equal-length label lists");
    if (n_classes < 1) throw UsageError("macro_f1 needs at least one class");
    double total = 0;
    for (int c = 0; c < n_classes; ++c) {
        int64_t tp = 0, fp = 0, fn = 0;
        for (size_t i = 0; i < truth.size(); ++i) {
            if (truth[i] < 0 || truth[i] >= n_classes || pred[i] < 0 || pred[i] >= n_classes) {
                throw UsageError("macro_f1 label outside [0, n_classes)");
            }
            if (pred[i] == c && truth[i] == c) ++tp;
            if (pred[i] == c && truth[i] != c) ++fp;
            if (pred[i] != c && truth[i] == c) ++fn;
        }
        int64_t denom = 2 * tp + fp + fn;
        total += denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
    }
    return total / static_cast<double>(n_classes);
}

namespace detail {

struct ProbeResult {
    double heldout_f1 = 0.0;
    std::vector<double> w1, b1, w2, b2;  // best-heldout parameters
};

// One-hidden-layer classifier trained with AdamW, early stopping on a
// held-out tenth of the training set.
inline ProbeResult train_probe(const std::vector<double>& X, const std::vector<int>& y, int n, int d, int n_classes,
                               uint64_t seed) {
    int n_hold = std::max(1, n / 10);
    if (n - n_hold < 1) throw DataError("relation probe has no training rows after the held-out split");
    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    Rng rng(derive_seed(seed, 0x70726f6265ULL));
    for (size_t i = order.size() - 1; i > 0; --i) {
        std::uniform_int_distribution<size_t> u(0, i);
        std::swap(order[i], order[u(rng)]);
    }

    auto gather = [&](int from, int count) {
        std::pair<std::vector<double>, std::vector<int>> out;
        for (int i = from; i < from + count; ++i) {
            int r = order[static_cast<size_t>(i)];
            out.first.insert(out.first.end(), X.begin() + static_cast<int64_t>(r) * d,
                             X.begin() + static_cast<int64_t>(r + 1) * d);
            out.second.push_back(y[static_cast<size_t>(r)]);
        }
        return out;
    };
    auto [hold_x, hold_y] = gather(0, n_hold);
    auto [fit_x, fit_y] = gather(n_hold, n - n_hold);
    int n_fit = n - n_hold;

    const int hidden = 100;
    Rng init(derive_seed(seed, 0x696e6974ULL));
    ParamStore ps;
    ps.add("w1", Tensor::trunc_normal({d, hidden}, init, 0.0, 1.0 / std::sqrt(static_cast<double>(d))));
    ps.add("b1", Tensor::zeros({hidden}));
    ps.add("w2", Tensor::trunc_normal({hidden, n_classes}, init, 0.0, 1.0 / std::sqrt(static_cast<double>(hidden))));
    ps.add("b2", Tensor::zeros({n_classes}));
    ps.set_requires_grad(true);

    Tensor fit_t = Tensor::from({n_fit, d}, fit_x);
    Tensor hold_t = Tensor::from({n_hold, d}, hold_x);

    auto logits_of = [&](Tape& tape, const Tensor& input) {
        Tensor h = tape.relu(tape.add_bias(tape.matmul(input, *ps.find("w1")), *ps.find("b1")));
        return tape.add_bias(tape.matmul(h, *ps.find("w2")), *ps.find("b2"));
    };
    auto predictions = [&](const Tensor& input, int rows) {
        Tape tape;
        Tensor lg = logits_of(tape, input);
        std::vector<int> pred(static_cast<size_t>(rows));
        for (int i = 0; i < rows; ++i) {
            const double* row = lg.values().data() + static_cast<int64_t>(i) * n_classes;
            int best = 0;
            for (int c = 1; c < n_classes; ++c) {
                if (row[c] > row[best]) best = c;
            }
            pred[static_cast<size_t>(i)] = best;
        }
        return pred;
    };
    auto heldout_loss = [&]() {
        Tape tape;
        return tape.cross_entropy(logits_of(tape, hold_t), hold_y).loss.values()[0];
    };

    TrainConfig probe_cfg;  // optimizer constants only
    AdamW opt(ps, probe_cfg);
    double best_loss = heldout_loss();
    ProbeResult best;
    auto snapshot = [&]() {
        best.w1 = ps.find("w1")->values();
        best.b1 = ps.find("b1")->values();
        best.w2 = ps.find("w2")->values();
        best.b2 = ps.find("b2")->values();
    };
    snapshot();

    const int max_steps = 400, eval_every = 5, patience = 8;
    int since_best = 0;
    for (int step = 0; step < max_steps; ++step) {
        Tape tape;
        Tensor loss = tape.cross_entropy(logits_of(tape, fit_t), fit_y).loss;
        ps.zero_grads();
        tape.backward(loss);
        opt.step(1e-2);
        if ((step + 1) % eval_every == 0) {
            double l = heldout_loss();
            if (l < best_loss - 1e-12) {
                best_loss = l;
                since_best = 0;
                snapshot();
            } else if (++since_best >= patience) {
                break;
            }
        }
    }
    ps.find("w1")->values() = best.w1;
    ps.find("b1")->values() = best.b1;
    ps.find("w2")->values() = best.w2;
    ps.find("b2")->values() = best.b2;
    best.heldout_f1 = macro_f1(hold_y, predictions(hold_t, n_hold), n_classes);
    return best;
}

inline std::vector<int> probe_predict(const ProbeResult& p, const std::vector<double>& X, int n, int d,
                                      int n_classes) {
    ParamStore ps;
    ps.add("w1", Tensor::from({d, static_cast<int64_t>(p.b1.size())}, p.w1));
    ps.add("b1", Tensor::from({static_cast<int64_t>(p.b1.size())}, p.b1));
    ps.add("w2", Tensor::from({static_cast<int64_t>(p.b1.size()), n_classes}, p.w2));
    ps.add("b2", Tensor::from({n_classes}, p.b2));
    Tape tape;
    Tensor input = Tensor::from({n, d}, X);
    Tensor h = tape.relu(tape.add_bias(tape.matmul(input, *ps.find("w1")), *ps.find("b1")));
    Tensor lg = tape.add_bias(tape.matmul(h, *ps.find("w2")), *ps.find("b2"));
    std::vector<int> pred(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const double* row = lg.values().data() + static_cast<int64_t>(i) * n_classes;
        int best = 0;
        for (int c = 1; c < n_classes; ++c) {
            if (row[c] > row[best]) best = c;
        }
        pred[static_cast<size_t>(i)] = best;
    }
    return pred;
}

}  // namespace detail

inline BenchmarkReport relation_benchmark(const TransformerLM& model, const Tokenizer& tok,
                                          const std::vector<RelationExample>& train,
                                          const std::vector<RelationExample>& test, uint64_t seed) {
    if (train.empty() || test.empty()) throw UsageError("relation benchmark needs train and test examples");
    int n_classes = static_cast<int>(relation_labels().size());

    std::map<std::string, WordRepresentation> reps;
    auto rep_of = [&](const std::string& w) -> const WordRepresentation& {
        auto it = reps.find(w);
        if (it == reps.end()) it = reps.emplace(w, word_representation(model, tok, w)).first;
        return it->second;
    };
    for (const auto& e : train) {
        rep_of(e.a);
        rep_of(e.b);
    }
    for (const auto& e : test) {
        rep_of(e.a);
        rep_of(e.b);
    }

    int n_layers = static_cast<int>(reps.begin()->second.layers.size());
    int d = static_cast<int>(reps.begin()->second.layers.front().size());
    auto diff_matrix = [&](const std::vector<RelationExample>& ex, int layer) {
        std::vector<double> X;
        X.reserve(ex.size() * static_cast<size_t>(d));
        for (const auto& e : ex) {
            const auto& va = rep_of(e.a).layers[static_cast<size_t>(layer)];
            const auto& vb = rep_of(e.b).layers[static_cast<size_t>(layer)];
            for (int j = 0; j < d; ++j) X.push_back(va[static_cast<size_t>(j)] - vb[static_cast<size_t>(j)]);
        }
        return X;
    };
    std::vector<int> train_y, test_y;
    for (const auto& e : train) train_y.push_back(e.label);
    for (const auto& e : test) test_y.push_back(e.label);

    BenchmarkReport rep;
    rep.benchmark = "relations";
    std::vector<detail::ProbeResult> probes;
    for (int l = 0; l < n_layers; ++l) {
        probes.push_back(detail::train_probe(diff_matrix(train, l), train_y, static_cast<int>(train.size()), d,
                                             n_classes, derive_seed(seed, static_cast<uint64_t>(l))));
        rep.per_layer.push_back(probes.back().heldout_f1);
    }
    rep.best_layer = detail::argmax_low(rep.per_layer);
    std::vector<int> pred = detail::probe_predict(probes[static_cast<size_t>(rep.best_layer)],
                                                  diff_matrix(test, rep.best_layer), static_cast<int>(test.size()), d,
                                                  n_classes);
    rep.score = macro_f1(test_y, pred, n_classes);
    rep.meta = {{"n_train", train.size()}, {"n_test", test.size()}, {"classes", relation_labels()}};
    return rep;
}

// ---------------------------------------------------------------------------
// Context understanding (sentence-pair probability).
// ---------------------------------------------------------------------------

// Sum of next-token log-probabilities of the BOS-prefixed sentence.
inline double sentence_logprob(const TransformerLM& model, const Tokenizer& tok, const std::string& sentence) {
    std::vector<int> ids = tok.encode(sentence);
    if (ids.empty()) throw DataError("sentence tokenizes to nothing: '" + sentence + "'");
    std::vector<int> seq;
    seq.push_back(kBosId);
    seq.insert(seq.end(), ids.begin(), ids.end());
    if (static_cast<int>(seq.size()) > model.config().max_seq_len) {
        throw DataError(format_msg("sentence needs %zu positions but the model allows %d", seq.size(),
                                   model.config().max_seq_len));
    }
    Tape tape;
    ForwardResult fwd = model.forward(tape, TokenBatch::from_sequences({seq}, kPadId));
    int64_t V = fwd.logits.cols();
    double total = 0;
    for (size_t r = 0; r + 1 < seq.size(); ++r) {
        const double* lv = fwd.logits.values().data() + static_cast<int64_t>(r) * V;
        double mx = lv[0];
        for (int64_t j = 1; j < V; ++j) mx = std::max(mx, lv[j]);
        double z = 0;
        for (int64_t j = 0; j < V; ++j) z += std::exp(lv[j] - mx);
        total += lv[seq[r + 1]] - mx - std::log(z);
    }
    return total;
}

inline BenchmarkReport context_benchmark(const TransformerLM& model, const Tokenizer& tok,
                                         const std::vector<ContextPair>& pairs) {
    if (pairs.empty()) throw UsageError("context benchmark needs at least one pair");
    std::map<std::string, std::pair<double, int64_t>> by_pos;  // credit sum, count
    for (const ContextPair& p : pairs) {
        double orig = sentence_logprob(model, tok, p.original);
        double mod = sentence_logprob(model, tok, p.modified);
        double credit = orig > mod ? 1.0 : (orig == mod ? 0.5 : 0.0);
        auto& slot = by_pos[p.pos];
        slot.first += credit;
        slot.second += 1;
    }
    BenchmarkReport rep;
    rep.benchmark = "context";
    rep.meta["per_pos"] = nlohmann::json::object();
    double mean = 0;
    for (const auto& [pos, slot] : by_pos) {
        double score = slot.first / static_cast<double>(slot.second);
        rep.meta["per_pos"][pos] = {{"score", score}, {"pairs", slot.second}};
        mean += score;
    }
    rep.score = mean / static_cast<double>(by_pos.size());
    rep.meta["pairs"] = pairs.size();
    return rep;
}

// ---------------------------------------------------------------------------
// Windowed perplexity.
// ---------------------------------------------------------------------------

// Non-overlapping windows; only tokens in the back half of each window are
// scored, so every scored token sees between window/2 and window-1 prior
// tokens.  Shares the implementation used for validation during training.
inline double perplexity(const TransformerLM& model, const TextDataset& text, int batch_size = 8) {
    return validation_perplexity(model, text, batch_size);
}

// ---------------------------------------------------------------------------
// Human-likeness rank regression.
// ---------------------------------------------------------------------------

struct RankRegression {
    double slope = 0.0, intercept = 0.0;
    double slope_ci_low = 0.0, slope_ci_high = 0.0;
    int n = 0;
};

// Rank pairs by |model rank - human rank| descending (larger y = more
// human-like), then regress that rank on pair concreteness.
inline RankRegression humanlikeness_rank_analysis(const std::vector<double>& model_scores,
                                                  const std::vector<double>& human_scores,
                                                  const std::vector<double>& concreteness) {
    size_t n = model_scores.size();
    if (human_scores.size() != n || concreteness.size() != n) {
        throw UsageError("rank analysis inputs must have equal length");
    }
    if (n < 3) throw UsageError("rank analysis needs at least three pairs");
    std::vector<double> rm = average_ranks(model_scores), rh = average_ranks(human_scores);
    std::vector<double> neg_diff(n);
    for (size_t i = 0; i < n; ++i) neg_diff[i] = -std::abs(rm[i] - rh[i]);
    std::vector<double> y = average_ranks(neg_diff);

    double mx = 0, my = 0;
    for (size_t i = 0; i < n; ++i) {
        mx += concreteness[i];
        my += y[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxx = 0, sxy = 0;
    for (size_t i = 0; i < n; ++i) {
        sxx += (concreteness[i] - mx) * (concreteness[i] - mx);
        sxy += (concreteness[i] - mx) * (y[i] - my);
    }
    if (sxx == 0.0) throw NumericError("rank analysis needs non-constant concreteness");

    RankRegression r;
    r.n = static_cast<int>(n);
    r.slope = sxy / sxx;
    r.intercept = my - r.slope * mx;
    double rss = 0;
    for (size_t i = 0; i < n; ++i) {
        double e = y[i] - (r.intercept + r.slope * concreteness[i]);
        rss += e * e;
    }
    double df = static_cast<double>(n) - 2.0;
    double se = std::sqrt(std::max(0.0, rss / df) / sxx);
    boost::math::students_t dist(df);
    double t = boost::math::quantile(dist, 0.975);
    r.slope_ci_low = r.slope - t * se;
    r.slope_ci_high = r.slope + t * se;
    return r;
}

// ---------------------------------------------------------------------------
// Per-word NLL differences across concreteness quintiles.
// ---------------------------------------------------------------------------

struct WordNllDiff {
    std::string word;
    int occurrences = 0;
    double mean_diff = 0.0;  // mean over occurrences of NLL_b - NLL_a
    double concreteness = 0.0;
};

struct QuintileSummary {
    int count = 0;
    double mean_concreteness = 0.0;
    double mean = 0.0, median = 0.0, q1 = 0.0, q3 = 0.0;
};

struct NllDifferenceTable {
    std::vector<WordNllDiff> words;            // sorted by concreteness ascending
    std::array<QuintileSummary, 5> quintiles;  // [0] least concrete .. [4] most
    int skipped_no_concreteness = 0;
    int64_t scored_tokens = 0;
};

namespace detail {

inline double percentile(std::vector<double> v, double p) {
    std::sort(v.begin(), v.end());
    double h = (static_cast<double>(v.size()) - 1.0) * p;
    size_t lo = static_cast<size_t>(h);
    size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

// Per-position NLLs for the scored back half of every full window.
inline std::vector<double> windowed_token_nll(const TransformerLM& model, const std::vector<int>& tokens, int window,
                                              int batch_size) {
    std::vector<double> nll(tokens.size(), std::numeric_limits<double>::quiet_NaN());
    int64_t n_windows = static_cast<int64_t>(tokens.size()) / window;
    int64_t V = model.config().vocab_size;
    for (int64_t start = 0; start < n_windows; start += batch_size) {
        int64_t count = std::min<int64_t>(batch_size, n_windows - start);
        std::vector<std::vector<int>> seqs;
        for (int64_t w = start; w < start + count; ++w) {
            seqs.emplace_back(tokens.begin() + w * window, tokens.begin() + (w + 1) * window);
        }
        Tape tape;
        ForwardResult fwd = model.forward(tape, TokenBatch::from_sequences(seqs, kPadId));
        for (int64_t w = 0; w < count; ++w) {
            for (int j = window / 2; j < window; ++j) {
                int64_t row = w * window + j - 1;  // prediction row for token j
                const double* lv = fwd.logits.values().data() + row * V;
                double mx = lv[0];
                for (int64_t k = 1; k < V; ++k) mx = std::max(mx, lv[k]);
                double z = 0;
                for (int64_t k = 0; k < V; ++k) z += std::exp(lv[k] - mx);
                int64_t g = (start + w) * window + j;
                nll[static_cast<size_t>(g)] = mx + std::log(z) - lv[tokens[static_cast<size_t>(g)]];
            }
        }
    }
    return nll;
}

}  // namespace detail

// Word-level NLL comparison: per occurrence a word's NLL is the sum over its
// tokens; only occurrences entirely inside the scored half of a window count,
// and only words with more than five such occurrences are kept.  Positive
// differences mean model_a assigns the word higher probability.
inline NllDifferenceTable per_word_nll_difference(const TransformerLM& model_a, const TransformerLM& model_b,
                                                  const Tokenizer& tok, const std::string& text,
                                                  const std::map<std::string, double>& concreteness, int window = 128,
                                                  int batch_size = 8) {
    if (model_a.config().vocab_size != model_b.config().vocab_size) {
        throw UsageError("NLL comparison needs models sharing one vocabulary");
    }
    if (window < 2) throw UsageError("window must be at least 2");

    // tokenize run by run so each word's token span is known; runs never merge
    std::vector<int> tokens;
    struct Span {
        std::string word;
        int64_t begin, end;
    };
    std::vector<Span> spans;
    size_t i = 0;
    while (i < text.size()) {
        size_t j = i;
        bool ws = std::isspace(static_cast<unsigned char>(text[i])) != 0;
        while (j < text.size() && (std::isspace(static_cast<unsigned char>(text[j])) != 0) == ws) ++j;
        std::string run = text.substr(i, j - i);
        std::vector<int> ids = tok.encode(run);
        if (!ws) spans.push_back({run, static_cast<int64_t>(tokens.size()),
                                  static_cast<int64_t>(tokens.size() + ids.size())});
        tokens.insert(tokens.end(), ids.begin(), ids.end());
        i = j;
    }
    if (static_cast<int64_t>(tokens.size()) < window) throw DataError("text is shorter than one window");

    std::vector<double> nll_a = detail::windowed_token_nll(model_a, tokens, window, batch_size);
    std::vector<double> nll_b = detail::windowed_token_nll(model_b, tokens, window, batch_size);

    auto scored = [&](int64_t g) {
        int64_t w = g / window, j = g % window;
        return w < static_cast<int64_t>(tokens.size()) / window && j >= window / 2;
    };

    std::map<std::string, std::vector<double>> diffs;
    NllDifferenceTable table;
    for (const auto& s : spans) {
        bool ok = s.end > s.begin && s.begin / window == (s.end - 1) / window;
        for (int64_t g = s.begin; ok && g < s.end; ++g) ok = scored(g);
        if (!ok) continue;
        double da = 0, db = 0;
        for (int64_t g = s.begin; g < s.end; ++g) {
            da += nll_a[static_cast<size_t>(g)];
            db += nll_b[static_cast<size_t>(g)];
        }
        diffs[s.word].push_back(db - da);
    }
    for (double v : nll_a) {
        if (!std::isnan(v)) ++table.scored_tokens;
    }

    for (const auto& [word, d] : diffs) {
        if (d.size() <= 5) continue;
        auto it = concreteness.find(word);
        if (it == concreteness.end()) {
            ++table.skipped_no_concreteness;
            continue;
        }
        WordNllDiff w;
        w.word = word;
        w.occurrences = static_cast<int>(d.size());
        for (double v : d) w.mean_diff += v;
        w.mean_diff /= static_cast<double>(d.size());
        w.concreteness = it->second;
        table.words.push_back(std::move(w));
    }
    if (table.words.empty()) throw DataError("no word with more than five scored occurrences");

    std::sort(table.words.begin(), table.words.end(), [](const WordNllDiff& a, const WordNllDiff& b) {
        if (a.concreteness != b.concreteness) return a.concreteness < b.concreteness;
        return a.word < b.word;
    });

    // five groups whose sizes differ by at most one, extras to the front
    size_t n = table.words.size(), base = n / 5, rem = n % 5, at = 0;
    for (size_t g = 0; g < 5; ++g) {
        size_t size = base + (g < rem ? 1 : 0);
        QuintileSummary& q = table.quintiles[g];
        q.count = static_cast<int>(size);
        if (size == 0) continue;
        std::vector<double> vals;
        for (size_t k = at; k < at + size; ++k) {
            vals.push_back(table.words[k].mean_diff);
            q.mean += table.words[k].mean_diff;
            q.mean_concreteness += table.words[k].concreteness;
        }
        q.mean /= static_cast<double>(size);
        q.mean_concreteness /= static_cast<double>(size);
        q.median = detail::percentile(vals, 0.5);
        q.q1 = detail::percentile(vals, 0.25);
        q.q3 = detail::percentile(vals, 0.75);
        at += size;
    }
    return table;
}

}  // namespace lcg
