#pragma once

// Synthetic grounded-language world.
//
// A vocabulary of invented words carries latent meaning vectors, a
// concreteness score and a part of speech.  Captions follow a small
// POS-template grammar with independently drawn words; each caption's image
// feature is the mean of the meaning vectors of its concrete words plus
// noise.  The ungrounded stream is a Markov chain whose transitions prefer
// semantically similar successors, so a model that has learned the meaning
// space from images predicts it better.  Evaluation files (relatedness
// pairs, sparse feature norms, typed relation pairs, context pairs,
// concreteness) are all derived from the same latent vectors.

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lcg/data.hpp"

namespace lcg {

enum class Pos { det, adj, noun, verb };

inline const char* pos_name(Pos p) {
    switch (p) {
        case Pos::det: return "det";
        case Pos::adj: return "adj";
        case Pos::noun: return "noun";
        case Pos::verb: return "verb";
    }
    return "?";
}

struct SynthWord {
    std::string text;
    Pos pos;
    double concreteness;
    std::vector<double> g;
};

struct SynthConfig {
    uint64_t seed = 1;
    int n_words = 200;
    int g_dim = 32;
    int n_captions = 16000;
    int n_val_captions = 400;
    int64_t text_words = 60000;
    int64_t val_text_words = 12000;
    int64_t test_text_words = 12000;
    double image_noise = 0.15;
    double markov_kappa = 3.0;
    int n_relatedness_pairs = 300;
    int n_norm_features = 40;
    int n_relation_pairs_per_label = 18;
    int n_context_pairs = 180;

    void validate() const {
        if (n_words < 40) throw UsageError("synthetic world needs at least 40 words");
        if (g_dim < 2) throw UsageError("g_dim must be at least 2");
        if (n_captions < 10 || n_val_captions < 2) throw UsageError("too few captions");
        if (image_noise < 0) throw UsageError("image_noise must be non-negative");
        if (5 * n_relation_pairs_per_label * 2 > n_words) {
            throw UsageError("not enough words for the requested relation pairs");
        }
    }
};

struct SynthWorld {
    SynthConfig cfg;
    std::vector<SynthWord> words;
    std::vector<int> by_pos[4];

    static double cosine(const std::vector<double>& a, const std::vector<double>& b) {
        double dot = 0, na = 0, nb = 0;
        for (size_t i = 0; i < a.size(); ++i) {
            dot += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
        if (na == 0 || nb == 0) return 0.0;
        return dot / std::sqrt(na * nb);
    }
};

namespace detail {

inline std::string invent_word(Rng& rng) {
    static const std::string cons = "bcdfgklmnprstvz";
    static const std::string vows = "aeiou";
    std::uniform_int_distribution<int> len(2, 3);
    std::uniform_int_distribution<size_t> ci(0, cons.size() - 1), vi(0, vows.size() - 1);
    std::string w;
    int syll = len(rng);
    for (int s = 0; s < syll; ++s) {
        w += cons[ci(rng)];
        w += vows[vi(rng)];
    }
    std::uniform_int_distribution<int> tail(0, 1);
    if (tail(rng)) w += cons[ci(rng)];
    return w;
}

inline std::vector<double> randn_vec(Rng& rng, int d, double scale = 1.0) {
    std::normal_distribution<double> dist(0.0, scale);
    std::vector<double> v(static_cast<size_t>(d));
    for (double& x : v) x = dist(rng);
    return v;
}

}  // namespace detail

struct RelationPair {
    int a, b;
    std::string label;
};

class SynthGenerator {
  public:
    explicit SynthGenerator(const SynthConfig& cfg) : cfg_(cfg) { cfg.validate(); }

    // Generates the world and writes every artifact below out_dir.  Returns
    // the list of files written (relative names).
    std::vector<std::string> run(const std::string& out_dir) {
        namespace fs = std::filesystem;
        fs::create_directories(out_dir);
        build_vocabulary();
        build_relations();
        std::vector<std::string> files;
        auto emit = [&](const std::string& name) { files.push_back(name); };

        write_words(out_dir + "/words.tsv");
        emit("words.tsv");
        write_g_vectors(out_dir + "/g_vectors.tsv");
        emit("g_vectors.tsv");
        write_concreteness(out_dir + "/concreteness.tsv");
        emit("concreteness.tsv");

        std::string corpus;
        write_captions(out_dir, corpus);
        emit("captions_train.jsonl");
        emit("images_train.lcgf");
        emit("captions_val.jsonl");
        emit("images_val.lcgf");

        Rng rng(derive_seed(cfg_.seed, 0x74657874ULL));
        write_text(out_dir + "/text_train.txt", cfg_.text_words, rng, &corpus);
        emit("text_train.txt");
        write_text(out_dir + "/text_val.txt", cfg_.val_text_words, rng, nullptr);
        emit("text_val.txt");
        write_text(out_dir + "/text_test.txt", cfg_.test_text_words, rng, nullptr);
        emit("text_test.txt");

        std::ofstream cf(out_dir + "/corpus.txt");
        cf << corpus;
        cf.close();
        emit("corpus.txt");

        write_relatedness(out_dir + "/relatedness_pairs.tsv");
        emit("relatedness_pairs.tsv");
        write_norms(out_dir + "/feature_norms.tsv");
        emit("feature_norms.tsv");
        write_relations(out_dir);
        emit("relations.tsv");
        emit("relations_train.tsv");
        emit("relations_test.tsv");
        write_context_pairs(out_dir + "/context_pairs.tsv");
        emit("context_pairs.tsv");
        return files;
    }

    const SynthWorld& world() const { return world_; }

  private:
    void build_vocabulary() {
        world_.cfg = cfg_;
        Rng rng(derive_seed(cfg_.seed, 0x776f726473ULL));
        std::set<std::string> seen;
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        const int W = cfg_.n_words;
        int n_det = std::max(4, W / 25);
        int n_adj = W / 5;
        int n_verb = W / 4;
        for (int i = 0; i < W; ++i) {
            SynthWord w;
            do {
                w.text = detail::invent_word(rng);
            } while (!seen.insert(w.text).second);
            w.pos = i < n_det             ? Pos::det
                    : i < n_det + n_adj   ? Pos::adj
                    : i < n_det + n_adj + n_verb ? Pos::verb
                                          : Pos::noun;
            w.concreteness = unif(rng);
            w.g = detail::randn_vec(rng, cfg_.g_dim);
            world_.by_pos[static_cast<int>(w.pos)].push_back(i);
            world_.words.push_back(std::move(w));
        }
    }

    // Overwrite the meaning vector of the second word of each typed pair so
    // the relation is recoverable from the latent space alone.
    void build_relations() {
        Rng rng(derive_seed(cfg_.seed, 0x72656c6174ULL));
        std::vector<double> v_hyper = detail::randn_vec(rng, cfg_.g_dim, 0.6);
        std::vector<double> v_part = detail::randn_vec(rng, cfg_.g_dim, 0.6);
        std::vector<int> candidates;
        for (int i = 0; i < cfg_.n_words; ++i) {
            if (world_.words[static_cast<size_t>(i)].pos != Pos::det) candidates.push_back(i);
        }
        for (size_t i = candidates.size(); i > 1; --i) {
            std::uniform_int_distribution<size_t> d(0, i - 1);
            std::swap(candidates[i - 1], candidates[d(rng)]);
        }
        size_t cursor = 0;
        auto take = [&]() {
            if (cursor >= candidates.size()) throw UsageError("relation pairs exhausted the vocabulary");
            return candidates[cursor++];
        };
        const char* labels[4] = {"SYN", "ANT", "HYPER", "PART_OF"};
        for (const char* label : labels) {
            for (int k = 0; k < cfg_.n_relation_pairs_per_label; ++k) {
                int a = static_cast<int>(take()), b = static_cast<int>(take());
                auto& ga = world_.words[static_cast<size_t>(a)].g;
                auto& gb = world_.words[static_cast<size_t>(b)].g;
                std::vector<double> noise = detail::randn_vec(rng, cfg_.g_dim, 0.15);
                for (int e = 0; e < cfg_.g_dim; ++e) {
                    double base = 0.0;
                    if (std::string(label) == "SYN") base = ga[static_cast<size_t>(e)];
                    if (std::string(label) == "ANT") base = -ga[static_cast<size_t>(e)];
                    if (std::string(label) == "HYPER") base = 0.7 * ga[static_cast<size_t>(e)] + v_hyper[static_cast<size_t>(e)];
                    if (std::string(label) == "PART_OF") base = 0.5 * ga[static_cast<size_t>(e)] + v_part[static_cast<size_t>(e)];
                    gb[static_cast<size_t>(e)] = base + noise[static_cast<size_t>(e)];
                }
                relations_.push_back({a, b, label});
            }
        }
        for (int k = 0; k < cfg_.n_relation_pairs_per_label; ++k) {
            int a = static_cast<int>(take()), b = static_cast<int>(take());
            relations_.push_back({a, b, "RANDOM"});
        }
    }

    std::vector<int> sample_caption(Rng& rng) const {
        static const std::vector<std::vector<Pos>> templates = {
            {Pos::det, Pos::adj, Pos::noun, Pos::verb, Pos::det, Pos::noun},
            {Pos::det, Pos::noun, Pos::verb, Pos::det, Pos::adj, Pos::noun},
            {Pos::det, Pos::noun, Pos::verb, Pos::det, Pos::noun},
            {Pos::det, Pos::adj, Pos::noun, Pos::verb},
            {Pos::det, Pos::noun, Pos::verb},
        };
        std::uniform_int_distribution<size_t> ti(0, templates.size() - 1);
        const auto& tmpl = templates[ti(rng)];
        std::vector<int> out;
        for (Pos p : tmpl) {
            const auto& pool = world_.by_pos[static_cast<int>(p)];
            std::uniform_int_distribution<size_t> wi(0, pool.size() - 1);
            out.push_back(pool[wi(rng)]);
        }
        return out;
    }

    std::string caption_text(const std::vector<int>& ids) const {
        std::string s;
        for (size_t i = 0; i < ids.size(); ++i) {
            if (i) s += " ";
            s += world_.words[static_cast<size_t>(ids[i])].text;
        }
        return s;
    }

    std::vector<double> caption_image(const std::vector<int>& ids, Rng& rng) const {
        std::vector<double> img(static_cast<size_t>(cfg_.g_dim), 0.0);
        int n_concrete = 0;
        for (int id : ids) {
            const auto& w = world_.words[static_cast<size_t>(id)];
            if (w.concreteness <= 0.5) continue;
            ++n_concrete;
            for (int e = 0; e < cfg_.g_dim; ++e) img[static_cast<size_t>(e)] += w.g[static_cast<size_t>(e)];
        }
        if (n_concrete > 0) {
            for (double& v : img) v /= n_concrete;
        }
        std::normal_distribution<double> noise(0.0, cfg_.image_noise);
        for (double& v : img) v += noise(rng);
        return img;
    }

    void write_caption_split(const std::string& cap_path, const std::string& img_path, int count, Rng& rng,
                             std::string* corpus) const {
        std::ofstream cf(cap_path);
        if (!cf) throw DataError("cannot write " + cap_path);
        Tensor feats = Tensor::zeros({count, cfg_.g_dim});
        for (int i = 0; i < count; ++i) {
            auto ids = sample_caption(rng);
            std::string text = caption_text(ids);
            nlohmann::json j;
            j["caption"] = text;
            j["feature_row"] = i;
            cf << j.dump() << "\n";
            auto img = caption_image(ids, rng);
            for (int e = 0; e < cfg_.g_dim; ++e) feats.values()[static_cast<size_t>(i) * cfg_.g_dim + e] = img[static_cast<size_t>(e)];
            if (corpus) {
                *corpus += text;
                *corpus += "\n";
            }
        }
        write_features(img_path, feats);
    }

    void write_captions(const std::string& out_dir, std::string& corpus) const {
        Rng rng(derive_seed(cfg_.seed, 0x63617074ULL));
        write_caption_split(out_dir + "/captions_train.jsonl", out_dir + "/images_train.lcgf", cfg_.n_captions, rng,
                            &corpus);
        write_caption_split(out_dir + "/captions_val.jsonl", out_dir + "/images_val.lcgf", cfg_.n_val_captions, rng,
                            nullptr);
    }

    // Markov chain over the full vocabulary; transition weight
    // exp(kappa * cos(g_a, g_b)) for b != a.
    void write_text(const std::string& path, int64_t n_words, Rng& rng, std::string* corpus) {
        const int W = cfg_.n_words;
        if (trans_.empty()) {
            trans_.assign(static_cast<size_t>(W) * W, 0.0);
            for (int a = 0; a < W; ++a) {
                double acc = 0.0;
                for (int b = 0; b < W; ++b) {
                    double w = a == b ? 0.0
                                      : std::exp(cfg_.markov_kappa * SynthWorld::cosine(world_.words[static_cast<size_t>(a)].g,
                                                                                        world_.words[static_cast<size_t>(b)].g));
                    acc += w;
                    trans_[static_cast<size_t>(a) * W + b] = acc;  // cumulative
                }
                for (int b = 0; b < W; ++b) trans_[static_cast<size_t>(a) * W + b] /= acc;
            }
        }
        std::ofstream f(path);
        if (!f) throw DataError("cannot write " + path);
        std::uniform_int_distribution<int> start(0, W - 1);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        int cur = start(rng);
        std::string buf;
        for (int64_t i = 0; i < n_words; ++i) {
            if (i) buf += " ";
            buf += world_.words[static_cast<size_t>(cur)].text;
            double r = u(rng);
            const double* row = trans_.data() + static_cast<size_t>(cur) * W;
            cur = static_cast<int>(std::lower_bound(row, row + W, r) - row);
            if (cur >= W) cur = W - 1;
        }
        buf += "\n";
        f << buf;
        if (corpus) *corpus += buf;
    }

    void write_words(const std::string& path) const {
        std::ofstream f(path);
        for (const auto& w : world_.words) {
            f << w.text << "\t" << pos_name(w.pos) << "\t" << w.concreteness << "\n";
        }
    }

    void write_g_vectors(const std::string& path) const {
        std::ofstream f(path);
        f.precision(17);
        for (const auto& w : world_.words) {
            f << w.text;
            for (double v : w.g) f << "\t" << v;
            f << "\n";
        }
    }

    void write_concreteness(const std::string& path) const {
        std::ofstream f(path);
        f.precision(17);
        for (const auto& w : world_.words) f << w.text << "\t" << w.concreteness << "\n";
    }

    // Pairs of concrete words scored by latent cosine similarity.
    void write_relatedness(const std::string& path) const {
        Rng rng(derive_seed(cfg_.seed, 0x72656c70ULL));
        std::vector<int> concrete;
        for (int i = 0; i < cfg_.n_words; ++i) {
            if (world_.words[static_cast<size_t>(i)].concreteness > 0.5 &&
                world_.words[static_cast<size_t>(i)].pos != Pos::det) {
                concrete.push_back(i);
            }
        }
        std::ofstream f(path);
        f.precision(17);
        std::set<std::pair<int, int>> seen;
        std::uniform_int_distribution<size_t> wi(0, concrete.size() - 1);
        int emitted = 0;
        while (emitted < cfg_.n_relatedness_pairs) {
            int a = concrete[wi(rng)], b = concrete[wi(rng)];
            if (a == b) continue;
            if (a > b) std::swap(a, b);
            if (!seen.insert({a, b}).second) continue;
            double score = SynthWorld::cosine(world_.words[static_cast<size_t>(a)].g, world_.words[static_cast<size_t>(b)].g);
            f << world_.words[static_cast<size_t>(a)].text << "\t" << world_.words[static_cast<size_t>(b)].text << "\t"
              << score << "\n";
            ++emitted;
        }
    }

    // Sparse non-negative "feature norms": projections of g onto random unit
    // directions, thresholded.
    void write_norms(const std::string& path) const {
        Rng rng(derive_seed(cfg_.seed, 0x6e6f726dULL));
        std::vector<std::vector<double>> dirs;
        for (int k = 0; k < cfg_.n_norm_features; ++k) {
            auto v = detail::randn_vec(rng, cfg_.g_dim);
            double n = 0;
            for (double x : v) n += x * x;
            n = std::sqrt(n);
            for (double& x : v) x /= n;
            dirs.push_back(std::move(v));
        }
        const double theta = 0.2;
        std::ofstream f(path);
        f.precision(17);
        for (const auto& w : world_.words) {
            for (size_t k = 0; k < dirs.size(); ++k) {
                double c = SynthWorld::cosine(w.g, dirs[k]);
                double s = std::max(0.0, c - theta);
                if (s > 0.0) f << w.text << "\tf" << k << "\t" << s << "\n";
            }
        }
    }

    // Full list plus a fixed per-label 2:1 train/test split in pair order.
    void write_relations(const std::string& dir) const {
        std::ofstream all(dir + "/relations.tsv"), train(dir + "/relations_train.tsv"),
            test(dir + "/relations_test.tsv");
        std::map<std::string, int> seen;
        for (const auto& r : relations_) {
            std::ostringstream line;
            line << world_.words[static_cast<size_t>(r.a)].text << "\t"
                 << world_.words[static_cast<size_t>(r.b)].text << "\t" << r.label << "\n";
            all << line.str();
            int idx = seen[r.label]++;
            (idx % 3 == 2 ? test : train) << line.str();
        }
    }

    // Same target word in a grammatical caption and in a corrupted copy where
    // a different slot was replaced with a word of an impossible category.
    void write_context_pairs(const std::string& path) const {
        Rng rng(derive_seed(cfg_.seed, 0x63747874ULL));
        std::ofstream f(path);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        static const Pos targets[3] = {Pos::noun, Pos::verb, Pos::adj};
        int per_pos = cfg_.n_context_pairs / 3;
        for (Pos target : targets) {
            int made = 0;
            while (made < per_pos) {
                auto ids = sample_caption(rng);
                // locate a slot of the target category and a different slot to corrupt
                int target_slot = -1, corrupt_slot = -1;
                for (size_t s = 0; s < ids.size(); ++s) {
                    if (world_.words[static_cast<size_t>(ids[s])].pos == target && target_slot < 0) {
                        target_slot = static_cast<int>(s);
                    }
                }
                if (target_slot < 0) continue;
                std::uniform_int_distribution<size_t> si(0, ids.size() - 1);
                do {
                    corrupt_slot = static_cast<int>(si(rng));
                } while (corrupt_slot == target_slot);
                auto bad = ids;
                Pos cur_pos = world_.words[static_cast<size_t>(ids[static_cast<size_t>(corrupt_slot)])].pos;
                Pos wrong = cur_pos == Pos::det ? Pos::verb : Pos::det;  // impossible under every template
                const auto& pool = world_.by_pos[static_cast<int>(wrong)];
                std::uniform_int_distribution<size_t> wi(0, pool.size() - 1);
                bad[static_cast<size_t>(corrupt_slot)] = pool[wi(rng)];
                f << caption_text(ids) << "\t" << caption_text(bad) << "\t"
                  << world_.words[static_cast<size_t>(ids[static_cast<size_t>(target_slot)])].text << "\t"
                  << pos_name(target) << "\n";
                ++made;
            }
        }
    }

    SynthConfig cfg_;
    SynthWorld world_;
    std::vector<RelationPair> relations_;
    std::vector<double> trans_;
};

}  // namespace lcg
