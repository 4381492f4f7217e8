#pragma once

// Tokenization, dataset file formats and batch assembly.
//
// Token id layout: 0 = PAD, 1 = BOS, 2 = EOS, 3 = UNK, 4..259 = raw bytes,
// 260+ = byte-pair merges in training order.  Text is pre-split into maximal
// whitespace / non-whitespace runs and merges never cross a run boundary.

#include <algorithm>
#include <cctype>
#include <cstring>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "lcg/model.hpp"
#include "lcg/objectives.hpp"

namespace lcg {

class Tokenizer {
  public:
    static constexpr int kMinVocab = 260;

    static Tokenizer train(const std::string& corpus, int vocab_size) {
        if (vocab_size < kMinVocab) {
            throw UsageError(format_msg("vocab size %d below the minimum %d (specials plus bytes)", vocab_size,
                                        kMinVocab));
        }
        Tokenizer tok;
        tok.vocab_size_ = vocab_size;

        std::map<std::string, int64_t> piece_count;
        for (const std::string& piece : split_runs(corpus)) ++piece_count[piece];
        std::vector<std::vector<int>> pieces;
        std::vector<int64_t> counts;
        for (auto& [p, c] : piece_count) {
            std::vector<int> ids;
            ids.reserve(p.size());
            for (unsigned char b : p) ids.push_back(4 + b);
            pieces.push_back(std::move(ids));
            counts.push_back(c);
        }

        while (kMinVocab + static_cast<int>(tok.merges_.size()) < vocab_size) {
            std::map<std::pair<int, int>, int64_t> pair_count;
            for (size_t pi = 0; pi < pieces.size(); ++pi) {
                const auto& ids = pieces[pi];
                for (size_t i = 0; i + 1 < ids.size(); ++i) {
                    pair_count[{ids[i], ids[i + 1]}] += counts[pi];
                }
            }
            std::pair<int, int> best{-1, -1};
            int64_t best_count = 1;  // a merge must occur at least twice
            std::string best_str;
            for (auto& [pr, c] : pair_count) {
                std::string s = tok.bytes_of(pr.first) + tok.bytes_of(pr.second);
                if (c > best_count || (c == best_count && best.first >= 0 && s < best_str)) {
                    best = pr;
                    best_count = c;
                    best_str = s;
                }
            }
            if (best.first < 0) break;  // nothing repeats; vocab stays short
            int new_id = kMinVocab + static_cast<int>(tok.merges_.size());
            tok.merges_.push_back(best);
            tok.merged_bytes_.push_back(best_str);
            tok.rank_[best] = static_cast<int>(tok.merges_.size()) - 1;
            for (auto& ids : pieces) merge_pair(ids, best, new_id);
        }
        return tok;
    }

    std::vector<int> encode(std::string_view text) const {
        std::vector<int> out;
        for (const std::string& piece : split_runs(text)) {
            std::vector<int> ids;
            ids.reserve(piece.size());
            for (unsigned char b : piece) ids.push_back(4 + b);
            while (ids.size() > 1) {
                int best_rank = -1;
                std::pair<int, int> best{-1, -1};
                for (size_t i = 0; i + 1 < ids.size(); ++i) {
                    auto it = rank_.find({ids[i], ids[i + 1]});
                    if (it != rank_.end() && (best_rank < 0 || it->second < best_rank)) {
                        best_rank = it->second;
                        best = it->first;
                    }
                }
                if (best_rank < 0) break;
                merge_pair(ids, best, kMinVocab + best_rank);
            }
            out.insert(out.end(), ids.begin(), ids.end());
        }
        return out;
    }

    std::string decode(std::span<const int> ids) const {
        std::string out;
        for (int id : ids) {
            if (id < 4) continue;  // specials render as nothing
            out += bytes_of(id);
        }
        return out;
    }

    int vocab_size() const { return vocab_size_; }
    int merge_count() const { return static_cast<int>(merges_.size()); }

    void save(const std::string& path) const {
        nlohmann::json j;
        j["version"] = 1;
        j["vocab_size"] = vocab_size_;
        j["merges"] = merges_;
        std::ofstream f(path);
        if (!f) throw DataError("cannot write tokenizer file: " + path);
        f << j.dump(2) << "\n";
    }

    static Tokenizer load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw DataError("cannot read tokenizer file: " + path);
        nlohmann::json j;
        try {
            f >> j;
        } catch (const nlohmann::json::exception& e) {
            throw DataError(std::string("malformed tokenizer file: ") + e.what());
        }
        if (!j.contains("version") || j["version"] != 1) throw DataError("unsupported tokenizer version");
        Tokenizer tok;
        tok.vocab_size_ = j.at("vocab_size").get<int>();
        if (tok.vocab_size_ < kMinVocab) throw DataError("tokenizer vocab below the minimum");
        for (const auto& m : j.at("merges")) {
            int a = m.at(0).get<int>(), b = m.at(1).get<int>();
            int new_id = kMinVocab + static_cast<int>(tok.merges_.size());
            if (a < 4 || b < 4 || a >= new_id || b >= new_id) throw DataError("tokenizer merge refers to an invalid id");
            tok.merges_.emplace_back(a, b);
            tok.merged_bytes_.push_back(tok.bytes_of(a) + tok.bytes_of(b));
            tok.rank_[{a, b}] = static_cast<int>(tok.merges_.size()) - 1;
        }
        if (kMinVocab + static_cast<int>(tok.merges_.size()) > tok.vocab_size_) {
            throw DataError("tokenizer lists more merges than the vocab admits");
        }
        return tok;
    }

  private:
    static std::vector<std::string> split_runs(std::string_view text) {
        std::vector<std::string> out;
        size_t i = 0;
        while (i < text.size()) {
            bool ws = std::isspace(static_cast<unsigned char>(text[i])) != 0;
            size_t j = i;
            while (j < text.size() && (std::isspace(static_cast<unsigned char>(text[j])) != 0) == ws) ++j;
            out.emplace_back(text.substr(i, j - i));
            i = j;
        }
        return out;
    }

    static void merge_pair(std::vector<int>& ids, std::pair<int, int> pair, int new_id) {
        size_t w = 0;
        for (size_t r = 0; r < ids.size();) {
            if (r + 1 < ids.size() && ids[r] == pair.first && ids[r + 1] == pair.second) {
                ids[w++] = new_id;
                r += 2;
            } else {
                ids[w++] = ids[r++];
            }
        }
        ids.resize(w);
    }

    std::string bytes_of(int id) const {
        if (id < 4) return "";
        if (id < kMinVocab) return std::string(1, static_cast<char>(id - 4));
        return merged_bytes_.at(static_cast<size_t>(id - kMinVocab));
    }

    int vocab_size_ = kMinVocab;
    std::vector<std::pair<int, int>> merges_;
    std::vector<std::string> merged_bytes_;
    std::map<std::pair<int, int>, int> rank_;
};

// ---------------------------------------------------------------------------
// Image feature container: "LCGF" magic, u32 version, u32 count, u32 dim,
// then count*dim little-endian f32 values in row-major order.
// ---------------------------------------------------------------------------

inline void write_features(const std::string& path, const Tensor& features) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write feature file: " + path);
    f.write("LCGF", 4);
    uint32_t version = 1, count = static_cast<uint32_t>(features.rows()), dim = static_cast<uint32_t>(features.cols());
    f.write(reinterpret_cast<const char*>(&version), 4);
    f.write(reinterpret_cast<const char*>(&count), 4);
    f.write(reinterpret_cast<const char*>(&dim), 4);
    for (double v : features.values()) {
        float x = static_cast<float>(v);
        f.write(reinterpret_cast<const char*>(&x), 4);
    }
}

inline Tensor read_features(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot read feature file: " + path);
    char magic[4];
    f.read(magic, 4);
    if (f.gcount() != 4 || std::memcmp(magic, "LCGF", 4) != 0) {
        throw DataError("bad magic in feature file: " + path);
    }
    uint32_t version = 0, count = 0, dim = 0;
    f.read(reinterpret_cast<char*>(&version), 4);
    f.read(reinterpret_cast<char*>(&count), 4);
    f.read(reinterpret_cast<char*>(&dim), 4);
    if (!f || version != 1) throw DataError(format_msg("unsupported feature file version %u", version));
    if (count == 0 || dim == 0) throw DataError("feature file declares an empty matrix");
    Tensor t = Tensor::zeros({static_cast<int64_t>(count), static_cast<int64_t>(dim)});
    for (size_t i = 0; i < t.values().size(); ++i) {
        float x;
        f.read(reinterpret_cast<char*>(&x), 4);
        if (!f) throw DataError("feature file truncated: " + path);
        if (!std::isfinite(x)) throw DataError(format_msg("non-finite feature value at index %zu", i));
        t.values()[i] = static_cast<double>(x);
    }
    return t;
}

// ---------------------------------------------------------------------------
// Grounded dataset: captions.jsonl lines {"caption": str, "feature_row": int}
// paired with a feature file.  Tokenized as BOS + bytes + EOS.
// ---------------------------------------------------------------------------

struct GroundedExample {
    std::vector<int> tokens;
    int feature_row;
};

struct GroundedDataset {
    std::vector<GroundedExample> examples;
    Tensor features;  // [count, feat_dim]

    int feat_dim() const { return static_cast<int>(features.cols()); }

    int64_t total_tokens() const {
        int64_t n = 0;
        for (const auto& e : examples) n += static_cast<int64_t>(e.tokens.size());
        return n;
    }

    static GroundedDataset load(const std::string& captions_path, const std::string& features_path,
                                const Tokenizer& tok, int max_seq_len) {
        GroundedDataset ds;
        ds.features = read_features(features_path);
        std::ifstream f(captions_path);
        if (!f) throw DataError("cannot read captions file: " + captions_path);
        std::string line;
        int line_no = 0;
        while (std::getline(f, line)) {
            ++line_no;
            if (line.empty()) continue;
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(line);
            } catch (const nlohmann::json::exception& e) {
                throw DataError(format_msg("%s line %d: %s", captions_path.c_str(), line_no, e.what()));
            }
            if (!j.contains("caption") || !j["caption"].is_string() || j["caption"].get<std::string>().empty()) {
                throw DataError(format_msg("%s line %d: missing or empty caption", captions_path.c_str(), line_no));
            }
            if (!j.contains("feature_row") || !j["feature_row"].is_number_integer()) {
                throw DataError(format_msg("%s line %d: missing feature_row", captions_path.c_str(), line_no));
            }
            GroundedExample e;
            e.feature_row = j["feature_row"].get<int>();
            if (e.feature_row < 0 || e.feature_row >= ds.features.rows()) {
                throw DataError(format_msg("%s line %d: feature_row %d outside [0, %lld)", captions_path.c_str(),
                                           line_no, e.feature_row, (long long)ds.features.rows()));
            }
            e.tokens.push_back(kBosId);
            auto ids = tok.encode(j["caption"].get<std::string>());
            e.tokens.insert(e.tokens.end(), ids.begin(), ids.end());
            e.tokens.push_back(kEosId);
            if (static_cast<int>(e.tokens.size()) > max_seq_len) {
                throw DataError(format_msg("%s line %d: caption of %zu tokens exceeds max_seq_len %d",
                                           captions_path.c_str(), line_no, e.tokens.size(), max_seq_len));
            }
            ds.examples.push_back(std::move(e));
        }
        if (ds.examples.empty()) throw DataError("captions file has no examples: " + captions_path);
        return ds;
    }
};

// ---------------------------------------------------------------------------
// Ungrounded text: one token stream cut into fixed-length windows.  The tail
// that does not fill a window is dropped.
// ---------------------------------------------------------------------------

struct TextDataset {
    std::vector<int> tokens;
    int window = 128;

    int64_t n_windows() const { return static_cast<int64_t>(tokens.size()) / window; }

    std::span<const int> window_at(int64_t i) const {
        if (i < 0 || i >= n_windows()) throw IndexError(format_msg("window %lld out of range", (long long)i));
        return {tokens.data() + i * window, static_cast<size_t>(window)};
    }

    static TextDataset load(const std::string& path, const Tokenizer& tok, int window = 128) {
        std::ifstream f(path);
        if (!f) throw DataError("cannot read text file: " + path);
        std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        TextDataset ds;
        ds.window = window;
        ds.tokens = tok.encode(text);
        if (ds.n_windows() == 0) {
            throw DataError(format_msg("%s: %zu tokens cannot fill a %d-token window", path.c_str(),
                                       ds.tokens.size(), window));
        }
        return ds;
    }
};

// ---------------------------------------------------------------------------
// Batchers.  An epoch is one shuffled pass over the grounded examples with
// partial batches dropped; the text stream cycles independently.
// ---------------------------------------------------------------------------

class GroundedBatcher {
  public:
    GroundedBatcher(const GroundedDataset& ds, int batch_size, uint64_t seed)
        : ds_(&ds), batch_size_(batch_size), rng_(derive_seed(seed, 0x67626174ULL)) {
        if (batch_size < 1) throw UsageError("batch size must be positive");
        order_.resize(ds.examples.size());
        for (size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<int>(i);
        if (static_cast<int>(ds.examples.size()) < batch_size) {
            throw DataError(format_msg("dataset of %zu captions cannot fill a batch of %d", ds.examples.size(),
                                       batch_size));
        }
        shuffle();
    }

    int64_t batches_per_epoch() const { return static_cast<int64_t>(order_.size()) / batch_size_; }

    // Per-example voken labels, aligned with the dataset; optional.
    void set_vokens(const std::vector<std::vector<int>>* vokens) { vokens_ = vokens; }

    GroundedBatch next() {
        if (cursor_ + batch_size_ > static_cast<int64_t>(order_.size())) {
            shuffle();  // drops the partial tail
        }
        std::vector<std::vector<int>> seqs;
        std::vector<int> rows;
        for (int i = 0; i < batch_size_; ++i) {
            const auto& e = ds_->examples[static_cast<size_t>(order_[static_cast<size_t>(cursor_ + i)])];
            seqs.push_back(e.tokens);
            rows.push_back(e.feature_row);
        }
        GroundedBatch b;
        b.tokens = TokenBatch::from_sequences(seqs, kPadId);
        b.image_features = Tensor::zeros({batch_size_, ds_->features.cols()});
        for (int i = 0; i < batch_size_; ++i) {
            b.image_features.mat().row(i) = ds_->features.mat().row(rows[static_cast<size_t>(i)]);
        }
        if (vokens_) {
            for (int i = 0; i < batch_size_; ++i) {
                const auto& v = (*vokens_)[static_cast<size_t>(order_[static_cast<size_t>(cursor_ + i)])];
                b.vokens.insert(b.vokens.end(), v.begin(), v.end());
            }
        }
        cursor_ += batch_size_;
        return b;
    }

  private:
    void shuffle() {
        for (size_t i = order_.size(); i > 1; --i) {
            std::uniform_int_distribution<size_t> d(0, i - 1);
            std::swap(order_[i - 1], order_[d(rng_)]);
        }
        cursor_ = 0;
    }

    const GroundedDataset* ds_;
    int batch_size_;
    Rng rng_;
    std::vector<int> order_;
    int64_t cursor_ = 0;
    const std::vector<std::vector<int>>* vokens_ = nullptr;
};

class TextBatcher {
  public:
    TextBatcher(const TextDataset& ds, int batch_size, uint64_t seed)
        : ds_(&ds), batch_size_(batch_size), rng_(derive_seed(seed, 0x74626174ULL)) {
        if (batch_size < 1) throw UsageError("batch size must be positive");
        if (ds.n_windows() < batch_size) {
            throw DataError(format_msg("text of %lld windows cannot fill a batch of %d", (long long)ds.n_windows(),
                                       batch_size));
        }
        order_.resize(static_cast<size_t>(ds.n_windows()));
        for (size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<int64_t>(i);
        shuffle();
    }

    TokenBatch next() {
        if (cursor_ + batch_size_ > static_cast<int64_t>(order_.size())) shuffle();
        std::vector<std::vector<int>> seqs;
        for (int i = 0; i < batch_size_; ++i) {
            auto w = ds_->window_at(order_[static_cast<size_t>(cursor_ + i)]);
            seqs.emplace_back(w.begin(), w.end());
        }
        cursor_ += batch_size_;
        return TokenBatch::from_sequences(seqs, kPadId);
    }

  private:
    void shuffle() {
        for (size_t i = order_.size(); i > 1; --i) {
            std::uniform_int_distribution<size_t> d(0, i - 1);
            std::swap(order_[i - 1], order_[d(rng_)]);
        }
        cursor_ = 0;
    }

    const TextDataset* ds_;
    int batch_size_;
    Rng rng_;
    std::vector<int64_t> order_;
    int64_t cursor_ = 0;
};

}  // namespace lcg
