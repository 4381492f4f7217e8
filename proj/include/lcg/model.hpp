#pragma once

// Decoder-only transformer language model with pre-norm blocks, learned
// absolute positions and (by default) an output projection tied to the token
// embedding.  Representations from every residual depth can be tapped; an
// optional narrow attention window restricts the block that produces the
// grounded representation to nearby context.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "lcg/common.hpp"
#include "lcg/tensor.hpp"

namespace lcg {

struct ModelConfig {
    int n_layers = 2;
    int d_model = 64;
    int n_heads = 4;
    int d_ffn = 0;  // 0 means 4 * d_model
    int vocab_size = 512;
    int max_seq_len = 128;
    std::optional<int> narrow_window = 2;  // absent: full causal everywhere
    int grounding_layer = 1;               // residual depth fed to the grounding head
    bool tie_output = true;

    int ffn_dim() const { return d_ffn > 0 ? d_ffn : 4 * d_model; }

    void validate() const {
        if (n_layers < 0) throw UsageError("n_layers must be non-negative");
        if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0) {
            throw UsageError(format_msg("d_model %d must be a positive multiple of n_heads %d", d_model, n_heads));
        }
        if (vocab_size < 1) throw UsageError("vocab_size must be positive");
        if (max_seq_len < 1) throw UsageError("max_seq_len must be positive");
        if (narrow_window && *narrow_window < 0) throw UsageError("narrow_window must be non-negative");
        if (grounding_layer < 0 || grounding_layer > n_layers) {
            throw UsageError(format_msg("grounding_layer %d outside [0, %d]", grounding_layer, n_layers));
        }
    }
};

// Padded batch of token sequences.
struct TokenBatch {
    std::vector<int> ids;  // n_seq * seq_len, padded
    SeqLayout lay;
    int pad_id = 0;

    static TokenBatch from_sequences(const std::vector<std::vector<int>>& seqs, int pad_id) {
        TokenBatch b;
        b.pad_id = pad_id;
        b.lay.n_seq = static_cast<int>(seqs.size());
        int T = 1;
        for (const auto& s : seqs) T = std::max(T, static_cast<int>(s.size()));
        b.lay.seq_len = T;
        b.ids.assign(static_cast<size_t>(b.lay.n_seq) * T, pad_id);
        for (size_t c = 0; c < seqs.size(); ++c) {
            if (seqs[c].empty()) throw DataError("empty sequence in batch");
            b.lay.lengths.push_back(static_cast<int>(seqs[c].size()));
            std::copy(seqs[c].begin(), seqs[c].end(), b.ids.begin() + static_cast<int64_t>(c) * T);
        }
        return b;
    }

    int64_t rows() const { return static_cast<int64_t>(lay.n_seq) * lay.seq_len; }
};

// Named parameter registry with a stable iteration order; the order defines
// the checkpoint layout and the optimizer state alignment.
struct ParamStore {
    std::vector<std::pair<std::string, Tensor>> items;

    void add(const std::string& name, const Tensor& t) {
        for (auto& [n, _] : items) {
            if (n == name) throw UsageError("duplicate parameter name: " + name);
        }
        items.emplace_back(name, t);
    }

    Tensor* find(const std::string& name) {
        for (auto& [n, t] : items) {
            if (n == name) return &t;
        }
        return nullptr;
    }

    int64_t total_params() const {
        int64_t n = 0;
        for (const auto& [_, t] : items) n += t.numel();
        return n;
    }

    void zero_grads() {
        for (auto& [_, t] : items) t.zero_grad();
    }

    void set_requires_grad(bool b = true) {
        for (auto& [_, t] : items) t.set_requires_grad(b);
    }
};

// Called before selected transformer blocks; returns the (possibly modified)
// hidden state.  layer_index is the 0-based index of the block about to run.
using LayerHook = std::function<Tensor(Tape&, int layer_index, const Tensor& h, const SeqLayout&)>;

struct ForwardResult {
    Tensor logits;                // [n*T, vocab]
    std::vector<Tensor> layers;   // layers[k] = residual stream after block k; [0] = embeddings
    SeqLayout lay;

    // Residual-stream representation at a given depth.  The top depth has the
    // final layer norm already applied.
    const Tensor& tap(int layer) const {
        if (layer < 0 || layer >= static_cast<int>(layers.size())) {
            throw IndexError(format_msg("layer %d outside [0, %d]", layer, static_cast<int>(layers.size()) - 1));
        }
        return layers[static_cast<size_t>(layer)];
    }
};

class TransformerLM {
  public:
    struct Block {
        Tensor ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
        Tensor ln2_g, ln2_b, w1, b1, w2, b2;
    };

    static TransformerLM build(const ModelConfig& cfg, uint64_t seed) {
        cfg.validate();
        TransformerLM m;
        m.cfg_ = cfg;
        Rng rng(derive_seed(seed, 0x6d6f64656cULL));
        const double std = 0.02;
        const int64_t d = cfg.d_model, f = cfg.ffn_dim(), V = cfg.vocab_size;
        m.embed_ = Tensor::trunc_normal({V, d}, rng, 0.0, std);
        m.pos_ = Tensor::trunc_normal({cfg.max_seq_len, d}, rng, 0.0, std);
        for (int l = 0; l < cfg.n_layers; ++l) {
            Block b;
            b.ln1_g = Tensor::from({d}, std::vector<double>(static_cast<size_t>(d), 1.0));
            b.ln1_b = Tensor::zeros({d});
            b.wq = Tensor::trunc_normal({d, d}, rng, 0.0, std);
            b.bq = Tensor::zeros({d});
            b.wk = Tensor::trunc_normal({d, d}, rng, 0.0, std);
            b.bk = Tensor::zeros({d});
            b.wv = Tensor::trunc_normal({d, d}, rng, 0.0, std);
            b.bv = Tensor::zeros({d});
            b.wo = Tensor::trunc_normal({d, d}, rng, 0.0, std);
            b.bo = Tensor::zeros({d});
            b.ln2_g = Tensor::from({d}, std::vector<double>(static_cast<size_t>(d), 1.0));
            b.ln2_b = Tensor::zeros({d});
            b.w1 = Tensor::trunc_normal({d, f}, rng, 0.0, std);
            b.b1 = Tensor::zeros({f});
            b.w2 = Tensor::trunc_normal({f, d}, rng, 0.0, std);
            b.b2 = Tensor::zeros({d});
            m.blocks_.push_back(std::move(b));
        }
        if (cfg.n_layers > 0) {
            m.lnf_g_ = Tensor::from({d}, std::vector<double>(static_cast<size_t>(d), 1.0));
            m.lnf_b_ = Tensor::zeros({d});
        }
        if (!cfg.tie_output) m.out_w_ = Tensor::trunc_normal({V, d}, rng, 0.0, std);
        m.collect_params();
        m.params_.set_requires_grad(true);
        return m;
    }

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    Tensor& embedding() { return embed_; }
    const Tensor& embedding() const { return embed_; }
    const Tensor& positional() const { return pos_; }
    Tensor& output_weight() { return cfg_.tie_output ? embed_ : out_w_; }

    // Token embeddings plus positions; positions restart at every sequence.
    Tensor embed_tokens(Tape& tape, const TokenBatch& batch) const {
        if (batch.lay.seq_len > cfg_.max_seq_len) {
            throw UsageError(format_msg("sequence length %d exceeds max_seq_len %d", batch.lay.seq_len, cfg_.max_seq_len));
        }
        std::vector<int> pos_ids(batch.ids.size());
        for (int c = 0; c < batch.lay.n_seq; ++c) {
            for (int i = 0; i < batch.lay.seq_len; ++i) {
                pos_ids[static_cast<size_t>(c) * batch.lay.seq_len + i] = i;
            }
        }
        Tensor tok = tape.embedding(embed_, batch.ids);
        Tensor pos = tape.embedding(pos_, pos_ids);
        return tape.add(tok, pos);
    }

    ForwardResult forward(Tape& tape, const TokenBatch& batch, const LayerHook& hook = {}) const {
        Tensor h0 = embed_tokens(tape, batch);
        return forward_from(tape, h0, batch.lay, hook);
    }

    // Runs the block stack on an externally assembled hidden state (used when
    // non-token rows are prepended).
    ForwardResult forward_from(Tape& tape, const Tensor& h0, const SeqLayout& lay, const LayerHook& hook = {}) const {
        ForwardResult r;
        r.lay = lay;
        r.layers.push_back(h0);
        Tensor h = h0;
        for (int l = 0; l < cfg_.n_layers; ++l) {
            if (hook) h = hook(tape, l, h, lay);
            h = run_block(tape, blocks_[static_cast<size_t>(l)], h, lay, window_for(l));
            if (l == cfg_.n_layers - 1) h = tape.layer_norm(h, lnf_g_, lnf_b_);
            r.layers.push_back(h);
        }
        r.logits = tape.matmul(h, tape.transpose(cfg_.tie_output ? embed_ : out_w_));
        return r;
    }

    int64_t param_count() const { return params_.total_params(); }

  private:
    std::optional<int> window_for(int block_index) const {
        if (cfg_.narrow_window && cfg_.grounding_layer >= 1 && block_index == cfg_.grounding_layer - 1) {
            return cfg_.narrow_window;
        }
        return std::nullopt;
    }

    Tensor run_block(Tape& tape, const Block& b, const Tensor& x, const SeqLayout& lay,
                     std::optional<int> window) const {
        Tensor a_in = tape.layer_norm(x, b.ln1_g, b.ln1_b);
        Tensor q = tape.add_bias(tape.matmul(a_in, b.wq), b.bq);
        Tensor k = tape.add_bias(tape.matmul(a_in, b.wk), b.bk);
        Tensor v = tape.add_bias(tape.matmul(a_in, b.wv), b.bv);
        Tensor att = tape.self_attention(q, k, v, lay, cfg_.n_heads, window);
        Tensor h = tape.add(x, tape.add_bias(tape.matmul(att, b.wo), b.bo));
        Tensor f_in = tape.layer_norm(h, b.ln2_g, b.ln2_b);
        Tensor f = tape.gelu(tape.add_bias(tape.matmul(f_in, b.w1), b.b1));
        f = tape.add_bias(tape.matmul(f, b.w2), b.b2);
        return tape.add(h, f);
    }

    void collect_params() {
        params_.add("embed", embed_);
        params_.add("pos", pos_);
        for (size_t l = 0; l < blocks_.size(); ++l) {
            auto& b = blocks_[l];
            std::string p = "layer" + std::to_string(l) + ".";
            params_.add(p + "ln1.g", b.ln1_g);
            params_.add(p + "ln1.b", b.ln1_b);
            params_.add(p + "attn.wq", b.wq);
            params_.add(p + "attn.bq", b.bq);
            params_.add(p + "attn.wk", b.wk);
            params_.add(p + "attn.bk", b.bk);
            params_.add(p + "attn.wv", b.wv);
            params_.add(p + "attn.bv", b.bv);
            params_.add(p + "attn.wo", b.wo);
            params_.add(p + "attn.bo", b.bo);
            params_.add(p + "ln2.g", b.ln2_g);
            params_.add(p + "ln2.b", b.ln2_b);
            params_.add(p + "ffn.w1", b.w1);
            params_.add(p + "ffn.b1", b.b1);
            params_.add(p + "ffn.w2", b.w2);
            params_.add(p + "ffn.b2", b.b2);
        }
        if (cfg_.n_layers > 0) {
            params_.add("ln_f.g", lnf_g_);
            params_.add("ln_f.b", lnf_b_);
        }
        if (!cfg_.tie_output) params_.add("out_w", out_w_);
    }

    ModelConfig cfg_;
    Tensor embed_, pos_;
    std::vector<Block> blocks_;
    Tensor lnf_g_, lnf_b_;
    Tensor out_w_;
    ParamStore params_;
};

// Mask selecting next-token prediction positions: position i is scored when
// it is a live (non-pad) position with a live successor in the same sequence.
inline void next_token_targets(const TokenBatch& batch, std::vector<int>& targets, std::vector<uint8_t>& mask) {
    targets.assign(batch.ids.size(), 0);
    mask.assign(batch.ids.size(), 0);
    for (int c = 0; c < batch.lay.n_seq; ++c) {
        int len = batch.lay.lengths[static_cast<size_t>(c)];
        for (int i = 0; i + 1 < len; ++i) {
            size_t row = static_cast<size_t>(c) * batch.lay.seq_len + i;
            targets[row] = batch.ids[row + 1];
            mask[row] = 1;
        }
    }
}

}  // namespace lcg
