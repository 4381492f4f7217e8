#pragma once

// Training objectives over image/caption pairs.  All of them share the same
// language model; they differ in how the image reaches the model: a
// token-level contrastive head on an early layer, a sentence-level
// contrastive head on the top layer, a visual prefix, gated cross-attention,
// or a discretised voken target.

#include <string>
#include <vector>

#include "lcg/model.hpp"
#include "lcg/tensor.hpp"

namespace lcg {

enum class ObjectiveKind { language_only, lcg, clip, git, flamingo, vokenization, lexivoken };

inline ObjectiveKind parse_objective(const std::string& s) {
    if (s == "language_only") return ObjectiveKind::language_only;
    if (s == "lcg") return ObjectiveKind::lcg;
    if (s == "clip") return ObjectiveKind::clip;
    if (s == "git") return ObjectiveKind::git;
    if (s == "flamingo") return ObjectiveKind::flamingo;
    if (s == "vokenization") return ObjectiveKind::vokenization;
    if (s == "lexivoken") return ObjectiveKind::lexivoken;
    throw UsageError("unknown objective: " + s);
}

inline const char* objective_name(ObjectiveKind k) {
    switch (k) {
        case ObjectiveKind::language_only: return "language_only";
        case ObjectiveKind::lcg: return "lcg";
        case ObjectiveKind::clip: return "clip";
        case ObjectiveKind::git: return "git";
        case ObjectiveKind::flamingo: return "flamingo";
        case ObjectiveKind::vokenization: return "vokenization";
        case ObjectiveKind::lexivoken: return "lexivoken";
    }
    return "?";
}

// Special token ids shared across the pipeline.
inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;

struct GroundedBatch {
    TokenBatch tokens;       // BOS + caption + EOS per row
    Tensor image_features;   // [n_seq, feat_dim]
    std::vector<int> vokens; // per content token, only for voken objectives
};

// Rows (into the flattened [n*T, d] activations) of the caption content
// tokens, skipping BOS, EOS and padding, with the owning caption of each.
struct TokenSelection {
    std::vector<int> rows;
    std::vector<int> caption;
};

inline TokenSelection content_tokens(const TokenBatch& batch) {
    TokenSelection sel;
    for (int c = 0; c < batch.lay.n_seq; ++c) {
        int len = batch.lay.lengths[static_cast<size_t>(c)];
        for (int i = 1; i + 1 < len; ++i) {
            sel.rows.push_back(c * batch.lay.seq_len + i);
            sel.caption.push_back(c);
        }
    }
    return sel;
}

// ---------------------------------------------------------------------------
// Grounding head: a shared feat_dim -> d_model image adapter, two bias-free
// square projections into the matching space, and a learned temperature.
// tau = exp(-log_inv_tau) starts at 0.07 and is clamped to at least 0.01.
// ---------------------------------------------------------------------------

struct GroundingHead {
    Tensor adapter;      // [feat_dim, d_model]
    Tensor m_v, m_l;     // [d_model, d_model]
    Tensor log_inv_tau;  // [1]

    static GroundingHead build(int feat_dim, int d_model, uint64_t seed) {
        GroundingHead h;
        Rng rng(derive_seed(seed, 0x68656164ULL));
        h.adapter = Tensor::trunc_normal({feat_dim, d_model}, rng, 0.0, 0.02);
        h.m_v = Tensor::trunc_normal({d_model, d_model}, rng, 0.0, 0.02);
        h.m_l = Tensor::trunc_normal({d_model, d_model}, rng, 0.0, 0.02);
        h.log_inv_tau = Tensor::scalar(std::log(1.0 / 0.07));
        return h;
    }

    void collect_params(ParamStore& ps, const std::string& prefix, bool adapter_only = false) const {
        ps.add(prefix + "adapter", adapter);
        if (adapter_only) return;
        ps.add(prefix + "m_v", m_v);
        ps.add(prefix + "m_l", m_l);
        ps.add(prefix + "log_inv_tau", log_inv_tau);
    }

    Tensor inv_tau(Tape& tape) const { return tape.clamp_max(tape.exp_op(log_inv_tau), 100.0); }

    Tensor adapt_images(Tape& tape, const Tensor& feats) const { return tape.matmul(feats, adapter); }

    // scores[i][t] = (M_V g_i) . (M_L r_t) / tau for image i and token rep t
    Tensor matching_scores(Tape& tape, const Tensor& image_feats, const Tensor& token_reps) const {
        Tensor gi = tape.matmul(adapt_images(tape, image_feats), transposed(tape, m_v));
        Tensor rt = tape.matmul(token_reps, transposed(tape, m_l));
        return tape.scale_by(tape.matmul(gi, tape.transpose(rt)), inv_tau(tape));
    }

    // scores between image features and sentence embeddings, [n, n]
    Tensor sentence_scores(Tape& tape, const Tensor& image_feats, const Tensor& sent_reps) const {
        return matching_scores(tape, image_feats, sent_reps);
    }

  private:
    static Tensor transposed(Tape& tape, const Tensor& m) { return tape.transpose(m); }
};

struct LossBreakdown {
    Tensor total = Tensor::scalar(0.0);        // loss to optimise for this batch
    Tensor language = Tensor::scalar(0.0);     // next-token component, if present
    Tensor contrastive = Tensor::scalar(0.0);  // contrastive or voken component, if present
    bool all_masked = false;
};

inline Tensor next_token_loss(Tape& tape, const Tensor& logits, const TokenBatch& batch, bool* all_masked = nullptr) {
    std::vector<int> targets;
    std::vector<uint8_t> mask;
    next_token_targets(batch, targets, mask);
    auto out = tape.cross_entropy(logits, targets, mask);
    if (all_masked) *all_masked = out.all_masked;
    return out.loss;
}

// ---------------------------------------------------------------------------
// Token-level contrastive grounding: next-token loss plus lambda_c times the
// two-direction InfoNCE over matching scores between images and the
// early-layer representations of their caption tokens.
// ---------------------------------------------------------------------------

inline LossBreakdown lcg_grounded_loss(Tape& tape, const TransformerLM& model, const GroundingHead& head,
                                       const GroundedBatch& batch, double lambda_c, bool sentence_level = false) {
    LossBreakdown out;
    ForwardResult fwd = model.forward(tape, batch.tokens);
    out.language = next_token_loss(tape, fwd.logits, batch.tokens, &out.all_masked);
    if (sentence_level) {
        // ablation: one embedding per caption from the top layer's last live row
        std::vector<int> last_rows;
        for (int c = 0; c < batch.tokens.lay.n_seq; ++c) {
            last_rows.push_back(c * batch.tokens.lay.seq_len + batch.tokens.lay.lengths[static_cast<size_t>(c)] - 1);
        }
        Tensor sent = tape.gather_rows(fwd.tap(model.config().n_layers), last_rows);
        Tensor scores = head.sentence_scores(tape, batch.image_features, sent);
        std::vector<int> diag(static_cast<size_t>(batch.tokens.lay.n_seq));
        for (size_t i = 0; i < diag.size(); ++i) diag[i] = static_cast<int>(i);
        Tensor a = tape.cross_entropy(scores, diag).loss;
        Tensor b = tape.cross_entropy(tape.transpose(scores), diag).loss;
        out.contrastive = tape.scale(tape.add(a, b), 0.5);
    } else {
        TokenSelection sel = content_tokens(batch.tokens);
        if (sel.rows.empty()) {
            out.contrastive = Tensor::scalar(0.0);
        } else {
            Tensor reps = tape.gather_rows(fwd.tap(model.config().grounding_layer), sel.rows);
            Tensor scores = head.matching_scores(tape, batch.image_features, reps);
            out.contrastive = tape.lexi_contrastive(scores, sel.caption);
        }
    }
    out.total = tape.add(tape.scale(out.contrastive, lambda_c), out.language);
    return out;
}

// Mixed-stream step loss: grounded objective plus lambda_u times the
// ungrounded next-token loss, a single scalar on one tape.
inline Tensor mixed_loss(Tape& tape, const Tensor& grounded_total, const Tensor& ungrounded, double lambda_u) {
    return tape.add(grounded_total, tape.scale(ungrounded, lambda_u));
}

// ---------------------------------------------------------------------------
// Sentence-level contrastive baseline: symmetric InfoNCE between image
// features and whole-caption embeddings, no next-token term.
// ---------------------------------------------------------------------------

inline LossBreakdown clip_grounded_loss(Tape& tape, const TransformerLM& model, const GroundingHead& head,
                                        const GroundedBatch& batch) {
    LossBreakdown out;
    ForwardResult fwd = model.forward(tape, batch.tokens);
    std::vector<int> last_rows;
    for (int c = 0; c < batch.tokens.lay.n_seq; ++c) {
        last_rows.push_back(c * batch.tokens.lay.seq_len + batch.tokens.lay.lengths[static_cast<size_t>(c)] - 1);
    }
    Tensor sent = tape.gather_rows(fwd.tap(model.config().n_layers), last_rows);
    Tensor scores = head.sentence_scores(tape, batch.image_features, sent);
    std::vector<int> diag(static_cast<size_t>(batch.tokens.lay.n_seq));
    for (size_t i = 0; i < diag.size(); ++i) diag[i] = static_cast<int>(i);
    Tensor a = tape.cross_entropy(scores, diag).loss;
    Tensor b = tape.cross_entropy(tape.transpose(scores), diag).loss;
    out.contrastive = tape.scale(tape.add(a, b), 0.5);
    out.total = out.contrastive;
    return out;
}

// ---------------------------------------------------------------------------
// Visual-prefix captioning: the adapted image is prepended as an extra row,
// token positions shift by one, and the prefix row predicts the first token.
// The prefix is never a prediction target.
// ---------------------------------------------------------------------------

inline LossBreakdown git_grounded_loss(Tape& tape, const TransformerLM& model, const GroundingHead& head,
                                       const GroundedBatch& batch) {
    const TokenBatch& tb = batch.tokens;
    const int n = tb.lay.n_seq, T = tb.lay.seq_len;
    if (T + 1 > model.config().max_seq_len) {
        throw UsageError(format_msg("caption length %d plus the visual prefix exceeds max_seq_len %d", T,
                                    model.config().max_seq_len));
    }
    Tensor vis = head.adapt_images(tape, batch.image_features);  // [n, d]

    std::vector<int> pos_ids(tb.ids.size());
    for (int c = 0; c < n; ++c) {
        for (int i = 0; i < T; ++i) pos_ids[static_cast<size_t>(c) * T + i] = i + 1;
    }
    Tensor tok = tape.add(tape.embedding(model.embedding(), tb.ids), tape.embedding(model.positional(), pos_ids));
    std::vector<int> pos0(static_cast<size_t>(n), 0);
    Tensor vis_pos = tape.add(vis, tape.embedding(model.positional(), pos0));

    // interleave [vis_c, tokens_c...] per caption
    Tensor stacked = tape.concat_rows(vis_pos, tok);
    std::vector<int> order;
    order.reserve(static_cast<size_t>(n) * (T + 1));
    for (int c = 0; c < n; ++c) {
        order.push_back(c);
        for (int i = 0; i < T; ++i) order.push_back(n + c * T + i);
    }
    Tensor h0 = tape.gather_rows(stacked, order);

    SeqLayout lay;
    lay.n_seq = n;
    lay.seq_len = T + 1;
    for (int c = 0; c < n; ++c) lay.lengths.push_back(tb.lay.lengths[static_cast<size_t>(c)] + 1);

    ForwardResult fwd = model.forward_from(tape, h0, lay);

    // row j predicts token j of the original sequence; the last live row
    // (holding the final token) is unscored
    std::vector<int> targets(static_cast<size_t>(n) * (T + 1), 0);
    std::vector<uint8_t> mask(targets.size(), 0);
    for (int c = 0; c < n; ++c) {
        int len = tb.lay.lengths[static_cast<size_t>(c)];
        for (int j = 0; j < len; ++j) {
            size_t row = static_cast<size_t>(c) * (T + 1) + j;
            targets[row] = tb.ids[static_cast<size_t>(c) * T + j];
            mask[row] = 1;
        }
    }
    LossBreakdown out;
    auto ce = tape.cross_entropy(fwd.logits, targets, mask);
    out.language = ce.loss;
    out.all_masked = ce.all_masked;
    out.total = out.language;
    return out;
}

// ---------------------------------------------------------------------------
// Gated cross-attention conditioning: a small perceiver resampler turns each
// image into a set of latents; tanh-gated cross-attention plus a gated FFN
// run before every second transformer block.  Gates start at zero, so an
// untrained model is exactly the language-only model.
// ---------------------------------------------------------------------------

struct FlamingoModule {
    struct ResamplerLayer {
        Tensor ln_q, ln_kv;  // gains (biases fixed at zero kept for shape parity)
        Tensor ln_q_b, ln_kv_b;
        Tensor wq, wk, wv, wo;
        Tensor ln_f, ln_f_b, w1, b1, w2, b2;
    };
    struct GatedBlock {
        Tensor ln_g, ln_b;
        Tensor wq, wk, wv, wo;
        Tensor gate_attn;  // [1], init 0
        Tensor ln2_g, ln2_b;
        Tensor w1, b1, w2, b2;
        Tensor gate_ffn;  // [1], init 0
    };

    Tensor adapter;  // [feat_dim, d_model]
    Tensor latents;  // [n_latents, d_model]
    std::vector<ResamplerLayer> resampler;
    std::vector<GatedBlock> gated;
    std::vector<int> insert_before;  // transformer block indices
    int n_heads = 0;
    int n_latents = 0;

    static FlamingoModule build(int feat_dim, const ModelConfig& mcfg, int n_latents, int resampler_layers,
                                uint64_t seed) {
        FlamingoModule f;
        Rng rng(derive_seed(seed, 0x666c616dULL));
        const int64_t d = mcfg.d_model, ff = mcfg.ffn_dim();
        const double std = 0.02;
        f.n_heads = mcfg.n_heads;
        f.n_latents = n_latents;
        f.adapter = Tensor::trunc_normal({feat_dim, d}, rng, 0.0, std);
        f.latents = Tensor::trunc_normal({n_latents, d}, rng, 0.0, std);
        auto ones = [&] { return Tensor::from({d}, std::vector<double>(static_cast<size_t>(d), 1.0)); };
        for (int l = 0; l < resampler_layers; ++l) {
            ResamplerLayer rl;
            rl.ln_q = ones();
            rl.ln_q_b = Tensor::zeros({d});
            rl.ln_kv = ones();
            rl.ln_kv_b = Tensor::zeros({d});
            rl.wq = Tensor::trunc_normal({d, d}, rng, 0.0, std);
            rl.wk = Tensor::trunc_normal({d, d}, rng, 0.0, std);
            rl.wv = Tensor::trunc_normal({d, d}, rng, 0.0, std);
            rl.wo = Tensor::trunc_normal({d, d}, rng, 0.0, std);
            rl.ln_f = ones();
            rl.ln_f_b = Tensor::zeros({d});
            rl.w1 = Tensor::trunc_normal({d, ff}, rng, 0.0, std);
            rl.b1 = Tensor::zeros({ff});
            rl.w2 = Tensor::trunc_normal({ff, d}, rng, 0.0, std);
            rl.b2 = Tensor::zeros({d});
            f.resampler.push_back(std::move(rl));
        }
        for (int b = 0; b < mcfg.n_layers; b += 2) {
            f.insert_before.push_back(b);
            GatedBlock gb;
            gb.ln_g = ones();
            gb.ln_b = Tensor::zeros({d});
            gb.wq = Tensor::trunc_normal({d, d}, rng, 0.0, std);
            gb.wk = Tensor::trunc_normal({d, d}, rng, 0.0, std);
            gb.wv = Tensor::trunc_normal({d, d}, rng, 0.0, std);
            gb.wo = Tensor::trunc_normal({d, d}, rng, 0.0, std);
            gb.gate_attn = Tensor::zeros({1});
            gb.ln2_g = ones();
            gb.ln2_b = Tensor::zeros({d});
            gb.w1 = Tensor::trunc_normal({d, ff}, rng, 0.0, std);
            gb.b1 = Tensor::zeros({ff});
            gb.w2 = Tensor::trunc_normal({ff, d}, rng, 0.0, std);
            gb.b2 = Tensor::zeros({d});
            gb.gate_ffn = Tensor::zeros({1});
            f.gated.push_back(std::move(gb));
        }
        return f;
    }

    void collect_params(ParamStore& ps, const std::string& prefix) const {
        ps.add(prefix + "adapter", adapter);
        ps.add(prefix + "latents", latents);
        for (size_t l = 0; l < resampler.size(); ++l) {
            const auto& r = resampler[l];
            std::string p = prefix + "res" + std::to_string(l) + ".";
            ps.add(p + "ln_q.g", r.ln_q);
            ps.add(p + "ln_q.b", r.ln_q_b);
            ps.add(p + "ln_kv.g", r.ln_kv);
            ps.add(p + "ln_kv.b", r.ln_kv_b);
            ps.add(p + "wq", r.wq);
            ps.add(p + "wk", r.wk);
            ps.add(p + "wv", r.wv);
            ps.add(p + "wo", r.wo);
            ps.add(p + "ln_f.g", r.ln_f);
            ps.add(p + "ln_f.b", r.ln_f_b);
            ps.add(p + "w1", r.w1);
            ps.add(p + "b1", r.b1);
            ps.add(p + "w2", r.w2);
            ps.add(p + "b2", r.b2);
        }
        for (size_t g = 0; g < gated.size(); ++g) {
            const auto& b = gated[g];
            std::string p = prefix + "xattn" + std::to_string(g) + ".";
            ps.add(p + "ln.g", b.ln_g);
            ps.add(p + "ln.b", b.ln_b);
            ps.add(p + "wq", b.wq);
            ps.add(p + "wk", b.wk);
            ps.add(p + "wv", b.wv);
            ps.add(p + "wo", b.wo);
            ps.add(p + "gate_attn", b.gate_attn);
            ps.add(p + "ln2.g", b.ln2_g);
            ps.add(p + "ln2.b", b.ln2_b);
            ps.add(p + "w1", b.w1);
            ps.add(p + "b1", b.b1);
            ps.add(p + "w2", b.w2);
            ps.add(p + "b2", b.b2);
            ps.add(p + "gate_ffn", b.gate_ffn);
        }
    }

    // Image features -> per-image latent set, [n * n_latents, d].
    Tensor resample(Tape& tape, const Tensor& image_feats) const {
        const int n = static_cast<int>(image_feats.rows());
        Tensor kv = tape.matmul(image_feats, adapter);  // [n, d] single image token
        std::vector<int> rep;
        rep.reserve(static_cast<size_t>(n) * n_latents);
        for (int c = 0; c < n; ++c) {
            for (int r = 0; r < n_latents; ++r) rep.push_back(r);
        }
        Tensor lat = tape.embedding(latents, rep);  // replicate per image
        for (const auto& rl : resampler) {
            Tensor q_in = tape.layer_norm(lat, rl.ln_q, rl.ln_q_b);
            Tensor kv_in = tape.layer_norm(kv, rl.ln_kv, rl.ln_kv_b);
            Tensor q = tape.matmul(q_in, rl.wq);
            Tensor kk = tape.matmul(kv_in, rl.wk);
            Tensor vv = tape.matmul(kv_in, rl.wv);
            Tensor att = tape.cross_attention(q, kk, vv, n, n_latents, 1, n_heads, {});
            lat = tape.add(lat, tape.matmul(att, rl.wo));
            Tensor f_in = tape.layer_norm(lat, rl.ln_f, rl.ln_f_b);
            Tensor f = tape.gelu(tape.add_bias(tape.matmul(f_in, rl.w1), rl.b1));
            lat = tape.add(lat, tape.add_bias(tape.matmul(f, rl.w2), rl.b2));
        }
        return lat;
    }

    // Hook inserting the gated cross-attention before the chosen blocks.
    LayerHook make_hook(const Tensor& lat) const {
        return [this, lat](Tape& tape, int layer_index, const Tensor& h, const SeqLayout& lay) -> Tensor {
            for (size_t g = 0; g < insert_before.size(); ++g) {
                if (insert_before[g] != layer_index) continue;
                const GatedBlock& b = gated[g];
                Tensor x_in = tape.layer_norm(h, b.ln_g, b.ln_b);
                Tensor q = tape.matmul(x_in, b.wq);
                Tensor kk = tape.matmul(lat, b.wk);
                Tensor vv = tape.matmul(lat, b.wv);
                Tensor att = tape.cross_attention(q, kk, vv, lay.n_seq, lay.seq_len, n_latents, n_heads, lay.lengths);
                Tensor ca = tape.matmul(att, b.wo);
                Tensor h1 = tape.add(h, tape.scale_by(ca, tape.tanh_op(b.gate_attn)));
                Tensor f_in = tape.layer_norm(h1, b.ln2_g, b.ln2_b);
                Tensor f = tape.gelu(tape.add_bias(tape.matmul(f_in, b.w1), b.b1));
                f = tape.add_bias(tape.matmul(f, b.w2), b.b2);
                return tape.add(h1, tape.scale_by(f, tape.tanh_op(b.gate_ffn)));
            }
            return h;
        };
    }
};

inline LossBreakdown flamingo_grounded_loss(Tape& tape, const TransformerLM& model, const FlamingoModule& flam,
                                            const GroundedBatch& batch) {
    LossBreakdown out;
    Tensor lat = flam.resample(tape, batch.image_features);
    ForwardResult fwd = model.forward(tape, batch.tokens, flam.make_hook(lat));
    out.language = next_token_loss(tape, fwd.logits, batch.tokens, &out.all_masked);
    out.total = out.language;
    return out;
}

// ---------------------------------------------------------------------------
// Voken objectives.  A matcher (a grounding head over a chosen layer) scores
// every content token against a bank of image features; each token gets the
// argmax bank entry as a discrete "voken" label, ties resolved to the lowest
// index.  Final training adds a voken classification head at the same layer.
// ---------------------------------------------------------------------------

inline std::vector<int> voken_assign(const TransformerLM& model, const GroundingHead& matcher,
                                     const TokenBatch& tokens, const Tensor& bank, int tap_layer) {
    Tape tape;
    ForwardResult fwd = model.forward(tape, tokens);
    TokenSelection sel = content_tokens(tokens);
    Tensor reps = tape.gather_rows(fwd.tap(tap_layer), sel.rows);
    Tensor scores = matcher.matching_scores(tape, bank, reps);  // [K, n_tokens]
    std::vector<int> out(sel.rows.size());
    const int64_t K = scores.rows(), T = scores.cols();
    for (int64_t t = 0; t < T; ++t) {
        int best = 0;
        double best_v = scores.at(0, t);
        for (int64_t k = 1; k < K; ++k) {
            double v = scores.at(k, t);
            if (v > best_v) {
                best_v = v;
                best = static_cast<int>(k);
            }
        }
        out[static_cast<size_t>(t)] = best;
    }
    return out;
}

struct VokenHead {
    Tensor w;  // [d_model, n_vokens]
    Tensor b;  // [n_vokens]

    static VokenHead build(int d_model, int n_vokens, uint64_t seed) {
        VokenHead h;
        Rng rng(derive_seed(seed, 0x766f6b656eULL));
        h.w = Tensor::trunc_normal({d_model, n_vokens}, rng, 0.0, 0.02);
        h.b = Tensor::zeros({n_vokens});
        return h;
    }

    void collect_params(ParamStore& ps, const std::string& prefix) const {
        ps.add(prefix + "w", w);
        ps.add(prefix + "b", b);
    }
};

inline LossBreakdown voken_grounded_loss(Tape& tape, const TransformerLM& model, const VokenHead& head,
                                         const GroundedBatch& batch, double lambda_v, int tap_layer) {
    LossBreakdown out;
    ForwardResult fwd = model.forward(tape, batch.tokens);
    out.language = next_token_loss(tape, fwd.logits, batch.tokens, &out.all_masked);
    TokenSelection sel = content_tokens(batch.tokens);
    if (batch.vokens.size() != sel.rows.size()) {
        throw DataError(format_msg("batch provides %zu voken labels for %zu content tokens", batch.vokens.size(),
                                   sel.rows.size()));
    }
    Tensor reps = tape.gather_rows(fwd.tap(tap_layer), sel.rows);
    Tensor logits = tape.add_bias(tape.matmul(reps, head.w), head.b);
    out.contrastive = tape.cross_entropy(logits, batch.vokens).loss;
    out.total = tape.add(out.language, tape.scale(out.contrastive, lambda_v));
    return out;
}

// ---------------------------------------------------------------------------
// Objective: owns the extra modules an objective needs and dispatches the
// per-batch losses.  The language model itself is owned by the caller.
// ---------------------------------------------------------------------------

struct ObjectiveConfig {
    ObjectiveKind kind = ObjectiveKind::language_only;
    double lambda_c = 0.3;
    double lambda_v = 1.0;
    bool sentence_clip = false;  // ablation: sentence-level contrast inside lcg
    int resampler_latents = 8;
    int resampler_layers = 2;
    int n_vokens = 0;  // voken bank size; set when the bank is loaded
};

class Objective {
  public:
    static Objective build(const ObjectiveConfig& cfg, const ModelConfig& mcfg, int feat_dim, uint64_t seed) {
        Objective o;
        o.cfg_ = cfg;
        o.mcfg_ = mcfg;
        switch (cfg.kind) {
            case ObjectiveKind::language_only:
                break;
            case ObjectiveKind::lcg:
            case ObjectiveKind::clip:
                o.head_ = GroundingHead::build(feat_dim, mcfg.d_model, seed);
                break;
            case ObjectiveKind::git:
                o.head_ = GroundingHead::build(feat_dim, mcfg.d_model, seed);
                break;
            case ObjectiveKind::flamingo:
                o.flam_ = FlamingoModule::build(feat_dim, mcfg, cfg.resampler_latents, cfg.resampler_layers, seed);
                break;
            case ObjectiveKind::vokenization:
            case ObjectiveKind::lexivoken:
                if (cfg.n_vokens <= 0) throw UsageError("voken objectives need a voken bank");
                o.voken_ = VokenHead::build(mcfg.d_model, cfg.n_vokens, seed);
                break;
        }
        return o;
    }

    const ObjectiveConfig& config() const { return cfg_; }
    ObjectiveKind kind() const { return cfg_.kind; }
    GroundingHead& head() { return head_; }
    FlamingoModule& flamingo() { return flam_; }
    VokenHead& voken_head() { return voken_; }

    bool uses_images() const { return cfg_.kind != ObjectiveKind::language_only; }

    // voken tap layer: top of the stack for vokenization, first layer otherwise
    int voken_tap_layer() const {
        return cfg_.kind == ObjectiveKind::vokenization ? mcfg_.n_layers : mcfg_.grounding_layer;
    }

    void collect_params(ParamStore& ps) const {
        switch (cfg_.kind) {
            case ObjectiveKind::language_only:
                break;
            case ObjectiveKind::lcg:
            case ObjectiveKind::clip:
                head_.collect_params(ps, "head.");
                break;
            case ObjectiveKind::git:
                head_.collect_params(ps, "head.", /*adapter_only=*/true);
                break;
            case ObjectiveKind::flamingo:
                flam_.collect_params(ps, "flam.");
                break;
            case ObjectiveKind::vokenization:
            case ObjectiveKind::lexivoken:
                voken_.collect_params(ps, "voken.");
                break;
        }
    }

    LossBreakdown grounded(Tape& tape, const TransformerLM& model, const GroundedBatch& batch) const {
        switch (cfg_.kind) {
            case ObjectiveKind::language_only: {
                LossBreakdown out;
                ForwardResult fwd = model.forward(tape, batch.tokens);
                out.language = next_token_loss(tape, fwd.logits, batch.tokens, &out.all_masked);
                out.total = out.language;
                return out;
            }
            case ObjectiveKind::lcg:
                return lcg_grounded_loss(tape, model, head_, batch, cfg_.lambda_c, cfg_.sentence_clip);
            case ObjectiveKind::clip:
                return clip_grounded_loss(tape, model, head_, batch);
            case ObjectiveKind::git:
                return git_grounded_loss(tape, model, head_, batch);
            case ObjectiveKind::flamingo:
                return flamingo_grounded_loss(tape, model, flam_, batch);
            case ObjectiveKind::vokenization:
            case ObjectiveKind::lexivoken:
                return voken_grounded_loss(tape, model, voken_, batch, cfg_.lambda_v, voken_tap_layer());
        }
        throw UsageError("unhandled objective");
    }

    Tensor ungrounded(Tape& tape, const TransformerLM& model, const TokenBatch& text) const {
        ForwardResult fwd = model.forward(tape, text);
        return next_token_loss(tape, fwd.logits, text);
    }

  private:
    ObjectiveConfig cfg_;
    ModelConfig mcfg_;
    GroundingHead head_;
    FlamingoModule flam_;
    VokenHead voken_;
};

}  // namespace lcg
