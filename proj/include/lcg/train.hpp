#pragma once

// Optimization and training loops: AdamW with decoupled weight decay, linear
// warmup to a constant learning rate, global-norm gradient clipping,
// grounded-only and mixed grounded/ungrounded epochs with best-validation
// checkpointing, the lambda_u sweep with its selection rule, the named
// ablation configurations, and the voken two-stage pipeline.

#include <cmath>
#include <limits>
#include <sstream>

#include "lcg/data.hpp"
#include "lcg/io.hpp"
#include "lcg/objectives.hpp"

namespace lcg {

struct TrainConfig {
    double peak_lr = 1e-4;
    int64_t warmup_steps = -1;  // -1: max(100, total_steps / 20)
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double grad_clip = 1.0;
    int batch_size = 32;
    int text_batch_size = -1;  // -1: same as batch_size
    int epochs = 1;
    int64_t max_steps = -1;  // -1: run all epochs
    double lambda_u = 1.0;
    uint64_t seed = 1;

    int text_batch() const { return text_batch_size > 0 ? text_batch_size : batch_size; }

    void validate() const {
        if (peak_lr < 0 || weight_decay < 0 || grad_clip < 0 || lambda_u < 0) {
            throw UsageError("training weights and rates must be non-negative");
        }
        if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw UsageError("betas must lie in [0, 1)");
        if (adam_eps <= 0) throw UsageError("adam_eps must be positive");
        if (batch_size < 1 || epochs < 1) throw UsageError("batch_size and epochs must be at least 1");
        if (warmup_steps == 0 || warmup_steps < -1) throw UsageError("warmup_steps must be at least 1");
    }
};

inline int64_t resolve_warmup(const TrainConfig& cfg, int64_t total_steps) {
    if (cfg.warmup_steps > 0) return cfg.warmup_steps;
    return std::max<int64_t>(100, total_steps / 20);
}

// Linear from 0 at step 0 to peak at step = warmup, constant afterwards.
inline double lr_at(int64_t step, int64_t warmup_steps, double peak_lr) {
    if (step < 0) throw UsageError("lr_at expects a non-negative step");
    if (warmup_steps < 1) throw UsageError("warmup must be at least one step");
    if (step >= warmup_steps) return peak_lr;
    return peak_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
}

// Rescales all gradients so the global norm is at most max_norm (exactly
// max_norm when it was larger).  Returns the pre-clip norm.
inline double clip_gradients(ParamStore& params, double max_norm) {
    double sq = 0.0;
    for (auto& [name, t] : params.items) {
        for (double g : t.grad()) sq += g * g;
    }
    double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0) {
        double scale = max_norm / norm;
        for (auto& [name, t] : params.items) {
            for (double& g : t.grad()) g *= scale;
        }
    }
    return norm;
}

// AdamW with decoupled weight decay: θ ← θ − lr·wd·θ − lr·m̂/(√v̂ + eps).
class AdamW {
  public:
    AdamW(ParamStore& params, const TrainConfig& cfg) : params_(&params), cfg_(cfg) {
        for (auto& [name, t] : params.items) {
            m_.emplace_back(t.values().size(), 0.0);
            v_.emplace_back(t.values().size(), 0.0);
        }
    }

    void step(double lr) {
        ++t_;
        double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (size_t p = 0; p < params_->items.size(); ++p) {
            Tensor& theta = params_->items[p].second;
            auto& vals = theta.values();
            auto& grad = theta.grad();
            auto& m = m_[p];
            auto& v = v_[p];
            for (size_t i = 0; i < vals.size(); ++i) {
                double g = grad[i];
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
                double mh = m[i] / bc1;
                double vh = v[i] / bc2;
                vals[i] -= lr * cfg_.weight_decay * vals[i];
                vals[i] -= lr * mh / (std::sqrt(vh) + cfg_.adam_eps);
            }
        }
    }

    int64_t step_count() const { return t_; }

    NamedTensors moments() const {
        NamedTensors out;
        for (size_t p = 0; p < params_->items.size(); ++p) {
            const auto& [name, t] = params_->items[p];
            Tensor m = Tensor::zeros(t.shape());
            m.values() = m_[p];
            Tensor v = Tensor::zeros(t.shape());
            v.values() = v_[p];
            out.emplace_back("m." + name, std::move(m));
            out.emplace_back("v." + name, std::move(v));
        }
        return out;
    }

    void restore(const NamedTensors& moments, int64_t step_count) {
        if (moments.size() != 2 * params_->items.size()) {
            throw DataError("optimizer state does not match the parameter list");
        }
        for (size_t p = 0; p < params_->items.size(); ++p) {
            const auto& [mn, mt] = moments[2 * p];
            const auto& [vn, vt] = moments[2 * p + 1];
            const std::string& name = params_->items[p].first;
            if (mn != "m." + name || vn != "v." + name || mt.shape() != params_->items[p].second.shape()) {
                throw DataError("optimizer state tensor mismatch at " + name);
            }
            m_[p] = mt.values();
            v_[p] = vt.values();
        }
        t_ = step_count;
    }

  private:
    ParamStore* params_;
    TrainConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    int64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

struct EpochRecord {
    int epoch;
    double train_loss;  // mean step loss over the epoch
    double val_score;   // grounded val loss, or validation perplexity in mixed runs
};

struct TrainResult {
    std::vector<double> step_loss;
    std::vector<double> step_language;
    std::vector<double> step_contrastive;
    std::vector<double> step_ungrounded;  // mixed runs only
    std::vector<EpochRecord> epochs;
    double best_val = std::numeric_limits<double>::infinity();
    int best_epoch = -1;
    int64_t best_step = 0;  // absolute step count when the best snapshot was taken
    NamedTensors best_params;
    NamedTensors final_moments;  // optimizer state at the last step, for resumable checkpoints
    int64_t start_step = 0;      // nonzero when resumed
    int64_t steps_run = 0;       // absolute step counter after the run
};

// Per-run side inputs that most callers leave empty: an optimizer state to
// resume from (parameters must already be loaded) and per-example voken
// labels for the voken objectives.
struct TrainExtras {
    const TrainingState* resume = nullptr;
    const std::vector<std::vector<int>>* vokens = nullptr;      // aligned with train examples
    const std::vector<std::vector<int>>* val_vokens = nullptr;  // aligned with val examples
};

inline NamedTensors snapshot_params(const ParamStore& params) {
    NamedTensors out;
    for (const auto& [name, t] : params.items) {
        Tensor c = Tensor::zeros(t.shape());
        c.values() = t.values();
        out.emplace_back(name, std::move(c));
    }
    return out;
}

// One trainable set: model parameters plus the objective's extra modules.
inline ParamStore trainable_params(TransformerLM& model, const Objective& objective) {
    ParamStore ps;
    for (auto& [name, t] : model.params().items) ps.add(name, t);
    objective.collect_params(ps);
    ps.set_requires_grad(true);
    return ps;
}

namespace detail {

[[noreturn]] inline void diverged(int64_t step, const LossBreakdown& lb, const double* ungrounded) {
    std::ostringstream os;
    os << "non-finite loss at step " << step << ": language=" << lb.language.values()[0]
       << " contrastive=" << lb.contrastive.values()[0];
    if (ungrounded) os << " ungrounded=" << *ungrounded;
    throw NumericError(os.str());
}

}  // namespace detail

// Mean grounded loss over the validation captions in deterministic order.
// For voken objectives the per-example labels must accompany the dataset.
inline double grounded_val_loss(const TransformerLM& model, const Objective& objective, const GroundedDataset& val,
                                int batch_size, const std::vector<std::vector<int>>* vokens = nullptr) {
    int bs = std::min<int>(batch_size, static_cast<int>(val.examples.size()));
    double total = 0.0;
    int64_t batches = 0;
    for (size_t start = 0; start + static_cast<size_t>(bs) <= val.examples.size(); start += static_cast<size_t>(bs)) {
        std::vector<std::vector<int>> seqs;
        GroundedBatch b;
        b.image_features = Tensor::zeros({bs, val.features.cols()});
        for (int i = 0; i < bs; ++i) {
            const auto& e = val.examples[start + static_cast<size_t>(i)];
            seqs.push_back(e.tokens);
            b.image_features.mat().row(i) = val.features.mat().row(e.feature_row);
            if (vokens) {
                const auto& v = (*vokens)[start + static_cast<size_t>(i)];
                b.vokens.insert(b.vokens.end(), v.begin(), v.end());
            }
        }
        b.tokens = TokenBatch::from_sequences(seqs, kPadId);
        Tape tape;
        total += objective.grounded(tape, model, b).total.values()[0];
        ++batches;
    }
    return batches ? total / static_cast<double>(batches) : std::numeric_limits<double>::infinity();
}

// Total next-token NLL over text windows, scoring only positions whose
// in-window context is at least window/2 tokens.  Returns (nll sum, count).
inline std::pair<double, int64_t> windowed_text_nll(const TransformerLM& model, const TextDataset& text,
                                                    int batch_size) {
    int64_t half = text.window / 2;
    double total = 0.0;
    int64_t counted = 0;
    for (int64_t start = 0; start < text.n_windows(); start += batch_size) {
        int bs = static_cast<int>(std::min<int64_t>(batch_size, text.n_windows() - start));
        std::vector<std::vector<int>> seqs;
        for (int i = 0; i < bs; ++i) {
            auto w = text.window_at(start + i);
            seqs.emplace_back(w.begin(), w.end());
        }
        TokenBatch batch = TokenBatch::from_sequences(seqs, kPadId);
        Tape tape;
        ForwardResult fwd = model.forward(tape, batch);
        std::vector<int> targets;
        std::vector<uint8_t> mask;
        next_token_targets(batch, targets, mask);
        for (int c = 0; c < batch.lay.n_seq; ++c) {
            for (int i = 0; i < batch.lay.seq_len; ++i) {
                // position i predicts i+1; require i+1 to have >= half prior tokens
                if (i + 1 < half) mask[static_cast<size_t>(c) * batch.lay.seq_len + static_cast<size_t>(i)] = 0;
            }
        }
        CrossEntropyOut ce = tape.cross_entropy(fwd.logits, targets, mask);
        total += ce.loss.values()[0] * static_cast<double>(ce.counted);
        counted += ce.counted;
    }
    if (counted == 0) throw DataError("no scorable positions in the text dataset");
    return {total, counted};
}

inline double validation_perplexity(const TransformerLM& model, const TextDataset& text, int batch_size) {
    auto [nll, count] = windowed_text_nll(model, text, batch_size);
    return std::exp(nll / static_cast<double>(count));
}

namespace detail {

// Shared resume plumbing: restores optimizer moments, returns the absolute
// step to continue from, and picks the batcher seed (fresh runs keep
// cfg.seed; resumed runs draw a new deterministic stream so the data order
// does not replay the first pass).
inline int64_t apply_resume(AdamW& opt, const TrainConfig& cfg, const TrainingState* resume, uint64_t& batch_seed) {
    batch_seed = cfg.seed;
    if (!resume) return 0;
    opt.restore(resume->moments, resume->step);
    batch_seed = derive_seed(cfg.seed, 0x726573756dULL + static_cast<uint64_t>(resume->step));
    return resume->step;
}

}  // namespace detail

// Epoch loop over the grounded captions only.  Records per-epoch validation
// loss when a validation set is given and keeps the best-validation snapshot.
// With extras.resume the step counter continues from the stored state and the
// run adds cfg.epochs fresh passes (cfg.max_steps caps the added steps).
inline TrainResult train_grounded(TransformerLM& model, Objective& objective, const GroundedDataset& train,
                                  const GroundedDataset* val, const TrainConfig& cfg,
                                  const TrainExtras& extras = {}) {
    cfg.validate();
    if (train.examples.empty()) throw DataError("training dataset is empty");
    if (extras.vokens && extras.vokens->size() != train.examples.size()) {
        throw DataError("voken labels do not align with the training examples");
    }
    ParamStore params = trainable_params(model, objective);
    AdamW opt(params, cfg);
    uint64_t batch_seed = cfg.seed;
    int64_t step0 = detail::apply_resume(opt, cfg, extras.resume, batch_seed);
    GroundedBatcher batcher(train, cfg.batch_size, batch_seed);
    batcher.set_vokens(extras.vokens);
    int64_t per_epoch = batcher.batches_per_epoch();
    int64_t added = per_epoch * cfg.epochs;
    if (cfg.max_steps > 0) added = std::min(added, cfg.max_steps);
    int64_t total_steps = step0 + added;
    int64_t warmup = resolve_warmup(cfg, total_steps);

    TrainResult res;
    res.start_step = step0;
    int64_t step = step0;
    for (int epoch = 0; epoch < cfg.epochs && step < total_steps; ++epoch) {
        double epoch_loss = 0.0;
        int64_t epoch_steps = 0;
        for (int64_t b = 0; b < per_epoch && step < total_steps; ++b, ++step) {
            GroundedBatch batch = batcher.next();
            Tape tape;
            LossBreakdown lb = objective.grounded(tape, model, batch);
            double loss = lb.total.values()[0];
            if (!std::isfinite(loss)) detail::diverged(step, lb, nullptr);
            params.zero_grads();
            tape.backward(lb.total);
            clip_gradients(params, cfg.grad_clip);
            opt.step(lr_at(step, warmup, cfg.peak_lr));
            res.step_loss.push_back(loss);
            res.step_language.push_back(lb.language.values()[0]);
            res.step_contrastive.push_back(lb.contrastive.values()[0]);
            epoch_loss += loss;
            ++epoch_steps;
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = epoch_steps ? epoch_loss / static_cast<double>(epoch_steps) : 0.0;
        rec.val_score = val ? grounded_val_loss(model, objective, *val, cfg.batch_size, extras.val_vokens)
                            : rec.train_loss;
        res.epochs.push_back(rec);
        if (rec.val_score < res.best_val) {
            res.best_val = rec.val_score;
            res.best_epoch = epoch;
            res.best_step = step;
            res.best_params = snapshot_params(params);
        }
    }
    res.steps_run = step;
    if (res.best_params.empty()) res.best_params = snapshot_params(params);
    res.final_moments = opt.moments();
    return res;
}

// Mixed loop: each step draws one grounded and one ungrounded batch and takes
// a single backward pass on L_g + lambda_u * L_u.  Validation perplexity on
// held-out text is tracked per epoch (an epoch is one pass over the grounded
// captions; the text stream cycles).
inline TrainResult train_mixed(TransformerLM& model, Objective& objective, const GroundedDataset& g_train,
                               const TextDataset& t_train, const TextDataset* t_val, const TrainConfig& cfg,
                               const TrainExtras& extras = {}) {
    cfg.validate();
    if (extras.vokens && extras.vokens->size() != g_train.examples.size()) {
        throw DataError("voken labels do not align with the training examples");
    }
    ParamStore params = trainable_params(model, objective);
    AdamW opt(params, cfg);
    uint64_t batch_seed = cfg.seed;
    int64_t step0 = detail::apply_resume(opt, cfg, extras.resume, batch_seed);
    GroundedBatcher g_batcher(g_train, cfg.batch_size, batch_seed);
    g_batcher.set_vokens(extras.vokens);
    TextBatcher t_batcher(t_train, cfg.text_batch(), batch_seed);
    int64_t per_epoch = g_batcher.batches_per_epoch();
    int64_t added = per_epoch * cfg.epochs;
    if (cfg.max_steps > 0) added = std::min(added, cfg.max_steps);
    int64_t total_steps = step0 + added;
    int64_t warmup = resolve_warmup(cfg, total_steps);

    TrainResult res;
    res.start_step = step0;
    int64_t step = step0;
    for (int epoch = 0; epoch < cfg.epochs && step < total_steps; ++epoch) {
        double epoch_loss = 0.0;
        int64_t epoch_steps = 0;
        for (int64_t b = 0; b < per_epoch && step < total_steps; ++b, ++step) {
            GroundedBatch g = g_batcher.next();
            TokenBatch t = t_batcher.next();
            Tape tape;
            LossBreakdown lb = objective.grounded(tape, model, g);
            Tensor lu = objective.ungrounded(tape, model, t);
            Tensor lm = mixed_loss(tape, lb.total, lu, cfg.lambda_u);
            double loss = lm.values()[0];
            double lu_val = lu.values()[0];
            if (!std::isfinite(loss)) detail::diverged(step, lb, &lu_val);
            params.zero_grads();
            tape.backward(lm);
            clip_gradients(params, cfg.grad_clip);
            opt.step(lr_at(step, warmup, cfg.peak_lr));
            res.step_loss.push_back(loss);
            res.step_language.push_back(lb.language.values()[0]);
            res.step_contrastive.push_back(lb.contrastive.values()[0]);
            res.step_ungrounded.push_back(lu.values()[0]);
            epoch_loss += loss;
            ++epoch_steps;
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = epoch_steps ? epoch_loss / static_cast<double>(epoch_steps) : 0.0;
        rec.val_score = t_val ? validation_perplexity(model, *t_val, cfg.text_batch()) : rec.train_loss;
        res.epochs.push_back(rec);
        if (rec.val_score < res.best_val) {
            res.best_val = rec.val_score;
            res.best_epoch = epoch;
            res.best_step = step;
            res.best_params = snapshot_params(params);
        }
    }
    res.steps_run = step;
    if (res.best_params.empty()) res.best_params = snapshot_params(params);
    res.final_moments = opt.moments();
    return res;
}

// ---------------------------------------------------------------------------
// lambda_u sweep
// ---------------------------------------------------------------------------

struct SweepEntry {
    double lambda_u;
    uint64_t seed;
    double val_perplexity;  // +inf for diverged runs
};

struct SweepResult {
    std::vector<SweepEntry> table;
    double selected_lambda_u = 0.0;
};

// argmin of seed-mean validation perplexity; ties go to the smaller lambda_u.
inline double select_lambda(const std::vector<SweepEntry>& table) {
    if (table.empty()) throw UsageError("empty sweep table");
    std::map<double, std::pair<double, int>> acc;  // lambda -> (sum, count)
    for (const auto& e : table) {
        acc[e.lambda_u].first += e.val_perplexity;
        acc[e.lambda_u].second += 1;
    }
    double best_lambda = 0.0, best_mean = std::numeric_limits<double>::infinity();
    bool first = true;
    for (const auto& [lambda, sc] : acc) {  // ascending lambda: strict < keeps the smaller on ties
        double mean = sc.first / static_cast<double>(sc.second);
        if (first || mean < best_mean) {
            best_mean = mean;
            best_lambda = lambda;
            first = false;
        }
    }
    return best_lambda;
}

struct SweepSetup {
    ModelConfig model;
    ObjectiveConfig objective;
    TrainConfig train;
    const GroundedDataset* grounded = nullptr;
    const TextDataset* text = nullptr;
    const TextDataset* text_val = nullptr;
};

inline SweepResult sweep_lambda_u(const SweepSetup& setup, const std::vector<double>& candidates,
                                  const std::vector<uint64_t>& seeds) {
    if (candidates.empty() || seeds.empty()) throw UsageError("sweep needs at least one candidate and one seed");
    if (!setup.grounded || !setup.text || !setup.text_val) throw UsageError("sweep needs datasets");
    SweepResult res;
    for (double lambda : candidates) {
        for (uint64_t seed : seeds) {
            TrainConfig cfg = setup.train;
            cfg.lambda_u = lambda;
            cfg.seed = seed;
            double ppl;
            try {
                TransformerLM model = TransformerLM::build(setup.model, seed);
                Objective objective = Objective::build(setup.objective, setup.model, setup.grounded->feat_dim(), seed);
                TrainResult tr = train_mixed(model, objective, *setup.grounded, *setup.text, setup.text_val, cfg);
                ppl = tr.best_val;
            } catch (const NumericError&) {
                ppl = std::numeric_limits<double>::infinity();
            }
            res.table.push_back({lambda, seed, ppl});
        }
    }
    res.selected_lambda_u = select_lambda(res.table);
    return res;
}

// ---------------------------------------------------------------------------
// Named ablations
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& ablation_names() {
    static const std::vector<std::string> names = {"less_grounding", "more_grounding", "no_narrow_att",
                                                   "mid_grounding", "sentence_clip"};
    return names;
}

inline void apply_ablation(const std::string& name, ModelConfig& model, ObjectiveConfig& objective) {
    if (name == "less_grounding") {
        objective.lambda_c = 0.1;
    } else if (name == "more_grounding") {
        objective.lambda_c = 1.0;
    } else if (name == "no_narrow_att") {
        model.narrow_window.reset();
    } else if (name == "mid_grounding") {
        model.grounding_layer = 3;
        if (model.n_layers < 3) model.n_layers = 3;  // the tap must exist
    } else if (name == "sentence_clip") {
        objective.sentence_clip = true;
    } else {
        std::string valid;
        for (const auto& n : ablation_names()) valid += (valid.empty() ? "" : ", ") + n;
        throw UsageError("unknown ablation '" + name + "' (valid: " + valid + ")");
    }
}

// ---------------------------------------------------------------------------
// Voken pipeline: pretrain a language-only text model, train a token-image
// matcher on top of it, label every caption token with its best bank image,
// then train the voken-predicting model on those labels.
// ---------------------------------------------------------------------------

// Trains only the matcher head (the text model is frozen) with the
// token-level contrastive loss at the top layer.
inline std::vector<double> train_matcher(TransformerLM& model, GroundingHead& matcher, const GroundedDataset& train,
                                         int64_t steps, const TrainConfig& cfg) {
    model.params().set_requires_grad(false);
    ParamStore head_params;
    matcher.collect_params(head_params, "matcher.");
    head_params.set_requires_grad(true);
    AdamW opt(head_params, cfg);
    GroundedBatcher batcher(train, cfg.batch_size, derive_seed(cfg.seed, 0x6d617463ULL));
    int64_t warmup = resolve_warmup(cfg, steps);
    std::vector<double> losses;
    int tap = model.config().n_layers;
    for (int64_t step = 0; step < steps; ++step) {
        GroundedBatch batch = batcher.next();
        Tape tape;
        ForwardResult fwd = model.forward(tape, batch.tokens);
        TokenSelection sel = content_tokens(batch.tokens);
        Tensor reps = tape.gather_rows(fwd.tap(tap), sel.rows);
        Tensor scores = matcher.matching_scores(tape, batch.image_features, reps);
        Tensor loss = tape.lexi_contrastive(scores, sel.caption);
        double v = loss.values()[0];
        if (!std::isfinite(v)) throw NumericError(format_msg("matcher loss non-finite at step %lld", (long long)step));
        head_params.zero_grads();
        tape.backward(loss);
        clip_gradients(head_params, cfg.grad_clip);
        opt.step(lr_at(step, warmup, cfg.peak_lr));
        losses.push_back(v);
    }
    model.params().set_requires_grad(true);
    return losses;
}

// Per-example voken labels (one per content token) against a fixed bank.
inline std::vector<std::vector<int>> assign_vokens(const TransformerLM& model, const GroundingHead& matcher,
                                                   const GroundedDataset& ds, const Tensor& bank, int tap_layer) {
    std::vector<std::vector<int>> out;
    out.reserve(ds.examples.size());
    for (const auto& e : ds.examples) {
        TokenBatch tb = TokenBatch::from_sequences({e.tokens}, kPadId);
        out.push_back(voken_assign(model, matcher, tb, bank, tap_layer));
    }
    return out;
}

}  // namespace lcg
