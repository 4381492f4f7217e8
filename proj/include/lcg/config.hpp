#pragma once

// Run configuration.  One TOML file describes one experiment: the model
// shape, the training objective, optimizer settings, dataset paths and
// evaluation windowing.  Relative paths are resolved against the directory
// containing the config file, so a config can travel with its data.
//
// The model's vocab_size is intentionally not a config key: it always comes
// from the tokenizer the run loads.

#include <filesystem>
#include <set>
#include <string>

#include "lcg/model.hpp"
#include "lcg/objectives.hpp"
#include "lcg/synth.hpp"
#include "lcg/toml.hpp"
#include "lcg/train.hpp"

namespace lcg {

struct DataPaths {
    std::string tokenizer;
    std::string captions_train, features_train;
    std::string captions_val, features_val;  // optional grounded validation split
    std::string text_train, text_val;        // text_train switches the run to the mixed loop
};

struct EvalConfig {
    int window = 128;
    int batch_size = 8;

    void validate() const {
        if (window < 2) throw UsageError("eval window must be at least 2");
        if (batch_size < 1) throw UsageError("eval batch_size must be positive");
    }
};

// Staging knobs for the voken objectives: a language-only model is trained
// first, a matcher head is fit on top of it, and its argmax labels against a
// fixed bank of images become classification targets for the final model.
struct VokenStage {
    int bank_size = 0;       // rows taken from the training features
    int64_t matcher_steps = 200;
    int pretrain_epochs = 1;
};

struct RunConfig {
    uint64_t seed = 1;
    ModelConfig model;
    ObjectiveConfig objective;
    TrainConfig train;
    DataPaths data;
    EvalConfig eval;
    VokenStage voken;
    bool narrow_window_set = false;  // config named the key explicitly

    // Objective-dependent default: the narrow attention window exists to
    // starve early layers of long-range context, which only matters when an
    // early layer feeds a token-level head.  Explicit config always wins.
    void apply_narrow_window_default() {
        if (narrow_window_set) return;
        bool early_tap = objective.kind == ObjectiveKind::lcg || objective.kind == ObjectiveKind::lexivoken;
        if (!early_tap) model.narrow_window.reset();
    }

    static RunConfig from_file(const std::string& path);
};

namespace detail {

inline std::string resolve_path(const std::string& base_dir, const std::string& p) {
    if (p.empty()) return p;
    std::filesystem::path fp(p);
    if (fp.is_absolute()) return p;
    return (std::filesystem::path(base_dir) / fp).lexically_normal().string();
}

inline void reject_unknown_keys(const toml::Table& t, const std::set<std::string>& known) {
    for (const auto& [key, value] : t.items()) {
        if (!known.count(key)) throw DataError("unrecognized config key '" + key + "'");
    }
}

}  // namespace detail

inline RunConfig RunConfig::from_file(const std::string& path) {
    toml::Table t = toml::parse_file(path);
    static const std::set<std::string> known = {
        "seed",
        "model.n_layers", "model.d_model", "model.n_heads", "model.d_ffn", "model.max_seq_len",
        "model.narrow_window", "model.grounding_layer", "model.tie_output",
        "objective.kind", "objective.lambda_c", "objective.lambda_v", "objective.sentence_clip",
        "objective.resampler_latents", "objective.resampler_layers",
        "train.peak_lr", "train.warmup_steps", "train.weight_decay", "train.beta1", "train.beta2",
        "train.adam_eps", "train.grad_clip", "train.batch_size", "train.text_batch_size", "train.epochs",
        "train.max_steps", "train.lambda_u",
        "data.tokenizer", "data.captions_train", "data.features_train", "data.captions_val", "data.features_val",
        "data.text_train", "data.text_val",
        "eval.window", "eval.batch_size",
        "voken.bank_size", "voken.matcher_steps", "voken.pretrain_epochs",
    };
    detail::reject_unknown_keys(t, known);

    RunConfig rc;
    if (!t.has("seed")) throw DataError("config is missing the top-level 'seed'");
    int64_t seed = t.get_int("seed");
    if (seed < 0) throw DataError("seed must be non-negative");
    rc.seed = static_cast<uint64_t>(seed);
    rc.train.seed = rc.seed;

    rc.model.n_layers = static_cast<int>(t.get_int_or("model.n_layers", rc.model.n_layers));
    rc.model.d_model = static_cast<int>(t.get_int_or("model.d_model", rc.model.d_model));
    rc.model.n_heads = static_cast<int>(t.get_int_or("model.n_heads", rc.model.n_heads));
    rc.model.d_ffn = static_cast<int>(t.get_int_or("model.d_ffn", rc.model.d_ffn));
    rc.model.max_seq_len = static_cast<int>(t.get_int_or("model.max_seq_len", rc.model.max_seq_len));
    rc.model.grounding_layer = static_cast<int>(t.get_int_or("model.grounding_layer", rc.model.grounding_layer));
    rc.model.tie_output = t.get_bool_or("model.tie_output", rc.model.tie_output);
    if (t.has("model.narrow_window")) {
        rc.narrow_window_set = true;
        int w = static_cast<int>(t.get_int("model.narrow_window"));
        if (w < 0) throw DataError("model.narrow_window must be >= 0 (0 disables it)");
        if (w == 0) {
            rc.model.narrow_window.reset();
        } else {
            rc.model.narrow_window = w;
        }
    }

    rc.objective.kind = parse_objective(t.get_string_or("objective.kind", "lcg"));
    rc.objective.lambda_c = t.get_float_or("objective.lambda_c", rc.objective.lambda_c);
    rc.objective.lambda_v = t.get_float_or("objective.lambda_v", rc.objective.lambda_v);
    rc.objective.sentence_clip = t.get_bool_or("objective.sentence_clip", rc.objective.sentence_clip);
    rc.objective.resampler_latents =
        static_cast<int>(t.get_int_or("objective.resampler_latents", rc.objective.resampler_latents));
    rc.objective.resampler_layers =
        static_cast<int>(t.get_int_or("objective.resampler_layers", rc.objective.resampler_layers));

    rc.train.peak_lr = t.get_float_or("train.peak_lr", rc.train.peak_lr);
    rc.train.warmup_steps = t.get_int_or("train.warmup_steps", rc.train.warmup_steps);
    rc.train.weight_decay = t.get_float_or("train.weight_decay", rc.train.weight_decay);
    rc.train.beta1 = t.get_float_or("train.beta1", rc.train.beta1);
    rc.train.beta2 = t.get_float_or("train.beta2", rc.train.beta2);
    rc.train.adam_eps = t.get_float_or("train.adam_eps", rc.train.adam_eps);
    rc.train.grad_clip = t.get_float_or("train.grad_clip", rc.train.grad_clip);
    rc.train.batch_size = static_cast<int>(t.get_int_or("train.batch_size", rc.train.batch_size));
    rc.train.text_batch_size = static_cast<int>(t.get_int_or("train.text_batch_size", rc.train.text_batch_size));
    rc.train.epochs = static_cast<int>(t.get_int_or("train.epochs", rc.train.epochs));
    rc.train.max_steps = t.get_int_or("train.max_steps", rc.train.max_steps);
    rc.train.lambda_u = t.get_float_or("train.lambda_u", rc.train.lambda_u);

    std::string base = std::filesystem::path(path).parent_path().string();
    if (base.empty()) base = ".";
    auto pathkey = [&](const char* key) { return detail::resolve_path(base, t.get_string_or(key, "")); };
    rc.data.tokenizer = pathkey("data.tokenizer");
    rc.data.captions_train = pathkey("data.captions_train");
    rc.data.features_train = pathkey("data.features_train");
    rc.data.captions_val = pathkey("data.captions_val");
    rc.data.features_val = pathkey("data.features_val");
    rc.data.text_train = pathkey("data.text_train");
    rc.data.text_val = pathkey("data.text_val");

    rc.eval.window = static_cast<int>(t.get_int_or("eval.window", rc.eval.window));
    rc.eval.batch_size = static_cast<int>(t.get_int_or("eval.batch_size", rc.eval.batch_size));
    rc.eval.validate();

    rc.voken.bank_size = static_cast<int>(t.get_int_or("voken.bank_size", rc.voken.bank_size));
    rc.voken.matcher_steps = t.get_int_or("voken.matcher_steps", rc.voken.matcher_steps);
    rc.voken.pretrain_epochs = static_cast<int>(t.get_int_or("voken.pretrain_epochs", rc.voken.pretrain_epochs));
    if (rc.voken.bank_size < 0 || rc.voken.matcher_steps < 1 || rc.voken.pretrain_epochs < 0) {
        throw DataError("voken staging settings must be positive (bank_size may be 0 when unused)");
    }
    return rc;
}

// Config for the synthetic-world generator: top-level seed plus a [synth]
// section whose keys mirror the generator settings.
inline SynthConfig synth_config_from_file(const std::string& path) {
    toml::Table t = toml::parse_file(path);
    static const std::set<std::string> known = {
        "seed",
        "synth.n_words", "synth.g_dim", "synth.n_captions", "synth.n_val_captions",
        "synth.text_words", "synth.val_text_words", "synth.test_text_words",
        "synth.image_noise", "synth.markov_kappa",
        "synth.n_relatedness_pairs", "synth.n_norm_features",
        "synth.n_relation_pairs_per_label", "synth.n_context_pairs",
    };
    detail::reject_unknown_keys(t, known);

    SynthConfig cfg;
    if (!t.has("seed")) throw DataError("config is missing the top-level 'seed'");
    int64_t seed = t.get_int("seed");
    if (seed < 0) throw DataError("seed must be non-negative");
    cfg.seed = static_cast<uint64_t>(seed);
    cfg.n_words = static_cast<int>(t.get_int_or("synth.n_words", cfg.n_words));
    cfg.g_dim = static_cast<int>(t.get_int_or("synth.g_dim", cfg.g_dim));
    cfg.n_captions = static_cast<int>(t.get_int_or("synth.n_captions", cfg.n_captions));
    cfg.n_val_captions = static_cast<int>(t.get_int_or("synth.n_val_captions", cfg.n_val_captions));
    cfg.text_words = t.get_int_or("synth.text_words", cfg.text_words);
    cfg.val_text_words = t.get_int_or("synth.val_text_words", cfg.val_text_words);
    cfg.test_text_words = t.get_int_or("synth.test_text_words", cfg.test_text_words);
    cfg.image_noise = t.get_float_or("synth.image_noise", cfg.image_noise);
    cfg.markov_kappa = t.get_float_or("synth.markov_kappa", cfg.markov_kappa);
    cfg.n_relatedness_pairs = static_cast<int>(t.get_int_or("synth.n_relatedness_pairs", cfg.n_relatedness_pairs));
    cfg.n_norm_features = static_cast<int>(t.get_int_or("synth.n_norm_features", cfg.n_norm_features));
    cfg.n_relation_pairs_per_label =
        static_cast<int>(t.get_int_or("synth.n_relation_pairs_per_label", cfg.n_relation_pairs_per_label));
    cfg.n_context_pairs = static_cast<int>(t.get_int_or("synth.n_context_pairs", cfg.n_context_pairs));
    cfg.validate();
    return cfg;
}

}  // namespace lcg
