#pragma once

// Command implementations behind the CLI.  Each run_* function does the work
// of one subcommand: it loads inputs, executes, writes machine-readable
// artifacts plus a manifest into the output directory, and logs a short
// summary.  Errors surface as the shared exception types, which the binary
// maps onto exit codes (usage/input -> 2, numerical -> 3).

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "lcg/config.hpp"
#include "lcg/eval.hpp"

namespace lcg {

// LCG_THREADS caps how many sweep workers may run concurrently.  Training is
// single-threaded by construction (bit-exact reductions), so the effective
// worker count is min(LCG_THREADS, 1); the variable is still validated and
// reported so schedulers can rely on it.
inline int worker_cap() {
    const char* env = std::getenv("LCG_THREADS");
    if (!env || !*env) return 1;
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1) throw UsageError("LCG_THREADS must be a positive integer");
    return static_cast<int>(std::min<long>(v, 4096));
}

namespace detail {

inline void prepare_out_dir(const std::string& dir, bool force) {
    namespace fs = std::filesystem;
    if (dir.empty()) throw UsageError("output directory must not be empty");
    if (fs::exists(dir)) {
        if (!fs::is_directory(dir)) throw UsageError(dir + " exists and is not a directory");
        if (!fs::is_empty(dir) && !force) {
            throw UsageError("output directory " + dir + " is not empty (pass --force to overwrite)");
        }
    } else {
        fs::create_directories(dir);
    }
}

inline std::ofstream open_text_out(const std::string& path) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write " + path);
    f.precision(17);
    return f;
}

inline std::string slurp_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot read file: " + path);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

class WallClock {
  public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
    }

  private:
    std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Run-config JSON: the resolved configuration a training run used, embedded
// in its checkpoints so evaluation can rebuild the exact model.
// ---------------------------------------------------------------------------

inline nlohmann::json run_config_to_json(const RunConfig& rc, int feat_dim) {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["seed"] = rc.seed;
    j["model"] = {{"n_layers", rc.model.n_layers},
                  {"d_model", rc.model.d_model},
                  {"n_heads", rc.model.n_heads},
                  {"d_ffn", rc.model.d_ffn},
                  {"vocab_size", rc.model.vocab_size},
                  {"max_seq_len", rc.model.max_seq_len},
                  {"narrow_window", rc.model.narrow_window ? *rc.model.narrow_window : 0},
                  {"grounding_layer", rc.model.grounding_layer},
                  {"tie_output", rc.model.tie_output}};
    j["objective"] = {{"kind", objective_name(rc.objective.kind)},
                      {"lambda_c", rc.objective.lambda_c},
                      {"lambda_v", rc.objective.lambda_v},
                      {"sentence_clip", rc.objective.sentence_clip},
                      {"resampler_latents", rc.objective.resampler_latents},
                      {"resampler_layers", rc.objective.resampler_layers},
                      {"n_vokens", rc.objective.n_vokens},
                      {"feat_dim", feat_dim}};
    j["train"] = {{"peak_lr", rc.train.peak_lr},
                  {"warmup_steps", rc.train.warmup_steps},
                  {"weight_decay", rc.train.weight_decay},
                  {"beta1", rc.train.beta1},
                  {"beta2", rc.train.beta2},
                  {"adam_eps", rc.train.adam_eps},
                  {"grad_clip", rc.train.grad_clip},
                  {"batch_size", rc.train.batch_size},
                  {"text_batch_size", rc.train.text_batch_size},
                  {"epochs", rc.train.epochs},
                  {"max_steps", rc.train.max_steps},
                  {"lambda_u", rc.train.lambda_u}};
    j["data"] = {{"tokenizer", rc.data.tokenizer},
                 {"captions_train", rc.data.captions_train},
                 {"features_train", rc.data.features_train},
                 {"captions_val", rc.data.captions_val},
                 {"features_val", rc.data.features_val},
                 {"text_train", rc.data.text_train},
                 {"text_val", rc.data.text_val}};
    j["eval"] = {{"window", rc.eval.window}, {"batch_size", rc.eval.batch_size}};
    j["voken"] = {{"bank_size", rc.voken.bank_size},
                  {"matcher_steps", rc.voken.matcher_steps},
                  {"pretrain_epochs", rc.voken.pretrain_epochs}};
    return j;
}

inline RunConfig run_config_from_json(const nlohmann::json& j, int& feat_dim) {
    try {
        RunConfig rc;
        rc.seed = j.at("seed").get<uint64_t>();
        rc.train.seed = rc.seed;
        const auto& m = j.at("model");
        rc.model.n_layers = m.at("n_layers").get<int>();
        rc.model.d_model = m.at("d_model").get<int>();
        rc.model.n_heads = m.at("n_heads").get<int>();
        rc.model.d_ffn = m.at("d_ffn").get<int>();
        rc.model.vocab_size = m.at("vocab_size").get<int>();
        rc.model.max_seq_len = m.at("max_seq_len").get<int>();
        int w = m.at("narrow_window").get<int>();
        if (w > 0) {
            rc.model.narrow_window = w;
        } else {
            rc.model.narrow_window.reset();
        }
        rc.model.grounding_layer = m.at("grounding_layer").get<int>();
        rc.model.tie_output = m.at("tie_output").get<bool>();
        const auto& o = j.at("objective");
        rc.objective.kind = parse_objective(o.at("kind").get<std::string>());
        rc.objective.lambda_c = o.at("lambda_c").get<double>();
        rc.objective.lambda_v = o.at("lambda_v").get<double>();
        rc.objective.sentence_clip = o.at("sentence_clip").get<bool>();
        rc.objective.resampler_latents = o.at("resampler_latents").get<int>();
        rc.objective.resampler_layers = o.at("resampler_layers").get<int>();
        rc.objective.n_vokens = o.at("n_vokens").get<int>();
        feat_dim = o.at("feat_dim").get<int>();
        const auto& tr = j.at("train");
        rc.train.peak_lr = tr.at("peak_lr").get<double>();
        rc.train.warmup_steps = tr.at("warmup_steps").get<int64_t>();
        rc.train.weight_decay = tr.at("weight_decay").get<double>();
        rc.train.beta1 = tr.at("beta1").get<double>();
        rc.train.beta2 = tr.at("beta2").get<double>();
        rc.train.adam_eps = tr.at("adam_eps").get<double>();
        rc.train.grad_clip = tr.at("grad_clip").get<double>();
        rc.train.batch_size = tr.at("batch_size").get<int>();
        rc.train.text_batch_size = tr.at("text_batch_size").get<int>();
        rc.train.epochs = tr.at("epochs").get<int>();
        rc.train.max_steps = tr.at("max_steps").get<int64_t>();
        rc.train.lambda_u = tr.at("lambda_u").get<double>();
        const auto& d = j.at("data");
        rc.data.tokenizer = d.at("tokenizer").get<std::string>();
        rc.data.captions_train = d.at("captions_train").get<std::string>();
        rc.data.features_train = d.at("features_train").get<std::string>();
        rc.data.captions_val = d.at("captions_val").get<std::string>();
        rc.data.features_val = d.at("features_val").get<std::string>();
        rc.data.text_train = d.at("text_train").get<std::string>();
        rc.data.text_val = d.at("text_val").get<std::string>();
        const auto& e = j.at("eval");
        rc.eval.window = e.at("window").get<int>();
        rc.eval.batch_size = e.at("batch_size").get<int>();
        const auto& v = j.at("voken");
        rc.voken.bank_size = v.at("bank_size").get<int>();
        rc.voken.matcher_steps = v.at("matcher_steps").get<int64_t>();
        rc.voken.pretrain_epochs = v.at("pretrain_epochs").get<int>();
        return rc;
    } catch (const nlohmann::json::exception& ex) {
        throw DataError(std::string("malformed run config in checkpoint: ") + ex.what());
    }
}

// A checkpoint brought back to life: the run config it was trained under,
// the rebuilt model and objective with the stored weights, and the training
// state when present.
struct RestoredRun {
    RunConfig rc;
    int feat_dim = 0;
    TransformerLM model;
    Objective objective;
    std::optional<TrainingState> state;
};

inline RestoredRun restore_checkpoint(const std::string& path) {
    Checkpoint ck = load_checkpoint(path);
    if (!ck.state || ck.state->config_json.empty()) {
        throw DataError("checkpoint " + path + " carries no run config and cannot be restored");
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(ck.state->config_json);
    } catch (const nlohmann::json::exception& ex) {
        throw DataError(std::string("malformed run config in checkpoint: ") + ex.what());
    }
    int feat_dim = 0;
    RunConfig rc = run_config_from_json(j, feat_dim);
    RestoredRun rr{rc, feat_dim, TransformerLM::build(rc.model, 0),
                   Objective::build(rc.objective, rc.model, feat_dim, 0), std::nullopt};
    ParamStore ps = trainable_params(rr.model, rr.objective);
    load_into(ps.items, ck.params);
    rr.state = std::move(*ck.state);
    return rr;
}

// ---------------------------------------------------------------------------
// tokenizer train
// ---------------------------------------------------------------------------

struct TokenizerTrainArgs {
    std::string corpus;
    int vocab_size = 4096;
    std::string out;
};

inline void run_tokenizer_train(const TokenizerTrainArgs& args, std::ostream& log) {
    if (!std::filesystem::exists(args.corpus)) throw DataError("corpus not found: " + args.corpus);
    std::string corpus = detail::slurp_file(args.corpus);
    Tokenizer tok = Tokenizer::train(corpus, args.vocab_size);
    tok.save(args.out);
    log << "tokenizer: vocab " << tok.vocab_size() << " (" << tok.merge_count() << " merges) from "
        << corpus.size() << " corpus bytes -> " << args.out << "\n";
}

// ---------------------------------------------------------------------------
// synth gen
// ---------------------------------------------------------------------------

struct SynthGenArgs {
    std::string config;
    std::string out_dir;
    std::optional<uint64_t> seed;  // overrides the config seed
    bool force = false;
};

inline void run_synth_gen(const SynthGenArgs& args, std::ostream& log) {
    detail::WallClock clock;
    SynthConfig cfg = synth_config_from_file(args.config);
    if (args.seed) cfg.seed = *args.seed;
    detail::prepare_out_dir(args.out_dir, args.force);
    SynthGenerator gen(cfg);
    std::vector<std::string> files = gen.run(args.out_dir);

    ManifestInfo info;
    info.command = "synth gen";
    info.seed = cfg.seed;
    info.config_files = {args.config};
    info.outputs = files;
    info.wall_clock_seconds = clock.seconds();
    info.meta = {{"n_words", cfg.n_words}, {"g_dim", cfg.g_dim}, {"n_captions", cfg.n_captions}};
    write_manifest(args.out_dir, info);
    log << "synth: " << files.size() << " files in " << args.out_dir << " (seed " << cfg.seed << ")\n";
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainCmdArgs {
    std::string config;
    std::string out_dir;
    std::optional<std::string> objective;  // overrides objective.kind
    std::optional<std::string> ablation;
    std::optional<std::string> resume;  // checkpoint path
    bool force = false;
};

namespace detail {

inline Tensor feature_bank(const GroundedDataset& ds, int bank_size) {
    if (bank_size < 2) throw DataError("voken bank needs at least 2 images");
    if (bank_size > static_cast<int>(ds.features.rows())) {
        throw DataError(format_msg("voken bank of %d exceeds the %lld training images", bank_size,
                                   (long long)ds.features.rows()));
    }
    Tensor bank = Tensor::zeros({bank_size, ds.features.cols()});
    for (int i = 0; i < bank_size; ++i) bank.mat().row(i) = ds.features.mat().row(i);
    return bank;
}

inline void write_curves_csv(const std::string& path, const TrainResult& res, bool mixed) {
    std::ofstream f = open_text_out(path);
    f << "step,loss,language,contrastive" << (mixed ? ",ungrounded" : "") << "\n";
    for (size_t i = 0; i < res.step_loss.size(); ++i) {
        f << (res.start_step + static_cast<int64_t>(i)) << "," << res.step_loss[i] << "," << res.step_language[i]
          << "," << res.step_contrastive[i];
        if (mixed) f << "," << res.step_ungrounded[i];
        f << "\n";
    }
}

inline void write_epochs_csv(const std::string& path, const TrainResult& res) {
    std::ofstream f = open_text_out(path);
    f << "epoch,train_loss,val_score\n";
    for (const EpochRecord& rec : res.epochs) {
        f << rec.epoch << "," << rec.train_loss << "," << rec.val_score << "\n";
    }
}

}  // namespace detail

inline void run_train(const TrainCmdArgs& args, std::ostream& log) {
    detail::WallClock clock;
    RunConfig rc = RunConfig::from_file(args.config);
    if (args.objective) rc.objective.kind = parse_objective(*args.objective);
    rc.apply_narrow_window_default();
    std::string ablation = args.ablation.value_or("");
    if (!ablation.empty()) apply_ablation(ablation, rc.model, rc.objective);

    if (rc.data.tokenizer.empty()) throw DataError("train config needs data.tokenizer");
    if (rc.data.captions_train.empty() || rc.data.features_train.empty()) {
        throw DataError("train config needs data.captions_train and data.features_train");
    }
    if (rc.data.captions_val.empty() != rc.data.features_val.empty()) {
        throw DataError("grounded validation needs both data.captions_val and data.features_val");
    }
    Tokenizer tok = Tokenizer::load(rc.data.tokenizer);
    rc.model.vocab_size = tok.vocab_size();
    rc.model.validate();
    if (rc.eval.window > rc.model.max_seq_len) {
        throw DataError(format_msg("eval window %d exceeds the model's max sequence length %d", rc.eval.window,
                                   rc.model.max_seq_len));
    }

    GroundedDataset train_ds = GroundedDataset::load(rc.data.captions_train, rc.data.features_train, tok,
                                                     rc.model.max_seq_len);
    std::optional<GroundedDataset> val_ds;
    if (!rc.data.captions_val.empty()) {
        val_ds = GroundedDataset::load(rc.data.captions_val, rc.data.features_val, tok, rc.model.max_seq_len);
    }
    bool mixed = !rc.data.text_train.empty();
    std::optional<TextDataset> text_train, text_val;
    if (mixed) text_train = TextDataset::load(rc.data.text_train, tok, rc.eval.window);
    if (!rc.data.text_val.empty()) text_val = TextDataset::load(rc.data.text_val, tok, rc.eval.window);
    int feat_dim = train_ds.feat_dim();

    // Voken staging: pretrain a plain language model, fit a matcher head on
    // top of it, and label every caption token against a fixed image bank.
    bool voken_kind =
        rc.objective.kind == ObjectiveKind::vokenization || rc.objective.kind == ObjectiveKind::lexivoken;
    std::vector<std::vector<int>> vokens_train, vokens_val;
    if (voken_kind) {
        int bank_size = rc.voken.bank_size > 0
                            ? rc.voken.bank_size
                            : std::min<int>(64, static_cast<int>(train_ds.features.rows()));
        rc.voken.bank_size = bank_size;
        rc.objective.n_vokens = bank_size;
        Tensor bank = detail::feature_bank(train_ds, bank_size);

        ModelConfig s1 = rc.model;
        s1.narrow_window.reset();  // the labeling model is an ordinary causal LM
        TransformerLM labeler = TransformerLM::build(s1, derive_seed(rc.seed, 0x766f6b70ULL));
        if (rc.voken.pretrain_epochs > 0) {
            ObjectiveConfig lo;
            lo.kind = ObjectiveKind::language_only;
            Objective lo_obj = Objective::build(lo, s1, feat_dim, derive_seed(rc.seed, 0x766f6b70ULL));
            TrainConfig pre = rc.train;
            pre.epochs = rc.voken.pretrain_epochs;
            pre.max_steps = -1;
            pre.seed = derive_seed(rc.seed, 0x766f6b70ULL);
            train_grounded(labeler, lo_obj, train_ds, nullptr, pre);
        }
        GroundingHead matcher = GroundingHead::build(feat_dim, s1.d_model, derive_seed(rc.seed, 0x766f6b6dULL));
        TrainConfig mcfg = rc.train;
        mcfg.seed = derive_seed(rc.seed, 0x766f6b6dULL);
        train_matcher(labeler, matcher, train_ds, rc.voken.matcher_steps, mcfg);
        int tap = rc.objective.kind == ObjectiveKind::vokenization ? s1.n_layers : rc.model.grounding_layer;
        vokens_train = assign_vokens(labeler, matcher, train_ds, bank, tap);
        if (val_ds) vokens_val = assign_vokens(labeler, matcher, *val_ds, bank, tap);
        log << "voken labels: bank " << bank_size << ", tap layer " << tap << "\n";
    }

    TransformerLM model = TransformerLM::build(rc.model, rc.seed);
    Objective objective = Objective::build(rc.objective, rc.model, feat_dim, rc.seed);

    Checkpoint resumed;
    TrainExtras extras;
    if (voken_kind) {
        extras.vokens = &vokens_train;
        if (val_ds) extras.val_vokens = &vokens_val;
    }
    if (args.resume) {
        resumed = load_checkpoint(*args.resume);
        if (!resumed.state || resumed.state->moments.empty()) {
            throw UsageError("checkpoint " + *args.resume +
                             " has no optimizer state; resume needs the final training checkpoint");
        }
        ParamStore ps = trainable_params(model, objective);
        load_into(ps.items, resumed.params);
        extras.resume = &*resumed.state;
        log << "resuming from step " << resumed.state->step << "\n";
    }

    detail::prepare_out_dir(args.out_dir, args.force);
    TrainResult res;
    if (mixed) {
        res = train_mixed(model, objective, train_ds, *text_train, text_val ? &*text_val : nullptr, rc.train,
                          extras);
    } else {
        res = train_grounded(model, objective, train_ds, val_ds ? &*val_ds : nullptr, rc.train, extras);
    }

    std::string config_json = run_config_to_json(rc, feat_dim).dump();
    NamedTensors final_params = snapshot_params(trainable_params(model, objective));
    TrainingState final_state;
    final_state.step = res.steps_run;
    final_state.config_json = config_json;
    final_state.moments = res.final_moments;
    save_checkpoint(args.out_dir + "/checkpoint.bin", final_params, &final_state);

    TrainingState best_state;
    best_state.step = res.best_step;
    best_state.config_json = config_json;
    save_checkpoint(args.out_dir + "/best.bin", res.best_params, &best_state);

    detail::write_curves_csv(args.out_dir + "/curves.csv", res, mixed);
    detail::write_epochs_csv(args.out_dir + "/epochs.csv", res);

    nlohmann::json result;
    result["schema_version"] = 1;
    result["command"] = "train";
    result["objective"] = objective_name(rc.objective.kind);
    result["ablation"] = ablation;
    result["seed"] = rc.seed;
    result["mixed"] = mixed;
    result["start_step"] = res.start_step;
    result["steps"] = res.steps_run;
    result["best_epoch"] = res.best_epoch;
    result["best_step"] = res.best_step;
    result["best_val"] = res.best_val;
    result["final_train_loss"] = res.epochs.empty() ? 0.0 : res.epochs.back().train_loss;
    result["initial_step_loss"] = res.step_loss.empty() ? 0.0 : res.step_loss.front();
    result["final_step_loss"] = res.step_loss.empty() ? 0.0 : res.step_loss.back();
    write_json_file(args.out_dir + "/result.json", result);

    ManifestInfo info;
    info.command = "train";
    info.seed = rc.seed;
    info.config_files = {args.config};
    info.input_files = {rc.data.tokenizer, rc.data.captions_train, rc.data.features_train};
    if (val_ds) {
        info.input_files.push_back(rc.data.captions_val);
        info.input_files.push_back(rc.data.features_val);
    }
    if (mixed) info.input_files.push_back(rc.data.text_train);
    if (text_val) info.input_files.push_back(rc.data.text_val);
    if (args.resume) info.input_files.push_back(*args.resume);
    info.outputs = {"checkpoint.bin", "best.bin", "curves.csv", "epochs.csv", "result.json"};
    info.wall_clock_seconds = clock.seconds();
    info.meta = {{"objective", objective_name(rc.objective.kind)}, {"ablation", ablation}, {"mixed", mixed}};
    write_manifest(args.out_dir, info);

    log << "train: " << objective_name(rc.objective.kind) << (mixed ? " (mixed)" : " (grounded)") << " steps "
        << res.start_step << ".." << res.steps_run << ", best val " << res.best_val << " at epoch "
        << res.best_epoch << " -> " << args.out_dir << "\n";
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

struct SweepCmdArgs {
    std::string config;
    std::string out_dir;
    std::vector<double> lambda_grid;  // empty -> default grid
    std::vector<uint64_t> seeds;      // empty -> {1, 2, 3}
    bool force = false;
};

inline void run_sweep(const SweepCmdArgs& args, std::ostream& log) {
    detail::WallClock clock;
    RunConfig rc = RunConfig::from_file(args.config);
    rc.apply_narrow_window_default();
    if (rc.objective.kind == ObjectiveKind::vokenization || rc.objective.kind == ObjectiveKind::lexivoken) {
        throw UsageError("sweep does not support the voken objectives");
    }
    if (rc.data.tokenizer.empty() || rc.data.captions_train.empty() || rc.data.features_train.empty() ||
        rc.data.text_train.empty() || rc.data.text_val.empty()) {
        throw DataError("sweep config needs tokenizer, grounded training data, text_train and text_val");
    }
    std::vector<double> grid = args.lambda_grid.empty() ? std::vector<double>{0.25, 0.5, 1.0, 2.0, 4.0}
                                                        : args.lambda_grid;
    std::vector<uint64_t> seeds = args.seeds.empty() ? std::vector<uint64_t>{1, 2, 3} : args.seeds;
    int workers = std::min(worker_cap(), 1);  // training is single-threaded; the cap still binds
    log << "sweep: " << grid.size() << " x " << seeds.size() << " cells, " << workers << " worker(s)\n";

    Tokenizer tok = Tokenizer::load(rc.data.tokenizer);
    rc.model.vocab_size = tok.vocab_size();
    rc.model.validate();
    GroundedDataset grounded = GroundedDataset::load(rc.data.captions_train, rc.data.features_train, tok,
                                                     rc.model.max_seq_len);
    TextDataset text = TextDataset::load(rc.data.text_train, tok, rc.eval.window);
    TextDataset text_val = TextDataset::load(rc.data.text_val, tok, rc.eval.window);

    SweepSetup setup;
    setup.model = rc.model;
    setup.objective = rc.objective;
    setup.train = rc.train;
    setup.grounded = &grounded;
    setup.text = &text;
    setup.text_val = &text_val;
    detail::prepare_out_dir(args.out_dir, args.force);
    SweepResult res = sweep_lambda_u(setup, grid, seeds);

    {
        std::ofstream f = detail::open_text_out(args.out_dir + "/sweep.csv");
        f << "lambda_u,seed,val_perplexity\n";
        for (const SweepEntry& e : res.table) {
            f << e.lambda_u << "," << e.seed << ",";
            if (std::isinf(e.val_perplexity)) {
                f << "inf";
            } else {
                f << e.val_perplexity;
            }
            f << "\n";
        }
    }

    nlohmann::json sel;
    sel["schema_version"] = 1;
    sel["command"] = "sweep";
    sel["objective"] = objective_name(rc.objective.kind);
    sel["selected_lambda_u"] = res.selected_lambda_u;
    sel["grid"] = grid;
    sel["seeds"] = seeds;
    sel["means"] = nlohmann::json::array();
    for (double lambda : grid) {
        double sum = 0.0;
        int count = 0;
        for (const SweepEntry& e : res.table) {
            if (e.lambda_u == lambda) {
                sum += e.val_perplexity;
                ++count;
            }
        }
        double mean = sum / static_cast<double>(count);
        nlohmann::json row = {{"lambda_u", lambda}};
        if (std::isinf(mean)) {
            row["mean_val_perplexity"] = "inf";  // JSON has no infinity literal
        } else {
            row["mean_val_perplexity"] = mean;
        }
        sel["means"].push_back(row);
    }
    write_json_file(args.out_dir + "/selection.json", sel);

    ManifestInfo info;
    info.command = "sweep";
    info.seed = rc.seed;
    info.config_files = {args.config};
    info.input_files = {rc.data.tokenizer, rc.data.captions_train, rc.data.features_train, rc.data.text_train,
                        rc.data.text_val};
    info.outputs = {"sweep.csv", "selection.json"};
    info.wall_clock_seconds = clock.seconds();
    info.meta = {{"selected_lambda_u", res.selected_lambda_u}};
    write_manifest(args.out_dir, info);
    log << "sweep: selected lambda_u " << res.selected_lambda_u << " -> " << args.out_dir << "\n";
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalCmdArgs {
    std::string checkpoint;
    std::string benchmark;
    std::string data;
    std::string out_dir;
    std::optional<std::string> tokenizer;  // overrides the path stored in the checkpoint
    uint64_t seed = 1;                     // split/probe seed for features and relations
    bool force = false;
};

namespace detail {

inline Tokenizer eval_tokenizer(const RestoredRun& rr, const std::optional<std::string>& override_path,
                                const std::string& checkpoint_path, std::string& used_path) {
    used_path = override_path ? *override_path : rr.rc.data.tokenizer;
    if (used_path.empty()) {
        throw UsageError("checkpoint " + checkpoint_path + " stores no tokenizer path; pass --tokenizer");
    }
    Tokenizer tok = Tokenizer::load(used_path);
    if (tok.vocab_size() != rr.rc.model.vocab_size) {
        throw UsageError(format_msg("tokenizer vocab %d does not match checkpoint vocab %d", tok.vocab_size(),
                                    rr.rc.model.vocab_size));
    }
    return tok;
}

}  // namespace detail

inline void run_eval(const EvalCmdArgs& args, std::ostream& log) {
    detail::WallClock clock;
    static const std::vector<std::string> benchmarks = {"relatedness", "features", "relations", "context",
                                                        "perplexity"};
    if (std::find(benchmarks.begin(), benchmarks.end(), args.benchmark) == benchmarks.end()) {
        std::string valid;
        for (const auto& b : benchmarks) valid += (valid.empty() ? "" : ", ") + b;
        throw UsageError("unknown benchmark '" + args.benchmark + "' (valid: " + valid + ")");
    }
    RestoredRun rr = restore_checkpoint(args.checkpoint);
    std::string tok_path;
    Tokenizer tok = detail::eval_tokenizer(rr, args.tokenizer, args.checkpoint, tok_path);

    std::vector<std::string> data_files;
    BenchmarkReport rep;
    if (args.benchmark == "relatedness") {
        data_files = {args.data};
        rep = relatedness_benchmark(rr.model, tok, read_scored_pairs(args.data));
    } else if (args.benchmark == "features") {
        data_files = {args.data};
        rep = feature_prediction_benchmark(rr.model, tok, read_feature_norms(args.data), args.seed);
    } else if (args.benchmark == "relations") {
        if (!std::filesystem::is_directory(args.data)) {
            throw UsageError("relations benchmark expects a directory containing relations_train.tsv and "
                             "relations_test.tsv");
        }
        std::string train_path = args.data + "/relations_train.tsv", test_path = args.data + "/relations_test.tsv";
        data_files = {train_path, test_path};
        rep = relation_benchmark(rr.model, tok, read_relations(train_path), read_relations(test_path), args.seed);
    } else if (args.benchmark == "context") {
        data_files = {args.data};
        rep = context_benchmark(rr.model, tok, read_context_pairs(args.data));
    } else {
        data_files = {args.data};
        TextDataset text = TextDataset::load(args.data, tok, rr.rc.eval.window);
        rep.benchmark = "perplexity";
        rep.score = perplexity(rr.model, text, rr.rc.eval.batch_size);
        rep.meta = {{"window", rr.rc.eval.window},
                    {"batch_size", rr.rc.eval.batch_size},
                    {"windows", text.n_windows()}};
    }

    detail::prepare_out_dir(args.out_dir, args.force);
    nlohmann::json report;
    report["schema_version"] = 1;
    report["command"] = "eval";
    report["benchmark"] = args.benchmark;
    report["checkpoint"] = args.checkpoint;
    report["data"] = args.data;
    report["seed"] = args.seed;
    report["report"] = rep.to_json();
    write_json_file(args.out_dir + "/report.json", report);

    {
        std::ofstream f = detail::open_text_out(args.out_dir + "/plot.csv");
        if (!rep.per_layer.empty()) {
            f << "layer,score\n";
            for (size_t l = 0; l < rep.per_layer.size(); ++l) f << l << "," << rep.per_layer[l] << "\n";
        } else if (args.benchmark == "context") {
            f << "pos,score,pairs\n";
            for (const auto& [pos, row] : rep.meta.at("per_pos").items()) {
                f << pos << "," << row.at("score").get<double>() << "," << row.at("pairs").get<int64_t>() << "\n";
            }
        } else {
            f << "metric,value\n";
            f << rep.benchmark << "," << rep.score << "\n";
        }
    }

    ManifestInfo info;
    info.command = "eval";
    info.seed = args.seed;
    info.input_files = {args.checkpoint, tok_path};
    info.input_files.insert(info.input_files.end(), data_files.begin(), data_files.end());
    info.outputs = {"report.json", "plot.csv"};
    info.wall_clock_seconds = clock.seconds();
    info.meta = {{"benchmark", args.benchmark}, {"score", rep.score}};
    write_manifest(args.out_dir, info);

    if (args.benchmark == "perplexity") {
        std::ostringstream os;
        os.precision(17);
        os << rep.score;
        log << os.str() << "\n";
    } else if (rep.best_layer >= 0) {
        log << args.benchmark << ": score " << rep.score << " (best layer " << rep.best_layer << ") -> "
            << args.out_dir << "\n";
    } else {
        log << args.benchmark << ": score " << rep.score << " -> " << args.out_dir << "\n";
    }
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

struct AnalyzeCmdArgs {
    std::string a, b;  // checkpoints
    std::string text;
    std::string concreteness;
    std::string out_dir;
    std::optional<std::string> pairs;      // scored pairs enabling the rank regression
    std::optional<std::string> tokenizer;  // overrides the path stored in checkpoint a
    bool force = false;
};

namespace detail {

// Per-pair best-layer cosine scores for one model, aligned with ground truth
// and pair concreteness (mean of the two words'); pairs missing either are
// skipped.
struct PairProjection {
    int best_layer = -1;
    std::vector<double> model_scores, human_scores, concreteness;
};

inline PairProjection project_pairs(const TransformerLM& model, const Tokenizer& tok,
                                    const std::vector<ScoredPair>& pairs,
                                    const std::map<std::string, double>& conc) {
    BenchmarkReport rep = relatedness_benchmark(model, tok, pairs);
    PairProjection out;
    out.best_layer = rep.best_layer;
    auto layer_cos = [&](const WordRepresentation& wa, const WordRepresentation& wb) {
        const auto& x = wa.layers[static_cast<size_t>(rep.best_layer)];
        const auto& y = wb.layers[static_cast<size_t>(rep.best_layer)];
        double dot = 0, nx = 0, ny = 0;
        for (size_t i = 0; i < x.size(); ++i) {
            dot += x[i] * y[i];
            nx += x[i] * x[i];
            ny += y[i] * y[i];
        }
        if (nx == 0 || ny == 0) return 0.0;
        return dot / std::sqrt(nx * ny);
    };
    std::map<std::string, WordRepresentation> reps;
    for (const ScoredPair& p : pairs) {
        auto ca = conc.find(p.a), cb = conc.find(p.b);
        if (ca == conc.end() || cb == conc.end()) continue;
        bool ok = true;
        for (const std::string& w : {p.a, p.b}) {
            if (reps.count(w)) continue;
            try {
                reps.emplace(w, word_representation(model, tok, w));
            } catch (const DataError&) {
                ok = false;
            }
        }
        if (!ok) continue;
        out.model_scores.push_back(layer_cos(reps.at(p.a), reps.at(p.b)));
        out.human_scores.push_back(p.score);
        out.concreteness.push_back(0.5 * (ca->second + cb->second));
    }
    return out;
}

inline nlohmann::json regression_json(const RankRegression& r, int best_layer) {
    return {{"slope", r.slope},
            {"intercept", r.intercept},
            {"slope_ci_low", r.slope_ci_low},
            {"slope_ci_high", r.slope_ci_high},
            {"pairs", r.n},
            {"best_layer", best_layer}};
}

}  // namespace detail

inline void run_analyze(const AnalyzeCmdArgs& args, std::ostream& log) {
    detail::WallClock clock;
    RestoredRun ra = restore_checkpoint(args.a);
    RestoredRun rb = restore_checkpoint(args.b);
    std::string tok_path;
    Tokenizer tok = detail::eval_tokenizer(ra, args.tokenizer, args.a, tok_path);
    if (tok.vocab_size() != rb.rc.model.vocab_size) {
        throw UsageError(format_msg("tokenizer vocab %d does not match checkpoint vocab %d", tok.vocab_size(),
                                    rb.rc.model.vocab_size));
    }

    std::string text = detail::slurp_file(args.text);
    std::map<std::string, double> conc = read_concreteness(args.concreteness);
    NllDifferenceTable table = per_word_nll_difference(ra.model, rb.model, tok, text, conc, ra.rc.eval.window,
                                                       ra.rc.eval.batch_size);

    detail::prepare_out_dir(args.out_dir, args.force);
    {
        std::ofstream f = detail::open_text_out(args.out_dir + "/differences.csv");
        f << "word,occurrences,mean_nll_difference,concreteness\n";
        for (const WordNllDiff& w : table.words) {
            f << w.word << "," << w.occurrences << "," << w.mean_diff << "," << w.concreteness << "\n";
        }
    }
    {
        std::ofstream f = detail::open_text_out(args.out_dir + "/quintiles.csv");
        f << "quintile,count,mean_concreteness,mean,median,q1,q3\n";
        for (size_t q = 0; q < table.quintiles.size(); ++q) {
            const QuintileSummary& s = table.quintiles[q];
            f << (q + 1) << "," << s.count << "," << s.mean_concreteness << "," << s.mean << "," << s.median << ","
              << s.q1 << "," << s.q3 << "\n";
        }
    }

    nlohmann::json analysis;
    analysis["schema_version"] = 1;
    analysis["command"] = "analyze";
    analysis["model_a"] = args.a;
    analysis["model_b"] = args.b;
    analysis["words"] = table.words.size();
    analysis["scored_tokens"] = table.scored_tokens;
    analysis["skipped_no_concreteness"] = table.skipped_no_concreteness;
    analysis["quintiles"] = nlohmann::json::array();
    for (size_t q = 0; q < table.quintiles.size(); ++q) {
        const QuintileSummary& s = table.quintiles[q];
        analysis["quintiles"].push_back({{"quintile", q + 1},
                                         {"count", s.count},
                                         {"mean_concreteness", s.mean_concreteness},
                                         {"mean", s.mean},
                                         {"median", s.median},
                                         {"q1", s.q1},
                                         {"q3", s.q3}});
    }

    std::vector<std::string> outputs = {"differences.csv", "quintiles.csv", "analysis.json"};
    std::vector<std::string> inputs = {args.a, args.b, tok_path, args.text, args.concreteness};
    if (args.pairs) {
        std::vector<ScoredPair> pairs = read_scored_pairs(*args.pairs);
        inputs.push_back(*args.pairs);
        detail::PairProjection pa = detail::project_pairs(ra.model, tok, pairs, conc);
        detail::PairProjection pb = detail::project_pairs(rb.model, tok, pairs, conc);
        RankRegression rga = humanlikeness_rank_analysis(pa.model_scores, pa.human_scores, pa.concreteness);
        RankRegression rgb = humanlikeness_rank_analysis(pb.model_scores, pb.human_scores, pb.concreteness);
        analysis["rank_regression"] = {{"a", detail::regression_json(rga, pa.best_layer)},
                                       {"b", detail::regression_json(rgb, pb.best_layer)}};
        std::ofstream f = detail::open_text_out(args.out_dir + "/regression.csv");
        f << "model,slope,intercept,slope_ci_low,slope_ci_high,pairs\n";
        f << "a," << rga.slope << "," << rga.intercept << "," << rga.slope_ci_low << "," << rga.slope_ci_high << ","
          << rga.n << "\n";
        f << "b," << rgb.slope << "," << rgb.intercept << "," << rgb.slope_ci_low << "," << rgb.slope_ci_high << ","
          << rgb.n << "\n";
        outputs.push_back("regression.csv");
    }
    write_json_file(args.out_dir + "/analysis.json", analysis);

    ManifestInfo info;
    info.command = "analyze";
    info.seed = 0;
    info.input_files = inputs;
    info.outputs = outputs;
    info.wall_clock_seconds = clock.seconds();
    info.meta = {{"words", table.words.size()}, {"scored_tokens", table.scored_tokens}};
    write_manifest(args.out_dir, info);
    log << "analyze: " << table.words.size() << " words, " << table.scored_tokens << " scored tokens -> "
        << args.out_dir << "\n";
}

}  // namespace lcg
