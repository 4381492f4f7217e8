// Command-line front end: tokenizer training, synthetic data generation,
// model training, the lambda_u sweep, benchmark evaluation and model-pair
// analysis.  Exit codes: 0 success, 2 usage or input error, 3 numerical
// failure during training.

#include <iostream>

#include <CLI11.hpp>

#include "lcg/run.hpp"

int main(int argc, char** argv) {
    CLI::App app{"token-grounded language model workbench"};
    app.require_subcommand(1);

    auto* tokenizer = app.add_subcommand("tokenizer", "tokenizer utilities");
    tokenizer->require_subcommand(1);
    auto* tok_train = tokenizer->add_subcommand("train", "fit a byte-level BPE tokenizer on a text corpus");
    lcg::TokenizerTrainArgs tta;
    tok_train->add_option("--corpus", tta.corpus, "corpus text file")->required();
    tok_train->add_option("--vocab-size", tta.vocab_size, "total vocabulary size including bytes and specials");
    tok_train->add_option("--out", tta.out, "tokenizer file to write")->required();

    auto* synth = app.add_subcommand("synth", "synthetic grounded-language world");
    synth->require_subcommand(1);
    auto* synth_gen = synth->add_subcommand("gen", "generate datasets and benchmark ground truth");
    lcg::SynthGenArgs sga;
    synth_gen->add_option("--config", sga.config, "generator config (TOML)")->required();
    synth_gen->add_option("--out-dir", sga.out_dir, "output directory")->required();
    synth_gen->add_option("--seed", sga.seed, "override the config seed");
    synth_gen->add_flag("--force", sga.force, "write into a non-empty directory");

    auto* train = app.add_subcommand("train", "train one model as described by a config");
    lcg::TrainCmdArgs tca;
    train->add_option("--config", tca.config, "run config (TOML)")->required();
    train->add_option("--out-dir", tca.out_dir, "output directory")->required();
    train->add_option("--objective", tca.objective,
                      "objective kind (language_only, lcg, clip, git, flamingo, vokenization, lexivoken)");
    train->add_option("--ablation", tca.ablation,
                      "named ablation (less_grounding, more_grounding, no_narrow_att, mid_grounding, sentence_clip)");
    train->add_option("--resume", tca.resume, "checkpoint to continue from");
    train->add_flag("--force", tca.force, "write into a non-empty directory");

    auto* sweep = app.add_subcommand("sweep", "grid-search lambda_u over seeds and select by validation perplexity");
    lcg::SweepCmdArgs sca;
    sweep->add_option("--config", sca.config, "run config (TOML)")->required();
    sweep->add_option("--out-dir", sca.out_dir, "output directory")->required();
    sweep->add_option("--lambda-u-grid", sca.lambda_grid, "comma-separated lambda_u candidates")->delimiter(',');
    sweep->add_option("--seeds", sca.seeds, "comma-separated seeds")->delimiter(',');
    sweep->add_flag("--force", sca.force, "write into a non-empty directory");

    auto* eval = app.add_subcommand("eval", "run one benchmark against a checkpoint");
    lcg::EvalCmdArgs eca;
    eval->add_option("--checkpoint", eca.checkpoint, "trained checkpoint")->required();
    eval->add_option("--benchmark", eca.benchmark, "relatedness, features, relations, context or perplexity")
        ->required();
    eval->add_option("--data", eca.data, "benchmark data file (directory for relations)")->required();
    eval->add_option("--out", eca.out_dir, "output directory")->required();
    eval->add_option("--tokenizer", eca.tokenizer, "override the tokenizer path stored in the checkpoint");
    eval->add_option("--seed", eca.seed, "split/probe seed for features and relations");
    eval->add_flag("--force", eca.force, "write into a non-empty directory");

    auto* analyze = app.add_subcommand("analyze", "compare two checkpoints word by word");
    lcg::AnalyzeCmdArgs aca;
    analyze->add_option("--a", aca.a, "first checkpoint")->required();
    analyze->add_option("--b", aca.b, "second checkpoint")->required();
    analyze->add_option("--text", aca.text, "text to score")->required();
    analyze->add_option("--concreteness", aca.concreteness, "word concreteness TSV")->required();
    analyze->add_option("--out", aca.out_dir, "output directory")->required();
    analyze->add_option("--pairs", aca.pairs, "scored word pairs enabling the rank regression");
    analyze->add_option("--tokenizer", aca.tokenizer, "override the tokenizer path stored in checkpoint --a");
    analyze->add_flag("--force", aca.force, "write into a non-empty directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (tok_train->parsed()) {
            lcg::run_tokenizer_train(tta, std::cout);
        } else if (synth_gen->parsed()) {
            lcg::run_synth_gen(sga, std::cout);
        } else if (train->parsed()) {
            lcg::run_train(tca, std::cout);
        } else if (sweep->parsed()) {
            lcg::run_sweep(sca, std::cout);
        } else if (eval->parsed()) {
            lcg::run_eval(eca, std::cout);
        } else if (analyze->parsed()) {
            lcg::run_analyze(aca, std::cout);
        }
        return 0;
    } catch (const lcg::NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const lcg::UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const lcg::DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 1;
    }
}
