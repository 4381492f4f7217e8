#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sys/wait.h>
#include <unistd.h>

#include "lcg/config.hpp"
#include "lcg/run.hpp"

using namespace lcg;
using Catch::Approx;

namespace {

namespace fs = std::filesystem;

std::string temp_dir() {
    static int counter = 0;
    auto p = fs::temp_directory_path() /
             ("lcg_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(p);
    return p.string();
}

void write_file(const std::string& path, const std::string& body) {
    std::ofstream f(path);
    REQUIRE(f.good());
    f << body;
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

struct CmdResult {
    int code;
    std::string output;  // stdout + stderr
};

// Runs the real binary inside `cwd`, capturing combined output.
CmdResult cli(const std::string& cwd, const std::string& args, const std::string& env = "") {
    std::string log = cwd + "/.cli_log";
    std::string cmd = "cd '" + cwd + "' && " + env + (env.empty() ? "" : " ") + LCG_CLI_PATH + " " + args + " > '" +
                      log + "' 2>&1";
    int rc = std::system(cmd.c_str());
    REQUIRE(rc != -1);
    return {WIFEXITED(rc) ? WEXITSTATUS(rc) : -1, slurp(log)};
}

const char* kSynthToml =
    "seed = 7\n"
    "[synth]\n"
    "n_words = 60\n"
    "g_dim = 8\n"
    "n_captions = 300\n"
    "n_val_captions = 40\n"
    "text_words = 4000\n"
    "val_text_words = 2000\n"
    "test_text_words = 2000\n"
    "n_relatedness_pairs = 60\n"
    "n_norm_features = 12\n"
    "n_relation_pairs_per_label = 4\n"
    "n_context_pairs = 30\n";

const char* kRunTomlBody =
    "[model]\n"
    "n_layers = 2\n"
    "d_model = 32\n"
    "n_heads = 4\n"
    "max_seq_len = 64\n"
    "grounding_layer = 1\n"
    "[objective]\n"
    "kind = \"lcg\"\n"
    "[train]\n"
    "peak_lr = 1e-3\n"
    "batch_size = 16\n"
    "epochs = 1\n"
    "warmup_steps = 20\n"
    "[eval]\n"
    "window = 64\n"
    "batch_size = 8\n"
    "[data]\n"
    "tokenizer = \"tok.json\"\n"
    "captions_train = \"world/captions_train.jsonl\"\n"
    "features_train = \"world/images_train.lcgf\"\n";

// One synthetic world + tokenizer, shared by the heavier end-to-end cases.
const std::string& fixture_dir() {
    static std::string dir = [] {
        std::string d = temp_dir();
        write_file(d + "/synth.toml", kSynthToml);
        CmdResult gen = cli(d, "synth gen --config synth.toml --out-dir world");
        REQUIRE(gen.code == 0);
        CmdResult tok = cli(d, "tokenizer train --corpus world/corpus.txt --vocab-size 300 --out tok.json");
        REQUIRE(tok.code == 0);
        return d;
    }();
    return dir;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config parsing
// ---------------------------------------------------------------------------

TEST_CASE("toml parser handles sections, scalars, arrays and comments") {
    toml::Table t = toml::parse(
        "top = 3\n"
        "# comment\n"
        "[a]\n"
        "s = \"hi \\\"there\\\"\"  # trailing\n"
        "f = 1.5\n"
        "neg = -2\n"
        "flag = true\n"
        "arr = [1, 2.5, 3]\n");
    REQUIRE(t.get_int("top") == 3);
    REQUIRE(t.get_string("a.s") == "hi \"there\"");
    REQUIRE(t.get_float("a.f") == 1.5);
    REQUIRE(t.get_int("a.neg") == -2);
    REQUIRE(t.get_bool("a.flag"));
    auto arr = t.get_float_array("a.arr");
    REQUIRE(arr == std::vector<double>{1.0, 2.5, 3.0});
    REQUIRE(t.get_int_or("a.absent", 9) == 9);
    REQUIRE_THROWS_AS(t.get_int("a.s"), DataError);
    REQUIRE_THROWS_AS(t.get_string("missing"), DataError);
}

TEST_CASE("toml parser rejects malformed input with line numbers") {
    REQUIRE_THROWS_WITH(toml::parse("x 3\n"), Catch::Matchers::ContainsSubstring("line 1"));
    REQUIRE_THROWS_AS(toml::parse("[bad\nx = 1\n"), DataError);
    REQUIRE_THROWS_AS(toml::parse("x = \"unterminated\n"), DataError);
    REQUIRE_THROWS_AS(toml::parse("x = [1, 2\n"), DataError);
    REQUIRE_THROWS_AS(toml::parse("x = 1\nx = 2\n"), DataError);
    REQUIRE_THROWS_AS(toml::parse("[a]\nx = 1\n[a]\nx = 2\n"), DataError);
    REQUIRE_THROWS_AS(toml::parse("x = nonsense\n"), DataError);
}

TEST_CASE("run config loads defaults, overrides and resolves paths") {
    std::string dir = temp_dir();
    write_file(dir + "/run.toml",
               "seed = 11\n"
               "[model]\n"
               "n_layers = 3\n"
               "d_model = 48\n"
               "n_heads = 6\n"
               "[objective]\n"
               "kind = \"clip\"\n"
               "[train]\n"
               "epochs = 2\n"
               "lambda_u = 0.5\n"
               "[data]\n"
               "tokenizer = \"tok.json\"\n"
               "captions_train = \"/abs/cap.jsonl\"\n");
    RunConfig rc = RunConfig::from_file(dir + "/run.toml");
    REQUIRE(rc.seed == 11);
    REQUIRE(rc.train.seed == 11);
    REQUIRE(rc.model.n_layers == 3);
    REQUIRE(rc.model.d_model == 48);
    REQUIRE(rc.objective.kind == ObjectiveKind::clip);
    REQUIRE(rc.objective.lambda_c == 0.3);  // default grounding weight
    REQUIRE(rc.train.epochs == 2);
    REQUIRE(rc.train.lambda_u == 0.5);
    REQUIRE(rc.data.tokenizer == dir + "/tok.json");        // relative -> config dir
    REQUIRE(rc.data.captions_train == "/abs/cap.jsonl");    // absolute kept
    REQUIRE(rc.eval.window == 128);
    REQUIRE(rc.eval.batch_size == 8);
}

TEST_CASE("run config requires a seed and rejects unknown keys") {
    std::string dir = temp_dir();
    write_file(dir + "/no_seed.toml", "[model]\nn_layers = 1\n");
    REQUIRE_THROWS_WITH(RunConfig::from_file(dir + "/no_seed.toml"),
                        Catch::Matchers::ContainsSubstring("seed"));
    write_file(dir + "/typo.toml", "seed = 1\n[train]\nlamda_u = 2.0\n");
    REQUIRE_THROWS_WITH(RunConfig::from_file(dir + "/typo.toml"),
                        Catch::Matchers::ContainsSubstring("lamda_u"));
    write_file(dir + "/vocab.toml", "seed = 1\n[model]\nvocab_size = 512\n");
    REQUIRE_THROWS_AS(RunConfig::from_file(dir + "/vocab.toml"), DataError);  // vocab comes from the tokenizer
}

TEST_CASE("narrow window defaults follow the objective unless set explicitly") {
    std::string dir = temp_dir();
    auto load = [&](const std::string& body) {
        write_file(dir + "/nw.toml", body);
        RunConfig rc = RunConfig::from_file(dir + "/nw.toml");
        rc.apply_narrow_window_default();
        return rc;
    };
    RunConfig lcg_rc = load("seed = 1\n[objective]\nkind = \"lcg\"\n");
    REQUIRE(lcg_rc.model.narrow_window == 2);
    RunConfig lo_rc = load("seed = 1\n[objective]\nkind = \"language_only\"\n");
    REQUIRE_FALSE(lo_rc.model.narrow_window.has_value());
    RunConfig off = load("seed = 1\n[model]\nnarrow_window = 0\n[objective]\nkind = \"lcg\"\n");
    REQUIRE_FALSE(off.model.narrow_window.has_value());
    RunConfig wide = load("seed = 1\n[model]\nnarrow_window = 5\n[objective]\nkind = \"language_only\"\n");
    REQUIRE(wide.model.narrow_window == 5);
}

TEST_CASE("synth config loader mirrors the generator settings") {
    std::string dir = temp_dir();
    write_file(dir + "/synth.toml", kSynthToml);
    SynthConfig cfg = synth_config_from_file(dir + "/synth.toml");
    REQUIRE(cfg.seed == 7);
    REQUIRE(cfg.n_words == 60);
    REQUIRE(cfg.g_dim == 8);
    REQUIRE(cfg.n_context_pairs == 30);
    write_file(dir + "/bad.toml", "seed = 1\n[synth]\nn_wordz = 4\n");
    REQUIRE_THROWS_AS(synth_config_from_file(dir + "/bad.toml"), DataError);
}

TEST_CASE("run config json round trips through a checkpoint payload") {
    RunConfig rc;
    rc.seed = 5;
    rc.train.seed = 5;
    rc.model.n_layers = 3;
    rc.model.vocab_size = 300;
    rc.model.narrow_window.reset();
    rc.objective.kind = ObjectiveKind::flamingo;
    rc.objective.n_vokens = 12;
    rc.train.lambda_u = 2.5;
    rc.data.tokenizer = "/tmp/tok.json";
    rc.eval.window = 32;
    nlohmann::json j = run_config_to_json(rc, 24);
    int feat_dim = 0;
    RunConfig back = run_config_from_json(j, feat_dim);
    REQUIRE(feat_dim == 24);
    REQUIRE(back.seed == 5);
    REQUIRE(back.model.n_layers == 3);
    REQUIRE(back.model.vocab_size == 300);
    REQUIRE_FALSE(back.model.narrow_window.has_value());
    REQUIRE(back.objective.kind == ObjectiveKind::flamingo);
    REQUIRE(back.objective.n_vokens == 12);
    REQUIRE(back.train.lambda_u == 2.5);
    REQUIRE(back.data.tokenizer == "/tmp/tok.json");
    REQUIRE(back.eval.window == 32);
    REQUIRE(run_config_to_json(back, feat_dim).dump() == j.dump());
}

TEST_CASE("worker cap reads and validates LCG_THREADS") {
    ::unsetenv("LCG_THREADS");
    REQUIRE(worker_cap() == 1);
    ::setenv("LCG_THREADS", "8", 1);
    REQUIRE(worker_cap() == 8);
    ::setenv("LCG_THREADS", "0", 1);
    REQUIRE_THROWS_AS(worker_cap(), UsageError);
    ::setenv("LCG_THREADS", "abc", 1);
    REQUIRE_THROWS_AS(worker_cap(), UsageError);
    ::unsetenv("LCG_THREADS");
}

// ---------------------------------------------------------------------------
// Binary behaviour
// ---------------------------------------------------------------------------

TEST_CASE("usage and input failures exit with code 2") {
    std::string dir = temp_dir();
    CmdResult no_sub = cli(dir, "");
    REQUIRE(no_sub.code == 2);
    CmdResult missing = cli(dir, "tokenizer train --corpus nope.txt --out t.json");
    REQUIRE(missing.code == 2);
    REQUIRE(missing.output.find("corpus not found") != std::string::npos);
    write_file(dir + "/c.txt", "some corpus text\n");
    CmdResult small = cli(dir, "tokenizer train --corpus c.txt --vocab-size 10 --out t.json");
    REQUIRE(small.code == 2);
    REQUIRE(small.output.find("260") != std::string::npos);  // states the bound
    CmdResult no_cfg = cli(dir, "train --config absent.toml --out-dir out");
    REQUIRE(no_cfg.code == 2);
}

TEST_CASE("synth gen refuses a non-empty directory unless forced and reruns byte-identically") {
    std::string dir = temp_dir();
    write_file(dir + "/synth.toml", kSynthToml);
    REQUIRE(cli(dir, "synth gen --config synth.toml --out-dir w1").code == 0);
    CmdResult refuse = cli(dir, "synth gen --config synth.toml --out-dir w1");
    REQUIRE(refuse.code == 2);
    REQUIRE(refuse.output.find("--force") != std::string::npos);
    REQUIRE(cli(dir, "synth gen --config synth.toml --out-dir w1 --force").code == 0);
    REQUIRE(cli(dir, "synth gen --config synth.toml --out-dir w2").code == 0);

    int compared = 0;
    for (const auto& entry : fs::directory_iterator(dir + "/w1")) {
        std::string name = entry.path().filename().string();
        if (name == "manifest.json" || name[0] == '.') continue;
        INFO(name);
        REQUIRE(slurp(dir + "/w1/" + name) == slurp(dir + "/w2/" + name));
        ++compared;
    }
    REQUIRE(compared == 17);

    // seed override changes the world
    REQUIRE(cli(dir, "synth gen --config synth.toml --out-dir w3 --seed 8").code == 0);
    REQUIRE(slurp(dir + "/w1/words.tsv") != slurp(dir + "/w3/words.tsv"));
}

TEST_CASE("manifest names every artifact with its content hash") {
    std::string dir = fixture_dir();
    nlohmann::json m = read_json_file(dir + "/world/manifest.json");
    REQUIRE(m.at("schema_version") == 1);
    REQUIRE(m.at("command") == "synth gen");
    REQUIRE(m.at("seed") == 7);
    REQUIRE(m.at("outputs").size() == 17);
    std::string words_hash = m.at("outputs").at("words.tsv").at("fnv1a64").get<std::string>();
    REQUIRE(words_hash == hex64(hash_file(dir + "/world/words.tsv")));
    REQUIRE(m.at("wall_clock_seconds").get<double>() >= 0.0);
}

TEST_CASE("train writes checkpoints whose config records objective and ablation settings") {
    std::string dir = fixture_dir();
    write_file(dir + "/run.toml", std::string("seed = 3\n") + kRunTomlBody);
    CmdResult tr = cli(dir, "train --config run.toml --out-dir t_lcg --objective lcg");
    REQUIRE(tr.code == 0);
    for (const char* f : {"checkpoint.bin", "best.bin", "curves.csv", "epochs.csv", "result.json", "manifest.json"}) {
        INFO(f);
        REQUIRE(fs::exists(dir + "/t_lcg/" + f));
    }
    Checkpoint ck = load_checkpoint(dir + "/t_lcg/checkpoint.bin");
    REQUIRE(ck.state.has_value());
    nlohmann::json cfg = nlohmann::json::parse(ck.state->config_json);
    REQUIRE(cfg.at("objective").at("kind") == "lcg");
    REQUIRE(cfg.at("objective").at("lambda_c") == 0.3);
    REQUIRE(cfg.at("model").at("vocab_size") == 300);
    REQUIRE(cfg.at("model").at("narrow_window") == 2);

    CmdResult mid = cli(dir, "train --config run.toml --out-dir t_mid --ablation mid_grounding");
    REQUIRE(mid.code == 0);
    nlohmann::json mid_cfg =
        nlohmann::json::parse(load_checkpoint(dir + "/t_mid/checkpoint.bin").state->config_json);
    REQUIRE(mid_cfg.at("model").at("grounding_layer") == 3);
    REQUIRE(mid_cfg.at("model").at("n_layers") == 3);

    CmdResult bad = cli(dir, "train --config run.toml --out-dir t_bad --ablation nonsense");
    REQUIRE(bad.code == 2);
    REQUIRE(bad.output.find("mid_grounding") != std::string::npos);  // lists the valid names
}

TEST_CASE("identical train commands produce byte-identical artifacts") {
    std::string dir = fixture_dir();
    write_file(dir + "/det.toml", std::string("seed = 4\n") + kRunTomlBody);
    REQUIRE(cli(dir, "train --config det.toml --out-dir d1").code == 0);
    REQUIRE(cli(dir, "train --config det.toml --out-dir d2").code == 0);
    for (const char* f : {"checkpoint.bin", "best.bin", "curves.csv", "epochs.csv", "result.json"}) {
        INFO(f);
        REQUIRE(slurp(dir + "/d1/" + std::string(f)) == slurp(dir + "/d2/" + std::string(f)));
    }
}

TEST_CASE("resume continues the step counter exactly") {
    std::string dir = fixture_dir();
    write_file(dir + "/res.toml", std::string("seed = 5\n") + kRunTomlBody);
    REQUIRE(cli(dir, "train --config res.toml --out-dir r1").code == 0);
    nlohmann::json first = read_json_file(dir + "/r1/result.json");
    int64_t steps = first.at("steps").get<int64_t>();
    REQUIRE(steps == 18);  // 300 captions / batch 16, partial tail dropped

    CmdResult r2 = cli(dir, "train --config res.toml --out-dir r2 --resume r1/checkpoint.bin");
    REQUIRE(r2.code == 0);
    nlohmann::json second = read_json_file(dir + "/r2/result.json");
    REQUIRE(second.at("start_step").get<int64_t>() == steps);
    REQUIRE(second.at("steps").get<int64_t>() == 2 * steps);
    REQUIRE(load_checkpoint(dir + "/r2/checkpoint.bin").state->step == 2 * steps);

    // the loss curve carries on from the stored counter
    std::istringstream curves(slurp(dir + "/r2/curves.csv"));
    std::string header, row;
    std::getline(curves, header);
    std::getline(curves, row);
    REQUIRE(row.substr(0, row.find(',')) == std::to_string(steps));

    // best.bin stores weights only; resuming from it is refused
    CmdResult from_best = cli(dir, "train --config res.toml --out-dir r3 --resume r1/best.bin");
    REQUIRE(from_best.code == 2);
    REQUIRE(from_best.output.find("optimizer state") != std::string::npos);
}

TEST_CASE("eval reports per-layer scores and enforces tokenizer compatibility") {
    std::string dir = fixture_dir();
    write_file(dir + "/ev.toml", std::string("seed = 6\n") + kRunTomlBody);
    REQUIRE(cli(dir, "train --config ev.toml --out-dir em").code == 0);

    CmdResult rel =
        cli(dir, "eval --checkpoint em/checkpoint.bin --benchmark relatedness --data world/relatedness_pairs.tsv "
                 "--out e_rel");
    REQUIRE(rel.code == 0);
    nlohmann::json rep = read_json_file(dir + "/e_rel/report.json");
    REQUIRE(rep.at("schema_version") == 1);
    REQUIRE(rep.at("report").at("per_layer").size() == 3);  // embeddings + two blocks
    int best = rep.at("report").at("best_layer").get<int>();
    REQUIRE(best >= 0);
    REQUIRE(best <= 2);
    REQUIRE(fs::exists(dir + "/e_rel/plot.csv"));
    REQUIRE(fs::exists(dir + "/e_rel/manifest.json"));

    CmdResult ppl =
        cli(dir, "eval --checkpoint em/checkpoint.bin --benchmark perplexity --data world/text_test.txt --out e_ppl");
    REQUIRE(ppl.code == 0);
    double val = std::stod(ppl.output);  // a single positive real on stdout
    REQUIRE(val > 0.0);
    REQUIRE(std::isfinite(val));

    CmdResult bad = cli(dir, "eval --checkpoint em/checkpoint.bin --benchmark nonsense --data x --out e_bad");
    REQUIRE(bad.code == 2);
    REQUIRE(bad.output.find("relatedness") != std::string::npos);

    REQUIRE(cli(dir, "tokenizer train --corpus world/corpus.txt --vocab-size 320 --out tok320.json").code == 0);
    CmdResult mismatch =
        cli(dir, "eval --checkpoint em/checkpoint.bin --benchmark relatedness --data world/relatedness_pairs.tsv "
                 "--out e_mm --tokenizer tok320.json");
    REQUIRE(mismatch.code == 2);
    REQUIRE(mismatch.output.find("320") != std::string::npos);
    REQUIRE(mismatch.output.find("300") != std::string::npos);

    CmdResult twice =
        cli(dir, "eval --checkpoint em/checkpoint.bin --benchmark relatedness --data world/relatedness_pairs.tsv "
                 "--out e_rel2");
    REQUIRE(twice.code == 0);
    REQUIRE(slurp(dir + "/e_rel/report.json") == slurp(dir + "/e_rel2/report.json"));
}

TEST_CASE("analyze of a model against itself yields an all-zero difference table") {
    std::string dir = fixture_dir();
    write_file(dir + "/an.toml", std::string("seed = 8\n") + kRunTomlBody);
    REQUIRE(cli(dir, "train --config an.toml --out-dir am").code == 0);
    CmdResult an = cli(dir, "analyze --a am/checkpoint.bin --b am/checkpoint.bin --text world/text_test.txt "
                            "--concreteness world/concreteness.tsv --out aself");
    REQUIRE(an.code == 0);
    std::istringstream rows(slurp(dir + "/aself/differences.csv"));
    std::string line;
    std::getline(rows, line);  // header
    int n = 0;
    while (std::getline(rows, line)) {
        size_t a = line.find(','), b = line.find(',', a + 1), c = line.find(',', b + 1);
        REQUIRE(std::stod(line.substr(b + 1, c - b - 1)) == 0.0);
        ++n;
    }
    REQUIRE(n > 0);
    nlohmann::json j = read_json_file(dir + "/aself/analysis.json");
    for (const auto& q : j.at("quintiles")) REQUIRE(q.at("mean").get<double>() == 0.0);
}

TEST_CASE("diverging training exits with code 3 and step diagnostics") {
    std::string dir = fixture_dir();
    write_file(dir + "/boom.toml",
               std::string("seed = 3\n") + kRunTomlBody + "\n# overrides follow\n");
    // rewrite with an absurd learning rate: weight decay then amplifies the
    // parameters geometrically until the forward pass overflows
    std::string body = slurp(dir + "/boom.toml");
    size_t pos = body.find("peak_lr = 1e-3");
    REQUIRE(pos != std::string::npos);
    body.replace(pos, std::strlen("peak_lr = 1e-3"), "peak_lr = 1e12");
    write_file(dir + "/boom.toml", body);
    CmdResult boom = cli(dir, "train --config boom.toml --out-dir tboom");
    REQUIRE(boom.code == 3);
    REQUIRE(boom.output.find("step") != std::string::npos);
}

TEST_CASE("sweep validates LCG_THREADS and emits the selection table") {
    std::string dir = fixture_dir();
    write_file(dir + "/sw.toml", std::string("seed = 3\n") + kRunTomlBody +
                                     "\n[data-extra]\n");  // placeholder replaced below
    std::string body = slurp(dir + "/sw.toml");
    body.replace(body.find("\n[data-extra]\n"), std::strlen("\n[data-extra]\n"),
                 "text_train = \"world/text_train.txt\"\ntext_val = \"world/text_val.txt\"\n");
    write_file(dir + "/sw.toml", body);

    CmdResult bad_env = cli(dir, "sweep --config sw.toml --out-dir sbad", "LCG_THREADS=abc");
    REQUIRE(bad_env.code == 2);
    REQUIRE(bad_env.output.find("LCG_THREADS") != std::string::npos);

    CmdResult sw = cli(dir, "sweep --config sw.toml --out-dir s1 --lambda-u-grid 0.5,2.0 --seeds 1,2",
                       "LCG_THREADS=2");
    REQUIRE(sw.code == 0);
    std::istringstream csv(slurp(dir + "/s1/sweep.csv"));
    std::string line;
    std::getline(csv, line);
    REQUIRE(line == "lambda_u,seed,val_perplexity");
    int rows = 0;
    while (std::getline(csv, line)) ++rows;
    REQUIRE(rows == 4);
    nlohmann::json sel = read_json_file(dir + "/s1/selection.json");
    double chosen = sel.at("selected_lambda_u").get<double>();
    REQUIRE((chosen == 0.5 || chosen == 2.0));
    REQUIRE(sel.at("means").size() == 2);
}
