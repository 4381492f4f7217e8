#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <unistd.h>

#include "lcg/data.hpp"

using namespace lcg;

namespace {

std::string temp_dir() {
    static int counter = 0;
    auto dir = std::filesystem::temp_directory_path() / ("lcg_data_test_" + std::to_string(::getpid()) + "_" +
                                                         std::to_string(counter++));
    std::filesystem::create_directories(dir);
    return dir.string();
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    f << content;
}

}  // namespace

TEST_CASE("untrained tokenizer maps bytes to id 4 + byte") {
    Tokenizer tok = Tokenizer::train("xyz", 260);
    REQUIRE(tok.merge_count() == 0);
    auto ids = tok.encode("ab");
    REQUIRE(ids == std::vector<int>{4 + 'a', 4 + 'b'});
    REQUIRE(tok.decode(ids) == "ab");
}

TEST_CASE("most frequent pair is merged first") {
    Tokenizer tok = Tokenizer::train("aa aa aa b", 261);
    REQUIRE(tok.merge_count() == 1);
    auto ids = tok.encode("aa");
    REQUIRE(ids == std::vector<int>{260});
    REQUIRE(tok.decode(ids) == "aa");
}

TEST_CASE("equal-count merge candidates break ties toward the smaller byte string") {
    // "ba" and "ca" both occur twice; the merged string "ba" sorts first.
    Tokenizer tok = Tokenizer::train("ba ca ba ca", 261);
    REQUIRE(tok.merge_count() == 1);
    REQUIRE(tok.encode("ba") == std::vector<int>{260});
    REQUIRE(tok.encode("ca") == std::vector<int>({4 + 'c', 4 + 'a'}));
}

TEST_CASE("merges never cross whitespace run boundaries") {
    Tokenizer tok = Tokenizer::train("a b a b a b a b", 300);
    REQUIRE(tok.merge_count() == 0);  // every piece is a single byte
    auto ids = tok.encode("a b");
    REQUIRE(ids == std::vector<int>({4 + 'a', 4 + ' ', 4 + 'b'}));
}

TEST_CASE("a pair must repeat to become a merge") {
    Tokenizer tok = Tokenizer::train("abcdef", 300);
    REQUIRE(tok.merge_count() == 0);
}

TEST_CASE("encode and decode round-trip arbitrary text") {
    std::string corpus = "the cat sat on the mat. the cat ran.\nthe dog sat on the log!";
    Tokenizer tok = Tokenizer::train(corpus, 280);
    REQUIRE(tok.merge_count() > 0);
    for (const std::string& s :
         {corpus, std::string("unseen words survive"), std::string("  spaces\t\ttabs\nnewlines  "),
          std::string("punct,;:!?")}) {
        REQUIRE(tok.decode(tok.encode(s)) == s);
    }
}

TEST_CASE("specials decode to nothing") {
    Tokenizer tok = Tokenizer::train("x", 260);
    std::vector<int> ids = {kBosId, 4 + 'h', 4 + 'i', kEosId, kPadId};
    REQUIRE(tok.decode(ids) == "hi");
}

TEST_CASE("tokenizer rejects vocab below specials plus bytes") {
    REQUIRE_THROWS_AS(Tokenizer::train("abc", 259), UsageError);
}

TEST_CASE("tokenizer save and load preserve behaviour") {
    std::string dir = temp_dir();
    std::string corpus = "stop the loop, stop the loop, stop";
    Tokenizer tok = Tokenizer::train(corpus, 275);
    tok.save(dir + "/tok.json");
    Tokenizer back = Tokenizer::load(dir + "/tok.json");
    REQUIRE(back.vocab_size() == tok.vocab_size());
    REQUIRE(back.merge_count() == tok.merge_count());
    REQUIRE(back.encode(corpus) == tok.encode(corpus));
    REQUIRE(back.encode("unrelated text") == tok.encode("unrelated text"));
}

TEST_CASE("tokenizer load rejects malformed files") {
    std::string dir = temp_dir();
    write_file(dir + "/bad.json", "not json at all");
    REQUIRE_THROWS_AS(Tokenizer::load(dir + "/bad.json"), DataError);
    write_file(dir + "/ver.json", R"({"version": 9, "vocab_size": 300, "merges": []})");
    REQUIRE_THROWS_AS(Tokenizer::load(dir + "/ver.json"), DataError);
    write_file(dir + "/fwd.json", R"({"version": 1, "vocab_size": 300, "merges": [[261, 5]]})");
    REQUIRE_THROWS_AS(Tokenizer::load(dir + "/fwd.json"), DataError);  // merge refers past itself
    write_file(dir + "/many.json", R"({"version": 1, "vocab_size": 260, "merges": [[5, 6]]})");
    REQUIRE_THROWS_AS(Tokenizer::load(dir + "/many.json"), DataError);  // more merges than vocab admits
    REQUIRE_THROWS_AS(Tokenizer::load(dir + "/absent.json"), DataError);
}

TEST_CASE("feature files round-trip exactly at f32 precision") {
    std::string dir = temp_dir();
    Tensor t = Tensor::from({3, 2}, {0.5, -2.25, 1.0, 0.0, -0.125, 4096.0});
    write_features(dir + "/f.lcgf", t);
    Tensor back = read_features(dir + "/f.lcgf");
    REQUIRE(back.rows() == 3);
    REQUIRE(back.cols() == 2);
    for (size_t i = 0; i < t.values().size(); ++i) REQUIRE(back.values()[i] == t.values()[i]);
}

TEST_CASE("feature reader rejects corrupted files") {
    std::string dir = temp_dir();
    Tensor t = Tensor::from({2, 2}, {1, 2, 3, 4});
    write_features(dir + "/good.lcgf", t);

    std::ifstream in(dir + "/good.lcgf", std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();

    std::string wrong_magic = bytes;
    wrong_magic[0] = 'X';
    write_file(dir + "/magic.lcgf", wrong_magic);
    REQUIRE_THROWS_AS(read_features(dir + "/magic.lcgf"), DataError);

    write_file(dir + "/trunc.lcgf", bytes.substr(0, bytes.size() - 5));
    REQUIRE_THROWS_AS(read_features(dir + "/trunc.lcgf"), DataError);

    std::string nan_bytes = bytes;
    uint32_t nan_bits = 0x7fc00000u;
    std::memcpy(nan_bytes.data() + 16, &nan_bits, 4);
    write_file(dir + "/nan.lcgf", nan_bytes);
    REQUIRE_THROWS_AS(read_features(dir + "/nan.lcgf"), DataError);

    REQUIRE_THROWS_AS(read_features(dir + "/absent.lcgf"), DataError);
}

TEST_CASE("grounded dataset pairs captions with features and brackets tokens") {
    std::string dir = temp_dir();
    Tensor feats = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    write_features(dir + "/img.lcgf", feats);
    write_file(dir + "/cap.jsonl",
               "{\"caption\": \"ab\", \"feature_row\": 1}\n"
               "\n"
               "{\"caption\": \"c\", \"feature_row\": 0}\n");
    Tokenizer tok = Tokenizer::train("x", 260);
    GroundedDataset ds = GroundedDataset::load(dir + "/cap.jsonl", dir + "/img.lcgf", tok, 16);
    REQUIRE(ds.examples.size() == 2);
    REQUIRE(ds.feat_dim() == 3);
    REQUIRE(ds.examples[0].tokens == std::vector<int>({kBosId, 4 + 'a', 4 + 'b', kEosId}));
    REQUIRE(ds.examples[0].feature_row == 1);
    REQUIRE(ds.examples[1].tokens == std::vector<int>({kBosId, 4 + 'c', kEosId}));
    REQUIRE(ds.total_tokens() == 7);
}

TEST_CASE("grounded dataset errors carry line numbers") {
    std::string dir = temp_dir();
    Tensor feats = Tensor::from({1, 2}, {1, 2});
    write_features(dir + "/img.lcgf", feats);
    Tokenizer tok = Tokenizer::train("x", 260);
    auto expect_line = [&](const std::string& body, const std::string& needle) {
        write_file(dir + "/cap.jsonl", body);
        try {
            GroundedDataset::load(dir + "/cap.jsonl", dir + "/img.lcgf", tok, 16);
            FAIL("expected a DataError");
        } catch (const DataError& e) {
            REQUIRE(std::string(e.what()).find(needle) != std::string::npos);
        }
    };
    expect_line("{\"caption\": \"a\", \"feature_row\": 0}\nnot json\n", "line 2");
    expect_line("{\"caption\": \"\", \"feature_row\": 0}\n", "line 1");
    expect_line("{\"feature_row\": 0}\n", "caption");
    expect_line("{\"caption\": \"a\"}\n", "feature_row");
    expect_line("{\"caption\": \"a\", \"feature_row\": 3}\n", "outside");
    expect_line("{\"caption\": \"a\", \"feature_row\": -1}\n", "outside");
    expect_line("{\"caption\": \"abcdefghijklmnopqr\", \"feature_row\": 0}\n", "max_seq_len");
    write_file(dir + "/cap.jsonl", "\n\n");
    REQUIRE_THROWS_AS(GroundedDataset::load(dir + "/cap.jsonl", dir + "/img.lcgf", tok, 16), DataError);
}

TEST_CASE("text dataset cuts fixed windows and drops the tail") {
    std::string dir = temp_dir();
    write_file(dir + "/t.txt", "abcdefghijk");  // 11 single-byte tokens
    Tokenizer tok = Tokenizer::train("x", 260);
    TextDataset ds = TextDataset::load(dir + "/t.txt", tok, 4);
    REQUIRE(ds.n_windows() == 2);
    auto w0 = ds.window_at(0);
    REQUIRE(std::vector<int>(w0.begin(), w0.end()) ==
            std::vector<int>({4 + 'a', 4 + 'b', 4 + 'c', 4 + 'd'}));
    auto w1 = ds.window_at(1);
    REQUIRE(w1[0] == 4 + 'e');
    REQUIRE_THROWS_AS(ds.window_at(2), IndexError);
    REQUIRE_THROWS_AS(ds.window_at(-1), IndexError);

    write_file(dir + "/short.txt", "ab");
    REQUIRE_THROWS_AS(TextDataset::load(dir + "/short.txt", tok, 4), DataError);
}

namespace {

GroundedDataset tiny_grounded(const std::string& dir, int n) {
    Tensor feats = Tensor::zeros({n, 2});
    for (int i = 0; i < n; ++i) {
        feats.values()[static_cast<size_t>(i) * 2] = i;
        feats.values()[static_cast<size_t>(i) * 2 + 1] = -i;
    }
    write_features(dir + "/img.lcgf", feats);
    std::string caps;
    for (int i = 0; i < n; ++i) {
        caps += "{\"caption\": \"" + std::string(1, static_cast<char>('a' + i)) + "\", \"feature_row\": " +
                std::to_string(i) + "}\n";
    }
    write_file(dir + "/cap.jsonl", caps);
    Tokenizer tok = Tokenizer::train("x", 260);
    return GroundedDataset::load(dir + "/cap.jsonl", dir + "/img.lcgf", tok, 8);
}

}  // namespace

TEST_CASE("grounded batcher visits a shuffled epoch and drops the partial tail") {
    std::string dir = temp_dir();
    GroundedDataset ds = tiny_grounded(dir, 5);
    GroundedBatcher batcher(ds, 2, 7);
    REQUIRE(batcher.batches_per_epoch() == 2);
    // Across one epoch no example repeats; features travel with their caption.
    std::set<int> seen;
    for (int b = 0; b < 2; ++b) {
        GroundedBatch batch = batcher.next();
        REQUIRE(batch.tokens.lay.n_seq == 2);
        for (int i = 0; i < 2; ++i) {
            int first_content = batch.tokens.ids[static_cast<size_t>(i * batch.tokens.lay.seq_len) + 1];
            int ex = first_content - 4 - 'a';
            REQUIRE(ex >= 0);
            REQUIRE(ex < 5);
            REQUIRE(seen.insert(ex).second);
            REQUIRE(batch.image_features.values()[static_cast<size_t>(i) * 2] == Catch::Approx(ex));
        }
    }
    REQUIRE(seen.size() == 4);  // one of five dropped per epoch
}

TEST_CASE("grounded batcher is deterministic in its seed") {
    std::string dir_a = temp_dir(), dir_b = temp_dir();
    GroundedDataset a = tiny_grounded(dir_a, 6), b = tiny_grounded(dir_b, 6);
    GroundedBatcher ba(a, 2, 11), bb(b, 2, 11);
    for (int i = 0; i < 9; ++i) {
        GroundedBatch x = ba.next(), y = bb.next();
        REQUIRE(x.tokens.ids == y.tokens.ids);
        REQUIRE(x.image_features.values() == y.image_features.values());
    }
    // a different seed shuffles differently (checked on the first batch)
    GroundedBatcher b11(a, 2, 11), b12(a, 2, 12);
    REQUIRE(b11.next().tokens.ids != b12.next().tokens.ids);
}

TEST_CASE("grounded batcher concatenates voken labels in batch order") {
    std::string dir = temp_dir();
    GroundedDataset ds = tiny_grounded(dir, 4);
    std::vector<std::vector<int>> vokens;
    for (size_t e = 0; e < ds.examples.size(); ++e) {
        std::vector<int> v(ds.examples[e].tokens.size(), static_cast<int>(e) * 10);
        vokens.push_back(v);
    }
    GroundedBatcher batcher(ds, 2, 3);
    batcher.set_vokens(&vokens);
    GroundedBatch batch = batcher.next();
    REQUIRE(batch.vokens.size() == 6);  // two captions of three tokens each
    int first_ex = batch.tokens.ids[1] - 4 - 'a';
    REQUIRE(batch.vokens[0] == first_ex * 10);
    REQUIRE(batch.vokens[3] == (batch.tokens.ids[static_cast<size_t>(batch.tokens.lay.seq_len) + 1] - 4 - 'a') * 10);
}

TEST_CASE("batchers reject batches larger than the data") {
    std::string dir = temp_dir();
    GroundedDataset ds = tiny_grounded(dir, 3);
    REQUIRE_THROWS_AS(GroundedBatcher(ds, 4, 1), DataError);
    REQUIRE_THROWS_AS(GroundedBatcher(ds, 0, 1), UsageError);

    write_file(dir + "/t.txt", "abcdefgh");
    Tokenizer tok = Tokenizer::train("x", 260);
    TextDataset text = TextDataset::load(dir + "/t.txt", tok, 4);
    REQUIRE_THROWS_AS(TextBatcher(text, 3, 1), DataError);
}

TEST_CASE("text batcher cycles deterministically over windows") {
    std::string dir = temp_dir();
    write_file(dir + "/t.txt", "aaaabbbbccccdddd");
    Tokenizer tok = Tokenizer::train("x", 260);
    TextDataset text = TextDataset::load(dir + "/t.txt", tok, 4);
    REQUIRE(text.n_windows() == 4);
    TextBatcher ta(text, 2, 5), tb(text, 2, 5);
    std::set<int> seen;
    for (int i = 0; i < 2; ++i) {
        TokenBatch x = ta.next(), y = tb.next();
        REQUIRE(x.ids == y.ids);
        for (int s = 0; s < 2; ++s) seen.insert(x.ids[static_cast<size_t>(s) * 4]);
    }
    REQUIRE(seen == std::set<int>({4 + 'a', 4 + 'b', 4 + 'c', 4 + 'd'}));
}
