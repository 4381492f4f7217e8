#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "lcg/objectives.hpp"

using namespace lcg;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.d_ffn = 16;
    cfg.vocab_size = 12;
    cfg.max_seq_len = 10;
    cfg.narrow_window = 2;
    cfg.grounding_layer = 1;
    return cfg;
}

Tensor random_tensor(std::vector<int64_t> shape, Rng& rng, double scl = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    std::normal_distribution<double> dist(0.0, scl);
    for (double& v : t.values()) v = dist(rng);
    return t;
}

GroundedBatch make_batch(Rng& rng, int n, int feat_dim, int content_min = 2, int content_max = 4) {
    std::vector<std::vector<int>> seqs;
    std::uniform_int_distribution<int> len(content_min, content_max), tok(4, 11);
    for (int c = 0; c < n; ++c) {
        std::vector<int> s{kBosId};
        int m = len(rng);
        for (int j = 0; j < m; ++j) s.push_back(tok(rng));
        s.push_back(kEosId);
        seqs.push_back(std::move(s));
    }
    GroundedBatch b;
    b.tokens = TokenBatch::from_sequences(seqs, kPadId);
    b.image_features = random_tensor({n, feat_dim}, rng);
    return b;
}

}  // namespace

TEST_CASE("matching scores reduce to a dot product under identity projections") {
    const int d = 4;
    GroundingHead head;
    std::vector<double> eye(d * d, 0.0);
    for (int i = 0; i < d; ++i) eye[static_cast<size_t>(i * d + i)] = 1.0;
    head.adapter = Tensor::from({d, d}, eye);
    head.m_v = Tensor::from({d, d}, eye);
    head.m_l = Tensor::from({d, d}, eye);
    head.log_inv_tau = Tensor::scalar(0.0);  // tau = 1

    Tensor img = Tensor::from({1, d}, {1, 0, 0, 0});
    Tensor rep = Tensor::from({2, d}, {1, 0, 0, 0, 0, 1, 0, 0});
    Tape tape;
    Tensor s = head.matching_scores(tape, img, rep);
    CHECK(s.at(0, 0) == 1.0);
    CHECK(s.at(0, 1) == 0.0);
}

TEST_CASE("matching scores agree with an explicit triple loop") {
    Rng rng(101);
    const int D = 5, d = 6, n = 3, T = 7;
    GroundingHead head = GroundingHead::build(D, d, 11);
    Tensor img = random_tensor({n, D}, rng);
    Tensor rep = random_tensor({T, d}, rng);
    Tape tape;
    Tensor s = head.matching_scores(tape, img, rep);
    double inv_tau = std::min(std::exp(head.log_inv_tau.item()), 100.0);
    for (int i = 0; i < n; ++i) {
        // f_i = M_V (A^T g_i): adapter first, then the square projection
        std::vector<double> fi(static_cast<size_t>(d), 0.0);
        for (int a = 0; a < d; ++a) {
            double adapted = 0.0;
            for (int e = 0; e < D; ++e) adapted += img.at(i, e) * head.adapter.at(e, a);
            fi[static_cast<size_t>(a)] = adapted;
        }
        for (int t = 0; t < T; ++t) {
            double dot = 0.0;
            for (int a = 0; a < d; ++a) {
                double pv = 0.0, pl = 0.0;
                for (int e = 0; e < d; ++e) {
                    pv += head.m_v.at(a, e) * fi[static_cast<size_t>(e)];
                    pl += head.m_l.at(a, e) * rep.at(t, e);
                }
                dot += pv * pl;
            }
            REQUIRE_THAT(s.at(i, t), Catch::Matchers::WithinAbs(dot * inv_tau, 1e-10));
        }
    }
}

TEST_CASE("matching scores are invariant to the projection/temperature rescaling") {
    Rng rng(103);
    const int D = 4, d = 5;
    GroundingHead head = GroundingHead::build(D, d, 13);
    Tensor img = random_tensor({3, D}, rng);
    Tensor rep = random_tensor({6, d}, rng);
    Tape t1;
    Tensor s1 = t1.softmax(head.matching_scores(t1, img, rep));

    const double c = 2.0;  // tau * c^2 keeps 1/tau below the clamp
    for (double& v : head.m_v.values()) v *= c;
    for (double& v : head.m_l.values()) v *= c;
    head.log_inv_tau.values()[0] -= 2.0 * std::log(c);
    Tape t2;
    Tensor s2 = t2.softmax(head.matching_scores(t2, img, rep));
    for (size_t i = 0; i < s1.values().size(); ++i) {
        REQUIRE_THAT(s1.values()[i], Catch::Matchers::WithinAbs(s2.values()[i], 1e-9));
    }
}

TEST_CASE("temperature is clamped from below") {
    GroundingHead head = GroundingHead::build(3, 3, 1);
    head.log_inv_tau = Tensor::scalar(std::log(1000.0));  // tau would be 0.001
    Tape tape;
    CHECK(head.inv_tau(tape).item() == 100.0);
    head.log_inv_tau = Tensor::scalar(std::log(50.0));
    Tape t2;
    CHECK_THAT(head.inv_tau(t2).item(), Catch::Matchers::WithinAbs(50.0, 1e-12));
}

TEST_CASE("grounded loss combines the components with lambda_c") {
    Rng rng(107);
    auto cfg = tiny_config();
    auto model = TransformerLM::build(cfg, 3);
    auto head = GroundingHead::build(5, cfg.d_model, 7);
    GroundedBatch batch = make_batch(rng, 3, 5);
    Tape tape;
    auto lb = lcg_grounded_loss(tape, model, head, batch, 0.3);
    CHECK_THAT(lb.total.item(), Catch::Matchers::WithinAbs(0.3 * lb.contrastive.item() + lb.language.item(), 1e-14));
    CHECK(lb.language.item() > 0.0);
    CHECK(std::isfinite(lb.contrastive.item()));
}

TEST_CASE("single-caption batches contribute no contrastive signal") {
    Rng rng(109);
    auto cfg = tiny_config();
    auto model = TransformerLM::build(cfg, 5);
    auto head = GroundingHead::build(4, cfg.d_model, 9);
    GroundedBatch batch = make_batch(rng, 1, 4);
    Tape tape;
    auto lb = lcg_grounded_loss(tape, model, head, batch, 0.3);
    CHECK(lb.contrastive.item() == 0.0);
    CHECK(lb.total.item() == lb.language.item());
}

TEST_CASE("full grounded objective passes the gradient check") {
    Rng rng(113);
    auto cfg = tiny_config();
    auto model = TransformerLM::build(cfg, 17);
    auto head = GroundingHead::build(5, cfg.d_model, 19);
    GroundedBatch batch = make_batch(rng, 3, 5);
    auto f = [&](Tape& t) { return lcg_grounded_loss(t, model, head, batch, 0.3).total; };
    std::vector<Tensor> leaves{head.adapter, head.m_v, head.m_l, head.log_inv_tau};
    for (auto& [_, p] : model.params().items) leaves.push_back(p);
    CHECK(grad_check(f, leaves) < 1e-4);
}

TEST_CASE("mixed loss adds the weighted ungrounded term") {
    Rng rng(127);
    auto cfg = tiny_config();
    auto model = TransformerLM::build(cfg, 21);
    auto head = GroundingHead::build(5, cfg.d_model, 23);
    GroundedBatch gb = make_batch(rng, 2, 5);
    TokenBatch text = TokenBatch::from_sequences({{1, 7, 9, 4, 6, 2}}, kPadId);
    Tape tape;
    auto lb = lcg_grounded_loss(tape, model, head, gb, 0.3);
    ForwardResult fwd = model.forward(tape, text);
    Tensor lu = next_token_loss(tape, fwd.logits, text);
    Tensor lm = mixed_loss(tape, lb.total, lu, 2.0);
    CHECK_THAT(lm.item(), Catch::Matchers::WithinAbs(lb.total.item() + 2.0 * lu.item(), 1e-14));
}

TEST_CASE("sentence-level contrast collapses to ln(n) when all scores agree") {
    Rng rng(131);
    auto cfg = tiny_config();
    auto model = TransformerLM::build(cfg, 25);
    auto head = GroundingHead::build(5, cfg.d_model, 27);
    for (double& v : head.adapter.values()) v = 0.0;  // all image projections identical
    GroundedBatch batch = make_batch(rng, 4, 5);
    Tape tape;
    auto lb = clip_grounded_loss(tape, model, head, batch);
    CHECK_THAT(lb.total.item(), Catch::Matchers::WithinAbs(std::log(4.0), 1e-10));
}

TEST_CASE("sentence-level contrast gradient check") {
    Rng rng(137);
    auto cfg = tiny_config();
    cfg.n_layers = 1;
    auto model = TransformerLM::build(cfg, 29);
    auto head = GroundingHead::build(4, cfg.d_model, 31);
    GroundedBatch batch = make_batch(rng, 3, 4);
    auto f = [&](Tape& t) { return clip_grounded_loss(t, model, head, batch).total; };
    std::vector<Tensor> leaves{head.adapter, head.m_v, head.m_l, head.log_inv_tau, model.embedding()};
    CHECK(grad_check(f, leaves) < 1e-4);
}

TEST_CASE("visual prefix shifts rows and scores every caption token once") {
    Rng rng(139);
    auto cfg = tiny_config();
    auto model = TransformerLM::build(cfg, 33);
    auto head = GroundingHead::build(5, cfg.d_model, 35);
    GroundedBatch batch = make_batch(rng, 3, 5);
    Tape tape;
    auto lb = git_grounded_loss(tape, model, head, batch);
    CHECK(lb.total.item() > 0.0);
    // an image change must reach the prediction of the very first token
    GroundedBatch batch2 = batch;
    batch2.image_features = random_tensor({3, 5}, rng);
    Tape t2;
    auto lb2 = git_grounded_loss(t2, model, head, batch2);
    CHECK(lb.total.item() != lb2.total.item());
}

TEST_CASE("visual prefix objective gradient check") {
    Rng rng(149);
    auto cfg = tiny_config();
    cfg.n_layers = 1;
    auto model = TransformerLM::build(cfg, 37);
    auto head = GroundingHead::build(4, cfg.d_model, 39);
    GroundedBatch batch = make_batch(rng, 2, 4);
    auto f = [&](Tape& t) { return git_grounded_loss(t, model, head, batch).total; };
    std::vector<Tensor> leaves{head.adapter, model.embedding()};
    for (auto& [name, p] : model.params().items) {
        if (name == "pos" || name == "layer0.attn.wq") leaves.push_back(p);
    }
    CHECK(grad_check(f, leaves) < 1e-4);
}

TEST_CASE("zero gates make gated cross-attention an exact no-op") {
    Rng rng(151);
    auto cfg = tiny_config();
    auto model = TransformerLM::build(cfg, 41);
    auto flam = FlamingoModule::build(5, cfg, 4, 2, 43);
    GroundedBatch batch = make_batch(rng, 3, 5);

    Tape t1, t2;
    Tensor lat = flam.resample(t1, batch.image_features);
    auto with_hook = model.forward(t1, batch.tokens, flam.make_hook(lat));
    auto without = model.forward(t2, batch.tokens);
    REQUIRE(with_hook.logits.values().size() == without.logits.values().size());
    for (size_t i = 0; i < without.logits.values().size(); ++i) {
        REQUIRE(with_hook.logits.values()[i] == without.logits.values()[i]);
    }

    // opening the gates must change the logits
    flam.gated[0].gate_attn.values()[0] = 0.5;
    Tape t3;
    Tensor lat3 = flam.resample(t3, batch.image_features);
    auto opened = model.forward(t3, batch.tokens, flam.make_hook(lat3));
    CHECK(opened.logits.values() != without.logits.values());
}

TEST_CASE("gated cross-attention learns: gates receive gradient") {
    Rng rng(157);
    auto cfg = tiny_config();
    cfg.n_layers = 2;
    auto model = TransformerLM::build(cfg, 47);
    auto flam = FlamingoModule::build(5, cfg, 4, 2, 49);
    GroundedBatch batch = make_batch(rng, 2, 5);
    for (auto& g : flam.gated) {
        g.gate_attn.set_requires_grad();
        g.gate_ffn.set_requires_grad();
    }
    Tape tape;
    auto lb = flamingo_grounded_loss(tape, model, flam, batch);
    tape.backward(lb.total);
    bool any = false;
    for (auto& g : flam.gated) any = any || (g.gate_attn.has_grad() && g.gate_attn.grad()[0] != 0.0);
    CHECK(any);
}

TEST_CASE("gated cross-attention gradient check with open gates") {
    Rng rng(163);
    auto cfg = tiny_config();
    cfg.n_layers = 1;
    auto model = TransformerLM::build(cfg, 53);
    auto flam = FlamingoModule::build(4, cfg, 3, 1, 57);
    for (auto& g : flam.gated) {
        g.gate_attn.values()[0] = 0.3;
        g.gate_ffn.values()[0] = -0.2;
    }
    GroundedBatch batch = make_batch(rng, 2, 4);
    auto f = [&](Tape& t) { return flamingo_grounded_loss(t, model, flam, batch).total; };
    std::vector<Tensor> leaves{flam.adapter, flam.latents, flam.gated[0].wq, flam.gated[0].gate_attn,
                               flam.gated[0].gate_ffn};
    leaves.push_back(flam.resampler[0].wk);
    leaves.push_back(model.embedding());
    CHECK(grad_check(f, leaves) < 1e-4);
}

TEST_CASE("voken assignment takes the argmax and resolves ties to the lowest index") {
    Rng rng(167);
    auto cfg = tiny_config();
    auto model = TransformerLM::build(cfg, 59);
    auto matcher = GroundingHead::build(4, cfg.d_model, 61);
    TokenBatch tokens = TokenBatch::from_sequences({{kBosId, 5, 7, kEosId}, {kBosId, 9, kEosId}}, kPadId);

    // identical bank rows -> every column ties -> index 0 everywhere
    Tensor bank = Tensor::zeros({3, 4});
    for (int k = 0; k < 3; ++k) {
        for (int e = 0; e < 4; ++e) bank.values()[static_cast<size_t>(k * 4 + e)] = 1.0;
    }
    auto ids = voken_assign(model, matcher, tokens, bank, 1);
    REQUIRE(ids.size() == 3);  // content tokens: 5, 7, 9
    for (int id : ids) CHECK(id == 0);

    // distinct bank rows -> assignments depend on the reps but stay in range
    Tensor bank2 = random_tensor({6, 4}, rng);
    auto ids2 = voken_assign(model, matcher, tokens, bank2, 1);
    for (int id : ids2) {
        CHECK(id >= 0);
        CHECK(id < 6);
    }
}

TEST_CASE("voken loss combines language and classification terms") {
    Rng rng(173);
    auto cfg = tiny_config();
    auto model = TransformerLM::build(cfg, 63);
    auto head = VokenHead::build(cfg.d_model, 5, 65);
    GroundedBatch batch = make_batch(rng, 2, 4);
    TokenSelection sel = content_tokens(batch.tokens);
    batch.vokens.assign(sel.rows.size(), 2);
    Tape tape;
    auto lb = voken_grounded_loss(tape, model, head, batch, 1.0, 1);
    CHECK_THAT(lb.total.item(), Catch::Matchers::WithinAbs(lb.language.item() + lb.contrastive.item(), 1e-14));

    batch.vokens.pop_back();
    Tape t2;
    CHECK_THROWS_AS(voken_grounded_loss(t2, model, head, batch, 1.0, 1), DataError);
}

TEST_CASE("voken objective gradient check") {
    Rng rng(179);
    auto cfg = tiny_config();
    cfg.n_layers = 1;
    auto model = TransformerLM::build(cfg, 67);
    auto head = VokenHead::build(cfg.d_model, 4, 69);
    GroundedBatch batch = make_batch(rng, 2, 4);
    TokenSelection sel = content_tokens(batch.tokens);
    batch.vokens.assign(sel.rows.size(), 1);
    auto f = [&](Tape& t) { return voken_grounded_loss(t, model, head, batch, 1.0, 1).total; };
    std::vector<Tensor> leaves{head.w, head.b, model.embedding()};
    CHECK(grad_check(f, leaves) < 1e-4);
}

TEST_CASE("objective dispatch builds the right modules") {
    auto cfg = tiny_config();
    ObjectiveConfig oc;
    oc.kind = ObjectiveKind::language_only;
    {
        ParamStore ps;
        Objective::build(oc, cfg, 5, 1).collect_params(ps);
        CHECK(ps.items.empty());
    }
    oc.kind = ObjectiveKind::lcg;
    {
        ParamStore ps;
        Objective::build(oc, cfg, 5, 1).collect_params(ps);
        CHECK(ps.items.size() == 4);
    }
    oc.kind = ObjectiveKind::git;
    {
        ParamStore ps;
        Objective::build(oc, cfg, 5, 1).collect_params(ps);
        CHECK(ps.items.size() == 1);  // adapter only
    }
    oc.kind = ObjectiveKind::vokenization;
    CHECK_THROWS_AS(Objective::build(oc, cfg, 5, 1), UsageError);
    oc.n_vokens = 7;
    {
        ParamStore ps;
        auto o = Objective::build(oc, cfg, 5, 1);
        o.collect_params(ps);
        CHECK(ps.items.size() == 2);
        CHECK(o.voken_tap_layer() == cfg.n_layers);
    }
    oc.kind = ObjectiveKind::lexivoken;
    CHECK(Objective::build(oc, cfg, 5, 1).voken_tap_layer() == cfg.grounding_layer);
    CHECK(parse_objective("flamingo") == ObjectiveKind::flamingo);
    CHECK_THROWS_AS(parse_objective("unknown"), UsageError);
}

TEST_CASE("ungrounded stream ignores every image pathway") {
    Rng rng(181);
    auto cfg = tiny_config();
    auto model = TransformerLM::build(cfg, 71);
    ObjectiveConfig oc;
    oc.kind = ObjectiveKind::flamingo;
    auto obj = Objective::build(oc, cfg, 5, 73);
    ParamStore extra;
    obj.collect_params(extra);
    extra.set_requires_grad(true);
    TokenBatch text = TokenBatch::from_sequences({{1, 4, 9, 7, 2}}, kPadId);
    Tape tape;
    Tensor lu = obj.ungrounded(tape, model, text);
    tape.backward(lu);
    for (auto& [name, p] : extra.items) {
        CHECK_FALSE(p.has_grad());  // no gradient path at all
    }
    CHECK(lu.item() > 0.0);
}
