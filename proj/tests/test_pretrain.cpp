#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "desklm/masking.hpp"
#include "desklm/packing.hpp"
#include "desklm/pretrain.hpp"
#include "desklm/schedule.hpp"
#include "helpers.hpp"

using namespace desklm;
using namespace desklm::nn;
namespace fs = std::filesystem;

namespace {

TrainSchedule reference_schedule() {
    TrainSchedule s;
    s.total_updates = 100000;
    s.warmup_updates = 10000;
    s.peak_lr = 0.0004;
    s.end_lr = 0.0;
    s.power = 1.0;
    return s;
}

VocabInfo tiny_info(int vocab) {
    VocabInfo info;
    info.vocab_size = vocab;
    info.mask_id = vocab - 1;
    return info;
}

Batch random_batch(const VocabInfo& info, int n_seq, int seq_len, uint64_t seed) {
    Batch b;
    b.n_seq = n_seq;
    b.seq_len = seq_len;
    b.ids.resize(static_cast<size_t>(n_seq) * seq_len);
    b.mask.assign(b.ids.size(), 1);
    Rng rng(seed);
    for (auto& id : b.ids) {
        id = 4 + static_cast<int32_t>(rng.bounded(info.vocab_size - 5));
    }
    for (int s = 0; s < n_seq; ++s) {
        b.ids[static_cast<size_t>(s) * seq_len] = 0;  // bos
    }
    return b;
}

}  // namespace

TEST_CASE("learning rate schedule: warmup ramp and polynomial decay") {
    auto s = reference_schedule();
    CHECK(lr_at(s, 0) == 0.0);
    CHECK(lr_at(s, 10000) == doctest::Approx(0.0004).epsilon(1e-12));
    CHECK(lr_at(s, 100000) == 0.0);
    // interior closed form: peak * (total-step)/(total-warmup)
    CHECK(lr_at(s, 55000) == doctest::Approx(0.0004 * 45000.0 / 90000.0).epsilon(1e-12));
    CHECK(lr_at(s, 55000) == doctest::Approx(0.0002).epsilon(1e-12));

    SUBCASE("continuity and maximum at the warmup boundary") {
        double before = lr_at(s, 9999);
        double at = lr_at(s, 10000);
        double after = lr_at(s, 10001);
        CHECK(before < at);
        CHECK(after < at);
        CHECK(at - before < 1e-6);
        CHECK(at - after < 1e-6);
        for (int64_t step : {0ll, 1ll, 9999ll, 10000ll, 12345ll, 99999ll, 100000ll}) {
            CHECK(lr_at(s, step) >= 0.0);
            CHECK(lr_at(s, step) <= lr_at(s, 10000));
        }
    }
    SUBCASE("nonunit power and a floor learning rate") {
        TrainSchedule p = s;
        p.power = 2.0;
        p.end_lr = 1e-5;
        CHECK(lr_at(p, 10000) == doctest::Approx(0.0004));
        CHECK(lr_at(p, 100000) == doctest::Approx(1e-5));
        double mid = 1e-5 + (0.0004 - 1e-5) * std::pow(45000.0 / 90000.0, 2.0);
        CHECK(lr_at(p, 55000) == doctest::Approx(mid).epsilon(1e-12));
    }
    SUBCASE("range and validation errors") {
        CHECK_THROWS_AS(lr_at(s, -1), ConfigError);
        CHECK_THROWS_AS(lr_at(s, 100001), ConfigError);
        TrainSchedule bad = s;
        bad.warmup_updates = bad.total_updates;
        CHECK_THROWS_AS(validate(bad), ConfigError);
        bad = s;
        bad.end_lr = bad.peak_lr;
        CHECK_THROWS_AS(validate(bad), ConfigError);
    }
}

TEST_CASE("dynamic masking: determinism, dynamism, selection rate") {
    auto info = tiny_info(512);
    Batch b = random_batch(info, 8, 128, 3);
    MaskingConfig cfg;

    auto m1 = apply_dynamic_masking(b, info, cfg, 42, 7);
    auto m2 = apply_dynamic_masking(b, info, cfg, 42, 7);
    CHECK(m1.batch.ids == m2.batch.ids);
    CHECK(m1.labels == m2.labels);

    auto m3 = apply_dynamic_masking(b, info, cfg, 42, 8);
    CHECK(m1.batch.ids != m3.batch.ids);

    // selection rate over ~10k maskable positions: binomial interval
    Batch big = random_batch(info, 80, 128, 5);
    auto mb = apply_dynamic_masking(big, info, cfg, 1, 0);
    long maskable = 0;
    for (size_t i = 0; i < big.ids.size(); ++i) {
        if (big.mask[i] && !info.is_special(big.ids[i])) {
            ++maskable;
        }
    }
    double rate = static_cast<double>(mb.n_selected) / static_cast<double>(maskable);
    CHECK(rate > 0.13);
    CHECK(rate < 0.17);

    // corruption split roughly 80/10/10 among selected positions
    long to_mask = 0, random_repl = 0, kept = 0;
    for (size_t i = 0; i < big.ids.size(); ++i) {
        if (mb.labels[i] == kIgnoreLabel) {
            continue;
        }
        if (mb.batch.ids[i] == info.mask_id) {
            ++to_mask;
        } else if (mb.batch.ids[i] != big.ids[i]) {
            ++random_repl;
        } else {
            ++kept;
        }
    }
    double n = static_cast<double>(mb.n_selected);
    CHECK(to_mask / n > 0.72);
    CHECK(to_mask / n < 0.88);
    // random replacement can coincide with the original token, so the
    // observable replacement rate sits slightly below the nominal 10%
    CHECK(random_repl / n > 0.04);
    CHECK(random_repl / n < 0.16);
    CHECK(kept / n > 0.06);

    // labels hold the original ids at selected positions
    for (size_t i = 0; i < big.ids.size(); ++i) {
        if (mb.labels[i] != kIgnoreLabel) {
            CHECK(mb.labels[i] == big.ids[i]);
        }
    }
}

TEST_CASE("masking never touches specials or padding") {
    auto info = tiny_info(64);
    Batch b;
    b.n_seq = 1;
    b.seq_len = 8;
    b.ids = {0, 10, 2, 20, 63, 30, 1, 1};
    b.mask = {1, 1, 1, 1, 1, 1, 0, 0};
    MaskingConfig cfg;
    cfg.mask_prob = 0.999;  // select almost everything eligible
    auto m = apply_dynamic_masking(b, info, cfg, 9, 1);
    CHECK(m.batch.ids[0] == 0);
    CHECK(m.batch.ids[2] == 2);
    CHECK(m.batch.ids[4] == 63);  // mask token itself is special
    CHECK(m.batch.ids[6] == 1);
    CHECK(m.batch.ids[7] == 1);
    CHECK(m.labels[0] == kIgnoreLabel);
    CHECK(m.labels[2] == kIgnoreLabel);
    CHECK(m.labels[6] == kIgnoreLabel);
    CHECK(m.n_selected == 3);  // the three regular tokens

    // a sequence of only specials comes back unmasked with all-ignore labels
    Batch specials;
    specials.n_seq = 1;
    specials.seq_len = 4;
    specials.ids = {0, 2, 1, 1};
    specials.mask = {1, 1, 0, 0};
    auto ms = apply_dynamic_masking(specials, info, cfg, 9, 1);
    CHECK(ms.n_selected == 0);
    CHECK(ms.batch.ids == specials.ids);
    for (auto l : ms.labels) {
        CHECK(l == kIgnoreLabel);
    }

    CHECK_THROWS_AS(apply_dynamic_masking(b, info, MaskingConfig{0.0, 0.8, 0.1}, 1, 1),
                    ConfigError);
}

TEST_CASE("mlm loss identities") {
    SUBCASE("uniform logits give log V and perplexity V") {
        const int V = 321;
        Mat<float> logits = Mat<float>::Zero(5, V);
        std::vector<int32_t> labels = {3, kIgnoreLabel, 17, 200, kIgnoreLabel};
        auto [nll, count] = mlm_loss(logits, labels);
        CHECK(count == 3);
        CHECK(nll == doctest::Approx(std::log(static_cast<double>(V))).epsilon(1e-6));
        CHECK(std::exp(nll) == doctest::Approx(static_cast<double>(V)).epsilon(1e-4));
    }
    SUBCASE("confident correct predictions push the loss to zero") {
        Mat<float> logits = Mat<float>::Zero(2, 50);
        logits(0, 7) = 30.0f;
        logits(1, 9) = 30.0f;
        std::vector<int32_t> labels = {7, 9};
        auto [nll, count] = mlm_loss(logits, labels);
        CHECK(count == 2);
        CHECK(nll < 1e-6);
    }
    SUBCASE("ignored positions contribute exactly nothing") {
        Rng rng(4);
        Mat<float> logits(4, 30);
        for (long r = 0; r < 4; ++r) {
            for (long c = 0; c < 30; ++c) {
                logits(r, c) = static_cast<float>(rng.gaussian());
            }
        }
        std::vector<int32_t> labels = {kIgnoreLabel, 5, kIgnoreLabel, 8};
        auto [nll1, c1] = mlm_loss(logits, labels);
        logits.row(0).setConstant(99.0f);  // ignored row
        auto [nll2, c2] = mlm_loss(logits, labels);
        CHECK(c1 == c2);
        CHECK(nll1 == nll2);
    }
    SUBCASE("zero selected positions signal a skip") {
        Mat<float> logits = Mat<float>::Zero(2, 10);
        std::vector<int32_t> labels = {kIgnoreLabel, kIgnoreLabel};
        auto [nll, count] = mlm_loss(logits, labels);
        CHECK(count == 0);
        CHECK(nll == 0.0);
    }
}

TEST_CASE("packing consumes every stream token exactly once") {
    std::vector<int32_t> stream;
    for (int i = 0; i < 23; ++i) {
        stream.push_back(4 + i % 40);
    }
    auto packed = pack_stream(stream, 6, 0, 1);
    CHECK(packed.n_seq == 5);  // ceil(23 / 5)
    std::vector<int32_t> recovered;
    long bos_count = 0, pad_count = 0;
    for (long s = 0; s < packed.n_seq; ++s) {
        for (int t = 0; t < packed.seq_len; ++t) {
            size_t i = static_cast<size_t>(s) * packed.seq_len + t;
            if (t == 0) {
                CHECK(packed.ids[i] == 0);
                ++bos_count;
                continue;
            }
            if (!packed.mask[i]) {
                CHECK(packed.ids[i] == 1);
                ++pad_count;
                continue;
            }
            recovered.push_back(packed.ids[i]);
        }
    }
    CHECK(recovered == stream);  // order preserved, nothing lost or duplicated
    CHECK(bos_count == packed.n_seq);
    CHECK(pad_count == 5 * 5 - 23);

    CHECK_THROWS_AS(pack_stream({}, 6, 0, 1), DataError);
    CHECK_THROWS_AS(pack_stream(stream, 1, 0, 1), ConfigError);
}

TEST_CASE("tiny pretraining run: logs, checkpoints, bit-exact resume") {
    // build a small grammar corpus and tokenizer
    std::string dir = testutil::fresh_dir("pretrain");
    auto docs = testutil::gen_grammar_documents(1, 15000);
    size_t split = docs.size() - 4;
    std::vector<corpus::Document> train_docs(docs.begin(), docs.begin() + split);
    std::vector<corpus::Document> valid_docs(docs.begin() + split, docs.end());
    auto train_m = corpus::shuffle_and_shard(train_docs, 1, 1 << 20, dir, "train");
    std::string train_path = (fs::path(dir) / "train_manifest.json").string();
    corpus::write_manifest(train_m, train_path);
    auto valid_m = corpus::shuffle_and_shard(valid_docs, 2, 1 << 20, dir, "valid");
    std::string valid_path = (fs::path(dir) / "valid_manifest.json").string();
    corpus::write_manifest(valid_m, valid_path);

    auto vocab = bpe::train_vocab(train_docs, 300);
    std::string tok_dir = (fs::path(dir) / "tok").string();
    bpe::save_vocab(vocab, tok_dir);

    PretrainConfig cfg;
    cfg.model.num_layers = 1;
    cfg.model.hidden_size = 32;
    cfg.model.num_heads = 2;
    cfg.model.ffn_size = 64;
    cfg.model.vocab_size = 300;
    cfg.model.max_positions = 66;
    cfg.model.dropout = 0.0;
    cfg.model.attention_dropout = 0.0;
    cfg.seq_len = 64;
    cfg.micro_batch_seqs = 8;
    cfg.schedule.total_updates = 30;
    cfg.schedule.warmup_updates = 5;
    cfg.schedule.peak_lr = 3e-3;
    cfg.schedule.tokens_per_update = 8 * 64;
    cfg.schedule.seed = 9;
    cfg.tokenizer_dir = tok_dir;

    PretrainOptions opt;
    opt.config = cfg;
    opt.train_manifest = train_path;
    opt.valid_manifest = valid_path;
    opt.out_dir = (fs::path(dir) / "runA").string();
    opt.quiet = true;
    auto res = run_pretrain(opt);

    REQUIRE(res.log.train_points.size() == 30);
    CHECK(res.log.train_points.front().first == 1);
    CHECK(res.log.train_points.back().first == 30);
    for (const auto& [step, ppl] : res.log.train_points) {
        CHECK(std::isfinite(ppl));
        CHECK(ppl > 0.0);
    }
    // untrained-model perplexity starts near vocabulary scale
    double first = res.log.train_points.front().second;
    CHECK(first > 0.5 * 300);
    CHECK(first < 2.0 * 300);
    REQUIRE(!res.log.valid_points.empty());
    CHECK(res.log.valid_points.front().first == 0);

    // CSVs round-trip
    auto reread = read_perplexity_csvs(opt.out_dir);
    REQUIRE(reread.train_points.size() == res.log.train_points.size());
    CHECK(reread.valid_points.size() == res.log.valid_points.size());

    // the epoch-1 checkpoint exists; resume from it and compare the shared
    // tail of the logs
    std::string epoch1 = (fs::path(opt.out_dir) / "ckpt_epoch_0001.bin").string();
    REQUIRE(fs::exists(epoch1));
    Checkpoint ck = load_checkpoint(epoch1);
    int64_t resume_step = static_cast<int64_t>(ck.step);
    REQUIRE(resume_step > 0);
    REQUIRE(resume_step < 30);

    PretrainOptions opt2 = opt;
    opt2.out_dir = (fs::path(dir) / "runB").string();
    opt2.resume_checkpoint = epoch1;
    auto res2 = run_pretrain(opt2);
    REQUIRE(res2.log.train_points.size() ==
            res.log.train_points.size() - static_cast<size_t>(resume_step));
    for (size_t i = 0; i < res2.log.train_points.size(); ++i) {
        const auto& [step_b, ppl_b] = res2.log.train_points[i];
        const auto& [step_a, ppl_a] =
            res.log.train_points[static_cast<size_t>(resume_step) + i];
        CHECK(step_a == step_b);
        CHECK(ppl_a == ppl_b);  // bitwise-equal continuation
    }
    // validation points after the resume step agree too
    std::vector<std::pair<int64_t, double>> tail_a;
    for (const auto& p : res.log.valid_points) {
        if (p.first > ck.step / 100000.0 && p.first >= 1) {
            tail_a.push_back(p);
        }
    }
    for (const auto& pb : res2.log.valid_points) {
        bool found = false;
        for (const auto& pa : res.log.valid_points) {
            if (pa.first == pb.first && pa.second == pb.second) {
                found = true;
                break;
            }
        }
        CHECK(found);
    }

    // final checkpoints of both runs hold bitwise-identical parameters
    Checkpoint fa = load_checkpoint(res.final_checkpoint_path);
    Checkpoint fb = load_checkpoint(res2.final_checkpoint_path);
    bool all_equal = true;
    std::vector<Mat<float>*> pa, pb;
    for_each_tensor(fa.params, [&](const std::string&, Mat<float>& m) { pa.push_back(&m); });
    for_each_tensor(fb.params, [&](const std::string&, Mat<float>& m) { pb.push_back(&m); });
    for (size_t i = 0; i < pa.size(); ++i) {
        if ((*pa[i] - *pb[i]).cwiseAbs().maxCoeff() != 0.0f) {
            all_equal = false;
        }
    }
    CHECK(all_equal);

    // rerunning the full config from scratch is byte-deterministic
    PretrainOptions opt3 = opt;
    opt3.out_dir = (fs::path(dir) / "runC").string();
    auto res3 = run_pretrain(opt3);
    CHECK(read_text_file((fs::path(opt.out_dir) / "train_ppl.csv").string()) ==
          read_text_file((fs::path(opt3.out_dir) / "train_ppl.csv").string()));
    CHECK(read_text_file(res.final_checkpoint_path) ==
          read_text_file(res3.final_checkpoint_path));
}
