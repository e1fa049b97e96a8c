#include <doctest.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "desklm/cli.hpp"
#include "desklm/finetune.hpp"
#include "desklm/masking.hpp"
#include "desklm/metrics.hpp"
#include "desklm/pll.hpp"
#include "desklm/pretrain.hpp"
#include "desklm/schedule.hpp"
#include "helpers.hpp"

// Acceptance suite: one test case per criterion, one printed line each.

using namespace desklm;
namespace fs = std::filesystem;

namespace {

class Criterion {
   public:
    Criterion(int number, std::string name)
        : number_(number), name_(std::move(name)), start_(std::chrono::steady_clock::now()) {}

    ~Criterion() {
        double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        std::printf("[%s] criterion %2d: %s (%.1fs)\n", passed_ ? "PASS" : "FAIL", number_,
                    name_.c_str(), secs);
        std::fflush(stdout);
    }

    void pass() { passed_ = true; }
    double elapsed() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

   private:
    int number_;
    std::string name_;
    std::chrono::steady_clock::time_point start_;
    bool passed_ = false;
};

std::vector<corpus::Document> docs_of(const std::vector<std::string>& texts) {
    std::vector<corpus::Document> docs;
    for (size_t i = 0; i < texts.size(); ++i) {
        docs.push_back(corpus::make_document("d" + std::to_string(i), texts[i],
                                             corpus::Source::other));
    }
    return docs;
}

}  // namespace

TEST_CASE("criterion 1: tokenizer roundtrip on 10000 random byte strings") {
    Criterion crit(1, "tokenizer roundtrip on 10000 random byte strings");
    Rng rng(0xC1);
    auto vocab = bpe::train_vocab(docs_of({testutil::random_text(rng, 4000, 8)}), 400);
    for (int i = 0; i < 10000; ++i) {
        size_t len = rng.bounded(4097);
        std::string bytes = testutil::random_bytes(rng, len);
        auto enc = bpe::encode(vocab, bytes, i % 2 == 0);
        REQUIRE(bpe::decode(vocab, enc.ids) == bytes);
    }
    REQUIRE(crit.elapsed() < 60.0);
    crit.pass();
}

TEST_CASE("criterion 2: trainer merges equal the from-scratch recount oracle") {
    Criterion crit(2, "BPE trainer equals the from-scratch recount oracle");
    Rng rng(0xC2);
    for (int corpus_i = 0; corpus_i < 50; ++corpus_i) {
        std::vector<std::string> texts;
        size_t total = 0;
        size_t budget = 200 + rng.bounded(825);  // up to ~1 KB
        while (total < budget) {
            std::string t = testutil::random_text(rng, 30 + rng.bounded(120),
                                                  3 + static_cast<int>(rng.bounded(5)));
            total += t.size();
            texts.push_back(std::move(t));
        }
        int target = bpe::kReservedTokens + static_cast<int>(rng.bounded(40));  // <= 300
        auto oracle = testutil::bpe_oracle::train_merges(texts, target - bpe::kReservedTokens);
        auto vocab = bpe::train_vocab(docs_of(texts), target);
        REQUIRE(vocab.merges().size() == oracle.size());
        for (size_t i = 0; i < oracle.size(); ++i) {
            REQUIRE(vocab.merges()[i] == oracle[i]);
        }
    }
    REQUIRE(crit.elapsed() < 120.0);
    crit.pass();
}

TEST_CASE("criterion 3: finite-difference gradient check over all parameters") {
    Criterion crit(3, "gradient check vs central finite differences");
    nn::ModelConfig cfg;
    cfg.num_layers = 2;
    cfg.hidden_size = 8;
    cfg.num_heads = 2;
    cfg.ffn_size = 16;
    cfg.vocab_size = 40;
    cfg.max_positions = 16;
    cfg.dropout = 0.0;
    cfg.attention_dropout = 0.0;
    auto model = nn::Model<double>::random_init(cfg, 0xC3);
    testutil::gradcheck::condition_params(model.params(), 0xC3);

    nn::Batch corrupted;
    corrupted.n_seq = 2;
    corrupted.seq_len = 6;
    corrupted.ids = {0, 7, 12, 25, 30, 2, 0, 9, 33, 14, 1, 1};
    corrupted.mask = {1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0};
    std::vector<long> rows = {1, 3, 7};
    std::vector<int32_t> labels = {corrupted.ids[1], corrupted.ids[3], corrupted.ids[7]};
    corrupted.ids[1] = 39;
    corrupted.ids[3] = 11;

    auto loss = [&]() {
        nn::Mat<double> hidden = model.forward(corrupted);
        nn::Mat<double> gathered(rows.size(), cfg.hidden_size);
        for (size_t i = 0; i < rows.size(); ++i) {
            gathered.row(static_cast<long>(i)) = hidden.row(rows[i]);
        }
        nn::Mat<double> logits = model.mlm_logits_rows(gathered);
        auto [sum, count] = nn::softmax_nll_sum<double>(logits, labels, nullptr);
        return sum / static_cast<double>(count);
    };

    auto grads = nn::allocate_params<double>(cfg);
    {
        nn::ForwardCache<double> cache;
        nn::Mat<double> hidden = model.forward(corrupted, {}, &cache);
        nn::Mat<double> gathered(rows.size(), cfg.hidden_size);
        for (size_t i = 0; i < rows.size(); ++i) {
            gathered.row(static_cast<long>(i)) = hidden.row(rows[i]);
        }
        nn::Model<double>::MlmHeadCache head_cache;
        nn::Mat<double> logits = model.mlm_logits_rows(gathered, &head_cache);
        nn::Mat<double> dlogits;
        auto [sum, count] = nn::softmax_nll_sum<double>(logits, labels, &dlogits);
        (void)sum;
        dlogits *= 1.0 / static_cast<double>(count);
        model.mlm_backward(corrupted, cache, head_cache, dlogits, rows, grads);
    }

    testutil::gradcheck::Result res;
    std::vector<nn::Mat<double>*> gptr;
    nn::for_each_tensor(grads, [&](const std::string&, nn::Mat<double>& g) {
        gptr.push_back(&g);
    });
    size_t gi = 0;
    nn::for_each_tensor(model.params(), [&](const std::string& name, nn::Mat<double>& m) {
        testutil::gradcheck::check_tensor(name, m, *gptr[gi++], loss, 1e-3, res, 1e-4);
    });
    INFO("worst at ", res.where);
    REQUIRE(res.max_relative < 1e-4);
    REQUIRE(res.worst_guarded <= 0.0);
    REQUIRE(crit.elapsed() < 300.0);
    crit.pass();
}

TEST_CASE("criterion 4: parameter accounting within 1% of 126M and 357M") {
    Criterion crit(4, "parameter counts within 1% of 126M / 357M");
    int64_t base = nn::count_parameters(nn::base_preset(52000));
    int64_t large = nn::count_parameters(nn::large_preset(52000));
    REQUIRE(std::abs(static_cast<double>(base) - 126e6) < 0.01 * 126e6);
    REQUIRE(std::abs(static_cast<double>(large) - 357e6) < 0.01 * 357e6);
    crit.pass();
}

TEST_CASE("criterion 5: schedule exactness at the pinned points") {
    Criterion crit(5, "learning-rate schedule exactness");
    nn::TrainSchedule s;
    s.total_updates = 100000;
    s.warmup_updates = 10000;
    s.peak_lr = 0.0004;
    s.end_lr = 0.0;
    s.power = 1.0;
    REQUIRE(nn::lr_at(s, 0) == 0.0);
    REQUIRE(nn::lr_at(s, 10000) == 0.0004);
    REQUIRE(nn::lr_at(s, 100000) == 0.0);
    Rng rng(0xC5);
    for (int i = 0; i < 10; ++i) {
        int64_t step = 10001 + static_cast<int64_t>(rng.bounded(89999));
        // independent closed form in extended precision
        long double remaining = static_cast<long double>(100000 - step) / 90000.0L;
        long double expected = 0.0004L * remaining;
        double got = nn::lr_at(s, step);
        REQUIRE(std::abs(got - static_cast<double>(expected)) <=
                1e-12 * static_cast<double>(expected));
    }
    crit.pass();
}

TEST_CASE("criterion 6: initial perplexity tracks the vocabulary size") {
    Criterion crit(6, "initial perplexity in [0.5V, 2V] for V in {512, 4096}");
    for (int V : {512, 4096}) {
        nn::ModelConfig cfg;
        cfg.num_layers = 2;
        cfg.hidden_size = 64;
        cfg.num_heads = 2;
        cfg.ffn_size = 256;
        cfg.vocab_size = V;
        cfg.max_positions = 130;
        cfg.dropout = 0.0;
        cfg.attention_dropout = 0.0;
        auto model = nn::Model<float>::random_init(cfg, 0xC6 + V);

        nn::VocabInfo info;
        info.vocab_size = V;
        info.mask_id = V - 1;
        nn::Batch clean;
        clean.n_seq = 8;
        clean.seq_len = 128;
        clean.ids.resize(8 * 128);
        clean.mask.assign(8 * 128, 1);
        Rng rng(0x6C + V);
        for (auto& id : clean.ids) {
            id = 4 + static_cast<int32_t>(rng.bounded(static_cast<uint64_t>(V - 5)));
        }
        auto masked = nn::apply_dynamic_masking(clean, info, {}, 0xC6, 0);
        REQUIRE(masked.n_selected > 0);
        nn::Mat<float> hidden = model.forward(masked.batch);
        nn::Mat<float> logits = model.mlm_logits(hidden);
        auto [nll, count] = nn::mlm_loss(logits, masked.labels);
        REQUIRE(count == masked.n_selected);
        double ppl = std::exp(nll);
        REQUIRE(ppl > 0.5 * V);
        REQUIRE(ppl < 2.0 * V);
    }
    crit.pass();
}

TEST_CASE("criterion 7: toy pretraining converges with non-increasing curves") {
    Criterion crit(7, "toy convergence below 10% of initial validation perplexity");
    std::string dir = testutil::fresh_dir("accept7");
    auto docs = testutil::gen_grammar_documents(1, 5 * 1000 * 1000);
    size_t split = docs.size() - 25;
    std::vector<corpus::Document> train_docs(docs.begin(), docs.begin() + split);
    std::vector<corpus::Document> valid_docs(docs.begin() + split, docs.end());
    auto tm = corpus::shuffle_and_shard(train_docs, 1, 8 << 20, dir, "train");
    std::string tm_path = (fs::path(dir) / "tm.json").string();
    corpus::write_manifest(tm, tm_path);
    auto vm = corpus::shuffle_and_shard(valid_docs, 1, 8 << 20, dir, "valid");
    std::string vm_path = (fs::path(dir) / "vm.json").string();
    corpus::write_manifest(vm, vm_path);
    auto vocab = bpe::train_vocab(train_docs, 512);
    bpe::save_vocab(vocab, (fs::path(dir) / "tok").string());

    nn::PretrainConfig cfg;
    cfg.model.num_layers = 2;
    cfg.model.hidden_size = 64;
    cfg.model.num_heads = 2;
    cfg.model.ffn_size = 256;
    cfg.model.vocab_size = 512;
    cfg.model.max_positions = 130;
    cfg.model.dropout = 0.0;
    cfg.model.attention_dropout = 0.0;
    cfg.seq_len = 128;
    cfg.micro_batch_seqs = 16;
    cfg.schedule.total_updates = 2000;
    cfg.schedule.warmup_updates = 200;
    cfg.schedule.peak_lr = 2e-3;
    cfg.schedule.end_lr = 0.0;
    cfg.schedule.power = 1.0;
    cfg.schedule.tokens_per_update = 16 * 128;
    cfg.schedule.seed = 7;
    cfg.tokenizer_dir = (fs::path(dir) / "tok").string();

    nn::PretrainOptions opt;
    opt.config = cfg;
    opt.train_manifest = tm_path;
    opt.valid_manifest = vm_path;
    opt.out_dir = (fs::path(dir) / "run").string();
    opt.quiet = true;
    auto res = nn::run_pretrain(opt);

    REQUIRE(res.log.train_points.size() == 2000);
    // initial training perplexity also respects the scale law at V=512
    double first_train = res.log.train_points.front().second;
    REQUIRE(first_train > 0.5 * 512);
    REQUIRE(first_train < 2.0 * 512);

    REQUIRE(res.log.valid_points.size() >= 2);
    REQUIRE(res.log.valid_points.front().first == 0);
    double initial_valid = res.log.valid_points.front().second;
    double final_valid = res.log.valid_points.back().second;
    REQUIRE(final_valid < 0.1 * initial_valid);

    // 10%-window means of both curves are non-increasing
    auto window_means = [](const std::vector<std::pair<int64_t, double>>& pts) {
        std::vector<double> means;
        size_t n = pts.size();
        size_t windows = std::min<size_t>(10, n);
        for (size_t w = 0; w < windows; ++w) {
            size_t lo = w * n / windows;
            size_t hi = (w + 1) * n / windows;
            double m = 0.0;
            for (size_t i = lo; i < hi; ++i) {
                m += pts[i].second;
            }
            means.push_back(m / static_cast<double>(hi - lo));
        }
        return means;
    };
    for (const auto* curve : {&res.log.train_points, &res.log.valid_points}) {
        auto means = window_means(*curve);
        for (size_t i = 0; i + 1 < means.size(); ++i) {
            REQUIRE(means[i + 1] <= means[i] * (1.0 + 1e-9));
        }
    }
    REQUIRE(crit.elapsed() < 1800.0);
    crit.pass();
}

TEST_CASE("criterion 8: grid protocol, early-stopping boundaries, fixed seeds") {
    Criterion crit(8, "grid of 10 trials, patience-3 stops, seeds 1/42 reproduce");
    // (a) early stopping on scripted dev sequences
    {
        ft::EarlyStopper stopper(3);
        std::vector<double> scripted = {0.5, 0.6, 0.6, 0.6, 0.6};
        int stopped_after = 0;
        for (size_t e = 0; e < scripted.size(); ++e) {
            if (stopper.record(scripted[e])) {
                stopped_after = static_cast<int>(e) + 1;
                break;
            }
        }
        REQUIRE(stopped_after == 5);
        REQUIRE(stopper.best_epoch() == 2);

        // improvement at the edge resets the counter
        ft::EarlyStopper s2(3);
        REQUIRE_FALSE(s2.record(0.1));
        REQUIRE_FALSE(s2.record(0.1));
        REQUIRE_FALSE(s2.record(0.1));
        REQUIRE(s2.record(0.1));  // fourth epoch: three non-improving in a row
        for (int patience : {1, 2, 3, 5}) {
            ft::EarlyStopper s3(patience);
            int epochs = 0;
            while (!s3.record(-static_cast<double>(epochs))) {
                ++epochs;
                REQUIRE(epochs < 50);
            }
            REQUIRE(epochs + 1 == patience + 1);
        }
    }

    // (b) + (c): the default grid yields 10 trials; fixed seeds reproduce curves
    auto grammar = testutil::gen_grammar_documents(3, 6000);
    auto vocab = bpe::train_vocab(grammar, 300);
    nn::ModelConfig mc;
    mc.num_layers = 1;
    mc.hidden_size = 32;
    mc.num_heads = 2;
    mc.ffn_size = 64;
    mc.vocab_size = 300;
    mc.max_positions = 64;
    mc.dropout = 0.0;
    mc.attention_dropout = 0.0;
    nn::Checkpoint ckpt;
    ckpt.config = mc;
    ckpt.params = nn::Model<float>::random_init(mc, 0xC8).params();
    ckpt.tokenizer_merges = bpe::merges_to_text(vocab);

    std::string task_dir = testutil::fresh_dir("accept8");
    auto train = testutil::gen_tagging_dataset(1, 24);
    auto test = testutil::gen_tagging_dataset(2, 8);
    testutil::write_conll(train.sentences, (fs::path(task_dir) / "train.conll").string());
    testutil::write_conll(test.sentences, (fs::path(task_dir) / "test.conll").string());
    auto task = ft::load_task(ft::TaskKind::token_tagging, task_dir, 1);

    ft::GridSpec grid;  // default preset: {16,32} x {5e-6..5e-5}
    grid.max_epochs = 2;
    grid.seed = 1;
    auto run = ft::run_grid(ckpt, vocab, task, grid);
    REQUIRE(run.trials.size() == 10);

    for (uint64_t seed : {uint64_t{1}, uint64_t{42}}) {
        auto a = ft::train_one(ckpt, vocab, task, 16, 5e-4, 3, 3, 0.1, seed);
        auto b = ft::train_one(ckpt, vocab, task, 16, 5e-4, 3, 3, 0.1, seed);
        REQUIRE_FALSE(a.failed);
        REQUIRE(a.dev_curve == b.dev_curve);
        REQUIRE(a.test_score == b.test_score);
        REQUIRE(a.best_dev_score == b.best_dev_score);
    }
    crit.pass();
}

TEST_CASE("criterion 9: metric implementations equal brute-force oracles") {
    Criterion crit(9, "micro/entity/macro F1 match brute-force oracles");
    // pinned fixtures first
    {
        std::vector<evalx::TagSeq> gold = {{"X", "X", "O", "X"}};
        std::vector<evalx::TagSeq> pred = {{"X", "X", "X", "O"}};
        REQUIRE(format_fixed(evalx::micro_f1(gold, pred, std::string("O")), 2) == "66.67");
        std::vector<std::string> cg = {"NOT", "NOT", "OFF", "OFF"};
        std::vector<std::string> cp = {"NOT", "OFF", "OFF", "OFF"};
        REQUIRE(format_fixed(evalx::macro_f1(cg, cp, {"NOT", "OFF"}), 2) == "73.33");
    }
    Rng rng(0xC9);
    const std::vector<std::string> tags = {"A", "B", "C", "D"};
    const std::vector<std::string> types = {"PER", "LOC", "ORG"};
    auto random_tags = [&](size_t len) {
        std::vector<std::string> out;
        for (size_t i = 0; i < len; ++i) {
            out.push_back(tags[rng.bounded(tags.size())]);
        }
        return out;
    };
    auto random_bio = [&](size_t len) {
        std::vector<std::string> out;
        while (out.size() < len) {
            if (rng.next_double() < 0.5) {
                out.push_back("O");
            } else {
                const std::string& type = types[rng.bounded(types.size())];
                size_t span = 1 + rng.bounded(3);
                out.push_back("B-" + type);
                for (size_t k = 1; k < span && out.size() < len; ++k) {
                    out.push_back("I-" + type);
                }
            }
        }
        out.resize(len);
        return out;
    };
    for (int i = 0; i < 1000; ++i) {
        size_t len = 1 + rng.bounded(10);
        std::vector<evalx::TagSeq> g1 = {random_tags(len)};
        std::vector<evalx::TagSeq> p1 = {random_tags(len)};
        REQUIRE(evalx::micro_f1(g1, p1) == testutil::metric_oracle::micro_f1(g1, p1));
    }
    for (int i = 0; i < 1000; ++i) {
        size_t len = 1 + rng.bounded(10);
        std::vector<evalx::TagSeq> g = {random_bio(len)};
        std::vector<evalx::TagSeq> p = {random_bio(len)};
        REQUIRE(evalx::entity_f1(g, p) == testutil::metric_oracle::entity_f1(g, p));
    }
    const std::vector<std::string> labels = {"P", "Q", "R", "S"};
    for (int i = 0; i < 1000; ++i) {
        size_t n = 1 + rng.bounded(10);
        std::vector<std::string> g, p;
        for (size_t k = 0; k < n; ++k) {
            g.push_back(labels[rng.bounded(labels.size())]);
            p.push_back(labels[rng.bounded(labels.size())]);
        }
        REQUIRE(evalx::macro_f1(g, p, labels) ==
                testutil::metric_oracle::macro_f1(g, p, labels));
    }
    crit.pass();
}

TEST_CASE("criterion 10: turblimp protocol reproduces planted accuracies") {
    Criterion crit(10, "turblimp planted accuracies and unweighted average");
    // plant 2794 predictable preferences over 16x200 pairs (87.3% overall)
    std::vector<long> correct(16), totals(16, 200);
    for (size_t i = 0; i < 16; ++i) {
        correct[i] = i < 10 ? 175 : 174;
    }
    auto build = [&](const std::vector<long>& c, const std::vector<long>& t) {
        std::vector<evalx::MinimalPair> pairs;
        for (size_t p = 0; p < 16; ++p) {
            for (long i = 0; i < t[p]; ++i) {
                evalx::MinimalPair mp;
                mp.phenomenon = evalx::kPhenomena[p];
                mp.good = (i < c[p] ? std::string("good ") : std::string("weak ")) +
                          std::to_string(i);
                mp.bad = "bad " + std::to_string(i);
                pairs.push_back(std::move(mp));
            }
        }
        return pairs;
    };
    evalx::PairScorer scorer = [](const evalx::MinimalPair& p)
        -> std::optional<std::pair<double, double>> {
        bool prefers_good = p.good.rfind("good ", 0) == 0;
        return std::make_pair(prefers_good ? -1.0 : -3.0, -2.0);
    };

    long planted_total = 0;
    for (long c : correct) {
        planted_total += c;
    }
    REQUIRE(planted_total == 2794);  // 87.3125% of 3200

    auto rep = evalx::turblimp_eval(scorer, build(correct, totals));
    REQUIRE(rep.per_phenomenon.size() == 16);
    double expected_avg = 0.0;
    for (size_t i = 0; i < 16; ++i) {
        double expected = 100.0 * static_cast<double>(correct[i]) / 200.0;
        REQUIRE(rep.per_phenomenon[i].accuracy == expected);
        expected_avg += expected;
    }
    expected_avg /= 16.0;
    REQUIRE(std::abs(rep.average - expected_avg) < 1e-12);

    // the average is invariant to per-phenomenon pair-count imbalance
    std::vector<long> c2 = correct, t2 = totals;
    for (size_t i = 0; i < 16; i += 2) {
        c2[i] *= 4;
        t2[i] *= 4;
    }
    auto rep2 = evalx::turblimp_eval(scorer, build(c2, t2));
    REQUIRE(std::abs(rep2.average - rep.average) < 1e-12);
    for (size_t i = 0; i < 16; ++i) {
        REQUIRE(std::abs(rep2.per_phenomenon[i].accuracy -
                         rep.per_phenomenon[i].accuracy) < 1e-12);
    }
    crit.pass();
}

TEST_CASE("criterion 11: end-to-end pipeline smoke through the CLI") {
    Criterion crit(11, "end-to-end corpus->tokenizer->pretrain->finetune->eval->report");
    std::string dir = testutil::fresh_dir("accept11");

    // raw corpus
    auto docs = testutil::gen_grammar_documents(5, 600000);
    std::string raw = (fs::path(dir) / "raw.jsonl").string();
    testutil::write_jsonl_corpus(docs, raw);

    // 200-sentence synthetic tagging task (train + test; dev held out)
    std::string task_dir = (fs::path(dir) / "task").string();
    ensure_dir(task_dir);
    auto train = testutil::gen_tagging_dataset(11, 160);
    auto test = testutil::gen_tagging_dataset(12, 40);
    testutil::write_conll(train.sentences, (fs::path(task_dir) / "train.conll").string());
    testutil::write_conll(test.sentences, (fs::path(task_dir) / "test.conll").string());

    // synthetic minimal pairs: word swap corrupts a grammar sentence
    std::vector<evalx::MinimalPair> pairs;
    {
        Rng rng(31);
        auto words = testutil::grammar_lexicon();
        for (const auto& phen : evalx::kPhenomena) {
            for (int i = 0; i < 6; ++i) {
                std::string a = words[rng.bounded(words.size())];
                std::string b = words[rng.bounded(words.size())];
                std::string c = words[rng.bounded(words.size())];
                evalx::MinimalPair mp;
                mp.phenomenon = phen;
                mp.good = a + " " + b + " " + c + " son.";
                mp.bad = c + " " + a + " " + b + " nos.";
                pairs.push_back(std::move(mp));
            }
        }
    }
    std::string pairs_path = (fs::path(dir) / "pairs.jsonl").string();
    evalx::write_minimal_pairs(pairs, pairs_path);

    // stage 1: corpus
    std::string corpus_out = (fs::path(dir) / "corpus").string();
    REQUIRE(cli::dispatch({"corpus", "--input", raw, "--out", corpus_out, "--seed", "1",
                           "--shard-bytes", "262144", "--valid-fraction", "0.05"}) == 0);

    // stage 2: tokenizer
    std::string tok_out = (fs::path(dir) / "tok").string();
    REQUIRE(cli::dispatch({"tokenizer", "train", "--input",
                           (fs::path(corpus_out) / "train_manifest.json").string(),
                           "--vocab-size", "384", "--seed", "1", "--out", tok_out}) == 0);

    // stage 3: pretrain
    nlohmann::json pcfg;
    pcfg["model"] = {{"num_layers", 2},   {"hidden_size", 48},   {"num_heads", 2},
                     {"ffn_size", 128},   {"vocab_size", 384},   {"max_positions", 66},
                     {"dropout", 0.0},    {"attention_dropout", 0.0}};
    pcfg["schedule"] = {{"total_updates", 200}, {"warmup_updates", 20},
                        {"peak_lr", 2e-3},      {"end_lr", 0.0},
                        {"power", 1.0},         {"tokens_per_update", 8 * 64},
                        {"seed", 1}};
    pcfg["seq_len"] = 64;
    pcfg["micro_batch_seqs"] = 8;
    pcfg["tokenizer_dir"] = tok_out;
    std::string cfg_path = (fs::path(dir) / "pretrain.json").string();
    write_text_file(cfg_path, pcfg.dump(2));
    std::string pre_out = (fs::path(dir) / "pretrain").string();
    REQUIRE(cli::dispatch({"pretrain", "--config", cfg_path, "--data",
                           (fs::path(corpus_out) / "train_manifest.json").string(), "--valid",
                           (fs::path(corpus_out) / "valid_manifest.json").string(), "--out",
                           pre_out, "--quiet"}) == 0);
    std::string ckpt = (fs::path(pre_out) / "ckpt_final.bin").string();
    REQUIRE(fs::exists(ckpt));

    // stage 4: finetune with a 1-configuration grid
    nlohmann::json gcfg;
    gcfg["batch_sizes"] = {8};
    gcfg["learning_rates"] = {5e-4};
    gcfg["max_epochs"] = 6;
    gcfg["patience"] = 3;
    gcfg["warmup_fraction"] = 0.1;
    gcfg["seed"] = 1;
    std::string grid_path = (fs::path(dir) / "grid.json").string();
    write_text_file(grid_path, gcfg.dump(2));
    std::string ft_out = (fs::path(dir) / "finetune").string();
    REQUIRE(cli::dispatch({"finetune", "--task", "pos", "--ckpt", ckpt, "--data", task_dir,
                           "--grid", grid_path, "--out", ft_out, "--quiet"}) == 0);

    // the fine-tuned tagger must beat the majority-tag baseline on test
    nlohmann::json best = nlohmann::json::parse(
        read_text_file((fs::path(ft_out) / "best.json").string()));
    double test_score = best["test_score"].get<double>();
    std::map<std::string, long> tag_counts;
    long total_tokens = 0;
    for (const auto& sent : test.sentences) {
        for (const auto& tag : sent.tags) {
            ++tag_counts[tag];
            ++total_tokens;
        }
    }
    long majority = 0;
    for (const auto& [tag, count] : tag_counts) {
        majority = std::max(majority, count);
    }
    double majority_baseline = 100.0 * static_cast<double>(majority) /
                               static_cast<double>(total_tokens);
    REQUIRE(test_score > majority_baseline);

    // stage 5: eval (turblimp protocol on the pretrained model)
    std::string ev_out = (fs::path(dir) / "eval").string();
    REQUIRE(cli::dispatch({"eval", "turblimp", "--ckpt", ckpt, "--pairs", pairs_path, "--out",
                           ev_out, "--model-name", "desk-toy"}) == 0);

    // stage 6: report
    std::string rep_out = (fs::path(dir) / "report").string();
    REQUIRE(cli::dispatch({"report", "--run", pre_out, "--run", ft_out, "--run", ev_out,
                           "--out", rep_out, "--model-name", "desk-toy"}) == 0);

    std::string tasks = read_text_file((fs::path(rep_out) / "results_tasks.csv").string());
    REQUIRE(tasks.rfind("model,pos,ner,offense,turblimp_avg\n", 0) == 0);
    REQUIRE(tasks.find("desk-toy,") != std::string::npos);
    std::string svg = read_text_file((fs::path(rep_out) / "perplexity.svg").string());
    REQUIRE(svg.find("Validation perplexity") != std::string::npos);
    REQUIRE(svg.find("Training perplexity") != std::string::npos);
    REQUIRE(svg.find("polyline") != std::string::npos);
    // every stage left a run manifest behind
    for (const auto& stage_dir : {corpus_out, tok_out, pre_out, ft_out, ev_out, rep_out}) {
        REQUIRE(fs::exists(fs::path(stage_dir) / "run_manifest.json"));
    }
    REQUIRE(crit.elapsed() < 1200.0);
    crit.pass();
}
