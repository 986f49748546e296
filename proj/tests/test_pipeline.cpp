// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <map>

#include "protonmt/pipeline.hpp"

using namespace protonmt;

namespace {
namespace fs = std::filesystem;

struct TestWorld {
  fs::path root;
  Dataset data;

  TestWorld() {
    root = fs::temp_directory_path() / "protonmt_test_pipeline";
    fs::remove_all(root);
    fs::create_directories(root / "data");
    GenConfig gcfg;
    gcfg.train_size = 300;
    gcfg.dev_size = 40;
    gcfg.test_size = 40;
    gcfg.cg_compounds = 12;
    gcfg.contexts_per_compound = 2;
    gcfg.heldout_pairs = 12;
    auto rules = GenerationRules::standard();
    auto bench = generate_benchmark(rules, gcfg, 4242);
    save_corpus(bench.train, (root / "data" / "train.tsv").string());
    save_corpus(bench.dev, (root / "data" / "dev.tsv").string());
    save_corpus(bench.test, (root / "data" / "test.tsv").string());
    save_corpus(bench.cg_test, (root / "data" / "cg_test.tsv").string());
    save_dictionary(bench.dictionary, (root / "data" / "compounds.tsv").string());
    data = Dataset::load((root / "data").string());
  }
};

TestWorld& world() {
  static TestWorld w;
  return w;
}

ModelConfig small_model() {
  ModelConfig cfg;
  cfg.d_model = 32;
  cfg.n_heads = 2;
  cfg.n_encoder_layers = 1;
  cfg.n_decoder_layers = 1;
  cfg.d_ff = 48;
  cfg.num_prototypes = 2;
  cfg.dropout = 0.1;
  return cfg;
}

TrainingConfig small_training(const std::string& mode, const std::string& out,
                              int epochs = 3, int n = 1) {
  TrainingConfig cfg;
  cfg.epochs = epochs;
  cfg.warmup_epochs = n;
  cfg.batch_size = 25;
  cfg.seed = 7;
  cfg.mode = mode;
  cfg.out_dir = (world().root / out).string();
  cfg.lr_warmup_steps = 20;
  return cfg;
}

/// Drops the volatile wall-clock column from a metrics CSV.
std::string metrics_without_seconds(const std::string& path) {
  std::istringstream is(read_file(path));
  std::string line, out;
  while (std::getline(is, line)) {
    auto last_comma = line.rfind(',');
    out += line.substr(0, last_comma) + "\n";
  }
  return out;
}

}  // namespace

TEST_CASE("stage 1 training reduces the dev loss of an untrained model") {
  auto& w = world();
  auto cfg = small_training("one-pass", "stage1_check", 2, 1);
  ExperimentRunner<float> runner(w.data, small_model(), cfg, nullptr);

  auto mcfg = small_model();
  mcfg.src_vocab = w.data.src_vocab.size();
  mcfg.tgt_vocab = w.data.tgt_vocab.size();
  Model<float> untrained(mcfg, cfg.seed);
  Adam<float> adam_probe;
  Trainer<float> probe(untrained, adam_probe, cfg, nullptr);
  // fixed 100-sentence evaluation subset
  ParallelCorpus subset;
  for (size_t i = 0; i < 100 && i < w.data.train.size(); ++i) {
    subset.src.push_back(w.data.train.src[i]);
    subset.tgt.push_back(w.data.train.tgt[i]);
  }
  double before = probe.evaluate_loss(subset);

  Adam<float> adam(AdamConfig{cfg.base_lr, cfg.adam_beta1, cfg.adam_beta2,
                              cfg.adam_eps});
  MetricsLog log;
  auto model = runner.train_stage1(1, adam, log, "stage1", cfg.seed);
  Trainer<float> after_probe(model, adam, cfg, nullptr);
  double after = after_probe.evaluate_loss(subset);
  REQUIRE(after < before);
  REQUIRE(log.rows.size() == 1);
}

TEST_CASE("N = 0 is a configuration error in one-pass mode") {
  auto cfg = small_training("one-pass", "bad_n", 3, 0);
  REQUIRE_THROWS_AS(cfg.validate(), UsageError);
  auto cfg2 = small_training("one-pass", "bad_n2", 3, 3);  // N == epochs
  REQUIRE_THROWS_AS(cfg2.validate(), UsageError);
}

TEST_CASE("identical seeds give bitwise-identical checkpoints") {
  auto& w = world();
  for (const char* out : {"det_a", "det_b"}) {
    auto cfg = small_training("baseline", out, 2);
    ExperimentRunner<float> runner(w.data, small_model(), cfg, nullptr);
    runner.run();
  }
  REQUIRE(read_file((world().root / "det_a" / "final.ckpt").string()) ==
          read_file((world().root / "det_b" / "final.ckpt").string()));
  REQUIRE(metrics_without_seconds((world().root / "det_a" / "metrics.csv").string()) ==
          metrics_without_seconds((world().root / "det_b" / "metrics.csv").string()));
}

TEST_CASE("attachment preserves outputs and adds exactly L*(4d^2+4d) parameters") {
  auto& w = world();
  auto cfg = small_training("one-pass", "attach_run", 2, 1);
  ExperimentRunner<float> runner(w.data, small_model(), cfg, nullptr);
  auto result = runner.run();

  auto base = Model<float>::load_checkpoint(result.stage1_checkpoint);
  auto table = load_table(result.protos_file, w.data.src_vocab.checksum());
  auto extended = runner.attach_to_checkpoint(result.stage1_checkpoint, table,
                                              PrototypeMode::clustered_frozen);

  SECTION("base parameters are bitwise preserved") {
    for (const auto& item : base.params().items()) {
      const auto& ext = extended.params().get(item.name);
      REQUIRE(ext.value() == item.tensor.value());
    }
  }

  SECTION("parameter delta is L*(4d^2+4d)") {
    size_t d = 32, L = 1;
    REQUIRE(extended.count_parameters(ParamPartition::all) -
                base.count_parameters(ParamPartition::all) ==
            L * (4 * d * d + 4 * d));
    REQUIRE(extended.count_parameters(ParamPartition::prototype_attention) ==
            L * (4 * d * d + 4 * d));
  }

  SECTION("forward outputs match within 1e-5 on 100 random batches") {
    Rng rng(55);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      int s_len = 3 + static_cast<int>(rng.uniform_int(6));
      int t_len = 2 + static_cast<int>(rng.uniform_int(5));
      std::vector<int> src, tgt;
      for (int i = 0; i < s_len; ++i)
        src.push_back(4 + static_cast<int>(rng.uniform_int(
                              w.data.src_vocab.size() - 4)));
      tgt.push_back(Vocabulary::kBos);
      for (int i = 0; i < t_len; ++i)
        tgt.push_back(4 + static_cast<int>(rng.uniform_int(
                              w.data.tgt_vocab.size() - 4)));
      ForwardCtx<float> ctx_a, ctx_b;
      auto la = base.decode(ctx_a, tgt, base.encode(ctx_a, src));
      auto lb = extended.decode(ctx_b, tgt, extended.encode(ctx_b, src));
      for (size_t i = 0; i < la.numel(); ++i)
        worst = std::max(worst, std::fabs(static_cast<double>(la.value()[i]) -
                                          lb.value()[i]));
    }
    REQUIRE(worst < 1e-5);
  }
}

TEST_CASE("stage-2 initial dev loss equals stage-1 final dev loss") {
  auto& w = world();
  auto cfg = small_training("one-pass", "stage_boundary", 3, 2);
  ExperimentRunner<float> runner(w.data, small_model(), cfg, nullptr);
  auto result = runner.run();

  double stage1_final_dev = -1;
  for (const auto& row : result.log.rows)
    if (row.phase == "stage1" && row.dev_loss) stage1_final_dev = *row.dev_loss;
  REQUIRE(stage1_final_dev > 0);

  auto table = load_table(result.protos_file);
  auto extended = runner.attach_to_checkpoint(result.stage1_checkpoint, table,
                                              PrototypeMode::clustered_frozen);
  Adam<float> adam;
  Trainer<float> probe(extended, adam, cfg, nullptr);
  double stage2_initial_dev = probe.evaluate_loss(w.data.dev);
  REQUIRE_THAT(stage2_initial_dev,
               Catch::Matchers::WithinAbs(stage1_final_dev, 1e-4));
}

TEST_CASE("frozen prototypes stay constant; random prototypes train") {
  auto& w = world();
  {
    auto cfg = small_training("one-pass", "frozen_run", 3, 1);
    ExperimentRunner<float> runner(w.data, small_model(), cfg, nullptr);
    auto res = runner.run();
    REQUIRE(res.table_checksum_before == res.table_checksum_after);
  }
  {
    auto cfg = small_training("random-proto", "random_run", 3, 1);
    ExperimentRunner<float> runner(w.data, small_model(), cfg, nullptr);
    auto res = runner.run();
    REQUIRE(res.table_checksum_before != res.table_checksum_after);
    // the trained table rides in the checkpoint and loads back
    auto final_model = Model<float>::load_checkpoint(res.final_checkpoint);
    REQUIRE(final_model.has_prototype_entries());
    REQUIRE(final_model.config().prototype_mode ==
            PrototypeMode::random_trainable);
  }
}

TEST_CASE("mode bookkeeping: epochs, phases and artifacts") {
  auto& w = world();
  std::map<std::string, RunResult> results;
  for (const std::string mode :
       {std::string("baseline"), std::string("one-pass"),
        std::string("two-pass"), std::string("random-proto")}) {
    auto cfg = small_training(mode, "mode_" + mode, 3, 1);
    ExperimentRunner<float> runner(w.data, small_model(), cfg, nullptr);
    results[mode] = runner.run();
  }
  REQUIRE(results["one-pass"].log.optimizer_epochs() == 3);
  REQUIRE(results["baseline"].log.optimizer_epochs() == 3);
  REQUIRE(results["random-proto"].log.optimizer_epochs() == 3);
  REQUIRE(results["two-pass"].log.optimizer_epochs() == 6);  // 2x

  // baseline never touches the prototype machinery
  for (const auto& row : results["baseline"].log.rows) {
    REQUIRE(row.phase != "extract");
    REQUIRE(row.phase != "cluster");
  }
  REQUIRE(results["baseline"].protos_file.empty());

  for (auto& [mode, res] : results) {
    auto model = Model<float>::load_checkpoint(res.final_checkpoint);
    REQUIRE(model.config().d_model == 32);
    // one row per optimizer epoch, each with both losses
    for (const auto& row : res.log.rows)
      if (row.train_loss) REQUIRE(row.dev_loss.has_value());
  }
}

// ---------------------------------------------------------------------------
// Beam search against a table-driven oracle stepper.
// ---------------------------------------------------------------------------

namespace {

constexpr int kEos = Vocabulary::kEos;  // 2
constexpr int kA = 3, kB = 4;

/// Scripted distribution: maps a consumed-prefix key to next-token log
/// probabilities; everything else gets the leftover mass on PAD.
struct TableStepper {
  using State = std::vector<int>;
  std::map<std::vector<int>, std::map<int, double>> script;
  int vocab = 5;

  State initial() { return {}; }

  std::vector<float> step(State& st, int token) {
    st.push_back(token);
    std::vector<float> logits(vocab, -1e9f);
    auto it = script.find(st);
    double named_mass = 0.0;
    if (it != script.end()) {
      for (const auto& [tok, lp] : it->second) {
        logits[tok] = static_cast<float>(lp);
        named_mass += std::exp(lp);
      }
    }
    // leftover mass split over two filler slots so no single filler
    // continuation can crowd a scripted one out of the beam
    double leftover = 1.0 - named_mass;
    if (leftover > 1e-12) {
      logits[0] = static_cast<float>(std::log(leftover / 2));
      logits[1] = static_cast<float>(std::log(leftover / 2));
    }
    return logits;
  }
};

TableStepper worked_example_stepper() {
  TableStepper s;
  s.script[{Vocabulary::kBos}] = {{kA, -1.0}, {kB, -0.9}};
  s.script[{Vocabulary::kBos, kA}] = {{kEos, -1.0}};
  s.script[{Vocabulary::kBos, kB}] = {{kA, -0.9}};
  s.script[{Vocabulary::kBos, kB, kA}] = {{kEos, -0.9}};
  return s;
}

}  // namespace

TEST_CASE("length penalty selects the hand-scored hypothesis") {
  // two finished hypotheses: logp -2.0 at length 2 and -2.7 at length 3
  REQUIRE_THAT(length_penalized_score(-2.0, 2, 1.0),
               Catch::Matchers::WithinAbs(-1.0, 1e-12));
  REQUIRE_THAT(length_penalized_score(-2.7, 3, 1.0),
               Catch::Matchers::WithinAbs(-0.9, 1e-12));

  auto stepper = worked_example_stepper();
  DecodeConfig cfg;
  cfg.beam = 2;
  cfg.length_penalty = 1.0;
  auto res = beam_search(stepper, Vocabulary::kBos, kEos, cfg, 8);
  REQUIRE(res.tokens == std::vector<int>{kB, kA, kEos});
  REQUIRE_THAT(res.logp, Catch::Matchers::WithinAbs(-2.7, 1e-6));

  bool saw_short = false;
  for (const auto& f : res.finished)
    if (f.tokens == std::vector<int>{kA, kEos}) {
      saw_short = true;
      REQUIRE_THAT(f.logp, Catch::Matchers::WithinAbs(-2.0, 1e-6));
    }
  REQUIRE(saw_short);

  // with no length penalty the shorter, higher-probability one wins
  cfg.length_penalty = 0.0;
  auto res0 = beam_search(stepper, Vocabulary::kBos, kEos, cfg, 8);
  REQUIRE(res0.tokens == std::vector<int>{kA, kEos});
}

TEST_CASE("beam width 1 with zero penalty equals greedy decoding") {
  auto& w = world();
  auto mcfg = small_model();
  mcfg.src_vocab = w.data.src_vocab.size();
  mcfg.tgt_vocab = w.data.tgt_vocab.size();
  Model<float> model(mcfg, 3131);
  Rng rng(66);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<int> src;
    int s_len = 3 + static_cast<int>(rng.uniform_int(5));
    for (int i = 0; i < s_len; ++i)
      src.push_back(4 + static_cast<int>(rng.uniform_int(mcfg.src_vocab - 4)));
    ForwardCtx<float> ctx;
    auto enc = model.encode(ctx, src);

    // greedy oracle via the incremental decoder
    std::vector<int> greedy;
    auto st = model.begin_decode(enc);
    int tok = Vocabulary::kBos;
    int max_len = s_len + 8;
    for (int t = 0; t < max_len; ++t) {
      auto logits = model.decode_step(st, tok);
      int arg = 0;
      for (int v = 1; v < mcfg.tgt_vocab; ++v)
        if (logits[v] > logits[arg]) arg = v;
      if (t == max_len - 1) arg = Vocabulary::kEos;  // forced termination
      greedy.push_back(arg);
      if (arg == Vocabulary::kEos) break;
      tok = arg;
    }

    DecodeConfig cfg;
    cfg.beam = 1;
    cfg.length_penalty = 0.0;
    cfg.max_len = max_len;
    ModelStepper<float> stepper{&model, &enc};
    auto res = beam_search(stepper, Vocabulary::kBos, Vocabulary::kEos, cfg,
                           max_len);
    REQUIRE(res.tokens == greedy);
  }
}

TEST_CASE("reaching max length forces a final EOS") {
  TableStepper s;  // 'a' is always overwhelmingly likely, EOS never chosen
  s.script = {};
  struct LoopStepper {
    using State = int;
    State initial() { return 0; }
    std::vector<float> step(State& st, int) {
      ++st;
      std::vector<float> logits(5, -20.0f);
      logits[kA] = 5.0f;
      logits[kEos] = -5.0f;
      return logits;
    }
  } loop;
  DecodeConfig cfg;
  cfg.beam = 2;
  auto res = beam_search(loop, Vocabulary::kBos, kEos, cfg, 6);
  REQUIRE(res.tokens.size() == 6);
  REQUIRE(res.tokens.back() == kEos);
  for (size_t i = 0; i + 1 < res.tokens.size(); ++i) REQUIRE(res.tokens[i] == kA);
}

TEST_CASE("with zero penalty the winner has the best raw log probability") {
  Rng seed_rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    struct RandomStepper {
      using State = uint64_t;
      uint64_t seed;
      State initial() { return seed; }
      std::vector<float> step(State& st, int token) {
        st = Rng::derive(st, static_cast<uint64_t>(token) + 17);
        Rng rng(st);
        std::vector<float> logits(6);
        for (auto& v : logits) v = static_cast<float>(rng.normal());
        return logits;
      }
    } stepper{seed_rng.next_u64()};
    DecodeConfig cfg;
    cfg.beam = 3;
    cfg.length_penalty = 0.0;
    auto res = beam_search(stepper, Vocabulary::kBos, kEos, cfg, 7);
    REQUIRE_FALSE(res.finished.empty());
    double best = res.finished[0].logp;
    for (const auto& f : res.finished) best = std::max(best, f.logp);
    REQUIRE_THAT(res.logp, Catch::Matchers::WithinAbs(best, 1e-12));
  }
}

TEST_CASE("decode_corpus keeps order, strips specials and caps length") {
  auto& w = world();
  auto mcfg = small_model();
  mcfg.src_vocab = w.data.src_vocab.size();
  mcfg.tgt_vocab = w.data.tgt_vocab.size();
  Model<float> model(mcfg, 99);
  DecodeConfig cfg;
  cfg.beam = 2;
  std::vector<std::vector<int>> src(w.data.dev.src.begin(),
                                    w.data.dev.src.begin() + 5);
  auto ids = decode_corpus(model, src, cfg, nullptr);
  REQUIRE(ids.size() == 5);
  for (const auto& sent : ids) {
    REQUIRE(sent.back() == Vocabulary::kEos);
  }
  auto toks = ids_to_tokens(ids, w.data.tgt_vocab);
  for (const auto& sent : toks)
    for (const auto& t : sent) {
      REQUIRE(t != "<eos>");
      REQUIRE(t != "<bos>");
    }
}

TEST_CASE("prototype table lineage is enforced") {
  auto& w = world();
  auto cfg = small_training("one-pass", "lineage_run", 2, 1);
  ExperimentRunner<float> runner(w.data, small_model(), cfg, nullptr);
  auto res = runner.run();
  auto table = load_table(res.protos_file);
  table.vocab_checksum ^= 1;  // corrupt
  REQUIRE_THROWS_AS(runner.check_table_lineage(table, 0), IncompatibleError);
}
