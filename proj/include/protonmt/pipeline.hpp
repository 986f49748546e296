// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "protonmt/data.hpp"
#include "protonmt/eval.hpp"
#include "protonmt/model.hpp"
#include "protonmt/optimizer.hpp"
#include "protonmt/prototypes.hpp"
#include "protonmt/thread_pool.hpp"

namespace protonmt {

// ---------------------------------------------------------------------------
// Run configuration.
// ---------------------------------------------------------------------------

struct TrainingConfig {
  int epochs = 20;
  int warmup_epochs = 5;  // N: stage-1 epochs in one-pass / random-proto modes
  int batch_size = 32;
  uint64_t seed = 1;
  std::string mode = "one-pass";  // baseline | one-pass | two-pass | random-proto
  std::string out_dir;
  double base_lr = 5e-4;
  int lr_warmup_steps = 400;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-9;
  int vocab_min_freq = 1;
  int proto_min_freq = 2;

  void validate() const {
    if (epochs < 1) throw UsageError("epochs must be >= 1");
    if (batch_size < 1) throw UsageError("batch_size must be >= 1");
    if (mode != "baseline" && mode != "one-pass" && mode != "two-pass" &&
        mode != "random-proto")
      throw UsageError("unknown training mode: " + mode);
    if (mode == "one-pass" || mode == "random-proto") {
      if (warmup_epochs < 1 || warmup_epochs >= epochs)
        throw UsageError("stage-1 epochs N must satisfy 1 <= N < epochs (got N=" +
                         std::to_string(warmup_epochs) + ", epochs=" +
                         std::to_string(epochs) + ")");
    }
  }
};

struct DecodeConfig {
  int beam = 5;
  double length_penalty = 0.6;  // alpha; hypothesis score = logp / len^alpha
  int max_len = 0;              // 0 = source length + 8

  void validate() const {
    if (beam < 1) throw UsageError("beam width must be >= 1");
    if (length_penalty < 0) throw UsageError("length penalty must be >= 0");
  }
};

// ---------------------------------------------------------------------------
// Dataset bundle: the four splits, vocabularies built from the training side,
// and the compound dictionary.
// ---------------------------------------------------------------------------

struct Dataset {
  TextCorpus train_text, dev_text, test_text, cg_text;
  CompoundDictionary dictionary;
  Vocabulary src_vocab, tgt_vocab;
  ParallelCorpus train, dev, test, cg;
  uint64_t train_checksum = 0;

  static Dataset load(const std::string& dir, int vocab_min_freq = 1) {
    Dataset d;
    d.train_text = load_corpus(dir + "/train.tsv");
    d.dev_text = load_corpus(dir + "/dev.tsv");
    d.test_text = load_corpus(dir + "/test.tsv");
    d.cg_text = load_corpus(dir + "/cg_test.tsv");
    d.dictionary = load_dictionary(dir + "/compounds.tsv");
    if (d.dictionary.entries.size() != d.cg_text.size())
      throw IncompatibleError("compounds.tsv does not align with cg_test.tsv");
    std::vector<std::vector<std::string>> src_side, tgt_side;
    for (const auto& p : d.train_text) {
      src_side.push_back(p.src);
      tgt_side.push_back(p.tgt);
    }
    std::set<std::string> punct{".", ",", "!", "?", ";", ":"};
    d.src_vocab = build_vocab(src_side, vocab_min_freq, punct);
    d.tgt_vocab = build_vocab(tgt_side, vocab_min_freq, punct);
    d.train = numericalize(d.train_text, d.src_vocab, d.tgt_vocab, "train");
    d.dev = numericalize(d.dev_text, d.src_vocab, d.tgt_vocab, "dev");
    d.test = numericalize(d.test_text, d.src_vocab, d.tgt_vocab, "test");
    d.cg = numericalize(d.cg_text, d.src_vocab, d.tgt_vocab, "cg-test");
    d.train_checksum = corpus_checksum(d.train_text);
    return d;
  }

  const ParallelCorpus& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "dev") return dev;
    if (name == "test") return test;
    if (name == "cg_test" || name == "cg-test") return cg;
    throw UsageError("unknown split: " + name);
  }
  const TextCorpus& split_text(const std::string& name) const {
    if (name == "train") return train_text;
    if (name == "dev") return dev_text;
    if (name == "test") return test_text;
    if (name == "cg_test" || name == "cg-test") return cg_text;
    throw UsageError("unknown split: " + name);
  }
};

// ---------------------------------------------------------------------------
// Metrics log: CSV `epoch,phase,train_loss,dev_loss,seconds`, one row per
// optimizer epoch plus rows for the extraction and clustering phases.
// ---------------------------------------------------------------------------

struct MetricsRow {
  int epoch = 0;
  std::string phase;
  std::optional<double> train_loss, dev_loss;
  double seconds = 0.0;
};

struct MetricsLog {
  std::vector<MetricsRow> rows;

  int optimizer_epochs() const {
    int n = 0;
    for (const auto& r : rows) n += r.train_loss.has_value() ? 1 : 0;
    return n;
  }

  void save(const std::string& path) const {
    atomic_write_file(path, [&](std::ostream& os) {
      os << "epoch,phase,train_loss,dev_loss,seconds\n";
      for (const auto& r : rows) {
        os << r.epoch << "," << r.phase << ",";
        if (r.train_loss) os << detail::fixed6(*r.train_loss);
        os << ",";
        if (r.dev_loss) os << detail::fixed6(*r.dev_loss);
        os << "," << std::fixed << std::setprecision(3) << r.seconds << "\n";
      }
    }, /*binary=*/false);
  }
};

// ---------------------------------------------------------------------------
// Beam search. The stepper abstracts the scoring model: it owns a copyable
// decoding state, consumes one token and returns next-token logits.
// ---------------------------------------------------------------------------

inline double length_penalized_score(double logp, size_t length, double alpha) {
  return logp / std::pow(static_cast<double>(length), alpha);
}

struct FinishedHypothesis {
  std::vector<int> tokens;  // generated tokens, ending with EOS
  double logp = 0.0;
};

struct BeamResult {
  std::vector<int> tokens;
  double logp = 0.0;
  double score = 0.0;
  std::vector<FinishedHypothesis> finished;  // full retained pool
};

namespace detail {
inline std::vector<double> log_softmax(const std::vector<float>& logits) {
  double mx = logits[0];
  for (float v : logits) mx = std::max(mx, static_cast<double>(v));
  double denom = 0.0;
  for (float v : logits) denom += std::exp(static_cast<double>(v) - mx);
  double log_denom = std::log(denom) + mx;
  std::vector<double> out(logits.size());
  for (size_t i = 0; i < logits.size(); ++i)
    out[i] = static_cast<double>(logits[i]) - log_denom;
  return out;
}
}  // namespace detail

/// Standard beam search with a length-penalized score logp / len^alpha.
/// EOS-terminated hypotheses move to a finished pool; at max_len the
/// remaining beams are EOS-forced, so a sequence is always returned.
template <typename Stepper>
BeamResult beam_search(Stepper& stepper, int bos_id, int eos_id,
                       const DecodeConfig& cfg, int max_len) {
  cfg.validate();
  if (max_len < 1) throw UsageError("beam_search: max_len must be >= 1");

  struct LiveHyp {
    std::vector<int> tokens;
    double logp = 0.0;
    typename Stepper::State state;
    std::vector<double> next_logprobs;
  };
  std::vector<LiveHyp> live(1);
  live[0].state = stepper.initial();
  live[0].next_logprobs = detail::log_softmax(stepper.step(live[0].state, bos_id));
  std::vector<FinishedHypothesis> finished;

  // EOS occupies the last slot of the budget, so real tokens stop one early.
  int real_token_budget = max_len - 1;
  for (int pos = 0; pos < real_token_budget && !live.empty(); ++pos) {
    struct Cand {
      size_t hyp;
      int token;
      double logp;
    };
    std::vector<Cand> cands;
    for (size_t h = 0; h < live.size(); ++h)
      for (size_t v = 0; v < live[h].next_logprobs.size(); ++v)
        cands.push_back(Cand{h, static_cast<int>(v),
                             live[h].logp + live[h].next_logprobs[v]});
    size_t keep = std::min(cands.size(), static_cast<size_t>(cfg.beam) * 2);
    std::partial_sort(cands.begin(), cands.begin() + keep, cands.end(),
                      [](const Cand& a, const Cand& b) {
                        if (a.logp != b.logp) return a.logp > b.logp;
                        if (a.hyp != b.hyp) return a.hyp < b.hyp;
                        return a.token < b.token;
                      });
    cands.resize(keep);

    std::vector<LiveHyp> next_live;
    for (size_t rank = 0; rank < cands.size(); ++rank) {
      const auto& c = cands[rank];
      if (c.token == eos_id) {
        // only hypotheses ranked inside the beam may finish; with beam = 1
        // this is exactly greedy termination
        if (rank < static_cast<size_t>(cfg.beam)) {
          FinishedHypothesis f;
          f.tokens = live[c.hyp].tokens;
          f.tokens.push_back(eos_id);
          f.logp = c.logp;
          finished.push_back(std::move(f));
        }
        continue;
      }
      if (next_live.size() >= static_cast<size_t>(cfg.beam)) continue;
      LiveHyp h;
      h.tokens = live[c.hyp].tokens;
      h.tokens.push_back(c.token);
      h.logp = c.logp;
      h.state = live[c.hyp].state;
      h.next_logprobs = detail::log_softmax(stepper.step(h.state, c.token));
      next_live.push_back(std::move(h));
    }
    live = std::move(next_live);
  }
  // budget exhausted: force EOS on whatever is still alive
  for (auto& h : live) {
    FinishedHypothesis f;
    f.tokens = std::move(h.tokens);
    f.tokens.push_back(eos_id);
    f.logp = h.logp + h.next_logprobs[eos_id];
    finished.push_back(std::move(f));
  }

  BeamResult best;
  bool first = true;
  for (const auto& f : finished) {
    double score = length_penalized_score(f.logp, f.tokens.size(),
                                          cfg.length_penalty);
    if (first || score > best.score) {
      best.tokens = f.tokens;
      best.logp = f.logp;
      best.score = score;
      first = false;
    }
  }
  best.finished = std::move(finished);
  return best;
}

template <typename Real>
struct ModelStepper {
  Model<Real>* model;
  const Tensor<Real>* enc_out;
  using State = DecodeState<Real>;
  State initial() { return model->begin_decode(*enc_out); }
  std::vector<float> step(State& st, int token) {
    auto logits = model->decode_step(st, token);
    return std::vector<float>(logits.begin(), logits.end());
  }
};

/// Beam-decodes every sentence of a split against an immutable model.
/// Sentences decode independently (parallel over the pool); outputs keep the
/// input order. Returned sequences include the final EOS.
template <typename Real>
std::vector<std::vector<int>> decode_corpus(
    Model<Real>& model, const std::vector<std::vector<int>>& src,
    const DecodeConfig& cfg, ThreadPool* pool = nullptr) {
  cfg.validate();
  std::vector<std::vector<int>> out(src.size());
  auto run_one = [&](size_t s) {
    ForwardCtx<Real> ctx;
    auto enc = model.encode(ctx, src[s]);
    ModelStepper<Real> stepper{&model, &enc};
    int max_len = cfg.max_len > 0 ? cfg.max_len
                                  : static_cast<int>(src[s].size()) + 8;
    max_len = std::min(max_len, model.config().max_len - 1);
    auto res = beam_search(stepper, Vocabulary::kBos, Vocabulary::kEos, cfg,
                           max_len);
    out[s] = std::move(res.tokens);
  };
  if (pool)
    pool->parallel_for(src.size(), run_one);
  else
    for (size_t s = 0; s < src.size(); ++s) run_one(s);
  return out;
}

inline std::vector<std::vector<std::string>> ids_to_tokens(
    const std::vector<std::vector<int>>& ids, const Vocabulary& vocab) {
  std::vector<std::vector<std::string>> out;
  out.reserve(ids.size());
  for (const auto& sent : ids) {
    std::vector<std::string> toks;
    for (int id : sent) {
      if (id == Vocabulary::kEos || id == Vocabulary::kBos ||
          id == Vocabulary::kPad)
        continue;
      toks.push_back(vocab.token(id));
    }
    out.push_back(std::move(toks));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trainer: per-epoch deterministic shuffling, per-sentence tapes with
// gradients accumulated in sentence order, Adam with the warmup/inverse-sqrt
// schedule. Dev-set evaluation and extraction run in eval mode.
// ---------------------------------------------------------------------------

template <typename Real>
class Trainer {
 public:
  Trainer(Model<Real>& model, Adam<Real>& adam, const TrainingConfig& cfg,
          ThreadPool* pool)
      : model_(model), adam_(adam), cfg_(cfg), pool_(pool) {}

  /// One epoch over the corpus; returns the mean per-token training loss.
  double run_epoch(const ParallelCorpus& corpus, int epoch_number) {
    auto batches = batchify(corpus, cfg_.batch_size, cfg_.seed, epoch_number);
    double loss_sum = 0.0;
    long long token_sum = 0;
    int batch_index = 0;
    for (const auto& batch : batches) {
      long long batch_tokens = 0;
      for (const auto& t : batch.tgt)
        batch_tokens += static_cast<long long>(t.size()) + 1;  // includes EOS
      model_.params().zero_grad();
      for (size_t i = 0; i < batch.size(); ++i) {
        uint64_t stream = (static_cast<uint64_t>(epoch_number) << 40) ^
                          (static_cast<uint64_t>(batch_index) << 20) ^
                          static_cast<uint64_t>(i);
        Rng drop_rng(Rng::derive(cfg_.seed, stream));
        Tape<Real> tape;
        ForwardCtx<Real> ctx;
        ctx.tape = &tape;
        ctx.rng = &drop_rng;
        ctx.training = true;
        ctx.dropout_rate = model_.config().dropout;
        auto loss = model_.forward_loss(ctx, batch.src[i], batch.tgt[i],
                                        Vocabulary::kBos, Vocabulary::kEos);
        loss_sum += static_cast<double>(loss.value()[0]);
        auto scaled = scale(&tape, loss, Real(1.0 / batch_tokens));
        tape.backward(scaled);
      }
      token_sum += batch_tokens;
      double lr = lr_schedule(cfg_.base_lr, cfg_.lr_warmup_steps,
                              adam_.step_count() + 1);
      adam_.step(model_.params(), lr);
      ++batch_index;
    }
    return loss_sum / static_cast<double>(token_sum);
  }

  /// Mean per-token label-smoothed loss, dropout disabled.
  double evaluate_loss(const ParallelCorpus& corpus) {
    std::vector<double> sums(corpus.size());
    std::vector<long long> counts(corpus.size());
    auto run_one = [&](size_t i) {
      ForwardCtx<Real> ctx;
      auto loss = model_.forward_loss(ctx, corpus.src[i], corpus.tgt[i],
                                      Vocabulary::kBos, Vocabulary::kEos);
      sums[i] = static_cast<double>(loss.value()[0]);
      counts[i] = static_cast<long long>(corpus.tgt[i].size()) + 1;
    };
    if (pool_)
      pool_->parallel_for(corpus.size(), run_one);
    else
      for (size_t i = 0; i < corpus.size(); ++i) run_one(i);
    double total = 0.0;
    long long tokens = 0;
    for (size_t i = 0; i < corpus.size(); ++i) {
      total += sums[i];
      tokens += counts[i];
    }
    return total / static_cast<double>(tokens);
  }

 private:
  Model<Real>& model_;
  Adam<Real>& adam_;
  TrainingConfig cfg_;
  ThreadPool* pool_;
};

// ---------------------------------------------------------------------------
// The two-stage procedure and its variants.
// ---------------------------------------------------------------------------

struct RunResult {
  std::string final_checkpoint;
  std::string stage1_checkpoint;
  std::string protos_file;
  MetricsLog log;
  uint64_t table_checksum_before = 0;
  uint64_t table_checksum_after = 0;
  double final_dev_loss = 0.0;
};

template <typename Real>
std::vector<std::vector<Real>> snapshot_params(const Model<Real>& model) {
  std::vector<std::vector<Real>> snap;
  for (const auto& item : model.params().items()) snap.push_back(item.tensor.value());
  return snap;
}

template <typename Real>
void restore_params(Model<Real>& model, const std::vector<std::vector<Real>>& snap) {
  auto& items = model.params().items();
  if (snap.size() != items.size())
    throw std::logic_error("parameter snapshot does not match the model");
  for (size_t i = 0; i < items.size(); ++i) items[i].tensor.value() = snap[i];
}

class PipelineTimer {
 public:
  PipelineTimer() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                         start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

/// Runs one full experiment in the requested mode and writes checkpoints,
/// the prototype store (clustered modes) and the metrics log under
/// cfg.out_dir. Phase wall-clock is recorded in the log's seconds column.
template <typename Real = float>
class ExperimentRunner {
 public:
  ExperimentRunner(Dataset& data, ModelConfig model_cfg, TrainingConfig cfg,
                   ThreadPool* pool)
      : data_(data), model_cfg_(model_cfg), cfg_(cfg), pool_(pool) {
    cfg_.validate();
    model_cfg_.src_vocab = data_.src_vocab.size();
    model_cfg_.tgt_vocab = data_.tgt_vocab.size();
    model_cfg_.prototype_mode = PrototypeMode::off;
    model_cfg_.validate();
  }

  /// Stage 1 / baseline training: N epochs of cross-entropy on a
  /// prototype-free model.
  Model<Real> train_stage1(int n_epochs, Adam<Real>& adam, MetricsLog& log,
                           const std::string& phase, uint64_t init_seed) {
    if (n_epochs < 1) throw UsageError("stage 1 requires at least one epoch");
    Model<Real> model(model_cfg_, init_seed);
    stamp_lineage(model);
    Trainer<Real> trainer(model, adam, cfg_, pool_);
    for (int e = 1; e <= n_epochs; ++e) {
      PipelineTimer t;
      double train_loss = trainer.run_epoch(data_.train, e);
      double dev_loss = trainer.evaluate_loss(data_.dev);
      log.rows.push_back(MetricsRow{e, phase, train_loss, dev_loss, t.seconds()});
    }
    return model;
  }

  /// Extraction + clustering from a trained base model.
  PrototypeTable extract_and_cluster(Model<Real>& model, MetricsLog& log,
                                     int at_epoch) {
    ExclusionPolicy policy;
    policy.punctuation_ids = data_.src_vocab.punctuation_ids();
    policy.min_frequency = cfg_.proto_min_freq;
    PipelineTimer te;
    auto store = extract_representations(model, data_.train.src, policy, pool_);
    log.rows.push_back(
        MetricsRow{at_epoch, "extract", std::nullopt, std::nullopt, te.seconds()});
    PipelineTimer tc;
    auto table =
        build_prototype_table(store, model_cfg_.num_prototypes, cfg_.seed, pool_);
    table.vocab_checksum = data_.src_vocab.checksum();
    table.model_checksum = model.checksum();
    table.corpus_checksum = data_.train_checksum;
    log.rows.push_back(
        MetricsRow{at_epoch, "cluster", std::nullopt, std::nullopt, tc.seconds()});
    return table;
  }

  /// Stage 2: joint training of the extended model; prototypes stay frozen in
  /// clustered modes and train as parameters in random-proto mode. Tracks the
  /// best dev loss and restores it at the end (checkpoint selection).
  void train_stage2(Model<Real>& model, Adam<Real>& adam, int first_epoch,
                    int last_epoch, MetricsLog& log, const std::string& phase,
                    RunResult& result) {
    Trainer<Real> trainer(model, adam, cfg_, pool_);
    double best_dev = std::numeric_limits<double>::infinity();
    auto best_snap = snapshot_params(model);
    for (int e = first_epoch; e <= last_epoch; ++e) {
      PipelineTimer t;
      double train_loss = trainer.run_epoch(data_.train, e);
      double dev_loss = trainer.evaluate_loss(data_.dev);
      log.rows.push_back(MetricsRow{e, phase, train_loss, dev_loss, t.seconds()});
      if (dev_loss < best_dev) {
        best_dev = dev_loss;
        best_snap = snapshot_params(model);
      }
    }
    restore_params(model, best_snap);
    result.final_dev_loss = best_dev;
  }

  /// Verifies that a prototype table matches the vocabulary, the training
  /// corpus and the model it was extracted from.
  void check_table_lineage(const PrototypeTable& table,
                           uint64_t extractor_checksum) const {
    if (table.vocab_checksum != data_.src_vocab.checksum())
      throw IncompatibleError("prototype table vocabulary checksum mismatch");
    if (table.corpus_checksum != data_.train_checksum)
      throw IncompatibleError("prototype table corpus checksum mismatch");
    if (extractor_checksum != 0 && table.model_checksum != extractor_checksum)
      throw IncompatibleError(
          "prototype table was extracted from a different model");
  }

  /// Random trainable prototypes for every non-excluded token.
  PrototypeTable random_table(uint64_t seed) const {
    ExclusionPolicy policy;
    policy.punctuation_ids = data_.src_vocab.punctuation_ids();
    policy.min_frequency = cfg_.proto_min_freq;
    std::map<int, size_t> freq;
    for (const auto& s : data_.train.src)
      for (int id : s) freq[id] += 1;
    PrototypeTable table;
    table.k = model_cfg_.num_prototypes;
    table.d = model_cfg_.d_model;
    table.vocab_checksum = data_.src_vocab.checksum();
    table.corpus_checksum = data_.train_checksum;
    Rng rng(Rng::derive(seed, 777));
    for (const auto& [id, n] : freq) {
      if (id < 4 || policy.punctuation_ids.count(id)) continue;
      if (n < static_cast<size_t>(policy.min_frequency)) continue;
      std::vector<float> flat(static_cast<size_t>(table.k) * table.d);
      for (auto& v : flat) v = static_cast<float>(rng.normal());
      table.rows[id] = std::move(flat);
    }
    return table;
  }

  RunResult run() {
    namespace fs = std::filesystem;
    fs::create_directories(cfg_.out_dir);
    data_.src_vocab.save(cfg_.out_dir + "/vocab.src.txt");
    data_.tgt_vocab.save(cfg_.out_dir + "/vocab.tgt.txt");
    RunResult result;
    Adam<Real> adam(AdamConfig{cfg_.base_lr, cfg_.adam_beta1, cfg_.adam_beta2,
                               cfg_.adam_eps});

    if (cfg_.mode == "baseline") {
      Model<Real> model(model_cfg_, cfg_.seed);
      stamp_lineage(model);
      train_stage2(model, adam, 1, cfg_.epochs, result.log, "train", result);
      result.final_checkpoint = cfg_.out_dir + "/final.ckpt";
      model.save_checkpoint(result.final_checkpoint);
    } else if (cfg_.mode == "one-pass" || cfg_.mode == "random-proto") {
      int n = cfg_.warmup_epochs;
      auto model = train_stage1(n, adam, result.log, "stage1", cfg_.seed);
      result.stage1_checkpoint =
          cfg_.out_dir + "/stage1_epoch" + std::to_string(n) + ".ckpt";
      model.save_checkpoint(result.stage1_checkpoint);
      uint64_t stage1_checksum = model.checksum();

      PrototypeTable table;
      bool frozen = cfg_.mode == "one-pass";
      if (frozen) {
        table = extract_and_cluster(model, result.log, n);
        check_table_lineage(table, stage1_checksum);
        result.protos_file = cfg_.out_dir + "/protos.bin";
        save_table(table, result.protos_file);
      } else {
        table = random_table(cfg_.seed);
      }
      model.attach_prototype_attention(frozen
                                           ? PrototypeMode::clustered_frozen
                                           : PrototypeMode::random_trainable,
                                       cfg_.seed);
      model.set_prototype_entries(table.rows, table.k, table.d);
      result.table_checksum_before = current_table_checksum(model, table);
      train_stage2(model, adam, n + 1, cfg_.epochs, result.log,
                   "stage2", result);
      result.table_checksum_after = current_table_checksum(model, table);
      result.final_checkpoint = cfg_.out_dir + "/final.ckpt";
      model.save_checkpoint(result.final_checkpoint);
    } else {  // two-pass
      // pass 1: the converged base model, with best-dev checkpoint selection
      Model<Real> base(model_cfg_, cfg_.seed);
      stamp_lineage(base);
      RunResult pass1;
      train_stage2(base, adam, 1, cfg_.epochs, result.log, "pass1", pass1);
      result.stage1_checkpoint = cfg_.out_dir + "/pass1.ckpt";
      base.save_checkpoint(result.stage1_checkpoint);
      auto table = extract_and_cluster(base, result.log, cfg_.epochs);
      check_table_lineage(table, base.checksum());
      result.protos_file = cfg_.out_dir + "/protos.bin";
      save_table(table, result.protos_file);

      ModelConfig proto_cfg = model_cfg_;
      proto_cfg.prototype_mode = PrototypeMode::clustered_frozen;
      Model<Real> model(proto_cfg, Rng::derive(cfg_.seed, 2));
      stamp_lineage(model);
      model.set_prototype_entries(table.rows, table.k, table.d);
      result.table_checksum_before = current_table_checksum(model, table);
      Adam<Real> adam2(AdamConfig{cfg_.base_lr, cfg_.adam_beta1, cfg_.adam_beta2,
                                  cfg_.adam_eps});
      train_stage2(model, adam2, 1, cfg_.epochs, result.log, "pass2", result);
      result.table_checksum_after = current_table_checksum(model, table);
      result.final_checkpoint = cfg_.out_dir + "/final.ckpt";
      model.save_checkpoint(result.final_checkpoint);
    }
    result.log.save(cfg_.out_dir + "/metrics.csv");
    return result;
  }

  /// Behavior-preserving attachment, exposed for tests and the extract CLI.
  Model<Real> attach_to_checkpoint(const std::string& ckpt_path,
                                   const PrototypeTable& table,
                                   PrototypeMode mode) {
    auto model = Model<Real>::load_checkpoint(ckpt_path);
    if (model.config().prototype_mode != PrototypeMode::off)
      throw UsageError("checkpoint already contains prototype-attention");
    model.attach_prototype_attention(mode, cfg_.seed);
    model.set_prototype_entries(table.rows, table.k, table.d);
    return model;
  }

 private:
  void stamp_lineage(Model<Real>& model) {
    model.extra_meta()["vocab_src_checksum"] =
        std::to_string(data_.src_vocab.checksum());
    model.extra_meta()["vocab_tgt_checksum"] =
        std::to_string(data_.tgt_vocab.checksum());
    model.extra_meta()["train_corpus_checksum"] =
        std::to_string(data_.train_checksum);
    model.extra_meta()["mode"] = cfg_.mode;
    model.extra_meta()["seed"] = std::to_string(cfg_.seed);
  }

  uint64_t current_table_checksum(const Model<Real>& model,
                                  const PrototypeTable& table) const {
    PrototypeTable current = table;
    current.rows = model.prototype_entries();
    return current.checksum();
  }

  Dataset& data_;
  ModelConfig model_cfg_;
  TrainingConfig cfg_;
  ThreadPool* pool_;
};

}  // namespace protonmt
