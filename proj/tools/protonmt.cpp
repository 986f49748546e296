// SPDX-License-Identifier: Apache-2.0
//
// protonmt: command-line driver for the prototype-attention NMT experiments.
// Subcommands: gen-data, train, extract-protos, decode, evaluate, ablate-k.
//
// Every stochastic stage derives its randomness from the single --seed, and
// all artifacts are written atomically, so re-running a command with the same
// inputs reproduces its outputs byte-for-byte (the metrics log's wall-clock
// seconds column being the one documented exception).

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "protonmt/data.hpp"
#include "protonmt/eval.hpp"
#include "protonmt/model.hpp"
#include "protonmt/pipeline.hpp"
#include "protonmt/prototypes.hpp"
#include "protonmt/thread_pool.hpp"

namespace pm = protonmt;

namespace {

// ---------------------------------------------------------------------------
// RunConfig: a flat key=value registry merged from (defaults, config file,
// --set overrides). Unknown keys are rejected.
// ---------------------------------------------------------------------------

struct RunConfig {
  pm::ModelConfig model;
  pm::TrainingConfig train;
  pm::DecodeConfig decode;
  pm::GenConfig gen;
  std::string decode_split = "cg_test";
  uint64_t seed = 1;
  int threads = 1;

  using Setter = std::function<void(RunConfig&, const std::string&)>;
  using Getter = std::function<std::string(const RunConfig&)>;
  struct Key {
    Setter set;
    Getter get;
  };

  static const std::map<std::string, Key>& registry() {
    static const std::map<std::string, Key> reg = build_registry();
    return reg;
  }

  void set(const std::string& key, const std::string& value) {
    auto it = registry().find(key);
    if (it == registry().end())
      throw pm::UsageError("unknown configuration key: " + key);
    try {
      it->second.set(*this, value);
    } catch (const pm::UsageError&) {
      throw;
    } catch (const std::exception&) {
      throw pm::UsageError("invalid value for " + key + ": " + value);
    }
  }

  void load_file(const std::string& path) {
    for (const auto& [k, v] : pm::kv_from_string(pm::read_file(path))) set(k, v);
  }

  pm::KvMap resolved() const {
    pm::KvMap kv;
    for (const auto& [name, key] : registry()) kv[name] = key.get(*this);
    return kv;
  }

 private:
  static std::map<std::string, Key> build_registry() {
    std::map<std::string, Key> reg;
    auto add = [&reg](const std::string& name, Setter s, Getter g) {
      reg[name] = Key{std::move(s), std::move(g)};
    };
    add("model.d_model",
        [](RunConfig& c, const std::string& v) { c.model.d_model = std::stoi(v); },
        [](const RunConfig& c) { return std::to_string(c.model.d_model); });
    add("model.n_heads",
        [](RunConfig& c, const std::string& v) { c.model.n_heads = std::stoi(v); },
        [](const RunConfig& c) { return std::to_string(c.model.n_heads); });
    add("model.n_encoder_layers",
        [](RunConfig& c, const std::string& v) {
          c.model.n_encoder_layers = std::stoi(v);
        },
        [](const RunConfig& c) {
          return std::to_string(c.model.n_encoder_layers);
        });
    add("model.n_decoder_layers",
        [](RunConfig& c, const std::string& v) {
          c.model.n_decoder_layers = std::stoi(v);
        },
        [](const RunConfig& c) {
          return std::to_string(c.model.n_decoder_layers);
        });
    add("model.d_ff",
        [](RunConfig& c, const std::string& v) { c.model.d_ff = std::stoi(v); },
        [](const RunConfig& c) { return std::to_string(c.model.d_ff); });
    add("model.max_len",
        [](RunConfig& c, const std::string& v) { c.model.max_len = std::stoi(v); },
        [](const RunConfig& c) { return std::to_string(c.model.max_len); });
    add("model.dropout",
        [](RunConfig& c, const std::string& v) { c.model.dropout = std::stod(v); },
        [](const RunConfig& c) { return std::to_string(c.model.dropout); });
    add("model.label_smoothing",
        [](RunConfig& c, const std::string& v) {
          c.model.label_smoothing = std::stod(v);
        },
        [](const RunConfig& c) {
          return std::to_string(c.model.label_smoothing);
        });
    add("model.k",
        [](RunConfig& c, const std::string& v) {
          c.model.num_prototypes = std::stoi(v);
        },
        [](const RunConfig& c) { return std::to_string(c.model.num_prototypes); });

    add("train.mode",
        [](RunConfig& c, const std::string& v) { c.train.mode = v; },
        [](const RunConfig& c) { return c.train.mode; });
    add("train.epochs",
        [](RunConfig& c, const std::string& v) { c.train.epochs = std::stoi(v); },
        [](const RunConfig& c) { return std::to_string(c.train.epochs); });
    add("train.warmup_epochs",
        [](RunConfig& c, const std::string& v) {
          c.train.warmup_epochs = std::stoi(v);
        },
        [](const RunConfig& c) { return std::to_string(c.train.warmup_epochs); });
    add("train.batch_size",
        [](RunConfig& c, const std::string& v) {
          c.train.batch_size = std::stoi(v);
        },
        [](const RunConfig& c) { return std::to_string(c.train.batch_size); });
    add("train.base_lr",
        [](RunConfig& c, const std::string& v) { c.train.base_lr = std::stod(v); },
        [](const RunConfig& c) { return std::to_string(c.train.base_lr); });
    add("train.lr_warmup_steps",
        [](RunConfig& c, const std::string& v) {
          c.train.lr_warmup_steps = std::stoi(v);
        },
        [](const RunConfig& c) {
          return std::to_string(c.train.lr_warmup_steps);
        });
    add("train.vocab_min_freq",
        [](RunConfig& c, const std::string& v) {
          c.train.vocab_min_freq = std::stoi(v);
        },
        [](const RunConfig& c) { return std::to_string(c.train.vocab_min_freq); });
    add("train.proto_min_freq",
        [](RunConfig& c, const std::string& v) {
          c.train.proto_min_freq = std::stoi(v);
        },
        [](const RunConfig& c) { return std::to_string(c.train.proto_min_freq); });

    add("decode.beam",
        [](RunConfig& c, const std::string& v) { c.decode.beam = std::stoi(v); },
        [](const RunConfig& c) { return std::to_string(c.decode.beam); });
    add("decode.length_penalty",
        [](RunConfig& c, const std::string& v) {
          c.decode.length_penalty = std::stod(v);
        },
        [](const RunConfig& c) {
          return std::to_string(c.decode.length_penalty);
        });
    add("decode.max_len",
        [](RunConfig& c, const std::string& v) { c.decode.max_len = std::stoi(v); },
        [](const RunConfig& c) { return std::to_string(c.decode.max_len); });
    add("decode.split",
        [](RunConfig& c, const std::string& v) { c.decode_split = v; },
        [](const RunConfig& c) { return c.decode_split; });

    auto add_gen_int = [&reg](const std::string& name, int pm::GenConfig::*member) {
      reg[name] = Key{[member](RunConfig& c, const std::string& v) {
                        c.gen.*member = std::stoi(v);
                      },
                      [member](const RunConfig& c) {
                        return std::to_string(c.gen.*member);
                      }};
    };
    add_gen_int("gen.train_size", &pm::GenConfig::train_size);
    add_gen_int("gen.dev_size", &pm::GenConfig::dev_size);
    add_gen_int("gen.test_size", &pm::GenConfig::test_size);
    add_gen_int("gen.cg_compounds", &pm::GenConfig::cg_compounds);
    add_gen_int("gen.contexts_per_compound", &pm::GenConfig::contexts_per_compound);
    add_gen_int("gen.heldout_pairs", &pm::GenConfig::heldout_pairs);
    add_gen_int("gen.nouns_per_adj", &pm::GenConfig::nouns_per_adj);
    add_gen_int("gen.num_templates", &pm::GenConfig::num_templates);
    add_gen_int("gen.preferred_templates", &pm::GenConfig::preferred_templates);
    add("gen.rare_pair_fraction",
        [](RunConfig& c, const std::string& v) {
          c.gen.rare_pair_fraction = std::stod(v);
        },
        [](const RunConfig& c) { return std::to_string(c.gen.rare_pair_fraction); });
    add("gen.mod_fraction",
        [](RunConfig& c, const std::string& v) {
          c.gen.mod_fraction = std::stod(v);
        },
        [](const RunConfig& c) { return std::to_string(c.gen.mod_fraction); });
    add("gen.context_bias",
        [](RunConfig& c, const std::string& v) {
          c.gen.context_bias = std::stod(v);
        },
        [](const RunConfig& c) { return std::to_string(c.gen.context_bias); });

    add("seed",
        [](RunConfig& c, const std::string& v) { c.seed = std::stoull(v); },
        [](const RunConfig& c) { return std::to_string(c.seed); });
    add("threads",
        [](RunConfig& c, const std::string& v) { c.threads = std::stoi(v); },
        [](const RunConfig& c) { return std::to_string(c.threads); });
    return reg;
  }
};

void echo_resolved(const RunConfig& cfg, const pm::KvMap& extra,
                   const std::string& path) {
  pm::KvMap kv = cfg.resolved();
  for (const auto& [k, v] : extra) kv["path." + k] = v;
  pm::atomic_write_text(path, pm::kv_to_string(kv));
}

int resolve_threads(const RunConfig& cfg, bool thread_flag_given) {
  if (thread_flag_given) return cfg.threads;
  if (const char* env = std::getenv("PROTO_NMT_THREADS")) {
    try {
      return std::max(1, std::stoi(env));
    } catch (const std::exception&) {
      throw pm::UsageError("PROTO_NMT_THREADS is not an integer");
    }
  }
  return cfg.threads;
}

// ---------------------------------------------------------------------------
// Subcommand bodies.
// ---------------------------------------------------------------------------

void cmd_gen_data(const RunConfig& cfg, const std::string& out_dir) {
  auto rules = pm::GenerationRules::standard();
  auto bench = pm::generate_benchmark(rules, cfg.gen, cfg.seed);
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  pm::save_corpus(bench.train, out_dir + "/train.tsv");
  pm::save_corpus(bench.dev, out_dir + "/dev.tsv");
  pm::save_corpus(bench.test, out_dir + "/test.tsv");
  pm::save_corpus(bench.cg_test, out_dir + "/cg_test.tsv");
  pm::save_dictionary(bench.dictionary, out_dir + "/compounds.tsv");
  pm::KvMap rules_kv = rules.to_kv();
  for (const auto& [k, v] : cfg.gen.to_kv()) rules_kv["gen." + k] = v;
  rules_kv["seed"] = std::to_string(cfg.seed);
  pm::atomic_write_text(out_dir + "/rules.kv", pm::kv_to_string(rules_kv));
  echo_resolved(cfg, {{"out", out_dir}}, out_dir + "/resolved.kv");
  std::cout << "gen-data: wrote " << bench.train.size() << " train / "
            << bench.dev.size() << " dev / " << bench.test.size() << " test / "
            << bench.cg_test.size() << " cg-test pairs to " << out_dir << "\n";
}

void cmd_train(const RunConfig& cfg_in, const std::string& data_dir,
               const std::string& out_dir, int threads) {
  RunConfig cfg = cfg_in;
  cfg.train.out_dir = out_dir;
  cfg.train.seed = cfg.seed;
  cfg.train.validate();
  auto data = pm::Dataset::load(data_dir, cfg.train.vocab_min_freq);
  pm::ThreadPool pool(threads);
  pm::ExperimentRunner<float> runner(data, cfg.model, cfg.train, &pool);
  auto result = runner.run();
  echo_resolved(cfg, {{"data", data_dir}, {"out", out_dir}},
                out_dir + "/resolved.kv");
  std::cout << "train: mode=" << cfg.train.mode
            << " optimizer_epochs=" << result.log.optimizer_epochs()
            << " best_dev_loss=" << pm::detail::fixed6(result.final_dev_loss)
            << "\n";
  for (const auto& row : result.log.rows)
    if (!row.train_loss)
      std::cerr << "phase " << row.phase << ": " << row.seconds << " s\n";
}

void cmd_extract_protos(const RunConfig& cfg, const std::string& data_dir,
                        const std::string& checkpoint, const std::string& out,
                        int threads) {
  auto data = pm::Dataset::load(data_dir, cfg.train.vocab_min_freq);
  auto model = pm::Model<float>::load_checkpoint(checkpoint);
  auto meta = model.extra_meta();
  if (meta.count("vocab_src_checksum") &&
      meta["vocab_src_checksum"] != std::to_string(data.src_vocab.checksum()))
    throw pm::IncompatibleError(
        "checkpoint was trained against a different source vocabulary");
  pm::ExclusionPolicy policy;
  policy.punctuation_ids = data.src_vocab.punctuation_ids();
  policy.min_frequency = cfg.train.proto_min_freq;
  pm::ThreadPool pool(threads);
  auto store = pm::extract_representations(model, data.train.src, policy, &pool);
  auto table = pm::build_prototype_table(store, cfg.model.num_prototypes,
                                         cfg.seed, &pool);
  table.vocab_checksum = data.src_vocab.checksum();
  table.model_checksum = model.checksum();
  table.corpus_checksum = data.train_checksum;
  pm::save_table(table, out);
  echo_resolved(cfg, {{"data", data_dir}, {"checkpoint", checkpoint}, {"out", out}},
                out + ".resolved.kv");
  std::cout << "extract-protos: " << table.rows.size() << " tokens, k="
            << table.k << ", d=" << table.d << " -> " << out << "\n";
}

void cmd_decode(const RunConfig& cfg, const std::string& data_dir,
                const std::string& checkpoint, const std::string& out,
                int threads) {
  auto data = pm::Dataset::load(data_dir, cfg.train.vocab_min_freq);
  auto model = pm::Model<float>::load_checkpoint(checkpoint);
  auto meta = model.extra_meta();
  if (meta.count("vocab_src_checksum") &&
      meta["vocab_src_checksum"] != std::to_string(data.src_vocab.checksum()))
    throw pm::IncompatibleError(
        "checkpoint was trained against a different source vocabulary");
  const auto& split = data.split(cfg.decode_split);
  pm::ThreadPool pool(threads);
  auto ids = pm::decode_corpus(model, split.src, cfg.decode, &pool);
  auto toks = pm::ids_to_tokens(ids, data.tgt_vocab);
  pm::atomic_write_file(out, [&](std::ostream& os) {
    for (const auto& sent : toks) os << pm::join_tokens(sent) << "\n";
  }, /*binary=*/false);
  echo_resolved(cfg, {{"data", data_dir}, {"checkpoint", checkpoint}, {"out", out}},
                out + ".resolved.kv");
  std::cout << "decode: " << toks.size() << " sentences from split "
            << cfg.decode_split << " -> " << out << "\n";
}

std::vector<std::vector<std::string>> load_hypotheses(const std::string& path) {
  std::istringstream is(pm::read_file(path));
  std::vector<std::vector<std::string>> out;
  std::string line;
  while (std::getline(is, line)) out.push_back(pm::split_tokens(line));
  return out;
}

pm::EvalReport evaluate_cg(const pm::Dataset& data,
                           const std::vector<std::vector<std::string>>& hyps,
                           const std::string& model_name) {
  pm::EvalReport report;
  report.model = model_name;
  report.split = "cg_test";
  report.cter = pm::cter(hyps, data.cg_text, data.dictionary);
  std::vector<std::vector<std::string>> refs;
  for (const auto& p : data.cg_text) refs.push_back(p.tgt);
  report.bleu_score = pm::bleu(hyps, refs);
  return report;
}

void cmd_evaluate(const RunConfig& cfg, const std::string& data_dir,
                  const std::string& hyp_file, const std::string& out_dir,
                  const std::string& model_name) {
  auto data = pm::Dataset::load(data_dir, cfg.train.vocab_min_freq);
  auto hyps = load_hypotheses(hyp_file);
  auto report = evaluate_cg(data, hyps, model_name);
  std::filesystem::create_directories(out_dir);
  pm::write_reports({report}, out_dir);
  echo_resolved(cfg, {{"data", data_dir}, {"hyp", hyp_file}, {"out", out_dir}},
                out_dir + "/resolved.kv");
  std::cout << "evaluate: instance_cter="
            << pm::detail::fixed6(report.cter.instance_cter)
            << " aggregate_cter=" << pm::detail::fixed6(report.cter.aggregate_cter)
            << " bleu=" << pm::detail::fixed6(report.bleu_score) << "\n";
}

void cmd_ablate_k(const RunConfig& cfg_in, const std::string& data_dir,
                  const std::string& out_dir, const std::vector<int>& k_values,
                  int threads) {
  if (k_values.empty()) throw pm::UsageError("ablate-k: no k values given");
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  auto data = pm::Dataset::load(data_dir, cfg_in.train.vocab_min_freq);
  pm::ThreadPool pool(threads);

  std::ostringstream csv;
  csv << "k,mode,instance_cter,aggregate_cter,bleu\n";
  for (int k : k_values) {
    if (k < 0) throw pm::UsageError("ablate-k: k must be >= 0");
    RunConfig cfg = cfg_in;
    cfg.train.seed = cfg.seed;
    cfg.train.mode = k == 0 ? "baseline" : "one-pass";
    cfg.train.out_dir = out_dir + "/k" + std::to_string(k);
    if (k > 0) cfg.model.num_prototypes = k;
    cfg.train.validate();
    pm::ExperimentRunner<float> runner(data, cfg.model, cfg.train, &pool);
    auto result = runner.run();
    auto model = pm::Model<float>::load_checkpoint(result.final_checkpoint);
    auto ids = pm::decode_corpus(model, data.cg.src, cfg.decode, &pool);
    auto hyps = pm::ids_to_tokens(ids, data.tgt_vocab);
    auto report = evaluate_cg(data, hyps, "k" + std::to_string(k));
    csv << k << "," << cfg.train.mode << ","
        << pm::detail::fixed6(report.cter.instance_cter) << ","
        << pm::detail::fixed6(report.cter.aggregate_cter) << ","
        << pm::detail::fixed6(report.bleu_score) << "\n";
    std::cout << "ablate-k: k=" << k
              << " instance_cter=" << pm::detail::fixed6(report.cter.instance_cter)
              << "\n";
  }
  pm::atomic_write_text(out_dir + "/ablation.csv", csv.str());
  echo_resolved(cfg_in, {{"data", data_dir}, {"out", out_dir}},
                out_dir + "/resolved.kv");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prototype-attention NMT experiments"};
  app.require_subcommand(1);

  std::string config_file, data_dir, out_path, checkpoint, hyp_file;
  std::string model_name = "model", k_list = "0,1,2,3,4,5";
  std::vector<std::string> overrides;
  RunConfig cfg;
  bool threads_given = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_file, "key=value configuration file");
    sub->add_option("--set", overrides, "override: key=value")->take_all();
    sub->add_option_function<std::string>(
        "--seed", [&](const std::string& v) { cfg.set("seed", v); },
        "global random seed");
    sub->add_option_function<int>(
        "--threads",
        [&](const int& v) {
          cfg.threads = v;
          threads_given = true;
        },
        "internal parallelism cap (env PROTO_NMT_THREADS as fallback)");
  };

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic benchmark");
  gen->add_option("--out", out_path, "dataset directory")->required();
  add_common(gen);

  auto* train = app.add_subcommand("train", "run a training mode end to end");
  train->add_option("--data", data_dir, "dataset directory")->required();
  train->add_option("--out", out_path, "run output directory")->required();
  train->add_option_function<std::string>(
      "--mode", [&](const std::string& v) { cfg.set("train.mode", v); },
      "baseline | one-pass | two-pass | random-proto");
  add_common(train);

  auto* extract = app.add_subcommand("extract-protos",
                                     "extract and cluster prototype tables");
  extract->add_option("--data", data_dir)->required();
  extract->add_option("--checkpoint", checkpoint)->required();
  extract->add_option("--out", out_path, "prototype store file")->required();
  extract->add_option_function<std::string>(
      "--k", [&](const std::string& v) { cfg.set("model.k", v); },
      "prototypes per token");
  add_common(extract);

  auto* decode = app.add_subcommand("decode", "beam-search a split");
  decode->add_option("--data", data_dir)->required();
  decode->add_option("--checkpoint", checkpoint)->required();
  decode->add_option("--out", out_path, "hypothesis file")->required();
  decode->add_option_function<std::string>(
      "--split", [&](const std::string& v) { cfg.set("decode.split", v); },
      "train | dev | test | cg_test");
  decode->add_option_function<std::string>(
      "--beam", [&](const std::string& v) { cfg.set("decode.beam", v); });
  decode->add_option_function<std::string>(
      "--alpha", [&](const std::string& v) { cfg.set("decode.length_penalty", v); });
  add_common(decode);

  auto* evaluate = app.add_subcommand("evaluate", "CTER/BLEU report CSVs");
  evaluate->add_option("--data", data_dir)->required();
  evaluate->add_option("--hyp", hyp_file, "hypothesis file")->required();
  evaluate->add_option("--out", out_path, "report directory")->required();
  evaluate->add_option("--model", model_name, "model name for report rows");
  add_common(evaluate);

  auto* ablate = app.add_subcommand("ablate-k", "CTER against prototype count");
  ablate->add_option("--data", data_dir)->required();
  ablate->add_option("--out", out_path)->required();
  ablate->add_option("--k", k_list, "comma-separated k values (0 = baseline)");
  add_common(ablate);

  try {
    app.parse(argc, argv);
    if (!config_file.empty()) cfg.load_file(config_file);
    for (const auto& kv : overrides) {
      auto eq = kv.find('=');
      if (eq == std::string::npos)
        throw pm::UsageError("--set expects key=value, got: " + kv);
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    int threads = resolve_threads(cfg, threads_given);

    if (gen->parsed()) cmd_gen_data(cfg, out_path);
    if (train->parsed()) cmd_train(cfg, data_dir, out_path, threads);
    if (extract->parsed())
      cmd_extract_protos(cfg, data_dir, checkpoint, out_path, threads);
    if (decode->parsed()) cmd_decode(cfg, data_dir, checkpoint, out_path, threads);
    if (evaluate->parsed())
      cmd_evaluate(cfg, data_dir, hyp_file, out_path, model_name);
    if (ablate->parsed()) {
      std::vector<int> ks;
      std::istringstream ks_in(k_list);
      std::string item;
      while (std::getline(ks_in, item, ',')) ks.push_back(std::stoi(item));
      cmd_ablate_k(cfg, data_dir, out_path, ks, threads);
    }
    return 0;
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const pm::IncompatibleError& e) {
    std::cerr << "error (incompatible artifacts): " << e.what() << "\n";
    return 2;
  } catch (const pm::UsageError& e) {
    std::cerr << "error (usage): " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
