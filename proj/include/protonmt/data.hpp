// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "protonmt/rng.hpp"
#include "protonmt/serialize.hpp"

namespace protonmt {

// ---------------------------------------------------------------------------
// Vocabulary with reserved ids and per-token punctuation/frequency metadata.
// ---------------------------------------------------------------------------

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;

  Vocabulary() {
    for (const char* t : {"<pad>", "<bos>", "<eos>", "<unk>"}) add(t, 0, false);
  }

  int add(const std::string& tok, int64_t freq, bool punct) {
    auto it = tok_to_id_.find(tok);
    if (it != tok_to_id_.end()) return it->second;
    int id = static_cast<int>(tokens_.size());
    tok_to_id_[tok] = id;
    tokens_.push_back(tok);
    freq_.push_back(freq);
    punct_.push_back(punct ? 1 : 0);
    return id;
  }

  int size() const { return static_cast<int>(tokens_.size()); }

  /// Token id, or UNK for out-of-vocabulary tokens.
  int id(const std::string& tok) const {
    auto it = tok_to_id_.find(tok);
    return it == tok_to_id_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& tok) const { return tok_to_id_.count(tok) > 0; }

  const std::string& token(int id) const { return tokens_.at(id); }
  int64_t frequency(int id) const { return freq_.at(id); }
  bool is_punctuation(int id) const { return punct_.at(id) != 0; }

  std::set<int> punctuation_ids() const {
    std::set<int> out;
    for (int i = 0; i < size(); ++i)
      if (punct_[i]) out.insert(i);
    return out;
  }

  uint64_t checksum() const {
    uint64_t h = fnv1a_init();
    for (int i = 0; i < size(); ++i) {
      h = fnv1a(h, tokens_[i]);
      h = fnv1a_pod(h, freq_[i]);
      h = fnv1a_pod(h, punct_[i]);
    }
    return h;
  }

  void save(const std::string& path) const {
    atomic_write_file(path, [&](std::ostream& os) {
      for (int i = 0; i < size(); ++i)
        os << tokens_[i] << "\t" << freq_[i] << "\t" << int(punct_[i]) << "\n";
    }, /*binary=*/false);
  }

  static Vocabulary load(const std::string& path) {
    std::istringstream is(read_file(path));
    Vocabulary v;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      std::istringstream ls(line);
      std::string tok;
      int64_t freq;
      int punct;
      if (!(ls >> tok >> freq >> punct))
        throw IncompatibleError("malformed vocabulary line: " + line);
      if (lineno < 4) {
        v.freq_[lineno] = freq;  // reserved ids are pre-seeded
      } else {
        v.add(tok, freq, punct != 0);
      }
      ++lineno;
    }
    return v;
  }

 private:
  std::vector<std::string> tokens_;
  std::vector<int64_t> freq_;
  std::vector<uint8_t> punct_;
  std::unordered_map<std::string, int> tok_to_id_;
};

// ---------------------------------------------------------------------------
// Corpora: tokenized text pairs and their numericalized form.
// ---------------------------------------------------------------------------

struct TextPair {
  std::vector<std::string> src, tgt;
};
using TextCorpus = std::vector<TextPair>;

struct ParallelCorpus {
  std::vector<std::vector<int>> src, tgt;
  std::string split;

  size_t size() const { return src.size(); }
};

inline std::string join_tokens(const std::vector<std::string>& toks) {
  std::string out;
  for (size_t i = 0; i < toks.size(); ++i) {
    if (i) out += ' ';
    out += toks[i];
  }
  return out;
}

inline std::vector<std::string> split_tokens(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

inline void save_corpus(const TextCorpus& corpus, const std::string& path) {
  atomic_write_file(path, [&](std::ostream& os) {
    for (const auto& pair : corpus)
      os << join_tokens(pair.src) << "\t" << join_tokens(pair.tgt) << "\n";
  }, /*binary=*/false);
}

inline TextCorpus load_corpus(const std::string& path) {
  std::istringstream is(read_file(path));
  TextCorpus corpus;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw IncompatibleError("malformed corpus line (no TAB): " + line);
    TextPair pair;
    pair.src = split_tokens(line.substr(0, tab));
    pair.tgt = split_tokens(line.substr(tab + 1));
    if (pair.src.empty() || pair.tgt.empty())
      throw IncompatibleError("empty side in corpus line: " + line);
    corpus.push_back(std::move(pair));
  }
  return corpus;
}

inline uint64_t corpus_checksum(const TextCorpus& corpus) {
  uint64_t h = fnv1a_init();
  for (const auto& pair : corpus) {
    h = fnv1a(h, join_tokens(pair.src));
    h = fnv1a(h, "\t");
    h = fnv1a(h, join_tokens(pair.tgt));
    h = fnv1a(h, "\n");
  }
  return h;
}

/// Builds a vocabulary from one corpus side in first-appearance order.
/// Tokens below min_freq are dropped (they numericalize to UNK).
inline Vocabulary build_vocab(const std::vector<std::vector<std::string>>& side,
                              int min_freq,
                              const std::set<std::string>& punctuation) {
  if (side.empty()) throw UsageError("build_vocab: empty corpus");
  std::unordered_map<std::string, int64_t> freq;
  std::vector<std::string> order;
  for (const auto& sent : side) {
    if (sent.empty()) throw UsageError("build_vocab: empty sentence");
    for (const auto& tok : sent) {
      if (freq.find(tok) == freq.end()) order.push_back(tok);
      freq[tok] += 1;
    }
  }
  Vocabulary v;
  for (const auto& tok : order)
    if (freq[tok] >= min_freq) v.add(tok, freq[tok], punctuation.count(tok) > 0);
  return v;
}

inline ParallelCorpus numericalize(const TextCorpus& text, const Vocabulary& src_v,
                                   const Vocabulary& tgt_v,
                                   const std::string& split) {
  ParallelCorpus out;
  out.split = split;
  for (const auto& pair : text) {
    std::vector<int> s, t;
    for (const auto& tok : pair.src) s.push_back(src_v.id(tok));
    for (const auto& tok : pair.tgt) t.push_back(tgt_v.id(tok));
    out.src.push_back(std::move(s));
    out.tgt.push_back(std::move(t));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batches: deterministic per-epoch shuffling, PAD-padded id blocks plus the
// padding masks, and the per-sentence views the trainer consumes.
// ---------------------------------------------------------------------------

struct Batch {
  std::vector<std::vector<int>> src, tgt;   // unpadded sentences
  std::vector<int> src_padded, tgt_padded;  // row-major [size x width]
  std::vector<uint8_t> src_mask, tgt_mask;  // 1 = real token, 0 = PAD
  int src_width = 0, tgt_width = 0;

  size_t size() const { return src.size(); }
};

inline std::vector<Batch> batchify(const ParallelCorpus& corpus, int batch_size,
                                   uint64_t seed, int epoch) {
  if (batch_size < 1) throw UsageError("batchify: batch size must be >= 1");
  if (corpus.size() == 0) throw UsageError("batchify: empty corpus");
  std::vector<size_t> order(corpus.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(Rng::derive(seed, 0x6A7C0 + static_cast<uint64_t>(epoch)));
  rng.shuffle(order);

  std::vector<Batch> batches;
  for (size_t start = 0; start < order.size(); start += batch_size) {
    Batch b;
    size_t end = std::min(order.size(), start + batch_size);
    for (size_t i = start; i < end; ++i) {
      b.src.push_back(corpus.src[order[i]]);
      b.tgt.push_back(corpus.tgt[order[i]]);
      b.src_width = std::max(b.src_width, static_cast<int>(b.src.back().size()));
      b.tgt_width = std::max(b.tgt_width, static_cast<int>(b.tgt.back().size()));
    }
    size_t n = b.src.size();
    b.src_padded.assign(n * b.src_width, Vocabulary::kPad);
    b.tgt_padded.assign(n * b.tgt_width, Vocabulary::kPad);
    b.src_mask.assign(n * b.src_width, 0);
    b.tgt_mask.assign(n * b.tgt_width, 0);
    for (size_t i = 0; i < n; ++i) {
      for (size_t t = 0; t < b.src[i].size(); ++t) {
        b.src_padded[i * b.src_width + t] = b.src[i][t];
        b.src_mask[i * b.src_width + t] = 1;
      }
      for (size_t t = 0; t < b.tgt[i].size(); ++t) {
        b.tgt_padded[i * b.tgt_width + t] = b.tgt[i][t];
        b.tgt_mask[i * b.tgt_width + t] = 1;
      }
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

// ---------------------------------------------------------------------------
// Generation rules: atom inventories, composition patterns, context
// templates, a bijective source->target lexicon and the reordering rules.
// ---------------------------------------------------------------------------

enum class Pattern { NP, VP, PP };

inline std::string to_string(Pattern p) {
  switch (p) {
    case Pattern::NP: return "NP";
    case Pattern::VP: return "VP";
    case Pattern::PP: return "PP";
  }
  return "NP";
}

inline Pattern pattern_from_string(const std::string& s) {
  if (s == "NP") return Pattern::NP;
  if (s == "VP") return Pattern::VP;
  if (s == "PP") return Pattern::PP;
  throw IncompatibleError("unknown pattern: " + s);
}

struct ModClause {
  std::string pron, verb;
};

enum class WordCat { Det, Adj, Noun, Verb, Prep, ModPron, ModVerb, Filler, Punct };

struct GenerationRules {
  std::vector<std::string> dets, adjs, nouns, verbs, preps;
  std::vector<ModClause> mods;
  std::vector<std::string> names, frame_verbs, time_words, adverbs;
  std::string period = ".";

  std::map<std::string, std::string> lexicon;      // bijective word map
  std::vector<std::string> mod_markers;            // fused target per MOD clause
  std::map<std::string, WordCat> categories;

  /// The fixed inventory used throughout: three compound patterns over a
  /// 12x12 adjective-noun grid with determiners, verbs, prepositions and six
  /// postpositive modifier clauses, plus disjoint filler vocabulary for the
  /// contexts.
  static GenerationRules standard() {
    GenerationRules r;
    r.dets = {"the", "a", "this"};
    r.adjs = {"small", "large", "red", "blue", "old", "new", "happy", "quiet",
              "clever", "heavy", "bright", "strange"};
    r.nouns = {"car", "chair", "dog", "bird", "box", "book", "house", "lamp",
               "coat", "drum", "apple", "window"};
    r.verbs = {"saw", "bought", "found", "took", "sold", "carried", "painted",
               "dropped"};
    r.preps = {"near", "under", "behind", "beside", "inside", "above"};
    r.mods = {{"he", "liked"},    {"she", "wanted"},  {"they", "needed"},
              {"he", "feared"},   {"she", "admired"}, {"they", "borrowed"}};
    r.names = {"tom", "anna", "maria", "peter", "john", "alice", "ben", "clara"};
    r.frame_verbs = {"smiled", "waited", "laughed", "slept", "nodded", "arrived",
                     "shrugged", "paused"};
    r.time_words = {"yesterday", "today", "tonight", "sometimes", "often",
                    "again"};
    r.adverbs = {"quietly", "slowly", "suddenly", "happily", "carefully",
                 "outside"};
    r.finalize();
    return r;
  }

  /// Builds the category map and the synthetic target lexicon (two-syllable
  /// codes assigned in inventory order; MOD clauses map to single fused
  /// "rel.." tokens placed prepositively).
  void finalize() {
    static const std::vector<std::string> syl = {
        "ba", "ce", "di", "fo", "gu", "ka", "le", "mi", "no",
        "pu", "ra", "se", "ti", "vo", "zu", "wa", "xe", "yo"};
    categories.clear();
    lexicon.clear();
    mod_markers.clear();
    std::vector<std::pair<std::string, WordCat>> all;
    auto push = [&](const std::vector<std::string>& ws, WordCat c) {
      for (const auto& w : ws) all.emplace_back(w, c);
    };
    push(dets, WordCat::Det);
    push(adjs, WordCat::Adj);
    push(nouns, WordCat::Noun);
    push(verbs, WordCat::Verb);
    push(preps, WordCat::Prep);
    for (const auto& m : mods) {
      all.emplace_back(m.pron, WordCat::ModPron);
      all.emplace_back(m.verb, WordCat::ModVerb);
    }
    push(names, WordCat::Filler);
    push(frame_verbs, WordCat::Filler);
    push(time_words, WordCat::Filler);
    push(adverbs, WordCat::Filler);
    all.emplace_back(period, WordCat::Punct);

    size_t idx = 0;
    for (const auto& [word, cat] : all) {
      if (categories.count(word)) {
        if (categories[word] != cat)
          throw UsageError("word '" + word + "' appears in two categories");
        continue;
      }
      categories[word] = cat;
      if (cat == WordCat::Punct) {
        lexicon[word] = word;
      } else {
        lexicon[word] = syl[idx / syl.size()] + syl[idx % syl.size()];
        ++idx;
      }
    }
    for (size_t m = 0; m < mods.size(); ++m)
      mod_markers.push_back("rel" + syl[m]);
    // bijectivity check
    std::set<std::string> targets;
    for (const auto& [w, t] : lexicon) targets.insert(t);
    for (const auto& m : mod_markers) targets.insert(m);
    if (targets.size() != lexicon.size() + mod_markers.size())
      throw UsageError("lexicon is not bijective");
  }

  WordCat category(const std::string& word) const {
    auto it = categories.find(word);
    if (it == categories.end())
      throw UsageError("token outside the lexicon: " + word);
    return it->second;
  }

  const std::string& target(const std::string& word) const {
    auto it = lexicon.find(word);
    if (it == lexicon.end())
      throw UsageError("token outside the lexicon: " + word);
    return it->second;
  }

  int mod_index(const std::string& pron, const std::string& verb) const {
    for (size_t m = 0; m < mods.size(); ++m)
      if (mods[m].pron == pron && mods[m].verb == verb)
        return static_cast<int>(m);
    return -1;
  }

  KvMap to_kv() const {
    KvMap kv;
    auto joined = [](const std::vector<std::string>& v) {
      std::string s;
      for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
      return s;
    };
    kv["dets"] = joined(dets);
    kv["adjs"] = joined(adjs);
    kv["nouns"] = joined(nouns);
    kv["verbs"] = joined(verbs);
    kv["preps"] = joined(preps);
    std::string ms;
    for (size_t i = 0; i < mods.size(); ++i)
      ms += (i ? "," : "") + mods[i].pron + " " + mods[i].verb;
    kv["mods"] = ms;
    kv["names"] = joined(names);
    kv["frame_verbs"] = joined(frame_verbs);
    kv["time_words"] = joined(time_words);
    kv["adverbs"] = joined(adverbs);
    return kv;
  }
};

// ---------------------------------------------------------------------------
// Compounds and the deterministic rule-based translator.
// ---------------------------------------------------------------------------

struct CompoundSpec {
  Pattern pattern = Pattern::NP;
  int det = 0, adj = 0, noun = 0;
  int head = -1;  // verb index (VP) or preposition index (PP)
  int mod = -1;   // -1 = no modifier clause

  bool operator<(const CompoundSpec& o) const {
    return std::tie(pattern, det, adj, noun, head, mod) <
           std::tie(o.pattern, o.det, o.adj, o.noun, o.head, o.mod);
  }
};

inline std::vector<std::string> compound_tokens(const GenerationRules& r,
                                                const CompoundSpec& c) {
  std::vector<std::string> out;
  if (c.pattern == Pattern::VP) out.push_back(r.verbs.at(c.head));
  if (c.pattern == Pattern::PP) out.push_back(r.preps.at(c.head));
  out.push_back(r.dets.at(c.det));
  out.push_back(r.adjs.at(c.adj));
  out.push_back(r.nouns.at(c.noun));
  if (c.mod >= 0) {
    out.push_back(r.mods.at(c.mod).pron);
    out.push_back(r.mods.at(c.mod).verb);
  }
  return out;
}

/// Target-side rendering of a compound: the head (verb/preposition) keeps its
/// slot, the noun core reorders DET ADJ N -> DET' N' ADJ', and a modifier
/// clause fuses into a single marker token placed before the determiner.
inline std::vector<std::string> compound_translation(const GenerationRules& r,
                                                     const CompoundSpec& c) {
  std::vector<std::string> out;
  if (c.pattern == Pattern::VP) out.push_back(r.target(r.verbs.at(c.head)));
  if (c.pattern == Pattern::PP) out.push_back(r.target(r.preps.at(c.head)));
  if (c.mod >= 0) out.push_back(r.mod_markers.at(c.mod));
  out.push_back(r.target(r.dets.at(c.det)));
  out.push_back(r.target(r.nouns.at(c.noun)));
  out.push_back(r.target(r.adjs.at(c.adj)));
  return out;
}

namespace detail {

inline bool is_compound_cat(WordCat c) {
  return c == WordCat::Det || c == WordCat::Adj || c == WordCat::Noun ||
         c == WordCat::Verb || c == WordCat::Prep || c == WordCat::ModPron ||
         c == WordCat::ModVerb;
}

/// Parses a compound-category run into a CompoundSpec; returns false when the
/// run does not follow any pattern.
inline bool parse_compound_run(const GenerationRules& r,
                               const std::vector<std::string>& toks, size_t begin,
                               size_t end, CompoundSpec* out) {
  size_t i = begin;
  CompoundSpec c;
  auto cat = [&](size_t p) { return r.category(toks[p]); };
  auto index_of = [](const std::vector<std::string>& v, const std::string& w) {
    for (size_t i = 0; i < v.size(); ++i)
      if (v[i] == w) return static_cast<int>(i);
    return -1;
  };
  if (i < end && cat(i) == WordCat::Verb) {
    c.pattern = Pattern::VP;
    c.head = index_of(r.verbs, toks[i]);
    ++i;
  } else if (i < end && cat(i) == WordCat::Prep) {
    c.pattern = Pattern::PP;
    c.head = index_of(r.preps, toks[i]);
    ++i;
  } else {
    c.pattern = Pattern::NP;
  }
  if (i + 3 > end) return false;
  if (cat(i) != WordCat::Det || cat(i + 1) != WordCat::Adj ||
      cat(i + 2) != WordCat::Noun)
    return false;
  c.det = index_of(r.dets, toks[i]);
  c.adj = index_of(r.adjs, toks[i + 1]);
  c.noun = index_of(r.nouns, toks[i + 2]);
  i += 3;
  if (i < end) {
    if (i + 2 != end) return false;
    if (cat(i) != WordCat::ModPron || cat(i + 1) != WordCat::ModVerb) return false;
    c.mod = r.mod_index(toks[i], toks[i + 1]);
    if (c.mod < 0) return false;
  }
  *out = c;
  return true;
}

}  // namespace detail

/// Deterministic reference translation: lexicon substitution everywhere, with
/// the (unique) compound span rendered through its reordering rule. Sentences
/// without a well-formed compound run fall back to pure word-by-word mapping.
inline std::vector<std::string> reference_translate(
    const std::vector<std::string>& src, const GenerationRules& r) {
  size_t begin = src.size(), end = src.size();
  for (size_t i = 0; i < src.size(); ++i) {
    if (detail::is_compound_cat(r.category(src[i]))) {
      begin = i;
      end = i + 1;
      while (end < src.size() && detail::is_compound_cat(r.category(src[end])))
        ++end;
      break;
    }
  }
  std::vector<std::string> out;
  CompoundSpec spec;
  bool has_compound = begin < src.size() &&
                      detail::parse_compound_run(r, src, begin, end, &spec);
  for (size_t i = 0; i < src.size(); ++i) {
    if (has_compound && i == begin) {
      auto tgt = compound_translation(r, spec);
      out.insert(out.end(), tgt.begin(), tgt.end());
      i = end - 1;
      continue;
    }
    out.push_back(r.target(src[i]));
  }
  return out;
}

// ---------------------------------------------------------------------------
// The benchmark: train/dev/test plus a compositional-generalization test set
// of novel adjective-noun pairs embedded in training contexts, and the
// dictionary of acceptable compound translations that drives CTER.
// ---------------------------------------------------------------------------

struct CompoundEntry {
  std::vector<std::string> compound;                 // source tokens
  std::vector<std::vector<std::string>> accepted;    // acceptable target n-grams
  Pattern pattern = Pattern::NP;
  bool has_mod = false;
  int context_index = 0;  // line index into the cg-test split
};

struct CompoundDictionary {
  std::vector<CompoundEntry> entries;  // one per cg-test sentence, in order
};

struct GenConfig {
  int train_size = 8000;
  int dev_size = 500;
  int test_size = 500;
  int cg_compounds = 200;
  int contexts_per_compound = 5;
  int heldout_pairs = 24;
  int nouns_per_adj = 1;
  double mod_fraction = 0.5;
  int num_templates = 30;
  // Training sentences draw their context template from the compound pair's
  // small preferred subset with this probability, entangling compounds with
  // their habitual contexts the way natural corpora do. cg-test contexts are
  // drawn uniformly, so memorized context-compound pairings mislead there.
  double context_bias = 0.9;
  int preferred_templates = 3;
  // Long-tailed pairing: each adjective keeps one dominant noun; its other
  // seen nouns together receive only this probability mass. The rare pairings
  // are the disentangling evidence, so this dial sets how compositional the
  // training signal is.
  double rare_pair_fraction = 0.1;

  KvMap to_kv() const {
    KvMap kv;
    kv["train_size"] = std::to_string(train_size);
    kv["dev_size"] = std::to_string(dev_size);
    kv["test_size"] = std::to_string(test_size);
    kv["cg_compounds"] = std::to_string(cg_compounds);
    kv["contexts_per_compound"] = std::to_string(contexts_per_compound);
    kv["heldout_pairs"] = std::to_string(heldout_pairs);
    kv["nouns_per_adj"] = std::to_string(nouns_per_adj);
    kv["mod_fraction"] = std::to_string(mod_fraction);
    kv["num_templates"] = std::to_string(num_templates);
    kv["context_bias"] = std::to_string(context_bias);
    kv["preferred_templates"] = std::to_string(preferred_templates);
    kv["rare_pair_fraction"] = std::to_string(rare_pair_fraction);
    return kv;
  }
};

struct Benchmark {
  TextCorpus train, dev, test, cg_test;
  CompoundDictionary dictionary;
  std::vector<std::pair<int, int>> seen_pairs, heldout_pairs;  // (adj, noun)
};

struct ContextTemplate {
  std::vector<std::string> prefix, suffix;
};

namespace detail {

inline std::vector<ContextTemplate> build_templates(const GenerationRules& r,
                                                    int count, Rng& rng) {
  std::vector<ContextTemplate> all;
  for (const auto& name : r.names) {
    for (const auto& fv : r.frame_verbs) {
      std::vector<std::vector<std::string>> prefixes;
      prefixes.push_back({name, fv});
      for (const auto& tw : r.time_words) prefixes.push_back({tw, name, fv});
      for (const auto& prefix : prefixes) {
        std::vector<std::vector<std::string>> suffixes;
        suffixes.push_back({r.period});
        for (const auto& adv : r.adverbs) suffixes.push_back({adv, r.period});
        for (const auto& suffix : suffixes)
          all.push_back(ContextTemplate{prefix, suffix});
      }
    }
  }
  if (count > static_cast<int>(all.size()))
    throw UsageError("not enough template combinations for num_templates");
  rng.shuffle(all);
  all.resize(count);
  return all;
}

inline std::vector<std::string> instantiate(const ContextTemplate& tpl,
                                            const std::vector<std::string>& comp) {
  std::vector<std::string> out = tpl.prefix;
  out.insert(out.end(), comp.begin(), comp.end());
  out.insert(out.end(), tpl.suffix.begin(), tpl.suffix.end());
  return out;
}

inline bool contains_subsequence(const std::vector<std::string>& hay,
                                 const std::vector<std::string>& needle) {
  if (needle.empty() || hay.size() < needle.size()) return false;
  for (size_t i = 0; i + needle.size() <= hay.size(); ++i) {
    bool ok = true;
    for (size_t j = 0; j < needle.size(); ++j)
      if (hay[i + j] != needle[j]) {
        ok = false;
        break;
      }
    if (ok) return true;
  }
  return false;
}

}  // namespace detail

/// Generates the four splits and the compound dictionary. The adjective-noun
/// grid is partitioned: a sparse biregular seen set builds all training
/// material, held-out pairs appear only in cg-test compounds, while every
/// individual atom, pattern and context template occurs in training. Each
/// cg-test compound is embedded in contexts_per_compound distinct training
/// templates.
inline Benchmark generate_benchmark(const GenerationRules& rules,
                                    const GenConfig& cfg, uint64_t seed) {
  int n_adj = static_cast<int>(rules.adjs.size());
  int n_noun = static_cast<int>(rules.nouns.size());
  if (cfg.nouns_per_adj < 1 || cfg.nouns_per_adj > n_noun)
    throw UsageError("nouns_per_adj out of range");

  Benchmark bench;
  Rng pair_rng(Rng::derive(seed, 1));
  Rng tpl_rng(Rng::derive(seed, 2));
  Rng train_rng(Rng::derive(seed, 3));
  Rng heldout_rng(Rng::derive(seed, 4));
  Rng devtest_rng(Rng::derive(seed, 5));
  Rng cg_rng(Rng::derive(seed, 6));

  // Seen pairs: biregular band over permuted rows/columns, so every adjective
  // pairs with exactly nouns_per_adj nouns and every noun is covered.
  std::vector<int> perm_a(n_adj), perm_n(n_noun);
  for (int i = 0; i < n_adj; ++i) perm_a[i] = i;
  for (int i = 0; i < n_noun; ++i) perm_n[i] = i;
  pair_rng.shuffle(perm_a);
  pair_rng.shuffle(perm_n);
  std::set<std::pair<int, int>> seen;
  std::vector<std::vector<int>> seen_nouns(n_adj);  // [0] is the dominant noun
  for (int i = 0; i < n_adj; ++i)
    for (int t = 0; t < cfg.nouns_per_adj; ++t) {
      seen.insert({perm_a[i], perm_n[(i + t) % n_noun]});
      seen_nouns[perm_a[i]].push_back(perm_n[(i + t) % n_noun]);
    }
  bench.seen_pairs.assign(seen.begin(), seen.end());
  if (cfg.rare_pair_fraction < 0.0 || cfg.rare_pair_fraction >= 1.0)
    throw UsageError("rare_pair_fraction must be in [0, 1)");

  std::vector<std::pair<int, int>> complement;
  for (int a = 0; a < n_adj; ++a)
    for (int n = 0; n < n_noun; ++n)
      if (!seen.count({a, n})) complement.push_back({a, n});
  if (cfg.heldout_pairs > static_cast<int>(complement.size()))
    throw UsageError("holdout infeasible: only " +
                     std::to_string(complement.size()) +
                     " unseen adjective-noun pairs available");
  heldout_rng.shuffle(complement);
  bench.heldout_pairs.assign(complement.begin(),
                             complement.begin() + cfg.heldout_pairs);

  auto templates = detail::build_templates(rules, cfg.num_templates, tpl_rng);

  auto finish_spec = [&](Rng& rng, CompoundSpec& c) {
    int pat = static_cast<int>(rng.uniform_int(3));
    c.pattern = pat == 0 ? Pattern::NP : (pat == 1 ? Pattern::VP : Pattern::PP);
    c.det = static_cast<int>(rng.uniform_int(rules.dets.size()));
    if (c.pattern == Pattern::VP)
      c.head = static_cast<int>(rng.uniform_int(rules.verbs.size()));
    if (c.pattern == Pattern::PP)
      c.head = static_cast<int>(rng.uniform_int(rules.preps.size()));
    if (rng.uniform() < cfg.mod_fraction)
      c.mod = static_cast<int>(rng.uniform_int(rules.mods.size()));
  };

  // Long-tailed seen-pair sampling: the dominant noun takes most of each
  // adjective's probability mass, the remaining seen nouns split the rest.
  auto sample_seen_spec = [&](Rng& rng) {
    CompoundSpec c;
    c.adj = static_cast<int>(rng.uniform_int(n_adj));
    const auto& nouns = seen_nouns[c.adj];
    if (nouns.size() > 1 && rng.uniform() < cfg.rare_pair_fraction)
      c.noun = nouns[1 + rng.uniform_int(nouns.size() - 1)];
    else
      c.noun = nouns[0];
    finish_spec(rng, c);
    return c;
  };

  auto sample_spec = [&](Rng& rng, const std::vector<std::pair<int, int>>& pairs) {
    CompoundSpec c;
    auto [a, n] = pairs[rng.uniform_int(pairs.size())];
    c.adj = a;
    c.noun = n;
    finish_spec(rng, c);
    return c;
  };

  auto make_sentence = [&](const CompoundSpec& spec, int tpl_idx) {
    auto src = detail::instantiate(templates[tpl_idx], compound_tokens(rules, spec));
    TextPair pair;
    pair.src = src;
    pair.tgt = reference_translate(src, rules);
    return pair;
  };

  // Each adjective-noun pair habitually occurs in a small set of contexts;
  // the subset is a deterministic function of the pair.
  auto sample_template = [&](Rng& rng, const CompoundSpec& spec) {
    if (cfg.context_bias > 0.0 && rng.uniform() < cfg.context_bias) {
      uint64_t h = fnv1a_init();
      h = fnv1a_pod(h, spec.adj);
      h = fnv1a_pod(h, spec.noun);
      int pick = static_cast<int>(rng.uniform_int(
          std::max(1, cfg.preferred_templates)));
      return static_cast<int>(
          (h + static_cast<uint64_t>(pick) * 0x9e3779b9ull) % templates.size());
    }
    return static_cast<int>(rng.uniform_int(templates.size()));
  };

  // --- training split ---
  std::unordered_set<std::string> train_keys;
  std::vector<CompoundSpec> train_specs;
  std::vector<int> train_tpls;
  for (int i = 0; i < cfg.train_size; ++i) {
    auto spec = sample_seen_spec(train_rng);
    int tpl = sample_template(train_rng, spec);
    train_specs.push_back(spec);
    train_tpls.push_back(tpl);
  }
  // Deterministic coverage patch: every atom and every template must occur.
  {
    std::set<int> tpl_used(train_tpls.begin(), train_tpls.end());
    std::vector<int> missing_tpl;
    for (int t = 0; t < static_cast<int>(templates.size()); ++t)
      if (!tpl_used.count(t)) missing_tpl.push_back(t);
    std::set<int> det_used, head_v, head_p, mod_used;
    for (const auto& s : train_specs) {
      det_used.insert(s.det);
      if (s.pattern == Pattern::VP) head_v.insert(s.head);
      if (s.pattern == Pattern::PP) head_p.insert(s.head);
      if (s.mod >= 0) mod_used.insert(s.mod);
    }
    size_t patch_at = train_specs.size();
    auto patch = [&](CompoundSpec spec, int tpl) {
      if (patch_at == 0) throw UsageError("train size too small for coverage");
      train_specs[--patch_at] = spec;
      train_tpls[patch_at] = tpl;
    };
    for (int t : missing_tpl)
      patch(sample_seen_spec(train_rng), t);
    for (int d = 0; d < static_cast<int>(rules.dets.size()); ++d)
      if (!det_used.count(d)) {
        auto s = sample_seen_spec(train_rng);
        s.det = d;
        patch(s, static_cast<int>(train_rng.uniform_int(templates.size())));
      }
    for (int v = 0; v < static_cast<int>(rules.verbs.size()); ++v)
      if (!head_v.count(v)) {
        auto s = sample_seen_spec(train_rng);
        s.pattern = Pattern::VP;
        s.head = v;
        patch(s, static_cast<int>(train_rng.uniform_int(templates.size())));
      }
    for (int p = 0; p < static_cast<int>(rules.preps.size()); ++p)
      if (!head_p.count(p)) {
        auto s = sample_seen_spec(train_rng);
        s.pattern = Pattern::PP;
        s.head = p;
        patch(s, static_cast<int>(train_rng.uniform_int(templates.size())));
      }
    for (int m = 0; m < static_cast<int>(rules.mods.size()); ++m)
      if (!mod_used.count(m)) {
        auto s = sample_seen_spec(train_rng);
        s.mod = m;
        patch(s, static_cast<int>(train_rng.uniform_int(templates.size())));
      }
  }
  for (size_t i = 0; i < train_specs.size(); ++i) {
    auto pair = make_sentence(train_specs[i], train_tpls[i]);
    train_keys.insert(join_tokens(pair.src));
    bench.train.push_back(std::move(pair));
  }

  // --- dev and in-distribution test: fresh seen-pair sentences ---
  auto sample_fresh = [&](int count, TextCorpus* out,
                          std::unordered_set<std::string>& taken) {
    int guard = 0;
    while (static_cast<int>(out->size()) < count) {
      if (++guard > count * 1000)
        throw UsageError("cannot sample enough distinct held-out sentences");
      auto spec = sample_seen_spec(devtest_rng);
      int tpl = sample_template(devtest_rng, spec);
      auto pair = make_sentence(spec, tpl);
      auto key = join_tokens(pair.src);
      if (train_keys.count(key) || taken.count(key)) continue;
      taken.insert(key);
      out->push_back(std::move(pair));
    }
  };
  std::unordered_set<std::string> devtest_keys;
  sample_fresh(cfg.dev_size, &bench.dev, devtest_keys);
  sample_fresh(cfg.test_size, &bench.test, devtest_keys);

  // --- cg-test: novel compounds in m distinct training contexts ---
  std::set<CompoundSpec> cg_specs;
  std::vector<CompoundSpec> cg_list;
  int pattern_cycle = 0;
  int guard = 0;
  while (static_cast<int>(cg_list.size()) < cfg.cg_compounds) {
    if (++guard > cfg.cg_compounds * 10000)
      throw UsageError("cannot sample enough distinct novel compounds");
    auto spec = sample_spec(cg_rng, bench.heldout_pairs);
    int pat = pattern_cycle % 3;
    spec.pattern = pat == 0 ? Pattern::NP : (pat == 1 ? Pattern::VP : Pattern::PP);
    if (spec.pattern == Pattern::NP) spec.head = -1;
    if (spec.pattern == Pattern::VP && spec.head < 0)
      spec.head = static_cast<int>(cg_rng.uniform_int(rules.verbs.size()));
    if (spec.pattern == Pattern::PP)
      spec.head = static_cast<int>(cg_rng.uniform_int(rules.preps.size()));
    if (cg_specs.count(spec)) continue;
    cg_specs.insert(spec);
    cg_list.push_back(spec);
    ++pattern_cycle;
  }
  for (const auto& spec : cg_list) {
    // m distinct context templates per compound
    std::vector<int> tpl_ids(templates.size());
    for (size_t i = 0; i < tpl_ids.size(); ++i) tpl_ids[i] = static_cast<int>(i);
    cg_rng.shuffle(tpl_ids);
    auto comp_tokens = compound_tokens(rules, spec);
    auto accepted = compound_translation(rules, spec);
    for (int c = 0; c < cfg.contexts_per_compound; ++c) {
      auto pair = make_sentence(spec, tpl_ids[c]);
      CompoundEntry entry;
      entry.compound = comp_tokens;
      entry.accepted = {accepted};
      entry.pattern = spec.pattern;
      entry.has_mod = spec.mod >= 0;
      entry.context_index = static_cast<int>(bench.cg_test.size());
      bench.cg_test.push_back(std::move(pair));
      bench.dictionary.entries.push_back(std::move(entry));
    }
  }

  // Compositional soundness: no novel compound occurs contiguously in any
  // training source sentence.
  for (const auto& spec : cg_list) {
    auto comp = compound_tokens(rules, spec);
    for (const auto& pair : bench.train)
      if (detail::contains_subsequence(pair.src, comp))
        throw std::logic_error("novel compound leaked into the training split");
  }
  return bench;
}

// ---------------------------------------------------------------------------
// Dictionary file: one row per cg-test sentence.
// compound TAB accepted (alternatives joined by '|') TAB pattern TAB has_mod
// TAB context_index
// ---------------------------------------------------------------------------

inline void save_dictionary(const CompoundDictionary& dict,
                            const std::string& path) {
  atomic_write_file(path, [&](std::ostream& os) {
    for (const auto& e : dict.entries) {
      os << join_tokens(e.compound) << "\t";
      for (size_t i = 0; i < e.accepted.size(); ++i)
        os << (i ? "|" : "") << join_tokens(e.accepted[i]);
      os << "\t" << to_string(e.pattern) << "\t" << (e.has_mod ? 1 : 0) << "\t"
         << e.context_index << "\n";
    }
  }, /*binary=*/false);
}

inline CompoundDictionary load_dictionary(const std::string& path) {
  std::istringstream is(read_file(path));
  CompoundDictionary dict;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    size_t start = 0;
    for (;;) {
      auto tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab == std::string::npos
                                              ? std::string::npos
                                              : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() != 5)
      throw IncompatibleError("malformed dictionary line: " + line);
    CompoundEntry e;
    e.compound = split_tokens(fields[0]);
    std::istringstream alts(fields[1]);
    std::string alt;
    while (std::getline(alts, alt, '|')) e.accepted.push_back(split_tokens(alt));
    if (e.accepted.empty())
      throw IncompatibleError("dictionary entry without acceptable n-grams");
    e.pattern = pattern_from_string(fields[2]);
    e.has_mod = fields[3] == "1";
    e.context_index = std::stoi(fields[4]);
    dict.entries.push_back(std::move(e));
  }
  return dict;
}

}  // namespace protonmt
