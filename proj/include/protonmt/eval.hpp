// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "protonmt/data.hpp"
#include "protonmt/serialize.hpp"

namespace protonmt {

// ---------------------------------------------------------------------------
// Compound translation error rate.
//
// A sample counts as correct iff any acceptable target n-gram for its
// compound occurs contiguously in the hypothesis. Instance-level CTER is the
// fraction of incorrect samples; aggregate-level CTER is the fraction of
// compounds that are wrong in at least one of their contexts.
// ---------------------------------------------------------------------------

struct BreakdownRow {
  std::string dimension;  // "pattern" | "compound_len" | "context_len" | "has_mod"
  std::string bucket;
  int samples = 0;
  int errors = 0;

  double instance_cter() const {
    return samples == 0 ? 0.0 : static_cast<double>(errors) / samples;
  }
};

struct CterResult {
  double instance_cter = 0.0;
  double aggregate_cter = 0.0;
  int n_samples = 0;
  int n_compounds = 0;
  std::vector<uint8_t> sample_correct;
  std::map<std::string, double> pattern_instance;  // NP/VP/PP
  std::vector<BreakdownRow> breakdowns;
};

namespace detail {

inline bool contains_ngram(const std::vector<std::string>& hyp,
                           const std::vector<std::string>& ngram) {
  if (ngram.empty() || hyp.size() < ngram.size()) return false;
  for (size_t i = 0; i + ngram.size() <= hyp.size(); ++i) {
    bool ok = true;
    for (size_t j = 0; j < ngram.size(); ++j)
      if (hyp[i + j] != ngram[j]) {
        ok = false;
        break;
      }
    if (ok) return true;
  }
  return false;
}

inline std::string context_len_bucket(int len) {
  if (len <= 4) return "<=4";
  if (len <= 6) return "5-6";
  return ">=7";
}

}  // namespace detail

inline CterResult cter(const std::vector<std::vector<std::string>>& hypotheses,
                       const TextCorpus& cg_corpus,
                       const CompoundDictionary& dictionary) {
  if (hypotheses.size() != dictionary.entries.size() ||
      cg_corpus.size() != dictionary.entries.size())
    throw UsageError("cter: " + std::to_string(hypotheses.size()) +
                     " hypotheses for " +
                     std::to_string(dictionary.entries.size()) +
                     " dictionary entries");
  CterResult res;
  res.n_samples = static_cast<int>(hypotheses.size());
  res.sample_correct.resize(hypotheses.size());

  std::map<std::string, bool> compound_all_correct;
  std::map<std::string, std::pair<int, int>> pattern_counts;  // total, errors
  std::map<std::string, std::pair<int, int>> by_comp_len, by_ctx_len, by_mod;

  for (size_t i = 0; i < hypotheses.size(); ++i) {
    const auto& e = dictionary.entries[i];
    if (e.accepted.empty())
      throw IncompatibleError("cter: compound '" + join_tokens(e.compound) +
                              "' has no acceptable translations");
    bool correct = false;
    for (const auto& ngram : e.accepted)
      if (detail::contains_ngram(hypotheses[i], ngram)) {
        correct = true;
        break;
      }
    res.sample_correct[i] = correct ? 1 : 0;

    std::string key = join_tokens(e.compound);
    auto it = compound_all_correct.find(key);
    if (it == compound_all_correct.end())
      compound_all_correct[key] = correct;
    else
      it->second = it->second && correct;

    auto tally = [&](std::map<std::string, std::pair<int, int>>& m,
                     const std::string& bucket) {
      m[bucket].first += 1;
      if (!correct) m[bucket].second += 1;
    };
    tally(pattern_counts, to_string(e.pattern));
    tally(by_comp_len, std::to_string(e.compound.size()));
    int ctx_len = static_cast<int>(cg_corpus[i].src.size()) -
                  static_cast<int>(e.compound.size());
    tally(by_ctx_len, detail::context_len_bucket(ctx_len));
    tally(by_mod, e.has_mod ? "1" : "0");
  }

  int errors = 0;
  for (auto c : res.sample_correct) errors += c ? 0 : 1;
  res.instance_cter = static_cast<double>(errors) / res.n_samples;

  res.n_compounds = static_cast<int>(compound_all_correct.size());
  int bad_compounds = 0;
  for (const auto& [k, all_ok] : compound_all_correct) bad_compounds += all_ok ? 0 : 1;
  res.aggregate_cter = static_cast<double>(bad_compounds) / res.n_compounds;

  for (const auto& [pat, counts] : pattern_counts)
    res.pattern_instance[pat] =
        static_cast<double>(counts.second) / counts.first;

  auto emit = [&](const std::string& dim,
                  const std::map<std::string, std::pair<int, int>>& m) {
    for (const auto& [bucket, counts] : m)
      res.breakdowns.push_back(BreakdownRow{dim, bucket, counts.first, counts.second});
  };
  emit("pattern", pattern_counts);
  emit("compound_len", by_comp_len);
  emit("context_len", by_ctx_len);
  emit("has_mod", by_mod);
  return res;
}

// ---------------------------------------------------------------------------
// Corpus BLEU-4: geometric mean of clipped n-gram precisions times the
// brevity penalty. Any zero precision yields 0 unless add-one smoothing is
// requested.
// ---------------------------------------------------------------------------

inline double bleu(const std::vector<std::vector<std::string>>& hypotheses,
                   const std::vector<std::vector<std::string>>& references,
                   bool add_one_smoothing = false) {
  if (hypotheses.size() != references.size())
    throw UsageError("bleu: " + std::to_string(hypotheses.size()) +
                     " hypotheses for " + std::to_string(references.size()) +
                     " references");
  if (hypotheses.empty()) throw UsageError("bleu: empty input");
  long long hyp_len = 0, ref_len = 0;
  long long matches[4] = {0, 0, 0, 0};
  long long totals[4] = {0, 0, 0, 0};

  auto ngram_counts = [](const std::vector<std::string>& toks, int n) {
    std::map<std::string, long long> counts;
    if (static_cast<int>(toks.size()) < n) return counts;
    for (size_t i = 0; i + n <= toks.size(); ++i) {
      std::string key;
      for (int j = 0; j < n; ++j) key += toks[i + j] + "\x1f";
      counts[key] += 1;
    }
    return counts;
  };

  for (size_t s = 0; s < hypotheses.size(); ++s) {
    hyp_len += static_cast<long long>(hypotheses[s].size());
    ref_len += static_cast<long long>(references[s].size());
    for (int n = 1; n <= 4; ++n) {
      auto hyp_counts = ngram_counts(hypotheses[s], n);
      auto ref_counts = ngram_counts(references[s], n);
      for (const auto& [key, count] : hyp_counts) {
        totals[n - 1] += count;
        auto it = ref_counts.find(key);
        if (it != ref_counts.end()) matches[n - 1] += std::min(count, it->second);
      }
    }
  }
  if (hyp_len == 0) return 0.0;

  double log_precision_sum = 0.0;
  for (int n = 0; n < 4; ++n) {
    double m = static_cast<double>(matches[n]);
    double t = static_cast<double>(totals[n]);
    if (add_one_smoothing) {
      m += 1.0;
      t += 1.0;
    }
    if (m <= 0.0 || t <= 0.0) return 0.0;
    log_precision_sum += std::log(m / t);
  }
  double brevity = hyp_len < ref_len
                       ? std::exp(1.0 - static_cast<double>(ref_len) / hyp_len)
                       : 1.0;
  return 100.0 * brevity * std::exp(log_precision_sum / 4.0);
}

// ---------------------------------------------------------------------------
// Report files.
// ---------------------------------------------------------------------------

struct EvalReport {
  std::string model;
  std::string split;
  CterResult cter;
  double bleu_score = 0.0;
};

namespace detail {
inline std::string fixed6(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(6) << v;
  return os.str();
}
}  // namespace detail

/// Writes report_summary.csv (one row per model/split) and
/// report_breakdown.csv (rows partition the sample set per dimension) with a
/// deterministic column and row order.
inline void write_reports(const std::vector<EvalReport>& reports,
                          const std::string& dir) {
  atomic_write_file(dir + "/report_summary.csv", [&](std::ostream& os) {
    os << "model,split,n_samples,n_compounds,instance_cter,aggregate_cter,"
          "cter_np,cter_vp,cter_pp,bleu\n";
    for (const auto& r : reports) {
      auto pat = [&](const std::string& p) {
        auto it = r.cter.pattern_instance.find(p);
        return it == r.cter.pattern_instance.end() ? 0.0 : it->second;
      };
      os << r.model << "," << r.split << "," << r.cter.n_samples << ","
         << r.cter.n_compounds << "," << detail::fixed6(r.cter.instance_cter)
         << "," << detail::fixed6(r.cter.aggregate_cter) << ","
         << detail::fixed6(pat("NP")) << "," << detail::fixed6(pat("VP")) << ","
         << detail::fixed6(pat("PP")) << "," << detail::fixed6(r.bleu_score)
         << "\n";
    }
  }, /*binary=*/false);
  atomic_write_file(dir + "/report_breakdown.csv", [&](std::ostream& os) {
    os << "model,split,dimension,bucket,samples,errors,instance_cter\n";
    for (const auto& r : reports)
      for (const auto& row : r.cter.breakdowns)
        os << r.model << "," << r.split << "," << row.dimension << ","
           << row.bucket << "," << row.samples << "," << row.errors << ","
           << detail::fixed6(row.instance_cter()) << "\n";
  }, /*binary=*/false);
}

}  // namespace protonmt
