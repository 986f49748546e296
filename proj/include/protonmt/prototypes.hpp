// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "protonmt/model.hpp"
#include "protonmt/rng.hpp"
#include "protonmt/serialize.hpp"
#include "protonmt/thread_pool.hpp"

namespace protonmt {

// ---------------------------------------------------------------------------
// Lookup table Q: per-token lists of contextualized final-layer encoder
// states gathered over a corpus.
// ---------------------------------------------------------------------------

class RepresentationStore {
 public:
  explicit RepresentationStore(int dim) : dim_(dim) {}

  int dim() const { return dim_; }

  void append(int token, const float* vec) {
    auto& list = lists_[token];
    list.insert(list.end(), vec, vec + dim_);
  }

  /// R(v): number of stored representations for the token.
  size_t count(int token) const {
    auto it = lists_.find(token);
    return it == lists_.end() ? 0 : it->second.size() / dim_;
  }

  bool contains(int token) const { return lists_.count(token) > 0; }

  const std::map<int, std::vector<float>>& lists() const { return lists_; }

  uint64_t checksum() const {
    uint64_t h = fnv1a_init();
    h = fnv1a_pod(h, dim_);
    for (const auto& [tok, flat] : lists_) {
      h = fnv1a_pod(h, tok);
      h = fnv1a(h, flat.data(), flat.size() * sizeof(float));
    }
    return h;
  }

 private:
  int dim_;
  std::map<int, std::vector<float>> lists_;
};

struct ExclusionPolicy {
  std::set<int> punctuation_ids;
  int min_frequency = 2;

  void validate() const {
    if (min_frequency < 1) throw UsageError("min_frequency must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// K-Means (Lloyd's algorithm, k-means++ seeding, multiple restarts).
// ---------------------------------------------------------------------------

struct KMeansResult {
  std::vector<std::vector<double>> centroids;
  std::vector<int> assignment;
  double inertia = 0.0;
  std::vector<double> inertia_trace;  // per-iteration, winning restart
};

namespace detail {

inline double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

/// Greedy k-means++: each new center is drawn several times from the
/// D^2-weighted distribution and the candidate that lowers the potential the
/// most is kept (the variant scikit-learn uses).
inline std::vector<std::vector<double>> kmeanspp_seed(
    const std::vector<std::vector<double>>& pts, int k, Rng& rng) {
  size_t n = pts.size();
  int local_trials = 2 + static_cast<int>(std::log(static_cast<double>(k) + 1.0));
  std::vector<std::vector<double>> centers;
  centers.push_back(pts[rng.uniform_int(n)]);
  std::vector<double> d2(n);
  for (size_t i = 0; i < n; ++i) d2[i] = sq_dist(pts[i], centers[0]);
  while (static_cast<int>(centers.size()) < k) {
    double total = 0.0;
    for (size_t i = 0; i < n; ++i) total += d2[i];
    size_t best_pick = 0;
    double best_potential = std::numeric_limits<double>::infinity();
    for (int trial = 0; trial < local_trials; ++trial) {
      size_t pick;
      if (total <= 0.0) {
        pick = rng.uniform_int(n);  // all points already coincide with centers
      } else {
        double r = rng.uniform() * total;
        double acc = 0.0;
        pick = n - 1;
        for (size_t i = 0; i < n; ++i) {
          acc += d2[i];
          if (r < acc) {
            pick = i;
            break;
          }
        }
      }
      double potential = 0.0;
      for (size_t i = 0; i < n; ++i)
        potential += std::min(d2[i], sq_dist(pts[i], pts[pick]));
      if (potential < best_potential) {
        best_potential = potential;
        best_pick = pick;
      }
    }
    centers.push_back(pts[best_pick]);
    for (size_t i = 0; i < n; ++i)
      d2[i] = std::min(d2[i], sq_dist(pts[i], centers.back()));
  }
  return centers;
}

}  // namespace detail

/// Lloyd's algorithm with k-means++ seeding. Runs n_init independent restarts
/// and keeps the lowest-inertia solution; the within-cluster sum of squares is
/// checked to be non-increasing on every iteration. Deterministic given seed.
inline KMeansResult kmeans(const std::vector<std::vector<double>>& points, int k,
                           int max_iter, uint64_t seed, int n_init = 10) {
  if (points.empty()) throw UsageError("kmeans: empty point list");
  if (k < 1) throw UsageError("kmeans: k must be >= 1");
  if (k > static_cast<int>(points.size()))
    throw UsageError("kmeans: k exceeds the number of points");
  size_t n = points.size();
  size_t dim = points[0].size();
  // restarts are essentially free on tiny inputs and buy global optimality
  if (n <= 16) n_init = std::max(n_init, 40);

  KMeansResult best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (int init = 0; init < n_init; ++init) {
    Rng rng(Rng::derive(seed, static_cast<uint64_t>(init)));
    auto centers = detail::kmeanspp_seed(points, k, rng);
    std::vector<int> assign(n, -1);
    std::vector<double> trace;
    double inertia = 0.0;
    for (int iter = 0; iter < max_iter; ++iter) {
      bool changed = false;
      inertia = 0.0;
      for (size_t i = 0; i < n; ++i) {
        int arg = 0;
        double bd = detail::sq_dist(points[i], centers[0]);
        for (int c = 1; c < k; ++c) {
          double d = detail::sq_dist(points[i], centers[c]);
          if (d < bd) {
            bd = d;
            arg = c;
          }
        }
        if (assign[i] != arg) {
          assign[i] = arg;
          changed = true;
        }
        inertia += bd;
      }
      if (!trace.empty() && inertia > trace.back() * (1.0 + 1e-9) + 1e-12)
        throw std::logic_error("kmeans: inertia increased across an iteration");
      trace.push_back(inertia);
      if (!changed) break;
      // update step: means of assigned points; empty clusters keep their center
      std::vector<std::vector<double>> sums(k, std::vector<double>(dim, 0.0));
      std::vector<size_t> counts(k, 0);
      for (size_t i = 0; i < n; ++i) {
        counts[assign[i]] += 1;
        for (size_t j = 0; j < dim; ++j) sums[assign[i]][j] += points[i][j];
      }
      for (int c = 0; c < k; ++c)
        if (counts[c] > 0)
          for (size_t j = 0; j < dim; ++j)
            centers[c][j] = sums[c][j] / static_cast<double>(counts[c]);
    }
    if (inertia < best.inertia) {
      best.centroids = std::move(centers);
      best.assignment = std::move(assign);
      best.inertia = inertia;
      best.inertia_trace = std::move(trace);
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Lookup table P: token -> k x d prototype matrix, plus lineage metadata.
// ---------------------------------------------------------------------------

struct PrototypeTable {
  int k = 0;
  int d = 0;
  uint64_t vocab_checksum = 0;
  uint64_t model_checksum = 0;
  uint64_t corpus_checksum = 0;
  std::map<int, std::vector<float>> rows;  // token -> k*d floats, row-major

  uint64_t checksum() const {
    uint64_t h = fnv1a_init();
    h = fnv1a_pod(h, k);
    h = fnv1a_pod(h, d);
    for (const auto& [tok, flat] : rows) {
      h = fnv1a_pod(h, tok);
      h = fnv1a(h, flat.data(), flat.size() * sizeof(float));
    }
    return h;
  }
};

/// Clusters every token's representation list into k prototypes. Tokens with
/// fewer than k representations get k_eff = R(v) centroids repeated
/// cyclically. Points are canonically sorted and per-token seeds are
/// global_seed XOR token_id, so the result is independent of corpus order.
inline PrototypeTable build_prototype_table(const RepresentationStore& store,
                                            int k, uint64_t seed,
                                            ThreadPool* pool = nullptr) {
  if (k < 1) throw UsageError("build_prototype_table: k must be >= 1");
  if (store.lists().empty())
    throw UsageError("build_prototype_table: empty representation store");
  PrototypeTable table;
  table.k = k;
  table.d = store.dim();

  std::vector<int> tokens;
  for (const auto& [tok, flat] : store.lists()) tokens.push_back(tok);
  std::vector<std::vector<float>> results(tokens.size());

  auto cluster_one = [&](size_t idx) {
    int tok = tokens[idx];
    const auto& flat = store.lists().at(tok);
    int d = store.dim();
    size_t n = flat.size() / d;
    std::vector<std::vector<double>> pts(n, std::vector<double>(d));
    for (size_t i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) pts[i][j] = flat[i * d + j];
    std::sort(pts.begin(), pts.end());
    int k_eff = std::min<int>(k, static_cast<int>(n));
    auto res = kmeans(pts, k_eff, 100, seed ^ static_cast<uint64_t>(tok));
    std::vector<float> out(static_cast<size_t>(k) * d);
    for (int r = 0; r < k; ++r)
      for (int j = 0; j < d; ++j)
        out[static_cast<size_t>(r) * d + j] =
            static_cast<float>(res.centroids[r % k_eff][j]);
    results[idx] = std::move(out);
  };
  if (pool)
    pool->parallel_for(tokens.size(), cluster_one);
  else
    for (size_t i = 0; i < tokens.size(); ++i) cluster_one(i);

  for (size_t i = 0; i < tokens.size(); ++i)
    table.rows[tokens[i]] = std::move(results[i]);
  return table;
}

// ---------------------------------------------------------------------------
// Extraction: run the encoder over the corpus (dropout off) and collect the
// final-layer state of every non-excluded source token occurrence.
// ---------------------------------------------------------------------------

template <typename Real>
RepresentationStore extract_representations(
    Model<Real>& model, const std::vector<std::vector<int>>& src_sentences,
    const ExclusionPolicy& policy, ThreadPool* pool = nullptr) {
  policy.validate();
  int d = model.config().d_model;
  RepresentationStore store(d);

  std::map<int, size_t> freq;
  for (const auto& s : src_sentences)
    for (int id : s) freq[id] += 1;
  auto excluded = [&](int id) {
    if (id < 4) return true;  // reserved ids
    if (policy.punctuation_ids.count(id)) return true;
    return freq[id] < static_cast<size_t>(policy.min_frequency);
  };

  std::vector<std::vector<float>> slots(src_sentences.size());
  auto run_one = [&](size_t s) {
    ForwardCtx<Real> ctx;  // inference mode: no tape, no dropout
    auto enc = model.encode(ctx, src_sentences[s]);
    std::vector<float> flat(enc.numel());
    for (size_t i = 0; i < enc.numel(); ++i)
      flat[i] = static_cast<float>(enc.value()[i]);
    slots[s] = std::move(flat);
  };
  if (pool)
    pool->parallel_for(src_sentences.size(), run_one);
  else
    for (size_t s = 0; s < src_sentences.size(); ++s) run_one(s);

  for (size_t s = 0; s < src_sentences.size(); ++s) {
    const auto& ids = src_sentences[s];
    for (size_t t = 0; t < ids.size(); ++t)
      if (!excluded(ids[t])) store.append(ids[t], slots[s].data() + t * d);
  }
  return store;
}

// ---------------------------------------------------------------------------
// Prototype-store file: magic "PTPROTO1", a length-prefixed UTF-8 key=value
// header (k, d, vocab_checksum, model_checksum, corpus_checksum, count), then
// per token: u32 token id and k*d f32 little-endian values row-major.
// ---------------------------------------------------------------------------

inline void save_table(const PrototypeTable& table, const std::string& path) {
  atomic_write_file(path, [&](std::ostream& os) {
    write_exact(os, "PTPROTO1");
    KvMap kv;
    kv["k"] = std::to_string(table.k);
    kv["d"] = std::to_string(table.d);
    kv["vocab_checksum"] = std::to_string(table.vocab_checksum);
    kv["model_checksum"] = std::to_string(table.model_checksum);
    kv["corpus_checksum"] = std::to_string(table.corpus_checksum);
    kv["count"] = std::to_string(table.rows.size());
    std::string header = kv_to_string(kv);
    write_u32_le(os, static_cast<uint32_t>(header.size()));
    write_exact(os, header);
    for (const auto& [tok, flat] : table.rows) {
      write_u32_le(os, static_cast<uint32_t>(tok));
      for (float v : flat) write_f32_le(os, v);
    }
  });
}

/// Loads and validates a prototype store. When expected_vocab_checksum is
/// non-zero it must match the stored one (refuse to pair a table with a
/// different vocabulary).
inline PrototypeTable load_table(const std::string& path,
                                 uint64_t expected_vocab_checksum = 0) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw UsageError("cannot open prototype store: " + path);
  if (read_exact(is, 8) != "PTPROTO1")
    throw IncompatibleError("bad prototype-store magic in " + path);
  uint32_t header_len = read_u32_le(is);
  KvMap kv = kv_from_string(read_exact(is, header_len));
  PrototypeTable table;
  table.k = std::stoi(kv_require(kv, "k"));
  table.d = std::stoi(kv_require(kv, "d"));
  table.vocab_checksum = std::stoull(kv_require(kv, "vocab_checksum"));
  table.model_checksum = std::stoull(kv_require(kv, "model_checksum"));
  table.corpus_checksum = std::stoull(kv_require(kv, "corpus_checksum"));
  size_t count = std::stoull(kv_require(kv, "count"));
  if (table.k < 1 || table.d < 1)
    throw IncompatibleError("prototype store has invalid k or d");
  for (size_t i = 0; i < count; ++i) {
    int tok = static_cast<int>(read_u32_le(is));
    std::vector<float> flat(static_cast<size_t>(table.k) * table.d);
    for (auto& v : flat) {
      v = read_f32_le(is);
      if (!std::isfinite(v))
        throw IncompatibleError("prototype store contains non-finite values");
    }
    table.rows[tok] = std::move(flat);
  }
  if (is.peek() != EOF)
    throw IncompatibleError("trailing bytes in prototype store " + path);
  if (table.rows.size() != count)
    throw IncompatibleError("duplicate token ids in prototype store");
  if (expected_vocab_checksum != 0 &&
      table.vocab_checksum != expected_vocab_checksum)
    throw IncompatibleError(
        "prototype store was built against a different vocabulary (checksum " +
        std::to_string(table.vocab_checksum) + ", expected " +
        std::to_string(expected_vocab_checksum) + ")");
  return table;
}

}  // namespace protonmt
