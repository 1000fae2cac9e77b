#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "dsrm/errors.hpp"
#include "dsrm/rng.hpp"

namespace dsrm {

enum class Modality { dense, tokens };

inline const char* to_string(Modality m) { return m == Modality::dense ? "dense" : "tokens"; }

inline Modality modality_from_string(const std::string& s) {
  if (s == "dense") return Modality::dense;
  if (s == "tokens") return Modality::tokens;
  throw InvalidArgument("unknown modality '" + s + "' (expected dense or tokens)");
}

/// Token id reserved for padding. Padding positions are ignored by pooling
/// and by token-level attacks.
inline constexpr std::int32_t kPadToken = 0;

struct Example {
  std::int64_t id = 0;
  std::vector<double> features;       // dense modality
  std::vector<std::int32_t> tokens;   // token modality, padded to max_len
  int label = 0;

  bool operator==(const Example&) const = default;
};

using Batch = std::vector<Example>;

struct Dataset {
  std::vector<Example> examples;
  int n_classes = 2;
  Modality modality = Modality::dense;
  std::size_t feature_dim = 0;
  int vocab_size = 0;
  std::size_t max_len = 0;

  std::size_t size() const { return examples.size(); }
  bool empty() const { return examples.empty(); }

  /// Same metadata, no examples.
  Dataset like() const {
    Dataset d = *this;
    d.examples.clear();
    return d;
  }

  void validate() const {
    require(!examples.empty(), "dataset is empty");
    require(n_classes >= 2, "dataset needs at least 2 classes");
    for (const auto& e : examples) {
      require(e.label >= 0 && e.label < n_classes,
              "example " + std::to_string(e.id) + " has label out of range");
      if (modality == Modality::dense) {
        require(e.features.size() == feature_dim,
                "example " + std::to_string(e.id) + " has wrong feature dimension");
      } else {
        require(e.tokens.size() <= max_len && !e.tokens.empty(),
                "example " + std::to_string(e.id) + " has invalid sequence length");
        for (auto t : e.tokens)
          require(t >= 0 && t < vocab_size,
                  "example " + std::to_string(e.id) + " has token id outside vocabulary");
      }
    }
  }

  bool operator==(const Dataset&) const = default;
};

// ---------------------------------------------------------------------------
// Generators

/// Two interleaving half circles. Class 0 lies on (cos t, sin t), class 1 on
/// (1 - cos t, 1/2 - sin t), t evenly spaced over [0, pi]; isotropic Gaussian
/// noise is added and the examples are shuffled.
inline Dataset gen_two_moons(int n, double noise, std::uint64_t seed) {
  require(n >= 2 && n % 2 == 0, "two_moons: n must be even and >= 2");
  require(noise >= 0.0, "two_moons: noise must be non-negative");
  Rng rng = Rng::stream(seed, 1);
  const int half = n / 2;
  Dataset ds;
  ds.modality = Modality::dense;
  ds.feature_dim = 2;
  ds.n_classes = 2;
  ds.examples.reserve(static_cast<std::size_t>(n));
  for (int cls = 0; cls < 2; ++cls) {
    for (int i = 0; i < half; ++i) {
      const double t = half > 1 ? std::numbers::pi * i / (half - 1) : 0.0;
      double x = cls == 0 ? std::cos(t) : 1.0 - std::cos(t);
      double y = cls == 0 ? std::sin(t) : 0.5 - std::sin(t);
      if (noise > 0.0) {
        x += noise * rng.normal();
        y += noise * rng.normal();
      }
      ds.examples.push_back({0, {x, y}, {}, cls});
    }
  }
  rng.shuffle(std::span(ds.examples));
  for (std::size_t i = 0; i < ds.examples.size(); ++i) ds.examples[i].id = static_cast<std::int64_t>(i);
  return ds;
}

/// Sentiment groups of the synthetic token task. Ids [1, 1+g) form group A
/// (class 0) and [1+g, 1+2g) group B (class 1), g = max(1, (vocab-1)/5);
/// remaining ids are neutral.
struct TokenGroups {
  std::int32_t group_size;
  explicit TokenGroups(int vocab_size) : group_size(std::max(1, (vocab_size - 1) / 5)) {}
  bool in_a(std::int32_t t) const { return t >= 1 && t < 1 + group_size; }
  bool in_b(std::int32_t t) const { return t >= 1 + group_size && t < 1 + 2 * group_size; }
};

/// Majority rule: class 1 iff strictly more group-B than group-A tokens.
inline int majority_label(std::span<const std::int32_t> tokens, int vocab_size) {
  const TokenGroups g(vocab_size);
  int a = 0, b = 0;
  for (auto t : tokens) {
    a += g.in_a(t);
    b += g.in_b(t);
  }
  return b > a ? 1 : 0;
}

inline Dataset gen_token_task(int n, int vocab_size, int max_len, std::uint64_t seed) {
  require(n >= 1, "token_task: n must be positive");
  require(vocab_size >= 4, "token_task: vocab_size must be >= 4");
  require(max_len >= 2, "token_task: max_len must be >= 2");
  Rng rng = Rng::stream(seed, 2);
  const TokenGroups g(vocab_size);
  const std::int32_t neutral_lo = 1 + 2 * g.group_size;
  const bool has_neutral = neutral_lo < vocab_size;
  const int min_len = std::max(2, max_len / 2);

  Dataset ds;
  ds.modality = Modality::tokens;
  ds.vocab_size = vocab_size;
  ds.max_len = static_cast<std::size_t>(max_len);
  ds.n_classes = 2;
  ds.examples.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const bool lean_b = rng.uniform() < 0.5;
    const int len = min_len + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_len - min_len + 1)));
    std::vector<std::int32_t> toks(static_cast<std::size_t>(max_len), kPadToken);
    for (int p = 0; p < len; ++p) {
      if (!has_neutral || rng.uniform() < 0.4) {
        const bool pick_b = (rng.uniform() < 0.75) == lean_b;
        const auto off = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(g.group_size)));
        toks[static_cast<std::size_t>(p)] = 1 + off + (pick_b ? g.group_size : 0);
      } else {
        toks[static_cast<std::size_t>(p)] =
            neutral_lo + static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(vocab_size - neutral_lo)));
      }
    }
    const int label = majority_label(toks, vocab_size);
    ds.examples.push_back({i, {}, std::move(toks), label});
  }
  return ds;
}

// ---------------------------------------------------------------------------
// CSV ingestion

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline std::string trim(std::string s) {
  const auto issp = [](unsigned char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n'; };
  while (!s.empty() && issp(static_cast<unsigned char>(s.back()))) s.pop_back();
  std::size_t i = 0;
  while (i < s.size() && issp(static_cast<unsigned char>(s[i]))) ++i;
  return s.substr(i);
}

inline double parse_real(const std::string& cell, std::size_t row) {
  const std::string s = trim(cell);
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (s.empty() || used != s.size() || !std::isfinite(v))
    throw ParseError("row " + std::to_string(row) + ": non-numeric cell '" + s + "'");
  return v;
}

inline long long parse_int(const std::string& cell, std::size_t row, const char* what) {
  const std::string s = trim(cell);
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (s.empty() || used != s.size())
    throw ParseError("row " + std::to_string(row) + ": non-integer " + what + " '" + s + "'");
  return v;
}

}  // namespace detail

/// Reads a labelled CSV file. Dense header: x0,...,x{d-1},label; token header:
/// t0,...,t{L-1},label with pad id 0. Rows are numbered from 1 after the
/// header. n_classes is max label + 1 (at least 2); for token files the
/// vocabulary size is max id + 1 unless `vocab_size` is given.
inline Dataset load_csv(const std::string& path, Modality schema, int vocab_size = 0) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw ParseError("'" + path + "': missing header row");
  const auto header = detail::split_csv_line(line);
  require<ParseError>(header.size() >= 2 && detail::trim(header.back()) == "label",
                      "'" + path + "': header must end with a 'label' column");
  const std::size_t width = header.size() - 1;
  const char prefix = schema == Modality::dense ? 'x' : 't';
  for (std::size_t c = 0; c < width; ++c)
    require<ParseError>(detail::trim(header[c]) == std::string(1, prefix) + std::to_string(c),
                        "'" + path + "': header column " + std::to_string(c) + " should be " + prefix +
                            std::to_string(c));

  Dataset ds;
  ds.modality = schema;
  if (schema == Modality::dense) ds.feature_dim = width;
  else ds.max_len = width;

  int max_label = 0;
  std::int32_t max_token = 0;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    ++row;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != width + 1)
      throw ParseError("row " + std::to_string(row) + ": expected " + std::to_string(width + 1) + " cells, got " +
                       std::to_string(cells.size()));
    Example e;
    e.id = static_cast<std::int64_t>(row - 1);
    const long long label = detail::parse_int(cells.back(), row, "label");
    if (label < 0 || label > 1'000'000)
      throw ParseError("row " + std::to_string(row) + ": label out of range");
    e.label = static_cast<int>(label);
    max_label = std::max(max_label, e.label);
    if (schema == Modality::dense) {
      e.features.reserve(width);
      for (std::size_t c = 0; c < width; ++c) e.features.push_back(detail::parse_real(cells[c], row));
    } else {
      e.tokens.reserve(width);
      for (std::size_t c = 0; c < width; ++c) {
        const long long t = detail::parse_int(cells[c], row, "token id");
        if (t < 0 || t > INT32_MAX || (vocab_size > 0 && t >= vocab_size))
          throw ParseError("row " + std::to_string(row) + ": token id out of range");
        e.tokens.push_back(static_cast<std::int32_t>(t));
        max_token = std::max(max_token, static_cast<std::int32_t>(t));
      }
    }
    ds.examples.push_back(std::move(e));
  }
  if (ds.examples.empty()) throw ParseError("'" + path + "': no data rows");
  ds.n_classes = std::max(2, max_label + 1);
  if (schema == Modality::tokens) ds.vocab_size = vocab_size > 0 ? vocab_size : max_token + 1;
  return ds;
}

// ---------------------------------------------------------------------------
// Splitting and batching

struct SplitSpec {
  double valid_fraction = 0.1;
  double test_fraction = 0.2;
  std::uint64_t seed = 0;
};

struct Splits {
  Dataset train, valid, test;
};

/// Shuffles once with the seed, then carves test, then validation; the rest is
/// the training set. Part sizes are round(n * fraction).
inline Splits split(const Dataset& ds, const SplitSpec& spec) {
  require(spec.valid_fraction > 0.0 && spec.valid_fraction < 1.0, "split: valid_fraction must be in (0,1)");
  require(spec.test_fraction > 0.0 && spec.test_fraction < 1.0, "split: test_fraction must be in (0,1)");
  require(spec.valid_fraction + spec.test_fraction < 1.0, "split: valid_fraction + test_fraction must be < 1");
  const std::size_t n = ds.size();
  const auto n_test = static_cast<std::size_t>(std::llround(static_cast<double>(n) * spec.test_fraction));
  const auto n_valid = static_cast<std::size_t>(std::llround(static_cast<double>(n) * spec.valid_fraction));
  require(n_test >= 1 && n_valid >= 1 && n_test + n_valid < n, "split: fractions yield an empty part");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = Rng::stream(spec.seed, 3);
  rng.shuffle(std::span(order));

  Splits out{ds.like(), ds.like(), ds.like()};
  for (std::size_t k = 0; k < n; ++k) {
    Dataset& part = k < n_test ? out.test : (k < n_test + n_valid ? out.valid : out.train);
    part.examples.push_back(ds.examples[order[k]]);
  }
  return out;
}

/// Draws `size` distinct examples; advances `rng`.
inline Batch sample_batch(const Dataset& ds, std::size_t size, Rng& rng) {
  require(size >= 1 && size <= ds.size(), "sample_batch: size out of range");
  std::vector<std::size_t> idx(ds.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  // partial Fisher-Yates: the first `size` slots end up uniformly drawn
  for (std::size_t i = 0; i < size; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(ds.size() - i));
    std::swap(idx[i], idx[j]);
  }
  Batch b;
  b.reserve(size);
  for (std::size_t i = 0; i < size; ++i) b.push_back(ds.examples[idx[i]]);
  return b;
}

/// Validation batches without replacement within an epoch of the validation
/// set; reshuffles when fewer than `size` unseen examples remain.
class ValidSampler {
 public:
  ValidSampler(const Dataset& ds, std::uint64_t seed) : ds_(&ds), rng_(Rng::stream(seed, 4)), order_(ds.size()) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    cursor_ = order_.size();
  }

  std::size_t capacity() const { return order_.size(); }

  Batch next(std::size_t size) {
    require(size >= 1 && size <= order_.size(), "validation batch size exceeds validation set");
    if (cursor_ + size > order_.size()) {
      rng_.shuffle(std::span(order_));
      cursor_ = 0;
    }
    Batch b;
    b.reserve(size);
    for (std::size_t i = 0; i < size; ++i) b.push_back(ds_->examples[order_[cursor_ + i]]);
    cursor_ += size;
    return b;
  }

 private:
  const Dataset* ds_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_;
};

}  // namespace dsrm
