#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsrm/data.hpp"
#include "dsrm/errors.hpp"
#include "dsrm/rng.hpp"

namespace dsrm {

enum class Arch { softmax_linear, mlp1, embed_bag };

inline const char* to_string(Arch a) {
  switch (a) {
    case Arch::softmax_linear: return "softmax_linear";
    case Arch::mlp1: return "mlp1";
    case Arch::embed_bag: return "embed_bag";
  }
  return "?";
}

inline Arch arch_from_string(const std::string& s) {
  if (s == "softmax_linear") return Arch::softmax_linear;
  if (s == "mlp1") return Arch::mlp1;
  if (s == "embed_bag") return Arch::embed_bag;
  throw InvalidArgument("unknown arch '" + s + "'");
}

struct ModelSpec {
  Arch arch = Arch::softmax_linear;
  std::size_t input_dim = 0;   // dense feature dimension
  int vocab_size = 0;          // embed_bag only
  std::size_t embed_dim = 0;   // embed_bag only
  std::size_t hidden_dim = 0;  // mlp1 only
  int n_classes = 2;

  Modality modality() const { return arch == Arch::embed_bag ? Modality::tokens : Modality::dense; }

  void validate() const {
    require(n_classes >= 2, "model: n_classes must be >= 2");
    if (arch == Arch::embed_bag) {
      require(vocab_size >= 1 && embed_dim >= 1, "model: embed_bag needs vocab_size and embed_dim >= 1");
    } else {
      require(input_dim >= 1, "model: input_dim must be >= 1");
      if (arch == Arch::mlp1) require(hidden_dim >= 1, "model: mlp1 needs hidden_dim >= 1");
    }
  }

  /// Fills the data-dependent dimensions from a dataset and checks modality.
  ModelSpec fitted_to(const Dataset& ds) const {
    ModelSpec s = *this;
    require(s.modality() == ds.modality, std::string("model: arch ") + to_string(arch) +
                                             " is incompatible with " + to_string(ds.modality) + " data");
    s.n_classes = ds.n_classes;
    if (ds.modality == Modality::dense) s.input_dim = ds.feature_dim;
    else s.vocab_size = ds.vocab_size;
    s.validate();
    return s;
  }

  bool operator==(const ModelSpec&) const = default;
};

struct Segment {
  std::string name;
  std::size_t offset = 0;
  std::vector<std::size_t> shape;

  std::size_t size() const {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    return n;
  }
  bool operator==(const Segment&) const = default;
};

/// Flat parameter vector with named, contiguous segments.
struct ParamVector {
  std::vector<double> values;
  std::vector<Segment> layout;

  std::size_t size() const { return values.size(); }

  const Segment& segment(const std::string& name) const {
    for (const auto& s : layout)
      if (s.name == name) return s;
    throw InvalidArgument("no parameter segment '" + name + "'");
  }
  std::span<const double> view(const std::string& name) const {
    const auto& s = segment(name);
    return std::span(values).subspan(s.offset, s.size());
  }

  bool all_finite() const {
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
  }

  bool operator==(const ParamVector&) const = default;
};

/// Row-major n x p matrix; row i is the gradient of per-sample loss i.
struct GradMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> data;

  std::span<double> row(std::size_t i) { return std::span(data).subspan(i * cols, cols); }
  std::span<const double> row(std::size_t i) const { return std::span(data).subspan(i * cols, cols); }
};

/// Largest batch for which a GradMatrix may be materialized.
inline constexpr std::size_t kMaxGradMatrixRows = 512;

namespace detail {

/// Log-sum-exp stabilized cross entropy; writes softmax(z) into `probs`.
inline double softmax_xent(std::span<const double> z, int y, std::span<double> probs) {
  const double zmax = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (std::size_t c = 0; c < z.size(); ++c) {
    probs[c] = std::exp(z[c] - zmax);
    sum += probs[c];
  }
  for (auto& p : probs) p /= sum;
  const double lse = zmax + std::log(sum);
  return std::max(0.0, lse - z[static_cast<std::size_t>(y)]);
}

inline int argmax_first(std::span<const double> z) {
  int best = 0;
  for (std::size_t c = 1; c < z.size(); ++c)
    if (z[c] > z[static_cast<std::size_t>(best)]) best = static_cast<int>(c);
  return best;
}

}  // namespace detail

/// A small differentiable classifier: linear softmax, one-hidden-layer tanh
/// MLP, or mean-pooled bag of embeddings followed by a linear head. All
/// methods are pure functions of the parameter vector and inputs.
///
/// The "feature" vector is the head input: the dense input itself, or the
/// pooled embedding for token models. Input-space attacks and adversarial
/// training perturb this vector.
class Classifier {
 public:
  explicit Classifier(ModelSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    std::size_t off = 0;
    auto add = [&](std::string name, std::vector<std::size_t> shape) {
      Segment s{std::move(name), off, std::move(shape)};
      off += s.size();
      layout_.push_back(std::move(s));
    };
    const auto k = static_cast<std::size_t>(spec_.n_classes);
    switch (spec_.arch) {
      case Arch::softmax_linear:
        add("W", {k, spec_.input_dim});
        add("b", {k});
        break;
      case Arch::mlp1:
        add("W1", {spec_.hidden_dim, spec_.input_dim});
        add("b1", {spec_.hidden_dim});
        add("W2", {k, spec_.hidden_dim});
        add("b2", {k});
        break;
      case Arch::embed_bag:
        add("E", {static_cast<std::size_t>(spec_.vocab_size), spec_.embed_dim});
        add("W", {k, spec_.embed_dim});
        add("b", {k});
        break;
    }
    n_params_ = off;
  }

  const ModelSpec& spec() const { return spec_; }
  const std::vector<Segment>& layout() const { return layout_; }
  std::size_t param_count() const { return n_params_; }
  std::size_t n_classes() const { return static_cast<std::size_t>(spec_.n_classes); }
  std::size_t feature_dim() const { return spec_.arch == Arch::embed_bag ? spec_.embed_dim : spec_.input_dim; }

  /// Weights ~ U(-s, s) with s = 1/sqrt(fan_in); biases zero. An embedding
  /// row is looked up by a one-hot input, so its fan-in is 1.
  ParamVector init_params(std::uint64_t seed) const {
    Rng rng = Rng::stream(seed, 10);
    ParamVector p{std::vector<double>(n_params_, 0.0), layout_};
    for (const auto& seg : layout_) {
      if (seg.shape.size() != 2) continue;
      const double fan_in = seg.name == "E" ? 1.0 : static_cast<double>(seg.shape[1]);
      const double s = 1.0 / std::sqrt(fan_in);
      for (std::size_t i = 0; i < seg.size(); ++i) p.values[seg.offset + i] = rng.uniform(-s, s);
    }
    return p;
  }

  ParamVector zeros() const { return ParamVector{std::vector<double>(n_params_, 0.0), layout_}; }

  // -- forward --------------------------------------------------------------

  std::vector<double> features(const ParamVector& theta, const Example& ex) const {
    check_params(theta);
    check_example(ex);
    if (spec_.arch != Arch::embed_bag) return ex.features;
    const auto& E = layout_[0];
    const std::size_t e = spec_.embed_dim;
    std::vector<double> h(e, 0.0);
    std::size_t count = 0;
    for (auto t : ex.tokens) {
      if (t == kPadToken) continue;
      ++count;
      const double* row = theta.values.data() + E.offset + static_cast<std::size_t>(t) * e;
      for (std::size_t j = 0; j < e; ++j) h[j] += row[j];
    }
    if (count > 0)
      for (auto& v : h) v /= static_cast<double>(count);
    return h;
  }

  std::vector<double> logits_from_features(const ParamVector& theta, std::span<const double> h0) const {
    std::vector<double> z(n_classes());
    head_forward(theta, h0, z, nullptr);
    return z;
  }

  std::vector<double> logits(const ParamVector& theta, const Example& ex) const {
    const auto h = features(theta, ex);
    return logits_from_features(theta, h);
  }

  double loss_from_features(const ParamVector& theta, std::span<const double> h0, int y) const {
    std::vector<double> z(n_classes()), p(n_classes());
    head_forward(theta, h0, z, nullptr);
    return detail::softmax_xent(z, y, p);
  }

  double loss(const ParamVector& theta, const Example& ex) const {
    return loss_from_features(theta, features(theta, ex), ex.label);
  }

  /// Argmax of logits, ties toward the smaller class index.
  int predict(const ParamVector& theta, const Example& ex) const { return detail::argmax_first(logits(theta, ex)); }

  int predict_features(const ParamVector& theta, std::span<const double> h0) const {
    return detail::argmax_first(logits_from_features(theta, h0));
  }

  std::vector<double> per_sample_losses(const ParamVector& theta, std::span<const Example> batch) const {
    std::vector<double> out;
    out.reserve(batch.size());
    for (const auto& ex : batch) out.push_back(loss(theta, ex));
    return out;
  }

  double weighted_loss(const ParamVector& theta, std::span<const Example> batch, std::span<const double> w) const {
    require(w.size() == batch.size(), "weighted_loss: weight length does not match batch");
    const auto L = per_sample_losses(theta, batch);
    double s = 0.0;
    for (std::size_t i = 0; i < L.size(); ++i) s += w[i] * L[i];
    return s;
  }

  // -- backward -------------------------------------------------------------

  /// One forward/backward pass on a single example whose feature vector is
  /// shifted by `delta` (empty = no shift). Returns the loss. If non-empty,
  /// `param_grad` is overwritten with dL/dtheta and `feature_grad` with
  /// dL/d(features).
  double backward(const ParamVector& theta, const Example& ex, std::span<const double> delta,
                  std::span<double> param_grad, std::span<double> feature_grad) const {
    auto h0 = features(theta, ex);
    if (!delta.empty()) {
      require(delta.size() == h0.size(), "backward: perturbation has wrong dimension");
      for (std::size_t j = 0; j < h0.size(); ++j) h0[j] += delta[j];
    }
    const std::size_t k = n_classes();
    std::vector<double> z(k), p(k), hidden;
    head_forward(theta, h0, z, &hidden);
    const double L = detail::softmax_xent(z, ex.label, p);
    std::vector<double>& dz = p;  // softmax - onehot
    dz[static_cast<std::size_t>(ex.label)] -= 1.0;

    if (!param_grad.empty()) {
      require(param_grad.size() == n_params_, "backward: gradient buffer has wrong size");
      std::fill(param_grad.begin(), param_grad.end(), 0.0);
    }
    std::vector<double> dh0(h0.size(), 0.0);
    const double* th = theta.values.data();

    if (spec_.arch == Arch::mlp1) {
      const auto &W1 = layout_[0], &b1 = layout_[1], &W2 = layout_[2], &b2 = layout_[3];
      const std::size_t hd = spec_.hidden_dim, d = spec_.input_dim;
      std::vector<double> da(hd, 0.0);
      for (std::size_t c = 0; c < k; ++c)
        for (std::size_t j = 0; j < hd; ++j) da[j] += th[W2.offset + c * hd + j] * dz[c];
      for (std::size_t j = 0; j < hd; ++j) da[j] *= 1.0 - hidden[j] * hidden[j];
      if (!param_grad.empty()) {
        for (std::size_t c = 0; c < k; ++c) {
          for (std::size_t j = 0; j < hd; ++j) param_grad[W2.offset + c * hd + j] = dz[c] * hidden[j];
          param_grad[b2.offset + c] = dz[c];
        }
        for (std::size_t j = 0; j < hd; ++j) {
          for (std::size_t i = 0; i < d; ++i) param_grad[W1.offset + j * d + i] = da[j] * h0[i];
          param_grad[b1.offset + j] = da[j];
        }
      }
      for (std::size_t j = 0; j < hd; ++j)
        for (std::size_t i = 0; i < d; ++i) dh0[i] += th[W1.offset + j * d + i] * da[j];
    } else {
      const bool bag = spec_.arch == Arch::embed_bag;
      const auto& W = layout_[bag ? 1 : 0];
      const auto& b = layout_[bag ? 2 : 1];
      const std::size_t d = h0.size();
      for (std::size_t c = 0; c < k; ++c)
        for (std::size_t i = 0; i < d; ++i) dh0[i] += th[W.offset + c * d + i] * dz[c];
      if (!param_grad.empty()) {
        for (std::size_t c = 0; c < k; ++c) {
          for (std::size_t i = 0; i < d; ++i) param_grad[W.offset + c * d + i] = dz[c] * h0[i];
          param_grad[b.offset + c] = dz[c];
        }
        if (bag) {
          const auto& E = layout_[0];
          std::size_t count = 0;
          for (auto t : ex.tokens) count += t != kPadToken;
          if (count > 0) {
            const double inv = 1.0 / static_cast<double>(count);
            for (auto t : ex.tokens) {
              if (t == kPadToken) continue;
              double* row = param_grad.data() + E.offset + static_cast<std::size_t>(t) * d;
              for (std::size_t i = 0; i < d; ++i) row[i] += dh0[i] * inv;
            }
          }
        }
      }
    }
    if (!feature_grad.empty()) {
      require(feature_grad.size() == dh0.size(), "backward: feature gradient buffer has wrong size");
      std::copy(dh0.begin(), dh0.end(), feature_grad.begin());
    }
    return L;
  }

  GradMatrix per_sample_grads(const ParamVector& theta, std::span<const Example> batch,
                              std::vector<double>* losses = nullptr) const {
    require(batch.size() <= kMaxGradMatrixRows, "per_sample_grads: batch too large to materialize");
    GradMatrix G{batch.size(), n_params_, std::vector<double>(batch.size() * n_params_)};
    if (losses) losses->assign(batch.size(), 0.0);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const double L = backward(theta, batch[i], {}, G.row(i), {});
      if (losses) (*losses)[i] = L;
    }
    return G;
  }

  /// sum_i w_i * grad L_i, one example at a time without a GradMatrix.
  std::vector<double> grad_weighted(const ParamVector& theta, std::span<const Example> batch,
                                    std::span<const double> w) const {
    require(w.size() == batch.size(), "grad_weighted: weight length does not match batch");
    std::vector<double> g(n_params_, 0.0), scratch(n_params_);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      backward(theta, batch[i], {}, scratch, {});
      for (std::size_t j = 0; j < n_params_; ++j) g[j] += w[i] * scratch[j];
    }
    return g;
  }

  /// dL/d(features) at the example; `delta` optionally shifts the features.
  std::vector<double> input_grad(const ParamVector& theta, const Example& ex,
                                 std::span<const double> delta = {}) const {
    std::vector<double> g(feature_dim());
    backward(theta, ex, delta, {}, g);
    return g;
  }

  void check_params(const ParamVector& theta) const {
    require(theta.values.size() == n_params_, "parameter vector length " + std::to_string(theta.values.size()) +
                                                  " does not match model (" + std::to_string(n_params_) + ")");
  }

  void check_example(const Example& ex) const {
    if (spec_.modality() == Modality::dense) {
      require(ex.tokens.empty() && ex.features.size() == spec_.input_dim,
              "example " + std::to_string(ex.id) + " does not match dense model input");
    } else {
      require(ex.features.empty() && !ex.tokens.empty(),
              "example " + std::to_string(ex.id) + " does not match token model input");
      for (auto t : ex.tokens)
        require(t >= 0 && t < spec_.vocab_size, "example " + std::to_string(ex.id) + " has token outside vocabulary");
    }
  }

 private:
  void head_forward(const ParamVector& theta, std::span<const double> h0, std::span<double> z,
                    std::vector<double>* hidden_out) const {
    check_params(theta);
    require(h0.size() == feature_dim(), "feature vector has wrong dimension");
    const double* th = theta.values.data();
    const std::size_t k = n_classes();
    std::span<const double> x = h0;
    std::vector<double> hidden;
    std::size_t wi = 0, bi = 1;
    if (spec_.arch == Arch::mlp1) {
      const auto &W1 = layout_[0], &b1 = layout_[1];
      const std::size_t hd = spec_.hidden_dim, d = spec_.input_dim;
      hidden.resize(hd);
      for (std::size_t j = 0; j < hd; ++j) {
        double a = th[b1.offset + j];
        for (std::size_t i = 0; i < d; ++i) a += th[W1.offset + j * d + i] * h0[i];
        hidden[j] = std::tanh(a);
      }
      x = hidden;
      wi = 2;
      bi = 3;
    } else if (spec_.arch == Arch::embed_bag) {
      wi = 1;
      bi = 2;
    }
    const auto &W = layout_[wi], &b = layout_[bi];
    const std::size_t d = x.size();
    for (std::size_t c = 0; c < k; ++c) {
      double a = th[b.offset + c];
      for (std::size_t i = 0; i < d; ++i) a += th[W.offset + c * d + i] * x[i];
      z[c] = a;
    }
    if (hidden_out) *hidden_out = std::move(hidden);
  }

  ModelSpec spec_;
  std::vector<Segment> layout_;
  std::size_t n_params_ = 0;
};

// ---------------------------------------------------------------------------
// Serialization

inline constexpr int kParamsSchemaVersion = 1;

inline nlohmann::json to_json(const ModelSpec& s) {
  return {{"arch", to_string(s.arch)},         {"input_dim", s.input_dim}, {"vocab_size", s.vocab_size},
          {"embed_dim", s.embed_dim},          {"hidden_dim", s.hidden_dim}, {"n_classes", s.n_classes}};
}

inline ModelSpec model_spec_from_json(const nlohmann::json& j) {
  ModelSpec s;
  s.arch = arch_from_string(j.at("arch").get<std::string>());
  s.input_dim = j.value("input_dim", std::size_t{0});
  s.vocab_size = j.value("vocab_size", 0);
  s.embed_dim = j.value("embed_dim", std::size_t{0});
  s.hidden_dim = j.value("hidden_dim", std::size_t{0});
  s.n_classes = j.value("n_classes", 2);
  return s;
}

/// Doubles are written in shortest round-trip form, so a load reproduces the
/// exact bits.
inline nlohmann::json params_to_json(const ModelSpec& spec, const ParamVector& p) {
  nlohmann::json layout = nlohmann::json::array();
  for (const auto& s : p.layout) layout.push_back({{"name", s.name}, {"offset", s.offset}, {"shape", s.shape}});
  return {{"schema_version", kParamsSchemaVersion}, {"model", to_json(spec)}, {"layout", layout}, {"values", p.values}};
}

struct LoadedParams {
  ModelSpec spec;
  ParamVector params;
};

inline LoadedParams params_from_json(const nlohmann::json& j) {
  try {
    require<ParseError>(j.at("schema_version").get<int>() == kParamsSchemaVersion, "unsupported params schema_version");
    LoadedParams out{model_spec_from_json(j.at("model")), {}};
    Classifier model(out.spec);
    out.params.values = j.at("values").get<std::vector<double>>();
    for (const auto& s : j.at("layout"))
      out.params.layout.push_back(
          {s.at("name").get<std::string>(), s.at("offset").get<std::size_t>(), s.at("shape").get<std::vector<std::size_t>>()});
    require<ParseError>(out.params.layout == model.layout(), "params layout does not match model spec");
    require<ParseError>(out.params.values.size() == model.param_count(), "params length does not match layout");
    require<ParseError>(out.params.all_finite(), "params contain non-finite values");
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed params: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw ParseError(std::string("malformed params: ") + e.what());
  }
}

}  // namespace dsrm
