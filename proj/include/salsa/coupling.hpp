#pragma once

#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "salsa/checkpoint.hpp"
#include "salsa/common.hpp"
#include "salsa/models.hpp"
#include "salsa/tensor.hpp"

namespace salsa {

enum class Placement { uniform, all_at_end };

inline std::string placement_name(Placement p) { return p == Placement::uniform ? "uniform" : "all_at_end"; }
inline Placement placement_from_name(const std::string& s) {
  if (s == "uniform") return Placement::uniform;
  if (s == "all_at_end") return Placement::all_at_end;
  throw ValueError("unknown placement: " + s);
}

/// Picks the k coupled layer pairs (llm_layer, asr_layer), 1-based.
/// uniform: every d_llm/k-th LM layer, floor spacing with the last layer
/// pinned, paired with the correspondingly spaced ASR decoder layers.
/// all_at_end: the last k layers of each decoder, in order.
inline std::vector<std::pair<int, int>> select_layers(int k, int d_asr, int d_llm, Placement placement) {
  require(k >= 1 && k <= std::min(d_asr, d_llm),
          "select_layers: k must be in [1, min(d_asr, d_llm)], got k=" + std::to_string(k));
  std::vector<std::pair<int, int>> pairs;
  if (placement == Placement::uniform) {
    for (int i = 1; i <= k; ++i) {
      int llm = i == k ? d_llm : (i * d_llm) / k;
      int asr = i == k ? d_asr : (i * d_asr) / k;
      pairs.emplace_back(llm, asr);
    }
    for (size_t i = 1; i < pairs.size(); ++i)
      require(pairs[i].first > pairs[i - 1].first && pairs[i].second > pairs[i - 1].second,
              "select_layers: degenerate spacing (k too close to layer count)");
  } else {
    for (int i = k - 1; i >= 0; --i) pairs.emplace_back(d_llm - i, d_asr - i);
  }
  return pairs;
}

struct CouplingSpec {
  std::vector<std::pair<int, int>> layer_pairs;  // (llm_layer, asr_layer), strictly increasing, 1-based
  Placement placement = Placement::uniform;
  int in_dim = 0;      // ASR decoder width m
  int bottleneck = 0;  // projection bottleneck b
  int out_dim = 0;     // LM width m^L

  static CouplingSpec make(int k, int d_asr, int d_llm, Placement placement, int in_dim, int out_dim,
                           int bottleneck = 0) {
    CouplingSpec s;
    s.layer_pairs = select_layers(k, d_asr, d_llm, placement);
    s.placement = placement;
    s.in_dim = in_dim;
    s.out_dim = out_dim;
    s.bottleneck = bottleneck > 0 ? bottleneck : std::max(1, in_dim / 4);
    return s;
  }

  int k() const { return int(layer_pairs.size()); }

  void validate() const {
    require(!layer_pairs.empty(), "coupling: no layer pairs");
    require(in_dim >= 1 && bottleneck >= 1 && out_dim >= 1, "coupling: bad projection dims");
    for (size_t i = 0; i < layer_pairs.size(); ++i) {
      require(layer_pairs[i].first >= 1 && layer_pairs[i].second >= 1, "coupling: layer indices are 1-based");
      if (i > 0)
        require(layer_pairs[i].first > layer_pairs[i - 1].first, "coupling: llm layers must be strictly increasing");
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json pairs = nlohmann::json::array();
    for (auto& [llm, asr] : layer_pairs) pairs.push_back({llm, asr});
    return {{"layer_pairs", pairs},
            {"placement", placement_name(placement)},
            {"in_dim", in_dim},
            {"bottleneck", bottleneck},
            {"out_dim", out_dim}};
  }
  static CouplingSpec from_json(const nlohmann::json& j) {
    CouplingSpec s;
    for (const auto& p : j.at("layer_pairs")) s.layer_pairs.emplace_back(p.at(0).get<int>(), p.at(1).get<int>());
    s.placement = placement_from_name(j.at("placement").get<std::string>());
    s.in_dim = j.at("in_dim").get<int>();
    s.bottleneck = j.at("bottleneck").get<int>();
    s.out_dim = j.at("out_dim").get<int>();
    s.validate();
    return s;
  }
};

/// Closed-form parameter count of theta_C: per pair, down (m*b + b) plus up
/// (b*mL + mL).
inline long coupling_param_count(const CouplingSpec& spec) {
  const long m = spec.in_dim, b = spec.bottleneck, ml = spec.out_dim;
  return long(spec.layer_pairs.size()) * (m * b + b + b * ml + ml);
}

/// theta_C: the only trainable parameters of the coupled system. One
/// down-SiLU-up projection per coupled layer pair; up-projections start at
/// zero so the coupled model is exactly the plain LM before training.
template <typename S>
class CouplingParams {
 public:
  struct Projection {
    Tensor<S> down_w, down_b, up_w, up_b;
  };

  static CouplingParams init(const CouplingSpec& spec, std::mt19937_64& rng) {
    spec.validate();
    CouplingParams p;
    p.spec_ = spec;
    for (int i = 0; i < spec.k(); ++i) {
      Projection pr;
      pr.down_w = Tensor<S>::randn({spec.in_dim, spec.bottleneck}, rng, S(1) / std::sqrt(S(spec.in_dim)));
      pr.down_b = Tensor<S>::zeros({spec.bottleneck});
      pr.up_w = Tensor<S>::zeros({spec.bottleneck, spec.out_dim});
      pr.up_b = Tensor<S>::zeros({spec.out_dim});
      pr.down_w.set_requires_grad(true);
      pr.down_b.set_requires_grad(true);
      pr.up_w.set_requires_grad(true);
      pr.up_b.set_requires_grad(true);
      p.pairs_.push_back(std::move(pr));
    }
    return p;
  }

  const CouplingSpec& spec() const { return spec_; }
  int k() const { return int(pairs_.size()); }
  const Projection& pair(int i) const { return pairs_[size_t(i)]; }

  std::vector<std::pair<std::string, Tensor<S>>> params() const {
    std::vector<std::pair<std::string, Tensor<S>>> out;
    for (size_t i = 0; i < pairs_.size(); ++i) {
      const std::string p = "proj." + std::to_string(i) + ".";
      out.emplace_back(p + "down.w", pairs_[i].down_w);
      out.emplace_back(p + "down.b", pairs_[i].down_b);
      out.emplace_back(p + "up.w", pairs_[i].up_w);
      out.emplace_back(p + "up.b", pairs_[i].up_b);
    }
    return out;
  }

  long param_count() const {
    long n = 0;
    for (const auto& [name, t] : params()) n += t.numel();
    return n;
  }

  /// Graph path: projects a matrix of ASR states [n, m] -> residuals [n, mL].
  Tensor<S> project_rows(int pair_idx, const Tensor<S>& states) const {
    require(pair_idx >= 0 && pair_idx < k(), "project: pair index out of range");
    require_shape(states.rank() == 2 && states.dim(1) == spec_.in_dim, "project: input dim mismatch");
    const auto& pr = pairs_[size_t(pair_idx)];
    auto h = silu(add_bias(matmul(states, pr.down_w), pr.down_b));
    return add_bias(matmul(h, pr.up_w), pr.up_b);
  }

  /// Raw path: projects one ASR state vector (length m) -> residual (mL).
  std::vector<S> project(int pair_idx, const std::vector<S>& state) const {
    require(pair_idx >= 0 && pair_idx < k(), "project: pair index out of range");
    require(int(state.size()) == spec_.in_dim, "project: input dim mismatch");
    const auto& pr = pairs_[size_t(pair_idx)];
    std::vector<S> h(static_cast<size_t>(spec_.bottleneck)), out(static_cast<size_t>(spec_.out_dim));
    rawops::linear(pr.down_w, pr.down_b, state.data(), h.data());
    for (auto& v : h) v = v * (S(1) / (S(1) + std::exp(-v)));
    rawops::linear(pr.up_w, pr.up_b, h.data(), out.data());
    return out;
  }

  /// Eq.-style injections from the ASR session's newest-position layer
  /// outputs: one residual per coupled pair, keyed by LM layer.
  std::map<int, std::vector<S>> make_injections(const AsrSession<S>& asr_session) const {
    require(asr_session.consumed_count() >= 1, "make_injections: ASR session has not consumed BOS yet");
    const auto& outputs = asr_session.last_layer_outputs();
    std::map<int, std::vector<S>> inj;
    for (int i = 0; i < k(); ++i) {
      const auto& [llm_layer, asr_layer] = spec_.layer_pairs[size_t(i)];
      require(asr_layer >= 1 && asr_layer <= int(outputs.size()), "make_injections: missing ASR layer output");
      inj[llm_layer] = project(i, outputs[size_t(asr_layer - 1)]);
    }
    return inj;
  }

  void save(const std::string& path) const { save_checkpoint(path, params()); }
  void load(const std::string& path) { load_checkpoint(path, params()); }

 private:
  CouplingSpec spec_;
  std::vector<Projection> pairs_;
};

}  // namespace salsa
