#pragma once

#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "salsa/align.hpp"
#include "salsa/checkpoint.hpp"
#include "salsa/common.hpp"
#include "salsa/coupling.hpp"
#include "salsa/models.hpp"
#include "salsa/synth_data.hpp"
#include "salsa/tensor.hpp"
#include "salsa/tokenizer.hpp"

namespace salsa {

struct TrainConfig {
  int epochs = 35;
  int batch_size = 32;
  double learning_rate = 0.001;
  double weight_decay = 0.02;
  int max_steps = 2000;
  uint64_t seed = 0;
  double grad_clip_norm = 1.0;

  void validate() const {
    require(epochs >= 1 && batch_size >= 1 && max_steps >= 1, "train config: counts must be positive");
    require(learning_rate > 0 && grad_clip_norm > 0, "train config: rates must be positive");
    require(weight_decay >= 0, "train config: negative weight decay");
  }

  nlohmann::json to_json() const {
    return {{"epochs", epochs},       {"batch_size", batch_size}, {"learning_rate", learning_rate},
            {"weight_decay", weight_decay}, {"max_steps", max_steps},   {"seed", seed},
            {"grad_clip_norm", grad_clip_norm}};
  }
  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.epochs = j.at("epochs").get<int>();
    c.batch_size = j.at("batch_size").get<int>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.max_steps = j.at("max_steps").get<int>();
    c.seed = j.at("seed").get<uint64_t>();
    c.grad_clip_norm = j.at("grad_clip_norm").get<double>();
    c.validate();
    return c;
  }
};

struct TrainReport {
  std::vector<std::pair<int, double>> loss_curve;  // (step, train batch loss)
  double init_dev_loss = 0;
  double final_dev_loss = 0;
  double best_dev_loss = 0;
  int steps_run = 0;
  int skipped_utterances = 0;
  double wall_s = 0;
  uint64_t frozen_asr_checksum_pre = 0, frozen_asr_checksum_post = 0;
  uint64_t frozen_lm_checksum_pre = 0, frozen_lm_checksum_post = 0;

  bool frozen_unchanged() const {
    return frozen_asr_checksum_pre == frozen_asr_checksum_post && frozen_lm_checksum_pre == frozen_lm_checksum_post;
  }

  // wall_s is deliberately excluded: report files must be bit-identical
  // across reruns of the same seed.
  nlohmann::json to_json() const {
    return {{"init_dev_loss", init_dev_loss},
            {"final_dev_loss", final_dev_loss},
            {"best_dev_loss", best_dev_loss},
            {"steps_run", steps_run},
            {"skipped_utterances", skipped_utterances},
            {"frozen_asr_checksum_pre", frozen_asr_checksum_pre},
            {"frozen_asr_checksum_post", frozen_asr_checksum_post},
            {"frozen_lm_checksum_pre", frozen_lm_checksum_pre},
            {"frozen_lm_checksum_post", frozen_lm_checksum_post},
            {"frozen_unchanged", frozen_unchanged()}};
  }

  void write_loss_csv(const std::string& path) const {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open for write: " + path);
    os << "step,loss\n";
    for (const auto& [s, l] : loss_curve) os << s << "," << l << "\n";
    if (!os) throw IoError("write failed: " + path);
  }
};

/// One utterance prepared for coupling training: the alignment plus, for each
/// coupled pair, the ASR decoder states (frozen, so computed once) gathered at
/// the aligned positions. Row t of gathered[i] is the ASR state the LM reads
/// when predicting target t.
template <typename S>
struct CouplingExample {
  AlignmentMap align;
  std::vector<std::vector<S>> gathered;  // k matrices, each n_targets x m flattened
  int n_targets = 0;
};

namespace detail {

/// Frozen-ASR forward over the cascaded gold tokens, capturing per-layer
/// last-axis states, then gathering rows per coupled pair.
template <typename S>
CouplingExample<S> make_coupling_example(const Utterance& utt, const AsrModel<S>& asr, const Tokenizer& asr_tok,
                                         const Tokenizer& lm_tok, const CouplingSpec& spec,
                                         int lm_max_positions = INT32_MAX) {
  CouplingExample<S> ex;
  ex.align = build_alignment(utt.transcript, lm_tok, asr_tok);
  ex.n_targets = ex.align.llm_target_count();
  const int asr_len = int(ex.align.asr_tokens.size());
  require(asr_len <= asr.cfg.decoder.max_positions,
          "coupling example: cascaded sequence length " + std::to_string(asr_len) + " exceeds ASR positions");
  require(utt.audio.t <= asr.cfg.encoder.max_positions, "coupling example: audio too long");
  require(ex.n_targets <= lm_max_positions, "coupling example: LM sequence exceeds max_positions");

  NoGradGuard ng;
  auto enc = asr.encode(utt.audio);
  std::vector<S> hvals(enc.h.begin(), enc.h.end());
  auto memory = Tensor<S>::from({enc.t, enc.dim}, std::move(hvals));
  std::vector<int> positions(static_cast<size_t>(asr_len));
  for (int i = 0; i < asr_len; ++i) positions[size_t(i)] = i;
  std::vector<Tensor<S>> layer_outputs;
  asr.decode_concat(ex.align.asr_tokens.ids, positions, {{0, asr_len, 0, asr_len}}, memory,
                    {{0, asr_len, 0, enc.t}}, &layer_outputs);

  const int m = asr.cfg.decoder.model_dim;
  for (const auto& [llm_layer, asr_layer] : spec.layer_pairs) {
    require(asr_layer >= 1 && asr_layer <= int(layer_outputs.size()), "coupling example: ASR layer out of range");
    const auto& states = layer_outputs[size_t(asr_layer - 1)];
    std::vector<S> rows(size_t(ex.n_targets) * size_t(m));
    for (int t = 0; t < ex.n_targets; ++t) {
      const int src = ex.align.state_index[size_t(t)];
      std::copy_n(states.data() + size_t(src) * size_t(m), size_t(m), rows.data() + size_t(t) * size_t(m));
    }
    ex.gathered.push_back(std::move(rows));
  }
  return ex;
}

}  // namespace detail

/// Teacher-forced coupled loss over prepared examples: mean over utterances
/// of the per-utterance mean NLL across all LM target tokens (including
/// mid-character tokens and EOS).
template <typename S>
Tensor<S> teacher_forced_loss(const std::vector<const CouplingExample<S>*>& batch, const LmModel<S>& lm,
                              const CouplingParams<S>& theta) {
  require(!batch.empty(), "teacher_forced_loss: empty batch");
  const CouplingSpec& spec = theta.spec();
  const int m = spec.in_dim;

  std::vector<std::vector<int>> inputs;
  std::vector<int> targets;
  std::vector<S> weights;
  long total_rows = 0;
  for (const auto* ex : batch) total_rows += ex->n_targets;

  // Per coupled pair: one packed matrix of gathered ASR states.
  std::vector<std::vector<S>> packed_states(size_t(spec.k()));
  for (auto& v : packed_states) v.reserve(size_t(total_rows) * size_t(m));

  for (const auto* ex : batch) {
    const auto& ids = ex->align.llm_tokens.ids;  // [BOS] + content + [EOS]
    inputs.emplace_back(ids.begin(), ids.end() - 1);
    targets.insert(targets.end(), ids.begin() + 1, ids.end());
    const S w = S(1) / (S(batch.size()) * S(ex->n_targets));
    for (int t = 0; t < ex->n_targets; ++t) weights.push_back(w);
    for (int i = 0; i < spec.k(); ++i)
      packed_states[size_t(i)].insert(packed_states[size_t(i)].end(), ex->gathered[size_t(i)].begin(),
                                      ex->gathered[size_t(i)].end());
  }

  auto packed = pack_sequences(inputs);
  std::map<int, Tensor<S>> injections;
  for (int i = 0; i < spec.k(); ++i) {
    auto states = Tensor<S>::from({int(total_rows), m}, std::move(packed_states[size_t(i)]));
    injections.emplace(spec.layer_pairs[size_t(i)].first, theta.project_rows(i, states));
  }
  auto logits = lm.forward_concat(packed.tokens, packed.positions, packed.segs, &injections);
  return weighted_cross_entropy(logits, targets, weights);
}

/// Convenience overload preparing examples from raw utterances.
template <typename S>
Tensor<S> teacher_forced_loss(const std::vector<Utterance>& batch, const AsrModel<S>& asr, const Tokenizer& asr_tok,
                              const LmModel<S>& lm, const Tokenizer& lm_tok, const CouplingParams<S>& theta) {
  std::vector<CouplingExample<S>> examples;
  for (const auto& u : batch) examples.push_back(detail::make_coupling_example(u, asr, asr_tok, lm_tok, theta.spec()));
  std::vector<const CouplingExample<S>*> ptrs;
  for (const auto& e : examples) ptrs.push_back(&e);
  return teacher_forced_loss(ptrs, lm, theta);
}

namespace detail {

template <typename S>
double coupled_dev_loss(const std::vector<CouplingExample<S>>& examples, const LmModel<S>& lm,
                        const CouplingParams<S>& theta, size_t chunk = 64) {
  NoGradGuard ng;
  double total = 0;
  long n = 0;
  for (size_t beg = 0; beg < examples.size(); beg += chunk) {
    std::vector<const CouplingExample<S>*> batch;
    for (size_t i = beg; i < std::min(examples.size(), beg + chunk); ++i) batch.push_back(&examples[i]);
    total += double(teacher_forced_loss(batch, lm, theta).item()) * double(batch.size());
    n += long(batch.size());
  }
  return total / double(n);
}

}  // namespace detail

/// AdamW on theta_C only, both backbones frozen. Keeps the best-dev-loss
/// parameters. Utterances whose alignment or capacity checks fail are skipped
/// with a diagnostic count.
template <typename S>
TrainReport train_coupling(const std::vector<Utterance>& train, const std::vector<Utterance>& dev, AsrModel<S>& asr,
                           const Tokenizer& asr_tok, LmModel<S>& lm, const Tokenizer& lm_tok,
                           CouplingParams<S>& theta, const TrainConfig& cfg) {
  cfg.validate();
  require(!train.empty(), "train_coupling: no training utterances");
  const auto t0 = std::chrono::steady_clock::now();

  TrainReport report;
  report.frozen_asr_checksum_pre = checksum_params(asr.params());
  report.frozen_lm_checksum_pre = checksum_params(lm.params());
  asr.set_requires_grad(false);
  lm.set_requires_grad(false);

  auto prepare_all = [&](const std::vector<Utterance>& utts) {
    std::vector<CouplingExample<S>> out;
    for (const auto& u : utts) {
      try {
        out.push_back(detail::make_coupling_example(u, asr, asr_tok, lm_tok, theta.spec(), lm.cfg.max_positions));
      } catch (const Error& e) {
        ++report.skipped_utterances;
      }
    }
    return out;
  };
  auto train_ex = prepare_all(train);
  auto dev_ex = prepare_all(dev);
  require(!train_ex.empty(), "train_coupling: every training utterance was skipped");

  if (!dev_ex.empty()) {
    report.init_dev_loss = detail::coupled_dev_loss(dev_ex, lm, theta);
    report.best_dev_loss = report.init_dev_loss;
  }

  std::vector<Tensor<S>> params;
  for (auto& [name, t] : theta.params()) params.push_back(t);
  typename AdamW<S>::Options aopt;
  aopt.lr = S(cfg.learning_rate);
  aopt.weight_decay = S(cfg.weight_decay);
  AdamW<S> adam(params, aopt);

  // Best-dev snapshot of theta_C values.
  auto snapshot = [&] {
    std::vector<std::vector<S>> copy;
    for (auto& p : params) copy.push_back(p.values());
    return copy;
  };
  auto restore = [&](const std::vector<std::vector<S>>& copy) {
    for (size_t i = 0; i < params.size(); ++i) params[i].values() = copy[i];
  };
  auto best = snapshot();

  const int steps_per_epoch = int((train_ex.size() + size_t(cfg.batch_size) - 1) / size_t(cfg.batch_size));
  const int total_steps = std::min(cfg.max_steps, cfg.epochs * steps_per_epoch);
  auto rng = component_rng(cfg.seed, "train-coupling");
  std::vector<size_t> order(train_ex.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  size_t cursor = order.size();

  int step = 0;
  while (step < total_steps) {
    std::vector<const CouplingExample<S>*> batch;
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (cursor >= order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(&train_ex[order[cursor++]]);
    }
    auto loss = teacher_forced_loss(batch, lm, theta);
    if (!std::isfinite(double(loss.item())))
      throw NumericError("train_coupling: non-finite loss at step " + std::to_string(step + 1));
    adam.zero_grad();
    backward(loss);
    clip_grad_norm(params, S(cfg.grad_clip_norm));
    adam.step();
    ++step;
    if (step == 1 || step % 10 == 0 || step == total_steps)
      report.loss_curve.emplace_back(step, double(loss.item()));
    const bool epoch_end = (step % steps_per_epoch == 0) || step == total_steps;
    if (epoch_end && !dev_ex.empty()) {
      const double dl = detail::coupled_dev_loss(dev_ex, lm, theta);
      if (dl < report.best_dev_loss) {
        report.best_dev_loss = dl;
        best = snapshot();
      }
    }
  }
  report.steps_run = step;

  if (!dev_ex.empty()) {
    restore(best);
    report.final_dev_loss = detail::coupled_dev_loss(dev_ex, lm, theta);
  }
  report.frozen_asr_checksum_post = checksum_params(asr.params());
  report.frozen_lm_checksum_post = checksum_params(lm.params());
  report.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

/// Full-finetune ASR baseline (every ASR parameter trainable, same optimizer
/// family and settings as coupling training).
template <typename S>
PretrainReport finetune_asr_baseline(const std::vector<Utterance>& train, const std::vector<Utterance>& dev,
                                     AsrModel<S>& asr, const Tokenizer& asr_tok, const TrainConfig& cfg) {
  cfg.validate();
  asr.set_requires_grad(true);
  PretrainOptions opt;
  opt.batch_size = cfg.batch_size;
  opt.lr = cfg.learning_rate;
  opt.weight_decay = cfg.weight_decay;
  opt.grad_clip = cfg.grad_clip_norm;
  const int steps_per_epoch = int((train.size() + size_t(cfg.batch_size) - 1) / size_t(cfg.batch_size));
  opt.max_steps = std::min(cfg.max_steps, cfg.epochs * steps_per_epoch);
  opt.seed = cfg.seed;
  return pretrain_asr(asr, asr_tok, train, dev, opt);
}

/// True when none of the given tensors accumulated a gradient.
template <typename S>
bool params_have_no_grad(const std::vector<std::pair<std::string, Tensor<S>>>& named) {
  for (const auto& [name, t] : named)
    if (t.has_grad()) return false;
  return true;
}

}  // namespace salsa
