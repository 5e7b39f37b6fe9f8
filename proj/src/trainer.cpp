#include "ual/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>

#include <json.hpp>

#include "ual/adam.hpp"
#include "ual/error.hpp"
#include "ual/ppl_uncertainty.hpp"
#include "ual/tokenizer.hpp"

namespace ual {

EncodedSample encode_sample(const Sample& sample, int context_length) {
  const auto instruction = encode_bytes(sample.instruction);
  const auto response = encode_bytes(sample.response);
  const auto context = static_cast<std::size_t>(context_length);
  // Full sequence is BOS + instruction + response + EOS; inputs drop the last token.
  const std::size_t full = instruction.size() + response.size() + 2;
  if (response.size() + 2 > context + 1) {
    throw InputError("sample '" + sample.id + "': response of " + std::to_string(response.size()) +
                     " bytes does not fit context length " + std::to_string(context_length));
  }
  const std::size_t cut = full - 1 > context ? full - 1 - context : 0;

  std::vector<int> seq;
  seq.reserve(full - cut);
  seq.push_back(kBos);
  seq.insert(seq.end(), instruction.begin() + static_cast<std::ptrdiff_t>(cut), instruction.end());
  const std::size_t response_start = seq.size();
  seq.insert(seq.end(), response.begin(), response.end());
  seq.push_back(kEos);

  EncodedSample out;
  out.id = sample.id;
  out.inputs.assign(seq.begin(), seq.end() - 1);
  out.targets.assign(seq.begin() + 1, seq.end());
  out.mask.resize(out.targets.size());
  for (std::size_t t = 0; t < out.targets.size(); ++t) out.mask[t] = t + 1 >= response_start ? 1 : 0;
  return out;
}

Batch make_batch(std::span<const EncodedSample* const> samples, std::span<const double> smoothing) {
  if (samples.size() != smoothing.size()) throw ShapeMismatch("one smoothing value per sample required");
  std::size_t len = 0;
  for (const auto* s : samples) len = std::max(len, s->inputs.size());
  Batch batch;
  batch.inputs.batch_size = samples.size();
  batch.inputs.seq_len = len;
  batch.inputs.tokens.assign(samples.size() * len, kPad);
  batch.targets.assign(samples.size() * len, kPad);
  batch.loss_mask.assign(samples.size() * len, 0);
  batch.smoothing.assign(smoothing.begin(), smoothing.end());
  for (std::size_t b = 0; b < samples.size(); ++b) {
    const auto& s = *samples[b];
    std::copy(s.inputs.begin(), s.inputs.end(), batch.inputs.tokens.begin() + static_cast<std::ptrdiff_t>(b * len));
    std::copy(s.targets.begin(), s.targets.end(), batch.targets.begin() + static_cast<std::ptrdiff_t>(b * len));
    std::copy(s.mask.begin(), s.mask.end(), batch.loss_mask.begin() + static_cast<std::ptrdiff_t>(b * len));
    batch.sample_ids.push_back(s.id);
  }
  return batch;
}

std::string to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::kSft: return "sft";
    case TrainMode::kLabelSmoothing: return "ls";
    case TrainMode::kUal: return "ual";
    case TrainMode::kUalPpl: return "ual-ppl";
  }
  return "unknown";
}

TrainMode parse_train_mode(const std::string& name) {
  if (name == "sft") return TrainMode::kSft;
  if (name == "ls") return TrainMode::kLabelSmoothing;
  if (name == "ual") return TrainMode::kUal;
  if (name == "ual-ppl" || name == "ual_ppl") return TrainMode::kUalPpl;
  throw InvalidHyper("unknown training mode '" + name + "' (expected sft, ls, ual, ual-ppl)");
}

std::string to_json_line(const MetricsRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["epoch"] = r.epoch;
  j["loss"] = r.loss;
  j["mean_v"] = r.mean_smoothing;
  j["ppl"] = r.ppl;
  j["lr"] = r.learning_rate;
  j["grad_norm"] = r.grad_norm;
  j["wall_ms"] = r.wall_ms;
  return j.dump();
}

namespace {

void check_options(const TrainOptions& opt, const Dataset& dataset) {
  const auto& h = opt.hyper;
  if (dataset.empty()) throw EmptyDataset();
  if (!(h.learning_rate > 0.0) || !std::isfinite(h.learning_rate)) throw InvalidHyper("learning rate must be > 0");
  if (h.batch_size == 0) throw InvalidHyper("batch size must be >= 1");
  if (h.max_steps <= 0 && h.epochs <= 0) throw InvalidHyper("need epochs >= 1 or max_steps >= 1");
  if (h.warmup_steps < 0) throw InvalidHyper("warmup steps must be >= 0");
  if (h.grad_clip < 0.0) throw InvalidHyper("gradient clip must be >= 0 (0 disables)");
  if (!(opt.max_smoothing > 0.0 && opt.max_smoothing < 1.0)) throw InvalidHyper("v_t must lie in (0, 1)");
  if (opt.mode == TrainMode::kLabelSmoothing && !(opt.alpha >= 0.0 && opt.alpha <= opt.max_smoothing)) {
    throw InvalidHyper("ls alpha must lie in [0, v_t]");
  }
  if (opt.mode == TrainMode::kUalPpl && !(opt.alpha > 0.0 && opt.alpha < opt.max_smoothing)) {
    throw InvalidHyper("ual-ppl alpha must lie in (0, v_t)");
  }
  if (opt.mode == TrainMode::kUal && !opt.plan) throw PlanDatasetMismatch("ual mode requires a smoothing plan");
}

std::vector<double> fixed_smoothing(const TrainOptions& opt, const Dataset& dataset) {
  switch (opt.mode) {
    case TrainMode::kSft:
    case TrainMode::kUalPpl:
      return std::vector<double>(dataset.size(), 0.0);
    case TrainMode::kLabelSmoothing:
      return std::vector<double>(dataset.size(), opt.alpha);
    case TrainMode::kUal: break;
  }
  const auto& plan = *opt.plan;
  if (plan.sample_ids.size() != plan.values.size()) throw PlanDatasetMismatch("plan ids and values differ in length");
  std::map<std::string, double> by_id;
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const double v = plan.values[i];
    if (!(v >= 0.0 && v <= plan.max_smoothing)) {
      throw PlanDatasetMismatch("plan value for '" + plan.sample_ids[i] + "' outside [0, v_t]");
    }
    auto [it, inserted] = by_id.emplace(plan.sample_ids[i], v);
    if (!inserted && it->second != v) {
      throw PlanDatasetMismatch("plan lists '" + plan.sample_ids[i] + "' twice with different values");
    }
  }
  std::vector<double> out;
  out.reserve(dataset.size());
  for (const auto& s : dataset) {
    auto it = by_id.find(s.id);
    if (it == by_id.end()) throw PlanDatasetMismatch("sample '" + s.id + "' is not in the plan");
    out.push_back(it->second);
  }
  return out;
}

}  // namespace

TrainResult train(const ModelConfig& config, const Dataset& dataset, const TrainOptions& options,
                  const TrainOutputs& outputs) {
  config.validate();
  check_options(options, dataset);
  const auto& hyper = options.hyper;
  const std::vector<double> smoothing = fixed_smoothing(options, dataset);

  std::vector<EncodedSample> encoded;
  encoded.reserve(dataset.size());
  for (const auto& s : dataset) encoded.push_back(encode_sample(s, config.context_length));

  const std::size_t n = dataset.size();
  const auto batches_per_epoch = static_cast<std::int64_t>((n + hyper.batch_size - 1) / hyper.batch_size);
  const std::int64_t total_steps = hyper.max_steps > 0 ? hyper.max_steps : hyper.epochs * batches_per_epoch;
  const int threads = hyper.deterministic ? 1 : std::max(1, hyper.threads);

  TrainResult result;
  result.checkpoint.params = Parameters<float>::initialized(config);
  auto& params = result.checkpoint.params;
  auto adam = AdamState<float>::zeros(params.data.size());

  std::ofstream metrics_out;
  if (outputs.metrics_path) {
    metrics_out.open(*outputs.metrics_path, std::ios::binary | std::ios::trunc);
    if (!metrics_out) throw InputError("cannot open metrics log " + outputs.metrics_path->string());
  }

  PplState ppl_state;
  ppl_state.decay = hyper.ppl_decay;
  SmoothingOverride ppl_override;
  if (options.mode == TrainMode::kUalPpl) {
    ppl_override = [&](std::size_t, double mean_nll) {
      auto next = ppl_smoothing(std::exp(mean_nll), ppl_state, options.alpha, options.max_smoothing);
      ppl_state = next.state;
      return next.value;
    };
  }

  std::mt19937_64 shuffle_rng(hyper.seed);
  std::vector<std::size_t> order(n);
  const auto start = std::chrono::steady_clock::now();
  std::int64_t step = 0;
  for (std::int64_t epoch = 0; step < total_steps; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t first = 0; first < n && step < total_steps; first += hyper.batch_size) {
      const std::size_t last = std::min(n, first + hyper.batch_size);
      std::vector<const EncodedSample*> members;
      std::vector<double> values;
      for (std::size_t i = first; i < last; ++i) {
        members.push_back(&encoded[order[i]]);
        values.push_back(smoothing[order[i]]);
      }
      const Batch batch = make_batch(members, values);
      auto lg = loss_and_grad(params, batch, ppl_override, threads);

      ++step;
      const double lr = warmup_lr(hyper.learning_rate, step, hyper.warmup_steps);
      const double norm = clip_global_norm<float>(lg.grads.data, hyper.grad_clip);
      adam_step<float>(params.data, lg.grads.data, adam, lr);

      MetricsRecord rec;
      rec.step = step;
      rec.epoch = epoch;
      rec.loss = static_cast<double>(lg.loss);
      // The loss sees smoothing at training precision; report that value.
      double v_sum = 0.0, nll_sum = 0.0;
      for (std::size_t b = 0; b < lg.smoothing.size(); ++b) {
        v_sum += static_cast<double>(static_cast<float>(lg.smoothing[b]));
        nll_sum += lg.sample_nll[b];
      }
      rec.mean_smoothing = v_sum / static_cast<double>(lg.smoothing.size());
      rec.ppl = std::exp(nll_sum / static_cast<double>(lg.sample_nll.size()));
      rec.learning_rate = lr;
      rec.grad_norm = norm;
      if (!hyper.deterministic) {
        rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      }
      if (metrics_out.is_open()) {
        metrics_out << to_json_line(rec) << '\n';
        metrics_out.flush();
      }
      result.metrics.push_back(rec);
    }
  }

  result.checkpoint.step = step;
  result.checkpoint.optimizer = std::move(adam);
  if (outputs.checkpoint_path) save_checkpoint(*outputs.checkpoint_path, result.checkpoint);
  return result;
}

}  // namespace ual
