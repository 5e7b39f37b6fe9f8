// ual: uncertainty-aware label smoothing pipeline.
//
//   ual synth    -> two-regime toy corpus + mock judge score table
//   ual annotate -> judge every sample, write dataset with `uncertainty`
//   ual plan     -> solve beta so the mean smoothing value equals alpha
//   ual train    -> train the byte-level transformer (sft | ls | ual | ual-ppl)
//   ual eval     -> response perplexity of a checkpoint
//   ual analyze  -> token-pair silhouette study over penultimate features

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <iostream>

#include "ual/analysis.hpp"
#include "ual/checkpoint.hpp"
#include "ual/dataset.hpp"
#include "ual/error.hpp"
#include "ual/io.hpp"
#include "ual/judge.hpp"
#include "ual/perplexity.hpp"
#include "ual/smoothing.hpp"
#include "ual/synth.hpp"
#include "ual/tokenizer.hpp"
#include "ual/trainer.hpp"

namespace fs = std::filesystem;

namespace {

enum class LogLevel { kQuiet, kInfo, kDebug };

struct GlobalOptions {
  std::uint64_t seed = 0;
  bool deterministic = true;
  std::string log_level = "info";
  std::string config_path;

  LogLevel level() const {
    if (log_level == "quiet") return LogLevel::kQuiet;
    if (log_level == "debug") return LogLevel::kDebug;
    return LogLevel::kInfo;
  }
};

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Run directories must be new or empty so outputs never mix between runs.
void prepare_run_dir(const fs::path& dir) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw ual::InputError(dir.string() + " exists and is not a directory");
    if (!fs::is_empty(dir)) throw ual::InputError("run directory " + dir.string() + " is not empty");
  }
  fs::create_directories(dir);
}

/// Resolved settings of the global options and the active subcommand, in a
/// TOML form that --config accepts back.
void write_snapshot(const CLI::App& root, const fs::path& path) {
  std::string out;
  auto emit = [&out](const CLI::App& app) {
    for (const CLI::Option* opt : app.get_options()) {
      if (opt->get_lnames().empty() || opt->get_lnames().front() == "help" ||
          opt->get_lnames().front() == "config") {
        continue;
      }
      std::string value;
      if (opt->count() > 0) {
        const auto results = opt->reduced_results();
        value = results.empty() ? "" : results.front();
        if (opt->get_type_size() == 0) value = opt->as<bool>() ? "true" : "false";
      } else {
        value = opt->get_default_str();
      }
      const bool numeric = !value.empty() && (value == "true" || value == "false" ||
                                              value.find_first_not_of("0123456789.-+e") == std::string::npos);
      out += opt->get_lnames().front() + "=" + (numeric ? value : "\"" + value + "\"") + "\n";
    }
  };
  out += "# resolved " + utc_now() + "\n";
  emit(root);
  for (const CLI::App* sub : root.get_subcommands()) {
    out += "\n[" + sub->get_name() + "]\n";
    emit(*sub);
  }
  ual::io::write_file_atomic(path, out);
}

fs::path sibling(const fs::path& path, const std::string& suffix) {
  fs::path out = path;
  out += suffix;
  return out;
}

struct SynthArgs {
  std::string out;
  std::string scores;
  std::size_t low = 64;
  std::size_t high = 64;
};

int run_synth(const SynthArgs& args, const GlobalOptions& g) {
  ual::SynthOptions opt;
  opt.low_entropy = args.low;
  opt.high_entropy = args.high;
  opt.seed = g.seed;
  const auto corpus = ual::make_two_regime_corpus(opt);
  ual::save_dataset(args.out, corpus.dataset);
  if (!args.scores.empty()) ual::io::write_file_atomic(args.scores, ual::score_table_jsonl(corpus));
  std::cout << "wrote " << corpus.dataset.size() << " samples to " << args.out << "\n";
  return 0;
}

struct AnnotateArgs {
  std::string dataset;
  std::string out;
  std::string cache;
  ual::JudgeConfig judge;
};

int run_annotate(const AnnotateArgs& args, const CLI::App& root) {
  const fs::path out(args.out);
  write_snapshot(root, sibling(out, ".config.toml"));
  const auto dataset = ual::load_dataset(args.dataset);
  const fs::path cache_path = args.cache.empty() ? sibling(out, ".cache.jsonl") : fs::path(args.cache);
  ual::VerdictCache cache(cache_path);
  auto judge = ual::make_judge(args.judge);
  const auto result = ual::annotate(dataset, args.judge, *judge, cache);

  ual::save_dataset(out, result.dataset);
  nlohmann::ordered_json prov;
  prov["template_id"] = args.judge.template_id;
  prov["model"] = args.judge.model;
  prov["endpoint"] = args.judge.endpoint;
  prov["temperature"] = args.judge.temperature;
  prov["samples"] = result.dataset.size();
  prov["timestamp"] = utc_now();
  ual::io::write_file_atomic(sibling(out, ".provenance.json"), prov.dump(2) + "\n");

  const auto bins = ual::score_histogram(result.verdicts);
  std::cout << "annotated " << result.dataset.size() << " samples -> " << out.string() << "\n";
  std::cout << result.cache_hits << "/" << result.dataset.size() << " cache hits, " << result.judge_calls
            << " judge calls\n";
  std::cout << "score histogram:\n";
  for (std::size_t b = 0; b < bins.size(); ++b) {
    std::cout << "  [" << std::setw(3) << b * 10 << "," << std::setw(3) << (b == 9 ? 100 : b * 10 + 10)
              << (b == 9 ? "]" : ")") << " " << std::setw(6) << bins[b] << "\n";
  }
  return 0;
}

struct PlanArgs {
  std::string dataset;
  std::string out;
  double alpha = ual::kDefaultAlpha;
  double max_smoothing = ual::kDefaultMaxSmoothing;
};

int run_plan(const PlanArgs& args, const CLI::App& root) {
  const fs::path out(args.out);
  write_snapshot(root, sibling(out, ".config.toml"));
  const auto dataset = ual::load_dataset(args.dataset);
  const auto plan = ual::build_plan(dataset, args.alpha, args.max_smoothing);
  ual::save_plan(out, plan);
  std::cout << "beta " << ual::io::format_double(plan.beta) << "\n";
  std::cout << "mean " << ual::io::format_double(plan.mean_value()) << " (alpha "
            << ual::io::format_double(plan.alpha) << ")\n";
  std::cout << "truncated " << plan.truncated_count() << "/" << plan.size() << " at v_t "
            << ual::io::format_double(plan.max_smoothing) << "\n";
  return 0;
}

struct TrainArgs {
  std::string dataset;
  std::string run_dir;
  std::string mode = "sft";
  std::string plan;
  double alpha = ual::kDefaultAlpha;
  double max_smoothing = ual::kDefaultMaxSmoothing;
  ual::ModelConfig model;
  ual::HyperParams hyper;
};

int run_train(const TrainArgs& args, const GlobalOptions& g, const CLI::App& root) {
  const fs::path dir(args.run_dir);
  prepare_run_dir(dir);
  write_snapshot(root, dir / "config.toml");

  const auto dataset = ual::load_dataset(args.dataset);
  ual::TrainOptions opt;
  opt.mode = ual::parse_train_mode(args.mode);
  opt.alpha = args.alpha;
  opt.max_smoothing = args.max_smoothing;
  opt.hyper = args.hyper;
  opt.hyper.seed = g.seed;
  opt.hyper.deterministic = g.deterministic;
  if (opt.mode == ual::TrainMode::kUal) {
    if (args.plan.empty()) throw ual::PlanDatasetMismatch("--plan is required in ual mode");
    opt.plan = ual::load_plan(args.plan);
  }
  ual::ModelConfig model = args.model;
  model.seed = g.seed;

  const auto result = ual::train(model, dataset, opt, {dir / "metrics.jsonl", dir / "checkpoint.bin"});
  const auto& last = result.metrics.back();
  if (g.level() != LogLevel::kQuiet) {
    std::cout << "trained " << last.step << " steps (" << args.mode << "), final loss "
              << ual::io::format_double(last.loss) << ", checkpoint " << (dir / "checkpoint.bin").string() << "\n";
  }
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::string dataset;
  std::string run_dir;
};

int run_eval(const EvalArgs& args, const CLI::App& root) {
  const fs::path dir(args.run_dir);
  prepare_run_dir(dir);
  write_snapshot(root, dir / "config.toml");
  const auto ckpt = ual::load_checkpoint(args.checkpoint);
  const auto report = ual::evaluate_ppl(ckpt, ual::load_dataset(args.dataset));

  nlohmann::ordered_json j;
  j["corpus_ppl"] = report.corpus_ppl;
  j["mean_sample_ppl"] = report.mean_sample_ppl;
  auto rows = nlohmann::ordered_json::array();
  for (const auto& s : report.samples) {
    rows.push_back({{"id", s.id}, {"tokens", s.tokens}, {"mean_nll", s.mean_nll}, {"ppl", s.ppl}});
  }
  j["samples"] = std::move(rows);
  ual::io::write_file_atomic(dir / "ppl.json", j.dump(2) + "\n");
  std::cout << "corpus ppl " << ual::io::format_double(report.corpus_ppl) << ", mean sample ppl "
            << ual::io::format_double(report.mean_sample_ppl) << " over " << report.samples.size() << " samples\n";
  return 0;
}

struct AnalyzeArgs {
  std::string checkpoint;
  std::string corpus;
  std::string run_dir;
  ual::PairStudyOptions study;
};

int run_analyze(AnalyzeArgs args, const GlobalOptions& g, const CLI::App& root) {
  const fs::path dir(args.run_dir);
  prepare_run_dir(dir);
  write_snapshot(root, dir / "config.toml");
  args.study.seed = g.seed;
  const auto ckpt = ual::load_checkpoint(args.checkpoint);
  const auto corpus = ual::corpus_from_dataset(ual::load_dataset(args.corpus));
  const auto report = ual::pair_study(ckpt, corpus, args.study);
  ual::io::write_file_atomic(dir / "report.json", ual::report_to_json(report));

  // Plot data for the first sampled pair.
  const auto& first = report.pairs.front();
  const int pair[2] = {first.token_a, first.token_b};
  const auto features = ual::extract_features(ckpt, corpus, pair, args.study.cap);
  const auto projection = ual::pca_2d(features.matrix());
  ual::io::write_file_atomic(dir / "projection.csv", ual::projection_csv(features, projection));
  ual::io::write_file_atomic(dir / "projection.svg", ual::projection_svg(features, projection));

  std::cout << "mean silhouette " << ual::io::format_double(report.mean_score) << " over " << report.pairs.size()
            << " pairs (" << report.eligible_tokens << " eligible tokens)\n";
  return 0;
}

void add_model_options(CLI::App* cmd, ual::ModelConfig& m) {
  cmd->add_option("--context-length", m.context_length, "Context length T")->capture_default_str();
  cmd->add_option("--embed-dim", m.embed_dim, "Embedding width d")->capture_default_str();
  cmd->add_option("--layers", m.num_layers, "Transformer blocks L")->capture_default_str();
  cmd->add_option("--heads", m.num_heads, "Attention heads H (must divide d)")->capture_default_str();
  cmd->add_option("--mlp-ratio", m.mlp_ratio, "MLP hidden width multiplier")->capture_default_str();
}

void add_hyper_options(CLI::App* cmd, ual::HyperParams& h) {
  cmd->add_option("--lr", h.learning_rate, "Peak Adam learning rate")->capture_default_str();
  cmd->add_option("--warmup", h.warmup_steps, "Linear warmup steps")->capture_default_str();
  cmd->add_option("--batch-size", h.batch_size, "Samples per step")->capture_default_str();
  cmd->add_option("--epochs", h.epochs, "Passes over the dataset")->capture_default_str();
  cmd->add_option("--max-steps", h.max_steps, "Stop after this many steps (0 = use epochs)")->capture_default_str();
  cmd->add_option("--grad-clip", h.grad_clip, "Global gradient-norm clip (0 disables)")->capture_default_str();
  cmd->add_option("--threads", h.threads, "Worker threads when not deterministic")->capture_default_str();
  cmd->add_option("--ppl-decay", h.ppl_decay, "EMA decay of the running PPL (ual-ppl)")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Uncertainty-aware label smoothing: annotate, plan, train, evaluate, analyze"};
  app.require_subcommand(1);
  app.set_config("--config", "", "TOML config file; command-line flags take precedence");
  GlobalOptions g;
  app.add_option("--seed", g.seed, "Seed for initialization, shuffling and sampling")->capture_default_str();
  app.add_flag("--deterministic,!--no-deterministic", g.deterministic,
               "Single-threaded, wall clock recorded as 0 (default on)")
      ->default_str("true");
  app.add_option("--log-level", g.log_level, "quiet | info | debug")
      ->check(CLI::IsMember({"quiet", "info", "debug"}))
      ->capture_default_str();

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "Write the two-regime synthetic corpus");
  synth_cmd->add_option("--out", synth.out, "Dataset JSON-lines output")->required();
  synth_cmd->add_option("--scores", synth.scores, "Mock judge score table output (JSON lines)");
  synth_cmd->add_option("--low", synth.low, "Arithmetic (low-entropy) samples")->capture_default_str();
  synth_cmd->add_option("--high", synth.high, "Random-prose (high-entropy) samples")->capture_default_str();

  AnnotateArgs annotate;
  auto* annotate_cmd = app.add_subcommand("annotate", "Elicit uncertainty scores from a judge model");
  annotate_cmd->add_option("--dataset", annotate.dataset, "Input dataset (JSON lines)")->required();
  annotate_cmd->add_option("--out", annotate.out, "Annotated dataset output")->required();
  annotate_cmd->add_option("--cache", annotate.cache, "Verdict cache (default <out>.cache.jsonl)");
  annotate_cmd->add_option("--endpoint", annotate.judge.endpoint,
                           "Chat-completions URL, mock:fixed=<n> or mock:table=<path>")
      ->capture_default_str();
  annotate_cmd->add_option("--model", annotate.judge.model, "Judge model name")->capture_default_str();
  annotate_cmd->add_option("--timeout", annotate.judge.timeout_seconds, "Request timeout (s)")->capture_default_str();
  annotate_cmd->add_option("--max-retries", annotate.judge.max_retries, "Retries on transport/5xx errors")
      ->capture_default_str();
  annotate_cmd->add_option("--backoff", annotate.judge.backoff_base_seconds, "Backoff base (s), doubled per retry")
      ->capture_default_str();
  annotate_cmd->add_option("--max-in-flight", annotate.judge.max_in_flight, "Concurrent requests")
      ->capture_default_str();
  annotate_cmd->add_option("--template", annotate.judge.template_id, "Prompt template id")->capture_default_str();
  annotate_cmd->add_option("--temperature", annotate.judge.temperature, "Sampling temperature")->capture_default_str();
  annotate_cmd->add_option("--api-key-env", annotate.judge.api_key_env, "Environment variable holding the API key")
      ->capture_default_str();

  PlanArgs plan;
  auto* plan_cmd = app.add_subcommand("plan", "Solve per-sample smoothing values with mean alpha");
  plan_cmd->add_option("--dataset", plan.dataset, "Annotated dataset (JSON lines)")->required();
  plan_cmd->add_option("--out", plan.out, "Plan output")->required();
  plan_cmd->add_option("--alpha", plan.alpha, "Target mean smoothing value")->capture_default_str();
  plan_cmd->add_option("--v-t", plan.max_smoothing, "Maximum smoothing value")->capture_default_str();

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train the byte-level transformer");
  train_cmd->add_option("--dataset", train.dataset, "Training dataset (JSON lines)")->required();
  train_cmd->add_option("--run-dir", train.run_dir, "Fresh output directory")->required();
  train_cmd->add_option("--mode", train.mode, "sft | ls | ual | ual-ppl")
      ->check(CLI::IsMember({"sft", "ls", "ual", "ual-ppl"}))
      ->capture_default_str();
  train_cmd->add_option("--plan", train.plan, "Smoothing plan (ual mode)");
  train_cmd->add_option("--alpha", train.alpha, "Smoothing value (ls) or anchor (ual-ppl)")->capture_default_str();
  train_cmd->add_option("--v-t", train.max_smoothing, "Maximum smoothing value (ual-ppl)")->capture_default_str();
  add_model_options(train_cmd, train.model);
  add_hyper_options(train_cmd, train.hyper);

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Response perplexity of a checkpoint");
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--dataset", eval.dataset, "Evaluation dataset (JSON lines)")->required();
  eval_cmd->add_option("--run-dir", eval.run_dir, "Fresh output directory")->required();

  AnalyzeArgs analyze;
  auto* analyze_cmd = app.add_subcommand("analyze", "Token-pair feature clustering study");
  analyze_cmd->add_option("--checkpoint", analyze.checkpoint, "Checkpoint file")->required();
  analyze_cmd->add_option("--corpus", analyze.corpus, "Corpus dataset (JSON lines)")->required();
  analyze_cmd->add_option("--run-dir", analyze.run_dir, "Fresh output directory")->required();
  analyze_cmd->add_option("--pairs", analyze.study.n_pairs, "Token pairs to sample")->capture_default_str();
  analyze_cmd->add_option("--min-occurrences", analyze.study.min_occurrences, "Minimum occurrences per token")
      ->capture_default_str();
  analyze_cmd->add_option("--cap", analyze.study.cap, "Feature records kept per token")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ual::ExitCode::kInputError);
  }

  try {
    if (*synth_cmd) return run_synth(synth, g);
    if (*annotate_cmd) return run_annotate(annotate, app);
    if (*plan_cmd) return run_plan(plan, app);
    if (*train_cmd) return run_train(train, g, app);
    if (*eval_cmd) return run_eval(eval, app);
    if (*analyze_cmd) return run_analyze(analyze, g, app);
  } catch (const ual::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.code());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(ual::ExitCode::kInputError);
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return static_cast<int>(ual::ExitCode::kInternal);
  }
  return static_cast<int>(ual::ExitCode::kInternal);
}
