// Acceptance suite: one PASS/FAIL line per criterion. Exits nonzero only when
// a hard criterion fails; criterion 7 is reported but soft.

#include <sys/wait.h>

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "ual/analysis.hpp"
#include "ual/checkpoint.hpp"
#include "ual/io.hpp"
#include "ual/judge.hpp"
#include "ual/loss.hpp"
#include "ual/perplexity.hpp"
#include "ual/ppl_uncertainty.hpp"
#include "ual/smoothing.hpp"
#include "ual/trainer.hpp"

using namespace ual;
namespace fs = std::filesystem;

namespace {

// Tolerances and budgets.
constexpr double kSolverTol = 1e-9;
constexpr double kSolverBudgetS = 5.0;
constexpr double kCeTol = 1e-12;
constexpr double kUniformTol = 1e-9;
constexpr double kAffineTol = 1e-12;
constexpr double kLossBudgetS = 1.0;
constexpr double kGradStep = 1e-5;
constexpr double kGradTol = 1e-4;
constexpr double kGradBudgetS = 120.0;
constexpr double kOverfitLoss = 0.01;
constexpr double kOverfitPpl = 1.02;
constexpr double kPcaTol = 1e-8;
constexpr double kClusterBudgetS = 10.0;
constexpr double kEmaTol = 1e-12;
constexpr double kTrendAlpha = 0.1;
constexpr int kTrendSeeds = 5;
constexpr int kTrendWins = 3;

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(double x) {
  std::ostringstream os;
  os.precision(4);
  os << x;
  return os.str();
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("ual_accept_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

int run_cli(const fs::path& cwd, const std::string& args) {
  const std::string cmd = "cd '" + cwd.string() + "' && '" + std::string(UAL_CLI_PATH) + "' " + args +
                          " >>'" + (cwd / "cli.log").string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string data_file(const std::string& name) { return (fs::path(UAL_DATA_DIR) / name).string(); }

// 1 -------------------------------------------------------------------------
Outcome solver() {
  const auto start = Clock::now();
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> size(1, 512);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double v_t = 0.99;
  double worst_target = 0.0, worst_oracle = 0.0;
  int checked = 0;
  while (checked < 1000) {
    std::vector<double> us(size(rng));
    for (auto& u : us) u = unit(rng);
    const double sup = smoothing_supremum(us, v_t);
    const double alpha = unit(rng) * 0.9 * sup;
    if (alpha <= 0.0) continue;
    const double beta = solve_beta(us, alpha, v_t);
    const double achieved = mean_smoothing(us, beta, v_t);
    const double reference = oracle::mean_truncated(us, oracle::bisection_beta(us, alpha, v_t), v_t);
    worst_target = std::max(worst_target, std::abs(achieved - alpha));
    worst_oracle = std::max(worst_oracle, std::abs(achieved - reference));
    ++checked;
  }
  const double elapsed = seconds_since(start);
  return {worst_target <= kSolverTol && worst_oracle <= kSolverTol && elapsed < kSolverBudgetS,
          "1000 instances, max |mean-alpha| " + fmt(worst_target) + ", max |mean-oracle| " + fmt(worst_oracle) +
              ", " + fmt(elapsed) + " s"};
}

// 2 -------------------------------------------------------------------------
Outcome loss_identities() {
  const auto start = Clock::now();
  std::mt19937_64 rng(7);
  std::normal_distribution<double> normal(0.0, 3.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> vocab(2, 300);
  double ce = 0.0, uniform = 0.0, affine = 0.0;
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t V = vocab(rng);
    std::vector<double> x(V);
    for (auto& a : x) a = normal(rng);
    const std::size_t t = std::uniform_int_distribution<std::size_t>(0, V - 1)(rng);
    const double v = unit(rng);
    ce = std::max(ce, std::abs(smoothed_token_loss<double>(x, t, 0.0) - oracle::smoothed_ce(x, t, 0.0)));
    const double l0 = smoothed_token_loss<double>(x, t, 0.0);
    const double l1 = smoothed_token_loss<double>(x, t, 1.0);
    affine = std::max(affine, std::abs(smoothed_token_loss<double>(x, t, v) - ((1 - v) * l0 + v * l1)));
    const std::vector<double> flat(V, normal(rng));
    uniform = std::max(uniform, std::abs(smoothed_token_loss<double>(flat, t, v) - std::log(double(V))));
  }
  const double elapsed = seconds_since(start);
  return {ce <= kCeTol && uniform <= kUniformTol && affine <= kAffineTol && elapsed < kLossBudgetS,
          "ce " + fmt(ce) + ", uniform " + fmt(uniform) + ", affine " + fmt(affine) + ", " + fmt(elapsed) + " s"};
}

// 3 -------------------------------------------------------------------------
Outcome gradient() {
  const auto start = Clock::now();
  ModelConfig cfg;
  cfg.context_length = 16;
  cfg.embed_dim = 16;
  cfg.num_layers = 2;
  cfg.num_heads = 2;
  cfg.seed = 11;
  const auto errors = gradcheck::check(gradcheck::perturbed_params(cfg, 12), gradcheck::random_batch(cfg, 13), kGradStep);
  // Judged per tensor: at h = 1e-5 the central difference carries ~eps*|L|/h
  // of round-off, which swamps entries near 1e-7 elementwise.
  double worst = 0.0, worst_elementwise = 0.0;
  std::string worst_name;
  std::size_t coords = 0;
  for (const auto& e : errors) {
    coords += e.checked;
    worst_elementwise = std::max(worst_elementwise, e.max_relative);
    if (e.norm_relative >= worst) {
      worst = e.norm_relative;
      worst_name = e.name;
    }
  }
  const double elapsed = seconds_since(start);
  return {worst <= kGradTol && elapsed < kGradBudgetS,
          std::to_string(errors.size()) + " tensors, " + std::to_string(coords) + " coordinates, max per-tensor rel err " +
              fmt(worst) + " (" + worst_name + "), worst single entry " + fmt(worst_elementwise) + ", " +
              fmt(elapsed) + " s"};
}

// 4 -------------------------------------------------------------------------
Outcome equivalence() {
  ModelConfig cfg;
  cfg.context_length = 64;
  cfg.embed_dim = 16;
  cfg.num_layers = 2;
  cfg.num_heads = 2;
  cfg.seed = 4;
  auto dataset = [](std::optional<double> u) {
    Dataset ds;
    for (int i = 0; i < 12; ++i) {
      ds.push_back({"e" + std::to_string(i), "Echo " + std::to_string(i), "reply " + std::to_string(i * 13), u});
    }
    return ds;
  };
  auto opts = [](TrainMode mode, double alpha) {
    TrainOptions o;
    o.mode = mode;
    o.alpha = alpha;
    o.hyper.learning_rate = 3e-3;
    o.hyper.warmup_steps = 3;
    o.hyper.batch_size = 4;
    o.hyper.max_steps = 15;
    o.hyper.seed = 9;
    return o;
  };
  auto fingerprint = [](const TrainResult& r) {
    std::string s = serialize_checkpoint(r.checkpoint);
    for (const auto& m : r.metrics) s += to_json_line(m);
    return s;
  };
  int ok = 0, total = 0;
  ++total;
  ok += fingerprint(train(cfg, dataset({}), opts(TrainMode::kSft, 0.0))) ==
        fingerprint(train(cfg, dataset({}), opts(TrainMode::kLabelSmoothing, 0.0)));
  for (double u : {0.2, 0.5, 0.9}) {
    const auto ds = dataset(u);
    auto ual_opts = opts(TrainMode::kUal, 0.1);
    ual_opts.plan = build_plan(ds, 0.1, kDefaultMaxSmoothing);
    ++total;
    ok += fingerprint(train(cfg, ds, ual_opts)) == fingerprint(train(cfg, ds, opts(TrainMode::kLabelSmoothing, 0.1)));
  }
  return {ok == total, std::to_string(ok) + "/" + std::to_string(total) +
                           " bit-identical (sft=ls(0); ual(u const)=ls(0.1) for u in 0.2,0.5,0.9)"};
}

// 5 -------------------------------------------------------------------------
Outcome overfit() {
  const Dataset one{{"m", "Repeat:", "the quick brown fox", {}}};
  ModelConfig cfg;
  cfg.context_length = 32;
  cfg.embed_dim = 32;
  cfg.num_layers = 1;
  cfg.num_heads = 2;
  cfg.seed = 5;
  TrainOptions o;
  o.mode = TrainMode::kSft;
  o.hyper.learning_rate = 1e-2;
  o.hyper.warmup_steps = 20;
  o.hyper.batch_size = 1;
  o.hyper.max_steps = 500;
  const auto r = train(cfg, one, o);
  double best = r.metrics.front().loss;
  std::int64_t first_below = -1;
  for (const auto& m : r.metrics) {
    best = std::min(best, m.loss);
    if (first_below < 0 && m.loss < kOverfitLoss) first_below = m.step;
  }
  const double ppl = evaluate_ppl(r.checkpoint, one).samples.at(0).ppl;
  return {r.metrics.back().loss < kOverfitLoss && ppl < kOverfitPpl,
          "final loss " + fmt(r.metrics.back().loss) + " (first < 0.01 at step " + std::to_string(first_below) +
              "), eval ppl " + fmt(ppl)};
}

// 6 -------------------------------------------------------------------------
Outcome clustering() {
  const auto start = Clock::now();
  std::mt19937_64 rng(66);
  std::normal_distribution<double> normal(0.0, 1.0);
  int exact = 0;
  double pca_err = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(4, 200)(rng);
    const std::size_t d = std::uniform_int_distribution<std::size_t>(1, 32)(rng);
    const double shift = std::uniform_real_distribution<double>(0.0, 3.0)(rng);
    Matrix x(n, d);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      labels[i] = i < 4 ? static_cast<int>(i % 2) : static_cast<int>(rng() % 2);
      for (std::size_t c = 0; c < d; ++c) x(i, c) = normal(rng) + (labels[i] == 1 && c == 0 ? shift : 0.0);
    }
    exact += silhouette(x, labels) == oracle::brute_silhouette(x.data, n, d, labels);
  }
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(20, 200)(rng);
    const std::size_t d = std::uniform_int_distribution<std::size_t>(2, 32)(rng);
    Matrix x(n, d);
    // Geometric column scales keep the top two components separated.
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < d; ++c) x(r, c) = normal(rng) * std::pow(0.6, static_cast<double>(c)) + 0.5 * c;
    const auto p = pca_2d(x);
    const auto ref = oracle::svd_pca(x.data, n, d);
    for (Eigen::Index k = 0; k < 2; ++k) {
      for (std::size_t c = 0; c < d; ++c)
        pca_err = std::max(pca_err, std::abs(p.basis(static_cast<std::size_t>(k), c) - ref.basis(k, static_cast<Eigen::Index>(c))));
      for (std::size_t r = 0; r < n; ++r)
        pca_err = std::max(pca_err, std::abs(p.points(r, static_cast<std::size_t>(k)) - ref.points(static_cast<Eigen::Index>(r), k)));
    }
  }
  const double elapsed = seconds_since(start);
  return {exact == 100 && pca_err <= kPcaTol && elapsed < kClusterBudgetS,
          "silhouette exact " + std::to_string(exact) + "/100, PCA max err " + fmt(pca_err) + " over 100 instances, " +
              fmt(elapsed) + " s"};
}

// 7 -------------------------------------------------------------------------
Outcome trend() {
  const auto start = Clock::now();
  const auto dir = scratch("trend");
  const auto corpus = data_file("synthetic.jsonl");

  // Score table sanity: low-entropy ids score <= 20, high-entropy ids >= 70.
  bool regimes_ok = true;
  std::istringstream table(io::read_file(data_file("synthetic_scores.jsonl")));
  for (std::string line; std::getline(table, line);) {
    if (line.empty()) continue;
    const auto row = nlohmann::json::parse(line);
    const auto id = row.at("id").get<std::string>();
    const int score = row.at("score").get<int>();
    if (id.rfind("arith", 0) == 0 && score > 20) regimes_ok = false;
    if (id.rfind("prose", 0) == 0 && score < 70) regimes_ok = false;
  }

  if (run_cli(dir, "annotate --dataset '" + corpus + "' --out ann.jsonl --endpoint 'mock:table=" +
                       data_file("synthetic_scores.jsonl") + "'") != 0 ||
      run_cli(dir, "plan --dataset ann.jsonl --out plan.txt --alpha " + fmt(kTrendAlpha)) != 0) {
    return {false, "annotate/plan failed; see " + (dir / "cli.log").string()};
  }
  const std::string hyper =
      "--context-length 96 --embed-dim 32 --layers 2 --heads 2 --batch-size 8 --max-steps 400 --warmup 40 --lr 3e-3";
  int wins = 0;
  std::string per_seed;
  for (int seed = 1; seed <= kTrendSeeds; ++seed) {
    double mean[2] = {0.0, 0.0};
    const char* modes[2] = {"sft", "ual"};
    for (int m = 0; m < 2; ++m) {
      const std::string tag = std::string(modes[m]) + std::to_string(seed);
      const std::string extra = m == 1 ? " --plan plan.txt" : "";
      const std::string global = "--seed " + std::to_string(seed) + " ";
      if (run_cli(dir, global + "train --dataset ann.jsonl --run-dir t_" + tag + " --mode " + modes[m] + extra + " " +
                           hyper) != 0 ||
          run_cli(dir, global + "analyze --checkpoint t_" + tag + "/checkpoint.bin --corpus ann.jsonl --run-dir a_" + tag) !=
              0) {
        return {false, "run " + tag + " failed; see " + (dir / "cli.log").string()};
      }
      mean[m] = nlohmann::json::parse(io::read_file(dir / ("a_" + tag) / "report.json")).at("mean_silhouette").get<double>();
    }
    wins += mean[1] >= mean[0];
    per_seed += (seed > 1 ? "; " : "") + std::string("seed ") + std::to_string(seed) + " sft " + fmt(mean[0]) +
                " ual " + fmt(mean[1]);
  }
  const bool pass = regimes_ok && wins >= kTrendWins;
  return {pass, "ual >= sft in " + std::to_string(wins) + "/" + std::to_string(kTrendSeeds) + " seeds [" + per_seed +
                    "], regimes " + (regimes_ok ? "ok" : "BAD") + ", " + fmt(seconds_since(start)) + " s"};
}

// 8 -------------------------------------------------------------------------
Outcome ppl_variant() {
  const double alpha = 0.1, v_t = 0.99;
  bool ok = true;
  const auto first = ppl_smoothing(7.0, PplState{}, alpha, v_t);
  ok &= first.value == alpha && first.state.initialized && first.state.running_mean == 7.0;
  const PplState seeded{10.0, true, 0.99};
  ok &= std::abs(ppl_smoothing(10.0, seeded, alpha, v_t).value - alpha) <= kEmaTol;
  ok &= std::abs(ppl_smoothing(20.0, seeded, alpha, v_t).value - 2 * alpha) <= kEmaTol;
  ok &= ppl_smoothing(1e6, seeded, alpha, v_t).value == v_t;
  double worst = 0.0;
  for (double p : {1.5, 40.0}) {
    PplState st = seeded;
    for (int k = 1; k <= 500; ++k) {
      st = ppl_smoothing(p, st, alpha, v_t).state;
      const double expected = std::pow(0.99, k) * 10.0 + (1 - std::pow(0.99, k)) * p;
      worst = std::max(worst, std::abs(st.running_mean - expected));
    }
  }
  return {ok && worst <= kEmaTol, std::string("ratio examples ") + (ok ? "ok" : "WRONG") + ", EMA max err " + fmt(worst)};
}

// 9 -------------------------------------------------------------------------
Outcome determinism() {
  const auto dir = scratch("determinism");
  const std::string corpus = data_file("synthetic.jsonl");
  const std::string hyper = "--context-length 96 --embed-dim 16 --layers 2 --heads 2 --batch-size 4 --max-steps 40 --warmup 5";
  for (const char* tag : {"1", "2"}) {
    if (run_cli(dir, "--seed 17 train --dataset '" + corpus + "' --mode ls --alpha 0.1 --run-dir t" + tag + " " + hyper) !=
            0 ||
        run_cli(dir, "--seed 17 analyze --checkpoint t1/checkpoint.bin --corpus '" + corpus + "' --run-dir a" + tag) != 0) {
      return {false, "cli run failed; see " + (dir / "cli.log").string()};
    }
  }
  auto same = [&](const std::string& a, const std::string& b) { return io::read_file(dir / a) == io::read_file(dir / b); };
  const bool metrics = same("t1/metrics.jsonl", "t2/metrics.jsonl");
  const bool ckpt = same("t1/checkpoint.bin", "t2/checkpoint.bin");
  const bool report = same("a1/report.json", "a2/report.json") && same("a1/projection.csv", "a2/projection.csv");
  return {metrics && ckpt && report, std::string("metrics ") + (metrics ? "identical" : "DIFFER") + ", checkpoint " +
                                         (ckpt ? "identical" : "DIFFER") + ", report " + (report ? "identical" : "DIFFER")};
}

// 10 ------------------------------------------------------------------------
Outcome annotation() {
  const auto dir = scratch("annotation");
  const auto input = load_dataset(data_file("synthetic.jsonl"));
  JudgeConfig cfg;
  cfg.endpoint = "mock:table=" + data_file("synthetic_scores.jsonl");
  cfg.max_in_flight = 8;

  auto judge = make_judge(cfg);
  VerdictCache cold(dir / "cache.jsonl");
  const auto first = annotate(input, cfg, *judge, cold);

  bool lossless = first.dataset.size() == input.size();
  for (std::size_t i = 0; lossless && i < input.size(); ++i) {
    const auto& a = input[i];
    const auto& b = first.dataset[i];
    lossless = a.id == b.id && a.instruction == b.instruction && a.response == b.response && b.uncertainty.has_value();
  }

  auto warm_judge = make_judge(cfg);
  VerdictCache warm(dir / "cache.jsonl");
  const auto second = annotate(input, cfg, *warm_judge, warm);
  const bool idempotent = second.dataset == first.dataset && warm_judge->calls() == 0 && second.cache_hits == input.size();

  const bool cli_ok =
      run_cli(dir, "annotate --dataset '" + data_file("synthetic.jsonl") + "' --out out.jsonl --endpoint '" + cfg.endpoint + "'") == 0 &&
      load_dataset(dir / "out.jsonl") == first.dataset;

  return {lossless && idempotent && cli_ok,
          std::to_string(input.size()) + " samples, order/lossless " + (lossless ? "ok" : "BAD") + ", warm re-run " +
              std::to_string(warm_judge->calls()) + " calls / " + std::to_string(second.cache_hits) + " hits, cli " +
              (cli_ok ? "ok" : "BAD")};
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    bool soft;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "solver correctness", false, solver},
      {2, "loss identities", false, loss_identities},
      {3, "gradient exactness", false, gradient},
      {4, "equivalence ladder", false, equivalence},
      {5, "overfit sanity", false, overfit},
      {6, "silhouette and PCA oracles", false, clustering},
      {7, "qualitative trend (soft)", true, trend},
      {8, "ppl-variant contract", false, ppl_variant},
      {9, "determinism", false, determinism},
      {10, "annotation pipeline", false, annotation},
  };
  int hard_failures = 0;
  for (const auto& c : criteria) {
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass && !c.soft) ++hard_failures;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << c.id << "] " << c.name << ": " << o.detail << std::endl;
  }
  std::cout << (hard_failures == 0 ? "all hard criteria passed" : std::to_string(hard_failures) + " hard criteria failed")
            << std::endl;
  return hard_failures == 0 ? 0 : 1;
}
