#include <doctest.h>

#include <json.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <sys/wait.h>

#include "ual/checkpoint.hpp"
#include "ual/dataset.hpp"
#include "ual/io.hpp"
#include "ual/smoothing.hpp"

using namespace ual;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

class Workspace {
 public:
  explicit Workspace(const std::string& name) : dir_(fs::temp_directory_path() / ("ual_cli_" + name)) {
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  ~Workspace() { fs::remove_all(dir_); }

  fs::path path(const std::string& name) const { return dir_ / name; }

  Run run(const std::string& args) const {
    const auto out = dir_ / ".stdout";
    const auto err = dir_ / ".stderr";
    const std::string cmd = "cd '" + dir_.string() + "' && '" + std::string(UAL_CLI_PATH) + "' " + args + " >'" +
                            out.string() + "' 2>'" + err.string() + "'";
    const int status = std::system(cmd.c_str());
    Run r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = io::read_file(out);
    r.err = io::read_file(err);
    return r;
  }

  void write(const std::string& name, const std::string& text) const { io::write_file_atomic(path(name), text); }
  std::string read(const std::string& name) const { return io::read_file(path(name)); }

 private:
  fs::path dir_;
};

std::string dataset_text(std::size_t n, std::optional<double> u = std::nullopt) {
  Dataset ds;
  for (std::size_t i = 0; i < n; ++i) {
    ds.push_back({"s" + std::to_string(i), "Question " + std::to_string(i) + "?", "Answer " + std::to_string(i), u});
  }
  return serialize_dataset(ds);
}

std::string train_flags(int context = 32) {
  return "--context-length " + std::to_string(context) + " --embed-dim 16 --layers 1 --heads 2 --batch-size 4 --max-steps 5 --warmup 2 --lr 1e-3";
}

}  // namespace

TEST_CASE("help documents the subcommands") {
  Workspace ws("help");
  const auto r = ws.run("--help");
  CHECK(r.code == 0);
  for (const char* cmd : {"annotate", "plan", "train", "eval", "analyze", "synth"}) {
    CHECK(r.out.find(cmd) != std::string::npos);
  }
  const auto train = ws.run("train --help");
  CHECK(train.code == 0);
  for (const char* flag : {"--mode", "--alpha", "--plan", "--lr", "--run-dir", "--grad-clip"}) {
    CHECK(train.out.find(flag) != std::string::npos);
  }
}

TEST_CASE("usage errors exit 2") {
  Workspace ws("usage");
  CHECK(ws.run("").code == 2);
  CHECK(ws.run("frobnicate").code == 2);
  CHECK(ws.run("plan --alpha 0.1").code == 2);
  CHECK(ws.run("train --dataset x --run-dir r --mode dpo").code == 2);
}

TEST_CASE("annotate with a fixed mock judge, then with a warm cache") {
  Workspace ws("annotate");
  ws.write("data.jsonl", dataset_text(10));
  const auto input_before = ws.read("data.jsonl");

  const auto first = ws.run("annotate --dataset data.jsonl --out annotated.jsonl --endpoint mock:fixed=50");
  REQUIRE(first.code == 0);
  const auto ds = load_dataset(ws.path("annotated.jsonl"));
  REQUIRE(ds.size() == 10);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    CHECK(ds[i].id == "s" + std::to_string(i));
    CHECK(*ds[i].uncertainty == 0.5);
  }
  CHECK(first.out.find("0/10 cache hits") != std::string::npos);
  CHECK(first.out.find("[ 50, 60)     10") != std::string::npos);

  const auto prov = nlohmann::json::parse(ws.read("annotated.jsonl.provenance.json"));
  CHECK(prov["template_id"] == "uncertainty-v1");
  CHECK(prov["model"] == "gpt-4");
  CHECK(prov.contains("timestamp"));
  CHECK(fs::exists(ws.path("annotated.jsonl.config.toml")));

  const auto annotated_before = ws.read("annotated.jsonl");
  const auto second = ws.run("annotate --dataset data.jsonl --out annotated.jsonl --endpoint mock:fixed=50");
  REQUIRE(second.code == 0);
  CHECK(second.out.find("10/10 cache hits, 0 judge calls") != std::string::npos);
  CHECK(ws.read("annotated.jsonl") == annotated_before);
  CHECK(ws.read("data.jsonl") == input_before);
}

TEST_CASE("malformed dataset line exits 2 with the line number") {
  Workspace ws("malformed");
  auto text = dataset_text(6);
  text += "{\"id\": \"s6\", \"instruction\": oops}\n";
  text += dataset_text(3);
  ws.write("data.jsonl", text);
  const auto r = ws.run("annotate --dataset data.jsonl --out out.jsonl --endpoint mock:fixed=50");
  CHECK(r.code == 2);
  CHECK(r.err.find("line 7") != std::string::npos);
  CHECK(!fs::exists(ws.path("out.jsonl")));
}

TEST_CASE("unreachable judge exits 3 without writing output") {
  Workspace ws("judge_down");
  ws.write("data.jsonl", dataset_text(2));
  const auto r = ws.run(
      "annotate --dataset data.jsonl --out out.jsonl --endpoint http://127.0.0.1:9/v1/chat/completions "
      "--max-retries 1 --backoff 0 --timeout 2");
  CHECK(r.code == 3);
  CHECK(r.err.find("judge unavailable") != std::string::npos);
  CHECK(!fs::exists(ws.path("out.jsonl")));
}

TEST_CASE("plan") {
  Workspace ws("plan");
  Dataset ds{{"a", "i", "r", 0.2}, {"b", "i", "r", 0.4}, {"c", "i", "r", 0.6}};
  ws.write("ann.jsonl", serialize_dataset(ds));

  SUBCASE("solves beta") {
    const auto r = ws.run("plan --dataset ann.jsonl --out plan.txt --alpha 0.1");
    REQUIRE(r.code == 0);
    const auto plan = load_plan(ws.path("plan.txt"));
    CHECK(plan.beta == doctest::Approx(0.25).epsilon(1e-14));
    CHECK(r.out.find("beta 0.25") != std::string::npos);
    CHECK(r.out.find("truncated 0/3") != std::string::npos);
  }
  SUBCASE("alpha zero gives an all-zero plan") {
    REQUIRE(ws.run("plan --dataset ann.jsonl --out plan.txt --alpha 0").code == 0);
    for (double v : load_plan(ws.path("plan.txt")).values) CHECK(v == 0.0);
  }
  SUBCASE("infeasible constraint exits 4 with the supremum") {
    ws.write("zero.jsonl", serialize_dataset({{"a", "i", "r", 0.0}, {"b", "i", "r", 0.0}}));
    const auto r = ws.run("plan --dataset zero.jsonl --out plan.txt --alpha 0.1");
    CHECK(r.code == 4);
    CHECK(r.err.find("supremum 0") != std::string::npos);
    CHECK(!fs::exists(ws.path("plan.txt")));
  }
  SUBCASE("missing uncertainty exits 2") {
    ws.write("raw.jsonl", dataset_text(2));
    CHECK(ws.run("plan --dataset raw.jsonl --out plan.txt").code == 2);
  }
}

TEST_CASE("train: ls with alpha 0 reproduces sft byte-for-byte") {
  Workspace ws("train_equiv");
  ws.write("data.jsonl", dataset_text(8));
  REQUIRE(ws.run("--seed 3 train --dataset data.jsonl --run-dir sft --mode sft " + train_flags()).code == 0);
  REQUIRE(ws.run("--seed 3 train --dataset data.jsonl --run-dir ls --mode ls --alpha 0 " + train_flags()).code == 0);
  CHECK(ws.read("sft/metrics.jsonl") == ws.read("ls/metrics.jsonl"));
  CHECK(ws.read("sft/checkpoint.bin") == ws.read("ls/checkpoint.bin"));
  const auto sft_metrics = ws.read("sft/metrics.jsonl");
  CHECK(std::count(sft_metrics.begin(), sft_metrics.end(), '\n') == 5);
  CHECK(ws.read("sft/config.toml").find("mode=\"sft\"") != std::string::npos);

  SUBCASE("run directories must be fresh") {
    const auto r = ws.run("train --dataset data.jsonl --run-dir sft --mode sft " + train_flags());
    CHECK(r.code == 2);
    CHECK(r.err.find("not empty") != std::string::npos);
  }
  SUBCASE("ual mode needs a plan") {
    CHECK(ws.run("train --dataset data.jsonl --run-dir u --mode ual " + train_flags()).code == 2);
  }
}

TEST_CASE("train: ual mode from a plan file") {
  Workspace ws("train_ual");
  ws.write("data.jsonl", dataset_text(8, 0.5));
  REQUIRE(ws.run("plan --dataset data.jsonl --out plan.txt --alpha 0.1").code == 0);
  REQUIRE(ws.run("train --dataset data.jsonl --run-dir u --mode ual --plan plan.txt " + train_flags()).code == 0);
  REQUIRE(ws.run("train --dataset data.jsonl --run-dir l --mode ls --alpha 0.1 " + train_flags()).code == 0);
  CHECK(ws.read("u/metrics.jsonl") == ws.read("l/metrics.jsonl"));
}

TEST_CASE("config file values apply and flags win") {
  Workspace ws("config");
  ws.write("data.jsonl", dataset_text(8));
  ws.write("run.toml",
           "seed = 11\n"
           "[train]\n"
           "mode = \"ls\"\n"
           "alpha = 0.2\n"
           "max-steps = 3\n"
           "lr = 0.5\n");
  const auto r = ws.run("--config run.toml train --dataset data.jsonl --run-dir r --context-length 32 --embed-dim 16 "
                        "--layers 1 --heads 2 --batch-size 4 --lr 0.002");
  REQUIRE(r.code == 0);
  const auto snapshot = ws.read("r/config.toml");
  CHECK(snapshot.find("seed=11") != std::string::npos);
  CHECK(snapshot.find("alpha=0.2") != std::string::npos);
  CHECK(snapshot.find("lr=0.002") != std::string::npos);
  CHECK(snapshot.find("max-steps=3") != std::string::npos);
  const auto metrics = ws.read("r/metrics.jsonl");
  CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 3);
  CHECK(metrics.find("\"mean_v\":0.2") != std::string::npos);

  // The snapshot itself is a valid config that reproduces the run.
  ws.write("replay.toml", snapshot);
  REQUIRE(ws.run("--config replay.toml train --run-dir r2").code == 0);
  CHECK(ws.read("r2/metrics.jsonl") == metrics);
}

TEST_CASE("eval on a uniform model reports perplexity V") {
  Workspace ws("eval");
  ws.write("data.jsonl", dataset_text(4));
  ModelConfig cfg;
  cfg.context_length = 32;
  cfg.embed_dim = 8;
  cfg.num_layers = 1;
  cfg.num_heads = 2;
  Checkpoint ckpt;
  ckpt.params = Parameters<float>::zeros(cfg);
  save_checkpoint(ws.path("zero.bin"), ckpt);
  REQUIRE(ws.run("eval --checkpoint zero.bin --dataset data.jsonl --run-dir e").code == 0);
  const auto report = nlohmann::json::parse(ws.read("e/ppl.json"));
  CHECK(report["mean_sample_ppl"].get<double>() == doctest::Approx(259.0).epsilon(1e-5));
  CHECK(report["samples"].size() == 4);
  CHECK(fs::exists(ws.path("e/config.toml")));

  ws.write("bad.bin", "not a checkpoint");
  CHECK(ws.run("eval --checkpoint bad.bin --dataset data.jsonl --run-dir e2").code == 2);
}

TEST_CASE("analyze is deterministic and writes plot data") {
  Workspace ws("analyze");
  fs::copy_file(fs::path(UAL_DATA_DIR) / "synthetic.jsonl", ws.path("corpus.jsonl"));
  REQUIRE(ws.run("train --dataset corpus.jsonl --run-dir t " + train_flags(128)).code == 0);
  const std::string args = "--checkpoint t/checkpoint.bin --corpus corpus.jsonl --pairs 20 --cap 50";
  REQUIRE(ws.run("--seed 2 analyze " + args + " --run-dir a1").code == 0);
  REQUIRE(ws.run("--seed 2 analyze " + args + " --run-dir a2").code == 0);
  CHECK(ws.read("a1/report.json") == ws.read("a2/report.json"));
  const auto report = nlohmann::json::parse(ws.read("a1/report.json"));
  CHECK(report["pairs"].size() == 20);
  CHECK(ws.read("a1/projection.csv").rfind("token_id,label,x,y\n", 0) == 0);
  CHECK(fs::exists(ws.path("a1/projection.svg")));
  REQUIRE(ws.run("--seed 3 analyze " + args + " --run-dir a3").code == 0);
  CHECK(ws.read("a3/report.json") != ws.read("a1/report.json"));
}

TEST_CASE("synth writes the bundled corpus") {
  Workspace ws("synth");
  REQUIRE(ws.run("synth --out c.jsonl --scores s.jsonl").code == 0);
  CHECK(ws.read("c.jsonl") == io::read_file(fs::path(UAL_DATA_DIR) / "synthetic.jsonl"));
  CHECK(ws.read("s.jsonl") == io::read_file(fs::path(UAL_DATA_DIR) / "synthetic_scores.jsonl"));
}
