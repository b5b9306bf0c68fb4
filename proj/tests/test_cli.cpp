// End-to-end checks of the command-line tool; argv[1] carries the binary.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include "catch_amalgamated.hpp"
#include "lgm/lgm.hpp"

namespace fs = std::filesystem;
using namespace lgm;

namespace {

std::string g_binary;

struct RunOutput {
  int exit_code = -1;
  std::string text;
};

RunOutput run_cli(const std::string& args) {
  const fs::path out = fs::temp_directory_path() /
                       ("lgm_cli_out_" + std::to_string(std::rand()));
  const std::string cmd =
      g_binary + " " + args + " > " + out.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  RunOutput r;
  r.exit_code = WEXITSTATUS(status);
  std::ifstream in(out);
  std::stringstream ss;
  ss << in.rdbuf();
  r.text = ss.str();
  fs::remove(out);
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Workspace {
  fs::path dir;
  Workspace() {
    dir = fs::temp_directory_path() /
          ("lgm_cli_ws_" + std::to_string(std::random_device{}()));
    fs::create_directories(dir);
  }
  ~Workspace() { fs::remove_all(dir); }
};

// 3-class toy set over 4x3 images, linearly separable
Dataset toy_dataset(std::size_t n, std::uint64_t seed) {
  Dataset d;
  d.rows = 3;
  d.cols = 4;
  std::mt19937_64 rng(seed);
  const std::vector<std::vector<std::uint8_t>> protos = {
      {255, 255, 255, 255, 0, 0, 0, 0, 0, 0, 0, 0},
      {0, 0, 0, 0, 255, 255, 255, 255, 0, 0, 0, 0},
      {0, 0, 0, 0, 0, 0, 0, 0, 255, 255, 255, 255},
  };
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % 3;
    d.labels.push_back(std::uint8_t(c));
    for (std::uint8_t px : protos[c])
      d.pixels.push_back(px > 0 ? std::uint8_t(200 + rng() % 56)
                                : std::uint8_t(rng() % 40));
  }
  return d;
}

std::string toy_graph_json() {
  return R"({
    "layers": [
      {"name": "v", "role": "input", "channels": 12, "labels": 2},
      {"name": "y", "role": "output", "channels": 1, "labels": 3}
    ],
    "connections": [{"from": "v", "to": "y", "kind": "dense"}]
  })";
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  f << text;
}

std::string run_config_json(const Workspace& ws, const std::string& extra) {
  return std::string(R"({
    "graph": ")") + (ws.dir / "graph.json").string() + R"(",
    "data": {
      "train_images": ")" + (ws.dir / "train-im").string() + R"(",
      "train_labels": ")" + (ws.dir / "train-lb").string() + R"(",
      "test_images": ")" + (ws.dir / "test-im").string() + R"(",
      "test_labels": ")" + (ws.dir / "test-lb").string() + R"("
    },
    "clamp": {"mode": "soft"},
    "train": {"batch_size": 10, "method": "lbp", "schedule": "sequential",
              "iterations": 1, "max_epochs": 40, "patience": 40,
              "learning_rate": 0.003, "seed": 3)" + extra + R"(},
    "out_dir": ")" + (ws.dir / "run").string() + R"("
  })";
}

void stage_toy_workspace(const Workspace& ws) {
  save_idx(toy_dataset(90, 1), (ws.dir / "train-im").string(),
           (ws.dir / "train-lb").string());
  save_idx(toy_dataset(30, 2), (ws.dir / "test-im").string(),
           (ws.dir / "test-lb").string());
  write_file(ws.dir / "graph.json", toy_graph_json());
  write_file(ws.dir / "run.json", run_config_json(ws, ""));
}

double parse_metric(const std::string& text, const std::string& key) {
  const auto at = text.find(key);
  REQUIRE(at != std::string::npos);
  return std::stod(text.substr(at + key.size()));
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fprintf(stderr, "usage: test_cli <path-to-lgm-binary> [catch args]\n");
    return 2;
  }
  g_binary = argv[1];
  Catch::Session session;
  return session.run(argc - 1, argv + 1);
}

TEST_CASE("verify passes on a fresh build and fails when perturbed") {
  RunOutput ok = run_cli("verify");
  CHECK(ok.exit_code == 0);
  CHECK(ok.text.find("[PASS] tree-exactness") != std::string::npos);
  CHECK(ok.text.find("max error") != std::string::npos);
  CHECK(ok.text.find("[FAIL]") == std::string::npos);

  RunOutput bad = run_cli("verify --perturb-messages 0.001");
  CHECK(bad.exit_code == 1);
  CHECK(bad.text.find("[FAIL] tree-exactness") != std::string::npos);
}

TEST_CASE("train writes deterministic artifacts and eval reproduces them") {
  Workspace ws;
  stage_toy_workspace(ws);

  RunOutput first = run_cli("train --config " + (ws.dir / "run.json").string());
  REQUIRE(first.exit_code == 0);
  const fs::path run = ws.dir / "run";
  REQUIRE(fs::exists(run / "checkpoint.lgm"));
  REQUIRE(fs::exists(run / "metrics.csv"));
  REQUIRE(fs::exists(run / "summary.txt"));
  const std::string metrics1 = slurp(run / "metrics.csv");
  const std::string ckpt1 = slurp(run / "checkpoint.lgm");
  CHECK(metrics1.rfind("epoch,train_nll,val_nll,val_accuracy\n", 0) == 0);

  // rerunning overwrites byte-identical outputs
  RunOutput second =
      run_cli("train --config " + (ws.dir / "run.json").string());
  REQUIRE(second.exit_code == 0);
  CHECK(slurp(run / "metrics.csv") == metrics1);
  CHECK(slurp(run / "checkpoint.lgm") == ckpt1);

  // the toy problem trains out; summary carries the test metrics
  const std::string summary = slurp(run / "summary.txt");
  CHECK(parse_metric(summary, "test_accuracy ") == 1.0);

  // eval on the validation split reproduces the logged accuracy exactly
  RunOutput ev = run_cli("eval --checkpoint " +
                         (run / "checkpoint.lgm").string() + " --split val");
  REQUIRE(ev.exit_code == 0);
  const double val_acc = parse_metric(ev.text, "accuracy ");

  // last line of metrics.csv holds the final epoch; the checkpoint stores
  // the best epoch, so compare against the summary's value
  CHECK(val_acc == parse_metric(summary, "val_accuracy "));

  // eval on test agrees with the summary bitwise
  RunOutput et = run_cli("eval --checkpoint " +
                         (run / "checkpoint.lgm").string() + " --split test");
  REQUIRE(et.exit_code == 0);
  CHECK(parse_metric(et.text, "accuracy ") ==
        parse_metric(summary, "test_accuracy "));
}

TEST_CASE("missing dataset paths fail with exit code 2 naming the path") {
  Workspace ws;
  stage_toy_workspace(ws);
  fs::remove(ws.dir / "train-im");
  RunOutput r = run_cli("train --config " + (ws.dir / "run.json").string());
  CHECK(r.exit_code == 2);
  CHECK(r.text.find((ws.dir / "train-im").string()) != std::string::npos);
}

TEST_CASE("usage errors exit with code 2") {
  CHECK(run_cli("train").exit_code == 2);          // missing --config
  CHECK(run_cli("frobnicate").exit_code == 2);     // unknown subcommand
}

TEST_CASE("corrupted checkpoints are reported explicitly") {
  Workspace ws;
  write_file(ws.dir / "bad.lgm", "LGMCKPT");  // truncated header
  RunOutput r = run_cli("eval --checkpoint " + (ws.dir / "bad.lgm").string());
  CHECK(r.exit_code == 2);

  // valid magic, wrong version
  {
    std::ofstream f(ws.dir / "bad.lgm", std::ios::binary);
    const char magic[8] = {'L', 'G', 'M', 'C', 'K', 'P', 'T', 0};
    f.write(magic, 8);
    const std::uint32_t v = 9;
    f.write(reinterpret_cast<const char*>(&v), 4);
  }
  RunOutput rv = run_cli("eval --checkpoint " + (ws.dir / "bad.lgm").string());
  CHECK(rv.exit_code == 2);
  CHECK(rv.text.find("version") != std::string::npos);
}

TEST_CASE("predict prints an exact, normalized distribution") {
  Workspace ws;

  // tiny exactly solvable model: 12 binary inputs densely tied to 3 classes
  GraphSpec spec = GraphSpec::from_json(nlohmann::json::parse(toy_graph_json()));
  LgmGraph g = build_graph(spec);
  std::mt19937_64 rng(7);
  Parameters p = init_parameters(g, 7);
  {
    std::vector<double> w(p.pairwise[0].size());
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (auto& x : w) x = u(rng);
    p.pairwise[0] = Tensor(p.pairwise[0].shape(), std::move(w));
  }
  Checkpoint ckpt;
  ckpt.spec = spec;
  ckpt.settings = {{"train", TrainConfig{}.to_json()},
                   {"data", DataPolicy{}.to_json()}};
  ckpt.settings["train"]["iterations"] = 1;
  ckpt.tensors = Checkpoint::name_parameters(g, p);
  ckpt.save((ws.dir / "tiny.lgm").string());

  PgmImage img;
  img.rows = 3;
  img.cols = 4;
  img.bytes = {255, 200, 255, 230, 10, 0, 30, 0, 120, 140, 90, 60};
  write_pgm((ws.dir / "img.pgm").string(), img);

  RunOutput r = run_cli("predict --checkpoint " +
                        (ws.dir / "tiny.lgm").string() + " --image " +
                        (ws.dir / "img.pgm").string());
  REQUIRE(r.exit_code == 0);

  // soft clamping folds the inputs exactly, so the printed distribution
  // must match the enumeration oracle on the folded model
  ClampSpec clamps = DataPolicy{}.clamp.make(g, img.intensities());
  EffectiveEnergies eff = apply_clamps(g, p, clamps);
  Parameters folded = effective_as_parameters(g, eff);
  auto oracle = exact::marginals(g, folded, ClampSpec(g));
  double total = 0.0;
  for (std::size_t c = 0; c < 3; ++c) {
    const double got =
        parse_metric(r.text, "p(" + std::to_string(c) + ") = ");
    CHECK(std::abs(got - oracle[1][0][c]) < 1e-9);
    total += got;
  }
  CHECK(std::abs(total - 1.0) < 1e-9);

  // bad image size
  PgmImage small;
  small.rows = 2;
  small.cols = 2;
  small.bytes = {0, 0, 0, 0};
  write_pgm((ws.dir / "small.pgm").string(), small);
  RunOutput bad = run_cli("predict --checkpoint " +
                          (ws.dir / "tiny.lgm").string() + " --image " +
                          (ws.dir / "small.pgm").string());
  CHECK(bad.exit_code == 2);
}

TEST_CASE("masked inputs raise the predictive entropy") {
  // train the toy model, then blank out the discriminative half of the
  // image; ambiguity must show up as strictly larger output entropy
  Workspace ws;
  stage_toy_workspace(ws);
  RunOutput tr = run_cli("train --config " + (ws.dir / "run.json").string());
  REQUIRE(tr.exit_code == 0);
  const std::string ckpt = (ws.dir / "run" / "checkpoint.lgm").string();

  Dataset test = load_idx((ws.dir / "test-im").string(),
                          (ws.dir / "test-lb").string());
  int checked = 0;
  for (std::size_t i = 0; i < 12; ++i) {
    PgmImage img;
    img.rows = 3;
    img.cols = 4;
    const std::uint8_t* px = test.pixels.data() + i * 12;
    img.bytes.assign(px, px + 12);
    write_pgm((ws.dir / "case.pgm").string(), img);

    PgmImage mask;
    mask.rows = 3;
    mask.cols = 4;
    mask.bytes.assign(12, 255);
    const std::size_t active_row = test.labels[i];
    for (std::size_t k = 0; k < 4; ++k)
      mask.bytes[active_row * 4 + k] = 0;  // hide the class-defining row
    write_pgm((ws.dir / "mask.pgm").string(), mask);

    RunOutput full = run_cli("predict --checkpoint " + ckpt + " --image " +
                             (ws.dir / "case.pgm").string());
    RunOutput masked = run_cli("predict --checkpoint " + ckpt + " --image " +
                               (ws.dir / "case.pgm").string() + " --mask " +
                               (ws.dir / "mask.pgm").string());
    REQUIRE(full.exit_code == 0);
    REQUIRE(masked.exit_code == 0);
    const double e_full = parse_metric(full.text, "entropy ");
    const double e_masked = parse_metric(masked.text, "entropy ");
    CHECK(e_masked > e_full);
    ++checked;
  }
  CHECK(checked >= 10);
}

TEST_CASE("fill keeps observed pixels and renders believes elsewhere") {
  Workspace ws;
  stage_toy_workspace(ws);

  // zero-parameter model: unobserved pixels render the uniform belief 128
  GraphSpec spec = GraphSpec::from_json(nlohmann::json::parse(toy_graph_json()));
  LgmGraph g = build_graph(spec);
  Parameters zero = init_parameters(g, 0);
  zero.pairwise[0] = Tensor::zeros(zero.pairwise[0].shape());
  Checkpoint ckpt;
  ckpt.spec = spec;
  ckpt.settings = {{"train", TrainConfig{}.to_json()},
                   {"data", DataPolicy{}.to_json()}};
  ckpt.settings["train"]["iterations"] = 2;
  ckpt.tensors = Checkpoint::name_parameters(g, zero);
  ckpt.save((ws.dir / "zero.lgm").string());

  PgmImage img;
  img.rows = 3;
  img.cols = 4;
  img.bytes = {250, 240, 255, 230, 5, 0, 25, 0, 128, 130, 99, 20};
  write_pgm((ws.dir / "img.pgm").string(), img);

  PgmImage mask;
  mask.rows = 3;
  mask.cols = 4;
  mask.bytes.assign(12, 255);
  mask.bytes[5] = 0;
  mask.bytes[9] = 0;
  write_pgm((ws.dir / "mask.pgm").string(), mask);

  RunOutput r = run_cli("fill --checkpoint " + (ws.dir / "zero.lgm").string() +
                        " --image " + (ws.dir / "img.pgm").string() +
                        " --mask " + (ws.dir / "mask.pgm").string() +
                        " --out " + (ws.dir / "filled.pgm").string());
  REQUIRE(r.exit_code == 0);
  PgmImage filled = read_pgm((ws.dir / "filled.pgm").string());
  for (std::size_t i = 0; i < 12; ++i) {
    if (i == 5 || i == 9)
      CHECK(filled.bytes[i] == 128);
    else
      CHECK(filled.bytes[i] == img.bytes[i]);
  }

  // full observation: output equals the input byte for byte
  PgmImage full_mask = mask;
  full_mask.bytes.assign(12, 255);
  write_pgm((ws.dir / "mask.pgm").string(), full_mask);
  RunOutput r2 = run_cli("fill --checkpoint " + (ws.dir / "zero.lgm").string() +
                         " --image " + (ws.dir / "img.pgm").string() +
                         " --mask " + (ws.dir / "mask.pgm").string() +
                         " --out " + (ws.dir / "filled.pgm").string());
  REQUIRE(r2.exit_code == 0);
  PgmImage roundtrip = read_pgm((ws.dir / "filled.pgm").string());
  CHECK(roundtrip.bytes == img.bytes);

  // on a tiny exactly solvable model the rendered believes match the
  // oracle's conditionals to the nearest byte
  std::mt19937_64 rng(13);
  Parameters p = init_parameters(g, 13);
  {
    std::uniform_real_distribution<double> u(-1.2, 1.2);
    std::vector<double> w(p.pairwise[0].size());
    for (auto& x : w) x = u(rng);
    p.pairwise[0] = Tensor(p.pairwise[0].shape(), std::move(w));
    std::vector<double> uv(p.unary[0].size());
    for (auto& x : uv) x = u(rng);
    p.unary[0] = Tensor(p.unary[0].shape(), std::move(uv));
  }
  ckpt.tensors = Checkpoint::name_parameters(g, p);
  ckpt.save((ws.dir / "tiny.lgm").string());

  PgmImage mask2;
  mask2.rows = 3;
  mask2.cols = 4;
  mask2.bytes.assign(12, 255);
  mask2.bytes[1] = 0;
  mask2.bytes[6] = 0;
  mask2.bytes[10] = 0;
  write_pgm((ws.dir / "mask.pgm").string(), mask2);
  RunOutput r3 = run_cli("fill --checkpoint " + (ws.dir / "tiny.lgm").string() +
                         " --image " + (ws.dir / "img.pgm").string() +
                         " --mask " + (ws.dir / "mask.pgm").string() +
                         " --out " + (ws.dir / "filled.pgm").string());
  REQUIRE(r3.exit_code == 0);
  PgmImage got = read_pgm((ws.dir / "filled.pgm").string());

  ClampSpec clamps(g);
  for (std::size_t i = 0; i < 12; ++i)
    if (mask2.bytes[i] >= 128)
      clamps.set(0, i, NodeClamp::soft(double(img.bytes[i]) / 255.0));
  EffectiveEnergies eff = apply_clamps(g, p, clamps);
  Parameters folded = effective_as_parameters(g, eff);
  ClampSpec none(g);
  auto oracle = exact::marginals(g, folded, none);
  for (std::size_t i : {std::size_t(1), std::size_t(6), std::size_t(10)}) {
    const long want = std::lround(255.0 * oracle[0][i][1]);
    CHECK(std::abs(long(got.bytes[i]) - want) <= 1);
  }
}
