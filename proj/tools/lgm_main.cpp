// Command-line front end: train, eval, predict, fill, verify.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "lgm/lgm.hpp"

namespace fs = std::filesystem;
using namespace lgm;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailure = 1;
constexpr int kExitUsage = 2;

struct RunConfig {
  std::string graph_path;
  std::string train_images, train_labels;
  std::string test_images, test_labels;
  DataPolicy policy;
  TrainConfig train_cfg;
  std::string out_dir = "runs/out";

  static RunConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open config " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw Error("invalid config " + path + ": " + e.what());
    }
    RunConfig rc;
    rc.graph_path = j.at("graph").get<std::string>();
    const auto& d = j.at("data");
    rc.train_images = d.at("train_images").get<std::string>();
    rc.train_labels = d.at("train_labels").get<std::string>();
    if (d.contains("test_images")) {
      rc.test_images = d.at("test_images").get<std::string>();
      rc.test_labels = d.at("test_labels").get<std::string>();
    }
    if (j.contains("clamp")) rc.policy = DataPolicy::from_json(j.at("clamp"));
    if (j.contains("train"))
      rc.train_cfg = TrainConfig::from_json(j.at("train"));
    if (j.contains("out_dir")) rc.out_dir = j.at("out_dir").get<std::string>();
    if (rc.policy.clamp.mode == ClampMode::Quantize && rc.policy.clamp.colors < 2)
      throw Error("quantize mode needs at least 2 colors");
    return rc;
  }

  nlohmann::json settings() const {
    return {{"train", train_cfg.to_json()},
            {"data", policy.to_json()},
            {"paths",
             {{"train_images", train_images},
              {"train_labels", train_labels},
              {"test_images", test_images},
              {"test_labels", test_labels}}},
            {"graph_path", graph_path}};
  }
};

void require_file(const std::string& path, const char* what) {
  if (!fs::exists(path))
    throw Error(std::string(what) + " not found: " + path);
}

int cmd_train(const std::string& config_path,
              std::optional<std::uint64_t> seed,
              std::optional<std::string> out_dir) {
  RunConfig rc = RunConfig::load(config_path);
  if (seed) rc.train_cfg.seed = *seed;
  if (out_dir) rc.out_dir = *out_dir;
  require_file(rc.graph_path, "graph document");
  require_file(rc.train_images, "training images");
  require_file(rc.train_labels, "training labels");

  LgmGraph graph = build_graph(GraphSpec::load(rc.graph_path));
  Dataset pool = load_idx(rc.train_images, rc.train_labels);

  TrainResult result =
      train(graph, pool, rc.train_cfg, rc.policy, [](const EpochMetrics& m) {
        std::printf("epoch %d  train_nll %.6f  val_nll %.6f  val_acc %.4f\n",
                    m.epoch, m.train_nll, m.val_nll, m.val_accuracy);
        std::fflush(stdout);
      });

  fs::create_directories(rc.out_dir);
  const std::string metrics = metrics_to_csv(result.history);
  {
    std::ofstream f(fs::path(rc.out_dir) / "metrics.csv",
                    std::ios::binary | std::ios::trunc);
    f << metrics;
  }
  Checkpoint ckpt;
  ckpt.spec = GraphSpec::load(rc.graph_path);
  ckpt.settings = rc.settings();
  ckpt.tensors = Checkpoint::name_parameters(graph, result.params);
  ckpt.metrics_csv = metrics;
  const std::string ckpt_path =
      (fs::path(rc.out_dir) / "checkpoint.lgm").string();
  ckpt.save(ckpt_path);

  std::string summary;
  {
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "best_epoch %d\nbest_val_nll %.17g\nval_accuracy %.17g\n",
                  result.best_epoch, result.best_val_nll,
                  result.history[std::size_t(result.best_epoch) - 1]
                      .val_accuracy);
    summary = buf;
  }
  if (!rc.test_images.empty()) {
    require_file(rc.test_images, "test images");
    require_file(rc.test_labels, "test labels");
    Dataset test = load_idx(rc.test_images, rc.test_labels);
    std::vector<std::uint32_t> all(test.size());
    std::iota(all.begin(), all.end(), 0u);
    EvalResult ev = evaluate(graph, result.params, test, all, rc.policy,
                             rc.train_cfg.eval_inference());
    char buf[128];
    std::snprintf(buf, sizeof buf, "test_accuracy %.17g\ntest_nll %.17g\n",
                  ev.accuracy, ev.mean_nll);
    summary += buf;
    std::printf("test accuracy %.4f  mean_nll %.6f\n", ev.accuracy,
                ev.mean_nll);
  }
  {
    std::ofstream f(fs::path(rc.out_dir) / "summary.txt",
                    std::ios::binary | std::ios::trunc);
    f << summary;
  }
  std::printf("checkpoint %s\n", ckpt_path.c_str());
  return kExitOk;
}

struct LoadedCheckpoint {
  Checkpoint ckpt;
  LgmGraph graph;
  Parameters params;
  TrainConfig train_cfg;
  DataPolicy policy;
};

LoadedCheckpoint open_checkpoint(const std::string& path) {
  LoadedCheckpoint lc{Checkpoint::load(path), {}, {}, {}, {}};
  lc.graph = build_graph(lc.ckpt.spec);
  lc.params = lc.ckpt.parameters_for(lc.graph);
  if (lc.ckpt.settings.contains("train"))
    lc.train_cfg = TrainConfig::from_json(lc.ckpt.settings.at("train"));
  if (lc.ckpt.settings.contains("data"))
    lc.policy = DataPolicy::from_json(lc.ckpt.settings.at("data"));
  return lc;
}

int cmd_eval(const std::string& ckpt_path, const std::string& split,
             std::optional<std::string> images,
             std::optional<std::string> labels) {
  LoadedCheckpoint lc = open_checkpoint(ckpt_path);
  std::string images_path, labels_path;
  const auto paths = lc.ckpt.settings.value("paths", nlohmann::json::object());
  if (split == "test") {
    images_path = images.value_or(paths.value("test_images", ""));
    labels_path = labels.value_or(paths.value("test_labels", ""));
  } else {
    images_path = images.value_or(paths.value("train_images", ""));
    labels_path = labels.value_or(paths.value("train_labels", ""));
  }
  if (images_path.empty() || labels_path.empty())
    throw Error("no dataset recorded for split '" + split +
                "'; pass --images/--labels");
  require_file(images_path, "images");
  require_file(labels_path, "labels");
  Dataset data = load_idx(images_path, labels_path);

  std::vector<std::uint32_t> indices;
  if (split == "test") {
    indices.resize(data.size());
    std::iota(indices.begin(), indices.end(), 0u);
  } else if (split == "train" || split == "val") {
    const std::size_t usable = lc.policy.limit > 0
                                   ? std::min(lc.policy.limit, data.size())
                                   : data.size();
    Split s = split_dataset(usable, lc.train_cfg.seed);
    indices = split == "train" ? s.train : s.val;
  } else {
    throw Error("unknown split '" + split + "' (train|val|test)");
  }

  EvalResult ev = evaluate(lc.graph, lc.params, data, indices, lc.policy,
                           lc.train_cfg.eval_inference());
  std::printf("split %s\nsamples %zu\naccuracy %.17g\nmean_nll %.17g\n",
              split.c_str(), ev.count, ev.accuracy, ev.mean_nll);
  return kExitOk;
}

std::vector<std::uint8_t> mask_from_pgm(const std::string& path,
                                        std::size_t expected) {
  PgmImage m = read_pgm(path);
  if (m.bytes.size() != expected)
    throw Error("mask size does not match the input layer");
  std::vector<std::uint8_t> visible(m.bytes.size());
  for (std::size_t i = 0; i < m.bytes.size(); ++i)
    visible[i] = m.bytes[i] >= 128 ? 1 : 0;
  return visible;
}

int cmd_predict(const std::string& ckpt_path, const std::string& image_path,
                std::optional<std::string> mask_path) {
  LoadedCheckpoint lc = open_checkpoint(ckpt_path);
  const std::size_t input_layer = lc.graph.input_layers()[0];
  const std::size_t pixels = lc.graph.layer(input_layer).node_count();
  PgmImage img = read_pgm(image_path);
  if (img.bytes.size() != pixels)
    throw Error("image size " + std::to_string(img.bytes.size()) +
                " does not match the input layer (" + std::to_string(pixels) +
                " nodes)");
  std::vector<std::uint8_t> visible;
  const std::vector<std::uint8_t>* visible_ptr = nullptr;
  if (mask_path) {
    visible = mask_from_pgm(*mask_path, pixels);
    visible_ptr = &visible;
  }
  ClampSpec clamps =
      lc.policy.clamp.make(lc.graph, img.intensities(), visible_ptr);

  EffectiveEnergies eff = apply_clamps(lc.graph, lc.params, clamps);
  InferenceState st =
      run_inference(lc.graph, eff, lc.train_cfg.eval_inference());
  const auto dist =
      layer_distributions(lc.graph, eff, st, lc.graph.output_layer())[0];

  double entropy = 0.0;
  for (std::size_t c = 0; c < dist.size(); ++c) {
    std::printf("p(%zu) = %.12f\n", c, dist[c]);
    if (dist[c] > 0.0) entropy -= dist[c] * std::log(dist[c]);
  }
  std::printf("argmax %zu\nentropy %.9f\n", argmax_label(dist), entropy);
  return kExitOk;
}

int cmd_fill(const std::string& ckpt_path, const std::string& image_path,
             const std::string& mask_path, const std::string& out_path) {
  LoadedCheckpoint lc = open_checkpoint(ckpt_path);
  const std::size_t input_layer = lc.graph.input_layers()[0];
  const Layer& in_layer = lc.graph.layer(input_layer);
  if (in_layer.labels != 2)
    throw Error("belief filling needs a binary input layer");
  const std::size_t pixels = in_layer.node_count();
  PgmImage img = read_pgm(image_path);
  if (img.bytes.size() != pixels)
    throw Error("image size does not match the input layer");
  std::vector<std::uint8_t> visible = mask_from_pgm(mask_path, pixels);

  ClampSpec clamps =
      lc.policy.clamp.make(lc.graph, img.intensities(), &visible);
  EffectiveEnergies eff = apply_clamps(lc.graph, lc.params, clamps);
  InferenceState st =
      run_inference(lc.graph, eff, lc.train_cfg.eval_inference());
  auto dists = layer_distributions(lc.graph, eff, st, input_layer);

  PgmImage out;
  out.rows = img.rows;
  out.cols = img.cols;
  out.bytes.resize(pixels);
  for (std::size_t i = 0; i < pixels; ++i)
    out.bytes[i] = visible[i]
                       ? img.bytes[i]
                       : std::uint8_t(std::lround(255.0 * dists[i][1]));
  write_pgm(out_path, out);
  std::printf("wrote %s\n", out_path.c_str());
  return kExitOk;
}

int cmd_verify(std::uint64_t seed, double perturb) {
  verify::VerifyOptions opt;
  opt.seed = seed;
  opt.message_perturbation = perturb;
  const auto results = verify::run_verification(opt);
  bool all_pass = true;
  for (const auto& r : results) {
    std::printf("[%s] %s (max error %.3g)\n", r.pass ? "PASS" : "FAIL",
                r.name.c_str(), r.max_error);
    all_pass = all_pass && r.pass;
  }
  return all_pass ? kExitOk : kExitCheckFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"layered graphical models: training and inference"};
  app.require_subcommand(1);

  std::string config_path, ckpt_path, split = "test";
  std::string image_path, mask_path, out_path;
  std::uint64_t verify_seed = 0;
  double perturb = 0.0;

  auto* t = app.add_subcommand("train", "train a model from a run config");
  t->add_option("--config", config_path, "run configuration (JSON)")
      ->required();
  std::uint64_t seed_val = 0;
  auto* seed_opt = t->add_option("--seed", seed_val, "override the seed");
  std::string out_val;
  auto* out_opt = t->add_option("--out", out_val, "override the output dir");

  auto* e = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  e->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
  e->add_option("--split", split, "train|val|test");
  std::string eval_images, eval_labels;
  auto* ei = e->add_option("--images", eval_images, "override images path");
  auto* el = e->add_option("--labels", eval_labels, "override labels path");

  auto* p = app.add_subcommand("predict", "class probabilities for an image");
  p->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
  p->add_option("--image", image_path, "input image (PGM)")->required();
  std::string predict_mask;
  auto* pm = p->add_option("--mask", predict_mask,
                           "visibility mask (PGM, bright = observed)");

  auto* f = app.add_subcommand("fill", "render believes of missing pixels");
  f->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
  f->add_option("--image", image_path, "input image (PGM)")->required();
  f->add_option("--mask", mask_path, "visibility mask (PGM)")->required();
  f->add_option("--out", out_path, "output image (PGM)")->required();

  auto* v = app.add_subcommand("verify", "run the oracle property checks");
  v->add_option("--seed", verify_seed, "seed for the generated instances");
  v->add_option("--perturb-messages", perturb,
                "inject a message offset (harness hook; must fail)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& help) {
    return app.exit(help);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kExitUsage;
  }

  try {
    if (*t) {
      std::optional<std::uint64_t> seed_override;
      std::optional<std::string> out_override;
      if (*seed_opt) seed_override = seed_val;
      if (*out_opt) out_override = out_val;
      return cmd_train(config_path, seed_override, out_override);
    }
    if (*e) {
      std::optional<std::string> images_override, labels_override;
      if (*ei) images_override = eval_images;
      if (*el) labels_override = eval_labels;
      return cmd_eval(ckpt_path, split, images_override, labels_override);
    }
    if (*p) {
      std::optional<std::string> mask;
      if (*pm) mask = predict_mask;
      return cmd_predict(ckpt_path, image_path, mask);
    }
    if (*f) return cmd_fill(ckpt_path, image_path, mask_path, out_path);
    if (*v) return cmd_verify(verify_seed, perturb);
  } catch (const std::exception& ex) {
    std::fprintf(stderr, "error: %s\n", ex.what());
    return kExitUsage;
  }
  return kExitUsage;
}
