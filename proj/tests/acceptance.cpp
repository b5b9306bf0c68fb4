// Acceptance suite: one pass/fail line per criterion.
//
//   properties  fast oracle-backed property gates (default)
//   subset      10k-sample training gates on the real dataset (default)
//   extended    full-scale training gates (hours; opt in)

#include <chrono>
#include <cstdarg>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "lgm/lgm.hpp"

namespace fs = std::filesystem;
using namespace lgm;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int g_failures = 0;
std::string g_only;  // substring filter over criterion names

void report(const std::string& name, const Outcome& o, double seconds) {
  std::printf("[%s] %s: %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", name.c_str(),
              o.detail.c_str(), seconds);
  std::fflush(stdout);
  if (!o.pass) ++g_failures;
}

void run(const std::string& name, const std::function<Outcome()>& fn) {
  if (!g_only.empty() && name.find(g_only) == std::string::npos) return;
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = fn();
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail = std::string("exception: ") + e.what();
  }
  const auto t1 = std::chrono::steady_clock::now();
  report(name, o, std::chrono::duration<double>(t1 - t0).count());
}

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list args;
  va_start(args, f);
  std::vsnprintf(buf, sizeof buf, f, args);
  va_end(args);
  return buf;
}

// ---------------------------------------------------------------------------
// Model builders.
// ---------------------------------------------------------------------------

GraphSpec dense_spec(std::size_t hidden_layers, std::size_t width = 100) {
  GraphSpec spec;
  spec.layers.push_back({"v", LayerRole::Input, 784, {}, 2});
  std::string prev = "v";
  for (std::size_t i = 0; i < hidden_layers; ++i) {
    const std::string name = "h" + std::to_string(i + 1);
    spec.layers.push_back({name, LayerRole::Hidden, width, {}, 2});
    spec.connections.push_back({prev, name, ConnKind::Dense, {}, {}, {}});
    prev = name;
  }
  spec.layers.push_back({"y", LayerRole::Output, 1, {}, 10});
  spec.connections.push_back({prev, "y", ConnKind::Dense, {}, {}, {}});
  return spec;
}

GraphSpec patch_spec(ConnKind kind) {
  GraphSpec spec;
  spec.layers = {{"v", LayerRole::Input, 1, {28, 28}, 2},
                 {"h1", LayerRole::Hidden, 8, {12, 12}, 2},
                 {"h2", LayerRole::Hidden, 16, {4, 4}, 2},
                 {"h3", LayerRole::Hidden, 100, {}, 2},
                 {"y", LayerRole::Output, 1, {}, 10}};
  spec.connections = {{"v", "h1", kind, {5, 5}, {2, 2}, {1, 1}},
                      {"h1", "h2", kind, {5, 5}, {2, 2}, {1, 1}},
                      {"h2", "h3", ConnKind::Dense, {}, {}, {}},
                      {"h3", "y", ConnKind::Dense, {}, {}, {}}};
  return spec;
}

// ---------------------------------------------------------------------------
// Dataset plumbing.
// ---------------------------------------------------------------------------

std::string g_mnist_dir = "/root/data/mnist";

struct Mnist {
  Dataset train, test;
};

Mnist load_mnist() {
  const fs::path root(g_mnist_dir);
  Mnist m;
  m.train = load_idx((root / "train-images-idx3-ubyte").string(),
                     (root / "train-labels-idx1-ubyte").string());
  m.test = load_idx((root / "t10k-images-idx3-ubyte").string(),
                    (root / "t10k-labels-idx1-ubyte").string());
  return m;
}

struct RunSpec {
  GraphSpec graph;
  TrainConfig cfg;
  DataPolicy policy;
};

double train_and_test(const Mnist& data, const RunSpec& rs,
                      double* val_acc = nullptr) {
  LgmGraph g = build_graph(rs.graph);
  TrainResult r = train(g, data.train, rs.cfg, rs.policy,
                        [](const EpochMetrics& m) {
                          std::printf("    epoch %d train_nll %.4f val_nll "
                                      "%.4f val_acc %.4f\n",
                                      m.epoch, m.train_nll, m.val_nll,
                                      m.val_accuracy);
                          std::fflush(stdout);
                        });
  if (val_acc)
    *val_acc = r.history[std::size_t(r.best_epoch) - 1].val_accuracy;
  std::vector<std::uint32_t> all(data.test.size());
  std::iota(all.begin(), all.end(), 0u);
  EvalResult ev = evaluate(g, r.params, data.test, all, rs.policy,
                           rs.cfg.eval_inference());
  return ev.accuracy;
}

// ---------------------------------------------------------------------------
// Criterion 1: tree exactness of sum- and max-product.
// ---------------------------------------------------------------------------

Outcome criterion1() {
  std::mt19937_64 rng(101);
  double max_err = 0.0;
  std::size_t map_mismatches = 0;
  for (int trial = 0; trial < 200; ++trial) {
    auto model = verify::random_tree_model(rng, 2.0, 4);
    ClampSpec clamps = verify::random_input_clamps(rng, model.graph, 0.5);
    const std::size_t T = verify::node_diameter_iterations(model.graph);
    auto oracle = exact::marginals(model.graph, model.params, clamps);

    for (Schedule sched : {Schedule::Sequential, Schedule::Parallel}) {
      EffectiveEnergies eff;
      InferenceConfig cfg{Method::SumProduct, sched, int(T)};
      InferenceState st =
          run_inference(model.graph, model.params, clamps, cfg, &eff);
      for (std::size_t li = 0; li < model.graph.layers().size(); ++li) {
        auto dists = layer_distributions(model.graph, eff, st, li);
        for (std::size_t i = 0; i < dists.size(); ++i)
          for (std::size_t x = 0; x < dists[i].size(); ++x)
            max_err = std::max(max_err,
                               std::abs(dists[i][x] - oracle[li][i][x]));
      }
    }

    auto map_oracle =
        exact::map_assignment(model.graph, model.params, clamps);
    EffectiveEnergies eff;
    InferenceConfig cfg{Method::MaxProduct, Schedule::Sequential, int(T)};
    InferenceState st =
        run_inference(model.graph, model.params, clamps, cfg, &eff);
    auto decoded = decode_labels(model.graph, eff, st);
    for (std::size_t li = 0; li < decoded.size(); ++li)
      for (std::size_t i = 0; i < decoded[li].size(); ++i)
        if (decoded[li][i] != map_oracle[li][i]) ++map_mismatches;
  }
  Outcome o;
  o.pass = max_err < 1e-8 && map_mismatches == 0;
  o.detail = fmt("200 trees; marginal err %.2e (<1e-8); map mismatches %zu",
                 max_err, map_mismatches);
  return o;
}

// ---------------------------------------------------------------------------
// Criterion 2: backprop through truncated inference vs finite differences.
// ---------------------------------------------------------------------------

Outcome criterion2() {
  std::mt19937_64 rng(202);
  double worst = 0.0;
  std::size_t coords = 0;

  auto check = [&](const GraphSpec& spec, const ClampSpec* clamps_in,
                   Method method, int iters, std::size_t probes) {
    LgmGraph g = build_graph(spec);
    Parameters p0 = init_parameters(g, rng());
    {
      std::uniform_real_distribution<double> u(-1.0, 1.0);
      for (auto& w : p0.pairwise) {
        std::vector<double> v(w.size());
        for (auto& x : v) x = u(rng);
        w = Tensor(w.shape(), std::move(v));
      }
      for (auto& t : p0.unary) {
        std::vector<double> v(t.size());
        for (auto& x : v) x = u(rng);
        t = Tensor(t.shape(), std::move(v));
      }
    }
    ClampSpec clamps = clamps_in ? *clamps_in : ClampSpec(g);
    InferenceConfig cfg{method, Schedule::Sequential, iters};
    const std::size_t out = g.output_layer();
    const std::size_t classes = g.layer(out).labels;
    const std::size_t label = rng() % classes;

    auto loss_of = [&](const Parameters& p) {
      EffectiveEnergies eff = apply_clamps(g, p, clamps);
      InferenceState st = run_inference(g, eff, cfg);
      return nll_loss(st.believes[out], smoothed_target(classes, label, 0.0))
          .value();
    };

    Tape tape;
    Parameters watched = p0.watched_on(tape);
    EffectiveEnergies eff = apply_clamps(g, watched, clamps);
    InferenceState st = run_inference(g, eff, cfg);
    GradientMap gm = tape.backward(
        nll_loss(st.believes[out], smoothed_target(classes, label, 0.0)));

    for (std::size_t ci = 0; ci < watched.pairwise.size(); ++ci) {
      const auto& grad = gm.at(watched.pairwise[ci]).data();
      const Tensor& w = p0.pairwise[ci];
      for (std::size_t probe = 0; probe < probes; ++probe) {
        const std::size_t k = rng() % w.size();
        const double h = 1e-4;
        Parameters plus = p0, minus = p0;
        std::vector<double> vp = w.data(), vm = w.data();
        vp[k] += h;
        vm[k] -= h;
        plus.pairwise[ci] = Tensor(w.shape(), std::move(vp));
        minus.pairwise[ci] = Tensor(w.shape(), std::move(vm));
        const double fd = (loss_of(plus) - loss_of(minus)) / (2 * h);
        worst = std::max(worst, std::abs(grad[k] - fd) /
                                    std::max(std::abs(fd), 1e-3));
        ++coords;
      }
    }
  };

  GraphSpec dense;
  dense.layers = {{"v", LayerRole::Input, 4, {}, 2},
                  {"h", LayerRole::Hidden, 5, {}, 2},
                  {"y", LayerRole::Output, 1, {}, 3}};
  dense.connections = {{"v", "h", ConnKind::Dense, {}, {}, {}},
                       {"h", "y", ConnKind::Dense, {}, {}, {}}};
  {
    LgmGraph g = build_graph(dense);
    ClampSpec c(g);
    for (std::size_t i = 0; i < 4; ++i) c.set(0, i, NodeClamp::hard(i % 2));
    check(dense, &c, Method::SumProduct, 3, 10);
    check(dense, &c, Method::MeanField, 3, 10);
    check(dense, &c, Method::TreeReweighted, 3, 10);
  }

  GraphSpec conv;
  conv.layers = {{"v", LayerRole::Input, 1, {6}, 2},
                 {"h", LayerRole::Hidden, 2, {2}, 2},
                 {"y", LayerRole::Output, 1, {}, 3}};
  conv.connections = {{"v", "h", ConnKind::Conv, {3}, {2}, {1}},
                      {"h", "y", ConnKind::Dense, {}, {}, {}}};
  {
    LgmGraph g = build_graph(conv);
    ClampSpec c(g);
    for (std::size_t i = 0; i < 6; ++i)
      c.set(0, i, NodeClamp::soft(0.1 + 0.13 * double(i)));
    check(conv, &c, Method::SumProduct, 3, 10);
    check(conv, &c, Method::MeanField, 3, 10);
    check(conv, &c, Method::TreeReweighted, 3, 10);
  }

  // partial observation keeps some inputs free
  GraphSpec loc = conv;
  loc.connections[0].kind = ConnKind::Local;
  {
    LgmGraph g = build_graph(loc);
    ClampSpec c(g);
    c.set(0, 0, NodeClamp::soft(0.4));
    c.set(0, 3, NodeClamp::hard(1));
    check(loc, &c, Method::SumProduct, 4, 20);
    check(loc, &c, Method::MeanField, 4, 10);
    check(loc, &c, Method::TreeReweighted, 4, 10);
  }

  Outcome o;
  o.pass = worst < 1e-4 && coords >= 100;
  o.detail =
      fmt("%zu coordinates; worst relative error %.2e (<1e-4)", coords, worst);
  return o;
}

// ---------------------------------------------------------------------------
// Criterion 3: exact reductions.
// ---------------------------------------------------------------------------

Outcome criterion3() {
  std::mt19937_64 rng(303);
  bool trw_ok = true, clamp_ok = true, flip_ok = true;

  // TRW with unit rho vs LBP on tree and loopy structures
  for (int trial = 0; trial < 5; ++trial) {
    auto model = verify::random_tree_model(rng);
    ClampSpec clamps = verify::random_input_clamps(rng, model.graph, 0.3);
    RhoMap ones = unit_rho(model.graph);
    for (Schedule sched : {Schedule::Sequential, Schedule::Parallel}) {
      InferenceConfig lbp{Method::SumProduct, sched, 4};
      InferenceConfig trw{Method::TreeReweighted, sched, 4};
      InferenceState a =
          run_inference(model.graph, model.params, clamps, lbp);
      InferenceState b = run_inference(model.graph, model.params, clamps,
                                       trw, nullptr, &ones);
      for (std::size_t li = 0; li < a.believes.size(); ++li)
        trw_ok = trw_ok &&
                 std::memcmp(a.believes[li].data().data(),
                             b.believes[li].data().data(),
                             a.believes[li].size() * sizeof(double)) == 0;
    }
  }

  // soft clamps at {0,1} vs hard clamps
  {
    GraphSpec spec;
    spec.layers = {{"v", LayerRole::Input, 1, {6}, 2},
                   {"h", LayerRole::Hidden, 2, {2}, 2},
                   {"y", LayerRole::Output, 1, {}, 4}};
    spec.connections = {{"v", "h", ConnKind::Local, {3}, {3}, {1}},
                        {"h", "y", ConnKind::Dense, {}, {}, {}}};
    LgmGraph g = build_graph(spec);
    Parameters p = init_parameters(g, rng());
    ClampSpec hard(g), soft(g);
    for (std::size_t i = 0; i < 6; ++i) {
      const std::size_t bit = (i + 1) % 2;
      hard.set(0, i, NodeClamp::hard(bit));
      soft.set(0, i, NodeClamp::soft(double(bit)));
    }
    for (Method m : {Method::MeanField, Method::SumProduct}) {
      InferenceConfig cfg{m, Schedule::Sequential, 4};
      InferenceState a = run_inference(g, p, hard, cfg);
      InferenceState b = run_inference(g, p, soft, cfg);
      for (std::size_t li = 0; li < a.believes.size(); ++li)
        clamp_ok = clamp_ok &&
                   std::memcmp(a.believes[li].data().data(),
                               b.believes[li].data().data(),
                               a.believes[li].size() * sizeof(double)) == 0;
    }
  }

  // flip is an involution on every connection kind
  {
    GraphSpec spec = patch_spec(ConnKind::Conv);
    spec.connections[1].kind = ConnKind::Local;
    LgmGraph g = build_graph(spec);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (std::size_t ci = 0; ci < g.connections().size(); ++ci) {
      std::vector<double> v(numel(g.pairwise_shape(ci)));
      for (auto& x : v) x = u(rng);
      Tensor w(g.pairwise_shape(ci), std::move(v));
      Tensor back = flip(g, ci, flip(g, ci, w));
      flip_ok = flip_ok &&
                std::memcmp(w.data().data(), back.data().data(),
                            w.size() * sizeof(double)) == 0;
    }
  }

  Outcome o;
  o.pass = trw_ok && clamp_ok && flip_ok;
  o.detail = fmt("trw==lbp %s; soft{0,1}==hard %s; flip involution %s",
                 trw_ok ? "bitwise" : "DIFFERS",
                 clamp_ok ? "bitwise" : "DIFFERS",
                 flip_ok ? "bitwise" : "DIFFERS");
  return o;
}

// ---------------------------------------------------------------------------
// Criterion 4: sequential mean field never increases the oracle KL.
// ---------------------------------------------------------------------------

Outcome criterion4() {
  std::mt19937_64 rng(404);
  double worst_increase = -1e300;
  for (int trial = 0; trial < 50; ++trial) {
    auto model = verify::random_tree_model(rng, 2.0, 4, 12, 20000);
    EffectiveEnergies eff =
        apply_clamps(model.graph, model.params, ClampSpec(model.graph));
    InferenceState st = init_state(model.graph, eff);
    InferenceConfig cfg{Method::MeanField, Schedule::Sequential, 1};
    double last = exact::mean_field_kl(model.graph, model.params,
                                       ClampSpec(model.graph), st.believes);
    for (int it = 0; it < 8; ++it) {
      inference_step(model.graph, eff, st, cfg);
      const double kl = exact::mean_field_kl(
          model.graph, model.params, ClampSpec(model.graph), st.believes);
      worst_increase = std::max(worst_increase, kl - last);
      last = kl;
    }
  }
  Outcome o;
  o.pass = worst_increase < 1e-9;
  o.detail = fmt("50 graphs x 8 sweeps; worst KL increase %.2e (<1e-9)",
                 worst_increase);
  return o;
}

// ---------------------------------------------------------------------------
// Criterion 5: truncation separation on the 10k subset.
// ---------------------------------------------------------------------------

Outcome criterion5(const Mnist& data) {
  RunSpec rs;
  rs.graph = dense_spec(1);
  rs.cfg.batch_size = 20;
  rs.cfg.max_epochs = 5;
  rs.cfg.patience = 5;
  rs.cfg.seed = 0;
  rs.policy.clamp.mode = ClampMode::Binarize;
  rs.policy.limit = 10000;

  rs.cfg.inference = {Method::SumProduct, Schedule::Sequential, 1};
  const double acc_t1 = train_and_test(data, rs);
  rs.cfg.inference.iterations = 2;
  const double acc_t2 = train_and_test(data, rs);

  Outcome o;
  o.pass = acc_t1 <= 0.15 && acc_t2 >= 0.90;
  o.detail = fmt("T=1 accuracy %.4f (<=0.15); T=2 accuracy %.4f (>=0.90)",
                 acc_t1, acc_t2);
  return o;
}

// ---------------------------------------------------------------------------
// Criterion 6: soft clamping beats binarization.
// ---------------------------------------------------------------------------

Outcome criterion6(const Mnist& data, bool full_scale) {
  RunSpec rs;
  rs.graph = dense_spec(1);
  rs.cfg.batch_size = 20;
  rs.cfg.inference = {Method::SumProduct, Schedule::Sequential, 5};
  rs.cfg.max_epochs = full_scale ? 40 : 30;
  rs.cfg.patience = 3;
  rs.cfg.seed = 0;
  rs.policy.limit = full_scale ? 0 : 10000;

  rs.policy.clamp.mode = ClampMode::Soft;
  const double soft = train_and_test(data, rs);
  rs.policy.clamp.mode = ClampMode::Binarize;
  const double hard = train_and_test(data, rs);

  const double floor = full_scale ? 0.955 : 0.93;
  Outcome o;
  o.pass = soft >= floor && soft - hard >= 0.005;
  o.detail = fmt("soft %.4f (>=%.3f); binarized %.4f; gain %.4f (>=0.005)",
                 soft, floor, hard, soft - hard);
  return o;
}

// ---------------------------------------------------------------------------
// Criterion 7: inference-method ordering on the patch structure.
// ---------------------------------------------------------------------------

Outcome criterion7(const Mnist& data) {
  RunSpec rs;
  rs.graph = patch_spec(ConnKind::Conv);
  rs.cfg.batch_size = 20;
  rs.cfg.max_epochs = 40;
  rs.cfg.patience = 3;
  rs.cfg.seed = 0;
  rs.policy.clamp.mode = ClampMode::Soft;

  rs.cfg.inference = {Method::TreeReweighted, Schedule::Sequential, 5};
  const double trw = train_and_test(data, rs);
  rs.cfg.inference = {Method::SumProduct, Schedule::Sequential, 5};
  const double lbp = train_and_test(data, rs);

  Outcome o;
  o.pass = trw >= lbp && lbp >= 0.1 && trw >= 0.970;
  o.detail = fmt("SeqTRW %.4f (>=0.970, >=SeqLBP); SeqLBP %.4f (>=chance)",
                 trw, lbp);
  return o;
}

// ---------------------------------------------------------------------------
// Criterion 8: partial observation.
// ---------------------------------------------------------------------------

Outcome criterion8_fill_property() {
  // rendering rule: observed pixels keep their intensity; unobserved ones
  // show round(255 * belief of the bright label)
  std::mt19937_64 rng(808);
  GraphSpec spec;
  spec.layers = {{"v", LayerRole::Input, 12, {}, 2},
                 {"y", LayerRole::Output, 1, {}, 3}};
  spec.connections = {{"v", "y", ConnKind::Dense, {}, {}, {}}};
  LgmGraph g = build_graph(spec);

  bool uniform_ok = true, oracle_ok = true, identity_ok = true;

  std::vector<double> image(12);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& x : image) x = u(rng);
  std::vector<std::uint8_t> visible(12, 1);
  visible[2] = visible[7] = visible[11] = 0;

  auto render = [&](const Parameters& p) {
    ClampSpec clamps(g);
    for (std::size_t i = 0; i < 12; ++i)
      if (visible[i]) clamps.set(0, i, NodeClamp::soft(image[i]));
    EffectiveEnergies eff = apply_clamps(g, p, clamps);
    InferenceConfig cfg{Method::SumProduct, Schedule::Sequential, 2};
    InferenceState st = run_inference(g, eff, cfg);
    auto dists = layer_distributions(g, eff, st, 0);
    std::vector<std::uint8_t> bytes(12);
    for (std::size_t i = 0; i < 12; ++i)
      bytes[i] = visible[i]
                     ? std::uint8_t(std::lround(255.0 * image[i]))
                     : std::uint8_t(std::lround(255.0 * dists[i][1]));
    return bytes;
  };

  // untrained model: unobserved pixels render the uniform belief
  Parameters zero = init_parameters(g, 0);
  zero.pairwise[0] = Tensor::zeros(zero.pairwise[0].shape());
  auto flat = render(zero);
  for (std::size_t i : {2, 7, 11}) uniform_ok = uniform_ok && flat[i] == 128;

  // random model: rendered believes match the oracle to the nearest byte
  Parameters p = init_parameters(g, 1);
  {
    std::uniform_real_distribution<double> e(-1.0, 1.0);
    std::vector<double> w(p.pairwise[0].size());
    for (auto& x : w) x = e(rng);
    p.pairwise[0] = Tensor(p.pairwise[0].shape(), std::move(w));
  }
  auto rendered = render(p);
  {
    ClampSpec clamps(g);
    for (std::size_t i = 0; i < 12; ++i)
      if (visible[i]) clamps.set(0, i, NodeClamp::soft(image[i]));
    EffectiveEnergies eff = apply_clamps(g, p, clamps);
    Parameters folded = effective_as_parameters(g, eff);
    auto oracle = exact::marginals(g, folded, ClampSpec(g));
    for (std::size_t i : {2, 7, 11}) {
      const long want = std::lround(255.0 * oracle[0][i][1]);
      oracle_ok = oracle_ok && std::abs(long(rendered[i]) - want) <= 1;
    }
  }

  // full observation keeps the image
  std::fill(visible.begin(), visible.end(), 1);
  auto kept = render(p);
  for (std::size_t i = 0; i < 12; ++i)
    identity_ok =
        identity_ok && kept[i] == std::uint8_t(std::lround(255.0 * image[i]));

  Outcome o;
  o.pass = uniform_ok && oracle_ok && identity_ok;
  o.detail = fmt("uniform->128 %s; oracle bytes %s; full-mask identity %s",
                 uniform_ok ? "ok" : "BAD", oracle_ok ? "ok" : "BAD",
                 identity_ok ? "ok" : "BAD");
  return o;
}

Outcome criterion8_accuracy(const Mnist& data) {
  RunSpec rs;
  rs.graph = patch_spec(ConnKind::Local);
  rs.cfg.batch_size = 20;
  rs.cfg.inference = {Method::SumProduct, Schedule::Sequential, 5};
  rs.cfg.max_epochs = 40;
  rs.cfg.patience = 3;
  rs.cfg.label_smoothing = 0.1;
  rs.cfg.seed = 0;
  rs.policy.clamp.mode = ClampMode::Soft;
  rs.policy.p_obs = 0.7;

  const double acc = train_and_test(data, rs);
  Outcome o;
  o.pass = acc >= 0.97;
  o.detail = fmt("local model, p_obs 0.7: accuracy %.4f (>=0.97)", acc);
  return o;
}

// ---------------------------------------------------------------------------
// Criterion 9: analytic vs backprop gradient estimation.
// ---------------------------------------------------------------------------

Outcome criterion9_exact() {
  std::mt19937_64 rng(909);
  LgmGraph g = build_graph([] {
    GraphSpec s;
    s.layers = {{"v", LayerRole::Input, 6, {}, 2},
                {"y", LayerRole::Output, 1, {}, 4}};
    s.connections = {{"v", "y", ConnKind::Dense, {}, {}, {}}};
    return s;
  }());
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    Parameters p = init_parameters(g, rng());
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    {
      std::vector<double> w(p.pairwise[0].size());
      for (auto& x : w) x = u(rng);
      p.pairwise[0] = Tensor(p.pairwise[0].shape(), std::move(w));
      std::vector<double> v(p.unary[1].size());
      for (auto& x : v) x = u(rng);
      p.unary[1] = Tensor(p.unary[1].shape(), std::move(v));
    }
    ClampSpec clamps(g);
    for (std::size_t i = 0; i < 6; ++i)
      clamps.set(0, i, NodeClamp::hard(rng() % 2));
    InferenceConfig cfg{Method::SumProduct, Schedule::Sequential, 1};
    const std::size_t target = rng() % 4;

    GradientSet est = analytic_nll_gradient(g, p, clamps, target, cfg);
    Tape tape;
    Parameters watched = p.watched_on(tape);
    EffectiveEnergies eff = apply_clamps(g, watched, clamps);
    InferenceState st = run_inference(g, eff, cfg);
    GradientMap gm = tape.backward(
        nll_loss(st.believes[1], smoothed_target(4, target, 0.0)));
    const auto& bp_w = gm.at(watched.pairwise[0]).data();
    for (std::size_t k = 0; k < bp_w.size(); ++k)
      worst = std::max(worst, std::abs(bp_w[k] - est.pairwise[0][k]));
    const auto& bp_v = gm.at(watched.unary[1]).data();
    for (std::size_t k = 0; k < bp_v.size(); ++k)
      worst = std::max(worst, std::abs(bp_v[k] - est.unary[1][k]));
  }
  Outcome o;
  o.pass = worst < 1e-6;
  o.detail = fmt("exact regime: max |analytic - backprop| %.2e (<1e-6)",
                 worst);
  return o;
}

Outcome criterion9_loopy(const Mnist& data) {
  // two free hidden layers keep the folded graph loopy (a single hidden
  // layer folds to a star where both estimators coincide exactly)
  RunSpec rs;
  rs.graph = dense_spec(2);
  rs.cfg.batch_size = 20;
  rs.cfg.inference = {Method::SumProduct, Schedule::Sequential, 3};
  rs.cfg.max_epochs = 5;
  rs.cfg.patience = 5;
  rs.cfg.seed = 0;
  rs.policy.clamp.mode = ClampMode::Binarize;
  rs.policy.limit = 10000;

  rs.cfg.estimator = GradientEstimator::Backprop;
  const double backprop = train_and_test(data, rs);
  rs.cfg.estimator = GradientEstimator::Analytic;
  const double analytic = train_and_test(data, rs);

  Outcome o;
  o.pass = backprop - analytic >= 0.02;
  o.detail = fmt("backprop %.4f; analytic %.4f; gap %.4f (>=0.02)", backprop,
                 analytic, backprop - analytic);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  std::string level = "default";
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--level" && i + 1 < argc) level = argv[++i];
    else if (arg == "--mnist-dir" && i + 1 < argc) g_mnist_dir = argv[++i];
    else if (arg == "--only" && i + 1 < argc) g_only = argv[++i];
    else {
      std::fprintf(stderr,
                   "usage: lgm_acceptance [--level properties|subset|"
                   "extended|all] [--only SUBSTR] [--mnist-dir DIR]\n");
      return 2;
    }
  }
  if (const char* env = std::getenv("LGM_MNIST_DIR")) g_mnist_dir = env;

  const bool props = level == "properties" || level == "default" ||
                     level == "all";
  const bool subset = level == "subset" || level == "default" ||
                      level == "all";
  const bool extended = level == "extended" || level == "all";

  if (props) {
    run("criterion 1 (tree exactness)", criterion1);
    run("criterion 2 (gradient fidelity)", criterion2);
    run("criterion 3 (reductions)", criterion3);
    run("criterion 4 (mean-field descent)", criterion4);
    run("criterion 8a (belief-fill rendering)", criterion8_fill_property);
    run("criterion 9a (exact-regime agreement)", criterion9_exact);
  }

  if (subset || extended) {
    Mnist data;
    try {
      data = load_mnist();
    } catch (const std::exception& e) {
      std::printf("[FAIL] dataset: %s\n", e.what());
      return 1;
    }
    if (subset) {
      run("criterion 5 (truncation separation, 10k)",
          [&] { return criterion5(data); });
      run("criterion 6 (soft-clamp gain, 10k)",
          [&] { return criterion6(data, false); });
      run("criterion 9b (analytic underperforms on loopy graphs, 10k)",
          [&] { return criterion9_loopy(data); });
    }
    if (extended) {
      run("criterion 6+ (soft-clamp gain, full scale)",
          [&] { return criterion6(data, true); });
      run("criterion 7 (inference-method ordering, full scale)",
          [&] { return criterion7(data); });
      run("criterion 8b (partial observation, full scale)",
          [&] { return criterion8_accuracy(data); });
    }
  }

  std::printf("%s (%d failure%s)\n", g_failures == 0 ? "ALL PASS" : "FAILED",
              g_failures, g_failures == 1 ? "" : "s");
  return g_failures == 0 ? 0 : 1;
}
