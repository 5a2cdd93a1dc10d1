// Training pipeline: config parsing, the synthetic scene generator, dataset
// loading, the clipped Adam step, checkpoint round-trips, and bit-exact
// determinism of short training runs including resume-from-checkpoint.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "seqco/pretrain.hpp"

using namespace seqco;

namespace {

namespace fs = std::filesystem;

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) : path(fs::temp_directory_path() / ("seqco_test_" + tag)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

ModelConfig tiny_model() {
  ModelConfig m;
  m.image_size = 32;
  m.d_model = 16;
  m.heads = 4;
  m.enc_layers = 1;
  m.dec_layers = 1;
  m.queries = 8;
  m.proj_dim = 8;
  m.ffn_hidden = 32;
  m.head_hidden = 16;
  return m;
}

PretrainConfig tiny_config(const std::string& dataset_dir) {
  PretrainConfig c;
  c.model = tiny_model();
  c.augment.out_size = c.model.image_size;
  c.proposal_mode = ProposalMode::kGroundTruth;
  c.steps = 4;
  c.batch_size = 2;
  c.seed = 11;
  c.dataset = dataset_dir;
  return c;
}

std::string dump_records(const std::vector<MetricsRecord>& recs) {
  std::ostringstream os;
  for (const auto& r : recs) os << r.to_json().dump() << "\n";
  return os.str();
}

}  // namespace

TEST_CASE("config parsing applies defaults and explicit values") {
  auto c = parse_pretrain_config(nlohmann::json::object());
  REQUIRE(c.steps == 300);
  REQUIRE(c.batch_size >= 1);
  REQUIRE(c.optimizer.lr == 1e-4);
  REQUIRE(c.optimizer.beta1 == 0.9);
  REQUIRE(c.optimizer.beta2 == 0.999);
  REQUIRE(c.optimizer.eps == 1e-8);
  REQUIRE(c.optimizer.clip_norm == 0.1);
  REQUIRE(c.ema.beta == 0.996);
  REQUIRE(c.model.image_size == 64);
  REQUIRE(c.augment.out_size == c.model.image_size);

  auto j = nlohmann::json::parse(R"({
    "model": {"image_size": 32, "d_model": 16, "queries": 8},
    "weights": {"lambda_e": 7.5},
    "mask": {"mode": "complementary", "patch": 8, "online_proportion": [0.4, 0.8]},
    "optimizer": {"lr": 0.001},
    "proposal_mode": "random",
    "similarity": "l1",
    "steps": 10,
    "seed": 99
  })");
  auto p = parse_pretrain_config(j);
  REQUIRE(p.model.image_size == 32);
  REQUIRE(p.model.queries == 8);
  REQUIRE(p.weights.lambda_e == 7.5);
  REQUIRE(p.weights.lambda_f == 2.0);  // untouched default
  REQUIRE(p.augment.mask.patch == 8);
  REQUIRE(p.proposal_mode == ProposalMode::kRandom);
  REQUIRE(p.similarity == SimilarityKind::kL1);
  REQUIRE(p.steps == 10);
  REQUIRE(p.seed == 99);
  REQUIRE(p.augment.out_size == 32);
}

TEST_CASE("config parsing rejects unknown keys and invalid values") {
  REQUIRE_THROWS_AS(parse_pretrain_config(nlohmann::json::parse(R"({"stepz": 10})")), std::invalid_argument);
  REQUIRE_THROWS_AS(parse_pretrain_config(nlohmann::json::parse(R"({"model": {"width": 64}})")),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(parse_pretrain_config(nlohmann::json::parse(R"({"optimizer": {"momentum": 0.9}})")),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(parse_pretrain_config(nlohmann::json::parse(R"({"steps": 0})")), std::invalid_argument);
  REQUIRE_THROWS_AS(parse_pretrain_config(nlohmann::json::parse(R"({"batch_size": 0})")), std::invalid_argument);
  REQUIRE_THROWS_AS(parse_pretrain_config(nlohmann::json::parse(R"({"mask": {"mode": "sometimes"}})")),
                    std::invalid_argument);
}

TEST_CASE("synthetic scenes are deterministic, in-bounds, and lightly overlapped") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto scene = make_synthetic_scene(s, 64);
    REQUIRE(scene.image.h == 64);
    REQUIRE(scene.image.w == 64);
    REQUIRE(scene.gt_boxes.size() >= 1);
    REQUIRE(scene.gt_boxes.size() <= 3);
    for (float v : scene.image.v) {
      REQUIRE(v >= 0.0f);
      REQUIRE(v <= 1.0f);
    }
    for (const auto& b : scene.gt_boxes) {
      REQUIRE(b.cx - b.w / 2 >= 0.0);
      REQUIRE(b.cx + b.w / 2 <= 1.0);
      REQUIRE(b.cy - b.h / 2 >= 0.0);
      REQUIRE(b.cy + b.h / 2 <= 1.0);
    }
    for (std::size_t i = 0; i < scene.gt_boxes.size(); ++i)
      for (std::size_t j = i + 1; j < scene.gt_boxes.size(); ++j)
        REQUIRE(iou(scene.gt_boxes[i], scene.gt_boxes[j]) <= 0.3);
  }
  auto a = make_synthetic_scene(7, 64);
  auto b = make_synthetic_scene(7, 64);
  REQUIRE(a.image.v == b.image.v);
  REQUIRE(a.gt_boxes.size() == b.gt_boxes.size());
}

TEST_CASE("annotation files round-trip through JSON") {
  TempDir dir("gtjson");
  std::vector<Box> boxes = {{0.25, 0.5, 0.125, 0.25}, {0.75, 0.3, 0.1, 0.2}};
  std::string path = (dir.path / "a.json").string();
  write_gt_json(path, boxes);
  auto back = read_gt_json(path);
  REQUIRE(back.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    REQUIRE(back[i].cx == boxes[i].cx);
    REQUIRE(back[i].cy == boxes[i].cy);
    REQUIRE(back[i].w == boxes[i].w);
    REQUIRE(back[i].h == boxes[i].h);
  }
}

TEST_CASE("generated datasets load with annotations as proposals") {
  TempDir dir("dataset");
  generate_synthetic(3, 5, dir.path.string(), 32);
  auto items = load_dataset(dir.path.string(), ProposalMode::kGroundTruth, 30, 1);
  REQUIRE(items.size() == 3);
  for (const auto& it : items) {
    REQUIRE(it.image.h == 32);
    REQUIRE_FALSE(it.gt.empty());
    REQUIRE(it.proposals.size() == it.gt.size());
    for (std::size_t i = 0; i < it.gt.size(); ++i) REQUIRE(it.proposals[i] == it.gt[i]);
  }
  // file order is sorted and stable
  REQUIRE(items[0].path < items[1].path);
  REQUIRE(items[1].path < items[2].path);
  REQUIRE_THROWS_AS(load_dataset((dir.path / "missing").string(), ProposalMode::kGroundTruth, 30, 1),
                    std::exception);
}

TEST_CASE("Adam step matches the closed form on the first update") {
  ParamStore<double> params;
  params.add("w", Tensor<double>::from({3}, {1.0, -2.0, 0.5}, true));
  AdamState<double> adam;
  adam.init(params);
  // loss = sum(w^2) -> grad = 2w
  auto& w = params.get("w");
  auto loss = sum(mul(w, w));
  backward(loss);
  OptimizerConfig opt;
  opt.clip_norm = 0;  // disable clipping for the closed form
  std::vector<double> w0 = w.data();
  adam_step(params, adam, opt);
  REQUIRE(adam.t == 1);
  for (std::size_t i = 0; i < 3; ++i) {
    double g = 2 * w0[i];
    // with t = 1 the bias-corrected moments are exactly g and g^2
    double expect = w0[i] - opt.lr * g / (std::fabs(g) + opt.eps);
    REQUIRE_THAT(w.data()[i], Catch::Matchers::WithinAbs(expect, 1e-15));
    REQUIRE_THAT(adam.m[0][i], Catch::Matchers::WithinAbs((1 - opt.beta1) * g, 1e-15));
    REQUIRE_THAT(adam.v[0][i], Catch::Matchers::WithinAbs((1 - opt.beta2) * g * g, 1e-15));
  }
}

TEST_CASE("gradient clipping rescales to the global norm bound") {
  ParamStore<double> params;
  params.add("w", Tensor<double>::from({2}, {3.0, 4.0}, true));
  AdamState<double> adam;
  adam.init(params);
  auto& w = params.get("w");
  backward(sum(mul(w, w)));  // grad = (6, 8), norm 10
  OptimizerConfig opt;
  opt.clip_norm = 0.1;
  adam_step(params, adam, opt);
  // clipped gradient is (0.06, 0.08); first moments record the clipped values
  REQUIRE_THAT(adam.m[0][0], Catch::Matchers::WithinAbs((1 - opt.beta1) * 0.06, 1e-12));
  REQUIRE_THAT(adam.m[0][1], Catch::Matchers::WithinAbs((1 - opt.beta1) * 0.08, 1e-12));
}

TEST_CASE("checkpoints round-trip the full training state bit for bit") {
  TempDir dir("ckpt");
  auto cfg = tiny_model();
  auto state = init_train_state<float>(cfg, 3);
  // make the pieces distinguishable
  state.online.get("queries").data()[0] = 1.25f;
  state.momentum.get("queries").data()[0] = -2.5f;
  state.adam.m[0][0] = 0.125f;
  state.adam.v[0][0] = 0.0625f;
  state.adam.t = 17;
  state.step = 42;
  std::string path = (dir.path / "c.bin").string();
  checkpoint_save(state, path);

  TrainState<float> loaded;
  checkpoint_load(loaded, cfg, 99, path);  // init seed must not matter after load
  REQUIRE(loaded.step == 42);
  REQUIRE(loaded.adam.t == 17);
  std::size_t pi = 0;
  for (const auto& [name, p] : state.online) {
    REQUIRE(loaded.online.get(name).data() == p.data());
    REQUIRE(loaded.momentum.get(name).data() == state.momentum.get(name).data());
    REQUIRE(loaded.adam.m[pi] == state.adam.m[pi]);
    REQUIRE(loaded.adam.v[pi] == state.adam.v[pi]);
    ++pi;
  }
}

TEST_CASE("corrupt checkpoints are rejected with diagnostics") {
  TempDir dir("ckpt_bad");
  auto cfg = tiny_model();
  auto state = init_train_state<float>(cfg, 3);
  std::string path = (dir.path / "c.bin").string();
  checkpoint_save(state, path);

  SECTION("truncated file") {
    auto size = fs::file_size(path);
    fs::resize_file(path, size / 2);
    TrainState<float> loaded;
    try {
      checkpoint_load(loaded, cfg, 3, path);
      FAIL("expected an exception");
    } catch (const std::runtime_error& e) {
      REQUIRE(std::string(e.what()).find("truncated") != std::string::npos);
    }
  }
  SECTION("bad magic") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.write("XXXXX", 5);
    f.close();
    TrainState<float> loaded;
    REQUIRE_THROWS_WITH(checkpoint_load(loaded, cfg, 3, path), Catch::Matchers::ContainsSubstring("magic"));
  }
  SECTION("missing file") {
    TrainState<float> loaded;
    REQUIRE_THROWS_AS(checkpoint_load(loaded, cfg, 3, (dir.path / "nope.bin").string()), std::runtime_error);
  }
}

TEST_CASE("a training step updates both branches and reports finite metrics") {
  TempDir dir("step");
  generate_synthetic(3, 21, dir.path.string(), 32);
  auto cfg = tiny_config(dir.path.string());
  auto dataset = load_dataset(cfg.dataset, cfg.proposal_mode, 30, cfg.seed);
  auto state = init_train_state<float>(cfg.model, cfg.seed);
  auto online_before = state.online.clone(false);
  auto momentum_before = state.momentum.clone(false);

  auto rec = train_step(state, cfg, dataset, 1);
  REQUIRE(rec.ok);
  REQUIRE(std::isfinite(rec.loss_total));
  REQUIRE(rec.loss_total > 0);
  REQUIRE_THAT(rec.loss_rps, Catch::Matchers::WithinAbs(2 * rec.loss_focal + 5 * rec.loss_box, 1e-9));
  REQUIRE(rec.n_matched > 0);
  REQUIRE(state.step == 1);
  REQUIRE(state.adam.t == 1);
  REQUIRE((state.online.get("queries").data() != online_before.get("queries").data()));
  REQUIRE((state.momentum.get("queries").data() != momentum_before.get("queries").data()));
  // EMA moves the momentum branch only slightly
  double delta = 0;
  for (std::size_t i = 0; i < state.momentum.get("queries").data().size(); ++i)
    delta = std::max(delta, std::fabs(static_cast<double>(state.momentum.get("queries").data()[i] -
                                                          momentum_before.get("queries").data()[i])));
  REQUIRE(delta < 1e-3);
}

TEST_CASE("a non-finite loss aborts the step and leaves the state untouched") {
  TempDir dir("nonfinite");
  generate_synthetic(2, 22, dir.path.string(), 32);
  auto cfg = tiny_config(dir.path.string());
  auto dataset = load_dataset(cfg.dataset, cfg.proposal_mode, 30, cfg.seed);
  auto state = init_train_state<float>(cfg.model, cfg.seed);
  // an infinite projection bias makes the similarity term non-finite
  for (auto& v : state.online.get("head.prj.l2.b").data()) v = std::numeric_limits<float>::infinity();
  auto snapshot = state.momentum.clone(false);
  auto rec = train_step(state, cfg, dataset, 1);
  REQUIRE_FALSE(rec.ok);
  REQUIRE(rec.to_json().contains("error"));
  REQUIRE(state.step == 0);
  REQUIRE(state.adam.t == 0);
  for (const auto& [name, p] : state.momentum) REQUIRE(p.data() == snapshot.get(name).data());
}

TEST_CASE("training is bit-for-bit deterministic and resumable") {
  TempDir dir("determinism");
  generate_synthetic(4, 23, dir.path.string(), 32);
  auto cfg = tiny_config(dir.path.string());
  cfg.steps = 6;
  auto dataset = load_dataset(cfg.dataset, cfg.proposal_mode, 30, cfg.seed);
  std::string mid = (dir.path / "mid.bin").string();

  auto a = init_train_state<float>(cfg.model, cfg.seed);
  auto recs_a = run_pretraining(a, cfg, dataset, nullptr, /*checkpoint_at=*/3, mid);
  REQUIRE(recs_a.size() == 6);

  // identical rerun
  auto b = init_train_state<float>(cfg.model, cfg.seed);
  auto recs_b = run_pretraining(b, cfg, dataset, nullptr);
  REQUIRE(dump_records(recs_a) == dump_records(recs_b));

  // resume from the mid checkpoint reproduces steps 4..6 exactly
  TrainState<float> c;
  checkpoint_load(c, cfg.model, cfg.seed, mid);
  REQUIRE(c.step == 3);
  auto recs_c = run_pretraining(c, cfg, dataset, nullptr);
  REQUIRE(recs_c.size() == 3);
  std::vector<MetricsRecord> tail(recs_a.begin() + 3, recs_a.end());
  REQUIRE(dump_records(recs_c) == dump_records(tail));
  // final parameters agree with the uninterrupted run
  for (const auto& [name, p] : a.online) REQUIRE(c.online.get(name).data() == p.data());
  for (const auto& [name, p] : a.momentum) REQUIRE(c.momentum.get(name).data() == p.data());
}

TEST_CASE("metrics serialize with stable keys") {
  MetricsRecord r;
  r.step = 3;
  r.loss_total = 1.5;
  auto j = r.to_json();
  REQUIRE(j["step"] == 3);
  REQUIRE(j.contains("loss_total"));
  REQUIRE(j.contains("loss_rps"));
  REQUIRE(j.contains("loss_ssl"));
  REQUIRE(j.contains("proj_var"));
  REQUIRE_FALSE(j.contains("error"));
}

TEST_CASE("matching evaluation reports sane aggregate statistics") {
  TempDir dir("eval");
  generate_synthetic(3, 24, dir.path.string(), 32);
  auto cfg = tiny_config(dir.path.string());
  auto dataset = load_dataset(cfg.dataset, cfg.proposal_mode, 30, cfg.seed);
  auto state = init_train_state<float>(cfg.model, cfg.seed);
  auto report = evaluate_matching(state, cfg, dataset);
  REQUIRE(report["scenes"] == 3);
  REQUIRE(report["gt_boxes"].get<double>() >= 3.0);
  double frac = report["matched_iou_fraction"].get<double>();
  REQUIRE(frac >= 0.0);
  REQUIRE(frac <= 1.0);
  REQUIRE(report["mean_pair_l2"].get<double>() >= 0.0);
  REQUIRE_THROWS_AS(evaluate_matching(state, cfg, {}), std::invalid_argument);
}
