// Command-line front end: synthetic data generation, proposal extraction,
// mask/view inspection, assignment solving, gradient checking, pre-training,
// and matching evaluation.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "seqco/augment.hpp"
#include "seqco/gradcheck.hpp"
#include "seqco/pretrain.hpp"

namespace {

using nlohmann::json;

int cmd_synth(int count, std::uint64_t seed, const std::string& out, int size) {
  seqco::generate_synthetic(count, seed, out, size);
  std::cout << json{{"count", count}, {"dir", out}, {"size", size}}.dump() << "\n";
  return 0;
}

int cmd_proposals(const std::string& image_path, const std::string& mode_str, int top, std::uint64_t seed,
                  const std::string& sidecar) {
  seqco::Image img = seqco::read_ppm(image_path);
  seqco::ProposalMode mode = seqco::parse_proposal_mode(mode_str);
  std::vector<seqco::Box> gt;
  if (mode == seqco::ProposalMode::kGroundTruth) {
    std::string gt_path = image_path + ".gt.json";
    if (!std::filesystem::exists(gt_path)) {
      std::cerr << "error: ground_truth mode needs " << gt_path << "\n";
      return 1;
    }
    gt = seqco::read_gt_json(gt_path);
  }
  auto props = seqco::proposal_source(mode, img, gt.empty() ? nullptr : &gt, top, seed);
  if (!sidecar.empty()) seqco::write_proposal_sidecar(sidecar, seqco::image_sha256(img), mode, props);
  json out;
  out["mode"] = seqco::proposal_mode_name(mode);
  out["count"] = props.size();
  auto arr = json::array();
  for (const auto& p : props) arr.push_back({p.box.cx, p.box.cy, p.box.w, p.box.h});
  out["proposals"] = arr;
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_masks(int height, int width, int patch, double proportion, std::uint64_t seed,
              const std::string& out_prefix) {
  auto m = seqco::random_mask(height, width, patch, proportion, seed);
  auto c = seqco::complement(m);
  if (!out_prefix.empty()) {
    seqco::write_mask_pgm(m, out_prefix + ".online.pgm");
    seqco::write_mask_pgm(c, out_prefix + ".momentum.pgm");
  }
  std::cout << json{{"cells", m.cell_count()},
                    {"masked_online", m.masked_count()},
                    {"masked_momentum", c.masked_count()},
                    {"grid_h", m.grid_h},
                    {"grid_w", m.grid_w}}
                   .dump()
            << "\n";
  return 0;
}

int cmd_views(const std::string& image_path, std::uint64_t seed, const std::string& out_prefix, int size) {
  seqco::Image img = seqco::read_ppm(image_path);
  seqco::AugmentConfig cfg;
  cfg.out_size = size;
  auto vp = seqco::make_views(img, seed, cfg);
  if (!out_prefix.empty()) {
    seqco::write_ppm(seqco::denormalize(vp.view1), out_prefix + ".momentum.ppm");
    seqco::write_ppm(seqco::denormalize(vp.view2), out_prefix + ".online.ppm");
    if (vp.mask1) seqco::write_mask_pgm(*vp.mask1, out_prefix + ".momentum.mask.pgm");
    if (vp.mask2) seqco::write_mask_pgm(*vp.mask2, out_prefix + ".online.mask.pgm");
  }
  const auto& g = vp.geometry;
  std::cout << json{{"flip", g.flip},
                    {"resized", {g.resized_h, g.resized_w}},
                    {"crop", {g.crop_y, g.crop_x, g.crop_h, g.crop_w}},
                    {"out", {g.out_h, g.out_w}}}
                   .dump()
            << "\n";
  return 0;
}

int cmd_match(const std::string& cost_path) {
  std::ifstream f(cost_path);
  if (!f) {
    std::cerr << "error: cannot open " << cost_path << "\n";
    return 1;
  }
  json j;
  f >> j;
  const auto& rows = j.at("cost");
  int n_rows = static_cast<int>(rows.size());
  int n_cols = n_rows ? static_cast<int>(rows[0].size()) : 0;
  seqco::CostMatrix c(n_rows, n_cols);
  for (int r = 0; r < n_rows; ++r) {
    if (static_cast<int>(rows[r].size()) != n_cols) throw std::invalid_argument("ragged cost matrix");
    for (int col = 0; col < n_cols; ++col) c.at(r, col) = rows[r][col].get<double>();
  }
  auto a = seqco::hungarian(c);
  std::cout << json{{"target_to_query", a.target_to_query}, {"total_cost", a.cost_under(c)}}.dump() << "\n";
  return 0;
}

int cmd_gradcheck(std::uint64_t seed, double tolerance, int stride) {
  auto setup = seqco::GradcheckSetup::standard();
  setup.seed = seed;
  setup.stride = stride;
  auto res = seqco::gradcheck_total_loss(setup);
  std::cout << json{{"max_rel_err", res.max_rel_err},
                    {"checked", res.checked},
                    {"worst_param", res.worst_param},
                    {"worst_index", res.worst_index},
                    {"tolerance", tolerance},
                    {"pass", res.pass(tolerance)}}
                   .dump()
            << "\n";
  return res.pass(tolerance) ? 0 : 1;
}

int cmd_pretrain(const std::string& config_path, bool resume) {
  auto cfg = seqco::load_pretrain_config(config_path);
  if (cfg.dataset.empty()) {
    std::cerr << "error: config must set \"dataset\"\n";
    return 1;
  }
  auto dataset = seqco::load_dataset(cfg.dataset, cfg.proposal_mode, 30, cfg.seed);
  seqco::log_info("loaded %zu images from %s", dataset.size(), cfg.dataset.c_str());

  seqco::TrainState<float> state;
  std::ios_base::openmode metrics_mode = std::ios::out;
  if (resume) {
    seqco::checkpoint_load(state, cfg.model, cfg.seed, cfg.checkpoint_path);
    seqco::log_info("resumed from %s at step %lld", cfg.checkpoint_path.c_str(), state.step);
    metrics_mode = std::ios::app;
  } else {
    state = seqco::init_train_state<float>(cfg.model, cfg.seed);
  }
  if (auto dir = std::filesystem::path(cfg.metrics_path).parent_path(); !dir.empty())
    std::filesystem::create_directories(dir);
  std::ofstream metrics(cfg.metrics_path, metrics_mode);
  if (!metrics) {
    std::cerr << "error: cannot open metrics file " << cfg.metrics_path << "\n";
    return 1;
  }
  auto records = seqco::run_pretraining(state, cfg, dataset, &metrics);
  if (auto dir = std::filesystem::path(cfg.checkpoint_path).parent_path(); !dir.empty())
    std::filesystem::create_directories(dir);
  seqco::checkpoint_save(state, cfg.checkpoint_path);
  bool all_finite = true;
  for (const auto& r : records) all_finite = all_finite && r.ok;
  std::cout << json{{"steps", state.step},
                    {"checkpoint", cfg.checkpoint_path},
                    {"metrics", cfg.metrics_path},
                    {"all_finite", all_finite}}
                   .dump()
            << "\n";
  return all_finite ? 0 : 1;
}

int cmd_eval(const std::string& config_path, const std::string& checkpoint, const std::string& out_path) {
  auto cfg = seqco::load_pretrain_config(config_path);
  auto dataset = seqco::load_dataset(cfg.dataset, seqco::ProposalMode::kGroundTruth, 30, cfg.seed);
  seqco::TrainState<float> state;
  seqco::checkpoint_load(state, cfg.model, cfg.seed,
                         checkpoint.empty() ? cfg.checkpoint_path : checkpoint);
  auto report = seqco::evaluate_matching(state, cfg, dataset);
  if (!out_path.empty()) {
    std::ofstream f(out_path);
    f << report.dump(2) << "\n";
  }
  std::cout << report.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"self-supervised sequence-consistency pre-training toolkit"};
  app.require_subcommand(1);

  std::uint64_t seed = 1;
  int count = 100, size = 64, top = 30;
  std::string out, image, mode = "selective_search", sidecar, config, cost_path, checkpoint;
  int height = 64, width = 64, patch = 16;
  double proportion = 0.7, tolerance = 1e-4;
  int stride = 1;
  bool resume = false;

  auto* synth = app.add_subcommand("synth", "generate synthetic scenes with box annotations");
  synth->add_option("--count", count, "number of scenes")->default_val(100);
  synth->add_option("--seed", seed, "RNG seed");
  synth->add_option("--out", out, "output directory")->required();
  synth->add_option("--size", size, "image side length")->default_val(64);

  auto* proposals = app.add_subcommand("proposals", "extract object proposals from an image");
  proposals->add_option("--image", image, "input .ppm image")->required();
  proposals->add_option("--mode", mode, "selective_search | ground_truth | random");
  proposals->add_option("--top", top, "max proposals")->default_val(30);
  proposals->add_option("--seed", seed, "RNG seed");
  proposals->add_option("--sidecar", sidecar, "write a proposal cache sidecar here");

  auto* masks = app.add_subcommand("masks", "draw a patch mask and its complement");
  masks->add_option("--height", height, "image height")->default_val(64);
  masks->add_option("--width", width, "image width")->default_val(64);
  masks->add_option("--patch", patch, "patch side length")->default_val(16);
  masks->add_option("--proportion", proportion, "masked proportion")->default_val(0.7);
  masks->add_option("--seed", seed, "RNG seed");
  masks->add_option("--out", out, "output file prefix");

  auto* views = app.add_subcommand("views", "build the two training views of an image");
  views->add_option("--image", image, "input .ppm image")->required();
  views->add_option("--seed", seed, "RNG seed");
  views->add_option("--out", out, "output file prefix");
  views->add_option("--size", size, "view side length")->default_val(64);

  auto* match = app.add_subcommand("match", "solve an assignment problem from a JSON cost matrix");
  match->add_option("--cost", cost_path, "JSON file with a \"cost\" row-major matrix")->required();

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of the training objective");
  gradcheck->add_option("--seed", seed, "RNG seed")->default_val(7);
  gradcheck->add_option("--tolerance", tolerance, "max relative error allowed")->default_val(1e-4);
  gradcheck->add_option("--stride", stride, "check every n-th parameter scalar")->default_val(1);

  auto* pretrain = app.add_subcommand("pretrain", "run the pre-training loop");
  pretrain->add_option("--config", config, "JSON config file")->required();
  pretrain->add_flag("--resume", resume, "resume from the configured checkpoint");

  auto* eval = app.add_subcommand("eval", "evaluate matching quality of a checkpoint");
  eval->add_option("--config", config, "JSON config file")->required();
  eval->add_option("--checkpoint", checkpoint, "checkpoint path (defaults to the config's)");
  eval->add_option("--out", out, "write the JSON report here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (synth->parsed()) return cmd_synth(count, seed, out, size);
    if (proposals->parsed()) return cmd_proposals(image, mode, top, seed, sidecar);
    if (masks->parsed()) return cmd_masks(height, width, patch, proportion, seed, out);
    if (views->parsed()) return cmd_views(image, seed, out, size);
    if (match->parsed()) return cmd_match(cost_path);
    if (gradcheck->parsed()) return cmd_gradcheck(seed, tolerance, stride);
    if (pretrain->parsed()) return cmd_pretrain(config, resume);
    if (eval->parsed()) return cmd_eval(config, checkpoint, out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
