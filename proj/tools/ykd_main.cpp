// ykd: continual instance segmentation on synthetic shapes.
//
// Subcommands: generate, train-base, increment, joint, evaluate, average,
// cka, plot. Every run directory receives a config copy, per-epoch
// metrics CSV, checkpoints and a run manifest for provenance.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "ykd/averaging.hpp"
#include "ykd/cka.hpp"
#include "ykd/config.hpp"
#include "ykd/dataset_io.hpp"
#include "ykd/eval.hpp"
#include "ykd/infer.hpp"
#include "ykd/shapes.hpp"
#include "ykd/svgplot.hpp"
#include "ykd/train.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;
using namespace ykd;

namespace {

std::string git_hash_or_empty() {
  FILE* pipe = popen("git rev-parse HEAD 2>/dev/null", "r");
  if (!pipe) return "";
  char buf[128] = {0};
  std::string out;
  while (fgets(buf, sizeof(buf), pipe)) out += buf;
  pclose(pipe);
  while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) out.pop_back();
  return out;
}

void write_run_manifest(const std::string& dir, const std::string& command,
                        const TrainConfig& cfg,
                        const std::map<std::string, std::string>& extra) {
  ordered_json j;
  j["command"] = command;
  j["seed"] = cfg.seed;
  j["mode"] = train_mode_name(cfg.mode);
  j["epochs"] = cfg.epochs;
  j["batch_size"] = cfg.batch_size;
  j["lr"] = cfg.lr;
  j["lambda1"] = cfg.kd.lambda1;
  j["lambda2"] = cfg.kd.lambda2;
  j["lambda3"] = cfg.kd.lambda3;
  j["tau_reg"] = cfg.tau_reg;
  j["tau_obj"] = cfg.tau_obj;
  j["deterministic"] = cfg.deterministic;
  j["threads"] = cfg.threads;
  std::string hash = git_hash_or_empty();
  if (!hash.empty()) j["git_hash"] = hash;
  for (const auto& [k, v] : extra) j[k] = v;
  std::ofstream f(fs::path(dir) / "run_manifest.json");
  YKD_CHECK(f.good(), "cannot write run manifest in ", dir);
  f << j.dump(2) << "\n";
}

Dataset load_data_dir(const std::string& dir) {
  return load_dataset((fs::path(dir) / "annotations.json").string(),
                      (fs::path(dir) / "images").string());
}

std::string checkpoint_path_of(const std::string& given) {
  if (fs::exists(fs::path(given) / "manifest.json")) return given;
  if (fs::exists(fs::path(given) / "checkpoint" / "manifest.json")) {
    return (fs::path(given) / "checkpoint").string();
  }
  fail("no checkpoint manifest under ", given);
}

ScenarioSpec scenario_for(const std::string& text, const Dataset& ds) {
  YKD_CHECK(!ds.class_catalog.empty(), "dataset has an empty class catalog");
  int total = static_cast<int>(ds.class_catalog.size());
  // Catalog ids must be 1..total for the N-k partition to make sense.
  int expect = 1;
  for (const auto& [id, name] : ds.class_catalog) {
    YKD_CHECK(id == expect, "class catalog must be contiguous from 1; found id ", id);
    ++expect;
  }
  return parse_scenario(text, total);
}

EvalHook make_eval_hook(const std::string& eval_dir, const std::string& scenario) {
  if (eval_dir.empty()) return nullptr;
  auto ds = std::make_shared<Dataset>(load_data_dir(eval_dir));
  auto spec = std::make_shared<ScenarioSpec>(scenario_for(scenario, *ds));
  return [ds, spec](const ModelState& m) {
    InferenceEngine engine(m);
    std::vector<Detection> dets;
    for (const auto& s : ds->samples) {
      auto d = engine.infer(s);
      dets.insert(dets.end(), d.begin(), d.end());
    }
    return evaluate(dets, *ds, *spec).all;
  };
}

struct CommonTrainArgs {
  std::string config_path;
  std::string out_dir;
  std::string data_dir;
  std::string eval_dir;
  std::string scenario = "3-1";
  int seed = -1;
  int epochs = -1;
  int threads = -1;
  double lr = -1;
  bool deterministic = false;
  std::string mode;
};

void add_common_train_flags(CLI::App* cmd, CommonTrainArgs& a, bool with_mode) {
  cmd->add_option("--data", a.data_dir, "dataset directory (annotations.json + images/)")
      ->required();
  cmd->add_option("--out", a.out_dir, "run directory to create")->required();
  cmd->add_option("--scenario", a.scenario, "N-k class split, e.g. 3-1");
  cmd->add_option("--config", a.config_path, "key=value config file");
  cmd->add_option("--seed", a.seed, "override config seed");
  cmd->add_option("--epochs", a.epochs, "override config epochs");
  cmd->add_option("--threads", a.threads, "override worker count");
  cmd->add_option("--lr", a.lr, "override learning rate");
  cmd->add_option("--eval-data", a.eval_dir, "eval split for per-epoch mAP");
  cmd->add_flag("--deterministic", a.deterministic, "pin the configured thread count");
  if (with_mode) {
    cmd->add_option("--mode", a.mode, "finetune | kd_frozen | ykd");
  }
}

TrainConfig config_from(const CommonTrainArgs& a) {
  TrainConfig cfg;
  if (!a.config_path.empty()) apply_config(read_config_file(a.config_path), cfg);
  if (a.seed >= 0) cfg.seed = static_cast<uint64_t>(a.seed);
  if (a.epochs >= 0) cfg.epochs = a.epochs;
  if (a.threads >= 1) cfg.threads = a.threads;
  if (a.lr > 0) cfg.lr = a.lr;
  if (a.deterministic) cfg.deterministic = true;
  if (!a.mode.empty()) cfg.mode = parse_train_mode(a.mode);
  cfg.validate();
  return cfg;
}

void prepare_run_dir(const std::string& dir) {
  YKD_CHECK(!fs::exists(fs::path(dir) / "run_manifest.json"),
            "run directory ", dir, " already holds a run (refusing to overwrite)");
  fs::create_directories(dir);
}

void finish_run(const std::string& out_dir, const std::string& command,
                const TrainConfig& cfg, const TrainReport& rep, const ModelState& model,
                const std::map<std::string, std::string>& extra) {
  write_config_file((fs::path(out_dir) / "config.txt").string(), cfg);
  write_metrics_csv((fs::path(out_dir) / "metrics.csv").string(), rep.epochs);
  save_checkpoint(model, (fs::path(out_dir) / "checkpoint").string());
  write_run_manifest(out_dir, command, cfg, extra);
}

// ---------------------------------------------------------------------------

int cmd_generate(int num_classes, int images, int image_size, int seed,
                 const std::string& out, bool force) {
  fs::path dir(out);
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    YKD_CHECK(force, "output directory ", out, " exists; pass --force to overwrite");
    fs::remove_all(dir);
  }
  std::vector<int> classes;
  for (int c = 1; c <= num_classes; ++c) classes.push_back(c);
  Dataset ds = generate_shapes_dataset(images, classes, image_size,
                                       static_cast<uint64_t>(seed));
  save_dataset(ds, (dir / "annotations.json").string(), (dir / "images").string());

  std::map<int, int> counts;
  int total = 0;
  for (const auto& s : ds.samples) {
    for (const auto& a : s.annotations) {
      counts[a.class_id] += 1;
      ++total;
    }
  }
  std::cout << "wrote " << ds.samples.size() << " images, " << total << " instances to "
            << out << "\n";
  for (const auto& [cls, n] : counts) {
    std::cout << "  class " << cls << " (" << ds.class_catalog.at(cls) << "): " << n
              << " instances\n";
  }
  return 0;
}

int cmd_train_base(const CommonTrainArgs& args) {
  TrainConfig cfg = config_from(args);
  prepare_run_dir(args.out_dir);
  Dataset ds = load_data_dir(args.data_dir);
  ScenarioSpec spec = scenario_for(args.scenario, ds);
  Dataset base = filter_step(ds, spec, 0);
  YKD_CHECK(!base.samples.empty(), "no image in ", args.data_dir,
            " contains a base class of scenario ", args.scenario);

  TrainReport rep;
  ModelState model = train_base(base, cfg, spec.base_classes(), &rep,
                                make_eval_hook(args.eval_dir, args.scenario));
  finish_run(args.out_dir, "train-base", cfg, rep, model,
             {{"scenario", args.scenario}, {"data", args.data_dir}});
  std::cout << "train-base done: first-epoch loss " << rep.first_epoch_loss
            << ", last-epoch loss " << rep.last_epoch_loss << "\n";
  return 0;
}

int cmd_increment(const CommonTrainArgs& args, const std::string& ckpt, int step) {
  TrainConfig cfg = config_from(args);
  prepare_run_dir(args.out_dir);
  Dataset ds = load_data_dir(args.data_dir);
  ScenarioSpec spec = scenario_for(args.scenario, ds);
  YKD_CHECK(step >= 1 && step < spec.num_steps(), "step ", step,
            " out of range for scenario ", args.scenario);
  Dataset part = filter_step(ds, spec, step);
  YKD_CHECK(!part.samples.empty(), "no image in ", args.data_dir,
            " contains a step-", step, " class");

  ModelState state = load_checkpoint(checkpoint_path_of(ckpt));
  TrainReport rep;
  ModelState next = increment_step(state, part, spec.classes_of(step), cfg, &rep,
                                   make_eval_hook(args.eval_dir, args.scenario));
  finish_run(args.out_dir, "increment", cfg, rep, next,
             {{"scenario", args.scenario},
              {"data", args.data_dir},
              {"from_checkpoint", ckpt},
              {"step", std::to_string(step)}});
  std::cout << "increment (" << train_mode_name(cfg.mode) << ") done: step " << step
            << ", teacher sha unchanged: "
            << (rep.teacher_sha_before == rep.teacher_sha_after ? "yes" : "NO") << "\n";
  return 0;
}

int cmd_joint(const CommonTrainArgs& args) {
  TrainConfig cfg = config_from(args);
  prepare_run_dir(args.out_dir);
  Dataset ds = load_data_dir(args.data_dir);
  TrainReport rep;
  ModelState model = joint_train(ds, cfg, {}, &rep,
                                 make_eval_hook(args.eval_dir, args.scenario));
  finish_run(args.out_dir, "joint", cfg, rep, model, {{"data", args.data_dir}});
  std::cout << "joint training done over " << model.heads[0].class_domain.size()
            << " classes\n";
  return 0;
}

int cmd_evaluate(const std::string& ckpt, const std::string& data,
                 const std::string& scenario, const std::string& out,
                 const std::string& branches_text, const std::string& compose_text,
                 double score_thresh, const std::string& iou_kind_text) {
  Dataset ds = load_data_dir(data);
  ScenarioSpec spec = scenario_for(scenario, ds);
  ModelState state = load_checkpoint(checkpoint_path_of(ckpt));
  fs::create_directories(out);

  InferOptions opt;
  if (score_thresh >= 0) opt.score_thresh = score_thresh;
  IouKind kind = IouKind::kMask;
  if (iou_kind_text == "box") kind = IouKind::kBox;
  else YKD_CHECK(iou_kind_text == "mask", "--iou must be mask or box");

  std::vector<Detection> dets;
  if (!compose_text.empty()) {
    auto colon = compose_text.find(':');
    YKD_CHECK(colon != std::string::npos, "--compose expects fe:head, got ", compose_text);
    int fe = std::stoi(compose_text.substr(0, colon));
    int head = std::stoi(compose_text.substr(colon + 1));
    ComposedModel cm = compose(state, fe, head);
    for (const auto& s : ds.samples) {
      auto d = cm.infer(s, opt);
      dets.insert(dets.end(), d.begin(), d.end());
    }
  } else {
    if (!branches_text.empty()) {
      std::vector<int> branches;
      std::stringstream ss(branches_text);
      std::string tok;
      while (std::getline(ss, tok, ',')) branches.push_back(std::stoi(tok));
      opt.branches = branches;
    }
    InferenceEngine engine(state);
    for (const auto& s : ds.samples) {
      auto d = engine.infer(s, opt);
      dets.insert(dets.end(), d.begin(), d.end());
    }
  }
  sort_detections(dets);
  save_detections_jsonl((fs::path(out) / "detections.jsonl").string(), dets);

  EvalReport report = evaluate(dets, ds, spec, kind);
  write_eval_csv((fs::path(out) / "report.csv").string(), report);
  std::string table = format_eval_table(report);
  std::ofstream tf(fs::path(out) / "report.txt");
  tf << table;
  std::cout << table;
  return 0;
}

int cmd_average(const std::string& ckpt_a, const std::string& ckpt_b, int head_a,
                int head_b, const std::string& weights_text, const std::string& data,
                const std::string& scenario, const std::string& out) {
  ModelState state_a = load_checkpoint(checkpoint_path_of(ckpt_a));
  ModelState state_b = load_checkpoint(checkpoint_path_of(ckpt_b));
  if (head_a < 0) head_a = state_a.heads[static_cast<size_t>(state_a.latest_head_index())].step;
  if (head_b < 0) head_b = state_b.heads[static_cast<size_t>(state_b.latest_head_index())].step;
  const HeadEntry& ha = state_a.head_by_step(head_a);
  const HeadEntry& hb = state_b.head_by_step(head_b);

  std::vector<std::pair<double, double>> weights;
  {
    std::stringstream ss(weights_text);
    std::string pair;
    while (std::getline(ss, pair, ',')) {
      auto colon = pair.find(':');
      YKD_CHECK(colon != std::string::npos, "--weights expects wi:wj pairs, got ", pair);
      weights.emplace_back(std::stod(pair.substr(0, colon)),
                           std::stod(pair.substr(colon + 1)));
    }
    YKD_CHECK(!weights.empty(), "--weights is empty");
  }

  Dataset ds = load_data_dir(data);
  ScenarioSpec spec = scenario_for(scenario, ds);
  fs::create_directories(out);

  auto eval_fn = [&](const HeadEntry& merged) {
    ModelState probe = state_b;
    probe.head_by_step(merged.step) = merged;
    InferenceEngine engine(probe);
    std::vector<Detection> dets;
    for (const auto& s : ds.samples) {
      auto d = engine.infer(s);
      dets.insert(dets.end(), d.begin(), d.end());
    }
    return evaluate(dets, ds, spec);
  };
  auto rows = sweep(ha, hb, weights, eval_fn);
  write_sweep_csv((fs::path(out) / "sweep.csv").string(), rows);

  // Emit a checkpoint per weight pair.
  for (auto [wi, wj] : weights) {
    ModelState merged_state = state_b;
    merged_state.head_by_step(hb.step) = average_heads(ha, hb, wi, wj);
    char name[64];
    std::snprintf(name, sizeof(name), "merged_w%.2f_%.2f", wi, wj);
    save_checkpoint(merged_state, (fs::path(out) / name).string());
  }
  for (const auto& r : rows) {
    std::cout << "w=(" << r.w_i << "," << r.w_j << ")  base=" << r.report.base
              << "  int=" << r.report.intermediary << "  new=" << r.report.novel
              << "  all=" << r.report.all << "\n";
  }
  return 0;
}

int cmd_cka(const std::string& ckpt, const std::string& data, const std::string& steps_text,
            const std::string& out) {
  auto comma = steps_text.find(',');
  YKD_CHECK(comma != std::string::npos, "--steps expects a,b, got ", steps_text);
  int step_a = std::stoi(steps_text.substr(0, comma));
  int step_b = std::stoi(steps_text.substr(comma + 1));
  ModelState state = load_checkpoint(checkpoint_path_of(ckpt));
  Dataset ds = load_data_dir(data);
  CKAReport report = cka_per_class(state, step_a, step_b, ds);
  fs::create_directories(out);
  write_cka_csv((fs::path(out) / "cka.csv").string(), report);
  for (const auto& [cls, v] : report.per_class) {
    std::cout << "class " << cls << ": CKA " << v << " (" << report.sample_counts.at(cls)
              << " images)\n";
  }
  return 0;
}

int cmd_plot(const std::string& cka_csv, const std::string& sweep_csv,
             const std::string& report_csv, const std::string& out) {
  YKD_CHECK(!cka_csv.empty() || !sweep_csv.empty() || !report_csv.empty(),
            "plot: provide --cka-csv, --sweep-csv and/or --report-csv");
  fs::create_directories(out);
  auto read_csv = [](const std::string& path) {
    std::ifstream f(path);
    YKD_CHECK(f.good(), "plot: cannot open ", path);
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      std::vector<std::string> cells;
      std::stringstream ss(line);
      std::string cell;
      while (std::getline(ss, cell, ',')) cells.push_back(cell);
      rows.push_back(std::move(cells));
    }
    return rows;
  };

  if (!cka_csv.empty()) {
    auto rows = read_csv(cka_csv);
    BarSeries series;
    for (size_t i = 1; i < rows.size(); ++i) {
      series.labels.push_back(rows[i][0]);
      series.values.push_back(std::stod(rows[i][1]));
    }
    write_bar_chart_svg((fs::path(out) / "cka_per_class.svg").string(),
                        "Per-class CKA between feature extractors", series);
    std::cout << "wrote cka_per_class.svg\n";
  }

  if (!sweep_csv.empty()) {
    auto rows = read_csv(sweep_csv);
    const char* groups[4] = {"base", "intermediary", "new", "all"};
    for (int g = 0; g < 4; ++g) {
      Curve c;
      c.name = groups[g];
      for (size_t i = 1; i < rows.size(); ++i) {
        const std::string& cell = rows[i][static_cast<size_t>(2 + g)];
        if (cell == "n/a") continue;
        c.x.push_back(std::stod(rows[i][0]));
        c.y.push_back(std::stod(cell));
      }
      if (c.x.empty()) continue;
      write_line_chart_svg(
          (fs::path(out) / (std::string("averaging_") + groups[g] + ".svg")).string(),
          std::string("Checkpoint averaging: ") + groups[g] + " mAP vs w_i", "w_i", {c});
      std::cout << "wrote averaging_" << groups[g] << ".svg\n";
    }
  }

  if (!report_csv.empty()) {
    auto rows = read_csv(report_csv);
    BarSeries series;
    for (size_t i = 1; i < rows.size(); ++i) {
      const auto& r = rows[i];
      if (r[0] == "base" || r[0] == "intermediary" || r[0] == "new" || r[0] == "all") {
        if (r.back() == "n/a") continue;
        series.labels.push_back(r[0]);
        series.values.push_back(std::stod(r.back()));
      }
    }
    YKD_CHECK(!series.values.empty(), "plot: no group rows in ", report_csv);
    write_bar_chart_svg((fs::path(out) / "group_map.svg").string(),
                        "mAP@{0.5:0.95} per class group", series);
    std::cout << "wrote group_map.svg\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual instance segmentation with Y-shaped distillation"};
  app.require_subcommand(1);

  // generate
  auto* gen = app.add_subcommand("generate", "create a synthetic shapes dataset");
  int g_classes = 4, g_images = 400, g_size = 48, g_seed = 1;
  std::string g_out;
  bool g_force = false;
  gen->add_option("--classes", g_classes, "number of classes (1..K of the catalog)")
      ->check(CLI::Range(1, 8));
  gen->add_option("--images", g_images, "number of images")->check(CLI::PositiveNumber);
  gen->add_option("--image-size", g_size, "square image size in pixels");
  gen->add_option("--seed", g_seed, "generator seed");
  gen->add_option("--out", g_out, "output directory")->required();
  gen->add_flag("--force", g_force, "overwrite an existing output directory");

  // train-base / increment / joint
  CommonTrainArgs tb_args, inc_args, joint_args;
  auto* tb = app.add_subcommand("train-base", "train the step-0 model");
  add_common_train_flags(tb, tb_args, false);
  auto* inc = app.add_subcommand("increment", "run one incremental step");
  add_common_train_flags(inc, inc_args, true);
  std::string inc_ckpt;
  int inc_step = 1;
  inc->add_option("--ckpt", inc_ckpt, "checkpoint or run directory to increment")
      ->required();
  inc->add_option("--step", inc_step, "scenario step index (>= 1)");
  auto* jt = app.add_subcommand("joint", "non-continual joint training");
  add_common_train_flags(jt, joint_args, false);

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "run inference and report mAP");
  std::string ev_ckpt, ev_data, ev_scenario = "3-1", ev_out, ev_branches, ev_compose;
  std::string ev_iou = "mask";
  double ev_score = -1;
  ev->add_option("--ckpt", ev_ckpt)->required();
  ev->add_option("--data", ev_data)->required();
  ev->add_option("--scenario", ev_scenario);
  ev->add_option("--out", ev_out)->required();
  ev->add_option("--branches", ev_branches, "comma-separated FE subset");
  ev->add_option("--compose", ev_compose, "fe:head recombination");
  ev->add_option("--score-thresh", ev_score);
  ev->add_option("--iou", ev_iou, "mask (default) or box");

  // average
  auto* av = app.add_subcommand("average", "checkpoint-average two heads");
  std::string av_a, av_b, av_weights = "0:1,0.25:0.75,0.5:0.5,0.75:0.25,1:0";
  std::string av_data, av_scenario = "3-1", av_out;
  int av_head_a = -1, av_head_b = -1;
  av->add_option("--ckpt-a", av_a, "first checkpoint (earlier head)")->required();
  av->add_option("--ckpt-b", av_b, "second checkpoint (later head)")->required();
  av->add_option("--head-a", av_head_a, "head step in ckpt-a (default latest)");
  av->add_option("--head-b", av_head_b, "head step in ckpt-b (default latest)");
  av->add_option("--weights", av_weights, "wi:wj pairs, comma separated");
  av->add_option("--data", av_data, "eval split for the sweep")->required();
  av->add_option("--scenario", av_scenario);
  av->add_option("--out", av_out)->required();

  // cka
  auto* ck = app.add_subcommand("cka", "per-class CKA between FE branches");
  std::string ck_ckpt, ck_data, ck_steps = "0,1", ck_out;
  ck->add_option("--ckpt", ck_ckpt)->required();
  ck->add_option("--data", ck_data)->required();
  ck->add_option("--steps", ck_steps, "two step indices, e.g. 0,1");
  ck->add_option("--out", ck_out)->required();

  // plot
  auto* pl = app.add_subcommand("plot", "emit SVG charts from CSV outputs");
  std::string pl_cka, pl_sweep, pl_report, pl_out;
  pl->add_option("--cka-csv", pl_cka);
  pl->add_option("--sweep-csv", pl_sweep);
  pl->add_option("--report-csv", pl_report);
  pl->add_option("--out", pl_out)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_generate(g_classes, g_images, g_size, g_seed, g_out, g_force);
    if (tb->parsed()) return cmd_train_base(tb_args);
    if (inc->parsed()) return cmd_increment(inc_args, inc_ckpt, inc_step);
    if (jt->parsed()) return cmd_joint(joint_args);
    if (ev->parsed()) {
      return cmd_evaluate(ev_ckpt, ev_data, ev_scenario, ev_out, ev_branches, ev_compose,
                          ev_score, ev_iou);
    }
    if (av->parsed()) {
      return cmd_average(av_a, av_b, av_head_a, av_head_b, av_weights, av_data,
                         av_scenario, av_out);
    }
    if (ck->parsed()) return cmd_cka(ck_ckpt, ck_data, ck_steps, ck_out);
    if (pl->parsed()) return cmd_plot(pl_cka, pl_sweep, pl_report, pl_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
