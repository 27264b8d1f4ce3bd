#include "hpd/commands.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <sstream>

#include "hpd/cam.hpp"
#include "hpd/dataset.hpp"
#include "hpd/engine.hpp"
#include "hpd/errors.hpp"
#include "hpd/evaluate.hpp"
#include "hpd/generator.hpp"
#include "hpd/objectives.hpp"
#include "hpd/runio.hpp"

namespace hpd::cli {

namespace fs = std::filesystem;
using io::json;

// ---- config plumbing ----

json default_config() {
  return json{
      {"dataset",
       {{"name", "synthdigits"},
        {"synth_train", 6000},
        {"synth_test", 1500},
        {"synth_img", 16},
        {"synth_seed", 7}}},
      {"generator",
       {{"epochs", 12},
        {"batch", 64},
        {"lr", 2e-4},
        {"beta1", 0.5},
        {"base_channels", 32},
        {"disc_base_channels", 32},
        {"blocks", 4},
        {"noise_dim", 64},
        {"w_dim", 32},
        {"embed_dim", 16},
        {"map_hidden", 128},
        {"max_train_images", 0},
        {"seed", 1},
        {"sanity_min_confidence", 0.6},
        {"sanity_samples_per_class", 10},
        {"sanity_required", true}}},
      {"extractor",
       {{"max_epochs", 30},
        {"batch", 128},
        {"lr", 1e-3},
        {"accuracy_floor", 0.85},
        {"width", 32},
        {"depth", 3},
        {"seed", 2},
        {"max_train_images", 0},
        {"eval_cap", 2000}}},
      {"trajectories",
       {{"count", 10},
        {"epochs", 15},
        {"stride", 1},
        {"lr", 1e-2},
        {"batch", 256},
        {"seed", 3},
        {"max_train_images", 0},
        {"probe_images", 512},
        {"width", 32},
        {"depth", 3}}},
      {"distill", engine::DistillConfig{}.to_json()},
      {"eval",
       {{"repeats", 5},
        {"epochs", 300},
        {"lr", 0.01},
        {"momentum", 0.9},
        {"weight_decay", 5e-4},
        {"cosine", true},
        {"batch", 256},
        {"augment", true},
        {"width", 32},
        {"depth", 3},
        {"test_cap", 0},
        {"archs", json::array({"convnet3"})},
        {"seed", 11}}},
      {"accuracy_selection", {{"epochs_frac", 0.3}, {"repeats", 1}}},
      {"compare",
       {{"objectives", json::array({"distribution-match"})},
        {"seeds", json::array({1, 2, 3})},
        {"fixed_space", 2},
        {"eval_repeats", 3},
        {"grid_steps", json::array()},
        {"grid_selections", json::array()}}}};
}

namespace {

void deep_merge(json& base, const json& overlay) {
  if (!overlay.is_object() || !base.is_object()) {
    base = overlay;
    return;
  }
  for (auto it = overlay.begin(); it != overlay.end(); ++it) {
    if (base.contains(it.key()))
      deep_merge(base[it.key()], it.value());
    else
      base[it.key()] = it.value();
  }
}

json parse_override_value(const std::string& raw) {
  try {
    return json::parse(raw);
  } catch (const json::exception&) {
    return json(raw);  // plain string
  }
}

void apply_override(json& cfg, const std::string& kv) {
  auto eq = kv.find('=');
  if (eq == std::string::npos)
    throw ConfigError("--set expects key=value, got: " + kv);
  std::string key = kv.substr(0, eq);
  std::string value = kv.substr(eq + 1);
  std::string ptr = "/" + key;
  for (auto& c : ptr)
    if (c == '.') c = '/';
  try {
    cfg[json::json_pointer(ptr)] = parse_override_value(value);
  } catch (const json::exception& e) {
    throw ConfigError("--set " + key + ": " + e.what());
  }
}

template <typename T>
T field(const json& cfg, const std::string& dotted) {
  std::string ptr = "/" + dotted;
  for (auto& c : ptr)
    if (c == '.') c = '/';
  try {
    return cfg.at(json::json_pointer(ptr)).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config field " + dotted + ": missing or wrong type");
  }
}

std::ostream& say(const CliArgs& a) {
  static std::ostringstream sink;
  if (a.quiet) {
    sink.str("");
    return sink;
  }
  return std::cout;
}

}  // namespace

json resolve_config(const CliArgs& args) {
  json cfg = default_config();
  if (!args.config_path.empty()) {
    json file = io::load_json(args.config_path);
    deep_merge(cfg, file);
  }
  for (const auto& kv : args.overrides) apply_override(cfg, kv);
  return cfg;
}

fs::path dataset_root(const fs::path& root) { return root / "datasets"; }
fs::path run_dir(const fs::path& root, const std::string& run_id) {
  return root / "runs" / run_id;
}

static fs::path registry_path(const fs::path& root) {
  return root / "checkpoints" / "registry.json";
}

void registry_put(const fs::path& root, const std::string& key,
                  const fs::path& file) {
  json reg = json::object();
  if (fs::exists(registry_path(root))) reg = io::load_json(registry_path(root));
  reg[key] = {{"path", file.string()}, {"hash", io::file_hash(file)}};
  io::save_json(registry_path(root), reg);
}

fs::path registry_resolve(const fs::path& root, const std::string& key) {
  if (!fs::exists(registry_path(root)))
    throw DataError("no checkpoint registry at " +
                    registry_path(root).string() +
                    "; run the corresponding train command first");
  json reg = io::load_json(registry_path(root));
  if (!reg.contains(key))
    throw DataError("checkpoint '" + key +
                    "' not registered; run the corresponding train command "
                    "(e.g. train-generator / train-extractor) first");
  fs::path p = reg[key].at("path").get<std::string>();
  if (!fs::exists(p))
    throw DataError("registered checkpoint missing on disk: " + p.string() +
                    "; re-run the train command or fix the registry");
  uint64_t want = reg[key].at("hash").get<uint64_t>();
  uint64_t got = io::file_hash(p);
  if (want != got)
    throw DataError("checkpoint hash mismatch for '" + key +
                    "': file changed since registration");
  return p;
}

// ---- shared loaders ----

namespace {

data::LabeledImageSet load_configured_dataset(const CliArgs& args,
                                              const json& cfg) {
  std::string name = field<std::string>(cfg, "dataset.name");
  return data::load_dataset(name, dataset_root(args.root));
}

gen::GeneratorStack load_generator(const CliArgs& args, const json& cfg) {
  std::string ds = field<std::string>(cfg, "dataset.name");
  return gen::GeneratorStack::load(
      registry_resolve(args.root, "generator_" + ds));
}

cam::FrozenClassifier load_classifier(const CliArgs& args, const json& cfg) {
  std::string ds = field<std::string>(cfg, "dataset.name");
  return cam::FrozenClassifier::load(
      registry_resolve(args.root, "classifier_" + ds));
}

engine::DistillConfig distill_config(const json& cfg) {
  return engine::DistillConfig::from_json(cfg.at("distill"));
}

eval::EvalTrainConfig eval_config(const json& cfg) {
  eval::EvalTrainConfig e;
  e.epochs = field<int>(cfg, "eval.epochs");
  e.lr = field<double>(cfg, "eval.lr");
  e.momentum = field<double>(cfg, "eval.momentum");
  e.weight_decay = field<double>(cfg, "eval.weight_decay");
  e.cosine = field<bool>(cfg, "eval.cosine");
  e.batch = field<int>(cfg, "eval.batch");
  e.augment = field<bool>(cfg, "eval.augment");
  e.width = field<int>(cfg, "eval.width");
  e.depth = field<int>(cfg, "eval.depth");
  e.test_cap = field<int>(cfg, "eval.test_cap");
  if (e.epochs < 1 || e.batch < 1)
    throw ConfigError("eval.epochs/eval.batch: must be >= 1");
  return e;
}

struct LoadedSet {
  Tensor images;
  std::vector<int> labels;
};

LoadedSet load_best_set(const fs::path& rd) {
  fs::path p = rd / "best_set.bin";
  if (!fs::exists(p))
    throw DataError("no synthetic set at " + p.string() +
                    "; run distill for this run id first");
  auto ckpt = io::read_checkpoint(p);
  return {ckpt.params.at(0),
          ckpt.header.at("labels").get<std::vector<int>>()};
}

engine::AccuracyFn make_reduced_accuracy_fn(
    const json& cfg, const data::LabeledImageSet& dataset, uint64_t seed) {
  eval::EvalTrainConfig e = eval_config(cfg);
  double frac = field<double>(cfg, "accuracy_selection.epochs_frac");
  int repeats = field<int>(cfg, "accuracy_selection.repeats");
  e.epochs = std::max(1, int(std::lround(e.epochs * frac)));
  e.test_cap = e.test_cap > 0 ? std::min(e.test_cap, 1000) : 1000;
  return [&dataset, e, repeats, seed](const Tensor& images,
                                      std::span<const int> labels) {
    auto stats = eval::evaluate_synthetic(images, labels, nn::ArchId::ConvNet,
                                          repeats, e, dataset, seed);
    return stats.mean;
  };
}

}  // namespace

// ---- commands ----

void cmd_prepare_data(const CliArgs& args) {
  json cfg = resolve_config(args);
  std::string name = field<std::string>(cfg, "dataset.name");
  fs::path droot = dataset_root(args.root);
  if (name == "synthdigits") {
    fs::path marker = droot / "synthdigits" / "train-images-idx3-ubyte";
    if (!fs::exists(marker) || args.force) {
      data::synthesize_digits(droot, field<int>(cfg, "dataset.synth_train"),
                              field<int>(cfg, "dataset.synth_test"),
                              field<uint64_t>(cfg, "dataset.synth_seed"),
                              field<int>(cfg, "dataset.synth_img"));
      say(args) << "synthesized corpus under " << (droot / name).string()
                << "\n";
    }
  }
  auto set = data::load_dataset(name, droot);
  say(args) << "dataset " << name << ": " << set.train_count() << " train / "
            << set.test_count() << " test, " << set.channels << "x"
            << set.height << "x" << set.width << ", manifest verified\n";
}

void cmd_train_generator(const CliArgs& args) {
  json cfg = resolve_config(args);
  auto set = load_configured_dataset(args, cfg);
  fs::path out = args.root / "checkpoints" / ("generator_" + set.name + ".bin");
  if (fs::exists(out) && !args.force) {
    say(args) << "generator checkpoint exists (" << out.string()
              << "); use --force to retrain\n";
    registry_put(args.root, "generator_" + set.name, out);
    return;
  }
  gen::GeneratorArch arch;
  arch.base_channels = field<int>(cfg, "generator.base_channels");
  arch.blocks = field<int>(cfg, "generator.blocks");
  arch.noise_dim = field<int>(cfg, "generator.noise_dim");
  arch.w_dim = field<int>(cfg, "generator.w_dim");
  arch.embed_dim = field<int>(cfg, "generator.embed_dim");
  arch.map_hidden = field<int>(cfg, "generator.map_hidden");
  gen::GanTrainConfig tc;
  tc.epochs = field<int>(cfg, "generator.epochs");
  tc.batch = field<int>(cfg, "generator.batch");
  tc.lr = field<double>(cfg, "generator.lr");
  tc.beta1 = field<double>(cfg, "generator.beta1");
  tc.max_train_images = field<int>(cfg, "generator.max_train_images");
  tc.seed = field<uint64_t>(cfg, "generator.seed");
  tc.disc_base_channels = field<int>(cfg, "generator.disc_base_channels");
  tc.sanity_min_confidence =
      field<double>(cfg, "generator.sanity_min_confidence");
  tc.sanity_samples_per_class =
      field<int>(cfg, "generator.sanity_samples_per_class");
  tc.sanity_required = field<bool>(cfg, "generator.sanity_required");
  tc.abort_checkpoint = out.string() + ".aborted";

  std::function<Tensor(const Tensor&)> clf_logits;
  cam::FrozenClassifier clf;
  try {
    clf = load_classifier(args, cfg);
    clf_logits = [&clf](const Tensor& x) { return clf.logits(x); };
  } catch (const DataError&) {
    say(args) << "note: no classifier registered; generator sanity gate "
                 "skipped\n";
  }

  gen::GanTrainReport report;
  auto stack = gen::train_generator(set, arch, tc, clf_logits, &report);
  stack.save(out, json{{"dataset", set.name},
                       {"epochs", report.epochs_run},
                       {"seed", tc.seed},
                       {"sanity_confidence", report.sanity_confidence},
                       {"final_d_loss", report.final_d_loss},
                       {"final_g_loss", report.final_g_loss}});
  registry_put(args.root, "generator_" + set.name, out);
  say(args) << "generator trained (" << report.epochs_run << " epochs"
            << (report.sanity_confidence >= 0
                    ? ", sanity confidence " +
                          std::to_string(report.sanity_confidence)
                    : "")
            << ") -> " << out.string() << "\n";
}

void cmd_train_extractor(const CliArgs& args) {
  json cfg = resolve_config(args);
  auto set = load_configured_dataset(args, cfg);
  fs::path out =
      args.root / "checkpoints" / ("classifier_" + set.name + ".bin");
  if (fs::exists(out) && !args.force) {
    say(args) << "classifier checkpoint exists (" << out.string()
              << "); use --force to retrain\n";
    registry_put(args.root, "classifier_" + set.name, out);
    return;
  }
  cam::ExtractorTrainConfig tc;
  tc.max_epochs = field<int>(cfg, "extractor.max_epochs");
  tc.batch = field<int>(cfg, "extractor.batch");
  tc.lr = field<double>(cfg, "extractor.lr");
  tc.accuracy_floor = field<double>(cfg, "extractor.accuracy_floor");
  tc.width = field<int>(cfg, "extractor.width");
  tc.depth = field<int>(cfg, "extractor.depth");
  tc.seed = field<uint64_t>(cfg, "extractor.seed");
  tc.max_train_images = field<int>(cfg, "extractor.max_train_images");
  tc.eval_cap = field<int>(cfg, "extractor.eval_cap");
  double acc = 0.0;
  auto clf = cam::train_extractor(set, tc, &acc);
  clf.save(out);
  registry_put(args.root, "classifier_" + set.name, out);
  say(args) << "classifier trained, test accuracy " << acc << " -> "
            << out.string() << "\n";
}

void cmd_record_trajectories(const CliArgs& args) {
  json cfg = resolve_config(args);
  auto set = load_configured_dataset(args, cfg);
  fs::path store = args.root / "trajectories" / set.name;
  if (fs::exists(store / "index.json") && !args.force) {
    say(args) << "trajectory store exists (" << store.string()
              << "); use --force to re-record\n";
    return;
  }
  obj::TrajectoryRecordConfig tc;
  tc.count = field<int>(cfg, "trajectories.count");
  tc.epochs = field<int>(cfg, "trajectories.epochs");
  tc.snapshot_stride = field<int>(cfg, "trajectories.stride");
  tc.lr = field<double>(cfg, "trajectories.lr");
  tc.batch = field<int>(cfg, "trajectories.batch");
  tc.seed = field<uint64_t>(cfg, "trajectories.seed");
  tc.max_train_images = field<int>(cfg, "trajectories.max_train_images");
  tc.probe_images = field<int>(cfg, "trajectories.probe_images");
  nn::ModelSpec spec{nn::ArchId::ConvNet,
                     set.channels,
                     set.height,
                     set.width,
                     set.classes,
                     field<int>(cfg, "trajectories.width"),
                     field<int>(cfg, "trajectories.depth")};
  auto trajs = obj::record_expert_trajectories(set, spec, tc, store);
  say(args) << "recorded " << trajs.size() << " trajectories x "
            << (trajs.empty() ? 0 : trajs[0].snapshots.size())
            << " snapshots -> " << store.string() << "\n";
}

namespace {

struct DistillParts {
  data::LabeledImageSet dataset;
  gen::GeneratorStack stack;
  std::unique_ptr<obj::MatchingObjective> objective;
  std::optional<cam::FrozenClassifier> classifier;
  std::unique_ptr<engine::ClassRelevantScorer> scorer;
};

DistillParts assemble(const CliArgs& args, const json& cfg,
                      const engine::DistillConfig& dc) {
  DistillParts parts{load_configured_dataset(args, cfg), {}, nullptr, {},
                     nullptr};
  parts.stack = load_generator(args, cfg);

  std::vector<obj::ExpertTrajectory> trajs;
  if (dc.objective_cfg.kind == obj::ObjectiveKind::TrajectoryMatch) {
    fs::path store = args.root / "trajectories" / parts.dataset.name;
    if (!fs::exists(store / "index.json"))
      throw DataError("no trajectory store at " + store.string() +
                      "; run record-trajectories first");
    trajs = obj::load_trajectory_store(store);
  }
  parts.objective =
      obj::make_objective(dc.objective_cfg, parts.dataset, std::move(trajs));

  engine::SelectionMode mode = engine::selection_from_string(dc.selection);
  bool needs_metric = mode == engine::SelectionMode::Distance ||
                      dc.snapshot_every > 0;
  if (needs_metric) {
    parts.classifier = load_classifier(args, cfg);
    parts.scorer = std::make_unique<engine::ClassRelevantScorer>(
        engine::make_class_relevant_scorer(
            *parts.classifier, parts.dataset, dc.metric_real_per_class,
            dc.distance_mode == "pooled" ? cam::DistanceMode::Pooled
                                         : cam::DistanceMode::PerClassSum,
            dc.seed ^ 0xCACE));
  }
  return parts;
}

}  // namespace

void cmd_distill(const CliArgs& args) {
  if (args.run_id.empty()) throw ConfigError("distill: --run <id> is required");
  json cfg = resolve_config(args);
  engine::DistillConfig dc = distill_config(cfg);
  fs::path rd = run_dir(args.root, args.run_id);

  if (fs::exists(rd / "manifest.json")) {
    json manifest = io::load_json(rd / "manifest.json");
    if (manifest.value("config_hash", uint64_t(0)) !=
        runio::config_hash(dc.to_json()))
      throw ConfigError("run " + args.run_id +
                        " exists with a different config; choose a new run id");
    if (fs::exists(rd / "best_set.bin") && !args.force) {
      say(args) << "run " << args.run_id << " already complete; no-op\n";
      return;
    }
  }

  runio::LockFile lock(rd);
  DistillParts parts = assemble(args, cfg, dc);

  json manifest = runio::make_manifest(args.run_id, args.command, dc.to_json());
  std::string ds = parts.dataset.name;
  manifest["dataset"] = ds;
  manifest["checkpoints"]["generator"] = {
      {"path", registry_resolve(args.root, "generator_" + ds).string()}};
  if (parts.classifier)
    manifest["checkpoints"]["classifier"] = {
        {"path", registry_resolve(args.root, "classifier_" + ds).string()}};
  io::save_json(rd / "manifest.json", manifest);

  engine::AccuracyFn acc_fn;
  if (engine::selection_from_string(dc.selection) ==
      engine::SelectionMode::Accuracy)
    acc_fn = make_reduced_accuracy_fn(cfg, parts.dataset, dc.seed ^ 0xACC);

  engine::DistillRun run;
  if (args.fixed_space >= 0) {
    run = engine::fixed_space_baseline(dc, parts.stack, *parts.objective,
                                       parts.scorer.get(), args.fixed_space,
                                       rd);
  } else {
    run = engine::distill(dc, parts.stack, *parts.objective,
                          parts.scorer.get(), rd, acc_fn);
  }
  say(args) << "distill " << args.run_id << ": " << run.total_steps
            << " steps over " << run.spaces.size() << " space(s), best set "
            << "from space " << run.global_space << " ("
            << run.wall_ms / 1000.0 << " s)\n";
}

void cmd_evaluate(const CliArgs& args) {
  if (args.run_id.empty())
    throw ConfigError("evaluate: --run <id> is required");
  json cfg = resolve_config(args);
  auto set = load_configured_dataset(args, cfg);
  eval::EvalTrainConfig ec = eval_config(cfg);
  int repeats = field<int>(cfg, "eval.repeats");
  uint64_t seed = field<uint64_t>(cfg, "eval.seed");
  fs::path rd = run_dir(args.root, args.run_id);
  runio::MetricsLog results(rd / "results.ndjson");

  if (args.target == "snapshots") {
    fs::path snap_dir = rd / "snapshots";
    if (!fs::exists(snap_dir))
      throw DataError("no snapshots directory in run " + args.run_id +
                      "; re-run distill with distill.snapshot_every > 0");
    // reduced budget for the many snapshot evaluations
    eval::EvalTrainConfig rc = ec;
    rc.epochs = std::max(1, ec.epochs / 3);
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(snap_dir))
      if (e.path().extension() == ".bin") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    LoadedSet best = load_best_set(rd);
    for (const auto& f : files) {
      auto ckpt = io::read_checkpoint(f);
      auto stats = eval::evaluate_synthetic(ckpt.params.at(0), best.labels,
                                            nn::ArchId::ConvNet, 1, rc, set,
                                            seed);
      results.append(json{{"kind", "snapshot_accuracy"},
                          {"space", ckpt.header.at("space")},
                          {"step", ckpt.header.at("step")},
                          {"loss", ckpt.header.at("loss")},
                          {"distance", ckpt.header.at("distance")},
                          {"accuracy", stats.mean}});
      say(args) << f.filename().string() << ": acc " << stats.mean << "\n";
    }
    return;
  }

  Tensor images;
  std::vector<int> labels;
  if (args.target == "coreset") {
    engine::DistillConfig dc = distill_config(cfg);
    Rng rng(seed ^ 0xC07E5E7ull);
    images = eval::random_real_coreset(set, dc.ipc, rng, &labels);
  } else if (args.target == "distilled") {
    LoadedSet best = load_best_set(rd);
    images = best.images;
    labels = best.labels;
  } else {
    throw ConfigError("evaluate: unknown target '" + args.target +
                      "' (distilled | coreset | snapshots)");
  }

  std::vector<nn::ArchId> archs;
  for (const auto& a : cfg.at("eval").at("archs"))
    archs.push_back(nn::arch_from_string(a.get<std::string>()));
  auto table =
      eval::cross_architecture_eval(images, labels, archs, repeats, ec, set,
                                    seed);
  for (const auto& stats : table) {
    json rec = stats.to_json();
    rec["kind"] = "accuracy";
    rec["target"] = args.target;
    results.append(rec);
    say(args) << stats.arch << ": " << stats.mean * 100.0 << " +- "
              << stats.stddev * 100.0 << " (" << repeats << " repeats)\n";
  }
  if (archs.size() > 1) {
    double xmean = eval::cross_arch_mean_excluding(table, archs.front());
    results.append(json{{"kind", "cross_arch_mean"},
                        {"target", args.target},
                        {"excluding", nn::arch_to_string(archs.front())},
                        {"mean", xmean}});
    say(args) << "cross-arch mean (excluding " << nn::arch_to_string(archs[0])
              << "): " << xmean * 100.0 << "\n";
  }
}

namespace {

struct ArmResult {
  std::string objective;
  std::string arm;
  uint64_t seed;
  double accuracy;
};

double eval_convnet_mean(const json& cfg, const Tensor& images,
                         const std::vector<int>& labels,
                         const data::LabeledImageSet& set, int repeats,
                         uint64_t seed) {
  eval::EvalTrainConfig ec = eval_config(cfg);
  auto stats = eval::evaluate_synthetic(images, labels, nn::ArchId::ConvNet,
                                        repeats, ec, set, seed);
  return stats.mean;
}

}  // namespace

void cmd_compare(const CliArgs& args) {
  if (args.run_id.empty()) throw ConfigError("compare: --run <id> is required");
  json cfg = resolve_config(args);
  engine::DistillConfig dc = distill_config(cfg);
  fs::path rd = run_dir(args.root, args.run_id);
  runio::LockFile lock(rd);
  io::save_json(rd / "manifest.json",
                runio::make_manifest(args.run_id, "compare", dc.to_json()));

  std::vector<std::string> objectives;
  for (const auto& o : cfg.at("compare").at("objectives"))
    objectives.push_back(o.get<std::string>());
  std::vector<uint64_t> seeds;
  for (const auto& s : cfg.at("compare").at("seeds"))
    seeds.push_back(s.get<uint64_t>());
  int fixed_space = field<int>(cfg, "compare.fixed_space");
  int eval_repeats = field<int>(cfg, "compare.eval_repeats");

  auto grid_steps = cfg.at("compare").at("grid_steps");
  auto grid_selections = cfg.at("compare").at("grid_selections");
  bool grid_mode = !grid_steps.empty() && !grid_selections.empty();

  json out = {{"run_id", args.run_id},
              {"mode", grid_mode ? "grid" : "arms"},
              {"cells", json::array()}};
  std::ostringstream table;

  if (grid_mode) {
    // ablation harness: steps-per-space x selection grid of progressive runs
    table << "steps  selection  mean_acc  std\n";
    for (const auto& st : grid_steps) {
      for (const auto& sel : grid_selections) {
        engine::DistillConfig cell = dc;
        cell.steps_per_space = st.get<int>();
        cell.selection = sel.get<std::string>();
        std::vector<double> accs;
        for (uint64_t seed : seeds) {
          cell.seed = seed;
          DistillParts parts = assemble(args, cfg, cell);
          std::string sub = "grid_n" + std::to_string(cell.steps_per_space) +
                            "_" + cell.selection + "_s" + std::to_string(seed);
          auto run = engine::distill(cell, parts.stack, *parts.objective,
                                     parts.scorer.get(), rd / sub, {});
          accs.push_back(eval_convnet_mean(cfg, run.global_images, run.labels,
                                           parts.dataset, eval_repeats, seed));
        }
        auto stats = eval::AccuracyStats::from_repeats("convnet3", accs, 0);
        out["cells"].push_back(json{{"steps", cell.steps_per_space},
                                    {"selection", cell.selection},
                                    {"mean", stats.mean},
                                    {"std", stats.stddev},
                                    {"per_seed", stats.per_repeat}});
        table << cell.steps_per_space << "  " << cell.selection << "  "
              << stats.mean * 100.0 << "  " << stats.stddev * 100.0 << "\n";
        say(args) << "grid cell steps=" << cell.steps_per_space
                  << " selection=" << cell.selection << ": "
                  << stats.mean * 100.0 << " +- " << stats.stddev * 100.0
                  << "\n";
      }
    }
  } else {
    table << "objective  arm  mean_acc  std\n";
    for (const auto& objective : objectives) {
      engine::DistillConfig oc = dc;
      oc.objective = objective;
      oc.objective_cfg.kind = obj::objective_from_string(objective);
      struct Arm {
        std::string name;
        int fixed;  // -1: progressive
      };
      std::vector<Arm> arms = {{"pixel-fixed", -2},
                               {"gan-fixed", fixed_space},
                               {"h-pd", -1}};
      for (const auto& arm : arms) {
        std::vector<double> accs;
        for (uint64_t seed : seeds) {
          engine::DistillConfig cell = oc;
          cell.seed = seed;
          DistillParts parts = assemble(args, cfg, cell);
          int fixed = arm.fixed == -2 ? parts.stack.block_count() : arm.fixed;
          std::string sub =
              objective + "_" + arm.name + "_s" + std::to_string(seed);
          engine::DistillRun run;
          if (arm.fixed == -1) {
            run = engine::distill(cell, parts.stack, *parts.objective,
                                  parts.scorer.get(), rd / sub, {});
          } else {
            run = engine::fixed_space_baseline(cell, parts.stack,
                                               *parts.objective,
                                               parts.scorer.get(), fixed,
                                               rd / sub);
          }
          accs.push_back(eval_convnet_mean(cfg, run.global_images, run.labels,
                                           parts.dataset, eval_repeats, seed));
        }
        auto stats = eval::AccuracyStats::from_repeats("convnet3", accs, 0);
        out["cells"].push_back(json{{"objective", objective},
                                    {"arm", arm.name},
                                    {"mean", stats.mean},
                                    {"std", stats.stddev},
                                    {"per_seed", stats.per_repeat}});
        table << objective << "  " << arm.name << "  " << stats.mean * 100.0
              << "  " << stats.stddev * 100.0 << "\n";
        say(args) << objective << " / " << arm.name << ": "
                  << stats.mean * 100.0 << " +- " << stats.stddev * 100.0
                  << "\n";
      }
    }
  }

  io::save_json(rd / "compare.json", out);
  {
    std::ofstream os(rd / "compare.txt");
    os << table.str();
  }
  {
    std::ofstream os(rd / "compare.csv");
    os << (grid_mode ? "steps,selection,mean,std\n"
                     : "objective,arm,mean,std\n");
    for (const auto& c : out["cells"]) {
      if (grid_mode)
        os << c["steps"] << "," << c["selection"].get<std::string>();
      else
        os << c["objective"].get<std::string>() << ","
           << c["arm"].get<std::string>();
      os << "," << c["mean"] << "," << c["std"] << "\n";
    }
  }
  say(args) << "compare results -> " << (rd / "compare.json").string() << "\n";
}

// ---- report ----

namespace {

// minimal grayscale plot renderer (polyline / scatter) for the report command
struct Plot {
  int w = 480, h = 320;
  std::vector<uint8_t> px;
  Plot() : px(size_t(w) * h, 255) {
    for (int i = 0; i < h; ++i) {
      set(i, 0, 0);
      set(i, w - 1, 0);
    }
    for (int j = 0; j < w; ++j) {
      set(0, j, 0);
      set(h - 1, j, 0);
    }
  }
  void set(int i, int j, uint8_t v) {
    if (i >= 0 && i < h && j >= 0 && j < w) px[size_t(i) * w + j] = v;
  }
  void dot(double x01, double y01, int r = 2, uint8_t v = 0) {
    int cx = 10 + int(x01 * (w - 21));
    int cy = h - 11 - int(y01 * (h - 21));
    for (int di = -r; di <= r; ++di)
      for (int dj = -r; dj <= r; ++dj)
        if (di * di + dj * dj <= r * r) set(cy + di, cx + dj, v);
  }
  void polyline(const std::vector<double>& ys01, uint8_t v = 0) {
    if (ys01.size() < 2) return;
    for (size_t k = 0; k + 1 < ys01.size(); ++k) {
      double x0 = double(k) / double(ys01.size() - 1);
      double x1 = double(k + 1) / double(ys01.size() - 1);
      for (int t = 0; t <= 32; ++t) {
        double a = t / 32.0;
        dot(x0 + a * (x1 - x0), ys01[k] + a * (ys01[k + 1] - ys01[k]), 0, v);
      }
    }
  }
  void save(const fs::path& p) const {
    std::ofstream os(p, std::ios::binary);
    os << "P5\n" << w << " " << h << "\n255\n";
    os.write(reinterpret_cast<const char*>(px.data()),
             std::streamsize(px.size()));
  }
};

std::vector<double> norm01_or_flat(std::vector<double> v) {
  double lo = *std::min_element(v.begin(), v.end());
  double hi = *std::max_element(v.begin(), v.end());
  for (auto& x : v) x = hi == lo ? 0.5 : (x - lo) / (hi - lo);
  return v;
}

}  // namespace

void cmd_report(const CliArgs& args) {
  if (args.run_id.empty()) throw ConfigError("report: --run <id> is required");
  fs::path rd = run_dir(args.root, args.run_id);
  if (!fs::exists(rd / "metrics.ndjson"))
    throw DataError("no metrics log in run " + args.run_id);
  auto records = runio::MetricsLog::read_all(rd / "metrics.ndjson");

  std::vector<double> losses, distances;
  json spaces = json::array();
  for (const auto& r : records) {
    std::string kind = r.value("kind", "");
    if (kind == "step") {
      losses.push_back(r.at("loss").get<double>());
      if (!r.at("distance").is_null() &&
          std::isfinite(r.at("distance").get<double>()))
        distances.push_back(r.at("distance").get<double>());
    } else if (kind == "space_done") {
      spaces.push_back(r);
    }
  }

  json summary = {{"run_id", args.run_id},
                  {"steps_logged", losses.size()},
                  {"spaces", spaces}};

  fs::create_directories(rd / "report");
  if (!losses.empty()) {
    Plot p;
    p.polyline(norm01_or_flat(losses), 0);
    p.save(rd / "report" / "loss_curve.pgm");
  }
  if (!distances.empty()) {
    Plot p;
    p.polyline(norm01_or_flat(distances), 0);
    p.save(rd / "report" / "distance_curve.pgm");
  }

  // searching-basis scatter needs measured accuracies
  std::vector<eval::CorrCheckpoint> checkpoints;
  if (fs::exists(rd / "results.ndjson")) {
    for (const auto& r : runio::MetricsLog::read_all(rd / "results.ndjson"))
      if (r.value("kind", "") == "snapshot_accuracy" &&
          !r.at("distance").is_null())
        checkpoints.push_back({r.at("distance").get<double>(),
                               r.at("loss").get<double>(),
                               r.at("accuracy").get<double>()});
  }
  if (checkpoints.size() >= 5) {
    auto rep = eval::correlation_report(checkpoints);
    summary["searching_basis"] = {
        {"checkpoints", checkpoints.size()},
        {"rho_distance_accuracy",
         rep.rho_distance_defined ? json(rep.rho_distance_acc) : json(nullptr)},
        {"rho_loss_accuracy",
         rep.rho_loss_defined ? json(rep.rho_loss_acc) : json(nullptr)}};
    Plot p;
    for (size_t i = 0; i < rep.norm_distance.size(); ++i)
      p.dot(rep.norm_distance[i], rep.norm_accuracy[i], 2, 0);
    for (size_t i = 0; i < rep.norm_loss.size(); ++i)
      p.dot(rep.norm_loss[i], rep.norm_accuracy[i], 1, 128);
    p.save(rd / "report" / "searching_basis.pgm");
    say(args) << "searching-basis: rho(distance,acc)="
              << (rep.rho_distance_defined
                      ? std::to_string(rep.rho_distance_acc)
                      : "undefined")
              << " rho(loss,acc)="
              << (rep.rho_loss_defined ? std::to_string(rep.rho_loss_acc)
                                       : "undefined")
              << "\n";
  } else {
    say(args) << "notice: no accuracy records for this run; correlation plot "
                 "skipped (evaluate --target snapshots to add them)\n";
  }

  io::save_json(rd / "report" / "summary.json", summary);
  {
    std::ofstream os(rd / "report" / "summary.txt");
    os << "run " << args.run_id << "\n"
       << "steps logged: " << losses.size() << "\n";
    for (const auto& s : spaces)
      os << "space " << s.value("space", -1) << " boundary "
         << s.value("boundary", -1) << " best_step " << s.value("best_step", -1)
         << " best_distance " << s.value("best_distance", 0.0) << " wall_ms "
         << s.value("wall_ms", 0.0) << "\n";
  }
  say(args) << "report -> " << (rd / "report").string() << "\n";
}

int run_command(const CliArgs& args) {
  try {
    if (args.command == "prepare-data") cmd_prepare_data(args);
    else if (args.command == "train-generator") cmd_train_generator(args);
    else if (args.command == "train-extractor") cmd_train_extractor(args);
    else if (args.command == "record-trajectories")
      cmd_record_trajectories(args);
    else if (args.command == "distill") cmd_distill(args);
    else if (args.command == "evaluate") cmd_evaluate(args);
    else if (args.command == "compare") cmd_compare(args);
    else if (args.command == "report") cmd_report(args);
    else throw ConfigError("unknown command: " + args.command);
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace hpd::cli
