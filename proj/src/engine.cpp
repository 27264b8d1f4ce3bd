#include "hpd/engine.hpp"

#include <chrono>
#include <cmath>

#include "hpd/errors.hpp"

namespace hpd::engine {

namespace fs = std::filesystem;
using io::json;

SelectionMode selection_from_string(const std::string& s) {
  if (s == "none") return SelectionMode::None;
  if (s == "distance") return SelectionMode::Distance;
  if (s == "accuracy") return SelectionMode::Accuracy;
  throw ConfigError("unknown selection mode: " + s);
}

std::string selection_to_string(SelectionMode m) {
  switch (m) {
    case SelectionMode::None: return "none";
    case SelectionMode::Distance: return "distance";
    case SelectionMode::Accuracy: return "accuracy";
  }
  return "?";
}

json DistillConfig::to_json() const {
  return json{{"objective", objective},
              {"ipc", ipc},
              {"blocks_per_space", blocks_per_space},
              {"include_pixel_space", include_pixel_space},
              {"steps_per_space", steps_per_space},
              {"lr_w", lr_w},
              {"lr_f", lr_f},
              {"momentum", momentum},
              {"weight_decay", weight_decay},
              {"n_noise", n_noise},
              {"average_init", average_init},
              {"selection", selection},
              {"metric_real_per_class", metric_real_per_class},
              {"distance_mode", distance_mode},
              {"snapshot_every", snapshot_every},
              {"seed", seed},
              {"proxy_width", objective_cfg.proxy_width},
              {"proxy_depth", objective_cfg.proxy_depth},
              {"real_batch_per_class", objective_cfg.real_batch_per_class},
              {"layer_agg",
               objective_cfg.layer_agg == obj::LayerAgg::Mean ? "mean" : "sum"},
              {"student_steps", objective_cfg.student_steps},
              {"expert_horizon", objective_cfg.expert_horizon},
              {"student_lr", objective_cfg.student_lr}};
}

DistillConfig DistillConfig::from_json(const json& j) {
  DistillConfig c;
  auto get = [&](const char* key, auto& field) {
    using T = std::decay_t<decltype(field)>;
    if (j.contains(key)) {
      try {
        field = j.at(key).get<T>();
      } catch (const json::exception&) {
        throw ConfigError(std::string("distill.") + key +
                          ": wrong type in config");
      }
    }
  };
  get("objective", c.objective);
  get("ipc", c.ipc);
  get("blocks_per_space", c.blocks_per_space);
  get("include_pixel_space", c.include_pixel_space);
  get("steps_per_space", c.steps_per_space);
  get("lr_w", c.lr_w);
  get("lr_f", c.lr_f);
  get("momentum", c.momentum);
  get("weight_decay", c.weight_decay);
  get("n_noise", c.n_noise);
  get("average_init", c.average_init);
  get("selection", c.selection);
  get("metric_real_per_class", c.metric_real_per_class);
  get("distance_mode", c.distance_mode);
  get("snapshot_every", c.snapshot_every);
  get("seed", c.seed);
  get("proxy_width", c.objective_cfg.proxy_width);
  get("proxy_depth", c.objective_cfg.proxy_depth);
  get("real_batch_per_class", c.objective_cfg.real_batch_per_class);
  get("student_steps", c.objective_cfg.student_steps);
  get("expert_horizon", c.objective_cfg.expert_horizon);
  get("student_lr", c.objective_cfg.student_lr);
  if (j.contains("layer_agg")) {
    std::string agg = j.at("layer_agg");
    if (agg == "mean")
      c.objective_cfg.layer_agg = obj::LayerAgg::Mean;
    else if (agg == "sum")
      c.objective_cfg.layer_agg = obj::LayerAgg::Sum;
    else
      throw ConfigError("distill.layer_agg: must be mean or sum");
  }
  c.objective_cfg.kind = obj::objective_from_string(c.objective);
  c.validate();
  return c;
}

void DistillConfig::validate() const {
  if (steps_per_space < 1)
    throw ConfigError("distill.steps_per_space: must be >= 1");
  if (ipc < 1) throw ConfigError("distill.ipc: must be >= 1");
  if (lr_w <= 0.0) throw ConfigError("distill.lr_w: must be > 0");
  if (lr_f <= 0.0) throw ConfigError("distill.lr_f: must be > 0");
  if (n_noise < 1) throw ConfigError("distill.n_noise: must be >= 1");
  if (blocks_per_space < 1)
    throw ConfigError("distill.blocks_per_space: must be >= 1");
  selection_from_string(selection);
  obj::objective_from_string(objective);
  if (distance_mode != "per-class-sum" && distance_mode != "pooled")
    throw ConfigError("distill.distance_mode: per-class-sum or pooled");
}

ClassRelevantScorer make_class_relevant_scorer(
    const cam::FrozenClassifier& clf, const data::LabeledImageSet& dataset,
    int real_per_class, cam::DistanceMode mode, uint64_t seed) {
  Rng rng(seed);
  std::vector<Tensor> per_class;
  for (int c = 0; c < dataset.classes; ++c) {
    int n = std::min<int>(real_per_class,
                          int(dataset.train_by_class[size_t(c)].size()));
    per_class.push_back(data::sample_class_batch(dataset, c, n, rng));
  }
  return ClassRelevantScorer(clf, cam::build_real_cache(clf, per_class), mode);
}

namespace {

uint64_t mix_seed(uint64_t seed, uint64_t tag) {
  uint64_t h = seed ^ (tag * 0x9e3779b97f4a7c15ull);
  h ^= h >> 30;
  h *= 0xbf58476d1ce4e5b9ull;
  h ^= h >> 27;
  h *= 0x94d049bb133111ebull;
  h ^= h >> 31;
  return h;
}

double now_ms() {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

gen::LatentState clone_state(const gen::LatentState& s, bool requires_grad) {
  return {s.layer_index, s.values.detach(requires_grad), s.labels, s.kind};
}

}  // namespace

SpaceResult optimize_in_space(const gen::GeneratorStack& stack,
                              const gen::LatentState& init,
                              obj::MatchingObjective& objective,
                              CandidateScorer* scorer, int steps, double lr,
                              double momentum, double weight_decay, Rng& rng,
                              runio::MetricsLog* log, int ordinal,
                              const SnapshotSink& snapshot,
                              int snapshot_every) {
  if (steps < 1) throw ConfigError("optimize_in_space: steps must be >= 1");
  if (init.layer_index < 0 || init.layer_index > stack.block_count())
    throw ConfigError("optimize_in_space: latent boundary out of range");

  double t0 = now_ms();
  SpaceResult res;
  res.ordinal = ordinal;
  res.boundary = init.layer_index;
  res.lr_used = lr;

  gen::LatentState state = clone_state(init, true);
  std::vector<double> velocity(state.values.numel(), 0.0);

  double d_min = std::numeric_limits<double>::infinity();
  bool lr_halved = false;

  for (int j = 0; j < steps; ++j) {
    Tensor images = stack.partial_forward(state);
    Tensor loss = objective.loss(images, state.labels, rng);
    auto g = grad(loss, {state.values});

    Tensor decoded = images.detach();
    double dist = std::numeric_limits<double>::quiet_NaN();
    if (scorer) {
      dist = scorer->distance(decoded, state.labels);
      if (j == 0) d_min = dist;  // line 5: d_min from the space's first latent
      if (dist <= d_min) {
        d_min = dist;
        res.best_latent = clone_state(state, false);
        res.best_images = decoded;
        res.best_distance = dist;
        res.best_step = j;
      }
    }
    res.history.push_back({j, loss.item(), dist});
    if (log)
      log->append(json{{"kind", "step"},
                       {"space", ordinal},
                       {"boundary", res.boundary},
                       {"step", j},
                       {"loss", loss.item()},
                       {"distance", dist}});
    if (snapshot && snapshot_every > 0 && j % snapshot_every == 0)
      snapshot(ordinal, j, decoded, loss.item(), dist);

    // SGD with momentum and decoupled rollback on NaN
    std::vector<double> prev(state.values.data().begin(),
                             state.values.data().end());
    std::vector<double> prev_vel = velocity;
    auto vals = state.values.mutable_data();
    auto gd = g[0].data();
    for (size_t i = 0; i < vals.size(); ++i) {
      double gv = gd[i] + weight_decay * vals[i];
      velocity[i] = momentum * velocity[i] + gv;
      vals[i] -= lr * velocity[i];
    }
    if (!all_finite(state.values)) {
      std::copy(prev.begin(), prev.end(), vals.begin());
      velocity = prev_vel;
      if (lr_halved) {
        res.aborted = true;
        if (log)
          log->append(json{{"kind", "abort"},
                           {"space", ordinal},
                           {"step", j},
                           {"reason", "nan latent after lr halving"}});
        break;
      }
      lr = lr / 2.0;
      lr_halved = true;
      if (log)
        log->append(json{{"kind", "lr_halved"},
                         {"space", ordinal},
                         {"step", j},
                         {"lr", lr}});
    }
  }

  res.final_latent = clone_state(state, false);
  if (!scorer) {
    // no selection criterion: carry the final step's state as the "best"
    res.best_latent = res.final_latent;
    {
      GradMode off(false);
      res.best_images = stack.partial_forward(res.best_latent).detach();
    }
    res.best_distance = std::numeric_limits<double>::quiet_NaN();
    res.best_step = steps - 1;
  }
  res.wall_ms = now_ms() - t0;
  return res;
}

std::vector<int> space_schedule(const DistillConfig& cfg,
                                const gen::GeneratorStack& stack) {
  auto starts = gen::decompose(stack, cfg.blocks_per_space);
  if (cfg.include_pixel_space) starts.push_back(stack.block_count());
  return starts;
}

gen::LatentState initial_latent(const DistillConfig& cfg,
                                const gen::GeneratorStack& stack, Rng& rng) {
  const auto& arch = stack.arch();
  std::vector<Tensor> values;
  std::vector<int> labels;
  for (int c = 0; c < arch.classes; ++c) {
    gen::LatentState part =
        cfg.average_init
            ? gen::average_latent_init(stack, c, cfg.n_noise, rng, cfg.ipc)
            : gen::average_latent_init(stack, c, 1, rng, cfg.ipc);
    values.push_back(part.values);
    labels.insert(labels.end(), part.labels.begin(), part.labels.end());
  }
  gen::LatentState out;
  out.layer_index = 0;
  out.kind = gen::SpaceKind::StyleW;
  out.values = concat(values, 0).detach();
  out.labels = labels;
  return out;
}

namespace {

void persist_space(const fs::path& run_dir, const SpaceResult& res,
                   const gen::LatentState& handoff,
                   const gen::GeneratorStack& stack) {
  json hdr = {{"kind", "space_result"},
              {"ordinal", res.ordinal},
              {"boundary", res.boundary},
              {"best_step", res.best_step},
              {"best_distance", res.best_distance},
              {"lr_used", res.lr_used},
              {"aborted", res.aborted},
              {"wall_ms", res.wall_ms},
              {"labels", res.best_latent.labels},
              {"handoff_boundary", handoff.layer_index},
              {"history_loss", json::array()},
              {"history_distance", json::array()}};
  for (const auto& s : res.history) {
    hdr["history_loss"].push_back(s.loss);
    hdr["history_distance"].push_back(
        std::isnan(s.distance) ? json(nullptr) : json(s.distance));
  }
  std::vector<Tensor> payload = {res.best_latent.values, res.best_images,
                                 res.final_latent.values, handoff.values};
  io::write_checkpoint(
      run_dir / "spaces" / ("space_" + std::to_string(res.ordinal) + ".bin"),
      hdr, payload);
  runio::write_image_grid(
      run_dir / "grids" / ("space_" + std::to_string(res.ordinal) +
                           (stack.arch().channels == 1 ? ".pgm" : ".ppm")),
      res.best_images, stack.data_norm(),
      std::max(1, int(res.best_latent.labels.size()) /
                      std::max(1, stack.arch().classes)));
}

struct ResumedSpace {
  SpaceResult res;
  gen::LatentState handoff;
};

std::optional<ResumedSpace> load_space(const fs::path& run_dir, int ordinal,
                                       const gen::GeneratorStack& stack,
                                       const std::vector<int>& labels) {
  fs::path p =
      run_dir / "spaces" / ("space_" + std::to_string(ordinal) + ".bin");
  if (!fs::exists(p)) return std::nullopt;
  auto ckpt = io::read_checkpoint(p);
  ResumedSpace out;
  SpaceResult& r = out.res;
  r.ordinal = ckpt.header.at("ordinal");
  r.boundary = ckpt.header.at("boundary");
  r.best_step = ckpt.header.at("best_step");
  r.best_distance = ckpt.header.at("best_distance");
  r.lr_used = ckpt.header.at("lr_used");
  r.aborted = ckpt.header.at("aborted");
  r.wall_ms = ckpt.header.at("wall_ms");
  const auto& hl = ckpt.header.at("history_loss");
  const auto& hd = ckpt.header.at("history_distance");
  for (size_t i = 0; i < hl.size(); ++i)
    r.history.push_back(
        {int(i), hl[i].get<double>(),
         hd[i].is_null() ? std::numeric_limits<double>::quiet_NaN()
                         : hd[i].get<double>()});
  auto lbls = ckpt.header.at("labels").get<std::vector<int>>();
  if (lbls != labels) return std::nullopt;  // stale run with other labels
  r.best_latent = {r.boundary, ckpt.params[0], lbls,
                   gen::space_kind_at(stack.arch(), r.boundary)};
  r.best_images = ckpt.params[1];
  r.final_latent = {r.boundary, ckpt.params[2], lbls,
                    gen::space_kind_at(stack.arch(), r.boundary)};
  int hb = ckpt.header.at("handoff_boundary");
  out.handoff = {hb, ckpt.params[3], lbls,
                 gen::space_kind_at(stack.arch(), hb)};
  return out;
}

DistillRun run_plan(const DistillConfig& cfg, const gen::GeneratorStack& stack,
                    obj::MatchingObjective& objective, CandidateScorer* scorer,
                    const std::vector<int>& schedule_boundaries,
                    const fs::path& run_dir, const AccuracyFn& accuracy_fn,
                    bool resumable) {
  cfg.validate();
  SelectionMode mode = selection_from_string(cfg.selection);
  if (mode == SelectionMode::Distance && !scorer)
    throw ConfigError("selection=distance requires a scorer");
  if (mode == SelectionMode::Accuracy && !accuracy_fn)
    throw ConfigError("selection=accuracy requires an accuracy function");

  double t0 = now_ms();
  fs::create_directories(run_dir);
  io::save_json(run_dir / "config.json", cfg.to_json());
  runio::MetricsLog log(run_dir / "metrics.ndjson");

  DistillRun run;
  run.config = cfg;

  Rng init_rng(mix_seed(cfg.seed, 0x494e4954ull));  // init stream
  gen::LatentState state = initial_latent(cfg, stack, init_rng);
  run.labels = state.labels;

  for (size_t m = 0; m < schedule_boundaries.size(); ++m) {
    int boundary = schedule_boundaries[m];
    // hand the latent down to this space's boundary
    {
      GradMode off(false);
      while (state.layer_index < boundary) state = stack.advance(state);
      state.values = state.values.detach();
    }

    if (resumable) {
      auto resumed = load_space(run_dir, int(m), stack, run.labels);
      if (resumed && resumed->res.boundary == boundary &&
          int(resumed->res.history.size()) == cfg.steps_per_space) {
        run.spaces.push_back(resumed->res);
        run.total_steps += int64_t(resumed->res.history.size());
        state = resumed->handoff;
        log.append(json{{"kind", "resumed_space"}, {"space", m}});
        continue;
      }
    }

    double lr = boundary == 0 ? cfg.lr_w : cfg.lr_f;
    Rng space_rng(mix_seed(cfg.seed, 0x53504143ull + m));
    SnapshotSink sink;
    if (cfg.snapshot_every > 0) {
      sink = [&run_dir](int ordinal, int step, const Tensor& images,
                        double loss, double dist) {
        io::write_checkpoint(
            run_dir / "snapshots" /
                ("s" + std::to_string(ordinal) + "_j" + std::to_string(step) +
                 ".bin"),
            json{{"kind", "snapshot"},
                 {"space", ordinal},
                 {"step", step},
                 {"loss", loss},
                 {"distance", dist}},
            {images});
      };
    }
    SpaceResult res = optimize_in_space(stack, state, objective, scorer,
                                        cfg.steps_per_space, lr, cfg.momentum,
                                        cfg.weight_decay, space_rng, &log,
                                        int(m), sink, cfg.snapshot_every);
    run.total_steps += int64_t(res.history.size());

    // hand-off: the selected latent seeds the next space
    state = mode == SelectionMode::None ? res.final_latent : res.best_latent;
    persist_space(run_dir, res, state, stack);
    log.append(json{{"kind", "space_done"},
                    {"space", m},
                    {"boundary", boundary},
                    {"best_step", res.best_step},
                    {"best_distance", res.best_distance},
                    {"wall_ms", res.wall_ms},
                    {"aborted", res.aborted}});
    run.spaces.push_back(std::move(res));
  }

  // global selection across the per-space bests
  GradMode off(false);
  if (mode == SelectionMode::None) {
    gen::LatentState last = state;
    run.global_images = stack.partial_forward(last).detach();
    run.global_space = int(run.spaces.size()) - 1;
    run.global_score = std::numeric_limits<double>::quiet_NaN();
  } else if (mode == SelectionMode::Distance) {
    double best = std::numeric_limits<double>::infinity();
    for (size_t m = 0; m < run.spaces.size(); ++m) {
      if (run.spaces[m].best_distance < best) {
        best = run.spaces[m].best_distance;
        run.global_space = int(m);
      }
    }
    run.global_score = best;
    run.global_images = run.spaces[size_t(run.global_space)].best_images;
  } else {
    double acc_max = 0.0;
    run.global_space = 0;
    for (size_t m = 0; m < run.spaces.size(); ++m) {
      double acc = accuracy_fn(run.spaces[m].best_images, run.labels);
      log.append(json{{"kind", "space_accuracy"},
                      {"space", m},
                      {"accuracy", acc}});
      if (acc > acc_max) {
        acc_max = acc;
        run.global_space = int(m);
      }
    }
    run.global_score = acc_max;
    run.global_images = run.spaces[size_t(run.global_space)].best_images;
  }

  run.wall_ms = now_ms() - t0;
  io::json hdr = {{"kind", "synthetic_set"},
                  {"labels", run.labels},
                  {"global_space", run.global_space},
                  {"global_score", run.global_score},
                  {"total_steps", run.total_steps},
                  {"wall_ms", run.wall_ms}};
  io::write_checkpoint(run_dir / "best_set.bin", hdr, {run.global_images});
  runio::write_image_grid(
      run_dir / (stack.arch().channels == 1 ? "best_set.pgm" : "best_set.ppm"),
      run.global_images, stack.data_norm(),
      std::max(1, cfg.ipc));
  log.append(json{{"kind", "run_done"},
                  {"total_steps", run.total_steps},
                  {"global_space", run.global_space},
                  {"global_score", run.global_score},
                  {"wall_ms", run.wall_ms}});
  return run;
}

}  // namespace

DistillRun distill(const DistillConfig& cfg, const gen::GeneratorStack& stack,
                   obj::MatchingObjective& objective, CandidateScorer* scorer,
                   const fs::path& run_dir, const AccuracyFn& accuracy_fn) {
  auto schedule = space_schedule(cfg, stack);
  return run_plan(cfg, stack, objective, scorer, schedule, run_dir,
                  accuracy_fn, /*resumable=*/true);
}

DistillRun fixed_space_baseline(const DistillConfig& cfg,
                                const gen::GeneratorStack& stack,
                                obj::MatchingObjective& objective,
                                CandidateScorer* scorer, int space_index,
                                const fs::path& run_dir) {
  if (space_index < 0 || space_index > stack.block_count())
    throw ConfigError("fixed_space_baseline: space_index out of [0,K]");
  // same total budget as the progressive run under this config, all spent in
  // one space
  size_t n_spaces = space_schedule(cfg, stack).size();
  DistillConfig base = cfg;
  base.steps_per_space = cfg.steps_per_space * int(n_spaces);
  std::vector<int> schedule = {space_index};
  return run_plan(base, stack, objective, scorer, schedule, run_dir,
                  AccuracyFn{}, /*resumable=*/false);
}

}  // namespace hpd::engine
