// pointperc: command-line driver.
//
// Exit codes: 0 success, 1 bad input or usage, 2 numerical failure
// (including a failed gradient check).

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pointperc/pointperc.hpp"

using namespace pointperc;
using nlohmann::ordered_json;

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitNumerical = 2;

// --out PATH or stdout.
class Output {
 public:
  explicit Output(const std::string& path) {
    if (path.empty() || path == "-") return;
    file_ = std::make_unique<std::ofstream>(path);
    if (!*file_) throw ValidationError("cannot write " + path);
  }
  std::ostream& os() { return file_ ? *file_ : std::cout; }
  void line(const ordered_json& j) { os() << j.dump() << '\n'; }

 private:
  std::unique_ptr<std::ofstream> file_;
};

ordered_json points_json(const PointSequence& s) {
  auto a = ordered_json::array();
  for (const Point2& p : s.points) a.push_back({p.x, p.y});
  return a;
}

std::set<TaskKind> parse_tasks(const std::vector<std::string>& names) {
  std::set<TaskKind> out;
  for (const auto& n : names) out.insert(parse_task(n));
  if (out.empty()) throw ValidationError("no task given");
  return out;
}

// ---- encode

struct EncodeOpts {
  std::string annotations;
  std::string task = "detect";
  std::optional<std::size_t> points;
  std::string out;
};

int cmd_encode(const EncodeOpts& o) {
  const TaskKind task = parse_task(o.task);
  EpisodeConfig cfg;
  if (o.points) {
    if (task != TaskKind::Detect && task != TaskKind::Segment)
      throw ValidationError("--points applies to detect and segment only");
    if (!is_allowed_count(task, *o.points))
      throw ValidationError("--points " + std::to_string(*o.points) + " is not allowed for " + o.task);
    (task == TaskKind::Detect ? cfg.box_points : cfg.mask_points) = *o.points;
  }
  const Dataset ds = load_dataset(o.annotations);
  Output out(o.out);
  std::size_t skipped = 0;
  for (const auto& a : ds.annotations) {
    // instances without this task's label are skipped; a label that is
    // present but unusable is an error
    if ((task == TaskKind::Segment && a.segmentation.empty()) || (task == TaskKind::Pose && !a.keypoints)) {
      ++skipped;
      continue;
    }
    CanonicalPointSet ps;
    try {
      ps = encode_annotation(a, task, cfg);
    } catch (const ValidationError& e) {
      throw ValidationError("annotation " + std::to_string(a.id) + ": " + e.what());
    }
    ordered_json j;
    j["annotation_id"] = a.id;
    j["image_id"] = a.image_id;
    const ordered_json rec = to_json(ps, a.category_id);
    for (const auto& [k, v] : rec.items()) j[k] = v;
    out.line(j);
  }
  if (skipped) std::cerr << "skipped " << skipped << " instances without a " << o.task << " label\n";
  return 0;
}

// ---- gradcheck

struct GradcheckOpts {
  std::uint64_t seed = 0;
  bool inject_fault = false;
  std::string out;
};

int cmd_gradcheck(const GradcheckOpts& o) {
  const auto entries = run_gradcheck_suite(o.seed, o.inject_fault);
  Output out(o.out);
  bool all = true;
  for (const auto& e : entries) {
    ordered_json j;
    j["suite"] = e.name;
    j["cases"] = e.cases;
    j["max_relative_error"] = e.max_error;
    j["tolerance"] = kGradcheckTolerance;
    j["pass"] = e.passed;
    out.line(j);
    all = all && e.passed;
  }
  return all ? 0 : kExitNumerical;
}

// ---- fitdemo

struct FitOpts {
  std::string shape = "star";
  std::size_t hops = 2;
  std::size_t steps = 100;
  double lr = 0.5;
  std::uint64_t seed = 0;
  std::string out;
};

void emit_fit(Output& out, const std::string& arm, const PointSequence& init, const PointSequence& gt,
              const SaplConfig& cfg, const FitOpts& o) {
  const FitResult r = fit_points(init, gt, cfg, o.steps, o.lr);
  for (std::size_t i = 0; i < r.trace.size(); ++i) {
    ordered_json j;
    j["arm"] = arm;
    j["step"] = i;
    j["loss"] = r.trace[i];
    out.line(j);
  }
  ordered_json f;
  f["arm"] = arm;
  f["final_mean_point_error"] = mean_point_error(r.points, gt);
  f["points"] = points_json(r.points);
  out.line(f);
}

int cmd_fitdemo(const FitOpts& o) {
  if (o.hops < 1) throw ValidationError("--hops must be >= 1");
  if (!(o.lr > 0.0)) throw ValidationError("--lr must be positive");
  SaplConfig sapl;
  sapl.n_hops = o.hops;
  SaplConfig l1 = sapl;
  l1.use_sapl = false;
  Output out(o.out);

  PointSequence gt, init;
  if (o.shape == "diamond-ambiguity") {
    const DiamondCase d = diamond_case();
    for (const auto& [name, pred] :
         std::vector<std::pair<std::string, const PointSequence*>>{
             {"ground_truth", &d.gt}, {"along_edge", &d.along_edge}, {"off_edge", &d.off_edge}}) {
      const LossBreakdown lb = point_loss(*pred, d.gt, sapl);
      ordered_json j;
      j["candidate"] = name;
      j["hops"] = o.hops;
      j["l1_term"] = lb.l1_term;
      j["sapl_term"] = lb.sapl_term;
      j["total"] = lb.total;
      j["points"] = points_json(*pred);
      out.line(j);
    }
    gt = d.gt;
    init = d.off_edge;
  } else {
    const FitScenario sc = fit_scenario(o.shape, o.seed);
    gt = sc.gt;
    init = sc.init;
  }
  ordered_json head;
  head["shape"] = o.shape;
  head["ground_truth"] = points_json(gt);
  head["init"] = points_json(init);
  out.line(head);
  emit_fit(out, "l1", init, gt, l1, o);
  emit_fit(out, "l1+sapl", init, gt, sapl, o);
  return 0;
}

// ---- traintoy

struct TrainOpts {
  std::string task = "detect";
  std::size_t steps = 200;
  double lr = kToyLearningRate;
  std::uint64_t seed = 0;
  std::size_t hops = 2;
  std::size_t dim = 32;
  std::size_t layers = 2;
  bool no_sapl = false;
  bool literal_chain = false;
  std::string resume;
  std::string checkpoint;
  std::string out;
};

int cmd_traintoy(const TrainOpts& o, const CLI::App& sub) {
  if (o.lr < 0.0) throw ValidationError("--lr must be >= 0");
  if (o.hops < 1) throw ValidationError("--hops must be >= 1");
  TaskKind task = parse_task(o.task);
  std::uint64_t seed = o.seed;
  SaplConfig loss;
  loss.n_hops = o.hops;
  loss.use_sapl = !o.no_sapl;
  std::size_t start = 0;
  DecoderParams params;

  if (!o.resume.empty()) {
    std::ifstream in(o.resume);
    if (!in) throw ValidationError("cannot open checkpoint " + o.resume);
    Checkpoint ck = load_checkpoint(in);
    try {
      const auto& m = ck.meta;
      const TaskKind ck_task = parse_task(m.at("task").get<std::string>());
      const auto ck_seed = m.at("seed").get<std::uint64_t>();
      const auto ck_hops = m.at("hops").get<std::size_t>();
      const bool ck_sapl = m.at("use_sapl").get<bool>();
      auto clash = [&](const char* flag, bool differs) {
        if (sub.count(flag) && differs) throw ValidationError(std::string(flag) + " differs from the checkpoint");
      };
      clash("--task", ck_task != task);
      clash("--seed", ck_seed != seed);
      clash("--hops", ck_hops != loss.n_hops);
      clash("--no-sapl", ck_sapl == o.no_sapl);
      task = ck_task;
      seed = ck_seed;
      loss.n_hops = ck_hops;
      loss.use_sapl = ck_sapl;
      start = m.at("step").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("checkpoint meta incomplete: " + std::string(e.what()));
    }
    params = std::move(ck.params);
  } else {
    DecoderConfig cfg;
    cfg.d = o.dim;
    cfg.d_ff = 2 * o.dim;
    cfg.head_hidden = o.dim;
    cfg.layers = o.layers;
    cfg.residual = !o.literal_chain;
    validate(cfg);
    params = init_params(cfg, seed);
  }

  const TrainSample sample = make_toy_sample(seed, task, params.config.d);
  Output out(o.out);
  auto record = [&](std::size_t step, const LossBreakdown& lb) {
    ordered_json j;
    j["step"] = step;
    j["total"] = lb.total;
    j["l1"] = lb.l1_term;
    j["sapl"] = lb.sapl_term;
    out.line(j);
  };
  // step i logs the loss before update i; the last line is the loss after
  // the final update, which is also where a resumed run starts
  for (std::size_t i = start; i <= start + o.steps; ++i) {
    LossBreakdown lb;
    try {
      lb = train_step(params, sample, loss, i < start + o.steps ? o.lr : 0.0);
    } catch (const NumericalError& e) {
      throw NumericalError("step " + std::to_string(i) + ": " + e.what());
    }
    record(i, lb);
  }

  if (!o.checkpoint.empty()) {
    std::ofstream ck(o.checkpoint);
    if (!ck) throw ValidationError("cannot write " + o.checkpoint);
    nlohmann::json meta;
    meta["task"] = std::string(to_string(task));
    meta["seed"] = seed;
    meta["hops"] = loss.n_hops;
    meta["use_sapl"] = loss.use_sapl;
    meta["step"] = start + o.steps;
    save_checkpoint(ck, params, meta);
  }
  return 0;
}

// ---- evaluate

struct EvalOpts {
  std::string annotations;
  std::string predictions;
  std::vector<std::string> tasks{"detect"};
  long long shots = 1;
  std::optional<std::size_t> seeds;
  std::string out;
};

int cmd_evaluate(const EvalOpts& o) {
  const Dataset ds = load_dataset(o.annotations);
  std::ifstream in(o.predictions);
  if (!in) throw ValidationError("cannot open predictions " + o.predictions);
  const std::vector<Prediction> preds = read_predictions(in);
  EvaluationRequest req;
  req.tasks = parse_tasks(o.tasks);
  req.shots = o.shots;
  req.seeds = o.seeds;
  req.threads = thread_cap(std::getenv("POINTPERC_THREADS"));
  const std::vector<MetricRecord> records = evaluate_predictions(ds, preds, req);
  Output out(o.out);
  for (const auto& r : records) out.line(to_json(r));
  for (const auto& a : aggregate_over_seeds(records)) out.line(to_json(a));
  return 0;
}

// ---- toydata / episode

struct ToyOpts {
  std::uint64_t seed = 0;
  std::size_t images = 24;
  std::string out;
};

int cmd_toydata(const ToyOpts& o) {
  ToyConfig cfg;
  cfg.images = o.images;
  Output out(o.out);
  out.os() << dataset_to_json(make_toy_dataset(o.seed, cfg)).dump() << '\n';
  return 0;
}

struct EpisodeOpts {
  std::string annotations;
  std::string novel;
  std::vector<std::string> tasks{"detect"};
  std::size_t shots = 1;
  std::size_t seeds = 10;
  std::string out;
};

int cmd_episode(const EpisodeOpts& o) {
  const Dataset ds = load_dataset(o.annotations);
  const std::set<long long> novel = o.novel.empty() ? voc_overlap_novel_ids() : load_novel_ids(o.novel);
  const Split split = make_split(ds, novel);
  const std::set<TaskKind> tasks = parse_tasks(o.tasks);
  Output out(o.out);
  for (long long cls : split.novel_class_ids)
    for (std::size_t s = 0; s < o.seeds; ++s)
      out.os() << episode_manifest_line(sample_episode(ds, split, cls, o.shots, static_cast<long long>(s), tasks))
               << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot point-set perception toolkit"};
  app.require_subcommand(1);

  EncodeOpts enc;
  auto* s_enc = app.add_subcommand("encode", "Canonical point set per annotated instance");
  s_enc->add_option("--annotations", enc.annotations, "Annotation file")->required()->check(CLI::ExistingFile);
  s_enc->add_option("--task", enc.task, "detect, segment, pose or count");
  s_enc->add_option("--points", enc.points, "Point count for detect or segment");
  s_enc->add_option("--out", enc.out, "Output path (default stdout)");

  GradcheckOpts gc;
  auto* s_gc = app.add_subcommand("gradcheck", "Finite-difference checks of the loss and decoder gradients");
  s_gc->add_option("--seed", gc.seed);
  s_gc->add_flag("--inject-fault", gc.inject_fault, "Perturb the analytic gradients (must fail)");
  s_gc->add_option("--out", gc.out);

  FitOpts fit;
  auto* s_fit = app.add_subcommand("fitdemo", "Fit free points to a shape with and without the angle term");
  s_fit->add_option("--shape", fit.shape)->check(CLI::IsMember({"square", "star", "diamond-ambiguity"}));
  s_fit->add_option("--hops", fit.hops);
  s_fit->add_option("--steps", fit.steps);
  s_fit->add_option("--lr", fit.lr);
  s_fit->add_option("--seed", fit.seed);
  s_fit->add_option("--out", fit.out);

  TrainOpts tr;
  auto* s_tr = app.add_subcommand("traintoy", "Train the decoder on one synthetic episode");
  s_tr->add_option("--task", tr.task);
  s_tr->add_option("--steps", tr.steps);
  s_tr->add_option("--lr", tr.lr);
  s_tr->add_option("--seed", tr.seed);
  s_tr->add_option("--hops", tr.hops);
  s_tr->add_option("--dim", tr.dim, "Model width d");
  s_tr->add_option("--layers", tr.layers, "Decoder layers L");
  s_tr->add_flag("--no-sapl", tr.no_sapl, "L1 only");
  s_tr->add_flag("--literal-chain", tr.literal_chain, "Drop the residual connections");
  s_tr->add_option("--resume", tr.resume, "Checkpoint to continue from")->check(CLI::ExistingFile);
  s_tr->add_option("--checkpoint", tr.checkpoint, "Write a checkpoint here when done");
  s_tr->add_option("--out", tr.out, "Loss records (default stdout)");

  EvalOpts ev;
  auto* s_ev = app.add_subcommand("evaluate", "Score a prediction file against annotations");
  s_ev->add_option("--annotations", ev.annotations)->required()->check(CLI::ExistingFile);
  s_ev->add_option("--predictions", ev.predictions)->required()->check(CLI::ExistingFile);
  s_ev->add_option("--task", ev.tasks, "One or more tasks")->delimiter(',');
  s_ev->add_option("--shots", ev.shots);
  s_ev->add_option("--seeds", ev.seeds, "Expect seeds 0..N-1");
  s_ev->add_option("--out", ev.out);

  ToyOpts toy;
  auto* s_toy = app.add_subcommand("toydata", "Write the synthetic annotation file");
  s_toy->add_option("--seed", toy.seed);
  s_toy->add_option("--images", toy.images);
  s_toy->add_option("--out", toy.out);

  EpisodeOpts epi;
  auto* s_epi = app.add_subcommand("episode", "Episode manifests for every novel class and seed");
  s_epi->add_option("--annotations", epi.annotations)->required()->check(CLI::ExistingFile);
  s_epi->add_option("--novel", epi.novel, "Novel-id config (default: the 20 VOC-overlap ids)");
  s_epi->add_option("--task", epi.tasks)->delimiter(',');
  s_epi->add_option("--shots", epi.shots);
  s_epi->add_option("--seeds", epi.seeds);
  s_epi->add_option("--out", epi.out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }

  try {
    if (*s_enc) return cmd_encode(enc);
    if (*s_gc) return cmd_gradcheck(gc);
    if (*s_fit) return cmd_fitdemo(fit);
    if (*s_tr) return cmd_traintoy(tr, *s_tr);
    if (*s_ev) return cmd_evaluate(ev);
    if (*s_toy) return cmd_toydata(toy);
    if (*s_epi) return cmd_episode(epi);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  }
  return kExitValidation;
}
