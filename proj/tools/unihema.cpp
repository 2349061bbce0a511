#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "unihema/error.hpp"
#include "unihema/evaluate.hpp"
#include "unihema/tensor_io.hpp"
#include "unihema/train.hpp"

namespace fs = std::filesystem;
using namespace unihema;

namespace {

void print_digest(const nlohmann::json& j) {
  std::cout << "config digest: " << config_digest(j) << '\n';
}

std::vector<TaskKind> parse_tasks(const std::string& list) {
  std::vector<TaskKind> out;
  std::stringstream in(list);
  std::string tag;
  while (std::getline(in, tag, ',')) {
    if (tag.empty()) continue;
    try {
      out.push_back(task_from_tag(tag));
    } catch (const Error&) {
      throw UsageError("unknown task '" + tag + "'; expected det, seg, cls, vqa or mlm");
    }
  }
  if (out.empty()) throw UsageError("--tasks names no task");
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UsageError("cannot write " + path.string());
  out << text;
}

// ------------------------------------------------------------------ gen-data

struct GenDataArgs {
  std::string out;
  std::uint64_t seed = 0;
  std::size_t per_task = GenerateOptions{}.train_per_task;
  std::size_t eval_per_task = GenerateOptions{}.eval_per_task;
  std::string tasks = "det,seg,cls,vqa,mlm";
  bool force = false;
};

int gen_data(const GenDataArgs& a) {
  GenerateOptions o;
  o.seed = a.seed;
  o.train_per_task = a.per_task;
  o.eval_per_task = a.eval_per_task;
  o.tasks = parse_tasks(a.tasks);
  nlohmann::json j = {{"seed", o.seed}, {"train_per_task", o.train_per_task},
                      {"eval_per_task", o.eval_per_task}, {"tasks", nlohmann::json::array()}};
  for (TaskKind t : o.tasks) j["tasks"].push_back(task_tag(t));
  print_digest(j);
  const DatasetManifest m = write_dataset(o, a.out, a.force);
  for (const auto& [tag, c] : m.tasks) {
    std::cout << tag << ": " << c.train << " train, " << c.eval << " eval\n";
  }
  return 0;
}

// --------------------------------------------------------------------- train

struct TrainArgs {
  std::string config;
  std::size_t stage = 1;
  std::string resume;
  std::string data;
  std::string out;
  std::string log;
  std::size_t stop_after = 0;
};

int train(const TrainArgs& a) {
  TrainConfig cfg = a.config.empty() ? TrainConfig{} : load_train_config(a.config);
  const Dataset data = Dataset::open(a.data);
  if (cfg.model.vocab_size == 0) cfg.model.vocab_size = data.vocab().size();
  cfg.validate();
  print_digest(to_json(cfg));

  StageOptions opts;
  opts.stage = a.stage;
  stage_spec(a.stage);
  if (!a.resume.empty()) {
    opts.init = load_checkpoint(a.resume);
    check_architecture(cfg.model, opts.init->model);
  } else if (a.stage > 1) {
    throw OrderingError("stage " + std::to_string(a.stage) + " needs the stage " +
                        std::to_string(a.stage - 1) + " checkpoint (pass it with --resume)");
  }
  if (a.stop_after) opts.stop_after = a.stop_after;

  // A resumed run of the same stage appends to the existing log.
  const fs::path log_path = a.log.empty() ? fs::path(a.out + ".log.csv") : fs::path(a.log);
  const bool append = opts.init && opts.init->stage == a.stage && fs::exists(log_path);
  std::ofstream log(log_path, append ? std::ios::app : std::ios::trunc);
  if (!log) throw UsageError("cannot write " + log_path.string());
  opts.log = &log;
  opts.write_header = !append;

  UniHema model(cfg.model, cfg.seed);
  const SamplePools pools = load_pools(data, "train");
  const StageResult r = run_stage(model, cfg, data.vocab(), pools, opts);
  save_checkpoint(a.out, r.checkpoint);
  std::cout << "stage " << r.checkpoint.stage << ": " << r.checkpoint.step << "/"
            << r.checkpoint.stage_steps << " steps";
  if (!r.step_losses.empty()) {
    std::cout << ", loss " << r.step_losses.front() << " -> " << r.step_losses.back();
  }
  std::cout << "\ncheckpoint: " << a.out << "\nlog: " << log_path.string() << '\n';
  return 0;
}

// ---------------------------------------------------------------------- eval

std::unique_ptr<UniHema> model_from(const Checkpoint& ckpt) {
  auto m = std::make_unique<UniHema>(ckpt.model, ckpt.seed);
  restore(*m, ckpt);
  return m;
}

struct EvalArgs {
  std::string ckpt;
  std::string data;
  std::string task;
  std::string report;
  std::string split = "eval";
  std::string per_class_csv;
  std::string pr_csv;
  std::string upsampler;
};

int eval(const EvalArgs& a) {
  const Checkpoint ckpt = load_checkpoint(a.ckpt);
  const std::string digest = config_digest(to_json(ckpt.model));
  std::cout << "config digest: " << digest << '\n';
  const TaskKind task = parse_tasks(a.task).front();
  const Dataset data = Dataset::open(a.data);
  if (data.vocab().size() != ckpt.model.vocab_size) {
    throw ConfigMismatchError({{"vocab_size", std::to_string(ckpt.model.vocab_size),
                                std::to_string(data.vocab().size())}});
  }
  std::vector<Sample> samples;
  for (const SampleRecord* r : data.records(task, a.split)) samples.push_back(data.load(*r));
  if (samples.empty()) throw DataError("no " + a.task + " samples in split " + a.split);

  const UpsampleMode mode =
      a.upsampler.empty() ? ckpt.model.upsampler : upsample_mode_from_string(a.upsampler);
  const auto model = model_from(ckpt);
  EvalReport r = evaluate(*model, data.vocab(), samples, task, mode);
  r.config_digest = digest;
  std::cout << r.metric << ": " << r.value << '\n';
  for (const auto& [name, v] : r.metrics) {
    if (name != r.metric) std::cout << name << ": " << v << '\n';
  }
  if (!a.report.empty()) write_text(a.report, r.to_json().dump(2) + "\n");
  if (!a.per_class_csv.empty()) write_text(a.per_class_csv, r.per_class_csv());
  if (!a.pr_csv.empty()) write_text(a.pr_csv, r.pr_curve_csv());
  return 0;
}

// --------------------------------------------------------------------- infer

struct InferArgs {
  std::string ckpt;
  std::string image;
  std::string prompt;
};

int infer_cmd(const InferArgs& a) {
  // Routing is checked first so a bad prompt fails before any loading.
  TaskPrompt::parse(a.prompt);
  const Checkpoint ckpt = load_checkpoint(a.ckpt);
  std::cerr << "config digest: " << config_digest(to_json(ckpt.model)) << '\n';
  const Vocabulary vocab = corpus_vocabulary();
  if (vocab.size() != ckpt.model.vocab_size) {
    throw ConfigMismatchError({{"vocab_size", std::to_string(ckpt.model.vocab_size),
                                std::to_string(vocab.size())}});
  }
  const Tensor image = load_tensor(a.image);
  if (image.shape().size() != 3 || image.dim(0) != 3) {
    throw DataError("image must be a [3×H×W] tensor, got " + shape_str(image.shape()));
  }
  const auto model = model_from(ckpt);
  for (const auto& line : infer(*model, vocab, image, a.prompt).lines) {
    std::cout << line.dump() << '\n';
  }
  return 0;
}

// ------------------------------------------------------------------- inspect

int inspect(const std::string& path) {
  const Checkpoint ckpt = load_checkpoint(path);
  print_digest(to_json(ckpt.model));
  std::size_t total = 0;
  for (const auto& [name, t] : ckpt.params) {
    std::cout << name << ' ' << shape_str(t.shape()) << ' ' << t.numel() << '\n';
    total += t.numel();
  }
  std::cout << "total parameters: " << total << '\n';
  std::cout << "stage: " << ckpt.stage << " (" << ckpt.step << "/" << ckpt.stage_steps
            << " steps)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unified hematology vision-language model: data, training, evaluation"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* g = app.add_subcommand("gen-data", "Write a synthetic corpus");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--seed", gen.seed, "Corpus seed");
  g->add_option("--per-task", gen.per_task, "Training samples per task");
  g->add_option("--eval-per-task", gen.eval_per_task, "Evaluation samples per task");
  g->add_option("--tasks", gen.tasks, "Comma-separated task tags (det,seg,cls,vqa,mlm)");
  g->add_flag("--force", gen.force, "Replace an existing corpus");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Run one training stage");
  t->add_option("--config", tr.config, "Training config JSON");
  t->add_option("--stage", tr.stage, "Stage 1-6")->required();
  t->add_option("--resume", tr.resume,
                "Previous stage's checkpoint, or an unfinished checkpoint of this stage");
  t->add_option("--data", tr.data, "Corpus directory")->required();
  t->add_option("--out", tr.out, "Output checkpoint")->required();
  t->add_option("--log", tr.log, "CSV loss log (default <out>.log.csv)");
  t->add_option("--stop-after", tr.stop_after, "Stop once this many stage steps are done");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on one task");
  e->add_option("--ckpt", ev.ckpt, "Checkpoint")->required();
  e->add_option("--data", ev.data, "Corpus directory")->required();
  e->add_option("--task", ev.task, "det, seg, cls, vqa or mlm")->required();
  e->add_option("--report", ev.report, "JSON report path");
  e->add_option("--split", ev.split, "train or eval");
  e->add_option("--per-class-csv", ev.per_class_csv, "Per-class scores as CSV");
  e->add_option("--pr-csv", ev.pr_csv, "Detection precision-recall curves as CSV");
  e->add_option("--upsampler", ev.upsampler, "Override the mask upsampler (bilinear|learnable)");

  InferArgs in;
  auto* i = app.add_subcommand("infer", "Run the model on one image");
  i->add_option("--ckpt", in.ckpt, "Checkpoint")->required();
  i->add_option("--image", in.image, "Image tensor file (.uhtn)")->required();
  i->add_option("--prompt", in.prompt, "Task prompt; omit for classification");

  std::string inspect_path;
  auto* s = app.add_subcommand("inspect", "List checkpoint contents");
  s->add_option("--ckpt", inspect_path, "Checkpoint")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : static_cast<int>(ExitCode::kUsage);
  }

  try {
    if (*g) return gen_data(gen);
    if (*t) return train(tr);
    if (*e) return eval(ev);
    if (*i) return infer_cmd(in);
    if (*s) return inspect(inspect_path);
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << '\n';
    return static_cast<int>(err.exit_code());
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return static_cast<int>(ExitCode::kData);
  }
  return static_cast<int>(ExitCode::kUsage);
}
