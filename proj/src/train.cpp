#include "unihema/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <sstream>

#include "unihema/error.hpp"
#include "unihema/ops.hpp"
#include "unihema/tensor_io.hpp"

namespace unihema {

namespace fs = std::filesystem;

// ------------------------------------------------------------------ stages

StageSpec stage_spec(std::size_t id) {
  using T = TaskKind;
  switch (id) {
    case 1:
      return {1, {"backbone.*", "image_encoder.*", "hema_former.scfe.*", "heads.classify.*"},
              {T::kClassification}};
    case 2: return {2, {"text_encoder.*", "text_decoder.*"}, {T::kMlm, T::kVqa}};
    case 3:
      return {3,
              {"backbone.*", "image_encoder.*", "hema_former.tgvr.*", "hema_former.scfe.*",
               "hema_former.qgmf.*", "image_decoder.*", "heads.*"},
              {T::kDetection, T::kSegmentation, T::kClassification}};
    case 4: return {4, {"image_decoder.*", "heads.detect.*"}, {T::kDetection}};
    case 5: return {5, {"hema_former.qgmf.*"}, {T::kSegmentation}};
    case 6: return {6, {"hema_former.cmf.*", "text_decoder.*"}, {T::kVqa, T::kMlm}};
    default: break;
  }
  throw ConfigError("stage must be in 1..6 (got " + std::to_string(id) + ")");
}

bool glob_match(const std::string& pattern, const std::string& name) {
  // Iterative wildcard match with single-star backtracking.
  std::size_t p = 0, n = 0, star = std::string::npos, mark = 0;
  while (n < name.size()) {
    if (p < pattern.size() && pattern[p] == '*') {
      star = p++;
      mark = n;
    } else if (p < pattern.size() && pattern[p] == name[n]) {
      ++p;
      ++n;
    } else if (star != std::string::npos) {
      p = star + 1;
      n = ++mark;
    } else {
      return false;
    }
  }
  while (p < pattern.size() && pattern[p] == '*') ++p;
  return p == pattern.size();
}

std::vector<std::string> trainable_names(const ParameterStore& store, const StageSpec& spec) {
  std::vector<std::string> out;
  for (const auto& glob : spec.trainable) {
    bool hit = false;
    for (const auto& [name, _] : store.all()) {
      if (glob_match(glob, name)) {
        hit = true;
        if (std::find(out.begin(), out.end(), name) == out.end()) out.push_back(name);
      }
    }
    if (!hit) {
      throw ConfigError("stage " + std::to_string(spec.id) + ": glob '" + glob +
                        "' matches no parameter");
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

UpsampleMode stage_upsample_mode(std::size_t stage, UpsampleMode configured) {
  return stage == 3 ? UpsampleMode::kBilinear : configured;
}

// ---------------------------------------------------------------- optimizer

void Adam::step(ParameterStore& store, const std::vector<std::string>& names, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (const auto& name : names) {
    Tensor& p = store.at(name);
    auto& m = m_[name];
    auto& v = v_[name];
    if (!m.defined()) {
      m = Tensor::zeros(p.shape());
      v = Tensor::zeros(p.shape());
    }
    auto w = p.mutable_data();
    auto md = m.mutable_data();
    auto vd = v.mutable_data();
    const bool has = p.has_grad();
    std::span<const double> g;
    if (has) g = p.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = has ? g[i] : 0.0;
      md[i] = beta1_ * md[i] + (1.0 - beta1_) * gi;
      vd[i] = beta2_ * vd[i] + (1.0 - beta2_) * gi * gi;
      const double mhat = md[i] / c1;
      const double vhat = vd[i] / c2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

double clip_grad_norm(ParameterStore& store, const std::vector<std::string>& names,
                      double max_norm) {
  double sq = 0.0;
  for (const auto& name : names) {
    const Tensor& p = store.at(name);
    if (!p.has_grad()) continue;
    for (double g : p.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (const auto& name : names) {
      Tensor& p = store.at(name);
      if (!p.has_grad()) continue;
      for (double& g : p.mutable_grad()) g *= s;
    }
  }
  return norm;
}

double warmup_lr(double base, std::size_t warmup, std::size_t step) {
  if (warmup == 0 || step >= warmup) return base;
  return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
}

// ------------------------------------------------------------------ batching

std::vector<BatchItem> compose_batch(const std::map<TaskKind, std::size_t>& pool_sizes,
                                     const std::vector<TaskKind>& tasks, std::size_t per_task,
                                     std::uint64_t seed, std::size_t step) {
  if (tasks.empty() || per_task == 0) throw UsageError("compose_batch: empty batch requested");
  std::vector<BatchItem> batch;
  batch.reserve(per_task * tasks.size());
  std::vector<std::vector<std::size_t>> perms(tasks.size());
  std::vector<std::size_t> perm_epoch(tasks.size(), std::numeric_limits<std::size_t>::max());
  for (std::size_t j = 0; j < per_task; ++j) {
    for (std::size_t t = 0; t < tasks.size(); ++t) {
      auto it = pool_sizes.find(tasks[t]);
      const std::size_t n = it == pool_sizes.end() ? 0 : it->second;
      if (n == 0) throw DataError("no " + task_tag(tasks[t]) + " samples to draw from");
      const std::size_t pos = step * per_task + j;
      const std::size_t epoch = pos / n;
      if (perm_epoch[t] != epoch) {
        perms[t].resize(n);
        std::iota(perms[t].begin(), perms[t].end(), 0);
        std::mt19937_64 g(mix_seed(mix_seed(seed, static_cast<std::uint64_t>(tasks[t]) + 1),
                                   epoch));
        // Fisher-Yates with an explicit draw so the order does not depend on
        // the standard library's shuffle implementation.
        for (std::size_t i = n; i > 1; --i) std::swap(perms[t][i - 1], perms[t][g() % i]);
        perm_epoch[t] = epoch;
      }
      batch.push_back({tasks[t], perms[t][pos % n]});
    }
  }
  return batch;
}

// -------------------------------------------------------------------- losses

TokenIds answer_ids(const Vocabulary& vocab, const std::string& text) {
  TokenIds ids = vocab.tokenize(text);
  return TokenIds(ids.begin() + 1, ids.end() - 1);
}

Tensor objectness_loss(const Tensor& logits, const SpatialEmbeddings& tokens,
                       const std::vector<GroundTruthObject>& gts) {
  const std::size_t classes = logits.dim(1);
  std::vector<double> target(logits.numel(), 0.0);
  for (const auto& level : tokens.levels) {
    for (const auto& g : gts) {
      if (g.cls >= classes) throw DataError("objectness: class id out of range");
      const auto col = std::min(level.width - 1,
                                static_cast<std::size_t>(std::max(0.0, g.box.cx) * level.width));
      const auto row = std::min(level.height - 1,
                                static_cast<std::size_t>(std::max(0.0, g.box.cy) * level.height));
      target[(level.offset + row * level.width + col) * classes + g.cls] = 1.0;
    }
  }
  // BCE with logits: softplus(x) - t·x, averaged over all entries.
  Tensor t(logits.shape(), std::move(target));
  return mean(sub(softplus(logits), mul(t, logits)));
}

SampleLoss sample_loss(const UniHema& model, const Vocabulary& vocab, const Sample& sample,
                       const LossWeights& w, UpsampleMode mode) {
  SampleLoss out;
  const SampleRecord& r = sample.record;
  const VisionState vision = model.see(sample.image);
  switch (r.task) {
    case TaskKind::kClassification: {
      Tensor logits = model.classify(vision);
      const std::size_t label[] = {r.label};
      out.total = scale(neg(sum(pick(log_softmax(logits), label))), w.cls);
      out.terms["cls"] = out.total.item();
      break;
    }
    case TaskKind::kDetection: {
      const DenseOutputs d = model.dense(vision, vocab.tokenize(r.prompt));
      const MatchResult match = hungarian_match(d.detection, r.objects, w);
      DetectionLossTerms det = detection_loss(d.detection, r.objects, match, w);
      out.total = det.total;
      out.terms = {{"det_cls", det.cls}, {"l1", det.l1}, {"giou", det.giou}, {"morph", det.morph}};
      if (w.objectness > 0.0) {
        Tensor obj = scale(objectness_loss(d.topk.logits, vision.encoded, r.objects), w.objectness);
        out.terms["objectness"] = obj.item();
        out.total = add(out.total, obj);
      }
      break;
    }
    case TaskKind::kSegmentation: {
      const DenseOutputs d = model.dense(vision, vocab.tokenize(r.prompt));
      const std::size_t h = sample.image.dim(1), wd = sample.image.dim(2);
      out.total = segmentation_loss(model.segment(vision, d, h, wd, mode), sample.mask);
      out.terms["seg"] = out.total.item();
      break;
    }
    case TaskKind::kVqa:
    case TaskKind::kMlm: {
      const TokenIds prompt = vocab.tokenize(r.prompt);
      const Tensor fused = model.fuse_text(vision, prompt);
      const DecoderTargets t = make_decoder_targets(prompt, answer_ids(vocab, r.answer));
      out.total = text_loss(model.text_decoder.logits(t.input, fused), t.targets);
      out.terms["text"] = out.total.item();
      break;
    }
  }
  return out;
}

// --------------------------------------------------------------- checkpoint

namespace {

constexpr char kMagic[4] = {'U', 'H', 'C', 'K'};
const std::string kConfigPrefix = "__config.";
const std::string kAdamM = "__adam.m.";
const std::string kAdamV = "__adam.v.";

Tensor scalar_entry(double v) { return Tensor::scalar(v); }

std::map<std::string, Tensor> to_entries(const Checkpoint& c) {
  std::map<std::string, Tensor> e;
  for (const auto& [k, v] : c.params) e[k] = v;
  for (const auto& [k, v] : c.adam_m) e[kAdamM + k] = v;
  for (const auto& [k, v] : c.adam_v) e[kAdamV + k] = v;
  for (const auto& [k, v] : c.model.architecture_entries()) e[kConfigPrefix + k] = scalar_entry(v);
  e["__meta.upsampler"] = scalar_entry(c.model.upsampler == UpsampleMode::kLearnable ? 1.0 : 0.0);
  e["__adam.step"] = scalar_entry(static_cast<double>(c.adam_step));
  e["__meta.stage"] = scalar_entry(static_cast<double>(c.stage));
  e["__meta.step"] = scalar_entry(static_cast<double>(c.step));
  e["__meta.stage_steps"] = scalar_entry(static_cast<double>(c.stage_steps));
  // 64-bit seed split into exactly representable halves.
  e["__meta.seed_hi"] = scalar_entry(static_cast<double>(c.seed >> 32));
  e["__meta.seed_lo"] = scalar_entry(static_cast<double>(c.seed & 0xffffffffULL));
  return e;
}

std::size_t as_count(const Tensor& t, const std::string& key) {
  if (t.numel() != 1) throw FormatError("checkpoint entry " + key + " must be a scalar");
  const double v = t[0];
  if (!(v >= 0.0) || v != std::floor(v) || v > 9.0e15) {
    throw FormatError("checkpoint entry " + key + " is not a count");
  }
  return static_cast<std::size_t>(v);
}

ModelConfig config_from_entries(const std::map<std::string, std::size_t>& e) {
  auto get = [&](const std::string& k) {
    auto it = e.find(k);
    if (it == e.end()) throw FormatError("checkpoint lacks config entry " + k);
    return it->second;
  };
  ModelConfig m;
  m.model_dim = get("M");
  m.text_dim = get("N");
  m.heads = get("heads");
  m.encoder_layers = get("encoder_layers");
  m.decoder_layers = get("decoder_layers");
  m.text_encoder_layers = get("text_encoder_layers");
  m.text_decoder_layers = get("text_decoder_layers");
  m.num_queries = get("K");
  m.fusion_queries = get("L_f");
  m.num_classes = get("num_classes");
  m.num_morph = get("num_morph");
  m.stem_stride = get("stem_stride");
  m.mlp_ratio = get("mlp_ratio");
  m.mask_dim = get("mask_dim");
  m.upsampler_hidden = get("upsampler_hidden");
  m.integrate_backbone = get("integrate_backbone") != 0;
  m.vocab_size = get("vocab_size");
  m.backbone_channels.resize(get("backbone_levels"));
  for (std::size_t i = 0; i < m.backbone_channels.size(); ++i) {
    m.backbone_channels[i] = get("backbone_channels." + std::to_string(i));
  }
  return m;
}

std::string format_value(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

bool same_tensor(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  auto x = a.data(), y = b.data();
  return std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) == 0;
}

bool same_map(const std::map<std::string, Tensor>& a, const std::map<std::string, Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (auto ia = a.begin(), ib = b.begin(); ia != a.end(); ++ia, ++ib) {
    if (ia->first != ib->first || !same_tensor(ia->second, ib->second)) return false;
  }
  return true;
}

}  // namespace

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
  const auto entries = to_entries(ckpt);
  out.write(kMagic, 4);
  io::put_u32(out, kCheckpointVersion);
  io::put_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    io::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(out, t);
  }
  if (!out) throw DataError("checkpoint write failed");
}

Checkpoint read_checkpoint(std::istream& in) {
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError("not a checkpoint: bad magic (expected UHCK)");
  }
  Checkpoint c;
  std::map<std::string, std::size_t> config;
  try {
    const std::uint32_t version = io::get_u32(in);
    if (version != kCheckpointVersion) {
      throw VersionMismatchError("checkpoint version " + std::to_string(version) +
                                 " is not supported (expected " +
                                 std::to_string(kCheckpointVersion) + ")");
    }
    const std::uint32_t count = io::get_u32(in);
    std::uint64_t seed_hi = 0, seed_lo = 0;
    bool learnable = true;
    for (std::uint32_t i = 0; i < count; ++i) {
      const std::uint32_t len = io::get_u32(in);
      if (len == 0 || len > 4096) throw FormatError("checkpoint entry name length " + std::to_string(len));
      std::string name(len, '\0');
      in.read(name.data(), len);
      if (!in) throw FormatError("checkpoint truncated in entry name");
      Tensor t = read_tensor(in);
      if (name.rfind(kConfigPrefix, 0) == 0) {
        config[name.substr(kConfigPrefix.size())] = as_count(t, name);
      } else if (name.rfind(kAdamM, 0) == 0) {
        c.adam_m[name.substr(kAdamM.size())] = t;
      } else if (name.rfind(kAdamV, 0) == 0) {
        c.adam_v[name.substr(kAdamV.size())] = t;
      } else if (name == "__adam.step") {
        c.adam_step = as_count(t, name);
      } else if (name == "__meta.stage") {
        c.stage = as_count(t, name);
      } else if (name == "__meta.step") {
        c.step = as_count(t, name);
      } else if (name == "__meta.stage_steps") {
        c.stage_steps = as_count(t, name);
      } else if (name == "__meta.seed_hi") {
        seed_hi = as_count(t, name);
      } else if (name == "__meta.seed_lo") {
        seed_lo = as_count(t, name);
      } else if (name == "__meta.upsampler") {
        learnable = as_count(t, name) != 0;
      } else if (name.rfind("__", 0) == 0) {
        throw FormatError("unknown checkpoint entry " + name);
      } else {
        c.params[name] = t;
      }
    }
    c.seed = (seed_hi << 32) | seed_lo;
    c.model = config_from_entries(config);
    c.model.upsampler = learnable ? UpsampleMode::kLearnable : UpsampleMode::kBilinear;
  } catch (const FormatError&) {
    throw;
  } catch (const DataError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  return c;
}

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  write_checkpoint(out, ckpt);
}

Checkpoint load_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw MissingFileError(path.string());
  std::ifstream in(path, std::ios::binary);
  return read_checkpoint(in);
}

Checkpoint capture(const UniHema& model, std::uint64_t seed) {
  Checkpoint c;
  c.model = model.config();
  c.seed = seed;
  for (const auto& [name, p] : model.parameters().all()) c.params[name] = p.detach();
  return c;
}

void check_architecture(const ModelConfig& expected, const ModelConfig& found) {
  const auto e = expected.architecture_entries();
  const auto f = found.architecture_entries();
  std::map<std::string, double> fm(f.begin(), f.end());
  std::map<std::string, double> em(e.begin(), e.end());
  std::vector<ConfigMismatchError::Entry> diff;
  for (const auto& [k, v] : em) {
    auto it = fm.find(k);
    if (it == fm.end()) {
      diff.push_back({k, format_value(v), "(absent)"});
    } else if (it->second != v) {
      diff.push_back({k, format_value(v), format_value(it->second)});
    }
  }
  for (const auto& [k, v] : fm) {
    if (!em.count(k)) diff.push_back({k, "(absent)", format_value(v)});
  }
  if (!diff.empty()) throw ConfigMismatchError(std::move(diff));
}

void restore(UniHema& model, const Checkpoint& ckpt) {
  check_architecture(model.config(), ckpt.model);
  auto& params = model.parameters().all();
  for (auto& [name, p] : params) {
    auto it = ckpt.params.find(name);
    if (it == ckpt.params.end()) throw FormatError("checkpoint lacks parameter " + name);
    if (it->second.shape() != p.shape()) {
      throw FormatError("checkpoint parameter " + name + " has shape " +
                        shape_str(it->second.shape()) + ", model expects " + shape_str(p.shape()));
    }
    auto src = it->second.data();
    std::copy(src.begin(), src.end(), p.mutable_data().begin());
  }
  for (const auto& [name, _] : ckpt.params) {
    if (!params.count(name)) throw FormatError("checkpoint has unknown parameter " + name);
  }
}

bool identical(const Checkpoint& a, const Checkpoint& b) {
  return same_map(a.params, b.params) && same_map(a.adam_m, b.adam_m) &&
         same_map(a.adam_v, b.adam_v) && a.adam_step == b.adam_step && a.stage == b.stage &&
         a.step == b.step && a.stage_steps == b.stage_steps && a.seed == b.seed &&
         a.model.architecture_entries() == b.model.architecture_entries() &&
         a.model.upsampler == b.model.upsampler;
}

// ------------------------------------------------------------------- stages

SamplePools load_pools(const Dataset& data, const std::string& split) {
  SamplePools pools;
  for (const auto& [tag, _] : data.manifest().tasks) {
    const TaskKind task = task_from_tag(tag);
    auto& pool = pools[task];
    for (const SampleRecord* r : data.records(task, split)) pool.push_back(data.load(*r));
  }
  return pools;
}

std::size_t stage_step_count(const TrainConfig& cfg, std::size_t stage, const SamplePools& pools) {
  const StageSpec spec = stage_spec(stage);
  if (cfg.steps[stage - 1] != 0) return cfg.steps[stage - 1];
  // One epoch is a full pass over the largest pool of the stage's tasks.
  std::size_t largest = 0;
  for (TaskKind t : spec.tasks) {
    auto it = pools.find(t);
    if (it != pools.end()) largest = std::max(largest, it->second.size());
  }
  const std::size_t per_epoch = (largest + cfg.batch_per_task - 1) / cfg.batch_per_task;
  return cfg.epochs[stage - 1] * per_epoch;
}

namespace {

// Disables gradient tracking on frozen parameters for the scope of a stage so
// backward skips them; restores every flag on exit.
class FreezeScope {
 public:
  FreezeScope(ParameterStore& store, const std::vector<std::string>& trainable) : store_(store) {
    std::set<std::string> keep(trainable.begin(), trainable.end());
    for (auto& [name, p] : store_.all()) {
      saved_.emplace_back(name, p.requires_grad());
      p.set_requires_grad(keep.count(name) != 0);
    }
  }
  ~FreezeScope() {
    for (const auto& [name, flag] : saved_) store_.at(name).set_requires_grad(flag);
  }
  FreezeScope(const FreezeScope&) = delete;
  FreezeScope& operator=(const FreezeScope&) = delete;

 private:
  ParameterStore& store_;
  std::vector<std::pair<std::string, bool>> saved_;
};

}  // namespace

StageResult run_stage(UniHema& model, const TrainConfig& cfg, const Vocabulary& vocab,
                      const SamplePools& pools, const StageOptions& options) {
  const StageSpec spec = stage_spec(options.stage);
  const std::size_t k = options.stage;

  // Ordering: a fresh stage starts from the previous stage's final
  // checkpoint; a resume continues an unfinished run of the same stage.
  bool resume = false;
  if (options.init) {
    const Checkpoint& init = *options.init;
    if (init.stage == k && init.step < init.stage_steps) {
      resume = true;
    } else if (init.stage + 1 != k) {
      throw OrderingError("stage " + std::to_string(k) + " needs the stage " +
                          std::to_string(k - 1) + " checkpoint, got a stage " +
                          std::to_string(init.stage) + " checkpoint");
    } else if (init.step < init.stage_steps) {
      throw OrderingError("stage " + std::to_string(init.stage) + " checkpoint is unfinished (" +
                          std::to_string(init.step) + "/" + std::to_string(init.stage_steps) +
                          " steps)");
    }
    restore(model, init);
  } else if (k != 1) {
    throw OrderingError("stage " + std::to_string(k) + " needs the stage " +
                        std::to_string(k - 1) + " checkpoint");
  }

  const std::vector<std::string> names = trainable_names(model.parameters(), spec);
  const std::size_t total = stage_step_count(cfg, k, pools);
  const UpsampleMode mode = stage_upsample_mode(k, cfg.model.upsampler);

  Adam adam;
  std::size_t start = 0;
  if (resume) {
    const Checkpoint& init = *options.init;
    if (init.stage_steps != total) {
      throw ConfigError("resume: checkpoint plans " + std::to_string(init.stage_steps) +
                        " steps, configuration gives " + std::to_string(total));
    }
    if (init.seed != cfg.seed) throw ConfigError("resume: checkpoint seed differs from config");
    for (const auto& [n, t] : init.adam_m) adam.first_moments()[n] = t.clone();
    for (const auto& [n, t] : init.adam_v) adam.second_moments()[n] = t.clone();
    adam.set_steps(init.adam_step);
    start = init.step;
  }

  std::map<TaskKind, std::size_t> sizes;
  for (TaskKind t : spec.tasks) {
    auto it = pools.find(t);
    sizes[t] = it == pools.end() ? 0 : it->second.size();
  }
  const std::uint64_t batch_seed = mix_seed(cfg.seed, 0x57a9e0 + k);

  if (options.log && options.write_header) *options.log << "step,stage,task,loss\n";

  StageResult result;
  FreezeScope freeze(model.parameters(), names);
  std::size_t step = start;
  const std::size_t end = std::min(total, options.stop_after);
  for (; step < end; ++step) {
    const auto batch = compose_batch(sizes, spec.tasks, cfg.batch_per_task, batch_seed, step);
    if (options.on_batch) options.on_batch(step, batch);
    model.parameters().zero_grad();
    const double inv = 1.0 / static_cast<double>(batch.size());
    std::map<TaskKind, std::pair<double, std::size_t>> per_task;
    double step_loss = 0.0;
    for (const auto& item : batch) {
      const Sample& s = pools.at(item.task)[item.index];
      SampleLoss l = sample_loss(model, vocab, s, cfg.loss, mode);
      // Per-sample backward keeps only one graph alive at a time.
      scale(l.total, inv).backward();
      const double v = l.total.item();
      step_loss += v * inv;
      per_task[item.task].first += v;
      per_task[item.task].second += 1;
    }
    clip_grad_norm(model.parameters(), names, cfg.grad_clip);
    adam.step(model.parameters(), names, warmup_lr(cfg.learning_rate, cfg.warmup_steps, step));
    result.step_losses.push_back(step_loss);
    if (options.log) {
      for (const auto& [task, acc] : per_task) {
        *options.log << step << ',' << k << ',' << task_tag(task) << ','
                     << acc.first / static_cast<double>(acc.second) << '\n';
      }
    }
  }
  model.parameters().zero_grad();

  Checkpoint& c = result.checkpoint;
  c = capture(model, cfg.seed);
  c.adam_m = adam.first_moments();
  c.adam_v = adam.second_moments();
  for (auto& [n, t] : c.adam_m) t = t.clone();
  for (auto& [n, t] : c.adam_v) t = t.clone();
  c.adam_step = adam.steps();
  c.stage = k;
  c.step = step;
  c.stage_steps = total;
  return result;
}

}  // namespace unihema
