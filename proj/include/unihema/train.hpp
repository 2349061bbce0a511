#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "unihema/config.hpp"
#include "unihema/data.hpp"
#include "unihema/model.hpp"

namespace unihema {

// ------------------------------------------------------------------ stages

struct StageSpec {
  std::size_t id = 1;
  std::vector<std::string> trainable;  // parameter-name globs, '*' wildcard
  std::vector<TaskKind> tasks;
};

// ConfigError outside 1..6.
StageSpec stage_spec(std::size_t id);
bool glob_match(const std::string& pattern, const std::string& name);
// Names matched by the trainable globs. ConfigError when a glob matches nothing.
std::vector<std::string> trainable_names(const ParameterStore& store, const StageSpec& spec);
// Joint vision training uses plain bilinear upscaling; later stages use the
// configured mode.
UpsampleMode stage_upsample_mode(std::size_t stage, UpsampleMode configured);

// ---------------------------------------------------------------- optimizer

class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // One bias-corrected update of `names`. Parameters without a gradient are
  // treated as having a zero gradient.
  void step(ParameterStore& store, const std::vector<std::string>& names, double lr);

  std::size_t steps() const { return t_; }
  void set_steps(std::size_t t) { t_ = t; }
  std::map<std::string, Tensor>& first_moments() { return m_; }
  std::map<std::string, Tensor>& second_moments() { return v_; }
  const std::map<std::string, Tensor>& first_moments() const { return m_; }
  const std::map<std::string, Tensor>& second_moments() const { return v_; }

 private:
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

// Scales gradients of `names` so their joint L2 norm is at most `max_norm`.
// Returns the norm before clipping.
double clip_grad_norm(ParameterStore& store, const std::vector<std::string>& names,
                      double max_norm);
// Linear warmup over the first `warmup` steps, then constant.
double warmup_lr(double base, std::size_t warmup, std::size_t step);

// ------------------------------------------------------------------ batching

struct BatchItem {
  TaskKind task;
  std::size_t index;  // into that task's pool
  bool operator==(const BatchItem&) const = default;
};

// Round-robin over `tasks`, `per_task` items each. Each task walks a fresh
// seeded permutation of its pool per epoch, so one epoch visits every sample
// once. DataError when a requested pool is empty.
std::vector<BatchItem> compose_batch(const std::map<TaskKind, std::size_t>& pool_sizes,
                                     const std::vector<TaskKind>& tasks, std::size_t per_task,
                                     std::uint64_t seed, std::size_t step);

// -------------------------------------------------------------------- losses

// Answer words without the BOS/EOS frame.
TokenIds answer_ids(const Vocabulary& vocab, const std::string& text);

// Multi-label BCE on the token objectness logits: a token is positive for
// class k when a class-k ground-truth center falls in its grid cell.
Tensor objectness_loss(const Tensor& logits, const SpatialEmbeddings& tokens,
                       const std::vector<GroundTruthObject>& gts);

struct SampleLoss {
  Tensor total;
  std::map<std::string, double> terms;
};

SampleLoss sample_loss(const UniHema& model, const Vocabulary& vocab, const Sample& sample,
                       const LossWeights& weights, UpsampleMode mode);

// --------------------------------------------------------------- checkpoint

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig model;
  std::map<std::string, Tensor> params;
  std::map<std::string, Tensor> adam_m, adam_v;
  std::size_t adam_step = 0;
  std::size_t stage = 0;        // last stage run; 0 = fresh initialization
  std::size_t step = 0;         // steps completed within `stage`
  std::size_t stage_steps = 0;  // planned steps of `stage`
  std::uint64_t seed = 0;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
// FormatError on bad magic or layout, VersionMismatchError on a newer file.
Checkpoint load_checkpoint(const std::filesystem::path& path);
void write_checkpoint(std::ostream& out, const Checkpoint& ckpt);
Checkpoint read_checkpoint(std::istream& in);

// Snapshot of model parameters (deep copies) with no optimizer state.
Checkpoint capture(const UniHema& model, std::uint64_t seed);
// ConfigMismatchError listing every differing architecture key.
void check_architecture(const ModelConfig& expected, const ModelConfig& found);
// Copies checkpoint values into the model's existing parameter tensors.
void restore(UniHema& model, const Checkpoint& ckpt);

// Bitwise equality of two checkpoints, including optimizer state.
bool identical(const Checkpoint& a, const Checkpoint& b);

// ------------------------------------------------------------------- stages

using SamplePools = std::map<TaskKind, std::vector<Sample>>;
SamplePools load_pools(const Dataset& data, const std::string& split);

// Planned step count of a stage for the given pools.
std::size_t stage_step_count(const TrainConfig& cfg, std::size_t stage, const SamplePools& pools);

struct StageOptions {
  std::size_t stage = 1;
  // Previous stage's checkpoint, or a partial checkpoint of this stage to
  // resume. Required for stages above 1.
  std::optional<Checkpoint> init;
  // Stop after this many steps of the stage have been completed in total.
  std::size_t stop_after = std::numeric_limits<std::size_t>::max();
  std::ostream* log = nullptr;  // CSV rows "step,stage,task,loss"
  bool write_header = true;
  // Called with each step's batch before its forward passes.
  std::function<void(std::size_t step, const std::vector<BatchItem>& batch)> on_batch;
};

struct StageResult {
  Checkpoint checkpoint;
  std::vector<double> step_losses;
};

// OrderingError when `init` does not come from the preceding stage (or an
// unfinished run of this stage).
StageResult run_stage(UniHema& model, const TrainConfig& cfg, const Vocabulary& vocab,
                      const SamplePools& pools, const StageOptions& options);

}  // namespace unihema
