#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "unihema/heads.hpp"
#include "unihema/tensor.hpp"
#include "unihema/text.hpp"

namespace unihema {

enum class CellClass : std::uint8_t { kRbc = 0, kWbc = 1, kParasite = 2, kSickle = 3 };
inline constexpr std::size_t kNumCellClasses = 4;
inline constexpr std::size_t kNumMorphFlags = 6;

const std::vector<std::string>& cell_class_names();
const std::vector<std::string>& morph_flag_names();
const std::vector<std::string>& disease_names();
std::size_t disease_index(const std::string& name);  // DataError when unknown

using MorphFlags = std::array<std::uint8_t, kNumMorphFlags>;

enum MorphFlag : std::size_t {
  kDarkNucleus = 0,
  kPaleCenter = 1,
  kGranular = 2,
  kLobedNucleus = 3,
  kVacuolated = 4,
  kEnlarged = 5,
};

struct Cell {
  double cx = 0.0, cy = 0.0;  // pixels
  double a = 1.0, b = 1.0;    // semi-axes, pixels
  double theta = 0.0;         // radians
  CellClass cls = CellClass::kRbc;
  MorphFlags morph{};
  std::array<double, 3> color{};  // base RGB
};

struct SyntheticScene {
  std::size_t width = 64, height = 64;
  std::string disease = "healthy";
  std::vector<Cell> cells;
  std::uint64_t seed = 0;
  bool domain_shift = false;  // altered stain and background statistics
};

// Tight center-size box of a rotated ellipse, normalized to the canvas.
Box ellipse_box(const Cell& cell, std::size_t width, std::size_t height);

// Scene for `task`: det/seg get a 64×64 field with 2–8 cells, the
// single-cell tasks a 32×32 canvas with one centered cell.
SyntheticScene generate_scene(std::uint64_t seed, TaskKind task, bool domain_shift = false);

struct RenderedScene {
  Tensor image;                    // [3×H×W] in [0,1]
  std::vector<std::uint8_t> mask;  // H·W, union of cells, coverage > 0.5
  std::vector<GroundTruthObject> objects;
};

RenderedScene render(const SyntheticScene& scene);

// Fraction of 4×4 sub-samples of pixel (x, y) inside the ellipse.
double ellipse_coverage(const Cell& cell, std::size_t x, std::size_t y);

// Text ground truth derivable from the scene's first cell.
struct QaPair {
  std::string question;  // without the "Q:" prefix
  std::string answer;
};
struct MaskedSentence {
  std::string sentence;  // full sentence
  std::string masked;    // with one word replaced by <mask>
};

QaPair make_question(const Cell& cell, std::uint64_t seed);
MaskedSentence make_masked_sentence(const Cell& cell, std::uint64_t seed);
// Throws DataError for an unknown disease.
TaskPrompt make_prompt(TaskKind task, const std::string& disease);

// Closed vocabulary covering every template word.
Vocabulary corpus_vocabulary();

// ---------------------------------------------------------------- dataset

inline constexpr std::uint32_t kDatasetVersion = 1;

struct SampleRecord {
  std::string id;
  std::string split;  // "train" | "eval"
  TaskKind task = TaskKind::kClassification;
  std::string image;  // path relative to the dataset root
  std::string prompt;
  std::string disease;
  // Ground truth; which fields are meaningful depends on `task`.
  std::vector<GroundTruthObject> objects;  // det
  std::string mask;                        // seg, relative path
  std::size_t label = 0;                   // cls
  std::string answer;                      // vqa answer, mlm full sentence

  bool operator==(const SampleRecord& o) const;
};

struct TaskCounts {
  std::size_t train = 0;
  std::size_t eval = 0;
};

struct DatasetManifest {
  std::uint32_t version = kDatasetVersion;
  std::uint64_t seed = 0;
  std::map<std::string, TaskCounts> tasks;  // keyed by task tag
  std::string vocab = "vocab.txt";
  std::vector<std::string> classes;
  std::vector<std::string> morphology;
  std::vector<std::string> diseases;
};

struct GenerateOptions {
  std::uint64_t seed = 0;
  std::size_t train_per_task = 256;
  std::size_t eval_per_task = 64;
  std::vector<TaskKind> tasks{TaskKind::kDetection, TaskKind::kSegmentation,
                              TaskKind::kClassification, TaskKind::kVqa, TaskKind::kMlm};
};

// An in-memory sample: record plus decoded image and mask.
struct Sample {
  SampleRecord record;
  Tensor image;
  std::vector<std::uint8_t> mask;
};

// Deterministic record + pixels for sample `index` of (task, split). The
// in-memory "shift" split renders with altered stain statistics and is never
// written to disk.
Sample synthesize_sample(std::uint64_t seed, TaskKind task, const std::string& split,
                         std::size_t index);

// Writes the full corpus; refuses a non-empty directory unless `force`.
DatasetManifest write_dataset(const GenerateOptions& options, const std::filesystem::path& dir,
                              bool force = false);

class Dataset {
 public:
  // Validates the manifest, vocabulary and every annotation line.
  static Dataset open(const std::filesystem::path& dir);

  const DatasetManifest& manifest() const { return manifest_; }
  const Vocabulary& vocab() const { return vocab_; }
  const std::filesystem::path& root() const { return root_; }
  // Records of a task and split, in file order.
  std::vector<const SampleRecord*> records(TaskKind task, const std::string& split) const;
  const std::vector<SampleRecord>& all_records(TaskKind task) const;
  bool has_task(TaskKind task) const;

  Tensor load_image(const SampleRecord& r) const;
  std::vector<std::uint8_t> load_mask(const SampleRecord& r) const;
  Sample load(const SampleRecord& r) const;

 private:
  std::filesystem::path root_;
  DatasetManifest manifest_;
  Vocabulary vocab_;
  std::map<TaskKind, std::vector<SampleRecord>> records_;
};

nlohmann::json record_to_json(const SampleRecord& r);
// `where` names the file and line for error reports.
SampleRecord record_from_json(const nlohmann::json& j, const std::string& file, std::size_t line);
nlohmann::json manifest_to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const nlohmann::json& j);

// splitmix64 finalizer, used to derive independent per-sample seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace unihema
