#include "unihema/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "unihema/error.hpp"
#include "unihema/nn.hpp"
#include "unihema/tensor_io.hpp"

namespace unihema {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<std::string>& cell_class_names() {
  static const std::vector<std::string> names{"RBC", "WBC", "Parasite", "Sickle"};
  return names;
}

const std::vector<std::string>& morph_flag_names() {
  static const std::vector<std::string> names{"dark_nucleus", "pale_center", "granular",
                                              "lobed_nucleus", "vacuolated", "enlarged"};
  return names;
}

const std::vector<std::string>& disease_names() {
  static const std::vector<std::string> names{"malaria", "sickle", "leukemia", "anemia",
                                              "healthy"};
  return names;
}

std::size_t disease_index(const std::string& name) {
  const auto& d = disease_names();
  auto it = std::find(d.begin(), d.end(), name);
  if (it == d.end()) throw DataError("unknown disease '" + name + "'");
  return static_cast<std::size_t>(it - d.begin());
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Box ellipse_box(const Cell& c, std::size_t width, std::size_t height) {
  const double co = std::cos(c.theta), si = std::sin(c.theta);
  const double hx = std::sqrt(c.a * c.a * co * co + c.b * c.b * si * si);
  const double hy = std::sqrt(c.a * c.a * si * si + c.b * c.b * co * co);
  return {c.cx / static_cast<double>(width), c.cy / static_cast<double>(height),
          2.0 * hx / static_cast<double>(width), 2.0 * hy / static_cast<double>(height)};
}

namespace {

constexpr int kSuper = 4;

// Ellipse-local coordinates; inside when u² + v² ≤ 1.
struct Local {
  double u, v;
};

Local to_local(const Cell& c, double x, double y) {
  const double dx = x - c.cx, dy = y - c.cy;
  const double co = std::cos(c.theta), si = std::sin(c.theta);
  return {(dx * co + dy * si) / c.a, (-dx * si + dy * co) / c.b};
}

bool inside(const Local& p) { return p.u * p.u + p.v * p.v <= 1.0; }

double sq(double x) { return x * x; }

// Per-class flag probabilities, columns follow MorphFlag.
constexpr double kMorphProb[kNumCellClasses][kNumMorphFlags] = {
    {0.05, 0.35, 0.05, 0.00, 0.10, 0.15},  // RBC
    {0.50, 0.10, 0.50, 0.50, 0.20, 0.30},  // WBC
    {0.60, 0.10, 0.30, 0.20, 0.20, 0.20},  // Parasite
    {0.10, 0.20, 0.10, 0.00, 0.10, 0.20},  // Sickle
};

constexpr std::array<double, 3> kBaseColor[kNumCellClasses] = {
    {0.86, 0.36, 0.36}, {0.74, 0.70, 0.90}, {0.62, 0.38, 0.70}, {0.72, 0.24, 0.30}};

Cell sample_cell(Rng& rng, CellClass cls, bool anemic, double scale) {
  Cell c;
  c.cls = cls;
  const auto k = static_cast<std::size_t>(cls);
  for (std::size_t f = 0; f < kNumMorphFlags; ++f) {
    double p = kMorphProb[k][f];
    if (anemic && cls == CellClass::kRbc) {
      if (f == kPaleCenter) p = 0.8;
      if (f == kEnlarged) p = 0.3;
    }
    c.morph[f] = rng.bernoulli(p) ? 1 : 0;
  }
  switch (cls) {
    case CellClass::kRbc:
      c.a = rng.uniform(4.0, 5.5);
      c.b = c.a * rng.uniform(0.85, 1.0);
      break;
    case CellClass::kWbc:
      c.a = rng.uniform(6.0, 7.5);
      c.b = c.a * rng.uniform(0.85, 1.0);
      break;
    case CellClass::kParasite:
      c.a = rng.uniform(2.5, 3.5);
      c.b = c.a * rng.uniform(0.7, 1.0);
      break;
    case CellClass::kSickle:
      c.a = rng.uniform(6.0, 8.0);
      c.b = rng.uniform(2.0, 2.8);
      break;
  }
  const double grow = c.morph[kEnlarged] ? 1.3 : 1.0;
  c.a *= grow * scale;
  c.b *= grow * scale;
  c.theta = rng.uniform(0.0, std::numbers::pi);
  for (std::size_t ch = 0; ch < 3; ++ch) {
    c.color[ch] = std::clamp(kBaseColor[k][ch] + rng.uniform(-0.04, 0.04), 0.0, 1.0);
  }
  return c;
}

double box_iou(const Box& a, const Box& b) { return iou(a, b); }

}  // namespace

SyntheticScene generate_scene(std::uint64_t seed, TaskKind task, bool domain_shift) {
  Rng rng(mix_seed(seed, 0x5ce7e));
  SyntheticScene s;
  s.seed = seed;
  s.domain_shift = domain_shift;
  const bool dense = task == TaskKind::kDetection || task == TaskKind::kSegmentation;

  if (!dense) {
    s.width = s.height = 32;
    const auto cls = static_cast<CellClass>(rng.integer(0, kNumCellClasses - 1));
    const bool anemic = cls == CellClass::kRbc && rng.bernoulli(0.5);
    switch (cls) {
      case CellClass::kRbc: s.disease = anemic ? "anemia" : "healthy"; break;
      case CellClass::kWbc: s.disease = "leukemia"; break;
      case CellClass::kParasite: s.disease = "malaria"; break;
      case CellClass::kSickle: s.disease = "sickle"; break;
    }
    Cell c = sample_cell(rng, cls, anemic, 1.6);
    c.a = std::min(c.a, 14.0);
    c.b = std::min(c.b, 14.0);
    c.cx = c.cy = 16.0;
    s.cells.push_back(c);
    return s;
  }

  s.width = s.height = 64;
  s.disease = disease_names()[static_cast<std::size_t>(rng.integer(0, 4))];
  const auto n = static_cast<std::size_t>(rng.integer(2, 8));
  std::vector<CellClass> classes(n, CellClass::kRbc);
  auto fill = [&](CellClass c, std::int64_t lo, std::int64_t hi) {
    const auto k = static_cast<std::size_t>(rng.integer(lo, std::min<std::int64_t>(hi, n)));
    for (std::size_t i = 0; i < k; ++i) classes[i] = c;
  };
  const bool anemic = s.disease == "anemia";
  if (s.disease == "malaria") fill(CellClass::kParasite, 1, static_cast<std::int64_t>(n) - 1);
  if (s.disease == "sickle") fill(CellClass::kSickle, 1, std::min<std::int64_t>(3, n - 1));
  if (s.disease == "leukemia") fill(CellClass::kWbc, 2, 4);
  if (s.disease == "healthy" && rng.bernoulli(0.3)) classes[0] = CellClass::kWbc;
  std::shuffle(classes.begin(), classes.end(), rng.engine());

  std::vector<Box> boxes;
  for (CellClass cls : classes) {
    Cell c = sample_cell(rng, cls, anemic, 1.0);
    for (int attempt = 0; attempt < 50; ++attempt) {
      const Box extent = ellipse_box(c, s.width, s.height);
      const double hx = extent.w * 32.0, hy = extent.h * 32.0;
      c.cx = rng.uniform(hx + 0.5, 64.0 - hx - 0.5);
      c.cy = rng.uniform(hy + 0.5, 64.0 - hy - 0.5);
      const Box box = ellipse_box(c, s.width, s.height);
      bool ok = true;
      for (const auto& other : boxes) ok = ok && box_iou(box, other) <= 0.3;
      if (ok) {
        boxes.push_back(box);
        s.cells.push_back(c);
        break;
      }
    }
  }
  return s;
}

double ellipse_coverage(const Cell& cell, std::size_t x, std::size_t y) {
  int hits = 0;
  for (int sy = 0; sy < kSuper; ++sy) {
    for (int sx = 0; sx < kSuper; ++sx) {
      const double px = static_cast<double>(x) + (sx + 0.5) / kSuper;
      const double py = static_cast<double>(y) + (sy + 0.5) / kSuper;
      hits += inside(to_local(cell, px, py)) ? 1 : 0;
    }
  }
  return hits / static_cast<double>(kSuper * kSuper);
}

namespace {

using Rgb = std::array<double, 3>;

Rgb lerp(const Rgb& a, const Rgb& b, double t) {
  return {a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t};
}

// Color of a cell at local coordinates; every modifier lives strictly inside
// the unit disc so it never changes the silhouette.
Rgb cell_color(const Cell& c, const Local& p) {
  const double r2 = p.u * p.u + p.v * p.v;
  const Rgb vacuole{0.98, 0.97, 0.98};
  if (c.morph[kVacuolated]) {
    if (sq(p.u - 0.5) + sq(p.v + 0.3) < sq(0.16) || sq(p.u + 0.4) + sq(p.v - 0.45) < sq(0.16)) {
      return vacuole;
    }
  }
  const bool nucleated = c.cls == CellClass::kWbc || c.cls == CellClass::kParasite ||
                         c.morph[kDarkNucleus];
  if (nucleated) {
    const Rgb nucleus = c.morph[kDarkNucleus] ? Rgb{0.18, 0.06, 0.30} : Rgb{0.45, 0.25, 0.60};
    if (c.morph[kLobedNucleus]) {
      for (int k = 0; k < 3; ++k) {
        const double ang = 2.0 * std::numbers::pi * k / 3.0;
        if (sq(p.u - 0.38 * std::cos(ang)) + sq(p.v - 0.38 * std::sin(ang)) < sq(0.28)) {
          return nucleus;
        }
      }
    } else {
      const double radius = c.cls == CellClass::kWbc ? 0.45 : 0.40;
      if (r2 < sq(radius)) return nucleus;
    }
  }
  Rgb color = c.color;
  if (c.morph[kGranular] && r2 < 0.7 &&
      std::sin(9.0 * std::numbers::pi * p.u) * std::sin(9.0 * std::numbers::pi * p.v) > 0.55) {
    color = {color[0] * 0.7, color[1] * 0.7, color[2] * 0.7};
  }
  if (c.morph[kPaleCenter] && r2 < 0.16) color = lerp(color, {0.97, 0.90, 0.90}, 0.65);
  return color;
}

}  // namespace

RenderedScene render(const SyntheticScene& scene) {
  const std::size_t h = scene.height, w = scene.width;
  RenderedScene out;
  out.image = Tensor::zeros({3, h, w});
  out.mask.assign(h * w, 0);
  auto img = out.image.mutable_data();

  Rng noise(mix_seed(scene.seed, 0xb6));
  const double ph1 = noise.uniform(0.0, 6.28), ph2 = noise.uniform(0.0, 6.28);
  const Rgb bg = scene.domain_shift ? Rgb{0.84, 0.88, 0.95} : Rgb{0.93, 0.85, 0.82};
  const Rgb tint = scene.domain_shift ? Rgb{0.80, 1.10, 1.20} : Rgb{1.0, 1.0, 1.0};
  const double amp = scene.domain_shift ? 0.06 : 0.03;
  const double grain = scene.domain_shift ? 0.03 : 0.01;

  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double wave = amp * std::sin(0.31 * x + ph1) * std::cos(0.27 * y + ph2);
      Rgb background{bg[0] + wave, bg[1] + wave, bg[2] + wave};
      Rgb acc{0.0, 0.0, 0.0};
      int covered = 0;
      for (int sy = 0; sy < kSuper; ++sy) {
        for (int sx = 0; sx < kSuper; ++sx) {
          const double px = static_cast<double>(x) + (sx + 0.5) / kSuper;
          const double py = static_cast<double>(y) + (sy + 0.5) / kSuper;
          Rgb c = background;
          // Later cells are painted on top.
          for (auto it = scene.cells.rbegin(); it != scene.cells.rend(); ++it) {
            const Local p = to_local(*it, px, py);
            if (inside(p)) {
              c = cell_color(*it, p);
              for (std::size_t ch = 0; ch < 3; ++ch) c[ch] *= tint[ch];
              ++covered;
              break;
            }
          }
          for (std::size_t ch = 0; ch < 3; ++ch) acc[ch] += c[ch];
        }
      }
      const double g = noise.normal(0.0, grain);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        img[(ch * h + y) * w + x] = std::clamp(acc[ch] / (kSuper * kSuper) + g, 0.0, 1.0);
      }
      out.mask[y * w + x] = 2 * covered > kSuper * kSuper ? 1 : 0;
    }
  }
  for (const auto& c : scene.cells) {
    GroundTruthObject o;
    o.box = ellipse_box(c, w, h);
    o.cls = static_cast<std::size_t>(c.cls);
    o.morph.assign(c.morph.begin(), c.morph.end());
    out.objects.push_back(o);
  }
  return out;
}

// ------------------------------------------------------------------ text

namespace {

std::string lower(std::string s) {
  for (auto& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return s;
}

struct QuestionTemplate {
  const char* text;
  int flag;  // -1 asks for the class
};

constexpr QuestionTemplate kQuestions[] = {
    {"what is the cell class ?", -1},     {"is the nucleus dark ?", kDarkNucleus},
    {"is the center pale ?", kPaleCenter}, {"is the cytoplasm granular ?", kGranular},
    {"is the nucleus lobed ?", kLobedNucleus}, {"is the cell vacuolated ?", kVacuolated},
    {"is the cell enlarged ?", kEnlarged},
};

std::vector<std::string> sentence_words(const Cell& c) {
  return {"the",
          lower(cell_class_names()[static_cast<std::size_t>(c.cls)]),
          "cell",
          "has",
          "a",
          c.morph[kDarkNucleus] ? "dark" : "light",
          "nucleus,",
          "a",
          c.morph[kPaleCenter] ? "pale" : "full",
          "center",
          "and",
          c.morph[kGranular] ? "granular" : "smooth",
          "cytoplasm."};
}

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) out += (out.empty() ? "" : " ") + w;
  return out;
}

}  // namespace

QaPair make_question(const Cell& cell, std::uint64_t seed) {
  const auto& q = kQuestions[mix_seed(seed, 0x9a) % std::size(kQuestions)];
  QaPair p;
  p.question = q.text;
  p.answer = q.flag < 0 ? lower(cell_class_names()[static_cast<std::size_t>(cell.cls)])
                        : (cell.morph[static_cast<std::size_t>(q.flag)] ? "yes" : "no");
  return p;
}

MaskedSentence make_masked_sentence(const Cell& cell, std::uint64_t seed) {
  auto words = sentence_words(cell);
  MaskedSentence m;
  m.sentence = join(words);
  // Maskable slots: class, nucleus, center, cytoplasm.
  constexpr std::size_t kSlots[] = {1, 5, 8, 11};
  words[kSlots[mix_seed(seed, 0x3a) % std::size(kSlots)]] = Vocabulary::reserved()[Vocabulary::kMask];
  m.masked = join(words);
  return m;
}

TaskPrompt make_prompt(TaskKind task, const std::string& disease) {
  disease_index(disease);
  switch (task) {
    case TaskKind::kDetection: return TaskPrompt::detection(disease);
    case TaskKind::kSegmentation: return TaskPrompt::segmentation(disease);
    case TaskKind::kClassification: return TaskPrompt::classification();
    default: break;
  }
  throw UsageError("vqa and mlm prompts are built from a cell, not a disease");
}

Vocabulary corpus_vocabulary() {
  std::vector<std::string> words;
  auto add = [&](const std::string& text) {
    for (auto& w : split_words(text)) words.push_back(w);
  };
  for (const auto& d : disease_names()) add(TaskPrompt::detection(d).text);
  for (const auto& q : kQuestions) add(TaskPrompt::vqa(q.text).text);
  add("yes no");
  for (const auto& c : cell_class_names()) add(lower(c));
  add(kMlmPrefix);
  add("the cell has a dark light nucleus, a pale full center and granular smooth cytoplasm.");
  return Vocabulary(words);
}

// ---------------------------------------------------------------- dataset

bool SampleRecord::operator==(const SampleRecord& o) const {
  if (objects.size() != o.objects.size()) return false;
  for (std::size_t i = 0; i < objects.size(); ++i) {
    if (!(objects[i].box == o.objects[i].box) || objects[i].cls != o.objects[i].cls ||
        objects[i].morph != o.objects[i].morph) {
      return false;
    }
  }
  return id == o.id && split == o.split && task == o.task && image == o.image &&
         prompt == o.prompt && disease == o.disease && mask == o.mask && label == o.label &&
         answer == o.answer;
}

namespace {

std::uint64_t sample_seed(std::uint64_t seed, TaskKind task, const std::string& split,
                          std::size_t index) {
  const std::uint64_t t = mix_seed(seed, static_cast<std::uint64_t>(task) + 1);
  const std::uint64_t s = mix_seed(t, split == "train" ? 11 : split == "eval" ? 13 : 17);
  return mix_seed(s, index);
}

std::string sample_id(TaskKind task, const std::string& split, std::size_t index) {
  std::ostringstream os;
  os << task_tag(task) << '-' << split << '-';
  os.width(5);
  os.fill('0');
  os << index;
  return os.str();
}

}  // namespace

Sample synthesize_sample(std::uint64_t seed, TaskKind task, const std::string& split,
                         std::size_t index) {
  if (split != "train" && split != "eval" && split != "shift") {
    throw UsageError("split must be train, eval or shift");
  }
  const std::uint64_t s = sample_seed(seed, task, split, index);
  const SyntheticScene scene = generate_scene(s, task, split == "shift");
  RenderedScene r = render(scene);

  Sample out;
  SampleRecord& rec = out.record;
  rec.id = sample_id(task, split, index);
  rec.split = split;
  rec.task = task;
  rec.image = "images/" + rec.id + ".uhtn";
  rec.disease = scene.disease;
  switch (task) {
    case TaskKind::kDetection:
      rec.prompt = make_prompt(task, scene.disease).text;
      rec.objects = r.objects;
      break;
    case TaskKind::kSegmentation:
      rec.prompt = make_prompt(task, scene.disease).text;
      rec.mask = "images/" + rec.id + ".mask.uhtn";
      out.mask = r.mask;
      break;
    case TaskKind::kClassification:
      rec.label = static_cast<std::size_t>(scene.cells.front().cls);
      break;
    case TaskKind::kVqa: {
      const QaPair qa = make_question(scene.cells.front(), s);
      rec.prompt = TaskPrompt::vqa(qa.question).text;
      rec.answer = qa.answer;
      break;
    }
    case TaskKind::kMlm: {
      const MaskedSentence m = make_masked_sentence(scene.cells.front(), s);
      rec.prompt = TaskPrompt::mlm(m.masked).text;
      rec.answer = m.sentence;
      break;
    }
  }
  out.image = r.image;
  return out;
}

json record_to_json(const SampleRecord& r) {
  json j;
  j["id"] = r.id;
  j["split"] = r.split;
  j["task"] = task_tag(r.task);
  j["image"] = r.image;
  j["prompt"] = r.prompt;
  j["disease"] = r.disease;
  switch (r.task) {
    case TaskKind::kDetection: {
      json objs = json::array();
      for (const auto& o : r.objects) {
        objs.push_back({{"box", {o.box.cx, o.box.cy, o.box.w, o.box.h}},
                        {"class", cell_class_names().at(o.cls)},
                        {"morph", o.morph}});
      }
      j["objects"] = objs;
      break;
    }
    case TaskKind::kSegmentation: j["mask"] = r.mask; break;
    case TaskKind::kClassification:
      j["label"] = r.label;
      j["class"] = cell_class_names().at(r.label);
      break;
    case TaskKind::kVqa:
    case TaskKind::kMlm: j["answer"] = r.answer; break;
  }
  return j;
}

SampleRecord record_from_json(const json& j, const std::string& file, std::size_t line) {
  auto fail = [&](const std::string& what) { throw MalformedRecordError(file, line, what); };
  SampleRecord r;
  try {
    if (!j.is_object()) fail("not a JSON object");
    r.id = j.at("id").get<std::string>();
    r.split = j.at("split").get<std::string>();
    if (r.split != "train" && r.split != "eval") fail("split must be train or eval");
    try {
      r.task = task_from_tag(j.at("task").get<std::string>());
    } catch (const UsageError& e) {
      fail(e.what());
    }
    r.image = j.at("image").get<std::string>();
    r.prompt = j.at("prompt").get<std::string>();
    r.disease = j.at("disease").get<std::string>();
    const auto& classes = cell_class_names();
    switch (r.task) {
      case TaskKind::kDetection:
        for (const auto& o : j.at("objects")) {
          GroundTruthObject g;
          const auto& b = o.at("box");
          if (!b.is_array() || b.size() != 4) fail("box needs four numbers");
          g.box = {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(),
                   b[3].get<double>()};
          auto it = std::find(classes.begin(), classes.end(), o.at("class").get<std::string>());
          if (it == classes.end()) fail("unknown class");
          g.cls = static_cast<std::size_t>(it - classes.begin());
          g.morph = o.at("morph").get<std::vector<std::uint8_t>>();
          if (g.morph.size() != kNumMorphFlags) fail("morph needs six flags");
          r.objects.push_back(std::move(g));
        }
        break;
      case TaskKind::kSegmentation: r.mask = j.at("mask").get<std::string>(); break;
      case TaskKind::kClassification:
        r.label = j.at("label").get<std::size_t>();
        if (r.label >= classes.size()) fail("label out of range");
        break;
      case TaskKind::kVqa:
      case TaskKind::kMlm: r.answer = j.at("answer").get<std::string>(); break;
    }
    // The prompt route must agree with the ground-truth kind.
    TaskKind routed = TaskKind::kClassification;
    try {
      routed = TaskPrompt::parse(r.prompt).kind;
    } catch (const UsageError&) {
      fail("unroutable prompt");
    }
    const bool dense = r.task == TaskKind::kDetection || r.task == TaskKind::kSegmentation;
    if (dense ? routed != TaskKind::kDetection : routed != r.task) {
      fail("prompt does not match task " + task_tag(r.task));
    }
  } catch (const json::exception& e) {
    fail(e.what());
  }
  return r;
}

json manifest_to_json(const DatasetManifest& m) {
  json tasks = json::object();
  for (const auto& [tag, counts] : m.tasks) {
    tasks[tag] = {{"annotations", "annotations/" + tag + ".jsonl"},
                  {"train", counts.train},
                  {"eval", counts.eval}};
  }
  return {{"format", "unihema-dataset"}, {"version", m.version},   {"seed", m.seed},
          {"vocab", m.vocab},            {"classes", m.classes}, {"morphology", m.morphology},
          {"diseases", m.diseases},      {"tasks", tasks}};
}

DatasetManifest manifest_from_json(const json& j) {
  DatasetManifest m;
  try {
    if (j.at("format").get<std::string>() != "unihema-dataset") {
      throw FormatError("manifest format is not unihema-dataset");
    }
    m.version = j.at("version").get<std::uint32_t>();
    if (m.version != kDatasetVersion) {
      throw VersionMismatchError("dataset version " + std::to_string(m.version) +
                                 " is not supported (expected " +
                                 std::to_string(kDatasetVersion) + ")");
    }
    m.seed = j.at("seed").get<std::uint64_t>();
    m.vocab = j.at("vocab").get<std::string>();
    m.classes = j.at("classes").get<std::vector<std::string>>();
    m.morphology = j.at("morphology").get<std::vector<std::string>>();
    m.diseases = j.at("diseases").get<std::vector<std::string>>();
    for (const auto& [tag, t] : j.at("tasks").items()) {
      task_from_tag(tag);
      m.tasks[tag] = {t.at("train").get<std::size_t>(), t.at("eval").get<std::size_t>()};
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  } catch (const UsageError& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  }
  return m;
}

namespace {

void write_mask(const fs::path& path, const std::vector<std::uint8_t>& mask, std::size_t h,
                std::size_t w) {
  std::vector<double> v(mask.begin(), mask.end());
  save_tensor(path, Tensor({1, h, w}, std::move(v)));
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

}  // namespace

DatasetManifest write_dataset(const GenerateOptions& options, const fs::path& dir, bool force) {
  if (options.tasks.empty()) throw UsageError("no tasks requested");
  if (fs::exists(dir) && !fs::is_directory(dir)) {
    throw UsageError(dir.string() + " exists and is not a directory");
  }
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) throw UsageError(dir.string() + " is not empty (use --force to overwrite)");
    for (const char* name : {"manifest.json", "vocab.txt", "images", "annotations"}) {
      fs::remove_all(dir / name);
    }
  }
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "annotations");

  DatasetManifest m;
  m.seed = options.seed;
  m.classes = cell_class_names();
  m.morphology = morph_flag_names();
  m.diseases = disease_names();
  corpus_vocabulary().save(dir / m.vocab);

  std::set<TaskKind> seen;
  for (TaskKind task : options.tasks) {
    if (!seen.insert(task).second) continue;
    std::string lines;
    for (const auto& [split, count] : {std::pair<std::string, std::size_t>{"train", options.train_per_task},
                                       {"eval", options.eval_per_task}}) {
      for (std::size_t i = 0; i < count; ++i) {
        const Sample s = synthesize_sample(options.seed, task, split, i);
        save_tensor(dir / s.record.image, s.image);
        if (task == TaskKind::kSegmentation) {
          write_mask(dir / s.record.mask, s.mask, s.image.shape()[1], s.image.shape()[2]);
        }
        lines += record_to_json(s.record).dump() + "\n";
      }
    }
    write_text(dir / ("annotations/" + task_tag(task) + ".jsonl"), lines);
    m.tasks[task_tag(task)] = {options.train_per_task, options.eval_per_task};
  }
  write_text(dir / "manifest.json", manifest_to_json(m).dump(2) + "\n");
  return m;
}

Dataset Dataset::open(const fs::path& dir) {
  Dataset d;
  d.root_ = dir;
  const fs::path manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) throw MissingFileError(manifest_path.string());
  std::ifstream in(manifest_path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }
  d.manifest_ = manifest_from_json(j);
  d.vocab_ = Vocabulary::load(dir / d.manifest_.vocab);

  for (const auto& [tag, counts] : d.manifest_.tasks) {
    const TaskKind task = task_from_tag(tag);
    const std::string rel = "annotations/" + tag + ".jsonl";
    const fs::path path = dir / rel;
    if (!fs::exists(path)) throw MissingFileError(path.string());
    std::ifstream ann(path);
    std::string line;
    std::size_t lineno = 0;
    TaskCounts found;
    auto& records = d.records_[task];
    while (std::getline(ann, line)) {
      ++lineno;
      if (line.empty()) continue;
      json rec;
      try {
        rec = json::parse(line);
      } catch (const json::exception& e) {
        throw MalformedRecordError(rel, lineno, e.what());
      }
      SampleRecord r = record_from_json(rec, rel, lineno);
      if (r.task != task) throw MalformedRecordError(rel, lineno, "task differs from file");
      for (const auto& p : {r.image, r.mask}) {
        if (!p.empty() && !fs::exists(dir / p)) throw MissingFileError((dir / p).string());
      }
      (r.split == "train" ? found.train : found.eval) += 1;
      records.push_back(std::move(r));
    }
    if (found.train != counts.train || found.eval != counts.eval) {
      throw FormatError(rel + ": record counts disagree with the manifest");
    }
  }
  return d;
}

std::vector<const SampleRecord*> Dataset::records(TaskKind task, const std::string& split) const {
  std::vector<const SampleRecord*> out;
  auto it = records_.find(task);
  if (it == records_.end()) return out;
  for (const auto& r : it->second) {
    if (r.split == split) out.push_back(&r);
  }
  return out;
}

const std::vector<SampleRecord>& Dataset::all_records(TaskKind task) const {
  auto it = records_.find(task);
  if (it == records_.end()) throw DataError("dataset has no " + task_tag(task) + " records");
  return it->second;
}

bool Dataset::has_task(TaskKind task) const { return records_.count(task) != 0; }

Tensor Dataset::load_image(const SampleRecord& r) const {
  const fs::path p = root_ / r.image;
  if (!fs::exists(p)) throw MissingFileError(p.string());
  Tensor t = load_tensor(p);
  if (t.ndim() != 3 || t.shape()[0] != 3) throw FormatError(p.string() + ": image must be [3×H×W]");
  return t;
}

std::vector<std::uint8_t> Dataset::load_mask(const SampleRecord& r) const {
  if (r.mask.empty()) throw UsageError("record " + r.id + " has no mask");
  const fs::path p = root_ / r.mask;
  if (!fs::exists(p)) throw MissingFileError(p.string());
  Tensor t = load_tensor(p);
  std::vector<std::uint8_t> out;
  out.reserve(t.numel());
  for (double v : t.data()) {
    if (v != 0.0 && v != 1.0) throw FormatError(p.string() + ": mask values must be 0 or 1");
    out.push_back(v != 0.0 ? 1 : 0);
  }
  return out;
}

Sample Dataset::load(const SampleRecord& r) const {
  Sample s;
  s.record = r;
  s.image = load_image(r);
  if (r.task == TaskKind::kSegmentation) s.mask = load_mask(r);
  return s;
}

}  // namespace unihema
