#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "unihema/data.hpp"
#include "unihema/error.hpp"

using namespace unihema;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("unihema_data_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

bool same_cells(const SyntheticScene& a, const SyntheticScene& b) {
  if (a.cells.size() != b.cells.size() || a.disease != b.disease) return false;
  for (std::size_t i = 0; i < a.cells.size(); ++i) {
    const auto &x = a.cells[i], &y = b.cells[i];
    if (x.cx != y.cx || x.cy != y.cy || x.a != y.a || x.b != y.b || x.theta != y.theta ||
        x.cls != y.cls || x.morph != y.morph || x.color != y.color) {
      return false;
    }
  }
  return true;
}

}  // namespace

TEST(Scene, SameSeedGivesIdenticalSceneAndPixels) {
  for (TaskKind t : {TaskKind::kDetection, TaskKind::kClassification}) {
    const auto a = generate_scene(42, t), b = generate_scene(42, t);
    EXPECT_TRUE(same_cells(a, b));
    const auto ra = render(a), rb = render(b);
    EXPECT_TRUE(std::equal(ra.image.data().begin(), ra.image.data().end(),
                           rb.image.data().begin()));
    EXPECT_EQ(ra.mask, rb.mask);
  }
  EXPECT_FALSE(same_cells(generate_scene(1, TaskKind::kDetection),
                          generate_scene(2, TaskKind::kDetection)));
}

TEST(Scene, ThousandSeedCensusCoversEveryClass) {
  std::array<std::size_t, kNumCellClasses> counts{};
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto s = generate_scene(seed, TaskKind::kDetection);
    bool parasite = false;
    for (const auto& c : s.cells) {
      ++counts[static_cast<std::size_t>(c.cls)];
      parasite = parasite || c.cls == CellClass::kParasite;
    }
    EXPECT_EQ(parasite, s.disease == "malaria") << "seed " << seed;
  }
  for (std::size_t k = 0; k < kNumCellClasses; ++k) {
    EXPECT_GE(counts[k], 50u) << cell_class_names()[k];
  }
}

TEST(Scene, DenseScenesRespectCountCanvasAndOverlap) {
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    const auto s = generate_scene(seed, TaskKind::kSegmentation);
    ASSERT_GE(s.cells.size(), 1u);
    ASSERT_LE(s.cells.size(), 12u);
    std::vector<Box> boxes;
    for (const auto& c : s.cells) {
      const Box b = ellipse_box(c, s.width, s.height);
      EXPECT_GE(b.cx - b.w / 2, 0.0);
      EXPECT_LE(b.cx + b.w / 2, 1.0);
      EXPECT_GE(b.cy - b.h / 2, 0.0);
      EXPECT_LE(b.cy + b.h / 2, 1.0);
      for (const auto& o : boxes) EXPECT_LE(iou(b, o), 0.3 + 1e-12);
      boxes.push_back(b);
    }
  }
}

TEST(Scene, SingleCellTasksHaveOneCenteredCell) {
  for (TaskKind t : {TaskKind::kClassification, TaskKind::kVqa, TaskKind::kMlm}) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      const auto s = generate_scene(seed, t);
      ASSERT_EQ(s.cells.size(), 1u);
      EXPECT_EQ(s.cells[0].cx, s.width / 2.0);
      EXPECT_EQ(s.cells[0].cy, s.height / 2.0);
      EXPECT_LE(std::max(s.cells[0].a, s.cells[0].b), s.width / 2.0);
    }
  }
}

TEST(Render, EmptySceneIsPureBackground) {
  SyntheticScene s;
  const auto r = render(s);
  EXPECT_TRUE(r.objects.empty());
  for (auto m : r.mask) EXPECT_EQ(m, 0);
  for (double v : r.image.data()) {
    EXPECT_GT(v, 0.6);  // pale background, no dark cell pixels
    EXPECT_LE(v, 1.0);
  }
}

TEST(Render, AxisAlignedEllipseAreaMatchesAnalytic) {
  for (auto [a, b] : {std::pair{8.0, 5.0}, std::pair{12.0, 9.5}, std::pair{6.0, 6.0}}) {
    SyntheticScene s;
    Cell c;
    c.cx = 32.3;
    c.cy = 31.7;
    c.a = a;
    c.b = b;
    c.color = {0.8, 0.3, 0.3};
    s.cells.push_back(c);
    const auto r = render(s);
    double area = 0;
    for (auto m : r.mask) area += m;
    const double analytic = std::numbers::pi * a * b;
    EXPECT_LE(std::abs(area - analytic) / analytic, 0.03) << a << "x" << b;
  }
}

TEST(Render, BoxContainsEveryForegroundPixelOfItsCell) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const auto s = generate_scene(seed, TaskKind::kDetection);
    const auto r = render(s);
    ASSERT_EQ(r.objects.size(), s.cells.size());
    for (std::size_t i = 0; i < s.cells.size(); ++i) {
      const Box& b = r.objects[i].box;
      for (std::size_t y = 0; y < s.height; ++y) {
        for (std::size_t x = 0; x < s.width; ++x) {
          if (ellipse_coverage(s.cells[i], x, y) <= 0.5) continue;
          const double px = (x + 0.5) / s.width, py = (y + 0.5) / s.height;
          EXPECT_GE(px, b.cx - b.w / 2);
          EXPECT_LE(px, b.cx + b.w / 2);
          EXPECT_GE(py, b.cy - b.h / 2);
          EXPECT_LE(py, b.cy + b.h / 2);
        }
      }
    }
  }
}

TEST(Render, MaskIsUnionOfCells) {
  const auto s = generate_scene(7, TaskKind::kSegmentation);
  const auto r = render(s);
  for (std::size_t y = 0; y < s.height; ++y) {
    for (std::size_t x = 0; x < s.width; ++x) {
      bool any_full = false;
      for (const auto& c : s.cells) any_full = any_full || ellipse_coverage(c, x, y) == 1.0;
      if (any_full) { EXPECT_EQ(r.mask[y * s.width + x], 1); }
      bool none = true;
      for (const auto& c : s.cells) none = none && ellipse_coverage(c, x, y) == 0.0;
      if (none) { EXPECT_EQ(r.mask[y * s.width + x], 0); }
    }
  }
}

TEST(Render, DarkNucleusFlagDarkensCenter) {
  SyntheticScene s;
  s.width = s.height = 32;
  Cell c;
  c.cx = c.cy = 16;
  c.a = c.b = 10;
  c.color = {0.86, 0.36, 0.36};
  s.cells.push_back(c);
  const double plain = render(s).image.data()[16 * 32 + 16];
  s.cells[0].morph[kDarkNucleus] = 1;
  const double dark = render(s).image.data()[16 * 32 + 16];
  EXPECT_LT(dark, plain - 0.3);
}

TEST(Prompt, TemplatesRenderExactly) {
  EXPECT_EQ(make_prompt(TaskKind::kDetection, "malaria").text,
            "This image is for the detection of malaria of cells.");
  EXPECT_EQ(make_prompt(TaskKind::kClassification, "healthy").text, "");
  EXPECT_THROW(make_prompt(TaskKind::kDetection, "gout"), DataError);
  Cell c;
  EXPECT_EQ(TaskPrompt::vqa(make_question(c, 3).question).text.rfind("Q:", 0), 0u);
  EXPECT_EQ(TaskPrompt::mlm(make_masked_sentence(c, 3).masked).text.rfind("mask:", 0), 0u);
}

TEST(Prompt, AnswersAreDerivableFromFlags) {
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    const auto s = generate_scene(seed, TaskKind::kVqa);
    const Cell& c = s.cells[0];
    const QaPair qa = make_question(c, seed);
    if (qa.question == "what is the cell class ?") {
      std::string name = cell_class_names()[static_cast<std::size_t>(c.cls)];
      for (auto& ch : name) ch = static_cast<char>(std::tolower(ch));
      EXPECT_EQ(qa.answer, name);
      continue;
    }
    const std::map<std::string, std::size_t> flag_of{
        {"is the nucleus dark ?", kDarkNucleus},     {"is the center pale ?", kPaleCenter},
        {"is the cytoplasm granular ?", kGranular},  {"is the nucleus lobed ?", kLobedNucleus},
        {"is the cell vacuolated ?", kVacuolated},   {"is the cell enlarged ?", kEnlarged}};
    ASSERT_TRUE(flag_of.count(qa.question)) << qa.question;
    EXPECT_EQ(qa.answer, c.morph[flag_of.at(qa.question)] ? "yes" : "no");
  }
}

TEST(Prompt, MaskedSentenceHidesExactlyOneWord) {
  const Vocabulary v = corpus_vocabulary();
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto s = generate_scene(seed, TaskKind::kMlm);
    const auto m = make_masked_sentence(s.cells[0], seed);
    const auto full = v.tokenize(m.sentence), masked = v.tokenize(m.masked);
    ASSERT_EQ(full.size(), masked.size());
    std::size_t diffs = 0;
    for (std::size_t i = 0; i < full.size(); ++i) {
      if (full[i] != masked[i]) {
        ++diffs;
        EXPECT_EQ(masked[i], Vocabulary::kMask);
      }
    }
    EXPECT_EQ(diffs, 1u);
    EXPECT_EQ(v.detokenize(full), m.sentence);
  }
}

TEST(Prompt, CorpusVocabularyCoversEveryRecord) {
  const Vocabulary v = corpus_vocabulary();
  for (TaskKind t : {TaskKind::kDetection, TaskKind::kSegmentation, TaskKind::kVqa,
                     TaskKind::kMlm, TaskKind::kClassification}) {
    for (std::size_t i = 0; i < 30; ++i) {
      const auto s = synthesize_sample(5, t, "train", i);
      EXPECT_NO_THROW(v.tokenize(s.record.prompt));
      EXPECT_NO_THROW(v.tokenize(s.record.answer));
    }
  }
}

TEST(Dataset, WriteReadRoundTrip) {
  const fs::path dir = fresh_dir("roundtrip");
  GenerateOptions o;
  o.seed = 9;
  o.train_per_task = 3;
  o.eval_per_task = 2;
  const auto m = write_dataset(o, dir);
  const Dataset d = Dataset::open(dir);
  EXPECT_EQ(d.manifest().seed, 9u);
  EXPECT_EQ(d.manifest().tasks.size(), 5u);
  EXPECT_EQ(d.vocab(), corpus_vocabulary());
  for (TaskKind t : o.tasks) {
    ASSERT_EQ(d.records(t, "train").size(), 3u);
    ASSERT_EQ(d.records(t, "eval").size(), 2u);
    for (const std::string split : {"train", "eval"}) {
      const auto recs = d.records(t, split);
      for (std::size_t i = 0; i < recs.size(); ++i) {
        const Sample expect = synthesize_sample(9, t, split, i);
        EXPECT_TRUE(*recs[i] == expect.record) << recs[i]->id;
        const Sample got = d.load(*recs[i]);
        ASSERT_EQ(got.image.shape(), expect.image.shape());
        EXPECT_TRUE(std::equal(got.image.data().begin(), got.image.data().end(),
                               expect.image.data().begin()));
        EXPECT_EQ(got.mask, expect.mask);
      }
    }
  }
  fs::remove_all(dir);
}

TEST(Dataset, SameSeedIsByteIdentical) {
  const fs::path a = fresh_dir("bytes_a"), b = fresh_dir("bytes_b");
  GenerateOptions o;
  o.seed = 3;
  o.train_per_task = 2;
  o.eval_per_task = 1;
  write_dataset(o, a);
  write_dataset(o, b);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    ++files;
    const fs::path rel = fs::relative(e.path(), a);
    EXPECT_EQ(slurp(e.path()), slurp(b / rel)) << rel;
  }
  EXPECT_GT(files, 10u);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Dataset, HundredSampleCorpusIntegrity) {
  const fs::path dir = fresh_dir("integrity");
  GenerateOptions o;
  o.train_per_task = 15;
  o.eval_per_task = 5;
  write_dataset(o, dir);
  const Dataset d = Dataset::open(dir);
  std::size_t n = 0;
  for (TaskKind t : o.tasks) {
    for (const auto& r : d.all_records(t)) {
      ++n;
      EXPECT_TRUE(fs::exists(dir / r.image));
      if (t == TaskKind::kSegmentation) { EXPECT_TRUE(fs::exists(dir / r.mask)); }
      EXPECT_EQ(d.load_image(r).shape()[0], 3u);
    }
  }
  EXPECT_EQ(n, 100u);
  fs::remove_all(dir);
}

TEST(Dataset, TaskSubsetWritesOnlyThatTask) {
  const fs::path dir = fresh_dir("subset");
  GenerateOptions o;
  o.train_per_task = 1;
  o.eval_per_task = 1;
  o.tasks = {TaskKind::kDetection};
  write_dataset(o, dir);
  const Dataset d = Dataset::open(dir);
  EXPECT_EQ(d.manifest().tasks.size(), 1u);
  EXPECT_TRUE(d.has_task(TaskKind::kDetection));
  EXPECT_FALSE(d.has_task(TaskKind::kSegmentation));
  fs::remove_all(dir);
}

class DatasetErrors : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fresh_dir("errors");
    GenerateOptions o;
    o.train_per_task = 2;
    o.eval_per_task = 1;
    o.tasks = {TaskKind::kDetection, TaskKind::kVqa};
    write_dataset(o, dir);
  }
  void TearDown() override { fs::remove_all(dir); }
  fs::path dir;
};

TEST_F(DatasetErrors, TruncatedLineReportsLineNumber) {
  const fs::path ann = dir / "annotations" / "vqa.jsonl";
  std::string text = slurp(ann);
  const auto second = text.find('\n') + 1;
  const auto third = text.find('\n', second);
  text = text.substr(0, second) + text.substr(second, (third - second) / 2) + text.substr(third);
  std::ofstream(ann, std::ios::binary) << text;
  try {
    Dataset::open(dir);
    FAIL() << "expected MalformedRecordError";
  } catch (const MalformedRecordError& e) {
    EXPECT_EQ(e.line(), 2u);
    EXPECT_EQ(e.file(), "annotations/vqa.jsonl");
  }
}

TEST_F(DatasetErrors, GroundTruthKindMustMatchTask) {
  const fs::path ann = dir / "annotations" / "vqa.jsonl";
  std::string text = slurp(ann);
  text.replace(text.find("\"answer\""), 8, "\"answe_\"");
  std::ofstream(ann, std::ios::binary) << text;
  EXPECT_THROW(Dataset::open(dir), MalformedRecordError);
}

TEST_F(DatasetErrors, VersionMismatchIsDistinct) {
  auto j = nlohmann::json::parse(slurp(dir / "manifest.json"));
  j["version"] = 99;
  std::ofstream(dir / "manifest.json") << j.dump();
  EXPECT_THROW(Dataset::open(dir), VersionMismatchError);
}

TEST_F(DatasetErrors, MissingImageIsDistinct) {
  fs::remove(dir / "images" / "det-train-00001.uhtn");
  EXPECT_THROW(Dataset::open(dir), MissingFileError);
  fs::remove(dir / "manifest.json");
  EXPECT_THROW(Dataset::open(dir), MissingFileError);
}

TEST_F(DatasetErrors, NonEmptyDirectoryNeedsForce) {
  GenerateOptions o;
  o.train_per_task = 1;
  o.eval_per_task = 0;
  EXPECT_THROW(write_dataset(o, dir), UsageError);
  EXPECT_NO_THROW(write_dataset(o, dir, true));
  const Dataset d = Dataset::open(dir);
  EXPECT_EQ(d.records(TaskKind::kDetection, "train").size(), 1u);
  EXPECT_FALSE(fs::exists(dir / "images" / "det-train-00001.uhtn"));
}
