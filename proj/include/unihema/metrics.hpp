#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "unihema/heads.hpp"

namespace unihema {

struct ScoredBox {
  Box box;
  std::size_t cls = 0;
  double score = 0.0;
};

struct PrPoint {
  double recall = 0.0;
  double precision = 0.0;
};

struct ClassAp {
  double ap = 0.0;
  std::size_t gt_count = 0;
  std::vector<PrPoint> curve;  // one point per ranked prediction
};

struct MapResult {
  double value = 0.0;                   // mean over classes present in gts
  std::map<std::size_t, ClassAp> per_class;
};

// All-point interpolated AP from a ranked list of hits.
double average_precision(const std::vector<bool>& ranked_hits, std::size_t gt_count,
                         std::vector<PrPoint>* curve = nullptr);

// Per class, predictions are ranked by score (content ties broken by box
// coordinates, so input order never matters) and each claims the unmatched
// same-image ground truth of highest IoU when that IoU is at least 0.5.
MapResult map50(const std::vector<std::vector<ScoredBox>>& preds,
                const std::vector<std::vector<GroundTruthObject>>& gts);

// 2|A∩B| / (|A|+|B|); both empty → 1.
double dice(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt);

struct F1Result {
  double value = 0.0;
  std::map<std::size_t, double> per_class;
};

// Macro F1. A class absent from both predictions and labels is skipped; one
// that is predicted but never present (or present but never predicted)
// contributes 0.
F1Result f1_macro(const std::vector<std::size_t>& pred, const std::vector<std::size_t>& gt,
                  std::size_t classes);

// Sentence BLEU-4 against one reference: geometric mean of clipped 1–4-gram
// precisions, a zero match count n-gram order replaced by 1/(count+1), times
// the brevity penalty. Empty candidate → 0.
double bleu4(const std::vector<std::string>& candidate, const std::vector<std::string>& reference);

// Case-sensitive equality after collapsing whitespace runs and trimming.
bool exact_match(const std::string& candidate, const std::string& reference);
std::string normalize_whitespace(const std::string& s);

// --------------------------------------------------------------- reporting

struct EvalReport {
  std::string task;
  std::string metric;  // primary metric name
  double value = 0.0;
  std::map<std::string, double> metrics;          // every computed metric
  std::map<std::string, double> per_class;        // class name → score
  std::size_t samples = 0;
  std::string config_digest;
  std::vector<std::string> conventions;           // documented choices in effect
  std::map<std::string, std::vector<PrPoint>> pr_curves;  // det only

  nlohmann::json to_json() const;
  // "class,value" rows.
  std::string per_class_csv() const;
  // "class,recall,precision" rows.
  std::string pr_curve_csv() const;
};

}  // namespace unihema
