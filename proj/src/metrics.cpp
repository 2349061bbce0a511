#include "unihema/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <tuple>

#include "unihema/error.hpp"

namespace unihema {

double average_precision(const std::vector<bool>& ranked_hits, std::size_t gt_count,
                         std::vector<PrPoint>* curve) {
  if (curve) curve->clear();
  if (gt_count == 0) return 0.0;
  std::vector<PrPoint> pts;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < ranked_hits.size(); ++i) {
    tp += ranked_hits[i] ? 1 : 0;
    pts.push_back({static_cast<double>(tp) / static_cast<double>(gt_count),
                   static_cast<double>(tp) / static_cast<double>(i + 1)});
  }
  if (curve) *curve = pts;
  // Precision envelope: running maximum from the right.
  std::vector<double> env(pts.size());
  double best = 0.0;
  for (std::size_t i = pts.size(); i-- > 0;) {
    best = std::max(best, pts[i].precision);
    env[i] = best;
  }
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    ap += (pts[i].recall - prev_recall) * env[i];
    prev_recall = pts[i].recall;
  }
  return ap;
}

MapResult map50(const std::vector<std::vector<ScoredBox>>& preds,
                const std::vector<std::vector<GroundTruthObject>>& gts) {
  if (preds.size() != gts.size()) {
    throw DimensionError("map50: " + std::to_string(preds.size()) + " prediction lists for " +
                         std::to_string(gts.size()) + " images");
  }
  std::map<std::size_t, std::size_t> gt_count;
  for (const auto& img : gts) {
    for (const auto& g : img) ++gt_count[g.cls];
  }

  MapResult result;
  for (const auto& [cls, count] : gt_count) {
    struct Ranked {
      double score;
      std::size_t image;
      Box box;
    };
    std::vector<Ranked> ranked;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      for (const auto& p : preds[i]) {
        if (p.cls == cls) ranked.push_back({p.score, i, p.box});
      }
    }
    std::sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
      return std::make_tuple(-a.score, a.image, a.box.cx, a.box.cy, a.box.w, a.box.h) <
             std::make_tuple(-b.score, b.image, b.box.cx, b.box.cy, b.box.w, b.box.h);
    });
    std::vector<std::vector<bool>> taken(gts.size());
    for (std::size_t i = 0; i < gts.size(); ++i) taken[i].assign(gts[i].size(), false);
    std::vector<bool> hits;
    for (const auto& r : ranked) {
      double best = 0.0;
      std::size_t pick = SIZE_MAX;
      const auto& img = gts[r.image];
      for (std::size_t g = 0; g < img.size(); ++g) {
        if (img[g].cls != cls || taken[r.image][g]) continue;
        const double o = iou(r.box, img[g].box);
        if (o >= 0.5 && (pick == SIZE_MAX || o > best)) {
          best = o;
          pick = g;
        }
      }
      if (pick != SIZE_MAX) taken[r.image][pick] = true;
      hits.push_back(pick != SIZE_MAX);
    }
    ClassAp c;
    c.gt_count = count;
    c.ap = average_precision(hits, count, &c.curve);
    result.per_class[cls] = std::move(c);
  }
  if (!result.per_class.empty()) {
    double sum = 0.0;
    for (const auto& [_, c] : result.per_class) sum += c.ap;
    result.value = sum / static_cast<double>(result.per_class.size());
  }
  return result;
}

double dice(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt) {
  if (pred.size() != gt.size()) {
    throw DimensionError("dice: " + std::to_string(pred.size()) + " vs " +
                         std::to_string(gt.size()) + " pixels");
  }
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    a += p;
    b += g;
    both += p && g;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

F1Result f1_macro(const std::vector<std::size_t>& pred, const std::vector<std::size_t>& gt,
                  std::size_t classes) {
  if (pred.size() != gt.size()) throw DimensionError("f1_macro: label count mismatch");
  std::vector<std::size_t> tp(classes, 0), fp(classes, 0), fn(classes, 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] >= classes || gt[i] >= classes) throw DataError("f1_macro: label out of range");
    if (pred[i] == gt[i]) {
      ++tp[gt[i]];
    } else {
      ++fp[pred[i]];
      ++fn[gt[i]];
    }
  }
  F1Result r;
  for (std::size_t c = 0; c < classes; ++c) {
    if (tp[c] + fp[c] + fn[c] == 0) continue;
    r.per_class[c] = 2.0 * static_cast<double>(tp[c]) /
                     static_cast<double>(2 * tp[c] + fp[c] + fn[c]);
  }
  if (!r.per_class.empty()) {
    double s = 0.0;
    for (const auto& [_, f] : r.per_class) s += f;
    r.value = s / static_cast<double>(r.per_class.size());
  }
  return r;
}

double bleu4(const std::vector<std::string>& cand, const std::vector<std::string>& ref) {
  if (cand.empty()) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= 4; ++n) {
    std::map<std::vector<std::string>, std::size_t> ref_counts, cand_counts;
    for (std::size_t i = 0; i + n <= ref.size(); ++i) {
      ++ref_counts[std::vector<std::string>(ref.begin() + i, ref.begin() + i + n)];
    }
    std::size_t total = 0;
    for (std::size_t i = 0; i + n <= cand.size(); ++i) {
      ++cand_counts[std::vector<std::string>(cand.begin() + i, cand.begin() + i + n)];
      ++total;
    }
    std::size_t matched = 0;
    for (const auto& [gram, c] : cand_counts) {
      auto it = ref_counts.find(gram);
      if (it != ref_counts.end()) matched += std::min(c, it->second);
    }
    const double p = matched == 0 ? 1.0 / static_cast<double>(total + 1)
                                  : static_cast<double>(matched) / static_cast<double>(total);
    log_sum += std::log(p);
  }
  const double c = static_cast<double>(cand.size()), r = static_cast<double>(ref.size());
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum / 4.0);
}

std::string normalize_whitespace(const std::string& s) {
  std::istringstream in(s);
  std::string word, out;
  while (in >> word) out += (out.empty() ? "" : " ") + word;
  return out;
}

bool exact_match(const std::string& candidate, const std::string& reference) {
  return normalize_whitespace(candidate) == normalize_whitespace(reference);
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["task"] = task;
  j["metric"] = metric;
  j["value"] = value;
  j["metrics"] = metrics;
  j["per_class"] = per_class;
  j["samples"] = samples;
  j["config_digest"] = config_digest;
  j["conventions"] = conventions;
  return j;
}

std::string EvalReport::per_class_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "class,value\n";
  for (const auto& [name, v] : per_class) os << name << ',' << v << '\n';
  return os.str();
}

std::string EvalReport::pr_curve_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "class,recall,precision\n";
  for (const auto& [name, pts] : pr_curves) {
    for (const auto& p : pts) os << name << ',' << p.recall << ',' << p.precision << '\n';
  }
  return os.str();
}

}  // namespace unihema
