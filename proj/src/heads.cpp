#include "unihema/heads.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "unihema/error.hpp"
#include "unihema/ops.hpp"

namespace unihema {

double box_area(const Box& b) { return std::max(0.0, b.w) * std::max(0.0, b.h); }

namespace {

struct Corners {
  double x1, y1, x2, y2;
};

Corners corners(const Box& b) {
  return {b.cx - b.w / 2, b.cy - b.h / 2, b.cx + b.w / 2, b.cy + b.h / 2};
}

double intersection(const Box& a, const Box& b) {
  const Corners p = corners(a), q = corners(b);
  const double w = std::min(p.x2, q.x2) - std::max(p.x1, q.x1);
  const double h = std::min(p.y2, q.y2) - std::max(p.y1, q.y1);
  return std::max(0.0, w) * std::max(0.0, h);
}

}  // namespace

double iou(const Box& a, const Box& b) {
  const double inter = intersection(a, b);
  const double uni = box_area(a) + box_area(b) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

double giou(const Box& a, const Box& b) {
  const double inter = intersection(a, b);
  const double uni = box_area(a) + box_area(b) - inter;
  const Corners p = corners(a), q = corners(b);
  const double hull = (std::max(p.x2, q.x2) - std::min(p.x1, q.x1)) *
                      (std::max(p.y2, q.y2) - std::min(p.y1, q.y1));
  if (hull <= 0.0) return 0.0;
  const double i = uni > 0.0 ? inter / uni : 0.0;
  return i - (hull - uni) / hull;
}

ImageDecoder::ImageDecoder(ParameterStore& store, std::size_t count, std::size_t model_dim,
                           std::size_t heads, std::size_t hidden, Rng& rng) {
  if (count == 0) throw ConfigError("image decoder needs at least one layer");
  for (std::size_t i = 0; i < count; ++i) {
    layers.emplace_back(store, "image_decoder.layer" + std::to_string(i), model_dim, heads,
                        hidden, rng);
  }
}

Tensor ImageDecoder::forward(const Tensor& queries, const Tensor& memory) const {
  Tensor x = queries;
  for (const auto& layer : layers) x = layer.forward(x, memory);
  return x;
}

DetectionHead::DetectionHead(ParameterStore& store, std::size_t model_dim,
                             std::size_t num_classes, std::size_t num_morph, Rng& rng)
    : box(store, "heads.detect.box", model_dim, model_dim, 4, rng),
      cls(store, "heads.detect.cls", model_dim, num_classes + 1, rng),
      morph(store, "heads.detect.morph", model_dim, num_morph, rng) {}

DetectionOutputs DetectionHead::forward(const Tensor& objects) const {
  return {sigmoid(box.forward(objects)), cls.forward(objects), morph.forward(objects)};
}

std::vector<Detection> decode_detections(const DetectionOutputs& out) {
  Tensor probs = softmax(out.class_logits);
  Tensor morph = sigmoid(out.morph_logits);
  const std::size_t q = out.boxes.dim(0), c1 = probs.dim(1), nm = morph.dim(1);
  std::vector<Detection> dets(q);
  for (std::size_t i = 0; i < q; ++i) {
    Detection& d = dets[i];
    d.box = {out.boxes[i * 4], out.boxes[i * 4 + 1], out.boxes[i * 4 + 2], out.boxes[i * 4 + 3]};
    d.class_probs.assign(probs.data().begin() + static_cast<long>(i * c1),
                         probs.data().begin() + static_cast<long>((i + 1) * c1));
    d.cls = 0;
    for (std::size_t c = 1; c + 1 < c1; ++c) {
      if (d.class_probs[c] > d.class_probs[d.cls]) d.cls = c;
    }
    d.score = d.class_probs[d.cls];
    d.morph.assign(morph.data().begin() + static_cast<long>(i * nm),
                   morph.data().begin() + static_cast<long>((i + 1) * nm));
  }
  return dets;
}

std::vector<Detection> filter_detections(const std::vector<Detection>& all, double threshold) {
  std::vector<Detection> out;
  for (const auto& d : all) {
    if (d.score >= threshold) out.push_back(d);
  }
  return out;
}

std::vector<std::size_t> solve_assignment(const std::vector<std::vector<double>>& cost) {
  const std::size_t n = cost.size();
  if (n == 0) return {};
  const std::size_t m = cost[0].size();
  if (n > m) {
    throw DataError("matching: " + std::to_string(n) + " ground truths exceed " +
                    std::to_string(m) + " queries");
  }
  // Shortest augmenting path with potentials; 1-based, column 0 is virtual.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<bool> used(m + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> assign(n);
  for (std::size_t j = 1; j <= m; ++j) {
    if (p[j] != 0) assign[p[j] - 1] = j - 1;
  }
  return assign;
}

std::vector<std::vector<double>> matching_cost(const DetectionOutputs& out,
                                               const std::vector<GroundTruthObject>& gts,
                                               const LossWeights& w) {
  NoGradGuard no_grad;
  Tensor probs = softmax(out.class_logits);
  const std::size_t q = out.boxes.dim(0), c1 = probs.dim(1);
  std::vector<std::vector<double>> cost(gts.size(), std::vector<double>(q));
  for (std::size_t g = 0; g < gts.size(); ++g) {
    const Box& t = gts[g].box;
    for (std::size_t i = 0; i < q; ++i) {
      const Box b{out.boxes[i * 4], out.boxes[i * 4 + 1], out.boxes[i * 4 + 2],
                  out.boxes[i * 4 + 3]};
      const double l1 = std::fabs(b.cx - t.cx) + std::fabs(b.cy - t.cy) + std::fabs(b.w - t.w) +
                        std::fabs(b.h - t.h);
      cost[g][i] = w.cls * (1.0 - probs[i * c1 + gts[g].cls]) + w.l1 * l1 +
                   w.giou * (1.0 - giou(b, t));
    }
  }
  return cost;
}

MatchResult hungarian_match(const DetectionOutputs& out, const std::vector<GroundTruthObject>& gts,
                            const LossWeights& w) {
  const std::size_t q = out.boxes.dim(0);
  if (gts.size() > q) {
    throw DataError("matching: " + std::to_string(gts.size()) + " ground truths exceed " +
                    std::to_string(q) + " queries");
  }
  MatchResult r;
  auto cost = matching_cost(out, gts, w);
  auto assign = solve_assignment(cost);
  std::vector<bool> taken(q, false);
  for (std::size_t g = 0; g < gts.size(); ++g) {
    r.pairs.emplace_back(assign[g], g);
    r.cost += cost[g][assign[g]];
    taken[assign[g]] = true;
  }
  for (std::size_t i = 0; i < q; ++i) {
    if (!taken[i]) r.unmatched.push_back(i);
  }
  return r;
}

Tensor giou_rows(const Tensor& a, const Tensor& b) {
  auto col = [](const Tensor& t, std::size_t c) { return slice_cols(t, c, c + 1); };
  auto edges = [&](const Tensor& t, Tensor& x1, Tensor& y1, Tensor& x2, Tensor& y2) {
    Tensor hw = scale(col(t, 2), 0.5), hh = scale(col(t, 3), 0.5);
    x1 = sub(col(t, 0), hw);
    x2 = add(col(t, 0), hw);
    y1 = sub(col(t, 1), hh);
    y2 = add(col(t, 1), hh);
  };
  Tensor ax1, ay1, ax2, ay2, bx1, by1, bx2, by2;
  edges(a, ax1, ay1, ax2, ay2);
  edges(b, bx1, by1, bx2, by2);
  Tensor iw = relu(sub(minimum(ax2, bx2), maximum(ax1, bx1)));
  Tensor ih = relu(sub(minimum(ay2, by2), maximum(ay1, by1)));
  Tensor inter = mul(iw, ih);
  Tensor area_a = mul(col(a, 2), col(a, 3));
  Tensor area_b = mul(col(b, 2), col(b, 3));
  Tensor uni = sub(add(area_a, area_b), inter);
  Tensor hull = mul(sub(maximum(ax2, bx2), minimum(ax1, bx1)),
                    sub(maximum(ay2, by2), minimum(ay1, by1)));
  Tensor g = sub(div(inter, uni), div(sub(hull, uni), hull));
  return reshape(g, {a.dim(0)});
}

DetectionLossTerms detection_loss(const DetectionOutputs& out,
                                  const std::vector<GroundTruthObject>& gts,
                                  const MatchResult& match, const LossWeights& w) {
  const std::size_t q = out.boxes.dim(0);
  const std::size_t no_object = out.class_logits.dim(1) - 1;
  DetectionLossTerms terms;

  // Class term over every query: matched -> gt class, unmatched -> no-object
  // with reduced weight; normalized by the total weight.
  std::vector<std::size_t> targets(q, no_object);
  std::vector<double> weights(q, w.no_object);
  for (auto [qi, gi] : match.pairs) {
    targets[qi] = gts[gi].cls;
    weights[qi] = 1.0;
  }
  double wsum = 0.0;
  for (double x : weights) wsum += x;
  for (auto& x : weights) x *= -w.cls / wsum;
  Tensor cls_term = dot_const(pick(log_softmax(out.class_logits), targets), weights);
  terms.cls = cls_term.item();
  Tensor total = cls_term;

  if (!match.pairs.empty()) {
    const double n = static_cast<double>(match.pairs.size());
    std::vector<std::size_t> rows;
    std::vector<double> gt_boxes, gt_morph;
    for (auto [qi, gi] : match.pairs) {
      rows.push_back(qi);
      const Box& b = gts[gi].box;
      gt_boxes.insert(gt_boxes.end(), {b.cx, b.cy, b.w, b.h});
      for (auto f : gts[gi].morph) gt_morph.push_back(static_cast<double>(f));
    }
    Tensor pred = gather_rows(out.boxes, rows);
    Tensor target({rows.size(), 4}, gt_boxes);
    Tensor l1 = scale(sum(abs(sub(pred, target))), w.l1 / n);
    Tensor gi = scale(sum(add_scalar(neg(giou_rows(pred, target)), 1.0)), w.giou / n);
    terms.l1 = l1.item();
    terms.giou = gi.item();
    total = add(total, add(l1, gi));

    const std::size_t nm = out.morph_logits.dim(1);
    if (!gt_morph.empty()) {
      if (gt_morph.size() != rows.size() * nm) {
        throw DataError("morphology flags: expected " + std::to_string(nm) + " per object");
      }
      Tensor logits = gather_rows(out.morph_logits, rows);
      Tensor t({rows.size(), nm}, gt_morph);
      // softplus(x) - t·x is the numerically stable BCE with logits.
      Tensor bce = sub(softplus(logits), mul(t, logits));
      Tensor m = scale(mean(bce), w.morph);
      terms.morph = m.item();
      total = add(total, m);
    }
  }
  terms.total = total;
  return terms;
}

CellClassifier::CellClassifier(ParameterStore& store, std::size_t model_dim,
                               std::size_t pooled_channels, std::size_t num_classes, Rng& rng)
    : fc(store, "heads.classify.fc", model_dim + pooled_channels, num_classes, rng),
      integrate_(pooled_channels > 0) {}

Tensor CellClassifier::logits(const Tensor& cell_feature, const Tensor& pooled) const {
  if (!integrate_) return fc.forward(cell_feature);
  return fc.forward(concat_cols({cell_feature, pooled}));
}

Tensor segmentation_loss(const Tensor& logits, const std::vector<std::uint8_t>& mask) {
  if (logits.numel() != mask.size()) {
    throw DimensionError("segmentation_loss: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(mask.size()) + " mask pixels");
  }
  std::vector<double> t(mask.begin(), mask.end());
  Tensor target(logits.shape(), t);
  Tensor bce = mean(sub(softplus(logits), mul(target, logits)));
  Tensor p = sigmoid(logits);
  double tsum = 0.0;
  for (double v : t) tsum += v;
  Tensor inter = sum(mul(p, target));
  Tensor num = add_scalar(scale(inter, 2.0), 1.0);
  Tensor den = add_scalar(sum(p), tsum + 1.0);
  Tensor dice = add_scalar(neg(div(num, den)), 1.0);
  return scale(add(bce, dice), 0.5);
}

nlohmann::json detection_to_json(const Detection& d, const std::vector<std::string>& class_names) {
  nlohmann::json j;
  j["box"] = {d.box.cx, d.box.cy, d.box.w, d.box.h};
  j["class"] = d.cls < class_names.size() ? class_names[d.cls] : std::to_string(d.cls);
  j["score"] = d.score;
  j["morph"] = d.morph;
  return j;
}

}  // namespace unihema
