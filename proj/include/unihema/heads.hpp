#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "json.hpp"
#include "unihema/config.hpp"
#include "unihema/nn.hpp"
#include "unihema/transformer.hpp"

namespace unihema {

// Normalized center-size box.
struct Box {
  double cx = 0.0, cy = 0.0, w = 0.0, h = 0.0;
  bool operator==(const Box&) const = default;
};

double box_area(const Box& b);
double iou(const Box& a, const Box& b);
double giou(const Box& a, const Box& b);

// Cross-attention transformer decoder over the refined queries.
class ImageDecoder {
 public:
  ImageDecoder() = default;
  ImageDecoder(ParameterStore& store, std::size_t layers, std::size_t model_dim,
               std::size_t heads, std::size_t hidden, Rng& rng);

  // queries [D_t×M], memory [V_t×M] -> [D_t×M]
  Tensor forward(const Tensor& queries, const Tensor& memory) const;

  std::vector<DecoderLayer> layers;
};

struct DetectionOutputs {
  Tensor boxes;         // [D_t×4] after sigmoid
  Tensor class_logits;  // [D_t×(C+1)], last column is no-object
  Tensor morph_logits;  // [D_t×num_morph]
};

struct Detection {
  Box box;
  std::size_t cls = 0;
  std::vector<double> class_probs;  // C+1 entries, sums to 1
  double score = 0.0;               // max probability excluding no-object
  std::vector<double> morph;        // independent probabilities
};

class DetectionHead {
 public:
  DetectionHead() = default;
  DetectionHead(ParameterStore& store, std::size_t model_dim, std::size_t num_classes,
                std::size_t num_morph, Rng& rng);

  DetectionOutputs forward(const Tensor& objects) const;
  std::size_t num_classes() const { return cls.out_features() - 1; }

  MlpBlock box;
  Linear cls;
  Linear morph;
};

// Probabilities and scores for every query, no thresholding.
std::vector<Detection> decode_detections(const DetectionOutputs& out);
// Detections with score >= threshold, in query order.
std::vector<Detection> filter_detections(const std::vector<Detection>& all, double threshold = 0.5);

struct GroundTruthObject {
  Box box;
  std::size_t cls = 0;
  std::vector<std::uint8_t> morph;
};

struct MatchResult {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (query, gt), sorted by gt
  std::vector<std::size_t> unmatched;                      // ascending query indices
  double cost = 0.0;
};

// Minimum-cost assignment of every row to a distinct column (rows ≤ cols).
// Returns the chosen column for each row.
std::vector<std::size_t> solve_assignment(const std::vector<std::vector<double>>& cost);

// Pairwise matching cost [gt × query] from current predictions.
std::vector<std::vector<double>> matching_cost(const DetectionOutputs& out,
                                               const std::vector<GroundTruthObject>& gts,
                                               const LossWeights& w);
MatchResult hungarian_match(const DetectionOutputs& out, const std::vector<GroundTruthObject>& gts,
                            const LossWeights& w);

struct DetectionLossTerms {
  Tensor total;
  double cls = 0.0, l1 = 0.0, giou = 0.0, morph = 0.0;
};

DetectionLossTerms detection_loss(const DetectionOutputs& out,
                                  const std::vector<GroundTruthObject>& gts,
                                  const MatchResult& match, const LossWeights& w);

// Generalized IoU of paired rows of two [P×4] center-size boxes, as [P].
Tensor giou_rows(const Tensor& a, const Tensor& b);

class CellClassifier {
 public:
  CellClassifier() = default;
  // `pooled_channels` = 0 disables backbone integration.
  CellClassifier(ParameterStore& store, std::size_t model_dim, std::size_t pooled_channels,
                 std::size_t num_classes, Rng& rng);

  // cell_feature [1×M], pooled [1×c_L] (ignored when integration is off).
  Tensor logits(const Tensor& cell_feature, const Tensor& pooled) const;
  bool integrates() const { return integrate_; }

  Linear fc;

 private:
  bool integrate_ = false;
};

// Mean of per-pixel binary cross-entropy and soft Dice (smoothing 1).
Tensor segmentation_loss(const Tensor& logits, const std::vector<std::uint8_t>& mask);

nlohmann::json detection_to_json(const Detection& d, const std::vector<std::string>& class_names);

}  // namespace unihema
