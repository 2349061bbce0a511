#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "unihema/data.hpp"
#include "unihema/metrics.hpp"
#include "unihema/model.hpp"

namespace unihema {

inline constexpr std::size_t kMaxAnswerTokens = 32;
inline constexpr double kDetectionThreshold = 0.5;

// Worker count: UNIHEMA_THREADS when set to a positive integer, otherwise the
// hardware concurrency, never below 1.
std::size_t worker_count();

// Per-sample predictions.
std::vector<ScoredBox> predict_boxes(const UniHema& model, const Vocabulary& vocab,
                                     const Tensor& image, const std::string& prompt);
std::vector<std::uint8_t> predict_mask(const UniHema& model, const Vocabulary& vocab,
                                       const Tensor& image, const std::string& prompt,
                                       UpsampleMode mode);
std::size_t predict_class(const UniHema& model, const Tensor& image);
std::string predict_text(const UniHema& model, const Vocabulary& vocab, const Tensor& image,
                         const std::string& prompt);

// Metrics for one task over `samples`, parallel over samples.
EvalReport evaluate(const UniHema& model, const Vocabulary& vocab,
                    const std::vector<Sample>& samples, TaskKind task, UpsampleMode mode,
                    std::size_t threads = 0);

// Prompt-routed single-image inference. Detection prompts yield one JSON
// object per detection above threshold; "Q:" and "mask:" prompts yield the
// generated text; an empty prompt yields the class label.
struct InferenceResult {
  TaskKind route = TaskKind::kClassification;
  std::vector<nlohmann::json> lines;
};
InferenceResult infer(const UniHema& model, const Vocabulary& vocab, const Tensor& image,
                      const std::string& prompt);

}  // namespace unihema
