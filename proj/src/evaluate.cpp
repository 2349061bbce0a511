#include "unihema/evaluate.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>

#include "unihema/error.hpp"
#include "unihema/ops.hpp"

namespace unihema {

std::size_t worker_count() {
  if (const char* env = std::getenv("UNIHEMA_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

std::vector<ScoredBox> predict_boxes(const UniHema& model, const Vocabulary& vocab,
                                     const Tensor& image, const std::string& prompt) {
  NoGradGuard guard;
  const VisionState v = model.see(image);
  const DenseOutputs d = model.dense(v, vocab.tokenize(prompt));
  std::vector<ScoredBox> out;
  for (const auto& det : decode_detections(d.detection)) out.push_back({det.box, det.cls, det.score});
  return out;
}

std::vector<std::uint8_t> predict_mask(const UniHema& model, const Vocabulary& vocab,
                                       const Tensor& image, const std::string& prompt,
                                       UpsampleMode mode) {
  NoGradGuard guard;
  const VisionState v = model.see(image);
  const DenseOutputs d = model.dense(v, vocab.tokenize(prompt));
  return binarize(model.segment(v, d, image.dim(1), image.dim(2), mode));
}

std::size_t predict_class(const UniHema& model, const Tensor& image) {
  NoGradGuard guard;
  return argmax_rows(model.classify(model.see(image))).front();
}

std::string predict_text(const UniHema& model, const Vocabulary& vocab, const Tensor& image,
                         const std::string& prompt) {
  NoGradGuard guard;
  const TokenIds ids = vocab.tokenize(prompt);
  const Tensor fused = model.fuse_text(model.see(image), ids);
  return vocab.detokenize(model.text_decoder.generate(fused, ids, kMaxAnswerTokens).ids);
}

namespace {

// Runs fn(i) for i in [0, n) on up to `threads` workers; each index is
// handled by exactly one worker and results are written by index.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += threads) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

EvalReport evaluate(const UniHema& model, const Vocabulary& vocab,
                    const std::vector<Sample>& samples, TaskKind task, UpsampleMode mode,
                    std::size_t threads) {
  if (threads == 0) threads = worker_count();
  for (const auto& s : samples) {
    if (s.record.task != task) {
      throw DataError("evaluate: sample " + s.record.id + " is not a " + task_tag(task) +
                      " sample");
    }
  }
  EvalReport r;
  r.task = task_tag(task);
  r.samples = samples.size();
  const std::size_t n = samples.size();
  const auto& names = cell_class_names();

  switch (task) {
    case TaskKind::kDetection: {
      std::vector<std::vector<ScoredBox>> preds(n);
      std::vector<std::vector<GroundTruthObject>> gts(n);
      parallel_for(n, threads, [&](std::size_t i) {
        preds[i] = predict_boxes(model, vocab, samples[i].image, samples[i].record.prompt);
      });
      for (std::size_t i = 0; i < n; ++i) gts[i] = samples[i].record.objects;
      const MapResult m = map50(preds, gts);
      r.metric = "mAP50";
      r.value = m.value;
      for (const auto& [cls, c] : m.per_class) {
        r.per_class[names.at(cls)] = c.ap;
        r.pr_curves[names.at(cls)] = c.curve;
      }
      r.conventions = {"all-point interpolated AP", "IoU threshold 0.5",
                       "mean over classes present in the ground truth"};
      break;
    }
    case TaskKind::kSegmentation: {
      std::vector<double> scores(n);
      parallel_for(n, threads, [&](std::size_t i) {
        scores[i] = dice(predict_mask(model, vocab, samples[i].image, samples[i].record.prompt, mode),
                         samples[i].mask);
      });
      r.metric = "Dice";
      double s = 0.0;
      for (double d : scores) s += d;
      r.value = n ? s / static_cast<double>(n) : 0.0;
      r.conventions = {"mean of per-image Dice", "both-empty masks score 1",
                       "upsampler " + to_string(mode)};
      break;
    }
    case TaskKind::kClassification: {
      std::vector<std::size_t> pred(n), gt(n);
      parallel_for(n, threads, [&](std::size_t i) { pred[i] = predict_class(model, samples[i].image); });
      std::size_t correct = 0;
      for (std::size_t i = 0; i < n; ++i) {
        gt[i] = samples[i].record.label;
        correct += pred[i] == gt[i];
      }
      const F1Result f = f1_macro(pred, gt, model.config().num_classes);
      r.metric = "F1";
      r.value = f.value;
      for (const auto& [cls, v] : f.per_class) r.per_class[names.at(cls)] = v;
      r.metrics["accuracy"] = n ? static_cast<double>(correct) / static_cast<double>(n) : 0.0;
      r.conventions = {"macro F1; classes neither predicted nor present are skipped"};
      break;
    }
    case TaskKind::kVqa:
    case TaskKind::kMlm: {
      std::vector<std::string> answers(n);
      parallel_for(n, threads, [&](std::size_t i) {
        answers[i] = predict_text(model, vocab, samples[i].image, samples[i].record.prompt);
      });
      double bleu = 0.0, em = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        bleu += bleu4(split_words(answers[i]), split_words(samples[i].record.answer));
        em += exact_match(answers[i], samples[i].record.answer) ? 1.0 : 0.0;
      }
      r.metric = "BLEU-4";
      r.value = n ? bleu / static_cast<double>(n) : 0.0;
      r.metrics["exact_match"] = n ? em / static_cast<double>(n) : 0.0;
      r.conventions = {"sentence BLEU-4 averaged over samples",
                       "zero-match n-gram orders smoothed to 1/(count+1)",
                       "exact match is case-sensitive after whitespace normalization"};
      break;
    }
  }
  r.metrics[r.metric] = r.value;
  return r;
}

InferenceResult infer(const UniHema& model, const Vocabulary& vocab, const Tensor& image,
                      const std::string& prompt) {
  const TaskPrompt route = TaskPrompt::parse(prompt);
  InferenceResult out;
  out.route = route.kind;
  switch (route.kind) {
    case TaskKind::kDetection:
    case TaskKind::kSegmentation: {
      NoGradGuard guard;
      const DenseOutputs d = model.dense(model.see(image), vocab.tokenize(prompt));
      for (const auto& det : filter_detections(decode_detections(d.detection), kDetectionThreshold)) {
        out.lines.push_back(detection_to_json(det, cell_class_names()));
      }
      break;
    }
    case TaskKind::kVqa:
      out.lines.push_back({{"answer", predict_text(model, vocab, image, prompt)}});
      break;
    case TaskKind::kMlm:
      out.lines.push_back({{"sentence", predict_text(model, vocab, image, prompt)}});
      break;
    case TaskKind::kClassification: {
      const std::size_t c = predict_class(model, image);
      out.lines.push_back({{"class", cell_class_names().at(c)}, {"label", c}});
      break;
    }
  }
  return out;
}

}  // namespace unihema
