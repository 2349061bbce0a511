#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "unihema/nn.hpp"
#include "unihema/transformer.hpp"

namespace unihema {

using TokenIds = std::vector<std::size_t>;

// Closed word-level vocabulary. Ids 0..3 are reserved.
class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kBos = 1;
  static constexpr std::size_t kEos = 2;
  static constexpr std::size_t kMask = 3;
  static const std::vector<std::string>& reserved();

  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}
  // `words` excludes the reserved tokens; duplicates are ignored.
  explicit Vocabulary(const std::vector<std::string>& words);

  std::size_t size() const { return tokens_.size(); }
  bool contains(const std::string& word) const { return ids_.count(word) != 0; }
  std::size_t id(const std::string& word) const;
  const std::string& token(std::size_t id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  // Splits on whitespace and detaches trailing '.' and ',' from words.
  // Result is framed as [BOS, ..., EOS].
  TokenIds tokenize(const std::string& text) const;
  // Inverse of tokenize for canonical text; BOS/EOS/PAD are skipped.
  std::string detokenize(const TokenIds& ids) const;

  // One token per line, line number = id.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> ids_;
};

// Splits text into words, detaching trailing '.' and ','.
std::vector<std::string> split_words(const std::string& text);

enum class TaskKind { kDetection, kSegmentation, kVqa, kMlm, kClassification };

std::string task_tag(TaskKind kind);
TaskKind task_from_tag(const std::string& tag);
bool is_text_task(TaskKind kind);

// Rendered task prompt; the text alone determines the route at inference.
struct TaskPrompt {
  TaskKind kind = TaskKind::kClassification;
  std::string text;

  static TaskPrompt detection(const std::string& disease);
  static TaskPrompt segmentation(const std::string& disease);
  // `question` without the "Q:" prefix.
  static TaskPrompt vqa(const std::string& question);
  // `masked_sentence` without the "mask:" prefix.
  static TaskPrompt mlm(const std::string& masked_sentence);
  static TaskPrompt classification();

  // Infers the route from the prefix; empty text means classification.
  // Throws UsageError when no template matches.
  static TaskPrompt parse(const std::string& text);
};

inline constexpr const char* kDetectionPrefix = "This image is for the detection of";
inline constexpr const char* kVqaPrefix = "Q:";
inline constexpr const char* kMlmPrefix = "mask:";

struct TextEmbeddings {
  Tensor tokens;  // [L_t×N]
};

class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(ParameterStore& store, std::size_t vocab_size, std::size_t dim, std::size_t layers,
              std::size_t heads, std::size_t hidden, Rng& rng);

  TextEmbeddings forward(const TokenIds& ids) const;
  // Classification prompts carry no text and are rejected.
  TextEmbeddings encode(const Vocabulary& vocab, const TaskPrompt& prompt) const;

  Tensor embed;  // [V×N]
  std::vector<EncoderLayer> layers;
};

struct GenerationResult {
  TokenIds ids;            // emitted tokens, EOS excluded
  bool truncated = false;  // max_len reached without EOS
};

// Autoregressive decoder. The sequence is the prompt ids followed by the
// answer; every step uses causal self-attention plus cross-attention over the
// fused tokens, then projects to vocabulary logits.
class TextDecoder {
 public:
  TextDecoder() = default;
  TextDecoder(ParameterStore& store, std::size_t vocab_size, std::size_t dim, std::size_t layers,
              std::size_t heads, std::size_t hidden, Rng& rng);

  // Logits for every position of `ids` ([T×V]); row t predicts ids[t+1].
  Tensor logits(const TokenIds& ids, const Tensor& fused) const;
  GenerationResult generate(const Tensor& fused, const TokenIds& prompt_ids,
                            std::size_t max_len) const;

  Tensor embed;  // [V×N]
  std::vector<DecoderLayer> layers;
  LayerNorm final_norm;
  Linear vocab_proj;
};

// Teacher-forcing layout: input = prompt ++ answer, targets PAD over the
// prompt body and answer ++ EOS after it.
struct DecoderTargets {
  TokenIds input;
  TokenIds targets;
};
DecoderTargets make_decoder_targets(const TokenIds& prompt_ids, const TokenIds& answer_ids);

// Mean negative log-likelihood over non-PAD targets.
Tensor text_loss(const Tensor& logits, const TokenIds& targets);

}  // namespace unihema
