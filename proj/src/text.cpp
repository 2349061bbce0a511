#include "unihema/text.hpp"

#include <fstream>
#include <sstream>

#include "unihema/error.hpp"
#include "unihema/ops.hpp"

namespace unihema {

const std::vector<std::string>& Vocabulary::reserved() {
  static const std::vector<std::string> r{"<pad>", "<bos>", "<eos>", "<mask>"};
  return r;
}

Vocabulary::Vocabulary(const std::vector<std::string>& words) {
  for (const auto& w : reserved()) {
    ids_.emplace(w, tokens_.size());
    tokens_.push_back(w);
  }
  for (const auto& w : words) {
    if (w.empty() || w.find_first_of(" \t\r\n") != std::string::npos) {
      throw DataError("invalid vocabulary token '" + w + "'");
    }
    if (ids_.emplace(w, tokens_.size()).second) tokens_.push_back(w);
  }
}

std::size_t Vocabulary::id(const std::string& word) const {
  auto it = ids_.find(word);
  if (it == ids_.end()) throw LexicalError(word);
  return it->second;
}

const std::string& Vocabulary::token(std::size_t id) const {
  if (id >= tokens_.size()) throw DataError("token id " + std::to_string(id) + " out of range");
  return tokens_[id];
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string word;
  while (in >> word) {
    std::vector<std::string> trailing;
    while (word.size() > 1 && (word.back() == '.' || word.back() == ',')) {
      trailing.insert(trailing.begin(), std::string(1, word.back()));
      word.pop_back();
    }
    out.push_back(word);
    out.insert(out.end(), trailing.begin(), trailing.end());
  }
  return out;
}

TokenIds Vocabulary::tokenize(const std::string& text) const {
  TokenIds ids{kBos};
  for (const auto& w : split_words(text)) ids.push_back(id(w));
  ids.push_back(kEos);
  return ids;
}

std::string Vocabulary::detokenize(const TokenIds& ids) const {
  std::string out;
  for (auto i : ids) {
    if (i == kBos || i == kEos || i == kPad) continue;
    const std::string& w = token(i);
    const bool attach = (w == "." || w == ",") && !out.empty();
    if (!out.empty() && !attach) out += ' ';
    out += w;
  }
  return out;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write vocabulary: " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError(path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  const auto& r = reserved();
  if (lines.size() < r.size()) throw FormatError(path.string() + ": vocabulary too short");
  for (std::size_t i = 0; i < r.size(); ++i) {
    if (lines[i] != r[i]) {
      throw FormatError(path.string() + ":" + std::to_string(i + 1) + ": expected reserved token " +
                        r[i]);
    }
  }
  Vocabulary v(std::vector<std::string>(lines.begin() + static_cast<long>(r.size()), lines.end()));
  if (v.size() != lines.size()) throw FormatError(path.string() + ": duplicate vocabulary entry");
  return v;
}

std::string task_tag(TaskKind kind) {
  switch (kind) {
    case TaskKind::kDetection: return "det";
    case TaskKind::kSegmentation: return "seg";
    case TaskKind::kVqa: return "vqa";
    case TaskKind::kMlm: return "mlm";
    case TaskKind::kClassification: return "cls";
  }
  return "?";
}

TaskKind task_from_tag(const std::string& tag) {
  if (tag == "det") return TaskKind::kDetection;
  if (tag == "seg") return TaskKind::kSegmentation;
  if (tag == "vqa") return TaskKind::kVqa;
  if (tag == "mlm") return TaskKind::kMlm;
  if (tag == "cls") return TaskKind::kClassification;
  throw UsageError("unknown task '" + tag + "' (expected det, seg, cls, vqa or mlm)");
}

bool is_text_task(TaskKind kind) { return kind == TaskKind::kVqa || kind == TaskKind::kMlm; }

TaskPrompt TaskPrompt::detection(const std::string& disease) {
  return {TaskKind::kDetection, std::string(kDetectionPrefix) + " " + disease + " of cells."};
}

TaskPrompt TaskPrompt::segmentation(const std::string& disease) {
  return {TaskKind::kSegmentation, std::string(kDetectionPrefix) + " " + disease + " of cells."};
}

TaskPrompt TaskPrompt::vqa(const std::string& question) {
  return {TaskKind::kVqa, std::string(kVqaPrefix) + " " + question};
}

TaskPrompt TaskPrompt::mlm(const std::string& masked_sentence) {
  return {TaskKind::kMlm, std::string(kMlmPrefix) + " " + masked_sentence};
}

TaskPrompt TaskPrompt::classification() { return {TaskKind::kClassification, ""}; }

TaskPrompt TaskPrompt::parse(const std::string& text) {
  auto starts = [&](const char* prefix) { return text.rfind(prefix, 0) == 0; };
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) return classification();
  if (starts(kDetectionPrefix)) return {TaskKind::kDetection, text};
  if (starts(kVqaPrefix)) return {TaskKind::kVqa, text};
  if (starts(kMlmPrefix)) return {TaskKind::kMlm, text};
  throw UsageError(
      "unroutable prompt; expected one of:\n"
      "  \"This image is for the detection of <disease> of cells.\"\n"
      "  \"Q: <question>\"\n"
      "  \"mask: <sentence with <mask>>\"");
}

TextEncoder::TextEncoder(ParameterStore& store, std::size_t vocab_size, std::size_t dim,
                         std::size_t count, std::size_t heads, std::size_t hidden, Rng& rng) {
  if (vocab_size == 0) throw ConfigError("text encoder: empty vocabulary");
  embed = store.create("text_encoder.embed", normal_init({vocab_size, dim}, 0.1, rng));
  for (std::size_t i = 0; i < count; ++i) {
    layers.emplace_back(store, "text_encoder.layer" + std::to_string(i), dim, heads, hidden, rng);
  }
}

TextEmbeddings TextEncoder::forward(const TokenIds& ids) const {
  if (ids.empty()) throw UsageError("text encoder: empty token sequence");
  Tensor x = gather_rows(embed, ids);
  x = add(x, sinusoidal_1d(ids.size(), embed.dim(1)));
  for (const auto& layer : layers) x = layer.forward(x);
  return {x};
}

TextEmbeddings TextEncoder::encode(const Vocabulary& vocab, const TaskPrompt& prompt) const {
  if (prompt.kind == TaskKind::kClassification) {
    throw UsageError("classification prompts bypass the text encoder");
  }
  return forward(vocab.tokenize(prompt.text));
}

TextDecoder::TextDecoder(ParameterStore& store, std::size_t vocab_size, std::size_t dim,
                         std::size_t count, std::size_t heads, std::size_t hidden, Rng& rng) {
  if (vocab_size == 0) throw ConfigError("text decoder: empty vocabulary");
  embed = store.create("text_decoder.embed", normal_init({vocab_size, dim}, 0.1, rng));
  for (std::size_t i = 0; i < count; ++i) {
    layers.emplace_back(store, "text_decoder.layer" + std::to_string(i), dim, heads, hidden, rng);
  }
  final_norm = LayerNorm(store, "text_decoder.final_norm", dim);
  vocab_proj = Linear(store, "text_decoder.vocab", dim, vocab_size, rng);
}

Tensor TextDecoder::logits(const TokenIds& ids, const Tensor& fused) const {
  if (ids.empty()) throw UsageError("text decoder: empty token sequence");
  Tensor x = gather_rows(embed, ids);
  x = add(x, sinusoidal_1d(ids.size(), embed.dim(1)));
  Tensor mask = causal_mask(ids.size());
  for (const auto& layer : layers) x = layer.forward(x, fused, mask);
  return vocab_proj.forward(final_norm.forward(x));
}

GenerationResult TextDecoder::generate(const Tensor& fused, const TokenIds& prompt_ids,
                                       std::size_t max_len) const {
  if (max_len == 0) throw UsageError("generate: max_len must be at least 1");
  NoGradGuard no_grad;
  GenerationResult result;
  TokenIds seq = prompt_ids;
  if (seq.empty()) seq.push_back(Vocabulary::kBos);
  const std::size_t vocab = vocab_proj.out_features();
  for (std::size_t step = 0; step < max_len; ++step) {
    Tensor lg = logits(seq, fused);
    auto last = lg.data().subspan((seq.size() - 1) * vocab, vocab);
    std::size_t best = 0;
    for (std::size_t v = 1; v < vocab; ++v) {
      if (last[v] > last[best]) best = v;
    }
    if (best == Vocabulary::kEos) return result;
    result.ids.push_back(best);
    seq.push_back(best);
  }
  result.truncated = true;
  return result;
}

DecoderTargets make_decoder_targets(const TokenIds& prompt_ids, const TokenIds& answer_ids) {
  if (prompt_ids.empty()) throw UsageError("decoder targets: empty prompt");
  DecoderTargets t;
  t.input = prompt_ids;
  t.input.insert(t.input.end(), answer_ids.begin(), answer_ids.end());
  t.targets.assign(t.input.size(), Vocabulary::kPad);
  // Position p predicts input[p+1]; the last prompt token starts the answer.
  const std::size_t start = prompt_ids.size() - 1;
  for (std::size_t i = 0; i < answer_ids.size(); ++i) t.targets[start + i] = answer_ids[i];
  t.targets[start + answer_ids.size()] = Vocabulary::kEos;
  return t;
}

Tensor text_loss(const Tensor& logits, const TokenIds& targets) {
  if (logits.ndim() != 2 || logits.dim(0) != targets.size()) {
    throw DimensionError("text_loss: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
  }
  std::vector<double> weights(targets.size(), 0.0);
  TokenIds safe(targets.size());
  double count = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    safe[i] = targets[i];
    if (targets[i] != Vocabulary::kPad) {
      weights[i] = 1.0;
      count += 1.0;
    }
  }
  if (count == 0.0) throw UsageError("text_loss: all targets are PAD");
  for (auto& w : weights) w /= -count;
  return dot_const(pick(log_softmax(logits), safe), weights);
}

}  // namespace unihema
