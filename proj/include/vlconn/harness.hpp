#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "vlconn/instructize.hpp"
#include "vlconn/mixer.hpp"
#include "vlconn/projectors.hpp"

namespace vlc {

// ---- model pieces ----------------------------------------------------------

enum class FeatureLayer { last, second_last };

struct EncoderConfig {
  std::size_t layers = 3;
  std::size_t grid = 16;   // H = W
  std::size_t width = 32;  // D_v
  FeatureLayer feature_layer = FeatureLayer::second_last;
  std::uint64_t seed = 0;
};

// Frozen stand-in for a pretrained vision tower: per-patch seeded inputs keyed
// by image id, pushed through fixed tanh layers. Never trained.
class StubVisionEncoder {
 public:
  explicit StubVisionEncoder(EncoderConfig cfg);
  const EncoderConfig& config() const { return cfg_; }
  FeatureMap encode(const std::string& image_id) const;
  const std::vector<NamedTensor>& parameters() const { return params_; }

 private:
  EncoderConfig cfg_;
  std::vector<NamedTensor> params_;
  mutable std::unordered_map<std::string, FeatureMap> cache_;
};

struct LmConfig {
  std::size_t vocab = 256;
  std::size_t width = 64;  // D_t
  std::size_t depth = 2;
  std::size_t heads = 2;
  std::size_t max_seq = 1024;
  bool image_indicator = false;
  std::uint64_t seed = 0;
};

// Byte-level tokens; the top two ids are reserved for the image indicators.
constexpr int kImageBegin = 254;
constexpr int kImageEnd = 255;
std::vector<int> tokenize(const std::string& text);

// Pre-norm causal decoder over [visual tokens | text embeddings].
class TinyLM {
 public:
  explicit TinyLM(LmConfig cfg);
  const LmConfig& config() const { return cfg_; }
  // Hidden states after the final norm, [S, D] with S = M (+2) + text length.
  Tensor hidden(const Tensor& visual, const std::vector<int>& text) const;
  // Next-token logits for the given rows of hidden().
  Tensor logits(const Tensor& hidden, const std::vector<std::size_t>& rows) const;
  std::size_t visual_offset(std::size_t num_visual) const { return num_visual + (cfg_.image_indicator ? 2 : 0); }
  double forward_flops(std::size_t seq_len) const;
  const std::vector<NamedTensor>& parameters() const { return params_; }

 private:
  struct Block {
    Tensor n1g, n1b, wq, wk, wv, wo, n2g, n2b, w1, b1, w2, b2;
  };
  Tensor param(const std::string& name, Shape shape, double bound, double fill = 0.0);

  LmConfig cfg_;
  std::vector<NamedTensor> params_;
  Rng rng_;
  Tensor tok_emb_, pos_emb_, final_g_, final_b_, head_;
  std::vector<Block> blocks_;
};

struct ModelConfig {
  ProjectorSpec projector;
  EncoderConfig encoder;
  LmConfig lm;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// A sequence ready for the LM: text tokens and which of them are response.
struct EncodedExample {
  std::string image_id;
  std::string dataset;
  std::vector<int> text;
  std::vector<bool> response;  // same length as text
};

// Turns become "input target\n" in order; the target bytes and the newline
// that closes each one are the response span.
EncodedExample encode_example(const InstructionExample& e);

class Model {
 public:
  explicit Model(const ModelConfig& cfg);
  const ModelConfig& config() const { return cfg_; }
  StubVisionEncoder& encoder() { return encoder_; }
  const StubVisionEncoder& encoder() const { return encoder_; }
  Projector& projector() { return *projector_; }
  const Projector& projector() const { return *projector_; }
  TinyLM& lm() { return lm_; }
  const TinyLM& lm() const { return lm_; }

  // Sum of response-token NLL and the number of response tokens.
  std::pair<Tensor, std::size_t> response_nll(const EncodedExample& ex) const;
  // Full-sequence logits [S, V] (row i predicts element i+1).
  Tensor sequence_logits(const EncodedExample& ex) const;
  std::size_t sequence_length(const EncodedExample& ex) const;

  // Parameters as "encoder.*", "projector.*", "lm.*".
  std::vector<NamedTensor> parameters() const;
  std::string config_echo() const;

 private:
  ModelConfig cfg_;
  StubVisionEncoder encoder_;
  std::unique_ptr<Projector> projector_;
  TinyLM lm_;
};

// Rejects width mismatches between encoder, projector and LM.
std::unique_ptr<Model> assemble(const ModelConfig& cfg);

void save_model(const Model& model, const std::string& path);
std::unique_ptr<Model> load_model(const std::string& path);

// Mean over response positions of -log p(token | prefix). logits row i scores
// sequence element i+1; rows that precede non-response elements are ignored.
Tensor sequence_response_loss(const Tensor& logits, const std::vector<int>& tokens, const std::vector<bool>& response);

// ---- training --------------------------------------------------------------

enum class Stage { pretrain, instruction_tune };
std::string to_string(Stage s);
Stage stage_from_string(const std::string& name);

struct OptimConfig {
  std::size_t batch_size = 8;
  double lr = 1e-3;
  double min_lr = 1e-4;
  std::size_t warmup_steps = 10;
  std::size_t total_steps = 100;
  double weight_decay = 0.01;
  double beta1 = 0.9, beta2 = 0.98, eps = 1e-6;
  double grad_clip = 1.0;
};

struct StageConfig {
  Stage stage = Stage::pretrain;
  OptimConfig optim;
  ModelConfig model;
  std::string init_checkpoint;  // optional: weights to start from
};

void to_json(nlohmann::json& j, const StageConfig& c);
void from_json(const nlohmann::json& j, StageConfig& c);

// The appendix hyperparameter table (full scale; the D-Abstractor pretrains at
// 1e-4) and the desk-scale presets used by the examples and tests.
StageConfig paper_preset(Stage stage, ProjectorKind kind = ProjectorKind::c_abstractor);
StageConfig toy_preset(Stage stage);

// Linear warmup to lr over the first warmup steps (reaching lr at step
// warmup-1), then cosine decay reaching min_lr exactly at total_steps-1.
double lr_at(const OptimConfig& cfg, std::size_t step);

// AdamW with decoupled weight decay on matrices (rank >= 2).
class AdamW {
 public:
  AdamW(std::vector<NamedTensor> params, const OptimConfig& cfg);
  // Clips the global gradient norm, applies one update, returns the pre-clip norm.
  double step(double lr);
  void zero_grad();

 private:
  std::vector<NamedTensor> params_;
  OptimConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

struct Checksums {
  std::uint64_t encoder = 0, projector = 0, lm = 0;
  bool operator==(const Checksums&) const = default;
};
Checksums checksums(const Model& model);

struct LogRow {
  std::size_t step;
  double loss, lr, grad_norm;
  Checksums after;
};

struct TrainingLog {
  Stage stage = Stage::pretrain;
  Checksums initial;
  std::vector<LogRow> rows;
  double final_loss = 0.0;  // corpus-mean response loss after the last step
  double seconds = 0.0;

  std::string to_csv() const;
};

// Trains in place: pretrain updates the projector only, instruction_tune the
// projector and LM; the encoder is never updated. Batches draw a dataset from
// the mixture, then the next record of that dataset's per-epoch shuffle.
// Throws std::runtime_error naming the step on a non-finite loss.
TrainingLog run_stage(Model& model, const StageConfig& cfg, const MixtureTable& mixture,
                      const std::vector<InstructionExample>& corpus, std::uint64_t seed);

// Uniform per_dataset mixture over the datasets present in a corpus.
MixtureTable corpus_mixture(const std::vector<InstructionExample>& corpus);
// Corpus-mean response loss without gradient tracking.
double corpus_loss(const Model& model, const std::vector<InstructionExample>& corpus);

// ---- metrics ---------------------------------------------------------------

struct BenchScore {
  std::string name;
  double score = 0.0;
  std::optional<double> bound;  // defaults from known_bound()
};
using BenchScores = std::vector<BenchScore>;

// MMB and SEED (and their subtasks "MMB:x", "SEED:x") out of 100, MME^P out
// of 2000, MME subtasks "MME:x" out of 200.
std::optional<double> known_bound(const std::string& name);
// 100 x mean(score / bound). Throws on a missing bound or out-of-range score.
double avg_n(const BenchScores& scores);
BenchScores scores_from_json(const nlohmann::json& j);

struct ProfileResult {
  double projector_flops = 0.0;  // forward + backward
  double lm_flops = 0.0;
  double total_flops = 0.0;
  double median_seconds = 0.0;
  std::size_t repetitions = 0;
};

// Analytic FLOPs (backward counted as twice forward) and median wall time of
// one forward+backward through projector and LM with sequence M + text_len.
// The projector spec's num_tokens is overridden by M.
ProfileResult profile_step(const ModelConfig& cfg, std::size_t m, std::size_t text_len, std::size_t repetitions = 5,
                           bool measure = true);

struct ProbeItem {
  std::string image_id;
  std::string prompt;
  std::vector<std::string> options;
  std::size_t answer = 0;
};

std::vector<ProbeItem> read_probe(const std::string& jsonl_path);
void write_probe(const std::string& jsonl_path, const std::vector<ProbeItem>& items);

struct ProbeResult {
  std::size_t correct = 0, total = 0;
  double accuracy() const { return total ? double(correct) / double(total) : 0.0; }
};

// Picks the option with the highest summed log-likelihood as a response to
// the prompt; deterministic given the weights.
ProbeResult evaluate_probe(const Model& model, const std::vector<ProbeItem>& items);

// ---- synthetic data --------------------------------------------------------

// n images, one caption each (dataset "toy_captions").
std::vector<InstructionExample> toy_caption_corpus(std::size_t n);
// n images, one instruction turn each (dataset "toy_instructions"); every
// prompt is identical, so the answer can only come from the image.
std::vector<InstructionExample> toy_instruction_corpus(std::size_t n);
// n items with `ways` equal-length random options and a uniformly drawn answer.
std::vector<ProbeItem> toy_probe(std::size_t n, std::size_t ways, std::uint64_t seed);
// Instruction examples that teach the correct option of each probe item.
std::vector<InstructionExample> probe_training_corpus(const std::vector<ProbeItem>& items);

}  // namespace vlc
