#include <cmath>
#include <stdexcept>

#include "vlconn/harness.hpp"
#include "vlconn/ops.hpp"

namespace vlc {

namespace {

std::string feature_layer_name(FeatureLayer f) { return f == FeatureLayer::last ? "last" : "second_last"; }

FeatureLayer feature_layer_from(const std::string& s) {
  if (s == "last") return FeatureLayer::last;
  if (s == "second_last") return FeatureLayer::second_last;
  throw std::invalid_argument("unknown feature layer '" + s + "' (expected last or second_last)");
}

void check_compatible(const ModelConfig& c) {
  c.projector.validate();
  if (c.encoder.layers == 0 || c.encoder.grid == 0 || c.encoder.width == 0) {
    throw std::invalid_argument("encoder needs at least one layer and a non-empty grid");
  }
  if (c.encoder.feature_layer == FeatureLayer::second_last && c.encoder.layers < 2) {
    throw std::invalid_argument("second_last feature layer needs an encoder with at least 2 layers");
  }
  if (c.projector.vision_width != c.encoder.width) {
    throw std::invalid_argument("projector expects D_v=" + std::to_string(c.projector.vision_width) +
                                " but the encoder produces " + std::to_string(c.encoder.width));
  }
  if (c.projector.text_width != c.lm.width) {
    throw std::invalid_argument("projector emits D_t=" + std::to_string(c.projector.text_width) +
                                " but the LM width is " + std::to_string(c.lm.width));
  }
  if (c.projector.grid_height != c.encoder.grid || c.projector.grid_width != c.encoder.grid) {
    throw std::invalid_argument("projector grid " + std::to_string(c.projector.grid_height) + "x" +
                                std::to_string(c.projector.grid_width) + " does not match the encoder grid " +
                                std::to_string(c.encoder.grid));
  }
  if (c.lm.vocab != 256) throw std::invalid_argument("the byte tokenizer needs vocab 256");
  if (c.lm.heads == 0 || c.lm.width % c.lm.heads != 0) {
    throw std::invalid_argument("LM heads must divide the LM width");
  }
  if (c.lm.depth == 0) throw std::invalid_argument("LM depth must be positive");
}

}  // namespace

// ---- encoder ---------------------------------------------------------------

StubVisionEncoder::StubVisionEncoder(EncoderConfig cfg) : cfg_(cfg) {
  Rng rng(cfg_.seed ^ 0x51ab5eedULL);
  const std::size_t d = cfg_.width;
  // Gain 1.5 keeps tanh away from both its linear and saturated regimes.
  const double sd = 1.5 / std::sqrt(double(d));
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    std::vector<double> w(d * d), b(d);
    for (auto& x : w) x = sd * rng.normal();
    for (auto& x : b) x = 0.1 * rng.normal();
    params_.push_back({"layers." + std::to_string(l) + ".weight", Tensor::from({d, d}, std::move(w))});
    params_.push_back({"layers." + std::to_string(l) + ".bias", Tensor::from({d}, std::move(b))});
  }
}

FeatureMap StubVisionEncoder::encode(const std::string& image_id) const {
  if (auto it = cache_.find(image_id); it != cache_.end()) return it->second;
  NoGradGuard guard;
  const std::size_t n = cfg_.grid * cfg_.grid, d = cfg_.width;
  Rng rng(cfg_.seed ^ fnv1a(image_id));
  std::vector<double> x0(n * d);
  for (auto& v : x0) v = rng.normal();
  Tensor x = Tensor::from({n, d}, std::move(x0));
  const std::size_t stop = cfg_.feature_layer == FeatureLayer::last ? cfg_.layers : cfg_.layers - 1;
  for (std::size_t l = 0; l < stop; ++l) x = tanh(linear(x, params_[2 * l].tensor, params_[2 * l + 1].tensor));
  FeatureMap fm(x.detach(), cfg_.grid, cfg_.grid);
  cache_.emplace(image_id, fm);
  return fm;
}

// ---- LM --------------------------------------------------------------------

std::vector<int> tokenize(const std::string& text) {
  std::vector<int> out;
  out.reserve(text.size());
  for (unsigned char c : text) {
    if (c >= kImageBegin) throw std::invalid_argument("text contains a reserved byte (0xFE/0xFF)");
    out.push_back(c);
  }
  return out;
}

Tensor TinyLM::param(const std::string& name, Shape shape, double bound, double fill) {
  std::vector<double> v(shape_numel(shape), fill);
  if (bound > 0.0) {
    for (auto& x : v) x = rng_.uniform(-bound, bound);
  }
  params_.push_back({name, Tensor::from(std::move(shape), std::move(v), true)});
  return params_.back().tensor;
}

TinyLM::TinyLM(LmConfig cfg) : cfg_(cfg), rng_(cfg.seed ^ 0x7e11ULL) {
  const std::size_t d = cfg_.width, v = cfg_.vocab, f = 4 * cfg_.width;
  const double wd = 1.0 / std::sqrt(double(d)), wf = 1.0 / std::sqrt(double(f));
  tok_emb_ = param("tok_emb", {v, d}, 0.5);
  pos_emb_ = param("pos_emb", {cfg_.max_seq, d}, 0.1);
  for (std::size_t l = 0; l < cfg_.depth; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    Block b;
    b.n1g = param(p + "attn_norm.gain", {d}, 0.0, 1.0);
    b.n1b = param(p + "attn_norm.bias", {d}, 0.0);
    b.wq = param(p + "attn.q.weight", {d, d}, wd);
    b.wk = param(p + "attn.k.weight", {d, d}, wd);
    b.wv = param(p + "attn.v.weight", {d, d}, wd);
    b.wo = param(p + "attn.o.weight", {d, d}, wd);
    b.n2g = param(p + "ffn_norm.gain", {d}, 0.0, 1.0);
    b.n2b = param(p + "ffn_norm.bias", {d}, 0.0);
    b.w1 = param(p + "ffn.up.weight", {f, d}, wd);
    b.b1 = param(p + "ffn.up.bias", {f}, 0.0);
    b.w2 = param(p + "ffn.down.weight", {d, f}, wf);
    b.b2 = param(p + "ffn.down.bias", {d}, 0.0);
    blocks_.push_back(b);
  }
  final_g_ = param("final_norm.gain", {d}, 0.0, 1.0);
  final_b_ = param("final_norm.bias", {d}, 0.0);
  head_ = param("head.weight", {v, d}, wd);
}

Tensor TinyLM::hidden(const Tensor& visual, const std::vector<int>& text) const {
  if (visual.rank() != 2 || visual.size(1) != cfg_.width) {
    throw std::invalid_argument("visual tokens must be [M, " + std::to_string(cfg_.width) + "]");
  }
  std::vector<Tensor> parts;
  auto embed = [&](const std::vector<int>& ids) {
    std::vector<std::size_t> rows(ids.begin(), ids.end());
    return gather_rows(tok_emb_, rows);
  };
  if (cfg_.image_indicator) parts.push_back(embed({kImageBegin}));
  parts.push_back(visual);
  if (cfg_.image_indicator) parts.push_back(embed({kImageEnd}));
  if (!text.empty()) parts.push_back(embed(text));
  const std::size_t s = visual_offset(visual.size(0)) + text.size();
  if (s > cfg_.max_seq) {
    throw std::invalid_argument("sequence of " + std::to_string(s) + " exceeds max_seq " + std::to_string(cfg_.max_seq));
  }
  Tensor x = concat_rows(parts) + slice_rows(pos_emb_, 0, s);
  for (const auto& b : blocks_) {
    Tensor h = layer_norm(x, b.n1g, b.n1b);
    Tensor a = multi_head_attention(linear(h, b.wq), linear(h, b.wk), linear(h, b.wv), cfg_.heads, true).output;
    x = x + linear(a, b.wo);
    h = layer_norm(x, b.n2g, b.n2b);
    x = x + linear(gelu(linear(h, b.w1, b.b1)), b.w2, b.b2);
  }
  return layer_norm(x, final_g_, final_b_);
}

Tensor TinyLM::logits(const Tensor& hidden, const std::vector<std::size_t>& rows) const {
  return linear(gather_rows(hidden, rows), head_);
}

double TinyLM::forward_flops(std::size_t seq_len) const {
  const double s = double(seq_len), d = double(cfg_.width), f = 4.0 * d, v = double(cfg_.vocab);
  const double per_layer = 2.0 * s * d * 4.0 * d  // q, k, v, o
                           + 4.0 * s * s * d      // scores and weighted sum
                           + 4.0 * s * d * f;     // ffn up and down
  return double(cfg_.depth) * per_layer + 2.0 * s * d * v;
}

// ---- model -----------------------------------------------------------------

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"projector", c.projector},
                     {"encoder",
                      {{"layers", c.encoder.layers},
                       {"grid", c.encoder.grid},
                       {"width", c.encoder.width},
                       {"feature_layer", feature_layer_name(c.encoder.feature_layer)},
                       {"seed", c.encoder.seed}}},
                     {"lm",
                      {{"vocab", c.lm.vocab},
                       {"width", c.lm.width},
                       {"depth", c.lm.depth},
                       {"heads", c.lm.heads},
                       {"max_seq", c.lm.max_seq},
                       {"image_indicator", c.lm.image_indicator},
                       {"seed", c.lm.seed}}}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c = ModelConfig{};
  if (j.contains("projector")) c.projector = j.at("projector").get<ProjectorSpec>();
  if (j.contains("encoder")) {
    const auto& e = j.at("encoder");
    c.encoder.layers = e.value("layers", c.encoder.layers);
    c.encoder.grid = e.value("grid", c.encoder.grid);
    c.encoder.width = e.value("width", c.encoder.width);
    c.encoder.feature_layer = feature_layer_from(e.value("feature_layer", std::string("second_last")));
    c.encoder.seed = e.value("seed", c.encoder.seed);
  }
  if (j.contains("lm")) {
    const auto& l = j.at("lm");
    c.lm.vocab = l.value("vocab", c.lm.vocab);
    c.lm.width = l.value("width", c.lm.width);
    c.lm.depth = l.value("depth", c.lm.depth);
    c.lm.heads = l.value("heads", c.lm.heads);
    c.lm.max_seq = l.value("max_seq", c.lm.max_seq);
    c.lm.image_indicator = l.value("image_indicator", c.lm.image_indicator);
    c.lm.seed = l.value("seed", c.lm.seed);
  }
}

EncodedExample encode_example(const InstructionExample& e) {
  EncodedExample out{e.image_id, e.dataset, {}, {}};
  for (const auto& t : e.turns) {
    const auto in = tokenize(t.input + " ");
    const auto tgt = tokenize(t.target + "\n");
    out.text.insert(out.text.end(), in.begin(), in.end());
    out.response.insert(out.response.end(), in.size(), false);
    out.text.insert(out.text.end(), tgt.begin(), tgt.end());
    out.response.insert(out.response.end(), tgt.size(), true);
  }
  return out;
}

Model::Model(const ModelConfig& cfg)
    : cfg_((check_compatible(cfg), cfg)), encoder_(cfg.encoder), projector_(make_projector(cfg.projector)), lm_(cfg.lm) {}

std::size_t Model::sequence_length(const EncodedExample& ex) const {
  return lm_.visual_offset(cfg_.projector.num_tokens) + ex.text.size();
}

std::pair<Tensor, std::size_t> Model::response_nll(const EncodedExample& ex) const {
  const Tensor visual = projector_->forward(encoder_.encode(ex.image_id)).tokens.tokens;
  const Tensor h = lm_.hidden(visual, ex.text);
  const std::size_t off = lm_.visual_offset(visual.size(0));
  std::vector<std::size_t> rows, targets;
  for (std::size_t t = 0; t < ex.text.size(); ++t) {
    if (!ex.response[t]) continue;
    rows.push_back(off + t - 1);
    targets.push_back(static_cast<std::size_t>(ex.text[t]));
  }
  if (rows.empty()) throw std::invalid_argument("example for " + ex.image_id + " has an empty response");
  const Tensor mean_nll = cross_entropy(lm_.logits(h, rows), targets);
  return {scale(mean_nll, double(rows.size())), rows.size()};
}

Tensor Model::sequence_logits(const EncodedExample& ex) const {
  const Tensor visual = projector_->forward(encoder_.encode(ex.image_id)).tokens.tokens;
  const Tensor h = lm_.hidden(visual, ex.text);
  std::vector<std::size_t> rows(h.size(0));
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return lm_.logits(h, rows);
}

std::vector<NamedTensor> Model::parameters() const {
  std::vector<NamedTensor> out;
  for (const auto& p : encoder_.parameters()) out.push_back({"encoder." + p.name, p.tensor});
  for (const auto& p : projector_->parameters()) out.push_back({"projector." + p.name, p.tensor});
  for (const auto& p : lm_.parameters()) out.push_back({"lm." + p.name, p.tensor});
  return out;
}

std::string Model::config_echo() const { return nlohmann::json(cfg_).dump(); }

std::unique_ptr<Model> assemble(const ModelConfig& cfg) { return std::make_unique<Model>(cfg); }

void save_model(const Model& model, const std::string& path) {
  save_checkpoint(path, model.config_echo(), model.parameters());
}

std::unique_ptr<Model> load_model(const std::string& path) {
  const auto ckpt = load_checkpoint(path);
  ModelConfig cfg;
  try {
    cfg = nlohmann::json::parse(ckpt.spec_echo).get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path + " does not carry a model config: " + e.what());
  }
  auto model = assemble(cfg);
  restore_parameters(ckpt, model->parameters());
  return model;
}

Tensor sequence_response_loss(const Tensor& logits, const std::vector<int>& tokens, const std::vector<bool>& response) {
  if (logits.rank() != 2 || logits.size(0) != tokens.size() || response.size() != tokens.size()) {
    throw std::invalid_argument("sequence_response_loss: logits, tokens and mask must cover the same sequence");
  }
  std::vector<std::size_t> rows, targets;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (!response[i]) continue;
    if (i == 0) throw std::invalid_argument("sequence_response_loss: the first element has no prefix to predict it");
    rows.push_back(i - 1);
    targets.push_back(static_cast<std::size_t>(tokens[i]));
  }
  if (rows.empty()) throw std::invalid_argument("sequence_response_loss: empty response");
  return cross_entropy(gather_rows(logits, rows), targets);
}

}  // namespace vlc
