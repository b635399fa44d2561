#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>
#include <stdexcept>

#include "vlconn/harness.hpp"
#include "vlconn/ops.hpp"

namespace vlc {

namespace {

void set_trainable(const std::vector<NamedTensor>& params, bool flag) {
  for (auto p : params) p.tensor.set_requires_grad(flag);
}

}  // namespace

std::string to_string(Stage s) { return s == Stage::pretrain ? "pretrain" : "instruction_tune"; }

Stage stage_from_string(const std::string& name) {
  if (name == "pretrain") return Stage::pretrain;
  if (name == "instruction_tune" || name == "finetune") return Stage::instruction_tune;
  throw std::invalid_argument("unknown stage '" + name + "'");
}

void to_json(nlohmann::json& j, const StageConfig& c) {
  const auto& o = c.optim;
  j = nlohmann::json{{"stage", to_string(c.stage)},
                     {"optim",
                      {{"batch_size", o.batch_size},
                       {"lr", o.lr},
                       {"min_lr", o.min_lr},
                       {"warmup_steps", o.warmup_steps},
                       {"total_steps", o.total_steps},
                       {"weight_decay", o.weight_decay},
                       {"beta1", o.beta1},
                       {"beta2", o.beta2},
                       {"eps", o.eps},
                       {"grad_clip", o.grad_clip}}},
                     {"model", c.model}};
  if (!c.init_checkpoint.empty()) j["init_checkpoint"] = c.init_checkpoint;
}

void from_json(const nlohmann::json& j, StageConfig& c) {
  c = StageConfig{};
  c.stage = stage_from_string(j.at("stage").get<std::string>());
  if (j.contains("optim")) {
    const auto& o = j.at("optim");
    auto& t = c.optim;
    t.batch_size = o.value("batch_size", t.batch_size);
    t.lr = o.value("lr", t.lr);
    t.min_lr = o.value("min_lr", t.min_lr);
    t.warmup_steps = o.value("warmup_steps", t.warmup_steps);
    t.total_steps = o.value("total_steps", t.total_steps);
    t.weight_decay = o.value("weight_decay", t.weight_decay);
    t.beta1 = o.value("beta1", t.beta1);
    t.beta2 = o.value("beta2", t.beta2);
    t.eps = o.value("eps", t.eps);
    t.grad_clip = o.value("grad_clip", t.grad_clip);
  }
  if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
  c.init_checkpoint = j.value("init_checkpoint", std::string());
}

StageConfig paper_preset(Stage stage, ProjectorKind kind) {
  StageConfig c;
  c.stage = stage;
  c.model.projector.kind = kind;
  auto& o = c.optim;
  if (stage == Stage::pretrain) {
    o.batch_size = 256;
    o.lr = kind == ProjectorKind::d_abstractor ? 1e-4 : 3e-4;
    o.min_lr = 1e-5;
    o.warmup_steps = 2000;
    o.total_steps = 200000;
    o.weight_decay = 0.01;
  } else {
    o.batch_size = 128;
    o.lr = 2e-5;
    o.min_lr = 1e-6;
    o.warmup_steps = 150;
    o.total_steps = 10000;
    o.weight_decay = 1e-4;
  }
  return c;
}

StageConfig toy_preset(Stage stage) {
  StageConfig c;
  c.stage = stage;
  c.model.projector.num_tokens = 16;
  auto& o = c.optim;
  o.batch_size = 8;
  o.warmup_steps = 20;
  o.lr = 3e-3;
  o.min_lr = 1e-4;
  if (stage == Stage::pretrain) {
    o.total_steps = 300;
    o.weight_decay = 0.01;
  } else {
    o.total_steps = 500;
    o.weight_decay = 1e-4;
  }
  return c;
}

double lr_at(const OptimConfig& cfg, std::size_t step) {
  if (cfg.total_steps == 0) throw std::invalid_argument("total_steps must be positive");
  if (step < cfg.warmup_steps) return cfg.lr * double(step + 1) / double(cfg.warmup_steps);
  if (cfg.total_steps <= cfg.warmup_steps + 1) return cfg.min_lr;
  const double span = double(cfg.total_steps - 1 - cfg.warmup_steps);
  const double t = std::min(1.0, double(step - cfg.warmup_steps) / span);
  return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * t));
}

AdamW::AdamW(std::vector<NamedTensor> params, const OptimConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

double AdamW::step(double lr) {
  std::vector<std::vector<double>> grads;
  double sq = 0.0;
  for (const auto& p : params_) {
    grads.push_back(p.tensor.grad());
    for (double g : grads.back()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  const double clip = cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip ? cfg_.grad_clip / norm : 1.0;
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto w = params_[i].tensor.mutable_data();
    const bool decay = params_[i].tensor.rank() >= 2;
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double g = grads[i][k] * clip;
      m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g;
      v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g * g;
      const double update = (m[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg_.eps);
      if (decay) w[k] -= lr * cfg_.weight_decay * w[k];
      w[k] -= lr * update;
    }
  }
  return norm;
}

Checksums checksums(const Model& model) {
  return {parameter_checksum(model.encoder().parameters()), parameter_checksum(model.projector().parameters()),
          parameter_checksum(model.lm().parameters())};
}

std::string TrainingLog::to_csv() const {
  std::string out = "step,loss,lr,grad_norm,encoder_checksum,projector_checksum,lm_checksum\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%zu,%.10g,%.10g,%.10g,%016llx,%016llx,%016llx\n", r.step, r.loss, r.lr,
                  r.grad_norm, static_cast<unsigned long long>(r.after.encoder),
                  static_cast<unsigned long long>(r.after.projector), static_cast<unsigned long long>(r.after.lm));
    out += buf;
  }
  return out;
}

MixtureTable corpus_mixture(const std::vector<InstructionExample>& corpus) {
  std::map<std::string, int> seen;
  MixtureTable t;
  for (const auto& e : corpus) {
    if (seen.emplace(e.dataset, 0).second) t.datasets.push_back(e.dataset);
  }
  t.probabilities.assign(t.datasets.size(), t.datasets.empty() ? 0.0 : 1.0 / double(t.datasets.size()));
  return t;
}

double corpus_loss(const Model& model, const std::vector<InstructionExample>& corpus) {
  NoGradGuard guard;
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& e : corpus) {
    const auto [nll, n] = model.response_nll(encode_example(e));
    total += nll.item();
    count += n;
  }
  return count ? total / double(count) : 0.0;
}

TrainingLog run_stage(Model& model, const StageConfig& cfg, const MixtureTable& mixture,
                      const std::vector<InstructionExample>& corpus, std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  if (corpus.empty()) throw std::invalid_argument("run_stage needs a non-empty corpus");
  if (cfg.optim.batch_size == 0 || cfg.optim.total_steps == 0) {
    throw std::invalid_argument("batch size and total steps must be positive");
  }

  std::map<std::string, std::vector<EncodedExample>> by_dataset;
  for (const auto& e : corpus) by_dataset[e.dataset].push_back(encode_example(e));
  std::vector<std::vector<EncodedExample>*> pools;
  std::vector<EpochCursor> cursors;
  for (std::size_t i = 0; i < mixture.size(); ++i) {
    auto it = by_dataset.find(mixture.datasets[i]);
    if (it == by_dataset.end()) {
      if (mixture.probabilities[i] > 0.0) {
        throw std::invalid_argument("mixture draws " + mixture.datasets[i] + " but the corpus has no records for it");
      }
      pools.push_back(nullptr);
      cursors.emplace_back(1, 0);
      continue;
    }
    pools.push_back(&it->second);
    cursors.emplace_back(it->second.size(), seed ^ fnv1a(mixture.datasets[i]));
  }
  SampleStream stream(mixture, seed);

  // The trainable set: the encoder never is; the LM only in instruction tuning.
  const bool train_lm = cfg.stage == Stage::instruction_tune;
  set_trainable(model.lm().parameters(), train_lm);
  std::vector<NamedTensor> trainable = model.projector().parameters();
  if (train_lm) trainable.insert(trainable.end(), model.lm().parameters().begin(), model.lm().parameters().end());
  AdamW opt(trainable, cfg.optim);

  TrainingLog log;
  log.stage = cfg.stage;
  log.initial = checksums(model);
  for (std::size_t step = 0; step < cfg.optim.total_steps; ++step) {
    opt.zero_grad();
    std::vector<Tensor> parts;
    std::size_t tokens = 0;
    for (std::size_t b = 0; b < cfg.optim.batch_size; ++b) {
      const std::size_t d = stream.next_index();
      const auto& ex = (*pools[d])[cursors[d].next()];
      auto [nll, n] = model.response_nll(ex);
      parts.push_back(nll);
      tokens += n;
    }
    Tensor loss = parts[0];
    for (std::size_t i = 1; i < parts.size(); ++i) loss = loss + parts[i];
    loss = scale(loss, 1.0 / double(tokens));
    const double value = loss.item();
    if (!std::isfinite(value)) {
      set_trainable(model.lm().parameters(), true);
      throw std::runtime_error("non-finite loss at step " + std::to_string(step));
    }
    loss.backward();
    const double lr = lr_at(cfg.optim, step);
    const double norm = opt.step(lr);
    log.rows.push_back({step, value, lr, norm, checksums(model)});
  }
  opt.zero_grad();
  set_trainable(model.lm().parameters(), true);
  log.final_loss = corpus_loss(model, corpus);
  log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return log;
}

}  // namespace vlc
