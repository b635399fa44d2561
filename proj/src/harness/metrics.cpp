#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

#include "vlconn/harness.hpp"
#include "vlconn/ops.hpp"

namespace vlc {

std::optional<double> known_bound(const std::string& name) {
  auto prefixed = [&](const std::string& p) { return name.rfind(p, 0) == 0; };
  if (name == "MMB" || name == "SEED" || prefixed("MMB:") || prefixed("SEED:")) return 100.0;
  if (name == "MME^P" || name == "MME-P") return 2000.0;
  if (prefixed("MME:")) return 200.0;
  return std::nullopt;
}

double avg_n(const BenchScores& scores) {
  if (scores.empty()) throw std::invalid_argument("avg_n needs at least one score");
  double acc = 0.0;
  for (const auto& s : scores) {
    const auto bound = s.bound ? s.bound : known_bound(s.name);
    if (!bound) throw std::invalid_argument("no upper bound for score '" + s.name + "'");
    if (!(*bound > 0.0)) throw std::invalid_argument("upper bound for '" + s.name + "' must be positive");
    if (!(s.score >= 0.0 && s.score <= *bound)) {
      throw std::invalid_argument("score for '" + s.name + "' lies outside [0, " + std::to_string(*bound) + "]");
    }
    acc += s.score / *bound;
  }
  return 100.0 * acc / double(scores.size());
}

BenchScores scores_from_json(const nlohmann::json& j) {
  BenchScores out;
  auto one = [&](const std::string& name, const nlohmann::json& v) {
    BenchScore s{name, 0.0, std::nullopt};
    if (v.is_number()) {
      s.score = v.get<double>();
    } else {
      s.score = v.at("score").get<double>();
      if (v.contains("bound")) s.bound = v.at("bound").get<double>();
    }
    out.push_back(s);
  };
  const nlohmann::json& list = j.is_object() && j.contains("scores") ? j.at("scores") : j;
  if (list.is_array()) {
    for (const auto& v : list) one(v.at("name").get<std::string>(), v);
  } else if (list.is_object()) {
    for (const auto& [name, v] : list.items()) one(name, v);
  } else {
    throw std::invalid_argument("scores must be an object or an array");
  }
  return out;
}

ProfileResult profile_step(const ModelConfig& base, std::size_t m, std::size_t text_len, std::size_t repetitions,
                           bool measure) {
  ModelConfig cfg = base;
  cfg.projector.num_tokens = m;
  const std::size_t n = cfg.encoder.grid * cfg.encoder.grid;
  const auto kind = cfg.projector.kind;
  if (m > n && (kind == ProjectorKind::c_abstractor || kind == ProjectorKind::d_abstractor)) {
    cfg.projector.allow_upsample = true;
  }
  const std::size_t seq = m + (cfg.lm.image_indicator ? 2 : 0) + text_len;
  if (seq > cfg.lm.max_seq) cfg.lm.max_seq = seq;
  Model model(cfg);

  ProfileResult r;
  r.projector_flops = 3.0 * model.projector().forward_flops(cfg.encoder.grid, cfg.encoder.grid);
  r.lm_flops = 3.0 * model.lm().forward_flops(seq);
  r.total_flops = r.projector_flops + r.lm_flops;
  if (!measure) return r;

  std::vector<int> text(text_len);
  for (std::size_t i = 0; i < text_len; ++i) text[i] = 'a' + int(i % 26);
  const FeatureMap fm = model.encoder().encode("profile");
  const auto params = model.parameters();
  auto once = [&] {
    const auto t0 = std::chrono::steady_clock::now();
    const Tensor visual = model.projector().forward(fm).tokens.tokens;
    const Tensor h = model.lm().hidden(visual, text);
    std::vector<std::size_t> rows(h.size(0));
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    mean(model.lm().logits(h, rows)).backward();
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    for (auto p : params) p.tensor.zero_grad();
    return s;
  };
  once();  // warm caches and the encoder
  std::vector<double> times;
  for (std::size_t i = 0; i < std::max<std::size_t>(repetitions, 5); ++i) times.push_back(once());
  std::sort(times.begin(), times.end());
  const std::size_t k = times.size();
  r.median_seconds = k % 2 ? times[k / 2] : 0.5 * (times[k / 2 - 1] + times[k / 2]);
  r.repetitions = k;
  return r;
}

}  // namespace vlc
