#include "vlconn/mixer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>

namespace vlc {

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::per_dataset: return "per_dataset";
    case Strategy::per_task: return "per_task";
    case Strategy::per_sample_100k: return "per_sample_100k";
    case Strategy::per_dataset_tuned: return "per_dataset_tuned";
  }
  return "?";
}

Strategy strategy_from_string(const std::string& name) {
  for (auto s : {Strategy::per_dataset, Strategy::per_task, Strategy::per_sample_100k, Strategy::per_dataset_tuned}) {
    if (to_string(s) == name) return s;
  }
  throw std::invalid_argument("unknown balancing strategy '" + name + "'");
}

void MixtureSpec::validate() const {
  if (entries.empty()) throw std::invalid_argument("mixture has no datasets");
  std::set<std::string> names;
  const bool tuned = strategy == Strategy::per_dataset_tuned;
  double weight_sum = 0.0;
  for (const auto& e : entries) {
    if (e.dataset.empty()) throw std::invalid_argument("mixture entry without a dataset name");
    if (!names.insert(e.dataset).second) throw std::invalid_argument("dataset " + e.dataset + " listed twice");
    if (strategy == Strategy::per_task && e.task.empty()) {
      throw std::invalid_argument("per_task balancing needs a task for " + e.dataset);
    }
    if (strategy == Strategy::per_sample_100k && e.size == 0) {
      throw std::invalid_argument("per_sample_100k needs a positive size for " + e.dataset);
    }
    if (tuned != e.weight.has_value()) {
      throw std::invalid_argument(tuned ? "per_dataset_tuned needs a weight for " + e.dataset
                                        : "dataset " + e.dataset + " has a hand weight but the strategy is " +
                                              to_string(strategy));
    }
    if (tuned) {
      if (!(*e.weight >= 0.0) || !std::isfinite(*e.weight)) {
        throw std::invalid_argument("weight for " + e.dataset + " must be finite and non-negative");
      }
      weight_sum += *e.weight;
    }
  }
  if (tuned && !(weight_sum > 0.0)) throw std::invalid_argument("hand weights must have a positive sum");
  if (clip == 0) throw std::invalid_argument("clip must be positive");
}

std::vector<std::uint64_t> MixtureSpec::sizes() const {
  std::vector<std::uint64_t> out;
  for (const auto& e : entries) out.push_back(e.size);
  return out;
}

void to_json(nlohmann::json& j, const MixtureSpec& s) {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& e : s.entries) {
    nlohmann::json d{{"name", e.dataset}, {"task", e.task}};
    if (e.size) d["size"] = e.size;
    if (e.weight) d["weight"] = *e.weight;
    list.push_back(d);
  }
  j = nlohmann::json{{"strategy", to_string(s.strategy)}, {"clip", s.clip}, {"datasets", list}};
}

void from_json(const nlohmann::json& j, MixtureSpec& s) {
  s.strategy = strategy_from_string(j.at("strategy").get<std::string>());
  s.clip = j.value("clip", std::uint64_t{100000});
  s.entries.clear();
  for (const auto& d : j.at("datasets")) {
    MixtureEntry e;
    e.dataset = d.at("name").get<std::string>();
    e.task = d.value("task", std::string());
    const auto size = d.value("size", std::int64_t{0});
    if (size < 0) throw std::invalid_argument("size for " + e.dataset + " must be positive");
    e.size = static_cast<std::uint64_t>(size);
    if (d.contains("weight")) e.weight = d.at("weight").get<double>();
    s.entries.push_back(std::move(e));
  }
  s.validate();
}

MixtureSpec load_mixture(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open mixture spec " + path);
  return nlohmann::json::parse(is).get<MixtureSpec>();
}

MixtureSpec paper_tuned_mixture() {
  MixtureSpec s;
  s.strategy = Strategy::per_dataset_tuned;
  const std::vector<std::tuple<const char*, const char*, double>> rows = {
      {"VQAv2", "vqa_open", 10.3},   {"GQA", "vqa_open", 10.3},     {"OCRVQA", "vqa_open", 5.1},
      {"VSR", "vqa_open", 2.6},      {"ScienceQA", "vqa_mc", 5.1},  {"A-OKVQA", "vqa_mc", 10.3},
      {"COYO100M", "captioning", 7.7}, {"RefCOCO", "rec", 10.3},    {"RefCOCO+", "rec", 10.3},
      {"RefCOCOg", "rec", 10.3},     {"VG", "rec", 5.1},            {"LLaVA150K", "instruction", 10.3},
      {"ShareGPT", "instruction", 2.6}};
  for (const auto& [name, task, w] : rows) s.entries.push_back({name, task, 0, w});
  return s;
}

double MixtureTable::probability(const std::string& dataset) const {
  for (std::size_t i = 0; i < datasets.size(); ++i) {
    if (datasets[i] == dataset) return probabilities[i];
  }
  throw std::out_of_range("dataset " + dataset + " is not in the mixture");
}

std::string MixtureTable::to_csv() const {
  std::string out = "dataset,probability\n";
  char buf[64];
  for (std::size_t i = 0; i < datasets.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g", probabilities[i]);
    out += datasets[i] + "," + buf + "\n";
  }
  return out;
}

MixtureTable resolve(const MixtureSpec& spec) {
  spec.validate();
  MixtureTable t;
  std::vector<double> mass;
  switch (spec.strategy) {
    case Strategy::per_dataset:
      mass.assign(spec.entries.size(), 1.0);
      break;
    case Strategy::per_task: {
      std::map<std::string, std::size_t> per_task;
      for (const auto& e : spec.entries) ++per_task[e.task];
      for (const auto& e : spec.entries) {
        mass.push_back(1.0 / (double(per_task.size()) * double(per_task[e.task])));
      }
      break;
    }
    case Strategy::per_sample_100k:
      for (const auto& e : spec.entries) mass.push_back(double(std::min(e.size, spec.clip)));
      break;
    case Strategy::per_dataset_tuned:
      for (const auto& e : spec.entries) mass.push_back(*e.weight);
      break;
  }
  const double total = std::accumulate(mass.begin(), mass.end(), 0.0);
  for (std::size_t i = 0; i < spec.entries.size(); ++i) {
    t.datasets.push_back(spec.entries[i].dataset);
    t.probabilities.push_back(mass[i] / total);
  }
  return t;
}

SampleStream::SampleStream(MixtureTable table, std::uint64_t seed) : table_(std::move(table)), rng_(seed) {
  if (table_.size() == 0) throw std::invalid_argument("cannot sample from an empty mixture");
  double acc = 0.0;
  for (std::size_t i = 0; i < table_.size(); ++i) {
    const double p = table_.probabilities[i];
    if (!(p >= 0.0)) throw std::invalid_argument("mixture probabilities must be non-negative");
    acc += p;
    cumulative_.push_back(acc);
    if (p > 0.0) last_positive_ = i;
  }
  if (!(acc > 0.0)) throw std::invalid_argument("mixture probabilities sum to zero");
  for (auto& c : cumulative_) c /= acc;
}

std::size_t SampleStream::next_index() {
  const double u = rng_.uniform();
  const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
  // Rounding can leave the last cumulative a hair under 1.
  return std::min(static_cast<std::size_t>(it - cumulative_.begin()), last_positive_);
}

std::vector<std::string> sample_stream(const MixtureTable& table, std::uint64_t seed, std::size_t n) {
  SampleStream s(table, seed);
  std::vector<std::string> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(s.next());
  return out;
}

std::vector<double> epochs_report(const MixtureTable& table, std::uint64_t n, const std::vector<std::uint64_t>& sizes) {
  if (sizes.size() != table.size()) throw std::invalid_argument("epochs_report needs one size per dataset");
  std::vector<double> out;
  for (std::size_t i = 0; i < table.size(); ++i) {
    if (sizes[i] == 0) throw std::invalid_argument("dataset " + table.datasets[i] + " has no size");
    out.push_back(double(n) * table.probabilities[i] / double(sizes[i]));
  }
  return out;
}

EpochCursor::EpochCursor(std::size_t size, std::uint64_t seed) : size_(size), seed_(seed) {
  if (size == 0) throw std::invalid_argument("cannot iterate an empty dataset");
  order_.resize(size);
  reshuffle();
}

void EpochCursor::reshuffle() {
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  // Fisher-Yates with the project generator; the stream is keyed by epoch.
  Rng rng(seed_ ^ (0x9e3779b97f4a7c15ULL * (epoch_ + 1)));
  for (std::size_t i = size_; i > 1; --i) std::swap(order_[i - 1], order_[rng.below(i)]);
  pos_ = 0;
}

std::size_t EpochCursor::next() {
  if (pos_ == size_) {
    ++epoch_;
    reshuffle();
  }
  return order_[pos_++];
}

}  // namespace vlc
