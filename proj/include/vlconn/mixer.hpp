#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vlconn/random.hpp"

namespace vlc {

enum class Strategy { per_dataset, per_task, per_sample_100k, per_dataset_tuned };

std::string to_string(Strategy s);
Strategy strategy_from_string(const std::string& name);

struct MixtureEntry {
  std::string dataset;
  std::string task;
  std::uint64_t size = 0;         // 0 = unknown; required by per_sample_100k
  std::optional<double> weight;   // per_dataset_tuned only
};

struct MixtureSpec {
  std::vector<MixtureEntry> entries;
  Strategy strategy = Strategy::per_dataset;
  std::uint64_t clip = 100000;

  // Throws std::invalid_argument describing the first violated invariant.
  void validate() const;
  std::vector<std::uint64_t> sizes() const;
};

void to_json(nlohmann::json& j, const MixtureSpec& s);
void from_json(const nlohmann::json& j, MixtureSpec& s);
MixtureSpec load_mixture(const std::string& path);

// The instruction-tuning ratios from the appendix table, as hand weights in
// percent. They are renormalized by resolve().
MixtureSpec paper_tuned_mixture();

struct MixtureTable {
  std::vector<std::string> datasets;
  std::vector<double> probabilities;

  std::size_t size() const { return datasets.size(); }
  double probability(const std::string& dataset) const;
  std::string to_csv() const;
};

MixtureTable resolve(const MixtureSpec& spec);

// I.i.d. categorical draws by inverse CDF on Rng::uniform().
class SampleStream {
 public:
  SampleStream(MixtureTable table, std::uint64_t seed);
  std::size_t next_index();
  const std::string& next() { return table_.datasets[next_index()]; }
  const MixtureTable& table() const { return table_; }

 private:
  MixtureTable table_;
  std::vector<double> cumulative_;
  std::size_t last_positive_ = 0;
  Rng rng_;
};

std::vector<std::string> sample_stream(const MixtureTable& table, std::uint64_t seed, std::size_t n);

// Expected passes over each dataset after n draws: n * p / size.
std::vector<double> epochs_report(const MixtureTable& table, std::uint64_t n, const std::vector<std::uint64_t>& sizes);

// Walks one dataset's records in a fresh seeded permutation every epoch.
class EpochCursor {
 public:
  EpochCursor(std::size_t size, std::uint64_t seed);
  std::size_t next();
  std::size_t epoch() const { return epoch_; }

 private:
  void reshuffle();
  std::size_t size_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0;
  std::size_t pos_ = 0;
  std::vector<std::size_t> order_;
};

}  // namespace vlc
