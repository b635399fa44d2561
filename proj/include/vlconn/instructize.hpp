#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vlconn/random.hpp"

namespace vlc {

enum class Task { captioning, vqa_open, vqa_mc, rec, instruction };

std::string to_string(Task task);
Task task_from_string(const std::string& name);

// One raw task example before instructization.
struct RawRecord {
  std::string id;
  std::string dataset;
  Task task = Task::vqa_open;
  std::string image_id;
  std::map<std::string, std::string> slots;
  std::optional<std::array<double, 4>> bbox;  // x_min, y_min, x_max, y_max in [0,1]
  // Slot the template must produce. Empty means the task default
  // (caption, answer, answer, bbox, response).
  std::string target;

  std::string target_slot() const;
  // Value of a slot as it appears in text; bbox is formatted to 3 decimals.
  std::string slot_text(const std::string& name) const;
  // Throws std::invalid_argument on a malformed bbox.
  void validate() const;
};

std::string default_target(Task task);
std::string format_bbox(const std::array<double, 4>& box);

enum class Direction { forward, inverted };

struct Template {
  std::string id;
  std::string scope;  // dataset name, or a task name for coarse templates
  Direction direction = Direction::forward;
  std::string body;   // "... AI: {target}" with {slot} placeholders
  std::string target;

  // Placeholder names in order of appearance, target included.
  std::vector<std::string> placeholders() const;
};

enum class Granularity { fine, coarse };
enum class Diversity { single, multi, multi_flip };

Granularity granularity_from_string(const std::string& name);
Diversity diversity_from_string(const std::string& name);

class TemplateRegistry {
 public:
  TemplateRegistry() = default;
  explicit TemplateRegistry(std::vector<Template> templates);

  // The per-dataset templates of the appendix table plus one shared template
  // per (task, target) for coarse granularity.
  static TemplateRegistry builtin();
  static TemplateRegistry from_json(const nlohmann::json& j);
  static TemplateRegistry load(const std::string& path);

  const std::vector<Template>& templates() const { return templates_; }
  // Templates at a scope producing a given target slot, registry order.
  std::vector<const Template*> matching(const std::string& scope, const std::string& target,
                                        std::optional<Direction> direction = std::nullopt) const;

 private:
  std::vector<Template> templates_;
};

struct Rendered {
  std::string input;   // up to and including the final "AI:"
  std::string target;
};

// Byte-exact substitution. Throws std::invalid_argument naming a missing slot
// or when the record's target slot differs from the template's.
Rendered render(const Template& t, const RawRecord& record);

// fine: dataset scope; coarse: task scope. single: first forward template;
// multi: uniform over forward; multi_flip: uniform over forward and inverted,
// where inverted templates apply only to invertible records.
const Template& select_template(const TemplateRegistry& registry, const RawRecord& record, Granularity granularity,
                                Diversity diversity, Rng& rng);

bool invertible(const RawRecord& record);
// Swaps the target role: vqa_open answer <-> question; captioning caption <->
// context (needs a context slot). Applying it twice restores the record.
RawRecord invert(const RawRecord& record);

struct Turn {
  std::string input;
  std::string target;
};

struct InstructionExample {
  std::string image_id;
  std::string dataset;
  std::vector<Turn> turns;
  std::vector<std::string> provenance;  // source record ids, one per turn
};

void to_json(nlohmann::json& j, const InstructionExample& e);
void from_json(const nlohmann::json& j, InstructionExample& e);
void to_json(nlohmann::json& j, const RawRecord& r);
void from_json(const nlohmann::json& j, RawRecord& r);

// Lowercase, whitespace runs collapsed to one space, trimmed.
std::string normalize_target(const std::string& text);

struct InstructizeOptions {
  Granularity granularity = Granularity::fine;
  Diversity diversity = Diversity::single;
  bool multi_turn = false;
  std::size_t max_turns = 5;
  bool dedup = true;
};

// Renders every record (all sharing one image and dataset) and concatenates
// the turns in order, keeping the first turn per normalized target when
// dedup is set, up to max_turns.
InstructionExample merge_multiturn(const std::vector<RawRecord>& records, const TemplateRegistry& registry,
                                   const InstructizeOptions& options, Rng& rng);

// Whole-corpus conversion. Records are grouped per (dataset, image) in first-
// appearance order; each group draws from its own stream keyed by the seed
// and the group name, so output does not depend on corpus order elsewhere.
std::vector<InstructionExample> instructize(const std::vector<RawRecord>& records, const TemplateRegistry& registry,
                                            const InstructizeOptions& options, std::uint64_t seed);

std::vector<RawRecord> read_records(const std::string& jsonl_path);
void write_examples(const std::string& jsonl_path, const std::vector<InstructionExample>& examples);
std::vector<InstructionExample> read_examples(const std::string& jsonl_path);

}  // namespace vlc
