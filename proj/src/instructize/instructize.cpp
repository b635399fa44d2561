#include "vlconn/instructize.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <stdexcept>
#include <unordered_map>

namespace vlc {

namespace {

constexpr std::string_view kAnswerMarker = "AI:";

const std::vector<std::pair<Task, std::string>>& task_names() {
  static const std::vector<std::pair<Task, std::string>> names = {{Task::captioning, "captioning"},
                                                                  {Task::vqa_open, "vqa_open"},
                                                                  {Task::vqa_mc, "vqa_mc"},
                                                                  {Task::rec, "rec"},
                                                                  {Task::instruction, "instruction"}};
  return names;
}

// Position of the final answer marker; the target segment follows it.
std::size_t marker_position(const Template& t) {
  const auto pos = t.body.rfind(kAnswerMarker);
  if (pos == std::string::npos) throw std::invalid_argument("template " + t.id + " has no \"AI:\" marker");
  return pos;
}

void check_template(const Template& t) {
  if (t.scope.empty()) throw std::invalid_argument("template " + t.id + " has no scope");
  if (t.target.empty()) throw std::invalid_argument("template " + t.id + " has no target slot");
  const auto pos = marker_position(t);
  const std::string tail = t.body.substr(pos + kAnswerMarker.size());
  if (tail != " {" + t.target + "}") {
    throw std::invalid_argument("template " + t.id + " must end with \"AI: {" + t.target + "}\", got \"" + tail + "\"");
  }
  const auto names = t.placeholders();
  if (std::count(names.begin(), names.end(), t.target) != 1) {
    throw std::invalid_argument("template " + t.id + " must mention its target slot exactly once");
  }
}

Template make(std::string scope, std::string target, std::string body, Direction dir = Direction::forward) {
  Template t;
  t.id = scope + ":" + target + (dir == Direction::inverted ? ":inverted" : "");
  t.scope = std::move(scope);
  t.target = std::move(target);
  t.body = std::move(body);
  t.direction = dir;
  return t;
}

}  // namespace

std::string to_string(Task task) {
  for (const auto& [t, name] : task_names()) {
    if (t == task) return name;
  }
  return "?";
}

Task task_from_string(const std::string& name) {
  for (const auto& [t, n] : task_names()) {
    if (n == name) return t;
  }
  throw std::invalid_argument("unknown task '" + name + "'");
}

std::string default_target(Task task) {
  switch (task) {
    case Task::captioning: return "caption";
    case Task::vqa_open:
    case Task::vqa_mc: return "answer";
    case Task::rec: return "bbox";
    case Task::instruction: return "response";
  }
  return "";
}

std::string format_bbox(const std::array<double, 4>& b) {
  char buf[96];
  std::snprintf(buf, sizeof(buf), "[%.3f, %.3f, %.3f, %.3f]", b[0], b[1], b[2], b[3]);
  return buf;
}

std::string RawRecord::target_slot() const { return target.empty() ? default_target(task) : target; }

std::string RawRecord::slot_text(const std::string& name) const {
  if (name == "bbox" && bbox) return format_bbox(*bbox);
  auto it = slots.find(name);
  if (it == slots.end()) {
    throw std::invalid_argument("record " + id + " (" + dataset + ") is missing slot '" + name + "'");
  }
  return it->second;
}

void RawRecord::validate() const {
  if (!bbox) return;
  const auto& b = *bbox;
  for (double v : b) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("record " + id + ": bbox coordinates must lie in [0,1]");
  }
  if (b[0] > b[2] || b[1] > b[3]) throw std::invalid_argument("record " + id + ": bbox needs x_min <= x_max, y_min <= y_max");
}

std::vector<std::string> Template::placeholders() const {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < body.size(); ++i) {
    if (body[i] != '{') continue;
    const auto close = body.find('}', i + 1);
    if (close == std::string::npos) break;
    const std::string name = body.substr(i + 1, close - i - 1);
    const bool ident = !name.empty() && std::all_of(name.begin(), name.end(), [](unsigned char c) {
      return std::isalnum(c) || c == '_';
    });
    if (ident) {
      names.push_back(name);
      i = close;
    }
  }
  return names;
}

Granularity granularity_from_string(const std::string& name) {
  if (name == "fine") return Granularity::fine;
  if (name == "coarse") return Granularity::coarse;
  throw std::invalid_argument("granularity must be fine or coarse, got '" + name + "'");
}

Diversity diversity_from_string(const std::string& name) {
  if (name == "single") return Diversity::single;
  if (name == "multi") return Diversity::multi;
  if (name == "multi_flip") return Diversity::multi_flip;
  throw std::invalid_argument("diversity must be single, multi or multi_flip, got '" + name + "'");
}

TemplateRegistry::TemplateRegistry(std::vector<Template> templates) : templates_(std::move(templates)) {
  for (const auto& t : templates_) check_template(t);
}

TemplateRegistry TemplateRegistry::builtin() {
  const std::string vqa = "Human: Answer the question using a single word or phrase. {question} AI: {answer}";
  const std::string ground = "Human: Provide the bounding box coordinate of the region this sentence describes: {phrase} AI: {bbox}";
  const std::string instr = "Human: {instruction} AI: {response}";
  std::vector<Template> t;
  // Fine-grained: one template per dataset (two directions for referring expressions).
  t.push_back(make("BlipCapFilt", "caption", "AI: {caption}"));
  t.push_back(make("COYO100M", "caption", "AI: {caption}"));
  t.push_back(make("VQAv2", "answer", vqa));
  t.push_back(make("GQA", "answer", vqa));
  t.push_back(make("OCRVQA", "answer", vqa));
  t.push_back(make("VSR", "answer",
                   "Human: Answer the question using a single word or phrase. {question} Please answer yes or no. AI: {answer}"));
  t.push_back(make("ScienceQA", "answer",
                   "Human: Answer with the option's letter from the given choices directly. {question} Context: {context} "
                   "There are several options: {option} AI: {answer}"));
  t.push_back(make("A-OKVQA", "answer",
                   "Answer with the option's letter from the given choices directly. {question} There are several options: "
                   "{option} AI: {answer}"));
  t.push_back(make("RefCOCO", "bbox", ground));
  t.push_back(make("RefCOCO", "phrase",
                   "Human: Provide a description for the region {bbox}, utilizing positional words to refer to objects. "
                   "Example: 'The large blue teddy bear next to the red balloon' AI: {phrase}"));
  t.push_back(make("RefCOCO+", "bbox", ground));
  t.push_back(make("RefCOCO+", "phrase",
                   "Human: Provide a description for the region {bbox}, focusing on the appearance of objects without using "
                   "positional words. Example: 'The large blue teddy bear holding a red balloon.' AI: {phrase}"));
  t.push_back(make("RefCOCOg", "bbox", ground));
  t.push_back(make("RefCOCOg", "phrase",
                   "Human: Provide a description for the region {bbox}, using detailed and descriptive expressions to refer "
                   "to objects. Example: 'The large blue teddy bear holding a red balloon with a joyful expression.' AI: {phrase}"));
  t.push_back(make("VG", "bbox", ground));
  t.push_back(make("VG", "phrase", "Human: Provide a short description for this region: {bbox} AI: {phrase}"));
  t.push_back(make("LLaVA150K", "response", instr));
  t.push_back(make("ShareGPT", "response", instr));
  // Coarse-grained: one shared template per task and target.
  t.push_back(make("captioning", "caption", "AI: {caption}"));
  t.push_back(make("vqa_open", "answer", vqa));
  t.push_back(make("vqa_mc", "answer",
                   "Human: Answer with the option's letter from the given choices directly. {question} There are several "
                   "options: {option} AI: {answer}"));
  t.push_back(make("rec", "bbox", ground));
  t.push_back(make("rec", "phrase", "Human: Provide a short description for this region: {bbox} AI: {phrase}"));
  t.push_back(make("instruction", "response", instr));
  return TemplateRegistry(std::move(t));
}

TemplateRegistry TemplateRegistry::from_json(const nlohmann::json& j) {
  const auto& list = j.is_object() && j.contains("templates") ? j.at("templates") : j;
  if (!list.is_array()) throw std::invalid_argument("template registry must be a JSON array of templates");
  std::vector<Template> out;
  for (const auto& e : list) {
    const std::string dir = e.value("direction", "forward");
    if (dir != "forward" && dir != "inverted") throw std::invalid_argument("template direction must be forward or inverted");
    Template t = make(e.at("scope").get<std::string>(), e.at("target").get<std::string>(), e.at("body").get<std::string>(),
                      dir == "inverted" ? Direction::inverted : Direction::forward);
    if (e.contains("id")) {
      t.id = e.at("id").get<std::string>();
    } else {
      t.id += "#" + std::to_string(out.size());
    }
    out.push_back(std::move(t));
  }
  return TemplateRegistry(std::move(out));
}

TemplateRegistry TemplateRegistry::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open template registry " + path);
  return from_json(nlohmann::json::parse(is));
}

std::vector<const Template*> TemplateRegistry::matching(const std::string& scope, const std::string& target,
                                                        std::optional<Direction> direction) const {
  std::vector<const Template*> out;
  for (const auto& t : templates_) {
    if (t.scope == scope && t.target == target && (!direction || t.direction == *direction)) out.push_back(&t);
  }
  return out;
}

Rendered render(const Template& t, const RawRecord& record) {
  if (record.target_slot() != t.target) {
    throw std::invalid_argument("template " + t.id + " produces '" + t.target + "' but record " + record.id +
                                " targets '" + record.target_slot() + "'");
  }
  const auto end = marker_position(t) + kAnswerMarker.size();
  Rendered out;
  for (std::size_t i = 0; i < end; ++i) {
    if (t.body[i] == '{') {
      const auto close = t.body.find('}', i + 1);
      if (close != std::string::npos && close < end) {
        out.input += record.slot_text(t.body.substr(i + 1, close - i - 1));
        i = close;
        continue;
      }
    }
    out.input += t.body[i];
  }
  out.target = record.slot_text(t.target);
  return out;
}

bool invertible(const RawRecord& r) {
  if (r.task == Task::vqa_open) return r.slots.count("question") && r.slots.count("answer");
  if (r.task == Task::captioning) return r.slots.count("caption") && r.slots.count("context");
  return false;
}

RawRecord invert(const RawRecord& record) {
  std::string a, b;
  if (record.task == Task::vqa_open) {
    a = "answer", b = "question";
  } else if (record.task == Task::captioning) {
    a = "caption", b = "context";
    if (!record.slots.count("context")) {
      throw std::invalid_argument("record " + record.id + ": captioning inversion needs a 'context' slot");
    }
  } else {
    throw std::invalid_argument("record " + record.id + ": task " + to_string(record.task) + " cannot be inverted");
  }
  RawRecord out = record;
  const std::string now = record.target_slot();
  if (now != a && now != b) throw std::invalid_argument("record " + record.id + " has an unexpected target '" + now + "'");
  out.target = now == a ? b : a;
  if (out.target == default_target(out.task)) out.target.clear();
  return out;
}

const Template& select_template(const TemplateRegistry& registry, const RawRecord& record, Granularity granularity,
                                Diversity diversity, Rng& rng) {
  const std::string scope = granularity == Granularity::fine ? record.dataset : to_string(record.task);
  auto pool = registry.matching(scope, record.target_slot(), Direction::forward);
  if (pool.empty()) {
    throw std::invalid_argument("no " + std::string(granularity == Granularity::fine ? "dataset" : "task") +
                                " template for scope '" + scope + "' producing '" + record.target_slot() + "'");
  }
  if (diversity == Diversity::single) return *pool.front();
  if (diversity == Diversity::multi_flip && invertible(record)) {
    const auto inverted = registry.matching(scope, invert(record).target_slot(), Direction::inverted);
    pool.insert(pool.end(), inverted.begin(), inverted.end());
  }
  return *pool[rng.below(pool.size())];
}

std::string normalize_target(const std::string& text) {
  std::string out;
  bool pending_space = false;
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out += ' ';
    pending_space = false;
    out += static_cast<char>(std::tolower(c));
  }
  return out;
}

namespace {

struct SourcedTurn {
  Turn turn;
  std::string source;
};

std::vector<SourcedTurn> render_group(const std::vector<RawRecord>& records, const TemplateRegistry& registry,
                                      const InstructizeOptions& options, Rng& rng) {
  std::vector<SourcedTurn> turns;
  std::set<std::string> seen;
  for (const auto& r : records) {
    r.validate();
    const Template& t = select_template(registry, r, options.granularity, options.diversity, rng);
    const Rendered out = render(t, t.direction == Direction::inverted ? invert(r) : r);
    if (options.dedup && !seen.insert(normalize_target(out.target)).second) continue;
    turns.push_back({{out.input, out.target}, r.id});
  }
  return turns;
}

void check_group(const std::vector<RawRecord>& records) {
  if (records.empty()) throw std::invalid_argument("cannot merge an empty record list");
  for (const auto& r : records) {
    if (r.image_id != records.front().image_id) {
      throw std::invalid_argument("multi-turn merge needs one image; got " + records.front().image_id + " and " + r.image_id);
    }
    if (r.dataset != records.front().dataset) {
      throw std::invalid_argument("multi-turn merge stays within one dataset; got " + records.front().dataset + " and " +
                                  r.dataset);
    }
  }
}

InstructionExample assemble(const std::vector<RawRecord>& records, std::vector<SourcedTurn>::const_iterator begin,
                            std::vector<SourcedTurn>::const_iterator end) {
  InstructionExample e;
  e.image_id = records.front().image_id;
  e.dataset = records.front().dataset;
  for (auto it = begin; it != end; ++it) {
    e.turns.push_back(it->turn);
    e.provenance.push_back(it->source);
  }
  return e;
}

}  // namespace

InstructionExample merge_multiturn(const std::vector<RawRecord>& records, const TemplateRegistry& registry,
                                   const InstructizeOptions& options, Rng& rng) {
  check_group(records);
  if (options.max_turns == 0) throw std::invalid_argument("max_turns must be at least 1");
  const auto turns = render_group(records, registry, options, rng);
  const auto keep = std::min(turns.size(), options.max_turns);
  return assemble(records, turns.begin(), turns.begin() + static_cast<std::ptrdiff_t>(keep));
}

std::vector<InstructionExample> instructize(const std::vector<RawRecord>& records, const TemplateRegistry& registry,
                                            const InstructizeOptions& options, std::uint64_t seed) {
  if (options.max_turns == 0) throw std::invalid_argument("max_turns must be at least 1");
  std::vector<std::string> order;
  std::unordered_map<std::string, std::vector<RawRecord>> groups;
  for (const auto& r : records) {
    // One example per record unless multi-turn merging is on.
    const std::string key = options.multi_turn ? r.dataset + '\x1f' + r.image_id : r.dataset + '\x1f' + r.id;
    auto [it, fresh] = groups.try_emplace(key);
    if (fresh) order.push_back(key);
    it->second.push_back(r);
  }
  std::vector<InstructionExample> out;
  for (const auto& key : order) {
    const auto& group = groups.at(key);
    Rng rng(seed ^ fnv1a(key));
    const auto turns = render_group(group, registry, options, rng);
    const std::size_t step = options.multi_turn ? options.max_turns : 1;
    for (std::size_t i = 0; i < turns.size(); i += step) {
      const auto end = std::min(turns.size(), i + step);
      out.push_back(assemble(group, turns.begin() + static_cast<std::ptrdiff_t>(i),
                             turns.begin() + static_cast<std::ptrdiff_t>(end)));
    }
  }
  return out;
}

void to_json(nlohmann::json& j, const InstructionExample& e) {
  nlohmann::json turns = nlohmann::json::array();
  for (const auto& t : e.turns) turns.push_back({{"input", t.input}, {"target", t.target}});
  j = nlohmann::json{{"image_id", e.image_id}, {"dataset", e.dataset}, {"turns", turns}, {"provenance", e.provenance}};
}

void from_json(const nlohmann::json& j, InstructionExample& e) {
  e.image_id = j.at("image_id").get<std::string>();
  e.dataset = j.value("dataset", std::string());
  e.turns.clear();
  for (const auto& t : j.at("turns")) e.turns.push_back({t.at("input").get<std::string>(), t.at("target").get<std::string>()});
  e.provenance = j.value("provenance", std::vector<std::string>{});
  if (e.turns.empty()) throw std::invalid_argument("instruction example for " + e.image_id + " has no turns");
}

void to_json(nlohmann::json& j, const RawRecord& r) {
  j = nlohmann::json{{"id", r.id}, {"dataset", r.dataset}, {"task", to_string(r.task)}, {"image_id", r.image_id},
                     {"slots", r.slots}};
  if (r.bbox) j["bbox"] = *r.bbox;
  if (!r.target.empty()) j["target"] = r.target;
}

void from_json(const nlohmann::json& j, RawRecord& r) {
  r.id = j.value("id", std::string());
  r.dataset = j.at("dataset").get<std::string>();
  r.task = task_from_string(j.at("task").get<std::string>());
  r.image_id = j.at("image_id").get<std::string>();
  r.slots.clear();
  if (j.contains("slots")) {
    for (const auto& [k, v] : j.at("slots").items()) {
      if (k == "bbox" && v.is_array()) {
        r.bbox = v.get<std::array<double, 4>>();
      } else {
        r.slots[k] = v.get<std::string>();
      }
    }
  }
  if (j.contains("bbox")) r.bbox = j.at("bbox").get<std::array<double, 4>>();
  r.target = j.value("target", std::string());
  if (r.target == default_target(r.task)) r.target.clear();
  r.validate();
}

std::vector<RawRecord> read_records(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::vector<RawRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      RawRecord r = nlohmann::json::parse(line).get<RawRecord>();
      if (r.id.empty()) r.id = std::to_string(lineno);
      out.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_examples(const std::string& path, const std::vector<InstructionExample>& examples) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  for (const auto& e : examples) os << nlohmann::json(e).dump() << '\n';
  if (!os) throw std::runtime_error("failed writing " + path);
}

std::vector<InstructionExample> read_examples(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::vector<InstructionExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(nlohmann::json::parse(line).get<InstructionExample>());
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace vlc
