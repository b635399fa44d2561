#include <fstream>
#include <stdexcept>

#include "vlconn/harness.hpp"

namespace vlc {

namespace {

constexpr const char* kProbePrompt = "Human: Which label matches the image? AI:";
constexpr const char* kDescribePrompt = "Human: What is in the image? AI:";

const char* const kColors[] = {"red", "blue", "green", "yellow", "white", "black", "orange", "purple"};
const char* const kShapes[] = {"circle", "square", "star", "ring", "cross", "arrow", "heart", "moon"};

std::string image_name(std::size_t i) { return "img" + std::to_string(i); }

}  // namespace

std::vector<ProbeItem> read_probe(const std::string& jsonl_path) {
  std::ifstream is(jsonl_path);
  if (!is) throw std::runtime_error("cannot open probe set " + jsonl_path);
  std::vector<ProbeItem> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto j = nlohmann::json::parse(line);
    ProbeItem p;
    p.image_id = j.at("image_id").get<std::string>();
    p.prompt = j.at("prompt").get<std::string>();
    p.options = j.at("options").get<std::vector<std::string>>();
    p.answer = j.at("answer").get<std::size_t>();
    if (p.options.size() < 2 || p.answer >= p.options.size()) {
      throw std::invalid_argument(jsonl_path + ":" + std::to_string(lineno) +
                                  ": needs at least two options and an answer index among them");
    }
    out.push_back(std::move(p));
  }
  return out;
}

void write_probe(const std::string& jsonl_path, const std::vector<ProbeItem>& items) {
  std::ofstream os(jsonl_path);
  if (!os) throw std::runtime_error("cannot write " + jsonl_path);
  for (const auto& p : items) {
    os << nlohmann::json{{"image_id", p.image_id}, {"prompt", p.prompt}, {"options", p.options}, {"answer", p.answer}}
              .dump()
       << '\n';
  }
}

ProbeResult evaluate_probe(const Model& model, const std::vector<ProbeItem>& items) {
  NoGradGuard guard;
  ProbeResult r;
  for (const auto& item : items) {
    std::size_t best = 0;
    double best_ll = 0.0;
    for (std::size_t k = 0; k < item.options.size(); ++k) {
      InstructionExample e{item.image_id, "probe", {{item.prompt, item.options[k]}}, {}};
      const double ll = -model.response_nll(encode_example(e)).first.item();
      // Strict comparison: ties go to the earliest option.
      if (k == 0 || ll > best_ll) {
        best = k;
        best_ll = ll;
      }
    }
    r.correct += best == item.answer ? 1 : 0;
    ++r.total;
  }
  return r;
}

std::vector<InstructionExample> toy_caption_corpus(std::size_t n) {
  std::vector<InstructionExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string caption = std::string("a ") + kColors[i % 8] + " " + kShapes[(i / 8 + i) % 8];
    out.push_back({image_name(i), "toy_captions", {{"AI:", caption}}, {"cap" + std::to_string(i)}});
  }
  return out;
}

std::vector<InstructionExample> toy_instruction_corpus(std::size_t n) {
  std::vector<InstructionExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string answer = std::string(kShapes[(i / 8 + i) % 8]) + " in " + kColors[i % 8];
    out.push_back({image_name(i), "toy_instructions", {{kDescribePrompt, answer}}, {"ins" + std::to_string(i)}});
  }
  return out;
}

std::vector<ProbeItem> toy_probe(std::size_t n, std::size_t ways, std::uint64_t seed) {
  if (ways < 2) throw std::invalid_argument("a probe needs at least two options");
  Rng rng(seed);
  std::vector<ProbeItem> out;
  for (std::size_t i = 0; i < n; ++i) {
    ProbeItem p;
    p.image_id = "probe" + std::to_string(i);
    p.prompt = kProbePrompt;
    for (std::size_t k = 0; k < ways; ++k) {
      std::string opt(6, 'a');
      for (auto& c : opt) c = static_cast<char>('a' + rng.below(26));
      p.options.push_back(opt);
    }
    p.answer = rng.below(ways);
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<InstructionExample> probe_training_corpus(const std::vector<ProbeItem>& items) {
  std::vector<InstructionExample> out;
  for (const auto& p : items) out.push_back({p.image_id, "probe", {{p.prompt, p.options[p.answer]}}, {}});
  return out;
}

}  // namespace vlc
