// Converts raw task records (JSONL) into instruction examples (JSONL).
#include <cstdio>
#include <exception>

#include <CLI11.hpp>

#include "vlconn/instructize.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Render raw vision-language records into instruction-following examples"};
  std::string in, out, templates, granularity = "fine", diversity = "single";
  bool multi_turn = false, dedup = true;
  std::size_t max_turns = 5;
  std::uint64_t seed = 0;
  app.add_option("--in", in, "raw records, one JSON object per line")->required()->check(CLI::ExistingFile);
  app.add_option("--out", out, "output JSONL")->required();
  app.add_option("--granularity", granularity, "fine | coarse")->capture_default_str();
  app.add_option("--diversity", diversity, "single | multi | multi_flip")->capture_default_str();
  app.add_flag("--multi-turn,!--single-turn", multi_turn, "merge records of one image into multi-turn examples");
  app.add_flag("--dedup,!--no-dedup", dedup, "drop turns whose normalized target repeats (default on)");
  app.add_option("--max-turns", max_turns, "turn cap per example")->capture_default_str();
  app.add_option("--templates", templates, "template registry JSON replacing the built-in one")
      ->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "template selection seed")->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  try {
    vlc::InstructizeOptions opts;
    opts.granularity = vlc::granularity_from_string(granularity);
    opts.diversity = vlc::diversity_from_string(diversity);
    opts.multi_turn = multi_turn;
    opts.dedup = dedup;
    opts.max_turns = max_turns;
    const auto registry = templates.empty() ? vlc::TemplateRegistry::builtin() : vlc::TemplateRegistry::load(templates);
    const auto records = vlc::read_records(in);
    const auto examples = vlc::instructize(records, registry, opts, seed);
    vlc::write_examples(out, examples);
    std::size_t turns = 0;
    for (const auto& e : examples) turns += e.turns.size();
    std::fprintf(stderr, "%zu records -> %zu examples, %zu turns\n", records.size(), examples.size(), turns);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "instructize: %s\n", e.what());
    return 1;
  }
  return 0;
}
