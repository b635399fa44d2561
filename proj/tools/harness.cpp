// Two-stage toy training, efficiency profiling, Avg^N and probe scoring.
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "vlconn/harness.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  return json::parse(is);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!(os << text)) throw std::runtime_error("cannot write " + path.string());
}

std::string hex(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

json checksum_json(const vlc::Checksums& c) {
  return {{"encoder", hex(c.encoder)}, {"projector", hex(c.projector)}, {"lm", hex(c.lm)}};
}

// A full model config, or a bare projector spec whose widths and grid size
// the encoder and LM defaults are adapted to.
vlc::ModelConfig model_config_from(const json& j) {
  if (j.contains("projector")) return j.get<vlc::ModelConfig>();
  vlc::ModelConfig c;
  c.projector = j.get<vlc::ProjectorSpec>();
  if (c.projector.grid_height != c.projector.grid_width) {
    throw std::invalid_argument("the stub encoder only produces square grids");
  }
  c.encoder.grid = c.projector.grid_height;
  c.encoder.width = c.projector.vision_width;
  c.lm.width = c.projector.text_width;
  return c;
}

int train(vlc::Stage stage, const std::string& config_path, const std::string& mixture_path,
          const std::string& data_path, std::uint64_t seed, const std::string& out_dir, std::string init) {
  json raw = read_json(config_path);
  if (!raw.contains("stage")) raw["stage"] = vlc::to_string(stage);
  auto cfg = raw.get<vlc::StageConfig>();
  if (cfg.stage != stage) {
    throw std::invalid_argument("config is for stage " + vlc::to_string(cfg.stage) + " but " + vlc::to_string(stage) +
                                " was requested");
  }
  if (init.empty()) init = cfg.init_checkpoint;

  std::unique_ptr<vlc::Model> model;
  if (init.empty()) {
    model = vlc::assemble(cfg.model);
  } else {
    model = vlc::load_model(init);
    if (raw.contains("model") && json(model->config()) != json(cfg.model)) {
      throw std::invalid_argument("config model differs from the model stored in " + init);
    }
  }

  const auto corpus = vlc::read_examples(data_path);
  const auto mixture =
      mixture_path.empty() ? vlc::corpus_mixture(corpus) : vlc::resolve(vlc::load_mixture(mixture_path));
  const auto log = vlc::run_stage(*model, cfg, mixture, corpus, seed);

  fs::create_directories(out_dir);
  const fs::path out(out_dir);
  write_text(out / "log.csv", log.to_csv());
  vlc::save_model(*model, (out / "model.ckpt").string());
  const auto final_sums = vlc::checksums(*model);
  const json summary{{"stage", vlc::to_string(stage)},
                     {"steps", log.rows.size()},
                     {"seed", seed},
                     {"final_loss", log.final_loss},
                     {"last_step_loss", log.rows.back().loss},
                     {"seconds", log.seconds},
                     {"initial_checksums", checksum_json(log.initial)},
                     {"final_checksums", checksum_json(final_sums)},
                     {"encoder_frozen", final_sums.encoder == log.initial.encoder},
                     {"lm_frozen", final_sums.lm == log.initial.lm}};
  write_text(out / "summary.json", summary.dump(2) + "\n");
  std::fprintf(stderr, "%s: %zu steps in %.1fs, final loss %.6f\n", vlc::to_string(stage).c_str(), log.rows.size(),
               log.seconds, log.final_loss);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Toy vision-language training harness"};
  app.require_subcommand(1);

  std::string config, mixture, data, out, init;
  std::uint64_t seed = 0;
  auto add_train = [&](const char* name, const char* help) {
    auto* s = app.add_subcommand(name, help);
    s->add_option("--config", config, "stage config JSON")->required()->check(CLI::ExistingFile);
    s->add_option("--mixture", mixture, "mixture spec JSON (default: uniform over the corpus datasets)")
        ->check(CLI::ExistingFile);
    s->add_option("--data", data, "instruction examples JSONL")->required()->check(CLI::ExistingFile);
    s->add_option("--seed", seed)->capture_default_str();
    s->add_option("--out", out, "output directory for log.csv, model.ckpt, summary.json")->required();
    s->add_option("--init", init, "start from this checkpoint (overrides init_checkpoint)")->check(CLI::ExistingFile);
    return s;
  };
  auto* pretrain = add_train("pretrain", "stage 1: train the projector only");
  auto* finetune = add_train("finetune", "stage 2: train projector and LM");

  std::string spec;
  std::vector<std::size_t> ms = {64, 144, 256, 400};
  std::size_t text_len = 32, reps = 5;
  bool no_time = false;
  auto* profile = app.add_subcommand("profile", "FLOPs and median step time per visual-token count");
  profile->add_option("--spec", spec, "model config or projector spec JSON")->required()->check(CLI::ExistingFile);
  profile->add_option("--M", ms, "visual token counts")->capture_default_str();
  profile->add_option("--text-len", text_len)->capture_default_str();
  profile->add_option("--reps", reps, "timed repetitions (at least 5)")->capture_default_str();
  profile->add_flag("--no-time", no_time, "analytic FLOPs only");

  std::string scores;
  auto* avgn = app.add_subcommand("avgn", "normalized average of benchmark scores");
  avgn->add_option("--scores", scores, "JSON: {name: score} or [{name, score, bound}]")
      ->required()
      ->check(CLI::ExistingFile);

  std::string ckpt, set;
  auto* probe = app.add_subcommand("probe", "multiple-choice probe accuracy by maximum likelihood");
  probe->add_option("--ckpt", ckpt)->required()->check(CLI::ExistingFile);
  probe->add_option("--set", set, "probe JSONL")->required()->check(CLI::ExistingFile);

  std::string kind = "instructions";
  std::size_t n = 8, ways = 4;
  auto* synth = app.add_subcommand("synth", "write a synthetic corpus or probe set");
  synth->add_option("--kind", kind, "captions | instructions | probe")->capture_default_str();
  synth->add_option("--n", n)->capture_default_str();
  synth->add_option("--ways", ways, "options per probe item")->capture_default_str();
  synth->add_option("--seed", seed)->capture_default_str();
  synth->add_option("--out", out)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*pretrain) return train(vlc::Stage::pretrain, config, mixture, data, seed, out, init);
    if (*finetune) return train(vlc::Stage::instruction_tune, config, mixture, data, seed, out, init);
    if (*profile) {
      const auto cfg = model_config_from(read_json(spec));
      std::cout << "M,projector_flops,lm_flops,total_flops,median_seconds\n";
      for (auto m : ms) {
        const auto r = vlc::profile_step(cfg, m, text_len, reps, !no_time);
        std::printf("%zu,%.0f,%.0f,%.0f,%.6f\n", m, r.projector_flops, r.lm_flops, r.total_flops, r.median_seconds);
      }
    } else if (*avgn) {
      std::printf("%.4f\n", vlc::avg_n(vlc::scores_from_json(read_json(scores))));
    } else if (*probe) {
      const auto model = vlc::load_model(ckpt);
      const auto r = vlc::evaluate_probe(*model, vlc::read_probe(set));
      const double acc = 100.0 * r.accuracy();
      const json result{{"correct", r.correct},
                        {"total", r.total},
                        {"accuracy", acc},
                        {"avg_n", vlc::avg_n({{"probe", acc, 100.0}})}};
      std::cout << result.dump(2) << '\n';
    } else if (*synth) {
      if (kind == "probe") {
        vlc::write_probe(out, vlc::toy_probe(n, ways, seed));
      } else if (kind == "captions") {
        vlc::write_examples(out, vlc::toy_caption_corpus(n));
      } else if (kind == "instructions") {
        vlc::write_examples(out, vlc::toy_instruction_corpus(n));
      } else {
        throw std::invalid_argument("unknown synth kind '" + kind + "'");
      }
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "harness: %s\n", e.what());
    return 1;
  }
  return 0;
}
