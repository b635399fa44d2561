// Resolves dataset-balancing specs and draws sample streams from them.
#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "vlconn/mixer.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Dataset mixture resolution and sampling"};
  app.require_subcommand(1);
  std::string spec_path, out;
  std::uint64_t seed = 0, n = 10;
  std::uint64_t report_draws = 0;

  auto* resolve = app.add_subcommand("resolve", "print the sampling table as CSV");
  resolve->add_option("--spec", spec_path, "mixture spec JSON")->required()->check(CLI::ExistingFile);
  resolve->add_option("--out", out, "write the CSV here instead of stdout");
  resolve->add_option("--epochs-for", report_draws, "also report epochs per dataset after this many draws");

  auto* stream = app.add_subcommand("stream", "print n sampled dataset names, one per line");
  stream->add_option("--spec", spec_path, "mixture spec JSON")->required()->check(CLI::ExistingFile);
  stream->add_option("--seed", seed)->capture_default_str();
  stream->add_option("--n", n, "number of draws")->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  try {
    const auto spec = vlc::load_mixture(spec_path);
    const auto table = vlc::resolve(spec);
    if (*resolve) {
      const auto csv = table.to_csv();
      if (out.empty()) {
        std::cout << csv;
      } else {
        std::ofstream os(out);
        if (!(os << csv)) throw std::runtime_error("cannot write " + out);
      }
      if (report_draws) {
        const auto epochs = vlc::epochs_report(table, report_draws, spec.sizes());
        for (std::size_t i = 0; i < table.size(); ++i) {
          std::fprintf(stderr, "%s: %.4f epochs\n", table.datasets[i].c_str(), epochs[i]);
        }
      }
    } else {
      vlc::SampleStream s(table, seed);
      for (std::uint64_t i = 0; i < n; ++i) std::cout << s.next() << '\n';
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "mixer: %s\n", e.what());
    return 1;
  }
  return 0;
}
