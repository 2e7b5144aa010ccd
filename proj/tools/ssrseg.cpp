// ssrseg: data generation, training, evaluation, gradient check and
// scale-map export for the dual super-resolution segmentation network.

#include <cstdio>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "ssrseg/errors.hpp"
#include "ssrseg/format.hpp"
#include "ssrseg/harness.hpp"
#include "ssrseg/synth.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kError = 1;
constexpr int kEmpty = 2;

void print_report(const ssrseg::MetricReport& r) { std::cout << ssrseg::format_report(r); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Scale-aware dual super-resolution segmentation on synthetic volumes"};
  app.require_subcommand(1);

  std::uint64_t seed = 1;
  std::size_t count = 0, hr_extent = 32;
  std::string strata = "4-8,12-22", out;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset with a manifest");
  gen->add_option("--seed", seed, "Dataset seed")->required();
  gen->add_option("--count", count, "Number of samples")->required();
  gen->add_option("--hr-extent", hr_extent, "High-resolution cube extent (multiple of 4)");
  gen->add_option("--strata", strata, "Lesion diameter ranges, e.g. 4-8,12-22");
  gen->add_option("--out", out, "Output directory")->required();

  std::string config_path;
  auto* trn = app.add_subcommand("train", "Train from a run config and report held-out metrics");
  trn->add_option("--config", config_path, "key = value run config")->required()->check(CLI::ExistingFile);

  std::string ckpt, data;
  double threshold = 0.5;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  ev->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  ev->add_option("--data", data, "Dataset directory")->required();
  ev->add_option("--threshold", threshold, "Binarization threshold");

  ssrseg::GradcheckOptions gc;
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of the full objective in 64-bit");
  grad->add_option("--step", gc.step, "Central-difference step");
  grad->add_option("--seed", gc.seed, "Initialization and sample seed");

  std::string sample;
  auto* dump = app.add_subcommand("dump-maps", "Export SDC scale maps for one sample");
  dump->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  dump->add_option("--sample", sample, "Sample container (.ssv)")->required();
  dump->add_option("--out", out, "Output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const auto m = ssrseg::build_dataset(out, seed, count, hr_extent, ssrseg::parse_strata(strata));
      std::cout << "wrote " << m.size() << " samples to " << out << '\n';
      return kOk;
    }
    if (*trn) {
      const auto config = ssrseg::RunConfig::load(config_path);
      const auto result = ssrseg::train(config);
      print_report(result.report);
      std::cout << "checkpoint " << result.checkpoint.string() << '\n';
      std::cout << "wall_clock_seconds " << ssrseg::fmt6(result.report.wall_clock_seconds) << '\n';
      return result.report.empty ? kEmpty : kOk;
    }
    if (*ev) {
      const auto report = ssrseg::evaluate(ckpt, data, threshold);
      print_report(report);
      if (report.empty) {
        std::cerr << "warning: dataset " << data << " has no samples\n";
        return kEmpty;
      }
      return kOk;
    }
    if (*grad) {
      const auto r = ssrseg::run_gradcheck(gc);
      std::cout << "parameters " << r.parameters << '\n'
                << "max_rel_error " << ssrseg::fmt6(r.result.max_rel_error) << '\n'
                << "worst " << r.worst_parameter << '[' << r.result.worst_index << "] analytic "
                << ssrseg::fmt6(r.result.analytic) << " numeric " << ssrseg::fmt6(r.result.numeric) << '\n'
                << "seconds " << ssrseg::fmt6(r.seconds) << '\n'
                << (r.pass ? "PASS" : "FAIL") << '\n';
      return r.pass ? kOk : kError;
    }
    if (*dump) {
      const auto maps = ssrseg::dump_scale_maps(ckpt, sample, out);
      std::cout << "wrote " << maps.size() << " scale maps to " << out << '\n';
      return kOk;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kError;
  }
  return kOk;
}
