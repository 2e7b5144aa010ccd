#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ssrseg/container.hpp"
#include "ssrseg/gradcheck.hpp"
#include "ssrseg/losses.hpp"
#include "ssrseg/model.hpp"
#include "ssrseg/synth.hpp"

namespace ssrseg {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Run configuration, read from `key = value` lines with `#` comments.
// The ablation flags sdc and dsr live in `model`; fa and sa gate the
// affinity terms.
struct RunConfig {
  std::uint64_t seed = 1;
  std::filesystem::path dataset;
  std::size_t holdout = 0;  // trailing manifest entries kept out of training
  ModelConfig model;
  LossWeights weights;
  bool fa = true;
  bool sa = true;
  AdamConfig adam;
  std::size_t steps = 500;
  std::size_t batch = 2;
  std::filesystem::path out = "run";
  double threshold = 0.5;

  // ConfigError quoting the violated rule.
  void validate() const;
  // Loss weights after applying the ablation flags.
  LossWeights effective_weights() const;

  // Canonical text with every key; parse(serialize()) reproduces the config.
  std::string serialize() const;
  // Relative dataset/out paths are resolved against `base_dir`.
  static RunConfig parse(const std::string& text, const std::filesystem::path& base_dir = {});
  static RunConfig load(const std::filesystem::path& file);
};

// Adaptive moment estimation with bias correction.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig config) : config_(config) {}

  // Applies one update from the accumulated leaf gradients of `params`.
  void step(ParameterStore<T>& params);
  std::size_t steps_taken() const { return t_; }

 private:
  AdamConfig config_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct SampleResult {
  std::string file;
  std::string stratum;
  Metrics metrics;
  double fg_largest_dilation = 0.0;  // mean of the largest-dilation map of the last seg block over the lesion
};

struct StratumSummary {
  std::string label;
  std::size_t count = 0;
  Metrics mean;
  double fg_largest_dilation = 0.0;
};

struct LossRecord {
  std::size_t step = 0;
  double total = 0.0, dice = 0.0, lisr = 0.0, fa = 0.0, sa = 0.0;
};

struct MetricReport {
  std::string split;  // "holdout", "train" or "eval"
  bool empty = true;
  bool has_scale_maps = false;
  std::vector<SampleResult> samples;
  std::vector<StratumSummary> strata;  // in order of first appearance
  StratumSummary overall;
  std::vector<LossRecord> loss_curve;
  double wall_clock_seconds = 0.0;
};

// Per-stratum and overall means of per-sample results; overall is the
// sample-weighted aggregate of the strata.
void aggregate(MetricReport& report);

// Deterministic text (6 significant digits, no timing).
std::string format_report(const MetricReport& report);
std::string format_loss_curve(const std::vector<LossRecord>& curve);

struct Checkpoint {
  RunConfig config;
  std::vector<Record> parameters;
};

std::vector<Record> checkpoint_records(const RunConfig& config, const ParameterStore<float>& params);
void write_checkpoint(const std::filesystem::path& path, const RunConfig& config,
                      const ParameterStore<float>& params);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Model built from the checkpoint config with the stored values. LoadError
// lists missing, extra and mis-shaped parameter names.
SSRNet<float> restore_model(const Checkpoint& ckpt);

struct TrainResult {
  MetricReport report;
  std::filesystem::path checkpoint;
};

// Writes <out>/checkpoint.ssv, <out>/report.txt and <out>/loss_curve.tsv.
TrainResult train(const RunConfig& config);

MetricReport evaluate_model(const SSRNet<float>& model, const std::filesystem::path& dataset,
                            const std::vector<ManifestEntry>& entries, double threshold,
                            const std::string& split);
MetricReport evaluate(const std::filesystem::path& checkpoint, const std::filesystem::path& dataset,
                      double threshold = 0.5);

struct GradcheckOptions {
  ModelConfig model = tiny_model();
  std::size_t lr_extent = 8;
  LossWeights weights{};
  double step = 1e-5;
  double tolerance = 1e-3;
  std::uint64_t seed = 7;
  // Applied to the mask logits before the loss; tests use it to splice in an
  // op with a deliberately wrong backward rule.
  std::function<Tensor<double>(const Tensor<double>&)> logits_hook;

  static ModelConfig tiny_model();
};

struct GradcheckReport {
  GradCheckResult result;
  bool pass = false;
  std::string worst_parameter;
  std::size_t parameters = 0;
  double seconds = 0.0;
};

GradcheckReport run_gradcheck(const GradcheckOptions& options);

struct DumpedMap {
  std::string file;    // container file name inside the output directory
  std::string branch;  // "seg" or "sr"
  std::size_t block = 0;     // decoder stage, 0 = deepest
  std::size_t dilation = 0;
};

// One single-record container and one 8-bit PGM of the central depth slice
// per scale map, plus index.txt. ConfigError when the model has no SDC blocks.
std::vector<DumpedMap> dump_scale_maps(const std::filesystem::path& checkpoint,
                                       const std::filesystem::path& sample,
                                       const std::filesystem::path& outdir);

}  // namespace ssrseg
