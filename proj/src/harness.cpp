#include "ssrseg/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "ssrseg/errors.hpp"
#include "ssrseg/format.hpp"
#include "ssrseg/ops.hpp"

namespace ssrseg {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string full_precision(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct ValueParser {
  std::string key;
  std::string value;
  std::size_t line;

  [[noreturn]] void fail(const std::string& expected) const {
    throw ConfigError("line " + std::to_string(line) + ": " + key + " = '" + value + "' is not " + expected);
  }
  std::uint64_t u64() const {
    if (value.empty() || value.find_first_not_of("0123456789") != std::string::npos) fail("a non-negative integer");
    try {
      return std::stoull(value);
    } catch (const std::out_of_range&) {
      fail("a 64-bit integer");
    }
  }
  double real() const {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(value, &used);
    } catch (const std::logic_error&) {
      fail("a number");
    }
    if (used != value.size() || !std::isfinite(v)) fail("a finite number");
    return v;
  }
  bool boolean() const {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    fail("true or false");
  }
  std::vector<std::size_t> list() const {
    std::vector<std::size_t> out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) {
      ValueParser p{key, trim(item), line};
      out.push_back(p.u64());
    }
    if (out.empty()) fail("a comma-separated list");
    return out;
  }
};

std::filesystem::path resolve(const std::filesystem::path& p, const std::filesystem::path& base) {
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return base / p;
}

Tensor<float> as_batch_item(const Tensor<float>& t) {
  Shape s{1};
  s.insert(s.end(), t.shape().begin(), t.shape().end());
  return reshape(t, s);
}

Tensor<float> stack(const std::vector<Tensor<float>>& items) {
  std::vector<Tensor<float>> parts;
  for (const auto& t : items) parts.push_back(as_batch_item(t));
  return parts.size() == 1 ? parts[0] : concat(parts, 0);
}

ParameterStore<float> frozen(const ParameterStore<float>& params) {
  ParameterStore<float> out = params;
  for (auto& e : out.entries()) e.value = e.value.detach(false);
  return out;
}

std::string metrics_fields(const Metrics& m) {
  return "dsc " + fmt6(m.dsc) + "\tiou " + fmt6(m.iou) + "\tmae " + fmt6(m.mae);
}

double now_seconds() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc | std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f << text;
  if (!f) throw IoError("write failed for '" + path.string() + "'");
}

// Index of the largest dilation among the SDC branches.
std::size_t largest_dilation_index(const ModelConfig& c) {
  return static_cast<std::size_t>(
      std::max_element(c.dilations.begin(), c.dilations.end()) - c.dilations.begin());
}

}  // namespace

// ---------------------------------------------------------------- RunConfig

void RunConfig::validate() const {
  model.validate();
  weights.validate();
  if (fa && !model.dsr) throw ConfigError("fa = true requires dsr = true (affinity needs both branches)");
  if (sa && !model.dsr) throw ConfigError("sa = true requires dsr = true (affinity needs both branches)");
  if (sa && !model.sdc) throw ConfigError("sa = true requires sdc = true (needs scale maps)");
  if (batch == 0) throw ConfigError("batch must be at least 1");
  if (!(adam.lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0)) throw ConfigError("beta1 must lie in [0, 1)");
  if (!(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) throw ConfigError("beta2 must lie in [0, 1)");
  if (!(adam.eps > 0.0)) throw ConfigError("eps must be positive");
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must lie in (0, 1)");
}

LossWeights RunConfig::effective_weights() const {
  LossWeights w = weights;
  if (!model.dsr) w.alpha = w.beta = w.gamma = 0.0;
  if (!fa) w.beta = 0.0;
  if (!sa) w.gamma = 0.0;
  return w;
}

std::string RunConfig::serialize() const {
  std::ostringstream o;
  auto b = [](bool v) { return v ? "true" : "false"; };
  std::string dil;
  for (std::size_t i = 0; i < model.dilations.size(); ++i) {
    dil += (i ? "," : "") + std::to_string(model.dilations[i]);
  }
  o << "seed = " << seed << '\n';
  if (!dataset.empty()) o << "dataset = " << dataset.string() << '\n';
  o << "holdout = " << holdout << '\n';
  o << "levels = " << model.levels << '\n';
  o << "width = " << model.width << '\n';
  o << "dilations = " << dil << '\n';
  o << "edsr_blocks = " << model.edsr_blocks << '\n';
  o << "sdc = " << b(model.sdc) << '\n';
  o << "dsr = " << b(model.dsr) << '\n';
  o << "fa = " << b(fa) << '\n';
  o << "sa = " << b(sa) << '\n';
  o << "alpha = " << full_precision(weights.alpha) << '\n';
  o << "beta = " << full_precision(weights.beta) << '\n';
  o << "gamma = " << full_precision(weights.gamma) << '\n';
  o << "lambda1 = " << full_precision(weights.lambda1) << '\n';
  o << "lambda2 = " << full_precision(weights.lambda2) << '\n';
  o << "xi = " << full_precision(weights.xi) << '\n';
  o << "lr = " << full_precision(adam.lr) << '\n';
  o << "beta1 = " << full_precision(adam.beta1) << '\n';
  o << "beta2 = " << full_precision(adam.beta2) << '\n';
  o << "eps = " << full_precision(adam.eps) << '\n';
  o << "steps = " << steps << '\n';
  o << "batch = " << batch << '\n';
  if (!out.empty()) o << "out = " << out.string() << '\n';
  o << "threshold = " << full_precision(threshold) << '\n';
  return o.str();
}

RunConfig RunConfig::parse(const std::string& text, const std::filesystem::path& base_dir) {
  RunConfig c;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string raw;
  std::size_t lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
    }
    ValueParser v{trim(line.substr(0, eq)), trim(line.substr(eq + 1)), lineno};
    if (!seen.insert(v.key).second) {
      throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + v.key + "'");
    }
    const std::string& k = v.key;
    if (k == "seed") c.seed = v.u64();
    else if (k == "dataset") c.dataset = resolve(v.value, base_dir);
    else if (k == "holdout") c.holdout = v.u64();
    else if (k == "levels") c.model.levels = v.u64();
    else if (k == "width") c.model.width = v.u64();
    else if (k == "dilations") c.model.dilations = v.list();
    else if (k == "edsr_blocks") c.model.edsr_blocks = v.u64();
    else if (k == "sdc") c.model.sdc = v.boolean();
    else if (k == "dsr") c.model.dsr = v.boolean();
    else if (k == "fa") c.fa = v.boolean();
    else if (k == "sa") c.sa = v.boolean();
    else if (k == "alpha") c.weights.alpha = v.real();
    else if (k == "beta") c.weights.beta = v.real();
    else if (k == "gamma") c.weights.gamma = v.real();
    else if (k == "lambda1") c.weights.lambda1 = v.real();
    else if (k == "lambda2") c.weights.lambda2 = v.real();
    else if (k == "xi") c.weights.xi = v.real();
    else if (k == "lr") c.adam.lr = v.real();
    else if (k == "beta1") c.adam.beta1 = v.real();
    else if (k == "beta2") c.adam.beta2 = v.real();
    else if (k == "eps") c.adam.eps = v.real();
    else if (k == "steps") c.steps = v.u64();
    else if (k == "batch") c.batch = v.u64();
    else if (k == "out") c.out = resolve(v.value, base_dir);
    else if (k == "threshold") c.threshold = v.real();
    else throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + k + "'");
  }
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& file) {
  std::ifstream f(file);
  if (!f) throw IoError("cannot open config '" + file.string() + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str(), file.parent_path());
}

// ---------------------------------------------------------------- Adam

template <typename T>
void Adam<T>::step(ParameterStore<T>& params) {
  auto& entries = params.entries();
  if (m_.empty()) {
    for (const auto& e : entries) {
      m_.emplace_back(e.value.numel(), 0.0);
      v_.emplace_back(e.value.numel(), 0.0);
    }
  }
  if (m_.size() != entries.size()) throw ContractError("Adam: parameter set changed between steps");
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t p = 0; p < entries.size(); ++p) {
    auto& e = entries[p];
    const auto g = e.value.grad();
    std::vector<T> next(e.value.data().begin(), e.value.data().end());
    auto& m = m_[p];
    auto& v = v_[p];
    for (std::size_t i = 0; i < next.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      m[i] = b1 * m[i] + (1.0 - b1) * gi;
      v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      next[i] = static_cast<T>(static_cast<double>(next[i]) - config_.lr * mhat / (std::sqrt(vhat) + config_.eps));
    }
    e.value.set_leaf_data(std::move(next));
  }
}

template class Adam<float>;
template class Adam<double>;

// ---------------------------------------------------------------- reports

void aggregate(MetricReport& report) {
  report.strata.clear();
  report.overall = StratumSummary{"overall", 0, {}, 0.0};
  report.empty = report.samples.empty();
  std::map<std::string, std::size_t> index;
  auto accumulate = [](StratumSummary& s, const SampleResult& r) {
    ++s.count;
    s.mean.dsc += r.metrics.dsc;
    s.mean.iou += r.metrics.iou;
    s.mean.mae += r.metrics.mae;
    s.fg_largest_dilation += r.fg_largest_dilation;
  };
  for (const auto& r : report.samples) {
    auto [it, fresh] = index.emplace(r.stratum, report.strata.size());
    if (fresh) report.strata.push_back(StratumSummary{r.stratum, 0, {}, 0.0});
    accumulate(report.strata[it->second], r);
    accumulate(report.overall, r);
  }
  auto finish = [](StratumSummary& s) {
    if (s.count == 0) return;
    const double n = static_cast<double>(s.count);
    s.mean.dsc /= n;
    s.mean.iou /= n;
    s.mean.mae /= n;
    s.fg_largest_dilation /= n;
  };
  for (auto& s : report.strata) finish(s);
  finish(report.overall);
}

std::string format_report(const MetricReport& r) {
  std::ostringstream o;
  o << "split " << r.split << '\n';
  o << "samples " << r.samples.size() << '\n';
  o << "empty " << (r.empty ? "true" : "false") << '\n';
  auto line = [&](const std::string& tag, const StratumSummary& s) {
    o << tag << '\t' << s.label << "\tcount " << s.count << '\t' << metrics_fields(s.mean);
    if (r.has_scale_maps) o << "\tfg_largest_dilation " << fmt6(s.fg_largest_dilation);
    o << '\n';
  };
  for (const auto& s : r.strata) line("stratum", s);
  if (!r.empty) line("overall", r.overall);
  for (const auto& s : r.samples) {
    o << "sample\t" << s.file << '\t' << s.stratum << '\t' << metrics_fields(s.metrics) << '\n';
  }
  return o.str();
}

std::string format_loss_curve(const std::vector<LossRecord>& curve) {
  std::ostringstream o;
  o << "step\ttotal\tdice\tlisr\tfa\tsa\n";
  for (const auto& r : curve) {
    o << r.step << '\t' << fmt6(r.total) << '\t' << fmt6(r.dice) << '\t' << fmt6(r.lisr) << '\t'
      << fmt6(r.fa) << '\t' << fmt6(r.sa) << '\n';
  }
  return o.str();
}

// ---------------------------------------------------------------- checkpoints

namespace {

constexpr const char* kConfigRecord = "config";

// Model and optimization settings only; paths would make otherwise equal
// runs produce different checkpoint bytes.
std::string checkpoint_config_text(const RunConfig& config) {
  RunConfig c = config;
  c.dataset.clear();
  c.out.clear();
  return c.serialize();
}

}  // namespace

std::vector<Record> checkpoint_records(const RunConfig& config, const ParameterStore<float>& params) {
  std::vector<Record> records;
  const std::string text = checkpoint_config_text(config);
  records.push_back(make_u8_record(kConfigRecord, {text.size()}, {text.begin(), text.end()}));
  for (const auto& e : params.entries()) records.push_back(make_f32_record(e.name, e.value));
  return records;
}

void write_checkpoint(const std::filesystem::path& path, const RunConfig& config,
                      const ParameterStore<float>& params) {
  write_container(path, checkpoint_records(config, params));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  auto records = read_container(path);
  Checkpoint ckpt;
  bool found = false;
  for (auto& r : records) {
    if (r.name == kConfigRecord) {
      if (r.dtype != DType::U8) throw LoadError(path.string() + ": config record must be u8 text");
      ckpt.config = RunConfig::parse(std::string(r.u8.begin(), r.u8.end()));
      found = true;
    } else {
      ckpt.parameters.push_back(std::move(r));
    }
  }
  if (!found) throw LoadError(path.string() + ": checkpoint has no config record");
  return ckpt;
}

SSRNet<float> restore_model(const Checkpoint& ckpt) {
  SSRNet<float> model(ckpt.config.model);
  auto& entries = model.parameters().entries();
  std::map<std::string, const Record*> stored;
  for (const auto& r : ckpt.parameters) stored[r.name] = &r;
  std::vector<std::string> missing, extra, mis_shaped;
  std::set<std::string> expected;
  for (const auto& e : entries) {
    expected.insert(e.name);
    auto it = stored.find(e.name);
    if (it == stored.end()) {
      missing.push_back(e.name);
    } else if (it->second->extents != e.value.shape() || it->second->dtype != DType::F32) {
      mis_shaped.push_back(e.name + " " + shape_str(it->second->extents) + " vs " + shape_str(e.value.shape()));
    }
  }
  for (const auto& r : ckpt.parameters) {
    if (!expected.count(r.name)) extra.push_back(r.name);
  }
  if (!missing.empty() || !extra.empty() || !mis_shaped.empty()) {
    auto join = [](const std::vector<std::string>& v) {
      std::string s;
      for (const auto& x : v) s += (s.empty() ? "" : ", ") + x;
      return s.empty() ? std::string("none") : s;
    };
    throw LoadError("checkpoint does not match its model config; missing: " + join(missing) +
                    "; extra: " + join(extra) + "; shape mismatch: " + join(mis_shaped));
  }
  for (auto& e : entries) e.value.set_leaf_data(stored.at(e.name)->f32);
  return model;
}

// ---------------------------------------------------------------- evaluation

MetricReport evaluate_model(const SSRNet<float>& model, const std::filesystem::path& dataset,
                            const std::vector<ManifestEntry>& entries, double threshold,
                            const std::string& split) {
  MetricReport report;
  report.split = split;
  const auto& cfg = model.config();
  report.has_scale_maps = cfg.sdc;
  const auto params = frozen(model.parameters());
  const std::size_t maps_per_block = cfg.dilations.size();
  const std::size_t widest = largest_dilation_index(cfg);
  for (const auto& entry : entries) {
    const auto sample = load_sample(dataset, entry);
    const auto x = as_batch_item(sample.lr_image);
    const auto mask = as_batch_item(sample.hr_mask);
    SampleResult r;
    r.file = entry.file;
    r.stratum = entry.stratum;
    if (cfg.sdc) {
      const auto bundle = model.forward(params, x);
      r.metrics = segmentation_metrics(sigmoid(bundle.seg_logits_hr), mask, threshold);
      const auto& maps = bundle.scale_maps_seg;
      const auto& map = maps[maps.size() - maps_per_block + widest];
      const std::vector<std::size_t> hr(mask.shape().begin() + 2, mask.shape().end());
      const auto up = resize_linear(map, hr);
      double sum = 0.0;
      std::size_t n = 0;
      for (std::size_t i = 0; i < up.numel(); ++i) {
        if (mask.data()[i] > 0.5f) {
          sum += up.data()[i];
          ++n;
        }
      }
      r.fg_largest_dilation = n ? sum / static_cast<double>(n) : 0.0;
    } else {
      r.metrics = segmentation_metrics(model.inference(params, x), mask, threshold);
    }
    report.samples.push_back(std::move(r));
  }
  aggregate(report);
  return report;
}

MetricReport evaluate(const std::filesystem::path& checkpoint, const std::filesystem::path& dataset,
                      double threshold) {
  const auto ckpt = read_checkpoint(checkpoint);
  const auto model = restore_model(ckpt);
  return evaluate_model(model, dataset, read_manifest(dataset), threshold, "eval");
}

// ---------------------------------------------------------------- training

TrainResult train(const RunConfig& config) {
  config.validate();
  const double t0 = now_seconds();
  const auto entries = read_manifest(config.dataset);
  if (entries.size() <= config.holdout) {
    throw ConfigError("dataset has " + std::to_string(entries.size()) + " samples, holdout " +
                      std::to_string(config.holdout) + " leaves none for training");
  }
  const std::size_t n_train = entries.size() - config.holdout;
  const std::vector<ManifestEntry> train_entries(entries.begin(), entries.begin() + n_train);
  const std::vector<ManifestEntry> eval_entries =
      config.holdout ? std::vector<ManifestEntry>(entries.begin() + n_train, entries.end()) : train_entries;

  std::vector<VolumeSample> samples;
  samples.reserve(n_train);
  for (const auto& e : train_entries) samples.push_back(load_sample(config.dataset, e));

  SSRNet<float> model(config.model);
  model.init_parameters(config.seed);
  Adam<float> adam(config.adam);
  const LossWeights weights = config.effective_weights();

  // Epoch-wise Fisher-Yates order from a stream separate from the init seed.
  std::mt19937_64 order_rng(config.seed ^ 0x5DEECE66DULL);
  std::vector<std::size_t> order(n_train);
  std::size_t cursor = n_train;
  auto next_index = [&] {
    if (cursor == n_train) {
      for (std::size_t i = 0; i < n_train; ++i) order[i] = i;
      for (std::size_t i = n_train; i > 1; --i) std::swap(order[i - 1], order[order_rng() % i]);
      cursor = 0;
    }
    return order[cursor++];
  };

  MetricReport report;
  std::vector<LossRecord> curve;
  for (std::size_t step = 0; step < config.steps; ++step) {
    std::vector<Tensor<float>> lr, hr, mask;
    for (std::size_t b = 0; b < config.batch; ++b) {
      const auto& s = samples[next_index()];
      lr.push_back(s.lr_image);
      hr.push_back(s.hr_image);
      mask.push_back(s.hr_mask);
    }
    const auto bundle = model.forward(stack(lr));
    const auto terms = total_loss(bundle, stack(hr), stack(mask), weights);
    model.parameters().zero_grad();
    backward(terms.total);
    adam.step(model.parameters());
    curve.push_back({step, static_cast<double>(terms.total.item()), terms.dice, terms.lisr, terms.fa, terms.sa});
  }

  std::error_code ec;
  std::filesystem::create_directories(config.out, ec);
  if (ec) throw IoError("cannot create '" + config.out.string() + "': " + ec.message());
  TrainResult result;
  result.checkpoint = config.out / "checkpoint.ssv";
  write_checkpoint(result.checkpoint, config, model.parameters());

  result.report = evaluate_model(model, config.dataset, eval_entries, config.threshold,
                                 config.holdout ? "holdout" : "train");
  result.report.loss_curve = std::move(curve);
  write_text(config.out / "report.txt", format_report(result.report));
  write_text(config.out / "loss_curve.tsv", format_loss_curve(result.report.loss_curve));
  result.report.wall_clock_seconds = now_seconds() - t0;
  return result;
}

// ---------------------------------------------------------------- gradcheck

ModelConfig GradcheckOptions::tiny_model() {
  ModelConfig c;
  c.levels = 2;
  c.width = 2;
  c.edsr_blocks = 1;
  return c;
}

GradcheckReport run_gradcheck(const GradcheckOptions& options) {
  const double t0 = now_seconds();
  options.model.validate();
  options.weights.validate();
  SSRNet<double> model(options.model);
  model.init_parameters(options.seed);
  const std::size_t hr_extent = 2 * options.lr_extent;
  const double e = static_cast<double>(hr_extent);
  const auto sample = generate_sample(options.seed, hr_extent, {0.25 * e, 0.5 * e});
  auto batch = [](const Tensor<float>& t) {
    Shape s{1};
    s.insert(s.end(), t.shape().begin(), t.shape().end());
    return reshape(convert<double>(t), s);
  };
  const auto x = batch(sample.lr_image);
  const auto hr = batch(sample.hr_image);
  const auto mask = batch(sample.hr_mask);

  auto f = [&] {
    auto bundle = model.forward(x);
    if (options.logits_hook) bundle.seg_logits_hr = options.logits_hook(bundle.seg_logits_hr);
    return total_loss(bundle, hr, mask, options.weights).total;
  };
  GradcheckReport report;
  report.result = finite_diff_check(f, model.parameters().tensors(), options.step);
  report.pass = report.result.max_rel_error < options.tolerance;
  report.worst_parameter = model.parameters().entries()[report.result.worst_param].name;
  report.parameters = model.parameters().scalar_count();
  report.seconds = now_seconds() - t0;
  return report;
}

// ---------------------------------------------------------------- scale map export

std::vector<DumpedMap> dump_scale_maps(const std::filesystem::path& checkpoint,
                                       const std::filesystem::path& sample_path,
                                       const std::filesystem::path& outdir) {
  const auto ckpt = read_checkpoint(checkpoint);
  if (!ckpt.config.model.sdc) {
    throw ConfigError("dump-maps needs a checkpoint trained with sdc = true");
  }
  const auto model = restore_model(ckpt);
  const auto records = read_container(sample_path);
  const auto lr = record_tensor(find_record(records, "lr_image"));
  const auto bundle = model.forward(frozen(model.parameters()), as_batch_item(lr));

  std::error_code ec;
  std::filesystem::create_directories(outdir, ec);
  if (ec) throw IoError("cannot create '" + outdir.string() + "': " + ec.message());

  const auto& dil = ckpt.config.model.dilations;
  std::vector<DumpedMap> out;
  std::ostringstream index;
  index << "file\tbranch\tblock\tdilation\tslice\n";
  auto emit = [&](const std::string& branch, const std::vector<Tensor<float>>& maps) {
    for (std::size_t k = 0; k < maps.size(); ++k) {
      DumpedMap d;
      d.branch = branch;
      d.block = k / dil.size();
      d.dilation = dil[k % dil.size()];
      const std::string stem = branch + "_block" + std::to_string(d.block) + "_map" +
                               std::to_string(k % dil.size()) + "_d" + std::to_string(d.dilation);
      d.file = stem + ".ssv";
      const auto& m = maps[k];
      write_container(outdir / d.file, {make_f32_record("scale_map", m)});

      // Central depth slice, values mapped linearly from [0,1] to [0,255].
      const std::size_t depth = m.dim(2), h = m.dim(3), w = m.dim(4);
      const std::size_t z = depth / 2;
      std::string pgm = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
      for (std::size_t i = 0; i < h * w; ++i) {
        const double v = std::clamp(static_cast<double>(m.data()[z * h * w + i]), 0.0, 1.0);
        pgm.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
      }
      write_text(outdir / (stem + ".pgm"), pgm);
      index << d.file << '\t' << d.branch << '\t' << d.block << '\t' << d.dilation << '\t' << stem << ".pgm\n";
      out.push_back(std::move(d));
    }
  };
  emit("seg", bundle.scale_maps_seg);
  emit("sr", bundle.scale_maps_sr);
  write_text(outdir / "index.txt", index.str());
  return out;
}

}  // namespace ssrseg
