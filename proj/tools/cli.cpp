#include "cli.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "tfformer/checkpoint.hpp"
#include "tfformer/gradcheck.hpp"
#include "tfformer/image_io.hpp"
#include "tfformer/metrics.hpp"

namespace fs = std::filesystem;

namespace tfformer::cli {
namespace {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string exact(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::uint64_t parse_u64(const std::string& key, const std::string& value, std::uint64_t lo,
                        std::uint64_t hi = UINT64_MAX) {
  std::uint64_t v = 0;
  const auto r = std::from_chars(value.data(), value.data() + value.size(), v);
  if (r.ec != std::errc() || r.ptr != value.data() + value.size() || v < lo || v > hi) {
    std::string range = hi == UINT64_MAX ? ">= " + std::to_string(lo)
                                         : "[" + std::to_string(lo) + ", " + std::to_string(hi) + "]";
    throw ConfigError(key + ": expected an integer " + range + ", got '" + value + "'");
  }
  return v;
}

// `open_lo` / `open_hi` make the corresponding bound exclusive.
double parse_real(const std::string& key, const std::string& value, double lo, double hi, bool open_lo = false,
                  bool open_hi = false) {
  double v = 0.0;
  const auto r = std::from_chars(value.data(), value.data() + value.size(), v);
  const bool ok = r.ec == std::errc() && r.ptr == value.data() + value.size() && std::isfinite(v) &&
                  (open_lo ? v > lo : v >= lo) && (open_hi ? v < hi : v <= hi);
  if (!ok) {
    std::ostringstream range;
    range << (open_lo ? '(' : '[') << exact(lo) << ", " << (std::isinf(hi) ? "inf" : exact(hi)) << (open_hi ? ')' : ']');
    throw ConfigError(key + ": expected a number in " + range.str() + ", got '" + value + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + value + "'");
}

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class T>
Field count_field(const std::string& key, T RunConfig::*group, std::size_t std::remove_reference_t<T>::*member,
                  std::uint64_t lo, std::uint64_t hi = UINT64_MAX) {
  return {[=](RunConfig& c, const std::string& v) { (c.*group).*member = parse_u64(key, v, lo, hi); },
          [=](const RunConfig& c) { return std::to_string((c.*group).*member); }};
}

template <class T>
Field real_field(const std::string& key, T RunConfig::*group, double std::remove_reference_t<T>::*member, double lo,
                 double hi, bool open_lo = false, bool open_hi = false) {
  return {[=](RunConfig& c, const std::string& v) { (c.*group).*member = parse_real(key, v, lo, hi, open_lo, open_hi); },
          [=](const RunConfig& c) { return exact((c.*group).*member); }};
}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = [] {
    std::vector<std::pair<std::string, Field>> t;
    t.push_back({"seed",
                 {[](RunConfig& c, const std::string& v) {
                    c.seed = parse_u64("seed", v, 0);
                    c.train.seed = c.seed;
                  },
                  [](const RunConfig& c) { return std::to_string(c.seed); }}});
    t.push_back({"out", {[](RunConfig& c, const std::string& v) { c.out = v; },
                         [](const RunConfig& c) { return c.out.string(); }}});
    for (const char* k : {"base_width", "stages", "heads_per_stage", "bottleneck_heads", "lcgab_per_stage",
                          "refine_width", "refine_heads", "ffn_expansion"}) {
      const std::string key = k;
      t.push_back({"model." + key,
                   {[key](RunConfig& c, const std::string& v) {
                      c.model.set(key, v);
                      c.model_explicit = true;
                    },
                    [key](const RunConfig& c) {
                      std::istringstream in(c.model.to_text());
                      std::string line;
                      while (std::getline(in, line)) {
                        const auto eq = line.find('=');
                        if (trim(line.substr(0, eq)) == key) return trim(line.substr(eq + 1));
                      }
                      return std::string();
                    }}});
    }
    using R = RunConfig;
    t.push_back({"train.steps", count_field("train.steps", &R::train, &TrainConfig::steps, 0)});
    t.push_back({"train.batch", count_field("train.batch", &R::train, &TrainConfig::batch, 1)});
    t.push_back({"train.patch", count_field("train.patch", &R::train, &TrainConfig::patch, 1)});
    t.push_back({"train.lr", real_field("train.lr", &R::train, &TrainConfig::lr, 0.0, 1.0, true)});
    t.push_back({"train.beta1", real_field("train.beta1", &R::train, &TrainConfig::beta1, 0.0, 1.0, false, true)});
    t.push_back({"train.beta2", real_field("train.beta2", &R::train, &TrainConfig::beta2, 0.0, 1.0, false, true)});
    t.push_back({"train.lambda_r", real_field("train.lambda_r", &R::train, &TrainConfig::lambda_r, 0.0, kInf, true)});
    t.push_back({"train.validate_every", count_field("train.validate_every", &R::train, &TrainConfig::validate_every, 0)});
    t.push_back(
        {"train.checkpoint_every", count_field("train.checkpoint_every", &R::train, &TrainConfig::checkpoint_every, 0)});
    t.push_back(
        {"train.scheduler_start", count_field("train.scheduler_start", &R::train, &TrainConfig::scheduler_start, 0)});
    t.push_back({"train.plateau_factor",
                 real_field("train.plateau_factor", &R::train, &TrainConfig::plateau_factor, 0.0, 1.0, true, true)});
    t.push_back(
        {"train.plateau_patience", count_field("train.plateau_patience", &R::train, &TrainConfig::plateau_patience, 1)});
    t.push_back({"train.min_lr", real_field("train.min_lr", &R::train, &TrainConfig::min_lr, 0.0, 1.0)});
    t.push_back({"data.corpus", {[](RunConfig& c, const std::string& v) { c.corpus = v; },
                                 [](const RunConfig& c) { return c.corpus; }}});
    t.push_back({"data.val_corpus", {[](RunConfig& c, const std::string& v) { c.val_corpus = v; },
                                     [](const RunConfig& c) { return c.val_corpus; }}});
    t.push_back({"data.synthetic",
                 {[](RunConfig& c, const std::string& v) { c.synthetic = parse_bool("data.synthetic", v); },
                  [](const RunConfig& c) { return std::string(c.synthetic ? "true" : "false"); }}});
    t.push_back({"data.synthetic_count",
                 {[](RunConfig& c, const std::string& v) {
                    c.synthetic_count = parse_u64("data.synthetic_count", v, 1, 100000);
                  },
                  [](const RunConfig& c) { return std::to_string(c.synthetic_count); }}});
    t.push_back({"data.synthetic_size",
                 {[](RunConfig& c, const std::string& v) {
                    c.synthetic_size = parse_u64("data.synthetic_size", v, 0, 4096);
                  },
                  [](const RunConfig& c) { return std::to_string(c.synthetic_size); }}});
    t.push_back({"curate.patch_size", count_field("curate.patch_size", &R::curation, &CurationOptions::patch_size, 1)});
    t.push_back({"curate.stride", count_field("curate.stride", &R::curation, &CurationOptions::stride, 1)});
    t.push_back({"curate.brightness",
                 {[](RunConfig& c, const std::string& v) { c.curation.brightness = parse_bool("curate.brightness", v); },
                  [](const RunConfig& c) { return std::string(c.curation.brightness ? "true" : "false"); }}});
    t.push_back({"curate.brightness_threshold", real_field("curate.brightness_threshold", &R::curation,
                                                           &CurationOptions::brightness_threshold, 0.0, 255.0)});
    t.push_back({"curate.confidence",
                 {[](RunConfig& c, const std::string& v) { c.curation.confidence = parse_bool("curate.confidence", v); },
                  [](const RunConfig& c) { return std::string(c.curation.confidence ? "true" : "false"); }}});
    t.push_back({"curate.confidence_threshold", real_field("curate.confidence_threshold", &R::curation,
                                                           &CurationOptions::confidence_threshold, 0.0, 1.0)});
    return t;
  }();
  return table;
}

const Field& field(const std::string& key) {
  for (const auto& [k, f] : fields()) {
    if (k == key) return f;
  }
  throw ConfigError("unknown config key: " + key);
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) { field(key).set(*this, trim(value)); }

std::string RunConfig::get(const std::string& key) const { return field(key).get(*this); }

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> k;
  for (const auto& [name, f] : fields()) k.push_back(name);
  return k;
}

void RunConfig::validate() const {
  model.validate();
  if (synthetic_size != 0 && synthetic_size < train.patch) {
    throw ConfigError("data.synthetic_size: must be 0 or >= train.patch (" + std::to_string(train.patch) + ")");
  }
}

std::string RunConfig::to_text() const {
  std::string s;
  for (const auto& [k, f] : fields()) s += k + " = " + f.get(*this) + "\n";
  return s;
}

void apply_config_file(RunConfig& cfg, const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(number) + ": expected 'key = value'");
    }
    cfg.set(trim(line.substr(0, eq)), line.substr(eq + 1));
  }
}

namespace {

// Writes via a temporary so an interrupted run never leaves half a file.
template <class Writer>
void write_atomically(const fs::path& path, Writer&& writer) {
  const fs::path tmp = path.string() + ".tmp";
  writer(tmp);
  fs::rename(tmp, path);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) throw DataError("cannot write " + path.string());
}

struct Context {
  RunConfig cfg;
  std::ostream& out;
  std::ostream& err;
};

void echo_config(Context& ctx, const std::string& command) {
  const std::string text = "# tfformer " + command + "\n" + ctx.cfg.to_text();
  ctx.out << text;
  fs::create_directories(ctx.cfg.out);
  write_text(ctx.cfg.out / (command + ".config.txt"), text);
}

std::string patch_name(const PairRecord& p) {
  return p.source_id + "_r" + std::to_string(p.row) + "_c" + std::to_string(p.col) + ".png";
}

int cmd_curate(Context& ctx) {
  const auto& cfg = ctx.cfg;
  if (cfg.corpus.empty()) throw ConfigError("data.corpus: a corpus directory is required");
  if (!fs::is_directory(cfg.corpus)) throw DataError("corpus directory not found: " + cfg.corpus);
  std::vector<std::string> errors;
  const auto pairs = load_paired_corpus(cfg.corpus, errors);
  auto report = curate(pairs, cfg.curation);
  errors.insert(errors.end(), report.errors.begin(), report.errors.end());
  for (const auto& e : errors) ctx.err << "skipped: " << e << '\n';

  write_atomically(cfg.out / "manifest.tsv", [&](const fs::path& p) {
    std::ofstream f(p, std::ios::binary);
    write_manifest(f, report);
  });
  const fs::path low_dir = cfg.out / "patches" / "low", ref_dir = cfg.out / "patches" / "ref";
  fs::create_directories(low_dir);
  fs::create_directories(ref_dir);
  for (const auto& r : report.records) {
    if (!r.accepted()) continue;
    save_image(r.low, low_dir / patch_name(r));
    save_image(r.reference, ref_dir / patch_name(r));
  }
  ctx.out << "extracted " << report.extracted() << " accepted " << report.accepted() << " rejected "
          << report.rejected() << '\n';
  return kSuccess;
}

// Keeps the header and the rows whose leading step is <= max_step.
void truncate_log(const fs::path& path, std::uint64_t max_step) {
  std::ifstream in(path);
  if (!in) return;
  std::string line, kept;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      kept += line + '\n';
      header = false;
      continue;
    }
    std::uint64_t step = 0;
    std::from_chars(line.data(), line.data() + line.size(), step);
    if (step <= max_step) kept += line + '\n';
  }
  in.close();
  write_text(path, kept);
}

std::vector<PairRecord> load_corpus_or_throw(Context& ctx, const std::string& dir) {
  if (!fs::is_directory(dir)) throw DataError("corpus directory not found: " + dir);
  std::vector<std::string> errors;
  auto pairs = load_paired_corpus(dir, errors);
  for (const auto& e : errors) ctx.err << "skipped: " << e << '\n';
  return pairs;
}

int cmd_train(Context& ctx, bool resume) {
  const auto& cfg = ctx.cfg;
  std::vector<PairRecord> train_set, val_set;
  if (cfg.synthetic) {
    const std::size_t size = cfg.synthetic_size ? cfg.synthetic_size : cfg.train.patch;
    train_set = synthetic_pairs(cfg.synthetic_count, size, size, cfg.seed);
    val_set = train_set;
  } else {
    if (cfg.corpus.empty()) throw ConfigError("data.corpus: required unless data.synthetic = true");
    train_set = load_corpus_or_throw(ctx, cfg.corpus);
    if (!cfg.val_corpus.empty()) val_set = load_corpus_or_throw(ctx, cfg.val_corpus);
  }
  if (train_set.empty()) throw DataError("no usable training pairs");

  const fs::path ckpt = cfg.out / "checkpoint.tff", state_path = cfg.out / "train_state.tfs";
  const fs::path metrics = cfg.out / "metrics.tsv", losses = cfg.out / "loss.tsv";
  std::optional<TfFormerModel> model;
  TrainState state = initial_state(cfg.train);
  if (resume) {
    if (!fs::exists(ckpt) || !fs::exists(state_path)) {
      throw DataError("cannot resume: " + ckpt.string() + " or " + state_path.string() + " is missing");
    }
    model.emplace(load_checkpoint(ckpt, cfg.model));
    state = load_train_state(state_path);
    truncate_log(metrics, state.step);
    truncate_log(losses, state.step);
    ctx.err << "resuming at step " << state.step << '\n';
  } else {
    model.emplace(cfg.model, cfg.seed);
    write_text(metrics, "step\tlr\ttrain_loss\tval_psnr_db\n");
    write_text(losses, "step\tloss\n");
  }

  std::ofstream metric_log(metrics, std::ios::app | std::ios::binary);
  std::ofstream loss_log(losses, std::ios::app | std::ios::binary);
  const auto save = [&](const TrainState& s) {
    loss_log.flush();
    metric_log.flush();
    write_atomically(ckpt, [&](const fs::path& p) { save_checkpoint(*model, p); });
    write_atomically(state_path, [&](const fs::path& p) { save_train_state(s, p); });
  };
  TrainHooks hooks;
  hooks.on_step = [&](std::uint64_t step, double loss) { loss_log << step << '\t' << exact(loss) << '\n'; };
  hooks.on_validation = [&](const MetricRecord& r) {
    metric_log << r.step << '\t' << exact(r.lr) << '\t' << exact(r.train_loss) << '\t' << exact(r.val_psnr) << '\n';
    ctx.out << "step " << r.step << " lr " << r.lr << " loss " << r.train_loss << " val_psnr " << r.val_psnr << '\n';
  };
  hooks.on_checkpoint = save;

  const auto result = train(*model, train_set, val_set, cfg.train, state, hooks);
  save(result.state);
  if (!result.losses.empty()) {
    ctx.out << "first loss " << result.losses.front() << " final loss " << result.losses.back() << '\n';
  }
  ctx.out << "checkpoint " << ckpt.string() << '\n';
  return kSuccess;
}

TfFormerModel load_model(Context& ctx, const fs::path& checkpoint) {
  if (!fs::exists(checkpoint)) throw DataError("checkpoint not found: " + checkpoint.string());
  auto model = ctx.cfg.model_explicit ? load_checkpoint(checkpoint, ctx.cfg.model) : load_checkpoint(checkpoint);
  ctx.out << "# checkpoint model\n" << model.config().to_text();
  return model;
}

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".ppm";
}

int cmd_enhance(Context& ctx, const fs::path& checkpoint, const fs::path& input, bool emit_rec) {
  auto model = load_model(ctx, checkpoint);
  std::vector<fs::path> files;
  if (fs::is_directory(input)) {
    for (const auto& e : fs::directory_iterator(input)) {
      if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
  } else if (fs::exists(input)) {
    files.push_back(input);
  } else {
    throw DataError("input not found: " + input.string());
  }
  const fs::path rec_dir = ctx.cfg.out / "rec";
  if (emit_rec) fs::create_directories(rec_dir);
  std::size_t failed = 0;
  for (const auto& f : files) {
    try {
      const RgbImage img = load_image(f);
      const auto out = model.forward(img, ops::Mode::eval);
      save_image(RgbImage(out.refined.detach()), ctx.cfg.out / f.filename());
      if (emit_rec) save_image(RgbImage(out.reconstructed.detach()), rec_dir / f.filename());
      ctx.out << "enhanced " << f.filename().string() << " " << img.height() << "x" << img.width() << '\n';
    } catch (const std::exception& e) {
      ++failed;
      ctx.err << "error: " << f.string() << ": " << e.what() << '\n';
    }
  }
  ctx.out << "enhanced " << files.size() - failed << " of " << files.size() << '\n';
  return failed ? kDataError : kSuccess;
}

std::map<std::string, std::string> read_categories(const fs::path& path) {
  std::map<std::string, std::string> out;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    const auto tab = line.find('\t');
    if (line.empty() || line[0] == '#' || tab == std::string::npos) continue;
    out[trim(line.substr(0, tab))] = trim(line.substr(tab + 1));
  }
  return out;
}

int cmd_eval(Context& ctx, const std::string& checkpoint, bool identity, const fs::path& dir) {
  std::optional<TfFormerModel> model;
  if (identity) {
    ctx.out << "# model: identity\n";
  } else {
    model.emplace(load_model(ctx, checkpoint));
  }
  if (!fs::is_directory(dir)) throw DataError("test directory not found: " + dir.string());
  std::vector<std::string> errors;
  const auto pairs = load_paired_corpus(dir, errors);
  const auto categories = read_categories(dir / "categories.tsv");
  std::vector<ScoreRow> rows;
  for (const auto& p : pairs) {
    try {
      const RgbImage pred = identity ? p.low : RgbImage(model->forward(p.low, ops::Mode::eval).refined.detach());
      const auto it = categories.find(p.source_id);
      rows.push_back({p.source_id, it == categories.end() ? "all" : it->second, psnr(pred, p.reference),
                      ssim(pred, p.reference)});
    } catch (const std::exception& e) {
      errors.push_back(p.source_id + ": " + e.what());
    }
  }
  for (const auto& e : errors) ctx.err << "error: " << e << '\n';
  std::ostringstream table;
  write_results_table(table, rows);
  write_text(ctx.cfg.out / "results.tsv", table.str());
  ctx.out << table.str();
  return errors.empty() ? kSuccess : kDataError;
}

int cmd_gradcheck(Context& ctx, const std::string& fault) {
  static const std::map<std::string, testing::FaultOp> kFaults = {
      {"none", testing::FaultOp::none},     {"softmax", testing::FaultOp::softmax},
      {"gelu", testing::FaultOp::gelu},     {"conv2d", testing::FaultOp::conv2d},
      {"matmul", testing::FaultOp::matmul}, {"batch_norm", testing::FaultOp::batch_norm}};
  const auto it = kFaults.find(fault);
  if (it == kFaults.end()) throw ConfigError("--inject-fault: unknown op '" + fault + "'");
  testing::inject_backward_fault(it->second);
  GradcheckOptions opt;
  opt.seed = ctx.cfg.seed;
  GradcheckReport report;
  try {
    report = run_gradcheck(ctx.cfg.model, opt);
  } catch (...) {
    testing::inject_backward_fault(testing::FaultOp::none);
    throw;
  }
  testing::inject_backward_fault(testing::FaultOp::none);

  std::ostringstream text;
  text << "block\tmax_rel_error\tsamples\tresult\tworst\n";
  for (const auto& b : report.blocks) {
    char err[32];
    std::snprintf(err, sizeof err, "%.3e", b.max_rel_error);
    text << b.block << '\t' << err << '\t' << b.samples << '\t' << (b.passed ? "PASS" : "FAIL") << '\t'
         << b.worst_tensor << '\n';
  }
  text << "gradcheck " << (report.passed() ? "PASS" : "FAIL") << " (tolerance " << opt.tolerance << ")\n";
  write_text(ctx.cfg.out / "gradcheck.txt", text.str());
  ctx.out << text.str();
  return report.passed() ? kSuccess : kVerificationFailure;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Low-light enhancement with luminance-chrominance guided attention"};
  app.name(args.empty() ? "tfformer" : fs::path(args[0]).filename().string());
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::pair<std::string, std::string>> overrides;
  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "key = value config file");
    sub->add_option_function<std::string>(
        "--seed", [&](const std::string& v) { overrides.emplace_back("seed", v); }, "random seed");
    sub->add_option_function<std::string>(
        "--out", [&](const std::string& v) { overrides.emplace_back("out", v); }, "output directory");
    sub->add_option_function<std::vector<std::string>>(
           "--set",
           [&](const std::vector<std::string>& kvs) {
             for (const auto& kv : kvs) {
               const auto eq = kv.find('=');
               if (eq == std::string::npos) throw CLI::ValidationError("--set", "expected key=value, got " + kv);
               overrides.emplace_back(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
             }
           },
           "override any config key (key=value)")
        ->take_all();
  };
  const auto add_override = [&](CLI::App* sub, const std::string& flag, const std::string& key,
                                const std::string& help) {
    sub->add_option_function<std::string>(
        flag, [&overrides, key](const std::string& v) { overrides.emplace_back(key, v); }, help);
  };

  auto* curate_cmd = app.add_subcommand("curate", "extract, filter and write a patch manifest for a paired corpus");
  add_common(curate_cmd);
  std::string corpus_arg;
  curate_cmd->add_option("corpus", corpus_arg, "corpus directory with low/ and ref/");
  add_override(curate_cmd, "--patch-size", "curate.patch_size", "patch side length");
  add_override(curate_cmd, "--stride", "curate.stride", "patch grid stride");

  auto* train_cmd = app.add_subcommand("train", "train a model and write checkpoints and metric logs");
  add_common(train_cmd);
  bool synthetic = false, resume = false;
  train_cmd->add_flag("--synthetic", synthetic, "train on synthetic degraded pairs");
  train_cmd->add_flag("--resume", resume, "continue from <out>/checkpoint.tff and <out>/train_state.tfs");
  add_override(train_cmd, "--corpus", "data.corpus", "paired corpus directory");
  add_override(train_cmd, "--steps", "train.steps", "total optimizer steps");
  add_override(train_cmd, "--patch", "train.patch", "training crop size");
  add_override(train_cmd, "--batch", "train.batch", "batch size");
  add_override(train_cmd, "--lr", "train.lr", "initial learning rate");

  auto* enhance_cmd = app.add_subcommand("enhance", "enhance an image or every image in a directory");
  add_common(enhance_cmd);
  std::string enhance_ckpt, enhance_input;
  bool emit_rec = false;
  enhance_cmd->add_option("checkpoint", enhance_ckpt, "model checkpoint")->required();
  enhance_cmd->add_option("input", enhance_input, "image file or directory")->required();
  enhance_cmd->add_flag("--emit-rec", emit_rec, "also write the intermediate reconstruction to <out>/rec/");

  auto* eval_cmd = app.add_subcommand("eval", "score a model on a paired test directory");
  add_common(eval_cmd);
  std::string eval_ckpt, eval_dir;
  bool identity = false;
  eval_cmd->add_option("test_dir", eval_dir, "paired directory with low/ and ref/")->required();
  auto* ckpt_opt = eval_cmd->add_option("--checkpoint", eval_ckpt, "model checkpoint");
  auto* id_flag = eval_cmd->add_flag("--identity", identity, "score the unmodified low images");
  ckpt_opt->excludes(id_flag);

  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "finite-difference check of every block's gradients");
  add_common(gradcheck_cmd);
  std::string fault = "none";
  gradcheck_cmd->add_option("--inject-fault", fault)->group("");

  std::vector<std::string> storage = args.empty() ? std::vector<std::string>{"tfformer"} : args;
  std::vector<char*> argv;
  for (auto& a : storage) argv.push_back(a.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kSuccess;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kSuccess;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n' << "run with --help for usage\n";
    return kUsageError;
  }

  Context ctx{RunConfig{}, out, err};
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    if (!config_path.empty()) apply_config_file(ctx.cfg, config_path);
    if (synthetic) overrides.emplace_back("data.synthetic", "true");
    if (!corpus_arg.empty()) overrides.emplace_back("data.corpus", corpus_arg);
    for (const auto& [key, value] : overrides) {
      const std::string before = ctx.cfg.get(key);
      ctx.cfg.set(key, value);
      err << "override " << key << " = " << ctx.cfg.get(key) << " (was " << before << ")\n";
    }
    ctx.cfg.validate();
    if (command == "eval" && !identity && eval_ckpt.empty()) {
      throw ConfigError("eval: pass --checkpoint PATH or --identity");
    }
  } catch (const std::exception& e) {
    err << "config error: " << e.what() << '\n';
    return kUsageError;
  }

  try {
    echo_config(ctx, command);
    if (command == "curate") return cmd_curate(ctx);
    if (command == "train") return cmd_train(ctx, resume);
    if (command == "enhance") return cmd_enhance(ctx, enhance_ckpt, enhance_input, emit_rec);
    if (command == "eval") return cmd_eval(ctx, eval_ckpt, identity, eval_dir);
    return cmd_gradcheck(ctx, fault);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kUsageError;
  } catch (const TrainingError& e) {
    err << "training failed: " << e.what() << '\n';
    return kVerificationFailure;
  } catch (const std::exception& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  }
}

}  // namespace tfformer::cli
