// kflo: train, collapse, verify, evaluate and TL-initialize KFLO models.
//
// Exit codes: 0 ok, 2 config or usage error, 3 data or file-format error,
// 4 training divergence, 5 verification failure, 1 anything else.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "kflo/data.hpp"
#include "kflo/model_io.hpp"
#include "kflo/train.hpp"

namespace {

using namespace kflo;
namespace fs = std::filesystem;

enum ExitCode : int {
  kOk = 0,
  kOther = 1,
  kConfig = 2,
  kData = 3,
  kDivergence = 4,
  kVerification = 5,
};

struct RunConfig {
  std::string arch = "lenet5";
  std::string kflo = "1x1";
  std::size_t depth = 2;  // init-tl only; rho comes from the file count
  std::string data = "mnist";
  std::string data_dir;
  double fraction = 1.0;
  std::optional<std::size_t> train_limit;
  std::optional<std::size_t> test_limit;
  std::size_t num_classes = 10;
  int epochs = 1;
  double lr = 0.05;
  std::vector<int> milestones;
  double lr_factor = 0.1;
  double momentum = 0.9;
  double wd = 5e-4;
  double wd_cascade = 1e-9;
  std::optional<double> ema;
  bool augment = false;
  std::uint64_t seed = 0;
  std::size_t batch = 64;
  std::string in_model;
  std::string out_model;
  std::string out_metrics;
  double tolerance = 1e-5;
  std::size_t trials = 50;
  std::vector<std::string> pretrained;
};

std::string fmt_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

std::string fixed4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

void require_file(const std::string& path) {
  if (!fs::is_regular_file(path)) throw DataError("no such file: " + path);
}

std::string default_data_dir(const RunConfig& c) {
  if (!c.data_dir.empty()) return c.data_dir;
  return (fs::path("data") / c.data).string();
}

std::vector<std::string> dataset_files(const RunConfig& c, const std::string& split) {
  const fs::path dir = default_data_dir(c);
  if (c.data == "mnist") {
    const std::string prefix = split == "train" ? "train" : "t10k";
    return {(dir / (prefix + "-images-idx3-ubyte")).string(), (dir / (prefix + "-labels-idx1-ubyte")).string()};
  }
  if (split == "test") return {(dir / "test_batch.bin").string()};
  std::vector<std::string> files;
  for (int i = 1; i <= 5; ++i) files.push_back((dir / ("data_batch_" + std::to_string(i) + ".bin")).string());
  return files;
}

// Fraction: stratified per-class draw for CIFAR-10, leading prefix for MNIST.
Dataset load_split(const RunConfig& c, const std::string& split) {
  const auto files = dataset_files(c, split);
  for (const auto& f : files) require_file(f);
  const double fraction = split == "train" ? c.fraction : 1.0;
  Dataset ds;
  if (c.data == "mnist") {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("--fraction must be in (0, 1]");
    ds = load_mnist_idx(files[0], files[1], split);
    const auto keep = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(ds.size())));
    if (keep < ds.size()) ds = ds.slice(0, keep);
  } else {
    ds = load_cifar10_bin(files, fraction, c.seed, split);
  }
  const auto& limit = split == "train" ? c.train_limit : c.test_limit;
  if (limit && *limit < ds.size()) ds = ds.slice(0, *limit);
  return ds;
}

ModelGraph build_model(const RunConfig& c, const KfloConfig& k, std::size_t in_channels) {
  if (c.arch == "lenet5") return build_lenet5(k, c.num_classes, in_channels, c.seed);
  return build_smallcnn(k, c.num_classes, in_channels, c.seed);
}

TrainConfig train_config(const RunConfig& c) {
  TrainConfig t;
  t.lr = LrSchedule{c.lr, c.milestones, c.lr_factor};
  t.momentum = c.momentum;
  t.wd_plain = c.wd;
  t.wd_collapsed = c.wd;
  t.wd_cascade = c.wd_cascade;
  t.ema_decay = c.ema;
  t.batch_size = c.batch;
  t.epochs = c.epochs;
  t.seed = c.seed;
  t.data_fraction = c.fraction;
  t.augment = c.augment;
  return t;
}

std::string limit_string(const std::optional<std::size_t>& v) { return v ? std::to_string(*v) : "all"; }

// Effective configuration, one "# key=value" line each.
std::string config_header(const RunConfig& c) {
  std::ostringstream out;
  out << "# arch=" << c.arch << "\n# kflo=" << c.kflo << "\n# data=" << c.data
      << "\n# data_dir=" << default_data_dir(c) << "\n# fraction=" << fmt_double(c.fraction)
      << "\n# train_limit=" << limit_string(c.train_limit) << "\n# test_limit=" << limit_string(c.test_limit)
      << "\n# num_classes=" << c.num_classes << "\n# epochs=" << c.epochs << "\n# lr=" << fmt_double(c.lr)
      << "\n# milestones=";
  for (std::size_t i = 0; i < c.milestones.size(); ++i) out << (i ? "," : "") << c.milestones[i];
  out << "\n# lr_factor=" << fmt_double(c.lr_factor) << "\n# momentum=" << fmt_double(c.momentum)
      << "\n# wd=" << fmt_double(c.wd) << "\n# wd_cascade=" << fmt_double(c.wd_cascade)
      << "\n# ema=" << (c.ema ? fmt_double(*c.ema) : "off") << "\n# augment=" << (c.augment ? 1 : 0)
      << "\n# seed=" << c.seed << "\n# batch=" << c.batch << "\n";
  return out.str();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << text;
  if (!out) throw DataError("write failed: " + path);
}

std::size_t cascade_parameter_count(const ModelGraph& m) {
  std::size_t n = 0;
  for (const auto* p : m.parameters()) {
    if (p->param_class() == ParamClass::cascade_pointwise) n += p->value().size();
  }
  return n;
}

int cmd_train(const RunConfig& c) {
  const KfloConfig k = KfloConfig::parse(c.kflo);
  const Dataset train_set = load_split(c, "train");
  const Dataset test_set = load_split(c, "test");
  ModelGraph model = build_model(c, k, train_set.sample_shape().at(0));
  const TrainConfig tc = train_config(c);
  std::cout << "training " << c.arch << " KFLO " << k.format() << " on " << train_set.size()
            << " samples, " << model.parameter_count() << " parameters ("
            << cascade_parameter_count(model) << " in cascades)\n";
  const auto records = train(model, train_set, tc, &test_set, {});
  std::string metrics = config_header(c);
  for (const auto& r : records) {
    metrics += format_metrics(r) + "\n";
    std::cout << format_metrics(r) << "\n";
  }
  save_model(model, c.out_model);
  write_text(c.out_metrics, metrics);
  return kOk;
}

int cmd_collapse(const RunConfig& c) {
  require_file(c.in_model);
  const ModelGraph model = load_model(c.in_model, {ModelMode::training, std::nullopt});
  const ModelGraph deployed = collapse_model(model);
  save_model(deployed, c.out_model);
  std::cout << "parameters before=" << model.parameter_count() << " after=" << deployed.parameter_count()
            << "\n";
  return kOk;
}

int cmd_verify(const RunConfig& c) {
  require_file(c.in_model);
  const ModelGraph model = load_model(c.in_model, {ModelMode::training, std::nullopt});
  if (c.trials == 0) throw ConfigError("--trials must be positive");
  const ModelGraph deployed = collapse_model(model);
  Rng rng(c.seed);
  Shape shape{1};
  shape.insert(shape.end(), model.input_shape().begin(), model.input_shape().end());

  double worst = 0.0;
  std::string worst_layer = "output";
  auto consider = [&](double dev, const std::string& layer) {
    if (std::isnan(worst)) return;  // first NaN wins
    if (std::isnan(dev) || dev > worst) {
      worst = dev;
      worst_layer = layer;
    }
  };
  for (std::size_t t = 0; t < c.trials; ++t) {
    Tensor x(shape);
    for (float& v : x.data()) v = static_cast<float>(uniform(rng, -1.0, 1.0));
    const Tensor expanded = predict(model, x, FilterPath::kernel_filtering);
    const Tensor oracle = predict(model, x, FilterPath::feature_filtering);
    const Tensor collapsed = predict(deployed, x);
    consider(relative_deviation(collapsed, oracle), "output");
    consider(relative_deviation(expanded, oracle), "output");
    for (const auto& d : layer_equivalence(model, x)) consider(d.deviation, d.layer);
  }
  std::cout << "trials=" << c.trials << " max_relative_deviation=" << fmt_double(worst)
            << " worst_layer=" << worst_layer << "\n";
  if (std::isnan(worst) || worst > c.tolerance) {
    std::cerr << "error: verification failed at layer " << worst_layer << ": deviation "
              << fmt_double(worst) << " exceeds tolerance " << fmt_double(c.tolerance) << "\n";
    return kVerification;
  }
  return kOk;
}

int cmd_eval(const RunConfig& c) {
  require_file(c.in_model);
  ModelGraph model = load_model(c.in_model);
  const Dataset test_set = load_split(c, "test");
  if (test_set.size() > 0) model.set_input_shape(test_set.sample_shape());
  const double accuracy = evaluate(model, test_set);
  std::cout << "accuracy=" << fixed4(accuracy) << "\n";
  return kOk;
}

int cmd_init_tl(const RunConfig& c) {
  if (c.pretrained.empty()) throw ConfigError("init-tl needs at least one --pretrained file");
  for (const auto& p : c.pretrained) require_file(p);
  std::vector<ModelGraph> nets;
  for (const auto& p : c.pretrained) nets.push_back(load_model(p, {ModelMode::deployed, std::nullopt}));
  const std::size_t in_channels = nets.front().input_shape().at(0);
  const KfloConfig k{c.depth, static_cast<double>(nets.size())};
  if (k.depth < 2) throw ConfigError("--depth must be at least 2");
  auto tl = tl_init_model(build_model(c, k, in_channels), std::span<const ModelGraph>(nets));
  for (const auto& head : tl.reinitialized) {
    std::cout << "reinitialized " << head << " for " << c.num_classes << " classes\n";
  }
  save_model(tl.model, c.out_model);
  std::cout << "wrote KFLO " << k.format() << " model stacked from " << nets.size() << " networks\n";
  return kOk;
}

// Vanilla baseline plus B in {2, 3} x rho in {1, 2, 4}, one row each.
int cmd_sweep(const RunConfig& c) {
  const Dataset train_set = load_split(c, "train");
  const Dataset test_set = load_split(c, "test");
  const TrainConfig tc = train_config(c);
  std::vector<KfloConfig> grid{KfloConfig{}};
  for (std::size_t b : {2, 3}) {
    for (double r : {1.0, 2.0, 4.0}) grid.push_back({b, r});
  }
  std::ostringstream table;
  table << "kflo  train_params  deployed_params  train_macs_per_step  train_loss  test_acc  seconds\n";
  std::cout << table.str() << std::flush;
  for (const auto& k : grid) {
    ModelGraph model = build_model(c, k, train_set.sample_shape().at(0));
    const auto records = train(model, train_set, tc, &test_set, {});
    double seconds = 0.0;
    for (const auto& r : records) seconds += r.wall_seconds;
    const auto& last = records.back();
    char row[256];
    std::snprintf(row, sizeof row, "%-5s %13zu %16zu %20llu %11.4f %9.4f %8.2f\n", k.format().c_str(),
                  model.parameter_count(), model.deployed_parameter_count(),
                  static_cast<unsigned long long>(last.macs_per_step), last.train_loss,
                  last.test_acc.value_or(0.0), seconds);
    table << row;
    std::cout << row << std::flush;
  }
  if (!c.out_metrics.empty()) write_text(c.out_metrics, config_header(c) + table.str());
  return kOk;
}

// Prepends "--key value" pairs from a key=value file so that flags given on
// the command line, which are parsed later, take precedence.
std::vector<std::string> expand_config_file(std::vector<std::string> args) {
  std::vector<std::string> out;
  std::optional<std::string> path;
  std::size_t insert_at = 0;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[i + 1];
      ++i;
      continue;
    }
    if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
      continue;
    }
    out.push_back(args[i]);
  }
  if (!path) return out;
  require_file(*path);
  std::ifstream in(*path);
  std::vector<std::string> injected;
  std::string line;
  while (std::getline(in, line)) {
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(*path + ": expected key=value, got '" + line + "'");
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (value == "true") {
      injected.push_back("--" + key);
    } else {
      injected.push_back("--" + key);
      injected.push_back(value);
    }
  }
  // Options belong to the subcommand, so inject right after its name.
  insert_at = out.empty() ? 0 : 1;
  out.insert(out.begin() + static_cast<std::ptrdiff_t>(insert_at), injected.begin(), injected.end());
  return out;
}

void add_model_options(CLI::App& cmd, RunConfig& c) {
  cmd.add_option("--arch", c.arch, "Architecture")->check(CLI::IsMember({"lenet5", "smallcnn"}));
  cmd.add_option("--num-classes", c.num_classes, "Classifier outputs")->check(CLI::PositiveNumber);
  cmd.add_option("--seed", c.seed, "Seed for init, shuffling and sampling");
}

void add_data_options(CLI::App& cmd, RunConfig& c) {
  cmd.add_option("--data", c.data, "Dataset")->check(CLI::IsMember({"mnist", "cifar10"}));
  cmd.add_option("--data-dir", c.data_dir, "Dataset directory (default data/<data>)");
  cmd.add_option("--test-limit", c.test_limit, "Use only the first N test samples");
}

void add_train_options(CLI::App& cmd, RunConfig& c) {
  add_model_options(cmd, c);
  add_data_options(cmd, c);
  cmd.add_option("--kflo", c.kflo, "KFLO setting BxR (1x1 is vanilla)");
  cmd.add_option("--fraction", c.fraction, "Fraction of the training split");
  cmd.add_option("--train-limit", c.train_limit, "Use only the first N training samples");
  cmd.add_option("--epochs", c.epochs, "Epochs")->check(CLI::PositiveNumber);
  cmd.add_option("--lr", c.lr, "Initial learning rate")->check(CLI::NonNegativeNumber);
  cmd.add_option("--milestones", c.milestones, "Epochs at which the learning rate drops")->delimiter(',');
  cmd.add_option("--lr-factor", c.lr_factor, "Learning-rate drop factor");
  cmd.add_option("--momentum", c.momentum, "SGD momentum")->check(CLI::Range(0.0, 1.0));
  cmd.add_option("--wd", c.wd, "Weight decay for plain and collapsed kernels")->check(CLI::NonNegativeNumber);
  cmd.add_option("--wd-cascade", c.wd_cascade, "Weight decay for cascade kernels")->check(CLI::NonNegativeNumber);
  cmd.add_option("--ema", c.ema, "EMA decay in [0, 1)");
  cmd.add_flag("--augment", c.augment, "Random flip and pad-crop");
  cmd.add_option("--batch", c.batch, "Batch size")->check(CLI::PositiveNumber);
}

int run(int argc, char** argv) {
  RunConfig c;
  CLI::App app{"Kernel filtering linear overparameterization"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);

  auto* train_cmd = app.add_subcommand("train", "Train a model and write model and metrics files");
  add_train_options(*train_cmd, c);
  train_cmd->add_option("--out-model", c.out_model, "Output model file")->required();
  train_cmd->add_option("--out-metrics", c.out_metrics, "Output metrics file")->required();

  auto* collapse_cmd = app.add_subcommand("collapse", "Collapse a training-mode model for deployment");
  collapse_cmd->add_option("model", c.in_model, "Training-mode model file")->required();
  collapse_cmd->add_option("--out-model", c.out_model, "Output deployed model file")->required();

  auto* verify_cmd = app.add_subcommand("verify", "Check collapse equivalence on random inputs");
  verify_cmd->add_option("model", c.in_model, "Training-mode model file")->required();
  verify_cmd->add_option("--trials", c.trials, "Random inputs");
  verify_cmd->add_option("--tolerance", c.tolerance, "Maximum relative deviation");
  verify_cmd->add_option("--seed", c.seed, "Seed for the random inputs");

  auto* eval_cmd = app.add_subcommand("eval", "Print test accuracy of a model file");
  eval_cmd->add_option("model", c.in_model, "Model file")->required();
  add_data_options(*eval_cmd, c);

  auto* tl_cmd = app.add_subcommand("init-tl", "Stack pretrained networks into a KFLO model");
  add_model_options(*tl_cmd, c);
  tl_cmd->add_option("--pretrained", c.pretrained, "Deployed model file (repeatable)")
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll)
      ->required();
  tl_cmd->add_option("--depth", c.depth, "KFLO depth B");
  tl_cmd->add_option("--out-model", c.out_model, "Output model file")->required();

  auto* sweep_cmd = app.add_subcommand("sweep", "Train B in {2,3} x rho in {1,2,4} and tabulate");
  add_train_options(*sweep_cmd, c);
  sweep_cmd->add_option("--out-metrics", c.out_metrics, "Optional table output file");

  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    args = expand_config_file(std::move(args));
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return dynamic_cast<const DataError*>(&e) ? kData : kConfig;
  }
  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*train_cmd) return cmd_train(c);
    if (*collapse_cmd) return cmd_collapse(c);
    if (*verify_cmd) return cmd_verify(c);
    if (*eval_cmd) return cmd_eval(c);
    if (*tl_cmd) return cmd_init_tl(c);
    if (*sweep_cmd) return cmd_sweep(c);
  } catch (const DivergenceError& e) {
    std::cerr << "error: training diverged in layer " << e.layer() << ": " << e.what() << "\n";
    return kDivergence;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  } catch (const StructureError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  } catch (const DimensionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kOther;
  }
  return kConfig;
}

}  // namespace

int main(int argc, char** argv) { return run(argc, argv); }
