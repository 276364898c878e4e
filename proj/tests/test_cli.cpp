#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>
#include <string>

#include "kflo/model_io.hpp"
#include "kflo/train.hpp"
#include "oracles.hpp"

using namespace kflo;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string output;
};

const fs::path& work_dir() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / ("kflo_cli_" + std::to_string(::getpid()));
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string in_work(const std::string& name) { return (work_dir() / name).string(); }

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Result run_cli(const std::string& args) {
  const std::string log = in_work("cli.log");
  const std::string cmd = std::string(KFLO_CLI_PATH) + " " + args + " > " + log + " 2>&1";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, read_text(log)};
}

const std::string kData = std::string("--data mnist --data-dir ") + KFLO_DATA_DIR + "/mnist";

// Drops the host-dependent wall_seconds field.
std::string without_timing(const std::string& metrics) {
  return std::regex_replace(metrics, std::regex(" wall_seconds=[^ ]+"), "");
}

class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    const Result r = run_cli("train --arch lenet5 --kflo 2x4 " + kData +
                             " --epochs 1 --seed 7 --train-limit 512 --test-limit 200 --out-model " +
                             in_work("trained.kflo") + " --out-metrics " + in_work("trained.txt"));
    ASSERT_EQ(r.code, 0) << r.output;
  }
  static void TearDownTestSuite() { fs::remove_all(work_dir()); }
};

}  // namespace

TEST_F(CliTest, TrainWritesModelAndMetrics) {
  const auto model = load_model(in_work("trained.kflo"), {ModelMode::training, std::nullopt});
  EXPECT_EQ(model.nodes().front().kflo()->block.depth(), 2u);
  const std::string metrics = read_text(in_work("trained.txt"));
  EXPECT_NE(metrics.find("# kflo=2x4\n"), std::string::npos);
  EXPECT_NE(metrics.find("# seed=7\n"), std::string::npos);
  EXPECT_TRUE(std::regex_search(metrics, std::regex(
                                             "\nepoch=1 train_loss=[^ ]+ train_acc=[^ ]+ test_acc=[^ ]+ "
                                             "wall_seconds=[^ ]+ macs_per_step=[0-9]+\n")))
      << metrics;
}

TEST_F(CliTest, RerunIsBitIdentical) {
  const Result r = run_cli("train --arch lenet5 --kflo 2x4 " + kData +
                           " --epochs 1 --seed 7 --train-limit 512 --test-limit 200 --out-model " +
                           in_work("again.kflo") + " --out-metrics " + in_work("again.txt"));
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(read_text(in_work("again.kflo")), read_text(in_work("trained.kflo")));
  EXPECT_EQ(without_timing(read_text(in_work("again.txt"))), without_timing(read_text(in_work("trained.txt"))));
}

TEST_F(CliTest, VanillaHasNoCascades) {
  const Result r = run_cli("train --kflo 1x1 " + kData + " --train-limit 128 --test-limit 50 --out-model " +
                           in_work("plain.kflo") + " --out-metrics " + in_work("plain.txt"));
  ASSERT_EQ(r.code, 0) << r.output;
  const auto model = load_model(in_work("plain.kflo"));
  for (const auto* p : model.parameters()) EXPECT_NE(p->param_class(), ParamClass::cascade_pointwise);
  EXPECT_NE(r.output.find("(0 in cascades)"), std::string::npos) << r.output;
}

TEST_F(CliTest, MissingDataPathNamesIt) {
  const Result r = run_cli("train --data-dir /definitely/not/here --out-model " + in_work("x") +
                           " --out-metrics " + in_work("y"));
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.output.find("/definitely/not/here"), std::string::npos) << r.output;
  EXPECT_FALSE(fs::exists(in_work("x")));
}

TEST_F(CliTest, ConfigErrorsExitTwo) {
  EXPECT_EQ(run_cli("train --kflo 2y4 " + kData + " --out-model a --out-metrics b").code, 2);
  EXPECT_EQ(run_cli("train --arch resnet " + kData + " --out-model a --out-metrics b").code, 2);
  EXPECT_EQ(run_cli("").code, 2);
  EXPECT_EQ(run_cli("train " + kData).code, 2);
  EXPECT_EQ(run_cli("--help").code, 0);
}

TEST_F(CliTest, CollapseReportsCountsAndRefusesDeployed) {
  const Result r = run_cli("collapse " + in_work("trained.kflo") + " --out-model " + in_work("deployed.kflo"));
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("after=61706"), std::string::npos) << r.output;
  const auto deployed = load_model(in_work("deployed.kflo"), {ModelMode::deployed, std::nullopt});
  EXPECT_EQ(deployed.parameter_count(), 61706u);
  const Result twice = run_cli("collapse " + in_work("deployed.kflo") + " --out-model " + in_work("twice.kflo"));
  EXPECT_EQ(twice.code, 2) << twice.output;
}

TEST_F(CliTest, VerifyFreshAndTrainedModels) {
  save_model(build_lenet5(KfloConfig::parse("3x2"), 10, 1, 1), in_work("fresh.kflo"));
  const Result fresh = run_cli("verify " + in_work("fresh.kflo") + " --trials 50 --tolerance 1e-5");
  EXPECT_EQ(fresh.code, 0) << fresh.output;
  EXPECT_NE(fresh.output.find("max_relative_deviation="), std::string::npos);
  const Result trained = run_cli("verify " + in_work("trained.kflo") + " --trials 10 --tolerance 1e-5");
  EXPECT_EQ(trained.code, 0) << trained.output;
}

TEST_F(CliTest, VerifyCatchesCorruptedCascade) {
  auto model = load_model(in_work("trained.kflo"));
  model.nodes()[3].kflo()->block.cascade()[0].mutable_value()[5] = std::nanf("");
  save_model(model, in_work("nan.kflo"));
  const Result r = run_cli("verify " + in_work("nan.kflo") + " --trials 3");
  EXPECT_EQ(r.code, 5) << r.output;
  EXPECT_NE(r.output.find("conv2"), std::string::npos) << r.output;

  std::string bytes = read_text(in_work("trained.kflo"));
  bytes[bytes.size() / 2] ^= 0x10;
  std::ofstream(in_work("flipped.kflo"), std::ios::binary) << bytes;
  const Result flipped = run_cli("verify " + in_work("flipped.kflo") + " --trials 3");
  EXPECT_EQ(flipped.code, 3) << flipped.output;
}

TEST_F(CliTest, EvalMatchesAcrossModes) {
  ASSERT_EQ(run_cli("collapse " + in_work("trained.kflo") + " --out-model " + in_work("eval_d.kflo")).code, 0);
  const Result a = run_cli("eval " + in_work("trained.kflo") + " " + kData + " --test-limit 300");
  const Result b = run_cli("eval " + in_work("eval_d.kflo") + " " + kData + " --test-limit 300");
  ASSERT_EQ(a.code, 0) << a.output;
  EXPECT_TRUE(std::regex_match(a.output, std::regex("accuracy=[01]\\.[0-9]{4}\n"))) << a.output;
  EXPECT_EQ(a.output, b.output);
  EXPECT_EQ(run_cli("eval " + in_work("trained.kflo") + " " + kData + " --test-limit 0").code, 2);
}

TEST_F(CliTest, EvalFixtureAccuracy) {
  // All-zero weights tie every logit, so class 0 is always predicted.
  auto model = build_lenet5(KfloConfig{}, 10, 1, 2);
  for (auto* p : model.parameters()) p->set_value(Tensor(p->value().shape()));
  save_model(collapse_model(model), in_work("zeros.kflo"));
  const Result r = run_cli("eval " + in_work("zeros.kflo") + " " + kData + " --test-limit 1000");
  const auto test = load_mnist_idx(std::string(KFLO_DATA_DIR) + "/mnist/t10k-images-idx3-ubyte",
                                   std::string(KFLO_DATA_DIR) + "/mnist/t10k-labels-idx1-ubyte")
                        .slice(0, 1000);
  const auto zeros = static_cast<double>(std::count(test.labels.begin(), test.labels.end(), 0));
  char expected[32];
  std::snprintf(expected, sizeof expected, "accuracy=%.4f\n", zeros / 1000.0);
  EXPECT_EQ(r.output, expected);
}

TEST_F(CliTest, InitTlStacksPretrainedNetworks) {
  save_model(collapse_model(build_lenet5(KfloConfig{}, 10, 1, 31)), in_work("p0.kflo"));
  save_model(collapse_model(build_lenet5(KfloConfig::parse("2x2"), 10, 1, 32)), in_work("p1.kflo"));
  const Result r = run_cli("init-tl --arch lenet5 --pretrained " + in_work("p0.kflo") + " --pretrained " +
                           in_work("p1.kflo") + " --out-model " + in_work("tl.kflo"));
  ASSERT_EQ(r.code, 0) << r.output;
  const auto tl = load_model(in_work("tl.kflo"), {ModelMode::training, std::nullopt});
  EXPECT_EQ(tl.nodes().front().kflo()->block.rho(), 2.0);
  const auto p0 = load_model(in_work("p0.kflo"));
  Rng rng(3);
  const Tensor x = oracle::random_tensor<float>({20, 1, 28, 28}, rng);
  EXPECT_LE(max_abs_difference(predict(tl, x), predict(p0, x)), 1e-6);

  const Result head = run_cli("init-tl --arch lenet5 --num-classes 7 --pretrained " + in_work("p0.kflo") +
                              " --out-model " + in_work("tl7.kflo"));
  ASSERT_EQ(head.code, 0) << head.output;
  EXPECT_NE(head.output.find("reinitialized fc3"), std::string::npos) << head.output;
}

TEST_F(CliTest, InitTlRejectsMismatches) {
  save_model(collapse_model(build_lenet5(KfloConfig{}, 10, 1, 31)), in_work("q0.kflo"));
  save_model(collapse_model(build_lenet5(KfloConfig{}, 10, 3, 31)), in_work("q1.kflo"));
  const Result r = run_cli("init-tl --pretrained " + in_work("q0.kflo") + " --pretrained " + in_work("q1.kflo") +
                           " --out-model " + in_work("bad.kflo"));
  EXPECT_EQ(r.code, 2) << r.output;
  EXPECT_NE(r.output.find("conv1"), std::string::npos) << r.output;
  const Result training = run_cli("init-tl --pretrained " + in_work("trained.kflo") + " --out-model " +
                                  in_work("bad.kflo"));
  EXPECT_EQ(training.code, 2) << training.output;
  const Result missing = run_cli("init-tl --pretrained " + in_work("nope.kflo") + " --out-model " +
                                 in_work("bad.kflo"));
  EXPECT_EQ(missing.code, 3) << missing.output;
  EXPECT_NE(missing.output.find("nope.kflo"), std::string::npos);
}

TEST_F(CliTest, CommandLineOverridesConfigFile) {
  std::ofstream(in_work("run.cfg")) << "# desk run\nepochs = 2\nseed=3\nlr=0.01\ntrain-limit=64\ntest-limit=20\n";
  const Result r = run_cli("train --config " + in_work("run.cfg") + " " + kData + " --epochs 1 --out-model " +
                           in_work("cfg.kflo") + " --out-metrics " + in_work("cfg.txt"));
  ASSERT_EQ(r.code, 0) << r.output;
  const std::string metrics = read_text(in_work("cfg.txt"));
  EXPECT_NE(metrics.find("# epochs=1\n"), std::string::npos) << metrics;
  EXPECT_NE(metrics.find("# seed=3\n"), std::string::npos);
  EXPECT_NE(metrics.find("# lr=0.01\n"), std::string::npos);
  EXPECT_NE(metrics.find("# train_limit=64\n"), std::string::npos);
  EXPECT_EQ(metrics.find("epoch=2"), std::string::npos);

  std::ofstream(in_work("bad.cfg")) << "epochs\n";
  EXPECT_EQ(run_cli("train --config " + in_work("bad.cfg") + " --out-model a --out-metrics b").code, 2);
  EXPECT_EQ(run_cli("train --config " + in_work("none.cfg") + " --out-model a --out-metrics b").code, 3);
}
