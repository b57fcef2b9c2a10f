#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "dscm/cli.hpp"
#include "dscm/synthdata.hpp"

using namespace dscm;
using cli::InterventionItem;
namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("dscm_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "dscm");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

void expect_usage_error(const std::string& expr) {
  try {
    cli::parse_intervention(expr);
    FAIL() << "accepted '" << expr << "'";
  } catch (const cli::UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("f_"), std::string::npos) << "no grammar reminder: " << e.what();
  }
}

}  // namespace

TEST(Grammar, ParsesEachForm) {
  auto items = cli::parse_intervention("t=3.5");
  ASSERT_EQ(items.size(), 1u);
  EXPECT_EQ(items[0].node, "t");
  EXPECT_EQ(items[0].kind, InterventionItem::Kind::Constant);
  EXPECT_EQ(items[0].value, 3.5);

  items = cli::parse_intervention("t=+2");
  EXPECT_EQ(items[0].kind, InterventionItem::Kind::Additive);
  EXPECT_EQ(items[0].value, 2.0);

  items = cli::parse_intervention("t=f_T(eps)+1.0");
  EXPECT_EQ(items[0].kind, InterventionItem::Kind::NoiseShift);
  EXPECT_EQ(items[0].value, 1.0);
  items = cli::parse_intervention("t=f_T-0.5");
  EXPECT_EQ(items[0].kind, InterventionItem::Kind::NoiseShift);
  EXPECT_EQ(items[0].value, -0.5);

  items = cli::parse_intervention(" t = 2 ; i = 128 ");
  ASSERT_EQ(items.size(), 2u);
  EXPECT_EQ(items[1].node, "i");
  EXPECT_EQ(items[1].value, 128.0);
  EXPECT_TRUE(cli::parse_intervention("").empty());
  EXPECT_TRUE(cli::parse_intervention("  ").empty());
}

TEST(Grammar, RejectsMalformed) {
  for (const char* bad : {"t", "=3", "t=", "t=abc", "t=f_T+", "t=f_I(eps)+1", "t=3x", "t==3"}) {
    expect_usage_error(bad);
  }
  EXPECT_THROW(cli::parse_intervention("t=3;t=4"), cli::UsageError);
}

TEST(Grammar, AdditiveMatchesPerRecordConstant) {
  const Scm scm = synth::true_scm(false);
  const auto recs = synth::generate_dataset(200, 1, synth::Split::Test, false);
  const Observation obs = synth::to_observation(recs, false);
  const auto items = cli::parse_intervention("t=+2");
  Tensor shifted = obs.at("t").clone();
  for (double& v : shifted.mutable_data()) v += 2.0;
  Rng r1(3), r2(3);
  const auto a = scm.counterfactual(obs, cli::to_counterfactual_intervention(items, obs), r1, 1);
  const auto b = scm.counterfactual(obs, Intervention().set("t", shifted), r2, 1);
  for (const char* node : {"t", "i"}) {
    const auto x = a.mean.at(node).data(), y = b.mean.at(node).data();
    ASSERT_EQ(x.size(), y.size());
    for (std::size_t k = 0; k < x.size(); ++k) EXPECT_EQ(x[k], y[k]) << node;
  }
  const Intervention s = cli::to_sampling_intervention(cli::parse_intervention("t=f_T(eps)+1;i=100"));
  ASSERT_EQ(s.targets().size(), 2u);
  EXPECT_EQ(s.targets().at("t").kind, InterventionTarget::Kind::NoiseShift);
  EXPECT_EQ(s.targets().at("t").shift, 1.0);
  EXPECT_EQ(s.targets().at("i").kind, InterventionTarget::Kind::Constant);
}

TEST(Run, ExitCodes) {
  EXPECT_EQ(run({"--help"}).code, 0);
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"frobnicate"}).code, 2);
  EXPECT_EQ(run({"generate"}).code, 2);
  const auto zero = run({"generate", "--n", "0", "--out-dir", scratch("zero").string()});
  EXPECT_EQ(zero.code, 2);
  EXPECT_FALSE(zero.err.empty());
  EXPECT_EQ(run({"train", "--config", "missing.json", "--data-dir", "missing"}).code, 2);
  EXPECT_EQ(run({"intervene", "--checkpoint", "ckpt", "--do", "t=3"}).code, 2);
  const std::string empty = scratch("nockpt").string();
  EXPECT_EQ(run({"--out", empty, "intervene", "--checkpoint", empty, "--do", "t=3"}).code, 1);
}

TEST(Run, GenerateIsByteDeterministic) {
  const fs::path a = scratch("gen_a"), b = scratch("gen_b");
  for (const auto& dir : {a, b}) {
    ASSERT_EQ(run({"--quiet", "--seed", "9", "generate", "--n", "30", "--out-dir", dir.string()}).code, 0);
  }
  std::size_t files = 0;
  for (const auto& entry : fs::directory_iterator(a)) {
    ++files;
    EXPECT_EQ(read_file(entry.path()), read_file(b / entry.path().filename())) << entry.path();
  }
  EXPECT_GE(files, 3u);
  const auto test = synth::read_split(a, synth::Split::Test, true);
  EXPECT_EQ(test.size(), 5u);
  EXPECT_EQ(test[0].image.size(), synth::kPixels);
}

TEST(Run, TrainInterveneCounterfactual) {
  const fs::path root = scratch("pipeline");
  const std::string data = (root / "data").string(), model = (root / "model").string();
  ASSERT_EQ(run({"--quiet", "--seed", "2", "generate", "--n", "120", "--out-dir", data}).code, 0);
  const std::string config = std::string(DSCM_CONFIG_DIR) + "/full.json";

  // A zero-epoch budget still produces loadable checkpoints.
  auto r = run({"--quiet", "--out", model, "train", "--config", config, "--data-dir", data, "--epochs", "0",
                "--amortised-epochs", "0"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(fs::path(model) / "best" / "manifest.json"));
  EXPECT_TRUE(fs::exists(fs::path(model) / "last" / "manifest.json"));

  r = run({"--quiet", "--out", model, "train", "--config", config, "--data-dir", data, "--epochs", "1",
           "--amortised-epochs", "1", "--resume", model});
  ASSERT_EQ(r.code, 0) << r.err;

  const std::string iv_dir = (root / "iv").string();
  r = run({"--quiet", "--out", iv_dir, "intervene", "--checkpoint", model, "--do", "t=f_T(eps)+1", "--n", "200"});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"samples.csv", "oracle_samples.csv", "histograms.csv", "summary.json"}) {
    EXPECT_TRUE(fs::exists(fs::path(iv_dir) / f)) << f;
  }
  EXPECT_EQ(run({"--quiet", "--out", iv_dir, "intervene", "--checkpoint", model, "--do", "t=f_T+"}).code, 2);
  EXPECT_EQ(run({"--quiet", "--out", iv_dir, "intervene", "--checkpoint", model, "--do", "q=1"}).code, 2);

  const std::string cf_dir = (root / "cf").string();
  r = run({"--quiet", "--out", cf_dir, "counterfactual", "--checkpoint", model, "--data-dir", data, "--do", "",
           "--count", "5", "--samples", "4"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto diffs = synth::read_images(fs::path(cf_dir) / "difference_images.f32");
  ASSERT_EQ(diffs.size(), 5u);
  for (const auto& d : diffs) {
    for (double v : d) ASSERT_EQ(v, 0.0);
  }
  const std::string csv = read_file(fs::path(cf_dir) / "counterfactual.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "index,t,i,t_cf,i_cf,t_ref,i_ref,mae");

  EXPECT_EQ(run({"--quiet", "--out", cf_dir, "counterfactual", "--checkpoint", model, "--data-dir", data, "--do",
                 "t=+100", "--count", "2"})
                .code,
            2);
  EXPECT_EQ(run({"--quiet", "--out", cf_dir, "counterfactual", "--checkpoint", model, "--data-dir", data, "--do",
                 "t=+1", "--index", "999"})
                .code,
            2);
}
