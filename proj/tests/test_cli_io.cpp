#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "model_fixtures.hpp"
#include "vtn/config.hpp"
#include "vtn/convergence.hpp"
#include "vtn/svg.hpp"

using namespace vtn;
namespace fs = std::filesystem;

namespace {

std::size_t count_of(const std::string& hay, const std::string& needle) {
  std::size_t n = 0;
  for (auto p = hay.find(needle); p != std::string::npos; p = hay.find(needle, p + 1)) ++n;
  return n;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path scratch_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("vtn_cli_test_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

int run(const std::string& args) {
  const std::string cmd = std::string(VTN_CLI_PATH) + " " + args;
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST(RunConfig, JsonRoundTrip) {
  auto c = default_run_config(Variant::non_autoregressive);
  c.set_seed(17);
  c.sampling.strategy = Strategy::nucleus;
  c.dataset.toy_count = 33;
  c.out_dir = "elsewhere";
  const auto back = RunConfig::from_json(nlohmann::json::parse(c.to_json().dump()));
  EXPECT_EQ(back, c);
  EXPECT_EQ(back.train.seed, 17u);
  EXPECT_EQ(back.sampling.seed, 17u);
}

TEST(RunConfig, ViolationsListEveryProblem) {
  RunConfig c;
  c.model.block.n_heads = 5;
  c.train.batch_size = 0;
  c.sampling.temperature = -1;
  c.dataset.path = "/definitely/not/here.json";
  c.out_dir.clear();
  const auto v = c.violations();
  EXPECT_EQ(v.size(), 5u);
  try {
    c.validate();
    FAIL();
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("model."), std::string::npos);
    EXPECT_NE(msg.find("out_dir"), std::string::npos);
  }
  EXPECT_TRUE(default_run_config().violations().empty());
}

TEST(RunConfig, WrongFieldTypeIsStructural) {
  RunConfig c;
  EXPECT_THROW(c.merge_json(nlohmann::json{{"train", {{"batch_size", "many"}}}}), StructuralError);
  EXPECT_THROW(c.merge_json(nlohmann::json::array()), StructuralError);
}

TEST(Svg, DeterministicWithOneRectPerElement) {
  std::mt19937_64 rng(1);
  auto l = vtn::testing::random_layout(4, GridConfig{8, 8, 3}, rng);
  l.page = {800, 600};
  const Palette pal{{"text", "title", "a<b"}};
  const auto a = render_svg(l, pal);
  EXPECT_EQ(a, render_svg(l, pal));
  EXPECT_EQ(count_of(a, "class=\"element\""), 4u);
  EXPECT_EQ(count_of(a, "class=\"page\""), 1u);
  EXPECT_NE(a.find("viewBox=\"0 0 800 600\""), std::string::npos);
  const auto empty = render_svg(Layout{});
  EXPECT_EQ(count_of(empty, "<rect"), 1u);
  EXPECT_EQ(xml_escape("a<b&\"c\""), "a&lt;b&amp;&quot;c&quot;");
  EXPECT_NE(Palette::hue(0), Palette::hue(1));
}

TEST(Convergence, SmokeRun) {
  const GridConfig g{8, 8, 3};
  std::mt19937_64 rng(2);
  std::vector<Layout> pool, held;
  for (int i = 0; i < 10; ++i) pool.push_back(vtn::testing::random_layout(3, g, rng));
  for (int i = 0; i < 4; ++i) held.push_back(vtn::testing::random_layout(3, g, rng));
  TrainConfig tc;
  tc.max_steps = 3;
  tc.batch_size = 5;
  SamplingConfig sc;
  sc.max_len = 5;
  ConvergenceConfig cc{{10}, 1, 20, 3};
  const auto rows = run_convergence(pool, held, vtn::testing::tiny_config(Variant::autoregressive), tc, sc, cc);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].size, 10u);
  EXPECT_LE(rows[0].mean_matches, 4.0);
  EXPECT_DOUBLE_EQ(rows[0].std_matches, 0.0);
  std::ostringstream os;
  write_convergence_csv(os, rows);
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')), "size,mean_matches,std_matches");
  cc.sizes = {11};
  EXPECT_THROW(run_convergence(pool, held, vtn::testing::tiny_config(Variant::autoregressive), tc, sc, cc),
               ValidationError);
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = scratch_dir("suite");
    ASSERT_EQ(run("train --preset toy --seed 3 --max-steps 5 --out " + dir_.string() + " > " +
                  (dir_ / "train.txt").string() + " 2>&1"),
              0)
        << slurp(dir_ / "train.txt");
  }
  static fs::path dir_;
};
fs::path Cli::dir_;

TEST_F(Cli, TrainWritesArtifacts) {
  for (const char* f : {"model.json", "train_log.csv", "config.json"}) EXPECT_TRUE(fs::exists(dir_ / f)) << f;
  EXPECT_EQ(slurp(dir_ / "train_log.csv").substr(0, 4), "step");
}

TEST_F(Cli, SamplingIsReproducible) {
  const auto model = (dir_ / "model.json").string();
  const auto a = dir_ / "a.jsonl", b = dir_ / "b.jsonl";
  ASSERT_EQ(run("sample --model " + model + " --n 5 --seed 7 --out " + a.string()), 0);
  ASSERT_EQ(run("sample --model " + model + " --n 5 --seed 7 --out " + b.string()), 0);
  const auto text = slurp(a);
  EXPECT_EQ(text, slurp(b));
  EXPECT_EQ(count_of(text, "\n"), 5u);
  const auto layouts = read_layouts_jsonl(a);
  EXPECT_EQ(layouts.size(), 5u);
}

TEST_F(Cli, EvalOfIdenticalSetsIsZeroDistance) {
  const auto real = dir_ / "real.jsonl", rep = dir_ / "report.json";
  ASSERT_EQ(run("toy --n 8 --out " + real.string()), 0);
  ASSERT_EQ(run("eval --generated " + real.string() + " --real " + real.string() + " --out " + rep.string() +
                " > " + (dir_ / "eval.txt").string()),
            0);
  const auto j = nlohmann::json::parse(slurp(rep));
  EXPECT_DOUBLE_EQ(j.at("w_class").get<double>(), 0.0);
  EXPECT_DOUBLE_EQ(j.at("w_bbox").get<double>(), 0.0);
  EXPECT_EQ(j.at("unique_matches").get<std::size_t>(), 8u);
}

TEST_F(Cli, RenderWritesOneSvgPerLayout) {
  const auto real = dir_ / "render.jsonl", out = dir_ / "svg";
  ASSERT_EQ(run("toy --n 3 --out " + real.string()), 0);
  ASSERT_EQ(run("render --input " + real.string() + " --out " + out.string()), 0);
  EXPECT_TRUE(fs::exists(out / "layout_0000.svg"));
  EXPECT_TRUE(fs::exists(out / "layout_0002.svg"));
}

TEST_F(Cli, ErrorsAreJsonOnStderrWithNonzeroExit) {
  const auto err = dir_ / "err.txt";
  const int rc = run("sample --model " + (dir_ / "model.json").string() + " --temperature -1 2> " + err.string());
  EXPECT_EQ(rc, 2);
  const auto text = slurp(err);
  const auto line = text.substr(text.rfind('{'));
  const auto j = nlohmann::json::parse(line);
  EXPECT_EQ(j.at("error"), "validation");
  EXPECT_NE(j.at("message").get<std::string>().find("temperature"), std::string::npos);
  EXPECT_NE(run("sample --model " + (dir_ / "missing.json").string() + " 2> /dev/null"), 0);
}
