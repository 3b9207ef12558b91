#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>

#include "bevkd/experiment.hpp"

namespace bevkd {
namespace {

namespace fs = std::filesystem;

struct Outcome {
  int code = -1;
  std::string out;
};

Outcome run(const std::string& args) {
  const std::string cmd = std::string(BEVKD_CLI_PATH) + " " + args + " 2>&1";
  Outcome o;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (pipe == nullptr) return o;
  char buf[4096];
  std::size_t n = 0;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) o.out.append(buf, n);
  const int status = pclose(pipe);
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return o;
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "bevkd_cli";
  fs::create_directories(dir);
  return dir / name;
}

std::string digest_of(const std::string& output) {
  const auto pos = output.find("sha256 ");
  return pos == std::string::npos ? "" : output.substr(pos + 7, 64);
}

TEST(Cli, HelpListsEveryConfigKeyWithDefault) {
  const Outcome o = run("--help");
  EXPECT_EQ(o.code, 0);
  const Json defaults = RunConfig{}.to_json();
  for (const std::string& key : RunConfig::keys()) {
    EXPECT_NE(o.out.find("  " + key + " = " + defaults.at(key).dump()), std::string::npos) << key;
  }
}

TEST(Cli, GenDataIsReproducible) {
  const auto a = scratch("a.jsonl"), b = scratch("b.jsonl");
  const Outcome oa = run("gen-data --seed 7 --count 100 --out " + a.string());
  const Outcome ob = run("gen-data --seed 7 --count 100 --out " + b.string());
  ASSERT_EQ(oa.code, 0) << oa.out;
  ASSERT_EQ(ob.code, 0) << ob.out;
  EXPECT_EQ(digest_of(oa.out), digest_of(ob.out));
  EXPECT_EQ(digest_of(oa.out), file_digest(a));
  const Dataset ds = read_dataset(a);
  ASSERT_EQ(ds.scenes.size(), 100u);
  const Dataset fresh = generate_dataset(7, 100, default_grid(), GenerationSpec{});
  for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(ds.scenes[i], fresh.scenes[i]);
}

TEST(Cli, GenDataEmpty) {
  const auto p = scratch("empty.jsonl");
  const Outcome o = run("gen-data --seed 3 --count 0 --out " + p.string());
  ASSERT_EQ(o.code, 0) << o.out;
  EXPECT_EQ(digest_of(o.out).size(), 64u);
  EXPECT_EQ(read_dataset(p).scenes.size(), 0u);
}

TEST(Cli, DocumentedErrorsExitNonzero) {
  EXPECT_NE(run("").code, 0);
  EXPECT_NE(run("gen-data --count 3 --out " + scratch("x.jsonl").string()).code, 0);
  EXPECT_NE(run("gen-data --seed 1 --count 3 --out /proc/forbidden/x.jsonl").code, 0);
  EXPECT_NE(run("gen-data --seed 1 --count 3 --out " + scratch("y.jsonl").string() + " --set min_boxes=9 --set max_boxes=2").code, 0);
  const Outcome unknown = run("config --set lambda_fet=1");
  EXPECT_EQ(unknown.code, 2);
  EXPECT_NE(unknown.out.find("lambda_fet"), std::string::npos);
  EXPECT_NE(run("ablate --axis table9 --set train_count=2").code, 0);
  EXPECT_NE(run("ablate --axis").code, 0);
  const std::string missing = scratch("missing_teacher.json").string();
  fs::remove(missing);
  EXPECT_NE(run("distill --set train_count=2 --set eval_count=1 --set teacher_checkpoint=" + missing).code, 0);
  EXPECT_NE(run("train-teacher --out " + scratch("t.json").string() + " --set train_data=/nonexistent.jsonl").code, 0);
}

TEST(Cli, ConfigHonorsOverrides) {
  const Outcome o = run("config --seed 4 --seed 9 --set epochs=3");
  ASSERT_EQ(o.code, 0) << o.out;
  const Json j = Json::parse(o.out);
  EXPECT_EQ(j.at("epochs"), 3);
  EXPECT_EQ(j.at("seeds"), Json::array({4, 9}));
}

TEST(Cli, TeacherZeroEpochsAndDistillDeterminism) {
  const std::string out = scratch("teacher0.json").string();
  const std::string small = "--set train_count=4 --set eval_count=2 --set epochs=1";
  const Outcome t = run("train-teacher --out " + out + " --seed 5 --set teacher_epochs=0 " + small);
  ASSERT_EQ(t.code, 0) << t.out;
  const ToyTeacher teacher = load_teacher(out);
  EXPECT_TRUE(teacher.frozen);
  const std::string dir_a = scratch("run_a").string(), dir_b = scratch("run_b").string();
  const std::string common = "distill --seed 1 " + small + " --set teacher_checkpoint=" + out + " --set output_dir=";
  const Outcome a = run(common + dir_a);
  const Outcome b = run(common + dir_b + " --save-checkpoints");
  ASSERT_EQ(a.code, 0) << a.out;
  ASSERT_EQ(b.code, 0) << b.out;
  EXPECT_EQ(file_digest(fs::path(dir_a) / "run.csv"), file_digest(fs::path(dir_b) / "run.csv"));
  const auto record = [](const std::string& dir) {
    std::ifstream in(fs::path(dir) / "run.json");
    Json j = Json::parse(in);
    j["config"].erase("output_dir");
    return j.dump();
  };
  EXPECT_EQ(record(dir_a), record(dir_b));
  EXPECT_TRUE(fs::exists(fs::path(dir_b) / "checkpoints" / "run_run_seed1.json"));
}

}  // namespace
}  // namespace bevkd
