// Command-line driver: data generation, teacher training, distillation runs
// and ablation sweeps.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "bevkd/experiment.hpp"

namespace {

enum Exit { kOk = 0, kFailure = 1, kUsage = 2, kTeacherFloor = 3 };

struct ConfigArgs {
  std::string file;
  std::vector<std::string> overrides;
  std::vector<std::uint64_t> seeds;
};

void add_config_options(CLI::App* cmd, ConfigArgs& args, const char* seed_help) {
  cmd->add_option("-c,--config", args.file, "JSON file of flat config keys")->check(CLI::ExistingFile);
  cmd->add_option("-s,--set", args.overrides, "Override a config key, key=value (repeatable)");
  cmd->add_option("--seed", args.seeds, seed_help);
}

bevkd::RunConfig resolve(const ConfigArgs& args) {
  bevkd::RunConfig c = args.file.empty() ? bevkd::RunConfig{} : bevkd::RunConfig::load(args.file);
  for (const std::string& kv : args.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
    c.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (!args.seeds.empty()) c.seeds = args.seeds;
  c.validate();
  return c;
}

std::string key_listing() {
  std::string out = "Config keys (defaults):\n";
  const bevkd::Json defaults = bevkd::RunConfig{}.to_json();
  for (const auto& [key, value] : defaults.items()) {
    out += "  " + key + " = " + value.dump() + "\n";
  }
  return out;
}

void print_summary(const bevkd::ExperimentRecord& rec) {
  std::printf("%-16s %20s %20s\n", "cell", "toy_nds", "toy_map");
  for (const auto& s : rec.summary) {
    std::printf("%-16s %9.4f +- %7.4f %9.4f +- %7.4f\n", s.label.c_str(), s.nds_mean, s.nds_std, s.map_mean,
                s.map_std);
  }
}

void save_students(const bevkd::ExperimentRecord& rec, const std::filesystem::path& dir) {
  for (const auto& r : rec.runs) {
    std::string stem = r.run_id;
    for (char& ch : stem)
      if (ch == '/' || ch == '+') ch = '_';
    bevkd::save_checkpoint(dir / "checkpoints" / (stem + ".json"), r.state, rec.config);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"BEV cross-modal distillation toolkit"};
  app.require_subcommand(1);
  app.footer(key_listing());

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic scene dataset");
  std::uint64_t gen_seed = 1;
  std::size_t gen_count = 400;
  std::string gen_out;
  bool gen_inline = false;
  std::string gen_config;
  std::vector<std::string> gen_overrides;
  gen->add_option("--seed", gen_seed, "Dataset seed")->required();
  gen->add_option("--count", gen_count, "Number of scenes")->required();
  gen->add_option("-o,--out", gen_out, "Output file")->required();
  gen->add_flag("--inline", gen_inline, "Store input rasters instead of regeneration flags");
  gen->add_option("-c,--config", gen_config, "JSON file of flat config keys")->check(CLI::ExistingFile);
  gen->add_option("-s,--set", gen_overrides, "Override a config key, key=value (repeatable)");

  auto* teacher = app.add_subcommand("train-teacher", "Train and freeze the lidar teacher");
  std::string teacher_out;
  ConfigArgs teacher_cfg;
  teacher->add_option("-o,--out", teacher_out, "Teacher checkpoint path")->required();
  add_config_options(teacher, teacher_cfg, "Teacher initialization seed");

  auto* distill = app.add_subcommand("distill", "Train camera students for every configured seed");
  ConfigArgs distill_cfg;
  bool distill_save = false;
  distill->add_flag("--save-checkpoints", distill_save, "Write one student checkpoint per seed");
  add_config_options(distill, distill_cfg, "Student seed (repeatable, replaces the seeds key)");

  auto* ablate = app.add_subcommand("ablate", "Run an ablation sweep");
  std::vector<std::string> axes{"components"};
  ConfigArgs ablate_cfg;
  ablate->add_option("-a,--axis", axes, "components, mask, loss, critic or all (repeatable)");
  add_config_options(ablate, ablate_cfg, "Student seed (repeatable, replaces the seeds key)");

  auto* keys = app.add_subcommand("config", "Print the resolved configuration");
  ConfigArgs keys_cfg;
  add_config_options(keys, keys_cfg, "Student seed (repeatable)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      const bevkd::RunConfig c = resolve(ConfigArgs{gen_config, gen_overrides, {}});
      const auto ds = bevkd::generate_dataset(gen_seed, gen_count, bevkd::default_grid(), c.generation);
      bevkd::write_dataset(gen_out, ds, gen_inline);
      std::printf("wrote %zu scenes to %s sha256 %s\n", ds.scenes.size(), gen_out.c_str(),
                  bevkd::file_digest(gen_out).c_str());
    } else if (teacher->parsed()) {
      ConfigArgs args = teacher_cfg;
      args.seeds.clear();
      bevkd::RunConfig c = resolve(args);
      if (!teacher_cfg.seeds.empty()) c.teacher_seed = teacher_cfg.seeds.front();
      const auto data = bevkd::load_data(c);
      const auto t = bevkd::train_checked_teacher(c, data, &std::cerr);
      bevkd::save_teacher(teacher_out, t.teacher, c.to_json(), t.metrics);
      std::printf("teacher %s toy_nds %.4f toy_map %.4f\n", t.teacher.model.weight_hash().c_str(), t.metrics.toy_nds,
                  t.metrics.toy_map);
    } else if (distill->parsed()) {
      const bevkd::RunConfig c = resolve(distill_cfg);
      const auto rec = bevkd::run_experiment(c, &std::cerr);
      bevkd::write_record(c.output_dir, rec);
      if (distill_save) save_students(rec, c.output_dir);
      print_summary(rec);
    } else if (ablate->parsed()) {
      const bevkd::RunConfig c = resolve(ablate_cfg);
      if (axes.empty()) throw std::invalid_argument("ablate: empty axis list");
      if (std::find(axes.begin(), axes.end(), "all") != axes.end()) axes = bevkd::ablation_axes();
      for (const std::string& a : axes) bevkd::ablation_cells(a, c);
      for (const std::string& a : axes) {
        const auto rec = bevkd::run_ablation(a, c, &std::cerr);
        bevkd::write_record(c.output_dir, rec);
        std::printf("== %s\n", a.c_str());
        print_summary(rec);
      }
    } else if (keys->parsed()) {
      std::printf("%s\n", resolve(keys_cfg).to_json().dump(2).c_str());
    }
  } catch (const bevkd::TeacherBelowFloor& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kTeacherFloor;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFailure;
  }
  return kOk;
}
