#include <cstdint>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mpcseg/config.hpp"
#include "mpcseg/gradcheck.hpp"
#include "mpcseg/metrics.hpp"
#include "mpcseg/pipeline.hpp"
#include "mpcseg/pointcloud.hpp"
#include "mpcseg/sampling.hpp"

namespace fs = std::filesystem;
using namespace mpcseg;

namespace {

struct Common {
  std::string config;
  std::string cloud;
  std::string format;
};

RunConfig read_config(const std::string& path) {
  return path.empty() ? RunConfig{} : load_run_config(path);
}

CloudFormat cloud_format(const std::string& flag, const fs::path& path) {
  return flag.empty() ? format_from_path(path) : parse_cloud_format(flag);
}

MultispectralPointCloud obtain_cloud(const Common& c, const RunConfig& rc) {
  if (!c.cloud.empty()) {
    MultispectralPointCloud cloud = load_cloud(c.cloud, cloud_format(c.format, c.cloud));
    cloud.validate();
    return cloud;
  }
  if (!rc.scene) throw ValidationError("cloud: pass --cloud or a config with a scene section");
  return generate_synthetic_scene(*rc.scene);
}

ExperimentConfig experiment_for(const RunConfig& rc, const MultispectralPointCloud& cloud) {
  ExperimentConfig ex = rc.experiment;
  ex.network.bands = cloud.bands;
  ex.network.classes = cloud.num_classes();
  return ex;
}

void write_pair(const std::string& prefix, const std::string& csv, const std::string& json) {
  write_text_file(prefix + ".csv", csv);
  write_text_file(prefix + ".json", json);
  std::cout << "wrote " << prefix << ".csv and " << prefix << ".json\n";
}

std::vector<std::uint64_t> parse_seeds(const std::string& list) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stoull(item));
  }
  if (out.empty()) throw ValidationError("seeds: empty list");
  return out;
}

std::vector<double> parse_values(const std::string& list) {
  std::vector<double> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stod(item));
  }
  return out;
}

std::string log_json(const RunLog& log) {
  nlohmann::json j;
  j["clamp_events"] = log.clamp_events;
  j["omega_rescales"] = log.omega_rescales;
  j["epochs"] = nlohmann::json::array();
  for (const auto& e : log.epochs) {
    j["epochs"].push_back({{"epoch", e.epoch},
                           {"scale_loss", e.scale_loss},
                           {"tail_loss", e.tail_loss},
                           {"total_loss", e.total_loss},
                           {"learning_rate", e.learning_rate},
                           {"seconds", e.seconds}});
  }
  return j.dump(2);
}

void print_report(const MetricsReport& r) {
  std::cout << "OA=" << r.oa << " AA=" << r.aa << " kappa=" << r.kappa << " mIoU=" << r.miou
            << " head_avg=" << r.head_avg << " tail_avg=" << r.tail_avg << "\n";
}

void add_common(CLI::App* cmd, Common& c, bool need_config) {
  auto* opt = cmd->add_option("--config", c.config, "Run config JSON");
  if (need_config) opt->required();
  cmd->add_option("--cloud", c.cloud, "Point cloud file (generated from the config scene if omitted)");
  cmd->add_option("--format", c.format, "Cloud format: csv or bin (default: from extension)")
      ->check(CLI::IsMember({"csv", "bin"}));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multispectral point cloud segmentation toolkit"};
  app.require_subcommand(1);

  // gen
  std::string gen_scene, gen_out, gen_format;
  auto* gen = app.add_subcommand("gen", "Generate a synthetic scene from a scene spec");
  gen->add_option("--scene", gen_scene, "Scene spec JSON (or a run config with a scene section)")->required();
  gen->add_option("--out", gen_out, "Output cloud file")->required();
  gen->add_option("--format", gen_format, "csv or bin (default: from extension)")
      ->check(CLI::IsMember({"csv", "bin"}));

  // sample
  Common sc;
  double cell_size = 0.0, train_ratio = 0.05;
  std::size_t k = 4096;
  std::uint64_t sample_seed = 0;
  std::string strategy = "gbs", sample_out = "samples.json";
  auto* sample = app.add_subcommand("sample", "Build training/test samples and write a manifest");
  add_common(sample, sc, false);
  auto* cell_opt = sample->add_option("--cell-size", cell_size, "Grid cell size (default: derived from k)");
  auto* ratio_opt = sample->add_option("--train-ratio", train_ratio, "Share of labeled centroids used for training");
  auto* k_opt = sample->add_option("--k", k, "Points per sample");
  auto* seed_opt = sample->add_option("--seed", sample_seed, "Sampling seed");
  auto* strategy_opt = sample->add_option("--strategy", strategy, "gbs or rs")->check(CLI::IsMember({"gbs", "rs"}));
  sample->add_option("--out", sample_out, "Manifest JSON path");

  // train
  Common tc;
  std::string model_out = "model.bin", train_prefix = "train";
  auto* train_cmd = app.add_subcommand("train", "Train a model and evaluate it on the test samples");
  add_common(train_cmd, tc, true);
  train_cmd->add_option("--model", model_out, "Output model file");
  train_cmd->add_option("--out", train_prefix, "Prefix of the log and report files");

  // eval
  Common ec;
  std::string model_in, eval_prefix = "eval";
  std::size_t shards = 1;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a saved model on the test samples");
  add_common(eval_cmd, ec, true);
  eval_cmd->add_option("--model", model_in, "Model file")->required();
  eval_cmd->add_option("--shards", shards, "Evaluation shards");
  eval_cmd->add_option("--out", eval_prefix, "Report prefix");

  // gradcheck
  std::string grad_seeds = "0,1,2";
  double grad_tol = 1e-3;
  std::size_t grad_entries = 8;
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient suite; exits 1 on failure");
  grad->add_option("--seeds", grad_seeds, "Comma-separated seeds");
  grad->add_option("--tol", grad_tol, "Maximum relative error");
  grad->add_option("--entries", grad_entries, "Entries checked per matrix (0 = all)");

  // ablate
  Common ac;
  std::string ablate_seeds = "0,1,2", sweep_name, sweep_values, ablate_prefix = "ablation";
  auto* abl = app.add_subcommand("ablate", "Component ablation or hyperparameter sweep");
  add_common(abl, ac, true);
  abl->add_option("--seeds", ablate_seeds, "Comma-separated seeds");
  abl->add_option("--sweep", sweep_name, "receptive_field, weight_truncation or lambda")
      ->check(CLI::IsMember({"receptive_field", "weight_truncation", "lambda"}));
  abl->add_option("--values", sweep_values, "Comma-separated sweep values");
  abl->add_option("--out", ablate_prefix, "Report prefix");

  // compare-sampling
  Common cc;
  std::string cmp_seeds = "0,1,2", cmp_prefix = "sampling";
  auto* cmp = app.add_subcommand("compare-sampling", "Grid-balanced versus random sampling");
  add_common(cmp, cc, true);
  cmp->add_option("--seeds", cmp_seeds, "Comma-separated seeds");
  cmp->add_option("--out", cmp_prefix, "Report prefix");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const SceneSpec spec = load_scene_spec(gen_scene);
      const auto cloud = generate_synthetic_scene(spec);
      save_cloud(cloud, gen_out, cloud_format(gen_format, gen_out));
      std::cout << "wrote " << cloud.size() << " points to " << gen_out << "\n";
      return 0;
    }

    if (*sample) {
      const RunConfig rc = read_config(sc.config);
      const auto cloud = obtain_cloud(sc, rc);
      SamplingConfig cfg = rc.experiment.sampling;
      if (*cell_opt) cfg.cell_size = cell_size;
      if (*ratio_opt) cfg.train_ratio = train_ratio;
      if (*k_opt) cfg.k = k;
      if (*seed_opt) cfg.seed = sample_seed;
      if (*strategy_opt) cfg.strategy = parse_sampling_strategy(strategy);
      const SamplingPlan plan = plan_grid_balanced(cloud, cfg);
      for (const auto& w : plan.selection.warnings) std::cerr << "warning: " << w << "\n";
      if (cfg.strategy == SamplingStrategy::kGridBalanced) {
        write_text_file(sample_out, sampling_manifest_json(plan, cloud, cfg));
      } else {
        const SampleSet rs = random_sampling_baseline(cloud, plan.train.samples.size(), cfg.k, cfg.seed);
        nlohmann::json j;
        j["strategy"] = "rs";
        j["k"] = cfg.k;
        j["seed"] = cfg.seed;
        j["train_samples"] = rs.samples.size();
        j["test_samples"] = plan.test.samples.size();
        j["eval_points"] = plan.eval_points;
        j["centers"] = nlohmann::json::array();
        for (const auto& s : rs.samples) j["centers"].push_back(s.center);
        write_text_file(sample_out, j.dump(2));
      }
      std::cout << "train samples: " << plan.train.samples.size() << ", test samples: "
                << plan.test.samples.size() << ", eval points: " << plan.eval_points << "\n";
      return 0;
    }

    if (*train_cmd) {
      const RunConfig rc = read_config(tc.config);
      const auto cloud = obtain_cloud(tc, rc);
      const ExperimentConfig ex = experiment_for(rc, cloud);
      const SamplingPlan plan = plan_grid_balanced(cloud, ex.sampling);
      SampleSet train_set = plan.train;
      if (ex.sampling.strategy == SamplingStrategy::kRandom) {
        train_set = random_sampling_baseline(cloud, plan.train.samples.size(), ex.sampling.k, ex.sampling.seed);
      }
      const auto train_inputs = prepare_samples(cloud, train_set, ex.network.knn_neighbors);
      const auto test_inputs = prepare_samples(cloud, plan.test, ex.network.knn_neighbors);
      const TrainResult tr = train(cloud, train_inputs, ex.network, ex.train);
      save_model(tr.model, model_out);
      std::cout << "wrote " << model_out << "\n";
      write_pair(train_prefix + "_log", run_log_csv(tr.log), log_json(tr.log));
      const EvalResult er = evaluate(cloud, test_inputs, tr.model, plan.eval_mask, {1, ex.train.seed});
      write_pair(train_prefix + "_report", report_csv(er.report, cloud.class_names),
                 report_json(er.report, cloud.class_names));
      if (er.uncovered_points) std::cerr << "warning: " << er.uncovered_points << " EVAL points not covered\n";
      print_report(er.report);
      return 0;
    }

    if (*eval_cmd) {
      const RunConfig rc = read_config(ec.config);
      const auto cloud = obtain_cloud(ec, rc);
      const ExperimentConfig ex = experiment_for(rc, cloud);
      const TrainedModel model = load_model(model_in);
      if (model.params.config.classes != cloud.num_classes() || model.params.config.bands != cloud.bands) {
        throw ValidationError("model: class or band count does not match the cloud");
      }
      const SamplingPlan plan = plan_grid_balanced(cloud, ex.sampling);
      const auto test_inputs = prepare_samples(cloud, plan.test, model.params.config.knn_neighbors);
      const EvalResult er = evaluate(cloud, test_inputs, model, plan.eval_mask, {shards, ex.train.seed});
      write_pair(eval_prefix, report_csv(er.report, cloud.class_names), report_json(er.report, cloud.class_names));
      print_report(er.report);
      return 0;
    }

    if (*grad) {
      const auto seeds = parse_seeds(grad_seeds);
      GradSuiteOptions opts;
      opts.max_entries_per_input = grad_entries;
      bool ok = true;
      for (const auto& e : run_gradient_suite(seeds, opts)) {
        const bool pass = e.report.max_rel_error <= grad_tol;
        ok = ok && pass;
        std::cout << (pass ? "PASS " : "FAIL ") << e.component << " seed=" << e.seed
                  << " max_rel_error=" << e.report.max_rel_error << " entries=" << e.report.entries_checked;
        if (!pass) std::cout << " worst: " << e.report.worst;
        std::cout << "\n";
      }
      return ok ? 0 : 1;
    }

    if (*abl) {
      const RunConfig rc = read_config(ac.config);
      const auto cloud = obtain_cloud(ac, rc);
      const ExperimentConfig ex = experiment_for(rc, cloud);
      const auto seeds = parse_seeds(ablate_seeds);
      AblationTable table;
      if (!sweep_name.empty()) {
        std::vector<double> values = parse_values(sweep_values);
        if (values.empty()) {
          const auto p = parse_sweep_parameter(sweep_name);
          values = p == SweepParameter::kReceptiveField    ? std::vector<double>{1024, 2048, 4096, 8192}
                   : p == SweepParameter::kWeightTruncation ? std::vector<double>{0.0, 0.01, 0.05, 0.1, 0.5}
                                                            : std::vector<double>{0.1, 0.5, 1.0, 2.0, 5.0};
        }
        table = sweep(cloud, ex, parse_sweep_parameter(sweep_name), values, seeds);
      } else {
        table = ablate(cloud, ex, seeds);
      }
      write_pair(ablate_prefix, ablation_csv(table), ablation_json(table));
      std::cout << ablation_csv(table);
      return 0;
    }

    if (*cmp) {
      const RunConfig rc = read_config(cc.config);
      const auto cloud = obtain_cloud(cc, rc);
      const ExperimentConfig ex = experiment_for(rc, cloud);
      const auto result = compare_sampling(cloud, ex, parse_seeds(cmp_seeds));
      write_pair(cmp_prefix, sampling_comparison_csv(result), sampling_comparison_json(result));
      std::cout << sampling_comparison_csv(result);
      return 0;
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
