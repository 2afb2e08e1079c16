#include "dosediff/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <thread>

#include <CLI11.hpp>

#include "dosediff/checkpoint.hpp"
#include "dosediff/config.hpp"
#include "dosediff/tensor_io.hpp"
#include "dosediff/trainer.hpp"

namespace dosediff::io {

namespace {

namespace fs = std::filesystem;

struct CommonArgs {
  std::string config_path;
  std::string data_dir;
  std::uint64_t seed_override = 0;
  bool seed_set = false;

  RunConfig resolve_config() const {
    RunConfig cfg = config_path.empty() ? RunConfig{} : RunConfig::load(config_path);
    if (seed_set) cfg.seed = seed_override;
    if (!data_dir.empty()) cfg.data_dir = data_dir;
    return cfg;
  }
};

fs::path require_data_dir(const RunConfig& cfg) {
  DD_CHECK(!cfg.data_dir.empty(), "no dataset directory given (use --data or config data_dir)");
  const fs::path dir = cfg.data_dir;
  DD_CHECK(fs::is_directory(dir), "dataset directory does not exist: " + dir.string());
  return dir;
}

void require_file(const std::string& path, const char* what) {
  DD_CHECK(fs::exists(path), std::string(what) + " does not exist: " + path);
}

std::string case_dir_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "case_%04d", index);
  return buf;
}

void write_loss_csv(const fs::path& path, const train::TrainResult& result, int steps_per_epoch) {
  std::ofstream out(path, std::ios::binary);
  DD_CHECK(out.good(), "cannot open " + path.string() + " for writing");
  out << "step,epoch,loss\n";
  for (std::size_t i = 0; i < result.step_loss.size(); ++i) {
    const int epoch = steps_per_epoch > 0 ? static_cast<int>(i) / steps_per_epoch : 0;
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%zu,%d,%.9g", i, epoch,
                  static_cast<double>(result.step_loss[i]));
    out << buf << "\n";
  }
}

fs::path with_suffix(const fs::path& ckpt_path, const std::string& suffix) {
  fs::path p = ckpt_path;
  p.replace_extension();
  return p.string() + suffix;
}

int cmd_gen_data(const CommonArgs& common, const std::string& out_dir, int cases_override,
                 int size_override, int beams_override) {
  RunConfig cfg = common.resolve_config();
  if (cases_override > 0) cfg.cases = cases_override;
  if (size_override > 0) cfg.size = size_override;
  if (beams_override > 0) cfg.n_beams = beams_override;
  cfg.validate();

  fs::create_directories(out_dir);

  // Cases are independent; generate them concurrently and write in order.
  const unsigned workers = std::max(1u, std::thread::hardware_concurrency());
  std::vector<std::future<phantom::PhantomCase>> pending;
  std::vector<phantom::PhantomCase> generated(static_cast<std::size_t>(cfg.cases));
  for (int i = 0; i < cfg.cases; ++i) {
    const std::uint64_t case_seed = cfg.seed + static_cast<std::uint64_t>(i);
    pending.push_back(std::async(
        workers > 1 ? std::launch::async : std::launch::deferred,
        [case_seed, &cfg] { return phantom::generate_case(case_seed, cfg.size, cfg.n_beams); }));
  }
  for (int i = 0; i < cfg.cases; ++i) {
    phantom::PhantomCase c = pending[static_cast<std::size_t>(i)].get();
    c.case_id = case_dir_name(i);
    train::write_case(fs::path(out_dir) / c.case_id, c);
  }
  std::cout << "wrote " << cfg.cases << " cases to " << out_dir << "\n";
  return 0;
}

int cmd_pretrain(const CommonArgs& common, const std::string& out_path, int epochs_override) {
  RunConfig cfg = common.resolve_config();
  if (epochs_override >= 0) cfg.pretrain_epochs = epochs_override;
  cfg.validate();
  const fs::path data = require_data_dir(cfg);

  auto splits = train::split_by_config(train::load_dataset(data), cfg);
  nets::PretrainConfig pcfg;
  pcfg.net = cfg.net_config();
  pcfg.epochs = cfg.pretrain_epochs;
  pcfg.batch_size = cfg.batch_size;
  pcfg.lr = static_cast<float>(cfg.pretrain_lr);
  pcfg.seed = cfg.seed;
  pcfg.dose_scale = static_cast<float>(cfg.dose_scale);

  nets::PretrainResult result = nets::pretrain_structure_encoder(splits[0], pcfg);
  train::save_encoder_checkpoint(out_path, result.encoder, cfg);
  if (!result.epoch_loss.empty()) {
    std::cout << "pretrain L1: first epoch " << result.epoch_loss.front() << ", last epoch "
              << result.epoch_loss.back() << "\n";
  }
  std::cout << "wrote encoder checkpoint " << out_path << "\n";
  return 0;
}

int cmd_train(const CommonArgs& common, const std::string& out_path,
              const std::string& init_ckpt, int epochs_override) {
  RunConfig cfg = common.resolve_config();
  if (epochs_override >= 0) cfg.epochs = epochs_override;
  cfg.validate();
  const fs::path data = require_data_dir(cfg);
  if (!init_ckpt.empty()) require_file(init_ckpt, "checkpoint");

  auto splits = train::split_by_config(train::load_dataset(data), cfg);
  nets::DiffusionModel model = train::make_diffusion_model(cfg, init_ckpt);

  const int steps_per_epoch =
      (static_cast<int>(splits[0].size()) + cfg.batch_size - 1) / cfg.batch_size;
  auto on_epoch = [&](int epoch) {
    if (cfg.ckpt_interval > 0 && (epoch + 1) % cfg.ckpt_interval == 0 &&
        epoch + 1 < cfg.epochs) {
      train::save_diffusion_checkpoint(
          with_suffix(out_path, ".ep" + std::to_string(epoch + 1) + ".ckpt"), model, cfg);
    }
  };
  train::TrainResult result = train::train_diffusion(model, splits[0], splits[1], cfg, on_epoch);

  train::save_diffusion_checkpoint(out_path, model, cfg);
  write_loss_csv(with_suffix(out_path, ".loss.csv"), result, steps_per_epoch);
  if (!result.step_loss.empty()) {
    std::cout << "trained " << result.epochs_run << " epochs, " << result.step_loss.size()
              << " steps; first loss " << result.step_loss.front() << ", last loss "
              << result.step_loss.back() << "\n";
  }
  std::cout << "wrote checkpoint " << out_path << "\n";
  return 0;
}

const std::vector<phantom::PhantomCase>& pick_split(
    const std::array<std::vector<phantom::PhantomCase>, 3>& splits, const std::string& name) {
  if (name == "train") return splits[0];
  if (name == "val") return splits[1];
  DD_CHECK(name == "test", "unknown split '" + name + "' (expected train|val|test)");
  return splits[2];
}

int cmd_sample(const CommonArgs& common, const std::string& ckpt_path,
               const std::string& out_dir, const std::string& split_name) {
  RunConfig cfg = common.resolve_config();
  cfg.validate();
  const fs::path data = require_data_dir(cfg);
  require_file(ckpt_path, "checkpoint");

  auto splits = train::split_by_config(train::load_dataset(data), cfg);
  const auto& cases = pick_split(splits, split_name);
  DD_CHECK(!cases.empty(), "selected split is empty");

  nets::DiffusionModel model = train::load_diffusion_checkpoint(ckpt_path, cfg);
  fs::create_directories(out_dir);

  std::vector<Tensor> xs;
  for (const auto& c : cases) xs.push_back(c.x);
  Tensor x_batch = stack(xs);
  Rng rng = Rng::stream(cfg.seed, "sample");
  Tensor dose = train::predict_dose_diffusion(model, x_batch, cfg, rng);
  for (std::size_t i = 0; i < cases.size(); ++i) {
    write_tensor(fs::path(out_dir) / ("pred_" + cases[i].case_id + ".ddtf"),
                 take_slice(dose, static_cast<int>(i)));
  }
  std::cout << "sampled " << cases.size() << " cases into " << out_dir << "\n";
  return 0;
}

int cmd_eval(const CommonArgs& common, const std::string& pred_dir, const std::string& out_path,
             const std::string& compare_dir, const std::string& split_name) {
  RunConfig cfg = common.resolve_config();
  cfg.validate();
  const fs::path data = require_data_dir(cfg);
  DD_CHECK(fs::is_directory(pred_dir), "prediction directory does not exist: " + pred_dir);

  auto splits = train::split_by_config(train::load_dataset(data), cfg);
  const auto& cases = pick_split(splits, split_name);
  DD_CHECK(!cases.empty(), "selected split is empty");

  auto eval_cases = train::make_eval_cases(cases, pred_dir);
  metrics::DoseReport report = metrics::evaluate(eval_cases, cfg.dvh_bins);
  metrics::write_report_csv(out_path, report);
  std::cout << "wrote report " << out_path << " (mean dHI " << report.hi.mean << ", mean dDmean "
            << report.dmean.mean << ")\n";

  if (!compare_dir.empty()) {
    DD_CHECK(fs::is_directory(compare_dir),
             "comparison prediction directory does not exist: " + compare_dir);
    auto other_cases = train::make_eval_cases(cases, compare_dir);
    metrics::DoseReport other = metrics::evaluate(other_cases, cfg.dvh_bins);
    auto comparisons = metrics::compare_reports(report, other);
    const fs::path ttest_path = with_suffix(out_path, ".ttest.csv");
    metrics::write_comparison_csv(ttest_path.string(), comparisons);
    std::cout << "wrote paired t-tests " << ttest_path.string() << "\n";
  }
  return 0;
}

int cmd_plot_dvh(const CommonArgs& common, const std::string& pred_dir,
                 const std::string& out_prefix, const std::string& case_id,
                 const std::string& split_name) {
  RunConfig cfg = common.resolve_config();
  cfg.validate();
  const fs::path data = require_data_dir(cfg);
  DD_CHECK(fs::is_directory(pred_dir), "prediction directory does not exist: " + pred_dir);

  auto splits = train::split_by_config(train::load_dataset(data), cfg);
  const auto& cases = pick_split(splits, split_name);
  DD_CHECK(!cases.empty(), "selected split is empty");

  const phantom::PhantomCase* chosen = &cases.front();
  if (!case_id.empty()) {
    chosen = nullptr;
    for (const auto& c : cases) {
      if (c.case_id == case_id) chosen = &c;
    }
    DD_CHECK(chosen != nullptr, "case '" + case_id + "' not found in split " + split_name);
  }

  Tensor pred = read_tensor(fs::path(pred_dir) / ("pred_" + chosen->case_id + ".ddtf"));
  std::vector<metrics::DvhCurve> curves;
  curves.push_back(metrics::dvh(pred, train::case_channel(*chosen, 1), cfg.dvh_bins, "ptv_pred"));
  curves.push_back(metrics::dvh(chosen->y, train::case_channel(*chosen, 1), cfg.dvh_bins, "ptv_gt"));
  for (int i = 0; i < phantom::kOarCount; ++i) {
    const std::string name(phantom::kOarNames[static_cast<std::size_t>(i)]);
    curves.push_back(
        metrics::dvh(pred, train::case_channel(*chosen, 2 + i), cfg.dvh_bins, name + "_pred"));
    curves.push_back(
        metrics::dvh(chosen->y, train::case_channel(*chosen, 2 + i), cfg.dvh_bins, name + "_gt"));
  }
  metrics::write_dvh_csv(out_prefix + ".csv", curves);
  metrics::write_dvh_svg(out_prefix + ".svg", curves, "DVH " + chosen->case_id);
  std::cout << "wrote " << out_prefix << ".csv and " << out_prefix << ".svg\n";
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"dosediff: conditional diffusion dose prediction toolkit"};
  app.require_subcommand(1);

  CommonArgs common;

  auto add_common = [&common](CLI::App* cmd) {
    cmd->add_option("--config", common.config_path, "JSON run configuration");
    cmd->add_option("--data", common.data_dir, "dataset directory");
    cmd->add_option_function<std::uint64_t>(
        "--seed",
        [&common](std::uint64_t v) {
          common.seed_override = v;
          common.seed_set = true;
        },
        "master seed override");
  };

  std::string out, ckpt, compare_dir, split = "test", case_id;
  int cases_override = 0, size_override = 0, beams_override = 0, epochs_override = -1;

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic phantom dataset");
  add_common(gen);
  gen->add_option("--out", out, "output dataset directory")->required();
  gen->add_option("--cases", cases_override, "number of cases");
  gen->add_option("--size", size_override, "image size (multiple of 16)");
  gen->add_option("--beams", beams_override, "beams per case");

  CLI::App* pre = app.add_subcommand("pretrain", "pretrain the structure encoder");
  add_common(pre);
  pre->add_option("--out", out, "output encoder checkpoint")->required();
  pre->add_option("--epochs", epochs_override, "pretraining epochs");

  CLI::App* tr = app.add_subcommand("train", "train the diffusion model");
  add_common(tr);
  tr->add_option("--out", out, "output model checkpoint")->required();
  tr->add_option("--ckpt", ckpt, "initial checkpoint (pretrained encoder or full model)");
  tr->add_option("--epochs", epochs_override, "training epochs");

  CLI::App* sa = app.add_subcommand("sample", "run the reverse chain on a dataset split");
  add_common(sa);
  sa->add_option("--ckpt", ckpt, "model checkpoint")->required();
  sa->add_option("--out", out, "output prediction directory")->required();
  sa->add_option("--split", split, "dataset split (train|val|test)");

  CLI::App* ev = app.add_subcommand("eval", "evaluate predictions into a dose report");
  add_common(ev);
  std::string pred_dir;
  ev->add_option("--pred", pred_dir, "prediction directory")->required();
  ev->add_option("--out", out, "output report CSV")->required();
  ev->add_option("--compare", compare_dir, "second prediction directory for paired t-tests");
  ev->add_option("--split", split, "dataset split (train|val|test)");

  CLI::App* pd = app.add_subcommand("plot-dvh", "export DVH curves as CSV and SVG");
  add_common(pd);
  pd->add_option("--pred", pred_dir, "prediction directory")->required();
  pd->add_option("--out", out, "output file prefix")->required();
  pd->add_option("--case", case_id, "case id (default: first case of the split)");
  pd->add_option("--split", split, "dataset split (train|val|test)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (gen->parsed()) {
      return cmd_gen_data(common, out, cases_override, size_override, beams_override);
    }
    if (pre->parsed()) return cmd_pretrain(common, out, epochs_override);
    if (tr->parsed()) return cmd_train(common, out, ckpt, epochs_override);
    if (sa->parsed()) return cmd_sample(common, ckpt, out, split);
    if (ev->parsed()) return cmd_eval(common, pred_dir, out, compare_dir, split);
    if (pd->parsed()) return cmd_plot_dvh(common, pred_dir, out, case_id, split);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  std::cerr << "error: no subcommand given\n";
  return 1;
}

int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.push_back("dosediff");
  for (const std::string& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace dosediff::io
