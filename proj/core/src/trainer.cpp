#include "dosediff/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "dosediff/checkpoint.hpp"
#include "dosediff/tensor_io.hpp"

namespace dosediff::train {

namespace {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

std::vector<Tensor> normalized_doses(const std::vector<phantom::PhantomCase>& cases,
                                     const diffusion::DoseNormalizer& norm) {
  std::vector<Tensor> out;
  out.reserve(cases.size());
  for (const auto& c : cases) out.push_back(norm.to_model(c.y));
  return out;
}

std::vector<Tensor> structure_images(const std::vector<phantom::PhantomCase>& cases) {
  std::vector<Tensor> out;
  out.reserve(cases.size());
  for (const auto& c : cases) out.push_back(c.x);
  return out;
}

float diffusion_eval_loss(const nets::DiffusionModel& model,
                          const std::vector<Tensor>& xs, const std::vector<Tensor>& ys,
                          const diffusion::NoiseSchedule& sched, Rng& rng) {
  double total = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    Tensor x = stack(std::span<const Tensor>(&xs[i], 1));
    Tensor y0 = stack(std::span<const Tensor>(&ys[i], 1));
    Tensor eps = Tensor::zeros(y0.shape());
    rng.fill_normal(eps.mutable_data());
    const int t = rng.uniform_int(1, sched.T);
    Tensor y_t = diffusion::forward_sample(y0, t, eps, sched);
    const std::vector<float> gamma = {static_cast<float>(sched.gamma_at(t))};
    Tensor eps_hat = model.predict(model.encode(x), y_t, gamma);
    total += mean_abs_difference(eps_hat, eps);
  }
  return static_cast<float>(total / static_cast<double>(xs.size()));
}

}  // namespace

void write_case(const fs::path& case_dir, const phantom::PhantomCase& c) {
  fs::create_directories(case_dir);
  io::write_tensor(case_dir / "x.ddtf", c.x);
  io::write_tensor(case_dir / "y.ddtf", c.y);
  ordered_json meta;
  meta["case_id"] = c.case_id;
  meta["seed"] = c.seed;
  meta["size"] = c.size;
  ordered_json beams = ordered_json::array();
  for (const auto& b : c.beams) {
    ordered_json jb;
    jb["angle"] = b.angle;
    jb["width"] = b.width;
    jb["attenuation_mu"] = b.attenuation_mu;
    jb["weight"] = b.weight;
    beams.push_back(jb);
  }
  meta["beams"] = beams;
  std::ofstream out(case_dir / "meta.json", std::ios::binary);
  if (!out.good()) {
    throw IoError(IoError::Kind::OpenFailed,
                  "cannot open " + (case_dir / "meta.json").string() + " for writing");
  }
  out << meta.dump(2) << "\n";
}

phantom::PhantomCase read_case(const fs::path& case_dir) {
  phantom::PhantomCase c;
  c.x = io::read_tensor(case_dir / "x.ddtf");
  c.y = io::read_tensor(case_dir / "y.ddtf");
  std::ifstream in(case_dir / "meta.json", std::ios::binary);
  if (!in.good()) {
    throw IoError(IoError::Kind::OpenFailed, "cannot open " + (case_dir / "meta.json").string());
  }
  ordered_json meta;
  try {
    in >> meta;
    c.case_id = meta.at("case_id").get<std::string>();
    c.seed = meta.at("seed").get<std::uint64_t>();
    c.size = meta.at("size").get<int>();
    for (const auto& jb : meta.at("beams")) {
      phantom::BeamSpec b;
      b.angle = jb.at("angle").get<double>();
      b.width = jb.at("width").get<double>();
      b.attenuation_mu = jb.at("attenuation_mu").get<double>();
      b.weight = jb.at("weight").get<double>();
      c.beams.push_back(b);
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(IoError::Kind::Malformed,
                  "malformed meta.json in " + case_dir.string() + ": " + e.what());
  }
  DD_CHECK(c.x.rank() == 3 && c.y.rank() == 3, "case tensors must be [C,H,W]");
  return c;
}

std::vector<phantom::PhantomCase> load_dataset(const fs::path& data_dir) {
  DD_CHECK(fs::is_directory(data_dir), "dataset directory does not exist: " + data_dir.string());
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(data_dir)) {
    if (entry.is_directory() && fs::exists(entry.path() / "x.ddtf")) {
      dirs.push_back(entry.path());
    }
  }
  std::sort(dirs.begin(), dirs.end());
  DD_CHECK(!dirs.empty(), "no cases found in " + data_dir.string());
  std::vector<phantom::PhantomCase> cases;
  cases.reserve(dirs.size());
  for (const auto& d : dirs) cases.push_back(read_case(d));
  return cases;
}

std::array<std::vector<phantom::PhantomCase>, 3> split_by_config(
    std::vector<phantom::PhantomCase> cases, const io::RunConfig& cfg) {
  return phantom::split_dataset(std::move(cases), cfg.split, cfg.seed);
}

Tensor case_channel(const phantom::PhantomCase& c, int channel) {
  DD_CHECK(c.x.defined() && channel >= 0 && channel < c.x.dim(0),
           "case_channel: channel out of range");
  const int h = c.x.dim(1), w = c.x.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<float> values(c.x.data().begin() + static_cast<std::ptrdiff_t>(channel * plane),
                            c.x.data().begin() + static_cast<std::ptrdiff_t>((channel + 1) * plane));
  return Tensor::from_data({1, h, w}, std::move(values));
}

TrainResult train_diffusion(nets::DiffusionModel& model,
                            const std::vector<phantom::PhantomCase>& train_cases,
                            const std::vector<phantom::PhantomCase>& val_cases,
                            const io::RunConfig& cfg, const std::function<void(int)>& on_epoch) {
  DD_CHECK(!train_cases.empty(), "train_diffusion: empty training set");
  const diffusion::NoiseSchedule sched =
      diffusion::build_schedule(cfg.T, cfg.beta_start, cfg.beta_end);
  const diffusion::DoseNormalizer norm{static_cast<float>(cfg.dose_scale)};

  std::vector<Tensor> xs = structure_images(train_cases);
  std::vector<Tensor> ys = normalized_doses(train_cases, norm);
  std::vector<Tensor> val_xs = structure_images(val_cases);
  std::vector<Tensor> val_ys = normalized_doses(val_cases, norm);

  Adam opt(model.parameters(), AdamConfig{.lr = static_cast<float>(cfg.lr)});
  Rng rng = Rng::stream(cfg.seed, "train-diffusion");

  TrainResult result;
  const int n = static_cast<int>(train_cases.size());
  const int batch = std::max(1, std::min(cfg.batch_size, n));
  std::vector<std::size_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), std::size_t{0});

  float best_val = std::numeric_limits<float>::infinity();
  int since_best = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.set_lr(static_cast<float>(epoch >= cfg.lr_drop_epoch ? cfg.lr_after_drop : cfg.lr));
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[rng.next_u64() % i]);
    }
    for (int start = 0; start < n; start += batch) {
      const int count = std::min(batch, n - start);
      std::vector<Tensor> bx, by;
      bx.reserve(static_cast<std::size_t>(count));
      by.reserve(static_cast<std::size_t>(count));
      for (int j = 0; j < count; ++j) {
        bx.push_back(xs[order[static_cast<std::size_t>(start + j)]]);
        by.push_back(ys[order[static_cast<std::size_t>(start + j)]]);
      }
      Tensor x = stack(bx);
      Tensor y0 = stack(by);
      result.step_loss.push_back(diffusion::training_step(x, y0, model, sched, opt, rng));
    }
    result.epochs_run = epoch + 1;

    if (!val_cases.empty()) {
      Rng val_rng = Rng::stream(cfg.seed + static_cast<std::uint64_t>(epoch), "val-diffusion");
      const float vl = diffusion_eval_loss(model, val_xs, val_ys, sched, val_rng);
      result.val_loss.push_back(vl);
      if (vl < best_val - 1e-6f) {
        best_val = vl;
        since_best = 0;
      } else {
        ++since_best;
      }
    }
    if (on_epoch) on_epoch(epoch);
    if (cfg.early_stop_patience > 0 && since_best >= cfg.early_stop_patience) break;
  }
  return result;
}

TrainResult train_baseline(nets::BaselineUNet& model,
                           const std::vector<phantom::PhantomCase>& train_cases,
                           const io::RunConfig& cfg) {
  DD_CHECK(!train_cases.empty(), "train_baseline: empty training set");
  const diffusion::DoseNormalizer norm{static_cast<float>(cfg.dose_scale)};
  std::vector<Tensor> xs = structure_images(train_cases);
  std::vector<Tensor> ys = normalized_doses(train_cases, norm);

  Adam opt(model.parameters(), AdamConfig{.lr = static_cast<float>(cfg.lr)});
  Rng rng = Rng::stream(cfg.seed, "train-baseline");

  TrainResult result;
  const int n = static_cast<int>(train_cases.size());
  const int batch = std::max(1, std::min(cfg.batch_size, n));
  std::vector<std::size_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.set_lr(static_cast<float>(epoch >= cfg.lr_drop_epoch ? cfg.lr_after_drop : cfg.lr));
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[rng.next_u64() % i]);
    }
    for (int start = 0; start < n; start += batch) {
      const int count = std::min(batch, n - start);
      std::vector<Tensor> bx, by;
      for (int j = 0; j < count; ++j) {
        bx.push_back(xs[order[static_cast<std::size_t>(start + j)]]);
        by.push_back(ys[order[static_cast<std::size_t>(start + j)]]);
      }
      Tensor x = stack(bx);
      Tensor y = stack(by);
      GradientTape tape;
      Tensor loss = mean_abs_error(model.forward(x), y);
      const float lv = loss.item();
      if (!std::isfinite(lv)) {
        throw DivergenceError("train_baseline: non-finite loss — training diverged");
      }
      tape.backward(loss);
      opt.step();
      result.step_loss.push_back(lv);
    }
    result.epochs_run = epoch + 1;
  }
  return result;
}

Tensor predict_dose_diffusion(const nets::DiffusionModel& model, const Tensor& x_batch,
                              const io::RunConfig& cfg, Rng& rng) {
  const diffusion::NoiseSchedule sched =
      diffusion::build_schedule(cfg.T, cfg.beta_start, cfg.beta_end);
  const diffusion::DoseNormalizer norm{static_cast<float>(cfg.dose_scale)};
  Tensor y = diffusion::sample(x_batch, model, sched, rng);
  return norm.to_dose(y);
}

Tensor predict_dose_baseline(const nets::BaselineUNet& model, const Tensor& x_batch,
                             const io::RunConfig& cfg) {
  const diffusion::DoseNormalizer norm{static_cast<float>(cfg.dose_scale)};
  return norm.to_dose(model.forward(x_batch));
}

void save_encoder_checkpoint(const fs::path& path, const nets::StructureEncoder& encoder,
                             const io::RunConfig& cfg) {
  nets::ParamRegistry reg;
  encoder.register_params(reg, "g");
  io::save_checkpoint(path, io::checkpoint_from_params(reg, io::config_digest(cfg, "encoder")));
}

void save_diffusion_checkpoint(const fs::path& path, const nets::DiffusionModel& model,
                               const io::RunConfig& cfg) {
  io::save_checkpoint(path, io::checkpoint_from_params(model.named_params(),
                                                       io::config_digest(cfg, "diffusion")));
}

void save_baseline_checkpoint(const fs::path& path, const nets::BaselineUNet& model,
                              const io::RunConfig& cfg) {
  io::save_checkpoint(path, io::checkpoint_from_params(model.named_params(),
                                                       io::config_digest(cfg, "baseline")));
}

nets::DiffusionModel load_diffusion_checkpoint(const fs::path& path, const io::RunConfig& cfg) {
  nets::DiffusionModel model(cfg.net_config(), cfg.seed);
  io::Checkpoint ckpt = io::load_checkpoint(path);
  io::load_params_from_checkpoint(ckpt, model.named_params(), io::config_digest(cfg, "diffusion"));
  return model;
}

nets::BaselineUNet load_baseline_checkpoint(const fs::path& path, const io::RunConfig& cfg) {
  nets::BaselineUNet model(cfg.net_config(), cfg.seed);
  io::Checkpoint ckpt = io::load_checkpoint(path);
  io::load_params_from_checkpoint(ckpt, model.named_params(), io::config_digest(cfg, "baseline"));
  return model;
}

nets::DiffusionModel make_diffusion_model(const io::RunConfig& cfg, const fs::path& init_ckpt) {
  nets::DiffusionModel model(cfg.net_config(), cfg.seed);
  if (init_ckpt.empty()) return model;

  io::Checkpoint ckpt = io::load_checkpoint(init_ckpt);
  if (ckpt.digest == io::config_digest(cfg, "diffusion")) {
    io::load_params_from_checkpoint(ckpt, model.named_params(),
                                    io::config_digest(cfg, "diffusion"));
  } else {
    // Encoder-only checkpoint: initialize g and keep the fresh predictor.
    nets::ParamRegistry reg;
    model.encoder().register_params(reg, "g");
    io::load_params_from_checkpoint(ckpt, reg, io::config_digest(cfg, "encoder"));
  }
  return model;
}

std::vector<metrics::EvalCase> make_eval_cases(const std::vector<phantom::PhantomCase>& cases,
                                               const fs::path& pred_dir) {
  std::vector<metrics::EvalCase> out;
  for (const auto& c : cases) {
    metrics::EvalCase e;
    e.id = c.case_id;
    const fs::path pred_path = pred_dir / ("pred_" + c.case_id + ".ddtf");
    e.pred = io::read_tensor(pred_path);
    e.gt = c.y;
    e.ptv = case_channel(c, 1);
    for (int i = 0; i < phantom::kOarCount; ++i) {
      e.oars.push_back(case_channel(c, 2 + i));
      e.oar_names.emplace_back(phantom::kOarNames[static_cast<std::size_t>(i)]);
    }
    out.push_back(std::move(e));
  }
  return out;
}

double mean_abs_difference(const Tensor& a, const Tensor& b) {
  DD_CHECK(a.shape() == b.shape(), "mean_abs_difference: shape mismatch");
  double acc = 0.0;
  const float* pa = a.data().data();
  const float* pb = b.data().data();
  const std::size_t n = a.data().size();
  for (std::size_t i = 0; i < n; ++i) acc += std::abs(static_cast<double>(pa[i]) - pb[i]);
  return acc / static_cast<double>(n);
}

}  // namespace dosediff::train
