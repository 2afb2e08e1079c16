#pragma once

#include <filesystem>
#include <functional>
#include <vector>

#include "dosediff/config.hpp"
#include "dosediff/diffusion.hpp"
#include "dosediff/metrics.hpp"
#include "dosediff/nets.hpp"
#include "dosediff/phantom.hpp"

namespace dosediff::train {

// Dataset directory layout: one subdirectory per case holding x.ddtf, y.ddtf
// and meta.json. Cases load in lexicographic directory order.
void write_case(const std::filesystem::path& case_dir, const phantom::PhantomCase& c);
phantom::PhantomCase read_case(const std::filesystem::path& case_dir);
std::vector<phantom::PhantomCase> load_dataset(const std::filesystem::path& data_dir);

// Deterministic train/val/test split of a loaded dataset per the config.
std::array<std::vector<phantom::PhantomCase>, 3> split_by_config(
    std::vector<phantom::PhantomCase> cases, const io::RunConfig& cfg);

// Extracts one channel of a case's structure image as a [1,H,W] mask/map.
Tensor case_channel(const phantom::PhantomCase& c, int channel);

struct TrainResult {
  std::vector<float> step_loss;  // one entry per optimization step
  std::vector<float> val_loss;   // one entry per epoch when a val set is given
  int epochs_run = 0;
};

// Noise-prediction training loop (bounded by cfg.epochs, with optional
// early stopping on a validation-loss plateau).
TrainResult train_diffusion(nets::DiffusionModel& model,
                            const std::vector<phantom::PhantomCase>& train_cases,
                            const std::vector<phantom::PhantomCase>& val_cases,
                            const io::RunConfig& cfg,
                            const std::function<void(int)>& on_epoch = {});

// L1 regression training loop for the baseline UNet.
TrainResult train_baseline(nets::BaselineUNet& model,
                           const std::vector<phantom::PhantomCase>& train_cases,
                           const io::RunConfig& cfg);

// Runs the full reverse chain on a batch of structure images and returns
// dose-unit predictions (denormalized and clamped to [0, dose_scale]).
Tensor predict_dose_diffusion(const nets::DiffusionModel& model, const Tensor& x_batch,
                              const io::RunConfig& cfg, Rng& rng);
Tensor predict_dose_baseline(const nets::BaselineUNet& model, const Tensor& x_batch,
                             const io::RunConfig& cfg);

// Checkpoint glue (digest kinds: "encoder", "diffusion", "baseline").
void save_encoder_checkpoint(const std::filesystem::path& path,
                             const nets::StructureEncoder& encoder, const io::RunConfig& cfg);
void save_diffusion_checkpoint(const std::filesystem::path& path,
                               const nets::DiffusionModel& model, const io::RunConfig& cfg);
void save_baseline_checkpoint(const std::filesystem::path& path,
                              const nets::BaselineUNet& model, const io::RunConfig& cfg);
nets::DiffusionModel load_diffusion_checkpoint(const std::filesystem::path& path,
                                               const io::RunConfig& cfg);
nets::BaselineUNet load_baseline_checkpoint(const std::filesystem::path& path,
                                            const io::RunConfig& cfg);
// Initializes a diffusion model and, when init_ckpt is non-empty, loads
// either a full diffusion checkpoint or an encoder-only checkpoint into it.
nets::DiffusionModel make_diffusion_model(const io::RunConfig& cfg,
                                          const std::filesystem::path& init_ckpt = {});

// Builds evaluation inputs by pairing ground-truth cases with predicted dose
// tensors (pred_<case_id>.ddtf files in pred_dir).
std::vector<metrics::EvalCase> make_eval_cases(
    const std::vector<phantom::PhantomCase>& cases, const std::filesystem::path& pred_dir);

double mean_abs_difference(const Tensor& a, const Tensor& b);

}  // namespace dosediff::train
