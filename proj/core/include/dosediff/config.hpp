#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "dosediff/nets.hpp"

namespace dosediff::io {

// Flat key/value run configuration, serialized as a JSON document. Unknown
// keys are rejected on load. Defaults describe the desk-scale setup;
// configs/full.json scales the same pipeline up (size 256, T=1000, batch 16,
// 1500 epochs, lr 1e-4 dropping to 5e-5 after epoch 1200).
struct RunConfig {
  // Dataset
  int size = 64;
  int cases = 28;
  int n_beams = 9;
  std::array<double, 3> split = {4.0 / 7.0, 1.0 / 7.0, 2.0 / 7.0};  // 16/4/8 at 28 cases

  // Diffusion
  // Conventional (increasing) per-step variance direction; configs/full.json
  // carries the decreasing variant.
  int T = 200;
  double beta_start = 5e-4;
  double beta_end = 5e-2;
  double dose_scale = 2.0;

  // Networks
  std::array<int, 6> widths = {16, 32, 64, 64, 96, 96};
  int temb_dim = 64;
  int groups = 8;

  // Optimization
  int batch_size = 8;
  int epochs = 300;
  double lr = 1e-3;
  int lr_drop_epoch = 240;
  double lr_after_drop = 3e-4;
  int pretrain_epochs = 60;
  double pretrain_lr = 1e-3;
  int early_stop_patience = 0;  // epochs without val improvement; 0 disables
  int ckpt_interval = 100;      // periodic checkpoint cadence in epochs; 0 = final only

  // Reporting
  int dvh_bins = 100;

  // Seeding and paths
  std::uint64_t seed = 20230807;
  std::string data_dir;

  static RunConfig from_json_text(const std::string& text);
  static RunConfig load(const std::string& path);
  std::string to_json_text() const;

  nets::NetConfig net_config() const;
  void validate() const;

  // Canonical string of the architecture- and schedule-relevant fields,
  // hashed into checkpoint digests. `kind` distinguishes encoder-only,
  // diffusion and baseline checkpoints.
  std::string digest_input(std::string_view kind) const;
};

}  // namespace dosediff::io
