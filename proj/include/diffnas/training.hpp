#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "diffnas/data_stream.hpp"
#include "diffnas/diffusion.hpp"
#include "diffnas/unet.hpp"

namespace diffnas::unet {

struct LossLogRow {
  int step = 0;
  double loss = 0.0;
  double wall_ms = 0.0;
};

struct TeacherTrainOptions {
  int steps = 3000;
  int batch_size = 32;
  ad::AdamOptions adam{2e-3f};
  int log_interval = 100;
  std::uint64_t seed = 0;
};

/// Plain noise-prediction training of a fixed network. Throws
/// NumericError if the loss stops being finite.
std::vector<LossLogRow> train_teacher(UNet& net, std::shared_ptr<const Tensor> data,
                                      const diffusion::NoiseSchedule& sched, const TeacherTrainOptions& options);

struct BlockTrainOptions {
  int steps = 800;
  int batch_size = 32;
  ad::AdamOptions adam{2e-3f};
  int log_interval = 100;
  /// Per-block streams derive from (seed, block), so results do not depend
  /// on training order or concurrency.
  std::uint64_t seed = 0;
  /// Batches in the held-out probe set.
  int probe_batches = 1;
};

struct BlockTrainReport {
  int block = 0;
  /// Mean L_train over every candidate path on the probe set.
  double probe_before = 0.0;
  double probe_after = 0.0;
  std::vector<LossLogRow> log;
};

/// Trains block i of the supernet against teacher features with one random
/// kernel path per step. Only parameters on the sampled path of block i are
/// updated.
BlockTrainReport train_supernet_block(UNet& supernet, const UNet& teacher, int block,
                                      std::shared_ptr<const Tensor> data, const diffusion::NoiseSchedule& sched,
                                      const BlockTrainOptions& options);

/// Trains every listed block, `threads` at a time.
std::vector<BlockTrainReport> train_supernet(UNet& supernet, const UNet& teacher, std::vector<int> blocks,
                                             std::shared_ptr<const Tensor> data,
                                             const diffusion::NoiseSchedule& sched, const BlockTrainOptions& options,
                                             int threads = 1);

/// Mean distillation loss over all candidate paths of a block on fixed features.
double mean_candidate_loss(const UNet& supernet, int block, const std::vector<TeacherFeatures>& features);

}  // namespace diffnas::unet
