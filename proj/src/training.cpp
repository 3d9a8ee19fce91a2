#include "diffnas/training.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <mutex>
#include <thread>

#include "diffnas/error.hpp"

namespace diffnas::unet {

namespace {

double elapsed_ms(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

constexpr std::uint64_t kTagData = 1, kTagNoise = 2, kTagPath = 3, kTagProbe = 4;

}  // namespace

std::vector<LossLogRow> train_teacher(UNet& net, std::shared_ptr<const Tensor> data,
                                      const diffusion::NoiseSchedule& sched, const TeacherTrainOptions& options) {
  if (net.is_supernet()) throw ContractError("train_teacher needs a fixed network");
  DataStream stream(std::move(data), Rng::derive(options.seed, {kTagData}));
  Rng noise = Rng::derive(options.seed, {kTagNoise});
  ad::Adam adam(options.adam);
  auto params = net.all_parameters();
  const auto model = net.predictor(net.arch());
  std::vector<LossLogRow> log;
  const auto start = std::chrono::steady_clock::now();
  for (int step = 0; step < options.steps; ++step) {
    ad::zero_grads(params);
    ad::Var loss = diffusion::loss_ori(model, stream.next(options.batch_size), noise, sched);
    const double value = loss.value().item();
    if (!std::isfinite(value)) throw NumericError("teacher loss became non-finite at step " + std::to_string(step));
    ad::backward(loss);
    adam.step(params);
    if (options.log_interval > 0 && (step % options.log_interval == 0 || step == options.steps - 1)) {
      log.push_back({step, value, elapsed_ms(start)});
    }
  }
  return log;
}

double mean_candidate_loss(const UNet& supernet, int block, const std::vector<TeacherFeatures>& features) {
  ad::NoGradGuard no_grad;
  const auto archs = enumerate_block_archs(supernet.config().layers(block));
  double total = 0.0;
  for (const BlockArch& a : archs)
    for (const TeacherFeatures& f : features) total += block_distillation_loss(supernet, block, a, f).value().item();
  return total / static_cast<double>(archs.size() * features.size());
}

BlockTrainReport train_supernet_block(UNet& supernet, const UNet& teacher, int block,
                                      std::shared_ptr<const Tensor> data, const diffusion::NoiseSchedule& sched,
                                      const BlockTrainOptions& options) {
  if (!supernet.is_supernet()) throw ContractError("train_supernet_block needs a supernet");
  if (block < 0 || block >= supernet.config().block_count()) throw ContractError("block index out of range");
  const auto b = static_cast<std::uint64_t>(block);
  DataStream stream(data, Rng::derive(options.seed, {kTagData, b}));
  Rng noise = Rng::derive(options.seed, {kTagNoise, b});
  Rng paths = Rng::derive(options.seed, {kTagPath, b});

  std::vector<TeacherFeatures> probe;
  {
    DataStream probe_stream(data, Rng::derive(options.seed, {kTagProbe, b}));
    Rng probe_noise = Rng::derive(options.seed, {kTagProbe, b, kTagNoise});
    for (int i = 0; i < options.probe_batches; ++i)
      probe.push_back(teacher_capture(teacher, probe_stream.next(options.batch_size), probe_noise, sched));
  }

  BlockTrainReport report;
  report.block = block;
  report.probe_before = mean_candidate_loss(supernet, block, probe);

  ad::Adam adam(options.adam);
  auto block_params = supernet.block_parameters(block);
  const auto start = std::chrono::steady_clock::now();
  for (int step = 0; step < options.steps; ++step) {
    TeacherFeatures f = teacher_capture(teacher, stream.next(options.batch_size), noise, sched);
    const BlockArch arch = sample_random_path(supernet.config(), paths).blocks[static_cast<std::size_t>(block)];
    ad::zero_grads(block_params);
    ad::Var loss = block_distillation_loss(supernet, block, arch, f);
    const double value = loss.value().item();
    if (!std::isfinite(value)) {
      throw NumericError("supernet block " + std::to_string(block) + " loss non-finite at step " + std::to_string(step));
    }
    ad::backward(loss);
    auto path = supernet.path_parameters(block, arch);
    adam.step(path);
    if (options.log_interval > 0 && (step % options.log_interval == 0 || step == options.steps - 1)) {
      report.log.push_back({step, value, elapsed_ms(start)});
    }
  }
  ad::zero_grads(block_params);
  report.probe_after = mean_candidate_loss(supernet, block, probe);
  return report;
}

std::vector<BlockTrainReport> train_supernet(UNet& supernet, const UNet& teacher, std::vector<int> blocks,
                                             std::shared_ptr<const Tensor> data,
                                             const diffusion::NoiseSchedule& sched, const BlockTrainOptions& options,
                                             int threads) {
  std::vector<BlockTrainReport> reports(blocks.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < blocks.size(); i = next++) {
      try {
        reports[i] = train_supernet_block(supernet, teacher, blocks[i], data, sched, options);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const int n = std::max(1, std::min<int>(threads, static_cast<int>(blocks.size())));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int i = 0; i < n; ++i) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);
  return reports;
}

}  // namespace diffnas::unet
