#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "tfformer/data.hpp"
#include "tfformer/model.hpp"

namespace tfformer {

/// D_LC: mean over the N pixels of |L_gt - L_pred| + sum_k |C_gt,k - C_pred,k|.
Tensor lcc_distance(const Tensor& gt, const Tensor& pred);
/// Mean absolute error over all samples.
Tensor l1_loss(const Tensor& gt, const Tensor& pred);
/// lambda_R * (L_R + L_LC) with L_R = l1(gt, rec) + l1(gt, ref) and
/// L_LC = D_LC(gt, rec) + D_LC(gt, ref).
Tensor total_loss(const Tensor& gt, const Tensor& reconstructed, const Tensor& refined, double lambda_r = 0.2);

/// Reduce-on-plateau memory for a maximized metric. The first observation
/// sets the baseline; each later call that fails to beat the best by
/// `threshold` counts as bad, and `patience` bad calls in a row scale lr.
struct PlateauScheduler {
  double factor = 0.5;
  std::size_t patience = 5;
  double threshold = 1e-4;
  double min_lr = 1e-6;
  bool has_best = false;
  double best = 0.0;
  std::size_t bad_calls = 0;
};

struct AdamMoments {
  std::vector<double> m;
  std::vector<double> v;
};

/// Optimizer and schedule state for one training run.
struct TrainState {
  std::uint64_t step = 0;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  double lambda_r = 0.2;
  std::map<std::string, AdamMoments> moments;
  PlateauScheduler scheduler;
  // Batch sampler position, so resumed runs draw the same batches.
  std::uint64_t sampler_epoch = 0;
  std::uint64_t sampler_pos = 0;
  std::uint64_t sampler_rng = 0;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bias-corrected Adam update of every parameter with state.lr, then zeroes
/// the grads. A non-finite gradient aborts before any parameter changes.
void adam_step(TrainState& state, const std::vector<NamedTensor>& params);

/// Feeds one validation metric (higher is better) and returns the new lr.
double plateau_step(TrainState& state, double metric);

struct TrainConfig {
  std::uint64_t seed = 7;
  std::size_t steps = 2000;
  std::size_t batch = 4;
  std::size_t patch = 32;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double lambda_r = 0.2;
  std::size_t validate_every = 100;
  std::size_t checkpoint_every = 500;
  std::size_t scheduler_start = 800;  // first step at which the scheduler acts
  double plateau_factor = 0.5;
  std::size_t plateau_patience = 5;
  double min_lr = 1e-6;
};

struct MetricRecord {
  std::uint64_t step = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_psnr = 0.0;
};

struct TrainHooks {
  std::function<void(std::uint64_t step, double loss)> on_step;
  std::function<void(const MetricRecord&)> on_validation;
  std::function<void(const TrainState&)> on_checkpoint;
};

struct TrainResult {
  TrainState state;
  std::vector<double> losses;  // one per step run in this call
  std::vector<MetricRecord> log;
};

TrainState initial_state(const TrainConfig& cfg);

/// Runs steps state.step+1 .. cfg.steps of sample -> forward -> loss ->
/// backward -> Adam. Validation PSNR (eval mode, peak 1) is computed every
/// validate_every steps and at the last step; checkpoints fire every
/// checkpoint_every steps and at the last step.
TrainResult train(TfFormerModel& model, const std::vector<PairRecord>& train_set,
                  const std::vector<PairRecord>& val_set, const TrainConfig& cfg, TrainState state,
                  const TrainHooks& hooks = {});

/// Mean PSNR of the refined output over `pairs`, eval mode.
double validation_psnr(TfFormerModel& model, const std::vector<PairRecord>& pairs);

inline constexpr const char* kTrainStateMagic = "TFS1";
void save_train_state(const TrainState& state, const std::filesystem::path& path);
TrainState load_train_state(const std::filesystem::path& path);

}  // namespace tfformer
