#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tfformer/model.hpp"

namespace tfformer {

/// |a - n| / max(|a|, |n|, floor). The floor keeps exact zeros (unreachable
/// elements) from dividing by zero.
double relative_error(double analytic, double numeric, double floor = 1e-6);

struct GradcheckSample {
  std::string tensor;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

/// Compares backward() against central differences on `samples` randomly
/// chosen elements of `wrt` (leaves). `loss` must rebuild the graph on each
/// call and be a deterministic function of the leaves.
std::vector<GradcheckSample> check_gradients(const std::function<Tensor()>& loss,
                                             const std::vector<NamedTensor>& wrt, std::size_t samples,
                                             Rng& rng, double step = 1e-4);

struct BlockCheck {
  std::string block;
  double max_rel_error = 0.0;
  std::size_t samples = 0;
  bool passed = false;
  std::string worst_tensor;
};

struct GradcheckOptions {
  std::uint64_t seed = 0;
  std::size_t image_size = 8;
  std::size_t samples_per_block = 16;
  std::size_t model_samples = 24;
  double step = 1e-4;
  double tolerance = 1e-4;
};

struct GradcheckReport {
  std::vector<BlockCheck> blocks;
  bool passed() const;
};

/// Finite-difference verification of every block of the network plus the
/// loss and the full model on a 3 x size x size input.
GradcheckReport run_gradcheck(const ModelConfig& config, const GradcheckOptions& options = {});

}  // namespace tfformer
