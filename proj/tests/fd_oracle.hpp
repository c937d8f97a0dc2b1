#pragma once

// Central finite-difference oracle for model gradients.

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "chaoscast/model.hpp"

namespace chaoscast::testing {

struct FdReport {
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  std::string worst;
  std::map<std::string, std::size_t> per_group;
};

// Tensor name with the "layerN." prefix removed, so all layers of one kind
// form one group.
inline std::string group_of(const std::string& name) {
  if (name.rfind("layer", 0) == 0) return name.substr(name.find('.') + 1);
  return name;
}

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline FdReport fd_check(const ModelParams<double>& params, const Batch<double>& batch, std::size_t per_group,
                         double h, std::uint64_t seed, double floor = 1e-7) {
  const auto analytic = grad(params, batch);
  std::map<std::string, std::vector<std::size_t>> groups;
  for (const auto& t : params.layout->tensors())
    for (std::size_t i = 0; i < t.size(); ++i) groups[group_of(t.name)].push_back(t.offset + i);

  std::mt19937_64 rng(seed);
  FdReport rep;
  ModelParams<double> probe = params;
  auto loss_at = [&](std::size_t idx, double value) {
    probe.values[idx] = value;
    return mse_loss(forward(probe, batch.inputs), batch.targets);
  };
  for (auto& [name, coords] : groups) {
    std::vector<std::size_t> pick = coords;
    if (pick.size() > per_group) {
      std::shuffle(pick.begin(), pick.end(), rng);
      pick.resize(per_group);
    }
    for (std::size_t idx : pick) {
      const double orig = params.values[idx];
      const double numeric = (loss_at(idx, orig + h) - loss_at(idx, orig - h)) / (2.0 * h);
      probe.values[idx] = orig;
      const double err = relative_error(analytic.grads.values[idx], numeric, floor);
      if (err > rep.max_rel_error) {
        rep.max_rel_error = err;
        rep.worst = name + "[" + std::to_string(idx) + "] analytic=" + std::to_string(analytic.grads.values[idx]) +
                    " numeric=" + std::to_string(numeric);
      }
      ++rep.checked;
      ++rep.per_group[name];
    }
  }
  return rep;
}

// Random model with every parameter nudged away from its initial value so
// biases and norm parameters influence the loss.
inline ModelParams<double> jittered_model(const ModelConfig& cfg, std::uint64_t seed, double jitter = 0.05) {
  auto p = init_model<double>(cfg, seed);
  std::mt19937_64 rng(seed ^ 0xA5A5A5A5ULL);
  std::normal_distribution<double> n(0.0, jitter);
  for (double& v : p.values) v += n(rng);
  return p;
}

inline Batch<double> random_batch(std::size_t B, std::size_t T, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Batch<double> b{SequenceTensor<double>(B, T), SequenceTensor<double>(B, T)};
  for (double& v : b.inputs.data) v = n(rng);
  for (double& v : b.targets.data) v = n(rng);
  return b;
}

}  // namespace chaoscast::testing
