#pragma once

// Synthetic analysis records with a known generating process:
//   P(correct) = logistic(a * log1p(RPop_Ge) + b)
//   confidence = clip(P(correct) + overconfidence_bias + noise, 0, 1)

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "popcal/core_model.hpp"

namespace popcal {

struct LogNormal {
  double mu = 0.0;
  double sigma = 1.0;
};

struct SynthConfig {
  std::size_t n_samples = 2000;
  double a = 2.0;
  double b = -1.0;
  double overconfidence_bias = 0.15;
  double noise_sd = 0.2;
  // Noise on the latent "can answer" signal behind Verb.
  double verb_noise_sd = 0.4;
  std::uint64_t seed = 0;

  LogNormal pop_q{3.0, 1.2};
  LogNormal pop_gt{2.5, 1.0};
  LogNormal pop_ge_wrong{3.0, 1.0};  // wrong answers lean towards popular entities
  LogNormal rpop_ge{0.5, 1.5};
  LogNormal rpop_gt_wrong{1.0, 1.5};
  // Correlation of log Pop_Q with the latent RPop_Ge draw.
  double pop_q_link = 0.4;
  // Spread of the self-estimated 1..10 scores around the corpus values.
  double self_noise_sd = 1.0;
  int consistency_samples = 10;

  void validate() const;
  nlohmann::json to_json() const;
  static SynthConfig from_json(const nlohmann::json& j);
};

double logistic(double z);

// Deterministic for a given config. Every record carries Verb, Consis and
// self-estimated popularity alongside the corpus signals.
std::vector<AnalysisRecord> synth_generate(const SynthConfig& cfg);

}  // namespace popcal
