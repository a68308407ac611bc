#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "reg4rec/numerics/tensor.hpp"
#include "reg4rec/seqmodel/seqmodel.hpp"

namespace reg4rec::ladq {

using numerics::Tensor;
using seqmodel::Layer;

enum class Precision { f32, bf16, fp8 };

std::string to_string(Precision p);
// Accepts "f32", "bf16", "fp8". Throws "invalid-precision".
Precision parse_precision(const std::string& s);

// Round-to-nearest-even emulation of the storage format. f32 is the identity;
// bf16 keeps 8 significant bits (7 stored) with the float32 exponent range;
// fp8 is e4m3 (bias 7, max 448, subnormals, no infinities). Out-of-range
// magnitudes saturate to the format maximum.
double quantize_value(double x, Precision p);
Tensor quantize_sim(const Tensor& t, Precision p);

// Unit roundoff of the normal range: 2^-8 for bf16, 2^-4 for fp8, 0 for f32.
double unit_roundoff(Precision p);
// Smallest positive normal value of the format.
double min_normal(Precision p);
double max_finite(Precision p);

struct LayerSensitivity {
  std::string layer;
  double score = 0.0;    // mean(g^2) * mean(w^2)
  double latency = 0.0;  // parameter-count share; sums to 1 over layers
  std::size_t probed_step = 0;
};

struct ProbeResult {
  std::vector<LayerSensitivity> layers;
  bool zero_gradient = false;  // every layer had an all-zero gradient
};

// Scores layers from the gradients already accumulated in their parameters.
ProbeResult score_layers(std::span<const Layer> layers, std::size_t step);

// Runs one forward/backward pass of the pretraining loss on `batch`, scores
// every layer, then clears the gradients. Throws "empty-model".
ProbeResult probe_sensitivity(seqmodel::SeqModel& model, std::span<const seqmodel::Example* const> batch,
                              double lambda_c, std::size_t step = 0);

struct CostFactors {
  double f32 = 1.0;
  double bf16 = 0.6;
  double fp8 = 0.4;

  double of(Precision p) const;
};

struct PrecisionPlan {
  std::map<std::string, Precision> tags;
  double est_cost = 1.0;     // fraction of all-f32 cost
  double est_speedup = 1.0;  // 1 / est_cost
  bool budget_unmet = false;
};

// Estimated cost of `plan` relative to full precision.
double plan_cost(std::span<const LayerSensitivity> sens, const std::map<std::string, Precision>& tags,
                 const CostFactors& factors);

// Greedy: layers in ascending score/latency order (ties by name) are moved
// f32 -> bf16 -> fp8 one at a time until the estimated cost is within budget.
// Throws "invalid-budget" outside (0, 1] and "invalid-layers" for an empty
// list or latencies that do not sum to 1.
PrecisionPlan assign_precision(std::span<const LayerSensitivity> sens, double budget,
                               const CostFactors& factors = {});

// Replaces each planned layer's parameter values with their quantized copies
// and restores the originals on destruction or restore().
class ScopedPrecision {
 public:
  ScopedPrecision(std::span<const Layer> layers, const PrecisionPlan& plan);
  ~ScopedPrecision();
  ScopedPrecision(const ScopedPrecision&) = delete;
  ScopedPrecision& operator=(const ScopedPrecision&) = delete;

  void restore();

 private:
  std::vector<std::pair<numerics::Parameter*, Tensor>> saved_;
};

struct LadqConfig {
  bool enabled = false;
  double budget = 0.7;
  std::size_t period = 200;  // steps between re-probes
  CostFactors factors;
  // When set, every step uses this plan and probing is skipped.
  std::map<std::string, Precision> fixed_plan;

  void validate() const;
};

void to_json(nlohmann::json& j, const LadqConfig& c);
void from_json(const nlohmann::json& j, LadqConfig& c);

// Re-probes every `period` steps and keeps the current plan. The plan only
// changes inside on_step, between optimizer steps.
class Controller {
 public:
  explicit Controller(LadqConfig cfg, const std::filesystem::path& plan_log = {});

  // Called before each training step; returns the plan to apply.
  const PrecisionPlan& on_step(seqmodel::SeqModel& model, std::size_t step,
                               std::span<const seqmodel::Example* const> batch, double lambda_c);

  const PrecisionPlan& plan() const { return plan_; }
  std::size_t probes() const { return probes_; }

 private:
  void log(std::size_t step);

  LadqConfig cfg_;
  PrecisionPlan plan_;
  std::ofstream log_;
  std::size_t probes_ = 0;
  bool zero_gradient_ = false;
};

// Pretraining with emulated mixed precision: each step runs forward and
// backward on quantized weights and applies the update to the full-precision
// master copy.
seqmodel::PretrainResult pretrain_with_ladq(std::span<const seqmodel::Example> examples,
                                            const seqmodel::SeqConfig& cfg, Controller& controller,
                                            const seqmodel::SeqModel* init = nullptr);

}  // namespace reg4rec::ladq
