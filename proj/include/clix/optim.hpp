#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "clix/tensor.hpp"

namespace clix {

// Named parameter set with stable (insertion) ordering, so optimizer state,
// checkpoints, and seeded runs line up deterministically.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor init);
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const;

  size_t count() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  Tensor& at(size_t i) { return tensors_[i]; }
  const Tensor& at(size_t i) const { return tensors_[i]; }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
  std::map<std::string, size_t> index_;
};

struct AdamConfig {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Adam with decoupled weight decay (decay applied to parameters before the
// bias-corrected moment update).
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  // grads[i] pairs with params.at(i). lr_override < 0 uses cfg.lr.
  void step(ParamStore& params, const std::vector<Tensor>& grads, double lr_override = -1.0);

  int64_t step_count() const { return step_count_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  int64_t step_count_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

// Single-tensor convenience used by tests and gradient experiments.
void adam_step(Tensor& param, const Tensor& grad, Tensor& m, Tensor& v, int64_t step,
               const AdamConfig& cfg, double lr_override = -1.0);

// One-cycle schedule: linear ramp from base/start_div to base over
// pct_start of the cycle, then linear anneal to base/final_div.
double one_cycle_lr(int64_t step, int64_t cycle_steps, double base_lr,
                    double pct_start = 0.4, double start_div = 10.0,
                    double final_div = 1000.0);

// f evaluates the scalar loss at x; when grad_out is non-null it must also
// write the analytic gradient there. Returns the max over checked coordinates
// of |analytic - numeric| / max(1, |analytic|, |numeric|). When max_coords > 0
// a seeded random subset of coordinates is checked instead of all of them.
double grad_check(const std::function<double(const Tensor&, Tensor* grad_out)>& f,
                  const Tensor& x, double h = 1e-5, int max_coords = 0,
                  uint64_t seed = 7);

}  // namespace clix
