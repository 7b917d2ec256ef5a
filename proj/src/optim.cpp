#include "clix/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "clix/rng.hpp"

namespace clix {

Tensor& ParamStore::add(const std::string& name, Tensor init) {
  if (index_.count(name)) throw std::invalid_argument("ParamStore: duplicate name " + name);
  index_[name] = tensors_.size();
  names_.push_back(name);
  tensors_.push_back(std::move(init));
  return tensors_.back();
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("ParamStore: unknown name " + name);
  return tensors_[it->second];
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("ParamStore: unknown name " + name);
  return tensors_[it->second];
}

bool ParamStore::has(const std::string& name) const { return index_.count(name) > 0; }

void adam_step(Tensor& param, const Tensor& grad, Tensor& m, Tensor& v, int64_t step,
               const AdamConfig& cfg, double lr_override) {
  if (!param.same_shape(grad) || !param.same_shape(m) || !param.same_shape(v))
    throw std::invalid_argument("adam_step: shape mismatch");
  const double lr = lr_override >= 0 ? lr_override : cfg.lr;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (size_t i = 0; i < param.data.size(); ++i) {
    if (cfg.weight_decay != 0.0) param.data[i] -= lr * cfg.weight_decay * param.data[i];
    const double g = grad.data[i];
    m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * g;
    v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * g * g;
    const double mhat = m.data[i] / bc1;
    const double vhat = v.data[i] / bc2;
    param.data[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

void Adam::step(ParamStore& params, const std::vector<Tensor>& grads, double lr_override) {
  if (grads.size() != params.count())
    throw std::invalid_argument("Adam::step: gradient count mismatch");
  if (m_.empty()) {
    m_.reserve(params.count());
    v_.reserve(params.count());
    for (size_t i = 0; i < params.count(); ++i) {
      m_.push_back(Tensor::zeros(params.at(i).shape));
      v_.push_back(Tensor::zeros(params.at(i).shape));
    }
  }
  ++step_count_;
  for (size_t i = 0; i < params.count(); ++i)
    adam_step(params.at(i), grads[i], m_[i], v_[i], step_count_, cfg_, lr_override);
}

double one_cycle_lr(int64_t step, int64_t cycle_steps, double base_lr, double pct_start,
                    double start_div, double final_div) {
  if (cycle_steps <= 1) return base_lr;
  const double t = std::clamp(static_cast<double>(step) / static_cast<double>(cycle_steps - 1),
                              0.0, 1.0);
  const double lo = base_lr / start_div;
  const double end = base_lr / final_div;
  if (t < pct_start) return lo + (base_lr - lo) * (t / pct_start);
  return base_lr + (end - base_lr) * ((t - pct_start) / (1.0 - pct_start));
}

double grad_check(const std::function<double(const Tensor&, Tensor*)>& f, const Tensor& x,
                  double h, int max_coords, uint64_t seed) {
  Tensor analytic = Tensor::zeros(x.shape);
  const double f0 = f(x, &analytic);
  if (!std::isfinite(f0)) throw std::runtime_error("grad_check: non-finite function value");

  std::vector<int64_t> coords(static_cast<size_t>(x.numel()));
  std::iota(coords.begin(), coords.end(), 0);
  if (max_coords > 0 && max_coords < static_cast<int>(coords.size())) {
    Rng rng(seed);
    rng.shuffle(coords);
    coords.resize(static_cast<size_t>(max_coords));
  }

  double worst = 0.0;
  Tensor xp = x;
  for (int64_t c : coords) {
    const double orig = xp.data[static_cast<size_t>(c)];
    xp.data[static_cast<size_t>(c)] = orig + h;
    const double fp = f(xp, nullptr);
    xp.data[static_cast<size_t>(c)] = orig - h;
    const double fm = f(xp, nullptr);
    xp.data[static_cast<size_t>(c)] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw std::runtime_error("grad_check: non-finite function value");
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic.data[static_cast<size_t>(c)];
    const double err = std::fabs(a - numeric) / std::max({1.0, std::fabs(a), std::fabs(numeric)});
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace clix
