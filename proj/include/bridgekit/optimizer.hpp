#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "bridgekit/tensor.hpp"

namespace bridgekit::ad {

enum class OptKind { Adam, AdamW };

// Adam / AdamW over a fixed list of named parameters. AdamW applies decoupled
// weight decay; plain Adam folds weight decay into the gradient (L2).
template <typename S>
class Optimizer {
 public:
  struct Hyper {
    OptKind kind = OptKind::Adam;
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  Optimizer() = default;
  explicit Optimizer(Hyper hyper) : hyper_(hyper) {}

  void add_param(const std::string& name, const Tensor<S>& p) {
    names_.push_back(name);
    params_.push_back(p);
    moments_m_.push_back(ArrayX<S>::Zero(p.size()));
    moments_v_.push_back(ArrayX<S>::Zero(p.size()));
  }

  void add_params(const std::vector<std::pair<std::string, Tensor<S>>>& named) {
    for (const auto& [name, p] : named) add_param(name, p);
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    ++step_count_;
    const double bc1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(step_count_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<S>& p = params_[i];
      if (!p.requires_grad() || p.grad().size() != p.size())
        throw std::invalid_argument("optimizer step: parameter '" + names_[i] + "' has no gradient");
      ArrayX<S> g = p.grad();
      if (hyper_.kind == OptKind::Adam && hyper_.weight_decay != 0.0)
        g += static_cast<S>(hyper_.weight_decay) * p.array();
      auto& m = moments_m_[i];
      auto& v = moments_v_[i];
      m = static_cast<S>(hyper_.beta1) * m + static_cast<S>(1.0 - hyper_.beta1) * g;
      v = static_cast<S>(hyper_.beta2) * v + static_cast<S>(1.0 - hyper_.beta2) * g.square();
      ArrayX<S> mhat = m / static_cast<S>(bc1);
      ArrayX<S> vhat = v / static_cast<S>(bc2);
      if (hyper_.kind == OptKind::AdamW && hyper_.weight_decay != 0.0)
        p.array() -= static_cast<S>(hyper_.lr * hyper_.weight_decay) * p.array();
      p.array() -= static_cast<S>(hyper_.lr) * (mhat / (vhat.sqrt() + static_cast<S>(hyper_.eps)));
    }
  }

  std::int64_t step_count() const { return step_count_; }
  void set_step_count(std::int64_t s) { step_count_ = s; }
  const Hyper& hyper() const { return hyper_; }
  std::size_t param_count() const { return params_.size(); }

  // Moment buffers as named tensors, for exact training resume.
  std::vector<std::pair<std::string, std::vector<float>>> export_state() const {
    std::vector<std::pair<std::string, std::vector<float>>> out;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      std::vector<float> m(moments_m_[i].size()), v(moments_v_[i].size());
      for (Eigen::Index j = 0; j < moments_m_[i].size(); ++j) m[static_cast<std::size_t>(j)] = static_cast<float>(moments_m_[i][j]);
      for (Eigen::Index j = 0; j < moments_v_[i].size(); ++j) v[static_cast<std::size_t>(j)] = static_cast<float>(moments_v_[i][j]);
      out.emplace_back("opt/m/" + names_[i], std::move(m));
      out.emplace_back("opt/v/" + names_[i], std::move(v));
    }
    return out;
  }

  bool import_state_entry(const std::string& name, const std::vector<float>& data) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (name == "opt/m/" + names_[i] || name == "opt/v/" + names_[i]) {
        auto& buf = (name[4] == 'm') ? moments_m_[i] : moments_v_[i];
        if (static_cast<std::int64_t>(data.size()) != buf.size())
          throw std::invalid_argument("optimizer state size mismatch for " + name);
        for (std::size_t j = 0; j < data.size(); ++j) buf[static_cast<Eigen::Index>(j)] = static_cast<S>(data[j]);
        return true;
      }
    }
    return false;
  }

 private:
  Hyper hyper_;
  std::vector<std::string> names_;
  std::vector<Tensor<S>> params_;
  std::vector<ArrayX<S>> moments_m_;
  std::vector<ArrayX<S>> moments_v_;
  std::int64_t step_count_ = 0;
};

template <typename S>
void optimizer_step(Optimizer<S>& opt) {
  opt.step();
}

}  // namespace bridgekit::ad
