#pragma once

#include <map>
#include <random>
#include <string>
#include <vector>

#include "s2s/tensor.hpp"

namespace s2s {

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool has_grad = false;
};

/// Named trainable tensors in insertion order. Names are unique and shapes are
/// fixed once added.
template <class T>
class ParamSet {
 public:
  Parameter<T>& add(const std::string& name, Shape shape) {
    if (index_.contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    index_.emplace(name, params_.size());
    Tensor<T> zeros(shape);
    params_.push_back(Parameter<T>{name, Tensor<T>(shape), std::move(zeros), false});
    return params_.back();
  }

  Parameter<T>& operator[](const std::string& name) { return params_.at(lookup(name)); }
  const Parameter<T>& operator[](const std::string& name) const { return params_.at(lookup(name)); }
  bool contains(const std::string& name) const { return index_.contains(name); }

  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) {
      p.grad.fill(T{0});
      p.has_grad = false;
    }
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
  }

  std::vector<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

/// He-normal initialization for a (out, in, k, k) kernel.
template <class T>
void he_normal_init(Tensor<T>& kernel, std::mt19937_64& rng, double gain = 1.0) {
  const double fan_in = static_cast<double>(kernel.size() / kernel.dim(0));
  std::normal_distribution<double> dist(0.0, gain * std::sqrt(2.0 / fan_in));
  for (auto& v : kernel.values()) v = static_cast<T>(dist(rng));
}

}  // namespace s2s
