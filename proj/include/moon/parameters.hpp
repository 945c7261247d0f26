#pragma once

#include "moon/types.hpp"

#include <map>
#include <string>
#include <vector>

namespace moon {

using ParamId = std::size_t;

/// Named, ordered collection of learnable matrices and their gradients.
template <typename Scalar>
class ParameterStore {
 public:
  using Mat = Matrix<Scalar>;

  ParamId add(std::string name, Mat value) {
    if (index_.count(name)) throw ValidationError("duplicate parameter name: " + name);
    index_.emplace(name, values_.size());
    names_.push_back(std::move(name));
    grads_.emplace_back(Mat::Zero(value.rows(), value.cols()));
    values_.push_back(std::move(value));
    return values_.size() - 1;
  }

  std::size_t size() const { return values_.size(); }
  const std::string& name(ParamId id) const { return names_[id]; }
  const Mat& value(ParamId id) const { return values_[id]; }
  Mat& value(ParamId id) { return values_[id]; }
  const Mat& grad(ParamId id) const { return grads_[id]; }
  Mat& grad(ParamId id) { return grads_[id]; }

  ParamId find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("unknown parameter: " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  void zero_grad() {
    for (auto& g : grads_) g.setZero();
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
    return n;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Mat> values_;
  std::vector<Mat> grads_;
  std::map<std::string, ParamId> index_;
};

}  // namespace moon
