#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "gpfi/autodiff.hpp"
#include "gpfi/tensor.hpp"

namespace gpfi {

struct NamedTensor {
    std::string name;
    Tensor value;
    /// False for normalization gains/biases, which skip weight decay.
    bool decay = true;
};

/// Ordered registry of named learnable tensors. Registration order is the
/// canonical order for initialization, checkpoints and optimizer state.
class ParamStore {
public:
    Tensor& add(std::string name, Tensor value, bool decay = true);

    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    const Tensor& at(const std::string& name) const;
    Tensor& at(const std::string& name);

    const std::vector<NamedTensor>& entries() const { return entries_; }
    std::vector<NamedTensor>& entries() { return entries_; }
    std::size_t size() const { return entries_.size(); }

    /// Total number of scalar parameters.
    std::size_t scalar_count() const;
    /// Scalar parameters whose name starts with `prefix`.
    std::size_t scalar_count(const std::string& prefix) const;

    bool all_finite() const;

private:
    std::vector<NamedTensor> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Autodiff leaves for every tensor of a ParamStore.
class Binding {
public:
    Binding(const ParamStore& store, bool requires_grad);

    const ad::Var& operator[](const std::string& name) const;
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    /// Gradients by registration order; zero tensors where nothing flowed.
    std::vector<Tensor> gradients() const;

private:
    std::vector<ad::Var> vars_;
    std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace gpfi
