#include "gpfi/params.hpp"

#include <stdexcept>

namespace gpfi {

Tensor& ParamStore::add(std::string name, Tensor value, bool decay) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), std::move(value), decay});
    return entries_.back().value;
}

const Tensor& ParamStore::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return entries_[it->second].value;
}

Tensor& ParamStore::at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return entries_[it->second].value;
}

std::size_t ParamStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
}

std::size_t ParamStore::scalar_count(const std::string& prefix) const {
    std::size_t n = 0;
    for (const auto& e : entries_)
        if (e.name.compare(0, prefix.size(), prefix) == 0) n += e.value.size();
    return n;
}

bool ParamStore::all_finite() const {
    for (const auto& e : entries_)
        if (!e.value.all_finite()) return false;
    return true;
}

Binding::Binding(const ParamStore& store, bool requires_grad) {
    vars_.reserve(store.size());
    for (const auto& e : store.entries()) {
        index_.emplace(e.name, vars_.size());
        vars_.emplace_back(e.value, requires_grad);
    }
}

const ad::Var& Binding::operator[](const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unbound parameter: " + name);
    return vars_[it->second];
}

std::vector<Tensor> Binding::gradients() const {
    std::vector<Tensor> out;
    out.reserve(vars_.size());
    for (const auto& v : vars_) out.push_back(v.grad().empty() ? Tensor(v.shape()) : v.grad());
    return out;
}

}  // namespace gpfi
