#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "poroperm/tensor.hpp"

namespace poroperm {

/// Ordered collection of named tensors. Insertion order is the canonical
/// order for serialization and optimizer state.
template <typename T>
class ParameterSet {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
  };

  void add(std::string name, Tensor<T> tensor) {
    if (index_.contains(name)) fail(ErrorCode::InvalidConfig, "duplicate parameter '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), std::move(tensor)});
  }

  bool contains(const std::string& name) const { return index_.contains(name); }

  Tensor<T>& at(const std::string& name) { return entries_[lookup(name)].tensor; }
  const Tensor<T>& at(const std::string& name) const { return entries_[lookup(name)].tensor; }

  std::size_t size() const noexcept { return entries_.size(); }
  auto begin() noexcept { return entries_.begin(); }
  auto end() noexcept { return entries_.end(); }
  auto begin() const noexcept { return entries_.begin(); }
  auto end() const noexcept { return entries_.end(); }
  Entry& operator[](std::size_t i) { return entries_[i]; }
  const Entry& operator[](std::size_t i) const { return entries_[i]; }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.size();
    return n;
  }

  /// Zero-filled set with identical names and shapes.
  ParameterSet zeros_like() const {
    ParameterSet out;
    for (const auto& e : entries_) out.add(e.name, Tensor<T>(e.tensor.shape()));
    return out;
  }

  void set_zero() {
    for (auto& e : entries_) e.tensor.fill(T{0});
  }

  template <typename U>
  ParameterSet<U> cast() const {
    ParameterSet<U> out;
    for (const auto& e : entries_) out.add(e.name, e.tensor.template cast<U>());
    return out;
  }

  bool operator==(const ParameterSet& other) const {
    if (entries_.size() != other.entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (entries_[i].name != other.entries_[i].name || !(entries_[i].tensor == other.entries_[i].tensor)) return false;
    return true;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) fail(ErrorCode::ConfigMismatch, "no parameter named '" + name + "'");
    return it->second;
  }

  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace poroperm
