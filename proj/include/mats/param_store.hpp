#pragma once

#include <cstdint>
#include <deque>
#include <string>
#include <unordered_map>
#include <vector>

#include "mats/digest.hpp"
#include "mats/error.hpp"
#include "mats/types.hpp"

namespace mats {

// One named tensor. Vectors are stored as 1-column or 1-row matrices by the
// owning module's convention. grad always has the same shape as value and is
// kept allocated; frozen params keep a zero grad that nothing ever writes.
struct Param {
  Matrix value;
  Matrix grad;
  bool trainable = true;
};

// Name -> Param registry with stable insertion order (iteration order is the
// registration order, which makes optimizer state and digests deterministic).
// References returned by at()/add() stay valid for the store's lifetime.
class ParamStore {
 public:
  Param& add(const std::string& name, Matrix init, bool trainable = true) {
    if (index_.count(name))
      throw UsageError("ParamStore: duplicate parameter '" + name + "'");
    items_.emplace_back();
    Param& p = items_.back();
    p.value = std::move(init);
    p.grad = Matrix::Zero(p.value.rows(), p.value.cols());
    p.trainable = trainable;
    index_.emplace(name, items_.size() - 1);
    names_.push_back(name);
    return p;
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Param& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end())
      throw UsageError("ParamStore: unknown parameter '" + name + "'");
    return items_[it->second];
  }
  const Param& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end())
      throw UsageError("ParamStore: unknown parameter '" + name + "'");
    return items_[it->second];
  }

  std::size_t size() const { return items_.size(); }
  const std::string& name_at(std::size_t i) const { return names_[i]; }
  Param& param_at(std::size_t i) { return items_[i]; }
  const Param& param_at(std::size_t i) const { return items_[i]; }

  void zero_grads() {
    for (auto& p : items_) p.grad.setZero();
  }

  void set_trainable_prefix(const std::string& prefix, bool trainable) {
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (names_[i].rfind(prefix, 0) == 0) items_[i].trainable = trainable;
  }

  std::vector<std::string> names_with_prefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& n : names_)
      if (n.rfind(prefix, 0) == 0) out.push_back(n);
    return out;
  }

  std::int64_t count_scalars(bool trainable_only) const {
    std::int64_t n = 0;
    for (const auto& p : items_)
      if (!trainable_only || p.trainable) n += p.value.size();
    return n;
  }

  // Digest of values (names, shapes, raw doubles) under a name prefix.
  // Empty prefix covers the whole store. Used for freeze contracts.
  std::string digest_prefix(const std::string& prefix = "") const {
    Digest d;
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (names_[i].rfind(prefix, 0) != 0) continue;
      d.str(names_[i]);
      d.matrix(items_[i].value);
    }
    return d.hex();
  }

 private:
  std::deque<Param> items_;
  std::vector<std::string> names_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace mats
