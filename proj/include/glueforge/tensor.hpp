#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "error.hpp"

namespace glueforge {

using Shape = std::vector<std::int64_t>;

inline std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= static_cast<std::size_t>(d);
    return n;
}

inline std::string shape_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

/// Dense row-major float32 tensor.
struct Tensor {
    Shape shape;
    std::vector<float> data;

    Tensor() = default;
    Tensor(Shape s, std::vector<float> values) : shape(std::move(s)), data(std::move(values)) {
        validate();
    }
    explicit Tensor(Shape s, float fill = 0.0f) : shape(std::move(s)), data(shape_numel(shape), fill) {
        validate();
    }

    std::size_t numel() const { return data.size(); }
    std::span<const float> values() const { return data; }
    std::span<float> values() { return data; }

    /// Rows/cols of the tensor viewed as a matrix: leading dim by the product of the rest.
    std::int64_t rows() const { return shape.empty() ? 1 : shape.front(); }
    std::int64_t cols() const {
        return shape.empty() ? 1 : static_cast<std::int64_t>(numel() / static_cast<std::size_t>(rows()));
    }

    void validate() const {
        for (auto d : shape)
            if (d <= 0) throw Error("tensor shape " + shape_string(shape) + " has a non-positive dimension");
        if (shape_numel(shape) != data.size())
            throw Error("tensor shape " + shape_string(shape) + " does not match element count " +
                        std::to_string(data.size()));
    }

    bool operator==(const Tensor&) const = default;
};

/// Named map of tensors; iteration order is lexicographic by name.
class TensorStore {
public:
    using Map = std::map<std::string, Tensor>;
    using const_iterator = Map::const_iterator;

    TensorStore() = default;

    void insert(std::string name, Tensor tensor) {
        if (name.empty()) throw Error("tensor name must be non-empty");
        tensor.validate();
        auto [it, inserted] = entries_.emplace(std::move(name), std::move(tensor));
        if (!inserted) throw Error("duplicate tensor name '" + it->first + "'");
    }

    /// Replaces an existing tensor; its shape must be unchanged.
    void replace(const std::string& name, Tensor tensor) {
        auto& slot = mutable_at(name);
        if (slot.shape != tensor.shape)
            throw Error("replace of '" + name + "' changes shape " + shape_string(slot.shape) + " -> " +
                        shape_string(tensor.shape));
        tensor.validate();
        slot = std::move(tensor);
    }

    const Tensor& at(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw Error("no tensor named '" + name + "'");
        return it->second;
    }
    Tensor& mutable_at(const std::string& name) {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw Error("no tensor named '" + name + "'");
        return it->second;
    }
    const Tensor* find(const std::string& name) const {
        auto it = entries_.find(name);
        return it == entries_.end() ? nullptr : &it->second;
    }
    bool contains(const std::string& name) const { return entries_.count(name) != 0; }

    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    const_iterator begin() const { return entries_.begin(); }
    const_iterator end() const { return entries_.end(); }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(entries_.size());
        for (const auto& [name, _] : entries_) out.push_back(name);
        return out;
    }

    std::size_t total_numel() const {
        std::size_t n = 0;
        for (const auto& [_, t] : entries_) n += t.numel();
        return n;
    }

    /// Applies `fn` to every tensor, producing a store with the same names.
    template <class Fn>
    TensorStore map(Fn&& fn) const {
        TensorStore out;
        for (const auto& [name, t] : entries_) out.insert(name, fn(name, t));
        return out;
    }

    bool operator==(const TensorStore&) const = default;

private:
    Map entries_;
};

/// Non-owning list of stores handed to the merge kernels.
using StoreRefs = std::vector<const TensorStore*>;

inline StoreRefs refs_of(const std::vector<TensorStore>& stores) {
    StoreRefs out;
    out.reserve(stores.size());
    for (const auto& s : stores) out.push_back(&s);
    return out;
}

/// True when both stores hold the same tensor names with the same shapes.
inline bool same_layout(const TensorStore& a, const TensorStore& b) {
    if (a.size() != b.size()) return false;
    auto ia = a.begin();
    for (auto ib = b.begin(); ib != b.end(); ++ia, ++ib)
        if (ia->first != ib->first || ia->second.shape != ib->second.shape) return false;
    return true;
}

inline void require_same_layout(const TensorStore& a, const TensorStore& b, const std::string& context) {
    if (same_layout(a, b)) return;
    for (const auto& [name, t] : a) {
        const Tensor* other = b.find(name);
        if (!other) throw Error(context + ": tensor '" + name + "' missing from second store");
        if (other->shape != t.shape)
            throw Error(context + ": shape mismatch for '" + name + "' " + shape_string(t.shape) + " vs " +
                        shape_string(other->shape));
    }
    throw Error(context + ": second store has tensors absent from the first");
}

} // namespace glueforge
