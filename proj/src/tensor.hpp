#pragma once

#include <cstring>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "common.hpp"

namespace hp {

struct TensorImpl;
struct TapeNode;

// Dense n-d array. Value-semantics handle over a shared impl; the buffer is
// immutable after creation, only the grad buffer mutates (during backward).
class Tensor {
  public:
    Tensor() = default;

    static Tensor empty(Shape shape, Dtype dt = Dtype::F64, bool requires_grad = false);
    static Tensor zeros(Shape shape, Dtype dt = Dtype::F64, bool requires_grad = false);
    static Tensor full(Shape shape, double value, Dtype dt = Dtype::F64, bool requires_grad = false);
    static Tensor scalar(double value, Dtype dt = Dtype::F64, bool requires_grad = false);
    static Tensor from_vector(Shape shape, const std::vector<double>& values, Dtype dt = Dtype::F64,
                              bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    int64_t numel() const;
    int64_t dim(int i) const;
    int ndim() const;
    Dtype dtype() const;
    bool requires_grad() const;

    template <class S> S* data();
    template <class S> const S* data() const;

    // Typed access regardless of dtype (reads convert to double).
    double value_at(int64_t flat_index) const;
    void set_value_at(int64_t flat_index, double v);
    double item() const;  // numel()==1 only
    std::vector<double> to_vector() const;

    // Gradient buffer; allocated as zeros on first touch.
    double grad_at(int64_t flat_index) const;
    std::vector<double> grad_to_vector() const;
    void zero_grad();     // drops the buffer
    void accumulate_grad_from(const Tensor& g);  // adds g's data into this grad (same shape)

    Tensor detach() const;  // same data, no grad tracking, no tape history

    std::shared_ptr<TensorImpl> impl() const { return impl_; }
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  private:
    std::shared_ptr<TensorImpl> impl_;
};

struct TensorImpl {
    Shape shape;
    Dtype dtype = Dtype::F64;
    bool requires_grad = false;
    std::vector<std::byte> data;
    std::vector<std::byte> grad;  // empty until touched
    int64_t node_seq = -1;        // producing tape node, -1 for leaves/constants

    int64_t numel() const { return shape_numel(shape); }
    template <class S> S* data_as() { return reinterpret_cast<S*>(data.data()); }
    template <class S> const S* data_as() const { return reinterpret_cast<const S*>(data.data()); }
    template <class S> S* grad_as() { return reinterpret_cast<S*>(grad.data()); }
    template <class S> const S* grad_as() const { return reinterpret_cast<const S*>(grad.data()); }
    void ensure_grad();  // allocate zero grad if absent
};

// One recorded op. backward() reads out.grad and accumulates into the inputs'
// grads; whatever forward state it needs is captured in the closure.
struct TapeNode {
    const char* op = "";
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::weak_ptr<TensorImpl> out;
    std::function<void(TensorImpl&)> backward;
};

// Single-threaded tape of nodes in creation order.
class Tape {
  public:
    static Tape& instance();
    bool enabled() const { return enabled_; }
    void set_enabled(bool e) { enabled_ = e; }
    int64_t record(TapeNode node);
    void clear();
    size_t size() const { return nodes_.size(); }
    const std::vector<TapeNode>& nodes() const { return nodes_; }

  private:
    std::vector<TapeNode> nodes_;
    bool enabled_ = true;
    friend void backward(const Tensor&);
};

struct NoGradGuard {
    NoGradGuard() : prev_(Tape::instance().enabled()) { Tape::instance().set_enabled(false); }
    ~NoGradGuard() { Tape::instance().set_enabled(prev_); }
    bool prev_;
};

// Reverse-mode sweep from a scalar root: visits tape nodes up to the root's
// producer in reverse creation order exactly once, accumulating d(root)/d(leaf)
// into every requires_grad leaf reachable from the root.
void backward(const Tensor& root);

template <class F>
decltype(auto) dispatch_dtype(Dtype dt, F&& f) {
    if (dt == Dtype::F64) return f(double{});
    return f(float{});
}

}  // namespace hp
