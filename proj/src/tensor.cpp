#include "tensor.hpp"

#include <cmath>

namespace hp {

namespace {
bool g_debug_checks = false;
}

bool debug_checks() { return g_debug_checks; }
void set_debug_checks(bool on) { g_debug_checks = on; }

static std::shared_ptr<TensorImpl> make_impl(Shape shape, Dtype dt, bool requires_grad) {
    for (int64_t d : shape) HP_CHECK(d > 0, "tensor extents must be positive, got " << shape_str(shape));
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->dtype = dt;
    impl->requires_grad = requires_grad;
    impl->data.resize(static_cast<size_t>(impl->numel()) * dtype_size(dt));
    return impl;
}

Tensor Tensor::empty(Shape shape, Dtype dt, bool requires_grad) {
    return Tensor(make_impl(std::move(shape), dt, requires_grad));
}

Tensor Tensor::zeros(Shape shape, Dtype dt, bool requires_grad) {
    Tensor t = empty(std::move(shape), dt, requires_grad);
    std::memset(t.impl()->data.data(), 0, t.impl()->data.size());
    return t;
}

Tensor Tensor::full(Shape shape, double value, Dtype dt, bool requires_grad) {
    Tensor t = empty(std::move(shape), dt, requires_grad);
    int64_t n = t.numel();
    dispatch_dtype(dt, [&](auto tag) {
        using S = decltype(tag);
        S* p = t.data<S>();
        for (int64_t i = 0; i < n; ++i) p[i] = static_cast<S>(value);
    });
    return t;
}

Tensor Tensor::scalar(double value, Dtype dt, bool requires_grad) {
    return full(Shape{}, value, dt, requires_grad);
}

Tensor Tensor::from_vector(Shape shape, const std::vector<double>& values, Dtype dt, bool requires_grad) {
    Tensor t = empty(std::move(shape), dt, requires_grad);
    HP_CHECK(static_cast<int64_t>(values.size()) == t.numel(),
             "from_vector: " << values.size() << " values for shape " << shape_str(t.shape()));
    dispatch_dtype(dt, [&](auto tag) {
        using S = decltype(tag);
        S* p = t.data<S>();
        for (size_t i = 0; i < values.size(); ++i) p[i] = static_cast<S>(values[i]);
    });
    return t;
}

const Shape& Tensor::shape() const { return impl_->shape; }
int64_t Tensor::numel() const { return impl_->numel(); }
int64_t Tensor::dim(int i) const { return impl_->shape.at(static_cast<size_t>(i)); }
int Tensor::ndim() const { return static_cast<int>(impl_->shape.size()); }
Dtype Tensor::dtype() const { return impl_->dtype; }
bool Tensor::requires_grad() const { return impl_->requires_grad; }

template <class S> S* Tensor::data() { return impl_->data_as<S>(); }
template <class S> const S* Tensor::data() const { return impl_->data_as<S>(); }
template double* Tensor::data<double>();
template float* Tensor::data<float>();
template const double* Tensor::data<double>() const;
template const float* Tensor::data<float>() const;

double Tensor::value_at(int64_t i) const {
    return dispatch_dtype(impl_->dtype, [&](auto tag) -> double {
        using S = decltype(tag);
        return static_cast<double>(impl_->data_as<S>()[i]);
    });
}

void Tensor::set_value_at(int64_t i, double v) {
    dispatch_dtype(impl_->dtype, [&](auto tag) {
        using S = decltype(tag);
        impl_->data_as<S>()[i] = static_cast<S>(v);
    });
}

double Tensor::item() const {
    HP_CHECK(numel() == 1, "item() on tensor of shape " << shape_str(shape()));
    return value_at(0);
}

std::vector<double> Tensor::to_vector() const {
    std::vector<double> out(static_cast<size_t>(numel()));
    for (int64_t i = 0; i < numel(); ++i) out[static_cast<size_t>(i)] = value_at(i);
    return out;
}

void TensorImpl::ensure_grad() {
    if (grad.empty()) grad.assign(static_cast<size_t>(numel()) * dtype_size(dtype), std::byte{0});
}

double Tensor::grad_at(int64_t i) const {
    if (impl_->grad.empty()) return 0.0;
    return dispatch_dtype(impl_->dtype, [&](auto tag) -> double {
        using S = decltype(tag);
        return static_cast<double>(impl_->grad_as<S>()[i]);
    });
}

std::vector<double> Tensor::grad_to_vector() const {
    std::vector<double> out(static_cast<size_t>(numel()), 0.0);
    if (impl_->grad.empty()) return out;
    for (int64_t i = 0; i < numel(); ++i) out[static_cast<size_t>(i)] = grad_at(i);
    return out;
}

void Tensor::zero_grad() { impl_->grad.clear(); }

void Tensor::accumulate_grad_from(const Tensor& g) {
    HP_CHECK(g.shape() == shape() && g.dtype() == dtype(), "accumulate_grad_from: mismatched tensors");
    impl_->ensure_grad();
    dispatch_dtype(dtype(), [&](auto tag) {
        using S = decltype(tag);
        S* gp = impl_->grad_as<S>();
        const S* src = g.impl()->data_as<S>();
        for (int64_t i = 0; i < numel(); ++i) gp[i] += src[i];
    });
}

Tensor Tensor::detach() const {
    auto impl = make_impl(impl_->shape, impl_->dtype, false);
    impl->data = impl_->data;
    return Tensor(impl);
}

Tape& Tape::instance() {
    thread_local Tape tape;
    return tape;
}

int64_t Tape::record(TapeNode node) {
    nodes_.push_back(std::move(node));
    return static_cast<int64_t>(nodes_.size()) - 1;
}

void Tape::clear() { nodes_.clear(); }

void backward(const Tensor& root) {
    HP_CHECK(root.defined() && root.numel() == 1,
             "backward: root must be a scalar, got " << (root.defined() ? shape_str(root.shape()) : "<empty>"));
    auto rimpl = root.impl();
    rimpl->ensure_grad();
    dispatch_dtype(rimpl->dtype, [&](auto tag) {
        using S = decltype(tag);
        rimpl->grad_as<S>()[0] += S(1);
    });
    Tape& tape = Tape::instance();
    int64_t start = rimpl->node_seq;
    for (int64_t i = start; i >= 0; --i) {
        TapeNode& node = tape.nodes_[static_cast<size_t>(i)];
        auto out = node.out.lock();
        if (!out || out->grad.empty()) continue;  // not on a path to the root
        node.backward(*out);
    }
}

}  // namespace hp
