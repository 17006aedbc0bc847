#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace pabn {

template <typename T>
struct TensorT;

template <typename T>
using TensorPtr = std::shared_ptr<TensorT<T>>;

inline std::size_t shape_size(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d < 0) {
            throw std::invalid_argument("tensor shape dimensions must be non-negative");
        }
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << "]";
    return os.str();
}

// Dense row-major tensor. `grad` stays empty until a backward pass
// allocates it; `requires_grad` marks leaves to optimize toward and, on
// intermediates, membership in the differentiated subgraph.
template <typename T>
struct TensorT {
    std::vector<int> shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;

    static TensorPtr<T> create(std::vector<int> shape, bool requires_grad = false) {
        auto t = std::make_shared<TensorT<T>>();
        t->data.assign(shape_size(shape), T(0));
        t->shape = std::move(shape);
        t->requires_grad = requires_grad;
        return t;
    }

    static TensorPtr<T> from_data(std::vector<int> shape, std::vector<T> values,
                                  bool requires_grad = false) {
        if (shape_size(shape) != values.size()) {
            throw std::invalid_argument("from_data: " + shape_str(shape) + " does not hold " +
                                        std::to_string(values.size()) + " values");
        }
        auto t = std::make_shared<TensorT<T>>();
        t->shape = std::move(shape);
        t->data = std::move(values);
        t->requires_grad = requires_grad;
        return t;
    }

    static TensorPtr<T> scalar(T v, bool requires_grad = false) {
        return from_data({}, {v}, requires_grad);
    }

    std::size_t size() const { return data.size(); }
    int rank() const { return static_cast<int>(shape.size()); }

    int dim(int i) const {
        if (i < 0 || i >= rank()) {
            throw std::invalid_argument("dim index out of range for shape " + shape_str(shape));
        }
        return shape[static_cast<std::size_t>(i)];
    }

    void zero_grad_buffer() { grad.assign(data.size(), T(0)); }
};

// Test hook: while `op` is non-empty, every backward step of that
// primitive sees its upstream gradient scaled by `scale` (restored
// afterwards). Lets a corrupted-backward run demonstrate that the
// checker actually fires.
struct FaultInjection {
    std::string op;
    double scale = 2.0;
};

inline FaultInjection& fault_injection() {
    static thread_local FaultInjection f;
    return f;
}

template <typename T>
struct OpNodeT {
    const char* op;
    std::vector<TensorPtr<T>> inputs;
    TensorPtr<T> output;
    std::function<void()> backward;
};

// Ordered record of executed primitives; order of recording is a valid
// topological order, so reverse iteration visits consumers before
// producers.
template <typename T>
class GraphT {
public:
    class Scope {
    public:
        explicit Scope(GraphT& g) : prev_(active_) { active_ = &g; }
        ~Scope() { active_ = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        GraphT* prev_;
    };

    static GraphT* active() { return active_; }

    Scope activate() { return Scope(*this); }

    void record_node(const char* op, std::vector<TensorPtr<T>> inputs, TensorPtr<T> output,
                     std::function<void()> backward) {
        nodes_.push_back(OpNodeT<T>{op, std::move(inputs), std::move(output), std::move(backward)});
    }

    std::size_t node_count() const { return nodes_.size(); }

    const OpNodeT<T>& node(std::size_t i) const { return nodes_.at(i); }

    // Seeds dLoss/dLoss = 1 and fills `grad` on every requires_grad
    // tensor reachable from `loss`. Gradients touched by this pass are
    // reset first; within the pass multiple consumers accumulate by
    // addition.
    void backward(const TensorPtr<T>& loss) {
        if (loss->size() != 1) {
            throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                        shape_str(loss->shape));
        }
        const std::size_t idx = find_producer(loss);
        prepare_grads(idx);
        loss->grad.assign(1, T(1));
        run_reverse(idx);
    }

    // Vector-Jacobian product: seeds d/dOutput with an explicit
    // cotangent instead of requiring a scalar loss. Keeps single-op
    // gradient checks free of helper reduction nodes.
    void backward_with_cotangent(const TensorPtr<T>& output, const std::vector<T>& cotangent) {
        if (cotangent.size() != output->size()) {
            throw std::invalid_argument("backward_with_cotangent: cotangent size mismatch");
        }
        const std::size_t idx = find_producer(output);
        prepare_grads(idx);
        output->grad = cotangent;
        run_reverse(idx);
    }

private:
    std::size_t find_producer(const TensorPtr<T>& out) const {
        for (std::size_t i = nodes_.size(); i > 0; --i) {
            if (nodes_[i - 1].output == out) {
                return i - 1;
            }
        }
        throw std::invalid_argument("backward: tensor was not produced by this graph");
    }

    void prepare_grads(std::size_t last) {
        std::unordered_set<TensorT<T>*> seen;
        for (std::size_t i = 0; i <= last; ++i) {
            auto touch = [&seen](const TensorPtr<T>& t) {
                if (t->requires_grad && seen.insert(t.get()).second) {
                    t->zero_grad_buffer();
                }
            };
            for (const auto& in : nodes_[i].inputs) {
                touch(in);
            }
            touch(nodes_[i].output);
        }
    }

    void run_reverse(std::size_t last) {
        const FaultInjection& fault = fault_injection();
        for (std::size_t i = last + 1; i > 0; --i) {
            const OpNodeT<T>& n = nodes_[i - 1];
            if (!n.output->requires_grad || n.output->grad.empty()) {
                continue;
            }
            const bool faulted = !fault.op.empty() && fault.op == n.op;
            if (faulted) {
                for (T& g : n.output->grad) {
                    g *= static_cast<T>(fault.scale);
                }
            }
            n.backward();
            if (faulted) {
                for (T& g : n.output->grad) {
                    g /= static_cast<T>(fault.scale);
                }
            }
        }
    }

    std::vector<OpNodeT<T>> nodes_;
    inline static thread_local GraphT* active_ = nullptr;
};

// Records an op node on the active graph when any input participates in
// differentiation; otherwise the closure is discarded and the output
// stays outside the tape.
template <typename T>
void autodiff_record(const char* op, std::vector<TensorPtr<T>> inputs, const TensorPtr<T>& output,
                     std::function<void()> backward) {
    GraphT<T>* g = GraphT<T>::active();
    if (g == nullptr) {
        return;
    }
    bool any = false;
    for (const auto& in : inputs) {
        any = any || in->requires_grad;
    }
    if (!any) {
        return;
    }
    output->requires_grad = true;
    g->record_node(op, std::move(inputs), output, std::move(backward));
}

using Tensor = TensorT<float>;
using Graph = GraphT<float>;

}  // namespace pabn
