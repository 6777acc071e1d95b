#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace mvseq {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

inline void check_shape(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument("shape error: " + msg);
}

template <typename T>
class Tape;

// Dense row-major tensor. Copies are shallow: they share the underlying
// storage, so a parameter handed to several layers is still one parameter.
// Values are treated as immutable once the tensor has entered a graph;
// in-place mutation (optimizer updates, loading) happens between graphs.
template <typename T>
class Tensor {
public:
    struct Storage {
        std::vector<T> data;
        std::shared_ptr<std::vector<T>> grad;  // populated by Tape::backward
        bool requires_grad = false;
        uint64_t uid = next_uid();  // graphs key on this, never on the address

        static uint64_t next_uid() {
            static std::atomic<uint64_t> counter{1};
            return counter.fetch_add(1, std::memory_order_relaxed);
        }
    };

    Tensor() : st_(std::make_shared<Storage>()) {}

    explicit Tensor(Shape shape) : st_(std::make_shared<Storage>()), shape_(std::move(shape)) {
        for (int64_t d : shape_) check_shape(d > 0, "dimensions must be positive, got " + shape_str(shape_));
        st_->data.assign(static_cast<size_t>(numel_of(shape_)), T(0));
    }

    Tensor(Shape shape, std::vector<T> data) : st_(std::make_shared<Storage>()), shape_(std::move(shape)) {
        check_shape(static_cast<int64_t>(data.size()) == numel_of(shape_),
                    "data length " + std::to_string(data.size()) + " does not match " + shape_str(shape_));
        st_->data = std::move(data);
    }

    static Tensor full(Shape shape, T value) {
        Tensor t(std::move(shape));
        for (T& x : t.data()) x = value;
        return t;
    }

    static Tensor scalar(T value) { return Tensor({1}, {value}); }

    const Shape& shape() const { return shape_; }
    int64_t dim(size_t i) const { return shape_.at(i); }
    size_t rank() const { return shape_.size(); }
    int64_t numel() const { return numel_of(shape_); }

    std::vector<T>& data() { return st_->data; }
    const std::vector<T>& data() const { return st_->data; }
    T* ptr() { return st_->data.data(); }
    const T* ptr() const { return st_->data.data(); }

    bool requires_grad() const { return st_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        st_->requires_grad = v;
        return *this;
    }

    bool defined() const { return !shape_.empty(); }

    // Gradient buffer, allocated by backward(). Shaped like data, flat.
    std::shared_ptr<std::vector<T>>& grad_buffer() { return st_->grad; }
    const std::vector<T>& grad() const {
        if (!st_->grad) throw std::runtime_error("tensor has no gradient; run backward first");
        return *st_->grad;
    }
    std::shared_ptr<std::vector<T>> ensure_grad_buffer() {
        if (!st_->grad) st_->grad = std::make_shared<std::vector<T>>(st_->data.size(), T(0));
        return st_->grad;
    }

    // Same storage under a new shape (row-major relabel).
    Tensor reshaped(Shape new_shape) const {
        check_shape(numel_of(new_shape) == numel(),
                    "reshape " + shape_str(shape_) + " -> " + shape_str(new_shape));
        Tensor t;
        t.st_ = st_;
        t.shape_ = std::move(new_shape);
        return t;
    }

    // Deep copy with fresh storage.
    Tensor clone() const {
        Tensor t;
        t.st_ = std::make_shared<Storage>();
        t.st_->data = st_->data;
        t.st_->requires_grad = st_->requires_grad;
        t.shape_ = shape_;
        return t;
    }

    Storage* storage() const { return st_.get(); }

    // Node id in the current thread's graph, or -1 when not recorded.
    int node_id() const;

    bool all_finite() const {
        for (T x : st_->data)
            if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }

private:
    std::shared_ptr<Storage> st_;
    Shape shape_;

    friend class Tape<T>;
};

// Reverse-mode tape. Nodes are appended in forward order and replayed in
// exact reverse order by backward(). A tape is confined to one thread from
// construction through backward; use Tape::Scope to make it current.
template <typename T>
class Tape {
public:
    struct Node {
        std::function<void(Tape&, const std::vector<T>&)> backward;  // reads upstream grad, accumulates into inputs
        std::vector<T> grad;                                         // lazily allocated
        int64_t numel = 0;
        std::shared_ptr<std::vector<T>> sink;                        // leaf / retained grad destination
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    class Scope {
    public:
        explicit Scope(Tape& t) : prev_(current_) { current_ = &t; }
        ~Scope() { current_ = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* prev_;
    };

    static Tape* current() { return current_; }

    // Node id of a tensor on this tape; registers requires-grad tensors as
    // leaves on first sight. Returns -1 for constants.
    int node_of(const Tensor<T>& t) {
        auto it = index_.find(t.storage()->uid);
        if (it != index_.end()) return it->second;
        if (!t.requires_grad()) return -1;
        int id = static_cast<int>(nodes_.size());
        nodes_.push_back(Node{});
        nodes_.back().numel = t.numel();
        nodes_.back().sink = const_cast<Tensor<T>&>(t).ensure_grad_buffer();
        index_.emplace(t.storage()->uid, id);
        return id;
    }

    bool tracked(const Tensor<T>& t) const {
        return index_.count(t.storage()->uid) > 0 || t.requires_grad();
    }

    // Lookup without registering; -1 if the tensor has no node yet.
    int lookup(const Tensor<T>& t) const {
        auto it = index_.find(t.storage()->uid);
        return it == index_.end() ? -1 : it->second;
    }

    // Record an op output. `backward` receives this node's accumulated grad.
    void emit(Tensor<T>& out, std::function<void(Tape&, const std::vector<T>&)> backward) {
        int id = static_cast<int>(nodes_.size());
        nodes_.push_back(Node{});
        nodes_.back().backward = std::move(backward);
        nodes_.back().numel = out.numel();
        out.set_requires_grad(true);
        index_.emplace(out.storage()->uid, id);
    }

    // Accumulate a contribution into node `id` (no-op for constants).
    void accumulate(int id, const std::vector<T>& g) {
        if (id < 0) return;
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.grad.empty()) n.grad.assign(static_cast<size_t>(n.numel), T(0));
        for (size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
    }

    std::vector<T>& grad_buf(int id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.grad.empty()) n.grad.assign(static_cast<size_t>(n.numel), T(0));
        return n.grad;
    }

    // Ask for the gradient of an intermediate to be kept after backward.
    void retain_grad(Tensor<T>& t) {
        auto it = index_.find(t.storage()->uid);
        if (it == index_.end()) throw std::runtime_error("retain_grad: tensor is not on the tape");
        nodes_[static_cast<size_t>(it->second)].sink = t.ensure_grad_buffer();
    }

    // Reverse sweep from a scalar loss. Populates grad on every tracked
    // requires-grad tensor (zero where no path reaches it) and on retained
    // intermediates. Grads are set, not accumulated across calls.
    void backward(const Tensor<T>& loss) {
        if (loss.numel() != 1) throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
        if (!std::isfinite(static_cast<double>(loss.data()[0])))
            throw std::runtime_error("backward: loss is not finite");
        auto it = index_.find(loss.storage()->uid);
        if (it == index_.end()) throw std::runtime_error("backward: loss is not on the tape");
        int root = it->second;

        std::unordered_set<std::vector<T>*> seen;
        for (int id = 0; id <= root; ++id) {
            auto& sink = nodes_[static_cast<size_t>(id)].sink;
            if (sink && seen.insert(sink.get()).second) sink->assign(sink->size(), T(0));
        }

        nodes_[static_cast<size_t>(root)].grad.assign(1, T(1));
        for (int id = root; id >= 0; --id) {
            Node& n = nodes_[static_cast<size_t>(id)];
            if (n.grad.empty()) continue;
            if (n.backward) n.backward(*this, n.grad);
            if (n.sink)
                for (size_t i = 0; i < n.grad.size(); ++i) (*n.sink)[i] += n.grad[i];
        }
    }

    size_t size() const { return nodes_.size(); }

private:
    std::vector<Node> nodes_;
    std::unordered_map<uint64_t, int> index_;  // storage uid -> node id, private to this thread
    static thread_local Tape* current_;
};

template <typename T>
thread_local Tape<T>* Tape<T>::current_ = nullptr;

template <typename T>
int Tensor<T>::node_id() const {
    Tape<T>* t = Tape<T>::current();
    return t ? t->lookup(*this) : -1;
}

}  // namespace mvseq
