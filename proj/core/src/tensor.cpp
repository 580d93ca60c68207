#include "malsf/tensor.hpp"

#include <sstream>

namespace malsf {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << "]";
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  for (int d : shape) {
    if (d <= 0) throw ShapeError("tensor dims must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
    throw ShapeError("data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = static_cast<size_t>(shape_numel(shape));
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = static_cast<size_t>(shape_numel(shape));
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return Tensor({1}, {v}, requires_grad);
}

Tensor Tensor::from_rows(const std::vector<std::vector<double>>& rows, bool requires_grad) {
  if (rows.empty()) throw ShapeError("from_rows: no rows");
  const int n = static_cast<int>(rows[0].size());
  std::vector<double> data;
  data.reserve(rows.size() * static_cast<size_t>(n));
  for (const auto& r : rows) {
    if (static_cast<int>(r.size()) != n) throw ShapeError("from_rows: ragged rows");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor({static_cast<int>(rows.size()), n}, std::move(data), requires_grad);
}

int Tensor::rows() const {
  return ndim() >= 2 ? dim(0) : 1;
}

int Tensor::cols() const {
  return dim(ndim() - 1);
}

double Tensor::value() const {
  if (size() != 1) throw ShapeError("value(): tensor has " + std::to_string(size()) + " elements");
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
  const auto& s = impl_->shape;
  if (idx.size() != s.size()) throw ShapeError("at(): index rank mismatch");
  int64_t flat = 0;
  size_t i = 0;
  for (int v : idx) {
    flat = flat * s[i] + v;
    ++i;
  }
  return impl_->data[static_cast<size_t>(flat)];
}

Tensor& Tensor::set_requires_grad(bool rg) {
  impl_->requires_grad = rg;
  return *this;
}

const std::vector<double>& Tensor::grad() const {
  if (impl_->grad.empty()) throw std::runtime_error("grad(): no gradient accumulated");
  return impl_->grad;
}

std::vector<double>& Tensor::grad_buffer() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() {
  impl_->grad.clear();
}

namespace {
thread_local Graph* g_current_graph = nullptr;
}  // namespace

Graph* current_graph() {
  return g_current_graph;
}

GraphScope::GraphScope(Graph& g) : prev_(g_current_graph) {
  g_current_graph = &g;
}

GraphScope::~GraphScope() {
  g_current_graph = prev_;
}

int Graph::add_node(const char* op, std::vector<Tensor> inputs, const Tensor& output,
                    std::function<void(Graph&, const Node&)> grad_fn) {
  const int id = static_cast<int>(nodes_.size());
  nodes_.push_back(Node{op, std::move(inputs), output, std::move(grad_fn)});
  output.impl()->node_id = id;
  return id;
}

void Graph::sweep(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  grads_.clear();
  grads_[loss.impl()] = {1.0};
  const int root = loss.impl()->node_id;
  if (root < 0) return;  // loss is a leaf; nothing to sweep

  // Mark ancestors of the loss so each contributing node runs exactly once.
  std::vector<char> reachable(nodes_.size(), 0);
  std::vector<int> stack{root};
  reachable[static_cast<size_t>(root)] = 1;
  while (!stack.empty()) {
    const int id = stack.back();
    stack.pop_back();
    for (const Tensor& in : nodes_[static_cast<size_t>(id)].inputs) {
      const int pid = in.impl()->node_id;
      if (pid >= 0 && pid < id && !reachable[static_cast<size_t>(pid)]) {
        reachable[static_cast<size_t>(pid)] = 1;
        stack.push_back(pid);
      }
    }
  }
  for (int id = root; id >= 0; --id) {
    if (!reachable[static_cast<size_t>(id)]) continue;
    const Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad_fn) n.grad_fn(*this, n);
  }
}

void Graph::backward(const Tensor& loss) {
  sweep(loss);
  for (auto& [impl, buf] : grads_) {
    auto* t = const_cast<TensorImpl*>(impl);
    if (!t->requires_grad) continue;
    if (t->grad.empty()) t->grad.assign(t->data.size(), 0.0);
    for (size_t i = 0; i < buf.size(); ++i) t->grad[i] += buf[i];
  }
}

void Graph::backward_local(const Tensor& loss) {
  sweep(loss);
}

const std::vector<double>* Graph::local_grad(const Tensor& t) const {
  auto it = grads_.find(t.impl());
  return it == grads_.end() ? nullptr : &it->second;
}

std::vector<double>& Graph::grad_of(const TensorImpl* t, size_t n) {
  auto& buf = grads_[t];
  if (buf.empty()) buf.assign(n, 0.0);
  return buf;
}

}  // namespace malsf
