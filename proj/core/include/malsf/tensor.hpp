#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace malsf {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  int node_id = -1;  // producing node within the graph that created it
};

// Dense 64-bit float tensor, row-major, value-semantic handle to shared
// storage. Storage identity (impl pointer) doubles as the parameter handle
// for weight-sharing and disjointness checks.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor from_rows(const std::vector<std::vector<double>>& rows,
                          bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int64_t size() const { return static_cast<int64_t>(impl_->data.size()); }
  // 2-d conveniences; a 1-d tensor counts as a single row.
  int rows() const;
  int cols() const;

  const std::vector<double>& data() const { return impl_->data; }
  std::vector<double>& data() { return impl_->data; }
  double value() const;  // single-element tensors only
  double at(std::initializer_list<int> idx) const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool rg);
  bool has_grad() const { return !impl_->grad.empty(); }
  const std::vector<double>& grad() const;
  std::vector<double>& grad_buffer();  // allocated zero-filled on demand
  void zero_grad();

  int node_id() const { return impl_->node_id; }
  TensorImpl* impl() const { return impl_.get(); }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Insertion-ordered tape of recorded operations. Construction and backward
// are single-writer; separate graphs may run on separate threads while
// sharing read-only leaf tensors.
class Graph {
 public:
  struct Node {
    const char* op;
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void(Graph&, const Node&)> grad_fn;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  int add_node(const char* op, std::vector<Tensor> inputs, const Tensor& output,
               std::function<void(Graph&, const Node&)> grad_fn);
  int num_nodes() const { return static_cast<int>(nodes_.size()); }
  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }

  // Reverse sweep from a scalar loss. Gradients accumulate additively across
  // fan-out into graph-local buffers, then flush into the .grad of every
  // requires_grad tensor touched by the sweep.
  void backward(const Tensor& loss);
  // Same sweep but without flushing: tensor .grad fields are left untouched
  // so shared parameters stay read-only (used by the parallel batch loop).
  void backward_local(const Tensor& loss);

  // Graph-local gradient of a tensor after backward/backward_local; null if
  // the tensor received no gradient.
  const std::vector<double>* local_grad(const Tensor& t) const;

  // Get-or-create the zero-initialized local gradient buffer (op backward
  // implementations accumulate here).
  std::vector<double>& grad_of(const TensorImpl* t, size_t n);

 private:
  void sweep(const Tensor& loss);

  std::vector<Node> nodes_;
  std::unordered_map<const TensorImpl*, std::vector<double>> grads_;
};

// RAII scope installing a graph as the thread-local recording target.
// Ops executed with no active graph run in pure inference mode.
class GraphScope {
 public:
  explicit GraphScope(Graph& g);
  ~GraphScope();
  GraphScope(const GraphScope&) = delete;
  GraphScope& operator=(const GraphScope&) = delete;

 private:
  Graph* prev_;
};

Graph* current_graph();

}  // namespace malsf
