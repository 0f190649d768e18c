#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tfformer {

using Shape = std::vector<std::size_t>;

/// Raised when operand extents are incompatible.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an API precondition that is not about shapes is violated.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

/// 64-byte aligned storage. Vectorized kernels peel a scalar prologue up to
/// the next aligned address, so the summation order (and the last bits of a
/// result) depends on where a buffer starts; fixing the base alignment makes
/// every op bit-reproducible from run to run.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

}  // namespace detail

using Buffer = std::vector<double, detail::AlignedAllocator<double>>;

namespace detail {

struct Node {
  Shape shape;
  Buffer data;
  Buffer grad;  // empty until first accumulation
  bool requires_grad = false;
  bool leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward_fn;

  Buffer& grad_buffer();
};

}  // namespace detail

/// Dense row-major tensor of doubles with reverse-mode autodiff lineage.
///
/// Tensor is a shared handle: copies alias the same storage, the way a
/// framework tensor does. Values are immutable once an op has consumed them;
/// only leaf tensors (parameters, optimizer-owned buffers) are mutated in place.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  /// Builds the output of a differentiable op. `backward` receives the output
  /// node and must accumulate into the nodes in `inputs` that require grad.
  /// Lineage is dropped when no input requires grad.
  static Tensor make_result(Shape shape, Buffer data,
                            std::vector<Tensor> inputs, const char* op,
                            std::function<void(detail::Node&)> backward);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t i) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const { return node().data.size(); }

  std::span<const double> data() const;
  /// In-place write access. Only valid for leaves.
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t i) const { return node().data[i]; }

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  /// Gradient view; all zeros when nothing has been accumulated.
  std::vector<double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// Same values, no lineage, no grad requirement.
  Tensor detach() const;
  Tensor clone() const;

  /// Reverse-mode sweep from a scalar. Leaf grads accumulate across calls.
  void backward() const;

  const char* op_name() const { return node().op; }
  detail::Node& node() const;
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

/// Test-only hook used to check that gradient verification catches a broken
/// backward rule. Production code never enables it.
namespace testing {
enum class FaultOp { none, softmax, gelu, conv2d, matmul, batch_norm };
void inject_backward_fault(FaultOp op);
FaultOp injected_backward_fault();
double fault_factor(FaultOp op);
}  // namespace testing

}  // namespace tfformer
