#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace clix {

// Dense row-major 64-bit float tensor.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<int> s, std::vector<double> d);

  static Tensor zeros(const std::vector<int>& shape);
  static Tensor full(const std::vector<int>& shape, double v);
  static Tensor scalar(double v);
  static Tensor row(const std::vector<double>& v);        // shape [n]
  static Tensor matrix(int n, int m, const std::vector<double>& v);

  int64_t numel() const;
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(shape.size()); }
  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  // 2D accessors.
  double& at(int i, int j) { return data[static_cast<size_t>(i) * shape[1] + j]; }
  double at(int i, int j) const { return data[static_cast<size_t>(i) * shape[1] + j]; }

  double item() const;  // single-element tensors
};

// Image-feature patch handle used by patch pooling: top-left pixel (u0, v0)
// and clipped extent in feature-map coordinates.
struct PatchRef {
  int u0 = 0;  // column of top-left
  int v0 = 0;  // row of top-left
  int w = 0;
  int h = 0;
  bool valid = false;
};

// Reverse-mode tape. Node ids are creation-ordered; backward replays the
// tape from the loss down and accumulates into leaf gradients.
class Tape {
 public:
  using Id = int32_t;

  Id leaf(Tensor value, bool requires_grad = false);

  Id add(Id a, Id b);
  Id sub(Id a, Id b);
  Id mul(Id a, Id b);                  // elementwise
  Id scale(Id a, double s);
  Id matmul(Id a, Id b);               // [n,k]x[k,m] -> [n,m]
  Id matmul_nt(Id a, Id b);            // [n,d]x[m,d]^T -> [n,m]
  Id linear(Id x, Id w, Id b);         // x[n,in], w[in,out], b[out]
  Id relu(Id x);
  Id sigmoid(Id x);
  Id sum(Id x);                        // -> [1]
  Id mean(Id x);                       // -> [1]
  Id reshape(Id x, const std::vector<int>& shape);
  Id concat_cols(Id a, Id b);          // [n,p],[n,q] -> [n,p+q]
  Id gather_rows(Id x, std::vector<int> rows);
  Id gather_elems(Id x, std::vector<int64_t> idx, std::vector<int> out_shape);
  Id segment_max(Id x, std::vector<int> seg_of_row, int n_segments);
  Id segment_mean(Id x, std::vector<int> seg_of_row, int n_segments);
  Id l2_normalize_rows(Id x, double eps = 1e-12);

  // 3x3 convolution over an [H,W,Cin] image, pad 1, returning
  // [ceil(H/stride), ceil(W/stride), Cout]. w is [3,3,Cin,Cout], b is [Cout].
  Id conv2d_3x3(Id img, Id w, Id b, int stride);

  // Mean over each patch of an [H,W,C] feature map -> [N,C].
  // Invalid patches produce zero rows (and receive no gradient).
  Id patch_pool(Id fmap, std::vector<PatchRef> patches);

  // Scalar losses. Constant targets/weights are captured by value.
  Id bce_logits(Id logits, Tensor targets, Tensor weights);        // sum w*bce
  Id softmax_xent(Id logits, std::vector<int> target, Tensor row_w);
  Id smooth_l1(Id pred, Tensor target, Tensor weights);            // sum w*huber
  // Pairwise sigmoid BCE on a similarity matrix: loss =
  //   sum_ij pos_w[ij] * -log(sigmoid(s_ij)) + neg_w[ij] * -log(1 - sigmoid(s_ij)).
  Id sigmoid_bce_pairs(Id sims, Tensor pos_w, Tensor neg_w);

  Id add_many(const std::vector<Id>& ids);  // scalar sum

  void backward(Id loss);
  const Tensor& value(Id id) const { return nodes_[static_cast<size_t>(id)].value; }
  const Tensor& grad(Id id) const { return nodes_[static_cast<size_t>(id)].grad; }
  bool requires_grad(Id id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::function<void()> backward;  // may be empty for leaves/constants
  };

  Id push(Tensor value, bool requires_grad, std::function<void()> backward);
  Tensor& grad_buf(Id id) { return nodes_[static_cast<size_t>(id)].grad; }

  std::vector<Node> nodes_;
};

}  // namespace clix
