#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "adafuse/rng.hpp"
#include "adafuse/tensor.hpp"

namespace adafuse {

enum class Mode { train, eval };

// Named tensor storage shared by all graphs built over one model. Trainable
// entries are parameters; non-trainable entries are buffers (batch-norm
// running statistics). Creation order is stable and seed-independent.
class ParamStore {
public:
    int create(const std::string& name, Tensor init, bool trainable = true);
    bool contains(const std::string& name) const { return index_.count(name) > 0; }
    int index_of(const std::string& name) const;

    Tensor& value(int idx) { return entries_[idx].value; }
    const Tensor& value(int idx) const { return entries_[idx].value; }
    Tensor& value(const std::string& name) { return entries_[index_of(name)].value; }
    const Tensor& value(const std::string& name) const { return entries_[index_of(name)].value; }

    bool trainable(int idx) const { return entries_[idx].trainable; }
    const std::string& name(int idx) const { return entries_[idx].name; }
    int size() const { return static_cast<int>(entries_.size()); }

    // Names in creation order, optionally filtered by prefix.
    std::vector<std::string> names(const std::string& prefix = "") const;

    // FNV-1a over names and raw bytes of matching entries; used by the
    // master/slave no-mutation assertions and the leakage audit.
    uint64_t fingerprint(const std::string& prefix = "") const;

private:
    struct Entry {
        std::string name;
        Tensor value;
        bool trainable;
    };
    std::vector<Entry> entries_;
    std::unordered_map<std::string, int> index_;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    long long checked = 0;
    // Elements whose +-eps window crosses a ReLU/max/clamp kink: the central
    // difference is undefined there, so they are excluded from the error.
    long long skipped_nonsmooth = 0;
    bool passed(double tol) const { return max_rel_err < tol; }
};

// Reverse-mode autodiff over an operation DAG. Nodes are appended in
// topological order and the topology is immutable once built; values are
// recomputed by run(). Dropout noise is sampled on the first train-mode run
// and frozen until reseed(), which keeps finite differencing and repeated
// forward passes consistent.
class Graph {
public:
    Graph(ParamStore& store, Mode mode, uint64_t seed = 0);

    Mode mode() const { return mode_; }
    ParamStore& store() { return store_; }

    // ---- leaves ----
    int input(const std::string& name, std::vector<int> shape);
    int param(const std::string& name);  // one node per name per graph
    int constant(Tensor value);

    // ---- primitives ----
    int matmul(int a, int b);
    int transpose(int a);
    int add(int a, int b);
    int sub(int a, int b);
    int mul(int a, int b);
    int add_bias(int a, int bias);              // [R x C] + [C]
    int affine(int a, double k, double c);      // k*x + c elementwise
    int scale(int a, double k) { return affine(a, k, 0.0); }
    int relu(int a);
    int sigmoid(int a);
    int exp(int a);
    int log(int a);
    int clamp(int a, double lo, double hi);
    int softmax_rows(int a, Tensor col_mask = {});
    int layer_norm(int a, int gamma, int beta, double eps = 1e-5);
    int batch_norm(int a, int gamma, int beta, const std::string& running_mean,
                   const std::string& running_var, double momentum = 0.1,
                   double eps = 1e-5, Tensor row_mask = {});
    int dropout(int a, double rate);
    int max_rows(int a, Tensor row_mask = {});   // max over rows -> [C]
    int mean_rows(int a, Tensor row_mask = {});  // mean over rows -> [C]
    int concat_rows(const std::vector<int>& parts);
    int concat_cols(const std::vector<int>& parts);
    int slice_rows(int a, int begin, int end);
    int slice_cols(int a, int begin, int end);
    int reshape(int a, std::vector<int> shape);  // same numel, new shape
    int sum_all(int a);    // -> [1]
    int mean_all(int a);   // -> [1]
    int sumsq(int a);      // -> [1]
    int frobenius_norm(int a);  // -> [1]
    int cosine_rows(int a, int b);  // rowwise cosine similarity -> [R]

    // ---- execution ----
    void bind(const std::string& input_name, Tensor value);
    void run();
    const Tensor& value(int node) const;
    const std::vector<int>& shape(int node) const;
    int node_count() const { return static_cast<int>(nodes_.size()); }

    // Gradients of a scalar loss w.r.t. every trainable parameter that has a
    // node in this graph; parameters unused by the loss get zero tensors.
    std::map<std::string, Tensor> backward(int loss_node);

    // Central-difference check of backward() against finite differences.
    GradCheckReport grad_check(int loss_node, double eps, double tol);

    // Distance from the last forward pass to the nearest non-smooth point:
    // |x| at ReLU inputs, top-2 gaps in max pooling, distance to clamp
    // boundaries. Finite differencing is only meaningful when this margin
    // comfortably exceeds eps times the local sensitivity.
    double kink_margin() const;

    void reseed(uint64_t seed);

    // Fault injection for the corrupted-gradient debug path: scales the
    // reported gradient of one parameter.
    void corrupt_gradient(const std::string& param_name, double factor);

private:
    enum class Op {
        Input, Param, Const,
        MatMul, Transpose, Add, Sub, Mul, AddBias, Affine, Relu, Sigmoid,
        Exp, Log, Clamp, SoftmaxRows, LayerNorm, BatchNorm, Dropout,
        MaxRows, MeanRows, ConcatRows, ConcatCols, SliceRows, SliceCols,
        Reshape, SumAll, MeanAll, SumSq, Frobenius, CosineRows
    };

    struct Node {
        Op op;
        std::vector<int> in;
        std::vector<int> shape;
        Tensor value;
        Tensor grad;
        double a0 = 0.0, a1 = 0.0;  // op scalars (k/c, lo/hi, rate, eps, momentum)
        int i0 = 0, i1 = 0;         // slice bounds, buffer indices
        Tensor mask;                // row/col validity mask (empty = all valid)
        Tensor ctx;                 // saved forward context (dropout mask, argmax, x-hat)
        Tensor ctx2;
        std::string label;          // inputs/params
        int param_idx = -1;
        bool bound = false;
        bool noise_sampled = false;
    };

    int push(Node n);
    const Node& node(int id) const { return nodes_[id]; }
    void check_id(int id) const;
    std::string desc(int id) const;
    void compute(int id);
    void backprop(int id);
    void ensure_ran() const;
    uint64_t activation_signature() const;  // hash of kink-side choices

    ParamStore& store_;
    Mode mode_;
    Rng rng_;
    bool noise_dirty_ = true;
    bool ran_ = false;
    std::vector<Node> nodes_;
    std::unordered_map<std::string, int> input_ids_;
    std::unordered_map<std::string, int> param_ids_;
    std::unordered_map<std::string, double> grad_corruption_;
};

}  // namespace adafuse
