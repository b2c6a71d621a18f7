#include "adafuse/graph.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

#include "adafuse/errors.hpp"

namespace adafuse {

namespace {

// Zero rows show up transiently during training (ReLU + dropout); the first
// few get a warning, the rest stay silent.
void warn_zero_cosine(int row) {
    static std::atomic<int> budget{5};
    const int left = budget.fetch_sub(1);
    if (left > 1) {
        warn("cosine_rows: zero vector in row " + std::to_string(row) +
             ", similarity defined as 0");
    } else if (left == 1) {
        warn("cosine_rows: zero vector in row " + std::to_string(row) +
             ", similarity defined as 0 (suppressing further zero-vector warnings)");
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// ParamStore
// ---------------------------------------------------------------------------

int ParamStore::create(const std::string& name, Tensor init, bool trainable) {
    if (contains(name)) throw GraphError("param store: duplicate entry '" + name + "'");
    if (!init.all_finite()) throw GraphError("param store: non-finite init for '" + name + "'");
    const int idx = static_cast<int>(entries_.size());
    entries_.push_back(Entry{name, std::move(init), trainable});
    index_[name] = idx;
    return idx;
}

int ParamStore::index_of(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw GraphError("param store: unknown entry '" + name + "'");
    return it->second;
}

std::vector<std::string> ParamStore::names(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& e : entries_)
        if (e.name.rfind(prefix, 0) == 0) out.push_back(e.name);
    return out;
}

uint64_t ParamStore::fingerprint(const std::string& prefix) const {
    uint64_t h = 0xcbf29ce484222325ull;
    auto mix = [&h](const void* p, size_t n) {
        const auto* bytes = static_cast<const unsigned char*>(p);
        for (size_t i = 0; i < n; ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ull;
        }
    };
    for (const auto& e : entries_) {
        if (e.name.rfind(prefix, 0) != 0) continue;
        mix(e.name.data(), e.name.size());
        mix(e.value.data.data(), e.value.data.size() * sizeof(double));
    }
    return h;
}

// ---------------------------------------------------------------------------
// Graph: construction
// ---------------------------------------------------------------------------

Graph::Graph(ParamStore& store, Mode mode, uint64_t seed)
    : store_(store), mode_(mode), rng_(seed) {
    nodes_.reserve(256);
}

void Graph::check_id(int id) const {
    if (id < 0 || id >= static_cast<int>(nodes_.size()))
        throw GraphError("graph: invalid node id " + std::to_string(id));
}

std::string Graph::desc(int id) const {
    static const char* names[] = {
        "input", "param", "const",
        "matmul", "transpose", "add", "sub", "mul", "add_bias", "affine", "relu",
        "sigmoid", "exp", "log", "clamp", "softmax_rows", "layer_norm", "batch_norm",
        "dropout", "max_rows", "mean_rows", "concat_rows", "concat_cols", "slice_rows",
        "slice_cols", "reshape", "sum_all", "mean_all", "sumsq", "frobenius", "cosine_rows"};
    const Node& n = nodes_[id];
    std::string s = std::string(names[static_cast<int>(n.op)]) + "#" + std::to_string(id);
    if (!n.label.empty()) s += "('" + n.label + "')";
    return s;
}

int Graph::push(Node n) {
    nodes_.push_back(std::move(n));
    ran_ = false;
    return static_cast<int>(nodes_.size()) - 1;
}

static void require_matrix(const std::vector<int>& shape, const std::string& what) {
    if (shape.size() != 2) throw GraphError(what + ": expected a rank-2 tensor");
}

int Graph::input(const std::string& name, std::vector<int> shape) {
    if (input_ids_.count(name)) throw GraphError("graph: duplicate input '" + name + "'");
    Node n;
    n.op = Op::Input;
    n.shape = std::move(shape);
    Tensor::numel_of(n.shape);
    n.label = name;
    const int id = push(std::move(n));
    input_ids_[name] = id;
    return id;
}

int Graph::param(const std::string& name) {
    const auto it = param_ids_.find(name);
    if (it != param_ids_.end()) return it->second;
    const int idx = store_.index_of(name);
    Node n;
    n.op = Op::Param;
    n.shape = store_.value(idx).shape;
    n.label = name;
    n.param_idx = idx;
    const int id = push(std::move(n));
    param_ids_[name] = id;
    return id;
}

int Graph::constant(Tensor value) {
    Node n;
    n.op = Op::Const;
    n.shape = value.shape;
    n.value = std::move(value);
    if (!n.value.all_finite()) throw GraphError("graph: non-finite constant");
    return push(std::move(n));
}

// ---------------------------------------------------------------------------
// Graph: op builders (shape validation happens here, at build time)
// ---------------------------------------------------------------------------

int Graph::matmul(int a, int b) {
    check_id(a);
    check_id(b);
    const auto& sa = nodes_[a].shape;
    const auto& sb = nodes_[b].shape;
    require_matrix(sa, "matmul lhs " + desc(a));
    require_matrix(sb, "matmul rhs " + desc(b));
    if (sa[1] != sb[0])
        throw GraphError("matmul: inner dims differ, " + desc(a) + " is " +
                         std::to_string(sa[1]) + " vs " + desc(b) + " is " +
                         std::to_string(sb[0]));
    Node n;
    n.op = Op::MatMul;
    n.in = {a, b};
    n.shape = {sa[0], sb[1]};
    return push(std::move(n));
}

int Graph::transpose(int a) {
    check_id(a);
    require_matrix(nodes_[a].shape, "transpose " + desc(a));
    Node n;
    n.op = Op::Transpose;
    n.in = {a};
    n.shape = {nodes_[a].shape[1], nodes_[a].shape[0]};
    return push(std::move(n));
}

static void require_same_shape(const std::vector<int>& a, const std::vector<int>& b,
                               const std::string& what) {
    if (a != b) throw GraphError(what + ": shape mismatch");
}

int Graph::add(int a, int b) {
    check_id(a);
    check_id(b);
    require_same_shape(nodes_[a].shape, nodes_[b].shape, "add(" + desc(a) + "," + desc(b) + ")");
    Node n;
    n.op = Op::Add;
    n.in = {a, b};
    n.shape = nodes_[a].shape;
    return push(std::move(n));
}

int Graph::sub(int a, int b) {
    check_id(a);
    check_id(b);
    require_same_shape(nodes_[a].shape, nodes_[b].shape, "sub(" + desc(a) + "," + desc(b) + ")");
    Node n;
    n.op = Op::Sub;
    n.in = {a, b};
    n.shape = nodes_[a].shape;
    return push(std::move(n));
}

int Graph::mul(int a, int b) {
    check_id(a);
    check_id(b);
    require_same_shape(nodes_[a].shape, nodes_[b].shape, "mul(" + desc(a) + "," + desc(b) + ")");
    Node n;
    n.op = Op::Mul;
    n.in = {a, b};
    n.shape = nodes_[a].shape;
    return push(std::move(n));
}

int Graph::add_bias(int a, int bias) {
    check_id(a);
    check_id(bias);
    require_matrix(nodes_[a].shape, "add_bias " + desc(a));
    const auto& sb = nodes_[bias].shape;
    if (sb.size() != 1 || sb[0] != nodes_[a].shape[1])
        throw GraphError("add_bias: bias " + desc(bias) + " must be [cols] of " + desc(a));
    Node n;
    n.op = Op::AddBias;
    n.in = {a, bias};
    n.shape = nodes_[a].shape;
    return push(std::move(n));
}

int Graph::affine(int a, double k, double c) {
    check_id(a);
    Node n;
    n.op = Op::Affine;
    n.in = {a};
    n.shape = nodes_[a].shape;
    n.a0 = k;
    n.a1 = c;
    return push(std::move(n));
}

int Graph::relu(int a) {
    check_id(a);
    Node n;
    n.op = Op::Relu;
    n.in = {a};
    n.shape = nodes_[a].shape;
    return push(std::move(n));
}

int Graph::sigmoid(int a) {
    check_id(a);
    Node n;
    n.op = Op::Sigmoid;
    n.in = {a};
    n.shape = nodes_[a].shape;
    return push(std::move(n));
}

int Graph::exp(int a) {
    check_id(a);
    Node n;
    n.op = Op::Exp;
    n.in = {a};
    n.shape = nodes_[a].shape;
    return push(std::move(n));
}

int Graph::log(int a) {
    check_id(a);
    Node n;
    n.op = Op::Log;
    n.in = {a};
    n.shape = nodes_[a].shape;
    return push(std::move(n));
}

int Graph::clamp(int a, double lo, double hi) {
    check_id(a);
    if (!(lo < hi)) throw GraphError("clamp: lo must be < hi");
    Node n;
    n.op = Op::Clamp;
    n.in = {a};
    n.shape = nodes_[a].shape;
    n.a0 = lo;
    n.a1 = hi;
    return push(std::move(n));
}

static void validate_mask(const Tensor& mask, int len, const std::string& what) {
    if (mask.data.empty()) return;
    if (mask.numel() != len)
        throw GraphError(what + ": mask length " + std::to_string(mask.numel()) +
                         " does not match " + std::to_string(len));
    int valid = 0;
    for (const double v : mask.data) {
        if (v != 0.0 && v != 1.0) throw GraphError(what + ": mask entries must be 0 or 1");
        valid += v == 1.0;
    }
    if (valid == 0) throw GraphError(what + ": all positions masked");
}

int Graph::softmax_rows(int a, Tensor col_mask) {
    check_id(a);
    require_matrix(nodes_[a].shape, "softmax_rows " + desc(a));
    validate_mask(col_mask, nodes_[a].shape[1], "softmax_rows " + desc(a));
    Node n;
    n.op = Op::SoftmaxRows;
    n.in = {a};
    n.shape = nodes_[a].shape;
    n.mask = std::move(col_mask);
    return push(std::move(n));
}

int Graph::layer_norm(int a, int gamma, int beta, double eps) {
    check_id(a);
    check_id(gamma);
    check_id(beta);
    require_matrix(nodes_[a].shape, "layer_norm " + desc(a));
    const int c = nodes_[a].shape[1];
    if (nodes_[gamma].shape != std::vector<int>{c} || nodes_[beta].shape != std::vector<int>{c})
        throw GraphError("layer_norm: gamma/beta must be [cols] of " + desc(a));
    Node n;
    n.op = Op::LayerNorm;
    n.in = {a, gamma, beta};
    n.shape = nodes_[a].shape;
    n.a0 = eps;
    return push(std::move(n));
}

int Graph::batch_norm(int a, int gamma, int beta, const std::string& running_mean,
                      const std::string& running_var, double momentum, double eps,
                      Tensor row_mask) {
    check_id(a);
    check_id(gamma);
    check_id(beta);
    require_matrix(nodes_[a].shape, "batch_norm " + desc(a));
    const int c = nodes_[a].shape[1];
    if (nodes_[gamma].shape != std::vector<int>{c} || nodes_[beta].shape != std::vector<int>{c})
        throw GraphError("batch_norm: gamma/beta must be [cols] of " + desc(a));
    const int rm = store_.index_of(running_mean);
    const int rv = store_.index_of(running_var);
    if (store_.value(rm).shape != std::vector<int>{c} ||
        store_.value(rv).shape != std::vector<int>{c})
        throw GraphError("batch_norm: running stats must be [cols] of " + desc(a));
    if (store_.trainable(rm) || store_.trainable(rv))
        throw GraphError("batch_norm: running stats must be non-trainable buffers");
    validate_mask(row_mask, nodes_[a].shape[0], "batch_norm " + desc(a));
    Node n;
    n.op = Op::BatchNorm;
    n.in = {a, gamma, beta};
    n.shape = nodes_[a].shape;
    n.a0 = momentum;
    n.a1 = eps;
    n.i0 = rm;
    n.i1 = rv;
    n.mask = std::move(row_mask);
    return push(std::move(n));
}

int Graph::dropout(int a, double rate) {
    check_id(a);
    if (rate < 0.0 || rate >= 1.0) throw GraphError("dropout: rate must be in [0,1)");
    Node n;
    n.op = Op::Dropout;
    n.in = {a};
    n.shape = nodes_[a].shape;
    n.a0 = rate;
    return push(std::move(n));
}

int Graph::max_rows(int a, Tensor row_mask) {
    check_id(a);
    require_matrix(nodes_[a].shape, "max_rows " + desc(a));
    validate_mask(row_mask, nodes_[a].shape[0], "max_rows " + desc(a));
    Node n;
    n.op = Op::MaxRows;
    n.in = {a};
    n.shape = {nodes_[a].shape[1]};
    n.mask = std::move(row_mask);
    return push(std::move(n));
}

int Graph::mean_rows(int a, Tensor row_mask) {
    check_id(a);
    require_matrix(nodes_[a].shape, "mean_rows " + desc(a));
    validate_mask(row_mask, nodes_[a].shape[0], "mean_rows " + desc(a));
    Node n;
    n.op = Op::MeanRows;
    n.in = {a};
    n.shape = {nodes_[a].shape[1]};
    n.mask = std::move(row_mask);
    return push(std::move(n));
}

int Graph::concat_rows(const std::vector<int>& parts) {
    if (parts.empty()) throw GraphError("concat_rows: no inputs");
    int total = 0;
    int cols = -1;
    for (const int p : parts) {
        check_id(p);
        require_matrix(nodes_[p].shape, "concat_rows " + desc(p));
        if (cols < 0) cols = nodes_[p].shape[1];
        if (nodes_[p].shape[1] != cols)
            throw GraphError("concat_rows: column mismatch at " + desc(p));
        total += nodes_[p].shape[0];
    }
    Node n;
    n.op = Op::ConcatRows;
    n.in = parts;
    n.shape = {total, cols};
    return push(std::move(n));
}

int Graph::concat_cols(const std::vector<int>& parts) {
    if (parts.empty()) throw GraphError("concat_cols: no inputs");
    int total = 0;
    int rows = -1;
    for (const int p : parts) {
        check_id(p);
        require_matrix(nodes_[p].shape, "concat_cols " + desc(p));
        if (rows < 0) rows = nodes_[p].shape[0];
        if (nodes_[p].shape[0] != rows)
            throw GraphError("concat_cols: row mismatch at " + desc(p));
        total += nodes_[p].shape[1];
    }
    Node n;
    n.op = Op::ConcatCols;
    n.in = parts;
    n.shape = {rows, total};
    return push(std::move(n));
}

int Graph::slice_rows(int a, int begin, int end) {
    check_id(a);
    require_matrix(nodes_[a].shape, "slice_rows " + desc(a));
    if (begin < 0 || end > nodes_[a].shape[0] || begin >= end)
        throw GraphError("slice_rows: bad range for " + desc(a));
    Node n;
    n.op = Op::SliceRows;
    n.in = {a};
    n.shape = {end - begin, nodes_[a].shape[1]};
    n.i0 = begin;
    n.i1 = end;
    return push(std::move(n));
}

int Graph::slice_cols(int a, int begin, int end) {
    check_id(a);
    require_matrix(nodes_[a].shape, "slice_cols " + desc(a));
    if (begin < 0 || end > nodes_[a].shape[1] || begin >= end)
        throw GraphError("slice_cols: bad range for " + desc(a));
    Node n;
    n.op = Op::SliceCols;
    n.in = {a};
    n.shape = {nodes_[a].shape[0], end - begin};
    n.i0 = begin;
    n.i1 = end;
    return push(std::move(n));
}

int Graph::reshape(int a, std::vector<int> shape) {
    check_id(a);
    if (Tensor::numel_of(shape) != Tensor::numel_of(nodes_[a].shape))
        throw GraphError("reshape: numel mismatch for " + desc(a));
    Node n;
    n.op = Op::Reshape;
    n.in = {a};
    n.shape = std::move(shape);
    return push(std::move(n));
}

int Graph::sum_all(int a) {
    check_id(a);
    Node n;
    n.op = Op::SumAll;
    n.in = {a};
    n.shape = {1};
    return push(std::move(n));
}

int Graph::mean_all(int a) {
    check_id(a);
    Node n;
    n.op = Op::MeanAll;
    n.in = {a};
    n.shape = {1};
    return push(std::move(n));
}

int Graph::sumsq(int a) {
    check_id(a);
    Node n;
    n.op = Op::SumSq;
    n.in = {a};
    n.shape = {1};
    return push(std::move(n));
}

int Graph::frobenius_norm(int a) {
    check_id(a);
    Node n;
    n.op = Op::Frobenius;
    n.in = {a};
    n.shape = {1};
    return push(std::move(n));
}

int Graph::cosine_rows(int a, int b) {
    check_id(a);
    check_id(b);
    require_matrix(nodes_[a].shape, "cosine_rows " + desc(a));
    require_same_shape(nodes_[a].shape, nodes_[b].shape,
                       "cosine_rows(" + desc(a) + "," + desc(b) + ")");
    Node n;
    n.op = Op::CosineRows;
    n.in = {a, b};
    n.shape = {nodes_[a].shape[0]};
    return push(std::move(n));
}

// ---------------------------------------------------------------------------
// Graph: execution
// ---------------------------------------------------------------------------

void Graph::bind(const std::string& input_name, Tensor value) {
    const auto it = input_ids_.find(input_name);
    if (it == input_ids_.end()) throw GraphError("graph: no input named '" + input_name + "'");
    Node& n = nodes_[it->second];
    if (value.shape != n.shape)
        throw GraphError("graph: bound value for '" + input_name + "' has shape " +
                         value.shape_str() + ", declared " + Tensor(n.shape).shape_str());
    if (!value.all_finite())
        throw GraphError("graph: non-finite value bound to '" + input_name + "'");
    n.value = std::move(value);
    n.bound = true;
}

void Graph::reseed(uint64_t seed) {
    rng_.reseed(seed);
    noise_dirty_ = true;
}

void Graph::run() {
    for (int id = 0; id < static_cast<int>(nodes_.size()); ++id) {
        compute(id);
        if (!nodes_[id].value.all_finite())
            throw GraphError("graph: non-finite value at " + desc(id));
    }
    noise_dirty_ = false;
    ran_ = true;
}

void Graph::ensure_ran() const {
    if (!ran_) throw GraphError("graph: run() must be called first");
}

const Tensor& Graph::value(int id) const {
    check_id(id);
    ensure_ran();
    return nodes_[id].value;
}

const std::vector<int>& Graph::shape(int id) const {
    check_id(id);
    return nodes_[id].shape;
}

void Graph::compute(int id) {
    Node& n = nodes_[id];
    const auto in = [&](int k) -> const Tensor& { return nodes_[n.in[k]].value; };

    switch (n.op) {
        case Op::Input:
            if (!n.bound) throw GraphError("graph: unbound input " + desc(id));
            return;
        case Op::Param:
            n.value = store_.value(n.param_idx);
            return;
        case Op::Const:
            return;
        case Op::MatMul: {
            const Tensor& A = in(0);
            const Tensor& B = in(1);
            const int M = A.shape[0], K = A.shape[1], N = B.shape[1];
            n.value = Tensor({M, N});
            for (int i = 0; i < M; ++i) {
                const double* arow = &A.data[static_cast<size_t>(i) * K];
                double* crow = &n.value.data[static_cast<size_t>(i) * N];
                for (int k = 0; k < K; ++k) {
                    const double a = arow[k];
                    if (a == 0.0) continue;
                    const double* brow = &B.data[static_cast<size_t>(k) * N];
                    for (int j = 0; j < N; ++j) crow[j] += a * brow[j];
                }
            }
            return;
        }
        case Op::Transpose: {
            const Tensor& A = in(0);
            n.value = Tensor(n.shape);
            for (int i = 0; i < A.shape[0]; ++i)
                for (int j = 0; j < A.shape[1]; ++j) n.value.at(j, i) = A.at(i, j);
            return;
        }
        case Op::Add: {
            const Tensor& A = in(0);
            const Tensor& B = in(1);
            n.value = A;
            for (size_t i = 0; i < n.value.data.size(); ++i) n.value.data[i] += B.data[i];
            return;
        }
        case Op::Sub: {
            const Tensor& A = in(0);
            const Tensor& B = in(1);
            n.value = A;
            for (size_t i = 0; i < n.value.data.size(); ++i) n.value.data[i] -= B.data[i];
            return;
        }
        case Op::Mul: {
            const Tensor& A = in(0);
            const Tensor& B = in(1);
            n.value = A;
            for (size_t i = 0; i < n.value.data.size(); ++i) n.value.data[i] *= B.data[i];
            return;
        }
        case Op::AddBias: {
            const Tensor& A = in(0);
            const Tensor& b = in(1);
            const int R = A.shape[0], C = A.shape[1];
            n.value = A;
            for (int i = 0; i < R; ++i)
                for (int j = 0; j < C; ++j) n.value.at(i, j) += b.data[j];
            return;
        }
        case Op::Affine: {
            const Tensor& A = in(0);
            n.value = A;
            for (double& v : n.value.data) v = n.a0 * v + n.a1;
            return;
        }
        case Op::Relu: {
            n.value = in(0);
            for (double& v : n.value.data) v = v > 0.0 ? v : 0.0;
            return;
        }
        case Op::Sigmoid: {
            n.value = in(0);
            for (double& v : n.value.data) v = 1.0 / (1.0 + std::exp(-v));
            return;
        }
        case Op::Exp: {
            n.value = in(0);
            for (double& v : n.value.data) v = std::exp(v);
            return;
        }
        case Op::Log: {
            n.value = in(0);
            for (double& v : n.value.data) v = std::log(v);
            return;
        }
        case Op::Clamp: {
            n.value = in(0);
            for (double& v : n.value.data) v = std::min(std::max(v, n.a0), n.a1);
            return;
        }
        case Op::SoftmaxRows: {
            const Tensor& A = in(0);
            const int R = A.shape[0], C = A.shape[1];
            n.value = Tensor({R, C});
            const bool masked = !n.mask.data.empty();
            for (int i = 0; i < R; ++i) {
                double mx = -1e300;
                for (int j = 0; j < C; ++j)
                    if (!masked || n.mask.data[j] == 1.0) mx = std::max(mx, A.at(i, j));
                double sum = 0.0;
                for (int j = 0; j < C; ++j) {
                    if (masked && n.mask.data[j] != 1.0) continue;
                    const double e = std::exp(A.at(i, j) - mx);
                    n.value.at(i, j) = e;
                    sum += e;
                }
                for (int j = 0; j < C; ++j) n.value.at(i, j) /= sum;
            }
            return;
        }
        case Op::LayerNorm: {
            const Tensor& A = in(0);
            const Tensor& g = in(1);
            const Tensor& b = in(2);
            const int R = A.shape[0], C = A.shape[1];
            n.value = Tensor({R, C});
            n.ctx = Tensor({R, C});   // x-hat
            n.ctx2 = Tensor({R});     // inv std
            for (int i = 0; i < R; ++i) {
                double mean = 0.0;
                for (int j = 0; j < C; ++j) mean += A.at(i, j);
                mean /= C;
                double var = 0.0;
                for (int j = 0; j < C; ++j) {
                    const double d = A.at(i, j) - mean;
                    var += d * d;
                }
                var /= C;
                const double inv = 1.0 / std::sqrt(var + n.a0);
                n.ctx2.data[i] = inv;
                for (int j = 0; j < C; ++j) {
                    const double xh = (A.at(i, j) - mean) * inv;
                    n.ctx.at(i, j) = xh;
                    n.value.at(i, j) = g.data[j] * xh + b.data[j];
                }
            }
            return;
        }
        case Op::BatchNorm: {
            const Tensor& A = in(0);
            const Tensor& g = in(1);
            const Tensor& b = in(2);
            const int R = A.shape[0], C = A.shape[1];
            const bool masked = !n.mask.data.empty();
            n.value = Tensor({R, C});
            n.ctx = Tensor({R, C});  // x-hat
            n.ctx2 = Tensor({2, C}); // per-column mean, inv std actually used
            if (mode_ == Mode::train) {
                double count = 0.0;
                for (int i = 0; i < R; ++i)
                    if (!masked || n.mask.data[i] == 1.0) count += 1.0;
                Tensor& rm = store_.value(n.i0);
                Tensor& rv = store_.value(n.i1);
                for (int j = 0; j < C; ++j) {
                    double mean = 0.0;
                    for (int i = 0; i < R; ++i)
                        if (!masked || n.mask.data[i] == 1.0) mean += A.at(i, j);
                    mean /= count;
                    double var = 0.0;
                    for (int i = 0; i < R; ++i)
                        if (!masked || n.mask.data[i] == 1.0) {
                            const double d = A.at(i, j) - mean;
                            var += d * d;
                        }
                    var /= count;
                    const double inv = 1.0 / std::sqrt(var + n.a1);
                    n.ctx2.at(0, j) = mean;
                    n.ctx2.at(1, j) = inv;
                    for (int i = 0; i < R; ++i) {
                        const double xh = (A.at(i, j) - mean) * inv;
                        n.ctx.at(i, j) = xh;
                        n.value.at(i, j) = g.data[j] * xh + b.data[j];
                    }
                    const double unbiased = count > 1.5 ? var * count / (count - 1.0) : var;
                    rm.data[j] = (1.0 - n.a0) * rm.data[j] + n.a0 * mean;
                    rv.data[j] = (1.0 - n.a0) * rv.data[j] + n.a0 * unbiased;
                }
            } else {
                const Tensor& rm = store_.value(n.i0);
                const Tensor& rv = store_.value(n.i1);
                for (int j = 0; j < C; ++j) {
                    const double inv = 1.0 / std::sqrt(rv.data[j] + n.a1);
                    n.ctx2.at(0, j) = rm.data[j];
                    n.ctx2.at(1, j) = inv;
                    for (int i = 0; i < R; ++i) {
                        const double xh = (A.at(i, j) - rm.data[j]) * inv;
                        n.ctx.at(i, j) = xh;
                        n.value.at(i, j) = g.data[j] * xh + b.data[j];
                    }
                }
            }
            return;
        }
        case Op::Dropout: {
            const Tensor& A = in(0);
            if (mode_ == Mode::eval || n.a0 == 0.0) {
                n.value = A;
                return;
            }
            if (!n.noise_sampled || noise_dirty_) {
                n.ctx = Tensor(A.shape);
                for (double& m : n.ctx.data) m = rng_.uniform() >= n.a0 ? 1.0 : 0.0;
                n.noise_sampled = true;
            }
            const double keep = 1.0 - n.a0;
            n.value = A;
            for (size_t i = 0; i < n.value.data.size(); ++i)
                n.value.data[i] *= n.ctx.data[i] / keep;
            return;
        }
        case Op::MaxRows: {
            const Tensor& A = in(0);
            const int R = A.shape[0], C = A.shape[1];
            const bool masked = !n.mask.data.empty();
            n.value = Tensor({C});
            n.ctx = Tensor({C});  // argmax row per column
            for (int j = 0; j < C; ++j) {
                int arg = -1;
                double best = 0.0;
                for (int i = 0; i < R; ++i) {
                    if (masked && n.mask.data[i] != 1.0) continue;
                    const double v = A.at(i, j);
                    if (arg < 0 || v > best) {
                        arg = i;
                        best = v;
                    }
                }
                n.value.data[j] = best;
                n.ctx.data[j] = arg;
            }
            return;
        }
        case Op::MeanRows: {
            const Tensor& A = in(0);
            const int R = A.shape[0], C = A.shape[1];
            const bool masked = !n.mask.data.empty();
            double count = 0.0;
            for (int i = 0; i < R; ++i)
                if (!masked || n.mask.data[i] == 1.0) count += 1.0;
            n.value = Tensor({C});
            for (int j = 0; j < C; ++j) {
                double s = 0.0;
                for (int i = 0; i < R; ++i)
                    if (!masked || n.mask.data[i] == 1.0) s += A.at(i, j);
                n.value.data[j] = s / count;
            }
            return;
        }
        case Op::ConcatRows: {
            n.value = Tensor(n.shape);
            int row = 0;
            for (const int p : n.in) {
                const Tensor& part = nodes_[p].value;
                std::copy(part.data.begin(), part.data.end(),
                          n.value.data.begin() + static_cast<size_t>(row) * n.shape[1]);
                row += part.shape[0];
            }
            return;
        }
        case Op::ConcatCols: {
            n.value = Tensor(n.shape);
            int col = 0;
            for (const int p : n.in) {
                const Tensor& part = nodes_[p].value;
                const int pc = part.shape[1];
                for (int i = 0; i < n.shape[0]; ++i)
                    for (int j = 0; j < pc; ++j) n.value.at(i, col + j) = part.at(i, j);
                col += pc;
            }
            return;
        }
        case Op::SliceRows: {
            const Tensor& A = in(0);
            n.value = Tensor(n.shape);
            const int C = A.shape[1];
            std::copy(A.data.begin() + static_cast<size_t>(n.i0) * C,
                      A.data.begin() + static_cast<size_t>(n.i1) * C, n.value.data.begin());
            return;
        }
        case Op::SliceCols: {
            const Tensor& A = in(0);
            n.value = Tensor(n.shape);
            for (int i = 0; i < n.shape[0]; ++i)
                for (int j = 0; j < n.shape[1]; ++j) n.value.at(i, j) = A.at(i, n.i0 + j);
            return;
        }
        case Op::Reshape: {
            n.value = in(0);
            n.value.shape = n.shape;
            return;
        }
        case Op::SumAll: {
            double s = 0.0;
            for (const double v : in(0).data) s += v;
            n.value = Tensor::scalar(s);
            return;
        }
        case Op::MeanAll: {
            double s = 0.0;
            for (const double v : in(0).data) s += v;
            n.value = Tensor::scalar(s / static_cast<double>(in(0).numel()));
            return;
        }
        case Op::SumSq: {
            double s = 0.0;
            for (const double v : in(0).data) s += v * v;
            n.value = Tensor::scalar(s);
            return;
        }
        case Op::Frobenius: {
            double s = 0.0;
            for (const double v : in(0).data) s += v * v;
            n.value = Tensor::scalar(std::sqrt(s));
            return;
        }
        case Op::CosineRows: {
            const Tensor& A = in(0);
            const Tensor& B = in(1);
            const int R = A.shape[0], C = A.shape[1];
            n.value = Tensor({R});
            for (int i = 0; i < R; ++i) {
                double dot = 0.0, na = 0.0, nb = 0.0;
                for (int j = 0; j < C; ++j) {
                    dot += A.at(i, j) * B.at(i, j);
                    na += A.at(i, j) * A.at(i, j);
                    nb += B.at(i, j) * B.at(i, j);
                }
                if (na == 0.0 || nb == 0.0) {
                    warn_zero_cosine(i);
                    n.value.data[i] = 0.0;
                } else {
                    n.value.data[i] = dot / (std::sqrt(na) * std::sqrt(nb));
                }
            }
            return;
        }
    }
    throw GraphError("graph: unhandled op in compute");
}

// ---------------------------------------------------------------------------
// Graph: backward
// ---------------------------------------------------------------------------

void Graph::backprop(int id) {
    Node& n = nodes_[id];
    if (n.grad.data.empty()) return;  // no gradient flowed here
    const Tensor& G = n.grad;
    auto grad_of = [&](int k) -> Tensor& {
        Node& src = nodes_[n.in[k]];
        if (src.grad.data.empty()) src.grad = Tensor(src.shape);
        return src.grad;
    };
    const auto in = [&](int k) -> const Tensor& { return nodes_[n.in[k]].value; };

    switch (n.op) {
        case Op::Input:
        case Op::Param:
        case Op::Const:
            return;
        case Op::MatMul: {
            const Tensor& A = in(0);
            const Tensor& B = in(1);
            Tensor& dA = grad_of(0);
            Tensor& dB = grad_of(1);
            const int M = A.shape[0], K = A.shape[1], N = B.shape[1];
            // dA += G * B^T
            for (int i = 0; i < M; ++i)
                for (int k = 0; k < K; ++k) {
                    double s = 0.0;
                    const double* grow = &G.data[static_cast<size_t>(i) * N];
                    const double* brow = &B.data[static_cast<size_t>(k) * N];
                    for (int j = 0; j < N; ++j) s += grow[j] * brow[j];
                    dA.at(i, k) += s;
                }
            // dB += A^T * G
            for (int i = 0; i < M; ++i) {
                const double* arow = &A.data[static_cast<size_t>(i) * K];
                const double* grow = &G.data[static_cast<size_t>(i) * N];
                for (int k = 0; k < K; ++k) {
                    const double a = arow[k];
                    if (a == 0.0) continue;
                    double* drow = &dB.data[static_cast<size_t>(k) * N];
                    for (int j = 0; j < N; ++j) drow[j] += a * grow[j];
                }
            }
            return;
        }
        case Op::Transpose: {
            Tensor& dA = grad_of(0);
            for (int i = 0; i < n.shape[0]; ++i)
                for (int j = 0; j < n.shape[1]; ++j) dA.at(j, i) += G.at(i, j);
            return;
        }
        case Op::Add: {
            Tensor& dA = grad_of(0);
            Tensor& dB = grad_of(1);
            for (size_t i = 0; i < G.data.size(); ++i) {
                dA.data[i] += G.data[i];
                dB.data[i] += G.data[i];
            }
            return;
        }
        case Op::Sub: {
            Tensor& dA = grad_of(0);
            Tensor& dB = grad_of(1);
            for (size_t i = 0; i < G.data.size(); ++i) {
                dA.data[i] += G.data[i];
                dB.data[i] -= G.data[i];
            }
            return;
        }
        case Op::Mul: {
            const Tensor& A = in(0);
            const Tensor& B = in(1);
            Tensor& dA = grad_of(0);
            Tensor& dB = grad_of(1);
            for (size_t i = 0; i < G.data.size(); ++i) {
                dA.data[i] += G.data[i] * B.data[i];
                dB.data[i] += G.data[i] * A.data[i];
            }
            return;
        }
        case Op::AddBias: {
            Tensor& dA = grad_of(0);
            Tensor& db = grad_of(1);
            const int R = n.shape[0], C = n.shape[1];
            for (int i = 0; i < R; ++i)
                for (int j = 0; j < C; ++j) {
                    dA.at(i, j) += G.at(i, j);
                    db.data[j] += G.at(i, j);
                }
            return;
        }
        case Op::Affine: {
            Tensor& dA = grad_of(0);
            for (size_t i = 0; i < G.data.size(); ++i) dA.data[i] += n.a0 * G.data[i];
            return;
        }
        case Op::Relu: {
            const Tensor& A = in(0);
            Tensor& dA = grad_of(0);
            for (size_t i = 0; i < G.data.size(); ++i)
                if (A.data[i] > 0.0) dA.data[i] += G.data[i];
            return;
        }
        case Op::Sigmoid: {
            Tensor& dA = grad_of(0);
            for (size_t i = 0; i < G.data.size(); ++i) {
                const double s = n.value.data[i];
                dA.data[i] += G.data[i] * s * (1.0 - s);
            }
            return;
        }
        case Op::Exp: {
            Tensor& dA = grad_of(0);
            for (size_t i = 0; i < G.data.size(); ++i)
                dA.data[i] += G.data[i] * n.value.data[i];
            return;
        }
        case Op::Log: {
            const Tensor& A = in(0);
            Tensor& dA = grad_of(0);
            for (size_t i = 0; i < G.data.size(); ++i) dA.data[i] += G.data[i] / A.data[i];
            return;
        }
        case Op::Clamp: {
            const Tensor& A = in(0);
            Tensor& dA = grad_of(0);
            for (size_t i = 0; i < G.data.size(); ++i)
                if (A.data[i] >= n.a0 && A.data[i] <= n.a1) dA.data[i] += G.data[i];
            return;
        }
        case Op::SoftmaxRows: {
            Tensor& dA = grad_of(0);
            const int R = n.shape[0], C = n.shape[1];
            const bool masked = !n.mask.data.empty();
            for (int i = 0; i < R; ++i) {
                double dot = 0.0;
                for (int j = 0; j < C; ++j) {
                    if (masked && n.mask.data[j] != 1.0) continue;
                    dot += G.at(i, j) * n.value.at(i, j);
                }
                for (int j = 0; j < C; ++j) {
                    if (masked && n.mask.data[j] != 1.0) continue;
                    dA.at(i, j) += n.value.at(i, j) * (G.at(i, j) - dot);
                }
            }
            return;
        }
        case Op::LayerNorm: {
            const Tensor& g = in(1);
            Tensor& dA = grad_of(0);
            Tensor& dg = grad_of(1);
            Tensor& db = grad_of(2);
            const int R = n.shape[0], C = n.shape[1];
            for (int i = 0; i < R; ++i) {
                double mean_h = 0.0, mean_hx = 0.0;
                for (int j = 0; j < C; ++j) {
                    const double h = G.at(i, j) * g.data[j];
                    mean_h += h;
                    mean_hx += h * n.ctx.at(i, j);
                    dg.data[j] += G.at(i, j) * n.ctx.at(i, j);
                    db.data[j] += G.at(i, j);
                }
                mean_h /= C;
                mean_hx /= C;
                const double inv = n.ctx2.data[i];
                for (int j = 0; j < C; ++j) {
                    const double h = G.at(i, j) * g.data[j];
                    dA.at(i, j) += inv * (h - mean_h - n.ctx.at(i, j) * mean_hx);
                }
            }
            return;
        }
        case Op::BatchNorm: {
            const Tensor& g = in(1);
            Tensor& dA = grad_of(0);
            Tensor& dg = grad_of(1);
            Tensor& db = grad_of(2);
            const int R = n.shape[0], C = n.shape[1];
            const bool masked = !n.mask.data.empty();
            for (int j = 0; j < C; ++j)
                for (int i = 0; i < R; ++i) {
                    dg.data[j] += G.at(i, j) * n.ctx.at(i, j);
                    db.data[j] += G.at(i, j);
                }
            if (mode_ == Mode::eval) {
                for (int j = 0; j < C; ++j) {
                    const double k = g.data[j] * n.ctx2.at(1, j);
                    for (int i = 0; i < R; ++i) dA.at(i, j) += k * G.at(i, j);
                }
                return;
            }
            double count = 0.0;
            for (int i = 0; i < R; ++i)
                if (!masked || n.mask.data[i] == 1.0) count += 1.0;
            for (int j = 0; j < C; ++j) {
                double sum_g = 0.0, sum_gx = 0.0;
                for (int i = 0; i < R; ++i) {
                    sum_g += G.at(i, j);
                    sum_gx += G.at(i, j) * n.ctx.at(i, j);
                }
                const double k = g.data[j] * n.ctx2.at(1, j);
                for (int i = 0; i < R; ++i) {
                    double d = G.at(i, j);
                    if (!masked || n.mask.data[i] == 1.0)
                        d -= (sum_g + n.ctx.at(i, j) * sum_gx) / count;
                    dA.at(i, j) += k * d;
                }
            }
            return;
        }
        case Op::Dropout: {
            Tensor& dA = grad_of(0);
            if (mode_ == Mode::eval || n.a0 == 0.0) {
                for (size_t i = 0; i < G.data.size(); ++i) dA.data[i] += G.data[i];
                return;
            }
            const double keep = 1.0 - n.a0;
            for (size_t i = 0; i < G.data.size(); ++i)
                dA.data[i] += G.data[i] * n.ctx.data[i] / keep;
            return;
        }
        case Op::MaxRows: {
            Tensor& dA = grad_of(0);
            const int C = n.shape[0];
            for (int j = 0; j < C; ++j) {
                const int arg = static_cast<int>(n.ctx.data[j]);
                dA.at(arg, j) += G.data[j];
            }
            return;
        }
        case Op::MeanRows: {
            Tensor& dA = grad_of(0);
            const int R = nodes_[n.in[0]].shape[0];
            const int C = n.shape[0];
            const bool masked = !n.mask.data.empty();
            double count = 0.0;
            for (int i = 0; i < R; ++i)
                if (!masked || n.mask.data[i] == 1.0) count += 1.0;
            for (int i = 0; i < R; ++i) {
                if (masked && n.mask.data[i] != 1.0) continue;
                for (int j = 0; j < C; ++j) dA.at(i, j) += G.data[j] / count;
            }
            return;
        }
        case Op::ConcatRows: {
            int row = 0;
            const int C = n.shape[1];
            for (size_t p = 0; p < n.in.size(); ++p) {
                Node& src = nodes_[n.in[p]];
                if (src.grad.data.empty()) src.grad = Tensor(src.shape);
                const int pr = src.shape[0];
                for (int i = 0; i < pr; ++i)
                    for (int j = 0; j < C; ++j) src.grad.at(i, j) += G.at(row + i, j);
                row += pr;
            }
            return;
        }
        case Op::ConcatCols: {
            int col = 0;
            const int R = n.shape[0];
            for (size_t p = 0; p < n.in.size(); ++p) {
                Node& src = nodes_[n.in[p]];
                if (src.grad.data.empty()) src.grad = Tensor(src.shape);
                const int pc = src.shape[1];
                for (int i = 0; i < R; ++i)
                    for (int j = 0; j < pc; ++j) src.grad.at(i, j) += G.at(i, col + j);
                col += pc;
            }
            return;
        }
        case Op::SliceRows: {
            Tensor& dA = grad_of(0);
            const int C = n.shape[1];
            for (int i = 0; i < n.shape[0]; ++i)
                for (int j = 0; j < C; ++j) dA.at(n.i0 + i, j) += G.at(i, j);
            return;
        }
        case Op::SliceCols: {
            Tensor& dA = grad_of(0);
            for (int i = 0; i < n.shape[0]; ++i)
                for (int j = 0; j < n.shape[1]; ++j) dA.at(i, n.i0 + j) += G.at(i, j);
            return;
        }
        case Op::Reshape: {
            Tensor& dA = grad_of(0);
            for (size_t i = 0; i < G.data.size(); ++i) dA.data[i] += G.data[i];
            return;
        }
        case Op::SumAll: {
            Tensor& dA = grad_of(0);
            for (double& v : dA.data) v += G.data[0];
            return;
        }
        case Op::MeanAll: {
            Tensor& dA = grad_of(0);
            const double k = G.data[0] / static_cast<double>(dA.numel());
            for (double& v : dA.data) v += k;
            return;
        }
        case Op::SumSq: {
            const Tensor& A = in(0);
            Tensor& dA = grad_of(0);
            for (size_t i = 0; i < A.data.size(); ++i)
                dA.data[i] += 2.0 * G.data[0] * A.data[i];
            return;
        }
        case Op::Frobenius: {
            const Tensor& A = in(0);
            Tensor& dA = grad_of(0);
            const double f = n.value.data[0];
            if (f == 0.0) return;  // subgradient 0 at the origin
            for (size_t i = 0; i < A.data.size(); ++i)
                dA.data[i] += G.data[0] * A.data[i] / f;
            return;
        }
        case Op::CosineRows: {
            const Tensor& A = in(0);
            const Tensor& B = in(1);
            Tensor& dA = grad_of(0);
            Tensor& dB = grad_of(1);
            const int R = A.shape[0], C = A.shape[1];
            for (int i = 0; i < R; ++i) {
                double dot = 0.0, na2 = 0.0, nb2 = 0.0;
                for (int j = 0; j < C; ++j) {
                    dot += A.at(i, j) * B.at(i, j);
                    na2 += A.at(i, j) * A.at(i, j);
                    nb2 += B.at(i, j) * B.at(i, j);
                }
                if (na2 == 0.0 || nb2 == 0.0) continue;
                const double na = std::sqrt(na2), nb = std::sqrt(nb2);
                const double c = dot / (na * nb);
                const double gi = G.data[i];
                for (int j = 0; j < C; ++j) {
                    dA.at(i, j) += gi * (B.at(i, j) / (na * nb) - c * A.at(i, j) / na2);
                    dB.at(i, j) += gi * (A.at(i, j) / (na * nb) - c * B.at(i, j) / nb2);
                }
            }
            return;
        }
    }
    throw GraphError("graph: unhandled op in backprop");
}

std::map<std::string, Tensor> Graph::backward(int loss_node) {
    check_id(loss_node);
    ensure_ran();
    if (nodes_[loss_node].shape != std::vector<int>{1})
        throw GraphError("backward: loss " + desc(loss_node) + " is not scalar");
    for (Node& n : nodes_) n.grad = Tensor();
    nodes_[loss_node].grad = Tensor::scalar(1.0);
    for (int id = loss_node; id >= 0; --id) backprop(id);
    std::map<std::string, Tensor> grads;
    for (const auto& [name, id] : param_ids_) {
        const Node& n = nodes_[id];
        if (!store_.trainable(n.param_idx)) continue;
        Tensor g = n.grad.data.empty() ? Tensor(n.shape) : n.grad;
        const auto it = grad_corruption_.find(name);
        if (it != grad_corruption_.end())
            for (double& v : g.data) v *= it->second;
        grads.emplace(name, std::move(g));
    }
    return grads;
}

void Graph::corrupt_gradient(const std::string& param_name, double factor) {
    grad_corruption_[param_name] = factor;
}

double Graph::kink_margin() const {
    ensure_ran();
    double margin = 1e300;
    for (const Node& n : nodes_) {
        switch (n.op) {
            case Op::Relu: {
                for (const double v : nodes_[n.in[0]].value.data)
                    margin = std::min(margin, std::abs(v));
                break;
            }
            case Op::Clamp: {
                for (const double v : nodes_[n.in[0]].value.data) {
                    margin = std::min(margin, std::abs(v - n.a0));
                    margin = std::min(margin, std::abs(v - n.a1));
                }
                break;
            }
            case Op::MaxRows: {
                const Tensor& x = nodes_[n.in[0]].value;
                const bool masked = !n.mask.data.empty();
                const int R = x.shape[0], C = x.shape[1];
                for (int j = 0; j < C; ++j) {
                    double best = -1e300, second = -1e300;
                    for (int i = 0; i < R; ++i) {
                        if (masked && n.mask.data[i] != 1.0) continue;
                        const double v = x.at(i, j);
                        if (v > best) {
                            second = best;
                            best = v;
                        } else if (v > second) {
                            second = v;
                        }
                    }
                    if (second > -1e300) margin = std::min(margin, best - second);
                }
                break;
            }
            default:
                break;
        }
    }
    return margin;
}

uint64_t Graph::activation_signature() const {
    uint64_t h = 0xcbf29ce484222325ull;
    auto mix = [&h](uint64_t v) {
        h ^= v;
        h *= 0x100000001b3ull;
    };
    for (const Node& n : nodes_) {
        switch (n.op) {
            case Op::Relu:
                for (const double v : nodes_[n.in[0]].value.data) mix(v > 0.0 ? 1 : 0);
                break;
            case Op::Clamp:
                for (const double v : nodes_[n.in[0]].value.data)
                    mix(v < n.a0 ? 0 : (v > n.a1 ? 2 : 1));
                break;
            case Op::MaxRows:
                for (const double v : n.ctx.data) mix(static_cast<uint64_t>(v) + 3);
                break;
            default:
                break;
        }
    }
    return h;
}

GradCheckReport Graph::grad_check(int loss_node, double eps, double tol) {
    if (eps <= 0.0 || eps > 1e-2) throw GraphError("grad_check: eps must be in (0, 1e-2]");
    run();
    const auto analytic = backward(loss_node);
    GradCheckReport report;
    auto loss_at = [&]() {
        run();
        return nodes_[loss_node].value.data[0];
    };
    for (const auto& [name, grad] : analytic) {
        Tensor& value = store_.value(name);
        for (size_t i = 0; i < value.data.size(); ++i) {
            const double saved = value.data[i];
            // fourth-order central stencil: [f(-2e) - 8f(-e) + 8f(e) - f(2e)] / 12e
            double f[4];
            uint64_t sig[4];
            const double offsets[4] = {-2.0 * eps, -eps, eps, 2.0 * eps};
            for (int k = 0; k < 4; ++k) {
                value.data[i] = saved + offsets[k];
                f[k] = loss_at();
                sig[k] = activation_signature();
            }
            value.data[i] = saved;
            if (sig[0] != sig[1] || sig[1] != sig[2] || sig[2] != sig[3]) {
                // the difference quotient straddles a kink; not a derivative
                ++report.skipped_nonsmooth;
                continue;
            }
            // difference-first grouping cancels exactly when the element is inert
            const double fd = (8.0 * (f[2] - f[1]) - (f[3] - f[0])) / (12.0 * eps);
            const double an = grad.data[i];
            const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8});
            ++report.checked;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = name;
            }
        }
    }
    run();  // leave values consistent with unperturbed parameters
    (void)tol;
    return report;
}

}  // namespace adafuse
