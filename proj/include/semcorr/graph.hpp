#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "semcorr/errors.hpp"
#include "semcorr/tensor.hpp"

namespace semcorr {

// Reverse-mode gradient engine over a closed primitive catalog. Anything the
// losses need beyond these ops is composed from them (see losses.hpp).
// Node values are held in f64 during execution; tensors stay f32 at the edges.

enum class OpKind {
    Input,
    Constant,
    MatMul,
    Transpose,
    Add,
    ScalarMul,
    Relu,       // element-wise max with zero
    Exp,
    Log,
    RowSoftmax, // with temperature
    RowL1Norm,
    RowL2Norm,
    SpatialMean, // mean over rows: (r x c) -> (1 x c)
    SqDist,      // squared L2 distance between two equal-shape tensors -> (1 x 1)
    GatherRows,
};

inline const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::Input: return "input";
        case OpKind::Constant: return "constant";
        case OpKind::MatMul: return "matmul";
        case OpKind::Transpose: return "transpose";
        case OpKind::Add: return "add";
        case OpKind::ScalarMul: return "scalar_mul";
        case OpKind::Relu: return "relu";
        case OpKind::Exp: return "exp";
        case OpKind::Log: return "log";
        case OpKind::RowSoftmax: return "row_softmax";
        case OpKind::RowL1Norm: return "row_l1_norm";
        case OpKind::RowL2Norm: return "row_l2_norm";
        case OpKind::SpatialMean: return "spatial_mean";
        case OpKind::SqDist: return "sq_dist";
        case OpKind::GatherRows: return "gather_rows";
    }
    return "?";
}

struct NodeRef {
    std::uint32_t id = 0;
};

struct GraphNode {
    OpKind op;
    std::string name;
    std::vector<std::uint32_t> args;
    std::size_t rows = 0, cols = 0;   // all node values are matrices
    double scalar = 0.0;              // ScalarMul factor / RowSoftmax temperature
    std::vector<float> literal;       // Constant payload
    std::vector<std::size_t> gather;  // GatherRows row indices
};

class Graph {
  public:
    const std::vector<GraphNode>& nodes() const { return nodes_; }
    std::uint32_t output() const { return output_; }
    const std::map<std::string, std::uint32_t>& inputs() const { return input_ids_; }

  private:
    friend class GraphBuilder;
    std::vector<GraphNode> nodes_;
    std::uint32_t output_ = 0;
    std::map<std::string, std::uint32_t> input_ids_;
};

class GraphBuilder {
  public:
    NodeRef input(const std::string& name, std::size_t rows, std::size_t cols) {
        if (name.empty()) throw graph_error("input name must be nonempty");
        if (input_ids_.count(name)) throw graph_error("duplicate input name '" + name + "'");
        NodeRef r = push(OpKind::Input, name, {}, rows, cols);
        input_ids_[name] = r.id;
        return r;
    }

    NodeRef constant(const Tensor& t, const std::string& label = "") {
        if (t.dims.size() > 2) throw graph_error("constants must be 1-D or 2-D");
        NodeRef r = push(OpKind::Constant, label.empty() ? auto_name("constant") : label, {},
                         t.rows(), t.cols());
        nodes_[r.id].literal = t.data;
        return r;
    }

    NodeRef scalar_constant(double v, const std::string& label = "") {
        Tensor t({1, 1});
        t.data[0] = static_cast<float>(v);
        return constant(t, label);
    }

    NodeRef matmul(NodeRef a, NodeRef b) {
        const auto& na = node(a);
        const auto& nb = node(b);
        if (na.cols != nb.rows)
            throw graph_error(dim_msg("matmul", {a, b}) + ": inner dims " +
                              std::to_string(na.cols) + " vs " + std::to_string(nb.rows));
        return push(OpKind::MatMul, auto_name("matmul"), {a.id, b.id}, na.rows, nb.cols);
    }

    NodeRef transpose(NodeRef a) {
        const auto& na = node(a);
        return push(OpKind::Transpose, auto_name("transpose"), {a.id}, na.cols, na.rows);
    }

    NodeRef add(NodeRef a, NodeRef b) {
        const auto& na = node(a);
        const auto& nb = node(b);
        if (na.rows != nb.rows || na.cols != nb.cols)
            throw graph_error(dim_msg("add", {a, b}) + ": shape mismatch");
        return push(OpKind::Add, auto_name("add"), {a.id, b.id}, na.rows, na.cols);
    }

    NodeRef scalar_mul(NodeRef a, double s) {
        const auto& na = node(a);
        NodeRef r = push(OpKind::ScalarMul, auto_name("scalar_mul"), {a.id}, na.rows, na.cols);
        nodes_[r.id].scalar = s;
        return r;
    }

    NodeRef relu(NodeRef a) { return unary(OpKind::Relu, a); }
    NodeRef exp(NodeRef a) { return unary(OpKind::Exp, a); }
    NodeRef log(NodeRef a) { return unary(OpKind::Log, a); }
    NodeRef row_l1_norm(NodeRef a) { return unary(OpKind::RowL1Norm, a); }
    NodeRef row_l2_norm(NodeRef a) { return unary(OpKind::RowL2Norm, a); }

    NodeRef row_softmax(NodeRef a, double temperature) {
        if (!(temperature > 0.0))
            throw graph_error("row_softmax temperature must be > 0, got " +
                              std::to_string(temperature));
        NodeRef r = unary(OpKind::RowSoftmax, a);
        nodes_[r.id].scalar = temperature;
        return r;
    }

    NodeRef spatial_mean(NodeRef a) {
        const auto& na = node(a);
        return push(OpKind::SpatialMean, auto_name("spatial_mean"), {a.id}, 1, na.cols);
    }

    NodeRef sq_dist(NodeRef a, NodeRef b) {
        const auto& na = node(a);
        const auto& nb = node(b);
        if (na.rows != nb.rows || na.cols != nb.cols)
            throw graph_error(dim_msg("sq_dist", {a, b}) + ": shape mismatch");
        return push(OpKind::SqDist, auto_name("sq_dist"), {a.id, b.id}, 1, 1);
    }

    NodeRef gather_rows(NodeRef a, std::vector<std::size_t> rows) {
        const auto& na = node(a);
        if (rows.empty()) throw graph_error("gather_rows needs at least one row index");
        for (std::size_t r : rows)
            if (r >= na.rows)
                throw graph_error(dim_msg("gather_rows", {a}) + ": row index " +
                                  std::to_string(r) + " out of range " + std::to_string(na.rows));
        NodeRef ref =
            push(OpKind::GatherRows, auto_name("gather_rows"), {a.id}, rows.size(), na.cols);
        nodes_[ref.id].gather = std::move(rows);
        return ref;
    }

    // Sum of the element-wise product, composed inside the catalog via the
    // polarization identity: <A,B> = (||A||^2 + ||B||^2 - ||A-B||^2) / 2.
    NodeRef dot_sum(NodeRef a, NodeRef b) {
        const auto& na = node(a);
        Tensor zeros({na.rows, na.cols});
        NodeRef z = constant(zeros, auto_name("zeros"));
        NodeRef aa = sq_dist(a, z);
        NodeRef bb = sq_dist(b, z);
        NodeRef ab = sq_dist(a, b);
        NodeRef s = add(aa, bb);
        NodeRef d = add(s, scalar_mul(ab, -1.0));
        return scalar_mul(d, 0.5);
    }

    Graph build(NodeRef output) {
        Graph g;
        g.nodes_ = nodes_;
        g.output_ = output.id;
        g.input_ids_ = input_ids_;
        return g;
    }

    const GraphNode& node(NodeRef r) const {
        if (r.id >= nodes_.size()) throw graph_error("dangling node reference");
        return nodes_[r.id];
    }

  private:
    NodeRef unary(OpKind k, NodeRef a) {
        const auto& na = node(a);
        return push(k, auto_name(op_name(k)), {a.id}, na.rows, na.cols);
    }

    NodeRef push(OpKind k, std::string name, std::vector<std::uint32_t> args, std::size_t rows,
                 std::size_t cols) {
        if (rows == 0 || cols == 0)
            throw graph_error("node '" + name + "' would have a zero extent");
        GraphNode n;
        n.op = k;
        n.name = std::move(name);
        n.args = std::move(args);
        n.rows = rows;
        n.cols = cols;
        nodes_.push_back(std::move(n));
        return NodeRef{static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    std::string auto_name(const std::string& base) {
        return base + "#" + std::to_string(nodes_.size());
    }

    std::string dim_msg(const char* op, std::initializer_list<NodeRef> refs) const {
        std::string s = std::string(op) + "(";
        bool first = true;
        for (NodeRef r : refs) {
            const auto& n = nodes_[r.id];
            if (!first) s += ", ";
            s += n.name + " " + std::to_string(n.rows) + "x" + std::to_string(n.cols);
            first = false;
        }
        return s + ")";
    }

    std::vector<GraphNode> nodes_;
    std::map<std::string, std::uint32_t> input_ids_;
};

namespace detail {

using Buffer = std::vector<double>;

inline void forward_pass(const Graph& g, std::vector<Buffer>& vals) {
    const auto& nodes = g.nodes();
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        const GraphNode& n = nodes[i];
        Buffer& out = vals[i];
        const std::size_t R = n.rows, C = n.cols;
        switch (n.op) {
            case OpKind::Input:
                break;  // bound by caller
            case OpKind::Constant:
                out.resize(n.literal.size());
                for (std::size_t k = 0; k < out.size(); ++k) out[k] = n.literal[k];
                break;
            case OpKind::MatMul: {
                const Buffer& A = vals[n.args[0]];
                const Buffer& B = vals[n.args[1]];
                const std::size_t K = nodes[n.args[0]].cols;
                out.assign(R * C, 0.0);
                for (std::size_t r = 0; r < R; ++r)
                    for (std::size_t k = 0; k < K; ++k) {
                        double a = A[r * K + k];
                        if (a == 0.0) continue;
                        const double* brow = &B[k * C];
                        double* orow = &out[r * C];
                        for (std::size_t c = 0; c < C; ++c) orow[c] += a * brow[c];
                    }
                break;
            }
            case OpKind::Transpose: {
                const Buffer& A = vals[n.args[0]];
                out.resize(R * C);
                for (std::size_t r = 0; r < R; ++r)
                    for (std::size_t c = 0; c < C; ++c) out[r * C + c] = A[c * R + r];
                break;
            }
            case OpKind::Add: {
                const Buffer& A = vals[n.args[0]];
                const Buffer& B = vals[n.args[1]];
                out.resize(A.size());
                for (std::size_t k = 0; k < out.size(); ++k) out[k] = A[k] + B[k];
                break;
            }
            case OpKind::ScalarMul: {
                const Buffer& A = vals[n.args[0]];
                out.resize(A.size());
                for (std::size_t k = 0; k < out.size(); ++k) out[k] = n.scalar * A[k];
                break;
            }
            case OpKind::Relu: {
                const Buffer& A = vals[n.args[0]];
                out.resize(A.size());
                for (std::size_t k = 0; k < out.size(); ++k) out[k] = A[k] > 0.0 ? A[k] : 0.0;
                break;
            }
            case OpKind::Exp: {
                const Buffer& A = vals[n.args[0]];
                out.resize(A.size());
                for (std::size_t k = 0; k < out.size(); ++k) out[k] = std::exp(A[k]);
                break;
            }
            case OpKind::Log: {
                const Buffer& A = vals[n.args[0]];
                out.resize(A.size());
                for (std::size_t k = 0; k < out.size(); ++k) out[k] = std::log(A[k]);
                break;
            }
            case OpKind::RowSoftmax: {
                const Buffer& A = vals[n.args[0]];
                const double t = n.scalar;
                out.resize(A.size());
                for (std::size_t r = 0; r < R; ++r) {
                    const double* x = &A[r * C];
                    double mx = x[0];
                    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, x[c]);
                    double sum = 0.0;
                    for (std::size_t c = 0; c < C; ++c) {
                        double e = std::exp((x[c] - mx) / t);
                        out[r * C + c] = e;
                        sum += e;
                    }
                    for (std::size_t c = 0; c < C; ++c) out[r * C + c] /= sum;
                }
                break;
            }
            case OpKind::RowL1Norm: {
                const Buffer& A = vals[n.args[0]];
                out.resize(A.size());
                for (std::size_t r = 0; r < R; ++r) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < C; ++c) s += std::abs(A[r * C + c]);
                    for (std::size_t c = 0; c < C; ++c)
                        out[r * C + c] = s == 0.0 ? 0.0 : A[r * C + c] / s;
                }
                break;
            }
            case OpKind::RowL2Norm: {
                const Buffer& A = vals[n.args[0]];
                out.resize(A.size());
                for (std::size_t r = 0; r < R; ++r) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < C; ++c) s += A[r * C + c] * A[r * C + c];
                    double nrm = std::sqrt(s);
                    // zero rows pass through unchanged
                    for (std::size_t c = 0; c < C; ++c)
                        out[r * C + c] = nrm == 0.0 ? 0.0 : A[r * C + c] / nrm;
                }
                break;
            }
            case OpKind::SpatialMean: {
                const Buffer& A = vals[n.args[0]];
                const std::size_t Rin = g.nodes()[n.args[0]].rows;
                out.assign(C, 0.0);
                for (std::size_t r = 0; r < Rin; ++r)
                    for (std::size_t c = 0; c < C; ++c) out[c] += A[r * C + c];
                for (std::size_t c = 0; c < C; ++c) out[c] /= static_cast<double>(Rin);
                break;
            }
            case OpKind::SqDist: {
                const Buffer& A = vals[n.args[0]];
                const Buffer& B = vals[n.args[1]];
                double s = 0.0;
                for (std::size_t k = 0; k < A.size(); ++k) {
                    double d = A[k] - B[k];
                    s += d * d;
                }
                out.assign(1, s);
                break;
            }
            case OpKind::GatherRows: {
                const Buffer& A = vals[n.args[0]];
                out.resize(R * C);
                for (std::size_t r = 0; r < R; ++r)
                    for (std::size_t c = 0; c < C; ++c) out[r * C + c] = A[n.gather[r] * C + c];
                break;
            }
        }
    }
}

inline void backward_pass(const Graph& g, const std::vector<Buffer>& vals,
                          std::vector<Buffer>& grads) {
    const auto& nodes = g.nodes();
    grads.assign(nodes.size(), Buffer{});
    for (std::size_t i = 0; i < nodes.size(); ++i)
        grads[i].assign(nodes[i].rows * nodes[i].cols, 0.0);
    grads[g.output()][0] = 1.0;

    for (std::size_t ii = nodes.size(); ii-- > 0;) {
        const GraphNode& n = nodes[ii];
        const Buffer& gout = grads[ii];
        const std::size_t R = n.rows, C = n.cols;
        switch (n.op) {
            case OpKind::Input:
            case OpKind::Constant:
                break;
            case OpKind::MatMul: {
                const Buffer& A = vals[n.args[0]];
                const Buffer& B = vals[n.args[1]];
                Buffer& dA = grads[n.args[0]];
                Buffer& dB = grads[n.args[1]];
                const std::size_t K = nodes[n.args[0]].cols;
                // dA = dC * B^T ; dB = A^T * dC
                for (std::size_t r = 0; r < R; ++r)
                    for (std::size_t k = 0; k < K; ++k) {
                        double acc = 0.0;
                        const double* grow = &gout[r * C];
                        const double* brow = &B[k * C];
                        for (std::size_t c = 0; c < C; ++c) acc += grow[c] * brow[c];
                        dA[r * K + k] += acc;
                    }
                for (std::size_t k = 0; k < K; ++k)
                    for (std::size_t c = 0; c < C; ++c) {
                        double acc = 0.0;
                        for (std::size_t r = 0; r < R; ++r) acc += A[r * K + k] * gout[r * C + c];
                        dB[k * C + c] += acc;
                    }
                break;
            }
            case OpKind::Transpose: {
                Buffer& dA = grads[n.args[0]];
                for (std::size_t r = 0; r < R; ++r)
                    for (std::size_t c = 0; c < C; ++c) dA[c * R + r] += gout[r * C + c];
                break;
            }
            case OpKind::Add: {
                Buffer& dA = grads[n.args[0]];
                Buffer& dB = grads[n.args[1]];
                for (std::size_t k = 0; k < gout.size(); ++k) {
                    dA[k] += gout[k];
                    dB[k] += gout[k];
                }
                break;
            }
            case OpKind::ScalarMul: {
                Buffer& dA = grads[n.args[0]];
                for (std::size_t k = 0; k < gout.size(); ++k) dA[k] += n.scalar * gout[k];
                break;
            }
            case OpKind::Relu: {
                const Buffer& A = vals[n.args[0]];
                Buffer& dA = grads[n.args[0]];
                for (std::size_t k = 0; k < gout.size(); ++k)
                    if (A[k] > 0.0) dA[k] += gout[k];
                break;
            }
            case OpKind::Exp: {
                const Buffer& Y = vals[ii];
                Buffer& dA = grads[n.args[0]];
                for (std::size_t k = 0; k < gout.size(); ++k) dA[k] += gout[k] * Y[k];
                break;
            }
            case OpKind::Log: {
                const Buffer& A = vals[n.args[0]];
                Buffer& dA = grads[n.args[0]];
                for (std::size_t k = 0; k < gout.size(); ++k) dA[k] += gout[k] / A[k];
                break;
            }
            case OpKind::RowSoftmax: {
                const Buffer& Y = vals[ii];
                Buffer& dA = grads[n.args[0]];
                const double t = n.scalar;
                for (std::size_t r = 0; r < R; ++r) {
                    double dot = 0.0;
                    for (std::size_t c = 0; c < C; ++c) dot += gout[r * C + c] * Y[r * C + c];
                    for (std::size_t c = 0; c < C; ++c)
                        dA[r * C + c] += Y[r * C + c] * (gout[r * C + c] - dot) / t;
                }
                break;
            }
            case OpKind::RowL1Norm: {
                const Buffer& A = vals[n.args[0]];
                const Buffer& Y = vals[ii];
                Buffer& dA = grads[n.args[0]];
                for (std::size_t r = 0; r < R; ++r) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < C; ++c) s += std::abs(A[r * C + c]);
                    if (s == 0.0) continue;
                    double dot = 0.0;
                    for (std::size_t c = 0; c < C; ++c) dot += gout[r * C + c] * Y[r * C + c];
                    for (std::size_t c = 0; c < C; ++c) {
                        double sign = A[r * C + c] > 0.0 ? 1.0 : (A[r * C + c] < 0.0 ? -1.0 : 0.0);
                        dA[r * C + c] += (gout[r * C + c] - sign * dot) / s;
                    }
                }
                break;
            }
            case OpKind::RowL2Norm: {
                const Buffer& A = vals[n.args[0]];
                const Buffer& Y = vals[ii];
                Buffer& dA = grads[n.args[0]];
                for (std::size_t r = 0; r < R; ++r) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < C; ++c) s += A[r * C + c] * A[r * C + c];
                    double nrm = std::sqrt(s);
                    if (nrm == 0.0) continue;  // subgradient 0 at the zero row
                    double dot = 0.0;
                    for (std::size_t c = 0; c < C; ++c) dot += gout[r * C + c] * Y[r * C + c];
                    for (std::size_t c = 0; c < C; ++c)
                        dA[r * C + c] += (gout[r * C + c] - Y[r * C + c] * dot) / nrm;
                }
                break;
            }
            case OpKind::SpatialMean: {
                Buffer& dA = grads[n.args[0]];
                const std::size_t Rin = nodes[n.args[0]].rows;
                for (std::size_t r = 0; r < Rin; ++r)
                    for (std::size_t c = 0; c < C; ++c)
                        dA[r * C + c] += gout[c] / static_cast<double>(Rin);
                break;
            }
            case OpKind::SqDist: {
                const Buffer& A = vals[n.args[0]];
                const Buffer& B = vals[n.args[1]];
                Buffer& dA = grads[n.args[0]];
                Buffer& dB = grads[n.args[1]];
                const double gv = gout[0];
                for (std::size_t k = 0; k < A.size(); ++k) {
                    double d = 2.0 * (A[k] - B[k]) * gv;
                    dA[k] += d;
                    dB[k] -= d;
                }
                break;
            }
            case OpKind::GatherRows: {
                Buffer& dA = grads[n.args[0]];
                for (std::size_t r = 0; r < R; ++r)
                    for (std::size_t c = 0; c < C; ++c)
                        dA[n.gather[r] * C + c] += gout[r * C + c];
                break;
            }
        }
    }
}

inline std::vector<Buffer> bind_inputs(const Graph& g,
                                       const std::map<std::string, Tensor>& inputs) {
    std::vector<Buffer> vals(g.nodes().size());
    for (const auto& [name, id] : g.inputs()) {
        auto it = inputs.find(name);
        if (it == inputs.end()) throw graph_error("missing input '" + name + "'");
        const Tensor& t = it->second;
        const GraphNode& n = g.nodes()[id];
        if (t.rows() != n.rows || t.cols() != n.cols)
            throw graph_error("input '" + name + "' expects " + std::to_string(n.rows) + "x" +
                              std::to_string(n.cols) + ", got " + t.shape_str());
        if (!t.all_finite()) throw graph_error("input '" + name + "' contains non-finite values");
        Buffer b(t.data.size());
        for (std::size_t k = 0; k < b.size(); ++k) b[k] = t.data[k];
        vals[id] = std::move(b);
    }
    for (const auto& [name, t] : inputs) {
        (void)t;
        if (!g.inputs().count(name))
            throw graph_error("inputs contain undeclared name '" + name + "'");
    }
    return vals;
}

}  // namespace detail

struct GradResult {
    double value = 0.0;
    std::map<std::string, Tensor> grads;
};

// Forward the graph and return the raw output tensor (any shape).
inline Tensor evaluate(const Graph& g, const std::map<std::string, Tensor>& inputs) {
    auto vals = detail::bind_inputs(g, inputs);
    detail::forward_pass(g, vals);
    const GraphNode& out = g.nodes()[g.output()];
    Tensor t({out.rows, out.cols});
    const auto& buf = vals[g.output()];
    for (std::size_t k = 0; k < buf.size(); ++k) t.data[k] = static_cast<float>(buf[k]);
    return t;
}

inline GradResult value_and_grad(const Graph& g, const std::map<std::string, Tensor>& inputs,
                                 const std::set<std::string>& wrt) {
    const GraphNode& out = g.nodes()[g.output()];
    if (out.rows * out.cols != 1)
        throw graph_error("graph output '" + out.name + "' is " + std::to_string(out.rows) + "x" +
                          std::to_string(out.cols) + ", expected scalar");
    for (const auto& name : wrt)
        if (!g.inputs().count(name))
            throw graph_error("wrt name '" + name + "' is not a graph input");

    auto vals = detail::bind_inputs(g, inputs);
    detail::forward_pass(g, vals);
    std::vector<detail::Buffer> grads;
    detail::backward_pass(g, vals, grads);

    GradResult res;
    res.value = vals[g.output()][0];
    if (!std::isfinite(res.value))
        throw graph_error("non-finite value at output node '" + out.name + "'");
    for (const auto& name : wrt) {
        std::uint32_t id = g.inputs().at(name);
        const GraphNode& n = g.nodes()[id];
        Tensor t({n.rows, n.cols});
        for (std::size_t k = 0; k < t.data.size(); ++k) {
            double v = grads[id][k];
            if (!std::isfinite(v))
                throw graph_error("non-finite gradient for input '" + name + "'");
            t.data[k] = static_cast<float>(v);
        }
        res.grads.emplace(name, std::move(t));
    }
    return res;
}

// Max over all wrt entries of |analytic - central difference| / (|central| + floor).
// The floor is the absolute gradient scale below which the central difference is
// pure roundoff; it must grow with the output magnitude, roughly ulp(f) / (2 step).
inline double finite_diff_check(const Graph& g, const std::map<std::string, Tensor>& inputs,
                                const std::set<std::string>& wrt, double step,
                                double floor = 1e-8) {
    if (!(step > 0.0)) throw graph_error("finite_diff_check step must be > 0");
    if (!(floor > 0.0)) throw graph_error("finite_diff_check floor must be > 0");
    const GraphNode& out = g.nodes()[g.output()];
    if (out.rows * out.cols != 1)
        throw graph_error("graph output '" + out.name + "' is not scalar");
    for (const auto& name : wrt)
        if (!g.inputs().count(name))
            throw graph_error("wrt name '" + name + "' is not a graph input");

    auto base = detail::bind_inputs(g, inputs);
    auto vals = base;
    detail::forward_pass(g, vals);
    std::vector<detail::Buffer> grads;
    detail::backward_pass(g, vals, grads);

    auto eval_at = [&](std::vector<detail::Buffer>& bound) {
        detail::forward_pass(g, bound);
        return bound[g.output()][0];
    };

    double worst = 0.0;
    for (const auto& name : wrt) {
        std::uint32_t id = g.inputs().at(name);
        for (std::size_t k = 0; k < base[id].size(); ++k) {
            double saved = base[id][k];
            auto work = base;
            work[id][k] = saved + step;
            double fp = eval_at(work);
            work = base;
            work[id][k] = saved - step;
            double fm = eval_at(work);
            double central = (fp - fm) / (2.0 * step);
            double dev = std::abs(grads[id][k] - central) / (std::abs(central) + floor);
            worst = std::max(worst, dev);
        }
    }
    return worst;
}

}  // namespace semcorr
