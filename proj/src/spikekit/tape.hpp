#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "spikekit/error.hpp"

namespace spikekit {

using NodeId = int32_t;
inline constexpr NodeId kNoNode = -1;

// Define-by-run reverse-mode tape. Ops append nodes in execution order, so
// walking the node list backwards is a valid topological order and every
// node is visited exactly once, after all of its consumers.
//
// A node's backward closure reads its own output gradient via grad(self)
// and accumulates into its parents via grad_accum(parent). Gradient buffers
// are allocated lazily; untouched nodes read back as zeros.
//
// Single-writer: one execution context builds and runs a tape at a time.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    using BackwardFn = std::function<void(Tape&, NodeId self)>;

    NodeId leaf(int64_t numel) { return push(numel, {}, nullptr); }

    NodeId record(int64_t out_numel, std::vector<NodeId> parents, BackwardFn fn) {
        return push(out_numel, std::move(parents), std::move(fn));
    }

    // Seeds d(root)/d(root) = 1 and runs all backward closures in reverse
    // creation order. The root must be a scalar node.
    void backward(NodeId root) {
        if (root < 0 || root >= static_cast<NodeId>(nodes_.size()))
            throw UsageError("backward on a tensor detached from this tape");
        if (nodes_[static_cast<size_t>(root)].numel != 1)
            throw UsageError("backward root must be a scalar");
        grad_accum(root).assign(1, 1.0f);
        for (NodeId id = static_cast<NodeId>(nodes_.size()) - 1; id >= 0; --id) {
            Node& n = nodes_[static_cast<size_t>(id)];
            if (!n.fn || n.grad.empty()) continue;  // no downstream gradient reached this node
            n.fn(*this, id);
        }
        ran_backward_ = true;
    }

    // Read-only gradient view; zeros if nothing was accumulated.
    const std::vector<float>& grad(NodeId id) {
        return grad_accum(id);
    }

    // Mutable gradient buffer of node `id`, allocated (zeroed) on demand.
    std::vector<float>& grad_accum(NodeId id) {
        Node& n = node_at(id);
        if (n.grad.empty()) n.grad.assign(static_cast<size_t>(n.numel), 0.0f);
        return n.grad;
    }

    int64_t numel_of(NodeId id) { return node_at(id).numel; }
    size_t size() const { return nodes_.size(); }
    bool ran_backward() const { return ran_backward_; }

private:
    struct Node {
        int64_t numel = 0;
        std::vector<NodeId> parents;
        BackwardFn fn;            // null for leaves
        std::vector<float> grad;  // lazily allocated
    };

    Node& node_at(NodeId id) {
        if (id < 0 || id >= static_cast<NodeId>(nodes_.size()))
            throw UsageError("invalid tape node id");
        return nodes_[static_cast<size_t>(id)];
    }

    NodeId push(int64_t numel, std::vector<NodeId> parents, BackwardFn fn) {
        Node n;
        n.numel = numel;
        n.parents = std::move(parents);
        n.fn = std::move(fn);
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size()) - 1;
    }

    std::vector<Node> nodes_;
    bool ran_backward_ = false;
};

}  // namespace spikekit
