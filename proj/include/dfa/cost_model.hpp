#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "dfa/feedback.hpp"
#include "dfa/network.hpp"

namespace dfa {

// Analytical error-propagation cost accounting. Conventions (chosen so the
// reference tables reproduce; printed in every report header):
//   * memory = backward-weight traffic per iteration. BP reads the transposed
//     (flipped) forward weights of every layer except the first, once per
//     iteration. Propagated error tensors are reported separately; resident
//     activations f'(p) are not counted.
//   * an operation is one multiply-accumulate with a nonzero weight, counted
//     as 2 (multiply + add). Binarization never changes the op count; zeros
//     from dilation, masks or the triangular structure are skipped.
//   * CNN op counts are per example; RNN costs are per iteration with the
//     batch folded in. Weights are 4-byte scalars; binary weights cost 1 bit.
struct CostLayer {
    enum class Kind { conv, dense };
    Kind kind = Kind::conv;
    int in_w = 1, in_h = 1;  // input-error field (after any pooling)
    int out_w = 1, out_h = 1;
    int ich = 1, och = 1;
    int k = 1, stride = 1;
    bool shares_error = false;  // branch layer consuming an already-counted error
};

struct NetDescriptor {
    std::string name;
    std::vector<CostLayer> layers;
    int classes = 10;

    enum class Cell { none, vanilla, lstm, gru };
    Cell cell = Cell::none;
    int hidden = 0, time_steps = 0, vocab = 0;
    int batch = 1;

    int value_bytes = 4;
    bool recurrent() const { return cell != Cell::none; }
    int gates() const { return cell == Cell::lstm ? 4 : (cell == Cell::gru ? 3 : 1); }
};

struct CostComponent {
    double weight_bytes = 0;
    double error_bytes = 0;
    double ops = 0;
};

struct CostReport {
    std::string strategy;
    double weight_bytes = 0;
    double error_bytes = 0;
    double ops = 0;
    std::vector<std::pair<std::string, CostComponent>> breakdown;
    std::string note;

    void add(const std::string& name, const CostComponent& c);
    bool reconciles(double tol = 1e-6) const;
};

CostReport cost_bp(const NetDescriptor& net);
CostReport cost_dfa_original(const NetDescriptor& net);
CostReport cost_dfa_revised(const NetDescriptor& net, int groups, double sparsity, bool binary);
// Expectation under BP ratio p: p * BP + (1-p) * revised.
CostReport cost_hybrid(const NetDescriptor& net, int groups, double sparsity, bool binary, double p);

// Feedback-weight count ratio original/proposed for one layer:
// (w*h)/(k*k) * (classes/och).
double feedback_ratio(const NetDescriptor& net, std::size_t layer);

// Unit-cost task latency of the EP stage. BP is a serial chain over layers
// (time steps for a recurrent plan); DFA fires every destination of a module
// at once, so its critical path is the module count (1 for the recurrent
// plans). workers = 0 means unbounded.
double ep_latency(const NetworkPlan& plan, EpKind kind, int workers = 0);

// Multiplications of one grouped convolution; the grouped/standard ratio is
// exactly 1/G.
double conv_mult_count(int k, int ich, int och, int out_w, int out_h, int groups);

// Reference descriptors used by the cost tables.
NetDescriptor vgg16_descriptor();
NetDescriptor resnet18_descriptor();
NetDescriptor resnet50_descriptor();
NetDescriptor rnn_descriptor(NetDescriptor::Cell cell, int hidden = 200, int time_steps = 35, int vocab = 33278,
                             int batch = 20);

// Snapshot of a training plan for the per-epoch EP cost column.
NetDescriptor descriptor_from_plan(const NetworkPlan& plan, const std::vector<std::size_t>& input_shape,
                                   const std::string& name);

} // namespace dfa
