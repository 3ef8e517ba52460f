#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "dfa/cost_model.hpp"
#include "dfa/experiment.hpp"
#include "dfa/feedback.hpp"
#include "dfa/network.hpp"

namespace py = pybind11;

namespace {

using Arr = py::array_t<double, py::array::c_style | py::array::forcecast>;

dfa::Tensor to_tensor(const Arr& a) {
    std::vector<std::size_t> shape(a.ndim());
    for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[(std::size_t)i] = (std::size_t)a.shape(i);
    std::vector<double> data(a.data(), a.data() + a.size());
    return dfa::Tensor(std::move(shape), std::move(data));
}

Arr to_array(const dfa::Tensor& t) {
    std::vector<py::ssize_t> shape(t.rank());
    for (std::size_t i = 0; i < t.rank(); ++i) shape[i] = (py::ssize_t)t.dim(i);
    Arr a(shape);
    std::copy(t.data(), t.data() + t.numel(), a.mutable_data());
    return a;
}

dfa::Act act_from_name(const std::string& name) {
    if (name == "identity") return dfa::Act::identity;
    if (name == "relu") return dfa::Act::relu;
    if (name == "tanh") return dfa::Act::tanh;
    if (name == "sigmoid") return dfa::Act::sigmoid;
    throw std::invalid_argument("unknown activation '" + name + "'");
}

dfa::NetDescriptor descriptor_by_name(const std::string& name) {
    if (name == "vgg16") return dfa::vgg16_descriptor();
    if (name == "resnet18") return dfa::resnet18_descriptor();
    if (name == "resnet50") return dfa::resnet50_descriptor();
    if (name == "rnn") return dfa::rnn_descriptor(dfa::NetDescriptor::Cell::vanilla);
    if (name == "lstm") return dfa::rnn_descriptor(dfa::NetDescriptor::Cell::lstm);
    if (name == "gru") return dfa::rnn_descriptor(dfa::NetDescriptor::Cell::gru);
    throw std::invalid_argument("unknown network '" + name + "'");
}

py::dict report_to_dict(const dfa::CostReport& r) {
    py::dict d;
    d["strategy"] = r.strategy;
    d["weight_bytes"] = r.weight_bytes;
    d["error_bytes"] = r.error_bytes;
    d["ops"] = r.ops;
    d["note"] = r.note;
    return d;
}

} // namespace

PYBIND11_MODULE(_dfatrain, m) {
    m.doc() = "training engine for BP and direct feedback alignment with an EP cost model";

    m.def("matmul", [](const Arr& a, const Arr& b) { return to_array(dfa::matmul(to_tensor(a), to_tensor(b))); });

    m.def(
        "conv2d",
        [](const Arr& input, const Arr& weight, int stride, int padding, int dilation, int groups) {
            dfa::Tensor in = to_tensor(input), w = to_tensor(weight);
            dfa::ConvSpec s;
            s.kernel = (int)w.dim(2);
            s.stride = stride;
            s.padding = padding;
            s.dilation = dilation;
            s.groups = groups;
            s.in_channels = (int)in.dim(1);
            s.out_channels = (int)w.dim(0);
            return to_array(dfa::conv2d(in, w, s));
        },
        py::arg("input"), py::arg("weight"), py::arg("stride") = 1, py::arg("padding") = 0, py::arg("dilation") = 1,
        py::arg("groups") = 1);

    m.def("dilate_kernel", [](const Arr& w, int d) { return to_array(dfa::dilate_kernel(to_tensor(w), d)); });
    m.def("channel_shuffle", [](const Arr& x, int g) { return to_array(dfa::channel_shuffle(to_tensor(x), g)); });
    m.def("flip180", [](const Arr& w) { return to_array(dfa::flip180(to_tensor(w))); });
    m.def(
        "apply_activation",
        [](const Arr& x, const std::string& kind, bool derivative) {
            return to_array(dfa::apply_activation(to_tensor(x), dfa::Activation{act_from_name(kind)}, derivative));
        },
        py::arg("x"), py::arg("kind"), py::arg("derivative") = false);

    m.def("measure_alignment",
          [](const Arr& a, const Arr& b) { return dfa::measure_alignment(to_tensor(a), to_tensor(b)); });

    m.def("cost_bp", [](const std::string& net) { return report_to_dict(dfa::cost_bp(descriptor_by_name(net))); });
    m.def("cost_dfa_original",
          [](const std::string& net) { return report_to_dict(dfa::cost_dfa_original(descriptor_by_name(net))); });
    m.def(
        "cost_dfa_revised",
        [](const std::string& net, int groups, double sparsity, bool binary) {
            return report_to_dict(dfa::cost_dfa_revised(descriptor_by_name(net), groups, sparsity, binary));
        },
        py::arg("net"), py::arg("groups") = 1, py::arg("sparsity") = 0.0, py::arg("binary") = false);
    m.def(
        "cost_hybrid",
        [](const std::string& net, int groups, double sparsity, bool binary, double p) {
            return report_to_dict(dfa::cost_hybrid(descriptor_by_name(net), groups, sparsity, binary, p));
        },
        py::arg("net"), py::arg("groups"), py::arg("sparsity"), py::arg("binary"), py::arg("p"));

    m.def(
        "feedback_ratio",
        [](int w, int h, int k, int och, int classes) {
            dfa::NetDescriptor n;
            n.classes = classes;
            dfa::CostLayer l;
            l.kind = dfa::CostLayer::Kind::conv;
            l.in_w = w;
            l.in_h = h;
            l.k = k;
            l.och = och;
            l.ich = 1;
            n.layers.push_back(l);
            return dfa::feedback_ratio(n, 0);
        },
        py::arg("w"), py::arg("h"), py::arg("k"), py::arg("och"), py::arg("classes"));

    m.def(
        "ep_latency",
        [](const std::string& plan_name, const std::string& strategy, int time_steps, int workers) {
            dfa::NetworkPlan plan;
            if (plan_name == "rnn")
                plan = dfa::rnn_plan(100, 16, time_steps);
            else if (plan_name == "mini_vgg")
                plan = dfa::mini_vgg_plan(8);
            else if (plan_name == "mini_res")
                plan = dfa::mini_res_plan(8);
            else
                throw std::invalid_argument("unknown plan '" + plan_name + "'");
            dfa::EpKind kind = dfa::EpKind::bp;
            if (strategy == "dfa") kind = plan.recurrent() ? dfa::EpKind::dfa_rnn_triangular : dfa::EpKind::dfa_groupconv;
            return dfa::ep_latency(plan, kind, workers);
        },
        py::arg("plan"), py::arg("strategy"), py::arg("time_steps") = 35, py::arg("workers") = 0);

    m.def("make_synthetic_cifar", &dfa::write_synthetic_cifar, py::arg("dir"), py::arg("per_batch") = 1200,
          py::arg("seed") = 7);
    m.def("make_synthetic_corpus", &dfa::write_synthetic_corpus, py::arg("path"), py::arg("tokens") = 60000,
          py::arg("seed") = 7);
    m.def("emit_cost_tables", &dfa::emit_cost_tables, py::arg("out_dir"));

    m.def(
        "run_experiment",
        [](const std::string& config_path, const std::map<std::string, std::string>& overrides) {
            dfa::ExperimentConfig cfg =
                config_path.empty() ? dfa::ExperimentConfig{} : dfa::ExperimentConfig::from_file(config_path);
            for (const auto& [k, v] : overrides) cfg.set(k, v);
            auto res = dfa::run_experiment(cfg);
            py::list rows;
            for (const auto& e : res.epochs) {
                py::dict d;
                d["epoch"] = e.epoch;
                d["train_acc"] = e.train_acc;
                d["test_acc"] = e.test_acc;
                d["train_loss"] = e.train_loss;
                d["test_loss"] = e.test_loss;
                rows.append(d);
            }
            py::dict out;
            out["epochs"] = rows;
            out["csv"] = res.csv_path;
            out["params"] = res.params_path;
            out["feedback"] = res.feedback_path;
            return out;
        },
        py::arg("config") = std::string(), py::arg("overrides") = std::map<std::string, std::string>{});
}
