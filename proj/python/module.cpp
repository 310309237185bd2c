#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "caflow/config.hpp"
#include "caflow/train.hpp"

namespace py = pybind11;
using namespace caflow;

namespace {

Tensor tensor_from_list(std::tuple<int, int, int, int> shape, std::vector<float> data) {
    const Shape s(std::get<0>(shape), std::get<1>(shape), std::get<2>(shape),
                  std::get<3>(shape));
    return Tensor::from_data(s, std::move(data));
}

std::tuple<int, int, int, int> shape_tuple(const Tensor& t) {
    const Shape& s = t.shape();
    return {s.b, s.c, s.h, s.w};
}

}  // namespace

PYBIND11_MODULE(_caflow, m) {
    m.doc() = "conditional normalizing flows for paired image-to-image translation";

    py::register_exception<TensorError>(m, "TensorError");
    py::register_exception<DataError>(m, "DataError");
    py::register_exception<ConfigError>(m, "ConfigError");

    py::class_<Tensor>(m, "Tensor")
        .def(py::init(&tensor_from_list), py::arg("shape"), py::arg("data"))
        .def_property_readonly("shape", &shape_tuple)
        .def("data", [](const Tensor& t) { return t.data(); })
        .def("item", &Tensor::item);

    py::class_<Rng>(m, "Rng")
        .def(py::init<std::uint64_t>(), py::arg("seed"))
        .def("uniform", &Rng::uniform)
        .def("normal", &Rng::normal)
        .def("normal_tensor",
             [](Rng& r, std::tuple<int, int, int, int> shape, float temperature) {
                 return r.normal_tensor(Shape(std::get<0>(shape), std::get<1>(shape),
                                              std::get<2>(shape), std::get<3>(shape)),
                                        temperature);
             },
             py::arg("shape"), py::arg("temperature") = 1.0f);

    py::enum_<DependencyMode>(m, "DependencyMode")
        .value("CAFLOW", DependencyMode::Caflow)
        .value("DUAL_GLOW", DependencyMode::DualGlow);
    py::enum_<WeightSharing>(m, "WeightSharing")
        .value("OFF", WeightSharing::Off)
        .value("SHARED", WeightSharing::AppendixD);
    py::enum_<DequantMode>(m, "DequantMode")
        .value("UNIFORM", DequantMode::Uniform)
        .value("VARIATIONAL", DequantMode::Variational);

    py::class_<ModelConfig>(m, "ModelConfig")
        .def(py::init<>())
        .def_readwrite("n_scales", &ModelConfig::n_scales)
        .def_readwrite("channels", &ModelConfig::channels)
        .def_readwrite("image_size", &ModelConfig::image_size)
        .def_readwrite("k_steps_r", &ModelConfig::k_steps_r)
        .def_readwrite("k_steps_t", &ModelConfig::k_steps_t)
        .def_readwrite("m_cond_steps", &ModelConfig::m_cond_steps)
        .def_readwrite("hidden_uncond", &ModelConfig::hidden_uncond)
        .def_readwrite("hidden_cond", &ModelConfig::hidden_cond)
        .def_readwrite("deq_steps", &ModelConfig::deq_steps)
        .def_readwrite("mode", &ModelConfig::mode)
        .def_readwrite("sharing", &ModelConfig::sharing)
        .def_readwrite("dequant", &ModelConfig::dequant);

    py::class_<CaflowModel>(m, "Model")
        .def(py::init<const ModelConfig&, std::uint64_t>(), py::arg("config"),
             py::arg("seed") = 0)
        .def("conditional_log_prob",
             [](CaflowModel& mdl, const Tensor& w, const Tensor& y) {
                 NoGradGuard ng;
                 return mdl.conditional_log_prob(w, y).data();
             })
        .def("conditional_sample",
             [](CaflowModel& mdl, const Tensor& y, std::uint64_t seed, float temperature) {
                 Rng rng(seed);
                 return mdl.conditional_sample(y, rng, temperature);
             },
             py::arg("y"), py::arg("seed") = 0, py::arg("temperature") = 1.0f)
        .def("rank_samples", &CaflowModel::rank_samples)
        .def("distinct_cond_group_count", &CaflowModel::distinct_cond_group_count)
        .def("set_actnorm_initialized", &CaflowModel::set_actnorm_initialized)
        .def("param_count", [](CaflowModel& mdl) {
            std::int64_t n = 0;
            for (const auto& p : mdl.params()) n += p.tensor.numel();
            return n;
        });

    m.def("bits_per_dim", &bits_per_dim, py::arg("log_prob_nats"), py::arg("dims"));
    m.def("pyramid_numels", [](int channels, int image_size, int n_scales) {
        std::vector<std::int64_t> out;
        for (const Shape& s : pyramid_shapes(channels, image_size, n_scales, 1))
            out.push_back(s.numel());
        return out;
    });
    m.def("config_roundtrip", [](const std::string& text) {
        const RunConfig c = parse_config(text);
        return serialize_config(c);
    });
    m.def("serialize_default_config", [] { return serialize_config(RunConfig{}); });
}
