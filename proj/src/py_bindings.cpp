#include <pybind11/complex.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "nnbf/beamforming.hpp"
#include "nnbf/channel.hpp"
#include "nnbf/linkeval.hpp"
#include "nnbf/model.hpp"
#include "nnbf/trainer.hpp"

namespace py = pybind11;
using namespace nnbf;

namespace {

using CArray = py::array_t<std::complex<double>, py::array::c_style | py::array::forcecast>;

CTensor ctensor_from_array(const CArray& arr) {
  CTensor t;
  t.shape.assign(arr.ndim(), 0);
  for (py::ssize_t i = 0; i < arr.ndim(); ++i)
    t.shape[static_cast<size_t>(i)] = arr.shape(i);
  const auto* src = arr.data();
  t.v.assign(src, src + arr.size());
  return t;
}

py::array ctensor_to_array(const CTensor& t) {
  std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
  py::array_t<std::complex<double>> out(shape);
  std::copy(t.v.begin(), t.v.end(), out.mutable_data());
  return out;
}

channel::ScenarioConfig scenario_from_kwargs(std::int64_t L, std::int64_t K,
                                             std::int64_t M, std::int64_t N,
                                             double max_speed, int paths) {
  channel::ScenarioConfig sc;
  sc.L = L;
  sc.K = K;
  sc.M = M;
  sc.N = N;
  sc.max_speed_mps = max_speed;
  sc.paths = paths;
  return sc;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "uplink MU-SIMO beamforming simulator core";

  m.def("doppler_max", &channel::doppler_max, py::arg("carrier_hz"),
        py::arg("speed_mps"), "maximum Doppler shift f_c * v / c");
  m.def("snr_to_noise_var", &channel::snr_to_noise_var, py::arg("snr_db"));

  m.def(
      "generate_channel",
      [](std::int64_t L, std::int64_t K, std::int64_t M, std::int64_t N,
         double max_speed, int paths, std::uint64_t seed) {
        channel::ScenarioConfig sc = scenario_from_kwargs(L, K, M, N, max_speed, paths);
        RngStream rng(seed);
        return ctensor_to_array(channel::generate_channel(sc, rng).h);
      },
      py::arg("L"), py::arg("K"), py::arg("M"), py::arg("N"),
      py::arg("max_speed") = 0.0, py::arg("paths") = 12, py::arg("seed") = 1,
      "true frequency-domain channel, complex array of shape (L, K, M, N)");

  m.def(
      "estimate_channel",
      [](const CArray& h, std::int64_t pilot_len, double noise_var,
         std::uint64_t seed) {
        channel::ChannelRealization H;
        H.h = ctensor_from_array(h);
        RngStream rng(seed);
        auto est = channel::estimate_channel(H, pilot_len, noise_var, rng);
        return py::make_tuple(ctensor_to_array(est.h), est.est_noise_var);
      },
      py::arg("h"), py::arg("pilot_len"), py::arg("noise_var"), py::arg("seed") = 1,
      "pilot-based least-squares estimate; returns (h_est, est_noise_var)");

  m.def(
      "zfbf",
      [](const CArray& h_est) { return ctensor_to_array(beamform::zfbf(ctensor_from_array(h_est)).w); },
      py::arg("h_est"), "zero-forcing combiner rows, shape (L, K, N, M)");
  m.def(
      "mmse",
      [](const CArray& h_est, double noise_var) {
        return ctensor_to_array(beamform::mmse(ctensor_from_array(h_est), noise_var).w);
      },
      py::arg("h_est"), py::arg("noise_var"));

  m.def(
      "compute_sinr",
      [](const CArray& w, const CArray& h, double noise_var) {
        beamform::CombinerWeights W;
        W.w = ctensor_from_array(w);
        channel::ChannelRealization H;
        H.h = ctensor_from_array(h);
        auto rep = beamform::compute_sinr(W, H, noise_var);
        std::vector<py::ssize_t> shape(rep.shape.begin(), rep.shape.end());
        py::array_t<double> out(shape);
        std::copy(rep.gamma.begin(), rep.gamma.end(), out.mutable_data());
        return out;
      },
      py::arg("w"), py::arg("h"), py::arg("noise_var"),
      "per-resource-element SINR, shape (L, K, N)");

  m.def(
      "sum_rate",
      [](const CArray& w, const CArray& h, double noise_var) {
        beamform::CombinerWeights W;
        W.w = ctensor_from_array(w);
        channel::ChannelRealization H;
        H.h = ctensor_from_array(h);
        auto rep = beamform::compute_sinr(W, H, noise_var);
        return beamform::sum_rate(rep, beamform::RateWeights::uniform(H.h.dim(3))).mean;
      },
      py::arg("w"), py::arg("h"), py::arg("noise_var"),
      "uniform-weight log2 sum-rate averaged over the grid");

  m.def(
      "qam_modulate",
      [](const std::vector<std::uint8_t>& bits, int order) {
        auto sym = linkeval::qam_modulate(bits, order);
        py::array_t<std::complex<double>> out(static_cast<py::ssize_t>(sym.size()));
        std::copy(sym.begin(), sym.end(), out.mutable_data());
        return out;
      },
      py::arg("bits"), py::arg("order"));
  m.def(
      "qam_demodulate",
      [](const CArray& sym, int order, double noise_var) {
        std::vector<cplx> s(sym.data(), sym.data() + sym.size());
        auto d = linkeval::qam_demodulate(s, order, noise_var);
        return py::make_tuple(d.hard, d.llr);
      },
      py::arg("symbols"), py::arg("order"), py::arg("noise_var"),
      "returns (hard_bits, llrs)");

  m.def("conv_encode",
        [](const std::vector<std::uint8_t>& info, const std::string& rate) {
          return linkeval::conv_encode(info, rate == "3/4"
                                                 ? linkeval::CodeRate::ThreeQuarter
                                                 : linkeval::CodeRate::Half);
        },
        py::arg("info"), py::arg("rate") = "1/2");
  m.def("viterbi_decode",
        [](const std::vector<double>& llrs, const std::string& rate,
           std::int64_t info_len) {
          return linkeval::viterbi_decode(llrs,
                                          rate == "3/4"
                                              ? linkeval::CodeRate::ThreeQuarter
                                              : linkeval::CodeRate::Half,
                                          info_len);
        },
        py::arg("llrs"), py::arg("rate"), py::arg("info_len"));

  py::class_<model::Model>(m, "Model")
      .def(py::init([](std::int64_t M, std::int64_t N, std::int64_t L, std::int64_t K,
                       std::int64_t depth, std::int64_t modules, std::uint64_t seed) {
             model::ModelConfig c;
             c.M = M;
             c.N = N;
             c.L = L;
             c.K = K;
             c.depth = depth;
             c.modules = modules;
             return model::Model(c, seed);
           }),
           py::arg("M"), py::arg("N"), py::arg("L"), py::arg("K"),
           py::arg("depth") = 64, py::arg("modules") = 2, py::arg("seed") = 1)
      .def_static("load", &model::Model::load_checkpoint, py::arg("path"))
      .def("save", &model::Model::save_checkpoint, py::arg("path"))
      .def("param_count", &model::Model::param_count)
      .def(
          "infer",
          [](model::Model& self, const CArray& h_est) {
            auto ws = self.infer({ctensor_from_array(h_est)});
            return ctensor_to_array(ws[0].w);
          },
          py::arg("h_est"),
          "combiner weights (L, K, N, M) for one channel-estimate grid");

  m.def(
      "train_smoke",
      [](std::int64_t M, std::int64_t N, std::int64_t L, std::int64_t K,
         std::int64_t depth, std::int64_t steps_per_stage, std::int64_t batch,
         std::uint64_t seed) {
        model::ModelConfig mc;
        mc.M = M;
        mc.N = N;
        mc.L = L;
        mc.K = K;
        mc.depth = depth;
        mc.modules = 1;
        model::Model mod(mc, seed);
        channel::ScenarioConfig sc;
        sc.L = L;
        sc.K = K;
        sc.M = M;
        sc.N = N;
        train::TrainConfig tc;
        tc.batch = batch;
        tc.seed = seed;
        auto sched = train::CurriculumSchedule::standard(steps_per_stage);
        auto r = train::train(mod, tc, sched, sc);
        std::vector<double> losses;
        for (const auto& row : r.log) losses.push_back(row.loss);
        return py::make_tuple(!r.diverged, losses);
      },
      py::arg("M") = 4, py::arg("N") = 2, py::arg("L") = 4, py::arg("K") = 8,
      py::arg("depth") = 16, py::arg("steps_per_stage") = 10, py::arg("batch") = 2,
      py::arg("seed") = 1,
      "tiny end-to-end training run; returns (converged, per-step losses)");
}
