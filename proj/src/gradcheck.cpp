#include "calip/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

namespace calip {

GradCheckDims GradCheckDims::parse(const std::string& text) {
  GradCheckDims d;
  long hw = 0, k = 0, c = 0;
  char tail = 0;
  if (std::sscanf(text.c_str(), "%ldx%ldx%ld%c", &hw, &k, &c, &tail) != 3 || hw < 1 || k < 1 || c < 1) {
    throw ParameterError("--dims must look like HWxKxC with positive integers, got \"" + text + "\"");
  }
  d.pixels = hw;
  d.classes = k;
  d.channels = c;
  return d;
}

std::string GradCheckDims::to_string() const {
  return std::to_string(pixels) + "x" + std::to_string(classes) + "x" + std::to_string(channels);
}

std::string GradCheckReport::to_string() const {
  std::ostringstream os;
  os.precision(3);
  os << std::scientific;
  for (std::size_t i = 0; i < max_relative_error.size(); ++i) {
    os << ProjectionParams<double>::kTensorNames[i] << ": " << max_relative_error[i] << "\n";
  }
  os << "max relative error: " << max_error << " (threshold " << kThreshold << ")\n";
  os << "entries checked: " << checked << ", skipped at max-pool kinks: " << skipped_kinks << "\n";
  os << "gradcheck: " << (pass ? "pass" : "FAIL") << "\n";
  return os.str();
}

std::vector<LabeledMap<double>> GradCheckInstance::batch() const {
  std::vector<LabeledMap<double>> out;
  for (std::size_t i = 0; i < maps.size(); ++i) out.push_back({&maps[i], labels[i]});
  return out;
}

GradCheckInstance make_gradcheck_instance(std::uint64_t seed, const GradCheckDims& dims) {
  if (dims.pixels < 1 || dims.pixels > 8 || dims.classes < 1 || dims.classes > 4 || dims.channels < 1 ||
      dims.channels > 16) {
    throw ParameterError("gradcheck dims " + dims.to_string() + " outside HW<=8, K<=4, C<=16");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  auto fill = [&](Eigen::Index r, Eigen::Index c, double scale) {
    MatD m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * unit(rng);
    return m;
  };

  GradCheckInstance inst;
  const Eigen::Index c = dims.channels;
  for (int i = 0; i < 2; ++i) {
    inst.maps.emplace_back(dims.pixels, 1, fill(dims.pixels, c, 1.0));
    inst.labels.push_back(static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(dims.classes)));
  }
  inst.text = fill(dims.classes, c, 1.0);
  const double scale = 1.0 / std::sqrt(static_cast<double>(c));
  inst.params = ProjectionParams<double>::zeros(c);
  auto ts = inst.params.tensors();
  for (std::size_t i = 0; i < ts.size(); ++i) {
    if (i % 2 == 0) {
      *ts[i] = MatD::Identity(c, c) + fill(c, c, scale);
    } else {
      *ts[i] = fill(1, c, 0.1);
    }
  }
  inst.settings.hyper = CalipHyper{2.0, 2.0, 1.0, 1.0, 1.0};
  inst.settings.ce_temperature = 10.0;
  return inst;
}

ProjectionParams<double> analytic_gradients(const GradCheckInstance& inst) {
  const auto batch = inst.batch();
  return fs_backward<double>(batch, inst.text, inst.params, inst.settings).grads;
}

namespace {

double batch_loss(const GradCheckInstance& inst, const ProjectionParams<double>& params,
                  std::vector<std::vector<Eigen::Index>>* argmax) {
  double total = 0.0;
  if (argmax) argmax->clear();
  for (std::size_t i = 0; i < inst.maps.size(); ++i) {
    const auto t = fs_forward_trace(inst.maps[i], inst.text, params, inst.settings.hyper, inst.settings.mask,
                                    inst.settings.options);
    total += fs_loss(t.outputs.logits_fused, inst.labels[i], inst.settings.ce_temperature);
    if (argmax) argmax->push_back(detail::pool_argmax(t.outputs.f_s_a));
  }
  return total / static_cast<double>(inst.maps.size());
}

}  // namespace

ProjectionParams<double> numeric_gradients(const GradCheckInstance& inst, double step,
                                           std::array<std::vector<bool>, 8>* kinks) {
  const Eigen::Index c = inst.params.channels();
  auto grads = ProjectionParams<double>::zeros(c);
  auto probe = inst.params;
  std::vector<std::vector<Eigen::Index>> base_argmax, plus_argmax, minus_argmax;
  batch_loss(inst, inst.params, &base_argmax);

  auto probe_tensors = probe.tensors();
  auto grad_tensors = grads.tensors();
  for (std::size_t t = 0; t < probe_tensors.size(); ++t) {
    Mat<double>& p = *probe_tensors[t];
    if (kinks) (*kinks)[t].assign(static_cast<std::size_t>(p.size()), false);
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      const double saved = p.data()[i];
      p.data()[i] = saved + step;
      const double up = batch_loss(inst, probe, &plus_argmax);
      p.data()[i] = saved - step;
      const double down = batch_loss(inst, probe, &minus_argmax);
      p.data()[i] = saved;
      grad_tensors[t]->data()[i] = (up - down) / (2.0 * step);
      if (kinks) (*kinks)[t][i] = plus_argmax != base_argmax || minus_argmax != base_argmax;
    }
  }
  return grads;
}

GradCheckReport compare_gradients(const ProjectionParams<double>& analytic, const ProjectionParams<double>& numeric,
                                  const std::array<std::vector<bool>, 8>* kinks) {
  GradCheckReport report;
  const auto a = analytic.tensors();
  const auto n = numeric.tensors();
  double scale = 0.0;
  for (const auto* t : n) scale = std::max(scale, t->cwiseAbs().maxCoeff());
  const double floor = 1e-2 * scale + 1e-12;
  for (std::size_t t = 0; t < a.size(); ++t) {
    if (a[t]->rows() != n[t]->rows() || a[t]->cols() != n[t]->cols()) {
      throw DimensionError("gradient tensor " + std::string(ProjectionParams<double>::kTensorNames[t]) +
                           " shape mismatch");
    }
    double worst = 0.0;
    for (Eigen::Index i = 0; i < a[t]->size(); ++i) {
      if (kinks && (*kinks)[t][static_cast<std::size_t>(i)]) {
        ++report.skipped_kinks;
        continue;
      }
      const double av = a[t]->data()[i];
      const double nv = n[t]->data()[i];
      const double denom = std::max({std::abs(av), std::abs(nv), floor});
      worst = std::max(worst, std::abs(av - nv) / denom);
      ++report.checked;
    }
    report.max_relative_error[t] = worst;
    report.max_error = std::max(report.max_error, worst);
  }
  report.pass = report.max_error < GradCheckReport::kThreshold;
  return report;
}

GradCheckReport grad_check(std::uint64_t seed, const GradCheckDims& dims) {
  const auto inst = make_gradcheck_instance(seed, dims);
  std::array<std::vector<bool>, 8> kinks;
  const auto numeric = numeric_gradients(inst, 1e-3, &kinks);
  return compare_gradients(analytic_gradients(inst), numeric, &kinks);
}

}  // namespace calip
