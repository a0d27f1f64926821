#include "calip/eval.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <tuple>

#include "calip/parallel.hpp"
#include "json.hpp"

namespace calip {

bool is_protocol_shots(std::size_t shots) {
  return std::find(std::begin(kProtocolShots), std::end(kProtocolShots), shots) != std::end(kProtocolShots);
}

namespace {

std::vector<std::size_t> flatten(const std::vector<std::vector<std::size_t>>& per_class) {
  std::vector<std::size_t> out;
  for (const auto& v : per_class) out.insert(out.end(), v.begin(), v.end());
  return out;
}

std::vector<std::size_t> resolve_indices(const FeatureBundle& bundle, std::span<const std::size_t> indices) {
  if (indices.empty()) {
    std::vector<std::size_t> all(bundle.images.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    return all;
  }
  for (std::size_t i : indices) {
    if (i >= bundle.images.size()) {
      throw ParameterError("image index " + std::to_string(i) + " out of range for " +
                           std::to_string(bundle.images.size()) + " images");
    }
  }
  return {indices.begin(), indices.end()};
}

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

/// Fills counts and per-class accuracy from predictions aligned with `indices`.
void tally(const FeatureBundle& bundle, const std::vector<std::size_t>& indices,
           const std::vector<Eigen::Index>& predictions, EvalReport& report) {
  const auto k = static_cast<std::size_t>(bundle.classes());
  std::vector<std::size_t> hits(k, 0), totals(k, 0);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto label = bundle.images[indices[i]].label;
    ++totals[label];
    if (predictions[i] == static_cast<Eigen::Index>(label)) ++hits[label];
  }
  report.n_total = indices.size();
  report.n_correct = std::accumulate(hits.begin(), hits.end(), std::size_t{0});
  report.accuracy =
      report.n_total == 0 ? 0.0 : 100.0 * static_cast<double>(report.n_correct) / static_cast<double>(report.n_total);
  report.per_class_accuracy.assign(k, std::nullopt);
  for (std::size_t c = 0; c < k; ++c) {
    if (totals[c] > 0) report.per_class_accuracy[c] = 100.0 * double(hits[c]) / double(totals[c]);
  }
}

std::size_t count_correct(const FeatureBundle& bundle, const std::vector<std::size_t>& indices,
                          const std::vector<CalipOutputs<float>>& outputs, const CalipHyper& hyper,
                          const LogitMask& mask) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (argmax_row(fuse_logits(outputs[i], hyper, mask)) ==
        static_cast<Eigen::Index>(bundle.images[indices[i]].label)) {
      ++hits;
    }
  }
  return hits;
}

}  // namespace

std::vector<std::size_t> FewShotSplit::train_indices() const { return flatten(train); }
std::vector<std::size_t> FewShotSplit::val_indices() const { return flatten(val); }

FewShotSplit sample_split(const FeatureBundle& bundle, std::size_t shots, std::uint64_t seed) {
  if (shots < 1) throw ParameterError("shots must be >= 1");
  const auto k = static_cast<std::size_t>(bundle.classes());
  std::vector<std::vector<std::size_t>> members(k);
  for (std::size_t i = 0; i < bundle.images.size(); ++i) members[bundle.images[i].label].push_back(i);

  FewShotSplit split;
  split.shots = shots;
  split.seed = seed;
  split.train.resize(k);
  split.val.resize(k);
  std::mt19937_64 rng(seed);
  for (std::size_t c = 0; c < k; ++c) {
    auto& pool = members[c];
    if (pool.size() < shots) {
      throw ProtocolError("class \"" + bundle.class_names[c] + "\" has " + std::to_string(pool.size()) +
                          " images, fewer than " + std::to_string(shots) + " shots");
    }
    for (std::size_t i = 0; i < shots; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
      std::swap(pool[i], pool[pick(rng)]);
    }
    split.train[c].assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(shots));
    split.val[c].assign(pool.begin() + static_cast<std::ptrdiff_t>(shots), pool.end());
    std::sort(split.train[c].begin(), split.train[c].end());
    std::sort(split.val[c].begin(), split.val[c].end());
  }
  return split;
}

std::string EvalReport::to_json_line() const {
  nlohmann::json per_class = nlohmann::json::array();
  for (const auto& v : per_class_accuracy) per_class.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
  const nlohmann::json j = {
      {"mode", mode},
      {"accuracy", accuracy},
      {"n_correct", n_correct},
      {"n_total", n_total},
      {"per_class_accuracy", per_class},
      {"hyper",
       {{"alpha_t", hyper.alpha_t},
        {"alpha_s", hyper.alpha_s},
        {"beta1", hyper.beta1},
        {"beta2", hyper.beta2},
        {"beta3", hyper.beta3}}},
      {"mask", mask.to_string()},
      {"seed", seed},
      {"wall_time_ms", wall_time_ms},
  };
  return j.dump();
}

EvalReport evaluate_zeroshot(const FeatureBundle& bundle, const CalipHyper& hyper, const LogitMask& mask,
                             std::span<const std::size_t> indices, const CalipOptions& options) {
  const auto start = Clock::now();
  hyper.validate();
  if (mask.empty()) throw ParameterError("logit mask selects no terms");
  const auto idx = resolve_indices(bundle, indices);
  std::vector<Eigen::Index> predictions(idx.size());
  parallel_for(idx.size(), [&](std::size_t i) {
    const auto out = calip_forward(bundle.images[idx[i]].spatial, bundle.text_features, hyper, options);
    predictions[i] = argmax_row(fuse_logits(out, hyper, mask));
  });
  EvalReport report;
  report.mode = "zeroshot";
  report.hyper = hyper;
  report.mask = mask;
  tally(bundle, idx, predictions, report);
  report.wall_time_ms = elapsed_ms(start);
  return report;
}

EvalReport evaluate_clip_baseline(const FeatureBundle& bundle, std::span<const std::size_t> indices,
                                  const CalipOptions& options) {
  const auto start = Clock::now();
  const auto idx = resolve_indices(bundle, indices);
  std::vector<Eigen::Index> predictions(idx.size());
  parallel_for(idx.size(), [&](std::size_t i) {
    predictions[i] = argmax_row(clip_logits(bundle.images[idx[i]].spatial.pixels(), bundle.text_features, options));
  });
  EvalReport report;
  report.mode = "clip";
  report.hyper = CalipHyper{2.0, 2.0, 1.0, 0.0, 0.0};
  report.mask = LogitMask::clip_only();
  tally(bundle, idx, predictions, report);
  report.wall_time_ms = elapsed_ms(start);
  return report;
}

EvalReport evaluate_fewshot(const FeatureBundle& bundle, const ProjectionParams<float>& params,
                            const CalipHyper& hyper, const LogitMask& mask, std::span<const std::size_t> indices,
                            const ProjectionMask& layers, const CalipOptions& options) {
  const auto start = Clock::now();
  hyper.validate();
  if (mask.empty()) throw ParameterError("logit mask selects no terms");
  params.validate(bundle.channels());
  const auto idx = resolve_indices(bundle, indices);
  std::vector<Eigen::Index> predictions(idx.size());
  parallel_for(idx.size(), [&](std::size_t i) {
    const auto out =
        fs_forward(bundle.images[idx[i]].spatial, bundle.text_features, params, hyper, layers, options);
    predictions[i] = argmax_row(fuse_logits(out, hyper, mask));
  });
  EvalReport report;
  report.mode = "fewshot";
  report.hyper = hyper;
  report.mask = mask;
  tally(bundle, idx, predictions, report);
  report.wall_time_ms = elapsed_ms(start);
  return report;
}

void SweepGrid::validate() const {
  auto check = [](const std::vector<double>& values, const char* name, bool strictly_positive) {
    if (values.empty()) throw ParameterError(std::string("sweep grid has no values for ") + name);
    for (double v : values) {
      if (!std::isfinite(v) || (strictly_positive ? !(v > 0.0) : !(v >= 0.0))) {
        throw ParameterError(std::string("sweep grid value ") + std::to_string(v) + " invalid for " + name);
      }
    }
  };
  check(beta2, "beta2", false);
  check(beta3, "beta3", false);
  check(alpha_t, "alpha_t", true);
  check(alpha_s, "alpha_s", true);
}

SweepGrid SweepGrid::parse(const std::string& text) {
  SweepGrid grid;
  std::size_t pos = 0;
  auto fail = [&](std::size_t at, const std::string& why) -> ParameterError {
    return ParameterError("--grid: " + why + " at position " + std::to_string(at) + " in \"" + text + "\"");
  };
  auto parse_number = [&](double& out) {
    const char* first = text.data() + pos;
    const char* last = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(first, last, out);
    if (ec != std::errc() || !std::isfinite(out)) throw fail(pos, "expected a number");
    pos += static_cast<std::size_t>(ptr - first);
  };
  if (text.empty()) throw fail(0, "empty grid");
  while (pos < text.size()) {
    const std::size_t key_at = pos;
    while (pos < text.size() && (std::isalnum(static_cast<unsigned char>(text[pos])) || text[pos] == '_')) ++pos;
    const std::string key = text.substr(key_at, pos - key_at);
    std::vector<double>* target = nullptr;
    if (key == "beta2") target = &grid.beta2;
    else if (key == "beta3") target = &grid.beta3;
    else if (key == "alpha_t") target = &grid.alpha_t;
    else if (key == "alpha_s") target = &grid.alpha_s;
    else throw fail(key_at, key.empty() ? "expected a key" : "unknown key \"" + key + "\"");
    if (pos >= text.size() || text[pos] != '=') throw fail(pos, "expected '='");
    ++pos;

    double start = 0.0;
    parse_number(start);
    std::vector<double> values{start};
    if (pos < text.size() && text[pos] == ':') {
      ++pos;
      const std::size_t step_at = pos;
      double step = 0.0, end = 0.0;
      parse_number(step);
      if (pos >= text.size() || text[pos] != ':') throw fail(pos, "expected ':' before range end");
      ++pos;
      const std::size_t end_at = pos;
      parse_number(end);
      if (!(step > 0.0)) throw fail(step_at, "range step must be > 0");
      if (end < start) throw fail(end_at, "range end is below its start");
      const auto count = static_cast<std::size_t>(std::floor((end - start) / step + 1e-9)) + 1;
      if (count > 10000) throw fail(step_at, "range has more than 10000 values");
      values.clear();
      for (std::size_t i = 0; i < count; ++i) {
        values.push_back(std::round((start + static_cast<double>(i) * step) * 1e12) / 1e12);
      }
    }
    *target = std::move(values);
    if (pos < text.size()) {
      if (text[pos] != ',') throw fail(pos, "expected ',' or end of grid");
      ++pos;
      if (pos == text.size()) throw fail(pos, "trailing ','");
    }
  }
  grid.validate();
  return grid;
}

SweepResult sweep(const FeatureBundle& bundle, const SweepGrid& grid, SweepMode mode,
                  const ProjectionParams<float>* params, std::span<const std::size_t> indices,
                  const LogitMask& mask) {
  grid.validate();
  if (mask.empty()) throw ParameterError("logit mask selects no terms");
  if (mode == SweepMode::FewShot) {
    if (params == nullptr) throw ParameterError("few-shot sweep needs trained parameters");
    params->validate(bundle.channels());
  }
  const auto idx = resolve_indices(bundle, indices);
  const std::size_t n2 = grid.beta2.size(), n3 = grid.beta3.size();
  const std::size_t nt = grid.alpha_t.size(), ns = grid.alpha_s.size();

  SweepResult result;
  result.table.resize(grid.size());
  std::vector<CalipOutputs<float>> outputs(idx.size());
  bool have_fewshot_outputs = false;
  for (std::size_t it = 0; it < nt; ++it) {
    for (std::size_t is = 0; is < ns; ++is) {
      // The logit terms depend only on the temperatures (and not at all in
      // few-shot mode); the betas only re-weight them.
      const CalipHyper base{grid.alpha_t[it], grid.alpha_s[is], 1.0, grid.beta2[0], grid.beta3[0]};
      if (mode == SweepMode::ZeroShot) {
        parallel_for(idx.size(), [&](std::size_t i) {
          outputs[i] = calip_forward(bundle.images[idx[i]].spatial, bundle.text_features, base);
        });
      } else if (!have_fewshot_outputs) {
        parallel_for(idx.size(), [&](std::size_t i) {
          outputs[i] = fs_forward(bundle.images[idx[i]].spatial, bundle.text_features, *params, base);
        });
        have_fewshot_outputs = true;
      }
      for (std::size_t i2 = 0; i2 < n2; ++i2) {
        for (std::size_t i3 = 0; i3 < n3; ++i3) {
          SweepRow row;
          row.hyper = CalipHyper{grid.alpha_t[it], grid.alpha_s[is], 1.0, grid.beta2[i2], grid.beta3[i3]};
          row.n_total = idx.size();
          row.n_correct = count_correct(bundle, idx, outputs, row.hyper, mask);
          row.accuracy = row.n_total == 0 ? 0.0 : 100.0 * double(row.n_correct) / double(row.n_total);
          result.table[((i2 * n3 + i3) * nt + it) * ns + is] = row;
        }
      }
    }
  }

  auto key = [](const CalipHyper& h) { return std::make_tuple(h.beta2, h.beta3, h.alpha_t, h.alpha_s); };
  const SweepRow* best = &result.table.front();
  for (const auto& row : result.table) {
    if (row.n_correct > best->n_correct || (row.n_correct == best->n_correct && key(row.hyper) < key(best->hyper))) {
      best = &row;
    }
  }
  result.best = best->hyper;
  result.best_accuracy = best->accuracy;
  return result;
}

std::vector<AblationRow> ablation_projections(const FeatureBundle& bundle, const FewShotSplit& split,
                                              const TrainConfig& config) {
  const auto train = split.train_indices();
  const auto val = split.val_indices();
  if (val.empty()) throw ProtocolError("split has no validation images");

  std::vector<AblationRow> rows;
  const auto zs = evaluate_zeroshot(bundle, config.hyper, LogitMask::standard(), val, config.options);
  rows.push_back({"none", ProjectionMask::none(), zs.accuracy, zs.n_correct, zs.n_total});

  const std::pair<const char*, ProjectionMask> variants[] = {
      {"pre", {true, false, true, false}},
      {"pre+textual-post", {true, false, true, true}},
      {"pre+visual-post", {true, true, true, false}},
      {"pre+post", ProjectionMask::all()},
  };
  for (const auto& [label, layers] : variants) {
    TrainConfig cfg = config;
    cfg.layers = layers;
    const auto trained = fs_train(bundle, train, cfg);
    const auto rep =
        evaluate_fewshot(bundle, trained.params, cfg.hyper, LogitMask::standard(), val, layers, cfg.options);
    rows.push_back({label, layers, rep.accuracy, rep.n_correct, rep.n_total});
  }
  return rows;
}

std::vector<LogitAblationRow> ablation_logits(const FeatureBundle& bundle, const CalipHyper& hyper,
                                              std::span<const std::size_t> indices,
                                              const ProjectionParams<float>* params) {
  const unsigned masks[] = {0b0001, 0b0011, 0b0101, 0b1001, 0b0111, 0b1111};
  std::vector<LogitAblationRow> rows;
  for (unsigned bits : masks) {
    const LogitMask mask(bits);
    const auto rep = params ? evaluate_fewshot(bundle, *params, hyper, mask, indices)
                            : evaluate_zeroshot(bundle, hyper, mask, indices);
    rows.push_back({mask, rep.accuracy, rep.n_correct, rep.n_total});
  }
  return rows;
}

namespace {

constexpr HyperPreset kPresets[] = {
    {"ImageNet", 1.12, 0.02, 0.12, 0.10},     {"Caltech101", 5.00, 0.18, 0.12, 0.12},
    {"SUN397", 0.43, 0.01, 0.12, 0.12},       {"Food101", 0.60, 0.02, 0.08, 0.10},
    {"Flowers102", 0.50, 0.01, 0.70, 0.70},   {"StanfordCars", 2.80, 0.01, 0.30, 0.40},
    {"FGVCAircraft", 1.30, 0.01, 0.60, 1.00}, {"OxfordPets", 0.61, 0.01, 0.08, 0.08},
    {"DTD", 1.40, 0.01, 0.30, 0.20},          {"EuroSAT", 6.08, 0.06, 0.40, 0.40},
    {"UCF101", 1.28, 0.01, 0.60, 0.60},
};

bool iequals(std::string_view a, std::string_view b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](char x, char y) {
           return std::tolower(static_cast<unsigned char>(x)) == std::tolower(static_cast<unsigned char>(y));
         });
}

}  // namespace

std::span<const HyperPreset> hyper_presets() { return kPresets; }

const HyperPreset& find_preset(std::string_view dataset) {
  for (const auto& p : kPresets) {
    if (iequals(p.dataset, dataset)) return p;
  }
  std::string known;
  for (const auto& p : kPresets) known += (known.empty() ? "" : ", ") + std::string(p.dataset);
  throw ParameterError("unknown preset \"" + std::string(dataset) + "\" (known: " + known + ")");
}

}  // namespace calip
