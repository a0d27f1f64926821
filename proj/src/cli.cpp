#include "calip/cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "calip/eval.hpp"
#include "calip/feature_store.hpp"
#include "calip/gradcheck.hpp"
#include "calip/training.hpp"

namespace calip::cli {
namespace {

namespace fs = std::filesystem;

struct HyperFlags {
  double alpha_t = 2.0;
  double alpha_s = 2.0;
  double beta1 = 1.0;
  double beta2 = 1.0;
  double beta3 = 0.1;
  std::string preset;

  void add_to(CLI::App& cmd, bool with_alphas = true) {
    if (with_alphas) {
      cmd.add_option("--alpha-t", alpha_t, "softmax temperature of the visual update")->capture_default_str();
      cmd.add_option("--alpha-s", alpha_s, "softmax temperature of the textual update")->capture_default_str();
    }
    cmd.add_option("--beta1", beta1, "weight of the plain cosine logits")->capture_default_str();
    cmd.add_option("--beta2", beta2, "weight of the updated-textual logits")->capture_default_str();
    cmd.add_option("--beta3", beta3, "weight of the updated-visual logits")->capture_default_str();
  }

  /// Validates per flag; errors name the flag.
  CalipHyper resolve(const CLI::App& cmd, bool fewshot) const {
    auto positive = [](const char* flag, double v) {
      if (!std::isfinite(v) || !(v > 0.0)) {
        std::ostringstream os;
        os << flag << " must be > 0 (got " << v << ")";
        throw ParameterError(os.str());
      }
    };
    auto nonnegative = [](const char* flag, double v) {
      if (!std::isfinite(v) || !(v >= 0.0)) {
        std::ostringstream os;
        os << flag << " must be >= 0 (got " << v << ")";
        throw ParameterError(os.str());
      }
    };
    positive("--alpha-t", alpha_t);
    positive("--alpha-s", alpha_s);
    nonnegative("--beta1", beta1);
    nonnegative("--beta2", beta2);
    nonnegative("--beta3", beta3);
    CalipHyper h{alpha_t, alpha_s, beta1, beta2, beta3};
    if (!preset.empty()) {
      const auto& p = find_preset(preset);
      const CalipHyper tuned = fewshot ? p.fewshot() : p.zeroshot();
      if (cmd.count("--beta2") == 0) h.beta2 = tuned.beta2;
      if (cmd.count("--beta3") == 0) h.beta3 = tuned.beta3;
    }
    h.validate();
    return h;
  }
};

void require_file(const std::string& path) {
  std::error_code ec;
  if (!fs::exists(path, ec)) throw IoError("no such file: " + path);
  if (fs::is_directory(path, ec)) throw IoError("is a directory: " + path);
}

void require_writable_target(const std::string& path) {
  const fs::path p(path);
  const fs::path parent = p.has_parent_path() ? p.parent_path() : fs::path(".");
  std::error_code ec;
  if (!fs::is_directory(parent, ec)) throw IoError("no such directory for output: " + parent.string());
  if (fs::is_directory(p, ec)) throw IoError("output path is a directory: " + path);
}

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path);
  for (const auto& line : lines) f << line << '\n';
  if (!f) throw IoError("write failed: " + path);
}

std::string percent(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << v << "%";
  return os.str();
}

std::string hyper_text(const CalipHyper& h) {
  std::ostringstream os;
  os << "alpha_t=" << h.alpha_t << " alpha_s=" << h.alpha_s << " beta1=" << h.beta1 << " beta2=" << h.beta2
     << " beta3=" << h.beta3;
  return os.str();
}

std::size_t checked_shots(std::size_t shots, bool allow_any) {
  if (shots < 1) throw ParameterError("--shots must be >= 1");
  if (!allow_any && !is_protocol_shots(shots)) {
    throw ProtocolError("--shots " + std::to_string(shots) +
                        " is not one of 1, 2, 4, 8, 16 (pass --allow-any-shots to override)");
  }
  return shots;
}

struct TrainFlags {
  std::size_t shots = 16;
  std::uint64_t seed = 0;
  std::size_t epochs = 200;
  double lr = 2e-3;
  std::size_t batch_size = 32;
  double ce_temperature = 100.0;
  bool allow_any_shots = false;
  bool constant_lr = false;

  void add_to(CLI::App& cmd) {
    cmd.add_option("--shots", shots, "training images per class")->capture_default_str();
    cmd.add_option("--seed", seed, "seed for the split, initialization and shuffling")->capture_default_str();
    cmd.add_option("--epochs", epochs)->capture_default_str();
    cmd.add_option("--lr", lr, "base SGD learning rate")->capture_default_str();
    cmd.add_option("--batch-size", batch_size)->capture_default_str();
    cmd.add_option("--ce-temperature", ce_temperature, "logit scale inside the cross-entropy")
        ->capture_default_str();
    cmd.add_flag("--allow-any-shots", allow_any_shots, "accept shot counts outside 1, 2, 4, 8, 16");
    cmd.add_flag("--constant-lr", constant_lr, "disable cosine annealing");
  }

  TrainConfig config(const CalipHyper& hyper) const {
    if (epochs < 1) throw ParameterError("--epochs must be >= 1");
    if (batch_size < 1) throw ParameterError("--batch-size must be >= 1");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ParameterError("--lr must be > 0");
    if (!(ce_temperature > 0.0) || !std::isfinite(ce_temperature)) {
      throw ParameterError("--ce-temperature must be > 0");
    }
    TrainConfig c;
    c.epochs = epochs;
    c.batch_size = batch_size;
    c.lr = lr;
    c.seed = seed;
    c.ce_temperature = ce_temperature;
    c.hyper = hyper;
    c.schedule = constant_lr ? LrSchedule::Constant : LrSchedule::Cosine;
    return c;
  }
};

void print_loss_trace(std::ostream& out, const TrainResult& r) {
  out << "loss: initial " << std::setprecision(6) << r.initial_loss << " -> final " << r.final_loss << "\n";
  const std::size_t n = r.epoch_loss.size();
  out << "epoch loss:";
  std::size_t last = std::numeric_limits<std::size_t>::max();
  for (int q = 0; q <= 4; ++q) {
    const std::size_t e = q == 4 ? n - 1 : (n - 1) * static_cast<std::size_t>(q) / 4;
    if (e == last) continue;
    last = e;
    out << " [" << e + 1 << "] " << r.epoch_loss[e];
  }
  out << "\n";
}

int dispatch(const std::function<int()>& body, std::ostream& err) {
  try {
    return body();
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Cross-modal attention over pre-extracted vision-language features", "calip"};
  app.require_subcommand(1);
  std::function<int()> action;

  // zeroshot
  auto* zs = app.add_subcommand("zeroshot", "evaluate the parameter-free attention on a feature bundle");
  std::string zs_features, zs_mask = "1,2,3", zs_report;
  bool zs_no_pixel_norm = false, zs_no_renorm = false;
  HyperFlags zs_hyper;
  zs->add_option("--features", zs_features, "feature bundle (.calf)")->required();
  zs_hyper.add_to(*zs);
  zs->add_option("--preset", zs_hyper.preset, "take beta2/beta3 from a dataset preset");
  zs->add_option("--mask", zs_mask, "logit terms to fuse, e.g. 1,2,3")->capture_default_str();
  zs->add_option("--report", zs_report, "write a JSON-lines report here");
  zs->add_flag("--no-pixel-norm", zs_no_pixel_norm, "skip per-pixel L2 normalization");
  zs->add_flag("--no-renorm", zs_no_renorm, "skip re-normalizing updated features");
  zs->callback([&] {
    action = [&] {
      const auto hyper = zs_hyper.resolve(*zs, false);
      const auto mask = LogitMask::parse(zs_mask);
      require_file(zs_features);
      if (!zs_report.empty()) require_writable_target(zs_report);
      const auto bundle = load_bundle(zs_features);
      const CalipOptions options{!zs_no_pixel_norm, !zs_no_renorm};
      const auto rep = evaluate_zeroshot(bundle, hyper, mask, {}, options);
      const auto base = evaluate_clip_baseline(bundle, {}, options);
      out << "images: " << rep.n_total << "\n";
      out << "hyper: " << hyper_text(hyper) << " mask=" << mask.to_string() << "\n";
      out << "clip baseline accuracy: " << percent(base.accuracy) << " (" << base.n_correct << "/" << base.n_total
          << ")\n";
      out << "accuracy: " << percent(rep.accuracy) << " (" << rep.n_correct << "/" << rep.n_total << ")\n";
      if (!zs_report.empty()) write_lines(zs_report, {rep.to_json_line(), base.to_json_line()});
      return int(kOk);
    };
  });

  // train
  auto* tr = app.add_subcommand("train", "few-shot fine-tune the projection layers");
  std::string tr_features, tr_out, tr_report;
  HyperFlags tr_hyper;
  tr_hyper.beta2 = 0.12;
  tr_hyper.beta3 = 0.12;
  TrainFlags tr_flags;
  tr->add_option("--features", tr_features, "feature bundle holding the training pool")->required();
  tr->add_option("--out", tr_out, "weights file to write")->required();
  tr_flags.add_to(*tr);
  tr_hyper.add_to(*tr, false);
  tr->add_option("--preset", tr_hyper.preset, "take beta2/beta3 from a dataset preset");
  tr->add_option("--report", tr_report, "write a JSON-lines report of the held-out evaluation");
  tr->callback([&] {
    action = [&] {
      const auto hyper = tr_hyper.resolve(*tr, true);
      const auto config = tr_flags.config(hyper);
      const auto shots = checked_shots(tr_flags.shots, tr_flags.allow_any_shots);
      require_file(tr_features);
      require_writable_target(tr_out);
      if (!tr_report.empty()) require_writable_target(tr_report);
      const auto bundle = load_bundle(tr_features);
      const auto split = sample_split(bundle, shots, tr_flags.seed);
      const auto train_idx = split.train_indices();
      const auto result = fs_train(bundle, train_idx, config);
      save_weights({result.params, tr_flags.seed, static_cast<std::uint32_t>(config.epochs),
                    static_cast<float>(config.lr)},
                   tr_out);
      out << "train images: " << train_idx.size() << " (" << shots << " shots x " << bundle.classes()
          << " classes)\n";
      print_loss_trace(out, result);
      out << "final train accuracy: " << percent(result.train_accuracy) << "\n";
      const auto val_idx = split.val_indices();
      std::vector<std::string> lines;
      if (!val_idx.empty()) {
        auto rep = evaluate_fewshot(bundle, result.params, hyper, LogitMask::standard(), val_idx);
        rep.seed = tr_flags.seed;
        out << "held-out accuracy: " << percent(rep.accuracy) << " (" << rep.n_correct << "/" << rep.n_total
            << ")\n";
        lines.push_back(rep.to_json_line());
      }
      out << "weights: " << tr_out << "\n";
      if (!tr_report.empty()) write_lines(tr_report, lines);
      return int(kOk);
    };
  });

  // fewshot
  auto* fw = app.add_subcommand("fewshot", "evaluate trained projection layers on a feature bundle");
  std::string fw_features, fw_weights, fw_mask = "1,2,3", fw_report;
  HyperFlags fw_hyper;
  fw_hyper.beta2 = 0.12;
  fw_hyper.beta3 = 0.12;
  fw->add_option("--features", fw_features)->required();
  fw->add_option("--weights", fw_weights)->required();
  fw_hyper.add_to(*fw, false);
  fw->add_option("--preset", fw_hyper.preset, "take beta2/beta3 from a dataset preset");
  fw->add_option("--mask", fw_mask)->capture_default_str();
  fw->add_option("--report", fw_report);
  fw->callback([&] {
    action = [&] {
      const auto hyper = fw_hyper.resolve(*fw, true);
      const auto mask = LogitMask::parse(fw_mask);
      require_file(fw_features);
      require_file(fw_weights);
      if (!fw_report.empty()) require_writable_target(fw_report);
      const auto bundle = load_bundle(fw_features);
      const auto weights = load_weights(fw_weights);
      check_compatible(weights, bundle);
      auto rep = evaluate_fewshot(bundle, weights.params, hyper, mask);
      rep.seed = weights.seed;
      out << "images: " << rep.n_total << "\n";
      out << "accuracy: " << percent(rep.accuracy) << " (" << rep.n_correct << "/" << rep.n_total << ")\n";
      if (!fw_report.empty()) write_lines(fw_report, {rep.to_json_line()});
      return int(kOk);
    };
  });

  // sweep
  auto* sw = app.add_subcommand("sweep", "grid-search beta2, beta3, alpha_t, alpha_s on a validation bundle");
  std::string sw_train, sw_val, sw_grid, sw_mode = "zeroshot", sw_weights, sw_table, sw_mask = "1,2,3";
  TrainFlags sw_flags;
  sw->add_option("--train", sw_train, "training pool (few-shot mode trains on it unless --weights is given)");
  sw->add_option("--val", sw_val, "validation bundle; defaults to --train");
  sw->add_option("--grid", sw_grid, "e.g. beta2=0.08:0.02:0.18,beta3=0.12")->required();
  sw->add_option("--mode", sw_mode)->check(CLI::IsMember({"zeroshot", "fewshot"}))->capture_default_str();
  sw->add_option("--weights", sw_weights, "trained weights for few-shot mode");
  sw->add_option("--table", sw_table, "write the full grid table as JSON lines");
  sw->add_option("--mask", sw_mask)->capture_default_str();
  sw_flags.add_to(*sw);
  sw->callback([&] {
    action = [&] {
      const auto grid = SweepGrid::parse(sw_grid);
      const auto mask = LogitMask::parse(sw_mask);
      const SweepMode mode = sw_mode == "fewshot" ? SweepMode::FewShot : SweepMode::ZeroShot;
      if (sw_train.empty() && sw_val.empty()) throw ParameterError("sweep needs --val or --train");
      const std::string val_path = sw_val.empty() ? sw_train : sw_val;
      require_file(val_path);
      if (!sw_train.empty()) require_file(sw_train);
      if (!sw_weights.empty()) require_file(sw_weights);
      if (!sw_table.empty()) require_writable_target(sw_table);
      if (mode == SweepMode::FewShot && sw_weights.empty() && sw_train.empty()) {
        throw ParameterError("few-shot sweep needs --weights or --train");
      }
      const auto val = load_bundle(val_path);

      std::optional<ProjectionParams<float>> params;
      if (mode == SweepMode::FewShot) {
        if (!sw_weights.empty()) {
          const auto weights = load_weights(sw_weights);
          check_compatible(weights, val);
          params = weights.params;
        } else {
          const auto train = load_bundle(sw_train);
          const auto shots = checked_shots(sw_flags.shots, sw_flags.allow_any_shots);
          const auto split = sample_split(train, shots, sw_flags.seed);
          const auto config = sw_flags.config(TrainConfig{}.hyper);
          params = fs_train(train, split.train_indices(), config).params;
          if (train.channels() != val.channels()) throw DimensionError("train and val bundles differ in C");
        }
      }
      const auto result = sweep(val, grid, mode, params ? &*params : nullptr, {}, mask);
      std::vector<std::string> lines;
      for (const auto& row : result.table) {
        const nlohmann::json j = {{"beta1", row.hyper.beta1},   {"beta2", row.hyper.beta2},
                                  {"beta3", row.hyper.beta3},   {"alpha_t", row.hyper.alpha_t},
                                  {"alpha_s", row.hyper.alpha_s}, {"accuracy", row.accuracy},
                                  {"n_correct", row.n_correct}, {"n_total", row.n_total}};
        lines.push_back(j.dump());
      }
      out << "grid points: " << result.table.size() << "\n";
      out << "best: " << hyper_text(result.best) << " accuracy " << percent(result.best_accuracy) << "\n";
      if (!sw_table.empty()) {
        write_lines(sw_table, lines);
        out << "table: " << sw_table << " (" << lines.size() << " rows)\n";
      } else {
        for (const auto& l : lines) out << l << "\n";
      }
      return int(kOk);
    };
  });

  // ablate
  auto* ab = app.add_subcommand("ablate", "projection-placement or logit-combination ablation");
  std::string ab_features, ab_kind = "projections", ab_weights;
  HyperFlags ab_hyper;
  ab_hyper.beta2 = 0.12;
  ab_hyper.beta3 = 0.12;
  TrainFlags ab_flags;
  ab->add_option("--features", ab_features)->required();
  ab->add_option("--kind", ab_kind)->check(CLI::IsMember({"projections", "logits"}))->capture_default_str();
  ab->add_option("--weights", ab_weights, "trained weights for a few-shot logit ablation");
  ab_hyper.add_to(*ab);
  ab_flags.add_to(*ab);
  ab->callback([&] {
    action = [&] {
      const auto hyper = ab_hyper.resolve(*ab, true);
      require_file(ab_features);
      if (!ab_weights.empty()) require_file(ab_weights);
      const auto bundle = load_bundle(ab_features);
      if (ab_kind == "projections") {
        const auto shots = checked_shots(ab_flags.shots, ab_flags.allow_any_shots);
        const auto split = sample_split(bundle, shots, ab_flags.seed);
        const auto rows = ablation_projections(bundle, split, ab_flags.config(hyper));
        out << "visual-pre visual-post text-pre text-post accuracy\n";
        for (const auto& r : rows) {
          out << (r.layers.visual_pre ? "x" : "-") << " " << (r.layers.visual_post ? "x" : "-") << " "
              << (r.layers.text_pre ? "x" : "-") << " " << (r.layers.text_post ? "x" : "-") << " "
              << percent(r.accuracy) << " (" << r.label << ")\n";
        }
      } else {
        std::optional<ProjectionParams<float>> params;
        if (!ab_weights.empty()) {
          const auto weights = load_weights(ab_weights);
          check_compatible(weights, bundle);
          params = weights.params;
        }
        const auto rows = ablation_logits(bundle, hyper, {}, params ? &*params : nullptr);
        out << "terms accuracy\n";
        for (const auto& r : rows) out << r.mask.to_string() << " " << percent(r.accuracy) << "\n";
      }
      return int(kOk);
    };
  });

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "compare analytic gradients with central differences");
  std::uint64_t gc_seed = 0;
  std::string gc_dims = "4x3x8";
  gc->add_option("--seed", gc_seed)->capture_default_str();
  gc->add_option("--dims", gc_dims, "HWxKxC with HW<=8, K<=4, C<=16")->capture_default_str();
  gc->callback([&] {
    action = [&] {
      const auto dims = GradCheckDims::parse(gc_dims);
      const auto report = grad_check(gc_seed, dims);
      out << "seed " << gc_seed << " dims " << dims.to_string() << "\n" << report.to_string();
      return int(report.pass ? kOk : kCheckFailed);
    };
  });

  // inspect
  auto* in = app.add_subcommand("inspect", "print a feature bundle's header and statistics");
  std::string in_features;
  in->add_option("--features", in_features)->required();
  in->callback([&] {
    action = [&] {
      require_file(in_features);
      const auto bundle = load_bundle(in_features);
      out << "classes: " << bundle.classes() << "\n";
      out << "channels: " << bundle.channels() << "\n";
      out << "spatial: " << bundle.h << "x" << bundle.w << "\n";
      out << "images: " << bundle.images.size() << "\n";
      out << "class names:";
      for (const auto& n : bundle.class_names) out << " " << n;
      out << "\n";
      const auto text_norms = bundle.text_features.rowwise().norm();
      out << "text row norm: min " << text_norms.minCoeff() << " max " << text_norms.maxCoeff() << "\n";
      if (!bundle.images.empty()) {
        double lo = std::numeric_limits<double>::infinity(), hi = 0.0, sum = 0.0;
        std::size_t count = 0, non_finite = 0;
        std::vector<std::size_t> per_class(static_cast<std::size_t>(bundle.classes()), 0);
        for (const auto& img : bundle.images) {
          ++per_class[img.label];
          const auto& px = img.spatial.pixels();
          non_finite += static_cast<std::size_t>((!px.array().isFinite()).count());
          for (Eigen::Index p = 0; p < px.rows(); ++p) {
            const double n = px.row(p).template cast<double>().norm();
            lo = std::min(lo, n);
            hi = std::max(hi, n);
            sum += n;
            ++count;
          }
        }
        out << "pixel norm: min " << lo << " mean " << sum / double(count) << " max " << hi << "\n";
        out << "non-finite values: " << non_finite << "\n";
        out << "images per class:";
        for (auto c : per_class) out << " " << c;
        out << "\n";
      } else {
        out << "non-finite values: 0\n";
      }
      return int(kOk);
    };
  });

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  if (!reversed.empty()) reversed.pop_back();  // program name
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return kOk;
  } catch (const CLI::CallForAllHelp& e) {
    app.exit(e, out, err);
    return kOk;
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }
  if (!action) return kUsage;
  return dispatch(action, err);
}

}  // namespace calip::cli
