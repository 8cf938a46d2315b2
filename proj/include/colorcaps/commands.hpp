#pragma once

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "colorcaps/capsnet.hpp"
#include "colorcaps/checkpoint.hpp"
#include "colorcaps/colorspace.hpp"
#include "colorcaps/dataset.hpp"
#include "colorcaps/metrics.hpp"
#include "colorcaps/netpbm.hpp"
#include "colorcaps/patches.hpp"
#include "colorcaps/verify.hpp"

namespace colorcaps {

// Exit codes shared by every command.
constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitCheckFailed = 3;

struct RunConfig {
  ColorCapsNetConfig model;
  std::size_t epochs = 50;
  std::size_t batch_size = 64;
  std::uint64_t seed = 42;        // weight initialization; shuffling uses the manifest seed
  std::string manifest;
  std::string out_dir = "run";
  std::string resume;             // checkpoint to continue from
  std::string vgg_import;         // CCPS file with vgg.conv1_1.* / vgg.conv1_2.* tensors
  std::size_t checkpoint_every = 1;
  OptimizerConfig opt;
};

// Applies a JSON config file onto `rc`. Keys mirror the CLI flag names;
// command-line flags override anything set here.
inline void apply_json_config(RunConfig& rc, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error(path + ": cannot open config file");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw io_error(path + ": config is not valid JSON: " + e.what());
  }
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "patch_size") rc.model.patch_size = value.get<std::size_t>();
      else if (key == "routing") rc.model.routing_iterations = value.get<std::size_t>();
      else if (key == "capsules") rc.model.num_output_capsules = value.get<std::size_t>();
      else if (key == "capsule_dim") rc.model.output_capsule_dim = value.get<std::size_t>();
      else if (key == "primary_caps") rc.model.primary_capsule_count = value.get<std::size_t>();
      else if (key == "primary_dim") rc.model.primary_capsule_dim = value.get<std::size_t>();
      else if (key == "filters") rc.model.feature_filters = value.get<std::size_t>();
      else if (key == "decoder_hidden") rc.model.decoder_hidden = value.get<std::vector<std::size_t>>();
      else if (key == "loss") rc.model.loss = loss_from_name(value.get<std::string>());
      else if (key == "margin_lambda") rc.model.margin_lambda = value.get<double>();
      else if (key == "epochs") rc.epochs = value.get<std::size_t>();
      else if (key == "batch_size") rc.batch_size = value.get<std::size_t>();
      else if (key == "seed") rc.seed = value.get<std::uint64_t>();
      else if (key == "manifest") rc.manifest = value.get<std::string>();
      else if (key == "out") rc.out_dir = value.get<std::string>();
      else if (key == "resume") rc.resume = value.get<std::string>();
      else if (key == "vgg") rc.vgg_import = value.get<std::string>();
      else if (key == "checkpoint_every") rc.checkpoint_every = value.get<std::size_t>();
      else if (key == "lr") rc.opt.lr = value.get<float>();
      else if (key == "beta1") rc.opt.beta1 = value.get<float>();
      else if (key == "beta2") rc.opt.beta2 = value.get<float>();
      else throw config_error(path + ": unknown config key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw io_error(path + ": malformed config: " + e.what());
  }
}

namespace detail {

inline std::string checkpoint_path(const std::string& out_dir, std::size_t epoch) {
  return (std::filesystem::path(out_dir) / ("epoch_" + std::to_string(epoch) + ".ccps")).string();
}

inline void save_train_checkpoint(const RunConfig& rc, const TrainState& st, std::size_t epoch,
                                  std::uint64_t init_seed, std::uint64_t data_seed) {
  Checkpoint cp = train_state_to_checkpoint(st);
  cp.set_meta("epoch", std::to_string(epoch));
  cp.set_meta("seed", std::to_string(init_seed));
  cp.set_meta("data_seed", std::to_string(data_seed));
  char lr[32];
  std::snprintf(lr, sizeof lr, "%.9g", static_cast<double>(rc.opt.lr));
  cp.set_meta("lr", lr);
  save_checkpoint(checkpoint_path(rc.out_dir, epoch), cp);
}

}  // namespace detail

// Trains for rc.epochs total epochs (resuming counts completed epochs from
// the checkpoint), writing per-epoch checkpoints and a `loss.csv` log of
// `epoch,mean_loss` rows to rc.out_dir.
inline int cmd_train(const RunConfig& rc, std::ostream& log = std::cerr) {
  if (rc.manifest.empty()) throw config_error("train requires --manifest");
  rc.model.validate();

  const DatasetManifest manifest = load_manifest(rc.manifest);

  TrainState state{};
  std::size_t epoch_start = 0;
  std::uint64_t init_seed = rc.seed;
  if (!rc.resume.empty()) {
    const Checkpoint cp = load_checkpoint(rc.resume);
    state = train_state_from_checkpoint(cp, rc.opt);
    if (const std::string* e = cp.meta("epoch")) epoch_start = std::stoull(*e);
    if (const std::string* s = cp.meta("seed")) init_seed = std::stoull(*s);
  } else if (!rc.vgg_import.empty()) {
    const Checkpoint vgg = load_checkpoint(rc.vgg_import);
    state = init_train_state(build_model(rc.model, rc.seed, &vgg), rc.opt);
  } else {
    state = init_train_state(build_model(rc.model, rc.seed), rc.opt);
  }
  const std::size_t n = state.model.config.patch_size;
  if (manifest.n != n) {
    throw io_error("manifest patch size " + std::to_string(manifest.n) +
                   " does not match model patch size " + std::to_string(n));
  }

  std::size_t skipped = 0;
  const std::vector<PatchPair> pairs = collect_pairs(build_pairs(manifest), &skipped);
  if (skipped > 0) log << "warning: skipped " << skipped << " record(s) with mismatched dimensions\n";
  if (pairs.empty()) throw io_error(rc.manifest + ": manifest produced no training pairs");

  std::filesystem::create_directories(rc.out_dir);
  std::ofstream loss_log((std::filesystem::path(rc.out_dir) / "loss.csv").string(),
                         std::ios::trunc);
  if (!loss_log) throw io_error(rc.out_dir + ": cannot write loss.csv");
  loss_log << "epoch,mean_loss\n";

  if (epoch_start >= rc.epochs) {
    detail::save_train_checkpoint(rc, state, epoch_start, init_seed, manifest.seed);
    return kExitOk;
  }

  for (std::size_t epoch = epoch_start + 1; epoch <= rc.epochs; ++epoch) {
    const auto batches = shuffle_batches(pairs.size(), rc.batch_size, manifest.seed, epoch);
    double weighted_loss = 0.0;
    std::size_t samples = 0;
    for (const auto& batch : batches) {
      auto [gray, lab] = stack_batch(pairs, batch, n);
      StepResult step = train_step(state, gray, lab);
      state = std::move(step.state);
      weighted_loss += step.loss * static_cast<double>(batch.size());
      samples += batch.size();
    }
    const double mean_loss = weighted_loss / static_cast<double>(samples);
    char row[64];
    std::snprintf(row, sizeof row, "%zu,%.9g\n", epoch, mean_loss);
    loss_log << row << std::flush;

    if (epoch % rc.checkpoint_every == 0 || epoch == rc.epochs) {
      detail::save_train_checkpoint(rc, state, epoch, init_seed, manifest.seed);
    }
  }
  return kExitOk;
}

// Colorizes a grayscale PGM into a color PPM using a trained checkpoint:
// slice into patches, batched inference, denormalize Lab, Lab -> RGB,
// reassemble, write P6.
inline int cmd_colorize(const std::string& checkpoint_path, const std::string& input_path,
                        const std::string& output_path, std::size_t batch_size = 64) {
  const Checkpoint cp = load_checkpoint(checkpoint_path);
  const ModelParams<float> model = model_from_checkpoint(cp);
  const std::size_t n = model.config.patch_size;

  const ImageU8 input = load_image(input_path);
  if (input.extent(0) != 1) throw io_error(input_path + ": expected a grayscale (P5) image");
  const std::size_t H = input.extent(1), W = input.extent(2);

  TensorF gray({1, H, W});
  for (std::size_t i = 0; i < input.numel(); ++i) {
    gray.data[i] = static_cast<float>(input.data[i]) / 255.0f;
  }
  const SliceResult<float> sliced = slice_patches(gray, n);
  const std::size_t count = sliced.grid.rows * sliced.grid.cols;

  ImageU8 rgb_patches({count, 3, n, n});
  for (std::size_t at = 0; at < count; at += batch_size) {
    const std::size_t take = std::min(batch_size, count - at);
    TensorF batch({take, 1, n, n});
    std::copy_n(sliced.patches.data.begin() + at * n * n, take * n * n, batch.data.begin());
    const auto fwd = forward(model, batch, RunMode::infer);
    for (std::size_t b = 0; b < take; ++b) {
      for (std::size_t y = 0; y < n; ++y) {
        for (std::size_t x = 0; x < n; ++x) {
          const LabPixel lab = denormalize_lab(fwd.lab_pred.at(b, 0, y, x),
                                               fwd.lab_pred.at(b, 1, y, x),
                                               fwd.lab_pred.at(b, 2, y, x));
          const RgbPixel px = lab_to_rgb(lab);
          rgb_patches.at(at + b, 0, y, x) = px.r;
          rgb_patches.at(at + b, 1, y, x) = px.g;
          rgb_patches.at(at + b, 2, y, x) = px.b;
        }
      }
    }
  }
  write_image(output_path, reassemble_patches(rgb_patches, sliced.grid));
  return kExitOk;
}

// Scores (reference, estimate) image pairs; CSV rows `name,psnr,ssim` with a
// trailing mean row. Verbose mode appends the whole-image SSIM variant.
inline int cmd_evaluate(const std::vector<std::pair<std::string, std::string>>& pairs,
                        std::ostream& out, bool verbose = false,
                        std::ostream& err = std::cerr) {
  out << (verbose ? "name,psnr,ssim,ssim_global\n" : "name,psnr,ssim\n");
  int exit_code = kExitOk;
  double psnr_sum = 0.0, ssim_sum = 0.0;
  std::size_t rows = 0, finite_psnr_rows = 0;

  char buf[64];
  for (const auto& [ref_path, est_path] : pairs) {
    try {
      const ImageU8 ref = load_image(ref_path);
      const ImageU8 est = load_image(est_path);
      const double p = psnr(ref, est);
      const double s = ssim(ref, est);
      out << est_path << ',';
      if (std::isinf(p)) {
        out << "inf";
      } else {
        std::snprintf(buf, sizeof buf, "%.6f", p);
        out << buf;
        psnr_sum += p;
        ++finite_psnr_rows;
      }
      std::snprintf(buf, sizeof buf, ",%.6f", s);
      out << buf;
      if (verbose) {
        std::snprintf(buf, sizeof buf, ",%.6f", ssim_global(ref, est));
        out << buf;
      }
      out << '\n';
      ssim_sum += s;
      ++rows;
    } catch (const error& e) {
      err << "error: " << est_path << ": " << e.what() << "\n";
      exit_code = kExitData;
    }
  }

  if (rows > 0) {
    out << "mean,";
    if (finite_psnr_rows > 0) {
      std::snprintf(buf, sizeof buf, "%.6f", psnr_sum / static_cast<double>(finite_psnr_rows));
      out << buf;
    } else {
      out << "inf";
    }
    std::snprintf(buf, sizeof buf, ",%.6f", ssim_sum / static_cast<double>(rows));
    out << buf << '\n';
  }
  return exit_code;
}

// End-to-end gradient check; exit 0 iff the worst relative error is below
// 1e-3. "reduced" sweeps every coordinate of a width-reduced model;
// "full-ish" samples coordinates of the default-width topology.
inline int cmd_gradcheck(const std::string& scale, std::ostream& out) {
  ColorCapsNetConfig cfg;
  std::size_t samples = 0;
  if (scale == "reduced") {
    cfg = reduced_check_config();
  } else if (scale == "full-ish" || scale == "full") {
    samples = 40;
  } else {
    throw config_error("gradcheck scale must be 'reduced' or 'full-ish', got '" + scale + "'");
  }
  const ModelCheckReport report = model_gradient_check(cfg, 7, 2, samples);
  char buf[160];
  std::snprintf(buf, sizeof buf, "%s: checked %zu coordinates, worst relative error %.3e (threshold 1e-3)\n",
                scale.c_str(), report.coords_checked, report.worst_rel_err);
  out << buf;
  const bool ok = report.worst_rel_err < 1e-3;
  out << (ok ? "PASS" : "FAIL") << "\n";
  return ok ? kExitOk : kExitCheckFailed;
}

// Dumps checkpoint entries and metadata. When the checkpoint embeds a model
// config, the trainable-parameter total is verified against count_parameters.
inline int cmd_inspect(const std::string& path, std::ostream& out) {
  const Checkpoint cp = load_checkpoint(path);
  out << path << ": format version " << cp.version << ", " << cp.entries.size()
      << " tensors\n";

  auto is_trainable = [](const std::string& name) {
    return name.rfind("adam.", 0) != 0 &&
           name.find(".running_mean") == std::string::npos &&
           name.find(".running_var") == std::string::npos;
  };

  std::size_t trainable = 0, total = 0;
  for (const auto& e : cp.entries) {
    out << "  " << e.name << " " << shape_str(e.shape) << " = " << e.data.size() << "\n";
    total += e.data.size();
    if (is_trainable(e.name)) trainable += e.data.size();
  }
  out << "stored values: " << total << "\n";
  out << "trainable parameters: " << trainable << "\n";
  for (const auto& [k, v] : cp.metadata) out << "meta " << k << " = " << v << "\n";

  if (cp.meta("config.patch_size")) {
    const ParamCount pc = count_parameters(decode_config_meta(cp));
    out << "count_parameters breakdown:\n";
    for (const auto& [name, count] : pc.breakdown) {
      out << "  " << name << " = " << count << "\n";
    }
    out << "count_parameters total: " << pc.total << "\n";
    if (pc.total != trainable) {
      out << "MISMATCH: stored trainable parameters do not match the embedded config\n";
      return kExitCheckFailed;
    }
    out << "trainable total matches embedded config\n";
  }
  return kExitOk;
}

}  // namespace colorcaps
