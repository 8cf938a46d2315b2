// colorcaps command-line tool: train, colorize, evaluate, gradcheck, inspect.

#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "colorcaps/commands.hpp"

namespace {

std::vector<std::size_t> parse_size_list(const std::string& csv) {
  std::vector<std::size_t> out;
  std::istringstream in(csv);
  std::string tok;
  while (std::getline(in, tok, ',')) {
    if (tok.empty()) continue;
    out.push_back(std::stoull(tok));
  }
  if (out.empty()) throw colorcaps::config_error("empty size list '" + csv + "'");
  return out;
}

// Staging area for flags so that a --config JSON file can provide defaults
// and explicitly passed flags still win.
struct Flags {
  std::string config_file;
  std::size_t patch_size = 9, routing = 1, capsules = 6, capsule_dim = 16;
  std::size_t primary_caps = 32, primary_dim = 8, filters = 64;
  std::string decoder_hidden = "512,1024";
  std::string loss = "mse";
  double margin_lambda = 0.5;
  std::size_t epochs = 50, batch_size = 64, checkpoint_every = 1;
  std::uint64_t seed = 42;
  std::string manifest, out_dir = "run", resume, vgg;
  double lr = 1e-3, beta1 = 0.9, beta2 = 0.999;
};

void add_model_flags(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config_file, "JSON config file; flags override its values");
  cmd->add_option("--patch-size", f.patch_size, "patch edge n");
  cmd->add_option("--routing", f.routing, "routing iterations r");
  cmd->add_option("--capsules", f.capsules, "output capsule count C");
  cmd->add_option("--capsule-dim", f.capsule_dim, "output capsule dimension");
  cmd->add_option("--primary-caps", f.primary_caps, "primary capsule count");
  cmd->add_option("--primary-dim", f.primary_dim, "primary capsule dimension");
  cmd->add_option("--filters", f.filters, "feature conv filter count");
  cmd->add_option("--decoder-hidden", f.decoder_hidden, "decoder hidden widths, comma-separated");
  cmd->add_option("--loss", f.loss, "training loss: mse or margin");
  cmd->add_option("--margin-lambda", f.margin_lambda, "margin loss lambda");
  cmd->add_option("--epochs", f.epochs, "total epochs to reach");
  cmd->add_option("--batch-size", f.batch_size, "training batch size");
  cmd->add_option("--seed", f.seed, "weight init seed");
  cmd->add_option("--lr", f.lr, "Adam learning rate");
  cmd->add_option("--beta1", f.beta1, "Adam beta1");
  cmd->add_option("--beta2", f.beta2, "Adam beta2");
  cmd->add_option("--checkpoint-every", f.checkpoint_every, "epochs between checkpoints");
}

colorcaps::RunConfig make_run_config(CLI::App* cmd, const Flags& f) {
  colorcaps::RunConfig rc;
  if (!f.config_file.empty()) colorcaps::apply_json_config(rc, f.config_file);

  auto given = [cmd](const std::string& name) { return cmd->count(name) > 0; };
  if (given("--patch-size")) rc.model.patch_size = f.patch_size;
  if (given("--routing")) rc.model.routing_iterations = f.routing;
  if (given("--capsules")) rc.model.num_output_capsules = f.capsules;
  if (given("--capsule-dim")) rc.model.output_capsule_dim = f.capsule_dim;
  if (given("--primary-caps")) rc.model.primary_capsule_count = f.primary_caps;
  if (given("--primary-dim")) rc.model.primary_capsule_dim = f.primary_dim;
  if (given("--filters")) rc.model.feature_filters = f.filters;
  if (given("--decoder-hidden")) rc.model.decoder_hidden = parse_size_list(f.decoder_hidden);
  if (given("--loss")) rc.model.loss = colorcaps::loss_from_name(f.loss);
  if (given("--margin-lambda")) rc.model.margin_lambda = f.margin_lambda;
  if (given("--epochs")) rc.epochs = f.epochs;
  if (given("--batch-size")) rc.batch_size = f.batch_size;
  if (given("--seed")) rc.seed = f.seed;
  if (given("--manifest")) rc.manifest = f.manifest;
  if (given("--out")) rc.out_dir = f.out_dir;
  if (given("--resume")) rc.resume = f.resume;
  if (given("--vgg")) rc.vgg_import = f.vgg;
  if (given("--checkpoint-every")) rc.checkpoint_every = f.checkpoint_every;
  if (given("--lr")) rc.opt.lr = static_cast<float>(f.lr);
  if (given("--beta1")) rc.opt.beta1 = static_cast<float>(f.beta1);
  if (given("--beta2")) rc.opt.beta2 = static_cast<float>(f.beta2);
  return rc;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"colorcaps: capsule-network image colorizer"};
  app.require_subcommand(1);
  Flags f;

  CLI::App* train = app.add_subcommand("train", "train a model from a dataset manifest");
  add_model_flags(train, f);
  train->add_option("--manifest", f.manifest, "dataset manifest JSON");
  train->add_option("--out", f.out_dir, "output directory for checkpoints and loss.csv");
  train->add_option("--resume", f.resume, "checkpoint to resume from");
  train->add_option("--vgg", f.vgg, "CCPS file with pretrained feature-conv weights");

  std::string ckpt, in_path, out_path;
  std::size_t colorize_batch = 64;
  CLI::App* colorize = app.add_subcommand("colorize", "colorize a grayscale PGM into a PPM");
  colorize->add_option("checkpoint", ckpt, "trained checkpoint")->required();
  colorize->add_option("input", in_path, "input PGM")->required();
  colorize->add_option("output", out_path, "output PPM")->required();
  colorize->add_option("--batch-size", colorize_batch, "inference batch size");

  std::vector<std::string> eval_files;
  bool verbose = false;
  CLI::App* evaluate = app.add_subcommand("evaluate", "PSNR/SSIM of reference/estimate pairs");
  evaluate->add_option("images", eval_files, "reference estimate [reference estimate ...]")
      ->required();
  evaluate->add_flag("--verbose", verbose, "also emit the whole-image SSIM variant");

  std::string scale = "reduced";
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check");
  gradcheck->add_option("--scale", scale, "reduced (exhaustive) or full-ish (sampled)");

  CLI::App* inspect = app.add_subcommand("inspect", "list checkpoint contents");
  inspect->add_option("checkpoint", ckpt, "checkpoint to inspect")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return colorcaps::kExitUsage;
  }

  try {
    if (train->parsed()) return colorcaps::cmd_train(make_run_config(train, f));
    if (colorize->parsed()) return colorcaps::cmd_colorize(ckpt, in_path, out_path, colorize_batch);
    if (evaluate->parsed()) {
      if (eval_files.size() < 2 || eval_files.size() % 2 != 0) {
        std::cerr << "evaluate needs an even number of image arguments\n";
        return colorcaps::kExitUsage;
      }
      std::vector<std::pair<std::string, std::string>> pairs;
      for (std::size_t i = 0; i < eval_files.size(); i += 2) {
        pairs.emplace_back(eval_files[i], eval_files[i + 1]);
      }
      return colorcaps::cmd_evaluate(pairs, std::cout, verbose);
    }
    if (gradcheck->parsed()) return colorcaps::cmd_gradcheck(scale, std::cout);
    if (inspect->parsed()) return colorcaps::cmd_inspect(ckpt, std::cout);
  } catch (const colorcaps::config_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return colorcaps::kExitUsage;
  } catch (const colorcaps::check_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return colorcaps::kExitCheckFailed;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return colorcaps::kExitData;
  }
  return colorcaps::kExitUsage;
}
