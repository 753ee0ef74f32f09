#include "lgms/cli.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "lgms/analysis.hpp"
#include "lgms/gradcheck_suite.hpp"

namespace lgms::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr double kPaperParamsM = 2.32;  // reported headline size, for comparison
constexpr double kPaperGflops = 4.89;

struct Options {
  std::string config_path;
  std::string data_dir;
  std::string checkpoint;
  std::string out_dir;
  std::optional<double> lr;
  std::optional<int> epochs;
  std::optional<int> batch;
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> size;
  int n = 100;
  int stage = 5;
  double tau = 0.01;
  double step = 1e-5;
  double tol = 1e-5;
  std::string export_sample;
};

// CLI config file: {"model": <ModelConfig>, "lr","epochs","batch","seed","size"}.
// Explicit flags override file values.
RunConfig resolve(Command cmd, const Options& o) {
  RunConfig rc;
  rc.command = cmd;
  if (!o.config_path.empty()) {
    std::ifstream f(o.config_path);
    if (!f) throw std::runtime_error("cannot open config " + o.config_path);
    json j = json::parse(f);
    if (!j.is_object()) throw std::invalid_argument("config field <root>: expected an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& k = it.key();
      if (k == "model")
        rc.model = arch::ModelConfig::from_json(it.value());
      else if (k == "lr")
        rc.hyper.lr = it.value().get<double>();
      else if (k == "epochs")
        rc.hyper.epochs = it.value().get<int>();
      else if (k == "batch")
        rc.hyper.batch = it.value().get<int>();
      else if (k == "seed")
        rc.hyper.seed = it.value().get<std::uint64_t>();
      else if (k == "size")
        rc.size = it.value().get<std::int64_t>();
      else
        throw std::invalid_argument("config field " + k + ": unknown config field");
    }
  }
  if (o.lr) rc.hyper.lr = *o.lr;
  if (o.epochs) rc.hyper.epochs = *o.epochs;
  if (o.batch) rc.hyper.batch = *o.batch;
  if (o.seed) rc.hyper.seed = *o.seed;
  if (o.size) rc.size = *o.size;
  rc.data_dir = o.data_dir;
  rc.checkpoint = o.checkpoint;
  rc.out_dir = o.out_dir;
  rc.model.validate();
  return rc;
}

json effective_config_json(const RunConfig& rc) {
  json j;
  j["model"] = rc.model.to_json();
  j["lr"] = rc.hyper.lr;
  j["epochs"] = rc.hyper.epochs;
  j["batch"] = rc.hyper.batch;
  j["seed"] = rc.hyper.seed;
  j["size"] = rc.size;
  return j;
}

void ensure_out_dir(const std::string& dir) {
  if (dir.empty()) throw std::invalid_argument("--out is required");
  fs::create_directories(dir);
}

void echo_config(const RunConfig& rc) {
  std::ofstream f(fs::path(rc.out_dir) / "config.json");
  f << effective_config_json(rc).dump(2) << "\n";
}

void write_json(const json& j, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << j.dump(2) << "\n";
}

// Deterministic 80/20 split keyed by the run seed.
void split_dataset(std::vector<train::SegSample> all, std::uint64_t seed,
                   std::vector<train::SegSample>& train_set,
                   std::vector<train::SegSample>& val_set) {
  Rng rng = Rng(seed).derive("split");
  for (std::size_t i = all.size(); i > 1; --i)
    std::swap(all[i - 1], all[static_cast<std::size_t>(rng.below(static_cast<std::int64_t>(i)))]);
  std::size_t n_val = std::max<std::size_t>(1, all.size() / 5);
  if (all.size() < 2) throw std::runtime_error("need at least 2 samples to split train/val");
  val_set.assign(all.end() - static_cast<std::ptrdiff_t>(n_val), all.end());
  train_set.assign(all.begin(), all.end() - static_cast<std::ptrdiff_t>(n_val));
}

int cmd_train(const RunConfig& rc) {
  ensure_out_dir(rc.out_dir);
  echo_config(rc);
  auto all = train::load_dataset_dir(rc.data_dir, rc.size);
  std::vector<train::SegSample> train_set, val_set;
  split_dataset(std::move(all), rc.hyper.seed, train_set, val_set);
  auto result = train::train_loop(rc.model, train_set, val_set, rc.hyper);
  train::write_trace_csv(result.trace, (fs::path(rc.out_dir) / "trace.csv").string());
  std::string ckpt = rc.checkpoint.empty()
                         ? (fs::path(rc.out_dir) / "checkpoint.lgck").string()
                         : rc.checkpoint;
  result.best_params.save_lgck(ckpt);
  json summary = {{"best_epoch", result.best_epoch},
                  {"best_val_iou", result.best_iou},
                  {"steps", result.state.step},
                  {"train_samples", train_set.size()},
                  {"val_samples", val_set.size()}};
  write_json(summary, (fs::path(rc.out_dir) / "summary.json").string());
  std::cout << "trained " << result.state.step << " steps; best val IoU " << result.best_iou
            << " at epoch " << result.best_epoch << "\n";
  return 0;
}

arch::ParamStore load_model_params(const arch::LgmsNet& net, const std::string& checkpoint) {
  if (checkpoint.empty()) throw std::invalid_argument("--checkpoint is required");
  arch::ParamStore store;
  Rng rng(0);
  net.init_params(store, rng);
  store.load_lgck(checkpoint);
  return store;
}

int cmd_eval(const RunConfig& rc) {
  ensure_out_dir(rc.out_dir);
  echo_config(rc);
  arch::LgmsNet net(rc.model);
  auto params = load_model_params(net, rc.checkpoint);
  auto data = train::load_dataset_dir(rc.data_dir, rc.size);
  auto report = train::evaluate(net, params, data, rc.hyper.batch);
  json j = {{"loss", report.loss},
            {"iou", report.iou},
            {"f1", report.f1},
            {"samples", report.samples}};
  write_json(j, (fs::path(rc.out_dir) / "metrics.json").string());
  std::cout << j.dump() << "\n";
  return 0;
}

int cmd_predict(const RunConfig& rc) {
  ensure_out_dir(rc.out_dir);
  echo_config(rc);
  arch::LgmsNet net(rc.model);
  auto params = load_model_params(net, rc.checkpoint);
  auto data = train::load_dataset_dir(rc.data_dir, rc.size);
  for (const auto& s : data) {
    Tensor x = reshape(s.image, {1, s.image.dim(0), s.image.dim(1), s.image.dim(2)});
    Tensor logits = net.predict_logits(params, x);
    Tensor mask = train::binarize_logits(
        reshape(logits, {logits.dim(1), logits.dim(2), logits.dim(3)}));
    train::write_pnm(mask, (fs::path(rc.out_dir) / (s.id + ".pred.pgm")).string());
  }
  std::cout << "wrote " << data.size() << " prediction masks to " << rc.out_dir << "\n";
  return 0;
}

int cmd_profile(const RunConfig& rc) {
  std::int64_t res = rc.size > 0 ? rc.size : 256;
  auto report = arch::count_params_flops(rc.model, res, res);
  json blocks = json::array();
  for (const auto& item : report.items)
    blocks.push_back({{"name", item.name}, {"params", item.params}, {"flops", item.flops}});
  double params_m = static_cast<double>(report.total_params) / 1e6;
  json j = {{"input_size", res},
            {"total_params", report.total_params},
            {"total_params_millions", params_m},
            {"total_flops", report.total_flops},
            {"total_gflops", static_cast<double>(report.total_flops) / 1e9},
            {"reference",
             {{"params_millions", kPaperParamsM},
              {"gflops", kPaperGflops},
              {"note", "published headline numbers for comparison; stage widths here are a "
                       "configurable reconstruction, so equality is not claimed"}}},
            {"params_ratio_vs_reference", params_m / kPaperParamsM},
            {"blocks", blocks}};
  if (!rc.out_dir.empty()) {
    ensure_out_dir(rc.out_dir);
    write_json(j, (fs::path(rc.out_dir) / "profile.json").string());
  }
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_gradcheck(const Options& o) {
  auto seeds = ad::default_gradcheck_seeds();
  if (o.seed) seeds = {*o.seed, *o.seed + 1, *o.seed + 2};
  auto checks = ad::gradcheck_battery(seeds, o.step, o.tol);
  bool all_pass = true;
  std::cout << "op,max_rel_err,pass\n";
  for (const auto& c : checks) {
    std::cout << c.op << ',' << c.max_rel_err << ',' << (c.pass ? "true" : "false") << "\n";
    all_pass &= c.pass;
  }
  return all_pass ? 0 : 1;
}

int cmd_analyze(const RunConfig& rc, const Options& o) {
  ensure_out_dir(rc.out_dir);
  echo_config(rc);
  arch::LgmsNet net(rc.model);
  auto params = load_model_params(net, rc.checkpoint);
  auto data = train::load_dataset_dir(rc.data_dir, rc.size);

  analysis::RedundancyReport red;
  red.layer = "stage" + std::to_string(o.stage);
  red.tau = o.tau;
  std::vector<std::string> ids;
  std::vector<Tensor> masks;
  std::vector<double> fgbg;
  double count_sum = 0;
  for (const auto& s : data) {
    Tensor x = reshape(s.image, {1, s.image.dim(0), s.image.dim(1), s.image.dim(2)});
    arch::StageTrace trace;
    net.predict_logits(params, x, &trace);
    const Tensor& act4 = trace.encoder[static_cast<std::size_t>(o.stage - 1)];
    Tensor act = reshape(act4, {act4.dim(1), act4.dim(2), act4.dim(3)});
    std::int64_t cnt = analysis::channel_redundancy(act, o.tau);
    red.rows.push_back({s.id, cnt});
    count_sum += static_cast<double>(cnt);
    ids.push_back(s.id);
    masks.push_back(s.mask);
    // fg/bg ratio needs both regions present at feature resolution
    try {
      fgbg.push_back(analysis::fg_bg_singular_ratio(act, s.mask));
    } catch (const std::invalid_argument&) {
      fgbg.push_back(std::nan(""));
    }
  }
  red.mean_count = red.rows.empty() ? 0.0 : count_sum / static_cast<double>(red.rows.size());
  auto density = analysis::fg_scale_density(masks);
  analysis::write_redundancy_csv(red, (fs::path(rc.out_dir) / "redundancy.csv").string());
  analysis::write_scale_csv(ids, density, (fs::path(rc.out_dir) / "scale.csv").string());
  analysis::write_fgbg_csv(ids, fgbg, (fs::path(rc.out_dir) / "fgbg.csv").string());
  if (!o.export_sample.empty()) {
    auto it = std::find_if(data.begin(), data.end(),
                           [&](const train::SegSample& s) { return s.id == o.export_sample; });
    if (it == data.end()) throw std::runtime_error("no sample named " + o.export_sample);
    analysis::export_features(net, params, *it, o.stage,
                              (fs::path(rc.out_dir) / (it->id + ".stage" +
                                                       std::to_string(o.stage))).string());
  }
  std::cout << "analyzed " << data.size() << " samples; mean significant singular values "
            << red.mean_count << " at stage " << o.stage << "\n";
  return 0;
}

int cmd_make_synthetic(const RunConfig& rc, const Options& o) {
  ensure_out_dir(rc.out_dir);
  std::int64_t size = rc.size > 0 ? rc.size : 64;
  Rng rng(rc.hyper.seed);
  auto samples = train::synth_dataset(o.n, size, rng);
  train::save_dataset_dir(samples, rc.out_dir);
  std::cout << "wrote " << samples.size() << " samples of size " << size << " to " << rc.out_dir
            << "\n";
  return 0;
}

void add_common_model_flags(CLI::App* sub, Options& o) {
  sub->add_option("--config", o.config_path, "JSON config ({\"model\": ..., hyper keys})");
  sub->add_option("--seed", o.seed, "RNG seed");
  sub->add_option("--size", o.size, "square resize edge (0 = native size)");
}

std::unique_ptr<CLI::App> build_app(Options& o, std::unordered_map<std::string, Command>& cmds) {
  auto app = std::make_unique<CLI::App>("LGMSNet segmentation toolkit");
  app->require_subcommand(1);

  CLI::App* t = app->add_subcommand("train", "train a model on an image/mask directory");
  add_common_model_flags(t, o);
  t->add_option("--data", o.data_dir, "dataset directory")->required();
  t->add_option("--out", o.out_dir, "output directory")->required();
  t->add_option("--checkpoint", o.checkpoint, "checkpoint path (default <out>/checkpoint.lgck)");
  t->add_option("--lr", o.lr, "initial learning rate");
  t->add_option("--epochs", o.epochs, "training epochs");
  t->add_option("--batch", o.batch, "batch size");
  cmds["train"] = Command::train;

  CLI::App* e = app->add_subcommand("eval", "evaluate a checkpoint on a dataset");
  add_common_model_flags(e, o);
  e->add_option("--data", o.data_dir, "dataset directory")->required();
  e->add_option("--checkpoint", o.checkpoint, "checkpoint to evaluate")->required();
  e->add_option("--out", o.out_dir, "output directory")->required();
  e->add_option("--batch", o.batch, "batch size");
  cmds["eval"] = Command::eval;

  CLI::App* p = app->add_subcommand("predict", "write predicted masks for a dataset");
  add_common_model_flags(p, o);
  p->add_option("--data", o.data_dir, "dataset directory")->required();
  p->add_option("--checkpoint", o.checkpoint, "checkpoint to run")->required();
  p->add_option("--out", o.out_dir, "output directory")->required();
  cmds["predict"] = Command::predict;

  CLI::App* pr = app->add_subcommand("profile", "parameter/FLOP accounting for a config");
  add_common_model_flags(pr, o);
  pr->add_option("--out", o.out_dir, "optional output directory");
  cmds["profile"] = Command::profile;

  CLI::App* g = app->add_subcommand("gradcheck", "finite-difference check of every op");
  g->add_option("--step", o.step, "finite-difference step");
  g->add_option("--tol", o.tol, "max relative error to pass");
  g->add_option("--seed", o.seed, "base seed for fixtures");
  cmds["gradcheck"] = Command::gradcheck;

  CLI::App* a = app->add_subcommand("analyze", "channel redundancy and scale diagnostics");
  add_common_model_flags(a, o);
  a->add_option("--data", o.data_dir, "dataset directory")->required();
  a->add_option("--checkpoint", o.checkpoint, "checkpoint to analyze")->required();
  a->add_option("--out", o.out_dir, "output directory")->required();
  a->add_option("--stage", o.stage, "encoder stage to inspect (1-5)")
      ->check(CLI::Range(1, 5));
  a->add_option("--tau", o.tau, "significant singular value threshold");
  a->add_option("--export-sample", o.export_sample, "also export this sample's feature map");
  cmds["analyze"] = Command::analyze;

  CLI::App* m = app->add_subcommand("make-synthetic", "generate a synthetic dataset");
  m->add_option("--n", o.n, "sample count");
  m->add_option("--size", o.size, "image edge (default 64)");
  m->add_option("--seed", o.seed, "RNG seed");
  m->add_option("--out", o.out_dir, "output directory")->required();
  cmds["make-synthetic"] = Command::make_synthetic;

  return app;
}

}  // namespace

std::vector<std::string> all_option_names() {
  Options o;
  std::unordered_map<std::string, Command> cmds;
  auto app = build_app(o, cmds);
  std::vector<std::string> names;
  for (const CLI::App* sub : app->get_subcommands({})) {
    names.push_back(sub->get_name());
    for (const CLI::Option* opt : sub->get_options())
      if (!opt->get_name().empty()) names.push_back(opt->get_name());
  }
  return names;
}

int run(const std::vector<std::string>& args) {
  Options o;
  std::unordered_map<std::string, Command> cmds;
  auto app = build_app(o, cmds);
  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app->parse(rev);
  } catch (const CLI::ParseError& e) {
    return app->exit(e);  // prints help or a one-line parse error
  }

  try {
    CLI::App* sub = app->get_subcommands().front();
    Command cmd = cmds.at(sub->get_name());
    if (cmd == Command::gradcheck) return cmd_gradcheck(o);
    RunConfig rc = resolve(cmd, o);
    switch (cmd) {
      case Command::train: return cmd_train(rc);
      case Command::eval: return cmd_eval(rc);
      case Command::predict: return cmd_predict(rc);
      case Command::profile: return cmd_profile(rc);
      case Command::analyze: return cmd_analyze(rc, o);
      case Command::make_synthetic: return cmd_make_synthetic(rc, o);
      default: break;
    }
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (char& c : msg)
      if (c == '\n') c = ' ';
    std::cerr << "error: " << msg << "\n";
    return 1;
  }
  return 0;
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args);
}

}  // namespace lgms::cli
