#include "sparsematch/container.hpp"
#include "sparsematch/dataset.hpp"
#include "sparsematch/error.hpp"
#include "sparsematch/eval.hpp"
#include "sparsematch/random.hpp"
#include "sparsematch/report.hpp"
#include "sparsematch/server.hpp"
#include "sparsematch/synth.hpp"
#include "sparsematch/training.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

using namespace sparsematch;
namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_text(const fs::path& path, const std::string& text) {
  write_file_atomic(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

nlohmann::json read_json(const fs::path& path) {
  const auto bytes = read_file(path);
  try {
    return nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptPayload, path.string() + ": " + e.what());
  }
}

std::pair<int, int> parse_size(const std::string& s) {
  int w = 0, h = 0;
  char x = 0;
  std::istringstream in(s);
  if (!(in >> w >> x >> h) || x != 'x' || w <= 0 || h <= 0 || !in.eof()) {
    throw UsageError("image size must look like 640x480, got '" + s + "'");
  }
  return {w, h};
}

fs::path ema_path_for(const fs::path& out) {
  fs::path p = out;
  const auto ext = p.extension();
  p.replace_extension();
  return p.string() + ".ema" + ext.string();
}

// ---- synth -----------------------------------------------------------------

struct SynthOptions {
  int n_pairs = 10;
  std::uint64_t seed = 0;
  double outlier_frac = 0.3;
  double noise = 0.3;
  double appearance_shift = 2.0;
  int points = 256;
  int gt_count = 20;
  bool depth = false;
  std::string out;
};

// The manifest's ground truth is a subset of the inliers; those A-keypoints
// are removed from the detected set and their descriptors stored apart so the
// append protocol can re-insert them.
int run_synth(const SynthOptions& o) {
  SyntheticSceneConfig scene;
  scene.n_points = o.points;
  scene.outlier_fraction = o.outlier_frac;
  scene.descriptor_noise = o.noise;
  scene.appearance_shift = o.appearance_shift;
  scene.rasterize_depth = o.depth;
  scene.validate();
  const fs::path out = o.out;
  fs::create_directories(out / "features");
  if (o.depth) fs::create_directories(out / "depth");

  std::vector<PairRecord> records;
  for (int k = 0; k < o.n_pairs; ++k) {
    SyntheticSceneConfig c = scene;
    c.seed = detail::mix_seed(o.seed, static_cast<std::uint64_t>(k));
    const SyntheticPair p = synth_pair(c);
    std::ostringstream id;
    id << "synth_" << std::setw(5) << std::setfill('0') << k;

    Rng rng(c.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<IndexPair> gt = p.gt;
    for (std::size_t i = gt.size(); i > 1; --i) std::swap(gt[i - 1], gt[rng.index(i)]);
    gt.resize(std::min<std::size_t>(gt.size(), static_cast<std::size_t>(o.gt_count)));
    std::sort(gt.begin(), gt.end());
    std::vector<char> held(p.kps_a.size(), 0);
    for (const auto& m : gt) held[m.i] = 1;

    const int n_det = p.kps_a.size() - static_cast<int>(gt.size());
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> kps_a(n_det, 2), desc_a(n_det, p.desc_a.cols()),
        gt_desc(static_cast<int>(gt.size()), p.desc_a.cols());
    for (int i = 0, r = 0; i < p.kps_a.size(); ++i) {
      if (held[i]) continue;
      kps_a.row(r) = p.kps_a.points.row(i);
      desc_a.row(r) = p.desc_a.row(i);
      ++r;
    }
    PairRecord rec;
    rec.id = id.str();
    rec.image_a = {"", c.width, c.height};
    rec.image_b = {"", c.width, c.height};
    for (std::size_t g = 0; g < gt.size(); ++g) {
      gt_desc.row(static_cast<int>(g)) = p.desc_a.row(gt[g].i);
      rec.gt.push_back({p.kps_a.point(gt[g].i), p.kps_b.point(gt[g].j)});
    }
    rec.group = "synthetic";
    rec.category = "synthetic";
    rec.split = "test";
    rec.pose_ab = p.pose_ab;
    rec.intrinsics_a = p.k_a;
    rec.intrinsics_b = p.k_b;
    rec.features = "features/" + rec.id + ".mlw";

    TensorContainer feats;
    feats.tensors["keypoints_a"] = StoredTensor::from_matrix<double>(kps_a);
    feats.tensors["descriptors_a"] = StoredTensor::from_matrix<double>(desc_a);
    feats.tensors["gt_descriptors_a"] = StoredTensor::from_matrix<double>(gt_desc);
    feats.tensors["keypoints_b"] = StoredTensor::from_matrix<double>(p.kps_b.points);
    feats.tensors["descriptors_b"] = StoredTensor::from_matrix<double>(p.desc_b);
    feats.metadata = {{"kind", "features"}, {"pair_id", rec.id}};
    feats.save(out / rec.features);

    if (o.depth) {
      rec.depth = "depth/" + rec.id + ".mlw";
      TensorContainer d;
      d.tensors["depth_a"] = StoredTensor::from_f64({p.depth_a.height, p.depth_a.width}, p.depth_a.values.data());
      d.tensors["depth_b"] = StoredTensor::from_f64({p.depth_b.height, p.depth_b.width}, p.depth_b.values.data());
      d.save(out / rec.depth);
    }
    records.push_back(std::move(rec));
  }
  save_pair_manifest(out / "manifest.jsonl", records);
  std::cout << "wrote " << records.size() << " pairs to " << (out / "manifest.jsonl").string() << "\n";
  return 0;
}

// ---- train-toy ---------------------------------------------------------------

struct TrainOptions {
  std::string config;
  std::string out;
  std::string loss_csv;
  std::string checkpoint;
  std::string resume;
  std::optional<int> steps;
  std::optional<int> until_step;
  std::optional<int> batch;
  std::optional<double> lr;
  std::optional<int> points;
  std::optional<std::uint64_t> seed;
};

void apply_train_json(const nlohmann::json& j, TrainConfig& t) {
  t.peak_lr = j.value("peak_lr", t.peak_lr);
  t.warmup_steps = j.value("warmup_steps", t.warmup_steps);
  t.weight_decay = j.value("weight_decay", t.weight_decay);
  t.ema_decay = j.value("ema_decay", t.ema_decay);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.total_steps = j.value("total_steps", t.total_steps);
  t.seed = j.value("seed", t.seed);
  t.beta1 = j.value("beta1", t.beta1);
  t.beta2 = j.value("beta2", t.beta2);
  t.adam_eps = j.value("adam_eps", t.adam_eps);
  t.loss.inv_temperature = j.value("inv_temperature", t.loss.inv_temperature);
  t.loss.match_weight = j.value("match_weight", t.loss.match_weight);
}

void apply_scene_json(const nlohmann::json& j, SyntheticSceneConfig& s) {
  s.n_points = j.value("n_points", s.n_points);
  s.outlier_fraction = j.value("outlier_fraction", s.outlier_fraction);
  s.descriptor_noise = j.value("descriptor_noise", s.descriptor_noise);
  s.appearance_shift = j.value("appearance_shift", s.appearance_shift);
  s.descriptor_dim = j.value("descriptor_dim", s.descriptor_dim);
  s.embedding_frequency = j.value("embedding_frequency", s.embedding_frequency);
  s.embedding_seed = j.value("embedding_seed", s.embedding_seed);
}

int run_train(const TrainOptions& o) {
  MatcherConfig model = MatcherConfig::toy();
  TrainConfig train;
  train.peak_lr = 1e-3;
  SyntheticSceneConfig scene;
  std::uint64_t init_seed = 0;
  if (!o.config.empty()) {
    const auto j = read_json(o.config);
    if (j.contains("model")) model = matcher_config_from_json(j["model"]);
    if (j.contains("train")) apply_train_json(j["train"], train);
    if (j.contains("scene")) apply_scene_json(j["scene"], scene);
    init_seed = j.value("init_seed", init_seed);
  }
  if (o.steps) train.total_steps = *o.steps;
  if (o.batch) train.batch_size = *o.batch;
  if (o.lr) train.peak_lr = *o.lr;
  if (o.points) scene.n_points = *o.points;
  if (o.seed) train.seed = init_seed = *o.seed;
  model.d_desc = scene.descriptor_dim;
  model.stop_layer = model.num_blocks;
  model.validate();
  train.validate();
  scene.validate();

  TrainState<float> state;
  if (!o.resume.empty()) {
    state = load_checkpoint(o.resume);
    if (state.model_cfg.d_desc != model.d_desc || state.model_cfg.num_blocks != model.num_blocks ||
        state.model_cfg.d_emb != model.d_emb) {
      throw UsageError("checkpoint " + o.resume + " does not match the configured model");
    }
    if (state.step > train.total_steps) throw UsageError("checkpoint is already past --steps");
  } else {
    state = TrainState<float>::init(model, init_seed);
  }
  const int until = o.until_step ? *o.until_step : train.total_steps;
  if (until < state.step || until > train.total_steps) throw UsageError("--until-step must lie in [start, --steps]");

  const fs::path out = o.out;
  const fs::path csv_path = o.loss_csv.empty() ? fs::path(out.string() + ".loss.csv") : fs::path(o.loss_csv);
  const bool append = !o.resume.empty() && fs::exists(csv_path);
  std::ofstream csv(csv_path, append ? std::ios::app : std::ios::trunc);
  if (!csv) throw Error(ErrorCode::PathNotFound, "cannot write " + csv_path.string());
  if (!append) csv << "step,loss,lr\n";
  csv << std::setprecision(10);
  train_synthetic(state, train, scene, until, [&](int step, const StepResult& r) {
    csv << step << ',' << r.loss << ',' << r.lr << '\n';
    if (step % 100 == 99) std::cerr << "step " << step + 1 << " loss " << r.loss << "\n";
  });
  csv.close();

  MatcherConfig saved = model;
  saved.stop_layer = model.num_blocks;
  save_weights(out, saved, state.model);
  save_weights(ema_path_for(out), saved, state.ema);
  if (!o.checkpoint.empty()) save_checkpoint(o.checkpoint, state);
  std::cout << "step " << state.step << ": weights " << out.string() << ", ema " << ema_path_for(out).string() << "\n";
  return 0;
}

// ---- match -----------------------------------------------------------------

struct MatchOptions {
  std::string weights;
  std::string features;
  std::string out;
  std::optional<int> stop_layer;
  double mu = 0.1;
  std::string size_a = "640x480";
  std::string size_b = "640x480";
};

int run_match(const MatchOptions& o) {
  const auto [wa, ha] = parse_size(o.size_a);
  const auto [wb, hb] = parse_size(o.size_b);
  PairRecord rec;
  rec.id = "cli";
  rec.image_a = {"", wa, ha};
  rec.image_b = {"", wb, hb};
  rec.features = fs::absolute(o.features).string();
  const auto f = load_pair_features(rec, {});

  ProtocolOptions opt;
  opt.match.match_threshold = o.mu;
  opt.match.validate();
  std::optional<MatcherWeights<float>> weights;
  if (!o.weights.empty()) {
    weights = load_weights(o.weights, &opt.model_cfg);
    opt.model_cfg.match.match_threshold = o.mu;
    if (o.stop_layer) opt.model_cfg.stop_layer = *o.stop_layer;
    opt.model_cfg.validate();
    opt.weights = &*weights;
  } else if (o.stop_layer) {
    throw UsageError("--stop-layer requires --weights");
  }
  MatchSet ms;
  const auto corrs = predict_correspondences(f, opt, &ms);
  nlohmann::json list = nlohmann::json::array();
  for (std::size_t k = 0; k < ms.size(); ++k) {
    list.push_back({{"i", ms[k].i},
                    {"j", ms[k].j},
                    {"score", ms[k].score},
                    {"xa", corrs[k].a.x()},
                    {"ya", corrs[k].a.y()},
                    {"xb", corrs[k].b.x()},
                    {"yb", corrs[k].b.y()}});
  }
  nlohmann::json doc = {{"mu", o.mu}, {"matcher", weights ? "trained" : "mutual_nn"}, {"matches", list}};
  if (weights) doc["stop_layer"] = opt.model_cfg.stop_layer;
  if (o.out.empty()) {
    std::cout << doc.dump(2) << "\n";
  } else {
    write_text(o.out, doc.dump(2) + "\n");
    std::cout << ms.size() << " matches written to " << o.out << "\n";
  }
  return 0;
}

// ---- eval ------------------------------------------------------------------

struct EvalOptions {
  std::string manifest;
  std::string protocol = "fmatrix";
  std::optional<double> ransac_threshold;
  std::uint64_t seed = 0;
  std::string weights;
  std::optional<int> stop_layer;
  double mu = 0.1;
  std::string report;
  std::string csv;
  std::string svg;
};

int run_eval(const EvalOptions& o) {
  const auto records = load_pair_manifest(o.manifest);
  ProtocolOptions opt;
  opt.protocol = o.protocol;
  opt.ransac_threshold = o.ransac_threshold;
  opt.seed = o.seed;
  opt.base_dir = fs::path(o.manifest).parent_path();
  opt.match.match_threshold = o.mu;
  opt.match.validate();
  std::optional<MatcherWeights<float>> weights;
  if (!o.weights.empty()) {
    weights = load_weights(o.weights, &opt.model_cfg);
    opt.model_cfg.match.match_threshold = o.mu;
    if (o.stop_layer) opt.model_cfg.stop_layer = *o.stop_layer;
    opt.model_cfg.validate();
    opt.weights = &*weights;
  } else if (o.stop_layer) {
    throw UsageError("--stop-layer requires --weights");
  }
  std::vector<PairEvalRow> rows;
  const auto doc = run_protocol(records, opt, &rows);
  if (!o.report.empty()) doc.save(o.report);
  if (!o.csv.empty()) {
    if (o.protocol != "fmatrix") throw UsageError("--csv is available for the fmatrix protocol only");
    write_text(o.csv, rows_to_csv(rows));
  }
  if (!o.svg.empty()) {
    if (o.protocol != "fmatrix") throw UsageError("--svg is available for the fmatrix protocol only");
    std::map<std::string, PckCurve> series;
    if (!rows.empty()) {
      series["overall"] = aggregate(rows, GroupBy::Group).overall.curve;
      for (const auto& [name, b] : aggregate(rows, GroupBy::Group).buckets) {
        if (name != "overall") series[name] = b.curve;
      }
    }
    write_text(o.svg, pck_svg(series, "PCK vs epipolar threshold"));
  }
  std::cout << doc.body.at("aggregates").dump(2) << "\n";
  return 0;
}

// ---- serve -----------------------------------------------------------------

int run_serve(ServerConfig cfg, const std::string& weights) {
  if (!weights.empty()) cfg.weights = weights;
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);  // inherited by server threads

  AnnotationServer server(cfg);
  server.start();
  std::cout << "listening on http://" << cfg.host << ":" << server.port() << std::endl;
  int sig = 0;
  sigwait(&set, &sig);
  server.stop();
  std::cout << "annotation store flushed" << std::endl;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse two-view matching toolkit"};
  app.require_subcommand(1);

  SynthOptions so;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic fixture dataset");
  synth->add_option("--n-pairs", so.n_pairs, "Number of pairs")->check(CLI::PositiveNumber);
  synth->add_option("--seed", so.seed, "Base seed");
  synth->add_option("--outlier-frac", so.outlier_frac, "Outlier share")->check(CLI::Range(0.0, 1.0));
  synth->add_option("--noise", so.noise, "Descriptor noise norm")->check(CLI::NonNegativeNumber);
  synth->add_option("--appearance-shift", so.appearance_shift, "Per-image descriptor offset norm")
      ->check(CLI::NonNegativeNumber);
  synth->add_option("--points", so.points, "Keypoints per image")->check(CLI::PositiveNumber);
  synth->add_option("--gt-count", so.gt_count, "Ground-truth correspondences kept per pair")->check(CLI::PositiveNumber);
  synth->add_flag("--depth", so.depth, "Also write depth rasters");
  synth->add_option("--out", so.out, "Output directory")->required();

  TrainOptions to;
  auto* train = app.add_subcommand("train-toy", "Train a toy matcher on synthetic pairs");
  train->add_option("--config", to.config, "JSON config with model/train/scene sections")->check(CLI::ExistingFile);
  train->add_option("--steps", to.steps, "Total optimisation steps")->check(CLI::PositiveNumber);
  train->add_option("--until-step", to.until_step, "Stop early at this step (for checkpointing)")
      ->check(CLI::NonNegativeNumber);
  train->add_option("--batch", to.batch, "Pairs per step")->check(CLI::PositiveNumber);
  train->add_option("--lr", to.lr, "Peak learning rate")->check(CLI::PositiveNumber);
  train->add_option("--points", to.points, "Keypoints per image")->check(CLI::PositiveNumber);
  train->add_option("--seed", to.seed, "Initialisation and data seed");
  train->add_option("--out", to.out, "Weights file (EMA written alongside as *.ema.*)")->required();
  train->add_option("--loss-csv", to.loss_csv, "Loss curve CSV (default <out>.loss.csv)");
  train->add_option("--checkpoint", to.checkpoint, "Write a resumable checkpoint here");
  train->add_option("--resume", to.resume, "Resume from a checkpoint")->check(CLI::ExistingFile);

  MatchOptions mo;
  auto* match = app.add_subcommand("match", "Match one pair of keypoint/descriptor sets");
  match->add_option("--features", mo.features, "Feature container")->required()->check(CLI::ExistingFile);
  match->add_option("--weights", mo.weights, "Matcher weights (raw mutual-NN when omitted)")->check(CLI::ExistingFile);
  match->add_option("--stop-layer", mo.stop_layer, "Exit layer")->check(CLI::PositiveNumber);
  match->add_option("--mu", mo.mu, "Match threshold in [0, 1)")->check(CLI::Range(0.0, 1.0));
  match->add_option("--size-a", mo.size_a, "Image A size WxH");
  match->add_option("--size-b", mo.size_b, "Image B size WxH");
  match->add_option("--out", mo.out, "Output JSON (stdout when omitted)");

  EvalOptions eo;
  auto* eval = app.add_subcommand("eval", "Run an evaluation protocol over a manifest");
  eval->add_option("--manifest", eo.manifest, "Pair manifest (JSON lines)")->required()->check(CLI::ExistingFile);
  eval->add_option("--protocol", eo.protocol, "Protocol")->check(CLI::IsMember(known_protocols()));
  eval->add_option("--ransac-threshold", eo.ransac_threshold, "RANSAC inlier threshold in px")
      ->check(CLI::PositiveNumber);
  eval->add_option("--seed", eo.seed, "RANSAC seed");
  eval->add_option("--weights", eo.weights, "Matcher weights (raw mutual-NN when omitted)")->check(CLI::ExistingFile);
  eval->add_option("--stop-layer", eo.stop_layer, "Exit layer")->check(CLI::PositiveNumber);
  eval->add_option("--mu", eo.mu, "Match threshold in [0, 1)")->check(CLI::Range(0.0, 1.0));
  eval->add_option("--report", eo.report, "Report JSON");
  eval->add_option("--csv", eo.csv, "Per-pair CSV");
  eval->add_option("--svg", eo.svg, "PCK plot");

  ServerConfig sc;
  std::string manifest, images_dir, store_dir, static_dir, serve_weights;
  auto* serve = app.add_subcommand("serve", "Annotation and inspection server");
  serve->add_option("--manifest", manifest, "Pair manifest")->required();
  serve->add_option("--images-dir", images_dir, "Image root (default: manifest directory)");
  serve->add_option("--port", sc.port, "TCP port (0 picks one)")->check(CLI::Range(0, 65535));
  serve->add_option("--host", sc.host, "Bind address");
  serve->add_option("--weights", serve_weights, "Matcher weights for the overlay")->check(CLI::ExistingFile);
  serve->add_option("--store", store_dir, "Annotation store directory (default <manifest>.annotations)");
  serve->add_option("--static-dir", static_dir, "UI bundle directory");
  serve->add_option("--verify-batch", sc.verify_batch, "Verification tasks per verifier")->check(CLI::PositiveNumber);
  serve->add_option("--seed", sc.seed, "Verification queue seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::cerr << "sparsematch: usage error: " << msg << "\n";
    return e.get_exit_code() == 0 ? 2 : e.get_exit_code();
  }

  try {
    if (*synth) return run_synth(so);
    if (*train) return run_train(to);
    if (*match) return run_match(mo);
    if (*eval) return run_eval(eo);
    if (*serve) {
      sc.manifest = manifest;
      sc.images_dir = images_dir;
      sc.store_dir = store_dir;
      sc.static_dir = static_dir;
      return run_serve(sc, serve_weights);
    }
  } catch (const UsageError& e) {
    std::cerr << "sparsematch: usage error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::cerr << "sparsematch: " << msg << "\n";
    return e.code() == ErrorCode::InvalidArgument ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "sparsematch: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
