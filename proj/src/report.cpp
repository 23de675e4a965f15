#include "sparsematch/report.hpp"

#include "sparsematch/container.hpp"
#include "sparsematch/error.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <iomanip>
#include <limits>
#include <sstream>

namespace sparsematch {

namespace {

constexpr int kReportSchemaVersion = 1;
constexpr double kInf = std::numeric_limits<double>::infinity();

// JSON has no infinity; failures are written as null.
nlohmann::json number_or_null(double v) {
  if (std::isfinite(v)) return v;
  return nullptr;
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::string fmt(double v, int precision = 6) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

struct Frame {
  double left = 60, top = 40, width = 480, height = 320;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  double px(double x) const { return left + (x - x0) / (x1 - x0) * width; }
  double py(double y) const { return top + height - (y - y0) / (y1 - y0) * height; }
};

std::string svg_open(const std::string& title) {
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"420\" font-family=\"sans-serif\" font-size=\"12\">\n"
     << "<rect width=\"640\" height=\"420\" fill=\"white\"/>\n"
     << "<text x=\"300\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">" << xml_escape(title) << "</text>\n";
  return os.str();
}

std::string svg_axes(const Frame& f, const std::vector<std::pair<double, std::string>>& xticks,
                     const std::vector<std::pair<double, std::string>>& yticks, const std::string& xlabel,
                     const std::string& ylabel) {
  std::ostringstream os;
  os << "<rect x=\"" << f.left << "\" y=\"" << f.top << "\" width=\"" << f.width << "\" height=\"" << f.height
     << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (const auto& [x, label] : xticks) {
    os << "<line x1=\"" << fmt(f.px(x)) << "\" y1=\"" << f.top + f.height << "\" x2=\"" << fmt(f.px(x)) << "\" y2=\""
       << f.top << "\" stroke=\"#ddd\"/>\n"
       << "<text x=\"" << fmt(f.px(x)) << "\" y=\"" << f.top + f.height + 16 << "\" text-anchor=\"middle\">" << label
       << "</text>\n";
  }
  for (const auto& [y, label] : yticks) {
    os << "<line x1=\"" << f.left << "\" y1=\"" << fmt(f.py(y)) << "\" x2=\"" << f.left + f.width << "\" y2=\""
       << fmt(f.py(y)) << "\" stroke=\"#ddd\"/>\n"
       << "<text x=\"" << f.left - 6 << "\" y=\"" << fmt(f.py(y) + 4) << "\" text-anchor=\"end\">" << label
       << "</text>\n";
  }
  os << "<text x=\"" << f.left + f.width / 2 << "\" y=\"" << f.top + f.height + 36 << "\" text-anchor=\"middle\">"
     << xml_escape(xlabel) << "</text>\n"
     << "<text x=\"16\" y=\"" << f.top + f.height / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
     << f.top + f.height / 2 << ")\">" << xml_escape(ylabel) << "</text>\n";
  return os.str();
}

Matrix tensor_or_empty(const TensorContainer& c, const std::string& name) {
  if (!c.contains(name)) return {};
  return c.at(name).to_matrix();
}

struct PoseEstimate {
  bool ok = false;
  Pose pose;
};

// Relative pose from predicted pixel matches: F by RANSAC, then E and the
// cheirality vote over the inliers.
PoseEstimate estimate_pose(const Correspondences& pred, const Intrinsics& k_a, const Intrinsics& k_b,
                           const RansacConfig& ransac, std::uint64_t pair_key) {
  PoseEstimate out;
  if (pred.size() < 8) return out;
  try {
    const auto est = ransac_fundamental(pred, ransac, pair_key);
    Correspondences inliers;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (est.inlier_mask[i]) inliers.push_back(pred[i]);
    }
    if (inliers.size() < 5) return out;
    const EssentialMatrix e = essential_from_fundamental(est.model, k_a, k_b);
    out.pose = decompose_essential(e, inliers, k_a, k_b);
    out.ok = true;
  } catch (const Error& err) {
    switch (err.code()) {
      case ErrorCode::NoModelFound:
      case ErrorCode::DegenerateConfiguration:
      case ErrorCode::NotEnoughCorrespondences:
      case ErrorCode::CheiralityAmbiguous:
        break;
      default:
        throw;
    }
  }
  return out;
}

const Intrinsics& require_intrinsics(const std::optional<Intrinsics>& k, const PairRecord& r) {
  if (!k) throw Error(ErrorCode::InvalidArgument, "pair " + r.id + " has no intrinsics");
  return *k;
}

const Pose& require_pose(const PairRecord& r) {
  if (!r.pose_ab) throw Error(ErrorCode::InvalidArgument, "pair " + r.id + " has no pose_ab");
  return *r.pose_ab;
}

nlohmann::json thresholds_json(const std::vector<double>& thresholds, const std::vector<double>& values) {
  nlohmann::json out = nlohmann::json::object();
  for (std::size_t i = 0; i < thresholds.size(); ++i) out[fmt(thresholds[i])] = values[i];
  return out;
}

}  // namespace

nlohmann::json ReportDocument::to_json() const {
  return {{"schema_version", kReportSchemaVersion}, {"body", body}, {"metadata", metadata}};
}

ReportDocument ReportDocument::from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("body")) throw Error(ErrorCode::CorruptPayload, "report has no body");
  const int version = j.value("schema_version", 0);
  if (version != kReportSchemaVersion) {
    throw Error(ErrorCode::SchemaVersionMismatch, "report schema_version " + std::to_string(version));
  }
  ReportDocument r;
  r.body = j.at("body");
  r.metadata = j.value("metadata", nlohmann::json::object());
  return r;
}

void ReportDocument::save(const std::filesystem::path& path) const {
  const std::string text = to_json().dump(2) + "\n";
  write_file_atomic(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

ReportDocument ReportDocument::load(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptPayload, path.string() + ": " + e.what());
  }
  return from_json(j);
}

nlohmann::json curve_json(const PckCurve& c) { return nlohmann::json(std::vector<double>(c.begin(), c.end())); }

nlohmann::json to_json(const PairEvalRow& row) {
  return {{"pair_id", row.pair_id}, {"group", row.group},     {"category", row.category},
          {"split", row.split},     {"predicted", row.predicted}, {"pck", curve_json(row.curve)},
          {"maa10", maa_at(row.curve, 10)}};
}

nlohmann::json to_json(const Aggregate& a) {
  auto summary = [](const BucketSummary& b) {
    return nlohmann::json{{"pairs", b.pairs}, {"pck", curve_json(b.curve)}, {"maa10", b.maa10}};
  };
  nlohmann::json buckets = nlohmann::json::object();
  for (const auto& [k, v] : a.buckets) buckets[k] = summary(v);
  return {{"overall", summary(a.overall)}, {"buckets", buckets}};
}

nlohmann::json to_json(const SweepPoint& p) {
  return {{"stop_layer", p.stop_layer},
          {"batch_size", p.batch_size},
          {"pairs_per_second", p.pairs_per_second},
          {"accuracy", p.accuracy},
          {"flops_per_pair", p.flops_per_pair}};
}

std::string rows_to_csv(const std::vector<PairEvalRow>& rows) {
  std::ostringstream os;
  os << "pair_id,group,category,split,predicted";
  for (int t = 0; t <= kPckMaxThreshold; ++t) os << ",pck_" << t;
  os << ",maa10\n";
  os << std::setprecision(10);
  for (const auto& r : rows) {
    os << csv_field(r.pair_id) << ',' << csv_field(r.group) << ',' << csv_field(r.category) << ','
       << csv_field(r.split) << ',' << r.predicted;
    for (double v : r.curve) os << ',' << v;
    os << ',' << maa_at(r.curve, 10) << '\n';
  }
  return os.str();
}

std::string pck_svg(const std::map<std::string, PckCurve>& series, const std::string& title) {
  Frame f;
  f.x1 = kPckMaxThreshold;
  std::vector<std::pair<double, std::string>> xt, yt;
  for (int t = 0; t <= kPckMaxThreshold; t += 5) xt.emplace_back(t, std::to_string(t));
  for (int k = 0; k <= 5; ++k) yt.emplace_back(k / 5.0, fmt(k / 5.0, 2));
  std::ostringstream os;
  os << svg_open(title) << svg_axes(f, xt, yt, "threshold (px)", "PCK");
  int idx = 0;
  for (const auto& [name, curve] : series) {
    const char* color = kPalette[idx % std::size(kPalette)];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (int t = 0; t <= kPckMaxThreshold; ++t) os << fmt(f.px(t)) << ',' << fmt(f.py(curve[t])) << ' ';
    os << "\"/>\n";
    const double ly = f.top + 14 + 16 * idx;
    os << "<line x1=\"" << f.left + f.width + 8 << "\" y1=\"" << ly - 4 << "\" x2=\"" << f.left + f.width + 24
       << "\" y2=\"" << ly - 4 << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n"
       << "<text x=\"" << f.left + f.width + 28 << "\" y=\"" << ly << "\">" << xml_escape(name) << "</text>\n";
    ++idx;
  }
  os << "</svg>\n";
  return os.str();
}

std::string pareto_svg(const std::vector<SweepPoint>& points, const std::string& title) {
  Frame f;
  double lo = 1.0, hi = 10.0, acc_lo = 0.0, acc_hi = 1.0;
  if (!points.empty()) {
    lo = hi = std::max(points.front().pairs_per_second, 1e-9);
    acc_lo = acc_hi = points.front().accuracy;
    for (const auto& p : points) {
      lo = std::min(lo, std::max(p.pairs_per_second, 1e-9));
      hi = std::max(hi, std::max(p.pairs_per_second, 1e-9));
      acc_lo = std::min(acc_lo, p.accuracy);
      acc_hi = std::max(acc_hi, p.accuracy);
    }
  }
  f.x0 = std::floor(std::log10(lo));
  f.x1 = std::max(f.x0 + 1, std::ceil(std::log10(hi)));
  const double pad = std::max(0.05, 0.1 * (acc_hi - acc_lo));
  f.y0 = std::max(0.0, acc_lo - pad);
  f.y1 = std::min(1.0, acc_hi + pad);
  if (f.y1 <= f.y0) f.y1 = f.y0 + 0.1;
  std::vector<std::pair<double, std::string>> xt, yt;
  for (double e = f.x0; e <= f.x1; e += 1) xt.emplace_back(e, fmt(std::pow(10.0, e)));
  for (int k = 0; k <= 4; ++k) {
    const double y = f.y0 + (f.y1 - f.y0) * k / 4;
    yt.emplace_back(y, fmt(y, 3));
  }
  std::ostringstream os;
  os << svg_open(title) << svg_axes(f, xt, yt, "pairs / second", "accuracy");
  std::map<int, std::vector<const SweepPoint*>> by_batch;
  for (const auto& p : points) by_batch[p.batch_size].push_back(&p);
  int idx = 0;
  for (auto& [batch, pts] : by_batch) {
    std::sort(pts.begin(), pts.end(), [](auto* a, auto* b) { return a->stop_layer < b->stop_layer; });
    const char* color = kPalette[idx % std::size(kPalette)];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" points=\"";
    for (auto* p : pts) os << fmt(f.px(std::log10(std::max(p->pairs_per_second, 1e-9)))) << ',' << fmt(f.py(p->accuracy)) << ' ';
    os << "\"/>\n";
    for (auto* p : pts) {
      const double x = f.px(std::log10(std::max(p->pairs_per_second, 1e-9)));
      const double y = f.py(p->accuracy);
      os << "<circle cx=\"" << fmt(x) << "\" cy=\"" << fmt(y) << "\" r=\"4\" fill=\"" << color << "\"/>\n"
         << "<text x=\"" << fmt(x + 6) << "\" y=\"" << fmt(y - 6) << "\">L=" << p->stop_layer << "</text>\n";
    }
    const double ly = f.top + 14 + 16 * idx;
    os << "<text x=\"" << f.left + f.width + 8 << "\" y=\"" << ly << "\" fill=\"" << color << "\">batch " << batch
       << "</text>\n";
    ++idx;
  }
  os << "</svg>\n";
  return os.str();
}

const std::vector<std::string>& known_protocols() {
  static const std::vector<std::string> names{"fmatrix", "append", "pose-auc", "imc", "homography"};
  return names;
}

double default_ransac_threshold(const std::string& protocol) {
  if (protocol == "fmatrix") return fmatrix_protocol_ransac().inlier_threshold;
  if (protocol == "homography") return 3.0;
  if (protocol == "imc") return 0.2;
  return 0.5;
}

PairFeatures load_pair_features(const PairRecord& record, const std::filesystem::path& base_dir) {
  if (record.features.empty()) throw Error(ErrorCode::PathNotFound, "pair " + record.id + " has no features file");
  std::filesystem::path p = record.features;
  if (p.is_relative()) p = base_dir / p;
  const auto c = TensorContainer::load(p);
  PairFeatures f;
  const Matrix ka = c.at("keypoints_a").to_matrix();
  const Matrix kb = c.at("keypoints_b").to_matrix();
  if (ka.cols() != 2 || kb.cols() != 2) {
    throw Error(ErrorCode::ShapeMismatch, p.string() + ": keypoints must be N×2");
  }
  f.kps_a = KeypointSet(ka, record.image_a.width, record.image_a.height);
  f.kps_b = KeypointSet(kb, record.image_b.width, record.image_b.height);
  f.desc_a = c.at("descriptors_a").to_matrix();
  f.desc_b = c.at("descriptors_b").to_matrix();
  f.gt_desc_a = tensor_or_empty(c, "gt_descriptors_a");
  if (f.desc_a.rows() != ka.rows() || f.desc_b.rows() != kb.rows()) {
    throw Error(ErrorCode::ShapeMismatch, p.string() + ": descriptor and keypoint counts differ");
  }
  return f;
}

namespace {

MatchSet run_matcher(const KeypointSet& kps_a, const KeypointSet& kps_b, const Matrix& desc_a, const Matrix& desc_b,
                     const ProtocolOptions& opt) {
  if (kps_a.size() == 0 || kps_b.size() == 0) return {};
  if (opt.weights) return match_pair(kps_a, kps_b, desc_a, desc_b, *opt.weights, opt.model_cfg);
  return mutual_matches(dual_softmax(similarity(desc_a, desc_b), opt.match.inv_temperature),
                        opt.match.match_threshold);
}

}  // namespace

Correspondences predict_correspondences(const PairFeatures& f, const ProtocolOptions& opt, MatchSet* matches) {
  const MatchSet ms = run_matcher(f.kps_a, f.kps_b, f.desc_a, f.desc_b, opt);
  Correspondences out;
  out.reserve(ms.size());
  for (const auto& m : ms) out.push_back({f.kps_a.point(m.i), f.kps_b.point(m.j)});
  if (matches) *matches = ms;
  return out;
}

ReportDocument run_protocol(const std::vector<PairRecord>& records, const ProtocolOptions& opt,
                            std::vector<PairEvalRow>* rows_out) {
  const auto& names = known_protocols();
  if (std::find(names.begin(), names.end(), opt.protocol) == names.end()) {
    throw Error(ErrorCode::InvalidArgument, "unknown protocol '" + opt.protocol + "'");
  }
  if (records.empty()) throw Error(ErrorCode::EmptyInput, "manifest has no pairs");
  const auto t0 = std::chrono::steady_clock::now();

  RansacConfig ransac = opt.protocol == "fmatrix" ? fmatrix_protocol_ransac() : RansacConfig{};
  ransac.inlier_threshold = opt.ransac_threshold.value_or(default_ransac_threshold(opt.protocol));
  ransac.seed = opt.seed;
  ransac.validate();

  ReportDocument doc;
  nlohmann::json config = {{"protocol", opt.protocol},
                           {"ransac_threshold", ransac.inlier_threshold},
                           {"seed", opt.seed},
                           {"pairs_in_manifest", records.size()}};
  if (opt.weights) {
    config["matcher"] = to_json(opt.model_cfg);
  } else {
    config["matcher"] = {{"kind", "mutual_nn"},
                         {"inv_temperature", opt.match.inv_temperature},
                         {"match_threshold", opt.match.match_threshold}};
  }
  nlohmann::json pairs = nlohmann::json::array();
  nlohmann::json summary = nlohmann::json::object();

  if (opt.protocol == "fmatrix") {
    std::vector<PairEvalRow> rows;
    nlohmann::json excluded = nlohmann::json::array();
    for (const auto& r : records) {
      if (r.dynamic) {
        excluded.push_back(r.id);
        continue;
      }
      const auto f = load_pair_features(r, opt.base_dir);
      const auto pred = predict_correspondences(f, opt);
      PairEvalRow row{r.id, r.group, r.category, r.split, eval_pair_fmatrix(r, pred, ransac),
                      static_cast<int>(pred.size())};
      pairs.push_back(to_json(row));
      rows.push_back(std::move(row));
    }
    summary["excluded_dynamic"] = excluded;
    if (!rows.empty()) {
      summary["overall"] = to_json(aggregate(rows, GroupBy::Group)).at("overall");
      summary["by_group"] = to_json(aggregate(rows, GroupBy::Group)).at("buckets");
      summary["by_category"] = to_json(aggregate(rows, GroupBy::Category)).at("buckets");
      summary["by_split"] = to_json(aggregate(rows, GroupBy::Split)).at("buckets");
    }
    if (rows_out) *rows_out = std::move(rows);
  } else if (opt.protocol == "append") {
    std::array<double, 4> mean{};
    std::size_t n = 0;
    for (const auto& r : records) {
      const auto f = load_pair_features(r, opt.base_dir);
      if (f.gt_desc_a.rows() != static_cast<Eigen::Index>(r.gt.size())) {
        throw Error(ErrorCode::ShapeMismatch, "pair " + r.id + ": gt_descriptors_a must have one row per correspondence");
      }
      MatchFunction fn = [&](const KeypointSet& a, const KeypointSet& b, const Matrix& da, const Matrix& db) {
        return run_matcher(a, b, da, db, opt);
      };
      const auto res = eval_correspondence_append(r, f.kps_a, f.desc_a, f.gt_desc_a, f.kps_b, f.desc_b, fn);
      nlohmann::json errs = nlohmann::json::array();
      for (double e : res.errors) errs.push_back(number_or_null(e));
      nlohmann::json pck = nlohmann::json::object();
      for (std::size_t k = 0; k < kAppendThresholds.size(); ++k) {
        pck[std::to_string(kAppendThresholds[k])] = res.pck[k];
        mean[k] += res.pck[k];
      }
      pairs.push_back({{"pair_id", r.id}, {"group", r.group}, {"category", r.category}, {"errors", errs}, {"pck", pck}});
      ++n;
    }
    nlohmann::json pck = nlohmann::json::object();
    for (std::size_t k = 0; k < kAppendThresholds.size(); ++k) pck[std::to_string(kAppendThresholds[k])] = mean[k] / n;
    summary["mean_pck"] = pck;
  } else if (opt.protocol == "pose-auc" || opt.protocol == "imc") {
    const bool imc = opt.protocol == "imc";
    std::vector<double> errors, rot, trans;
    std::vector<std::string> scenes;
    for (const auto& r : records) {
      const auto& k_a = require_intrinsics(r.intrinsics_a, r);
      const auto& k_b = require_intrinsics(r.intrinsics_b, r);
      const auto& gt = require_pose(r);
      const auto f = load_pair_features(r, opt.base_dir);
      const auto pred = predict_correspondences(f, opt);
      const auto est = estimate_pose(pred, k_a, k_b, ransac, stable_hash(r.id));
      nlohmann::json row = {{"pair_id", r.id}, {"predicted", pred.size()}, {"estimated", est.ok}};
      if (imc) {
        double re = kInf, te = kInf;
        if (est.ok) {
          re = pose_errors(est.pose, gt).rotation_deg;
          // Unit-norm estimate carries no scale; the GT baseline length is borrowed.
          te = (est.pose.translation * gt.translation.norm() - gt.translation).norm();
        }
        rot.push_back(re);
        trans.push_back(te);
        scenes.push_back(r.scene_label());
        row["scene"] = r.scene_label();
        row["rotation_deg"] = number_or_null(re);
        row["translation_m"] = number_or_null(te);
      } else {
        const double e = est.ok ? pose_error(est.pose, gt) : kInf;
        errors.push_back(e);
        row["pose_error_deg"] = number_or_null(e);
      }
      pairs.push_back(row);
    }
    if (imc) {
      summary["maa"] = imc_maa(rot, trans, scenes);
    } else {
      const std::vector<double> th{5.0, 10.0, 20.0};
      summary["auc"] = thresholds_json(th, pose_auc(errors, th));
    }
  } else {  // homography
    std::vector<double> errors;
    for (const auto& r : records) {
      if (!r.homography) throw Error(ErrorCode::InvalidArgument, "pair " + r.id + " has no homography");
      const auto f = load_pair_features(r, opt.base_dir);
      const auto pred = predict_correspondences(f, opt);
      double e = kInf;
      if (pred.size() >= 4) {
        try {
          const auto est = ransac_homography(pred, ransac, stable_hash(r.id));
          e = homography_corner_error(est.model, *r.homography, r.image_a.width, r.image_a.height);
        } catch (const Error& err) {
          if (err.code() != ErrorCode::NoModelFound && err.code() != ErrorCode::DegenerateConfiguration &&
              err.code() != ErrorCode::NotEnoughCorrespondences && err.code() != ErrorCode::SingularHomography) {
            throw;
          }
        }
      }
      errors.push_back(e);
      pairs.push_back({{"pair_id", r.id}, {"predicted", pred.size()}, {"corner_error_px", number_or_null(e)}});
    }
    const std::vector<double> th{3.0, 5.0, 10.0};
    summary["auc"] = thresholds_json(th, homography_corner_auc(errors, th));
  }

  doc.body = {{"protocol", opt.protocol}, {"config", config}, {"pairs", pairs}, {"aggregates", summary}};
  doc.metadata = {
      {"generated_at", utc_now()},
      {"runtime_seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()},
      {"maa_definition", "mAA@K px = mean of PCK at integer thresholds 1..K px (threshold 0 excluded)"},
      {"resolution", "F-based errors are measured after anisotropic rescaling of each image to 640x640"}};
  return doc;
}

}  // namespace sparsematch
