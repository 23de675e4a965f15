#include "sparsematch/server.hpp"

#include "sparsematch/error.hpp"
#include "sparsematch/eval.hpp"
#include "sparsematch/random.hpp"
#include "sparsematch/report.hpp"
#include "sparsematch/robust.hpp"

#include <httplib.h>

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <condition_variable>
#include <numeric>
#include <semaphore>
#include <sstream>
#include <thread>

namespace sparsematch {

nlohmann::json to_json(const VerificationRecord& v) {
  return {{"task_id", v.task_id}, {"pair_id", v.pair_id}, {"gt_index", v.gt_index}, {"verifier", v.verifier},
          {"xb", v.xb},           {"yb", v.yb},           {"error_px", v.error_px}};
}

VerificationRecord verification_from_json(const nlohmann::json& j) {
  VerificationRecord v;
  v.task_id = j.at("task_id").get<std::string>();
  v.pair_id = j.at("pair_id").get<std::string>();
  v.gt_index = j.at("gt_index").get<int>();
  v.verifier = j.value("verifier", "");
  v.xb = j.at("xb").get<double>();
  v.yb = j.at("yb").get<double>();
  v.error_px = j.at("error_px").get<double>();
  return v;
}

namespace {

nlohmann::json points_json(const std::vector<AnnotatedPoint>& pts) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& p : pts) out.push_back({{"xa", p.xa}, {"ya", p.ya}, {"xb", p.xb}, {"yb", p.yb}});
  return out;
}

std::vector<AnnotatedPoint> points_from_json(const nlohmann::json& j) {
  std::vector<AnnotatedPoint> out;
  for (const auto& p : j) {
    out.push_back({p.at("xa").get<double>(), p.at("ya").get<double>(), p.at("xb").get<double>(),
                   p.at("yb").get<double>()});
  }
  return out;
}

}  // namespace

AnnotationStore::AnnotationStore(std::filesystem::path dir) : dir_(std::move(dir)) {
  std::error_code ec;
  std::filesystem::create_directories(dir_, ec);
  if (!std::filesystem::is_directory(dir_)) {
    throw Error(ErrorCode::PathNotFound, "cannot create annotation store " + dir_.string());
  }
  lock_fd_ = ::open((dir_ / "store.lock").c_str(), O_CREAT | O_RDWR, 0644);
  if (lock_fd_ < 0 || ::flock(lock_fd_, LOCK_EX | LOCK_NB) != 0) {
    if (lock_fd_ >= 0) ::close(lock_fd_);
    throw Error(ErrorCode::InvalidArgument, "annotation store " + dir_.string() + " is locked by another writer");
  }

  const auto snapshot = dir_ / "snapshot.json";
  if (std::filesystem::exists(snapshot)) {
    const auto bytes = read_file(snapshot);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::CorruptPayload, snapshot.string() + ": " + e.what());
    }
    const auto labels = j.value("labels", nlohmann::json::object());
    const auto corrs = j.value("correspondences", nlohmann::json::object());
    const auto verifications = j.value("verifications", nlohmann::json::array());
    for (const auto& [id, v] : labels.items()) labels_[id] = v.get<bool>();
    for (const auto& [id, v] : corrs.items()) correspondences_[id] = points_from_json(v);
    for (const auto& v : verifications) verifications_.push_back(verification_from_json(v));
  }
  const auto log_path = dir_ / "events.log";
  if (std::filesystem::exists(log_path)) {
    std::ifstream in(log_path);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      nlohmann::json event;
      try {
        event = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception&) {
        break;  // torn tail from an interrupted write
      }
      apply(event);
    }
  }
  log_.open(log_path, std::ios::app);
  if (!log_) throw Error(ErrorCode::PathNotFound, "cannot open " + log_path.string());
}

AnnotationStore::~AnnotationStore() {
  log_.close();
  if (lock_fd_ >= 0) {
    ::flock(lock_fd_, LOCK_UN);
    ::close(lock_fd_);
  }
}

void AnnotationStore::apply(const nlohmann::json& event) {
  const std::string type = event.at("type").get<std::string>();
  if (type == "label") {
    labels_[event.at("pair_id").get<std::string>()] = event.at("matchable").get<bool>();
  } else if (type == "correspondences") {
    correspondences_[event.at("pair_id").get<std::string>()] = points_from_json(event.at("points"));
  } else if (type == "verification") {
    verifications_.push_back(verification_from_json(event.at("record")));
  }
}

void AnnotationStore::append(const nlohmann::json& event) {
  log_ << event.dump() << '\n';
  log_.flush();
  if (!log_) throw Error(ErrorCode::PathNotFound, "write to annotation log failed");
  apply(event);
}

void AnnotationStore::set_label(const std::string& pair_id, bool matchable) {
  append({{"type", "label"}, {"pair_id", pair_id}, {"matchable", matchable}});
}

void AnnotationStore::set_correspondences(const std::string& pair_id, const std::vector<AnnotatedPoint>& points) {
  append({{"type", "correspondences"}, {"pair_id", pair_id}, {"points", points_json(points)}});
}

void AnnotationStore::record_verification(const VerificationRecord& v) {
  append({{"type", "verification"}, {"record", to_json(v)}});
}

std::optional<bool> AnnotationStore::label(const std::string& pair_id) const {
  const auto it = labels_.find(pair_id);
  if (it == labels_.end()) return std::nullopt;
  return it->second;
}

const std::vector<AnnotatedPoint>* AnnotationStore::correspondences(const std::string& pair_id) const {
  const auto it = correspondences_.find(pair_id);
  return it == correspondences_.end() ? nullptr : &it->second;
}

void AnnotationStore::compact() {
  nlohmann::json labels = nlohmann::json::object();
  for (const auto& [k, v] : labels_) labels[k] = v;
  nlohmann::json corrs = nlohmann::json::object();
  for (const auto& [k, v] : correspondences_) corrs[k] = points_json(v);
  nlohmann::json ver = nlohmann::json::array();
  for (const auto& v : verifications_) ver.push_back(to_json(v));
  const std::string text =
      nlohmann::json{{"labels", labels}, {"correspondences", corrs}, {"verifications", ver}}.dump(1) + "\n";
  write_file_atomic(dir_ / "snapshot.json", std::vector<std::uint8_t>(text.begin(), text.end()));
  // The snapshot is durable before the log is dropped.
  log_.close();
  log_.open(dir_ / "events.log", std::ios::trunc);
}

// ---------------------------------------------------------------------------

namespace {

struct VerifyTask {
  std::string id;
  std::size_t pair = 0;
  int gt_index = 0;
  std::string assignee;  // empty while queued
  bool submitted = false;
};

ApiResponse json_response(int status, const nlohmann::json& j) { return {status, "application/json", j.dump()}; }

ApiResponse error_response(int status, const std::string& message) {
  return json_response(status, {{"error", message}});
}

std::vector<std::string> split_path(const std::string& path) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : path) {
    if (c == '/') {
      if (!cur.empty()) parts.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) parts.push_back(cur);
  return parts;
}

std::string content_type_for(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  if (ext == ".png") return "image/png";
  if (ext == ".webp") return "image/webp";
  if (ext == ".gif") return "image/gif";
  return "application/octet-stream";
}

}  // namespace

struct AnnotationServer::Impl {
  ServerConfig cfg;
  std::vector<PairRecord> records;
  std::map<std::string, std::size_t> index;
  std::unique_ptr<AnnotationStore> store;
  std::optional<MatcherWeights<float>> weights;
  MatcherConfig model_cfg;
  std::vector<VerifyTask> tasks;
  std::map<std::string, std::size_t> task_index;
  std::map<std::string, int> assigned_per_verifier;
  std::mutex mu;  // guards store, tasks and counters
  std::unique_ptr<std::counting_semaphore<64>> inference_slots;

  httplib::Server http;
  std::thread serve_thread;
  bool running = false;
  bool stopped = false;
  std::mutex run_mu;
  std::condition_variable run_cv;

  explicit Impl(ServerConfig c) : cfg(std::move(c)) {
    try {
      records = load_pair_manifest(cfg.manifest);
    } catch (const Error& e) {
      throw Error(ErrorCode::ManifestUnreadable, e.what());
    }
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (!index.emplace(records[i].id, i).second) {
        throw Error(ErrorCode::ManifestUnreadable, "duplicate pair id " + records[i].id);
      }
    }
    if (cfg.images_dir.empty()) cfg.images_dir = cfg.manifest.parent_path();
    if (cfg.store_dir.empty()) cfg.store_dir = cfg.manifest.string() + ".annotations";
    if (cfg.verify_batch < 1) throw Error(ErrorCode::InvalidArgument, "verify batch must be ≥ 1");
    store = std::make_unique<AnnotationStore>(cfg.store_dir);
    if (cfg.weights) weights = load_weights(*cfg.weights, &model_cfg);
    inference_slots = std::make_unique<std::counting_semaphore<64>>(std::clamp(cfg.inference_workers, 1, 64));
    build_tasks();
  }

  // One task per GT correspondence, in a seeded order. Tasks already
  // submitted in the store stay closed.
  void build_tasks() {
    for (std::size_t p = 0; p < records.size(); ++p) {
      const auto& gt = current_points(p);
      for (std::size_t k = 0; k < gt.size(); ++k) {
        tasks.push_back({records[p].id + "#" + std::to_string(k), p, static_cast<int>(k), "", false});
      }
    }
    Rng rng(cfg.seed);
    for (std::size_t i = tasks.size(); i > 1; --i) std::swap(tasks[i - 1], tasks[rng.index(i)]);
    for (std::size_t i = 0; i < tasks.size(); ++i) task_index[tasks[i].id] = i;
    for (const auto& v : store->verifications()) {
      const auto it = task_index.find(v.task_id);
      if (it == task_index.end()) continue;
      tasks[it->second].submitted = true;
      tasks[it->second].assignee = v.verifier;
      ++assigned_per_verifier[v.verifier];
    }
  }

  std::vector<AnnotatedPoint> current_points(std::size_t p) const {
    if (const auto* saved = store->correspondences(records[p].id)) return *saved;
    std::vector<AnnotatedPoint> out;
    for (const auto& c : records[p].gt) out.push_back({c.a.x(), c.a.y(), c.b.x(), c.b.y()});
    return out;
  }

  static nlohmann::json lint_json(std::size_t n) {
    const bool ok = n >= 8 && n <= 28;
    nlohmann::json j = {{"ok", ok}, {"count", n}, {"min", 8}, {"max", 28}};
    if (!ok) j["message"] = "expected between 8 and 28 correspondences, have " + std::to_string(n);
    return j;
  }

  nlohmann::json pair_summary(std::size_t p) const {
    const auto& r = records[p];
    nlohmann::json j = {{"id", r.id},
                        {"group", r.group},
                        {"category", r.category},
                        {"dynamic", r.dynamic},
                        {"split", r.split},
                        {"correspondence_count", current_points(p).size()}};
    const auto label = store->label(r.id);
    j["matchable"] = label ? nlohmann::json(*label) : nlohmann::json(nullptr);
    return j;
  }

  ApiResponse get_pair(std::size_t p) const {
    const auto& r = records[p];
    nlohmann::json j = to_json(r);
    const auto pts = current_points(p);
    j["correspondences"] = points_json(pts);
    j["image_urls"] = {{"a", "/api/pairs/" + r.id + "/image/a"}, {"b", "/api/pairs/" + r.id + "/image/b"}};
    const auto label = store->label(r.id);
    j["matchable"] = label ? nlohmann::json(*label) : nlohmann::json(nullptr);
    j["lint"] = lint_json(pts.size());
    j["has_features"] = !r.features.empty();
    return json_response(200, j);
  }

  ApiResponse get_image(std::size_t p, const std::string& side) const {
    if (side != "a" && side != "b") return error_response(404, "image side must be a or b");
    const auto& ref = side == "a" ? records[p].image_a : records[p].image_b;
    if (ref.path.empty()) return error_response(404, "pair has no image " + side);
    std::filesystem::path path = ref.path;
    if (path.is_relative()) path = cfg.images_dir / path;
    if (!std::filesystem::is_regular_file(path)) return error_response(404, "image not found: " + ref.path);
    std::vector<std::uint8_t> bytes;
    try {
      bytes = read_file(path);
    } catch (const Error&) {
      return error_response(404, "image not found: " + ref.path);
    }
    return {200, content_type_for(path), std::string(bytes.begin(), bytes.end())};
  }

  ApiResponse post_label(std::size_t p, const nlohmann::json& body) {
    if (!body.contains("matchable") || !body["matchable"].is_boolean()) {
      return error_response(400, "body must be {\"matchable\": bool}");
    }
    store->set_label(records[p].id, body["matchable"].get<bool>());
    return json_response(200, {{"pair_id", records[p].id}, {"matchable", body["matchable"]}});
  }

  ApiResponse post_correspondences(std::size_t p, const nlohmann::json& body) {
    const nlohmann::json& list = body.is_array() ? body : body.value("correspondences", nlohmann::json());
    if (!list.is_array()) return error_response(400, "expected a correspondences array");
    std::vector<AnnotatedPoint> pts;
    try {
      pts = points_from_json(list);
    } catch (const nlohmann::json::exception& e) {
      return error_response(400, std::string("malformed correspondence: ") + e.what());
    }
    const auto& r = records[p];
    for (std::size_t k = 0; k < pts.size(); ++k) {
      const auto& q = pts[k];
      const bool in_a = q.xa >= 0 && q.xa <= r.image_a.width && q.ya >= 0 && q.ya <= r.image_a.height;
      const bool in_b = q.xb >= 0 && q.xb <= r.image_b.width && q.yb >= 0 && q.yb <= r.image_b.height;
      if (!in_a || !in_b || !std::isfinite(q.xa + q.ya + q.xb + q.yb)) {
        return error_response(400, "correspondence " + std::to_string(k) + " lies outside its image");
      }
    }
    store->set_correspondences(r.id, pts);
    return json_response(200, {{"pair_id", r.id}, {"correspondences", points_json(pts)}, {"lint", lint_json(pts.size())}});
  }

  ApiResponse get_matches(std::size_t p, const std::map<std::string, std::string>& query) {
    if (!weights) return error_response(503, "no matcher weights loaded");
    const auto& r = records[p];
    if (r.features.empty()) return error_response(404, "pair has no features file");
    MatcherConfig run_cfg = model_cfg;
    if (const auto it = query.find("stop_layer"); it != query.end()) {
      try {
        std::size_t used = 0;
        run_cfg.stop_layer = std::stoi(it->second, &used);
        if (used != it->second.size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        return error_response(400, "stop_layer must be an integer");
      }
      if (run_cfg.stop_layer < 1 || run_cfg.stop_layer > run_cfg.num_blocks) {
        return error_response(400, "stop_layer must be in [1, " + std::to_string(run_cfg.num_blocks) + "]");
      }
    }
    PairFeatures f;
    try {
      f = load_pair_features(r, cfg.manifest.parent_path());
    } catch (const Error& e) {
      return error_response(404, e.what());
    }
    ProtocolOptions opt;
    opt.weights = &*weights;
    opt.model_cfg = run_cfg;
    MatchSet ms;
    Correspondences corrs;
    {
      inference_slots->acquire();
      try {
        corrs = predict_correspondences(f, opt, &ms);
      } catch (...) {
        inference_slots->release();
        throw;
      }
      inference_slots->release();
    }
    std::vector<char> inlier(ms.size(), 0);
    nlohmann::json fjson = nullptr;
    if (corrs.size() >= 8) {
      const auto scaled = to_eval_resolution(corrs, r.image_a, r.image_b);
      try {
        RansacConfig rc = fmatrix_protocol_ransac();
        rc.seed = cfg.seed;
        const auto est = ransac_fundamental(scaled, rc, stable_hash(r.id));
        const auto errs = epipolar_errors(est.model, scaled, EpipolarMode::SymmetricMax);
        for (std::size_t k = 0; k < errs.size(); ++k) inlier[k] = errs[k] <= cfg.inlier_threshold_px;
        fjson = nlohmann::json::array();
        for (int a = 0; a < 3; ++a) {
          for (int b = 0; b < 3; ++b) fjson.push_back(est.model(a, b));
        }
      } catch (const Error& e) {
        if (e.code() != ErrorCode::NoModelFound && e.code() != ErrorCode::DegenerateConfiguration &&
            e.code() != ErrorCode::NotEnoughCorrespondences) {
          throw;
        }
      }
    }
    nlohmann::json out = nlohmann::json::array();
    for (std::size_t k = 0; k < ms.size(); ++k) {
      out.push_back({{"i", ms[k].i},
                     {"j", ms[k].j},
                     {"xa", corrs[k].a.x()},
                     {"ya", corrs[k].a.y()},
                     {"xb", corrs[k].b.x()},
                     {"yb", corrs[k].b.y()},
                     {"score", ms[k].score},
                     {"inlier", static_cast<bool>(inlier[k])}});
    }
    return json_response(200, {{"pair_id", r.id},
                               {"stop_layer", run_cfg.stop_layer},
                               {"matches", out},
                               {"fundamental_640", fjson},
                               {"inlier_threshold_px", cfg.inlier_threshold_px}});
  }

  ApiResponse verify_next(const std::map<std::string, std::string>& query) {
    std::string verifier = "anonymous";
    if (const auto it = query.find("verifier"); it != query.end() && !it->second.empty()) verifier = it->second;
    if (assigned_per_verifier[verifier] >= cfg.verify_batch) {
      return error_response(429, "verifier " + verifier + " has reached the batch of " +
                                     std::to_string(cfg.verify_batch) + " tasks");
    }
    for (auto& t : tasks) {
      if (!t.assignee.empty()) continue;
      const auto& r = records[t.pair];
      const auto pts = current_points(t.pair);
      if (static_cast<std::size_t>(t.gt_index) >= pts.size()) continue;  // annotation shrank since startup
      t.assignee = verifier;
      ++assigned_per_verifier[verifier];
      const auto& q = pts[t.gt_index];
      return json_response(200, {{"task_id", t.id},
                                 {"pair_id", r.id},
                                 {"xa", q.xa},
                                 {"ya", q.ya},
                                 {"image_urls", {{"a", "/api/pairs/" + r.id + "/image/a"}, {"b", "/api/pairs/" + r.id + "/image/b"}}},
                                 {"remaining_in_batch", cfg.verify_batch - assigned_per_verifier[verifier]}});
    }
    return error_response(404, "no verification tasks left");
  }

  ApiResponse verify_submit(const std::string& task_id, const nlohmann::json& body) {
    const auto it = task_index.find(task_id);
    if (it == task_index.end()) return error_response(404, "unknown task " + task_id);
    auto& t = tasks[it->second];
    if (t.submitted) return error_response(409, "task " + task_id + " was already submitted");
    if (t.assignee.empty()) return error_response(409, "task " + task_id + " has not been assigned");
    if (!body.contains("xb") || !body.contains("yb") || !body["xb"].is_number() || !body["yb"].is_number()) {
      return error_response(400, "body must be {\"xb\": number, \"yb\": number}");
    }
    const auto& r = records[t.pair];
    const auto pts = current_points(t.pair);
    if (static_cast<std::size_t>(t.gt_index) >= pts.size()) return error_response(410, "task " + task_id + " no longer exists");
    const auto& q = pts[t.gt_index];
    const Vec2 clicked = to_eval_resolution(Vec2(body["xb"].get<double>(), body["yb"].get<double>()),
                                            r.image_b.width, r.image_b.height);
    const Vec2 truth = to_eval_resolution(Vec2(q.xb, q.yb), r.image_b.width, r.image_b.height);
    VerificationRecord v{t.id, r.id, t.gt_index, t.assignee, body["xb"].get<double>(), body["yb"].get<double>(),
                         (clicked - truth).norm()};
    store->record_verification(v);
    t.submitted = true;
    return json_response(200, to_json(v));
  }

  ApiResponse stats() const {
    struct Counts {
      int pairs = 0, matchable = 0, unmatchable = 0, unlabeled = 0, annotated = 0, dynamic = 0;
    };
    std::map<std::string, Counts> groups;
    for (std::size_t p = 0; p < records.size(); ++p) {
      auto& c = groups[records[p].group];
      ++c.pairs;
      c.dynamic += records[p].dynamic;
      const auto label = store->label(records[p].id);
      if (!label) ++c.unlabeled;
      else if (*label) ++c.matchable;
      else ++c.unmatchable;
      c.annotated += store->correspondences(records[p].id) != nullptr;
    }
    nlohmann::json gj = nlohmann::json::object();
    for (const auto& [g, c] : groups) {
      gj[g] = {{"pairs", c.pairs},         {"matchable", c.matchable}, {"unmatchable", c.unmatchable},
               {"unlabeled", c.unlabeled}, {"annotated", c.annotated}, {"dynamic", c.dynamic}};
    }
    std::vector<double> errs;
    for (const auto& v : store->verifications()) errs.push_back(v.error_px);
    std::sort(errs.begin(), errs.end());
    // One-pixel bins up to 20 px, then an overflow bin.
    std::vector<int> hist(kPckMaxThreshold + 1, 0);
    for (double e : errs) hist[std::min<std::size_t>(static_cast<std::size_t>(e), kPckMaxThreshold)]++;
    nlohmann::json human = {{"count", errs.size()}, {"errors_px", errs}, {"histogram_1px", hist}};
    if (!errs.empty()) {
      human["mean_px"] = std::accumulate(errs.begin(), errs.end(), 0.0) / errs.size();
      const std::size_t m = errs.size() / 2;
      human["median_px"] = errs.size() % 2 ? errs[m] : 0.5 * (errs[m - 1] + errs[m]);
      human["pck"] = curve_json(pck_curve(errs));
    }
    std::size_t open = 0, assigned = 0, submitted = 0;
    for (const auto& t : tasks) {
      if (t.submitted) ++submitted;
      else if (!t.assignee.empty()) ++assigned;
      else ++open;
    }
    return json_response(200, {{"pairs", records.size()},
                               {"groups", gj},
                               {"human_baseline", human},
                               {"verification_tasks", {{"open", open}, {"assigned", assigned}, {"submitted", submitted}}}});
  }

  ApiResponse route(const std::string& method, const std::string& path, const std::string& body_text,
                    const std::map<std::string, std::string>& query) {
    const auto parts = split_path(path);
    if (parts.empty() || parts[0] != "api") return error_response(404, "not found");
    nlohmann::json body;
    if (method == "POST") {
      try {
        body = body_text.empty() ? nlohmann::json::object() : nlohmann::json::parse(body_text);
      } catch (const nlohmann::json::exception&) {
        return error_response(400, "request body is not valid JSON");
      }
    }
    const std::size_t n = parts.size();
    std::unique_lock lock(mu);
    if (n == 2 && parts[1] == "pairs" && method == "GET") {
      nlohmann::json list = nlohmann::json::array();
      for (std::size_t p = 0; p < records.size(); ++p) list.push_back(pair_summary(p));
      return json_response(200, list);
    }
    if (n == 2 && parts[1] == "stats" && method == "GET") return stats();
    if (n == 3 && parts[1] == "verify" && parts[2] == "next" && method == "GET") return verify_next(query);
    if (n == 3 && parts[1] == "verify" && method == "POST") return verify_submit(parts[2], body);
    if (n >= 3 && parts[1] == "pairs") {
      const auto it = index.find(parts[2]);
      if (it == index.end()) return error_response(404, "unknown pair " + parts[2]);
      const std::size_t p = it->second;
      if (n == 3 && method == "GET") return get_pair(p);
      if (n == 5 && parts[3] == "image" && method == "GET") return get_image(p, parts[4]);
      if (n == 4 && parts[3] == "label" && method == "POST") return post_label(p, body);
      if (n == 4 && parts[3] == "correspondences") {
        if (method == "GET") {
          const auto pts = current_points(p);
          return json_response(200, {{"pair_id", records[p].id}, {"correspondences", points_json(pts)}, {"lint", lint_json(pts.size())}});
        }
        if (method == "POST") return post_correspondences(p, body);
      }
      if (n == 4 && parts[3] == "matches" && method == "GET") {
        // Inference does not touch shared mutable state.
        lock.unlock();
        return get_matches(p, query);
      }
    }
    return error_response(404, "no route for " + method + " " + path);
  }
};

AnnotationServer::AnnotationServer(ServerConfig cfg) : impl_(std::make_unique<Impl>(std::move(cfg))) {}

AnnotationServer::~AnnotationServer() {
  try {
    stop();
  } catch (...) {
  }
}

ApiResponse AnnotationServer::handle(const std::string& method, const std::string& path, const std::string& body,
                                     const std::map<std::string, std::string>& query) {
  try {
    return impl_->route(method, path, body, query);
  } catch (const Error& e) {
    return error_response(e.code() == ErrorCode::InvalidArgument ? 400 : 500, e.what());
  } catch (const std::exception& e) {
    return error_response(500, e.what());
  }
}

void AnnotationServer::start() {
  auto& http = impl_->http;
  auto dispatch = [this](const httplib::Request& req, httplib::Response& res) {
    std::map<std::string, std::string> query;
    for (const auto& [k, v] : req.params) query.emplace(k, v);
    const auto out = handle(req.method, req.path, req.body, query);
    res.status = out.status;
    res.set_content(out.body, out.content_type);
  };
  http.Get(R"(/api/.*)", dispatch);
  http.Post(R"(/api/.*)", dispatch);
  if (!impl_->cfg.static_dir.empty()) http.set_mount_point("/", impl_->cfg.static_dir.string());

  // httplib's default also sets SO_REUSEPORT, which would let a second
  // server share the port silently.
  http.set_socket_options([](socket_t sock) {
    int yes = 1;
    ::setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof yes);
  });
  const auto& cfg = impl_->cfg;
  if (cfg.port == 0) {
    bound_port_ = http.bind_to_any_port(cfg.host);
    if (bound_port_ < 0) throw Error(ErrorCode::PortInUse, "cannot bind " + cfg.host);
  } else {
    if (!http.bind_to_port(cfg.host, cfg.port)) {
      throw Error(ErrorCode::PortInUse, cfg.host + ":" + std::to_string(cfg.port) + " is not available");
    }
    bound_port_ = cfg.port;
  }
  {
    std::lock_guard lock(impl_->run_mu);
    impl_->running = true;
  }
  impl_->serve_thread = std::thread([this] { impl_->http.listen_after_bind(); });
  http.wait_until_ready();
}

void AnnotationServer::stop() {
  {
    std::lock_guard lock(impl_->run_mu);
    if (impl_->stopped) return;
    impl_->stopped = true;
  }
  if (impl_->running) {
    impl_->http.stop();
    if (impl_->serve_thread.joinable()) impl_->serve_thread.join();
  }
  {
    std::lock_guard lock(impl_->mu);
    impl_->store->compact();
  }
  impl_->run_cv.notify_all();
}

void AnnotationServer::wait() {
  std::unique_lock lock(impl_->run_mu);
  impl_->run_cv.wait(lock, [this] { return impl_->stopped; });
}

}  // namespace sparsematch
