#pragma once

#include "sparsematch/container.hpp"
#include "sparsematch/dataset.hpp"
#include "sparsematch/matcher.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace sparsematch {

struct VerificationRecord {
  std::string task_id;
  std::string pair_id;
  int gt_index = 0;
  std::string verifier;
  double xb = 0.0;
  double yb = 0.0;
  double error_px = 0.0;  // at the 640×640 evaluation scale
};

nlohmann::json to_json(const VerificationRecord& v);
VerificationRecord verification_from_json(const nlohmann::json& j);

/// Labels, correspondences and verification results. Every write is one
/// appended JSON line (flushed); compact() folds the log into a snapshot
/// written atomically. A torn final log line is ignored on load.
/// The directory is held under an exclusive advisory lock.
class AnnotationStore {
 public:
  explicit AnnotationStore(std::filesystem::path dir);
  ~AnnotationStore();
  AnnotationStore(const AnnotationStore&) = delete;
  AnnotationStore& operator=(const AnnotationStore&) = delete;

  void set_label(const std::string& pair_id, bool matchable);
  void set_correspondences(const std::string& pair_id, const std::vector<AnnotatedPoint>& points);
  void record_verification(const VerificationRecord& v);

  std::optional<bool> label(const std::string& pair_id) const;
  const std::vector<AnnotatedPoint>* correspondences(const std::string& pair_id) const;
  const std::vector<VerificationRecord>& verifications() const { return verifications_; }

  void compact();
  const std::filesystem::path& dir() const { return dir_; }

 private:
  void apply(const nlohmann::json& event);
  void append(const nlohmann::json& event);

  std::filesystem::path dir_;
  int lock_fd_ = -1;
  std::ofstream log_;
  std::map<std::string, bool> labels_;
  std::map<std::string, std::vector<AnnotatedPoint>> correspondences_;
  std::vector<VerificationRecord> verifications_;
};

struct ServerConfig {
  std::filesystem::path manifest;
  std::filesystem::path images_dir;      // defaults to the manifest directory
  std::filesystem::path store_dir;       // defaults to <manifest>.annotations
  std::filesystem::path static_dir;      // UI bundle, optional
  std::optional<std::filesystem::path> weights;
  std::string host = "127.0.0.1";
  int port = 8080;                       // 0 picks a free port
  int verify_batch = 20;                 // tasks per verifier
  std::uint64_t seed = 0;
  int inference_workers = 2;
  double inlier_threshold_px = 5.0;      // overlay inlier flag, 640×640 scale
};

struct ApiResponse {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};

/// The /api surface. Routing is available without a socket through
/// handle(), which is what the HTTP layer calls.
class AnnotationServer {
 public:
  /// Throws ManifestUnreadable when the manifest cannot be loaded.
  explicit AnnotationServer(ServerConfig cfg);
  ~AnnotationServer();

  ApiResponse handle(const std::string& method, const std::string& path, const std::string& body,
                     const std::map<std::string, std::string>& query = {});

  /// Binds and serves on a background thread. Throws PortInUse.
  void start();
  /// Stops serving and compacts the annotation store.
  void stop();
  /// Blocks until stop() is called from another thread.
  void wait();
  int port() const { return bound_port_; }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  int bound_port_ = 0;
};

}  // namespace sparsematch
