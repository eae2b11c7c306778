#pragma once

// Local HTTP service over immutable loaded models.
//
//   GET  /clips            test-split clips with their ground-truth factors
//   POST /instruct         {clip_id} -> generated instruction, parsed form
//   POST /synthesize       {clip_id, instruction, n_samples, seed} -> animations
//   GET  /mesh/template    template geometry for rendering
//
// Every JSON response carries the loaded checkpoint hashes.

#include "avit/pipeline.hpp"

#include <nlohmann/json.hpp>

#include <atomic>
#include <memory>
#include <string>

namespace avit::service {

inline constexpr int kDefaultPort = 8787;
inline constexpr int kMaxSamples = 16;

struct Response {
  int status = 200;
  nlohmann::json body;
};

class Service {
 public:
  Service(std::shared_ptr<const pipeline::Models> models, std::shared_ptr<const corpus::Corpus> corpus);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  // Handlers, usable without a socket.
  Response clips() const;
  Response instruct(const std::string& body) const;
  Response synthesize(const std::string& body, bool full) const;
  Response mesh_template() const;

  /// Blocks serving on host:port.
  void listen(const std::string& host, int port);
  /// Binds an ephemeral port and returns it; follow with listen_after_bind().
  int bind_any(const std::string& host);
  void listen_after_bind();
  void stop();
  void wait_until_ready() const;

  std::uint64_t requests_served() const { return counter_.load(); }

 private:
  void install_routes();
  Response error(int status, const std::string& message) const;
  nlohmann::json hashes() const;

  std::shared_ptr<const pipeline::Models> models_;
  std::shared_ptr<const corpus::Corpus> corpus_;
  nlohmann::json template_payload_;
  mutable std::atomic<std::uint64_t> counter_{0};
  struct Server;
  std::unique_ptr<Server> server_;
};

/// Region centroids (lips, brows, cheeks) per frame, T x 3 x 3.
nlohmann::json landmark_frames(const face::CoeffSequence& seq, const face::HeadTemplate& tmpl);
/// Lower-lip drop below its neutral height per frame.
std::vector<double> lip_trajectory(const face::CoeffSequence& seq, const face::HeadTemplate& tmpl);

}  // namespace avit::service
