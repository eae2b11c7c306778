#include "avit/service.hpp"

#include "avit/errors.hpp"
#include "avit/hashing.hpp"

#include <httplib.h>

#include <iostream>

namespace avit::service {

using nlohmann::json;

struct Service::Server {
  httplib::Server http;
};

namespace {

const char* const kLandmarkRegions[] = {"lips", "brows", "cheeks"};

face::Mesh frame_mesh(const face::CoeffSequence& seq, int f, const face::HeadTemplate& tmpl) {
  return face::flame_forward(tmpl, face::ShapeParams{Eigen::VectorXd::Zero(tmpl.dim_beta())}, seq.pose(f),
                             seq.expression(f));
}

json rows_json(const Mat& m) {
  json out = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) out.push_back(std::vector<double>(m.row(r).begin(), m.row(r).end()));
  return out;
}

bool local_origin(const std::string& origin) {
  for (const char* prefix : {"http://localhost", "http://127.0.0.1", "https://localhost", "https://127.0.0.1"}) {
    const std::string p(prefix);
    if (origin.rfind(p, 0) == 0 && (origin.size() == p.size() || origin[p.size()] == ':')) return true;
  }
  return false;
}

}  // namespace

json landmark_frames(const face::CoeffSequence& seq, const face::HeadTemplate& tmpl) {
  json frames = json::array();
  for (int f = 0; f < seq.length(); ++f) {
    const auto mesh = frame_mesh(seq, f, tmpl);
    json pts = json::array();
    for (const char* region : kLandmarkRegions) {
      const Eigen::RowVector3d c = face::region_positions(mesh, tmpl, region).colwise().mean();
      pts.push_back({c.x(), c.y(), c.z()});
    }
    frames.push_back(std::move(pts));
  }
  return frames;
}

std::vector<double> lip_trajectory(const face::CoeffSequence& seq, const face::HeadTemplate& tmpl) {
  const auto lower = face::lower_lip_indices(tmpl);
  auto mean_y = [&](const Mat& v) {
    double s = 0.0;
    for (int i : lower) s += v(i, 1);
    return s / static_cast<double>(lower.size());
  };
  const double rest = mean_y(tmpl.base_vertices);
  std::vector<double> out;
  for (int f = 0; f < seq.length(); ++f) out.push_back(rest - mean_y(frame_mesh(seq, f, tmpl).vertices));
  return out;
}

Service::Service(std::shared_ptr<const pipeline::Models> models, std::shared_ptr<const corpus::Corpus> corpus)
    : models_(std::move(models)), corpus_(std::move(corpus)), server_(std::make_unique<Server>()) {
  if (models_) {
    const auto& t = models_->tmpl;
    json faces = json::array();
    for (const auto& f : t.faces) faces.push_back({f[0], f[1], f[2]});
    json regions = json::object();
    for (const auto& [name, idx] : t.region_map) regions[name] = idx;
    // Decimation factor 1: the template is already small enough to ship whole.
    json geo{{"decimation", 1}, {"n_vertices", t.n_vertices()}, {"vertices", rows_json(t.base_vertices)},
             {"faces", faces},  {"regions", regions}};
    geo["hash"] = sha256_hex(geo.dump());
    template_payload_ = std::move(geo);
  }
  install_routes();
}

Service::~Service() = default;

json Service::hashes() const { return models_ ? json(models_->hashes) : json::object(); }

Response Service::error(int status, const std::string& message) const {
  return Response{status, json{{"error", message}, {"checkpoints", hashes()}}};
}

Response Service::clips() const {
  if (!models_ || !corpus_) return error(503, "not ready");
  json list = json::array();
  for (const auto* r : corpus_->split("test")) {
    list.push_back(json{{"id", r->record_id},
                        {"emotion", std::string(grammar::emotion_name(r->state.emotion))},
                        {"intensity", r->state.intensity},
                        {"n_frames", r->length()}});
  }
  return Response{200, json{{"clips", list}, {"checkpoints", hashes()}}};
}

Response Service::instruct(const std::string& body) const {
  if (!models_ || !corpus_) return error(503, "not ready");
  const json req = json::parse(body, nullptr, false);
  if (req.is_discarded() || !req.is_object() || !req.contains("clip_id") || !req["clip_id"].is_string()) {
    return error(422, "body must be {\"clip_id\": string}");
  }
  const auto* clip = corpus_->find(req["clip_id"].get<std::string>());
  if (!clip) return error(404, "unknown clip");
  const auto gen = avi::generate_instruction(clip->features, 0, *models_->align, *models_->lm, models_->vocab);
  json parsed = nullptr;
  if (auto p = grammar::parse(gen.text)) {
    json actions = json::array();
    for (const auto& a : p->actions) actions.push_back(std::string(grammar::action_label(a)));
    parsed = json{{"emotion", std::string(grammar::emotion_name(p->emotion))},
                  {"intensity", p->intensity},
                  {"actions", actions}};
  }
  return Response{200, json{{"instruction", gen.text}, {"parsed", parsed}, {"checkpoints", hashes()}}};
}

Response Service::synthesize(const std::string& body, bool full) const {
  if (!models_ || !corpus_) return error(503, "not ready");
  const json req = json::parse(body, nullptr, false);
  if (req.is_discarded() || !req.is_object()) return error(422, "body must be a JSON object");
  if (!req.contains("clip_id") || !req["clip_id"].is_string()) return error(422, "clip_id must be a string");
  if (!req.contains("instruction") || !req["instruction"].is_string()) {
    return error(422, "instruction must be a string");
  }
  int n = 1;
  std::uint64_t seed = 0;
  if (req.contains("n_samples")) {
    if (!req["n_samples"].is_number_integer()) return error(422, "n_samples must be an integer");
    n = req["n_samples"].get<int>();
  }
  if (n < 1 || n > kMaxSamples) return error(422, "n_samples must be in [1, 16]");
  if (req.contains("seed")) {
    if (!req["seed"].is_number_unsigned()) return error(422, "seed must be a non-negative integer");
    seed = req["seed"].get<std::uint64_t>();
  }
  const auto* clip = corpus_->find(req["clip_id"].get<std::string>());
  if (!clip) return error(404, "unknown clip");

  pipeline::SynthResult res;
  try {
    res = pipeline::synth_pipeline(*models_, *clip, req["instruction"].get<std::string>(), n, seed);
  } catch (const NumericError& e) {
    return error(500, e.what());
  } catch (const ParameterError& e) {
    return error(422, e.what());
  } catch (const TokenizationError& e) {
    return error(422, e.what());
  }

  json anims = json::array();
  for (const auto& a : res.animations) anims.push_back(a.to_json());
  const auto& first = res.animations.front().frames;
  json out{{"animations", anims},
           {"instruction", res.instruction},
           {"lip_trajectory", lip_trajectory(first, models_->tmpl)},
           {"landmark_frames", landmark_frames(first, models_->tmpl)},
           {"diversity", n >= 2 ? json(eval::diversity(res.styles)) : json(nullptr)},
           {"checkpoints", hashes()}};
  if (full) {
    json frames = json::array();
    for (int f = 0; f < first.length(); ++f) frames.push_back(rows_json(frame_mesh(first, f, models_->tmpl).vertices));
    out["vertex_frames"] = std::move(frames);
  }
  return Response{200, std::move(out)};
}

Response Service::mesh_template() const {
  if (!models_) return error(503, "not ready");
  json out = template_payload_;
  out["checkpoints"] = hashes();
  return Response{200, std::move(out)};
}

void Service::install_routes() {
  auto& http = server_->http;
  auto reply = [this](const httplib::Request& req, httplib::Response& res, const Response& r) {
    const auto id = counter_.fetch_add(1) + 1;
    res.status = r.status;
    res.set_header("X-Request-Id", std::to_string(id));
    const std::string origin = req.get_header_value("Origin");
    if (local_origin(origin)) {
      res.set_header("Access-Control-Allow-Origin", origin);
      res.set_header("Vary", "Origin");
    }
    res.set_content(r.body.dump(), "application/json");
  };
  auto guarded = [this, reply](auto fn) {
    return [this, reply, fn](const httplib::Request& req, httplib::Response& res) {
      try {
        reply(req, res, fn(req));
      } catch (const std::exception& e) {
        reply(req, res, error(500, e.what()));
      }
    };
  };

  http.Get("/clips", guarded([this](const httplib::Request&) { return clips(); }));
  http.Post("/instruct", guarded([this](const httplib::Request& req) { return instruct(req.body); }));
  http.Post("/synthesize", guarded([this](const httplib::Request& req) {
              const bool full = req.has_param("full") && req.get_param_value("full") == "1";
              return synthesize(req.body, full);
            }));
  http.Get("/mesh/template", guarded([this](const httplib::Request&) { return mesh_template(); }));
  http.Options(R"(/.*)", [](const httplib::Request& req, httplib::Response& res) {
    const std::string origin = req.get_header_value("Origin");
    if (local_origin(origin)) {
      res.set_header("Access-Control-Allow-Origin", origin);
      res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
      res.set_header("Vary", "Origin");
    }
    res.status = 204;
  });
}

void Service::listen(const std::string& host, int port) {
  std::cerr << "listening on http://" << host << ":" << port << "\n";
  if (!server_->http.listen(host, port)) throw IoError("cannot listen on " + host + ":" + std::to_string(port));
}

int Service::bind_any(const std::string& host) {
  const int port = server_->http.bind_to_any_port(host);
  if (port < 0) throw IoError("cannot bind " + host);
  return port;
}

void Service::listen_after_bind() { server_->http.listen_after_bind(); }

void Service::stop() { server_->http.stop(); }

void Service::wait_until_ready() const { server_->http.wait_until_ready(); }

}  // namespace avit::service
