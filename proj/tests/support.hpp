#pragma once

#include "avit/pipeline.hpp"

#include <filesystem>
#include <random>
#include <string>

namespace avit::testing {

namespace fs = std::filesystem;

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& stem) {
    std::random_device rd;
    path_ = fs::temp_directory_path() / (stem + "_" + std::to_string(rd()) + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  std::string str() const { return path_.string(); }

 private:
  fs::path path_;
};

inline std::string smoke_config() { return std::string(AVIT_SOURCE_DIR) + "/configs/smoke.json"; }

// Runs every training stage of the smoke config into `out`; returns the first non-zero exit code.
inline int train_smoke(const fs::path& out, const std::vector<std::string>& extra = {}) {
  for (const char* cmd : {"gen-data", "train-prior", "train-align", "train-lm", "train-bridge"}) {
    std::vector<std::string> args{"--quiet", "--config", smoke_config(), "--out", out.string()};
    args.insert(args.end(), extra.begin(), extra.end());
    args.push_back(cmd);
    const int rc = pipeline::run_cli(args);
    if (rc != 0) return rc;
  }
  return 0;
}

// Smoke-trained models shared by every test in the process.
struct SmokeWorld {
  TempDir dir{"avit_smoke"};
  pipeline::Models models;
  corpus::Corpus corpus;

  static SmokeWorld& get() {
    static SmokeWorld w;
    return w;
  }

 private:
  SmokeWorld() {
    if (train_smoke(dir.path()) != 0) throw std::runtime_error("smoke training failed");
    models = pipeline::load_models(dir.path());
    corpus = corpus::read_corpus(dir.path() / "corpus.jsonl");
  }
};

}  // namespace avit::testing
