#pragma once

#include "avit/errors.hpp"

#include <nlohmann/json.hpp>

#include <set>
#include <string>

namespace avit {

// Reads optional keys from a JSON object and rejects anything it was not asked about.
class StrictReader {
 public:
  StrictReader(const nlohmann::json& j, std::string context) : j_(j), context_(std::move(context)) {
    if (!j_.is_object()) throw ParameterError(context_ + ": expected a JSON object");
  }

  template <class T>
  StrictReader& get(const std::string& key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return *this;
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ParameterError(context_ + "." + key + ": " + e.what());
    }
    return *this;
  }

  const nlohmann::json* child(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ParameterError(context_ + ": unknown key '" + it.key() + "'");
    }
  }

 private:
  const nlohmann::json& j_;
  std::string context_;
  std::set<std::string> seen_;
};

}  // namespace avit
