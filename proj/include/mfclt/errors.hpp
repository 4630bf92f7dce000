#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace mfclt {

// Non-finite or otherwise unusable numerical state.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Structural hypotheses of an estimator are not declared by the model.
class HypothesisError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Invalid experiment configuration; carries every problem found.
class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(std::vector<std::string> problems)
      : std::invalid_argument(join(problems)), problems_(std::move(problems)) {}

  const std::vector<std::string>& problems() const { return problems_; }

 private:
  static std::string join(const std::vector<std::string>& items) {
    std::string out;
    for (const auto& item : items) {
      if (!out.empty()) out += "; ";
      out += item;
    }
    return out;
  }

  std::vector<std::string> problems_;
};

}  // namespace mfclt
