#pragma once

#include <string>

namespace multipath::acceptance {

enum class Status { pass, fail, blocked };

struct Outcome {
  Status status = Status::fail;
  std::string detail;
};

inline Outcome verdict(bool ok, std::string detail) {
  return {ok ? Status::pass : Status::fail, std::move(detail)};
}

// Double-precision criteria, built against the f64 engine.
Outcome gradient_correctness();
Outcome expected_cost_oracles();

}  // namespace multipath::acceptance
