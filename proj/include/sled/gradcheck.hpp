// Central finite-difference verification of every differentiable op and of
// the full SLED regularizer path starting from a cost volume.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace sled {

struct GradCheckResult {
    std::string name;
    double max_rel_err = 0.0;  // |analytic - numeric| / max(1, |analytic|)
    bool passed = false;
};

struct GradCheckOptions {
    double step = 1e-4;       // central-difference half step
    double tolerance = 1e-4;
    int samples_per_tensor = 4;  // full-model coordinates probed per parameter tensor
    std::uint64_t seed = 7;
    bool quick = false;          // shrink the full-model volume (unit-test speed)
    std::string only;            // run just the check with this name, if set
    std::string corrupt_op;      // fault-injection hook: poison this check's analytic grads
};

std::vector<GradCheckResult> run_gradcheck(const GradCheckOptions& opt);

bool all_passed(const std::vector<GradCheckResult>& results);

}  // namespace sled
