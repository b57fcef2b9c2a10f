#pragma once

#include <iosfwd>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dscm/scm.hpp"

namespace dscm::cli {

/// Bad command-line input; maps to exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One assignment of an intervention expression.
struct InterventionItem {
  enum class Kind {
    Constant,    // <node>=<const>
    Additive,    // <node>=+<delta>: per-record x := x + delta
    NoiseShift,  // <node>=f_<NODE>(eps)+<c>: x := f(eps; pa) + c
  };
  std::string node;
  Kind kind = Kind::Constant;
  double value = 0.0;
};

/// Parses ';'-separated assignments; an empty expression is the null
/// intervention. Throws UsageError with a grammar reminder.
std::vector<InterventionItem> parse_intervention(std::string_view expr);

/// Intervention for counterfactual queries on `obs`. Additive items become
/// per-record constants; noise shifts on invertible nodes stay noise shifts.
Intervention to_counterfactual_intervention(const std::vector<InterventionItem>& items, const Observation& obs);
/// Intervention for sampling. An additive item acts on the sampled value,
/// which is the noise-shift surrogate.
Intervention to_sampling_intervention(const std::vector<InterventionItem>& items);

/// Caps glibc's allocation thresholds so large temporaries are reused rather
/// than mapped and unmapped on every training step.
void tune_allocator();

/// Runs the command line; returns the process exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace dscm::cli
