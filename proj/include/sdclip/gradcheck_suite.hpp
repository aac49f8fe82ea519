#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace sdclip {

enum class CheckStatus { kPass, kFail, kPassByDesign };
std::string status_name(CheckStatus s);

struct CheckEntry {
  std::string group;  // "primitive", "composite", "contract", "design", "mutation"
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  CheckStatus status = CheckStatus::kPass;
  std::string detail;  // worst offender, or what a contract observed
};

struct SuiteReport {
  std::vector<CheckEntry> entries;
  double seconds = 0.0;

  bool all_passed() const;
  std::size_t failures() const;
};

inline constexpr double kPrimitiveTolerance = 1e-6;
inline constexpr double kCompositeTolerance = 1e-5;

/// Finite-difference checks of every primitive and composite loss (all
/// variants), exact-zero gradient-flow contracts on small encoders, the
/// intentional stop-gradient divergence, and a mutation self-test of the
/// checker itself.
SuiteReport run_gradcheck_suite(std::uint64_t seed = 0);

// Exact-zero gradient-flow contracts alone.
std::vector<CheckEntry> run_contract_checks();

// Only the primitive checks (used by the softmax mutation test).
std::vector<CheckEntry> run_primitive_checks(std::uint64_t seed = 0);

std::string format_entry(const CheckEntry& e);

}  // namespace sdclip
