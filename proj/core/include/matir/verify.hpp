#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "matir/ssm.hpp"

namespace matir::verify {

/// Outcome of one named property check. `measured` is the worst observed
/// deviation (or a count-like statistic, see `note`), `tolerance` the bound
/// it was held against.
struct PropertyResult {
    std::string name;
    bool pass = false;
    double measured = 0.0;
    double tolerance = 0.0;
    std::string note;
};

/// Scaling-and-squaring matrix exponential, independent of the series path
/// used by discretize; the reference the ZOH checks compare against.
ssm::Mat expm_scaling_squaring(const ssm::Mat& a);

using RecurrentScanFn =
    std::function<std::vector<double>(const ssm::DiscreteSsm&, std::span<const double>)>;

/// Recurrent-vs-convolutional agreement over `trials` random stable systems.
/// The recurrence under test is injectable so a deliberately corrupted scan
/// can be shown to fail.
PropertyResult check_duality(int trials, uint64_t seed, const RecurrentScanFn& scan);

/// Runs every property whose name contains `filter` (all when empty).
std::vector<PropertyResult> run_properties(const std::string& filter);

/// Names of all registered properties, in execution order.
std::vector<std::string> property_names();

}  // namespace matir::verify
