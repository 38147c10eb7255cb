#pragma once

#include <cstdint>

namespace matir {

/// Worker-thread budget for batch/sample parallelism (0 = hardware auto).
/// Results are bit-identical for any setting: work is partitioned per
/// sample and merged in a fixed order.
void set_max_threads(int n);
int max_threads();

}  // namespace matir
