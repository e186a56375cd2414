#pragma once

namespace tpn {

/// Global worker budget honored by every OpenMP kernel. BLAS is pinned to one
/// thread; kernels parallelize over batch/channel/group so each output element is
/// produced by exactly one worker in a fixed order, making results independent of
/// the thread count.
void set_num_threads(int n);
int num_threads();

}  // namespace tpn
