#pragma once

#include "mixflow/common/types.hpp"

namespace mixflow::ot {

// Exact W1 (order 1) or W2 (order 2) between uniform empirical measures.
// Equal-size sets go through the assignment solver; otherwise the
// transportation simplex is used.
double empirical_wasserstein(const Matrix& x, const Matrix& y, int order);

// Same value, always through solve_transport.
double empirical_wasserstein_lp(const Matrix& x, const Matrix& y, int order);

}  // namespace mixflow::ot
