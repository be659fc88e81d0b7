#include "mixflow/common/types.hpp"

#include <sstream>

#include "mixflow/common/error.hpp"

namespace mixflow {

std::string shape_string(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

void require_shape(const Matrix& m, Eigen::Index rows, Eigen::Index cols,
                   const std::string& what) {
  if (m.rows() != rows || m.cols() != cols) {
    std::ostringstream os;
    os << what << ": expected " << rows << "x" << cols << ", got "
       << shape_string(m);
    throw ShapeError(os.str());
  }
}

bool all_finite(const Matrix& m) { return m.allFinite(); }

}  // namespace mixflow
