#pragma once

#include <Eigen/Dense>
#include <string>

namespace mixflow {

// Dense row-per-point storage is used for every point set in the project.
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

std::string shape_string(const Matrix& m);

// Throws ShapeError with `what` as context when the shapes differ.
void require_shape(const Matrix& m, Eigen::Index rows, Eigen::Index cols,
                   const std::string& what);

bool all_finite(const Matrix& m);

}  // namespace mixflow
