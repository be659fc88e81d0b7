#pragma once

#include <nlohmann/json.hpp>
#include <string>

#include "mixflow/common/types.hpp"

namespace mixflow {

// Matrices as arrays of rows, vectors as flat arrays.
nlohmann::json matrix_json(const Matrix& m);
nlohmann::json vector_json(const Vector& v);

// Exact-shape readers; a wrong shape raises ShapeError mentioning `what`.
Matrix matrix_from_json(const nlohmann::json& j, Eigen::Index rows, Eigen::Index cols,
                        const std::string& what);
// Shape taken from the document; rows must be equally long.
Matrix matrix_from_json(const nlohmann::json& j, const std::string& what);
Vector vector_from_json(const nlohmann::json& j, const std::string& what);

}  // namespace mixflow
