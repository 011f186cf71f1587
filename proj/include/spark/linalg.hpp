#pragma once

#include <Eigen/Dense>

namespace spark {

// All numerics run in double precision; parity checks assume 64-bit
// accumulation throughout.
using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

}  // namespace spark
