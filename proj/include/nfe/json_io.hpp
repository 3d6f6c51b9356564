// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <json.hpp>

#include "nfe/fission.hpp"

namespace nfe {

nlohmann::json to_json(const FissionPlan& plan);
FissionPlan plan_from_json(const nlohmann::json& j);

}  // namespace nfe
