#pragma once

#include "json.hpp"
#include "rpolab/policy.hpp"

namespace rpolab {

// Internal JSON forms shared by the policy and trainer checkpoints.
nlohmann::json policy_to_json(const Policy& policy);
Policy policy_from_json(const nlohmann::json& doc,
                        std::shared_ptr<const PromptSpace> space);

}  // namespace rpolab
