#include "tpseg/params.hpp"

namespace tpseg {

const char* to_string(ParamRole role) {
  switch (role) {
    case ParamRole::Frozen: return "frozen";
    case ParamRole::SharedAdapter: return "shared_adapter";
    case ParamRole::TaskRouter: return "task_router";
    case ParamRole::Gate: return "gate";
    case ParamRole::Decoder: return "decoder";
    case ParamRole::Rho: return "rho";
    case ParamRole::Embedding: return "embedding";
    case ParamRole::PrototypeInit: return "prototype_init";
  }
  return "unknown";
}

}  // namespace tpseg
