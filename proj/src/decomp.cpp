#include "circuit_lens/decomp.hpp"

namespace circuit_lens {

std::string_view kernel_kind_name(KernelKind kind) {
  switch (kind) {
    case KernelKind::SlowlyDecaying: return "slowly-decaying";
    case KernelKind::Local: return "local";
    case KernelKind::Uniform: return "uniform";
  }
  return "unknown";
}

}  // namespace circuit_lens
