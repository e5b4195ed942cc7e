#include "nesy/perception.hpp"

namespace nesy {

void inject_weights(const WeightArchive& archive, const std::vector<Parameter*>& target,
                    const std::string& prefix, bool freeze) {
  std::vector<Parameter*> matched;
  std::string problems;
  for (Parameter* p : target) {
    if (p->name.rfind(prefix, 0) != 0) continue;
    matched.push_back(p);
    if (!archive.has(p->name)) {
      problems += (problems.empty() ? "" : ", ") + p->name + " missing";
      continue;
    }
    const auto& e = archive.find(p->name);
    if (e.dims.size() != 2 || static_cast<Index>(e.dims[0]) != p->value.rows() ||
        static_cast<Index>(e.dims[1]) != p->value.cols())
      problems += (problems.empty() ? "" : ", ") + p->name + " shape mismatch";
  }
  if (matched.empty())
    throw LookupError("no target parameters match prefix \"" + prefix + "\"");
  if (!problems.empty()) throw TransferError("transfer failed: " + problems);

  // All validated: apply in one pass so a throw above never half-writes.
  for (Parameter* p : matched) {
    p->value = entry_matrix(archive.find(p->name));
    p->grad = Matrix::Zero(p->value.rows(), p->value.cols());
    if (freeze) p->trainable = false;
  }
}

void inject_weights(const TransferPlan& plan, const std::vector<Parameter*>& target) {
  inject_weights(load_archive(plan.archive_path), target, plan.prefix, plan.freeze);
}

}  // namespace nesy
