#include "panvae/pruning.hpp"

#include <fstream>

namespace panvae {

ResponsibilityCount responsibility_counts(const Matrix& embeddings,
                                          const Eigen::VectorXi& labels,
                                          const PrototypeBank& bank, double epsilon) {
  ResponsibilityCount out;
  out.counts = Eigen::MatrixXi::Zero(bank.num_classes, bank.per_class);
  Eigen::VectorXi per_class = Eigen::VectorXi::Zero(bank.num_classes);
  for (long i = 0; i < embeddings.rows(); ++i) {
    const int k = labels[i];
    per_class[k] += 1;
    int best = -1;
    double best_sim = -1.0;
    for (int j = 0; j < bank.per_class; ++j) {
      if (!bank.is_active(k, j)) continue;
      const double d2 =
          (embeddings.row(i) - bank.phi.row(bank.index(k, j))).squaredNorm();
      const double s = std::log((d2 + 1.0) / (d2 + epsilon));
      if (s > best_sim) {  // strict comparison: ties go to the lowest index
        best_sim = s;
        best = j;
      }
    }
    out.counts(k, best) += 1;
  }
  for (int k = 0; k < bank.num_classes; ++k) {
    if (per_class[k] == 0) {
      throw DataError("training set has no images of class " + std::to_string(k));
    }
  }
  return out;
}

ResponsibilityCount responsibility_counts(const Model& model, const Dataset& train) {
  const Matrix embeddings = model.embed(train.images);
  return responsibility_counts(embeddings, train.labels, model.bank(),
                               model.config().epsilon);
}

PruneResult prune(const ResponsibilityCount& counts, const PrototypeBank& bank) {
  PruneResult result;
  result.bank = bank;
  for (int k = 0; k < bank.num_classes; ++k) {
    // Pass 1: mark zero-responsibility prototypes.
    int survivors = 0;
    for (int j = 0; j < bank.per_class; ++j) {
      if (bank.is_active(k, j) && counts.counts(k, j) > 0) ++survivors;
    }
    int last_kept = -1;
    if (survivors == 0) {
      // keep the lowest-index active prototype as the required survivor
      for (int j = 0; j < bank.per_class; ++j) {
        if (bank.is_active(k, j)) {
          last_kept = j;
          break;
        }
      }
    }
    for (int j = 0; j < bank.per_class; ++j) {
      if (!bank.is_active(k, j)) continue;
      PruneDecision d{k, j, counts.counts(k, j), false, false};
      if (counts.counts(k, j) == 0) {
        if (j == last_kept) {
          d.kept_as_last_survivor = true;
        } else {
          d.pruned = true;
          result.bank.active[std::size_t(bank.index(k, j))] = 0;
        }
      }
      result.decisions.push_back(d);
    }
  }
  result.bank.validate();
  return result;
}

void write_prune_report(const PruneResult& result, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << "class,prototype_index,count,pruned\n";
  for (const auto& d : result.decisions) {
    out << d.class_index << ',' << d.prototype_index << ',' << d.count << ','
        << (d.pruned ? "true" : "false") << '\n';
  }
}

}  // namespace panvae
