#pragma once
// Class-balanced evaluation: unweighted (macro) F1 and recall plus plain
// accuracy, all derived from one confusion matrix with rows as ground truth.

#include <cstdint>
#include <vector>

namespace merba {

struct EvalReport {
    std::vector<std::vector<int64_t>> confusion;  // [truth][prediction]
    std::vector<double> precision, recall, f1;    // per class, 0 when undefined
    double uf1 = 0.0;  // mean per-class F1
    double uar = 0.0;  // mean per-class recall
    double acc = 0.0;
};

std::vector<std::vector<int64_t>> confusion_matrix(const std::vector<int>& truth,
                                                   const std::vector<int>& pred,
                                                   int num_classes);
EvalReport report_from_confusion(const std::vector<std::vector<int64_t>>& m);
EvalReport evaluate_predictions(const std::vector<int>& truth,
                                const std::vector<int>& pred, int num_classes);

}  // namespace merba
