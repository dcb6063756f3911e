#include "merba/metrics.hpp"

#include "merba/common.hpp"

namespace merba {

std::vector<std::vector<int64_t>> confusion_matrix(const std::vector<int>& truth,
                                                   const std::vector<int>& pred,
                                                   int num_classes) {
    MERBA_CHECK(truth.size() == pred.size(),
                "truth and prediction lists differ in length");
    MERBA_CHECK(num_classes >= 1, "need at least one class");
    std::vector<std::vector<int64_t>> m(
        static_cast<size_t>(num_classes),
        std::vector<int64_t>(static_cast<size_t>(num_classes), 0));
    for (size_t i = 0; i < truth.size(); ++i) {
        MERBA_CHECK(truth[i] >= 0 && truth[i] < num_classes, "truth label ",
                    truth[i], " out of range");
        MERBA_CHECK(pred[i] >= 0 && pred[i] < num_classes, "prediction ", pred[i],
                    " out of range");
        ++m[static_cast<size_t>(truth[i])][static_cast<size_t>(pred[i])];
    }
    return m;
}

EvalReport report_from_confusion(const std::vector<std::vector<int64_t>>& m) {
    size_t k = m.size();
    MERBA_CHECK(k >= 1, "empty confusion matrix");
    for (const auto& row : m)
        MERBA_CHECK(row.size() == k, "confusion matrix must be square");
    EvalReport r;
    r.confusion = m;
    r.precision.assign(k, 0.0);
    r.recall.assign(k, 0.0);
    r.f1.assign(k, 0.0);
    int64_t total = 0, correct = 0;
    for (size_t c = 0; c < k; ++c) {
        int64_t tp = m[c][c], row = 0, col = 0;
        for (size_t j = 0; j < k; ++j) {
            row += m[c][j];
            col += m[j][c];
            total += m[c][j];
        }
        correct += tp;
        int64_t fn = row - tp, fp = col - tp;
        if (tp + fp > 0) r.precision[c] = static_cast<double>(tp) / static_cast<double>(tp + fp);
        if (tp + fn > 0) r.recall[c] = static_cast<double>(tp) / static_cast<double>(tp + fn);
        if (2 * tp + fp + fn > 0)
            r.f1[c] = 2.0 * static_cast<double>(tp) /
                      static_cast<double>(2 * tp + fp + fn);
        r.uf1 += r.f1[c];
        r.uar += r.recall[c];
    }
    r.uf1 /= static_cast<double>(k);
    r.uar /= static_cast<double>(k);
    r.acc = total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
    return r;
}

EvalReport evaluate_predictions(const std::vector<int>& truth,
                                const std::vector<int>& pred, int num_classes) {
    return report_from_confusion(confusion_matrix(truth, pred, num_classes));
}

}  // namespace merba
