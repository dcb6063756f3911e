#include "merba/train.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

namespace merba {

namespace {

constexpr double kPi = 3.14159265358979323846;

std::vector<int64_t> cross_entropy_targets(const std::vector<int>& labels) {
    return {labels.begin(), labels.end()};
}

}  // namespace

void validate_train_config(const TrainConfig& cfg) {
    MERBA_CHECK(cfg.epochs >= 1, "epochs must be positive");
    MERBA_CHECK(cfg.warmup_epochs >= 0 && cfg.cooldown_epochs >= 0,
                "schedule phases cannot be negative");
    MERBA_CHECK(cfg.warmup_epochs + cfg.cooldown_epochs <= cfg.epochs,
                "warmup (", cfg.warmup_epochs, ") plus cooldown (",
                cfg.cooldown_epochs, ") exceeds the epoch budget (", cfg.epochs, ")");
    MERBA_CHECK(cfg.peak_lr >= 0, "peak_lr cannot be negative");
    MERBA_CHECK(cfg.floor_frac >= 0 && cfg.floor_frac <= 1.0,
                "floor_frac must be in [0,1]");
    MERBA_CHECK(cfg.weight_decay >= 0, "weight_decay cannot be negative");
    MERBA_CHECK(cfg.batch_size >= 1, "batch_size must be positive");
    MERBA_CHECK(cfg.patience >= 1, "patience must be positive");
    MERBA_CHECK(cfg.beta1 >= 0 && cfg.beta1 < 1 && cfg.beta2 >= 0 && cfg.beta2 < 1,
                "betas must be in [0,1)");
    MERBA_CHECK(cfg.eps > 0, "eps must be positive");
    MERBA_CHECK(cfg.val_fraction >= 0 && cfg.val_fraction < 1,
                "val_fraction must be in [0,1)");
}

double lr_at(int64_t epoch, const TrainConfig& cfg) {
    validate_train_config(cfg);
    MERBA_CHECK(epoch >= 0 && epoch < cfg.epochs, "epoch ", epoch,
                " outside the schedule");
    double floor = cfg.floor_frac * cfg.peak_lr;
    if (epoch < cfg.warmup_epochs)
        return cfg.peak_lr * static_cast<double>(epoch + 1) /
               static_cast<double>(cfg.warmup_epochs);
    int64_t cosine_span = cfg.epochs - cfg.warmup_epochs - cfg.cooldown_epochs;
    int64_t into = epoch - cfg.warmup_epochs;
    if (into >= cosine_span) return floor;
    double t = static_cast<double>(into) / static_cast<double>(cosine_span);
    return floor + (cfg.peak_lr - floor) * 0.5 * (1.0 + std::cos(kPi * t));
}

void AdamW::step(ParamRegistry& reg, const std::map<int, Tensor>& grads, double lr) {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t idx = 0; idx < reg.entries.size(); ++idx) {
        auto& entry = reg.entries[idx];
        if (!entry.trainable) continue;
        auto git = grads.find(static_cast<int>(idx));
        if (git == grads.end()) continue;  // parameter off the loss path this step
        const Tensor& g = git->second;
        Tensor& p = *entry.tensor;
        MERBA_CHECK(shape_eq(g.shape(), p.shape()), "gradient shape mismatch for ",
                    entry.name);
        size_t n = static_cast<size_t>(p.size());
        auto& m = m_[static_cast<int>(idx)];
        auto& v = v_[static_cast<int>(idx)];
        if (m.empty()) {
            m.assign(n, 0.0);
            v.assign(n, 0.0);
        }
        const double* gp = g.data();
        const double* pp = p.data();
        double wd = entry.decay ? wd_ : 0.0;
        TensorBuilder nb(p.shape());
        for (size_t i = 0; i < n; ++i) {
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * gp[i];
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * gp[i] * gp[i];
            double mhat = m[i] / bc1;
            double vhat = v[i] / bc2;
            nb.data()[i] =
                pp[i] - lr * (mhat / (std::sqrt(vhat) + eps_) + wd * pp[i]);
        }
        p = nb.finalize();
    }
}

EvalReport evaluate_model(Model& m, const std::vector<Sample>& data,
                          int64_t batch_size) {
    MERBA_CHECK(!data.empty(), "nothing to evaluate");
    MERBA_CHECK(batch_size >= 1, "batch_size must be positive");
    std::vector<int> truth, pred;
    truth.reserve(data.size());
    pred.reserve(data.size());
    for (size_t lo = 0; lo < data.size(); lo += static_cast<size_t>(batch_size)) {
        size_t hi = std::min(data.size(), lo + static_cast<size_t>(batch_size));
        std::vector<FlowTriplet> xs;
        for (size_t i = lo; i < hi; ++i) {
            xs.push_back(data[i].x);
            truth.push_back(data[i].label);
        }
        Tape tape(false, 0, false);  // eval mode, nothing recorded
        ForwardOut out = model_forward(m, tape.leaf(stack_inputs(xs)), tape);
        std::vector<int> p = m.head.dual ? dgcm_predict(out.logits, m.space)
                                         : single_head_predict(out.logits.coarse);
        pred.insert(pred.end(), p.begin(), p.end());
    }
    return evaluate_predictions(truth, pred,
                                static_cast<int>(m.space.full.size()));
}

TrainResult train_model(Model& m, const std::vector<Sample>& train_set,
                        const std::vector<Sample>* val_set, const TrainConfig& cfg,
                        std::ostream* csv) {
    validate_train_config(cfg);
    MERBA_CHECK(!train_set.empty(), "training set is empty");
    for (const auto& s : train_set)
        MERBA_CHECK(s.label >= 0 &&
                        s.label < static_cast<int>(m.space.full.size()),
                    "sample label ", s.label, " outside the label space");
    AdamW opt(cfg);
    TrainResult result;
    if (csv)
        *csv << "epoch,lr,loss_total,loss_coarse,loss_fine,alpha,train_uf1,val_uf1\n";

    std::vector<size_t> order(train_set.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        double lr = lr_at(epoch, cfg);
        double alpha = fine_weight(epoch, cfg.epochs);
        Rng shuffle_rng(cfg.seed * 0x9e3779b97f4a7c15ULL + 0x2545f4914f6cdd1dULL +
                        static_cast<uint64_t>(epoch));
        Rng aug_rng(cfg.seed + 0x6a09e667f3bcc909ULL +
                    static_cast<uint64_t>(epoch) * 0x1000003ULL);
        shuffle_rng.shuffle(order);

        double loss_sum = 0, coarse_sum = 0, fine_sum = 0;
        int64_t seen = 0, fine_seen = 0;
        std::vector<int> epoch_truth, epoch_pred;

        int64_t batch_index = 0;
        for (size_t lo = 0; lo < order.size();
             lo += static_cast<size_t>(cfg.batch_size), ++batch_index) {
            size_t hi = std::min(order.size(), lo + static_cast<size_t>(cfg.batch_size));
            std::vector<FlowTriplet> xs;
            std::vector<int> ys;
            for (size_t i = lo; i < hi; ++i) {
                const Sample& s = train_set[order[i]];
                xs.push_back(cfg.augment
                                 ? flip_augment(s.x, aug_rng, m.cfg.negate_u_on_flip)
                                 : s.x);
                ys.push_back(s.label);
            }
            uint64_t tape_seed = cfg.seed * 0x100000001b3ULL +
                                 static_cast<uint64_t>(epoch) * 0x10001ULL +
                                 static_cast<uint64_t>(batch_index);
            Tape tape(true, tape_seed, true);
            Tensor loss_node;
            double batch_total = 0, batch_coarse = 0, batch_fine = 0;
            int64_t batch_negatives = 0;
            try {
                ForwardOut out = model_forward(m, tape.leaf(stack_inputs(xs)), tape);
                if (m.head.dual) {
                    DgcmLoss loss =
                        dgcm_loss(out.logits, ys, m.space, epoch, cfg.epochs,
                                  m.cfg.fine_mean_over_negatives, tape);
                    loss_node = loss.total;
                    batch_total = loss.total.item();
                    batch_coarse = loss.coarse;
                    batch_fine = loss.fine;
                    batch_negatives = loss.negatives;
                } else {
                    loss_node = cross_entropy_mean(out.logits.coarse,
                                                   cross_entropy_targets(ys), tape);
                    batch_total = loss_node.item();
                    batch_coarse = batch_total;
                }
                MERBA_NUMERIC_CHECK(std::isfinite(batch_total),
                                    "training loss is not finite");
                std::vector<int> p = m.head.dual
                                         ? dgcm_predict(out.logits, m.space)
                                         : single_head_predict(out.logits.coarse);
                epoch_pred.insert(epoch_pred.end(), p.begin(), p.end());
                epoch_truth.insert(epoch_truth.end(), ys.begin(), ys.end());
                std::vector<Tensor> grads = backward(tape, loss_node.node);
                opt.step(m.registry, collect_param_grads(tape, grads), lr);
            } catch (const NumericalError& e) {
                throw NumericalError("training diverged at epoch " +
                                     std::to_string(epoch) + ": " + e.what());
            }
            int64_t bs = static_cast<int64_t>(hi - lo);
            loss_sum += batch_total * static_cast<double>(bs);
            coarse_sum += batch_coarse * static_cast<double>(bs);
            fine_sum += batch_fine * static_cast<double>(batch_negatives);
            fine_seen += batch_negatives;
            seen += bs;
        }

        EpochLog log;
        log.epoch = epoch;
        log.lr = lr;
        log.alpha = alpha;
        log.loss_total = loss_sum / static_cast<double>(seen);
        log.loss_coarse = coarse_sum / static_cast<double>(seen);
        log.loss_fine = fine_seen > 0 ? fine_sum / static_cast<double>(fine_seen) : 0.0;
        log.train_uf1 =
            evaluate_predictions(epoch_truth, epoch_pred,
                                 static_cast<int>(m.space.full.size()))
                .uf1;
        log.val_uf1 = val_set ? evaluate_model(m, *val_set, cfg.batch_size).uf1
                              : log.train_uf1;
        result.log.push_back(log);
        result.epochs_run = epoch + 1;
        if (csv) {
            *csv << log.epoch << ',' << log.lr << ',' << log.loss_total << ','
                 << log.loss_coarse << ',' << log.loss_fine << ',' << log.alpha
                 << ',' << log.train_uf1 << ',' << log.val_uf1 << '\n';
            csv->flush();
        }
        if (result.best_epoch < 0 || log.val_uf1 > result.best_val_uf1) {
            result.best_epoch = epoch;
            result.best_val_uf1 = log.val_uf1;
        } else if (epoch - result.best_epoch >= cfg.patience) {
            break;
        }
    }
    return result;
}

}  // namespace merba
