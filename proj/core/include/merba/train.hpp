#pragma once
// Optimization loop: decoupled weight decay Adam, warmup/cosine/floor
// schedule, per-epoch CSV logging, early stopping on validation UF1, and
// eval-mode inference over a sample list.

#include <iosfwd>
#include <map>

#include "merba/metrics.hpp"
#include "merba/synth.hpp"

namespace merba {

struct TrainConfig {
    int64_t epochs = 50;
    int64_t warmup_epochs = 5;
    int64_t cooldown_epochs = 10;
    double peak_lr = 5e-4;
    double floor_frac = 0.01;  // floor = floor_frac * peak_lr
    double weight_decay = 0.05;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    int64_t batch_size = 32;
    int64_t patience = 20;
    uint64_t seed = 0;
    bool augment = false;       // horizontal flip, half the samples in expectation
    double val_fraction = 0.0;  // subject-disjoint slice carved off by the CLI
};

void validate_train_config(const TrainConfig& cfg);

// Linear warmup to the peak, cosine decay to the floor, then a constant
// floor for the last cooldown_epochs. Continuous at the warmup boundary.
double lr_at(int64_t epoch, const TrainConfig& cfg);

// Decoupled-decay Adam over a parameter registry. Buffers and parameters
// flagged no-decay (biases, norm affines, gains, decay logs) skip the decay
// term; everything else sees it.
class AdamW {
  public:
    explicit AdamW(const TrainConfig& cfg)
        : beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.eps),
          wd_(cfg.weight_decay) {}
    void step(ParamRegistry& reg, const std::map<int, Tensor>& grads, double lr);
    int64_t steps() const { return t_; }

  private:
    double beta1_, beta2_, eps_, wd_;
    int64_t t_ = 0;
    std::map<int, std::vector<double>> m_, v_;
};

struct EpochLog {
    int64_t epoch = 0;
    double lr = 0, loss_total = 0, loss_coarse = 0, loss_fine = 0, alpha = 0;
    double train_uf1 = 0, val_uf1 = 0;
};

struct TrainResult {
    std::vector<EpochLog> log;
    int64_t epochs_run = 0;
    int64_t best_epoch = -1;
    double best_val_uf1 = 0.0;
};

// Eval-mode predictions (running statistics, no dropout) over full labels.
EvalReport evaluate_model(Model& m, const std::vector<Sample>& data,
                          int64_t batch_size);

// csv, when given, receives the header and one row per epoch. Without a
// validation set the validation column mirrors the training metric. A
// non-finite loss aborts with a diagnostic naming the epoch.
TrainResult train_model(Model& m, const std::vector<Sample>& train_set,
                        const std::vector<Sample>* val_set, const TrainConfig& cfg,
                        std::ostream* csv);

}  // namespace merba
