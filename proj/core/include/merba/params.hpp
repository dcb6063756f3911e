#pragma once
// Name -> tensor registry shared by the optimizer, checkpoints, and the
// parameter-count cross-check. Entries point into the owning parameter
// structs, so owners must outlive the registry and never move after
// registering.

#include <map>
#include <string>
#include <vector>

#include "merba/tape.hpp"
#include "merba/tensor.hpp"

namespace merba {

struct ParamRegistry {
    struct Entry {
        std::string name;
        Tensor* tensor = nullptr;
        bool trainable = true;  // false for running statistics and similar buffers
        bool decay = true;      // false for biases, norm affine terms, gains
    };
    std::vector<Entry> entries;
    std::map<std::string, int> by_name;
    std::map<const Tensor*, int> by_ptr;

    void add(const std::string& name, Tensor* t, bool trainable, bool decay) {
        MERBA_CHECK(by_name.find(name) == by_name.end(), "duplicate parameter name ",
                    name);
        MERBA_CHECK(t->defined(), "parameter ", name, " registered before allocation");
        int id = static_cast<int>(entries.size());
        by_name[name] = id;
        by_ptr[t] = id;
        entries.push_back({name, t, trainable, decay});
    }

    Tensor* find(const std::string& name) {
        auto it = by_name.find(name);
        return it == by_name.end() ? nullptr
                                   : entries[static_cast<size_t>(it->second)].tensor;
    }

    int id_of(const Tensor* t) const {
        auto it = by_ptr.find(t);
        return it == by_ptr.end() ? -1 : it->second;
    }

    int64_t trainable_count() const {
        int64_t n = 0;
        for (const auto& e : entries)
            if (e.trainable) n += e.tensor->size();
        return n;
    }
};

// Binds parameter tensors onto a tape at forward time. With a registry the
// leaf carries the parameter id, so repeated bindings of a shared tensor
// accumulate into one gradient; without one (unit tests) the id is absent.
class Binder {
  public:
    explicit Binder(Tape& tape, const ParamRegistry* reg = nullptr)
        : tape_(&tape), reg_(reg) {}

    Tensor operator()(const Tensor& p) const {
        return tape_->leaf(p, reg_ ? reg_->id_of(&p) : -1);
    }

    Tape& tape() const { return *tape_; }

  private:
    Tape* tape_;
    const ParamRegistry* reg_;
};

}  // namespace merba
