#include <cmath>

#include "doctest.h"
#include "merba/dgcm.hpp"
#include "merba/serialize.hpp"

using namespace merba;

namespace {

LabelSpace default_space() { return build_space(default_config().labels); }

}  // namespace

TEST_CASE("label space wiring: groups, fan-out, inverses") {
    LabelSpace s = default_space();
    REQUIRE(s.full.size() == 7);
    REQUIRE(s.coarse.size() == 4);
    CHECK(s.coarse[static_cast<size_t>(s.negative)] == "negative");
    // the negative coarse class covers exactly the fine labels
    int negatives = 0;
    for (size_t i = 0; i < s.full.size(); ++i)
        if (s.full_to_coarse[i] == s.negative) {
            ++negatives;
            CHECK(s.full_to_fine[i] >= 0);
            CHECK(s.fine_to_full[static_cast<size_t>(s.full_to_fine[i])] ==
                  static_cast<int>(i));
        } else {
            CHECK(s.full_to_fine[i] == -1);
        }
    CHECK(negatives == 4);
    // non-negative coarse classes map back to their single full label
    for (size_t c = 0; c < s.coarse.size(); ++c) {
        if (static_cast<int>(c) == s.negative)
            CHECK(s.coarse_to_full[c] == -1);
        else
            CHECK(s.full_to_coarse[static_cast<size_t>(s.coarse_to_full[c])] ==
                  static_cast<int>(c));
    }
}

TEST_CASE("label space validation rejects broken wiring") {
    std::vector<std::string> full{"a", "b", "c"};
    std::vector<std::pair<std::string, std::string>> groups{
        {"a", "negative"}, {"b", "negative"}, {"c", "pos"}};
    CHECK_NOTHROW(make_label_space(full, groups, {"a", "b"}));
    // fine must cover the whole negative group
    CHECK_THROWS_AS(make_label_space(full, groups, {"a"}), ValidationError);
    // fine entries must be negative-labeled
    CHECK_THROWS_AS(make_label_space(full, groups, {"a", "c"}), ValidationError);
    // non-negative groups must be singletons
    std::vector<std::pair<std::string, std::string>> wide{
        {"a", "negative"}, {"b", "pos"}, {"c", "pos"}};
    CHECK_THROWS_AS(make_label_space(full, wide, {"a"}), ValidationError);
    // every full label needs a group
    std::vector<std::pair<std::string, std::string>> partial{
        {"a", "negative"}, {"b", "pos"}};
    CHECK_THROWS_AS(make_label_space(full, partial, {"a"}), ValidationError);
}

TEST_CASE("fine weight ramps from 0.5 to 2.0 and clamps") {
    CHECK(fine_weight(0, 100) == doctest::Approx(0.5));
    CHECK(fine_weight(25, 100) == doctest::Approx(1.0));
    CHECK(fine_weight(75, 100) == doctest::Approx(2.0));
    CHECK(fine_weight(100, 100) == doctest::Approx(2.0));
    CHECK_THROWS_AS(fine_weight(0, 0), ValidationError);
}

TEST_CASE("loss combination arithmetic") {
    CHECK(combine_losses(1.0, 2.0, 0.5) == doctest::Approx(1.0));
    CHECK(combine_losses(0.0, 4.0, 2.0) == doctest::Approx(4.0));
}

TEST_CASE("uniform logits cost ln K on the coarse head") {
    LabelSpace s = default_space();
    Tape tape;
    DgcmOutputs out;
    out.coarse = tape.leaf(Tensor::full({2, 4}, 0.0));
    out.fine = tape.leaf(Tensor::full({2, 4}, 0.0));
    // one negative (anger) and one positive (happiness) sample
    std::vector<int> y{label_index(s, "anger"), label_index(s, "happiness")};
    DgcmLoss loss = dgcm_loss(out, y, s, 0, 100, true, tape);
    CHECK(loss.coarse == doctest::Approx(std::log(4.0)));
    // fine CE averages over the single negative sample
    CHECK(loss.fine == doctest::Approx(std::log(4.0)));
    CHECK(loss.alpha == doctest::Approx(0.5));
    CHECK(loss.negatives == 1);
    double want = 0.5 * (std::log(4.0) + 0.5 * std::log(4.0));
    CHECK(loss.total.item() == doctest::Approx(want));
}

TEST_CASE("non-negative samples contribute exactly zero fine gradient") {
    DtypeScope scope(Dtype::F64);
    LabelSpace s = default_space();
    Tape tape;
    Rng rng(13);
    Tensor coarse_leaf = tape.leaf(Tensor::uniform({2, 4}, rng, -1.0, 1.0));
    Tensor fine_leaf = tape.leaf(Tensor::uniform({2, 4}, rng, -1.0, 1.0));
    DgcmOutputs out{coarse_leaf, fine_leaf};
    std::vector<int> y{label_index(s, "happiness"), label_index(s, "fear")};
    DgcmLoss loss = dgcm_loss(out, y, s, 10, 100, true, tape);
    std::vector<Tensor> grads = backward(tape, loss.total.node);
    const Tensor& gf = grads[static_cast<size_t>(fine_leaf.node)];
    REQUIRE(gf.defined());
    // row 0 (happiness) exactly zero; row 1 (fear) carries signal
    double row1 = 0.0;
    for (int64_t j = 0; j < 4; ++j) {
        CHECK(gf.at(j) == 0.0);
        row1 += std::abs(gf.at(4 + j));
    }
    CHECK(row1 > 1e-8);
}

TEST_CASE("batch with no negatives drops the fine term") {
    LabelSpace s = default_space();
    Tape tape;
    Rng rng(14);
    DgcmOutputs out;
    out.coarse = tape.leaf(Tensor::uniform({2, 4}, rng, -1.0, 1.0));
    out.fine = tape.leaf(Tensor::uniform({2, 4}, rng, -1.0, 1.0));
    std::vector<int> y{label_index(s, "happiness"), label_index(s, "surprise")};
    DgcmLoss loss = dgcm_loss(out, y, s, 0, 100, true, tape);
    CHECK(loss.negatives == 0);
    CHECK(loss.fine == 0.0);
    CHECK(loss.total.item() == doctest::Approx(0.5 * loss.coarse));
}

TEST_CASE("prediction defers to the fine head only on a negative verdict") {
    LabelSpace s = default_space();
    Tape tape;
    // sample 0: coarse says negative, fine says sadness
    // sample 1: coarse says surprise (fine logits must be ignored)
    std::vector<double> coarse(2 * 4, 0.0);
    coarse[static_cast<size_t>(s.negative)] = 3.0;
    int surprise_c = -1;
    for (size_t c = 0; c < s.coarse.size(); ++c)
        if (s.coarse[c] == "surprise") surprise_c = static_cast<int>(c);
    coarse[4 + static_cast<size_t>(surprise_c)] = 2.0;
    std::vector<double> fine(2 * 4, 0.0);
    int sad_fine = s.full_to_fine[static_cast<size_t>(label_index(s, "sadness"))];
    fine[static_cast<size_t>(sad_fine)] = 5.0;
    fine[4] = 9.0;  // loud but irrelevant: sample 1 is not negative
    DgcmOutputs out{tape.leaf(Tensor({2, 4}, std::move(coarse))),
                    tape.leaf(Tensor({2, 4}, std::move(fine)))};
    std::vector<int> pred = dgcm_predict(out, s);
    CHECK(pred[0] == label_index(s, "sadness"));
    CHECK(pred[1] == label_index(s, "surprise"));
}

TEST_CASE("argmax ties break toward the lower index") {
    LabelSpace s = default_space();
    Tape tape;
    DgcmOutputs out;
    out.coarse = tape.leaf(Tensor::full({1, 4}, 0.0));
    out.fine = tape.leaf(Tensor::full({1, 4}, 0.0));
    std::vector<int> pred = dgcm_predict(out, s);
    // coarse tie -> class 0; with the default ordering that is "negative",
    // whose fine tie -> fine label 0
    CHECK(pred[0] == s.fine_to_full[0]);
    Tensor single = tape.leaf(Tensor::full({1, 7}, 0.0));
    CHECK(single_head_predict(single)[0] == 0);
}

TEST_CASE("single head predicts by plain argmax") {
    Tape tape;
    Tensor logits = tape.leaf(Tensor({2, 3}, {0.1, 0.9, 0.2, 2.0, -1.0, 0.5}));
    std::vector<int> pred = single_head_predict(logits);
    CHECK(pred[0] == 1);
    CHECK(pred[1] == 0);
}

TEST_CASE("head layers project the pooled feature") {
    Rng rng(15);
    LabelSpace s = default_space();
    HeadParams dual = make_head(16, s, true, rng);
    HeadParams single = make_head(16, s, false, rng);
    Tape tape;
    Binder bind(tape, nullptr);
    Tensor f = tape.leaf(Tensor::uniform({3, 16}, rng, -1.0, 1.0));
    DgcmOutputs a = head_forward(f, dual, bind);
    CHECK(a.coarse.shape() == Shape{3, 4});
    CHECK(a.fine.shape() == Shape{3, 4});
    DgcmOutputs b = head_forward(f, single, bind);
    CHECK(b.coarse.shape() == Shape{3, 7});
    CHECK_FALSE(b.fine.defined());
}
