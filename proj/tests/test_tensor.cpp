// Copyright (c) 2026, the saelab authors
// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include "saelab/checkpoint.hpp"
#include "saelab/optim.hpp"
#include "saelab/tensor.hpp"
#include "testutil.hpp"

using namespace saelab;
using saelab::testutil::finite_diff_check;
using saelab::testutil::rel_err;

namespace {

Tensor random_matrix(Rng& rng, size_t r, size_t c, bool rg = true) {
    return Tensor::randn({r, c}, rng, 1.0, rg);
}

}  // namespace

TEST_CASE("matmul identity and hand arithmetic") {
    Tensor eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Rng rng(7);
    Tensor m = random_matrix(rng, 3, 3, false);
    Tensor out = matmul(eye, m);
    for (size_t i = 0; i < 9; ++i) REQUIRE(out.at(i) == Catch::Approx(m.at(i)));

    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from({2, 1}, {1, 1});
    Tensor c = matmul(a, b);
    REQUIRE(c.at(0) == 3.0);
    REQUIRE(c.at(1) == 7.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 2});
    REQUIRE_THROWS_WITH(matmul(a, b),
                        Catch::Matchers::ContainsSubstring("[2x3]") &&
                            Catch::Matchers::ContainsSubstring("[4x2]"));
}

TEST_CASE("matmul gradients match finite differences") {
    Rng rng(11);
    Tensor a = random_matrix(rng, 4, 5);
    Tensor b = random_matrix(rng, 5, 3);
    auto loss = [&]() {
        // weighted sum so the scalar depends on every output entry distinctly
        Tensor prod = matmul(a, b);
        Tensor w = Tensor::from({4, 3}, [] {
            std::vector<double> v(12);
            for (size_t i = 0; i < 12; ++i) v[i] = 0.3 + 0.1 * static_cast<double>(i);
            return v;
        }());
        return sum(mul(prod, w));
    };
    REQUIRE(finite_diff_check({a, b}, loss) < 1e-4);
}

TEST_CASE("elementwise basics") {
    Tensor x = Tensor::from({3}, {-1, 0, 2});
    Tensor r = relu(x);
    REQUIRE(r.at(0) == 0.0);
    REQUIRE(r.at(1) == 0.0);
    REQUIRE(r.at(2) == 2.0);

    Tensor s = Tensor::from({1}, {3}, true);
    Tensor sq = square(s);
    backward(sq);
    REQUIRE(s.grad()[0] == Catch::Approx(6.0));

    Tensor a = Tensor::zeros({2, 2});
    Tensor b = Tensor::zeros({2, 3});
    REQUIRE_THROWS_AS(add(a, b), DimensionError);
}

TEST_CASE("elementwise gradients match finite differences") {
    Rng rng(13);
    Tensor a = Tensor::randn({8}, rng, 1.0, true);
    Tensor b = Tensor::randn({8}, rng, 1.0, true);
    auto loss = [&]() { return sum(mul(a, b)); };
    REQUIRE(finite_diff_check({a, b}, loss) < 1e-4);

    auto loss2 = [&]() { return sum(square(sub(relu(a), mul_scalar(b, 0.5)))); };
    REQUIRE(finite_diff_check({a, b}, loss2) < 1e-4);
}

TEST_CASE("randomized gradient checks across ops") {
    Rng shapes_rng(101);
    for (int trial = 0; trial < 100; ++trial) {
        Rng rng(1000 + static_cast<uint64_t>(trial));
        size_t m = static_cast<size_t>(shapes_rng.uniform_int(1, 8));
        size_t k = static_cast<size_t>(shapes_rng.uniform_int(1, 8));
        size_t n = static_cast<size_t>(shapes_rng.uniform_int(1, 8));
        Tensor a = random_matrix(rng, m, k);
        Tensor b = random_matrix(rng, k, n);
        Tensor gain = Tensor::randn({n}, rng, 0.5, true);
        Tensor bias = Tensor::randn({n}, rng, 0.5, true);
        auto loss = [&]() {
            Tensor h = layer_norm(matmul(a, b), gain, bias);
            Tensor p = row_softmax(h, true);
            return sum(square(add_rowvec(p, bias)));
        };
        REQUIRE(finite_diff_check({a, b, gain, bias}, loss) < 1e-4);
    }
}

TEST_CASE("softmax cross entropy values") {
    SECTION("uniform logits give ln V") {
        Tensor logits = Tensor::zeros({2, 4});
        Tensor loss = softmax_cross_entropy(logits, {1, 3}, {true, true});
        REQUIRE(loss.value() == Catch::Approx(std::log(4.0)).epsilon(1e-12));
    }
    SECTION("saturated logit gives ~0") {
        Tensor logits = Tensor::zeros({1, 5});
        logits.mut(2) = 1e6;
        Tensor loss = softmax_cross_entropy(logits, {2}, {true});
        REQUIRE(loss.value() == Catch::Approx(0.0).margin(1e-9));
    }
    SECTION("all-false mask is an error") {
        Tensor logits = Tensor::zeros({2, 4});
        REQUIRE_THROWS_AS(softmax_cross_entropy(logits, {0, 0}, {false, false}), ContractError);
    }
    SECTION("gradient matches finite differences") {
        Rng rng(17);
        Tensor logits = Tensor::randn({3, 5}, rng, 1.0, true);
        auto loss = [&]() { return softmax_cross_entropy(logits, {0, 4, 2}, {true, false, true}); };
        REQUIRE(finite_diff_check({logits}, loss) < 1e-4);
    }
}

TEST_CASE("backward contract") {
    SECTION("non-scalar root rejected") {
        Tensor a = Tensor::zeros({2, 2}, true);
        REQUIRE_THROWS_AS(backward(a), ContractError);
    }
    SECTION("repeated backward accumulates on leaves") {
        Tensor x = Tensor::from({1}, {2.0}, true);
        Tensor y = square(x);
        backward(y);
        backward(y);
        REQUIRE(x.grad()[0] == Catch::Approx(8.0));
    }
    SECTION("sum of independent subgraphs equals per-subgraph gradients") {
        Rng rng(23);
        Tensor a = Tensor::randn({4}, rng, 1.0, true);
        Tensor b = Tensor::randn({4}, rng, 1.0, true);
        Tensor joint = add(sum(square(a)), sum(mul_scalar(b, 3.0)));
        backward(joint);
        std::vector<double> ga = a.grad(), gb = b.grad();

        a.zero_grad();
        b.zero_grad();
        backward(sum(square(a)));
        backward(sum(mul_scalar(b, 3.0)));
        REQUIRE(a.grad() == ga);
        REQUIRE(b.grad() == gb);
    }
    SECTION("zero then re-run reproduces gradients bit-for-bit") {
        Rng rng(29);
        Tensor a = random_matrix(rng, 5, 4);
        Tensor b = random_matrix(rng, 4, 6);
        auto run = [&]() {
            a.zero_grad();
            b.zero_grad();
            Tensor loss = sum(square(row_softmax(matmul(a, b))));
            backward(loss);
            return std::make_pair(a.grad(), b.grad());
        };
        auto first = run();
        auto second = run();
        REQUIRE(first.first == second.first);
        REQUIRE(first.second == second.second);
    }
    SECTION("gradient flows through frozen weights to inputs") {
        Rng rng(31);
        Tensor w = random_matrix(rng, 3, 3, false);  // frozen
        Tensor x = random_matrix(rng, 2, 3, true);
        Tensor loss = sum(square(matmul(x, w)));
        backward(loss);
        REQUIRE(x.has_grad());
        double mag = 0.0;
        for (double g : x.grad()) mag += std::fabs(g);
        REQUIRE(mag > 0.0);
        REQUIRE_FALSE(w.has_grad());
    }
}

TEST_CASE("structural ops route gradients") {
    Rng rng(37);
    Tensor a = random_matrix(rng, 2, 3);
    Tensor b = random_matrix(rng, 4, 3);
    Tensor c = random_matrix(rng, 3, 2);
    auto loss = [&]() {
        Tensor cat = concat_rows({a, b});                 // [6x3]
        Tensor mid = slice_rows(cat, 1, 2);               // [2x3]
        Tensor side = concat_cols({mid, transpose(c)});   // [2x6]
        return sum(square(side));
    };
    REQUIRE(finite_diff_check({a, b, c}, loss) < 1e-4);

    Tensor table = random_matrix(rng, 5, 4);
    auto loss_embed = [&]() { return sum(square(embed_rows(table, {0, 3, 3, 1}))); };
    REQUIRE(finite_diff_check({table}, loss_embed) < 1e-4);
}

TEST_CASE("jump_relu is a subset-support of relu and matches at theta 0") {
    Rng rng(41);
    Tensor x = Tensor::randn({64}, rng, 1.0);
    Tensor r = relu(x);
    Tensor j0 = jump_relu(x, 0.0);
    for (size_t i = 0; i < x.numel(); ++i) REQUIRE(j0.at(i) == r.at(i));
    Tensor j = jump_relu(x, 0.7);
    for (size_t i = 0; i < x.numel(); ++i) {
        if (j.at(i) != 0.0) {
            REQUIRE(r.at(i) != 0.0);
            REQUIRE(j.at(i) == r.at(i));
        }
    }
}

TEST_CASE("optimizer updates") {
    SECTION("plain SGD step") {
        Tensor p = Tensor::from({1}, {1.0}, true);
        p.grad()[0] = 1.0;
        Optimizer opt({OptimizerKind::sgd, 0.1});
        opt.step({p});
        REQUIRE(p.at(0) == Catch::Approx(0.9));
    }
    SECTION("Adam first step moves against gradient sign") {
        Tensor p = Tensor::from({2}, {0.5, -0.5}, true);
        p.grad() = {2.0, -3.0};
        Optimizer opt({OptimizerKind::adam, 0.01});
        opt.step({p});
        REQUIRE(p.at(0) < 0.5);
        REQUIRE(p.at(1) > -0.5);
    }
    SECTION("missing grad is a contract error") {
        Tensor p = Tensor::from({1}, {1.0}, true);
        Optimizer opt({OptimizerKind::sgd, 0.1});
        REQUIRE_THROWS_AS(opt.step({p}), ContractError);
    }
    SECTION("200 SGD steps converge on quadratic") {
        Tensor x = Tensor::from({1}, {0.0}, true);
        Optimizer opt({OptimizerKind::sgd, 0.1});
        for (int i = 0; i < 200; ++i) {
            x.zero_grad();
            Tensor loss = square(add_scalar(x, -3.0));
            backward(loss);
            opt.step({x});
        }
        REQUIRE(std::fabs(x.at(0) - 3.0) < 1e-3);
    }
}

TEST_CASE("container round trip is bit exact") {
    testutil::TempDir dir("container");
    Rng rng(43);
    NamedTensorList entries;
    entries.emplace_back("weights/a", Tensor::randn({3, 7}, rng));
    entries.emplace_back("bias", Tensor::randn({7}, rng));
    entries.emplace_back("scalar", Tensor::scalar(-0.0));
    // values that stress exact float round-tripping
    entries.emplace_back("edge", Tensor::from({4}, {1e-308, -1e308, 3.141592653589793, 0.1}));

    auto path = dir.path() / "test.ckpt";
    save_container(path, entries);
    NamedTensorList loaded = load_container(path);
    REQUIRE(loaded.size() == entries.size());
    for (size_t i = 0; i < entries.size(); ++i) {
        REQUIRE(loaded[i].first == entries[i].first);
        REQUIRE(loaded[i].second.shape() == entries[i].second.shape());
        REQUIRE(loaded[i].second.vec() == entries[i].second.vec());
    }

    // re-saving the loaded set reproduces identical bytes
    auto path2 = dir.path() / "test2.ckpt";
    save_container(path2, loaded);
    REQUIRE(testutil::read_file_bytes(path) == testutil::read_file_bytes(path2));

    SECTION("bad magic rejected") {
        auto bad = dir.path() / "bad.ckpt";
        std::ofstream os(bad, std::ios::binary);
        os << "NOPE!";
        os.close();
        REQUIRE_THROWS_AS(load_container(bad), IoError);
    }
}
