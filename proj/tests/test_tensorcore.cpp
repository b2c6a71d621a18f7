#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "adafuse/graph.hpp"
#include "adafuse/rng.hpp"

using namespace adafuse;

namespace {

Tensor random_tensor(Rng& rng, std::vector<int> shape, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = rng.normal() * scale;
    return t;
}

// Scalar probe of one primitive: a fixed random linear functional of the op
// output, so every output entry gets a distinct gradient contribution.
int probe_loss(Graph& g, int node, Rng& rng) {
    Tensor w(g.shape(node));
    for (double& v : w.data) v = rng.normal();
    return g.sum_all(g.mul(node, g.constant(std::move(w))));
}

}  // namespace

TEST_CASE("analytic squares and constants") {
    // y = x^2 via mul, x = 3 -> y = 9, dy/dx = 6
    ParamStore store;
    store.create("x", Tensor::scalar(3.0));
    Graph g(store, Mode::eval);
    const int x = g.param("x");
    const int y = g.sum_all(g.mul(x, x));
    g.run();
    CHECK(g.value(y).data[0] == doctest::Approx(9.0).epsilon(1e-14));
    const auto grads = g.backward(y);
    CHECK(grads.at("x").data[0] == doctest::Approx(6.0).epsilon(1e-14));

    // identity: y = x returns the same tensor
    ParamStore store2;
    Graph g2(store2, Mode::eval);
    const int inp = g2.input("v", {2, 3});
    Tensor t({2, 3});
    for (size_t i = 0; i < t.data.size(); ++i) t.data[i] = static_cast<double>(i) - 2.5;
    g2.bind("v", t);
    g2.run();
    CHECK(g2.value(inp).data == t.data);

    // constant loss -> all gradients zero
    ParamStore store3;
    store3.create("p", Tensor({4}, 1.5));
    Graph g3(store3, Mode::eval);
    g3.param("p");
    const int c = g3.constant(Tensor::scalar(7.0));
    g3.run();
    const auto zero_grads = g3.backward(c);
    for (const double v : zero_grads.at("p").data) CHECK(v == 0.0);
}

TEST_CASE("softmax gradient matches the closed form at the origin") {
    // y = softmax(x) . e1 at x = (0,0,0) -> grad (2/9, -1/9, -1/9)
    ParamStore store;
    store.create("x", Tensor({1, 3}, 0.0));
    Graph g(store, Mode::eval);
    const int sm = g.softmax_rows(g.param("x"));
    const int y = g.sum_all(g.mul(sm, g.constant(Tensor::row_major({1, 3}, {1, 0, 0}))));
    g.run();
    const auto grads = g.backward(y);
    CHECK(grads.at("x").data[0] == doctest::Approx(2.0 / 9.0).epsilon(1e-12));
    CHECK(grads.at("x").data[1] == doctest::Approx(-1.0 / 9.0).epsilon(1e-12));
    CHECK(grads.at("x").data[2] == doctest::Approx(-1.0 / 9.0).epsilon(1e-12));
    // and finite differences agree
    const auto report = g.grad_check(y, 1e-5, 1e-6);
    CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("softmax rows sum to one within 1e-12") {
    Rng rng(11);
    ParamStore store;
    store.create("x", random_tensor(rng, {5, 7}, 3.0));
    Graph g(store, Mode::eval);
    const int sm = g.softmax_rows(g.param("x"));
    g.run();
    const Tensor& v = g.value(sm);
    for (int i = 0; i < 5; ++i) {
        double sum = 0.0;
        for (int j = 0; j < 7; ++j) sum += v.at(i, j);
        CHECK(std::abs(sum - 1.0) < 1e-12);
    }
}

TEST_CASE("determinism: same seed gives bitwise-identical outputs") {
    auto run_once = [] {
        Rng rng(42);
        ParamStore store;
        store.create("W1", random_tensor(rng, {8, 8}, 0.3));
        store.create("b1", random_tensor(rng, {8}, 0.1));
        store.create("W2", random_tensor(rng, {8, 4}, 0.3));
        Graph g(store, Mode::train, 99);
        const int x = g.constant(random_tensor(rng, {6, 8}));
        const int h1 = g.relu(g.add_bias(g.matmul(x, g.param("W1")), g.param("b1")));
        const int h2 = g.dropout(h1, 0.4);
        const int out = g.matmul(h2, g.param("W2"));
        g.run();
        return g.value(out).data;
    };
    CHECK(run_once() == run_once());
}

TEST_CASE("each primitive passes grad_check at 10 random points") {
    const double tol = 1e-4;
    for (uint64_t seed = 1; seed <= 10; ++seed) {
        Rng rng(seed);
        ParamStore store;
        store.create("A", random_tensor(rng, {4, 5}));
        store.create("B", random_tensor(rng, {4, 5}));
        store.create("M", random_tensor(rng, {5, 3}));
        store.create("bias", random_tensor(rng, {5}));
        store.create("gamma", random_tensor(rng, {5}, 0.2));
        store.create("beta", random_tensor(rng, {5}, 0.2));
        store.create("bn.gamma", random_tensor(rng, {5}, 0.2));
        store.create("bn.beta", random_tensor(rng, {5}, 0.2));
        store.create("bn.running_mean", Tensor({5}, 0.0), false);
        store.create("bn.running_var", Tensor({5}, 1.0), false);
        // shift gammas around 1 so normalization layers are non-degenerate
        for (double& v : store.value("gamma").data) v += 1.0;
        for (double& v : store.value("bn.gamma").data) v += 1.0;

        Tensor row_mask({4}, 1.0);
        row_mask.data[2] = 0.0;
        Tensor col_mask({5}, 1.0);
        col_mask.data[1] = 0.0;

        auto with_graph = [&](auto&& build, Mode mode = Mode::eval) {
            Graph g(store, mode, seed * 77);
            const int node = build(g);
            Rng probe_rng(seed * 1000 + static_cast<uint64_t>(node));
            const int loss = probe_loss(g, node, probe_rng);
            const auto report = g.grad_check(loss, 1e-5, tol);
            CAPTURE(report.worst_param);
            CHECK(report.max_rel_err < tol);
        };

        with_graph([&](Graph& g) { return g.matmul(g.param("A"), g.param("M")); });
        with_graph([&](Graph& g) { return g.transpose(g.param("A")); });
        with_graph([&](Graph& g) { return g.add(g.param("A"), g.param("B")); });
        with_graph([&](Graph& g) { return g.sub(g.param("A"), g.param("B")); });
        with_graph([&](Graph& g) { return g.mul(g.param("A"), g.param("B")); });
        with_graph([&](Graph& g) { return g.add_bias(g.param("A"), g.param("bias")); });
        with_graph([&](Graph& g) { return g.affine(g.param("A"), 1.7, -0.3); });
        with_graph([&](Graph& g) { return g.relu(g.param("A")); });
        with_graph([&](Graph& g) { return g.sigmoid(g.param("A")); });
        with_graph([&](Graph& g) { return g.exp(g.scale(g.param("A"), 0.5)); });
        with_graph([&](Graph& g) { return g.log(g.affine(g.sigmoid(g.param("A")), 1.0, 0.5)); });
        with_graph([&](Graph& g) { return g.clamp(g.param("A"), -0.4, 0.4); });
        with_graph([&](Graph& g) { return g.softmax_rows(g.param("A")); });
        with_graph([&](Graph& g) { return g.softmax_rows(g.param("A"), col_mask); });
        with_graph([&](Graph& g) {
            return g.layer_norm(g.param("A"), g.param("gamma"), g.param("beta"));
        });
        with_graph(
            [&](Graph& g) {
                return g.batch_norm(g.param("A"), g.param("bn.gamma"), g.param("bn.beta"),
                                    "bn.running_mean", "bn.running_var");
            },
            Mode::train);
        with_graph(
            [&](Graph& g) {
                return g.batch_norm(g.param("A"), g.param("bn.gamma"), g.param("bn.beta"),
                                    "bn.running_mean", "bn.running_var", 0.1, 1e-5, row_mask);
            },
            Mode::train);
        with_graph(
            [&](Graph& g) {
                return g.batch_norm(g.param("A"), g.param("bn.gamma"), g.param("bn.beta"),
                                    "bn.running_mean", "bn.running_var");
            },
            Mode::eval);
        with_graph([&](Graph& g) { return g.dropout(g.param("A"), 0.4); }, Mode::train);
        with_graph([&](Graph& g) { return g.max_rows(g.param("A")); });
        with_graph([&](Graph& g) { return g.max_rows(g.param("A"), row_mask); });
        with_graph([&](Graph& g) { return g.mean_rows(g.param("A")); });
        with_graph([&](Graph& g) { return g.mean_rows(g.param("A"), row_mask); });
        with_graph([&](Graph& g) { return g.concat_rows({g.param("A"), g.param("B")}); });
        with_graph([&](Graph& g) { return g.concat_cols({g.param("A"), g.param("B")}); });
        with_graph([&](Graph& g) { return g.slice_rows(g.param("A"), 1, 3); });
        with_graph([&](Graph& g) { return g.slice_cols(g.param("A"), 1, 4); });
        with_graph([&](Graph& g) { return g.reshape(g.param("A"), {2, 10}); });
        with_graph([&](Graph& g) { return g.sum_all(g.param("A")); });
        with_graph([&](Graph& g) { return g.mean_all(g.param("A")); });
        with_graph([&](Graph& g) { return g.sumsq(g.param("A")); });
        with_graph([&](Graph& g) { return g.frobenius_norm(g.param("A")); });
        with_graph([&](Graph& g) { return g.cosine_rows(g.param("A"), g.param("B")); });
    }
}

TEST_CASE("quadratic loss grad_check is tight") {
    Rng rng(3);
    ParamStore store;
    store.create("w", random_tensor(rng, {6, 1}));
    Graph g(store, Mode::eval);
    const int x = g.constant(random_tensor(rng, {10, 6}));
    const int pred = g.matmul(x, g.param("w"));
    const int target = g.constant(random_tensor(rng, {10, 1}));
    const int diff = g.sub(pred, target);
    const int loss = g.mean_all(g.mul(diff, diff));
    const auto report = g.grad_check(loss, 1e-4, 1e-6);
    CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("corrupted gradient fails grad_check and names the parameter") {
    Rng rng(5);
    ParamStore store;
    store.create("w", random_tensor(rng, {4, 4}));
    store.create("u", random_tensor(rng, {4, 4}));
    Graph g(store, Mode::eval);
    const int out = g.matmul(g.param("w"), g.param("u"));
    Rng probe(17);
    const int loss = probe_loss(g, out, probe);
    g.corrupt_gradient("u", 1.1);
    const auto report = g.grad_check(loss, 1e-5, 1e-4);
    CHECK(report.max_rel_err > 1e-4);
    CHECK(report.worst_param == "u");
}

TEST_CASE("batch-norm in eval mode is a per-column affine map") {
    ParamStore store;
    Rng rng(9);
    store.create("g", random_tensor(rng, {3}, 0.5));
    store.create("b", random_tensor(rng, {3}, 0.5));
    Tensor mean({3});
    Tensor var({3});
    for (int j = 0; j < 3; ++j) {
        mean.data[j] = rng.normal();
        var.data[j] = 1.0 + rng.uniform();
    }
    store.create("rm", mean, false);
    store.create("rv", var, false);

    auto eval_bn = [&](const Tensor& x) {
        Graph g(store, Mode::eval);
        const int out = g.batch_norm(g.constant(x), g.param("g"), g.param("b"), "rm", "rv");
        g.run();
        return g.value(out);
    };
    // no batch dependence: perturbing one row leaves the others unchanged
    Tensor x1 = random_tensor(rng, {4, 3});
    Tensor x2 = x1;
    x2.at(3, 0) += 10.0;
    const Tensor y1 = eval_bn(x1);
    const Tensor y2 = eval_bn(x2);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) CHECK(y1.at(i, j) == y2.at(i, j));
    // and matches the explicit affine form
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 3; ++j) {
            const double expect = store.value("g").data[j] * (x1.at(i, j) - mean.data[j]) /
                                      std::sqrt(var.data[j] + 1e-5) +
                                  store.value("b").data[j];
            CHECK(y1.at(i, j) == doctest::Approx(expect).epsilon(1e-12));
        }
}

TEST_CASE("masked max never selects a masked row") {
    ParamStore store;
    Graph g(store, Mode::eval);
    const int x = g.constant(Tensor::row_major({3, 2}, {1, 5, 100, 0, 2, 4}));
    Tensor mask({3}, 1.0);
    mask.data[1] = 0.0;  // hide the row holding the global max
    const int pooled = g.max_rows(x, mask);
    g.run();
    CHECK(g.value(pooled).data[0] == 2.0);
    CHECK(g.value(pooled).data[1] == 5.0);

    // unmasked case: [[1,5,3],[2,0,4]] pooled over time -> [5,4]
    Graph g2(store, Mode::eval);
    const int x2 = g2.constant(Tensor::row_major({2, 3}, {1, 5, 3, 2, 0, 4}));
    const int pooled2 = g2.max_rows(g2.transpose(x2));
    g2.run();
    CHECK(g2.value(pooled2).data[0] == 5.0);
    CHECK(g2.value(pooled2).data[1] == 4.0);

    // an all-masked input is an input error
    Graph g3(store, Mode::eval);
    const int x3 = g3.constant(Tensor({2, 2}, 1.0));
    CHECK_THROWS_AS(g3.max_rows(x3, Tensor({2}, 0.0)), GraphError);
}

TEST_CASE("shape mismatches raise errors naming the node") {
    ParamStore store;
    Graph g(store, Mode::eval);
    const int a = g.constant(Tensor({2, 3}, 1.0));
    const int b = g.constant(Tensor({4, 3}, 1.0));
    CHECK_THROWS_WITH_AS(g.matmul(a, b), doctest::Contains("matmul"), GraphError);
    CHECK_THROWS_AS(g.add(a, b), GraphError);

    Graph g2(store, Mode::eval);
    g2.input("x", {2, 2});
    CHECK_THROWS_AS(g2.bind("x", Tensor({3, 2}, 0.0)), GraphError);
    CHECK_THROWS_AS(g2.bind("y", Tensor({2, 2}, 0.0)), GraphError);

    // non-scalar loss rejected
    Graph g3(store, Mode::eval);
    const int m = g3.constant(Tensor({2, 2}, 1.0));
    g3.run();
    CHECK_THROWS_AS(g3.backward(m), GraphError);
}

TEST_CASE("unused parameters get zero gradients") {
    ParamStore store;
    store.create("used", Tensor::scalar(2.0));
    store.create("unused", Tensor({3}, 1.0));
    Graph g(store, Mode::eval);
    const int u = g.param("used");
    g.param("unused");
    const int loss = g.sum_all(g.mul(u, u));
    g.run();
    const auto grads = g.backward(loss);
    CHECK(grads.at("used").data[0] == doctest::Approx(4.0));
    REQUIRE(grads.count("unused") == 1);
    for (const double v : grads.at("unused").data) CHECK(v == 0.0);
}

TEST_CASE("cosine convention: zero vectors give similarity 0 with a warning") {
    int warnings = 0;
    auto old = set_warn_handler([&](const std::string&) { ++warnings; });
    ParamStore store;
    Graph g(store, Mode::eval);
    const int a = g.constant(Tensor({1, 4}, 0.0));
    const int b = g.constant(Tensor({1, 4}, 1.0));
    const int cos = g.cosine_rows(a, b);
    g.run();
    CHECK(g.value(cos).data[0] == 0.0);
    CHECK(warnings >= 1);
    set_warn_handler(old);
}

TEST_CASE("param store fingerprints track content") {
    ParamStore store;
    store.create("a.x", Tensor({2}, 1.0));
    store.create("b.y", Tensor({2}, 2.0));
    const uint64_t before = store.fingerprint();
    const uint64_t before_a = store.fingerprint("a.");
    store.value("b.y").data[0] = 3.0;
    CHECK(store.fingerprint() != before);
    CHECK(store.fingerprint("a.") == before_a);
}
