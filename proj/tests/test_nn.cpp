#include <doctest.h>

#include <kinoadapt/layers.hpp>

#include "gradcheck.hpp"

#include <filesystem>
#include <random>

using namespace kinoadapt;
using namespace kinoadapt::nn;
using kinoadapt::testing::max_rel_grad_error;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, Scalar scale = 1.0) {
    std::uniform_real_distribution<Scalar> dist(-scale, scale);
    Matrix m(r, c);
    for (Eigen::Index j = 0; j < c; ++j) {
        for (Eigen::Index i = 0; i < r; ++i) m(i, j) = dist(rng);
    }
    return m;
}

}  // namespace

TEST_CASE("layer_norm: constant input collapses to beta") {
    Tape t;
    std::mt19937_64 rng(1);
    const int x = t.constant(Matrix::Constant(1, 8, 3.7));
    const int gamma = t.param(random_matrix(1, 8, rng));
    const Matrix beta_v = random_matrix(1, 8, rng);
    const int beta = t.param(beta_v);
    const int y = t.layer_norm(x, gamma, beta);
    CHECK((t.value(y) - beta_v).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("dropout: inference is the identity") {
    Tape t;
    std::mt19937_64 rng(7);
    const Matrix xv = random_matrix(4, 5, rng);
    const int x = t.constant(xv);
    const int y = t.dropout(x, 0.1, Mode::Infer, rng);
    CHECK(t.value(y) == xv);
}

TEST_CASE("attention: single token with identity projections returns the token") {
    const int d = 4;
    ParamTree p;
    for (const char* n : {"a.wq", "a.wk", "a.wv", "a.wo"}) p.add(n, Matrix::Identity(d, d));
    for (const char* n : {"a.bq", "a.bk", "a.bv", "a.bo"}) p.add(n, Matrix::Zero(1, d));
    Tape t;
    Binder b(t, p);
    std::mt19937_64 rng(3);
    const Matrix xv = random_matrix(1, d, rng);
    const int y = attention(b, "a", t.constant(xv), 1);
    CHECK((t.value(y) - xv).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("backward: constant loss yields zero gradients") {
    ParamTree p;
    std::mt19937_64 rng(5);
    p.add("w", random_matrix(2, 2, rng));
    Tape t;
    Binder b(t, p);
    b.leaf("w");
    const int loss = t.constant(Matrix::Constant(1, 1, 4.2));
    t.backward(loss);
    GradTree g;
    b.harvest(g);
    CHECK(g.at("w").cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("backward: quadratic 1x1 example") {
    // loss = 0.5 * (W x)^2 with W = 2, x = 3  =>  dL/dW = (Wx) * x = 18.
    ParamTree p;
    p.add("w", Matrix::Constant(1, 1, 2.0));
    Tape t;
    Binder b(t, p);
    const int x = t.constant(Matrix::Constant(1, 1, 3.0));
    const int y = t.matmul(b.leaf("w"), x);
    const int loss = t.scale(t.hadamard(y, y), 0.5);
    CHECK(t.value(loss)(0, 0) == doctest::Approx(18.0));
    t.backward(loss);
    GradTree g;
    b.harvest(g);
    CHECK(g.at("w")(0, 0) == doctest::Approx(18.0));
}

TEST_CASE("backward: rejects non-finite loss") {
    Tape t;
    const int bad = t.constant(Matrix::Constant(1, 1, std::nan("")));
    CHECK_THROWS(t.backward(bad));
    const int vec = t.constant(Matrix::Zero(2, 1));
    CHECK_THROWS(t.backward(vec));
}

TEST_CASE("gradcheck: linear") {
    ParamTree p;
    std::mt19937_64 rng(11);
    init_linear(p, "lin", 5, 3, rng);
    const Matrix x = random_matrix(4, 5, rng);
    const Matrix target = random_matrix(4, 3, rng);
    auto fn = [&](ParamTree& params, GradTree* g) {
        Tape t;
        Binder b(t, params);
        const int out = linear(b, "lin", t.constant(x));
        const int loss = t.mse(out, t.constant(target));
        if (g) {
            t.backward(loss);
            b.harvest(*g);
        }
        return t.value(loss)(0, 0);
    };
    CHECK(max_rel_grad_error(p, fn) < 1e-4);
}

TEST_CASE("gradcheck: layer_norm") {
    ParamTree p;
    std::mt19937_64 rng(13);
    init_layer_norm(p, "ln", 6);
    p.at("ln.gamma") = random_matrix(1, 6, rng);
    p.at("ln.beta") = random_matrix(1, 6, rng);
    p.add("w", random_matrix(6, 6, rng));
    const Matrix x = random_matrix(3, 6, rng);
    const Matrix target = random_matrix(3, 6, rng);
    auto fn = [&](ParamTree& params, GradTree* g) {
        Tape t;
        Binder b(t, params);
        const int h = t.matmul(t.constant(x), b.leaf("w"));
        const int out = layer_norm(b, "ln", h);
        const int loss = t.mse(out, t.constant(target));
        if (g) {
            t.backward(loss);
            b.harvest(*g);
        }
        return t.value(loss)(0, 0);
    };
    CHECK(max_rel_grad_error(p, fn) < 1e-4);
}

TEST_CASE("gradcheck: batch_norm in training and inference mode") {
    for (const Mode mode : {Mode::Train, Mode::Infer}) {
        ParamTree p;
        std::mt19937_64 rng(17);
        init_batch_norm(p, "bn", 4);
        p.at("bn.gamma") = random_matrix(1, 4, rng);
        p.at("bn.beta") = random_matrix(1, 4, rng);
        p.at("bn.running_mean") = random_matrix(1, 4, rng);
        p.at("bn.running_var") =
            (random_matrix(1, 4, rng).cwiseAbs() + Matrix::Constant(1, 4, 0.5)).eval();
        p.add("w", random_matrix(4, 4, rng));
        const Matrix x = random_matrix(6, 4, rng);
        const Matrix target = random_matrix(6, 4, rng);
        auto fn = [&](ParamTree& params, GradTree* g) {
            Tape t;
            Binder b(t, params);
            const int h = t.matmul(t.constant(x), b.leaf("w"));
            const int out = batch_norm(b, "bn", h, mode, /*update_running=*/false);
            const int loss = t.mse(out, t.constant(target));
            if (g) {
                t.backward(loss);
                b.harvest(*g);
            }
            return t.value(loss)(0, 0);
        };
        CHECK(max_rel_grad_error(p, fn) < 1e-4);
    }
}

TEST_CASE("gradcheck: ffn, attention, dropout, distances") {
    ParamTree p;
    std::mt19937_64 rng(19);
    init_linear(p, "ffn.l1", 4, 8, rng);
    init_linear(p, "ffn.l2", 8, 4, rng);
    init_attention(p, "attn", 4, rng);
    const Matrix x = random_matrix(3, 4, rng);
    const Matrix target = random_matrix(1, 4, rng);
    auto fn = [&](ParamTree& params, GradTree* g) {
        Tape t;
        Binder b(t, params);
        std::mt19937_64 drop_rng(123);
        int h = attention(b, "attn", t.constant(x), 2);
        h = ffn(b, "ffn", h);
        h = t.dropout(h, 0.25, Mode::Train, drop_rng);
        const int cls = t.row(h, 0);
        const int d1 = t.l2_distance(cls, t.constant(target));
        const int loss = t.add(t.mse(cls, t.constant(target)), d1);
        if (g) {
            t.backward(loss);
            b.harvest(*g);
        }
        return t.value(loss)(0, 0);
    };
    CHECK(max_rel_grad_error(p, fn) < 1e-4);
}

TEST_CASE("batch_norm: inference uses running statistics") {
    ParamTree p;
    init_batch_norm(p, "bn", 2);
    std::mt19937_64 rng(23);
    const Matrix x = random_matrix(50, 2, rng, 2.0);
    {
        Tape t;
        Binder b(t, p);
        batch_norm(b, "bn", t.constant(x), Mode::Train, /*update_running=*/true);
    }
    const Matrix rm = p.at("bn.running_mean");
    const Matrix rv = p.at("bn.running_var");
    // One update from the (0, 1) defaults with momentum 0.1.
    const Matrix mu = x.colwise().mean();
    CHECK((rm - 0.1 * mu).cwiseAbs().maxCoeff() < 1e-12);

    Tape t;
    Binder b(t, p);
    const Matrix probe = random_matrix(3, 2, rng);
    const int y = batch_norm(b, "bn", t.constant(probe), Mode::Infer);
    const Matrix expected =
        ((probe.rowwise() - rm.row(0)).array().rowwise() /
         (rv.row(0).array() + 1e-5).sqrt())
            .matrix();
    CHECK((t.value(y) - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("adam: zero gradient from fresh state leaves parameters unchanged") {
    ParamTree p;
    p.add("w", Matrix::Constant(2, 2, 1.5));
    const Matrix before = p.at("w");
    GradTree g;
    g.emplace("w", Matrix::Zero(2, 2));
    adam_step(p, g, 1e-3);
    CHECK(p.at("w") == before);
}

TEST_CASE("adam: first-step magnitude is about lr for unit gradient") {
    ParamTree p;
    p.add("w", Matrix::Constant(1, 1, 0.0));
    GradTree g;
    g.emplace("w", Matrix::Constant(1, 1, 1.0));
    adam_step(p, g, 1e-3);
    CHECK(p.at("w")(0, 0) == doctest::Approx(-1e-3).epsilon(1e-6));
}

TEST_CASE("adam: deterministic and rejects structure mismatch") {
    std::mt19937_64 rng(29);
    const Matrix w0 = random_matrix(3, 3, rng);
    ParamTree a, b;
    a.add("w", w0);
    b.add("w", w0);
    for (int i = 0; i < 5; ++i) {
        std::mt19937_64 grng(i);
        GradTree g;
        g.emplace("w", random_matrix(3, 3, grng, 0.5));
        GradTree g2 = g;
        adam_step(a, g, 1e-2);
        adam_step(b, g2, 1e-2);
    }
    CHECK(a.at("w") == b.at("w"));

    GradTree wrong;
    wrong.emplace("w", Matrix::Zero(2, 2));
    CHECK_THROWS(adam_step(a, wrong, 1e-2));
    GradTree extra;
    extra.emplace("w", Matrix::Zero(3, 3));
    extra.emplace("unknown", Matrix::Zero(1, 1));
    CHECK_THROWS(adam_step(a, extra, 1e-2));
    GradTree nonfinite;
    nonfinite.emplace("w", Matrix::Constant(3, 3, std::nan("")));
    CHECK_THROWS(adam_step(a, nonfinite, 1e-2));
}

TEST_CASE("param tree: flatten/unflatten round trip") {
    ParamTree p;
    std::mt19937_64 rng(31);
    p.add("b.x", random_matrix(2, 3, rng));
    p.add("a.y", random_matrix(1, 4, rng));
    p.add("c", random_matrix(3, 1, rng));
    const Vector flat = p.flatten();
    ParamTree q = p;
    q.at("b.x").setZero();
    q.at("c").setZero();
    q.unflatten(flat);
    for (const auto& [name, e] : p.entries) CHECK(q.at(name) == e.value);
    CHECK(flat.size() == static_cast<Eigen::Index>(p.total_size()));
}

TEST_CASE("param tree: checkpoint round trip and name validation") {
    namespace fs = std::filesystem;
    ParamTree p;
    std::mt19937_64 rng(37);
    p.add("enc.w", random_matrix(4, 4, rng));
    p.add("enc.b", random_matrix(1, 4, rng));
    p.add("bn.running_var", random_matrix(1, 4, rng).cwiseAbs(), /*trainable=*/false);

    const fs::path file = fs::temp_directory_path() / "ka_params_test.json";
    save_param_tree(p, file);
    const ParamTree q = load_param_tree(file, &p);
    for (const auto& [name, e] : p.entries) {
        CHECK(q.at(name) == e.value);
        CHECK(q.entries.at(name).trainable == e.trainable);
    }

    ParamTree smaller;
    smaller.add("enc.w", Matrix::Zero(4, 4));
    CHECK_THROWS(load_param_tree(file, &smaller));  // file has unknown names

    ParamTree bigger = p;
    bigger.add("extra", Matrix::Zero(1, 1));
    CHECK_THROWS(load_param_tree(file, &bigger));  // file misses a name
    fs::remove(file);
}

TEST_CASE("positional embedding: interleaved sin/cos") {
    const Matrix pe = positional_embedding(5, 8);
    REQUIRE(pe.rows() == 5);
    REQUIRE(pe.cols() == 8);
    for (int i = 0; i < 4; ++i) {
        CHECK(pe(0, 2 * i) == doctest::Approx(0.0));
        CHECK(pe(0, 2 * i + 1) == doctest::Approx(1.0));
    }
    CHECK(pe(2, 0) == doctest::Approx(std::sin(2.0)));
    CHECK(pe(2, 1) == doctest::Approx(std::cos(2.0)));
    const Scalar rate = std::pow(10000.0, -2.0 / 8.0);
    CHECK(pe(3, 2) == doctest::Approx(std::sin(3.0 * rate)));
}

TEST_CASE("linear: reports the offending layer on shape mismatch") {
    ParamTree p;
    std::mt19937_64 rng(41);
    init_linear(p, "lin", 5, 3, rng);
    Tape t;
    Binder b(t, p);
    CHECK_THROWS_WITH_AS(linear(b, "lin", t.constant(Matrix::Zero(2, 4))),
                         doctest::Contains("lin"), std::invalid_argument);
}
