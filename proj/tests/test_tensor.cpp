#include <doctest.h>

#include <cmath>

#include "support/gradcheck.hpp"
#include "vtok/tensor.hpp"

using vtok::Rng;
using vtok::Shape;
using vtok::TapeT;
using vtok::TensorT;
namespace ops = vtok::ops;

using T64 = TensorT<double>;
using Tape64 = TapeT<double>;

namespace {

T64 rand_input(Shape shape, uint64_t seed) {
    Rng rng(seed);
    return T64::uniform(std::move(shape), rng, -2.0, 2.0);
}

}  // namespace

TEST_CASE("conv3d: 1x1x1 identity kernel is the identity map") {
    auto x = rand_input({3, 2, 4, 4}, 1);
    auto w = T64::zeros({2, 2, 1, 1, 1});
    w.data()[0 * 2 + 0] = 1.0;  // [co=0][ci=0]
    w.data()[1 * 2 + 1] = 1.0;  // [co=1][ci=1]
    auto y = ops::conv3d(x, w, T64{}, {1, 1, 1}, ops::PadTime::kSymmetric);
    REQUIRE(y.shape() == x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i]));
}

TEST_CASE("conv3d: causal padding keeps frame 0 independent of the future") {
    auto x = rand_input({5, 1, 4, 4}, 2);
    Rng rng(3);
    auto w = T64::randn({3, 1, 3, 3, 3}, rng);
    auto y = ops::conv3d(x, w, T64{}, {1, 1, 1}, ops::PadTime::kCausal);
    REQUIRE(y.shape() == Shape{5, 3, 4, 4});

    // Perturb every frame except frame 0; output frame 0 must not move.
    auto x2 = x.clone();
    for (int64_t i = 1 * 4 * 4; i < x2.numel(); ++i) x2.data()[i] += 0.5;
    auto y2 = ops::conv3d(x2, w, T64{}, {1, 1, 1}, ops::PadTime::kCausal);
    for (int64_t i = 0; i < 3 * 4 * 4; ++i) CHECK(y2.data()[i] == y.data()[i]);
}

TEST_CASE("conv3d: causality probe, outputs before the perturbed frame never change") {
    Rng rng(4);
    auto x = rand_input({6, 2, 3, 3}, 5);
    auto w = T64::randn({2, 2, 3, 3, 3}, rng);
    auto y = ops::conv3d(x, w, T64{}, {1, 1, 1}, ops::PadTime::kCausal);
    const int64_t fs = 2 * 3 * 3;
    for (int64_t t = 1; t < 6; ++t) {
        auto x2 = x.clone();
        x2.data()[t * fs + 3] += 1.0;
        auto y2 = ops::conv3d(x2, w, T64{}, {1, 1, 1}, ops::PadTime::kCausal);
        for (int64_t i = 0; i < t * fs; ++i) REQUIRE(y2.data()[i] == y.data()[i]);
    }
}

TEST_CASE("conv3d: gradient matches finite differences") {
    gradcheck::Harness h;
    h.inputs.push_back(rand_input({4, 2, 5, 5}, 7).set_requires_grad(true));
    {
        Rng rng(8);
        h.inputs.push_back(T64::randn({3, 2, 3, 3, 3}, rng, 0.5).set_requires_grad(true));
        h.inputs.push_back(T64::randn({3}, rng, 0.5).set_requires_grad(true));
    }
    h.forward = [&] {
        auto y = ops::conv3d(h.inputs[0], h.inputs[1], h.inputs[2], {2, 1, 2}, ops::PadTime::kCausal);
        return gradcheck::project(y, 99);
    };
    auto r = h.check_all();
    CHECK_MESSAGE(r.ok, r.detail);
}

TEST_CASE("conv2d: identity kernel and stride arithmetic") {
    auto x = rand_input({2, 1, 8, 8}, 9);
    auto wid = T64::zeros({1, 1, 1, 1});
    wid.data()[0] = 1.0;
    auto y = ops::conv2d(x, wid, T64{}, {1, 1}, 0);
    REQUIRE(y.shape() == x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);

    Rng rng(10);
    auto w = T64::randn({4, 1, 3, 3}, rng);
    auto y2 = ops::conv2d(x, w, T64{}, {2, 2}, 1);
    CHECK(y2.shape() == Shape{2, 4, 4, 4});
}

TEST_CASE("conv2d: gradient matches finite differences") {
    gradcheck::Harness h;
    h.inputs.push_back(rand_input({3, 2, 6, 6}, 11).set_requires_grad(true));
    {
        Rng rng(12);
        h.inputs.push_back(T64::randn({2, 2, 3, 3}, rng, 0.5).set_requires_grad(true));
        h.inputs.push_back(T64::randn({2}, rng, 0.5).set_requires_grad(true));
    }
    h.forward = [&] {
        auto y = ops::conv2d(h.inputs[0], h.inputs[1], h.inputs[2], {2, 2}, 1);
        return gradcheck::project(y, 98);
    };
    auto r = h.check_all();
    CHECK_MESSAGE(r.ok, r.detail);
}

TEST_CASE("conv1d_temporal: causal hand convolutions") {
    // Sequence (a, b, c) as 3 frames of a 1x1x1 grid.
    auto x = T64::from_vector({3, 1, 1, 1}, {1.5, -2.0, 0.75});

    auto w_id = T64::from_vector({1, 1, 2}, {0.0, 1.0});  // kernel [0,1] -> identity
    auto y_id = ops::conv1d_temporal(x, w_id, T64{}, 1, true);
    REQUIRE(y_id.shape() == x.shape());
    for (int i = 0; i < 3; ++i) CHECK(y_id.data()[i] == doctest::Approx(x.data()[i]));

    auto w_sh = T64::from_vector({1, 1, 2}, {1.0, 0.0});  // kernel [1,0] -> shift right
    auto y_sh = ops::conv1d_temporal(x, w_sh, T64{}, 1, true);
    CHECK(y_sh.data()[0] == doctest::Approx(0.0));
    CHECK(y_sh.data()[1] == doctest::Approx(1.5));
    CHECK(y_sh.data()[2] == doctest::Approx(-2.0));
}

TEST_CASE("conv1d_temporal: gradient matches finite differences") {
    gradcheck::Harness h;
    h.inputs.push_back(rand_input({6, 2, 3, 3}, 13).set_requires_grad(true));
    {
        Rng rng(14);
        h.inputs.push_back(T64::randn({3, 2, 3}, rng, 0.5).set_requires_grad(true));
        h.inputs.push_back(T64::randn({3}, rng, 0.5).set_requires_grad(true));
    }
    h.forward = [&] {
        auto y = ops::conv1d_temporal(h.inputs[0], h.inputs[1], h.inputs[2], 2, true);
        return gradcheck::project(y, 97);
    };
    auto r = h.check_all();
    CHECK_MESSAGE(r.ok, r.detail);
}

TEST_CASE("layer_norm: constant input maps to the shift parameter") {
    auto x = T64::full({2, 3, 2, 2}, 4.2);
    auto gamma = T64::full({3}, 1.0);
    auto beta = T64::zeros({3});
    auto y = ops::layer_norm(x, gamma, beta, {1});
    for (int64_t i = 0; i < y.numel(); ++i) CHECK(std::fabs(y.data()[i]) < 1e-3);
}

TEST_CASE("layer_norm: hand-computed (1,3) normalization") {
    auto x = T64::from_vector({1, 2}, {1.0, 3.0});
    auto gamma = T64::full({2}, 1.0);
    auto beta = T64::zeros({2});
    auto y = ops::layer_norm(x, gamma, beta, {1});
    const double sd = std::sqrt(1.0 + 1e-6);
    CHECK(y.data()[0] == doctest::Approx(-1.0 / sd).epsilon(1e-9));
    CHECK(y.data()[1] == doctest::Approx(1.0 / sd).epsilon(1e-9));
}

TEST_CASE("layer_norm: gradient matches finite differences") {
    gradcheck::Harness h;
    h.inputs.push_back(rand_input({3, 4, 2, 2}, 15).set_requires_grad(true));
    {
        Rng rng(16);
        h.inputs.push_back(T64::uniform({4}, rng, 0.5, 1.5).set_requires_grad(true));
        h.inputs.push_back(T64::uniform({4}, rng, -0.5, 0.5).set_requires_grad(true));
    }
    h.forward = [&] {
        auto y = ops::layer_norm(h.inputs[0], h.inputs[1], h.inputs[2], {1});
        return gradcheck::project(y, 96);
    };
    auto r = h.check_all();
    CHECK_MESSAGE(r.ok, r.detail);
}

TEST_CASE("elementwise: fixed values") {
    auto z = T64::scalar(0.0);
    CHECK(ops::silu(z).item() == doctest::Approx(0.0));
    auto x = T64::scalar(0.31);
    CHECK(ops::tanh(x).item() == doctest::Approx(0.30040).epsilon(1e-4));
}

TEST_CASE("elementwise: gradients match finite differences") {
    auto make = [](uint64_t seed) { return rand_input({2, 3}, seed).set_requires_grad(true); };

    struct Case {
        const char* name;
        std::function<T64(T64&, T64&)> f;
    };
    std::vector<Case> cases = {
        {"add", [](T64& a, T64& b) { return ops::add(a, b); }},
        {"sub", [](T64& a, T64& b) { return ops::sub(a, b); }},
        {"mul", [](T64& a, T64& b) { return ops::mul(a, b); }},
        {"scale", [](T64& a, T64&) { return ops::scale(a, 1.7); }},
        {"add_scalar", [](T64& a, T64&) { return ops::add_scalar(a, -0.3); }},
        {"silu", [](T64& a, T64&) { return ops::silu(a); }},
        {"tanh", [](T64& a, T64&) { return ops::tanh(a); }},
        {"exp", [](T64& a, T64&) { return ops::exp(a); }},
        {"alpha_blend", [](T64& a, T64& b) { return ops::alpha_blend(a, b, 0.549834); }},
    };
    uint64_t seed = 20;
    for (auto& c : cases) {
        CAPTURE(c.name);
        gradcheck::Harness h;
        h.inputs.push_back(make(seed++));
        h.inputs.push_back(make(seed++));
        h.forward = [&] { return gradcheck::project(c.f(h.inputs[0], h.inputs[1]), 95); };
        auto r = h.check_all();
        CHECK_MESSAGE(r.ok, c.name << ": " << r.detail);
    }
}

TEST_CASE("abs gradient away from zero") {
    gradcheck::Harness h;
    Rng rng(31);
    auto x = T64::uniform({3, 3}, rng, 0.25, 2.0);  // keep away from the kink
    for (int64_t i = 0; i < x.numel(); i += 2) x.data()[i] *= -1.0;
    h.inputs.push_back(x.set_requires_grad(true));
    h.forward = [&] { return gradcheck::project(ops::abs(h.inputs[0]), 94); };
    auto r = h.check_all();
    CHECK_MESSAGE(r.ok, r.detail);
}

TEST_CASE("structural ops: gradients match finite differences") {
    struct Case {
        const char* name;
        Shape in_shape;
        std::function<T64(T64&)> f;
    };
    std::vector<Case> cases = {
        {"slice_channels", {3, 4, 2, 2}, [](T64& a) { return ops::slice_channels(a, 1, 3); }},
        {"pad_front_frames", {3, 2, 2, 2}, [](T64& a) { return ops::pad_front_frames(a, 3); }},
        {"trim_front_frames", {5, 2, 2, 2}, [](T64& a) { return ops::trim_front_frames(a, 2); }},
        {"repeat_frames_2x", {3, 2, 2, 2}, [](T64& a) { return ops::repeat_frames_2x(a); }},
        {"upsample_nearest_2x", {2, 2, 3, 3}, [](T64& a) { return ops::upsample_nearest_2x(a); }},
        {"avg_pool_time_2_causal", {6, 2, 2, 2}, [](T64& a) { return ops::avg_pool_time_2(a, true); }},
        {"avg_pool_time_2_plain", {6, 2, 2, 2}, [](T64& a) { return ops::avg_pool_time_2(a, false); }},
    };
    uint64_t seed = 40;
    for (auto& c : cases) {
        CAPTURE(c.name);
        gradcheck::Harness h;
        h.inputs.push_back(rand_input(c.in_shape, seed++).set_requires_grad(true));
        h.forward = [&] { return gradcheck::project(c.f(h.inputs[0]), 93); };
        auto r = h.check_all();
        CHECK_MESSAGE(r.ok, c.name << ": " << r.detail);
    }
}

TEST_CASE("pad/trim round trip restores the frame count") {
    auto x = rand_input({17, 1, 2, 2}, 50);
    auto padded = ops::pad_front_frames(x, 3);
    REQUIRE(padded.dim(0) == 20);
    // Frames 0..3 of the padded stream are identical.
    const int64_t fs = 4;
    for (int t = 1; t <= 3; ++t)
        for (int64_t i = 0; i < fs; ++i) CHECK(padded.data()[t * fs + i] == padded.data()[i]);
    auto trimmed = ops::trim_front_frames(padded, 3);
    REQUIRE(trimmed.shape() == x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(trimmed.data()[i] == x.data()[i]);
}

TEST_CASE("backward: sum gives ones, sum of squares gives 2x") {
    auto x = rand_input({4, 3}, 60).set_requires_grad(true);
    {
        Tape64 tape;
        auto loss = ops::sum(x);
        tape.backward(loss);
        for (auto g : x.grad()) CHECK(g == doctest::Approx(1.0));
    }
    x.zero_grad();
    {
        Tape64 tape;
        auto loss = ops::sum(ops::mul(x, x));
        tape.backward(loss);
        for (int64_t i = 0; i < x.numel(); ++i)
            CHECK(x.grad()[static_cast<size_t>(i)] == doctest::Approx(2.0 * x.data()[i]));
    }
}

TEST_CASE("backward: rejects non-scalar loss") {
    auto x = rand_input({2, 2}, 61).set_requires_grad(true);
    Tape64 tape;
    auto y = ops::scale(x, 2.0);
    CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
}

TEST_CASE("backward: gradient accumulates across reuse and unreachable grads stay zero") {
    auto x = rand_input({3}, 62).set_requires_grad(true);
    auto z = rand_input({3}, 63).set_requires_grad(true);  // never used
    Tape64 tape;
    auto y = ops::add(x, x);  // dy/dx = 2
    auto loss = ops::sum(y);
    tape.backward(loss);
    for (auto g : x.grad()) CHECK(g == doctest::Approx(2.0));
    for (auto g : z.grad()) CHECK(g == 0.0);
}

TEST_CASE("tape: records are topologically ordered and one traversal fills every gradient") {
    auto a = rand_input({2, 2}, 64).set_requires_grad(true);
    auto b = rand_input({2, 2}, 65).set_requires_grad(true);
    Tape64 tape;
    auto c = ops::mul(a, b);
    auto d = ops::silu(c);
    auto e = ops::add(d, a);
    auto loss = ops::mean(e);

    // Every record's inputs must be leaves or outputs of earlier records.
    std::vector<uint64_t> seen = {a.id(), b.id()};
    for (const auto& rec : tape.records()) {
        for (uint64_t in : rec.input_ids) {
            bool found = std::find(seen.begin(), seen.end(), in) != seen.end();
            REQUIRE_MESSAGE(found, "op " << rec.op << " consumed an id produced later");
        }
        seen.push_back(rec.output_id);
    }

    tape.backward(loss);
    double asum = 0, bsum = 0;
    for (auto g : a.grad()) asum += std::fabs(g);
    for (auto g : b.grad()) bsum += std::fabs(g);
    CHECK(asum > 0.0);
    CHECK(bsum > 0.0);
}

TEST_CASE("straight_through: forward takes values, backward takes the surrogate path") {
    auto v = T64::from_vector({3}, {1.0, 2.0, 3.0});
    auto s = rand_input({3}, 66).set_requires_grad(true);
    Tape64 tape;
    auto y = ops::straight_through(v, s);
    for (int i = 0; i < 3; ++i) CHECK(y.data()[i] == v.data()[i]);
    auto loss = ops::sum(y);
    tape.backward(loss);
    for (auto g : s.grad()) CHECK(g == doctest::Approx(1.0));
}

TEST_CASE("stop_gradient blocks the path") {
    auto x = rand_input({3}, 67).set_requires_grad(true);
    Tape64 tape;
    auto y = ops::mul(ops::stop_gradient(x), x);
    auto loss = ops::sum(y);
    tape.backward(loss);
    // d/dx (c * x) = c with c = stop_grad(x)
    for (int64_t i = 0; i < 3; ++i) CHECK(x.grad()[static_cast<size_t>(i)] == doctest::Approx(x.data()[i]));
}

TEST_CASE("determinism: identical seeds produce bit-identical results") {
    auto run = [] {
        Rng rng(1234);
        auto x = TensorT<float>::randn({4, 3, 6, 6}, rng);
        auto w = TensorT<float>::randn({2, 3, 3, 3, 3}, rng);
        auto b = TensorT<float>::randn({2}, rng);
        auto y = vtok::ops::conv3d(x, w, b, {1, 1, 1}, vtok::ops::PadTime::kCausal);
        return y;
    };
    auto y1 = run();
    auto y2 = run();
    REQUIRE(y1.numel() == y2.numel());
    for (int64_t i = 0; i < y1.numel(); ++i) REQUIRE(y1.data()[i] == y2.data()[i]);
}

TEST_CASE("checked mode raises on non-finite values") {
    vtok::set_checked(true);
    auto x = T64::from_vector({2}, {1.0, 710.0});  // exp overflows to inf
    CHECK_THROWS_AS(ops::exp(x), std::runtime_error);
    vtok::set_checked(false);
}

TEST_CASE("shape errors are reported") {
    auto a = T64::zeros({2, 3});
    auto b = T64::zeros({3, 2});
    CHECK_THROWS_AS(ops::add(a, b), std::invalid_argument);
    auto x = T64::zeros({0, 1, 2, 2});
    Rng rng(70);
    auto w = T64::randn({1, 1, 3, 3, 3}, rng);
    CHECK_THROWS_AS(ops::conv3d(x, w, T64{}, {1, 1, 1}, ops::PadTime::kCausal), std::invalid_argument);
}
