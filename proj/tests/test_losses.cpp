#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "wellbench/errors.hpp"
#include "wellbench/modeling.hpp"

using namespace wellbench;

namespace {

Eigen::VectorXd vec(std::initializer_list<double> xs) {
    Eigen::VectorXd v(static_cast<Eigen::Index>(xs.size()));
    Eigen::Index i = 0;
    for (double x : xs) v(i++) = x;
    return v;
}

}  // namespace

TEST_CASE("frozen SCE value: y=[1,0], p=[0.5,0.5] gives ln 2") {
    CHECK(sce_loss(vec({1, 0}), vec({0.5, 0.5})) ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("frozen GL value: y=[1,0,0], p=[.7,.2,.1], g=.1 gives -ln 0.8") {
    CHECK(gamblers_loss(vec({1, 0, 0}), vec({0.7, 0.2, 0.1}), 0.1) ==
          doctest::Approx(-std::log(0.8)).epsilon(1e-12));
    CHECK(gamblers_loss(vec({1, 0, 0}), vec({0.7, 0.2, 0.1}), 0.1) ==
          doctest::Approx(0.2231435513).epsilon(1e-9));
}

TEST_CASE("GL with g=0 collapses to the plain negative log-likelihood") {
    std::mt19937 rng(123);
    std::uniform_real_distribution<double> unif(0.05, 0.95);
    for (int trial = 0; trial < 1000; ++trial) {
        const int k = 2 + static_cast<int>(rng() % 6);
        Eigen::VectorXd y(k), p(k);
        bool any = false;
        for (int i = 0; i < k; ++i) {
            y(i) = rng() % 2;
            any = any || y(i) > 0;
            p(i) = unif(rng);
        }
        if (!any) y(0) = 1;
        double expect = 0;
        for (int i = 0; i < k; ++i) {
            if (y(i) > 0) expect -= std::log(p(i));
        }
        CHECK(gamblers_loss(y, p, 0.0) == doctest::Approx(expect).epsilon(1e-9));
    }
}

TEST_CASE("only positive labels contribute to GL") {
    // Flipping probabilities of negative labels must not move the loss.
    const Eigen::VectorXd y = vec({1, 0, 0, 0});
    const double base = gamblers_loss(y, vec({0.6, 0.1, 0.2, 0.3}), 0.05);
    const double moved = gamblers_loss(y, vec({0.6, 0.9, 0.4, 0.8}), 0.05);
    CHECK(base == moved);
}

TEST_CASE("reservation sum is clamped into (0, 1]") {
    // p + g > 1 behaves exactly like a sum of 1 (zero loss contribution).
    CHECK(gamblers_loss(vec({1.0}), vec({0.9}), 0.5) ==
          doctest::Approx(0.0).epsilon(1e-12));
    // p = 0, g = 0 is finite thanks to the floor clamp.
    const double floored = gamblers_loss(vec({1.0}), vec({0.0}), 0.0);
    CHECK(std::isfinite(floored));
    CHECK(floored == doctest::Approx(-std::log(kProbEps)).epsilon(1e-9));
}

TEST_CASE("loss input validation") {
    CHECK_THROWS_AS(sce_loss(vec({1}), vec({0.5, 0.5})), ShapeError);
    CHECK_THROWS_AS(sce_loss(vec({1}), vec({1.5})), DomainError);
    CHECK_THROWS_AS(sce_loss(Eigen::VectorXd(), Eigen::VectorXd()), DomainError);
    CHECK_THROWS_AS(gamblers_loss(vec({1}), vec({0.5}), 1.0), DomainError);
    CHECK_THROWS_AS(gamblers_loss(vec({1}), vec({0.5}), -0.1), DomainError);
    CHECK_THROWS_AS(gamblers_loss(vec({1}), vec({-0.2}), 0.1), DomainError);
}

namespace {

// Central finite differences at interior points (clamps inactive).
void check_gradients(std::uint64_t seed, int trials, double tol) {
    std::mt19937 rng(seed);
    std::uniform_real_distribution<double> unif(0.05, 0.9);
    const double h = 1e-6;
    for (int trial = 0; trial < trials; ++trial) {
        const int k = 2 + static_cast<int>(rng() % 5);
        Eigen::VectorXd y(k), p(k);
        bool any = false;
        for (int i = 0; i < k; ++i) {
            y(i) = rng() % 2;
            any = any || y(i) > 0;
            p(i) = unif(rng);
        }
        if (!any) y(0) = 1;
        const double g = 0.05 + 0.5 * unif(rng);

        const Eigen::VectorXd sce_grad = sce_loss_grad(y, p);
        Eigen::VectorXd gl_grad(k);
        double gl_grad_g = 0;
        gamblers_loss_grad(y, p, g, gl_grad, gl_grad_g);

        for (int i = 0; i < k; ++i) {
            Eigen::VectorXd hi = p, lo = p;
            hi(i) += h;
            lo(i) -= h;
            const double sce_fd = (sce_loss(y, hi) - sce_loss(y, lo)) / (2 * h);
            const double sce_scale = std::max(1.0, std::abs(sce_fd));
            CHECK(std::abs(sce_grad(i) - sce_fd) / sce_scale < tol);

            const double gl_fd =
                (gamblers_loss(y, hi, g) - gamblers_loss(y, lo, g)) / (2 * h);
            const double gl_scale = std::max(1.0, std::abs(gl_fd));
            CHECK(std::abs(gl_grad(i) - gl_fd) / gl_scale < tol);
        }
        const double g_fd =
            (gamblers_loss(y, p, g + h) - gamblers_loss(y, p, g - h)) / (2 * h);
        CHECK(std::abs(gl_grad_g - g_fd) / std::max(1.0, std::abs(g_fd)) < tol);
    }
}

}  // namespace

TEST_CASE("analytic gradients match central finite differences") {
    check_gradients(31337, 100, 1e-5);
}

TEST_CASE("gradients vanish where the clamp is active") {
    // Saturated reservation sum: moving p cannot change the clamped loss.
    Eigen::VectorXd grad(1);
    double grad_g = 0;
    gamblers_loss_grad(vec({1.0}), vec({0.9}), 0.5, grad, grad_g);
    CHECK(grad(0) == 0.0);
    CHECK(grad_g == 0.0);

    // Probability clamped at the floor: SCE gradient is zeroed there too.
    const Eigen::VectorXd at_floor = sce_loss_grad(vec({1.0}), vec({0.0}));
    CHECK(at_floor(0) == 0.0);
}

TEST_CASE("loss names round-trip") {
    CHECK(loss_name(LossKind::sce) == "SCE");
    CHECK(loss_name(LossKind::gamblers) == "GL");
    CHECK(loss_from_name("SCE") == LossKind::sce);
    CHECK(loss_from_name("gl") == LossKind::gamblers);
    CHECK_THROWS_AS(loss_from_name("hinge"), ConfigError);
}
