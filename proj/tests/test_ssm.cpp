#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "matir/ssm.hpp"
#include "matir/verify.hpp"
#include "oracles.hpp"

using namespace matir;
using ssm::DiscreteSsm;
using ssm::Mat;
using ssm::SsmParams;

namespace {

DiscreteSsm scalar_system(double a_bar, double b_bar, double c, double d) {
    DiscreteSsm m;
    m.A_bar = Mat::diagonal({a_bar});
    m.B_bar = {b_bar};
    m.C = {c};
    m.D = d;
    m.delta = 1.0;
    return m;
}

}  // namespace

TEST_CASE("discretize: scalar closed form") {
    SsmParams p;
    p.state_size = 1;
    p.A = Mat::diagonal({-1.0});
    p.B = {1.0};
    p.C = {1.0};
    const DiscreteSsm d = ssm::discretize(p, std::log(2.0));
    // exp(-ln 2) = 1/2 and (exp(-ln2)-1)/(-1) = 1/2
    CHECK(d.A_bar(0, 0) == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(d.B_bar[0] == doctest::Approx(0.5).epsilon(1e-14));
}

TEST_CASE("discretize: exact limits") {
    Rng rng(1);
    SUBCASE("A = 0") {
        SsmParams p;
        p.state_size = 4;
        p.A = Mat(4, 4);
        p.B = {0.3, -1.2, 2.0, 0.05};
        p.C.assign(4, 1.0);
        const DiscreteSsm d = ssm::discretize(p, 0.25);
        for (int64_t i = 0; i < 4; ++i)
            for (int64_t j = 0; j < 4; ++j) CHECK(d.A_bar(i, j) == (i == j ? 1.0 : 0.0));
        for (int64_t i = 0; i < 4; ++i) CHECK(d.B_bar[static_cast<size_t>(i)] == 0.25 * p.B[static_cast<size_t>(i)]);
    }
    SUBCASE("delta = 0") {
        SsmParams p = SsmParams::stable_diagonal(3);
        const DiscreteSsm d = ssm::discretize(p, 0.0);
        for (int64_t i = 0; i < 3; ++i)
            for (int64_t j = 0; j < 3; ++j) CHECK(d.A_bar(i, j) == (i == j ? 1.0 : 0.0));
        for (double v : d.B_bar) CHECK(v == 0.0);
    }
    SUBCASE("negative delta rejected") {
        CHECK_THROWS_AS(ssm::discretize(SsmParams::stable_diagonal(2), -0.1), ContractError);
    }
}

TEST_CASE("discretize matches the scaling-and-squaring oracle") {
    Rng rng(2);
    double worst = 0.0;
    for (int t = 0; t < 40; ++t) {
        const int64_t n = 1 + static_cast<int64_t>(rng.below(6));
        SsmParams p;
        p.state_size = n;
        p.A = Mat(n, n);
        for (double& v : p.A.a) v = rng.normal();
        double delta = rng.uniform(0.05, 1.0);
        const double norm = p.A.scaled(delta).inf_norm();
        if (norm > 4.0) delta *= 4.0 / norm;
        p.B.assign(static_cast<size_t>(n), 1.0);
        p.C.assign(static_cast<size_t>(n), 1.0);
        const DiscreteSsm d = ssm::discretize(p, delta);
        const Mat ref = oracles::expm(p.A.scaled(delta));
        for (size_t i = 0; i < ref.a.size(); ++i) {
            worst = std::max(worst, std::fabs(ref.a[i] - d.A_bar.a[i]));
        }
    }
    CHECK(worst < 1e-10);
}

TEST_CASE("semigroup property of the discretized transition") {
    Rng rng(3);
    for (int t = 0; t < 10; ++t) {
        SsmParams p = SsmParams::stable_diagonal(4);
        for (int64_t i = 0; i < 4; ++i)
            for (int64_t j = 0; j < 4; ++j)
                if (i != j) p.A(i, j) = 0.2 * rng.normal();
        const double d1 = rng.uniform(0.05, 0.5), d2 = rng.uniform(0.05, 0.5);
        const Mat lhs = ssm::discretize(p, d1 + d2).A_bar;
        const Mat rhs = ssm::discretize(p, d1).A_bar * ssm::discretize(p, d2).A_bar;
        for (size_t i = 0; i < lhs.a.size(); ++i) CHECK(std::fabs(lhs.a[i] - rhs.a[i]) < 1e-9);
    }
}

TEST_CASE("scan_recurrent") {
    SUBCASE("geometric impulse response") {
        const DiscreteSsm m = scalar_system(0.5, 0.5, 1.0, 0.0);
        const std::vector<double> x = {1, 0, 0};
        const std::vector<double> y = ssm::scan_recurrent(m, x);
        REQUIRE(y.size() == 3);
        CHECK(y[0] == doctest::Approx(0.5).epsilon(1e-15));
        CHECK(y[1] == doctest::Approx(0.25).epsilon(1e-15));
        CHECK(y[2] == doctest::Approx(0.125).epsilon(1e-15));
    }
    SUBCASE("pure feedthrough") {
        const DiscreteSsm m = scalar_system(0.0, 0.0, 1.0, 2.0);
        const std::vector<double> y = ssm::scan_recurrent(m, std::vector<double>{3, 4});
        CHECK(y == std::vector<double>{6, 8});
    }
    SUBCASE("zero input stays zero") {
        const DiscreteSsm m = scalar_system(0.9, 1.0, 1.0, 1.0);
        for (double v : ssm::scan_recurrent(m, std::vector<double>(16, 0.0))) CHECK(v == 0.0);
    }
    SUBCASE("empty input, empty output") {
        const DiscreteSsm m = scalar_system(0.5, 0.5, 1.0, 0.0);
        CHECK(ssm::scan_recurrent(m, std::vector<double>{}).empty());
    }
}

TEST_CASE("kernel") {
    const DiscreteSsm m = scalar_system(0.5, 0.5, 1.0, 0.0);
    SUBCASE("direct expansion") {
        const ssm::SsmKernel k = ssm::kernel(m, 3);
        CHECK(k.k == std::vector<double>{0.5, 0.25, 0.125});
    }
    SUBCASE("zero C") {
        DiscreteSsm z = m;
        z.C = {0.0};
        for (double v : ssm::kernel(z, 5).k) CHECK(v == 0.0);
    }
    SUBCASE("single tap") {
        const ssm::SsmKernel k = ssm::kernel(m, 1);
        REQUIRE(k.k.size() == 1);
        CHECK(k.k[0] == 0.5);  // C * B_bar
    }
    SUBCASE("length must be positive") {
        CHECK_THROWS_AS(ssm::kernel(m, 0), ContractError);
    }
}

TEST_CASE("scan_convolutional") {
    SUBCASE("agrees with the recurrence on the geometric example") {
        const DiscreteSsm m = scalar_system(0.5, 0.5, 1.0, 0.0);
        const std::vector<double> x = {1, 0, 0};
        const auto y1 = ssm::scan_recurrent(m, x);
        const auto y2 = ssm::scan_convolutional(m, x);
        for (size_t i = 0; i < x.size(); ++i) CHECK(std::fabs(y1[i] - y2[i]) < 1e-15);
    }
    SUBCASE("impulse response equals the kernel") {
        const DiscreteSsm m = scalar_system(0.8, 0.3, 1.5, 0.0);
        std::vector<double> x(8, 0.0);
        x[0] = 1.0;
        const auto y = ssm::scan_convolutional(m, x);
        const auto k = ssm::kernel(m, 8);
        for (size_t i = 0; i < x.size(); ++i) CHECK(y[i] == doctest::Approx(k.k[i]).epsilon(1e-14));
    }
    SUBCASE("random systems agree with the recurrence") {
        const auto r = verify::check_duality(
            50, 99, [](const DiscreteSsm& d, std::span<const double> x) {
                return ssm::scan_recurrent(d, x);
            });
        CHECK(r.pass);
        CHECK(r.measured < 1e-10);
    }
    SUBCASE("a sign fault in the recurrence is caught") {
        // flips the state contribution in h_k = A h_{k-1} + B x_k
        const auto r = verify::check_duality(
            50, 99, [](const DiscreteSsm& d, std::span<const double> x) {
                const int64_t n = d.A_bar.rows;
                std::vector<double> h(static_cast<size_t>(n), 0.0);
                std::vector<double> y(x.size(), 0.0);
                for (size_t k = 0; k < x.size(); ++k) {
                    std::vector<double> hn = d.A_bar.apply(h);
                    for (int64_t i = 0; i < n; ++i) {
                        hn[static_cast<size_t>(i)] =
                            -hn[static_cast<size_t>(i)] + d.B_bar[static_cast<size_t>(i)] * x[k];
                    }
                    h = hn;
                    double acc = 0.0;
                    for (int64_t i = 0; i < n; ++i) acc += d.C[static_cast<size_t>(i)] * h[static_cast<size_t>(i)];
                    y[k] = acc + d.D * x[k];
                }
                return y;
            });
        CHECK_FALSE(r.pass);
        CHECK(r.name == "ssm.duality_rnn_cnn");
    }
}

TEST_CASE("time-invariant scan is linear") {
    Rng rng(4);
    SsmParams p = SsmParams::stable_diagonal(3);
    const DiscreteSsm d = ssm::discretize(p, 0.3);
    std::vector<double> x(24), z(24), mix(24);
    const double a = 1.7, b = -0.6;
    for (size_t i = 0; i < x.size(); ++i) {
        x[i] = rng.normal();
        z[i] = rng.normal();
        mix[i] = a * x[i] + b * z[i];
    }
    const auto ym = ssm::scan_recurrent(d, mix);
    const auto yx = ssm::scan_recurrent(d, x);
    const auto yz = ssm::scan_recurrent(d, z);
    for (size_t i = 0; i < x.size(); ++i) {
        CHECK(std::fabs(ym[i] - a * yx[i] - b * yz[i]) < 1e-10);
    }
}

TEST_CASE("selective scan") {
    SUBCASE("frozen projections reduce to the time-invariant case") {
        Rng rng(5);
        ssm::SelectiveScanParams p = ssm::SelectiveScanParams::init(2, 1, rng);
        p.w_dt.mutable_data().assign(p.w_dt.data().size(), 0.0);
        p.b_dt.mutable_data().assign(p.b_dt.data().size(), 0.0);  // softplus(0) = ln 2
        p.w_b.mutable_data().assign(p.w_b.data().size(), 0.0);
        p.b_b.mutable_data().assign(p.b_b.data().size(), 1.0);
        p.w_c.mutable_data().assign(p.w_c.data().size(), 0.0);
        p.b_c.mutable_data().assign(p.b_c.data().size(), 1.0);
        p.a_log.mutable_data()[0] = std::log(std::exp(1.0) - 1.0);  // -softplus = -1
        p.d_skip.mutable_data().assign(p.d_skip.data().size(), 0.0);
        std::vector<double> x(3 * 2, 0.0);
        x[0] = x[1] = 1.0;  // impulse in both channels
        Tensor y = ssm::selective_scan(p, Tensor::from({3, 2}, x));
        for (int64_t c = 0; c < 2; ++c) {
            CHECK(y.at({0, c}) == doctest::Approx(0.5).epsilon(1e-12));
            CHECK(y.at({1, c}) == doctest::Approx(0.25).epsilon(1e-12));
            CHECK(y.at({2, c}) == doctest::Approx(0.125).epsilon(1e-12));
        }
    }
    SUBCASE("zero input with zero-bias projections gives zero output") {
        Rng rng(6);
        ssm::SelectiveScanParams p = ssm::SelectiveScanParams::init(3, 4, rng);
        p.b_b.mutable_data().assign(p.b_b.data().size(), 0.0);
        p.b_c.mutable_data().assign(p.b_c.data().size(), 0.0);
        Tensor y = ssm::selective_scan(p, Tensor::zeros({10, 3}));
        for (double v : y.data()) CHECK(v == 0.0);
    }
    SUBCASE("input gradient matches finite differences") {
        Rng rng(7);
        ssm::SelectiveScanParams p = ssm::SelectiveScanParams::init(3, 4, rng);
        Tensor r = Tensor::randn({10, 3}, rng);
        const double err = check_gradients(
            [&](const Tensor& t) { return ops::sum(ops::mul(ssm::selective_scan(p, t), r)); },
            Tensor::randn({10, 3}, rng), 1e-5);
        CHECK(err < 1e-4);
    }
    SUBCASE("parameter gradients match finite differences") {
        // every parameter of the scan, checked tape-vs-FD with in-place nudges
        Rng rng(8);
        ssm::SelectiveScanParams p = ssm::SelectiveScanParams::init(2, 3, rng);
        Tensor x = Tensor::randn({8, 2}, rng);
        Tensor r = Tensor::randn({8, 2}, rng);
        auto loss_value = [&]() {
            return ops::sum(ops::mul(ssm::selective_scan(p, x), r)).item();
        };
        auto check_param = [&](Tensor& param) {
            param.zero_grad();
            {
                Tape tape;
                tape.backward(ops::sum(ops::mul(ssm::selective_scan(p, x), r)));
            }
            const std::vector<double> g_ad = param.grad();
            param.zero_grad();
            const double eps = 1e-5;
            double worst = 0.0;
            std::vector<double>& vals = param.mutable_data();
            for (size_t i = 0; i < vals.size(); ++i) {
                const double orig = vals[i];
                vals[i] = orig + eps;
                const double fp = loss_value();
                vals[i] = orig - eps;
                const double fm = loss_value();
                vals[i] = orig;
                const double g_fd = (fp - fm) / (2.0 * eps);
                const double denom = std::max({std::fabs(g_ad[i]), std::fabs(g_fd), 1e-12});
                worst = std::max(worst, std::fabs(g_ad[i] - g_fd) / denom);
            }
            CHECK(worst < 1e-4);
        };
        check_param(p.w_dt);
        check_param(p.b_dt);
        check_param(p.w_b);
        check_param(p.b_b);
        check_param(p.w_c);
        check_param(p.b_c);
        check_param(p.a_log);
        check_param(p.d_skip);
    }
}
