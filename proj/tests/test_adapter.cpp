// Conditioning adapters: attention math against an independent double-loop
// oracle, pass-through initialization, parameter accounting, gradient
// checks, and the adapter checkpoint format.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <vector>

#include "dc/adapter.hpp"
#include "dc/gradcheck.hpp"
#include "dc/rng.hpp"
#include "dc/serialize.hpp"

using namespace dc;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code;
    }
    FAIL("expected an error");
    return ErrorCode::io;
}

template <class S> Tensor<S> randt(std::vector<int> shape, Rng& rng, double scale = 1.0) {
    Tensor<S> t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) t.data()[i] = S(rng.normal() * scale);
    return t;
}

// Independent reference: plain double loops, no shared code with the library
// kernels (different accumulation order on purpose).
std::vector<double> oracle_adapt(const std::vector<double>& h, const std::vector<double>& a_self,
                                 const std::vector<double>& r, const std::vector<double>& wq,
                                 const std::vector<double>& wk, const std::vector<double>& wv,
                                 const std::vector<double>& wproj, int N, int M, int d) {
    auto mm = [](const std::vector<double>& A, const std::vector<double>& B, int n, int k,
                 int m) {
        std::vector<double> C(std::size_t(n) * m, 0.0);
        for (int j = 0; j < m; ++j) // column-major outer loop: different order
            for (int i = 0; i < n; ++i)
                for (int p = 0; p < k; ++p) C[std::size_t(i) * m + j] += A[std::size_t(i) * k + p] * B[std::size_t(p) * m + j];
        return C;
    };
    std::vector<double> q = mm(h, wq, N, d, d);
    std::vector<double> kk = mm(r, wk, M, d, d);
    std::vector<double> v = mm(r, wv, M, d, d);
    std::vector<double> att(std::size_t(N) * M);
    for (int i = 0; i < N; ++i) {
        double mx = -1e300;
        for (int j = 0; j < M; ++j) {
            double s = 0;
            for (int p = 0; p < d; ++p) s += q[std::size_t(i) * d + p] * kk[std::size_t(j) * d + p];
            att[std::size_t(i) * M + j] = s / std::sqrt(double(d));
            mx = std::max(mx, att[std::size_t(i) * M + j]);
        }
        double z = 0;
        for (int j = 0; j < M; ++j) z += std::exp(att[std::size_t(i) * M + j] - mx);
        for (int j = 0; j < M; ++j) att[std::size_t(i) * M + j] = std::exp(att[std::size_t(i) * M + j] - mx) / z;
    }
    std::vector<double> ac = mm(att, v, N, M, d);
    std::vector<double> cat(std::size_t(N) * 2 * d);
    for (int i = 0; i < N; ++i)
        for (int p = 0; p < d; ++p) {
            cat[std::size_t(i) * 2 * d + p] = a_self[std::size_t(i) * d + p];
            cat[std::size_t(i) * 2 * d + d + p] = ac[std::size_t(i) * d + p];
        }
    return mm(cat, wproj, N, 2 * d, d);
}

LayerSite site_d(int d) { return LayerSite{Region::middle, 0, d}; }

} // namespace

TEST_CASE("single-token adapter reduces to its closed form") {
    // N=M=d=1: softmax of one logit is 1, so a_c = z*wv and
    // out = y*wproj[0] + z*wv*wproj[1].
    AdapterSiteT<float> w;
    w.site = site_d(1);
    w.wq = TensorF::from({1, 1}, {0.7f});
    w.wk = TensorF::from({1, 1}, {-0.3f});
    w.wv = TensorF::from({1, 1}, {2.0f});
    w.wproj = TensorF::from({2, 1}, {0.5f, 0.25f});
    TensorF h = TensorF::from({1, 1}, {3.0f});
    TensorF y = TensorF::from({1, 1}, {-1.5f});
    TensorF r = TensorF::from({1, 1}, {4.0f});

    TensorF rows;
    TensorF out = adapt(h, y, r, w, nullptr, &rows);
    CHECK(out.numel() == 1);
    CHECK(out.data()[0] == doctest::Approx(-1.5f * 0.5f + 4.0f * 2.0f * 0.25f));
    CHECK(rows.numel() == 1);
    CHECK(rows.data()[0] == 1.0f); // softmax over a single key
}

TEST_CASE("identical reference rows give exactly uniform attention") {
    int d = 4, M = 4, N = 2;
    Rng rng(3);
    AdapterSiteT<float> w{site_d(d), randt<float>({d, d}, rng, 0.3), randt<float>({d, d}, rng, 0.3),
                          randt<float>({d, d}, rng, 0.3), randt<float>({2 * d, d}, rng, 0.3)};
    TensorF h = randt<float>({N, d}, rng);
    TensorF y = randt<float>({N, d}, rng);
    TensorF row = randt<float>({1, d}, rng);
    TensorF r({M, d});
    for (int j = 0; j < M; ++j)
        std::memcpy(r.data() + std::size_t(j) * d, row.data(), sizeof(float) * std::size_t(d));

    TensorF rows;
    adapt(h, y, r, w, nullptr, &rows);
    REQUIRE(rows.dim(0) == N);
    REQUIRE(rows.dim(1) == M);
    for (std::int64_t i = 0; i < rows.numel(); ++i)
        CHECK(rows.data()[i] == 0.25f); // equal logits, M a power of two
}

TEST_CASE("adapter output matches an independent double-precision oracle") {
    int N = 3, M = 4, d = 8;
    Rng rng(17);
    AdapterSiteT<float> w{site_d(d), randt<float>({d, d}, rng, 0.5), randt<float>({d, d}, rng, 0.5),
                          randt<float>({d, d}, rng, 0.5), randt<float>({2 * d, d}, rng, 0.5)};
    TensorF h = randt<float>({N, d}, rng);
    TensorF y = randt<float>({N, d}, rng);
    TensorF r = randt<float>({M, d}, rng);

    auto vec = [](const TensorF& t) {
        return std::vector<double>(t.data(), t.data() + t.numel());
    };
    std::vector<double> want =
        oracle_adapt(vec(h), vec(y), vec(r), vec(w.wq), vec(w.wk), vec(w.wv), vec(w.wproj), N, M, d);

    TensorF got = adapt(h, y, r, w);
    REQUIRE(got.numel() == std::int64_t(want.size()));
    double worst = 0;
    for (std::size_t i = 0; i < want.size(); ++i)
        worst = std::max(worst, std::abs(double(got.data()[i]) - want[i]));
    CHECK(worst < 1e-5);
}

TEST_CASE("attention rows are a probability distribution") {
    int N = 5, M = 7, d = 6;
    Rng rng(23);
    AdapterSiteT<float> w{site_d(d), randt<float>({d, d}, rng), randt<float>({d, d}, rng),
                          randt<float>({d, d}, rng), randt<float>({2 * d, d}, rng)};
    TensorF rows;
    adapt(randt<float>({N, d}, rng), randt<float>({N, d}, rng), randt<float>({M, d}, rng), w,
          nullptr, &rows);
    for (int i = 0; i < N; ++i) {
        double sum = 0;
        for (int j = 0; j < M; ++j) {
            float p = rows.data()[std::size_t(i) * M + j];
            CHECK(p >= 0.0f);
            sum += p;
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("reference row order does not matter") {
    // Permuting cached rows permutes keys and values together; the attention
    // average is order-independent up to rounding.
    int N = 4, M = 6, d = 8;
    Rng rng(29);
    AdapterSiteT<double> w{site_d(d), randt<double>({d, d}, rng), randt<double>({d, d}, rng),
                           randt<double>({d, d}, rng), randt<double>({2 * d, d}, rng)};
    Tensor<double> h = randt<double>({N, d}, rng);
    Tensor<double> y = randt<double>({N, d}, rng);
    Tensor<double> r = randt<double>({M, d}, rng);
    Tensor<double> rp({M, d});
    int perm[6] = {3, 0, 5, 1, 4, 2};
    for (int j = 0; j < M; ++j)
        std::memcpy(rp.data() + std::size_t(j) * d, r.data() + std::size_t(perm[j]) * d,
                    sizeof(double) * std::size_t(d));

    Tensor<double> a = adapt(h, y, r, w);
    Tensor<double> b = adapt(h, y, rp, w);
    for (std::int64_t i = 0; i < a.numel(); ++i)
        CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-12));
}

TEST_CASE("pass-through initialization has the documented structure") {
    std::vector<LayerSite> sites = {site_d(8), LayerSite{Region::decoder, 0, 4}};
    Rng r1(7), r2(7), r3(8);
    AdapterBank a = init_passthrough<float>(sites, r1);
    AdapterBank b = init_passthrough<float>(sites, r2);
    AdapterBank c = init_passthrough<float>(sites, r3);

    REQUIRE(a.sites.size() == 2);
    for (const auto& s : a.sites) {
        int d = s.site.width;
        REQUIRE(s.wproj.dim(0) == 2 * d);
        REQUIRE(s.wproj.dim(1) == d);
        for (int i = 0; i < 2 * d; ++i)
            for (int j = 0; j < d; ++j)
                CHECK(s.wproj.data()[std::size_t(i) * d + j] == (i == j ? 1.0f : 0.0f));
        // query/key/value projections start small but nonzero
        bool nonzero = false;
        for (std::int64_t i = 0; i < s.wq.numel(); ++i) nonzero = nonzero || s.wq.data()[i] != 0;
        CHECK(nonzero);
    }
    // seeded reproducibility
    for (std::size_t i = 0; i < a.sites.size(); ++i) {
        CHECK(std::memcmp(a.sites[i].wq.data(), b.sites[i].wq.data(),
                          sizeof(float) * std::size_t(a.sites[i].wq.numel())) == 0);
        CHECK(std::memcmp(a.sites[i].wq.data(), c.sites[i].wq.data(),
                          sizeof(float) * std::size_t(a.sites[i].wq.numel())) != 0);
    }
}

TEST_CASE("pass-through leaves a_self untouched bit-for-bit at any width") {
    for (int d : {1, 3, 8, 32}) {
        Rng rng(31 + std::uint64_t(d));
        AdapterBank bank = init_passthrough<float>({site_d(d)}, rng);
        int N = 9, M = 5;
        TensorF h = randt<float>({N, d}, rng);
        TensorF y = randt<float>({N, d}, rng);
        TensorF r = randt<float>({M, d}, rng);
        TensorF out = adapt(h, y, r, bank.sites[0]);
        CHECK(std::memcmp(out.data(), y.data(), sizeof(float) * std::size_t(y.numel())) == 0);
    }
}

TEST_CASE("parameter accounting follows the five-matrices closed form") {
    CHECK(count_adapter_params({site_d(8)}) == 5 * 8 * 8);
    CHECK(count_adapter_params(std::vector<int>{8}) == 320);

    // small-config default sites: widths 128,128,64
    CHECK(count_adapter_params(std::vector<int>{128, 128, 64}) == 184320);

    // production-scale width set used for the headline parameter count
    long long sd = count_adapter_params(std::vector<int>{1280, 1280, 1280, 640, 320, 320});
    CHECK(sd == 27648000);
    CHECK(std::abs(double(sd) - 25e6) / 25e6 < 0.15);

    CHECK(code_of([&] { count_adapter_params(std::vector<int>{}); }) == ErrorCode::config);
}

TEST_CASE("every adapter matrix passes a finite-difference gradient check") {
    int N = 3, M = 4, d = 6;
    SUBCASE("float32 tolerance 1e-3") {
        Rng rng(41);
        AdapterSiteT<float> w{site_d(d), randt<float>({d, d}, rng, 0.5),
                              randt<float>({d, d}, rng, 0.5), randt<float>({d, d}, rng, 0.5),
                              randt<float>({2 * d, d}, rng, 0.5)};
        TensorF h = randt<float>({N, d}, rng);
        TensorF y = randt<float>({N, d}, rng);
        TensorF r = randt<float>({M, d}, rng);
        TensorF target = randt<float>({N, d}, rng);
        for (TensorF* p : {&w.wq, &w.wk, &w.wv, &w.wproj}) p->set_requires_grad(true);

        float err = grad_check<float>(
            [&](Tape<float>* tp) { return mse(adapt(h, y, r, w, tp), target, tp); },
            {&w.wq, &w.wk, &w.wv, &w.wproj}, 1e-2f);
        CHECK(err < 1e-3f);
    }
    SUBCASE("float64 tolerance 1e-5") {
        Rng rng(43);
        AdapterSiteT<double> w{site_d(d), randt<double>({d, d}, rng, 0.5),
                               randt<double>({d, d}, rng, 0.5), randt<double>({d, d}, rng, 0.5),
                               randt<double>({2 * d, d}, rng, 0.5)};
        Tensor<double> h = randt<double>({N, d}, rng);
        Tensor<double> y = randt<double>({N, d}, rng);
        Tensor<double> r = randt<double>({M, d}, rng);
        Tensor<double> target = randt<double>({N, d}, rng);
        for (Tensor<double>* p : {&w.wq, &w.wk, &w.wv, &w.wproj}) p->set_requires_grad(true);

        double err = grad_check<double>(
            [&](Tape<double>* tp) { return mse(adapt(h, y, r, w, tp), target, tp); },
            {&w.wq, &w.wk, &w.wv, &w.wproj}, 1e-6);
        CHECK(err < 1e-5);
    }
}

TEST_CASE("shape mismatches are rejected with cache errors") {
    int d = 4;
    Rng rng(47);
    AdapterBank bank = init_passthrough<float>({site_d(d)}, rng);
    TensorF h = randt<float>({3, d}, rng);
    TensorF y = randt<float>({3, d}, rng);
    CHECK(code_of([&] { adapt(h, y, randt<float>({5, d + 1}, rng), bank.sites[0]); }) ==
          ErrorCode::cache);
    CHECK(code_of([&] { adapt(h, randt<float>({2, d}, rng), randt<float>({5, d}, rng),
                              bank.sites[0]); }) == ErrorCode::dimension);
}

TEST_CASE("adapter checkpoints round-trip and validate their site list") {
    std::vector<LayerSite> sites = {LayerSite{Region::middle, 0, 8},
                                    LayerSite{Region::decoder, 0, 8},
                                    LayerSite{Region::decoder, 2, 4}};
    Rng rng(53);
    AdapterBank bank = init_passthrough<float>(sites, rng);
    for (auto& s : bank.sites) // make weights distinctive
        for (std::int64_t i = 0; i < s.wproj.numel(); ++i)
            s.wproj.data()[i] += float(i % 7) * 0.125f;

    auto named = export_adapters(bank);
    REQUIRE(named.size() == 12);
    CHECK(named[0].name == "adapter.middle.0.wq");
    CHECK(named[3].name == "adapter.middle.0.wproj");
    CHECK(named[8].name == "adapter.decoder.2.wq");

    std::string path = "adapters_test.dctn";
    save_adapters(path, bank);
    AdapterBank back = load_adapters(path, sites);
    REQUIRE(back.sites.size() == bank.sites.size());
    for (std::size_t i = 0; i < bank.sites.size(); ++i) {
        CHECK(back.sites[i].site.same_block(bank.sites[i].site));
        for (auto [a, b] : {std::pair{&bank.sites[i].wq, &back.sites[i].wq},
                            std::pair{&bank.sites[i].wproj, &back.sites[i].wproj}})
            CHECK(std::memcmp(a->data(), b->data(), sizeof(float) * std::size_t(a->numel())) == 0);
    }

    // loading against a mismatched site list is a cache error
    std::vector<LayerSite> wrong = {LayerSite{Region::middle, 0, 8}};
    CHECK(code_of([&] { load_adapters(path, wrong); }) == ErrorCode::cache);
    std::vector<LayerSite> wrong_width = sites;
    wrong_width[2].width = 8;
    CHECK(code_of([&] { load_adapters(path, wrong_width); }) == ErrorCode::cache);

    // fp16 export halves the payload (name overhead aside) and loads back
    save_adapters(path, bank, true);
    AdapterBank half = load_adapters(path, sites);
    float want = half_to_float(float_to_half(bank.sites[0].wq.data()[0]));
    CHECK(half.sites[0].wq.data()[0] == want);
    std::remove(path.c_str());
}

TEST_CASE("adapter checkpoint files reject foreign tensors") {
    std::vector<NamedTensor> named;
    named.push_back({"adapter.middle.0.wq", TensorF({4, 4})});
    named.push_back({"adapter.middle.0.wk", TensorF({4, 4})});
    named.push_back({"adapter.middle.0.wv", TensorF({4, 4})});
    named.push_back({"weird.name", TensorF({8, 4})});
    std::string path = "adapters_bad.dctn";
    save_tensors(path, named, false);
    CHECK(code_of([&] { load_adapters(path, {site_d(4)}); }) == ErrorCode::format);
    std::remove(path.c_str());
}
