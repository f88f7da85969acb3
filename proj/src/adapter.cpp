#include "dc/adapter.hpp"

#include <cmath>

#include "dc/common.hpp"

namespace dc {

template <class S>
Tensor<S> adapt(const Tensor<S>& h, const Tensor<S>& a_self, const Tensor<S>& h_ref,
                const AdapterSiteT<S>& w, std::type_identity_t<Tape<S>>* tape,
                std::type_identity_t<Tensor<S>>* attention_rows) {
    require(h.rank() == 2 && a_self.rank() == 2 && h_ref.rank() == 2, ErrorCode::dimension,
            "adapt: inputs must be rank-2");
    require_same_shape(h, a_self, "adapt");
    const int d = h.dim(1);
    require(h_ref.dim(1) == d, ErrorCode::cache,
            "adapt: reference width " + std::to_string(h_ref.dim(1)) +
                " does not match site width " + std::to_string(d));
    require(w.wq.rank() == 2 && w.wq.dim(0) == d && w.wq.dim(1) == d && w.wk.shape() == w.wq.shape() &&
                w.wv.shape() == w.wq.shape() && w.wproj.rank() == 2 && w.wproj.dim(0) == 2 * d &&
                w.wproj.dim(1) == d,
            ErrorCode::cache, "adapt: weight shapes do not match site width");

    Tensor<S> q = matmul(h, w.wq, tape);     // N x d
    Tensor<S> k = matmul(h_ref, w.wk, tape); // M x d
    Tensor<S> v = matmul(h_ref, w.wv, tape); // M x d
    S scale = S(1.0 / std::sqrt(double(d)));
    Tensor<S> rows = softmax_rows(affine(matmul_nt(q, k, tape), scale, S(0), tape), tape);
    if (attention_rows) *attention_rows = rows.detach().clone();
    Tensor<S> a_c = matmul(rows, v, tape);                    // N x d
    return matmul(concat_cols(a_self, a_c, tape), w.wproj, tape); // N x d
}

template <class S>
AdapterBankT<S> init_passthrough(const std::vector<LayerSite>& sites, Rng& rng) {
    require(!sites.empty(), ErrorCode::config, "adapter bank needs at least one site");
    AdapterBankT<S> bank;
    for (const LayerSite& s : sites) {
        require(s.width >= 1, ErrorCode::config, "site width missing for " + s.str());
        AdapterSiteT<S> a;
        a.site = s;
        const int d = s.width;
        a.wq = Tensor<S>::randn({d, d}, rng, S(0.02));
        a.wk = Tensor<S>::randn({d, d}, rng, S(0.02));
        a.wv = Tensor<S>::randn({d, d}, rng, S(0.02));
        // [[I],[0]]: the concatenated reference branch starts with an exactly
        // zero coefficient block, so out == a_self at step 0.
        a.wproj = Tensor<S>::zeros({2 * d, d});
        for (int i = 0; i < d; ++i) a.wproj.data()[i * d + i] = S(1);
        bank.sites.push_back(std::move(a));
    }
    return bank;
}

long long count_adapter_params(const std::vector<int>& widths) {
    require(!widths.empty(), ErrorCode::config, "no adapter sites to count");
    long long total = 0;
    for (int d : widths) total += 5ll * d * d;
    return total;
}

long long count_adapter_params(const std::vector<LayerSite>& sites) {
    std::vector<int> widths;
    for (const auto& s : sites) widths.push_back(s.width);
    return count_adapter_params(widths);
}

template <class S> std::vector<NamedTensor> export_adapters(const AdapterBankT<S>& bank) {
    std::vector<NamedTensor> out;
    for (const auto& a : bank.sites) {
        std::string p = "adapter." + std::string(region_name(a.site.region)) + "." +
                        std::to_string(a.site.index) + ".";
        out.push_back({p + "wq", a.wq.template cast<float>()});
        out.push_back({p + "wk", a.wk.template cast<float>()});
        out.push_back({p + "wv", a.wv.template cast<float>()});
        out.push_back({p + "wproj", a.wproj.template cast<float>()});
    }
    return out;
}

void save_adapters(const std::string& path, const AdapterBank& bank, bool fp16) {
    save_tensors(path, export_adapters(bank), fp16);
}

AdapterBank load_adapters(const std::string& path, const std::vector<LayerSite>& sites) {
    std::vector<NamedTensor> named = load_tensors(path);
    require(named.size() % 4 == 0, ErrorCode::format, "adapter checkpoint tensor count not 4/site");
    AdapterBank bank;
    for (std::size_t i = 0; i < named.size(); i += 4) {
        // Names were written in site order as wq, wk, wv, wproj.
        const std::string& qname = named[i].name;
        require(qname.rfind("adapter.", 0) == 0 && qname.size() > 11 &&
                    qname.substr(qname.size() - 3) == ".wq",
                ErrorCode::format, "unexpected adapter tensor name " + qname);
        std::string core = qname.substr(8, qname.size() - 8 - 3); // "<region>.<index>"
        std::size_t dot = core.find('.');
        require(dot != std::string::npos, ErrorCode::format, "bad adapter site name " + qname);
        LayerSite site;
        site.region = region_from_name(core.substr(0, dot));
        site.index = std::stoi(core.substr(dot + 1));

        const LayerSite* arch = nullptr;
        for (const auto& s : sites)
            if (s.same_block(site)) arch = &s;
        require(arch != nullptr, ErrorCode::cache,
                "adapter checkpoint site " + site.str() + " not in the configured site list");
        site.width = arch->width;

        auto expect = [&](std::size_t j, const char* suffix) -> TensorF {
            require(named[j].name == "adapter." + core + "." + suffix, ErrorCode::format,
                    "unexpected adapter tensor order at " + named[j].name);
            return named[j].tensor;
        };
        AdapterSiteT<float> a;
        a.site = site;
        a.wq = expect(i, "wq");
        a.wk = expect(i + 1, "wk");
        a.wv = expect(i + 2, "wv");
        a.wproj = expect(i + 3, "wproj");
        int d = site.width;
        require(a.wq.shape() == std::vector<int>{d, d} && a.wk.shape() == a.wq.shape() &&
                    a.wv.shape() == a.wq.shape() &&
                    a.wproj.shape() == std::vector<int>{2 * d, d},
                ErrorCode::cache, "adapter weight shapes do not match site " + site.str());
        bank.sites.push_back(std::move(a));
    }
    require(!bank.sites.empty(), ErrorCode::format, "adapter checkpoint is empty");
    return bank;
}

template Tensor<float> adapt<float>(const Tensor<float>&, const Tensor<float>&,
                                    const Tensor<float>&, const AdapterSiteT<float>&,
                                    Tape<float>*, Tensor<float>*);
template Tensor<double> adapt<double>(const Tensor<double>&, const Tensor<double>&,
                                      const Tensor<double>&, const AdapterSiteT<double>&,
                                      Tape<double>*, Tensor<double>*);
template AdapterBankT<float> init_passthrough<float>(const std::vector<LayerSite>&, Rng&);
template AdapterBankT<double> init_passthrough<double>(const std::vector<LayerSite>&, Rng&);
template std::vector<NamedTensor> export_adapters<float>(const AdapterBankT<float>&);
template std::vector<NamedTensor> export_adapters<double>(const AdapterBankT<double>&);

} // namespace dc
