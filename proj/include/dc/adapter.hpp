#pragma once
// Conditioning adapters: per-site single-head cross-attention from the
// generation features (queries) to cached reference features (keys/values),
// concatenated with the self-attention output and projected back to width d:
//
//   q = h Wq,  k = r Wk,  v = r Wv          (Wq,Wk,Wv: d x d, no biases)
//   a_c = softmax(q k^T / sqrt(d)) v
//   out = [a_self ; a_c] Wproj              (Wproj: 2d x d)
//
// Pass-through initialization sets Wproj = [[I],[0]], so out == a_self with
// the reference branch multiplied by an exactly-zero block; the adapted
// network then equals the base network bit-for-bit at step 0, and flipping
// `enabled` off restores the base network at any time.

#include <string>
#include <type_traits>
#include <vector>

#include "dc/denoiser.hpp"
#include "dc/ops.hpp"
#include "dc/rng.hpp"
#include "dc/serialize.hpp"
#include "dc/tensor.hpp"

namespace dc {

template <class S> struct AdapterSiteT {
    LayerSite site;
    Tensor<S> wq, wk, wv, wproj;
};

template <class S> struct AdapterBankT {
    std::vector<AdapterSiteT<S>> sites; // ordered as configured
    bool enabled = true;

    const AdapterSiteT<S>* find(const LayerSite& s) const {
        for (const auto& a : sites)
            if (a.site.same_block(s)) return &a;
        return nullptr;
    }
    std::vector<LayerSite> site_list() const {
        std::vector<LayerSite> out;
        for (const auto& a : sites) out.push_back(a.site);
        return out;
    }
};

using AdapterBank = AdapterBankT<float>;

// Eq. above for one site. h (N x d) are the block's normalized pre-attention
// features, a_self (N x d) its self-attention output, h_ref (M x d) the
// cached reference features. attention_rows, when given, receives a copy of
// the softmax rows (N x M) for probes. Width mismatches are cache errors.
template <class S>
Tensor<S> adapt(const Tensor<S>& h, const Tensor<S>& a_self, const Tensor<S>& h_ref,
                const AdapterSiteT<S>& w, std::type_identity_t<Tape<S>>* tape = nullptr,
                std::type_identity_t<Tensor<S>>* attention_rows = nullptr);

// Fresh bank: Wq/Wk/Wv ~ N(0, 0.02^2), Wproj = [[I],[0]] exactly.
template <class S> AdapterBankT<S> init_passthrough(const std::vector<LayerSite>& sites, Rng& rng);

// Trainable parameter count: sum over sites of 5*d^2 (three d x d projections
// plus the 2d x d output projection, no biases).
long long count_adapter_params(const std::vector<LayerSite>& sites);
long long count_adapter_params(const std::vector<int>& widths);

// Checkpoint names adapter.<region>.<index>.{wq,wk,wv,wproj}; fp16 mode
// halves the file for size reporting and loads back with half rounding.
template <class S>
std::vector<NamedTensor> export_adapters(const AdapterBankT<S>& bank);
void save_adapters(const std::string& path, const AdapterBank& bank, bool fp16 = false);

// Loading validates names against `sites` (the architecture's site list with
// widths) and restores bank order from the file.
AdapterBank load_adapters(const std::string& path, const std::vector<LayerSite>& sites);

} // namespace dc
