#pragma once
// Two training phases over the procedural dataset:
//   (a) pretrain_base: fit the denoiser itself on (caption, target) pairs
//       with text dropout, so classifier-free text guidance is well-posed;
//   (b) train_adapters: freeze the base and fit only the per-site adapter
//       matrices with cached reference conditioning and condition dropout.
//
// Every stochastic choice for a sample (condition dropout, timestep, the
// reference augmentation, the cache's noise draw, the target's noise draw)
// comes from an Rng seeded by that sample's own seed, so a sample's loss
// contribution is a pure function of (triplet, seed) — independent of batch
// position, batch size, or worker scheduling.

#include <cstdint>
#include <string>
#include <type_traits>
#include <vector>

#include "dc/adapter.hpp"
#include "dc/cache.hpp"
#include "dc/data.hpp"
#include "dc/denoiser.hpp"
#include "dc/ops.hpp"
#include "dc/rng.hpp"
#include "dc/sampler.hpp"
#include "dc/tensor.hpp"
#include "dc/text.hpp"

namespace dc {

struct TrainConfig {
    float lr = 1e-5f; // adapter-phase default
    int batch_size = 16;
    int steps = 2000;
    float weight_decay = 0.01f;
    // Per-sample condition dropout: with joint_drop_p both conditions drop,
    // with text_drop_p only the caption, with image_drop_p only the
    // reference (adapters left out of the graph entirely). The remainder
    // trains fully conditioned. pretrain_base uses text_drop_p alone.
    float text_drop_p = 0.1f;
    float image_drop_p = 0.1f;
    float joint_drop_p = 0.05f;
    float grad_clip = 0.0f; // global-norm clip; 0 disables
    std::uint64_t seed = 0;

    void validate() const; // config error on violation
    bool operator==(const TrainConfig&) const = default;
};

struct LossPoint {
    int step = 0;
    double loss = 0.0;
    float lr = 0.0f;
};

struct TrainResult {
    std::vector<LossPoint> curve;
    std::vector<std::string> optimized; // names of every tensor the optimizer touched
};

// Watchdog applied to every loss value a training loop produces. A non-finite
// loss aborts immediately; a loss above 10x the first observed value that
// persists for 100 consecutive steps aborts as a runaway run. Both raise a
// numeric error carrying the offending step.
class DivergenceGuard {
  public:
    void observe(int step, double loss);

  private:
    double initial_ = -1.0;
    int high_streak_ = 0;
};

// Aggregated draw counters, for rate/uniformity checks.
struct BatchStats {
    long long samples = 0;
    long long text_dropped = 0;
    long long image_dropped = 0;
    long long joint_dropped = 0;
    std::vector<int> timesteps; // one entry per sample
};

enum class CondDrop { none, joint, text_only, image_only };

// Category for one uniform draw u in [0,1): stacked intervals in the fixed
// order joint, text, image; everything above keeps both conditions.
CondDrop draw_cond_drop(double u, const TrainConfig& cfg);

// Training timesteps are uniform over the full ladder {1..T}.
int draw_timestep(Rng& rng, int time_steps);

// One triplet plus the seed that drives all of its stochastic draws.
struct TrainSample {
    Triplet triplet;
    std::uint64_t seed = 0;
};

// Scalar score-matching loss for one fully specified example: noise `target`
// at `t` (draws from noise_rng), run the denoiser with the given caption and
// — when `bank` and `reference` are present — a cache freshly built from the
// reference at the personalization timestep, and return mean-squared error
// between predicted and drawn noise. The cache build is constant input:
// gradients never flow through it (the base stays frozen and the cache is
// data, not graph). Templated so gradient checks can run the whole path in
// float64.
template <class S>
Tensor<S> example_loss(const DenoiserT<S>& den, const NoiseSchedule& sched,
                       const std::vector<LayerSite>& sites,
                       const std::type_identity_t<AdapterBankT<S>>* bank,
                       const Tensor<S>& target, const TokenSequence& caption, int t,
                       std::uint64_t cache_seed, const std::type_identity_t<Tensor<S>>* reference,
                       const std::type_identity_t<Tensor<S>>* mask, Rng& noise_rng,
                       Tape<S>* tape);

// Batch loss for phase (b): averages example_loss over the batch with
// per-sample dropout / timestep / augmentation draws, and accumulates
// d(loss)/d(adapter matrices) into the bank's gradient buffers (callers zero
// them between steps). The base denoiser is const. Non-finite losses abort
// with a numeric error naming the offending sample.
double adapter_loss(const Denoiser& den, const NoiseSchedule& sched,
                    const std::vector<LayerSite>& sites, AdapterBank& bank,
                    const TrainConfig& cfg, const std::vector<TrainSample>& batch,
                    BatchStats* stats = nullptr);

// Phase (b): decoupled-weight-decay Adam over the adapter matrices only,
// sampling batches from `dataset` by cfg.seed. The bank is updated in place;
// the curve holds one point per step. Aborts with a numeric error if the
// loss exceeds 10x its initial value for 100 consecutive steps.
TrainResult train_adapters(const Denoiser& den, const NoiseSchedule& sched,
                           const std::vector<LayerSite>& sites, AdapterBank& bank,
                           const std::vector<Triplet>& dataset, const TrainConfig& cfg,
                           BatchStats* stats = nullptr);

// Phase (a): the same loop over every denoiser parameter, text-conditioned
// targets with text dropout and no reference/adapters.
TrainResult pretrain_base(Denoiser& den, const NoiseSchedule& sched,
                          const std::vector<Triplet>& dataset, const TrainConfig& cfg,
                          BatchStats* stats = nullptr);

// Loss log artifact: header "step,loss,lr", one row per curve point, floats
// printed with round-trip precision. The reader is strict (format error on
// any malformed header or row) and recovers the exact values, so
// write(read(write(curve))) is byte-identical.
void write_loss_csv(const std::string& path, const std::vector<LossPoint>& curve);
std::vector<LossPoint> read_loss_csv(const std::string& path);

} // namespace dc
