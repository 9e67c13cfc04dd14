// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale trainers: direct codebook learning on raw vectors, a small
// MLP autoencoder with a quantization bottleneck, and multi-stage residual
// training. One trainer owns its model, codebook, and random stream
// exclusively; parallel trainers must use independent state.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "diveq/codebook.hpp"
#include "diveq/losses.hpp"
#include "diveq/metrics.hpp"
#include "diveq/quantizers.hpp"
#include "diveq/replacement.hpp"
#include "diveq/rng.hpp"
#include "diveq/tape.hpp"

namespace diveq {

struct TrainingSchedule {
    std::size_t epochs = 20;
    std::size_t batch_size = 128;
    double learning_rate = 1e-2;
    std::vector<std::size_t> lr_milestones;  // epochs at which the rate halves
    std::string optimizer = "sgd";           // "sgd" or "adam"
    std::size_t sf_warmup = 2;       // quantization-free epochs before SF starts
    std::size_t sf_init_window = 30; // trailing batches kept for delayed init

    void validate() const;  // throws config_error naming the field
};

// Base rate halved once per milestone at or before `epoch`.
double learning_rate_at(const TrainingSchedule& schedule, std::size_t epoch);

// tau = max(tau_start * eta^epoch, tau_min) with
// eta = (tau_min / tau_start)^(1 / n_epochs).
double anneal_tau(std::size_t epoch, const TauSchedule& schedule);

// Splits the buffer into K contiguous groups in arrival order and returns
// a codebook of group means. The buffer must hold at least K rows.
Codebook sf_delayed_init(const Tensor& latent_buffer, std::size_t K);

// -- MLP -----------------------------------------------------------------

struct MlpLayer {
    Tensor weight;  // fan_in x fan_out
    Tensor bias;    // fan_out
};

struct Mlp {
    std::vector<MlpLayer> layers;
    std::string nonlinearity = "tanh";  // "tanh" or "relu"; applied between layers

    static Mlp create(const std::vector<std::size_t>& layer_sizes,
                      const std::string& nonlinearity, Rng& rng);

    struct TapeParams {
        std::vector<ad::Var> weights;
        std::vector<ad::Var> biases;
    };
    TapeParams register_params(ad::Tape& tape) const;
    ad::Var forward(ad::Tape& tape, ad::Var x, const TapeParams& params) const;
    // Forward on raw values, outside any tape.
    Tensor apply(const Tensor& x) const;

    std::size_t input_dim() const { return layers.front().weight.rows(); }
    std::size_t output_dim() const { return layers.back().weight.cols(); }
};

struct AutoencoderArch {
    std::vector<std::size_t> encoder_hidden = {32, 16};
    std::size_t latent_dim = 2;
    std::string nonlinearity = "tanh";
};

// -- Optimizers ------------------------------------------------------------

// Plain SGD or Adam-style adaptive moments, one state slot per parameter.
class Optimizer {
public:
    Optimizer(const std::string& kind, std::size_t n_slots);
    void step(std::size_t slot, Tensor& param, const Tensor& grad, double lr);
    bool adaptive() const { return adam_; }

private:
    bool adam_ = false;
    std::vector<Tensor> m_;
    std::vector<Tensor> v_;
    std::vector<std::size_t> t_;
};

// -- Trainers ----------------------------------------------------------------

enum class CodebookInit {
    SPREAD_SAMPLE,  // distance-weighted distinct data rows (default)
    DATA_SAMPLE,    // uniformly chosen distinct data rows
    COLLAPSED,      // every codeword at the data mean (adversarial)
    GROUP_MEANS,    // delayed-start group means
};

struct DirectTrainResult {
    Codebook codebook;
    double final_distortion = 0.0;  // hard nearest-codeword distortion on `data`
    std::vector<MetricsRecord> metrics;
};

// Minimizes quantization error of `data` (N x D, N >= K) through the
// configured estimator. EMA updates replace gradient steps for the EMA
// method; SF methods never apply a replacement policy.
DirectTrainResult train_codebook_direct(const Tensor& data, std::size_t K,
                                        const QuantizerConfig& config,
                                        const TrainingSchedule& schedule,
                                        const ReplacementPolicy* policy, std::uint64_t seed,
                                        CodebookInit init = CodebookInit::SPREAD_SAMPLE);

struct AutoencoderTrainResult {
    Mlp encoder;
    Mlp decoder;
    Codebook codebook;
    double test_mse = 0.0;  // hard-quantized reconstruction error on the test split
    std::vector<MetricsRecord> metrics;
};

AutoencoderTrainResult train_autoencoder(const Tensor& train, const Tensor& test,
                                         std::size_t K, const AutoencoderArch& arch,
                                         const QuantizerConfig& config,
                                         const TrainingSchedule& schedule,
                                         const ReplacementPolicy* policy,
                                         std::uint64_t seed);

struct RvqTrainResult {
    std::vector<Codebook> codebooks;
    double final_distortion = 0.0;  // hard multi-stage distortion on `data`
    std::vector<MetricsRecord> metrics;
};

RvqTrainResult train_codebook_rvq(const Tensor& data, std::size_t stages, std::size_t K,
                                  const QuantizerConfig& config,
                                  const TrainingSchedule& schedule, std::uint64_t seed);

// Hard multi-stage quantization error of `data` under fixed codebooks.
double rvq_hard_distortion(const Tensor& data, const std::vector<Codebook>& codebooks);

// Indices a quantization touches for usage accounting; SF estimators touch
// both endpoints of the winning segment.
std::vector<std::size_t> touched_indices(Method method, const QuantizationResult& q);

}  // namespace diveq
