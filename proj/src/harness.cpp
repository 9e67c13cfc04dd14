// SPDX-License-Identifier: Apache-2.0

#include "diveq/harness.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "diveq/errors.hpp"

namespace diveq {

void TrainingSchedule::validate() const {
    if (epochs < 1) throw config_error("schedule.epochs: must be >= 1");
    if (batch_size < 1) throw config_error("schedule.batch_size: must be >= 1");
    if (!(learning_rate > 0.0)) throw config_error("schedule.learning_rate: must be > 0");
    if (optimizer != "sgd" && optimizer != "adam") {
        throw config_error("schedule.optimizer: must be 'sgd' or 'adam'");
    }
    for (std::size_t i = 0; i < lr_milestones.size(); ++i) {
        if (lr_milestones[i] >= epochs) {
            throw config_error("schedule.lr_milestones: milestone beyond epoch count");
        }
        if (i > 0 && lr_milestones[i] <= lr_milestones[i - 1]) {
            throw config_error("schedule.lr_milestones: must be strictly increasing");
        }
    }
    if (sf_init_window < 1) throw config_error("schedule.sf_init_window: must be >= 1");
}

double learning_rate_at(const TrainingSchedule& schedule, std::size_t epoch) {
    double lr = schedule.learning_rate;
    for (std::size_t m : schedule.lr_milestones) {
        if (epoch >= m) lr *= 0.5;
    }
    return lr;
}

double anneal_tau(std::size_t epoch, const TauSchedule& schedule) {
    const double eta = std::pow(schedule.tau_min / schedule.tau_start,
                                1.0 / static_cast<double>(schedule.n_epochs));
    return std::max(schedule.tau_start * std::pow(eta, static_cast<double>(epoch)),
                    schedule.tau_min);
}

Codebook sf_delayed_init(const Tensor& latent_buffer, std::size_t K) {
    if (latent_buffer.rank() != 2) {
        throw shape_error("sf_delayed_init: expected a matrix, got " +
                          latent_buffer.shape_str());
    }
    const std::size_t n = latent_buffer.rows(), d = latent_buffer.cols();
    if (n < K) {
        throw config_error("sf_delayed_init: buffer holds " + std::to_string(n) +
                           " latents for K=" + std::to_string(K) +
                           "; enlarge the init window");
    }
    Tensor vectors({K, d});
    for (std::size_t g = 0; g < K; ++g) {
        const std::size_t begin = g * n / K;
        const std::size_t end = (g + 1) * n / K;
        for (std::size_t r = begin; r < end; ++r)
            for (std::size_t c = 0; c < d; ++c)
                vectors.data[g * d + c] += latent_buffer.data[r * d + c];
        const double inv = 1.0 / static_cast<double>(end - begin);
        for (std::size_t c = 0; c < d; ++c) vectors.data[g * d + c] *= inv;
    }
    return Codebook::init(std::move(vectors));
}

// -- MLP ---------------------------------------------------------------------

Mlp Mlp::create(const std::vector<std::size_t>& layer_sizes, const std::string& nonlinearity,
                Rng& rng) {
    if (layer_sizes.size() < 2) {
        throw config_error("mlp: need at least input and output sizes");
    }
    if (nonlinearity != "tanh" && nonlinearity != "relu") {
        throw config_error("mlp.nonlinearity: must be 'tanh' or 'relu'");
    }
    Mlp mlp;
    mlp.nonlinearity = nonlinearity;
    for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) {
        const std::size_t fan_in = layer_sizes[l], fan_out = layer_sizes[l + 1];
        MlpLayer layer;
        layer.weight = Tensor({fan_in, fan_out});
        layer.bias = Tensor({fan_out});
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        for (double& w : layer.weight.data) w = rng.uniform(-bound, bound);
        mlp.layers.push_back(std::move(layer));
    }
    return mlp;
}

Mlp::TapeParams Mlp::register_params(ad::Tape& tape) const {
    TapeParams params;
    for (const MlpLayer& layer : layers) {
        params.weights.push_back(tape.input(layer.weight));
        params.biases.push_back(tape.input(layer.bias));
    }
    return params;
}

ad::Var Mlp::forward(ad::Tape& tape, ad::Var x, const TapeParams& params) const {
    ad::Var h = x;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        h = ad::add_rowvec(ad::matmul(h, params.weights[l]), params.biases[l]);
        if (l + 1 < layers.size()) {
            h = nonlinearity == "tanh" ? ad::tanh(h) : ad::relu(h);
        }
    }
    return h;
}

Tensor Mlp::apply(const Tensor& x) const {
    ad::Tape tape;
    ad::Var in = tape.constant(x);
    TapeParams params;
    for (const MlpLayer& layer : layers) {
        params.weights.push_back(tape.constant(layer.weight));
        params.biases.push_back(tape.constant(layer.bias));
    }
    return forward(tape, in, params).value();
}

// -- Optimizer -----------------------------------------------------------------

Optimizer::Optimizer(const std::string& kind, std::size_t n_slots) {
    if (kind == "adam") {
        adam_ = true;
    } else if (kind != "sgd") {
        throw config_error("optimizer: must be 'sgd' or 'adam'");
    }
    m_.resize(n_slots);
    v_.resize(n_slots);
    t_.assign(n_slots, 0);
}

void Optimizer::step(std::size_t slot, Tensor& param, const Tensor& grad, double lr) {
    if (!param.same_shape(grad)) {
        throw shape_error("optimizer: grad shape " + grad.shape_str() + " vs param " +
                          param.shape_str());
    }
    if (!adam_) {
        for (std::size_t i = 0; i < param.numel(); ++i) param.data[i] -= lr * grad.data[i];
        return;
    }
    constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
    if (m_[slot].data.empty()) {
        m_[slot] = Tensor(param.shape, 0.0);
        v_[slot] = Tensor(param.shape, 0.0);
    }
    const std::size_t t = ++t_[slot];
    const double bias1 = 1.0 - std::pow(kBeta1, static_cast<double>(t));
    const double bias2 = 1.0 - std::pow(kBeta2, static_cast<double>(t));
    for (std::size_t i = 0; i < param.numel(); ++i) {
        const double g = grad.data[i];
        m_[slot].data[i] = kBeta1 * m_[slot].data[i] + (1.0 - kBeta1) * g;
        v_[slot].data[i] = kBeta2 * v_[slot].data[i] + (1.0 - kBeta2) * g * g;
        const double mhat = m_[slot].data[i] / bias1;
        const double vhat = v_[slot].data[i] / bias2;
        param.data[i] -= lr * mhat / (std::sqrt(vhat) + kEps);
    }
}

// -- shared trainer pieces ----------------------------------------------------

std::vector<std::size_t> touched_indices(Method method, const QuantizationResult& q) {
    if (!method_is_sf(method)) return q.indices;
    std::vector<std::size_t> touched;
    touched.reserve(q.indices.size() * 2);
    for (std::size_t seg : q.indices) {
        touched.push_back(seg);
        touched.push_back(seg + 1);
    }
    return touched;
}

namespace {

struct EpochShuffler {
    std::vector<std::size_t> order;

    explicit EpochShuffler(std::size_t n) : order(n) {
        std::iota(order.begin(), order.end(), 0);
    }

    void reshuffle(Rng& rng) {
        for (std::size_t i = order.size() - 1; i > 0; --i) {
            const std::size_t j = rng.integer(i + 1);
            std::swap(order[i], order[j]);
        }
    }

    Tensor batch(const Tensor& data, std::size_t start, std::size_t count) const {
        Tensor out({count, data.cols()});
        for (std::size_t i = 0; i < count; ++i)
            std::copy_n(data.row(order[start + i]), data.cols(), out.row(i));
        return out;
    }
};

Tensor sample_rows(const Tensor& data, std::size_t count, Rng& rng) {
    // Seeded partial Fisher-Yates pick of `count` distinct rows.
    std::vector<std::size_t> order(data.rows());
    std::iota(order.begin(), order.end(), 0);
    Tensor out({count, data.cols()});
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t j = i + rng.integer(order.size() - i);
        std::swap(order[i], order[j]);
        std::copy_n(data.row(order[i]), data.cols(), out.row(i));
    }
    return out;
}

// Distance-weighted seeding: each new seed is drawn with probability
// proportional to its squared distance from the ones already chosen.
Tensor spread_rows(const Tensor& data, std::size_t count, Rng& rng) {
    const std::size_t n = data.rows(), d = data.cols();
    Tensor seeds({count, d});
    std::copy_n(data.row(rng.integer(n)), d, seeds.row(0));
    std::vector<double> dist2(n, std::numeric_limits<double>::infinity());
    for (std::size_t k = 1; k < count; ++k) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            dist2[i] = std::min(dist2[i],
                                squared_distance(data.row(i), seeds.row(k - 1), d));
            total += dist2[i];
        }
        std::size_t pick = n - 1;
        if (total > 0.0) {
            const double u = rng.uniform() * total;
            double acc = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                acc += dist2[i];
                if (acc >= u) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = rng.integer(n);
        }
        std::copy_n(data.row(pick), d, seeds.row(k));
    }
    return seeds;
}

// Reorders rows into a short chain (greedy nearest-neighbor walk). Segment
// estimators quantize between consecutive codewords, so neighboring rows
// should be geometric neighbors.
Tensor chain_order_rows(const Tensor& rows) {
    const std::size_t k = rows.rows(), d = rows.cols();
    std::vector<std::size_t> remaining(k);
    std::iota(remaining.begin(), remaining.end(), 0);
    Tensor out({k, d});
    std::size_t current = 0;
    for (std::size_t step = 0; step < k; ++step) {
        std::copy_n(rows.row(remaining[current]), d, out.row(step));
        const std::size_t at = remaining[current];
        remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(current));
        if (remaining.empty()) break;
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < remaining.size(); ++i) {
            const double sq = squared_distance(rows.row(at), rows.row(remaining[i]), d);
            if (sq < best) {
                best = sq;
                current = i;
            }
        }
    }
    return out;
}

Codebook init_codebook(const Tensor& data, std::size_t K, Method method, CodebookInit init,
                       const TrainingSchedule& schedule, Rng& rng) {
    if (init == CodebookInit::GROUP_MEANS) {
        const std::size_t window =
            std::min(data.rows(), std::max<std::size_t>(
                                      K, schedule.sf_init_window * schedule.batch_size));
        return sf_delayed_init(sample_rows(data, window, rng), K);
    }
    if (init == CodebookInit::COLLAPSED) {
        Tensor mean({1, data.cols()});
        for (std::size_t r = 0; r < data.rows(); ++r)
            for (std::size_t c = 0; c < data.cols(); ++c) mean.data[c] += data.at(r, c);
        for (double& v : mean.data) v /= static_cast<double>(data.rows());
        Tensor vectors({K, data.cols()});
        for (std::size_t j = 0; j < K; ++j)
            std::copy_n(mean.data.data(), data.cols(), vectors.row(j));
        return Codebook::init(std::move(vectors));
    }
    Tensor seeds = init == CodebookInit::SPREAD_SAMPLE ? spread_rows(data, K, rng)
                                                       : sample_rows(data, K, rng);
    if (method_is_sf(method) && K >= 2) seeds = chain_order_rows(seeds);
    return Codebook::init(std::move(seeds));
}

double batch_perplexity_fraction(const std::vector<std::uint64_t>& counts,
                                 MetricsRecord& rec, double batch_distortion) {
    const UsageStats stats = usage_stats_from_counts(counts);
    rec.perplexity = stats.perplexity;
    rec.usage_fraction = stats.usage_fraction;
    if (!stats.no_data) {
        const DistortionPerBit dpb = distortion_per_bit(batch_distortion, stats);
        rec.distortion_per_bit = dpb.value;
    }
    return stats.perplexity;
}

}  // namespace

// -- direct codebook training --------------------------------------------------

DirectTrainResult train_codebook_direct(const Tensor& data, std::size_t K,
                                        const QuantizerConfig& config,
                                        const TrainingSchedule& schedule,
                                        const ReplacementPolicy* policy, std::uint64_t seed,
                                        CodebookInit init) {
    config.validate();
    schedule.validate();
    if (data.rank() != 2 || data.rows() < K) {
        throw config_error("train_codebook_direct: need at least K data rows");
    }
    if (policy) policy->validate();
    const bool sf = method_is_sf(config.method);
    const bool uses_gradients = config.method != Method::HARD && config.method != Method::EMA;

    Rng rng(seed);
    Codebook codebook = init_codebook(data, K, config.method, init, schedule, rng);

    const std::size_t batch = std::min(schedule.batch_size, data.rows());
    const std::size_t batches_per_epoch = std::max<std::size_t>(1, data.rows() / batch);
    const std::size_t total_iters = schedule.epochs * batches_per_epoch;

    EpochShuffler shuffler(data.rows());
    Optimizer opt(schedule.optimizer, 1);
    DirectTrainResult result;
    result.metrics.reserve(total_iters);

    std::size_t iteration = 0;
    for (std::size_t epoch = 0; epoch < schedule.epochs; ++epoch) {
        shuffler.reshuffle(rng);
        const double lr = learning_rate_at(schedule, epoch);
        const double tau =
            config.method == Method::STGS ? anneal_tau(epoch, config.tau) : 0.0;
        std::vector<std::uint64_t> epoch_counts(K, 0);

        for (std::size_t b = 0; b < batches_per_epoch; ++b) {
            ++iteration;
            Tensor batch_data = shuffler.batch(data, b * batch, batch);
            MetricsRecord rec;
            rec.iteration = iteration;
            rec.epoch = epoch;
            rec.lr = lr;
            rec.tau = tau;
            try {
                ad::Tape tape;
                ad::Var cb_var = tape.input(codebook.vectors);
                ad::Var z = tape.constant(batch_data);
                QuantizationResult q = quantize(tape, z, cb_var, config, tau, rng);

                LossBreakdown loss;
                if (method_is_noise_family(config.method)) {
                    loss = loss_noise_family(tape, z, q.z_q);
                } else if (config.method == Method::STGS) {
                    loss = loss_gs(tape, z, q.z_q, q.soft_assignments, config.phi);
                } else {
                    loss = loss_ste_family(tape, z, q.z_q, z, q, cb_var, config.alpha,
                                           config.beta,
                                           /*include_codebook_term=*/config.method !=
                                               Method::EMA);
                }
                if (!std::isfinite(loss.total)) {
                    throw numeric_error("loss is not finite");
                }

                if (uses_gradients) {
                    tape.backward(loss.total_var);
                    opt.step(0, codebook.vectors, tape.grad(cb_var), lr);
                } else if (config.method == Method::EMA) {
                    ema_update(codebook, batch_data, q.indices, config.gamma);
                }

                const std::vector<std::size_t> touched = touched_indices(config.method, q);
                record_usage(codebook, touched);
                for (std::size_t idx : touched) ++epoch_counts[idx];

                rec.total_loss = loss.total;
                rec.reconstruction = loss.reconstruction;
                rec.codebook_term = loss.codebook_term;
                rec.commitment_term = loss.commitment_term;
                rec.kl_term = loss.kl_term;
                rec.distortion = q.distortion;
                batch_perplexity_fraction(epoch_counts, rec, q.distortion);

                if (policy && !sf && should_replace(iteration, total_iters, *policy)) {
                    rec.replaced_count = replace(codebook, *policy, rng).size();
                }
            } catch (const numeric_error& e) {
                throw runtime_abort("training diverged at iteration " +
                                    std::to_string(iteration) + " (last good " +
                                    std::to_string(iteration - 1) + "): " + e.what());
            }
            result.metrics.push_back(rec);
        }
    }

    const NearestResult final_assign = nearest(data, codebook);
    double acc = 0.0;
    for (double dist : final_assign.distances) acc += dist * dist;
    result.final_distortion = acc / static_cast<double>(data.rows());
    result.codebook = std::move(codebook);
    return result;
}

// -- autoencoder training -------------------------------------------------------

namespace {

constexpr double kCodebookInitStd = 0.5;

struct AutoencoderParams {
    Mlp::TapeParams enc;
    Mlp::TapeParams dec;
    ad::Var codebook;
};

}  // namespace

AutoencoderTrainResult train_autoencoder(const Tensor& train, const Tensor& test,
                                         std::size_t K, const AutoencoderArch& arch,
                                         const QuantizerConfig& config,
                                         const TrainingSchedule& schedule,
                                         const ReplacementPolicy* policy,
                                         std::uint64_t seed) {
    config.validate();
    schedule.validate();
    if (train.rank() != 2 || train.rows() < 1) {
        throw config_error("train_autoencoder: empty training data");
    }
    if (policy) policy->validate();
    const bool sf = method_is_sf(config.method);
    const std::size_t warmup_epochs = sf ? std::min(schedule.sf_warmup, schedule.epochs) : 0;
    const std::size_t dims = train.cols();

    Rng rng(seed);
    std::vector<std::size_t> enc_sizes{dims};
    enc_sizes.insert(enc_sizes.end(), arch.encoder_hidden.begin(), arch.encoder_hidden.end());
    enc_sizes.push_back(arch.latent_dim);
    std::vector<std::size_t> dec_sizes{arch.latent_dim};
    dec_sizes.insert(dec_sizes.end(), arch.encoder_hidden.rbegin(),
                     arch.encoder_hidden.rend());
    dec_sizes.push_back(dims);

    AutoencoderTrainResult result;
    result.encoder = Mlp::create(enc_sizes, arch.nonlinearity, rng);
    result.decoder = Mlp::create(dec_sizes, arch.nonlinearity, rng);

    Tensor cb_init({K, arch.latent_dim});
    for (double& v : cb_init.data) v = kCodebookInitStd * rng.normal();
    Codebook codebook = Codebook::init(std::move(cb_init));

    const std::size_t batch = std::min(schedule.batch_size, train.rows());
    const std::size_t batches_per_epoch = std::max<std::size_t>(1, train.rows() / batch);
    const std::size_t total_iters = schedule.epochs * batches_per_epoch;

    const std::size_t n_layers = result.encoder.layers.size() + result.decoder.layers.size();
    Optimizer opt(schedule.optimizer, 2 * n_layers + 1);
    const std::size_t codebook_slot = 2 * n_layers;

    EpochShuffler shuffler(train.rows());
    std::vector<Tensor> latent_window;  // trailing batches during warmup
    bool codebook_ready = !sf;

    std::size_t iteration = 0;
    for (std::size_t epoch = 0; epoch < schedule.epochs; ++epoch) {
        shuffler.reshuffle(rng);
        const double lr = learning_rate_at(schedule, epoch);
        const double tau =
            config.method == Method::STGS ? anneal_tau(epoch, config.tau) : 0.0;
        const bool warmup = epoch < warmup_epochs;
        std::vector<std::uint64_t> epoch_counts(K, 0);

        if (sf && !warmup && !codebook_ready) {
            // Delayed start: seed the codebook from the trailing latents.
            std::size_t rows = 0;
            for (const Tensor& t : latent_window) rows += t.rows();
            Tensor buffer({rows, arch.latent_dim});
            std::size_t at = 0;
            for (const Tensor& t : latent_window) {
                std::copy_n(t.data.data(), t.numel(), buffer.data.data() + at);
                at += t.numel();
            }
            codebook = sf_delayed_init(buffer, K);
            codebook_ready = true;
            latent_window.clear();
        }

        for (std::size_t b = 0; b < batches_per_epoch; ++b) {
            ++iteration;
            Tensor batch_data = shuffler.batch(train, b * batch, batch);
            MetricsRecord rec;
            rec.iteration = iteration;
            rec.epoch = epoch;
            rec.lr = lr;
            rec.tau = tau;
            try {
                ad::Tape tape;
                AutoencoderParams params{result.encoder.register_params(tape),
                                         result.decoder.register_params(tape),
                                         tape.input(codebook.vectors)};
                ad::Var x = tape.constant(batch_data);
                ad::Var z = result.encoder.forward(tape, x, params.enc);

                LossBreakdown loss;
                QuantizationResult q;
                bool quantized = false;
                if (warmup) {
                    ad::Var x_r = result.decoder.forward(tape, z, params.dec);
                    loss = loss_noise_family(tape, x, x_r);
                    Tensor latents = z.value();
                    latent_window.push_back(std::move(latents));
                    if (latent_window.size() > schedule.sf_init_window) {
                        latent_window.erase(latent_window.begin());
                    }
                } else {
                    q = quantize(tape, z, params.codebook, config, tau, rng);
                    quantized = true;
                    ad::Var x_r = result.decoder.forward(tape, q.z_q, params.dec);
                    if (method_is_noise_family(config.method)) {
                        loss = loss_noise_family(tape, x, x_r);
                    } else if (config.method == Method::STGS) {
                        loss = loss_gs(tape, x, x_r, q.soft_assignments, config.phi);
                    } else {
                        loss = loss_ste_family(tape, x, x_r, z, q, params.codebook,
                                               config.alpha, config.beta,
                                               config.method != Method::EMA);
                    }
                }
                if (!std::isfinite(loss.total)) {
                    throw numeric_error("loss is not finite");
                }

                tape.backward(loss.total_var);
                std::size_t slot = 0;
                for (std::size_t l = 0; l < result.encoder.layers.size(); ++l) {
                    opt.step(slot++, result.encoder.layers[l].weight,
                             tape.grad(params.enc.weights[l]), lr);
                    opt.step(slot++, result.encoder.layers[l].bias,
                             tape.grad(params.enc.biases[l]), lr);
                }
                for (std::size_t l = 0; l < result.decoder.layers.size(); ++l) {
                    opt.step(slot++, result.decoder.layers[l].weight,
                             tape.grad(params.dec.weights[l]), lr);
                    opt.step(slot++, result.decoder.layers[l].bias,
                             tape.grad(params.dec.biases[l]), lr);
                }
                if (quantized && config.method != Method::EMA &&
                    config.method != Method::HARD) {
                    opt.step(codebook_slot, codebook.vectors, tape.grad(params.codebook), lr);
                }
                if (quantized && config.method == Method::EMA) {
                    ema_update(codebook, z.value(), q.indices, config.gamma);
                }

                rec.total_loss = loss.total;
                rec.reconstruction = loss.reconstruction;
                rec.codebook_term = loss.codebook_term;
                rec.commitment_term = loss.commitment_term;
                rec.kl_term = loss.kl_term;
                if (quantized) {
                    const std::vector<std::size_t> touched =
                        touched_indices(config.method, q);
                    record_usage(codebook, touched);
                    for (std::size_t idx : touched) ++epoch_counts[idx];
                    rec.distortion = q.distortion;
                    batch_perplexity_fraction(epoch_counts, rec, q.distortion);
                    if (policy && !sf && should_replace(iteration, total_iters, *policy)) {
                        rec.replaced_count = replace(codebook, *policy, rng).size();
                    }
                } else {
                    rec.perplexity = 1.0;
                }
            } catch (const numeric_error& e) {
                throw runtime_abort("training diverged at iteration " +
                                    std::to_string(iteration) + " (last good " +
                                    std::to_string(iteration - 1) + "): " + e.what());
            }
            result.metrics.push_back(rec);
        }
    }

    // Inference-style evaluation: encode, hard-assign, decode.
    if (test.rows() > 0) {
        const Tensor latents = result.encoder.apply(test);
        const NearestResult assign = nearest(latents, codebook);
        Tensor hard({test.rows(), arch.latent_dim});
        for (std::size_t i = 0; i < test.rows(); ++i)
            std::copy_n(codebook.vectors.row(assign.indices[i]), arch.latent_dim,
                        hard.row(i));
        const Tensor recon = result.decoder.apply(hard);
        double acc = 0.0;
        for (std::size_t i = 0; i < recon.numel(); ++i) {
            const double diff = recon.data[i] - test.data[i];
            acc += diff * diff;
        }
        result.test_mse = acc / static_cast<double>(recon.numel());
    }
    result.codebook = std::move(codebook);
    return result;
}

// -- residual training ----------------------------------------------------------

double rvq_hard_distortion(const Tensor& data, const std::vector<Codebook>& codebooks) {
    if (codebooks.empty()) throw config_error("rvq: no codebooks");
    Tensor residual = data;
    for (const Codebook& cb : codebooks) {
        const NearestResult assign = nearest(residual, cb);
        for (std::size_t i = 0; i < residual.rows(); ++i) {
            const double* c = cb.vectors.row(assign.indices[i]);
            for (std::size_t j = 0; j < residual.cols(); ++j)
                residual.at(i, j) -= c[j];
        }
    }
    double acc = 0.0;
    for (double v : residual.data) acc += v * v;
    return acc / static_cast<double>(residual.rows());
}

RvqTrainResult train_codebook_rvq(const Tensor& data, std::size_t stages, std::size_t K,
                                  const QuantizerConfig& config,
                                  const TrainingSchedule& schedule, std::uint64_t seed) {
    config.validate();
    schedule.validate();
    if (stages < 1) throw config_error("rvq: stages must be >= 1");
    if (data.rank() != 2 || data.rows() < K) {
        throw config_error("train_codebook_rvq: need at least K data rows");
    }

    Rng rng(seed);
    // Greedy stage initialization from the running hard residuals.
    std::vector<Codebook> codebooks;
    Tensor residual = data;
    for (std::size_t s = 0; s < stages; ++s) {
        codebooks.push_back(Codebook::init(sample_rows(residual, K, rng)));
        const NearestResult assign = nearest(residual, codebooks.back());
        for (std::size_t i = 0; i < residual.rows(); ++i) {
            const double* c = codebooks.back().vectors.row(assign.indices[i]);
            for (std::size_t j = 0; j < residual.cols(); ++j) residual.at(i, j) -= c[j];
        }
    }

    const std::size_t batch = std::min(schedule.batch_size, data.rows());
    const std::size_t batches_per_epoch = std::max<std::size_t>(1, data.rows() / batch);

    EpochShuffler shuffler(data.rows());
    Optimizer opt(schedule.optimizer, stages);
    RvqTrainResult result;

    std::size_t iteration = 0;
    for (std::size_t epoch = 0; epoch < schedule.epochs; ++epoch) {
        shuffler.reshuffle(rng);
        const double lr = learning_rate_at(schedule, epoch);
        const double tau =
            config.method == Method::STGS ? anneal_tau(epoch, config.tau) : 0.0;
        std::vector<std::vector<std::uint64_t>> epoch_counts(
            stages, std::vector<std::uint64_t>(K, 0));

        for (std::size_t b = 0; b < batches_per_epoch; ++b) {
            ++iteration;
            Tensor batch_data = shuffler.batch(data, b * batch, batch);
            MetricsRecord rec;
            rec.iteration = iteration;
            rec.epoch = epoch;
            rec.lr = lr;
            rec.tau = tau;
            try {
                ad::Tape tape;
                std::vector<ad::Var> cb_vars;
                cb_vars.reserve(stages);
                for (Codebook& cb : codebooks) cb_vars.push_back(tape.input(cb.vectors));
                ad::Var z = tape.constant(batch_data);
                ResidualStageResult rvq =
                    quantize_residual(tape, z, cb_vars, config, tau, rng);

                ad::Var total;
                LossBreakdown loss;
                if (method_is_noise_family(config.method)) {
                    loss = loss_noise_family(tape, z, rvq.z_hat_total);
                    total = loss.total_var;
                } else if (config.method == Method::STGS) {
                    loss = loss_gs(tape, z, rvq.z_hat_total,
                                   rvq.stage_results[0].soft_assignments, config.phi);
                    total = loss.total_var;
                    for (std::size_t s = 1; s < stages; ++s) {
                        ad::Var kl = kl_to_uniform(
                            tape, rvq.stage_results[s].soft_assignments, config.phi);
                        total = ad::add(total, kl);
                        loss.kl_term += kl.value().scalar_value();
                    }
                    loss.total = total.value().scalar_value();
                } else {
                    // Reconstruction plus per-stage codebook/commitment terms.
                    loss = loss_noise_family(tape, z, rvq.z_hat_total);
                    total = loss.total_var;
                    if (config.method != Method::EMA) {
                        for (std::size_t s = 0; s < stages; ++s) {
                            ad::Var stage_input =
                                s == 0 ? z : tape.constant(rvq.residuals[s - 1]);
                            ad::Var selected = ad::gather_rows(
                                cb_vars[s], rvq.stage_results[s].indices);
                            ad::Var diff =
                                ad::sub(ad::stop_gradient(stage_input), selected);
                            ad::Var term = ad::scale(
                                ad::scale(ad::sum(ad::row_sqnorm(diff)),
                                          1.0 / static_cast<double>(batch_data.rows())),
                                config.alpha);
                            total = ad::add(total, term);
                            loss.codebook_term += term.value().scalar_value();
                        }
                    }
                    loss.total = total.value().scalar_value();
                }
                if (!std::isfinite(total.value().scalar_value())) {
                    throw numeric_error("loss is not finite");
                }

                if (config.method != Method::HARD && config.method != Method::EMA) {
                    tape.backward(total);
                    for (std::size_t s = 0; s < stages; ++s) {
                        opt.step(s, codebooks[s].vectors, tape.grad(cb_vars[s]), lr);
                    }
                } else if (config.method == Method::EMA) {
                    for (std::size_t s = 0; s < stages; ++s) {
                        ema_update(codebooks[s], s == 0 ? batch_data : rvq.residuals[s - 1],
                                   rvq.stage_results[s].indices, config.gamma);
                    }
                }

                double perp_acc = 0.0, usage_acc = 0.0;
                for (std::size_t s = 0; s < stages; ++s) {
                    const std::vector<std::size_t> touched =
                        touched_indices(config.method, rvq.stage_results[s]);
                    record_usage(codebooks[s], touched);
                    for (std::size_t idx : touched) ++epoch_counts[s][idx];
                    const UsageStats stats = usage_stats_from_counts(epoch_counts[s]);
                    perp_acc += stats.perplexity;
                    usage_acc += stats.usage_fraction;
                }
                rec.total_loss = total.value().scalar_value();
                rec.reconstruction = loss.reconstruction;
                rec.codebook_term = loss.codebook_term;
                rec.kl_term = loss.kl_term;
                rec.distortion = rvq.distortion;
                rec.perplexity = perp_acc / static_cast<double>(stages);
                rec.usage_fraction = usage_acc / static_cast<double>(stages);
            } catch (const numeric_error& e) {
                throw runtime_abort("training diverged at iteration " +
                                    std::to_string(iteration) + " (last good " +
                                    std::to_string(iteration - 1) + "): " + e.what());
            }
            result.metrics.push_back(rec);
        }
    }
    result.final_distortion = rvq_hard_distortion(data, codebooks);
    result.codebooks = std::move(codebooks);
    return result;
}

}  // namespace diveq
