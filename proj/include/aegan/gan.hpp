#pragma once

#include "aegan/nn/checkpoint.hpp"
#include "aegan/nn/networks.hpp"
#include "aegan/nn/optim.hpp"
#include "aegan/patch.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace aegan {

enum class ResidualMode { AE, AR, None };

std::string to_string(ResidualMode m);
ResidualMode residual_mode_from_string(const std::string& s);

/// Named DRF combinations: "4-20", "10-50", "10-100", "all", or a single
/// level such as "50".
std::vector<DoseLevel> drf_mix_preset(const std::string& name);

struct TrainConfig {
    double lambda_content = 300.0;
    double lambda_residual = 10.0;
    double lambda_adversarial = 1.0;
    ResidualMode residual_mode = ResidualMode::AE;
    bool use_discriminator = true;

    double lr0 = 2e-4;
    double lr_decay_factor = 0.1;
    int lr_patience_epochs = 5;
    double lr_stop_threshold = 2e-6;
    double beta1 = 0.5;
    double beta2 = 0.999;

    int max_epochs = 100;
    int steps_per_epoch = 50;
    int batch_size = 4;
    /// Fixed validation patch pairs scored after every epoch.
    int val_patches = 8;
    std::vector<DoseLevel> drf_mix = all_reduced_doses();
    std::optional<std::filesystem::path> pretrained_encoder;

    Extent3 patch_shape{32, 32, 16};
    nn::NetworkSpec pixel = nn::NetworkSpec::pixel_net();
    nn::NetworkSpec ae = nn::NetworkSpec::ae_net();
    nn::NetworkSpec discriminator = nn::NetworkSpec::discriminator();
    double suv_scale = kDefaultSuvScale;
    std::uint64_t seed = 0;

    /// Same base channel count for all three networks.
    void set_base_channels(int c);
    /// Throws ConfigError.
    void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
TrainConfig parse_train_config(const nlohmann::json& j, const std::string& path);

// Losses. Tensors are (N, 1, patch) in normalized units.

template <typename Scalar>
nn::Var<Scalar> content_loss(const nn::Var<Scalar>& p_out, const nn::Var<Scalar>& v_s);

/// r = v_s - v_l, so v_l + r = v_s.
template <typename Scalar>
Tensor<Scalar> residual_target(const Tensor<Scalar>& v_s, const Tensor<Scalar>& v_l);

template <typename Scalar>
struct ResidualBundle {
    ResidualMode mode = ResidualMode::AE;
    nn::Var<Scalar> p_out;
    /// Estimator input: p_out - v_l in AE mode, p_out in AR mode.
    nn::Var<Scalar> r_tilde;
    nn::Var<Scalar> gate;
    /// refined = base + correction. AE: v_l + gate * r_tilde. AR: p_out + gate.
    nn::Var<Scalar> base;
    nn::Var<Scalar> correction;
    nn::Var<Scalar> refined;
};

/// Assembles the bundle from an already computed estimator output.
template <typename Scalar>
ResidualBundle<Scalar> combine(const nn::Var<Scalar>& p_out, const nn::Var<Scalar>& v_l, const nn::Var<Scalar>& gate,
                               ResidualMode mode);

template <typename Scalar>
ResidualBundle<Scalar> refine(const nn::Var<Scalar>& p_out, const nn::Var<Scalar>& v_l, nn::AeNet<Scalar>* ae,
                              ResidualMode mode);

/// mean |target - correction|, with target v_s - v_l (AE) or v_s - p_out (AR).
/// ConfigError in None mode.
template <typename Scalar>
nn::Var<Scalar> residual_loss(const ResidualBundle<Scalar>& bundle, const nn::Var<Scalar>& v_s, const nn::Var<Scalar>& v_l);

template <typename Scalar>
struct AdversarialLosses {
    nn::Var<Scalar> d_loss;
    nn::Var<Scalar> g_loss;
};

/// Least-squares objectives on D(concat(v_l, candidate)). Real and fake
/// pairs go through the discriminator as one batch so its BatchNorm
/// statistics are shared. The fake term of d_loss uses a detached `refined`.
template <typename Scalar>
AdversarialLosses<Scalar> adversarial_losses(nn::Discriminator<Scalar>& disc, const nn::Var<Scalar>& v_l,
                                             const nn::Var<Scalar>& v_s, const nn::Var<Scalar>& refined);
template <typename Scalar>
nn::Var<Scalar> discriminator_loss(nn::Discriminator<Scalar>& disc, const nn::Var<Scalar>& v_l,
                                   const nn::Var<Scalar>& v_s, const nn::Var<Scalar>& fake);
template <typename Scalar>
nn::Var<Scalar> generator_adversarial_loss(nn::Discriminator<Scalar>& disc, const nn::Var<Scalar>& v_l,
                                           const nn::Var<Scalar>& v_s, const nn::Var<Scalar>& refined);

struct GeneratorParts {
    double content = 0;
    double residual = 0;
    double adversarial = 0;
};

/// lambda_content * content + lambda_residual * residual + lambda_adversarial * adversarial.
double total_generator_loss(const GeneratorParts& parts, double lambda_content, double lambda_residual,
                            double lambda_adversarial);
/// Drops the residual term in None mode and the adversarial term without a discriminator.
double total_generator_loss(const GeneratorParts& parts, const TrainConfig& cfg);

struct LrState {
    double lr = 2e-4;
    int decays = 0;
    double best = std::numeric_limits<double>::infinity();
    int stale_epochs = 0;
    bool stop = false;

    static LrState initial(const TrainConfig& cfg);
};

/// Reduce-on-plateau: after `lr_patience_epochs` epochs without a strictly
/// lower val loss, lr = lr0 * factor^(decays + 1). Stops below the threshold.
LrState lr_schedule_step(const LrState& state, double val_loss, const TrainConfig& cfg);

/// Pixel-Net plus the optional AE-Net and discriminator of one config.
class SynthesisModel {
public:
    explicit SynthesisModel(const TrainConfig& cfg);

    const TrainConfig& config() const noexcept { return cfg_; }
    nn::PixelNet<float>& pixel() noexcept { return *pixel_; }
    nn::AeNet<float>* ae() noexcept { return ae_.get(); }
    nn::Discriminator<float>* discriminator() noexcept { return disc_.get(); }

    void set_training(bool on);
    /// Generator forward on a normalized (N, 1, patch) batch.
    ResidualBundle<float> forward(const nn::Var<float>& v_l);

    /// Stores all networks and the config under "pixel", "ae", "disc".
    void store(nn::Checkpoint& ck);
    static SynthesisModel load(const std::filesystem::path& path);
    static SynthesisModel load(const nn::Checkpoint& ck);

private:
    TrainConfig cfg_;
    std::unique_ptr<nn::PixelNet<float>> pixel_;
    std::unique_ptr<nn::AeNet<float>> ae_;
    std::unique_ptr<nn::Discriminator<float>> disc_;
};

/// Sliding-window synthesis in SUV units. Per patch the output is
/// v_l + gate * (scale * p - v_l) (AE), scale * (p + gate) (AR) or scale * p,
/// evaluated in double, then merged by overlap averaging.
Volume infer_volume(SynthesisModel& model, const Volume& v_l, const PatchGridSpec& grid, int batch_size = 4);

/// One subject's standard-dose volume and its low-dose counterparts.
struct PairSource {
    std::string id;
    Volume full;
    std::map<int, Volume> low;
};

std::vector<PairSource> load_pair_sources(const DatasetManifest& manifest, Bucket bucket,
                                          const std::vector<DoseLevel>& drfs);

struct StepRecord {
    int step = 0;
    int epoch = 0;
    double content = 0;
    double residual = 0;
    double d_loss = 0;
    double g_loss = 0;
    double total = 0;
    std::vector<int> drfs;
};

struct EpochRecord {
    int epoch = 0;
    double lr = 0;
    double content = 0;
    double residual = 0;
    double d_loss = 0;
    double g_loss = 0;
    double val_loss = 0;
    double val_psnr = 0;
};

struct TrainLog {
    std::vector<StepRecord> steps;
    std::vector<EpochRecord> epochs;
    bool stopped_by_schedule = false;
};

/// CSV with only the columns the config produces.
void write_train_log(const TrainLog& log, const TrainConfig& cfg, const std::filesystem::path& path);

/// Alternating discriminator / generator updates on random patch pairs.
class Trainer {
public:
    /// Empty `val` scores on training subjects.
    Trainer(const TrainConfig& cfg, std::vector<PairSource> train, std::vector<PairSource> val = {});

    StepRecord step();
    EpochRecord run_epoch();
    /// Epochs until max_epochs or the schedule stops.
    const TrainLog& run();

    SynthesisModel& model() noexcept { return model_; }
    const TrainLog& log() const noexcept { return log_; }
    const LrState& schedule() const noexcept { return lr_; }

    /// Networks, optimizer moments and the config echo.
    void save_checkpoint(const std::filesystem::path& path);

private:
    struct Batch {
        Tensor<float> low;
        Tensor<float> std;
        std::vector<int> drfs;
    };
    Batch sample_batch(std::uint64_t step);
    std::pair<double, double> validate();

    TrainConfig cfg_;
    std::vector<PairSource> train_;
    std::vector<PairSource> val_;
    SynthesisModel model_;
    std::unique_ptr<nn::Adam<float>> opt_g_;
    std::unique_ptr<nn::Adam<float>> opt_d_;
    std::vector<PatchPair> val_pairs_;
    LrState lr_;
    TrainLog log_;
    int step_ = 0;
    int epoch_ = 0;
};

} // namespace aegan
