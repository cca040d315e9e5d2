#ifndef SRNAS_TRAINER_HPP
#define SRNAS_TRAINER_HPP

#include <functional>
#include <string>
#include <vector>

#include "srnas/optim.hpp"

#include "srnas/builder.hpp"
#include "srnas/data.hpp"
#include "srnas/layers.hpp"

namespace srnas {

struct DistortionConfig {
  int epochs = 50;
  int steps_per_epoch = 10;
  int batch = 64;
  int lr_patch = 12;
  double lr = 1e-4;
  double lr_late = 5e-5;
  int lr_drop_epoch = 200;  // epochs after this (1-based) use lr_late
  std::uint64_t seed = 0;
  bool augment = true;
  std::string trace_path;               // optional JSONL training trace
  std::function<bool()> should_stop;    // polled once per epoch
};

struct GanConfig {
  int epochs = 12;
  int steps_per_epoch = 10;
  int batch = 16;
  int lr_patch = 16;  // HR patch = lr_patch * scale, must suit the discriminator
  double alpha = 0.01;
  double lambda = 1.0;
  double gamma = 0.005;
  int phi_depth = 2;  // extractor tap: 2 proxy, 3 full
  int d_steps = 1;
  int g_steps = 1;
  double lr = 1e-4;
  double lr_late = 5e-5;
  int lr_drop_epoch = 200;
  std::uint64_t seed = 0;
  bool augment = true;
  std::string trace_path;
  std::function<bool()> should_stop;  // polled once per epoch
};

struct EvalReport {
  std::string metric;  // "psnr_db" | "feat_dist"
  double value = 0.0;
  std::vector<double> trace;       // per-epoch metric values
  std::vector<double> psnr_trace;  // per-epoch PSNR (GAN loop diagnostic)
  double wall_seconds = 0.0;
  bool interrupted = false;  // should_stop fired; value covers completed epochs
};

// Mean absolute difference over all elements.
double l1_loss(const Tensor& pred, const Tensor& target);
Tensor l1_grad(const Tensor& pred, const Tensor& target);

// 10*log10(range^2 / MSE) after shaving a `shave`-pixel border; capped at
// 100 dB (also the value for identical inputs). Rank 3 or 4.
double psnr(const Tensor& pred, const Tensor& target, double range = 1.0, int shave = 0);

// Mean squared difference of channel-unit-normalized feature maps from the
// extractor (never shaved). Symmetric; 0 for identical inputs.
double feature_distance(const Tensor& a, const Tensor& b, FrozenExtractor& phi, int depth);
// Same value, also filling d(distance)/d(a).
double feature_distance_grad(const Tensor& a, const Tensor& b, FrozenExtractor& phi,
                             int depth, Tensor& da);

// Mean validation PSNR in the mean-subtracted domain (shave = scale).
double eval_psnr(Network& g, const Dataset& ds);
// Mean validation feature distance (whole images, no shave).
double eval_feature_distance(Network& g, const Dataset& ds, FrozenExtractor& phi, int depth);

// Adam + L1 over sampled patch batches; per-epoch validation PSNR trace;
// returns the final PSNR (epochs = 0 evaluates the untrained network).
// Throws DivergedError when a loss or metric goes non-finite.
EvalReport train_distortion(Network& g, const Dataset& ds, const DistortionConfig& cfg);

struct GanLossReport {
  double l1 = 0, lvgg = 0, ladv = 0;
  double lg = 0;  // alpha*l1 + lambda*lvgg + gamma*ladv
  double ld = 0;  // softplus(-z_real) + softplus(z_fake), batch means
};

// Forward-only loss audit: treats g_out as the fake batch, hr as real.
// Runs the discriminator in eval mode; no state is touched.
GanLossReport compute_gan_losses(const Tensor& g_out, const Tensor& hr, Network& d,
                                 FrozenExtractor& phi, const GanConfig& cfg);

// Generator-side losses and d(L_G)/d(g_out). Zero-weighted terms are skipped
// outright (no extractor or discriminator call), making gamma = lambda = 0
// exactly an L1 loop. Pollutes d's parameter gradients when gamma > 0.
GanLossReport gan_generator_loss_grad(const Tensor& g_out, const Tensor& hr, Network& d,
                                      FrozenExtractor& phi, const GanConfig& cfg,
                                      Tensor& dg_out, Mode d_mode);

// One discriminator update on concat(real, fake) (single forward, shared
// batch statistics); returns L_D.
double gan_discriminator_step(Network& d, AdamOptimizer& opt, const Tensor& real,
                              const Tensor& fake);

// Alternating D-then-G updates per batch (cfg.d_steps : cfg.g_steps); when
// gamma = 0 the discriminator is never touched. Per-epoch feature-distance
// trace; returns the best (minimum) over the last three epochs.
EvalReport train_gan(Network& g, Network& d, FrozenExtractor& phi, const Dataset& ds,
                     const GanConfig& cfg);

// min over the last min(3, n) entries; the smoothing rule applied to any
// lower-is-better trace.
double windowed_best(const std::vector<double>& trace);

}  // namespace srnas

#endif  // SRNAS_TRAINER_HPP
