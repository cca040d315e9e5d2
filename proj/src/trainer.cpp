#include "srnas/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include "json.hpp"
#include "srnas/errors.hpp"

namespace srnas {

namespace {

// Distortion and GAN loops share the salt so an equal-config GAN run with
// gamma = lambda = 0 consumes the identical batch stream.
constexpr std::uint64_t kTrainRngSalt = 0x747261696e5f7267ull;

double softplus(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor as_batch(const Tensor& img) {
  if (img.rank() == 4) return img;
  if (img.rank() != 3) throw ShapeError("expected rank 3 or 4 image tensor");
  Tensor t = img;
  t.shape = {1, img.dim(0), img.dim(1), img.dim(2)};
  return t;
}

}  // namespace

double l1_loss(const Tensor& pred, const Tensor& target) {
  check_same_shape(pred, target, "l1_loss");
  double acc = 0.0;
  for (std::int64_t i = 0; i < pred.numel(); ++i)
    acc += std::abs(static_cast<double>(pred.v[i]) - target.v[i]);
  return acc / static_cast<double>(pred.numel());
}

Tensor l1_grad(const Tensor& pred, const Tensor& target) {
  check_same_shape(pred, target, "l1_grad");
  Tensor g(pred.shape);
  const Scalar inv = static_cast<Scalar>(1.0 / static_cast<double>(pred.numel()));
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    const Scalar d = pred.v[i] - target.v[i];
    g.v[i] = d > 0 ? inv : (d < 0 ? -inv : 0);
  }
  return g;
}

double psnr(const Tensor& pred, const Tensor& target, double range, int shave) {
  check_same_shape(pred, target, "psnr");
  const Tensor a = as_batch(pred), b = as_batch(target);
  const int n = a.dim(0), c = a.dim(1), h = a.dim(2), w = a.dim(3);
  if (shave < 0 || 2 * shave >= h || 2 * shave >= w)
    throw ShapeError("psnr: shave leaves no pixels");
  double acc = 0.0;
  std::int64_t count = 0;
  for (int in = 0; in < n; ++in)
    for (int ic = 0; ic < c; ++ic)
      for (int y = shave; y < h - shave; ++y)
        for (int x = shave; x < w - shave; ++x) {
          const double d =
              static_cast<double>(a.at(in, ic, y, x)) - b.at(in, ic, y, x);
          acc += d * d;
          ++count;
        }
  const double mse = acc / static_cast<double>(count);
  if (mse <= 0.0) return 100.0;
  return std::min(100.0, 10.0 * std::log10(range * range / mse));
}

namespace {

// Channel-unit-normalizes feats in place per (n,h,w) location and returns the
// norms used (flattened n*h*w). r = sqrt(sum_c f^2 + 1e-10).
std::vector<double> channel_normalize(Tensor& f) {
  const int n = f.dim(0), c = f.dim(1), h = f.dim(2), w = f.dim(3);
  std::vector<double> norms(static_cast<std::size_t>(n) * h * w);
  std::size_t loc = 0;
  for (int in = 0; in < n; ++in)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x, ++loc) {
        double s = 1e-10;
        for (int ic = 0; ic < c; ++ic) {
          const double v = f.at(in, ic, y, x);
          s += v * v;
        }
        const double r = std::sqrt(s);
        for (int ic = 0; ic < c; ++ic)
          f.at(in, ic, y, x) = static_cast<Scalar>(f.at(in, ic, y, x) / r);
        norms[loc] = r;
      }
  return norms;
}

double feature_distance_impl(const Tensor& a, const Tensor& b, FrozenExtractor& phi,
                             int depth, Tensor* da) {
  check_same_shape(a, b, "feature_distance");
  const Tensor a4 = as_batch(a), b4 = as_batch(b);
  // Forward b first: the extractor caches one forward, and the backward for
  // d/d(a) must run over a's activations.
  Tensor fb = phi.features(b4, depth);
  Tensor fa_raw = phi.features(a4, depth);
  Tensor fa = fa_raw;
  const std::vector<double> ra = channel_normalize(fa);
  channel_normalize(fb);

  const std::int64_t count = fa.numel();
  double acc = 0.0;
  for (std::int64_t i = 0; i < count; ++i) {
    const double d = static_cast<double>(fa.v[i]) - fb.v[i];
    acc += d * d;
  }
  const double dist = acc / static_cast<double>(count);
  if (!da) return dist;

  // d(dist)/d(fa_raw) through the normalization: J = I/r - u u^T / r^3.
  const int n = fa.dim(0), c = fa.dim(1), h = fa.dim(2), w = fa.dim(3);
  Tensor dfraw(fa.shape);
  std::size_t loc = 0;
  for (int in = 0; in < n; ++in)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x, ++loc) {
        const double r = ra[loc];
        double udotg = 0.0;
        for (int ic = 0; ic < c; ++ic) {
          const double ghat =
              2.0 * (static_cast<double>(fa.at(in, ic, y, x)) - fb.at(in, ic, y, x)) /
              static_cast<double>(count);
          udotg += static_cast<double>(fa_raw.at(in, ic, y, x)) * ghat;
          dfraw.at(in, ic, y, x) = static_cast<Scalar>(ghat / r);
        }
        for (int ic = 0; ic < c; ++ic)
          dfraw.at(in, ic, y, x) -= static_cast<Scalar>(
              fa_raw.at(in, ic, y, x) * udotg / (r * r * r));
      }
  Tensor din = phi.backward_to_input(depth, dfraw);
  din.shape = a.shape;
  *da = std::move(din);
  return dist;
}

}  // namespace

double feature_distance(const Tensor& a, const Tensor& b, FrozenExtractor& phi, int depth) {
  return feature_distance_impl(a, b, phi, depth, nullptr);
}

double feature_distance_grad(const Tensor& a, const Tensor& b, FrozenExtractor& phi,
                             int depth, Tensor& da) {
  return feature_distance_impl(a, b, phi, depth, &da);
}

double eval_psnr(Network& g, const Dataset& ds) {
  if (ds.val().empty()) throw ConfigError("eval: empty validation split");
  double acc = 0.0;
  for (const ImagePair& p : ds.val()) {
    Tensor in = as_batch(p.lr);
    subtract_mean(in, ds.mean_rgb());
    Tensor out = g.forward(in, Mode::Eval);
    Tensor target = as_batch(p.hr);
    subtract_mean(target, ds.mean_rgb());
    acc += psnr(out, target, 1.0, ds.scale());
  }
  return acc / static_cast<double>(ds.val().size());
}

double eval_feature_distance(Network& g, const Dataset& ds, FrozenExtractor& phi, int depth) {
  if (ds.val().empty()) throw ConfigError("eval: empty validation split");
  double acc = 0.0;
  for (const ImagePair& p : ds.val()) {
    Tensor in = as_batch(p.lr);
    subtract_mean(in, ds.mean_rgb());
    Tensor out = g.forward(in, Mode::Eval);
    Tensor target = as_batch(p.hr);
    subtract_mean(target, ds.mean_rgb());
    acc += feature_distance(out, target, phi, depth);
  }
  return acc / static_cast<double>(ds.val().size());
}

EvalReport train_distortion(Network& g, const Dataset& ds, const DistortionConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  if (cfg.epochs < 0 || cfg.steps_per_epoch <= 0) throw ConfigError("bad distortion schedule");
  Rng rng(mix64(cfg.seed, kTrainRngSalt));
  auto params = g.parameters(true);
  AdamConfig ac;
  ac.lr = cfg.lr;
  AdamOptimizer opt(params, ac);
  std::ofstream trace;
  if (!cfg.trace_path.empty()) {
    trace.open(cfg.trace_path, std::ios::app);
    if (!trace) throw IoError("cannot write " + cfg.trace_path);
  }

  EvalReport r;
  r.metric = "psnr_db";
  for (int e = 1; e <= cfg.epochs; ++e) {
    if (cfg.should_stop && cfg.should_stop()) {
      r.interrupted = true;
      break;
    }
    opt.set_lr(e > cfg.lr_drop_epoch ? cfg.lr_late : cfg.lr);
    double loss_sum = 0.0;
    for (int s = 0; s < cfg.steps_per_epoch; ++s) {
      Batch b = sample_patch_batch(ds.train(), ds.mean_rgb(), ds.scale(), cfg.batch,
                                   cfg.lr_patch, cfg.augment, rng);
      Tensor out = g.forward(b.lr, Mode::Train);
      const double loss = l1_loss(out, b.hr);
      if (!std::isfinite(loss)) throw DivergedError("distortion loss non-finite");
      g.zero_grad();
      g.backward(l1_grad(out, b.hr));
      opt.step();
      loss_sum += loss;
    }
    const double v = eval_psnr(g, ds);
    if (!std::isfinite(v)) throw DivergedError("validation psnr non-finite");
    r.trace.push_back(v);
    if (trace.is_open())
      trace << nlohmann::json{{"epoch", e},
                              {"l1", loss_sum / cfg.steps_per_epoch},
                              {"psnr_db", v}}
                   .dump()
            << "\n";
  }
  r.value = r.trace.empty() ? eval_psnr(g, ds) : r.trace.back();
  if (!std::isfinite(r.value)) throw DivergedError("validation psnr non-finite");
  r.wall_seconds = seconds_since(t0);
  return r;
}

GanLossReport compute_gan_losses(const Tensor& g_out, const Tensor& hr, Network& d,
                                 FrozenExtractor& phi, const GanConfig& cfg) {
  GanLossReport rep;
  rep.l1 = l1_loss(g_out, hr);
  rep.lvgg = feature_distance(g_out, hr, phi, cfg.phi_depth);
  const Tensor zf = d.forward(as_batch(g_out), Mode::Eval);
  const Tensor zr = d.forward(as_batch(hr), Mode::Eval);
  double ladv = 0.0, ld = 0.0;
  for (std::int64_t i = 0; i < zf.numel(); ++i) {
    ladv += softplus(-zf.v[i]);
    ld += softplus(zf.v[i]) + softplus(-zr.v[i]);
  }
  rep.ladv = ladv / static_cast<double>(zf.numel());
  rep.ld = ld / static_cast<double>(zf.numel());
  rep.lg = cfg.alpha * rep.l1 + cfg.lambda * rep.lvgg + cfg.gamma * rep.ladv;
  return rep;
}

GanLossReport gan_generator_loss_grad(const Tensor& g_out, const Tensor& hr, Network& d,
                                      FrozenExtractor& phi, const GanConfig& cfg,
                                      Tensor& dg_out, Mode d_mode) {
  GanLossReport rep;
  dg_out = Tensor(g_out.shape);

  rep.l1 = l1_loss(g_out, hr);
  if (cfg.alpha != 0.0) {
    const Tensor dl1 = l1_grad(g_out, hr);
    dg_out.v += static_cast<Scalar>(cfg.alpha) * dl1.v;
  }
  if (cfg.lambda != 0.0) {
    Tensor dv;
    rep.lvgg = feature_distance_grad(g_out, hr, phi, cfg.phi_depth, dv);
    dg_out.v += static_cast<Scalar>(cfg.lambda) * dv.v;
  }
  if (cfg.gamma != 0.0) {
    const Tensor z = d.forward(as_batch(g_out), d_mode);
    const std::int64_t bsz = z.numel();
    double ladv = 0.0;
    Tensor dz(z.shape);
    for (std::int64_t i = 0; i < bsz; ++i) {
      ladv += softplus(-z.v[i]);
      // d(gamma * mean softplus(-z))/dz, folded so input_grad is pre-scaled.
      dz.v[i] = static_cast<Scalar>(-cfg.gamma * sigmoid(-z.v[i]) / static_cast<double>(bsz));
    }
    rep.ladv = ladv / static_cast<double>(bsz);
    d.zero_grad();
    d.backward(dz);
    dg_out.v += d.input_grad().v;
  }
  rep.lg = cfg.alpha * rep.l1 + cfg.lambda * rep.lvgg + cfg.gamma * rep.ladv;
  return rep;
}

double gan_discriminator_step(Network& d, AdamOptimizer& opt, const Tensor& real,
                              const Tensor& fake) {
  check_same_shape(real, fake, "gan_discriminator_step");
  const Tensor r4 = as_batch(real), f4 = as_batch(fake);
  const int b = r4.dim(0);
  Tensor cat({2 * b, r4.dim(1), r4.dim(2), r4.dim(3)});
  const std::int64_t half = r4.numel();
  cat.v.head(half) = r4.v;
  cat.v.tail(half) = f4.v;

  const Tensor z = d.forward(cat, Mode::Train);
  if (z.numel() != 2 * b) throw ShapeError("discriminator must emit one logit per sample");
  double ld = 0.0;
  Tensor dz(z.shape);
  for (int i = 0; i < b; ++i) {
    ld += softplus(-z.v[i]) + softplus(z.v[b + i]);
    dz.v[i] = static_cast<Scalar>(-sigmoid(-z.v[i]) / b);
    dz.v[b + i] = static_cast<Scalar>(sigmoid(z.v[b + i]) / b);
  }
  ld /= b;
  if (!std::isfinite(ld)) throw DivergedError("discriminator loss non-finite");
  d.zero_grad();
  d.backward(dz);
  opt.step();
  return ld;
}

EvalReport train_gan(Network& g, Network& d, FrozenExtractor& phi, const Dataset& ds,
                     const GanConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  if (cfg.alpha < 0 || cfg.lambda < 0 || cfg.gamma < 0)
    throw ConfigError("gan loss weights must be >= 0");
  if (cfg.epochs < 0 || cfg.steps_per_epoch <= 0 || cfg.d_steps < 0 || cfg.g_steps < 1)
    throw ConfigError("bad gan schedule");
  Rng rng(mix64(cfg.seed, kTrainRngSalt));
  auto gp = g.parameters(true);
  auto dp = d.parameters(true);
  AdamConfig ac;
  ac.lr = cfg.lr;
  AdamOptimizer g_opt(gp, ac), d_opt(dp, ac);
  std::ofstream trace;
  if (!cfg.trace_path.empty()) {
    trace.open(cfg.trace_path, std::ios::app);
    if (!trace) throw IoError("cannot write " + cfg.trace_path);
  }

  EvalReport r;
  r.metric = "feat_dist";
  for (int e = 1; e <= cfg.epochs; ++e) {
    if (cfg.should_stop && cfg.should_stop()) {
      r.interrupted = true;
      break;
    }
    const double lr_now = e > cfg.lr_drop_epoch ? cfg.lr_late : cfg.lr;
    g_opt.set_lr(lr_now);
    d_opt.set_lr(lr_now);
    double lg_sum = 0.0, ld_sum = 0.0;
    for (int s = 0; s < cfg.steps_per_epoch; ++s) {
      Batch b = sample_patch_batch(ds.train(), ds.mean_rgb(), ds.scale(), cfg.batch,
                                   cfg.lr_patch, cfg.augment, rng);
      if (cfg.gamma != 0.0) {
        const Tensor fake = g.forward(b.lr, Mode::Eval);
        for (int k = 0; k < cfg.d_steps; ++k)
          ld_sum += gan_discriminator_step(d, d_opt, b.hr, fake);
      }
      for (int k = 0; k < cfg.g_steps; ++k) {
        Tensor out = g.forward(b.lr, Mode::Train);
        Tensor dout;
        const GanLossReport lrep =
            gan_generator_loss_grad(out, b.hr, d, phi, cfg, dout, Mode::Train);
        if (!std::isfinite(lrep.lg)) throw DivergedError("generator loss non-finite");
        lg_sum += lrep.lg;
        g.zero_grad();
        g.backward(dout);
        g_opt.step();
      }
    }
    const double fd = eval_feature_distance(g, ds, phi, cfg.phi_depth);
    const double pv = eval_psnr(g, ds);
    if (!std::isfinite(fd)) throw DivergedError("feature distance non-finite");
    r.trace.push_back(fd);
    r.psnr_trace.push_back(pv);
    if (trace.is_open())
      trace << nlohmann::json{{"epoch", e},
                              {"l_g", lg_sum / (cfg.steps_per_epoch * cfg.g_steps)},
                              {"l_d", cfg.gamma != 0.0
                                          ? ld_sum / (cfg.steps_per_epoch * std::max(1, cfg.d_steps))
                                          : 0.0},
                              {"feat_dist", fd},
                              {"psnr_db", pv}}
                   .dump()
            << "\n";
  }
  if (r.trace.empty()) {
    r.value = eval_feature_distance(g, ds, phi, cfg.phi_depth);
    r.psnr_trace.push_back(eval_psnr(g, ds));
  } else {
    r.value = windowed_best(r.trace);
  }
  if (!std::isfinite(r.value)) throw DivergedError("feature distance non-finite");
  r.wall_seconds = seconds_since(t0);
  return r;
}

double windowed_best(const std::vector<double>& trace) {
  if (trace.empty()) throw ConfigError("windowed_best on empty trace");
  const std::size_t first = trace.size() > 3 ? trace.size() - 3 : 0;
  return *std::min_element(trace.begin() + static_cast<std::ptrdiff_t>(first), trace.end());
}

}  // namespace srnas
