#ifndef SRNAS_TESTS_ORACLE_HELPERS_HPP
#define SRNAS_TESTS_ORACLE_HELPERS_HPP

// Independent reference routes used to cross-check the library: multiply
// counting by literally walking the naive loops, gradients by central finite
// differences, cardinalities by enumeration. Nothing here calls back into the
// implementation being verified.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <unistd.h>
#include <vector>

#include "srnas/layers.hpp"
#include "srnas/search_space.hpp"
#include "srnas/tensor.hpp"

namespace oracle {

// ---------------------------------------------------------------------------
// Multiply counting. One increment per scalar multiply a direct (non-im2col)
// executor would perform; padded zeros are multiplied like everything else.
// Output extents come from iterating the stride walk, not from a formula.

inline std::uint64_t counted_conv(int h, int w, int cin, int cout, int k, int stride,
                                  int groups) {
  int out_h = 0, out_w = 0;
  for (int y = 0; y < h; y += stride) ++out_h;
  for (int x = 0; x < w; x += stride) ++out_w;
  std::uint64_t n = 0;
  const int cin_g = cin / groups;
  for (int oy = 0; oy < out_h; ++oy)
    for (int ox = 0; ox < out_w; ++ox)
      for (int oc = 0; oc < cout; ++oc)
        for (int ic = 0; ic < cin_g; ++ic)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) ++n;
  return n;
}

inline std::uint64_t counted_linear(int in, int out) {
  std::uint64_t n = 0;
  for (int o = 0; o < out; ++o)
    for (int i = 0; i < in; ++i) ++n;
  return n;
}

// Cell op structures, spelled out independently of the cost model:
// conv      k, groups g, C -> C
// dsep      depthwise k (groups = C) then pointwise 1x1
// inv       1x1 C -> 2C, depthwise k on 2C, 1x1 2C -> C
// se / ca   pooled vector through C -> max(1, C/4) -> C, once per image
// identity  nothing
inline std::uint64_t counted_cell_op(const srnas::OpSpec& op, int c, int h, int w) {
  switch (op.family) {
    case srnas::OpFamily::Conv:
      return counted_conv(h, w, c, c, op.kernel, 1, 1);
    case srnas::OpFamily::GroupConv:
      return counted_conv(h, w, c, c, op.kernel, 1, op.groups);
    case srnas::OpFamily::DSep:
      return counted_conv(h, w, c, c, op.kernel, 1, c) + counted_conv(h, w, c, c, 1, 1, 1);
    case srnas::OpFamily::InvBlock:
      return counted_conv(h, w, c, 2 * c, 1, 1, 1) +
             counted_conv(h, w, 2 * c, 2 * c, op.kernel, 1, 2 * c) +
             counted_conv(h, w, 2 * c, c, 1, 1, 1);
    case srnas::OpFamily::SEBlock:
    case srnas::OpFamily::CABlock: {
      const int cr = c / 4 > 0 ? c / 4 : 1;
      return counted_linear(c, cr) + counted_linear(cr, c);
    }
    case srnas::OpFamily::Identity:
      return 0;
  }
  return 0;
}

inline std::uint64_t counted_reduction_op(const srnas::OpSpec& op, int c, int h, int w) {
  const int groups = op.family == srnas::OpFamily::GroupConv ? op.groups : 1;
  return counted_conv(h, w, c, 2 * c, op.kernel, 2, groups);
}

// ---------------------------------------------------------------------------
// Central finite differences over every trainable parameter and the input.
// Loss is a fixed random linear functional of the output, accumulated in
// double. Relative error uses max(|analytic|, |numeric|, 1) so near-zero
// components degrade to an absolute 1e-3-style comparison.

struct GradCheck {
  double max_rel = 0.0;
  std::string worst;  // "param <name>[i]" or "input[i]"
};

inline double weighted_loss(srnas::Network& net, const srnas::Tensor& x,
                            const std::vector<double>& w, srnas::Mode mode) {
  const srnas::Tensor y = net.forward(x, mode);
  double loss = 0.0;
  for (std::int64_t i = 0; i < y.numel(); ++i) loss += w[static_cast<std::size_t>(i)] * y.v[i];
  return loss;
}

inline GradCheck check_network_gradients(srnas::Network& net, srnas::Tensor x,
                                         std::uint64_t seed, double h,
                                         srnas::Mode mode = srnas::Mode::Train,
                                         bool check_input = true) {
  srnas::Rng rng(srnas::mix64(seed, 0x6c6f7373ull));
  srnas::Tensor y = net.forward(x, mode);
  std::vector<double> w(static_cast<std::size_t>(y.numel()));
  for (auto& wi : w) wi = rng.uniform(0.5, 1.5) * (rng.uniform() < 0.5 ? -1.0 : 1.0);

  srnas::Tensor dy(y.shape);
  for (std::int64_t i = 0; i < y.numel(); ++i)
    dy.v[i] = static_cast<srnas::Scalar>(w[static_cast<std::size_t>(i)]);
  net.zero_grad();
  net.backward(dy);

  GradCheck out;
  auto consider = [&](double analytic, double numeric, const std::string& label) {
    const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1.0});
    const double rel = std::fabs(analytic - numeric) / denom;
    if (rel > out.max_rel) {
      out.max_rel = rel;
      out.worst = label;
    }
  };

  for (const auto& np : net.parameters(true)) {
    std::vector<double> analytic(static_cast<std::size_t>(np.param->numel()));
    for (std::int64_t i = 0; i < np.param->numel(); ++i)
      analytic[static_cast<std::size_t>(i)] = np.param->grad[i];
    for (std::int64_t i = 0; i < np.param->numel(); ++i) {
      const srnas::Scalar saved = np.param->value[i];
      np.param->value[i] = static_cast<srnas::Scalar>(saved + h);
      const double lp = weighted_loss(net, x, w, mode);
      np.param->value[i] = static_cast<srnas::Scalar>(saved - h);
      const double lm = weighted_loss(net, x, w, mode);
      np.param->value[i] = saved;
      consider(analytic[static_cast<std::size_t>(i)], (lp - lm) / (2.0 * h),
               "param " + np.name + "[" + std::to_string(i) + "]");
    }
  }

  if (check_input) {
    // Re-run the analytic pass so input_grad matches the unperturbed point.
    net.zero_grad();
    net.forward(x, mode);
    net.backward(dy);
    const srnas::Tensor gin = net.input_grad();
    for (std::int64_t i = 0; i < x.numel(); ++i) {
      const srnas::Scalar saved = x.v[i];
      x.v[i] = static_cast<srnas::Scalar>(saved + h);
      const double lp = weighted_loss(net, x, w, mode);
      x.v[i] = static_cast<srnas::Scalar>(saved - h);
      const double lm = weighted_loss(net, x, w, mode);
      x.v[i] = saved;
      consider(gin.v[i], (lp - lm) / (2.0 * h), "input[" + std::to_string(i) + "]");
    }
  }
  return out;
}

// Forces every parameter whose name ends in `suffix` to a constant; used to
// pin PReLU slopes at 1 so composite-op checks stay kink-free.
inline void set_params_with_suffix(srnas::Network& net, const std::string& suffix,
                                   srnas::Scalar value) {
  for (const auto& np : net.parameters(false)) {
    if (np.name.size() >= suffix.size() &&
        np.name.compare(np.name.size() - suffix.size(), suffix.size(), suffix) == 0)
      np.param->value.setConstant(value);
  }
}

// ---------------------------------------------------------------------------
// Odometer walk over every decision vector of a factored space. Returns the
// visit count so cardinality claims can be checked by literal enumeration.

template <class Fn>
inline std::uint64_t enumerate_dims(const std::vector<int>& dims, Fn&& fn) {
  std::vector<int> d(dims.size(), 0);
  std::uint64_t count = 0;
  bool more = true;
  while (more) {
    fn(const_cast<const std::vector<int>&>(d));
    ++count;
    more = false;
    for (std::size_t i = d.size(); i-- > 0;) {
      if (++d[i] < dims[i]) {
        more = true;
        break;
      }
      d[i] = 0;
    }
  }
  return count;
}

// ---------------------------------------------------------------------------
// Filesystem scratch space.

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = (std::filesystem::temp_directory_path() /
             ("srnas_test_" + tag + "_" + std::to_string(::getpid()) + "_" +
              std::to_string(counter++)))
                .string();
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

// Runs fn expecting it to throw E; returns the message, or "" if nothing was
// thrown (callers then fail on the missing substring).
template <class E, class Fn>
std::string thrown_message(Fn&& fn) {
  try {
    fn();
  } catch (const E& e) {
    return e.what();
  }
  return {};
}

}  // namespace oracle

#endif  // SRNAS_TESTS_ORACLE_HELPERS_HPP
