#ifndef SRNAS_DATA_HPP
#define SRNAS_DATA_HPP

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "srnas/tensor.hpp"

#include <nlohmann/json_fwd.hpp>

namespace srnas {

// One training example: HR image (3,H,W) in [0,1] and its bicubic LR
// counterpart (3,H/scale,W/scale). Images are stored raw; mean subtraction
// happens at batch/eval access.
struct ImagePair {
  int id = 0;
  Tensor hr;
  Tensor lr;
};

struct DatasetSpec {
  std::uint64_t seed = 0;
  int count_train = 8;
  int count_val = 2;
  int hr_size = 64;  // square
  int scale = 2;
  // Relative draw weights for gradient / checker / blob / band-noise textures.
  std::array<double, 4> texture_mix{1.0, 1.0, 1.0, 1.0};
};

// Separable bicubic (a = -0.5), input taps at (o + 0.5) * scale - 0.5 per
// axis, borders handled by linear-extrapolating reflection so constants and
// linear ramps are reproduced exactly. No clamping.
Tensor bicubic_downsample(const Tensor& hr, int scale);

// The 8 square-image symmetries, variant = rotation (0..3 quarter turns)
// + 4 * horizontal flip; flip applies first. d4_invert returns the variant
// undoing the given one.
Tensor d4_apply(const Tensor& img, int variant);
int d4_invert(int variant);

class Dataset {
 public:
  static Dataset generate(const DatasetSpec& spec);
  // 8-bit RGB PNGs, lexicographic filename order; the last count_val files
  // form the validation split. Images are center-cropped to a multiple of
  // scale.
  static Dataset from_png_folder(const std::string& dir, int scale, int count_val);

  const std::vector<ImagePair>& train() const { return train_; }
  const std::vector<ImagePair>& val() const { return val_; }
  int scale() const { return scale_; }
  // Per-channel mean of the raw training HR images.
  const std::array<double, 3>& mean_rgb() const { return mean_rgb_; }

  nlohmann::json manifest() const;

 private:
  void compute_mean();

  std::vector<ImagePair> train_;
  std::vector<ImagePair> val_;
  int scale_ = 2;
  std::array<double, 3> mean_rgb_{0, 0, 0};
  std::uint64_t seed_ = 0;
  std::string source_ = "procedural";
};

struct Batch {
  Tensor lr;  // (B,3,p,p), mean-subtracted
  Tensor hr;  // (B,3,p*scale,p*scale), mean-subtracted
};

// Uniformly samples co-located LR/HR patch pairs; with augment, one of the 8
// square symmetries is applied identically to both. Mean RGB is subtracted
// from both tensors.
Batch sample_patch_batch(const std::vector<ImagePair>& pairs,
                         const std::array<double, 3>& mean_rgb, int scale,
                         int batch, int lr_patch, bool augment, Rng& rng);

// (3,H,W) or (B,3,H,W) helpers.
void subtract_mean(Tensor& img, const std::array<double, 3>& mean_rgb);
void add_mean(Tensor& img, const std::array<double, 3>& mean_rgb);

}  // namespace srnas

#endif  // SRNAS_DATA_HPP
