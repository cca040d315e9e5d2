#include "srnas/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include <png.h>

#include "json.hpp"
#include "srnas/errors.hpp"

namespace srnas {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

inline std::int64_t pix(const std::vector<int>& shape, int c, int y, int x) {
  return (static_cast<std::int64_t>(c) * shape[1] + y) * shape[2] + x;
}

// Cubic convolution kernel, a = -0.5.
double cubic(double t) {
  const double a = -0.5;
  t = std::abs(t);
  if (t <= 1.0) return (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0;
  if (t < 2.0) return a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a;
  return 0.0;
}

// Reads with linear-extrapolating reflection, so a ramp continues past the
// border and constants/linear signals are reproduced exactly.
inline double tap(const double* row, int n, int i) {
  if (i < 0) return 2.0 * row[0] - row[-i < n ? -i : n - 1];
  if (i >= n) {
    const int j = 2 * (n - 1) - i;
    return 2.0 * row[n - 1] - row[j >= 0 ? j : 0];
  }
  return row[i];
}

// One separable pass along the fastest axis: (rows, n) -> (rows, n/scale).
void bicubic_axis(const std::vector<double>& in, int rows, int n, int scale,
                  std::vector<double>& out) {
  const int m = n / scale;
  out.resize(static_cast<std::size_t>(rows) * m);
  for (int r = 0; r < rows; ++r) {
    const double* src = in.data() + static_cast<std::ptrdiff_t>(r) * n;
    double* dst = out.data() + static_cast<std::ptrdiff_t>(r) * m;
    for (int o = 0; o < m; ++o) {
      // Plain (non-antialiased) bicubic: unit kernel sampled at the
      // subsampled grid positions, 4 taps.
      const double x = (o + 0.5) * scale - 0.5;
      const int base = static_cast<int>(std::floor(x));
      double acc = 0.0, wsum = 0.0;
      for (int k = base - 1; k <= base + 2; ++k) {
        const double w = cubic(x - k);
        acc += w * tap(src, n, k);
        wsum += w;
      }
      dst[o] = acc / wsum;
    }
  }
}

}  // namespace

Tensor bicubic_downsample(const Tensor& hr, int scale) {
  if (hr.rank() != 3 || hr.dim(0) != 3) throw ShapeError("bicubic: expected (3,H,W)");
  if (scale == 1) return hr;
  if (scale < 1 || hr.dim(1) % scale != 0 || hr.dim(2) % scale != 0)
    throw ShapeError("bicubic: dims must be divisible by scale");
  const int h = hr.dim(1), w = hr.dim(2);
  const int oh = h / scale, ow = w / scale;
  Tensor lr({3, oh, ow});
  std::vector<double> plane(static_cast<std::size_t>(h) * w), half, transposed, quarter;
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        plane[static_cast<std::size_t>(y) * w + x] = hr.v[pix(hr.shape, c, y, x)];
    bicubic_axis(plane, h, w, scale, half);  // (h, ow)
    transposed.resize(half.size());
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < ow; ++x)
        transposed[static_cast<std::size_t>(x) * h + y] = half[static_cast<std::size_t>(y) * ow + x];
    bicubic_axis(transposed, ow, h, scale, quarter);  // (ow, oh)
    for (int x = 0; x < ow; ++x)
      for (int y = 0; y < oh; ++y)
        lr.v[pix(lr.shape, c, y, x)] =
            static_cast<Scalar>(quarter[static_cast<std::size_t>(x) * oh + y]);
  }
  return lr;
}

Tensor d4_apply(const Tensor& img, int variant) {
  if (img.rank() != 3) throw ShapeError("d4_apply: expected (C,H,W)");
  if (variant < 0 || variant > 7) throw ConfigError("d4 variant must be 0..7");
  const int rot = variant & 3;
  const bool flip = (variant & 4) != 0;
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  const int oh = (rot % 2 == 0) ? h : w;
  const int ow = (rot % 2 == 0) ? w : h;
  Tensor out({c, oh, ow});
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        // Source pixel of out(y,x) under flip-then-rotate (rot = quarter
        // turns clockwise).
        int sy = 0, sx = 0;
        switch (rot) {
          case 0: sy = y; sx = x; break;
          case 1: sy = h - 1 - x; sx = y; break;
          case 2: sy = h - 1 - y; sx = w - 1 - x; break;
          case 3: sy = x; sx = w - 1 - y; break;
        }
        if (flip) sx = w - 1 - sx;
        out.v[pix(out.shape, ch, y, x)] = img.v[pix(img.shape, ch, sy, sx)];
      }
    }
  }
  return out;
}

int d4_invert(int variant) {
  const int rot = variant & 3;
  const bool flip = (variant & 4) != 0;
  // flip o rot: inverse is rot^-1 o flip = flip o rot (conjugation flips the
  // rotation sign); without flip the inverse rotation is (4 - rot) % 4.
  return flip ? variant : ((4 - rot) % 4);
}

namespace {

void paint_gradient(Tensor& img, Rng& r) {
  const int h = img.dim(1), w = img.dim(2);
  for (int c = 0; c < 3; ++c) {
    const double base = r.uniform(0.15, 0.85);
    const double gx = r.uniform(-0.7, 0.7);
    const double gy = r.uniform(-0.7, 0.7);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double v = base + gx * (static_cast<double>(x) / w - 0.5) +
                   gy * (static_cast<double>(y) / h - 0.5);
        img.v[pix(img.shape, c, y, x)] = static_cast<Scalar>(std::clamp(v, 0.0, 1.0));
      }
  }
}

void paint_checker(Tensor& img, Rng& r) {
  const int h = img.dim(1), w = img.dim(2);
  const int cell = 4 << r.uniform_int(3);  // 4, 8, 16
  const int py = r.uniform_int(cell), px = r.uniform_int(cell);
  double ca[3], cb[3];
  for (int c = 0; c < 3; ++c) {
    ca[c] = r.uniform(0.0, 1.0);
    cb[c] = r.uniform(0.0, 1.0);
  }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const bool a = (((y + py) / cell) + ((x + px) / cell)) % 2 == 0;
      for (int c = 0; c < 3; ++c)
        img.v[pix(img.shape, c, y, x)] = static_cast<Scalar>(a ? ca[c] : cb[c]);
    }
}

void paint_blobs(Tensor& img, Rng& r) {
  const int h = img.dim(1), w = img.dim(2);
  const int k = 3 + r.uniform_int(6);
  std::vector<std::array<double, 6>> blobs;  // cy, cx, sigma, amp rgb
  for (int i = 0; i < k; ++i)
    blobs.push_back({r.uniform(0.0, h), r.uniform(0.0, w),
                     r.uniform(0.04, 0.22) * std::min(h, w), r.uniform(-0.6, 0.6),
                     r.uniform(-0.6, 0.6), r.uniform(-0.6, 0.6)});
  double base[3];
  for (int c = 0; c < 3; ++c) base[c] = r.uniform(0.25, 0.75);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc[3] = {base[0], base[1], base[2]};
      for (const auto& b : blobs) {
        const double dy = y - b[0], dx = x - b[1];
        const double g = std::exp(-(dy * dy + dx * dx) / (2.0 * b[2] * b[2]));
        for (int c = 0; c < 3; ++c) acc[c] += b[3 + c] * g;
      }
      for (int c = 0; c < 3; ++c)
        img.v[pix(img.shape, c, y, x)] = static_cast<Scalar>(std::clamp(acc[c], 0.0, 1.0));
    }
}

void paint_band_noise(Tensor& img, Rng& r) {
  const int h = img.dim(1), w = img.dim(2);
  constexpr int kWaves = 12;
  struct Wave {
    double fy, fx, phase, amp[3];
  };
  std::vector<Wave> waves(kWaves);
  for (auto& wv : waves) {
    wv.fy = r.uniform(-8.0, 8.0);
    wv.fx = r.uniform(-8.0, 8.0);
    wv.phase = r.uniform(0.0, 2.0 * M_PI);
    for (int c = 0; c < 3; ++c) wv.amp[c] = r.uniform(-1.0, 1.0);
  }
  const double norm = 0.5 / std::sqrt(static_cast<double>(kWaves));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc[3] = {0, 0, 0};
      for (const auto& wv : waves) {
        const double s = std::sin(2.0 * M_PI * (wv.fy * y / h + wv.fx * x / w) + wv.phase);
        for (int c = 0; c < 3; ++c) acc[c] += wv.amp[c] * s;
      }
      for (int c = 0; c < 3; ++c)
        img.v[pix(img.shape, c, y, x)] =
            static_cast<Scalar>(std::clamp(0.5 + norm * acc[c], 0.0, 1.0));
    }
}

Tensor make_texture(const DatasetSpec& spec, int id) {
  Rng r(mix64(spec.seed, static_cast<std::uint64_t>(id)));
  Tensor img({3, spec.hr_size, spec.hr_size});
  double total = 0.0;
  for (double m : spec.texture_mix) {
    if (m < 0.0) throw ConfigError("texture mix weights must be >= 0");
    total += m;
  }
  if (total <= 0.0) throw ConfigError("texture mix must have a positive weight");
  double u = r.uniform() * total;
  int kind = 0;
  for (; kind < 3; ++kind) {
    u -= spec.texture_mix[static_cast<std::size_t>(kind)];
    if (u < 0.0) break;
  }
  switch (kind) {
    case 0: paint_gradient(img, r); break;
    case 1: paint_checker(img, r); break;
    case 2: paint_blobs(img, r); break;
    default: paint_band_noise(img, r); break;
  }
  return img;
}

}  // namespace

Dataset Dataset::generate(const DatasetSpec& spec) {
  if (spec.count_train <= 0 || spec.count_val < 0) throw ConfigError("dataset counts invalid");
  if (spec.scale < 1 || spec.hr_size % spec.scale != 0)
    throw ConfigError("hr_size must be divisible by scale");
  Dataset ds;
  ds.scale_ = spec.scale;
  ds.seed_ = spec.seed;
  ds.source_ = "procedural";
  const int total = spec.count_train + spec.count_val;
  for (int id = 0; id < total; ++id) {
    ImagePair p;
    p.id = id;
    p.hr = make_texture(spec, id);
    p.lr = bicubic_downsample(p.hr, spec.scale);
    (id < spec.count_train ? ds.train_ : ds.val_).push_back(std::move(p));
  }
  ds.compute_mean();
  return ds;
}

void Dataset::compute_mean() {
  double acc[3] = {0, 0, 0};
  std::int64_t count = 0;
  for (const ImagePair& p : train_) {
    const int h = p.hr.dim(1), w = p.hr.dim(2);
    for (int c = 0; c < 3; ++c) {
      const Scalar* px = p.hr.v.data() + pix(p.hr.shape, c, 0, 0);
      double s = 0.0;
      for (std::int64_t i = 0; i < static_cast<std::int64_t>(h) * w; ++i) s += px[i];
      acc[c] += s;
    }
    count += static_cast<std::int64_t>(h) * w;
  }
  if (count == 0) throw StateError("mean over empty training split");
  for (int c = 0; c < 3; ++c) mean_rgb_[static_cast<std::size_t>(c)] = acc[c] / static_cast<double>(count);
}

json Dataset::manifest() const {
  return json{{"seed", seed_},
              {"source", source_},
              {"scale", scale_},
              {"count_train", train_.size()},
              {"count_val", val_.size()},
              {"mean_rgb", {mean_rgb_[0], mean_rgb_[1], mean_rgb_[2]}}};
}

void subtract_mean(Tensor& img, const std::array<double, 3>& mean_rgb) {
  const bool batched = img.rank() == 4;
  if (!batched && img.rank() != 3) throw ShapeError("subtract_mean: rank 3 or 4");
  const int b = batched ? img.dim(0) : 1;
  const int c = batched ? img.dim(1) : img.dim(0);
  if (c != 3) throw ShapeError("subtract_mean: 3 channels expected");
  const std::int64_t plane = img.numel() / (static_cast<std::int64_t>(b) * c);
  for (int n = 0; n < b; ++n)
    for (int ch = 0; ch < 3; ++ch) {
      Scalar* px = img.v.data() + (static_cast<std::int64_t>(n) * 3 + ch) * plane;
      const Scalar m = static_cast<Scalar>(mean_rgb[static_cast<std::size_t>(ch)]);
      for (std::int64_t i = 0; i < plane; ++i) px[i] -= m;
    }
}

void add_mean(Tensor& img, const std::array<double, 3>& mean_rgb) {
  subtract_mean(img, {-mean_rgb[0], -mean_rgb[1], -mean_rgb[2]});
}

Batch sample_patch_batch(const std::vector<ImagePair>& pairs,
                         const std::array<double, 3>& mean_rgb, int scale,
                         int batch, int lr_patch, bool augment, Rng& rng) {
  if (pairs.empty()) throw ConfigError("sample_patch_batch: no images");
  if (batch <= 0 || lr_patch <= 0) throw ConfigError("sample_patch_batch: bad sizes");
  const int hp = lr_patch * scale;
  Batch out;
  out.lr = Tensor({batch, 3, lr_patch, lr_patch});
  out.hr = Tensor({batch, 3, hp, hp});
  for (int b = 0; b < batch; ++b) {
    const ImagePair& p = pairs[static_cast<std::size_t>(
        rng.uniform_int(static_cast<int>(pairs.size())))];
    const int lh = p.lr.dim(1), lw = p.lr.dim(2);
    if (lr_patch > lh || lr_patch > lw) throw ShapeError("lr_patch larger than image");
    const int y0 = rng.uniform_int(lh - lr_patch + 1);
    const int x0 = rng.uniform_int(lw - lr_patch + 1);

    Tensor lr_t({3, lr_patch, lr_patch});
    Tensor hr_t({3, hp, hp});
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < lr_patch; ++y)
        for (int x = 0; x < lr_patch; ++x)
          lr_t.v[pix(lr_t.shape, c, y, x)] = p.lr.v[pix(p.lr.shape, c, y0 + y, x0 + x)];
      for (int y = 0; y < hp; ++y)
        for (int x = 0; x < hp; ++x)
          hr_t.v[pix(hr_t.shape, c, y, x)] =
              p.hr.v[pix(p.hr.shape, c, y0 * scale + y, x0 * scale + x)];
    }
    if (augment) {
      const int variant = rng.uniform_int(8);
      lr_t = d4_apply(lr_t, variant);
      hr_t = d4_apply(hr_t, variant);
    }
    const std::int64_t lr_plane = static_cast<std::int64_t>(lr_patch) * lr_patch;
    const std::int64_t hr_plane = static_cast<std::int64_t>(hp) * hp;
    for (int c = 0; c < 3; ++c) {
      const Scalar m = static_cast<Scalar>(mean_rgb[static_cast<std::size_t>(c)]);
      for (std::int64_t i = 0; i < lr_plane; ++i)
        out.lr.v[(static_cast<std::int64_t>(b) * 3 + c) * lr_plane + i] =
            lr_t.v[c * lr_plane + i] - m;
      for (std::int64_t i = 0; i < hr_plane; ++i)
        out.hr.v[(static_cast<std::int64_t>(b) * 3 + c) * hr_plane + i] =
            hr_t.v[c * hr_plane + i] - m;
    }
  }
  return out;
}

namespace {

Tensor read_png_rgb(const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw IoError("cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw IoError("libpng init failed");
  }
  std::vector<png_bytep> rows;
  std::vector<png_byte> data;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw IoError("failed to decode " + path);
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  png_set_expand(png);          // palettes, low bit depths, tRNS
  png_set_strip_16(png);        // down to 8 bit
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  const std::size_t stride = png_get_rowbytes(png, info);
  data.resize(stride * static_cast<std::size_t>(h));
  rows.resize(static_cast<std::size_t>(h));
  for (int y = 0; y < h; ++y) rows[static_cast<std::size_t>(y)] = data.data() + stride * static_cast<std::size_t>(y);
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);

  Tensor img({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.v[pix(img.shape, c, y, x)] =
            static_cast<Scalar>(data[stride * static_cast<std::size_t>(y) +
                                     static_cast<std::size_t>(x) * 3 + static_cast<std::size_t>(c)]) /
            255.0f;
  return img;
}

Tensor center_crop_multiple(const Tensor& img, int mult) {
  const int h = img.dim(1), w = img.dim(2);
  const int ch = h - h % mult, cw = w - w % mult;
  if (ch <= 0 || cw <= 0) throw ShapeError("image smaller than scale");
  if (ch == h && cw == w) return img;
  const int y0 = (h - ch) / 2, x0 = (w - cw) / 2;
  Tensor out({3, ch, cw});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < ch; ++y)
      for (int x = 0; x < cw; ++x)
        out.v[pix(out.shape, c, y, x)] = img.v[pix(img.shape, c, y0 + y, x0 + x)];
  return out;
}

}  // namespace

Dataset Dataset::from_png_folder(const std::string& dir, int scale, int count_val) {
  std::vector<std::string> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path().string());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no .png files in " + dir);
  if (count_val < 0 || count_val >= static_cast<int>(files.size()))
    throw ConfigError("count_val must leave at least one training image");
  Dataset ds;
  ds.scale_ = scale;
  ds.source_ = "png:" + dir;
  const int train_count = static_cast<int>(files.size()) - count_val;
  for (std::size_t i = 0; i < files.size(); ++i) {
    ImagePair p;
    p.id = static_cast<int>(i);
    p.hr = center_crop_multiple(read_png_rgb(files[i]), scale);
    p.lr = bicubic_downsample(p.hr, scale);
    (static_cast<int>(i) < train_count ? ds.train_ : ds.val_).push_back(std::move(p));
  }
  ds.compute_mean();
  return ds;
}

}  // namespace srnas
