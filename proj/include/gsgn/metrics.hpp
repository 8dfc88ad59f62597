#pragma once

// PSNR and SSIM on [0, 1] images plus the per-image / per-task report that
// evaluation emits as CSV and JSON.

#include <iomanip>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>

#include "gsgn/tensor.hpp"

namespace gsgn {

inline constexpr double kPsnrCapDb = 100.0;
inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;

inline double psnr_from_mse(double mse, double max_value = 1.0) {
  if (mse <= 0.0) return kPsnrCapDb;
  return std::min(kPsnrCapDb, 10.0 * std::log10(max_value * max_value / mse));
}

template <class T>
double mean_squared_error(const Tensor<T>& x, const Tensor<T>& y) {
  if (x.shape() != y.shape())
    throw ShapeError("metric inputs differ in shape: " + to_string(x.shape()) + " vs " + to_string(y.shape()));
  const auto& a = x.values();
  const auto& b = y.values();
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

/// 10 log10(max^2 / MSE), capped at 100 dB (identical images report the cap).
template <class T>
double psnr(const Tensor<T>& x, const Tensor<T>& y, double max_value = 1.0) {
  return psnr_from_mse(mean_squared_error(x, y), max_value);
}

namespace detail {

// Channel-mean grayscale plane of a CHW or 1xCxHxW image.
template <class T>
std::vector<double> grayscale(const Tensor<T>& x, std::size_t& H, std::size_t& W) {
  std::size_t C;
  if (x.dim() == 3) {
    C = x.size(0), H = x.size(1), W = x.size(2);
  } else if (x.dim() == 4 && x.size(0) == 1) {
    C = x.size(1), H = x.size(2), W = x.size(3);
  } else {
    throw ShapeError("ssim expects a CHW image, got " + to_string(x.shape()));
  }
  std::vector<double> g(H * W, 0.0);
  const auto& v = x.values();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < H * W; ++i) g[i] += v[c * H * W + i];
  for (auto& p : g) p /= static_cast<double>(C);
  return g;
}

inline std::vector<double> gaussian_window() {
  std::vector<double> k(kSsimWindow);
  double s = 0.0;
  for (int i = 0; i < kSsimWindow; ++i) {
    const double d = i - kSsimWindow / 2;
    k[i] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
    s += k[i];
  }
  for (auto& v : k) v /= s;
  return k;
}

// Separable valid-mode filtering: (H, W) -> (H - 10, W - 10).
inline std::vector<double> filter_valid(const std::vector<double>& img, std::size_t H, std::size_t W,
                                        const std::vector<double>& k) {
  const std::size_t R = kSsimWindow, Ho = H - R + 1, Wo = W - R + 1;
  std::vector<double> tmp(H * Wo), out(Ho * Wo);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < Wo; ++x) {
      double s = 0.0;
      for (std::size_t i = 0; i < R; ++i) s += k[i] * img[y * W + x + i];
      tmp[y * Wo + x] = s;
    }
  for (std::size_t y = 0; y < Ho; ++y)
    for (std::size_t x = 0; x < Wo; ++x) {
      double s = 0.0;
      for (std::size_t i = 0; i < R; ++i) s += k[i] * tmp[(y + i) * Wo + x];
      out[y * Wo + x] = s;
    }
  return out;
}

}  // namespace detail

/// Mean SSIM over valid 11x11 Gaussian (sigma 1.5) windows of the channel-mean
/// grayscale images, K1 = 0.01, K2 = 0.03, dynamic range 1.
template <class T>
double ssim(const Tensor<T>& x, const Tensor<T>& y) {
  if (x.shape() != y.shape())
    throw ShapeError("ssim inputs differ in shape: " + to_string(x.shape()) + " vs " + to_string(y.shape()));
  std::size_t H, W;
  auto a = detail::grayscale(x, H, W);
  auto b = detail::grayscale(y, H, W);
  if (H < static_cast<std::size_t>(kSsimWindow) || W < static_cast<std::size_t>(kSsimWindow))
    throw ShapeError("ssim: image " + std::to_string(H) + "x" + std::to_string(W) + " is smaller than the " +
                     std::to_string(kSsimWindow) + "x" + std::to_string(kSsimWindow) + " window");
  const auto k = detail::gaussian_window();
  std::vector<double> aa(a.size()), bb(a.size()), ab(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  auto mu_a = detail::filter_valid(a, H, W, k);
  auto mu_b = detail::filter_valid(b, H, W, k);
  auto e_aa = detail::filter_valid(aa, H, W, k);
  auto e_bb = detail::filter_valid(bb, H, W, k);
  auto e_ab = detail::filter_valid(ab, H, W, k);
  const double C1 = kSsimK1 * kSsimK1, C2 = kSsimK2 * kSsimK2;
  double total = 0.0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double ma = mu_a[i], mb = mu_b[i];
    const double va = e_aa[i] - ma * ma, vb = e_bb[i] - mb * mb, cov = e_ab[i] - ma * mb;
    total += ((2 * ma * mb + C1) * (2 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
  }
  return total / static_cast<double>(mu_a.size());
}

struct ImageScore {
  std::string id;
  std::string task;
  double psnr_db = 0.0;
  double ssim = 0.0;
};

struct TaskRow {
  std::string task;
  std::size_t count = 0;
  double psnr_db = 0.0;
  double ssim = 0.0;
};

/// Per-image scores with per-task rows (in first-appearance order) and an
/// average row equal to the mean of the per-task rows. LPIPS is not computed;
/// the JSON keeps a null slot for externally merged values.
struct MetricReport {
  std::vector<ImageScore> images;

  void add(ImageScore s) { images.push_back(std::move(s)); }

  double mean_psnr() const { return mean_of(&ImageScore::psnr_db); }
  double mean_ssim() const { return mean_of(&ImageScore::ssim); }

  std::vector<TaskRow> per_task() const {
    std::vector<TaskRow> rows;
    std::map<std::string, std::size_t> where;
    for (const auto& s : images) {
      auto [it, inserted] = where.emplace(s.task, rows.size());
      if (inserted) rows.push_back({s.task, 0, 0.0, 0.0});
      auto& r = rows[it->second];
      ++r.count;
      r.psnr_db += s.psnr_db;
      r.ssim += s.ssim;
    }
    for (auto& r : rows) {
      r.psnr_db /= static_cast<double>(r.count);
      r.ssim /= static_cast<double>(r.count);
    }
    return rows;
  }

  TaskRow average() const {
    auto rows = per_task();
    TaskRow a{"average", images.size(), 0.0, 0.0};
    if (rows.empty()) return a;
    for (const auto& r : rows) {
      a.psnr_db += r.psnr_db;
      a.ssim += r.ssim;
    }
    a.psnr_db /= static_cast<double>(rows.size());
    a.ssim /= static_cast<double>(rows.size());
    return a;
  }

  /// image-id,task,psnr_db,ssim
  std::string to_csv() const {
    std::ostringstream os;
    os << std::setprecision(10);
    os << "image_id,task,psnr_db,ssim\n";
    for (const auto& s : images) os << s.id << ',' << s.task << ',' << s.psnr_db << ',' << s.ssim << '\n';
    return os.str();
  }

  /// task,count,psnr_db,ssim with a trailing average row.
  std::string summary_csv() const {
    std::ostringstream os;
    os << std::setprecision(10);
    os << "task,count,psnr_db,ssim\n";
    auto rows = per_task();
    rows.push_back(average());
    for (const auto& r : rows) os << r.task << ',' << r.count << ',' << r.psnr_db << ',' << r.ssim << '\n';
    return os.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json tasks = nlohmann::json::array();
    for (const auto& r : per_task())
      tasks.push_back({{"task", r.task}, {"count", r.count}, {"psnr_db", r.psnr_db}, {"ssim", r.ssim},
                       {"lpips", nullptr}});
    const auto avg = average();
    return {{"tasks", tasks},
            {"average", {{"psnr_db", avg.psnr_db}, {"ssim", avg.ssim}, {"lpips", nullptr}}},
            {"dataset_mean", {{"psnr_db", mean_psnr()}, {"ssim", mean_ssim()}}},
            {"count", images.size()}};
  }

 private:
  double mean_of(double ImageScore::*field) const {
    if (images.empty()) return 0.0;
    double s = 0.0;
    for (const auto& i : images) s += i.*field;
    return s / static_cast<double>(images.size());
  }
};

}  // namespace gsgn
