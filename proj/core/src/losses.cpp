#include "npp/losses.hpp"

#include <cmath>

#include "npp/nn_ops.hpp"
#include "npp/tensor_ops.hpp"

namespace npp::losses {

namespace {

// Normalized Gaussian taps in double precision, cast once.
template <class T>
std::vector<T> gauss_taps(int window, double sigma) {
  std::vector<double> w(static_cast<size_t>(window));
  const double c = (window - 1) / 2.0;
  double sum = 0.0;
  for (int i = 0; i < window; ++i) {
    w[static_cast<size_t>(i)] = std::exp(-(i - c) * (i - c) / (2.0 * sigma * sigma));
    sum += w[static_cast<size_t>(i)];
  }
  std::vector<T> out(static_cast<size_t>(window));
  for (int i = 0; i < window; ++i)
    out[static_cast<size_t>(i)] = static_cast<T>(w[static_cast<size_t>(i)] / sum);
  return out;
}

// Separable valid-mode Gaussian blur along D, then H, then W.
template <class T>
ad::Tensor<T> gauss_blur(ad::Tape<T>& g, const ad::Tensor<T>& x, int window, double sigma) {
  const std::vector<T> taps = gauss_taps<T>(window, sigma);
  const ad::Tensor<T> zero_bias(ad::Shape{1}, std::vector<T>{T(0)});
  auto kernel = [&](int kd, int kh, int kw) {
    std::vector<T> v = taps;
    return ad::Tensor<T>(ad::Shape{1, 1, kd, kh, kw}, std::move(v));
  };
  ad::Tensor<T> h = ad::conv3d(g, x, kernel(window, 1, 1), zero_bias, 1, 0);
  h = ad::conv3d(g, h, kernel(1, window, 1), zero_bias, 1, 0);
  h = ad::conv3d(g, h, kernel(1, 1, window), zero_bias, 1, 0);
  return h;
}

}  // namespace

template <class T>
ad::Tensor<T> ssim_loss(ad::Tape<T>& g, const ad::Tensor<T>& a, const ad::Tensor<T>& b,
                        int window, double sigma) {
  ad::require(a.ndim() == 5 && b.ndim() == 5 && a.shape == b.shape,
              "ssim_loss: inputs must be equal-shape [N,1,D,H,W]");
  ad::require(a.dim(1) == 1, "ssim_loss: single-channel volumes only");
  ad::require(window >= 1 && window % 2 == 1, "ssim_loss: window must be odd and positive");
  if (!(sigma > 0.0)) throw domain_error("ssim_loss: sigma must be positive");
  for (int ax = 2; ax < 5; ++ax)
    ad::require(a.dim(ax) >= window, "ssim_loss: extent " + std::to_string(a.dim(ax)) +
                                         " smaller than window " + std::to_string(window));

  constexpr double kC1 = 0.01 * 0.01;
  constexpr double kC2 = 0.03 * 0.03;

  ad::Tensor<T> mu_a = gauss_blur(g, a, window, sigma);
  ad::Tensor<T> mu_b = gauss_blur(g, b, window, sigma);
  ad::Tensor<T> m_aa = gauss_blur(g, ad::mul(g, a, a), window, sigma);
  ad::Tensor<T> m_bb = gauss_blur(g, ad::mul(g, b, b), window, sigma);
  ad::Tensor<T> m_ab = gauss_blur(g, ad::mul(g, a, b), window, sigma);

  ad::Tensor<T> mu_ab = ad::mul(g, mu_a, mu_b);
  ad::Tensor<T> var_a = ad::sub(g, m_aa, ad::mul(g, mu_a, mu_a));
  ad::Tensor<T> var_b = ad::sub(g, m_bb, ad::mul(g, mu_b, mu_b));
  ad::Tensor<T> cov = ad::sub(g, m_ab, mu_ab);

  ad::Tensor<T> num = ad::mul(g, ad::add_scalar(g, ad::mul_scalar(g, mu_ab, 2.0), kC1),
                              ad::add_scalar(g, ad::mul_scalar(g, cov, 2.0), kC2));
  ad::Tensor<T> den =
      ad::mul(g,
              ad::add_scalar(g, ad::add(g, ad::mul(g, mu_a, mu_a), ad::mul(g, mu_b, mu_b)), kC1),
              ad::add_scalar(g, ad::add(g, var_a, var_b), kC2));
  ad::Tensor<T> ssim = ad::mean_all(g, ad::div(g, num, den));
  return ad::add_scalar(g, ad::mul_scalar(g, ssim, -1.0), 1.0);
}

template <class T>
ad::Tensor<T> tv_loss(ad::Tape<T>& g, const ad::Tensor<T>& chi) {
  return ad::tv3d(g, chi);
}

template <class T>
Objective<T> npp_objective(ad::Tape<T>& g, const model::NppOutput<T>& out,
                           const ad::Tensor<T>& x_gt, double lambda) {
  if (!(lambda >= 0.0) || !std::isfinite(lambda))
    throw domain_error("npp_objective: lambda must be finite and non-negative");
  Objective<T> obj;
  obj.lambda = lambda;
  obj.rec = ssim_loss(g, out.warped, x_gt);
  if (out.chi.defined())
    obj.tv = tv_loss(g, out.chi);
  else
    obj.tv = ad::Tensor<T>(ad::Shape{1}, std::vector<T>{T(0)});
  obj.total = ad::add(g, obj.rec, ad::mul_scalar(g, obj.tv, lambda));
  return obj;
}

#define NPP_INSTANTIATE_LOSSES(T)                                                       \
  template ad::Tensor<T> ssim_loss<T>(ad::Tape<T>&, const ad::Tensor<T>&,              \
                                      const ad::Tensor<T>&, int, double);              \
  template ad::Tensor<T> tv_loss<T>(ad::Tape<T>&, const ad::Tensor<T>&);               \
  template Objective<T> npp_objective<T>(ad::Tape<T>&, const model::NppOutput<T>&,     \
                                         const ad::Tensor<T>&, double);

NPP_INSTANTIATE_LOSSES(float)
NPP_INSTANTIATE_LOSSES(double)
#undef NPP_INSTANTIATE_LOSSES

}  // namespace npp::losses
