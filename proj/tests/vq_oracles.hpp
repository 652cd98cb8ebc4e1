#pragma once

// Independent checks for the tokenizer, shared by the unit tests and the
// acceptance runner.

#include <algorithm>
#include <cmath>
#include <limits>

#include "gradcheck.hpp"
#include "vpcsv/vqvae.hpp"

namespace vpcsv::testing {

/// Fraction of cells whose index equals an exhaustive first-minimum search.
template <typename Scalar>
double brute_force_agreement(const Tensor<Scalar>& z, const Tensor<Scalar>& codebook, const std::vector<int>& indices) {
  const Index K = codebook.dim(0), D = codebook.dim(1);
  const Index cells = z.numel() / D;
  Index agree = 0;
  for (Index c = 0; c < cells; ++c) {
    long double best = std::numeric_limits<long double>::infinity();
    Index arg = -1;
    for (Index k = 0; k < K; ++k) {
      long double d2 = 0;
      for (Index d = 0; d < D; ++d) {
        const long double diff = static_cast<long double>(z.data()[c * D + d]) - codebook.data()[k * D + d];
        d2 += diff * diff;
      }
      if (d2 < best) {
        best = d2;
        arg = k;
      }
    }
    agree += indices[static_cast<std::size_t>(c)] == arg;
  }
  return static_cast<double>(agree) / static_cast<double>(cells);
}

struct DirectVqLosses {
  double recon = 0, codebook = 0, commit = 0;
};

/// Evaluates the three loss terms with explicit loops over cells and pixels.
inline DirectVqLosses direct_vq_losses(const vq::VqVae<double>& model, const Tensor<double>& x) {
  NoGradGuard guard;
  const auto z = model.encode(x);
  const auto& cb = model.codebook();
  const Index D = cb.dim(1), K = cb.dim(0);
  const Index cells = z.numel() / D;
  VectorX<double> e(z.numel());
  DirectVqLosses out;
  for (Index c = 0; c < cells; ++c) {
    double best = std::numeric_limits<double>::infinity();
    Index arg = 0;
    for (Index k = 0; k < K; ++k) {
      double d2 = 0;
      for (Index d = 0; d < D; ++d) d2 += std::pow(z.data()[c * D + d] - cb.data()[k * D + d], 2);
      if (d2 < best) {
        best = d2;
        arg = k;
      }
    }
    for (Index d = 0; d < D; ++d) e[c * D + d] = cb.data()[arg * D + d];
    out.codebook += best;
  }
  out.codebook /= static_cast<double>(cells);
  out.commit = model.config().beta * out.codebook;
  const auto x_hat = model.decode(Tensor<double>::from_data(z.shape(), e));
  for (Index i = 0; i < x.numel(); ++i) out.recon += std::pow(x.data()[i] - x_hat.data()[i], 2);
  out.recon /= static_cast<double>(x.numel());
  return out;
}

inline std::vector<Tensor<double>> param_group(vq::VqVae<double>& model, const std::vector<std::string>& names) {
  std::vector<Tensor<double>> out;
  for (const auto& n : names) out.push_back(model.parameters().at(n));
  return out;
}

struct VqTermGradChecks {
  double recon_decoder = 0, codebook_codebook = 0, commit_encoder = 0;
};

/// Finite differences of each term toward the parameters it is meant to
/// train. Other directions are excluded: the straight-through and stop-gradient
/// paths are deliberately not true derivatives.
inline VqTermGradChecks vq_term_gradchecks(vq::VqVae<double>& model, const Tensor<double>& x) {
  // Zero-initialized biases leave a ReLU input at exactly 0 wherever every
  // incoming activation is 0 (a dead channel), and central differences
  // straddle that kink. Shift the biases off zero first.
  Rng jitter(Rng::derive(0, "bias-jitter"));
  for (auto& [name, t] : model.parameters())
    if (name.ends_with(".b"))
      for (Index i = 0; i < t.numel(); ++i) t.data()[i] += jitter.uniform(0.05, 0.15) * (jitter.below(2) ? 1 : -1);
  VqTermGradChecks r;
  r.recon_decoder = gradcheck([&] { return model.loss(x).recon; }, param_group(model, model.decoder_parameter_names()))
                        .max_rel_error;
  r.codebook_codebook = gradcheck([&] { return model.loss(x).codebook; }, {model.codebook()}).max_rel_error;
  r.commit_encoder =
      gradcheck([&] { return model.loss(x).commit; }, param_group(model, model.encoder_parameter_names()))
          .max_rel_error;
  return r;
}

struct VqRouting {
  double recon_to_encoder = 0, recon_to_decoder = 0, recon_to_codebook = 0;
  double codebook_to_encoder = 0, codebook_to_decoder = 0, codebook_to_codebook = 0;
  double commit_to_encoder = 0, commit_to_decoder = 0, commit_to_codebook = 0;
  /// Largest change of the blocked cross-gradients (commit -> codebook,
  /// codebook -> encoder) when the codebook or the encoder is perturbed.
  double max_change_under_perturbation = 0;
  /// Change of d(commit)/d(encoder) under a codebook perturbation. Nonzero by
  /// construction since that gradient is 2 beta (z_e - e); reported only.
  double commit_encoder_shift = 0;
  /// |dL_recon/dz_e - dL_recon/dz_q| with the straight-through estimator.
  double straight_through_mismatch = 0;
};

namespace detail {

inline VectorX<double> flat_grad(const std::vector<Tensor<double>>& group) {
  Index n = 0;
  for (const auto& t : group) n += t.numel();
  VectorX<double> out(n);
  Index o = 0;
  for (const auto& t : group) {
    out.segment(o, t.numel()) = t.grad();
    o += t.numel();
  }
  return out;
}

struct TermGrads {
  VectorX<double> encoder, decoder, codebook;
};

inline TermGrads term_grads(vq::VqVae<double>& model, const Tensor<double>& x, int term) {
  model.parameters().zero_grad();
  const auto l = model.loss(x);
  backward(term == 0 ? l.recon : term == 1 ? l.codebook : l.commit);
  TermGrads g{flat_grad(param_group(model, model.encoder_parameter_names())),
              flat_grad(param_group(model, model.decoder_parameter_names())), model.codebook().grad()};
  model.parameters().zero_grad();
  return g;
}

inline void perturb(const std::vector<Tensor<double>>& group, Rng& rng, double amount) {
  for (auto t : group)
    for (Index i = 0; i < t.numel(); ++i) t.data()[i] += rng.uniform(-amount, amount);
}

inline double max_abs_diff(const VectorX<double>& a, const VectorX<double>& b) {
  return a.size() == 0 ? 0.0 : (a - b).cwiseAbs().maxCoeff();
}

}  // namespace detail

inline VqRouting vq_routing(vq::VqVae<double>& model, const Tensor<double>& x, Rng& rng) {
  using detail::term_grads;
  VqRouting r;
  const auto recon = term_grads(model, x, 0);
  const auto cbk = term_grads(model, x, 1);
  const auto commit = term_grads(model, x, 2);
  r.recon_to_encoder = recon.encoder.norm();
  r.recon_to_decoder = recon.decoder.norm();
  r.recon_to_codebook = recon.codebook.norm();
  r.codebook_to_encoder = cbk.encoder.norm();
  r.codebook_to_decoder = cbk.decoder.norm();
  r.codebook_to_codebook = cbk.codebook.norm();
  r.commit_to_encoder = commit.encoder.norm();
  r.commit_to_decoder = commit.decoder.norm();
  r.commit_to_codebook = commit.codebook.norm();

  // codebook perturbation
  detail::perturb({model.codebook()}, rng, 0.05);
  const auto cbk_after_cb = term_grads(model, x, 1);
  const auto commit_after_cb = term_grads(model, x, 2);
  // encoder perturbation on top
  detail::perturb(param_group(model, model.encoder_parameter_names()), rng, 0.05);
  const auto cbk_after_enc = term_grads(model, x, 1);
  const auto commit_after_enc = term_grads(model, x, 2);
  r.max_change_under_perturbation = std::max(
      {detail::max_abs_diff(cbk.encoder, cbk_after_cb.encoder), detail::max_abs_diff(commit.codebook, commit_after_cb.codebook),
       detail::max_abs_diff(cbk.encoder, cbk_after_enc.encoder),
       detail::max_abs_diff(commit.codebook, commit_after_enc.codebook)});
  r.commit_encoder_shift = detail::max_abs_diff(commit.encoder, commit_after_cb.encoder);

  model.parameters().zero_grad();
  auto z_e = model.encode(x);
  z_e.retain_grad();
  auto q = vq::quantize(z_e, model.codebook());
  q.straight.retain_grad();
  backward(squared_error(model.decode(q.straight), x));
  r.straight_through_mismatch = detail::max_abs_diff(z_e.grad(), q.straight.grad());
  model.parameters().zero_grad();
  return r;
}

}  // namespace vpcsv::testing
