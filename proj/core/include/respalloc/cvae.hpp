#pragma once

#include <string>
#include <vector>

#include <Eigen/Core>

#include "respalloc/filter.hpp"
#include "respalloc/param_store.hpp"
#include "respalloc/rng.hpp"
#include "respalloc/sequence.hpp"
#include "respalloc/tape.hpp"

namespace resp {

struct ReconConfig {
  double sigma = 0.5;  // control-likelihood std, m/s^2
  bool learn_sigma = false;

  bool valid() const { return sigma > 0.0 && std::isfinite(sigma); }
};

struct CVAEConfig {
  EncoderConfig encoder;
  long d_z = 2;
  std::string latent = "gaussian";       // gaussian | discrete
  long n_categories = 4;                 // discrete latent only
  std::string decoder_output = "gamma";  // gamma | direct_u
  Activation activation = Activation::tanh;  // applied to raw gamma
  ReconConfig recon;
  long head_hidden = 16;
  long u_embed = 16;

  bool valid() const;
  long latent_dim() const { return latent == "discrete" ? n_categories : d_z; }
};

// Diagonal Gaussians over per-agent latents, one row per agent slot.
struct LatentGaussian {
  Eigen::MatrixXd mean;
  Eigen::MatrixXd log_var;
};

struct CVAEModel {
  CVAEConfig cfg;
  ParamStore params;
};

CVAEModel make_cvae(const CVAEConfig& cfg);
void init_cvae(CVAEModel& model, Rng& rng);

// ---- tape path (training) -------------------------------------------------

struct LatentGaussianVar {
  ad::Var mean;
  ad::Var log_var;
};

LatentGaussianVar prior_head(ParamBinding& p, const CVAEConfig& cfg, const ContextFeatures& ctx);
LatentGaussianVar posterior_head(ParamBinding& p, const CVAEConfig& cfg,
                                 const ContextFeatures& ctx, const Eigen::MatrixXd& u_obs);
// Discrete-latent heads (category logits, n_max × K).
ad::Var prior_logits(ParamBinding& p, const CVAEConfig& cfg, const ContextFeatures& ctx);
ad::Var posterior_logits(ParamBinding& p, const CVAEConfig& cfg, const ContextFeatures& ctx,
                         const Eigen::MatrixXd& u_obs);

// z = mean + exp(log_var/2) .* noise
ad::Var reparam_sample_var(LatentGaussianVar g, const Eigen::MatrixXd& noise);

// Raw decoder output per agent: 1 col (gamma), 2 cols (discrete gamma
// mean/log_var), or 2 cols (direct u). Conditions on z_i, the agent feature,
// and the pooled mean of the other valid agents' latents.
ad::Var decode_gamma_var(ParamBinding& p, const CVAEConfig& cfg, ad::Var z,
                         const ContextFeatures& ctx);

ad::Var kl_gaussian_var(LatentGaussianVar q, LatentGaussianVar p,
                        const std::vector<char>& agent_valid);
ad::Var kl_categorical_var(ad::Var q_logits, ad::Var p_logits,
                           const std::vector<char>& agent_valid);

ad::Var apply_activation_var(ad::Var raw, Activation mode, double beta1,
                             const std::vector<char>& agent_valid);

ad::Var gumbel_softmax_var(ad::Var logits, double temperature, const Eigen::MatrixXd& gumbel_noise);

// ---- plain evaluation path --------------------------------------------------

LatentGaussian prior(const CVAEModel& m, const SceneSequence& seq);
LatentGaussian posterior(const CVAEModel& m, const SceneSequence& seq,
                         const Eigen::MatrixXd& u_obs);
Eigen::MatrixXd reparam_sample(const LatentGaussian& g, const Eigen::MatrixXd& noise);
// Raw decoder output (n_max rows; invalid-agent rows zeroed).
Eigen::MatrixXd decode_gamma(const CVAEModel& m, const Eigen::MatrixXd& z,
                             const SceneSequence& seq);
double kl_gaussian(const LatentGaussian& q, const LatentGaussian& p);
Eigen::MatrixXd gumbel_softmax_sample(const Eigen::MatrixXd& logits, double temperature, Rng& rng);

// Pushforward samples of activated gamma: z ~ prior, decode, activate.
// Returns n_samples × n_max; invalid agents stay zero.
Eigen::MatrixXd sample_gamma(const CVAEModel& m, const SceneSequence& seq, long n_samples,
                             const FilterConfig& fcfg, Rng& rng);

// Discrete-latent mixture over raw gamma, one component per category.
struct GammaGMM {
  Eigen::MatrixXd weight;  // n_max × K, rows sum to 1 for valid agents
  Eigen::MatrixXd mean;    // n_max × K
  Eigen::MatrixXd var;     // n_max × K
};
GammaGMM gamma_gmm(const CVAEModel& m, const SceneSequence& seq);

// One prior-sampled control for every valid agent: responsibility models
// decode gamma and project through the filter; direct-u models emit the
// decoder output as-is.
struct ControlSample {
  Eigen::MatrixXd u;               // n_max × 2 (invalid rows zero)
  Eigen::VectorXd gamma;           // n_max activated (zero where unused)
  double epsilon = 0.0;
  bool filter_ok = true;
};
ControlSample sample_controls(const CVAEModel& m, const SceneSequence& seq,
                              const Eigen::MatrixXd& u_des, const FilterConfig& fcfg, Rng& rng);

// ---- ELBO -------------------------------------------------------------------

struct ElboOptions {
  double beta_kl = 1.0;
  double gumbel_tau = 1.0;            // discrete latent only
  bool skip_filter_failures = false;  // otherwise convexity errors rethrow with datum index
};

struct ElboResult {
  double loss = 0.0;
  double kl = 0.0;
  double nll = 0.0;
  double mean_epsilon = 0.0;
  long skipped = 0;
  bool degenerate_vjp = false;
};

// Single-sample ELBO estimate averaged over the batch. If grad is non-null it
// receives d(loss)/d(params) in the store's flat layout.
ElboResult elbo_loss(const CVAEModel& m, const std::vector<SceneDatum>& batch,
                     const ElboOptions& opts, const FilterConfig& fcfg, Rng& rng,
                     Eigen::VectorXd* grad = nullptr);

}  // namespace resp
