#ifndef DIFFAUG_H
#define DIFFAUG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum DiffaugStatus {
  DIFFAUG_STATUS_OK = 0,
  DIFFAUG_STATUS_NULL_POINTER = 1,
  DIFFAUG_STATUS_INVALID_ARGUMENT = 2,
  DIFFAUG_STATUS_NUMERICAL = 3,
  DIFFAUG_STATUS_IO = 4,
  DIFFAUG_STATUS_PANIC = 5,
} DiffaugStatus;

// Trained classifier loaded from a checkpoint.
typedef struct DiffaugClassifier DiffaugClassifier;

// Gaussian-mixture data distribution.
typedef struct DiffaugMixture DiffaugMixture;

// Diffusion noise schedule.
typedef struct DiffaugSchedule DiffaugSchedule;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or null. The pointer stays
// valid until the next failing call on the same thread.
const char *diffaug_last_error(void);

// Library version as a static NUL-terminated string.
const char *diffaug_version(void);

enum DiffaugStatus diffaug_schedule_ve(double sigma_min,
                                       double sigma_max,
                                       struct DiffaugSchedule **out);

enum DiffaugStatus diffaug_schedule_vp(double beta_min,
                                       double beta_max,
                                       struct DiffaugSchedule **out);

void diffaug_schedule_free(struct DiffaugSchedule *s);

enum DiffaugStatus diffaug_schedule_sigma(const struct DiffaugSchedule *s, double t, double *out);

enum DiffaugStatus diffaug_schedule_mean_coeff(const struct DiffaugSchedule *s,
                                               double t,
                                               double *out);

enum DiffaugStatus diffaug_mixture_canonical(struct DiffaugMixture **out);

// Builds a mixture from fixture JSON text.
enum DiffaugStatus diffaug_mixture_from_json(const char *json, struct DiffaugMixture **out);

void diffaug_mixture_free(struct DiffaugMixture *m);

size_t diffaug_mixture_dim(const struct DiffaugMixture *m);

size_t diffaug_mixture_num_classes(const struct DiffaugMixture *m);

// Exact score `grad log p_t(x)` into `out[dim]`.
enum DiffaugStatus diffaug_score(const struct DiffaugMixture *m,
                                 const struct DiffaugSchedule *s,
                                 const double *x,
                                 size_t dim,
                                 double t,
                                 double *out);

// Posterior mean `E[m_t | x]` into `mean[dim]` and, when non-null, the
// covariance into `cov[dim * dim]`.
enum DiffaugStatus diffaug_posterior(const struct DiffaugMixture *m,
                                     const struct DiffaugSchedule *s,
                                     const double *x,
                                     size_t dim,
                                     double t,
                                     double *mean,
                                     double *cov);

// One-step denoising with the exact score. `x_hat[dim]` is on the mean
// scale; `x0_scale[dim]` (optional) divides by the mean coefficient.
enum DiffaugStatus diffaug_denoise(const struct DiffaugMixture *m,
                                   const struct DiffaugSchedule *s,
                                   const double *x,
                                   size_t dim,
                                   double t,
                                   double *x_hat,
                                   double *x0_scale);

// Largest entrywise gap between the finite-difference denoiser Jacobian
// and `Cov[m_t | x] / sigma^2(t)` at one point.
enum DiffaugStatus diffaug_theorem1_max_diff(const struct DiffaugMixture *m,
                                             const struct DiffaugSchedule *s,
                                             const double *x,
                                             size_t dim,
                                             double t,
                                             double *out);

// Bayes label of `x` at time `t`; the class posterior goes to
// `posterior[num_classes]` when non-null.
enum DiffaugStatus diffaug_bayes(const struct DiffaugMixture *m,
                                 const struct DiffaugSchedule *s,
                                 const double *x,
                                 size_t dim,
                                 double t,
                                 size_t *label,
                                 double *posterior);

// AUROC with the first list as positives, plus FPR at 95% TPR.
enum DiffaugStatus diffaug_auroc(const double *in_scores,
                                 size_t n_in,
                                 const double *out_scores,
                                 size_t n_out,
                                 double *auroc_out,
                                 double *fpr95_out);

// Precision, recall, density, coverage into `out[4]`.
enum DiffaugStatus diffaug_prdc(const double *real,
                                size_t n_real,
                                const double *generated,
                                size_t n_gen,
                                size_t dim,
                                size_t k,
                                double *out);

// Clopper-Pearson lower confidence bound for `k` successes in `n`.
enum DiffaugStatus diffaug_clopper_pearson_lower(size_t k, size_t n, double alpha, double *out);

// Certified radius `sigma * Phi^-1(p_lower)`. `certified` is set to 0 and
// the radius to 0 when `p_lower <= 1/2` (abstain).
enum DiffaugStatus diffaug_certified_radius(double sigma,
                                            double p_lower,
                                            double *radius,
                                            int32_t *certified);

// Loads a plain classifier checkpoint written by `train-classifier`.
enum DiffaugStatus diffaug_classifier_load(const char *path, struct DiffaugClassifier **out);

void diffaug_classifier_free(struct DiffaugClassifier *c);

size_t diffaug_classifier_num_classes(const struct DiffaugClassifier *c);

// Class probabilities of `n` points `x[n * dim]` into `out[n * classes]`.
enum DiffaugStatus diffaug_classifier_probs(const struct DiffaugClassifier *c,
                                            const double *x,
                                            size_t n,
                                            size_t dim,
                                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIFFAUG_H */
