#ifndef MIRT_H
#define MIRT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum MirtStatus {
  MIRT_STATUS_OK = 0,
  MIRT_STATUS_NULL_ARGUMENT = 1,
  MIRT_STATUS_INVALID_INPUT = 2,
  MIRT_STATUS_DIVERGED = 3,
  MIRT_STATUS_IO = 4,
  MIRT_STATUS_OUT_OF_RANGE = 5,
  MIRT_STATUS_PANIC = 6,
} MirtStatus;

typedef enum MirtStage {
  MIRT_STAGE_SEEDING = 0,
  MIRT_STAGE_LB_ACTIVE = 1,
  MIRT_STAGE_BOTH_ACTIVE = 2,
  MIRT_STAGE_UB_ACTIVE = 3,
  MIRT_STAGE_EXHAUSTED = 4,
} MirtStage;

typedef struct MirtBank MirtBank;

typedef struct MirtPosterior MirtPosterior;

typedef struct MirtResponses MirtResponses;

typedef struct MirtSelection MirtSelection;

/*
 Fit settings; obtain defaults from [`mirt_fit_options_default`].
 */
typedef struct MirtFitOptions {
  double learning_rate;
  size_t max_iters;
  size_t mc_samples;
  uint64_t seed;
  double prior_stddev;
} MirtFitOptions;

/*
 Selection settings; obtain defaults from [`mirt_select_options_default`].
 */
typedef struct MirtSelectOptions {
  double lb_log;
  double ub_log;
  size_t epoch;
  size_t seed_count;
  uint32_t seed_max_concepts;
  /*
   False plugs in the latest snapshot's means; true averages concept probabilities
   over the latest snapshot's posterior.
   */
  bool posterior_mean;
} MirtSelectOptions;

/*
 Message for the most recent failure on this thread, or null. The pointer stays valid
 until the next call into this library from the same thread.
 */
const char *mirt_last_error(void);

struct MirtFitOptions mirt_fit_options_default(void);

struct MirtSelectOptions mirt_select_options_default(void);

/*
 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum MirtStatus mirt_bank_load(const char *path, struct MirtBank **out);

/*
 # Safety
 `bank` must be null or a handle from [`mirt_bank_load`] not yet freed.
 */
void mirt_bank_free(struct MirtBank *bank);

/*
 # Safety
 `bank` must be a live handle.
 */
size_t mirt_bank_num_questions(const struct MirtBank *bank);

/*
 # Safety
 `bank` must be a live handle.
 */
size_t mirt_bank_num_concepts(const struct MirtBank *bank);

/*
 # Safety
 `path` must be a NUL-terminated string, `bank` a live handle, `out` writable.
 */
enum MirtStatus mirt_responses_load(const char *path,
                                    const struct MirtBank *bank,
                                    struct MirtResponses **out);

/*
 # Safety
 `responses` must be null or a live handle.
 */
void mirt_responses_free(struct MirtResponses *responses);

/*
 # Safety
 `responses` must be a live handle.
 */
size_t mirt_responses_num_snapshots(const struct MirtResponses *responses);

/*
 Fits the posterior. `options` and `warm_start` may be null (defaults / prior start).

 # Safety
 Handles must be live; `options` null or valid; `out` writable.
 */
enum MirtStatus mirt_fit(const struct MirtBank *bank,
                         const struct MirtResponses *responses,
                         const struct MirtFitOptions *options,
                         const struct MirtPosterior *warm_start,
                         struct MirtPosterior **out);

/*
 Loads a posterior file and checks it against `bank`'s concept vocabulary.

 # Safety
 `path` must be a NUL-terminated string, `bank` a live handle, `out` writable.
 */
enum MirtStatus mirt_posterior_load(const char *path,
                                    const struct MirtBank *bank,
                                    struct MirtPosterior **out);

/*
 Writes the posterior atomically.

 # Safety
 `post` must be a live handle and `path` a NUL-terminated string.
 */
enum MirtStatus mirt_posterior_save(const struct MirtPosterior *post, const char *path);

/*
 # Safety
 `post` must be null or a live handle.
 */
void mirt_posterior_free(struct MirtPosterior *post);

/*
 # Safety
 `post` must be a live handle.
 */
size_t mirt_posterior_num_snapshots(const struct MirtPosterior *post);

/*
 # Safety
 `post` must be a live handle.
 */
size_t mirt_posterior_num_concepts(const struct MirtPosterior *post);

/*
 Final smoothed ELBO, iteration count and convergence flag of the producing fit.

 # Safety
 `post` must be a live handle; each output pointer may be null.
 */
enum MirtStatus mirt_posterior_fit_summary(const struct MirtPosterior *post,
                                           double *elbo_final,
                                           size_t *iterations,
                                           bool *converged);

/*
 Copies the difficulty means (one per concept) into `out`.

 # Safety
 `post` must be a live handle and `out` must hold `len` doubles.
 */
enum MirtStatus mirt_posterior_difficulty_means(const struct MirtPosterior *post,
                                                double *out,
                                                size_t len);

/*
 Copies the competence means of row `snapshot` (0-based, ascending snapshot id).

 # Safety
 `post` must be a live handle and `out` must hold `len` doubles.
 */
enum MirtStatus mirt_posterior_competence_means(const struct MirtPosterior *post,
                                                size_t snapshot,
                                                double *out,
                                                size_t len);

/*
 # Safety
 Handles must be live; `options` null or valid; `out` writable.
 */
enum MirtStatus mirt_select(const struct MirtBank *bank,
                            const struct MirtPosterior *post,
                            const struct MirtSelectOptions *options,
                            struct MirtSelection **out);

/*
 # Safety
 `sel` must be null or a live handle.
 */
void mirt_selection_free(struct MirtSelection *sel);

/*
 # Safety
 `sel` must be a live handle.
 */
size_t mirt_selection_len(const struct MirtSelection *sel);

/*
 # Safety
 `sel` must be a live handle.
 */
enum MirtStage mirt_selection_stage(const struct MirtSelection *sel);

/*
 # Safety
 `sel` must be a live handle.
 */
double mirt_selection_mean_concepts(const struct MirtSelection *sel);

/*
 Question id at `index`, or null when out of range. Owned by the selection.

 # Safety
 `sel` must be a live handle.
 */
const char *mirt_selection_id(const struct MirtSelection *sel, size_t index);

/*
 Probability of a correct answer for one question with `num_concepts` concepts.

 # Safety
 `theta`, `b` and `counts` must each point to `num_concepts` values; `out` writable.
 */
enum MirtStatus mirt_answer_prob(const double *theta,
                                 const double *b,
                                 const uint32_t *counts,
                                 size_t num_concepts,
                                 double guess,
                                 bool include_guess,
                                 double *out);

#endif  /* MIRT_H */
