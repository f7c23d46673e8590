#include <math.h>
#include <stdio.h>
#include <string.h>

#include "mirt.h"

#define CHECK(cond)                                                      \
  do {                                                                   \
    if (!(cond)) {                                                       \
      const char *e = mirt_last_error();                                 \
      fprintf(stderr, "check failed at line %d: %s (%s)\n", __LINE__,    \
              #cond, e ? e : "no error");                                \
      return 1;                                                          \
    }                                                                    \
  } while (0)

int main(int argc, char **argv) {
  if (argc != 4) {
    fprintf(stderr, "usage: smoke BANK RESPONSES OUT\n");
    return 2;
  }
  MirtBank *bank = NULL;
  MirtResponses *resp = NULL;
  MirtPosterior *post = NULL;
  MirtSelection *sel = NULL;

  CHECK(mirt_bank_load(argv[1], &bank) == MIRT_STATUS_OK);
  CHECK(mirt_responses_load(argv[2], bank, &resp) == MIRT_STATUS_OK);

  MirtFitOptions opts = mirt_fit_options_default();
  CHECK(opts.learning_rate == 0.1 && opts.max_iters == 1000);
  opts.seed = 3;
  CHECK(mirt_fit(bank, resp, &opts, NULL, &post) == MIRT_STATUS_OK);

  size_t c = mirt_posterior_num_concepts(post);
  double means[8];
  CHECK(c == 2);
  CHECK(mirt_posterior_difficulty_means(post, means, 8) == MIRT_STATUS_OK);
  CHECK(mirt_posterior_difficulty_means(post, means, 1) == MIRT_STATUS_OUT_OF_RANGE);
  CHECK(mirt_posterior_competence_means(post, 99, means, 8) == MIRT_STATUS_OUT_OF_RANGE);

  double elbo = 0.0;
  size_t iters = 0;
  bool converged = false;
  CHECK(mirt_posterior_fit_summary(post, &elbo, &iters, &converged) == MIRT_STATUS_OK);
  CHECK(isfinite(elbo) && iters > 0);
  CHECK(mirt_posterior_save(post, argv[3]) == MIRT_STATUS_OK);

  MirtSelectOptions sopts = mirt_select_options_default();
  sopts.epoch = 0;
  CHECK(mirt_select(bank, post, &sopts, &sel) == MIRT_STATUS_OK);
  CHECK(mirt_selection_stage(sel) == MIRT_STAGE_SEEDING);
  CHECK(mirt_selection_len(sel) > 0);
  CHECK(strcmp(mirt_selection_id(sel, 0), "q0") == 0);
  CHECK(mirt_selection_id(sel, 1000) == NULL);
  mirt_selection_free(sel);

  sopts.lb_log = -1.0;
  sopts.ub_log = -1.0;
  CHECK(mirt_select(bank, post, &sopts, &sel) == MIRT_STATUS_INVALID_INPUT);
  CHECK(mirt_last_error() != NULL);

  double theta[2] = {0.0, 0.0}, b[2] = {0.0, 0.0}, p = 0.0;
  uint32_t counts[2] = {2, 1};
  CHECK(mirt_answer_prob(theta, b, counts, 2, 0.25, true, &p) == MIRT_STATUS_OK);
  CHECK(fabs(p - 0.34375) < 1e-12);

  CHECK(mirt_bank_load(NULL, &bank) == MIRT_STATUS_NULL_ARGUMENT);

  mirt_posterior_free(post);
  mirt_responses_free(resp);
  mirt_bank_free(bank);
  printf("smoke ok\n");
  return 0;
}
