#ifndef VERIFORGE_H
#define VERIFORGE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Objective for `vf_fuse_search`.
 */
typedef enum VfObjective {
  VF_OBJECTIVE_EER = 0,
  VF_OBJECTIVE_MIN_DCF = 1,
} VfObjective;

/*
 Status codes. The non-zero values match the `veriforge` CLI exit codes.
 */
typedef enum VfStatus {
  VF_STATUS_OK = 0,
  /*
   Bad argument, NULL pointer or invalid configuration.
   */
  VF_STATUS_USAGE = 1,
  /*
   Missing or malformed file, or inconsistent inputs.
   */
  VF_STATUS_DATA = 2,
  /*
   Non-finite values.
   */
  VF_STATUS_NUMERIC = 3,
  /*
   A Rust panic was caught at the boundary.
   */
  VF_STATUS_INTERNAL = 4,
} VfStatus;

/*
 A trained model loaded from a checkpoint.
 */
typedef struct VfModel VfModel;

/*
 A parsed trial list.
 */
typedef struct VfTrials VfTrials;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *vf_version(void);

/*
 Message for the last failed call on this thread, or NULL if the last
 call succeeded.
 */
const char *vf_last_error(void);

/*
 Loads a checkpoint. On success `*out` owns a new handle.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum VfStatus vf_model_load(const char *path, struct VfModel **out);

/*
 Releases a model handle.

 # Safety
 `model` must be NULL or a handle from `vf_model_load` not yet freed.
 */
void vf_model_free(struct VfModel *model);

/*
 Embedding dimension of the model, or 0 for a NULL handle.

 # Safety
 `model` must be NULL or a live handle.
 */
size_t vf_model_embedding_dim(const struct VfModel *model);

/*
 Embeds raw mono samples in [-1, 1]. The embedding is the mean of the
 L2-normalised test-time segment embeddings. `cap` must be at least
 `vf_model_embedding_dim(model)`.

 # Safety
 `samples` must point to `n` values and `out` to `cap` writable values.
 */
enum VfStatus vf_model_embed_samples(const struct VfModel *model,
                                     const double *samples,
                                     size_t n,
                                     uint32_t sample_rate,
                                     double *out,
                                     size_t cap);

/*
 Embeds a WAV file. See `vf_model_embed_samples`.

 # Safety
 `path` must be NUL-terminated and `out` must hold `cap` values.
 */
enum VfStatus vf_model_embed_file(const struct VfModel *model,
                                  const char *path,
                                  double *out,
                                  size_t cap);

/*
 Scores two WAV files: the mean cosine over all pairs of test-time
 segment embeddings.

 # Safety
 Paths must be NUL-terminated and `out` valid.
 */
enum VfStatus vf_model_score_files(const struct VfModel *model,
                                   const char *enroll,
                                   const char *test,
                                   double *out);

/*
 Parses a trial list file (`label enroll_id test_id` per line).

 # Safety
 `path` must be NUL-terminated and `out` valid.
 */
enum VfStatus vf_trials_load(const char *path, struct VfTrials **out);

/*
 Releases a trial list handle.

 # Safety
 `trials` must be NULL or a handle from `vf_trials_load` not yet freed.
 */
void vf_trials_free(struct VfTrials *trials);

/*
 Number of trials, or 0 for a NULL handle.

 # Safety
 `trials` must be NULL or a live handle.
 */
size_t vf_trials_len(const struct VfTrials *trials);

/*
 Copies the 0/1 labels of the trial list into `out`.

 # Safety
 `out` must hold `cap` bytes.
 */
enum VfStatus vf_trials_labels(const struct VfTrials *trials, uint8_t *out, size_t cap);

/*
 Scores every trial with `model`, resolving utterance ids against
 `audio_root`. `out` receives one score per trial in list order.

 # Safety
 Handles must be live, `audio_root` NUL-terminated, `out` of `cap` values.
 */
enum VfStatus vf_score_trials(const struct VfModel *model,
                              const struct VfTrials *trials,
                              const char *audio_root,
                              double *out,
                              size_t cap);

/*
 Equal error rate (a fraction) of `n` scores with 0/1 labels.

 # Safety
 `scores` and `labels` must point to `n` values; `out` must be valid.
 */
enum VfStatus vf_eer(const double *scores, const uint8_t *labels, size_t n, double *out);

/*
 Minimum detection cost, normalised by the cost of the best trivial
 system. The usual operating point is p_target 0.05, c_miss = c_fa = 1.

 # Safety
 As for `vf_eer`.
 */
enum VfStatus vf_min_dcf(const double *scores,
                         const uint8_t *labels,
                         size_t n,
                         double p_target,
                         double c_miss,
                         double c_fa,
                         double *out);

/*
 Searches fusion weights in {0,1,2,3}^k for `k` systems of `n` trials.
 `scores` is row-major with one row of `n` scores per system. Writes the
 `k` chosen weights to `weights_out` and the objective to `value_out`.

 # Safety
 `scores` must hold `k * n` values, `labels` `n`, `weights_out` `k`.
 */
enum VfStatus vf_fuse_search(const double *scores,
                             size_t k,
                             size_t n,
                             const uint8_t *labels,
                             enum VfObjective objective,
                             uint8_t *weights_out,
                             double *value_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VERIFORGE_H */
