/* C API for the level set traversal toolkit.
 *
 * Conventions: opaque handles, integer status codes, caller-owned output
 * buffers. Functions return LEVELSET_OK (0) on success; on failure they
 * return a nonzero code and store a message retrievable through
 * levelset_last_error_message() (thread-local, valid until the next call on
 * the same thread).
 *
 * Link against the cdylib/staticlib built from crates/ffi.
 */

#ifndef LEVELSET_H
#define LEVELSET_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#define LEVELSET_OK 0
#define LEVELSET_ERR_ARGUMENT 1
#define LEVELSET_ERR_FORMAT 2
#define LEVELSET_ERR_NUMERIC 3
#define LEVELSET_ERR_PANIC 4

/* Opaque classifier handle. */
typedef struct LevelsetModel LevelsetModel;

/* Traversal hyperparameters. use_clamp toggles the pixel box
 * [clamp_lo, clamp_hi]; early_exit stops once the iterate is within
 * 1e-3 * sqrt(d) of the target. */
typedef struct LevelsetLstConfig {
  uint64_t max_iterations;
  double eta;      /* scale of the step perpendicular to the gradient */
  double epsilon;  /* bound and step of the parallel correction */
  double delta;    /* tolerated confidence drop */
  double beta;     /* EMA coefficient of the parallel correction */
  double clamp_lo;
  double clamp_hi;
  int32_t use_clamp;
  int32_t early_exit;
} LevelsetLstConfig;

/* Traversal outcome. termination: 0 converged, 1 max-iterations,
 * 2 confidence-guard. */
typedef struct LevelsetLstSummary {
  int32_t termination;
  uint64_t iterations;
  double source_confidence;
  double final_confidence;
} LevelsetLstSummary;

/* Toolkit version as a static nul-terminated string. */
const char *levelset_version(void);

/* Message for the most recent error on this thread. Never null. */
const char *levelset_last_error_message(void);

/* Built-in traversal presets. */
LevelsetLstConfig levelset_lst_config_cifar(void);
LevelsetLstConfig levelset_lst_config_imagenet(void);

/* Loads a checkpoint file into a new handle. */
int32_t levelset_model_load(const char *path, LevelsetModel **out);

/* Releases a handle; null is a no-op. */
void levelset_model_free(LevelsetModel *model);

/* Flattened input length the model expects; 0 for a null handle. */
size_t levelset_model_input_len(const LevelsetModel *model);

/* Number of classes; 0 for a null handle. */
size_t levelset_model_num_classes(const LevelsetModel *model);

/* Softmax probabilities at input; out_probs must hold out_len >=
 * levelset_model_num_classes(model) values. */
int32_t levelset_model_predict(const LevelsetModel *model, const double *input,
                               size_t input_len, double *out_probs,
                               size_t out_len);

/* Argmax class at input (ties broken by the lowest index). */
int32_t levelset_model_predicted_class(const LevelsetModel *model,
                                       const double *input, size_t input_len,
                                       size_t *out_class);

/* Level set traversal from source toward target holding confidence in
 * class. Writes the output point (len values) into out_point; out_summary
 * may be null. */
int32_t levelset_traverse(const LevelsetModel *model, const double *source,
                          const double *target, size_t len, size_t class_index,
                          const LevelsetLstConfig *config, double *out_point,
                          LevelsetLstSummary *out_summary);

/* Single-step signed-gradient attack within radius. */
int32_t levelset_fgsm(const LevelsetModel *model, const double *input,
                      size_t len, size_t class_index, double radius,
                      double *out_point);

/* Projected gradient descent within radius. */
int32_t levelset_pgd(const LevelsetModel *model, const double *input,
                     size_t len, size_t class_index, double radius,
                     double step_size, size_t steps, int32_t random_start,
                     uint64_t seed, double *out_point);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* LEVELSET_H */
