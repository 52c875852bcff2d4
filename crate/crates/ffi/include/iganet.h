#ifndef IGANET_H
#define IGANET_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/*
 Result of every fallible call. `IGANET_STATUS_OK` is zero.
 */
typedef enum IganetStatus {
  IGANET_STATUS_OK = 0,
  IGANET_STATUS_NULL_POINTER = 1,
  IGANET_STATUS_INVALID_ARGUMENT = 2,
  IGANET_STATUS_IO = 3,
  IGANET_STATUS_PARSE = 4,
  IGANET_STATUS_SHAPE_MISMATCH = 5,
  IGANET_STATUS_UNSUPPORTED_VERSION = 6,
  IGANET_STATUS_CORRUPT_CHECKPOINT = 7,
  IGANET_STATUS_DIVERGED = 8,
  IGANET_STATUS_CHECK_FAILED = 9,
  IGANET_STATUS_PANIC = 10,
} IganetStatus;

/*
 A model configuration, its parameters and the joint graph they run on.
 */
typedef struct IganetModel IganetModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *iganet_version(void);

/*
 Message of the last failed call on this thread, or an empty string. The
 pointer stays valid until the next call into the library on this thread.
 */
const char *iganet_last_error_message(void);

/*
 Creates a freshly initialized model.

 `config_json` is a model configuration document (null selects the
 desk-scale preset) and `graph_json` a joint graph (null selects the
 17-joint Human3.6M skeleton). The joint count is taken from the graph.

 # Safety
 String arguments must be null or NUL-terminated; `out` must be writable.
 */
enum IganetStatus iganet_model_new(const char *config_json,
                                   const char *graph_json,
                                   uint64_t seed,
                                   struct IganetModel **out);

/*
 Loads a checkpoint. `graph_json` may be null for the Human3.6M skeleton.

 # Safety
 `path` must be NUL-terminated, `graph_json` null or NUL-terminated, and
 `out` writable.
 */
enum IganetStatus iganet_model_load(const char *path,
                                    const char *graph_json,
                                    struct IganetModel **out);

/*
 Writes the model as a checkpoint file.

 # Safety
 `model` must come from this library and `path` be NUL-terminated.
 */
enum IganetStatus iganet_model_save(const struct IganetModel *model, const char *path);

/*
 Releases a model. Null is ignored.

 # Safety
 `model` must be null or a handle from this library not yet freed.
 */
void iganet_model_free(struct IganetModel *model);

/*
 Joint count of the model, or 0 for a null handle.

 # Safety
 `model` must be null or a live handle.
 */
size_t iganet_model_num_joints(const struct IganetModel *model);

/*
 Number of trainable scalars, or 0 for a null handle.

 # Safety
 `model` must be null or a live handle.
 */
size_t iganet_model_param_count(const struct IganetModel *model);

/*
 Lifts `batch` 2D poses to root-relative 3D poses in millimetres.

 # Safety
 `input2d` must hold `batch * joints * 2` doubles and `out3d` have room for
 `batch * joints * 3`.
 */
enum IganetStatus iganet_model_predict(const struct IganetModel *model,
                                       const double *input2d,
                                       size_t batch,
                                       size_t joints,
                                       bool flip_merge,
                                       double *out3d);

/*
 Trains the model in place on `n` samples and replaces its parameters with
 the best ones found (lowest training loss).

 `train_config_json` is a training configuration document; null selects the
 default recipe. `final_loss` (nullable) receives the last epoch's mean
 training loss in millimetres.

 # Safety
 `input2d` must hold `n * joints * 2` doubles and `target3d` `n * joints * 3`;
 `train_config_json` must be null or NUL-terminated.
 */
enum IganetStatus iganet_model_train(struct IganetModel *model,
                                     const double *input2d,
                                     const double *target3d,
                                     size_t n,
                                     size_t joints,
                                     const char *train_config_json,
                                     double *final_loss);

/*
 Mean per-joint position error in the units of the inputs.

 # Safety
 `pred` and `gt` must each hold `batch * joints * 3` doubles; `out` must be
 writable.
 */
enum IganetStatus iganet_mpjpe(const double *pred,
                               const double *gt,
                               size_t batch,
                               size_t joints,
                               double *out);

/*
 Percentage of joints within `threshold_mm` of the ground truth.

 # Safety
 As for [`iganet_mpjpe`].
 */
enum IganetStatus iganet_pck(const double *pred,
                             const double *gt,
                             size_t batch,
                             size_t joints,
                             double threshold_mm,
                             double *out);

/*
 Area under the PCK curve over thresholds 0..=150 mm, as a percentage.

 # Safety
 As for [`iganet_mpjpe`].
 */
enum IganetStatus iganet_auc(const double *pred,
                             const double *gt,
                             size_t batch,
                             size_t joints,
                             double *out);

/*
 Runs the finite-difference gradient suite and stores the worst relative
 error in `worst` (nullable). Returns `IGANET_STATUS_CHECK_FAILED` when any
 group reaches the default tolerance. A null `config_json` selects the
 probe configuration.

 # Safety
 `config_json` must be null or NUL-terminated.
 */
enum IganetStatus iganet_gradcheck(const char *config_json, uint64_t seed, double *worst);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IGANET_H */
