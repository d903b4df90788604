#ifndef L2C_H
#define L2C_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Otsu class weights by element count.
 */
#define L2C_OTSU_COUNT 0

/**
 * Otsu class weights by probability mass.
 */
#define L2C_OTSU_MASS 1

typedef enum L2cStatus {
  L2C_STATUS_OK = 0,
  L2C_STATUS_NULL_POINTER = 1,
  L2C_STATUS_INVALID_ARGUMENT = 2,
  L2C_STATUS_IO = 3,
  L2C_STATUS_FORMAT = 4,
  L2C_STATUS_SHAPE_MISMATCH = 5,
  L2C_STATUS_NON_FINITE = 6,
  L2C_STATUS_PANIC = 7,
} L2cStatus;

/**
 * Opaque tensor handle.
 */
typedef struct L2cTensor L2cTensor;

typedef struct L2cTokenStats {
  double top1;
  double top2;
  double margin;
  double topk_mass;
  double tail_entropy;
  double norm_entropy;
  size_t support;
} L2cTokenStats;

typedef struct L2cOtsuReport {
  double threshold_prob;
  size_t threshold_rank;
  double head_mass;
  double between_class_variance;
} L2cOtsuReport;

typedef struct L2cCalibrationParams {
  double scale;
  double bias;
  double temperature;
  double smoothing;
} L2cCalibrationParams;

typedef struct L2cTargetStats {
  double mean_entropy;
  double mean_conf;
  double p95_conf;
  double p95_entropy;
} L2cTargetStats;

typedef struct L2cCalibrationOutcome {
  struct L2cCalibrationParams params;
  double loss;
  struct L2cTargetStats achieved;
  /**
   * 0 when the scale bisection never bracketed the target entropy.
   */
  uint8_t bracketed;
} L2cCalibrationOutcome;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failed call on this thread, or NULL. Valid
 * until the next failure on the same thread.
 */
const char *l2c_last_error_message(void);

/**
 * Copies `len` values into a new tensor of the given shape.
 */
enum L2cStatus l2c_tensor_new(const size_t *shape,
                              size_t ndim,
                              const double *data,
                              size_t len,
                              struct L2cTensor **out);

enum L2cStatus l2c_tensor_read(const char *path, struct L2cTensor **out);

/**
 * `dtype`: 0 for f32, 1 for f64.
 */
enum L2cStatus l2c_tensor_write(const struct L2cTensor *tensor, const char *path, uint8_t dtype);

/**
 * Releases a handle; NULL is ignored.
 */
void l2c_tensor_free(struct L2cTensor *tensor);

/**
 * Rank of the tensor, 0 for NULL.
 */
size_t l2c_tensor_ndim(const struct L2cTensor *tensor);

/**
 * Extent of `axis`, 0 when out of range or NULL.
 */
size_t l2c_tensor_dim(const struct L2cTensor *tensor, size_t axis);

/**
 * Element count, 0 for NULL.
 */
size_t l2c_tensor_len(const struct L2cTensor *tensor);

/**
 * Row-major values, valid while the handle lives.
 */
const double *l2c_tensor_data(const struct L2cTensor *tensor);

/**
 * Tempered softmax of one row of `k` logits into `out`.
 */
enum L2cStatus l2c_softmax(const double *logits, size_t k, double temperature, double *out);

/**
 * Statistics of one probability row.
 */
enum L2cStatus l2c_token_stats(const double *probs, size_t k, struct L2cTokenStats *out);

/**
 * Otsu split of one probability row; `weighting` is `L2C_OTSU_COUNT` or
 * `L2C_OTSU_MASS`.
 */
enum L2cStatus l2c_otsu_threshold(const double *probs,
                                  size_t k,
                                  uint32_t weighting,
                                  struct L2cOtsuReport *out);

/**
 * Calibrated probabilities of an N×K logit tensor.
 */
enum L2cStatus l2c_apply_calibration(const struct L2cTensor *logits,
                                     const struct L2cCalibrationParams *params,
                                     struct L2cTensor **out);

/**
 * Corpus statistics of an N×K logit tensor under `params`.
 */
enum L2cStatus l2c_calibrated_stats(const struct L2cTensor *logits,
                                    const struct L2cCalibrationParams *params,
                                    struct L2cTargetStats *out);

/**
 * Expected code vectors (N×D) and uncertainty features (N×4).
 */
enum L2cStatus l2c_lcdm_map(const struct L2cTensor *logits,
                            const struct L2cTensor *codebook,
                            const struct L2cCalibrationParams *params,
                            struct L2cTensor **out_codes,
                            struct L2cTensor **out_uncertainty);

/**
 * Statistic-matching search with default settings. A non-bracketed scale
 * search still succeeds and reports `bracketed = 0`.
 */
enum L2cStatus l2c_calibrate(const struct L2cTensor *logits,
                             const struct L2cTargetStats *target,
                             struct L2cCalibrationOutcome *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* L2C_H */
