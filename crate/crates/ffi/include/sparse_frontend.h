#ifndef SPARSE_FRONTEND_H
#define SPARSE_FRONTEND_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum SfStatus {
  SF_STATUS_OK = 0,
  SF_STATUS_NULL_POINTER = 1,
  SF_STATUS_INVALID_ARGUMENT = 2,
  SF_STATUS_SHAPE_MISMATCH = 3,
  SF_STATUS_IO = 4,
  SF_STATUS_FORMAT = 5,
  SF_STATUS_CONFIG = 6,
  SF_STATUS_NUMERICAL = 7,
  SF_STATUS_PANIC = 8,
} SfStatus;

/**
 * A patch dictionary loaded from an `SCFD` file.
 */
typedef struct SfDictionary SfDictionary;

/**
 * A trained pipeline loaded from an `SCFW` checkpoint.
 */
typedef struct SfPipeline SfPipeline;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *sf_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sf_version(void);

/**
 * Loads an `SCFD` dictionary into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SfStatus sf_dictionary_load(const char *path, struct SfDictionary **out);

/**
 * Releases a dictionary; null is ignored.
 *
 * # Safety
 * `dict` must come from [`sf_dictionary_load`] and not be used afterwards.
 */
void sf_dictionary_free(struct SfDictionary *dict);

/**
 * Writes the patch dimension `n̄` and the atom count `L`.
 *
 * # Safety
 * `dict` must be a live handle; the out pointers must be valid.
 */
enum SfStatus sf_dictionary_shape(const struct SfDictionary *dict,
                                  size_t *patch_dim,
                                  size_t *atoms);

/**
 * Sparse code of one patch (lasso with weight `lambda`) into `code[0..L]`.
 *
 * # Safety
 * `patch` must hold `patch_len` floats and `code` `code_len` doubles.
 */
enum SfStatus sf_dictionary_sparse_code(const struct SfDictionary *dict,
                                        const double *patch,
                                        size_t patch_len,
                                        double lambda,
                                        double *code,
                                        size_t code_len);

/**
 * Loads an `SCFW` checkpoint (and the dictionary it references) into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SfStatus sf_pipeline_load(const char *path, struct SfPipeline **out);

/**
 * Releases a pipeline; null is ignored.
 *
 * # Safety
 * `pipeline` must come from [`sf_pipeline_load`] and not be used afterwards.
 */
void sf_pipeline_free(struct SfPipeline *pipeline);

/**
 * Writes the image side `N`, the class count and whether a frontend is
 * present (1) or not (0).
 *
 * # Safety
 * `pipeline` must be a live handle; the out pointers must be valid.
 */
enum SfStatus sf_pipeline_info(const struct SfPipeline *pipeline,
                               size_t *image_size,
                               size_t *num_classes,
                               int32_t *defended);

/**
 * Class logits of one image into `logits[0..K]`.
 *
 * # Safety
 * `pixels` must hold `pixels_len` floats and `logits` `logits_len` floats.
 */
enum SfStatus sf_pipeline_logits(const struct SfPipeline *pipeline,
                                 const float *pixels,
                                 size_t pixels_len,
                                 float *logits,
                                 size_t logits_len);

/**
 * Predicted class of one image.
 *
 * # Safety
 * `pixels` must hold `pixels_len` floats; `class_out` must be valid.
 */
enum SfStatus sf_pipeline_predict(const struct SfPipeline *pipeline,
                                  const float *pixels,
                                  size_t pixels_len,
                                  size_t *class_out);

/**
 * PGD attack on one image. `config_toml` is an attack configuration in the
 * TOML format of the CLI, or null for the defaults. The perturbation goes to
 * `perturbation[0..N·N·3]`, and `*success` is 1 if the attacked image is
 * misclassified (including images misclassified to begin with).
 *
 * # Safety
 * Buffers must hold the stated lengths; `config_toml` is null or a
 * NUL-terminated string; `success` must be valid.
 */
enum SfStatus sf_pipeline_attack(const struct SfPipeline *pipeline,
                                 const float *pixels,
                                 size_t pixels_len,
                                 size_t label,
                                 const char *config_toml,
                                 float *perturbation,
                                 size_t perturbation_len,
                                 int32_t *success);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPARSE_FRONTEND_H */
