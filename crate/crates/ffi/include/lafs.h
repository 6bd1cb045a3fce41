#ifndef LAFS_H
#define LAFS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result codes. Checkpoint codes match the `lafs` command-line exit codes.
 */
typedef enum LafsStatus {
  LAFS_STATUS_OK = 0,
  LAFS_STATUS_INTERNAL = 1,
  LAFS_STATUS_NULL_POINTER = 2,
  LAFS_STATUS_INVALID_ARGUMENT = 3,
  LAFS_STATUS_IO = 4,
  LAFS_STATUS_DIMENSION = 5,
  LAFS_STATUS_NON_FINITE = 6,
  LAFS_STATUS_PANIC = 7,
  LAFS_STATUS_BUFFER_TOO_SMALL = 8,
  LAFS_STATUS_CHECKPOINT_BAD_MAGIC = 10,
  LAFS_STATUS_CHECKPOINT_UNSUPPORTED_VERSION = 11,
  LAFS_STATUS_CHECKPOINT_TRUNCATED = 12,
  LAFS_STATUS_CHECKPOINT_CORRUPT = 13,
  LAFS_STATUS_CHECKPOINT_MISSING_ENTRY = 14,
} LafsStatus;

/*
 A loaded face model. Opaque to C.
 */
typedef struct LafsModel LafsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *lafs_version(void);

/*
 Copies the calling thread's last error message into `buf` (NUL-terminated,
 truncated to `len − 1` bytes) and returns the full message length.
 Pass `len = 0` to query the length only.

 # Safety
 `buf` must be null or point to `len` writable bytes.
 */
size_t lafs_last_error_message(char *buf, size_t len);

/*
 Loads a checkpoint written by `lafs bootstrap|pretrain|finetune`.

 `config` holds the `key=value` lines the checkpoint was trained with
 (for example `"preset=small"`); null means the defaults. On success
 `*out` owns a new handle.

 # Safety
 `path` must be a NUL-terminated string, `config` null or NUL-terminated,
 and `out` a valid pointer.
 */
enum LafsStatus lafs_model_load(const char *path, const char *config, struct LafsModel **out);

/*
 Releases a handle from [`lafs_model_load`]. Null is ignored.

 # Safety
 `model` must be null or a handle not yet freed.
 */
void lafs_model_free(struct LafsModel *model);

/*
 Embedding width `d`.

 # Safety
 `model` must be a live handle and `out` a valid pointer.
 */
enum LafsStatus lafs_model_embedding_dim(const struct LafsModel *model, size_t *out);

/*
 Side length of the square grayscale images the model expects.

 # Safety
 `model` must be a live handle and `out` a valid pointer.
 */
enum LafsStatus lafs_model_input_size(const struct LafsModel *model, size_t *out);

/*
 Embeds `n` grayscale images of `size × size` pixels in `[0,1]`, row-major
 and contiguous, writing `n × d` unit-norm floats to `out`.

 # Safety
 `pixels` must hold `n·size·size` floats and `out` room for `out_len`.
 */
enum LafsStatus lafs_model_embed(const struct LafsModel *model,
                                 const float *pixels,
                                 size_t n,
                                 size_t size,
                                 float *out,
                                 size_t out_len);

/*
 Cosine similarity of two `dim`-vectors.

 # Safety
 `a` and `b` must hold `dim` floats; `out` must be valid.
 */
enum LafsStatus lafs_cosine_similarity(const float *a, const float *b, size_t dim, float *out);

/*
 True-accept rate at the smallest threshold whose false-accept rate is at
 most `far`. Scores are accepted when at least the threshold.

 # Safety
 `genuine` and `impostor` must hold `n_genuine` and `n_impostor` floats;
 `out_tar` must be valid, `out_threshold` null or valid.
 */
enum LafsStatus lafs_tar_at_far(const float *genuine,
                                size_t n_genuine,
                                const float *impostor,
                                size_t n_impostor,
                                double far,
                                double *out_tar,
                                float *out_threshold);

/*
 `k`-fold verification accuracy over `n` pair-ordered records; `genuine[i]`
 is nonzero for same-identity pairs.

 # Safety
 `scores` and `genuine` must hold `n` values; `out_mean` must be valid,
 `out_std` null or valid.
 */
enum LafsStatus lafs_kfold_accuracy(const float *scores,
                                    const uint8_t *genuine,
                                    size_t n,
                                    size_t k,
                                    double *out_mean,
                                    double *out_std);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LAFS_H */
