#ifndef GSNPOSE_H
#define GSNPOSE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. `GSN_STATUS_OK` is zero.
typedef enum GsnStatus {
  GSN_STATUS_OK = 0,
  GSN_STATUS_NULL_POINTER = 1,
  GSN_STATUS_INVALID_ARGUMENT = 2,
  GSN_STATUS_IO = 3,
  GSN_STATUS_FORMAT = 4,
  GSN_STATUS_NON_FINITE = 5,
  GSN_STATUS_BUFFER_TOO_SMALL = 6,
  GSN_STATUS_PANIC = 7,
} GsnStatus;

// A dataset of pose samples.
typedef struct GsnDataset GsnDataset;

// A trained generator and discriminator with their training configuration.
typedef struct GsnModel GsnModel;

// Scores from [`gsn_model_evaluate`].
typedef struct GsnScores {
  double pck;
  double pckh;
  double oks_ap;
  // PCKh on samples with at least 2 and 4 invisible joints; NaN when
  // the subset is empty.
  double pckh_invisible_2;
  double pckh_invisible_4;
} GsnScores;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer is
// valid until the next failing call on the same thread.
const char *gsn_last_error(void);

// Library version as a static NUL-terminated string.
const char *gsn_version(void);

// Generates `count` synthetic samples of `image_size`² pixels.
// `stream` selects an independent split for the same `seed`.
//
// # Safety
// `skeleton_name` must be a NUL-terminated string and `out` a valid pointer.
enum GsnStatus gsn_dataset_synth(const char *skeleton_name,
                                 uint64_t seed,
                                 uint64_t stream,
                                 size_t count,
                                 size_t image_size,
                                 double occlusion_rate,
                                 struct GsnDataset **out_dataset);

// Reads an annotation file written by `gsnpose synth` or [`gsn_dataset_write`].
//
// # Safety
// `file` must be a NUL-terminated string and `out_dataset` a valid pointer.
enum GsnStatus gsn_dataset_read(const char *file, struct GsnDataset **out_dataset);

// Writes the dataset with images stored inline.
//
// # Safety
// `dataset` must come from this library; `file` must be NUL-terminated.
enum GsnStatus gsn_dataset_write(const struct GsnDataset *dataset, const char *file);

// Number of samples; 0 for a null handle.
//
// # Safety
// `dataset` must be null or come from this library.
size_t gsn_dataset_len(const struct GsnDataset *dataset);

// Joints per sample; 0 for a null handle.
//
// # Safety
// `dataset` must be null or come from this library.
size_t gsn_dataset_n_joints(const struct GsnDataset *dataset);

// Image side length in pixels; 0 for a null handle.
//
// # Safety
// `dataset` must be null or come from this library.
size_t gsn_dataset_image_size(const struct GsnDataset *dataset);

// Copies sample `index`'s grey image (`image_size`² values, row-major)
// into `pixels`.
//
// # Safety
// `pixels` must point to `len` writable doubles.
enum GsnStatus gsn_dataset_image(const struct GsnDataset *dataset,
                                 size_t index,
                                 double *pixels,
                                 size_t len);

// Copies sample `index`'s annotated joints as `x, y, visible` triples
// (visible is 1.0 or 0.0) into `joints`, which holds `len` doubles.
//
// # Safety
// `joints` must point to `len` writable doubles.
enum GsnStatus gsn_dataset_joints(const struct GsnDataset *dataset,
                                  size_t index,
                                  double *joints,
                                  size_t len);

// # Safety
// `dataset` must be null or come from this library and not be used again.
void gsn_dataset_free(struct GsnDataset *dataset);

// Trains a model. `options` holds `key = value` lines using the same keys
// as the `--set` flag of `gsnpose train` and may be null for defaults.
// `val` may be null.
//
// # Safety
// Handles must come from this library; `options` must be null or
// NUL-terminated; `out_model` must be a valid pointer.
enum GsnStatus gsn_train(const struct GsnDataset *train_set,
                         const struct GsnDataset *val_set,
                         const char *options,
                         struct GsnModel **out_model);

// Loads a checkpoint trained on the named skeleton.
//
// # Safety
// Strings must be NUL-terminated; `out_model` must be a valid pointer.
enum GsnStatus gsn_model_load(const char *file,
                              const char *skeleton_name,
                              struct GsnModel **out_model);

// # Safety
// `model` must come from this library; `file` must be NUL-terminated.
enum GsnStatus gsn_model_save(const struct GsnModel *model, const char *file);

// Joints predicted per image; 0 for a null handle.
//
// # Safety
// `model` must be null or come from this library.
size_t gsn_model_n_joints(const struct GsnModel *model);

// Expected image side length; 0 for a null handle.
//
// # Safety
// `model` must be null or come from this library.
size_t gsn_model_image_size(const struct GsnModel *model);

// Predicts joints for one grey `image_size`² image. Writes `x, y,
// confidence` triples in pixel coordinates to `joints` (`len` doubles).
//
// # Safety
// `pixels` must point to `n_pixels` readable doubles and `joints` to `len`
// writable doubles.
enum GsnStatus gsn_model_predict(const struct GsnModel *model,
                                 const double *pixels,
                                 size_t n_pixels,
                                 double *joints,
                                 size_t len);

// PCK@0.2, PCKh@0.5, OKS-AP and the occlusion subsets on `dataset`.
//
// # Safety
// Handles must come from this library; `scores` must be a valid pointer.
enum GsnStatus gsn_model_evaluate(const struct GsnModel *model,
                                  const struct GsnDataset *dataset,
                                  struct GsnScores *scores);

// # Safety
// `model` must be null or come from this library and not be used again.
void gsn_model_free(struct GsnModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GSNPOSE_H */
