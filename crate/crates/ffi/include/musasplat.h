#ifndef MUSASPLAT_H
#define MUSASPLAT_H

/* Generated by cbindgen from musasplat-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MusaSplatStatus {
  MUSASPLAT_OK = 0,
  MUSASPLAT_ERR_INVALID_ARGUMENT = 1,
  MUSASPLAT_ERR_IO = 2,
  MUSASPLAT_ERR_JSON = 3,
  MUSASPLAT_ERR_TRAINING = 4,
  MUSASPLAT_ERR_INTERNAL = 5,
} MusaSplatStatus;

// A feed-forward reconstruction: the predicted Gaussian set for one scene,
// ready to render from arbitrary poses.
typedef struct MusaSplatReconstruction MusaSplatReconstruction;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static string.
const char *musasplat_version(void);

// Message of the last error on this thread; empty string when none.
// Valid until the next failing call on the same thread.
const char *musasplat_last_error_message(void);

// Generates a synthetic scene into `out_dir`. `spec_json` is the scene spec
// (pass null for defaults).
//
// # Safety
// Pointer arguments must be null or valid NUL-terminated strings.
enum MusaSplatStatus musasplat_scene_generate(const char *spec_json, const char *out_dir);

// Trains on a scene directory. `run_config_json` is a full run config
// (null for the default "full" preset). Writes checkpoints and reports
// into `out_dir`.
//
// # Safety
// Pointer arguments must be null or valid NUL-terminated strings.
enum MusaSplatStatus musasplat_train(const char *run_config_json,
                                     const char *scene_dir,
                                     const char *out_dir);

// Evaluates a checkpoint on a scene and writes metrics into `out_dir`.
//
// # Safety
// Pointer arguments must be valid NUL-terminated strings.
enum MusaSplatStatus musasplat_eval(const char *checkpoint_path,
                                    const char *scene_dir,
                                    const char *out_dir);

// Runs the feed-forward pass once and returns an opaque reconstruction
// handle through `out`. Free with [`musasplat_reconstruction_free`].
//
// # Safety
// `checkpoint_path` and `scene_dir` must be valid strings; `out` must be a
// valid pointer to a handle slot.
enum MusaSplatStatus musasplat_reconstruct(const char *checkpoint_path,
                                           const char *scene_dir,
                                           struct MusaSplatReconstruction **out);

// Number of Gaussians in a reconstruction; 0 for a null handle.
//
// # Safety
// `handle` must be null or a live pointer from [`musasplat_reconstruct`].
size_t musasplat_reconstruction_gaussian_count(const struct MusaSplatReconstruction *handle);

// Renders the reconstruction from a world-to-camera pose into a caller
// buffer of `width * height * 3` floats (RGB, linear, row-major).
// `pose_wxyz_t` holds 7 doubles: unit quaternion w,x,y,z then translation.
//
// # Safety
// `handle` must be live; `pose_wxyz_t` must point at 7 doubles; `out_rgb`
// must have room for `width * height * 3` floats.
enum MusaSplatStatus musasplat_reconstruction_render(const struct MusaSplatReconstruction *handle,
                                                     const double *pose_wxyz_t,
                                                     size_t width,
                                                     size_t height,
                                                     float *out_rgb);

// Exports the reconstruction's Gaussian means as an ASCII PLY cloud.
//
// # Safety
// `handle` must be live; `path` must be a valid string.
enum MusaSplatStatus musasplat_reconstruction_export_ply(const struct MusaSplatReconstruction *handle,
                                                         const char *path);

// Frees a reconstruction handle. Null is a no-op.
//
// # Safety
// `handle` must be null or a pointer from [`musasplat_reconstruct`] not yet
// freed; it must not be used afterwards.
void musasplat_reconstruction_free(struct MusaSplatReconstruction *handle);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MUSASPLAT_H */
