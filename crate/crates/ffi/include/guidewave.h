#ifndef GUIDEWAVE_H
#define GUIDEWAVE_H

#include <stddef.h>
#include <stdint.h>

// Result codes of every fallible call.
typedef enum GwStatus {
  GW_STATUS_OK = 0,
  GW_STATUS_NULL_POINTER = 1,
  GW_STATUS_INVALID_ARGUMENT = 2,
  GW_STATUS_PARSE = 3,
  GW_STATUS_INVALID_GEOMETRY = 4,
  GW_STATUS_BRANCH_POINT = 5,
  GW_STATUS_NUMERICAL = 6,
  GW_STATUS_OUT_OF_RANGE = 7,
  GW_STATUS_PANIC = 8,
} GwStatus;

// A validated waveguide geometry.
typedef struct GwGeometry GwGeometry;

// Resonances found in a box.
typedef struct GwResonanceList GwResonanceList;

// A scattering matrix at one real `k`.
typedef struct GwSMatrix GwSMatrix;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread. Valid until the next
// call on the same thread; never null.
const char *gw_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *gw_version(void);

// Parses and validates a geometry from its JSON description.
//
// # Safety
// `json` must be a NUL-terminated string and `out` a valid pointer.
enum GwStatus gw_geometry_from_json(const char *json, struct GwGeometry **out_geometry);

// One of the built-in geometries: `free-strip`, `free-strip-neumann`,
// `cavity`, `weak-coupling`, `staircase`.
//
// # Safety
// `name` must be a NUL-terminated string and `out` a valid pointer.
enum GwStatus gw_geometry_fixture(const char *name, struct GwGeometry **out_geometry);

// Radius `M` of the smallest centered ball containing the perturbation.
//
// # Safety
// Pointers must be valid.
enum GwStatus gw_geometry_perturbation_radius(const struct GwGeometry *g, double *out_radius);

// # Safety
// `g` must come from a `gw_geometry_*` constructor, or be null.
void gw_geometry_free(struct GwGeometry *g);

// Normalized matching determinant at `k` on the sheet whose flipped modes
// are `lambda[0..n_lambda]`.
//
// # Safety
// Pointers must be valid; `lambda` may be null when `n_lambda` is 0.
enum GwStatus gw_det_normalized(const struct GwGeometry *g,
                                double k_re,
                                double k_im,
                                const uint32_t *lambda,
                                size_t n_lambda,
                                size_t n_lead,
                                double *out_re,
                                double *out_im);

// S-matrix at real `k` with `n_lead` lead modes.
//
// # Safety
// Pointers must be valid.
enum GwStatus gw_smatrix(const struct GwGeometry *g,
                         double k,
                         size_t n_lead,
                         struct GwSMatrix **out_smatrix);

// Number of rows (twice the open channels).
//
// # Safety
// Pointers must be valid.
enum GwStatus gw_smatrix_dim(const struct GwSMatrix *s, size_t *out_dim);

// Entry `(i, j)`, zero-based.
//
// # Safety
// Pointers must be valid.
enum GwStatus gw_smatrix_entry(const struct GwSMatrix *s,
                               size_t i,
                               size_t j,
                               double *out_re,
                               double *out_im);

// `‖S S* - I‖`.
//
// # Safety
// Pointers must be valid.
enum GwStatus gw_smatrix_unitarity_defect(const struct GwSMatrix *s, double *out_defect);

// # Safety
// `s` must come from [`gw_smatrix`], or be null.
void gw_smatrix_free(struct GwSMatrix *s);

// Resonances in the box `[re0, re1] x [im0, im1]` on one sheet.
//
// # Safety
// Pointers must be valid; `lambda` may be null when `n_lambda` is 0.
enum GwStatus gw_find_resonances(const struct GwGeometry *g,
                                 const uint32_t *lambda,
                                 size_t n_lambda,
                                 double re0,
                                 double re1,
                                 double im0,
                                 double im1,
                                 size_t n_lead,
                                 double tol,
                                 struct GwResonanceList **out_list);

// # Safety
// Pointers must be valid.
enum GwStatus gw_resonance_list_len(const struct GwResonanceList *list, size_t *out_len);

// Resonance `i`: projection `k` and multiplicity.
//
// # Safety
// Pointers must be valid.
enum GwStatus gw_resonance_list_get(const struct GwResonanceList *list,
                                    size_t i,
                                    double *out_re,
                                    double *out_im,
                                    uint32_t *out_multiplicity);

// # Safety
// `list` must come from [`gw_find_resonances`], or be null.
void gw_resonance_list_free(struct GwResonanceList *list);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GUIDEWAVE_H */
