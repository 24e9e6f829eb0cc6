#ifndef NEWSCAP_H
#define NEWSCAP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result codes.
 */
typedef enum NcStatus {
  NC_STATUS_OK = 0,
  NC_STATUS_NULL_POINTER = 1,
  NC_STATUS_INVALID_UTF8 = 2,
  NC_STATUS_INVALID_ARGUMENT = 3,
  /*
   Malformed JSON, corpus data or feature sizes.
   */
  NC_STATUS_INVALID_INPUT = 4,
  NC_STATUS_IO = 5,
  /*
   Unreadable, corrupt or incompatible checkpoint.
   */
  NC_STATUS_CHECKPOINT = 6,
  NC_STATUS_VOCAB_MISMATCH = 7,
  /*
   Numerical failure inside the model.
   */
  NC_STATUS_INTERNAL = 8,
  /*
   A Rust panic was caught at the boundary.
   */
  NC_STATUS_PANIC = 9,
} NcStatus;

/*
 A loaded checkpoint with its vocabulary.
 */
typedef struct NcCaptioner NcCaptioner;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version, a static string.
 */
const char *nc_version(void);

/*
 Message of the last failed call on this thread, or NULL after a success.
 Valid until the next library call on the same thread.
 */
const char *nc_last_error(void);

/*
 Releases a string returned by the library. NULL is ignored.

 # Safety
 `s` must come from this library and not have been freed.
 */
void nc_string_free(char *s);

/*
 Loads a checkpoint and the vocabulary it was trained with.

 # Safety
 Paths must be NUL-terminated strings; `out` must be writable.
 */
enum NcStatus nc_captioner_open(const char *checkpoint_path,
                                const char *vocab_path,
                                struct NcCaptioner **out);

/*
 Frees a captioner. NULL is ignored.

 # Safety
 `c` must come from [`nc_captioner_open`] and not have been freed.
 */
void nc_captioner_free(struct NcCaptioner *c);

/*
 Expected image feature grid: `patches` rows of `dim` floats.

 # Safety
 `c` must be a live captioner; the outputs must be writable.
 */
enum NcStatus nc_captioner_feature_shape(const struct NcCaptioner *c,
                                         uintptr_t *patches,
                                         uintptr_t *dim);

/*
 Captions one image.

 `article_json` is `{"article": "...", "entities": [{"text", "type",
 "start", "end"}, ...]}`; without `entities` a capitalization heuristic
 finds the mentions. `features` holds `patches * dim` floats in row-major
 order. `beam_width` 0 or 1 decodes greedily. On success `*out` receives
 `{"raw": "...", "caption": "...", "unresolved_tags": n}` where `raw` is
 the decoder output and `caption` has its entity tags replaced.

 # Safety
 `c` must be a live captioner, `features` must point to `n_features`
 floats and `out` must be writable.
 */
enum NcStatus nc_captioner_caption(const struct NcCaptioner *c,
                                   const char *article_json,
                                   const float *features,
                                   uintptr_t n_features,
                                   uint32_t beam_width,
                                   char **out);

/*
 Tokenizes text; `*out` receives a JSON array of strings.

 # Safety
 `text` must be a NUL-terminated string and `out` writable.
 */
enum NcStatus nc_tokenize(const char *text, char **out);

/*
 Replaces entity tags (`PERSON_`, `GPE_`, ...) in a whitespace-separated
 caption using a JSON array of article mentions `{"text", "type", "start",
 "end", "frequency"}`. `*out` receives the cleaned caption.

 # Safety
 Inputs must be NUL-terminated strings and `out` writable.
 */
enum NcStatus nc_tag_clean(const char *caption, const char *entities_json, char **out);

/*
 Scores caption pairs. `pairs_json` is an array of `{"candidate",
 "reference"}` strings (whitespace tokenized) with optional
 `candidate_entities` and `reference_entities` arrays. `*out` receives
 `{"bleu4", "rouge_l", "cider", "entity_precision", "entity_recall",
 "precision_undefined"}`.

 # Safety
 `pairs_json` must be a NUL-terminated string and `out` writable.
 */
enum NcStatus nc_evaluate_pairs(const char *pairs_json, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NEWSCAP_H */
