#ifndef STAIR_STAIR_H
#define STAIR_STAIR_H

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(STAIR_BUILDING_LIBRARY)
#define STAIR_API __attribute__((visibility("default")))
#else
#define STAIR_API
#endif

typedef enum stair_status {
    STAIR_OK = 0,
    STAIR_ERR_INVALID_ARGUMENT = 1,
    STAIR_ERR_IO = 2,
    STAIR_ERR_FORMAT = 3,
    STAIR_ERR_NUMERIC = 4,
    STAIR_ERR_CONFIG = 5,
    STAIR_ERR_INTERNAL = 6
} stair_status;

typedef struct stair_vocab stair_vocab;
typedef struct stair_model stair_model;
typedef struct stair_index stair_index;

STAIR_API const char* stair_version(void);

/* Message of the last failed call on this thread, or "" after a success.
   Valid until the next library call on the same thread. */
STAIR_API const char* stair_last_error(void);

/* Every char** result is allocated by the library and released here. */
STAIR_API void stair_string_free(char* s);

STAIR_API stair_status stair_vocab_load(const char* path, stair_vocab** out);
/* The vocabulary of the built-in synthetic data at default settings. */
STAIR_API stair_status stair_vocab_default(stair_vocab** out);
STAIR_API void stair_vocab_free(stair_vocab* vocab);
STAIR_API size_t stair_vocab_size(const stair_vocab* vocab);
/* {"ids": [...], "tokens": [...]} */
STAIR_API stair_status stair_vocab_tokenize(const stair_vocab* vocab, const char* text, size_t max_len,
                                            char** out_json);

STAIR_API stair_status stair_model_load(const char* path, stair_model** out);
STAIR_API void stair_model_free(stair_model* model);
/* Sparse text embedding as {"entries": [[token_id, weight], ...]}. */
STAIR_API stair_status stair_model_embed_text(const stair_model* model, const stair_vocab* vocab, const char* text,
                                              char** out_json);

STAIR_API stair_status stair_index_load(const char* path, stair_index** out);
STAIR_API void stair_index_free(stair_index* index);
STAIR_API size_t stair_index_doc_count(const stair_index* index);
/* query_json uses the embedding shape above; the result is
   {"results": [{"doc": id, "score": s}, ...], "touches": n}. */
STAIR_API stair_status stair_index_search(const stair_index* index, const char* query_json, size_t k, int normalize,
                                          char** out_json);
STAIR_API stair_status stair_index_mask_search(const stair_index* index, const stair_vocab* vocab, const char* text,
                                               size_t k, char** out_json);

/* Runs one pipeline. The request is a JSON object whose "command" is one of
   datagen, train, embed, index-build, search, mask-search, eval, heatmap;
   the other keys mirror the command-line flags (see README). On success
   *out_json holds the pipeline summary. */
STAIR_API stair_status stair_run(const char* request_json, char** out_json);

/* JSON array of the training preset names. */
STAIR_API stair_status stair_list_presets(char** out_json);

#ifdef __cplusplus
}
#endif

#endif
