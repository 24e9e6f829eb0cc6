//! C interface to newscap.
//!
//! Every function returns an [`NcStatus`]; on failure a message is available
//! from [`nc_last_error`] on the same thread. Strings handed out by the
//! library are NUL-terminated UTF-8 and must be released with
//! [`nc_string_free`]. Structured inputs and outputs are JSON.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use newscap::corpus::{encode_article, tokenize, Annotation, EntityMention, Vocabulary};
use newscap::eval::{score_pairs, EvalPair};
use newscap::model::Model;
use newscap::runtime::{decode_ids, tag_clean, Checkpoint, DecodeConfig, DecodeMode};
use newscap::tensor::Tensor;
use newscap::Error;
use serde::{Deserialize, Serialize};

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    /// Malformed JSON, corpus data or feature sizes.
    InvalidInput = 4,
    Io = 5,
    /// Unreadable, corrupt or incompatible checkpoint.
    Checkpoint = 6,
    VocabMismatch = 7,
    /// Numerical failure inside the model.
    Internal = 8,
    /// A Rust panic was caught at the boundary.
    Panic = 9,
}

/// A loaded checkpoint with its vocabulary.
pub struct NcCaptioner {
    checkpoint: Checkpoint,
    model: Model,
    vocab: Vocabulary,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(NcStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => NcStatus::Io,
            Error::Checkpoint(_) | Error::CheckpointVersion { .. } | Error::ChecksumMismatch => NcStatus::Checkpoint,
            Error::VocabMismatch { .. } => NcStatus::VocabMismatch,
            Error::InvalidArgument(_) => NcStatus::InvalidArgument,
            Error::NonFinite(_) | Error::FullyMasked { .. } => NcStatus::Internal,
            _ => NcStatus::InvalidInput,
        };
        Failure(status, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure(NcStatus::InvalidInput, e.to_string())
    }
}

fn set_error(msg: Option<String>) {
    let c = msg.map(|m| CString::new(m.replace('\0', " ")).expect("NUL bytes removed"));
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> NcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(None);
            NcStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(Some(msg));
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(Some(format!("internal panic: {msg}")));
            NcStatus::Panic
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(NcStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(NcStatus::InvalidUtf8, format!("{what}: {e}")))
}

unsafe fn write_out<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(NcStatus::NullPointer, "output pointer is null".into()));
    }
    out.write(value);
    Ok(())
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|e| Failure(NcStatus::InvalidInput, e.to_string()))?;
    write_out(out, c.into_raw())
}

/// Library version, a static string.
#[no_mangle]
pub extern "C" fn nc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL after a success.
/// Valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn nc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by the library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn nc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a checkpoint and the vocabulary it was trained with.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nc_captioner_open(
    checkpoint_path: *const c_char,
    vocab_path: *const c_char,
    out: *mut *mut NcCaptioner,
) -> NcStatus {
    guard(|| {
        if !out.is_null() {
            out.write(ptr::null_mut());
        }
        let ckpt = read_str(checkpoint_path, "checkpoint_path")?;
        let vocab = read_str(vocab_path, "vocab_path")?;
        let checkpoint = Checkpoint::load(ckpt.as_ref())?;
        let vocab = Vocabulary::load(vocab.as_ref())?;
        checkpoint.check_vocab(&vocab)?;
        let model = checkpoint.model()?;
        let handle = Box::new(NcCaptioner {
            checkpoint,
            model,
            vocab,
        });
        write_out(out, Box::into_raw(handle))
    })
}

/// Frees a captioner. NULL is ignored.
///
/// # Safety
/// `c` must come from [`nc_captioner_open`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn nc_captioner_free(c: *mut NcCaptioner) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// Expected image feature grid: `patches` rows of `dim` floats.
///
/// # Safety
/// `c` must be a live captioner; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn nc_captioner_feature_shape(
    c: *const NcCaptioner,
    patches: *mut usize,
    dim: *mut usize,
) -> NcStatus {
    guard(|| {
        let c = c
            .as_ref()
            .ok_or_else(|| Failure(NcStatus::NullPointer, "captioner is null".into()))?;
        write_out(patches, c.checkpoint.header.model.image_patches)?;
        write_out(dim, c.checkpoint.header.model.image_dim)
    })
}

#[derive(Deserialize)]
struct ArticleInput {
    #[serde(default)]
    id: String,
    article: String,
    #[serde(default)]
    entities: Option<Vec<Annotation>>,
}

#[derive(Serialize)]
struct CaptionOutput {
    raw: String,
    caption: String,
    unresolved_tags: usize,
}

/// Captions one image.
///
/// `article_json` is `{"article": "...", "entities": [{"text", "type",
/// "start", "end"}, ...]}`; without `entities` a capitalization heuristic
/// finds the mentions. `features` holds `patches * dim` floats in row-major
/// order. `beam_width` 0 or 1 decodes greedily. On success `*out` receives
/// `{"raw": "...", "caption": "...", "unresolved_tags": n}` where `raw` is
/// the decoder output and `caption` has its entity tags replaced.
///
/// # Safety
/// `c` must be a live captioner, `features` must point to `n_features`
/// floats and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nc_captioner_caption(
    c: *const NcCaptioner,
    article_json: *const c_char,
    features: *const f32,
    n_features: usize,
    beam_width: u32,
    out: *mut *mut c_char,
) -> NcStatus {
    guard(|| {
        let c = c
            .as_ref()
            .ok_or_else(|| Failure(NcStatus::NullPointer, "captioner is null".into()))?;
        let input: ArticleInput = serde_json::from_str(read_str(article_json, "article_json")?)?;
        if features.is_null() {
            return Err(Failure(NcStatus::NullPointer, "features is null".into()));
        }
        let cfg = &c.checkpoint.header.model;
        let (k, d) = (cfg.image_patches, cfg.image_dim);
        if n_features != k * d {
            return Err(Failure(
                NcStatus::InvalidInput,
                format!("expected {k}x{d} = {} feature values, got {n_features}", k * d),
            ));
        }
        let grid = Tensor::new(vec![k, d], std::slice::from_raw_parts(features, n_features).to_vec())?;
        let sample = encode_article(&input.id, &input.article, input.entities.as_deref(), &c.vocab)?;
        let decode = DecodeConfig {
            mode: if beam_width > 1 { DecodeMode::Beam } else { DecodeMode::Greedy },
            beam: beam_width.max(1) as usize,
            ..DecodeConfig::default()
        };
        let ids = decode_ids(&c.model, &c.checkpoint.params, &c.vocab, &sample, &grid, &decode)?;
        let raw = c.vocab.decode(&ids)?;
        let tc = tag_clean(&raw, &sample.entity_set);
        let result = CaptionOutput {
            raw: raw.join(" "),
            caption: tc.tokens.join(" "),
            unresolved_tags: tc.unresolved,
        };
        write_string(out, serde_json::to_string(&result)?)
    })
}

/// Tokenizes text; `*out` receives a JSON array of strings.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn nc_tokenize(text: *const c_char, out: *mut *mut c_char) -> NcStatus {
    guard(|| {
        let tokens = tokenize(read_str(text, "text")?);
        write_string(out, serde_json::to_string(&tokens)?)
    })
}

/// Replaces entity tags (`PERSON_`, `GPE_`, ...) in a whitespace-separated
/// caption using a JSON array of article mentions `{"text", "type", "start",
/// "end", "frequency"}`. `*out` receives the cleaned caption.
///
/// # Safety
/// Inputs must be NUL-terminated strings and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn nc_tag_clean(
    caption: *const c_char,
    entities_json: *const c_char,
    out: *mut *mut c_char,
) -> NcStatus {
    guard(|| {
        let tokens: Vec<String> = read_str(caption, "caption")?
            .split_whitespace()
            .map(String::from)
            .collect();
        let entities: Vec<EntityMention> = serde_json::from_str(read_str(entities_json, "entities_json")?)?;
        write_string(out, tag_clean(&tokens, &entities).tokens.join(" "))
    })
}

#[derive(Deserialize)]
struct PairInput {
    candidate: String,
    reference: String,
    #[serde(default)]
    candidate_entities: Vec<String>,
    #[serde(default)]
    reference_entities: Vec<String>,
}

/// Scores caption pairs. `pairs_json` is an array of `{"candidate",
/// "reference"}` strings (whitespace tokenized) with optional
/// `candidate_entities` and `reference_entities` arrays. `*out` receives
/// `{"bleu4", "rouge_l", "cider", "entity_precision", "entity_recall",
/// "precision_undefined"}`.
///
/// # Safety
/// `pairs_json` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn nc_evaluate_pairs(pairs_json: *const c_char, out: *mut *mut c_char) -> NcStatus {
    guard(|| {
        let inputs: Vec<PairInput> = serde_json::from_str(read_str(pairs_json, "pairs_json")?)?;
        let pairs: Vec<EvalPair> = inputs
            .into_iter()
            .map(|p| EvalPair {
                candidate_entities: p.candidate_entities,
                reference_entities: p.reference_entities,
                ..EvalPair::from_text(&p.candidate, &p.reference)
            })
            .collect();
        write_string(out, serde_json::to_string(&score_pairs(&pairs)?)?)
    })
}
