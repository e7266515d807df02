//! C ABI over the genex toolkit.
//!
//! Every fallible function returns a [`GenexStatus`]; on failure the message
//! is available from [`genex_last_error`] on the same thread. Strings handed
//! out by this library are owned by the caller and released with
//! [`genex_string_free`]. Structured values cross the boundary as JSON.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use genex::corpus::Preprocessor;
use genex::decode::{
    beam_decode, constrained_decode, perplexity, satisfies, DecoderConfig, LmScorer, NgramScorer, ToyScorer,
};
use genex::lexicon::{capitalize, detokenize, tokenize};
use genex::pipeline::{run_generate, PipelineConfig};
use genex::template::ConstraintSet;
use genex::Error;
use serde_json::json;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenexStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidInput = 3,
    Configuration = 4,
    Io = 5,
    ScorerMismatch = 6,
    Provider = 7,
    Internal = 8,
    Panic = 9,
}

impl From<&Error> for GenexStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidInput(_)
            | Error::UnparsableGeneric(_)
            | Error::InvalidKind { .. }
            | Error::MissingLabel(_)
            | Error::InputMismatch(_)
            | Error::Json { .. } => GenexStatus::InvalidInput,
            Error::Configuration(_) => GenexStatus::Configuration,
            Error::Io { .. } => GenexStatus::Io,
            Error::ScorerMismatch(_) => GenexStatus::ScorerMismatch,
            Error::SubtypeProvider(_) | Error::Provider(_) | Error::Bridge(_) => GenexStatus::Provider,
            _ => GenexStatus::Internal,
        }
    }
}

/// Language model scorer handle.
pub struct GenexScorer {
    inner: Box<dyn LmScorer>,
}

/// Loaded and validated pipeline configuration.
pub struct GenexPipeline {
    config: PipelineConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(GenexStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(GenexStatus::from(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GenexStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GenexStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside genex".into());
            GenexStatus::Panic
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(GenexStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(GenexStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn read_opt_str<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        read_str(p, name).map(Some)
    }
}

fn check_out<T>(p: *mut T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(GenexStatus::NullArgument, format!("{name} is null")))
    } else {
        Ok(())
    }
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|_| Failure(GenexStatus::Internal, "output contains a nul byte".into()))?;
    *out = c.into_raw();
    Ok(())
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> Result<T, Failure> {
    serde_json::from_str(text).map_err(|e| Failure(GenexStatus::InvalidInput, format!("{what}: {e}")))
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn genex_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread as a new string, or null.
#[no_mangle]
pub extern "C" fn genex_last_error() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null_mut(), |c| c.clone().into_raw()))
}

/// # Safety
/// `s` must be null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn genex_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Normalizes a raw generic with the default rules. Writes
/// `{"text": ..., "report": {...}}`.
///
/// # Safety
/// `raw` must be a valid C string and `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn genex_preprocess(raw: *const c_char, out_json: *mut *mut c_char) -> GenexStatus {
    guard(|| {
        let raw = read_str(raw, "raw")?;
        check_out(out_json, "out_json")?;
        let (text, report) = Preprocessor::default().preprocess(raw)?;
        write_string(out_json, json!({ "text": text, "report": report }).to_string())
    })
}

/// Evaluates each clause of a JSON constraint set against `text`. Writes a
/// JSON array of booleans.
///
/// # Safety
/// Both inputs must be valid C strings and `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn genex_satisfies(
    constraints_json: *const c_char,
    text: *const c_char,
    out_json: *mut *mut c_char,
) -> GenexStatus {
    guard(|| {
        let cs: ConstraintSet = parse_json(read_str(constraints_json, "constraints_json")?, "constraints")?;
        let words = tokenize(read_str(text, "text")?);
        check_out(out_json, "out_json")?;
        write_string(out_json, json!(satisfies(&cs, &words)).to_string())
    })
}

fn into_handle(scorer: impl LmScorer + 'static, out: *mut *mut GenexScorer) {
    let handle = Box::new(GenexScorer { inner: Box::new(scorer) });
    // SAFETY: callers check `out` before building the scorer.
    unsafe { *out = Box::into_raw(handle) };
}

/// Builds a table-driven scorer from its JSON description.
///
/// # Safety
/// `spec_json` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn genex_toy_scorer_new(spec_json: *const c_char, out: *mut *mut GenexScorer) -> GenexStatus {
    guard(|| {
        let spec = read_str(spec_json, "spec_json")?;
        check_out(out, "out")?;
        into_handle(ToyScorer::from_json(spec)?, out);
        Ok(())
    })
}

/// Trains a trigram scorer on a corpus file, one sentence per line.
///
/// # Safety
/// `corpus_path` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn genex_ngram_scorer_new(corpus_path: *const c_char, out: *mut *mut GenexScorer) -> GenexStatus {
    guard(|| {
        let path = read_str(corpus_path, "corpus_path")?;
        check_out(out, "out")?;
        into_handle(NgramScorer::load_corpus(Path::new(path), Vec::new())?, out);
        Ok(())
    })
}

/// # Safety
/// `scorer` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn genex_scorer_free(scorer: *mut GenexScorer) {
    if !scorer.is_null() {
        drop(Box::from_raw(scorer));
    }
}

unsafe fn scorer_ref<'a>(p: *const GenexScorer) -> Result<&'a dyn LmScorer, Failure> {
    if p.is_null() {
        return Err(Failure(GenexStatus::NullArgument, "scorer is null".into()));
    }
    Ok((*p).inner.as_ref())
}

/// Decodes a completion of `prompt`. A null `constraints_json` runs plain
/// beam search; a null `config_json` uses default decoder settings. Writes
/// a JSON array of `{"text", "log_prob", "all_satisfied"}` in final order.
///
/// # Safety
/// `scorer` must be a live handle, string arguments valid C strings or
/// null where allowed, and `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn genex_decode(
    scorer: *const GenexScorer,
    prompt: *const c_char,
    constraints_json: *const c_char,
    config_json: *const c_char,
    out_json: *mut *mut c_char,
) -> GenexStatus {
    guard(|| {
        let lm = scorer_ref(scorer)?;
        let prompt = read_str(prompt, "prompt")?;
        let cs: Option<ConstraintSet> =
            read_opt_str(constraints_json, "constraints_json")?.map(|s| parse_json(s, "constraints")).transpose()?;
        let cfg: DecoderConfig = match read_opt_str(config_json, "config_json")? {
            Some(s) => parse_json(s, "decoder config")?,
            None => DecoderConfig::default(),
        };
        check_out(out_json, "out_json")?;
        cfg.validate()?;
        let vocab = lm.vocabulary();
        let symbols = vocab.encode_text(prompt)?;
        let hyps = match &cs {
            Some(cs) => constrained_decode(lm, &symbols, cs, &cfg)?,
            None => beam_decode(lm, &symbols, &cfg)?,
        };
        let rows: Vec<_> = hyps
            .iter()
            .map(|h| {
                json!({
                    "text": capitalize(&detokenize(&h.words(vocab))),
                    "log_prob": h.log_prob,
                    "all_satisfied": h.all_satisfied(),
                })
            })
            .collect();
        write_string(out_json, serde_json::Value::from(rows).to_string())
    })
}

/// Perplexity of `text` (tokenized, then scored from an empty context).
///
/// # Safety
/// `scorer` must be a live handle, `text` a valid C string and `out` a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn genex_perplexity(scorer: *const GenexScorer, text: *const c_char, out: *mut f64) -> GenexStatus {
    guard(|| {
        let lm = scorer_ref(scorer)?;
        let text = read_str(text, "text")?;
        check_out(out, "out")?;
        let tokens = lm.vocabulary().encode_text(text)?;
        *out = perplexity(lm, &tokens)?;
        Ok(())
    })
}

/// Loads and validates a TOML pipeline configuration. A non-null
/// `output_dir` overrides the configured one.
///
/// # Safety
/// `config_path` must be a valid C string, `output_dir` null or a valid C
/// string, and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn genex_pipeline_load(
    config_path: *const c_char,
    output_dir: *const c_char,
    out: *mut *mut GenexPipeline,
) -> GenexStatus {
    guard(|| {
        let path = read_str(config_path, "config_path")?;
        let output_dir = read_opt_str(output_dir, "output_dir")?;
        check_out(out, "out")?;
        let mut config = PipelineConfig::load(Path::new(path))?;
        if let Some(dir) = output_dir {
            config.output_dir = dir.into();
        }
        config.validate()?;
        *out = Box::into_raw(Box::new(GenexPipeline { config }));
        Ok(())
    })
}

/// Runs generation and writes the output files. Writes a JSON summary
/// with the output paths, the manifest and its SHA-256.
///
/// # Safety
/// `pipeline` must be a live handle and `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn genex_pipeline_run(pipeline: *const GenexPipeline, out_json: *mut *mut c_char) -> GenexStatus {
    guard(|| {
        if pipeline.is_null() {
            return Err(Failure(GenexStatus::NullArgument, "pipeline is null".into()));
        }
        check_out(out_json, "out_json")?;
        let summary = run_generate(&(*pipeline).config)?;
        let value = json!({
            "exemplars_path": summary.exemplars_path,
            "manifest_path": summary.manifest_path,
            "manifest_sha256": summary.manifest_sha256,
            "manifest": summary.manifest,
        });
        write_string(out_json, value.to_string())
    })
}

/// # Safety
/// `pipeline` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn genex_pipeline_free(pipeline: *mut GenexPipeline) {
    if !pipeline.is_null() {
        drop(Box::from_raw(pipeline));
    }
}
