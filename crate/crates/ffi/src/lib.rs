//! C ABI over `mirt-curriculum`.
//!
//! Objects cross the boundary as opaque handles created by `*_load` / `mirt_fit` /
//! `mirt_select` and released with the matching `*_free`. Every fallible call returns a
//! [`MirtStatus`]; on failure [`mirt_last_error`] describes the problem for the calling
//! thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mirt_curriculum::curriculum::{self, CompetenceSource, CurriculumConfig, Stage};
use mirt_curriculum::error::MirtError;
use mirt_curriculum::io::{self, IoError, LoadedResponses, PosteriorFile};
use mirt_curriculum::irt::{self, AbilitySlice, DifficultyVector, Question, QuestionBank};
use mirt_curriculum::vi::{self, FitConfig, PosteriorParams, PriorSpec};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MirtStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidInput = 2,
    Diverged = 3,
    Io = 4,
    OutOfRange = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MirtStage {
    Seeding = 0,
    LbActive = 1,
    BothActive = 2,
    UbActive = 3,
    Exhausted = 4,
}

impl From<Stage> for MirtStage {
    fn from(s: Stage) -> Self {
        match s {
            Stage::Seeding => MirtStage::Seeding,
            Stage::LbActive => MirtStage::LbActive,
            Stage::BothActive => MirtStage::BothActive,
            Stage::UbActive => MirtStage::UbActive,
            Stage::Exhausted => MirtStage::Exhausted,
        }
    }
}

/// Fit settings; obtain defaults from [`mirt_fit_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MirtFitOptions {
    pub learning_rate: f64,
    pub max_iters: usize,
    pub mc_samples: usize,
    pub seed: u64,
    pub prior_stddev: f64,
}

/// Selection settings; obtain defaults from [`mirt_select_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MirtSelectOptions {
    pub lb_log: f64,
    pub ub_log: f64,
    pub epoch: usize,
    pub seed_count: usize,
    pub seed_max_concepts: u32,
    /// False plugs in the latest snapshot's means; true averages concept probabilities
    /// over the latest snapshot's posterior.
    pub posterior_mean: bool,
}

pub struct MirtBank {
    bank: QuestionBank,
}

pub struct MirtResponses {
    loaded: LoadedResponses,
}

pub struct MirtPosterior {
    file: PosteriorFile,
    params: PosteriorParams,
}

pub struct MirtSelection {
    ids: Vec<CString>,
    stage: Stage,
    mean_concepts: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

struct Failure(MirtStatus, String);

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        let status = match e {
            IoError::Io { .. } => MirtStatus::Io,
            IoError::Invalid { .. } => MirtStatus::InvalidInput,
        };
        Failure(status, e.to_string())
    }
}

impl From<MirtError> for Failure {
    fn from(e: MirtError) -> Self {
        let status = match e {
            MirtError::NonFiniteObjective { .. } => MirtStatus::Diverged,
            MirtError::IndexOutOfRange { .. } => MirtStatus::OutOfRange,
            _ => MirtStatus::InvalidInput,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(MirtStatus::NullArgument, format!("{what} is null"))
}

/// Runs `body`, recording any failure or panic in the thread's last-error slot.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> MirtStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => MirtStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MirtStatus::Panic
        }
    }
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(MirtStatus::InvalidInput, format!("{what} is not valid UTF-8")))?;
    Ok(Path::new(s))
}

unsafe fn obj<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn copy_out(values: &[f64], out: *mut f64, len: usize) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output buffer"));
    }
    if len < values.len() {
        return Err(Failure(
            MirtStatus::OutOfRange,
            format!("buffer holds {len} values, {} needed", values.len()),
        ));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

/// Message for the most recent failure on this thread, or null. The pointer stays valid
/// until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn mirt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

#[no_mangle]
pub extern "C" fn mirt_fit_options_default() -> MirtFitOptions {
    let d = FitConfig::default();
    MirtFitOptions {
        learning_rate: d.learning_rate,
        max_iters: d.max_iters,
        mc_samples: d.mc_samples,
        seed: d.seed,
        prior_stddev: 1.0,
    }
}

#[no_mangle]
pub extern "C" fn mirt_select_options_default() -> MirtSelectOptions {
    let d = CurriculumConfig::default();
    MirtSelectOptions {
        lb_log: d.lb_log,
        ub_log: d.ub_log,
        epoch: 1,
        seed_count: d.seed_count,
        seed_max_concepts: d.seed_max_concepts,
        posterior_mean: false,
    }
}

// ---------------------------------------------------------------------------
// Bank

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mirt_bank_load(path: *const c_char, out: *mut *mut MirtBank) -> MirtStatus {
    guard(|| {
        let bank = io::load_bank(path_arg(path, "path")?)?;
        put(out, MirtBank { bank })
    })
}

/// # Safety
/// `bank` must be null or a handle from [`mirt_bank_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mirt_bank_free(bank: *mut MirtBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// # Safety
/// `bank` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mirt_bank_num_questions(bank: *const MirtBank) -> usize {
    bank.as_ref().map_or(0, |b| b.bank.len())
}

/// # Safety
/// `bank` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mirt_bank_num_concepts(bank: *const MirtBank) -> usize {
    bank.as_ref().map_or(0, |b| b.bank.num_concepts())
}

// ---------------------------------------------------------------------------
// Responses

/// # Safety
/// `path` must be a NUL-terminated string, `bank` a live handle, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mirt_responses_load(
    path: *const c_char,
    bank: *const MirtBank,
    out: *mut *mut MirtResponses,
) -> MirtStatus {
    guard(|| {
        let bank = obj(bank, "bank")?;
        let loaded = io::load_responses(path_arg(path, "path")?, &bank.bank)?;
        put(out, MirtResponses { loaded })
    })
}

/// # Safety
/// `responses` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mirt_responses_free(responses: *mut MirtResponses) {
    if !responses.is_null() {
        drop(Box::from_raw(responses));
    }
}

/// # Safety
/// `responses` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mirt_responses_num_snapshots(responses: *const MirtResponses) -> usize {
    responses.as_ref().map_or(0, |r| r.loaded.snapshot_ids.len())
}

// ---------------------------------------------------------------------------
// Fitting and posteriors

/// Fits the posterior. `options` and `warm_start` may be null (defaults / prior start).
///
/// # Safety
/// Handles must be live; `options` null or valid; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mirt_fit(
    bank: *const MirtBank,
    responses: *const MirtResponses,
    options: *const MirtFitOptions,
    warm_start: *const MirtPosterior,
    out: *mut *mut MirtPosterior,
) -> MirtStatus {
    guard(|| {
        let bank = &obj(bank, "bank")?.bank;
        let loaded = &obj(responses, "responses")?.loaded;
        let opts = options.as_ref().copied().unwrap_or_else(|| mirt_fit_options_default());
        let config = FitConfig {
            learning_rate: opts.learning_rate,
            max_iters: opts.max_iters,
            mc_samples: opts.mc_samples,
            seed: opts.seed,
            ..FitConfig::default()
        };
        let prior = PriorSpec::centered(opts.prior_stddev)?;
        let warm = match warm_start.as_ref() {
            Some(w) => Some(
                w.file
                    .to_params_for(bank.concept_names(), &loaded.snapshot_ids, &prior)
                    .map_err(|m| Failure(MirtStatus::InvalidInput, m))?,
            ),
            None => None,
        };
        let (params, report) = vi::fit(&loaded.matrix, bank, &prior, &config, warm.as_ref())?;
        let file = PosteriorFile::from_fit(bank.concept_names(), &loaded.snapshot_ids, &params, &report);
        put(out, MirtPosterior { file, params })
    })
}

/// Loads a posterior file and checks it against `bank`'s concept vocabulary.
///
/// # Safety
/// `path` must be a NUL-terminated string, `bank` a live handle, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mirt_posterior_load(
    path: *const c_char,
    bank: *const MirtBank,
    out: *mut *mut MirtPosterior,
) -> MirtStatus {
    guard(|| {
        let bank = &obj(bank, "bank")?.bank;
        let path = path_arg(path, "path")?;
        let file = io::load_posterior(path)?;
        let params = io::posterior_params(path, &file, bank.concept_names())?;
        put(out, MirtPosterior { file, params })
    })
}

/// Writes the posterior atomically.
///
/// # Safety
/// `post` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mirt_posterior_save(post: *const MirtPosterior, path: *const c_char) -> MirtStatus {
    guard(|| {
        let post = obj(post, "posterior")?;
        io::save_posterior(path_arg(path, "path")?, &post.file)?;
        Ok(())
    })
}

/// # Safety
/// `post` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mirt_posterior_free(post: *mut MirtPosterior) {
    if !post.is_null() {
        drop(Box::from_raw(post));
    }
}

/// # Safety
/// `post` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mirt_posterior_num_snapshots(post: *const MirtPosterior) -> usize {
    post.as_ref().map_or(0, |p| p.params.num_snapshots())
}

/// # Safety
/// `post` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mirt_posterior_num_concepts(post: *const MirtPosterior) -> usize {
    post.as_ref().map_or(0, |p| p.params.num_concepts())
}

/// Final smoothed ELBO, iteration count and convergence flag of the producing fit.
///
/// # Safety
/// `post` must be a live handle; each output pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn mirt_posterior_fit_summary(
    post: *const MirtPosterior,
    elbo_final: *mut f64,
    iterations: *mut usize,
    converged: *mut bool,
) -> MirtStatus {
    guard(|| {
        let fit = &obj(post, "posterior")?.file.fit;
        if let Some(e) = elbo_final.as_mut() {
            *e = fit.elbo_final;
        }
        if let Some(i) = iterations.as_mut() {
            *i = fit.iterations;
        }
        if let Some(c) = converged.as_mut() {
            *c = fit.converged;
        }
        Ok(())
    })
}

/// Copies the difficulty means (one per concept) into `out`.
///
/// # Safety
/// `post` must be a live handle and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mirt_posterior_difficulty_means(
    post: *const MirtPosterior,
    out: *mut f64,
    len: usize,
) -> MirtStatus {
    guard(|| {
        let post = obj(post, "posterior")?;
        copy_out(post.params.difficulty_means().as_slice(), out, len)
    })
}

/// Copies the competence means of row `snapshot` (0-based, ascending snapshot id).
///
/// # Safety
/// `post` must be a live handle and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mirt_posterior_competence_means(
    post: *const MirtPosterior,
    snapshot: usize,
    out: *mut f64,
    len: usize,
) -> MirtStatus {
    guard(|| {
        let post = obj(post, "posterior")?;
        if snapshot >= post.params.num_snapshots() {
            return Err(MirtError::IndexOutOfRange {
                what: "snapshot",
                index: snapshot,
                len: post.params.num_snapshots(),
            }
            .into());
        }
        copy_out(post.params.ability_means(snapshot).as_slice(), out, len)
    })
}

// ---------------------------------------------------------------------------
// Selection

/// # Safety
/// Handles must be live; `options` null or valid; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mirt_select(
    bank: *const MirtBank,
    post: *const MirtPosterior,
    options: *const MirtSelectOptions,
    out: *mut *mut MirtSelection,
) -> MirtStatus {
    guard(|| {
        let bank = &obj(bank, "bank")?.bank;
        let post = obj(post, "posterior")?;
        let opts = options.as_ref().copied().unwrap_or_else(|| mirt_select_options_default());
        let config = CurriculumConfig {
            lb_log: opts.lb_log,
            ub_log: opts.ub_log,
            seed_max_concepts: opts.seed_max_concepts,
            seed_count: opts.seed_count,
            competence_source: if opts.posterior_mean {
                CompetenceSource::PosteriorMeanLatest
            } else {
                CompetenceSource::LatestSnapshot
            },
        };
        config.validate()?;
        if post.params.num_concepts() != bank.num_concepts() {
            return Err(MirtError::DimensionMismatch {
                what: "posterior concepts",
                expected: bank.num_concepts(),
                found: post.params.num_concepts(),
            }
            .into());
        }
        let result = curriculum::select(bank, &post.params, &config, opts.epoch);
        let stats = io::SelectionStats::new(&result, bank, &config, opts.epoch, 0);
        let ids = result
            .selected
            .into_iter()
            .map(|id| CString::new(id).map_err(|_| Failure(MirtStatus::InvalidInput, "question id contains NUL".into())))
            .collect::<Result<Vec<_>, _>>()?;
        put(
            out,
            MirtSelection {
                ids,
                stage: result.stage,
                mean_concepts: stats.mean_concepts,
            },
        )
    })
}

/// # Safety
/// `sel` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mirt_selection_free(sel: *mut MirtSelection) {
    if !sel.is_null() {
        drop(Box::from_raw(sel));
    }
}

/// # Safety
/// `sel` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mirt_selection_len(sel: *const MirtSelection) -> usize {
    sel.as_ref().map_or(0, |s| s.ids.len())
}

/// # Safety
/// `sel` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mirt_selection_stage(sel: *const MirtSelection) -> MirtStage {
    sel.as_ref().map_or(MirtStage::Exhausted, |s| s.stage.into())
}

/// # Safety
/// `sel` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mirt_selection_mean_concepts(sel: *const MirtSelection) -> f64 {
    sel.as_ref().map_or(0.0, |s| s.mean_concepts)
}

/// Question id at `index`, or null when out of range. Owned by the selection.
///
/// # Safety
/// `sel` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mirt_selection_id(sel: *const MirtSelection, index: usize) -> *const c_char {
    sel.as_ref()
        .and_then(|s| s.ids.get(index))
        .map_or(ptr::null(), |id| id.as_ptr())
}

// ---------------------------------------------------------------------------
// Model evaluation

/// Probability of a correct answer for one question with `num_concepts` concepts.
///
/// # Safety
/// `theta`, `b` and `counts` must each point to `num_concepts` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mirt_answer_prob(
    theta: *const f64,
    b: *const f64,
    counts: *const u32,
    num_concepts: usize,
    guess: f64,
    include_guess: bool,
    out: *mut f64,
) -> MirtStatus {
    guard(|| {
        if theta.is_null() || b.is_null() || counts.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let slice = |p: *const f64| std::slice::from_raw_parts(p, num_concepts).to_vec();
        let counts = std::slice::from_raw_parts(counts, num_concepts).to_vec();
        let q = Question::new("q", counts, guess)?;
        *out = irt::answer_prob(
            &AbilitySlice::new(slice(theta))?,
            &DifficultyVector::new(slice(b))?,
            &q,
            include_guess,
        )?;
        Ok(())
    })
}
