use std::ffi::{CStr, CString};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use mirt_ffi::*;

const BANK: &str = r#"{
  "concepts": ["color", "shape"],
  "question_types": {"exist": {"binary": true}, "query": {"answer_vocabulary_size": 8}},
  "questions": [
    {"question_id": "q0", "concepts": {"color": 1}, "question_type": "exist"},
    {"question_id": "q1", "concepts": {"shape": 1}, "question_type": "exist"},
    {"question_id": "q2", "concepts": {"color": 1, "shape": 1}, "question_type": "query"},
    {"question_id": "q3", "concepts": {"color": 2}, "question_type": "query"},
    {"question_id": "q4", "concepts": {"shape": 2, "color": 1}},
    {"question_id": "q5", "concepts": {"color": 1}},
    {"question_id": "q6", "concepts": {"shape": 3}, "guess_prob": 0.1},
    {"question_id": "q7", "concepts": {"color": 2, "shape": 2}},
    {"question_id": "q8", "concepts": {"shape": 1}, "question_type": "query"},
    {"question_id": "q9", "concepts": {"color": 3, "shape": 1}}
  ]
}
"#;

fn responses_csv() -> String {
    let mut out = String::from("snapshot_id,question_id,correct\n");
    for s in 0..3 {
        for j in 0..10 {
            let correct = (j * 7 + s * 5) % 10 < 3 + 3 * s;
            out.push_str(&format!("{s},q{j},{}\n", u8::from(correct)));
        }
    }
    out
}

fn fixture() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bank.json"), BANK).unwrap();
    fs::write(dir.path().join("responses.csv"), responses_csv()).unwrap();
    dir
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = mirt_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

struct Loaded {
    bank: *mut MirtBank,
    responses: *mut MirtResponses,
}

impl Drop for Loaded {
    fn drop(&mut self) {
        unsafe {
            mirt_responses_free(self.responses);
            mirt_bank_free(self.bank);
        }
    }
}

fn load(dir: &Path) -> Loaded {
    let mut bank = ptr::null_mut();
    let mut responses = ptr::null_mut();
    unsafe {
        assert_eq!(mirt_bank_load(cpath(&dir.join("bank.json")).as_ptr(), &mut bank), MirtStatus::Ok);
        assert_eq!(
            mirt_responses_load(cpath(&dir.join("responses.csv")).as_ptr(), bank, &mut responses),
            MirtStatus::Ok
        );
    }
    Loaded { bank, responses }
}

#[test]
fn fit_save_load_and_select() {
    let dir = fixture();
    let l = load(dir.path());
    unsafe {
        assert_eq!(mirt_bank_num_questions(l.bank), 10);
        assert_eq!(mirt_bank_num_concepts(l.bank), 2);
        assert_eq!(mirt_responses_num_snapshots(l.responses), 3);

        let opts = MirtFitOptions { seed: 11, ..mirt_fit_options_default() };
        let mut post = ptr::null_mut();
        assert_eq!(mirt_fit(l.bank, l.responses, &opts, ptr::null(), &mut post), MirtStatus::Ok);
        assert_eq!(mirt_posterior_num_snapshots(post), 3);
        assert_eq!(mirt_posterior_num_concepts(post), 2);

        let (mut elbo, mut iters, mut conv) = (0.0, 0usize, false);
        assert_eq!(mirt_posterior_fit_summary(post, &mut elbo, &mut iters, &mut conv), MirtStatus::Ok);
        assert!(elbo.is_finite() && elbo < 0.0);
        assert!(iters > 0 && iters <= 1000);
        assert_eq!(mirt_posterior_fit_summary(post, ptr::null_mut(), ptr::null_mut(), ptr::null_mut()), MirtStatus::Ok);

        let mut b = [0.0; 2];
        assert_eq!(mirt_posterior_difficulty_means(post, b.as_mut_ptr(), 2), MirtStatus::Ok);
        let mut theta_first = [0.0; 2];
        let mut theta_last = [0.0; 2];
        assert_eq!(mirt_posterior_competence_means(post, 0, theta_first.as_mut_ptr(), 2), MirtStatus::Ok);
        assert_eq!(mirt_posterior_competence_means(post, 2, theta_last.as_mut_ptr(), 2), MirtStatus::Ok);
        // Later snapshots answer more questions correctly.
        assert!(theta_last.iter().sum::<f64>() > theta_first.iter().sum::<f64>());

        // Same seed, same posterior.
        let mut again = ptr::null_mut();
        assert_eq!(mirt_fit(l.bank, l.responses, &opts, ptr::null(), &mut again), MirtStatus::Ok);
        let mut b2 = [0.0; 2];
        mirt_posterior_difficulty_means(again, b2.as_mut_ptr(), 2);
        assert_eq!(b.map(f64::to_bits), b2.map(f64::to_bits));
        mirt_posterior_free(again);

        // Round trip through a file.
        let file = cpath(&dir.path().join("post.json"));
        assert_eq!(mirt_posterior_save(post, file.as_ptr()), MirtStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(mirt_posterior_load(file.as_ptr(), l.bank, &mut loaded), MirtStatus::Ok);
        let mut b3 = [0.0; 2];
        mirt_posterior_difficulty_means(loaded, b3.as_mut_ptr(), 2);
        assert_eq!(b.map(f64::to_bits), b3.map(f64::to_bits));

        // Warm start from the loaded posterior.
        let mut warm = ptr::null_mut();
        assert_eq!(mirt_fit(l.bank, l.responses, ptr::null(), loaded, &mut warm), MirtStatus::Ok);
        mirt_posterior_free(warm);
        mirt_posterior_free(loaded);

        // Seeding epoch picks questions with at most two concepts.
        let sopts = MirtSelectOptions { epoch: 0, ..mirt_select_options_default() };
        let mut sel = ptr::null_mut();
        assert_eq!(mirt_select(l.bank, post, &sopts, &mut sel), MirtStatus::Ok);
        assert_eq!(mirt_selection_stage(sel), MirtStage::Seeding);
        let ids: Vec<String> = (0..mirt_selection_len(sel))
            .map(|k| CStr::from_ptr(mirt_selection_id(sel, k)).to_str().unwrap().to_owned())
            .collect();
        assert_eq!(ids, ["q0", "q1", "q2", "q3", "q5", "q8"]);
        assert!(mirt_selection_id(sel, ids.len()).is_null());
        let mean = mirt_selection_mean_concepts(sel);
        assert!((mean - 8.0 / 6.0).abs() < 1e-12, "{mean}");
        mirt_selection_free(sel);

        // Later epochs use the bounds; both competence sources work.
        for posterior_mean in [false, true] {
            let sopts = MirtSelectOptions { posterior_mean, ..mirt_select_options_default() };
            let mut sel = ptr::null_mut();
            assert_eq!(mirt_select(l.bank, post, &sopts, &mut sel), MirtStatus::Ok);
            assert_ne!(mirt_selection_stage(sel), MirtStage::Seeding);
            mirt_selection_free(sel);
        }
        mirt_posterior_free(post);
    }
}

#[test]
fn errors_set_status_and_message() {
    let dir = fixture();
    let l = load(dir.path());
    unsafe {
        let mut bank = ptr::null_mut();
        assert_eq!(mirt_bank_load(ptr::null(), &mut bank), MirtStatus::NullArgument);
        assert!(last_error().contains("path"));
        assert!(bank.is_null());

        let missing = cpath(&dir.path().join("nope.json"));
        assert_eq!(mirt_bank_load(missing.as_ptr(), &mut bank), MirtStatus::Io);
        assert!(last_error().contains("nope.json"));

        let bad = dir.path().join("bad.csv");
        fs::write(&bad, "snapshot_id,question_id,correct\n0,q0,1\n0,zz,1\n").unwrap();
        let mut resp = ptr::null_mut();
        assert_eq!(mirt_responses_load(cpath(&bad).as_ptr(), l.bank, &mut resp), MirtStatus::InvalidInput);
        assert!(last_error().contains(":3:"), "{}", last_error());

        let opts = MirtFitOptions { learning_rate: -1.0, ..mirt_fit_options_default() };
        let mut post = ptr::null_mut();
        assert_eq!(mirt_fit(l.bank, l.responses, &opts, ptr::null(), &mut post), MirtStatus::InvalidInput);
        assert_eq!(mirt_fit(l.bank, ptr::null(), ptr::null(), ptr::null(), &mut post), MirtStatus::NullArgument);
        assert_eq!(mirt_fit(l.bank, l.responses, ptr::null(), ptr::null(), ptr::null_mut()), MirtStatus::NullArgument);

        let opts = MirtFitOptions { max_iters: 20, ..mirt_fit_options_default() };
        assert_eq!(mirt_fit(l.bank, l.responses, &opts, ptr::null(), &mut post), MirtStatus::Ok);
        let mut small = [0.0; 1];
        assert_eq!(mirt_posterior_difficulty_means(post, small.as_mut_ptr(), 1), MirtStatus::OutOfRange);
        assert_eq!(mirt_posterior_competence_means(post, 3, small.as_mut_ptr(), 2), MirtStatus::OutOfRange);

        let sopts = MirtSelectOptions { lb_log: -0.5, ub_log: -1.0, ..mirt_select_options_default() };
        let mut sel = ptr::null_mut();
        assert_eq!(mirt_select(l.bank, post, &sopts, &mut sel), MirtStatus::InvalidInput);
        assert!(sel.is_null());

        // A success clears the previous message.
        assert_eq!(mirt_posterior_fit_summary(post, ptr::null_mut(), ptr::null_mut(), ptr::null_mut()), MirtStatus::Ok);
        assert!(mirt_last_error().is_null());
        mirt_posterior_free(post);

        // Freeing null is a no-op; size queries on null return zero.
        mirt_bank_free(ptr::null_mut());
        mirt_selection_free(ptr::null_mut());
        assert_eq!(mirt_bank_num_questions(ptr::null()), 0);
    }
}

#[test]
fn answer_prob_matches_hand_value() {
    // theta = b gives sigmoid 1/2 per unit of concept count: 0.25 + 0.75 / 8.
    let (theta, b, counts) = ([0.0, 0.0], [0.0, 0.0], [2u32, 1]);
    let mut p = 0.0;
    unsafe {
        assert_eq!(
            mirt_answer_prob(theta.as_ptr(), b.as_ptr(), counts.as_ptr(), 2, 0.25, true, &mut p),
            MirtStatus::Ok
        );
        assert!((p - 0.34375).abs() < 1e-12, "{p}");
        assert_eq!(
            mirt_answer_prob(theta.as_ptr(), b.as_ptr(), counts.as_ptr(), 2, 0.25, false, &mut p),
            MirtStatus::Ok
        );
        assert!((p - 0.125).abs() < 1e-12, "{p}");
        assert_eq!(
            mirt_answer_prob(theta.as_ptr(), b.as_ptr(), counts.as_ptr(), 2, 1.5, true, &mut p),
            MirtStatus::InvalidInput
        );
        assert_eq!(
            mirt_answer_prob(ptr::null(), b.as_ptr(), counts.as_ptr(), 2, 0.0, true, &mut p),
            MirtStatus::NullArgument
        );
    }
}

fn target_dir() -> PathBuf {
    // The test binary lives in <target>/<profile>/deps.
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_header() {
    let lib_dir = target_dir();
    let so = lib_dir.join(format!("{}mirt_ffi{}", std::env::consts::DLL_PREFIX, std::env::consts::DLL_SUFFIX));
    if !so.exists() {
        eprintln!("skipping: {} not built", so.display());
        return;
    }
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler");
        return;
    }
    let dir = fixture();
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let exe = dir.path().join("smoke");
    let cc = Command::new("cc")
        .args(["-std=c11", "-Wall", "-Wextra", "-Werror", "-o"])
        .arg(&exe)
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg("-L")
        .arg(&lib_dir)
        .args(["-lmirt_ffi", "-lm"])
        .output()
        .unwrap();
    assert!(cc.status.success(), "{}", String::from_utf8_lossy(&cc.stderr));

    let run = Command::new(&exe)
        .arg(dir.path().join("bank.json"))
        .arg(dir.path().join("responses.csv"))
        .arg(dir.path().join("post.json"))
        .env("LD_LIBRARY_PATH", &lib_dir)
        .env("DYLD_LIBRARY_PATH", &lib_dir)
        .output()
        .unwrap();
    assert!(
        run.status.success(),
        "{}{}",
        String::from_utf8_lossy(&run.stdout),
        String::from_utf8_lossy(&run.stderr)
    );
    assert!(String::from_utf8_lossy(&run.stdout).contains("smoke ok"));
    assert!(dir.path().join("post.json").exists());
}
