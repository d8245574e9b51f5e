use std::ffi::{CStr, CString};
use std::io::Write;
use std::ptr;

use brokenstick_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(bs_last_error_message()) }.to_string_lossy().into_owned()
}

#[test]
fn simulate_fit_classify_round_trip() {
    let n = 40;
    let mut truth = vec![0usize; n];
    let (mut fixed, mut random) = (ptr::null_mut(), ptr::null_mut());
    unsafe {
        assert_eq!(bs_simulate(3, n, &mut fixed, &mut random, truth.as_mut_ptr(), n), BsStatus::Ok);
        assert_eq!(bs_cohort_len(fixed), n);
        assert_eq!(bs_cohort_len(random), n);

        let mut opts = bs_fit_options_default(1, BsKnotMode::Fixed);
        opts.iterations = 300;
        opts.burnin = 100;
        opts.thin = 4;
        let mut chain = ptr::null_mut();
        assert_eq!(bs_fit(fixed, &opts, &mut chain), BsStatus::Ok, "{}", last_error());
        assert_eq!(bs_chain_n_draws(chain), 50);
        let sweeps = bs_chain_n_sweeps(chain);
        assert_eq!(sweeps, 300);
        let mut trace = vec![0usize; sweeps];
        assert_eq!(bs_chain_g_trace(chain, trace.as_mut_ptr(), sweeps), BsStatus::Ok);
        assert!(trace.iter().all(|&g| (1..=n).contains(&g)));

        let mut alloc = vec![0usize; n];
        assert_eq!(bs_chain_allocations(chain, 49, alloc.as_mut_ptr(), n), BsStatus::Ok);
        assert_eq!(bs_chain_allocations(chain, 50, alloc.as_mut_ptr(), n), BsStatus::InvalidArgument);
        assert!(last_error().contains("out of range"));

        let mut clustering = ptr::null_mut();
        assert_eq!(bs_classify(chain, 2000, &mut clustering), BsStatus::Ok);
        assert_eq!(bs_clustering_len(clustering), n);
        let mut labels = vec![0usize; n];
        assert_eq!(bs_clustering_labels(clustering, labels.as_mut_ptr(), n), BsStatus::Ok);
        assert_eq!(bs_clustering_n_clusters(clustering), labels.iter().max().unwrap() + 1);
        let pear = bs_clustering_pear(clustering);
        assert!(pear.is_finite() && pear <= 1.0);

        let mut ari = f64::NAN;
        assert_eq!(bs_ari(labels.as_ptr(), truth.as_ptr(), n, &mut ari), BsStatus::Ok);
        assert!(ari > 0.5, "ari {ari}");

        bs_clustering_free(clustering);
        bs_chain_free(chain);
        bs_cohort_free(fixed);
        bs_cohort_free(random);
    }
}

#[test]
fn short_buffers_and_nulls_are_rejected() {
    let mut truth = vec![0usize; 3];
    let (mut fixed, mut random) = (ptr::null_mut(), ptr::null_mut());
    unsafe {
        let s = bs_simulate(0, 10, &mut fixed, &mut random, truth.as_mut_ptr(), truth.len());
        assert_eq!(s, BsStatus::InvalidArgument);
        assert!(fixed.is_null());
        let mut chain = ptr::null_mut();
        let opts = bs_fit_options_default(0, BsKnotMode::Random);
        assert_eq!(bs_fit(ptr::null(), &opts, &mut chain), BsStatus::InvalidArgument);
        let mut ari = 0.0;
        assert_eq!(bs_ari(ptr::null(), truth.as_ptr(), 3, &mut ari), BsStatus::InvalidArgument);
    }
}

#[test]
fn ari_of_known_pair() {
    let a = [0usize, 0, 1, 1];
    let b = [0usize, 1, 0, 1];
    let mut out = 0.0;
    unsafe {
        assert_eq!(bs_ari(a.as_ptr(), a.as_ptr(), 4, &mut out), BsStatus::Ok);
        assert!((out - 1.0).abs() < 1e-12);
        assert_eq!(bs_ari(a.as_ptr(), b.as_ptr(), 4, &mut out), BsStatus::Ok);
        assert!((out + 0.5).abs() < 1e-12);
    }
}

#[test]
fn csv_errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = CString::new(dir.path().join("none.csv").to_str().unwrap()).unwrap();
    let mut cohort = ptr::null_mut();
    unsafe {
        assert_eq!(bs_cohort_read_csv(missing.as_ptr(), 1.0, 2, false, &mut cohort), BsStatus::Io);
        assert!(!last_error().is_empty());

        let bad = dir.path().join("bad.csv");
        let mut f = std::fs::File::create(&bad).unwrap();
        writeln!(f, "child_id,age_years,haz\na,0.5,not-a-number").unwrap();
        drop(f);
        let bad = CString::new(bad.to_str().unwrap()).unwrap();
        assert_eq!(bs_cohort_read_csv(bad.as_ptr(), 1.0, 2, false, &mut cohort), BsStatus::Validation);

        let good = dir.path().join("good.csv");
        let mut f = std::fs::File::create(&good).unwrap();
        writeln!(f, "child_id,age_years,haz").unwrap();
        for (id, t, y) in [("a", 0.1, 0.2), ("a", 0.6, -0.1), ("b", 0.3, 1.0)] {
            writeln!(f, "{id},{t},{y}").unwrap();
        }
        drop(f);
        let good = CString::new(good.to_str().unwrap()).unwrap();
        assert_eq!(bs_cohort_read_csv(good.as_ptr(), 1.0, 2, false, &mut cohort), BsStatus::Ok, "{}", last_error());
        assert_eq!(bs_cohort_len(cohort), 2);
        bs_cohort_free(cohort);
    }
}
