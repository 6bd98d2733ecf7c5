use std::fs;
use std::path::Path;

use grokwatch::harness::analysis::{analyze_run, write_analysis, AnalysisOptions};
use grokwatch::harness::run::{train_run_until, RunError, METRICS_FILE, PROBES_FILE, SAMPLE_DIR, SNAPSHOT_DIR};
use grokwatch::harness::{self, ensure_run, train_run, ExperimentConfig};
use grokwatch::interventions::Condition;
use grokwatch::trajectory::SnapshotArchive;
use proptest::prelude::*;

/// A model and data set small enough to train in well under a second.
fn tiny() -> ExperimentConfig {
    let text = "
        task = dyck
        seq_len = 12
        max_depth = 4
        n_train = 16
        n_test = 60
        d_model = 16
        n_layers = 1
        n_heads = 2
        d_ff = 32
        lr = 3e-3
        max_steps = 60
        seeds = 7
        eval_interval = 10
        dense = 10:5
        snapshot_interval = 10
        checkpoint_interval = 25
        probe_batch = 4
        probe_interval = 10
        early_stop = false
    ";
    ExperimentConfig::parse(text).unwrap()
}

fn bytes(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

/// Every file under `dir`, relative path to contents, sorted. Archive
/// manifests contribute their step lists.
fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == "manifest.json") {
                // names the run, so compare its recorded steps instead
                let steps = SnapshotArchive::open(p.parent().unwrap()).unwrap().steps().to_vec();
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), format!("{steps:?}").into_bytes()));
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), bytes(&p)));
            }
        }
    }
    out.sort();
    out
}

fn assert_same_outputs(a: &Path, b: &Path) {
    assert_eq!(bytes(&a.join(METRICS_FILE)), bytes(&b.join(METRICS_FILE)), "metric streams differ");
    assert_eq!(bytes(&a.join(PROBES_FILE)), bytes(&b.join(PROBES_FILE)), "probe streams differ");
    for sub in [SNAPSHOT_DIR, SAMPLE_DIR] {
        assert_eq!(tree(&a.join(sub)), tree(&b.join(sub)), "{sub} differs");
    }
}

#[test]
fn same_seed_gives_identical_outputs() {
    let c = tiny();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = train_run(&c, 7, a.path()).unwrap();
    let rb = train_run(&c, 7, b.path()).unwrap();
    assert_same_outputs(a.path(), b.path());
    assert_eq!(ra.evals, rb.evals);
    assert_eq!(ra.evals.last().unwrap().step, 60);
}

#[test]
fn different_seeds_differ() {
    let c = tiny();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train_run(&c, 7, a.path()).unwrap();
    train_run(&c, 8, b.path()).unwrap();
    assert_ne!(bytes(&a.path().join(METRICS_FILE)), bytes(&b.path().join(METRICS_FILE)));
}

#[test]
fn interrupted_run_resumes_to_identical_outputs() {
    let c = tiny();
    let (full, resumed) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let want = train_run(&c, 7, full.path()).unwrap();
    let partial = train_run_until(&c, 7, resumed.path(), Some(25)).unwrap();
    assert!(resumed.path().join("checkpoint.json").exists());
    assert!(partial.evals.iter().all(|e| e.step < 25));
    let got = train_run(&c, 7, resumed.path()).unwrap();
    assert!(!resumed.path().join("checkpoint.json").exists());
    assert_same_outputs(full.path(), resumed.path());
    assert_eq!(want.evals, got.evals);
    assert_eq!((want.grok_step, want.onset_step), (got.grok_step, got.onset_step));
}

#[test]
fn checkpoint_of_another_config_is_refused() {
    let c = tiny();
    let dir = tempfile::tempdir().unwrap();
    train_run_until(&c, 7, dir.path(), Some(25)).unwrap();
    let mut other = c.clone();
    other.lr = 1e-3;
    assert!(matches!(train_run(&other, 7, dir.path()), Err(RunError::HashMismatch { .. })));
}

#[test]
fn zero_strength_cells_match_the_baseline_bit_exactly() {
    let base = tiny();
    let root = tempfile::tempdir().unwrap();
    let b = root.path().join("baseline");
    train_run(&base, 7, &b).unwrap();
    for cond in [Condition::Kick, Condition::Noise, Condition::Project, Condition::Penalty] {
        let mut c = base.clone();
        c.intervention.condition = cond;
        c.intervention.strength = 0.0;
        let d = root.path().join(cond.as_str());
        let r = train_run(&c, 7, &d).unwrap();
        assert_same_outputs(&b, &d);
        assert!(r.kick.is_none());
    }
}

#[test]
fn interventions_at_strength_change_the_run() {
    let base = tiny();
    let root = tempfile::tempdir().unwrap();
    let b = root.path().join("baseline");
    let baseline = train_run(&base, 7, &b).unwrap();

    let mut kick = base.clone();
    kick.intervention.condition = Condition::Kick;
    kick.intervention.strength = 1e-2;
    kick.intervention.trigger = Some(20);
    let r = train_run(&kick, 7, &root.path().join("kick")).unwrap();
    let k = r.kick.clone().expect("kick applied");
    assert!(k.applied);
    assert!((k.shift - 1e-2 * k.param_norm).abs() < 1e-6 * k.param_norm);
    // identical up to the trigger, different after
    let upto = |rec: &harness::RunRecord| rec.evals.iter().filter(|e| e.step <= 20).cloned().collect::<Vec<_>>();
    assert_eq!(upto(&r), upto(&baseline));
    assert_ne!(r.evals, baseline.evals);

    let mut project = base.clone();
    project.intervention.condition = Condition::Project;
    project.intervention.strength = 1.0;
    project.intervention.basis_source = Some(b.clone());
    let r = train_run(&project, 7, &root.path().join("project")).unwrap();
    assert_eq!(r.evals[0], baseline.evals[0]);
    assert_ne!(r.evals, baseline.evals);

    let mut noise = base.clone();
    noise.intervention.condition = Condition::Noise;
    noise.intervention.strength = 1.0;
    let r = train_run(&noise, 7, &root.path().join("noise")).unwrap();
    assert_ne!(r.evals, baseline.evals);
}

#[test]
fn basis_conditions_need_a_baseline() {
    let mut c = tiny();
    c.intervention.condition = Condition::Project;
    c.intervention.strength = 1.0;
    let dir = tempfile::tempdir().unwrap();
    assert!(train_run(&c, 7, dir.path()).is_err());
    c.intervention.basis_source = Some(dir.path().join("missing"));
    assert!(train_run(&c, 7, dir.path()).is_err());
}

#[test]
fn cached_runs_are_reused() {
    let c = tiny();
    let dir = tempfile::tempdir().unwrap();
    let first = ensure_run(&c, 7, dir.path()).unwrap();
    let again = ensure_run(&c, 7, dir.path()).unwrap();
    assert_eq!(first, again);
}

#[test]
fn single_rate_sweep_reports_no_fit() {
    let c = tiny();
    let root = tempfile::tempdir().unwrap();
    let res = harness::sweep(&c, &[3e-3], &[7, 8], root.path(), 2);
    assert_eq!(res.runs.len(), 2);
    assert!(res.runs.iter().all(|r| r.2.is_ok()));
    assert!(res.report.fit.is_none());
    assert!(res.report.mean_fit.is_none());
    assert!(res.report.flags.iter().any(|f| f.starts_with("fit:")));
    harness::write_report(&res.report, root.path()).unwrap();
    assert!(root.path().join("sweep_summary.csv").exists());
}

#[test]
fn analysis_reads_a_finished_run() {
    let c = tiny();
    let dir = tempfile::tempdir().unwrap();
    train_run(&c, 7, dir.path()).unwrap();
    assert_eq!(SnapshotArchive::open(dir.path().join(SNAPSHOT_DIR)).unwrap().steps().len(), 7);
    let a = analyze_run(dir.path(), &AnalysisOptions::default()).unwrap();
    assert!(!a.pc1.is_empty());
    assert!(a.null.iter().any(|r| r.result.z.is_finite()));
    assert!(a.integrability.cells.iter().any(|c| c.n > 0));
    write_analysis(&a, dir.path()).unwrap();
    for f in ["pc1.csv", "null.csv", "spectral.csv", "phases.json", "integrability.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn too_short_run_is_an_analysis_precondition_failure() {
    let mut c = tiny();
    c.max_steps = 15;
    let dir = tempfile::tempdir().unwrap();
    train_run(&c, 7, dir.path()).unwrap();
    assert!(matches!(
        analyze_run(dir.path(), &AnalysisOptions::default()),
        Err(harness::analysis::AnalysisError::Precondition(_))
    ));
}

#[test]
fn config_document_round_trips() {
    let c = tiny();
    let back = ExperimentConfig::parse(&c.to_text()).unwrap();
    assert_eq!(back.to_pairs(), c.to_pairs());
    assert_eq!(back.run_hash(7), c.run_hash(7));
    assert_ne!(c.run_hash(7), c.run_hash(8));
}

proptest! {
    #[test]
    fn set_values_survive_the_document(lr in 1e-6f64..1e-1, wd in 0.0f64..2.0, steps in 1u64..100_000, k in 1usize..9) {
        let mut c = tiny();
        c.set("lr", &lr.to_string()).unwrap();
        c.set("weight_decay", &wd.to_string()).unwrap();
        c.set("max_steps", &steps.to_string()).unwrap();
        c.set("probe_k", &k.to_string()).unwrap();
        let back = ExperimentConfig::parse(&c.to_text()).unwrap();
        prop_assert_eq!(back.lr, lr);
        prop_assert_eq!(back.weight_decay, wd);
        prop_assert_eq!(back.max_steps(), steps);
        prop_assert_eq!(back.probe.k_meas, k);
    }
}
