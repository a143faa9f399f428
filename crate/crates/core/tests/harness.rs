use balgrad_core::config::ExperimentSpec;
use balgrad_core::datagen::{apply_perturbation, generate, PerturbSpec, SynthConfig};
use balgrad_core::experiment::{prepare_data, run_mode, run_mode_into};
use balgrad_core::harness::{
    accuracy, evaluate, fmt_g9, log_to_csv, metrics_to_csv, missing_ratio_sweep, predict,
    train, EvalConditions, MetricsReport, TrainLog,
};
use balgrad_core::Error;
use proptest::prelude::*;

fn small_spec(mode: &str) -> ExperimentSpec {
    ExperimentSpec::from_toml(&format!(
        "[data]\nn = 300\nclasses = 3\nd_v = 5\nd_l = 5\nalpha = 0.8\n\
         [train]\nepochs = 4\nbatch_size = 20\nd_e = 3\nlambda = 0.1\n[balgrad]\nmode = \"{mode}\"\n"
    ))
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 2000, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn report_arithmetic_matches_recomputation(
        full in 0.0f64..=1.0, mi in 0.0f64..=1.0, mt in 0.0f64..=1.0,
        ni in 0.0f64..=1.0, nt in 0.0f64..=1.0,
    ) {
        let m = MetricsReport::from_accuracies(full, mi, mt, ni, nt);
        prop_assert_eq!(m.avg_missing, (100.0 * mi + 100.0 * mt) / 2.0);
        prop_assert_eq!(m.gap_missing, (100.0 * mi - 100.0 * mt).abs());
        prop_assert_eq!(m.avg_noisy, (100.0 * ni + 100.0 * nt) / 2.0);
        prop_assert_eq!(m.gap_noisy, (100.0 * ni - 100.0 * nt).abs());
    }
}

#[test]
fn evaluation_leaves_inputs_untouched() {
    let spec = small_spec("full");
    let data = prepare_data(&spec).unwrap();
    let run = run_mode(&spec, &data, "full").unwrap();
    let before = (run.params.clone(), data.1.clone());
    let m = evaluate(&run.params, &data.1, &EvalConditions::standard(1)).unwrap();
    assert_eq!(before, (run.params.clone(), data.1.clone()));
    let none = apply_perturbation(&data.1, &PerturbSpec::none()).unwrap();
    assert_eq!(accuracy(&run.params, &none).unwrap(), m.acc_full);
}

#[test]
fn ties_break_towards_the_lowest_class() {
    let spec = small_spec("baseline");
    let data = prepare_data(&spec).unwrap();
    let cfg = spec.train_config("baseline", 5, 5, 3);
    let zeros = balgrad_core::model::Params::zeros(&cfg.model);
    assert!(predict(&zeros, &data.1.records).unwrap().iter().all(|&c| c == 0));
}

#[test]
fn sweep_starts_at_zero_gap_and_ends_at_the_full_gap() {
    let spec = small_spec("baseline");
    let data = prepare_data(&spec).unwrap();
    let run = run_mode(&spec, &data, "baseline").unwrap();
    let rows = missing_ratio_sweep(
        &[("baseline".into(), run.params.clone())],
        &data.1,
        &[0.0, 0.5, 1.0],
        spec.eval.seed,
    )
    .unwrap();
    assert_eq!(rows[0].gap, 0.0);
    assert_eq!(rows[2].gap, run.metrics.gap_missing);
}

#[test]
fn runs_are_reproducible_and_log_every_step() {
    let spec = small_spec("full");
    let data = prepare_data(&spec).unwrap();
    let a = run_mode(&spec, &data, "full").unwrap();
    let b = run_mode(&spec, &data, "full").unwrap();
    assert_eq!(log_to_csv(&a.log), log_to_csv(&b.log));
    assert_eq!(metrics_to_csv(&a.metrics), metrics_to_csv(&b.metrics));
    assert_eq!(a.log.rows.len(), 4 * (240usize).div_ceil(20));
    assert!(a.metrics.conflict_fraction.is_some());
    let base = run_mode(&spec, &data, "baseline").unwrap();
    assert!(base.metrics.conflict_fraction.is_none());
    assert!(base.log.rows.iter().all(|r| r.cos_t_kl.is_none()));
}

#[test]
fn divergence_keeps_the_partial_log() {
    let mut spec = small_spec("full");
    spec.train.lambda = 1e300;
    let data = prepare_data(&spec).unwrap();
    let mut log = TrainLog::default();
    match run_mode_into(&spec, &data, "full", &mut log) {
        Err(Error::TrainingDiverged { iteration, .. }) => {
            assert_eq!(log.rows.len() as u64, iteration);
            assert!(iteration >= 1);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn supervised_losses_fall_during_training() {
    let ds = generate(&SynthConfig { n: 200, classes: 4, d_v: 6, d_l: 6, alpha: 0.7, sigma: 1.0, seed: 9 }).unwrap();
    let spec = small_spec("baseline");
    let cfg = spec.train_config("baseline", 6, 6, 4);
    let (_, log) = train(&ds, &cfg).unwrap();
    let (first, last) = (log.rows[0], *log.rows.last().unwrap());
    assert!(last.target < first.target && last.target_v < first.target_v && last.target_l < first.target_l);
}

#[test]
fn csv_floats_use_nine_significant_digits() {
    assert_eq!(fmt_g9(1.0 / 3.0), "0.333333333");
    assert_eq!(fmt_g9(2.0 / 3.0 * 1e-6), "6.66666667e-07");
    assert_eq!(fmt_g9(12345.6789012), "12345.6789");
}
