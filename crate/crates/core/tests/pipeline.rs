//! End-to-end properties of the simulate -> localize -> evaluate loop.

use smlmforge_core::camera::{Camera, CameraEmccd};
use smlmforge_core::localizer::{localize_stack, DetectConfig, FitConfig};
use smlmforge_core::metrics::{
    jaccard, match_localizations, rmse, MatchMode, RmseMode,
};
use smlmforge_core::postprocess::{filter_by_sigma, group_localizations};
use smlmforge_core::psf::{Parametric, PsfAsParams, PsfModel};
use smlmforge_core::simulator::{simulate_stack, PriorConfig};
use smlmforge_core::table::truth_to_locs;

fn as_psf() -> PsfModel {
    PsfModel::parametric(Parametric::As(PsfAsParams {
        a: 3.0,
        b_x: 250.0,
        b_y: -250.0,
        c: 4.0e4,
    }))
}

fn emccd() -> Camera {
    Camera::Emccd(CameraEmccd {
        baseline: 100.0,
        em_gain: 300.0,
        e_per_count: 45.0,
        background: 25.0,
    })
}

fn sparse_prior() -> PriorConfig {
    // ~0.35 active emitters per frame on 48x48 px: well under one emitter
    // per 20x20 pixel area, the regime a single-emitter fitter is built for.
    PriorConfig {
        p_on: 1.5e-4,
        p_off: 1.0,
        z_sigma: 150.0,
        max_brightness: 5000.0,
        width: 48,
        height: 48,
        n_frames: 250,
        constant_brightness: true,
        min_brightness_frac: 1.0,
        ..Default::default()
    }
}

#[test]
fn sparse_pipeline_reaches_high_jaccard_and_low_rmse() {
    let prior = sparse_prior();
    let psf = as_psf();
    let cam = emccd();
    let (stack, truth) = simulate_stack(&prior, &psf, &cam, 2024).unwrap();
    let truth_locs = truth_to_locs(&truth);
    let table = localize_stack(
        &stack,
        &psf,
        &cam,
        &DetectConfig::default(),
        &FitConfig::default(),
    );
    assert!(!table.is_empty());
    // Output rows carry no NaNs or infinities anywhere.
    for r in &table {
        for v in [r.x, r.y, r.z, r.photons, r.prob, r.sig_x, r.sig_y, r.sig_z] {
            assert!(v.is_finite(), "non-finite value in output row {r:?}");
        }
    }
    let m = match_localizations(&table, &truth_locs, 250.0, MatchMode::Lateral);
    let j = jaccard(&m);
    assert!(j > 90.0, "jaccard {j} (tp {}, fp {}, fn {})", m.tp, m.fp, m.n_fn);
    // Constant brightness here is the max, 5000 photons.
    let err = rmse(&m, &table, &truth_locs, RmseMode::Lateral).unwrap();
    assert!(err < 15.0, "lateral rmse {err}");

    // Dropping the worst 10% by uncertainty must not hurt the RMSE.
    let filtered = filter_by_sigma(&table, 0.10);
    let mf = match_localizations(&filtered, &truth_locs, 250.0, MatchMode::Lateral);
    let err_f = rmse(&mf, &filtered, &truth_locs, RmseMode::Lateral).unwrap();
    assert!(
        err_f <= err + 1e-9,
        "rmse after filtering {err_f} vs before {err}"
    );
}

#[test]
fn grouping_blinking_tracks_does_not_hurt_detection() {
    // Mean lifetime 1/p_off ~ 3 frames.
    let prior = PriorConfig {
        p_on: 1e-4,
        p_off: 0.33,
        z_sigma: 120.0,
        max_brightness: 6000.0,
        width: 48,
        height: 48,
        n_frames: 120,
        constant_brightness: true,
        min_brightness_frac: 0.8,
        ..Default::default()
    };
    let psf = as_psf();
    let cam = emccd();
    let (stack, truth) = simulate_stack(&prior, &psf, &cam, 31).unwrap();
    let truth_locs = truth_to_locs(&truth);
    // Stricter detection: any single-frame noise blip would dominate the
    // track-level score (one spurious track weighs as much as a real one,
    // however many frames the real one spans).
    let det = DetectConfig {
        k_sigma: 5.0,
        ..Default::default()
    };
    let table = localize_stack(&stack, &psf, &cam, &det, &FitConfig::default());
    let match_radius = 250.0;
    // Group at the scale of the localization precision, not the match radius.
    let group_radius = 100.0;
    let before = jaccard(&match_localizations(
        &table,
        &truth_locs,
        match_radius,
        MatchMode::Lateral,
    ));
    // Grouped tables are compared emitter-to-emitter: one row per blink
    // chain, frame-agnostic (a chain is identified by where it is, not by
    // the exact frame its first detection landed in).
    let strip_frames = |t: &[smlmforge_core::table::LocRecord]| -> Vec<_> {
        t.iter()
            .map(|r| {
                let mut r = *r;
                r.frame = 0;
                r
            })
            .collect::<Vec<_>>()
    };
    let grouped_pred = strip_frames(&group_localizations(&table, group_radius));
    let grouped_truth = strip_frames(&group_localizations(&truth_locs, group_radius));
    let after = jaccard(&match_localizations(
        &grouped_pred,
        &grouped_truth,
        match_radius,
        MatchMode::Lateral,
    ));
    assert!(
        after >= before - 1e-9,
        "jaccard dropped from {before} to {after} after grouping"
    );
    // Averaging across a track must tighten the positions.
    let m_grouped = match_localizations(&grouped_pred, &grouped_truth, match_radius, MatchMode::Lateral);
    let m_raw = match_localizations(&table, &truth_locs, match_radius, MatchMode::Lateral);
    let rmse_grouped = rmse(&m_grouped, &grouped_pred, &grouped_truth, RmseMode::Lateral).unwrap();
    let rmse_raw = rmse(&m_raw, &table, &truth_locs, RmseMode::Lateral).unwrap();
    assert!(
        rmse_grouped <= rmse_raw,
        "grouping should not blur positions: {rmse_grouped} vs {rmse_raw}"
    );
}

#[test]
fn quadrupled_photons_halve_the_localization_spread() {
    let psf = as_psf();
    let cam = emccd();
    let (x, y) = (2375.0, 2340.0);
    let spread = |photons: f64, seed0: u64| -> f64 {
        let mut errors = Vec::new();
        for seed in 0..150 {
            let prior = PriorConfig {
                p_on: 0.0,
                width: 48,
                height: 48,
                n_frames: 1,
                ..Default::default()
            };
            let (mut stack, _) = simulate_stack(&prior, &psf, &cam, seed0 + seed).unwrap();
            // Inject one emitter and re-sample the frame deterministically.
            let grid = prior.grid();
            let track = smlmforge_core::simulator::EmitterTrack {
                id: 0,
                t_start: 0,
                t_end: 0,
                positions: vec![[x, y, 0.0]],
                photons: vec![photons],
            };
            let mut mean =
                smlmforge_core::simulator::mean_frame(&[track], 0, &psf, 25.0, &grid);
            for v in &mut mean.data {
                *v += 100.0;
            }
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed0 + seed);
            rng.set_stream(1);
            stack.data = cam.sample_frame(&mean, &mut rng).unwrap();
            let table = localize_stack(
                &stack,
                &psf,
                &cam,
                &DetectConfig::default(),
                &FitConfig::default(),
            );
            if table.len() == 1 {
                errors.push(table[0].x - x);
            }
        }
        assert!(errors.len() > 130, "only {} fits converged", errors.len());
        let mean_e = errors.iter().sum::<f64>() / errors.len() as f64;
        (errors.iter().map(|e| (e - mean_e).powi(2)).sum::<f64>() / (errors.len() - 1) as f64)
            .sqrt()
    };
    let s1 = spread(2000.0, 10_000);
    let s4 = spread(8000.0, 20_000);
    let ratio = s1 / s4;
    assert!(
        (ratio - 2.0).abs() / 2.0 < 0.15,
        "spread ratio {ratio} (s1 {s1}, s4 {s4})"
    );
}
