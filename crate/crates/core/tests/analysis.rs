// SPDX-License-Identifier: Apache-2.0

use std::sync::OnceLock;

use latentswap_core::analysis::*;
use latentswap_core::losses::LossBreakdown;
use latentswap_core::rng::stream;
use latentswap_core::world::Embedder;
use latentswap_core::{FrozenWorld, LatentCode, MixerConfig, MixerStack, RunLog, Space, TrainConfig, WorldConfig};

fn world() -> &'static FrozenWorld {
    static W: OnceLock<FrozenWorld> = OnceLock::new();
    W.get_or_init(|| FrozenWorld::seed(42, WorldConfig::default()).unwrap())
}

fn pca() -> &'static Pca {
    static P: OnceLock<Pca> = OnceLock::new();
    P.get_or_init(|| pca_directions(world(), 500, 8, 7).unwrap())
}

fn tiny() -> ExperimentConfig {
    ExperimentConfig {
        train: TrainConfig {
            batch_size: 2,
            steps: 3,
            log_window: 2,
            early_stop: false,
            wall_clock: false,
            ..Default::default()
        },
        eval_pairs: 3,
        ..Default::default()
    }
}

fn wplus(n: usize, tag: &str) -> Vec<LatentCode> {
    let mut r = stream(5, tag);
    (0..n)
        .map(|_| world().broadcast_w(&world().sample_w(&mut r).unwrap()).unwrap())
        .collect()
}

#[test]
fn synthetic_power_laws_are_recovered() {
    for (nu, c) in [(1.0, 3e-4), (2.0, 1e-7), (0.5, 2.0)] {
        let s: Vec<(usize, f64)> = (1..=2000).map(|k| (k, c * (k as f64).powf(nu))).collect();
        let f = diffusion_fit(&s, default_window(2000)).unwrap();
        assert!((f.exponent - nu).abs() <= 0.01 * nu, "{nu}: {f:?}");
        assert!((f.intercept - c.ln()).abs() < 1e-8);
        assert!(f.residual < 1e-10);
        assert_eq!(f.points, 801);
    }
}

#[test]
fn diffusion_report_fits_windowed_log() {
    let mut log = RunLog::new(1);
    for k in 1..=100 {
        let lp = 1e-3 * k as f64;
        log.steps.push(LossBreakdown {
            id_loss: 1.0,
            lp_loss: lp,
            shape_loss: 0.0,
            total: 1.0,
        });
    }
    let r = diffusion_report(&log, None).unwrap();
    assert_eq!(r.series.len(), 100);
    assert!((r.intermediate.exponent - 1.0).abs() < 1e-9);
    assert!((r.late.exponent - 1.0).abs() < 1e-9);
    assert_eq!((r.late.step_lo, r.late.step_hi), (50, 100));
    assert_eq!(r.to_csv().lines().count(), 3);
    assert_eq!(r.to_dat().lines().count(), 101);
    assert!(log_log_dat(&r.series).starts_with("# "));
}

#[test]
fn eval_metrics_degenerate_cases_and_recomputation() {
    let w = world();
    let codes = wplus(3, "metrics");
    let imgs: Vec<_> = codes.iter().map(|c| w.generate(c).unwrap()).collect();
    let (s, t, x) = (&imgs[0], &imgs[1], &imgs[2]);

    let as_target = eval_metrics(w, s, t, t).unwrap();
    assert_eq!(as_target.expression_mse, 0.0);
    assert_eq!(as_target.pose_mse, 0.0);
    let as_source = eval_metrics(w, s, t, s).unwrap();
    assert!((as_source.id_similarity - 1.0).abs() < 1e-12);

    let m = eval_metrics(w, s, t, x).unwrap();
    let es = w.embed_identity(s, Embedder::Eval).unwrap();
    let ex = w.embed_identity(x, Embedder::Eval).unwrap();
    let mut dot = 0.0;
    let (mut ns, mut nx) = (0.0, 0.0);
    for i in 0..es.len() {
        dot += es[i] * ex[i];
        ns += es[i] * es[i];
        nx += ex[i] * ex[i];
    }
    assert!((m.id_similarity - dot / (ns * nx).sqrt()).abs() < 1e-12);
    let (ct, cx) = (w.extract_coeffs(t).unwrap(), w.extract_coeffs(x).unwrap());
    let mut e = 0.0;
    for i in 0..ct.expr.len() {
        e += (ct.expr[i] - cx.expr[i]).powi(2);
    }
    assert!((m.expression_mse - e / ct.expr.len() as f64).abs() < 1e-12);
    let mut p = 0.0;
    for i in 0..ct.pose.len() {
        p += (ct.pose[i] - cx.pose[i]).powi(2);
    }
    assert!((m.pose_mse - p / ct.pose.len() as f64).abs() < 1e-12);
    assert!((-1.0..=1.0).contains(&m.id_similarity) && m.expression_mse >= 0.0 && m.pose_mse >= 0.0);
}

#[test]
fn identity_mixer_returns_the_target_everywhere() {
    let w = world();
    let stack = MixerStack::init(MixerConfig::new(Space::WPlus, 64, 18), 0).unwrap();
    let pairs = eval_pairs(w, Space::WPlus, 4, 9).unwrap();
    let summary = evaluate_stack(w, &stack, &pairs).unwrap();
    assert!((summary.id_similarity_target - 1.0).abs() < 1e-12);
    assert_eq!(summary.metrics.expression_mse, 0.0);
    assert_eq!(summary.pairs, 4);

    // Every group swap of an identity mix is the target itself.
    let rows = layerwise_study(w, &stack, &pairs).unwrap();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows.last().unwrap().layers, (0..18).collect::<Vec<_>>());
    for r in &rows {
        assert_eq!(r.eval, summary, "{:?}", r.group);
    }
    assert_eq!(layerwise_csv(&rows).lines().count(), 6);

    // The swap is identity i+1, so its nearest neighbour is never i.
    assert_eq!(retrieval_accuracy(w, &stack, 10, 3).unwrap(), 0.0);
    assert!(retrieval_accuracy(w, &stack, 1, 3).is_err());

    let z = MixerStack::init(MixerConfig::new(Space::Z, 64, 18), 0).unwrap();
    assert!(layerwise_study(w, &z, &eval_pairs(w, Space::Z, 1, 9).unwrap()).is_err());
}

#[test]
fn pca_directions_are_orthonormal_ordered_and_deterministic() {
    let p = pca();
    let d = &p.directions;
    for i in 0..d.len() {
        for j in 0..d.len() {
            let dot: f64 = d[i].iter().zip(&d[j]).map(|(a, b)| a * b).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((dot - want).abs() < 1e-6, "({i},{j}) {dot}");
        }
    }
    assert!(p.variances.windows(2).all(|v| v[0] >= v[1]));
    assert!(p.variances[0] > 0.0);
    assert_eq!(&pca_directions(world(), 500, 8, 7).unwrap(), p);
    assert_ne!(&pca_directions(world(), 500, 8, 8).unwrap(), p);
    assert!(pca_directions(world(), 4, 8, 7).is_err());
    assert!(pca_directions(world(), 100, 0, 7).is_err());
}

#[test]
fn pca_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pca.bin");
    pca().save(&path).unwrap();
    // Stored as f32: values survive to single precision and a reload is stable.
    let back = Pca::load(&path).unwrap();
    let flat = |p: &Pca| [p.mean.clone(), p.directions.concat(), p.variances.clone()].concat();
    for (a, b) in flat(&back).iter().zip(flat(pca())) {
        assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-3), "{a} vs {b}");
    }
    assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());
    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 9] ^= 1;
    assert!(Pca::from_bytes(&bytes).is_err());
    assert!(Pca::from_bytes(b"nonsense").is_err());
}

#[test]
fn edits_respect_magnitude_and_groups() {
    let code = &wplus(1, "edit")[0];
    let dir = &pca().directions[0];
    assert_eq!(&edit(code, dir, 0.0, None).unwrap(), code);
    let back = edit(&edit(code, dir, 3.7, None).unwrap(), dir, -3.7, None).unwrap();
    for (a, b) in back.data().data().iter().zip(code.data().data()) {
        assert!((a - b).abs() < 1e-6);
    }
    for g in LayerGroup::ALL {
        let e = edit(code, dir, 0.5, Some(g)).unwrap();
        let inside = g.layers(18);
        for l in 0..18 {
            let same = e.layer(l).unwrap() == code.layer(l).unwrap();
            assert_eq!(same, !inside.contains(&l), "{g} layer {l}");
        }
    }
    let w = world().sample_w(&mut stream(1, "w")).unwrap();
    assert!(edit(&w, dir, 1.0, None).is_err());
    assert!(edit(code, &dir[..10], 1.0, None).is_err());
}

#[test]
fn edit_effects_are_reported() {
    let effects = edit_effects(world(), pca(), 2.0, 3, 4).unwrap();
    assert_eq!(effects.len(), 8);
    for e in &effects {
        assert!(e.attribute_change > 0.0 && e.identity_change > 0.0 && e.ratio().is_finite());
    }
    assert_eq!(edit_effects_csv(&effects).lines().count(), 9);
}

#[test]
fn sweep_table_and_parallel_cells_are_deterministic() {
    let w = world();
    assert!(lambda_sweep(w, &tiny(), &[]).is_err());
    assert!(lambda_sweep(w, &tiny(), &[-1.0]).is_err());
    let serial = lambda_sweep(w, &tiny(), &[0.0, 1.0]).unwrap();
    let parallel = lambda_sweep(w, &ExperimentConfig { jobs: 2, ..tiny() }, &[0.0, 1.0]).unwrap();
    assert_eq!(serial.to_csv(), parallel.to_csv());
    assert_eq!(serial.rows.len(), 2);
    assert_eq!(serial.rows[0].cell.ratio(), 0.0);
    assert!(serial.threshold > 0.0);
    let csv = serial.to_csv();
    assert!(csv.starts_with("lambda,space,steps,id_loss,lp_loss"));
    assert_eq!(csv.lines().count(), 3);
    for (a, b) in serial.rows.iter().zip(&parallel.rows) {
        assert_eq!(a.cell.stack, b.cell.stack);
    }
}

#[test]
fn space_ablation_covers_three_spaces() {
    let cells = space_ablation(world(), &tiny()).unwrap();
    let spaces: Vec<_> = cells.iter().map(|c| (c.space, c.lambda)).collect();
    assert_eq!(spaces, vec![(Space::Z, 10.0), (Space::W, 10.0), (Space::WPlus, 100.0)]);
    let z = &cells[0];
    let pairs = eval_pairs(world(), Space::Z, 2, 0).unwrap();
    let (code, img) = swap_latents(world(), &z.stack, &pairs[0].0, &pairs[0].1).unwrap();
    assert_eq!(code.space(), Space::Z);
    assert_eq!(code.data().shape(), &[64]);
    assert_eq!(img.resolution(), 32);
    assert_eq!(spaces_csv(&cells).lines().count(), 4);
}
