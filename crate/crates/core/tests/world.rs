// SPDX-License-Identifier: Apache-2.0

use std::sync::OnceLock;

use latentswap_core::diff::{grad_check, GradCheckConfig, Stencil};
use latentswap_core::rng::{normal_vec, stream};
use latentswap_core::world::{CoeffVector, Embedder};
use latentswap_core::{Array, Error, FrozenWorld, Image, LatentCode, Space, WorldConfig};

fn world() -> &'static FrozenWorld {
    static W: OnceLock<FrozenWorld> = OnceLock::new();
    W.get_or_init(|| FrozenWorld::seed(42, WorldConfig::default()).unwrap())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn random_images(n: usize, tag: &str) -> Vec<Image> {
    let w = world();
    let mut r = stream(5, tag);
    (0..n)
        .map(|_| {
            let code = w.sample_w(&mut r).unwrap().broadcast(18).unwrap();
            w.generate(&code).unwrap()
        })
        .collect()
}

/// Mean over 8x8 blocks of a `(3, 32, 32)` array.
fn pool4(a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; 48];
    for c in 0..3 {
        for y in 0..32 {
            for x in 0..32 {
                out[c * 16 + (y / 8) * 4 + x / 8] += a[c * 1024 + y * 32 + x] / 64.0;
            }
        }
    }
    out
}

#[test]
fn seeding_is_bitwise_reproducible() {
    let again = FrozenWorld::seed(42, WorldConfig::default()).unwrap();
    assert_eq!(again.to_bytes().unwrap(), world().to_bytes().unwrap());
    assert_eq!(again.checksum().unwrap(), world().checksum().unwrap());
    let other = FrozenWorld::seed(43, WorldConfig::default()).unwrap();
    assert_ne!(other.checksum().unwrap(), world().checksum().unwrap());
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        WorldConfig { layers: 17, ..Default::default() },
        WorldConfig { resolution: 48, ..Default::default() },
        WorldConfig { latent_dim: 0, ..Default::default() },
        WorldConfig { layers: 4, ..Default::default() },
    ] {
        assert!(matches!(FrozenWorld::seed(1, cfg), Err(Error::Config(_))), "{cfg:?}");
    }
}

#[test]
fn shapes_at_desk_and_full_width() {
    let w = world();
    let mut r = stream(1, "shapes");
    let code = w.sample_w(&mut r).unwrap().broadcast(18).unwrap();
    assert_eq!(w.generate(&code).unwrap().data().shape(), &[3, 32, 32]);

    let wide = FrozenWorld::seed(42, WorldConfig::full_width()).unwrap();
    let code = wide.broadcast_w(&wide.sample_w(&mut r).unwrap()).unwrap();
    assert_eq!(code.space(), Space::WPlus);
    assert_eq!(code.data().shape(), &[18, 512]);
}

#[test]
fn mapping_is_deterministic_and_injective_on_samples() {
    let w = world();
    let zero = LatentCode::z(vec![0.0; 64]).unwrap();
    let a = w.map_z_to_w(&zero).unwrap();
    assert_eq!(a, w.map_z_to_w(&zero).unwrap());
    assert_eq!(a.space(), Space::W);

    let mut r = stream(2, "distinct");
    let ws: Vec<Vec<f64>> = (0..100).map(|_| w.sample_w(&mut r).unwrap().data().data().to_vec()).collect();
    for i in 0..ws.len() {
        for j in i + 1..ws.len() {
            assert_ne!(ws[i], ws[j], "{i} {j}");
        }
    }
    assert!(matches!(w.map_z_to_w(&a), Err(Error::Space { .. })));
}

#[test]
fn mapping_is_locally_lipschitz() {
    let w = world();
    let mut r = stream(3, "lipschitz");
    let mut ratios = Vec::new();
    for _ in 0..5 {
        let z = normal_vec(&mut r, 64);
        let dir = normal_vec(&mut r, 64);
        let base = w.map_z_to_w(&LatentCode::z(z.clone()).unwrap()).unwrap();
        for h in [1e-2, 1e-3, 1e-4] {
            let zp: Vec<f64> = z.iter().zip(&dir).map(|(a, d)| a + h * d).collect();
            let wp = w.map_z_to_w(&LatentCode::z(zp).unwrap()).unwrap();
            let dw: Vec<f64> = wp.data().data().iter().zip(base.data().data()).map(|(a, b)| a - b).collect();
            ratios.push(norm(&dw) / (h * norm(&dir)));
        }
    }
    let max = ratios.iter().cloned().fold(0.0, f64::max);
    assert!(max.is_finite() && max < 10.0, "{ratios:?}");
}

#[test]
fn broadcast_repeats_w() {
    let w = world();
    let v = w.sample_w(&mut stream(4, "b")).unwrap();
    let plus = w.broadcast_w(&v).unwrap();
    for i in 0..18 {
        assert_eq!(plus.layer(i).unwrap(), v.data().data());
    }
    assert_eq!(plus.layer(7).unwrap(), v.data().data());
    assert!(w.generate(&v).is_err());
}

#[test]
fn fine_layers_carry_less_low_frequency_energy_than_coarse() {
    let w = world();
    let mut r = stream(6, "groups");
    let (mut coarse, mut fine) = (0.0, 0.0);
    for _ in 0..20 {
        let base = w.sample_w(&mut r).unwrap().broadcast(18).unwrap();
        let other = w.sample_w(&mut r).unwrap();
        let img0 = w.generate(&base).unwrap();
        let energy = |layers: std::ops::Range<usize>| {
            let mut v = base.data().data().to_vec();
            for l in layers {
                v[l * 64..(l + 1) * 64].copy_from_slice(other.data().data());
            }
            let code = LatentCode::new(Space::WPlus, Array::new([18, 64], v).unwrap()).unwrap();
            let img = w.generate(&code).unwrap();
            let d: Vec<f64> = img.data().data().iter().zip(img0.data().data()).map(|(a, b)| a - b).collect();
            pool4(&d).iter().map(|x| x * x).sum::<f64>()
        };
        coarse += energy(0..4);
        fine += energy(12..18);
    }
    assert!(fine < coarse, "fine2 {fine} coarse {coarse}");
}

#[test]
fn generator_gradient_matches_finite_differences() {
    let w = world();
    let code = w.sample_w(&mut stream(8, "gc")).unwrap().broadcast(18).unwrap();
    let report = grad_check(
        |t, c| {
            let img = w.generate_on(t, c)?;
            t.sum(img)
        },
        code.data(),
        // W is in small units, and at steps that small the two-point formula
        // is dominated by round-off in the image sum.
        GradCheckConfig {
            step: 2e-5,
            stencil: Stencil::Central4,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn world_functions_are_smooth_under_step_halving() {
    let w = world();
    let mut r = stream(9, "smooth");
    let code = w.sample_w(&mut r).unwrap().broadcast(18).unwrap();
    let dir = normal_vec(&mut r, 18 * 64);
    let e_dir = normal_vec(&mut r, 512);
    let f = |h: f64| {
        let v: Vec<f64> = code.data().data().iter().zip(&dir).map(|(a, d)| a + h * d).collect();
        let img = w.generate(&LatentCode::new(Space::WPlus, Array::new([18, 64], v).unwrap()).unwrap()).unwrap();
        let e = w.embed_identity(&img, Embedder::Train).unwrap();
        let c = w.extract_coeffs(&img).unwrap().to_vec();
        let q = w.decode_landmarks(&w.extract_coeffs(&img).unwrap()).unwrap();
        dot(&e, &e_dir) + c.iter().sum::<f64>() + q.data().iter().sum::<f64>()
    };
    let deriv = |h: f64| (f(h) - f(-h)) / (2.0 * h);
    let (a, b) = (deriv(2e-4), deriv(1e-4));
    assert!((a - b).abs() <= 1e-4 * a.abs().max(b.abs()), "{a} vs {b}");
}

#[test]
fn embeddings_are_unit_norm_and_embedders_differ() {
    let w = world();
    let imgs = random_images(10, "embed");
    let mut cross = 0.0;
    for img in &imgs {
        let t = w.embed_identity(img, Embedder::Train).unwrap();
        let e = w.embed_identity(img, Embedder::Eval).unwrap();
        assert_eq!(t.len(), 512);
        assert!((norm(&t) - 1.0).abs() < 1e-6);
        assert!((norm(&e) - 1.0).abs() < 1e-6);
        assert!((dot(&t, &t) - 1.0).abs() < 1e-12);
        cross += dot(&t, &e).abs() / imgs.len() as f64;
    }
    assert!(cross < 0.99, "mean |cos| {cross}");
    let bad = Image::new(Array::zeros([3, 16, 16])).unwrap();
    assert!(matches!(w.embed_identity(&bad, Embedder::Train), Err(Error::Dimension { .. })));
}

#[test]
fn coefficients_fuse_and_decode() {
    let w = world();
    let imgs = random_images(2, "coeffs");
    let cs = w.extract_coeffs(&imgs[0]).unwrap();
    let ct = w.extract_coeffs(&imgs[1]).unwrap();
    assert_eq!((cs.id.len(), cs.expr.len(), cs.pose.len()), (16, 8, 4));
    assert_eq!(CoeffVector::fuse(&cs, &cs).unwrap(), cs);
    let f = CoeffVector::fuse(&cs, &ct).unwrap();
    assert_eq!(f.id, cs.id);
    assert_eq!(f.expr, ct.expr);
    assert_eq!(f.pose, ct.pose);
    assert_eq!(w.decode_landmarks(&f).unwrap().shape(), &[68, 2]);

    let short = CoeffVector { id: vec![0.0; 3], ..cs.clone() };
    assert!(CoeffVector::fuse(&short, &ct).is_err());
    assert!(matches!(w.decode_landmarks(&short), Err(Error::Dimension { .. })));
}

#[test]
fn serialization_round_trips_bitwise() {
    let w = world();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("world.lsw");
    w.save(&path).unwrap();
    let back = FrozenWorld::load(&path).unwrap();
    assert_eq!(&back, w);
    assert_eq!(back.checksum().unwrap(), w.checksum().unwrap());

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    assert!(FrozenWorld::from_bytes(&bytes).is_err());
    assert!(FrozenWorld::from_bytes(b"LSMIX001").is_err());
}
