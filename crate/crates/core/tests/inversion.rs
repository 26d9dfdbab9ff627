// SPDX-License-Identifier: Apache-2.0

use std::sync::OnceLock;

use latentswap_core::inversion::{invert, pivotal_tune, reconstruction_mse, swap_images, InversionConfig};
use latentswap_core::rng::{normal_vec, stream};
use latentswap_core::{Array, FrozenWorld, Image, MixerConfig, MixerStack, Space, WorldConfig};

fn world() -> &'static FrozenWorld {
    static W: OnceLock<FrozenWorld> = OnceLock::new();
    W.get_or_init(|| FrozenWorld::seed(42, WorldConfig::default()).unwrap())
}

fn known(n: usize, tag: &str) -> Vec<(latentswap_core::LatentCode, Image)> {
    let w = world();
    let mut r = stream(31, tag);
    (0..n)
        .map(|_| {
            let code = w.sample_w(&mut r).unwrap();
            let img = w.generate(&w.broadcast_w(&code).unwrap()).unwrap();
            (code, img)
        })
        .collect()
}

#[test]
fn inversion_recovers_generated_images() {
    let cfg = InversionConfig::default();
    for (_, img) in known(3, "roundtrip") {
        let inv = invert(world(), &img, &cfg).unwrap();
        assert!(inv.converged(&cfg), "mse {}", inv.mse);
        assert_eq!(inv.best_history.len(), cfg.steps + 1);
        assert!(inv.best_history.windows(2).all(|p| p[1] <= p[0]));
        let again = reconstruction_mse(world(), &world().generator, &inv.w, &img).unwrap();
        assert_eq!(again, inv.mse);
    }
}

#[test]
fn inversion_is_deterministic_and_tolerates_noise() {
    let cfg = InversionConfig { steps: 20, ..Default::default() };
    let noise = Image::new(Array::new([3, 32, 32], normal_vec(&mut stream(1, "noise"), 3072)).unwrap()).unwrap();
    let a = invert(world(), &noise, &cfg).unwrap();
    let b = invert(world(), &noise, &cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.mse.is_finite() && a.mse > cfg.tolerance);
    let bad = Image::new(Array::zeros([3, 8, 8])).unwrap();
    assert!(invert(world(), &bad, &cfg).is_err());
    assert!(invert(world(), &noise, &InversionConfig { steps: 0, ..cfg }).is_err());
}

#[test]
fn pivotal_tuning_improves_a_copy_only() {
    let w = world();
    let before = w.checksum().unwrap();
    let pairs = known(2, "pivot");
    let cfg = InversionConfig { steps: 30, pivotal_steps: 25, ..Default::default() };
    let inv: Vec<_> = pairs.iter().map(|(_, img)| invert(w, img, &cfg).unwrap()).collect();
    let pivots: Vec<_> = inv.iter().zip(&pairs).map(|(i, (_, img))| (&i.w, img)).collect();

    let none = pivotal_tune(w, &pivots, &InversionConfig { pivotal_steps: 0, ..cfg }).unwrap();
    assert_eq!(none.params, w.generator);
    assert_eq!(none.mse_before, none.mse_after);

    let tuned = pivotal_tune(w, &pivots, &cfg).unwrap();
    assert!(tuned.mse_after < tuned.mse_before, "{tuned:?}");
    for (code, img) in &pivots {
        let pre = reconstruction_mse(w, &w.generator, code, img).unwrap();
        let post = reconstruction_mse(w, &tuned.params, code, img).unwrap();
        assert!(post <= pre * 1.5, "{post} vs {pre}");
    }
    assert_eq!(w.checksum().unwrap(), before);
}

#[test]
fn swap_with_identity_mixer_reconstructs_target() {
    let w = world();
    let (_, img) = known(1, "self").remove(0);
    let cfg = InversionConfig { steps: 100, pivotal_steps: 10, ..Default::default() };
    let stack = MixerStack::init(MixerConfig::new(Space::WPlus, 64, 18), 0).unwrap();
    let out = swap_images(w, &stack, &img, &img, &cfg).unwrap();
    assert_eq!(out.source.w, out.target.w);
    let err = out.image.mse(&img).unwrap();
    assert!(err <= out.target.mse + 1e-12, "{err} vs {}", out.target.mse);
    assert!(out.mix_ms < 0.01 * (out.invert_ms + out.tune_ms + out.mix_ms + out.generate_ms));

    let z_stack = MixerStack::init(MixerConfig::new(Space::Z, 64, 18), 0).unwrap();
    assert!(swap_images(w, &z_stack, &img, &img, &cfg).is_err());
}
