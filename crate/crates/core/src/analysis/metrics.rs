// SPDX-License-Identifier: Apache-2.0

//! Evaluation of swaps: eval-embedder identity similarity, coefficient-space
//! expression and pose errors, and nearest-neighbour identity retrieval.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::latent::{LatentCode, Space};
use crate::mixer::MixerStack;
use crate::rng::{normal_vec, stream};
use crate::world::{CoeffVector, Embedder, FrozenWorld};

/// Default number of held-out pairs for evaluation.
pub const EVAL_PAIRS: usize = 50;
/// Default gallery size for retrieval.
pub const RETRIEVAL_GALLERY: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    /// Eval-embedder cosine of swap and source.
    pub id_similarity: f64,
    /// Mean squared expression-coefficient error of swap against target.
    pub expression_mse: f64,
    /// Mean squared pose-coefficient error of swap against target.
    pub pose_mse: f64,
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb).max(1e-12)).clamp(-1.0, 1.0)
}

/// Precomputed evaluation features of one image.
#[derive(Debug, Clone)]
pub struct Features {
    pub embedding: Vec<f64>,
    pub coeffs: CoeffVector,
}

impl Features {
    pub fn of(world: &FrozenWorld, img: &Image) -> Result<Self> {
        Ok(Self {
            embedding: world.embed_identity(img, Embedder::Eval)?,
            coeffs: world.extract_coeffs(img)?,
        })
    }
}

fn metrics_from(s: &Features, t: &Features, x: &Features) -> EvalMetrics {
    EvalMetrics {
        id_similarity: cosine(&x.embedding, &s.embedding),
        expression_mse: mse(&x.coeffs.expr, &t.coeffs.expr),
        pose_mse: mse(&x.coeffs.pose, &t.coeffs.pose),
    }
}

pub fn eval_metrics(world: &FrozenWorld, img_s: &Image, img_t: &Image, img_swap: &Image) -> Result<EvalMetrics> {
    let s = Features::of(world, img_s)?;
    let t = Features::of(world, img_t)?;
    let x = Features::of(world, img_swap)?;
    Ok(metrics_from(&s, &t, &x))
}

/// Lifts a code in the stack's space to the generator input.
pub fn to_wplus(world: &FrozenWorld, code: &LatentCode) -> Result<LatentCode> {
    match code.space() {
        Space::Z => world.broadcast_w(&world.map_z_to_w(code)?),
        Space::W => world.broadcast_w(code),
        Space::WPlus => Ok(code.clone()),
    }
}

/// Swapped code (in the stack's space) and its image.
pub fn swap_latents(world: &FrozenWorld, stack: &MixerStack, s: &LatentCode, t: &LatentCode) -> Result<(LatentCode, Image)> {
    let swap = stack.mix(s, t)?;
    let img = world.generate(&to_wplus(world, &swap)?)?;
    Ok((swap, img))
}

/// Held-out `(source, target)` pairs in `space`, distinct within each pair.
pub fn eval_pairs(world: &FrozenWorld, space: Space, n: usize, seed: u64) -> Result<Vec<(LatentCode, LatentCode)>> {
    let d = world.config().latent_dim;
    let mut rng = stream(seed, "eval/pairs");
    let mut lift = |world: &FrozenWorld| -> Result<LatentCode> {
        let z = LatentCode::z(normal_vec(&mut rng, d))?;
        match space {
            Space::Z => Ok(z),
            Space::W => world.map_z_to_w(&z),
            Space::WPlus => world.broadcast_w(&world.map_z_to_w(&z)?),
        }
    };
    (0..n).map(|_| Ok((lift(world)?, lift(world)?))).collect()
}

/// Means over pairs of the metrics in both roles: against the intended
/// (source identity, target attributes) and against the opposite image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub pairs: usize,
    pub metrics: EvalMetrics,
    /// Eval-embedder cosine of swap and target.
    pub id_similarity_target: f64,
    /// Expression error of swap against source.
    pub expression_mse_source: f64,
    pub pose_mse_source: f64,
}

impl EvalSummary {
    pub const CSV_HEADER: &'static str =
        "id_similarity,id_similarity_target,expression_mse,expression_mse_source,pose_mse,pose_mse_source";

    pub fn csv_fields(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.metrics.id_similarity,
            self.id_similarity_target,
            self.metrics.expression_mse,
            self.expression_mse_source,
            self.metrics.pose_mse,
            self.pose_mse_source
        )
    }
}

/// Evaluates already generated `(source, target, swap)` triples.
pub fn summarize(world: &FrozenWorld, triples: &[(Image, Image, Image)]) -> Result<EvalSummary> {
    if triples.is_empty() {
        return Err(Error::Contract("no pairs to evaluate".into()));
    }
    let n = triples.len() as f64;
    let mut acc = [0.0f64; 6];
    for (s, t, x) in triples {
        let (fs, ft, fx) = (Features::of(world, s)?, Features::of(world, t)?, Features::of(world, x)?);
        let fwd = metrics_from(&fs, &ft, &fx);
        let rev = metrics_from(&ft, &fs, &fx);
        for (a, v) in acc.iter_mut().zip([
            fwd.id_similarity,
            rev.id_similarity,
            fwd.expression_mse,
            rev.expression_mse,
            fwd.pose_mse,
            rev.pose_mse,
        ]) {
            *a += v / n;
        }
    }
    Ok(EvalSummary {
        pairs: triples.len(),
        metrics: EvalMetrics {
            id_similarity: acc[0],
            expression_mse: acc[2],
            pose_mse: acc[4],
        },
        id_similarity_target: acc[1],
        expression_mse_source: acc[3],
        pose_mse_source: acc[5],
    })
}

/// Generates swaps for `pairs` and summarizes them.
pub fn evaluate_stack(world: &FrozenWorld, stack: &MixerStack, pairs: &[(LatentCode, LatentCode)]) -> Result<EvalSummary> {
    let mut triples = Vec::with_capacity(pairs.len());
    for (s, t) in pairs {
        let img_s = world.generate(&to_wplus(world, s)?)?;
        let img_t = world.generate(&to_wplus(world, t)?)?;
        let (_, img_x) = swap_latents(world, stack, s, t)?;
        triples.push((img_s, img_t, img_x));
    }
    summarize(world, &triples)
}

/// Identity retrieval over a gallery of `n` generated identities: identity
/// `i` is swapped onto identity `i + 1 (mod n)`, and the swap counts as
/// correct when its nearest gallery embedding (eval embedder, cosine) is
/// `i`.
pub fn retrieval_accuracy(world: &FrozenWorld, stack: &MixerStack, n: usize, seed: u64) -> Result<f64> {
    if n < 2 {
        return Err(Error::Config("retrieval needs at least two identities".into()));
    }
    let space = stack.config().space;
    let gallery: Vec<LatentCode> = eval_pairs(world, space, n.div_ceil(2), seed ^ 0x5eed)?
        .into_iter()
        .flat_map(|(a, b)| [a, b])
        .take(n)
        .collect();
    let emb: Vec<Vec<f64>> = gallery
        .iter()
        .map(|c| world.embed_identity(&world.generate(&to_wplus(world, c)?)?, Embedder::Eval))
        .collect::<Result<_>>()?;
    let mut hits = 0usize;
    for i in 0..n {
        let (_, img) = swap_latents(world, stack, &gallery[i], &gallery[(i + 1) % n])?;
        let e = world.embed_identity(&img, Embedder::Eval)?;
        let best = (0..n)
            .map(|j| (j, cosine(&e, &emb[j])))
            .fold((usize::MAX, f64::NEG_INFINITY), |b, c| if c.1 > b.1 { c } else { b });
        hits += usize::from(best.0 == i);
    }
    Ok(hits as f64 / n as f64)
}
