// SPDX-License-Identifier: Apache-2.0

//! Latent-space experiments: λ sweep, operating-space ablation, layer-group
//! swaps, diffusion fits at λ = 0, PCA edits, and the evaluation metrics
//! they report.
//!
//! Every experiment is a list of independent training cells. With
//! `jobs > 1` the cells run on a rayon pool; results are always merged in
//! grid order, and each cell trains single-threaded, so tables do not depend
//! on `jobs`.

mod diffusion;
mod groups;
mod metrics;
mod pca;

use rayon::prelude::*;

pub use diffusion::{default_window, diffusion_fit, late_window, log_log_dat, DiffusionFit};
pub use groups::{layerwise_swap, layerwise_swap_layers, LayerGroup};
pub use metrics::{
    eval_metrics, eval_pairs, evaluate_stack, retrieval_accuracy, summarize, swap_latents, to_wplus, EvalMetrics,
    EvalSummary, Features, EVAL_PAIRS, RETRIEVAL_GALLERY,
};
pub use pca::{edit, pca_directions, Pca, PCA_MAGIC};

use crate::error::{Error, Result};
use crate::latent::{LatentCode, Space};
use crate::losses::LossBreakdown;
use crate::mixer::MixerStack;
use crate::rng::stream;
use crate::trainer::{train, RunLog, TrainConfig};
use crate::world::{Embedder, FrozenWorld};

/// λ values of the default sweep.
pub const DEFAULT_LAMBDA_GRID: [f64; 7] = [0.0, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3];

/// A run is flagged divergent when its final windowed `L_lp` exceeds this
/// fraction of the `L_lp` between two independent random codes.
pub const DIVERGENCE_FRACTION: f64 = 0.1;

/// Settings shared by the experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    /// Held-out pairs for evaluation.
    pub eval_pairs: usize,
    pub eval_seed: u64,
    /// Parallel training cells.
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            eval_pairs: EVAL_PAIRS,
            eval_seed: 1,
            jobs: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.eval_pairs == 0 {
            return Err(Error::Config("eval_pairs must be positive".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Runs `f` over `cells` on up to `jobs` threads, returning results in input
/// order.
pub fn run_cells<C, T, F>(jobs: usize, cells: &[C], f: F) -> Result<Vec<T>>
where
    C: Sync,
    T: Send,
    F: Fn(&C) -> Result<T> + Sync + Send,
{
    if jobs <= 1 || cells.len() <= 1 {
        return cells.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.min(cells.len()))
        .build()
        .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;
    pool.install(|| cells.par_iter().map(f).collect::<Vec<_>>())
        .into_iter()
        .collect()
}

/// `λ·L_lp / L_id` of a breakdown.
pub fn equilibrium_ratio(lambda: f64, b: &LossBreakdown) -> f64 {
    lambda * b.lp_loss / b.id_loss
}

/// Mean `L_lp` between two independent random codes of `space`: the scale
/// of a swap that has forgotten its target.
pub fn reference_lp(world: &FrozenWorld, space: Space, n: usize, seed: u64) -> Result<f64> {
    let pairs = eval_pairs(world, space, n.max(1), seed ^ 0x1f)?;
    let mut acc = 0.0;
    for (a, b) in &pairs {
        acc += crate::losses::latent_penalty(a, b)?;
    }
    Ok(acc / pairs.len() as f64)
}

fn final_window(log: &RunLog) -> Result<LossBreakdown> {
    log.final_window().ok_or_else(|| Error::Contract("training recorded no steps".into()))
}

/// One trained cell and its evaluation.
#[derive(Debug, Clone)]
pub struct Cell {
    pub space: Space,
    pub lambda: f64,
    pub final_losses: LossBreakdown,
    pub eval: EvalSummary,
    pub stack: MixerStack,
    pub log: RunLog,
}

impl Cell {
    pub fn ratio(&self) -> f64 {
        equilibrium_ratio(self.lambda, &self.final_losses)
    }
}

fn train_cell(world: &FrozenWorld, cfg: &ExperimentConfig, space: Space, lambda: f64) -> Result<Cell> {
    let mut train_cfg = cfg.train.clone();
    train_cfg.space = space;
    train_cfg.weights.lambda = lambda;
    if cfg.jobs > 1 {
        train_cfg.jobs = 1;
    }
    let (stack, log) = train(world, &train_cfg)?;
    let pairs = eval_pairs(world, space, cfg.eval_pairs, cfg.eval_seed)?;
    let eval = evaluate_stack(world, &stack, &pairs)?;
    Ok(Cell {
        space,
        lambda,
        final_losses: final_window(&log)?,
        eval,
        stack,
        log,
    })
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub cell: Cell,
    pub divergent: bool,
}

#[derive(Debug, Clone)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Divergence threshold on the final windowed `L_lp`.
    pub threshold: f64,
}

/// Trains one stack per λ (same seed and space) and evaluates each.
pub fn lambda_sweep(world: &FrozenWorld, cfg: &ExperimentConfig, grid: &[f64]) -> Result<SweepTable> {
    cfg.validate()?;
    if grid.is_empty() {
        return Err(Error::Config("lambda grid is empty".into()));
    }
    if let Some(bad) = grid.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(Error::Config(format!("lambda must be finite and non-negative, got {bad}")));
    }
    let space = cfg.train.space;
    let threshold = DIVERGENCE_FRACTION * reference_lp(world, space, cfg.eval_pairs, cfg.eval_seed)?;
    let cells = run_cells(cfg.jobs, grid, |&l| train_cell(world, cfg, space, l))?;
    Ok(SweepTable {
        rows: cells
            .into_iter()
            .map(|cell| SweepRow {
                divergent: cell.final_losses.lp_loss > threshold,
                cell,
            })
            .collect(),
        threshold,
    })
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "lambda,space,steps,id_loss,lp_loss,shape_loss,total,ratio,divergent,{}\n",
            EvalSummary::CSV_HEADER
        );
        for r in &self.rows {
            let c = &r.cell;
            let f = &c.final_losses;
            s.push_str(&format!(
                "{:?},{},{},{},{},{},{},{},{},{}\n",
                c.lambda,
                c.space,
                c.log.len(),
                f.id_loss,
                f.lp_loss,
                f.shape_loss,
                f.total,
                c.ratio(),
                r.divergent,
                c.eval.csv_fields()
            ));
        }
        s
    }
}

/// Default λ per operating space.
pub fn default_space_lambda(space: Space) -> f64 {
    match space {
        Space::Z | Space::W => 1e1,
        Space::WPlus => 1e2,
    }
}

/// Trains one mixer per operating space at its default λ.
pub fn space_ablation(world: &FrozenWorld, cfg: &ExperimentConfig) -> Result<Vec<Cell>> {
    cfg.validate()?;
    let spaces = [Space::Z, Space::W, Space::WPlus];
    run_cells(cfg.jobs, &spaces, |&sp| train_cell(world, cfg, sp, default_space_lambda(sp)))
}

pub fn spaces_csv(cells: &[Cell]) -> String {
    let mut s = format!("space,lambda,steps,id_loss,lp_loss,shape_loss,total,{}\n", EvalSummary::CSV_HEADER);
    for c in cells {
        let f = &c.final_losses;
        s.push_str(&format!(
            "{},{:?},{},{},{},{},{},{}\n",
            c.space,
            c.lambda,
            c.log.len(),
            f.id_loss,
            f.lp_loss,
            f.shape_loss,
            f.total,
            c.eval.csv_fields()
        ));
    }
    s
}

/// Swaps restricted to one layer group (or all layers).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerwiseRow {
    /// `None` for the unrestricted swap.
    pub group: Option<LayerGroup>,
    pub layers: Vec<usize>,
    pub eval: EvalSummary,
}

/// For each pair, mixes in W+ and then keeps the swapped code only on the
/// layers of each group, evaluating the resulting images.
pub fn layerwise_study(world: &FrozenWorld, stack: &MixerStack, pairs: &[(LatentCode, LatentCode)]) -> Result<Vec<LayerwiseRow>> {
    if stack.config().space != Space::WPlus {
        return Err(Error::Space {
            expected: Space::WPlus,
            found: stack.config().space,
        });
    }
    let mut base = Vec::with_capacity(pairs.len());
    for (s, t) in pairs {
        let swap = stack.mix(s, t)?;
        base.push((world.generate(s)?, world.generate(t)?, swap));
    }
    let layers = world.config().layers;
    let mut choices: Vec<Option<LayerGroup>> = LayerGroup::ALL.iter().copied().map(Some).collect();
    choices.push(None);
    let mut rows = Vec::with_capacity(choices.len());
    for g in choices {
        let idx = g.map_or_else(|| (0..layers).collect(), |g| g.layers(layers));
        let mut triples = Vec::with_capacity(pairs.len());
        for ((_, t), (img_s, img_t, swap)) in pairs.iter().zip(&base) {
            let code = layerwise_swap_layers(t, swap, &idx)?;
            triples.push((img_s.clone(), img_t.clone(), world.generate(&code)?));
        }
        rows.push(LayerwiseRow {
            group: g,
            layers: idx,
            eval: summarize(world, &triples)?,
        });
    }
    Ok(rows)
}

pub fn layerwise_csv(rows: &[LayerwiseRow]) -> String {
    let mut s = format!("group,layers,{}\n", EvalSummary::CSV_HEADER);
    for r in rows {
        let layers: Vec<String> = r.layers.iter().map(usize::to_string).collect();
        s.push_str(&format!(
            "{},{},{}\n",
            r.group.map_or("all", LayerGroup::name),
            layers.join(" "),
            r.eval.csv_fields()
        ));
    }
    s
}

/// Diffusion analysis of a λ = 0 run.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionReport {
    /// `(step, windowed L_lp)`.
    pub series: Vec<(usize, f64)>,
    pub intermediate: DiffusionFit,
    pub late: DiffusionFit,
}

/// Windowed `L_lp` from `log`, fitted over the given window (default: the
/// intermediate window) and over the late window.
pub fn diffusion_report(log: &RunLog, window: Option<(usize, usize)>) -> Result<DiffusionReport> {
    let n = log.len();
    let series: Vec<(usize, f64)> = (1..=n).filter_map(|s| log.windowed(s).map(|b| (s, b.lp_loss))).collect();
    let intermediate = diffusion_fit(&series, window.unwrap_or_else(|| default_window(n)))?;
    let late = diffusion_fit(&series, late_window(n))?;
    Ok(DiffusionReport {
        series,
        intermediate,
        late,
    })
}

impl DiffusionReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("fit,step_lo,step_hi,exponent,intercept,residual,points\n");
        for (name, f) in [("intermediate", &self.intermediate), ("late", &self.late)] {
            s.push_str(&format!(
                "{name},{},{},{},{},{},{}\n",
                f.step_lo, f.step_hi, f.exponent, f.intercept, f.residual, f.points
            ));
        }
        s
    }

    /// `step lp` rows.
    pub fn to_dat(&self) -> String {
        two_column("step windowed_lp", &self.series)
    }
}

/// Plot-ready `x y` rows under a `#` header.
pub fn two_column(header: &str, rows: &[(usize, f64)]) -> String {
    let mut s = format!("# {header}\n");
    for (x, y) in rows {
        s.push_str(&format!("{x} {y}\n"));
    }
    s
}

/// Windowed `L_id` and `L_lp` curves of a run as `.dat` texts.
pub fn loss_curves(log: &RunLog) -> (String, String) {
    let series = log.windowed_series();
    let id: Vec<(usize, f64)> = series.iter().map(|(s, b)| (*s, b.id_loss)).collect();
    let lp: Vec<(usize, f64)> = series.iter().map(|(s, b)| (*s, b.lp_loss)).collect();
    (two_column("step windowed_id", &id), two_column("step windowed_lp", &lp))
}

/// Mean effect of editing along one principal direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EditEffect {
    pub component: usize,
    /// Edit size in standard deviations of the component.
    pub sigmas: f64,
    /// Relative change of the expression and pose coefficients.
    pub attribute_change: f64,
    /// Norm of the change of the unit eval embedding.
    pub identity_change: f64,
}

impl EditEffect {
    pub fn ratio(&self) -> f64 {
        self.attribute_change / self.identity_change.max(1e-12)
    }
}

fn attributes(world: &FrozenWorld, code: &LatentCode) -> Result<(Vec<f64>, Vec<f64>)> {
    let img = world.generate(code)?;
    let c = world.extract_coeffs(&img)?;
    let mut attr = c.expr;
    attr.extend(c.pose);
    Ok((attr, world.embed_identity(&img, Embedder::Eval)?))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Global edits of `n_codes` random W+ codes along each direction of `pca`
/// by `sigmas` standard deviations.
pub fn edit_effects(world: &FrozenWorld, pca: &Pca, sigmas: f64, n_codes: usize, seed: u64) -> Result<Vec<EditEffect>> {
    let mut rng = stream(seed, "pca/edits");
    let mut codes = Vec::with_capacity(n_codes);
    for _ in 0..n_codes {
        codes.push(world.broadcast_w(&world.sample_w(&mut rng)?)?);
    }
    let base: Vec<_> = codes.iter().map(|c| attributes(world, c)).collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(pca.directions.len());
    for (k, (dir, var)) in pca.directions.iter().zip(&pca.variances).enumerate() {
        let (mut attr, mut id) = (0.0, 0.0);
        for (code, (a0, e0)) in codes.iter().zip(&base) {
            let (a1, e1) = attributes(world, &edit(code, dir, sigmas * var.sqrt(), None)?)?;
            let norm = a0.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            attr += dist(&a1, a0) / norm;
            id += dist(&e1, e0);
        }
        let n = n_codes.max(1) as f64;
        out.push(EditEffect {
            component: k,
            sigmas,
            attribute_change: attr / n,
            identity_change: id / n,
        });
    }
    Ok(out)
}

pub fn edit_effects_csv(effects: &[EditEffect]) -> String {
    let mut s = String::from("component,sigmas,attribute_change,identity_change,ratio\n");
    for e in effects {
        s.push_str(&format!(
            "{},{:?},{},{},{}\n",
            e.component,
            e.sigmas,
            e.attribute_change,
            e.identity_change,
            e.ratio()
        ));
    }
    s
}
