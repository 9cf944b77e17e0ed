//! Learning the contribution coefficients ω on validation cases.
//!
//! Every (case, augmentation) prediction is computed once and cached in a
//! [`PredictionCache`]. An [`Objective`] then scores candidate coefficient
//! vectors by the mean Dice of the fused, binarized masks. Three ways of
//! choosing ω are provided:
//!
//! * [`heuristic_weights`]: closed form, larger single-augmentation Dice
//!   improvement gives a larger coefficient;
//! * [`grid_search`]: exhaustive search over a lattice on the scaled simplex;
//! * [`coordinate_ascent`]: pairwise weight transfers with a shrinking step.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentationSet;
use crate::error::{param, Result};
use crate::fusion::{
    binarize, check_theta, collect_predictions, fuse_voxel, is_foreground, CoefficientVector, PredictionSet,
};
use crate::metrics::{dice, dice_from_counts};
use crate::predictor::Predictor;
use crate::volume::{geometry_match, MaskVolume, Volume3D};

/// Largest lattice [`grid_search`] will enumerate.
pub const MAX_LATTICE_POINTS: u128 = 1_000_000;

/// [`coordinate_ascent`] stops once its step falls below this.
pub const MIN_ASCENT_STEP: f64 = 1e-3;

/// A validation case with ground truth.
#[derive(Clone, Debug)]
pub struct ValidationCase {
    pub case_id: String,
    pub ct: Volume3D,
    pub pet: Volume3D,
    pub gt: MaskVolume,
}

impl ValidationCase {
    pub fn new(case_id: impl Into<String>, ct: Volume3D, pet: Volume3D, gt: MaskVolume) -> Result<Self> {
        let case_id = case_id.into();
        if !geometry_match(&ct, &pet) || !ct.geometry().matches(gt.geometry()) {
            return param(format!("case {case_id}: CT, PET and ground truth geometry differ"));
        }
        Ok(ValidationCase { case_id, ct, pet, gt })
    }
}

/// Aligned per-augmentation predictions and ground truth for each case.
#[derive(Clone, Debug)]
pub struct PredictionCache {
    entries: Vec<(PredictionSet, MaskVolume)>,
}

impl PredictionCache {
    /// Runs the predictor exactly `m` times per case.
    pub fn build(predictor: &dyn Predictor, cases: &[ValidationCase], augs: &AugmentationSet) -> Result<Self> {
        if cases.is_empty() {
            return param("no validation cases");
        }
        let entries = cases
            .par_iter()
            .map(|c| {
                let preds = collect_predictions(predictor, &c.case_id, &c.ct, &c.pet, augs)?;
                Ok((preds, c.gt.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PredictionCache { entries })
    }

    /// Wraps already-aligned prediction sets.
    pub fn from_sets(entries: Vec<(PredictionSet, MaskVolume)>) -> Result<Self> {
        let Some((first, _)) = entries.first() else {
            return param("no validation cases");
        };
        let m = first.len();
        for (preds, gt) in &entries {
            if preds.len() != m {
                return param(format!(
                    "case {}: {} maps, expected {m}",
                    preds.case_id,
                    preds.len()
                ));
            }
            if !preds.geometry().matches(gt.geometry()) {
                return param(format!("case {}: ground truth geometry differs", preds.case_id));
            }
        }
        Ok(PredictionCache { entries })
    }

    pub fn entries(&self) -> &[(PredictionSet, MaskVolume)] {
        &self.entries
    }

    /// Number of augmentations.
    pub fn m(&self) -> usize {
        self.entries[0].0.len()
    }
}

/// Per-case voxels whose binarized fused value can depend on ω.
#[derive(Clone, Debug)]
struct CompactCase {
    gt_count: usize,
    /// Voxels foreground for every ω (all maps at or above θ).
    fixed_on: usize,
    fixed_on_tp: usize,
    /// Row-major `m` values per undecided voxel.
    values: Vec<f32>,
    gt: Vec<u8>,
}

/// Mean fused-mask Dice over the cached validation cases.
///
/// Because the fused value lies between the smallest and largest map value
/// at each voxel, voxels where every map agrees on the side of θ are
/// resolved once; only the rest are re-fused per evaluation. The result is
/// identical to `dice(binarize(fuse(...)), gt)` on the full volumes.
pub struct Objective {
    cases: Vec<CompactCase>,
    m: usize,
    theta: f64,
    evaluations: AtomicUsize,
}

impl Objective {
    pub fn new(cache: &PredictionCache, theta: f64) -> Result<Self> {
        check_theta(theta)?;
        let m = cache.m();
        let cases = cache
            .entries
            .par_iter()
            .map(|(preds, gt)| {
                let maps: Vec<&[f32]> = preds.maps().iter().map(|v| v.data()).collect();
                let mut c = CompactCase {
                    gt_count: gt.count(),
                    fixed_on: 0,
                    fixed_on_tp: 0,
                    values: Vec::new(),
                    gt: Vec::new(),
                };
                for (i, &g) in gt.data().iter().enumerate() {
                    let (lo, hi) = maps
                        .iter()
                        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), mp| (lo.min(mp[i]), hi.max(mp[i])));
                    if is_foreground(lo, theta) {
                        c.fixed_on += 1;
                        c.fixed_on_tp += g as usize;
                    } else if is_foreground(hi, theta) {
                        c.values.extend(maps.iter().map(|mp| mp[i]));
                        c.gt.push(g);
                    }
                }
                c
            })
            .collect();
        Ok(Objective { cases, m, theta, evaluations: AtomicUsize::new(0) })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// Number of objective evaluations performed so far.
    pub fn evaluations(&self) -> usize {
        self.evaluations.load(Ordering::Relaxed)
    }

    /// Number of voxels re-fused per evaluation, summed over cases.
    pub fn undecided_voxels(&self) -> usize {
        self.cases.iter().map(|c| c.gt.len()).sum()
    }

    fn case_dice(&self, c: &CompactCase, omegas: &[f64], n: f64) -> f64 {
        let mut pred = c.fixed_on;
        let mut tp = c.fixed_on_tp;
        for (row, &g) in c.values.chunks_exact(self.m).zip(&c.gt) {
            if is_foreground(fuse_voxel(row.iter().copied(), omegas, n), self.theta) {
                pred += 1;
                tp += g as usize;
            }
        }
        dice_from_counts(tp, pred, c.gt_count)
    }

    pub fn per_case_dice(&self, w: &CoefficientVector) -> Vec<f64> {
        assert_eq!(w.len(), self.m, "coefficient length must equal the augmentation count");
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        self.cases
            .par_iter()
            .map(|c| self.case_dice(c, w.omegas(), w.n()))
            .collect()
    }

    /// Mean Dice of the fused masks under `w`.
    pub fn evaluate(&self, w: &CoefficientVector) -> f64 {
        let per_case = self.per_case_dice(w);
        per_case.iter().sum::<f64>() / per_case.len() as f64
    }
}

/// Single-augmentation Dice relative to the identity augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImprovementTable {
    pub baseline_dice: f64,
    /// `deltas[i]` = mean Dice with augmentation `i` alone − `baseline_dice`.
    pub deltas: Vec<f64>,
}

impl ImprovementTable {
    pub fn new(baseline_dice: f64, deltas: Vec<f64>) -> Result<Self> {
        if deltas.first() != Some(&0.0) {
            return param("deltas must be nonempty with deltas[0] == 0 (identity)");
        }
        if !(0.0..=1.0).contains(&baseline_dice) {
            return param(format!("baseline Dice {baseline_dice} outside [0, 1]"));
        }
        if deltas.iter().any(|d| !d.is_finite()) {
            return param("deltas must be finite");
        }
        Ok(ImprovementTable { baseline_dice, deltas })
    }

    /// Builds the table from per-augmentation mean Dice values.
    pub fn from_mean_dice(per_augmentation: &[f64]) -> Result<Self> {
        let Some(&base) = per_augmentation.first() else {
            return param("no augmentations");
        };
        Self::new(base, per_augmentation.iter().map(|d| d - base).collect())
    }

    pub fn m(&self) -> usize {
        self.deltas.len()
    }
}

/// Mean Dice of each augmentation's own binarized prediction.
pub fn single_augmentation_dice(cache: &PredictionCache, theta: f64) -> Result<Vec<f64>> {
    let m = cache.m();
    let per_case: Vec<Vec<f64>> = cache
        .entries
        .par_iter()
        .map(|(preds, gt)| {
            preds
                .maps()
                .iter()
                .map(|map| dice(&binarize(map, theta)?, gt))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let k = per_case.len() as f64;
    Ok((0..m).map(|i| per_case.iter().map(|d| d[i]).sum::<f64>() / k).collect())
}

pub fn measure_improvements_cached(cache: &PredictionCache, theta: f64) -> Result<ImprovementTable> {
    ImprovementTable::from_mean_dice(&single_augmentation_dice(cache, theta)?)
}

/// Runs every augmentation on every case and tabulates Dice improvements
/// over the identity augmentation.
pub fn measure_improvements(
    predictor: &dyn Predictor,
    cases: &[ValidationCase],
    augs: &AugmentationSet,
    theta: f64,
) -> Result<ImprovementTable> {
    check_theta(theta)?;
    let cache = PredictionCache::build(predictor, cases, augs)?;
    measure_improvements_cached(&cache, theta)
}

/// `raw_i = max(Δ_i − min Δ, 0) + floor`, rescaled to sum to `n`.
///
/// Strictly monotone in Δ, and every coefficient stays positive.
pub fn heuristic_weights(table: &ImprovementTable, n: f64, floor: f64) -> Result<CoefficientVector> {
    if !(floor > 0.0) || !floor.is_finite() {
        return param(format!("floor must be positive, got {floor}"));
    }
    let min = table.deltas.iter().cloned().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = table.deltas.iter().map(|d| (d - min).max(0.0) + floor).collect();
    let total: f64 = raw.iter().sum();
    CoefficientVector::new(raw.iter().map(|r| n * r / total).collect(), n)
}

/// Euclidean projection of `raw` onto `{ω ≥ 0, Σ ω = n}`.
pub fn project_to_simplex(raw: &[f64], n: f64) -> Result<CoefficientVector> {
    if raw.is_empty() {
        return param("cannot project an empty vector");
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return param("cannot project non-finite values");
    }
    let mut sorted = raw.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut tau = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let t = (cumulative - n) / (j + 1) as f64;
        if u - t > 0.0 {
            tau = t;
        }
    }
    let mut omegas: Vec<f64> = raw.iter().map(|v| (v - tau).max(0.0)).collect();
    // absorb rounding so the sum invariant holds tightly
    let sum: f64 = omegas.iter().sum();
    if sum > 0.0 && sum != n {
        let scale = n / sum;
        omegas.iter_mut().for_each(|w| *w *= scale);
    }
    CoefficientVector::new(omegas, n)
}

/// Number of lattice points `C(k + m − 1, m − 1)`, saturating at
/// `MAX_LATTICE_POINTS + 1`.
pub fn lattice_size(m: usize, k: usize) -> u128 {
    let mut c: u128 = 1;
    for i in 1..m as u128 {
        c = c * (k as u128 + i) / i;
        if c > MAX_LATTICE_POINTS {
            return MAX_LATTICE_POINTS + 1;
        }
    }
    c
}

fn lattice_divisions(step: f64) -> Result<usize> {
    if !(step > 0.0 && step <= 1.0) {
        return param(format!("grid step must lie in (0, 1], got {step}"));
    }
    let k = (1.0 / step).round();
    if (k * step - 1.0).abs() > 1e-9 {
        return param(format!("grid step {step} does not divide 1"));
    }
    Ok(k as usize)
}

/// Compositions of `k` into `m` nonnegative parts, lexicographically
/// ascending.
fn compositions(m: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(m: usize, left: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() + 1 == m {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for v in 0..=left {
            prefix.push(v);
            rec(m, left - v, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(m, k, &mut Vec::with_capacity(m), &mut out);
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatticeEvaluation {
    pub omegas: Vec<f64>,
    pub objective: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridResult {
    pub best: CoefficientVector,
    pub objective: f64,
    /// Every lattice point in enumeration order.
    pub log: Vec<LatticeEvaluation>,
}

/// Exhaustive search over `{ω : ω_i = k_i · step · n, Σ ω_i = n}`.
/// Ties go to the lexicographically smallest ω.
pub fn grid_search(objective: &Objective, n: f64, step: f64) -> Result<GridResult> {
    let m = objective.m();
    let k = lattice_divisions(step)?;
    let size = lattice_size(m, k);
    if size > MAX_LATTICE_POINTS {
        return param(format!(
            "lattice for m = {m}, step = {step} exceeds {MAX_LATTICE_POINTS} points; use a coarser step"
        ));
    }
    let points = compositions(m, k);
    let log: Vec<LatticeEvaluation> = points
        .par_iter()
        .map(|ks| {
            let omegas: Vec<f64> = ks.iter().map(|&ki| ki as f64 * n / k as f64).collect();
            let w = CoefficientVector::new(omegas.clone(), n).expect("lattice point lies on the simplex");
            LatticeEvaluation { objective: objective.evaluate(&w), omegas }
        })
        .collect();
    let mut best = 0;
    for (i, e) in log.iter().enumerate() {
        if e.objective > log[best].objective {
            best = i;
        }
    }
    Ok(GridResult {
        best: CoefficientVector::new(log[best].omegas.clone(), n)?,
        objective: log[best].objective,
        log,
    })
}

/// Parameters of [`coordinate_ascent`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AscentOptions {
    /// Initial transfer size as a fraction of `n`.
    pub step0: f64,
    pub shrink: f64,
    pub max_rounds: usize,
}

impl Default for AscentOptions {
    fn default() -> Self {
        AscentOptions { step0: 0.25, shrink: 0.5, max_rounds: 50 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AcceptedMove {
    pub round: usize,
    /// Receiving index.
    pub to: usize,
    /// Donating index.
    pub from: usize,
    pub amount: f64,
    pub objective: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AscentResult {
    pub best: CoefficientVector,
    pub objective: f64,
    pub initial_objective: f64,
    pub trace: Vec<AcceptedMove>,
    pub rounds: usize,
    pub evaluations: usize,
}

/// Greedy pairwise weight transfer on the scaled simplex.
///
/// Each round sweeps all ordered pairs `(i, j)` and tries moving
/// `min(step · n, ω_j)` from `ω_j` to `ω_i`, keeping a move only if the
/// objective strictly improves. A round without an accepted move multiplies
/// the step by `shrink`. Stops after `max_rounds` rounds or once the step
/// drops below [`MIN_ASCENT_STEP`].
pub fn coordinate_ascent(objective: &Objective, w0: &CoefficientVector, opts: &AscentOptions) -> Result<AscentResult> {
    if w0.len() != objective.m() {
        return param(format!("{} coefficients for {} augmentations", w0.len(), objective.m()));
    }
    if !(opts.shrink > 0.0 && opts.shrink < 1.0) {
        return param(format!("shrink must lie in (0, 1), got {}", opts.shrink));
    }
    if !(opts.step0 > 0.0) || !opts.step0.is_finite() {
        return param(format!("step0 must be positive, got {}", opts.step0));
    }
    let n = w0.n();
    let m = w0.len();
    let mut omegas = w0.omegas().to_vec();
    let initial_objective = objective.evaluate(w0);
    let mut best = initial_objective;
    let mut evaluations = 1;
    let mut step = opts.step0;
    let mut trace = Vec::new();
    let mut rounds = 0;
    while rounds < opts.max_rounds && step >= MIN_ASCENT_STEP {
        rounds += 1;
        let mut accepted = false;
        for to in 0..m {
            for from in 0..m {
                if to == from {
                    continue;
                }
                let amount = (step * n).min(omegas[from]);
                if amount <= 0.0 {
                    continue;
                }
                let mut cand = omegas.clone();
                cand[to] += amount;
                cand[from] = if amount == omegas[from] { 0.0 } else { omegas[from] - amount };
                let w = CoefficientVector::new(cand.clone(), n)?;
                let f = objective.evaluate(&w);
                evaluations += 1;
                if f > best {
                    best = f;
                    omegas = cand;
                    accepted = true;
                    trace.push(AcceptedMove { round: rounds, to, from, amount, objective: f });
                }
            }
        }
        if !accepted {
            step *= opts.shrink;
        }
    }
    Ok(AscentResult {
        best: CoefficientVector::new(omegas, n)?,
        objective: best,
        initial_objective,
        trace,
        rounds,
        evaluations,
    })
}

/// Coefficient-learning strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Heuristic,
    Grid,
    Ascent,
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "heuristic" => Ok(Method::Heuristic),
            "grid" => Ok(Method::Grid),
            "ascent" => Ok(Method::Ascent),
            other => Err(format!("unknown method `{other}` (expected heuristic, grid or ascent)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizeOptions {
    pub theta: f64,
    /// Heuristic floor.
    pub floor: f64,
    /// Grid step as a fraction of `n`.
    pub grid_step: f64,
    pub ascent: AscentOptions,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        OptimizeOptions {
            theta: crate::fusion::DEFAULT_THETA,
            floor: 0.01,
            grid_step: 0.1,
            ascent: AscentOptions::default(),
        }
    }
}

/// Everything an optimization run produced.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizationReport {
    pub method: Method,
    pub case_count: usize,
    pub improvement_table: ImprovementTable,
    pub uniform_objective: f64,
    pub heuristic: CoefficientVector,
    pub heuristic_objective: f64,
    pub coefficients: CoefficientVector,
    pub objective: f64,
    /// Accepted ascent moves; empty for the other methods.
    pub trace: Vec<AcceptedMove>,
    pub evaluations: usize,
}

/// Learns coefficients from an already-populated cache; `n = m`.
pub fn optimize_cached(cache: &PredictionCache, method: Method, opts: &OptimizeOptions) -> Result<OptimizationReport> {
    let m = cache.m();
    let n = m as f64;
    let table = measure_improvements_cached(cache, opts.theta)?;
    let objective = Objective::new(cache, opts.theta)?;
    let uniform_objective = objective.evaluate(&CoefficientVector::uniform(m));
    let heuristic = heuristic_weights(&table, n, opts.floor)?;
    let heuristic_objective = objective.evaluate(&heuristic);
    let (coefficients, value, trace) = match method {
        Method::Heuristic => (heuristic.clone(), heuristic_objective, Vec::new()),
        Method::Grid => {
            let g = grid_search(&objective, n, opts.grid_step)?;
            (g.best, g.objective, Vec::new())
        }
        Method::Ascent => {
            let a = coordinate_ascent(&objective, &heuristic, &opts.ascent)?;
            (a.best, a.objective, a.trace)
        }
    };
    Ok(OptimizationReport {
        method,
        case_count: cache.entries.len(),
        improvement_table: table,
        uniform_objective,
        heuristic,
        heuristic_objective,
        coefficients,
        objective: value,
        trace,
        evaluations: objective.evaluations(),
    })
}

/// Runs the predictor once per (case, augmentation) and learns ω.
pub fn optimize(
    predictor: &dyn Predictor,
    cases: &[ValidationCase],
    augs: &AugmentationSet,
    method: Method,
    opts: &OptimizeOptions,
) -> Result<OptimizationReport> {
    check_theta(opts.theta)?;
    let cache = PredictionCache::build(predictor, cases, augs)?;
    optimize_cached(&cache, method, opts)
}
