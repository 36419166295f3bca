//! Defocus masks and the nested threshold search.
//!
//! The COC magnitude range `[0, 25]` is split into M intervals by
//! thresholds `0 = r0 < r1 < … < rM = 25`; pixels in interval i are handled
//! by branch i. Thresholds are learned by alternating two steps until they
//! stop moving: fit each branch's regularization on the training pixels it
//! owns (L1), then re-split the radius range to minimize the validation cost
//! of assigning each integer radius bin to a branch. The split is solved
//! exactly by dynamic programming over contiguous assignments.

use std::fmt;

use rayon::prelude::*;

use crate::branches::{theta_grid, BranchKind, BranchSet, WienerPlan};
use crate::dppsf::{DpPair, MAX_RADIUS};
use crate::error::{Error, Result};
use crate::imgcore::{gaussian_blur, FloatMap, Image};
use crate::scalar::Real;

/// Integer |COC| bins `0..=25`.
pub const NUM_BINS: usize = MAX_RADIUS as usize + 1;

const MAX_EDGE: f64 = MAX_RADIUS as f64;

/// Bin of a COC magnitude: nearest integer radius, saturating at 25.
pub fn bin_of(mag: f64) -> usize {
    (mag.abs().round() as usize).min(NUM_BINS - 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdSet {
    r: Vec<f64>,
}

impl ThresholdSet {
    pub fn new(r: Vec<f64>) -> Result<Self> {
        if r.len() < 2 || r.len() > NUM_BINS {
            return Err(Error::invalid(format!("need 2..={NUM_BINS} thresholds, got {}", r.len())));
        }
        if r[0] != 0.0 || r[r.len() - 1] != MAX_EDGE {
            return Err(Error::invalid(format!("thresholds must run from 0 to {MAX_EDGE}")));
        }
        if r.windows(2).any(|p| !(p[0] < p[1])) {
            return Err(Error::invalid("thresholds must be strictly increasing"));
        }
        Ok(Self { r })
    }

    /// Evenly spaced: `{0, 6.25, 12.5, 18.75, 25}` for M = 4.
    pub fn uniform(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::invalid("need at least one branch"));
        }
        Self::new((0..=m).map(|i| MAX_EDGE * i as f64 / m as f64).collect())
    }

    pub fn m(&self) -> usize {
        self.r.len() - 1
    }

    pub fn bounds(&self) -> &[f64] {
        &self.r
    }

    pub fn interior(&self) -> &[f64] {
        &self.r[1..self.r.len() - 1]
    }

    /// 0-based branch of a magnitude: `i` with `r_i <= mag < r_{i+1}`, the
    /// last interval closed (and anything above 25 clamped into it).
    pub fn branch_of(&self, mag: f64) -> usize {
        let mag = mag.abs();
        self.r[1..self.m()].iter().take_while(|&&t| mag >= t).count()
    }
}

impl fmt::Display for ThresholdSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.r.iter().map(|v| v.to_string()).collect();
        write!(f, "{{{}}}", parts.join(", "))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskMode {
    Hard,
    Feathered { sigma: f64 },
}

/// Per-branch weights `D_i`, summing to 1 at every pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct DefocusMaskSet<T> {
    masks: Vec<FloatMap<T>>,
    mode: MaskMode,
    thresholds: ThresholdSet,
}

impl<T: Real> DefocusMaskSet<T> {
    /// Masks from 0-based per-pixel branch labels. `feather_sigma > 0` blurs
    /// every hard mask and renormalizes.
    pub fn from_labels(
        labels: &[usize],
        height: usize,
        width: usize,
        thresholds: ThresholdSet,
        feather_sigma: f64,
    ) -> Result<Self> {
        let m = thresholds.m();
        if labels.len() != height * width {
            return Err(Error::shape(format!(
                "{} labels for a {height}x{width} map",
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= m) {
            return Err(Error::invalid(format!("label {l} out of range for {m} branches")));
        }
        if !(feather_sigma >= 0.0 && feather_sigma.is_finite()) {
            return Err(Error::invalid(format!("feather sigma must be >= 0, got {feather_sigma}")));
        }
        let hard: Vec<FloatMap<f64>> = (0..m)
            .map(|i| FloatMap::from_raw(height, width, labels.iter().map(|&l| (l == i) as u8 as f64).collect()))
            .collect();
        if feather_sigma == 0.0 {
            return Ok(Self {
                masks: hard.iter().map(FloatMap::cast).collect(),
                mode: MaskMode::Hard,
                thresholds,
            });
        }
        let soft: Vec<FloatMap<f64>> = hard
            .par_iter()
            .map(|d| {
                if d.as_slice().iter().all(|v| *v == 0.0) {
                    Ok(d.clone())
                } else {
                    gaussian_blur(d, feather_sigma)
                }
            })
            .collect::<Result<_>>()?;
        let n = height * width;
        let totals: Vec<f64> = (0..n).map(|p| soft.iter().map(|d| d.as_slice()[p]).sum()).collect();
        let masks = soft
            .iter()
            .map(|d| {
                let data = d
                    .as_slice()
                    .iter()
                    .zip(&totals)
                    .map(|(v, s)| T::of(v / s))
                    .collect();
                FloatMap::from_raw(height, width, data)
            })
            .collect();
        Ok(Self {
            masks,
            mode: MaskMode::Feathered {
                sigma: feather_sigma,
            },
            thresholds,
        })
    }

    pub fn masks(&self) -> &[FloatMap<T>] {
        &self.masks
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    pub fn thresholds(&self) -> &ThresholdSet {
        &self.thresholds
    }
}

/// 0-based branch of every pixel of a (signed) COC map.
pub fn assign_labels<T: Real>(coc: &FloatMap<T>, t: &ThresholdSet) -> Vec<usize> {
    coc.as_slice().iter().map(|v| t.branch_of(v.as_f64())).collect()
}

/// Pixel `p` goes to branch `i` iff `|coc(p)| ∈ [r_i, r_{i+1})`.
pub fn quantize<T: Real>(coc: &FloatMap<T>, t: &ThresholdSet, feather_sigma: f64) -> Result<DefocusMaskSet<T>> {
    let (h, w) = coc.dims();
    DefocusMaskSet::from_labels(&assign_labels(coc, t), h, w, t.clone(), feather_sigma)
}

/// Validation error of every branch in every |COC| bin.
#[derive(Clone, Debug, PartialEq)]
pub struct CostProfile {
    m: usize,
    channels: usize,
    /// Summed absolute error, `[bin * m + branch]`.
    cost: Vec<f64>,
    /// Pixels per bin.
    count: Vec<u64>,
}

impl CostProfile {
    pub fn empty(m: usize, channels: usize) -> Self {
        Self {
            m,
            channels,
            cost: vec![0.0; NUM_BINS * m],
            count: vec![0; NUM_BINS],
        }
    }

    /// Profile from per-bin mean absolute errors (`means[bin][branch]`,
    /// per channel) and pixel counts.
    pub fn from_means(means: &[Vec<f64>], count: &[u64], channels: usize) -> Result<Self> {
        if means.len() != NUM_BINS || count.len() != NUM_BINS {
            return Err(Error::invalid(format!("profile needs {NUM_BINS} bins")));
        }
        let m = means[0].len();
        if m == 0 || means.iter().any(|row| row.len() != m) {
            return Err(Error::invalid("ragged profile"));
        }
        if means.iter().flatten().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("profile entries must be >= 0"));
        }
        let mut p = Self::empty(m, channels);
        for b in 0..NUM_BINS {
            p.count[b] = count[b];
            for i in 0..m {
                p.cost[b * m + i] = means[b][i] * (count[b] as f64) * channels as f64;
            }
        }
        Ok(p)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn count(&self, bin: usize) -> u64 {
        self.count[bin]
    }

    pub fn total_pixels(&self) -> u64 {
        self.count.iter().sum()
    }

    /// Mean absolute error of `branch` over the pixels of `bin`; `None` when
    /// the bin is empty.
    pub fn mean(&self, bin: usize, branch: usize) -> Option<f64> {
        (self.count[bin] > 0).then(|| self.cost[bin * self.m + branch] / (self.count[bin] as f64 * self.channels as f64))
    }

    fn total(&self, bin: usize, branch: usize) -> f64 {
        self.cost[bin * self.m + branch]
    }

    pub fn nonempty_bins(&self) -> usize {
        self.count.iter().filter(|&&c| c > 0).count()
    }

    /// Pixel-weighted mean absolute error when bins are assigned by `t`.
    pub fn cost_of(&self, t: &ThresholdSet) -> f64 {
        let total: f64 = (0..NUM_BINS).map(|b| self.total(b, t.branch_of(b as f64))).sum();
        let n = self.total_pixels() as f64 * self.channels as f64;
        if n > 0.0 {
            total / n
        } else {
            0.0
        }
    }

    pub fn merge(mut self, other: &Self) -> Result<Self> {
        if self.m != other.m || self.channels != other.channels {
            return Err(Error::invalid("merging incompatible profiles"));
        }
        self.cost.iter_mut().zip(&other.cost).for_each(|(a, b)| *a += b);
        self.count.iter_mut().zip(&other.count).for_each(|(a, b)| *a += b);
        Ok(self)
    }
}

/// One scene: DP pair, sharp target and the COC used to bin its pixels.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub pair: DpPair<T>,
    pub sharp: Image<T>,
    pub coc: FloatMap<T>,
}

impl<T: Real> Sample<T> {
    pub fn new(pair: DpPair<T>, sharp: Image<T>, coc: FloatMap<T>) -> Result<Self> {
        pair.left().ensure_same_shape(&sharp, "target")?;
        sharp.plane(0).ensure_same_dims(&coc, "COC map")?;
        Ok(Self { pair, sharp, coc })
    }

    fn bins(&self) -> Vec<usize> {
        self.coc.as_slice().iter().map(|v| bin_of(v.as_f64())).collect()
    }
}

/// Channel-summed absolute error per bin.
fn binned_abs_error<T: Real>(out: &Image<T>, target: &Image<T>, bins: &[usize]) -> [f64; NUM_BINS] {
    let mut acc = [0.0; NUM_BINS];
    for (o, t) in out.planes().iter().zip(target.planes()) {
        for ((a, b), &bin) in o.as_slice().iter().zip(t.as_slice()).zip(bins) {
            acc[bin] += (a.as_f64() - b.as_f64()).abs();
        }
    }
    acc
}

fn check_samples<T: Real>(set: &[Sample<T>], what: &str) -> Result<usize> {
    let first = set
        .first()
        .ok_or_else(|| Error::invalid(format!("{what} set is empty")))?;
    let channels = first.sharp.channels();
    if set.iter().any(|s| s.sharp.channels() != channels) {
        return Err(Error::invalid(format!("{what} set mixes channel counts")));
    }
    Ok(channels)
}

/// Applies every branch to every validation image and pools the absolute
/// error into (GT |COC| bin, branch) cells.
///
/// A deconv branch is scored at each pixel's own radius: the cell (r, i)
/// measures branch i *handling* radius r, which is what assigning bin r to
/// branch i would produce.
pub fn branch_cost_profile<T: Real>(branches: &BranchSet, valset: &[Sample<T>]) -> Result<CostProfile> {
    let channels = check_samples(valset, "validation")?;
    let m = branches.m();
    let parts = valset
        .par_iter()
        .map(|s| {
            let fused = crate::branches::fuse_input(&s.pair);
            let bins = s.bins();
            let mag = s.coc.map(|v| v.abs());
            let plan = (m > 1).then(|| WienerPlan::new(&fused));
            let mut p = CostProfile::empty(m, channels);
            for &b in &bins {
                p.count[b] += 1;
            }
            for (i, b) in branches.branches().iter().enumerate() {
                let out = match b.kind {
                    BranchKind::Passthrough => fused.clone(),
                    BranchKind::Deconv => crate::branches::apply_branch_unrestricted(
                        plan.as_ref().expect("plan for deconv"),
                        b,
                        &fused,
                        &mag,
                    )?,
                };
                for (bin, e) in binned_abs_error(&out, &s.sharp, &bins).iter().enumerate() {
                    p.cost[bin * m + i] += e;
                }
            }
            Ok(p)
        })
        .collect::<Result<Vec<_>>>()?;
    parts
        .iter()
        .try_fold(CostProfile::empty(m, channels), |acc, p| acc.merge(p))
}

/// Re-splits the bins into M contiguous runs minimizing total cost.
///
/// Boundaries are integers in `1..=24`. Among equal-cost splits the one
/// with larger boundaries wins, so empty bins stay with the branch below
/// them and ties go to the lighter branch.
pub fn update_thresholds(profile: &CostProfile, t_old: &ThresholdSet) -> Result<ThresholdSet> {
    let m = t_old.m();
    if profile.m() != m {
        return Err(Error::invalid(format!(
            "profile has {} branches, thresholds {m}",
            profile.m()
        )));
    }
    if profile.nonempty_bins() < m {
        return Err(Error::invalid(format!(
            "{} nonempty bins cannot feed {m} branches",
            profile.nonempty_bins()
        )));
    }
    if m == 1 {
        return Ok(t_old.clone());
    }
    let nb = NUM_BINS;
    // prefix[i][s] = cost of bins [0, s) on branch i
    let prefix: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            let mut p = vec![0.0; nb + 1];
            for b in 0..nb {
                p[b + 1] = p[b] + profile.total(b, i);
            }
            p
        })
        .collect();
    let seg = |i: usize, a: usize, b: usize| prefix[i][b] - prefix[i][a];

    // best[i][s]: cheapest cover of bins [s, 26) by branches i..m with branch i
    // starting at s. Branch i (i >= 1) may start at i..=nb-1-(m-1-i)... but
    // the last boundary must stay <= 24 so bin 25 belongs to the last branch.
    let last_start = nb - 2;
    let mut best = vec![vec![f64::INFINITY; nb]; m];
    let mut next = vec![vec![0usize; nb]; m];
    for s in (m - 1)..=last_start {
        best[m - 1][s] = seg(m - 1, s, nb);
    }
    for i in (0..m - 1).rev() {
        let lo = i;
        let hi = last_start - (m - 1 - i);
        for s in lo..=hi {
            if i == 0 && s != 0 {
                continue;
            }
            let mut choice = None;
            let mut value = f64::INFINITY;
            // descending, strict improvement: ties keep the larger boundary
            for s2 in (s + 1..=hi + 1).rev() {
                let v = seg(i, s, s2) + best[i + 1][s2];
                if v < value {
                    value = v;
                    choice = Some(s2);
                }
            }
            best[i][s] = value;
            next[i][s] = choice.unwrap_or(s + 1);
        }
    }
    let mut r = vec![0.0];
    let mut s = 0;
    for i in 0..m - 1 {
        s = next[i][s];
        r.push(s as f64);
    }
    r.push(MAX_EDGE);
    ThresholdSet::new(r)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOptions {
    pub max_outer: usize,
    pub theta_grid: Vec<f64>,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            max_outer: 10,
            theta_grid: theta_grid(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub iter: usize,
    /// Validation cost of the incoming thresholds with freshly fitted branches.
    pub val_cost_before: f64,
    /// Validation cost after the threshold update, same branch parameters.
    pub val_cost: f64,
    pub thresholds: ThresholdSet,
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    /// Fitted branches; their thresholds are the learned ones.
    pub branches: BranchSet,
    pub history: Vec<HistoryRow>,
    /// Thresholds were unchanged by the last update.
    pub converged: bool,
    /// 1-based branches that owned no training pixels at the last fit.
    pub starved: Vec<usize>,
}

impl SearchOutcome {
    pub fn thresholds(&self) -> &ThresholdSet {
        self.branches.thresholds()
    }
}

/// `iter,val_cost,r1..rM-1` with a header row.
pub fn history_csv(history: &[HistoryRow], m: usize) -> String {
    let mut s = String::from("iter,val_cost");
    for i in 1..m {
        s += &format!(",r{i}");
    }
    s.push('\n');
    for row in history {
        s += &format!("{},{}", row.iter, row.val_cost);
        for r in row.thresholds.interior() {
            s += &format!(",{r}");
        }
        s.push('\n');
    }
    s
}

/// Absolute errors of one scene for every bin, as passthrough and as a
/// Wiener deconvolution at the bin's own radius for every grid theta.
/// Branch outputs are pixelwise, so any branch's error on the pixels of a
/// bin is a lookup in this table.
struct ErrorTable {
    count: [u64; NUM_BINS],
    pass: [f64; NUM_BINS],
    /// `[bin][theta index]`; zero for empty bins.
    deconv: Vec<Vec<f64>>,
}

impl ErrorTable {
    fn build<T: Real>(s: &Sample<T>, grid: &[f64], with_pass: bool) -> Result<Self> {
        let fused = crate::branches::fuse_input(&s.pair);
        let bins = s.bins();
        let mut count = [0u64; NUM_BINS];
        for &b in &bins {
            count[b] += 1;
        }
        let pass = if with_pass {
            binned_abs_error(&fused, &s.sharp, &bins)
        } else {
            [0.0; NUM_BINS]
        };
        let plan = WienerPlan::new(&fused);
        let present: Vec<usize> = (0..NUM_BINS).filter(|&b| count[b] > 0).collect();
        let jobs: Vec<(usize, usize)> = present
            .iter()
            .flat_map(|&b| (0..grid.len()).map(move |g| (b, g)))
            .collect();
        let errs = jobs
            .par_iter()
            .map(|&(b, g)| {
                let keep: Vec<bool> = bins.iter().map(|&x| x == b).collect();
                let layer: Image<T> = plan.deconv_disc_focused(b as i32, grid[g], &keep)?;
                let mut e = 0.0;
                for (o, t) in layer.planes().iter().zip(s.sharp.planes()) {
                    for ((a, v), &bin) in o.as_slice().iter().zip(t.as_slice()).zip(&bins) {
                        if bin == b {
                            e += (a.as_f64() - v.as_f64()).abs();
                        }
                    }
                }
                Ok(e)
            })
            .collect::<Result<Vec<f64>>>()?;
        let mut deconv = vec![vec![0.0; grid.len()]; NUM_BINS];
        for (&(b, g), e) in jobs.iter().zip(errs) {
            deconv[b][g] = e;
        }
        Ok(Self { count, pass, deconv })
    }
}

/// Fits every deconv branch's theta on the training bins `t` assigns to it.
/// Returns the thetas (as grid indices) and the starved 0-based branches.
fn fit_inner(tables: &[ErrorTable], t: &ThresholdSet, grid_len: usize, previous: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let m = t.m();
    let mut picks = previous.to_vec();
    let mut starved = Vec::new();
    for i in 1..m {
        let bins: Vec<usize> = (0..NUM_BINS).filter(|&b| t.branch_of(b as f64) == i).collect();
        let pixels: u64 = tables.iter().flat_map(|tb| bins.iter().map(|&b| tb.count[b])).sum();
        if pixels == 0 {
            starved.push(i);
            continue;
        }
        let err = |g: usize| -> f64 {
            tables
                .iter()
                .map(|tb| bins.iter().map(|&b| tb.deconv[b][g]).sum::<f64>())
                .sum()
        };
        // ascending scan, ties keep the stronger regularization
        let mut best = (f64::INFINITY, 0);
        for g in 0..grid_len {
            let e = err(g);
            if e <= best.0 {
                best = (e, g);
            }
        }
        picks[i - 1] = best.1;
    }
    (picks, starved)
}

/// Penalty per pixel-channel that keeps starved branches off populated bins.
const STARVED_PENALTY: f64 = 1e6;

fn profile_from_tables(tables: &[ErrorTable], picks: &[usize], starved: &[usize], m: usize, channels: usize) -> CostProfile {
    let mut p = CostProfile::empty(m, channels);
    for tb in tables {
        for b in 0..NUM_BINS {
            p.count[b] += tb.count[b];
            p.cost[b * m] += tb.pass[b];
            for i in 1..m {
                p.cost[b * m + i] += if starved.contains(&i) {
                    STARVED_PENALTY * (tb.count[b] * channels as u64) as f64
                } else {
                    tb.deconv[b][picks[i - 1]]
                };
            }
        }
    }
    p
}

/// Nested threshold search: alternate per-branch theta fits on `trainset`
/// with exact threshold updates from the `valset` cost profile, until the
/// thresholds stop changing or `max_outer` rounds have run.
///
/// Fitted thetas come from `opts.theta_grid`. A branch that owns no
/// training pixels keeps its previous theta, is reported in
/// [`SearchOutcome::starved`] and is pushed off populated bins by the next
/// update.
pub fn search_thresholds<T: Real>(
    trainset: &[Sample<T>],
    valset: &[Sample<T>],
    initial: &BranchSet,
    opts: &SearchOptions,
) -> Result<SearchOutcome> {
    let channels = check_samples(trainset, "training")?;
    if check_samples(valset, "validation")? != channels {
        return Err(Error::invalid("training and validation sets differ in channels"));
    }
    if opts.max_outer == 0 {
        return Err(Error::invalid("max_outer must be at least 1"));
    }
    let grid = &opts.theta_grid;
    if grid.is_empty() || grid.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(Error::invalid("theta grid must be nonempty and positive"));
    }
    let m = initial.m();
    let train: Vec<ErrorTable> = trainset
        .iter()
        .map(|s| ErrorTable::build(s, grid, false))
        .collect::<Result<_>>()?;
    let val: Vec<ErrorTable> = valset
        .iter()
        .map(|s| ErrorTable::build(s, grid, true))
        .collect::<Result<_>>()?;

    // grid index of each initial theta, nearest in log space
    let mut picks: Vec<usize> = initial
        .thetas()
        .iter()
        .map(|t| {
            (0..grid.len())
                .min_by(|&a, &b| {
                    let da = (grid[a].ln() - t.ln()).abs();
                    let db = (grid[b].ln() - t.ln()).abs();
                    da.total_cmp(&db)
                })
                .expect("nonempty grid")
        })
        .collect();
    let mut t = initial.thresholds().clone();
    let mut history = Vec::new();
    let mut converged = false;
    let mut starved;
    loop {
        let fit = fit_inner(&train, &t, grid.len(), &picks);
        picks = fit.0;
        starved = fit.1;
        if converged || history.len() == opts.max_outer {
            break;
        }
        let profile = profile_from_tables(&val, &picks, &starved, m, channels);
        let next = update_thresholds(&profile, &t)?;
        history.push(HistoryRow {
            iter: history.len() + 1,
            val_cost_before: profile.cost_of(&t),
            val_cost: profile.cost_of(&next),
            thresholds: next.clone(),
        });
        converged = next == t;
        t = next;
    }
    let thetas: Vec<f64> = picks.iter().map(|&g| grid[g]).collect();
    Ok(SearchOutcome {
        branches: BranchSet::new(t, &thetas)?,
        history,
        converged,
        starved: starved.iter().map(|i| i + 1).collect(),
    })
}
