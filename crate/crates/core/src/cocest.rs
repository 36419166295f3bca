//! Unsupervised signed-COC estimation from a dual-pixel pair.
//!
//! With mirrored DP kernels, a constant-depth patch satisfies
//! `left * H_r = right * H_l` exactly, since both sides equal the sharp
//! patch convolved with `H_l * H_r`. For every candidate radius the cost
//! volume holds the channel-summed squared difference of the two sides,
//! Gaussian-smoothed to suppress noise. Convolving the whole image at once
//! evaluates the identity on the neighborhood of every pixel simultaneously.
//!
//! The objective (smoothed residual plus a penalty on COC-map gradients) is
//! minimized over the discrete candidate set: winner-take-all, then
//! `smoothing_iters` synchronous rounds in which every pixel picks the label
//! minimizing its normalized unary cost plus a λ-weighted quadratic penalty
//! against its 4-neighbors, then a 3×3 median.

use rayon::prelude::*;

use crate::dppsf::{DpPair, TapBank, MAX_RADIUS};
use crate::error::{Error, Result};
use crate::imgcore::{convolve_plane_paired, gaussian_blur, mirror_index, FloatMap, Image};
use crate::kv::KvSection;
use crate::scalar::Real;

/// Guards the normalized-cost and confidence divisions.
const COST_EPS: f64 = 1e-12;

pub const ESTIMATION_KEYS: [&str; 6] = [
    "lambda",
    "residual_smooth_sigma",
    "candidates",
    "smoothing_iters",
    "confidence_floor",
    "texture_floor",
];

#[derive(Clone, Debug, PartialEq)]
pub struct EstimationConfig {
    /// Weight of the COC-gradient penalty.
    pub lambda: f64,
    /// Sigma (pixels) of the Gaussian applied to the residual.
    pub residual_smooth_sigma: f64,
    /// Signed integer candidate radii, strictly increasing.
    pub candidates: Vec<i32>,
    pub smoothing_iters: usize,
    /// Pixels at or below this confidence are treated as unreliable.
    pub confidence_floor: f64,
    /// Minimum local gradient energy for a pixel to count as textured.
    pub texture_floor: f64,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            residual_smooth_sigma: 2.0,
            candidates: (-MAX_RADIUS..=MAX_RADIUS).collect(),
            smoothing_iters: 20,
            confidence_floor: 0.05,
            texture_floor: 1e-4,
        }
    }
}

impl EstimationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!("lambda {} must be >= 0", self.lambda)));
        }
        if !(self.residual_smooth_sigma >= 0.0) || !self.residual_smooth_sigma.is_finite() {
            return Err(Error::invalid("residual_smooth_sigma must be >= 0"));
        }
        if self.candidates.is_empty() {
            return Err(Error::invalid("candidate list is empty"));
        }
        if self.candidates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("candidates must be strictly increasing"));
        }
        if self.candidates.iter().any(|c| c.abs() > MAX_RADIUS) {
            return Err(Error::invalid(format!(
                "candidates must lie in [-{MAX_RADIUS}, {MAX_RADIUS}]"
            )));
        }
        Ok(())
    }

    /// Overrides defaults with the keys present in `section`.
    pub fn from_kv(section: &KvSection) -> Result<Self> {
        section.reject_unknown(&ESTIMATION_KEYS)?;
        let mut cfg = Self::default();
        if let Some(v) = section.parse("lambda")? {
            cfg.lambda = v;
        }
        if let Some(v) = section.parse("residual_smooth_sigma")? {
            cfg.residual_smooth_sigma = v;
        }
        if let Some(v) = section.parse("smoothing_iters")? {
            cfg.smoothing_iters = v;
        }
        if let Some(v) = section.parse("confidence_floor")? {
            cfg.confidence_floor = v;
        }
        if let Some(v) = section.parse("texture_floor")? {
            cfg.texture_floor = v;
        }
        if let Some(spec) = section.get("candidates") {
            cfg.candidates = parse_candidates(spec)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `"-25..25"` (inclusive) or a comma-separated list.
pub fn parse_candidates(spec: &str) -> Result<Vec<i32>> {
    let bad = || Error::invalid(format!("bad candidate list {spec:?}"));
    if let Some((lo, hi)) = spec.split_once("..") {
        let lo: i32 = lo.trim().parse().map_err(|_| bad())?;
        let hi: i32 = hi.trim().parse().map_err(|_| bad())?;
        if lo > hi {
            return Err(bad());
        }
        return Ok((lo..=hi).collect());
    }
    spec.split(',')
        .map(|t| t.trim().parse().map_err(|_| bad()))
        .collect()
}

/// Per-pixel residual of the DP identity for every candidate radius.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume<T> {
    candidates: Vec<i32>,
    slices: Vec<FloatMap<T>>,
    texture: FloatMap<T>,
}

impl<T: Real> CostVolume<T> {
    /// Assembles a volume from precomputed slices; `texture` is the local
    /// gradient energy used for the texture floor.
    pub fn from_slices(
        candidates: Vec<i32>,
        slices: Vec<FloatMap<T>>,
        texture: FloatMap<T>,
    ) -> Result<Self> {
        if candidates.is_empty() || candidates.len() != slices.len() {
            return Err(Error::shape(format!(
                "{} candidates for {} slices",
                candidates.len(),
                slices.len()
            )));
        }
        if candidates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("candidates must be strictly increasing"));
        }
        for s in &slices {
            s.ensure_same_dims(&texture, "cost slice")?;
            if s.as_slice().iter().any(|v| *v < T::zero()) {
                return Err(Error::invalid("costs must be nonnegative"));
            }
        }
        Ok(Self {
            candidates,
            slices,
            texture,
        })
    }

    pub fn candidates(&self) -> &[i32] {
        &self.candidates
    }

    pub fn slices(&self) -> &[FloatMap<T>] {
        &self.slices
    }

    pub fn slice(&self, radius: i32) -> Option<&FloatMap<T>> {
        self.candidates
            .iter()
            .position(|&c| c == radius)
            .map(|i| &self.slices[i])
    }

    pub fn texture(&self) -> &FloatMap<T> {
        &self.texture
    }

    pub fn dims(&self) -> (usize, usize) {
        self.texture.dims()
    }
}

/// Mean over a 5×5 window of the squared central-difference gradient of the
/// fused grayscale image.
pub fn texture_energy<T: Real>(pair: &DpPair<T>) -> FloatMap<T> {
    let (h, w) = pair.dims();
    let l = pair.left().luma();
    let r = pair.right().luma();
    let fused: Vec<f64> = l
        .as_slice()
        .iter()
        .zip(r.as_slice())
        .map(|(a, b)| 0.5 * (a.as_f64() + b.as_f64()))
        .collect();
    let at = |y: isize, x: isize| fused[mirror_index(y, h) * w + mirror_index(x, w)];
    let mut grad = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = 0.5 * (at(y, x + 1) - at(y, x - 1));
            let gy = 0.5 * (at(y + 1, x) - at(y - 1, x));
            grad[y as usize * w + x as usize] = gx * gx + gy * gy;
        }
    }
    FloatMap::from_fn(h, w, |y, x| {
        let mut s = 0.0;
        for dy in -2..=2isize {
            for dx in -2..=2isize {
                s += grad[mirror_index(y as isize + dy, h) * w + mirror_index(x as isize + dx, w)];
            }
        }
        T::of(s / 25.0)
    })
}

/// Builds the smoothed-residual cost volume of `pair` over `cfg.candidates`.
pub fn build_cost_volume<T: Real>(pair: &DpPair<T>, cfg: &EstimationConfig) -> Result<CostVolume<T>> {
    cfg.validate()?;
    let (h, w) = pair.dims();
    let bank = TapBank::get();
    let slices = cfg
        .candidates
        .par_iter()
        .map(|&r| {
            let mut acc = vec![0.0f64; h * w];
            for c in 0..pair.channels() {
                // left * H_r versus right * H_r^f, and H_r^f == H_l; across
                // the left/right borders each view continues as the other
                let (l, rv) = (pair.left().plane(c), pair.right().plane(c));
                let a = convolve_plane_paired(l, rv, bank.right(r));
                let b = convolve_plane_paired(rv, l, bank.left(r));
                for ((s, u), v) in acc.iter_mut().zip(a.as_slice()).zip(b.as_slice()) {
                    let d = u.as_f64() - v.as_f64();
                    *s += d * d;
                }
            }
            let residual = FloatMap::from_raw(h, w, acc.into_iter().map(T::of).collect());
            gaussian_blur(&residual, cfg.residual_smooth_sigma)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CostVolume {
        candidates: cfg.candidates.clone(),
        slices,
        texture: texture_energy(pair),
    })
}

/// Estimated signed COC map with a per-pixel confidence in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CocEstimate<T> {
    pub coc: FloatMap<T>,
    pub confidence: FloatMap<T>,
}

impl<T: Real> CocEstimate<T> {
    /// Pixels whose confidence exceeds `floor`.
    pub fn confident(&self, floor: f64) -> Vec<bool> {
        self.confidence
            .as_slice()
            .iter()
            .map(|c| c.as_f64() > floor)
            .collect()
    }
}

/// Candidate indices in tie-break order: smallest `|r|` first, then negative
/// before positive.
fn preference_order(candidates: &[i32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by_key(|&i| (candidates[i].abs(), candidates[i]));
    order
}

fn median9(mut v: [i32; 9]) -> i32 {
    v.sort_unstable();
    v[4]
}

/// Minimizes the regularized objective over the candidate labels.
pub fn solve_coc<T: Real>(vol: &CostVolume<T>, cfg: &EstimationConfig) -> Result<CocEstimate<T>> {
    if !(cfg.lambda >= 0.0) || !cfg.lambda.is_finite() {
        return Err(Error::invalid(format!("lambda {} must be >= 0", cfg.lambda)));
    }
    let (h, w) = vol.dims();
    let n = h * w;
    let k = vol.candidates.len();
    let order = preference_order(&vol.candidates);
    let labels_f: Vec<f64> = vol.candidates.iter().map(|&c| c as f64).collect();
    let scale = vol
        .candidates
        .iter()
        .map(|c| c.abs())
        .max()
        .unwrap_or(1)
        .max(1) as f64;

    // pixel-major copy of the costs, normalized by the per-pixel mean
    let mut unary = vec![0.0f64; n * k];
    let mut confidence = vec![T::zero(); n];
    let mut labels = vec![0usize; n];
    unary
        .par_chunks_mut(k)
        .zip(confidence.par_iter_mut())
        .zip(labels.par_iter_mut())
        .enumerate()
        .for_each(|(p, ((u, conf), label))| {
            for (j, s) in vol.slices.iter().enumerate() {
                u[j] = s.as_slice()[p].as_f64();
            }
            let mut best = order[0];
            for &j in &order[1..] {
                if u[j] < u[best] {
                    best = j;
                }
            }
            *label = best;
            let second = order
                .iter()
                .filter(|&&j| j != best)
                .map(|&j| u[j])
                .fold(f64::INFINITY, f64::min);
            let c = if second.is_finite() {
                ((second - u[best]) / (second + COST_EPS)).clamp(0.0, 1.0)
            } else {
                0.0
            };
            *conf = if vol.texture.as_slice()[p].as_f64() < cfg.texture_floor {
                T::zero()
            } else {
                T::of(c)
            };
            let mean = u.iter().sum::<f64>() / k as f64;
            for v in u.iter_mut() {
                *v /= mean + COST_EPS;
            }
        });

    if cfg.lambda > 0.0 {
        let weight = cfg.lambda / (scale * scale);
        for _ in 0..cfg.smoothing_iters {
            let prev = labels.clone();
            labels.par_iter_mut().enumerate().for_each(|(p, label)| {
                let (y, x) = (p / w, p % w);
                let mut neigh = [0.0f64; 4];
                let mut m = 0;
                if y > 0 {
                    neigh[m] = labels_f[prev[p - w]];
                    m += 1;
                }
                if y + 1 < h {
                    neigh[m] = labels_f[prev[p + w]];
                    m += 1;
                }
                if x > 0 {
                    neigh[m] = labels_f[prev[p - 1]];
                    m += 1;
                }
                if x + 1 < w {
                    neigh[m] = labels_f[prev[p + 1]];
                    m += 1;
                }
                let u = &unary[p * k..(p + 1) * k];
                let energy = |j: usize| {
                    let r = labels_f[j];
                    u[j] + weight * neigh[..m].iter().map(|q| (r - q) * (r - q)).sum::<f64>()
                };
                let mut best = order[0];
                let mut best_e = energy(best);
                for &j in &order[1..] {
                    let e = energy(j);
                    if e < best_e {
                        best = j;
                        best_e = e;
                    }
                }
                *label = best;
            });
        }
    }

    let radii: Vec<i32> = labels.iter().map(|&j| vol.candidates[j]).collect();
    let coc: Vec<T> = (0..n)
        .into_par_iter()
        .map(|p| {
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            let mut v = [0i32; 9];
            let mut i = 0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    v[i] = radii[mirror_index(y + dy, h) * w + mirror_index(x + dx, w)];
                    i += 1;
                }
            }
            T::of(median9(v) as f64)
        })
        .collect();

    Ok(CocEstimate {
        coc: FloatMap::from_raw(h, w, coc),
        confidence: FloatMap::from_raw(h, w, confidence),
    })
}

/// Cost-volume construction followed by [`solve_coc`].
pub fn estimate_coc<T: Real>(pair: &DpPair<T>, cfg: &EstimationConfig) -> Result<CocEstimate<T>> {
    let vol = build_cost_volume(pair, cfg)?;
    solve_coc(&vol, cfg)
}

/// Signed colormap for previews: −25 blue, 0 black, +25 yellow.
pub fn colorize_coc<T: Real>(coc: &FloatMap<T>) -> Image<T> {
    let (h, w) = coc.dims();
    let t = |v: T| (v.as_f64() / MAX_RADIUS as f64).clamp(-1.0, 1.0);
    let channel = |f: &dyn Fn(f64) -> f64| {
        FloatMap::from_raw(h, w, coc.as_slice().iter().map(|&v| T::of(f(t(v)))).collect())
    };
    let red = channel(&|s| s.max(0.0));
    let green = channel(&|s| s.max(0.0));
    let blue = channel(&|s| (-s).max(0.0));
    Image::from_planes_unchecked(vec![red, green, blue])
}
