//! Mask-gated deblurring branches.
//!
//! Branch 1 passes the fused image through untouched; every other branch is
//! a Wiener deconvolver for the range of COC radii assigned to it. Inside a
//! branch, spatially varying blur is handled by deconvolving the whole image
//! once per integer radius and gathering, per pixel, the layer that matches
//! its COC. The final image is the mask-weighted sum of branch outputs.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::dppsf::{full_disc_kernel, DpPair, MAX_RADIUS};
use crate::error::{Error, Result};
use crate::imgcore::{mirror_index, FloatMap, Image, Kernel};
use crate::kv::KvSection;
use crate::maskgen::{assign_labels, bin_of, DefocusMaskSet, ThresholdSet};
use crate::scalar::Real;

/// Regularization used for deconv branches that have not been fitted yet.
pub const DEFAULT_THETA: f64 = 1e-3;

/// Half-decade grid `1e-5, 3.2e-5, …, 1e-1` searched by the inner fit.
pub fn theta_grid() -> Vec<f64> {
    (0..9).map(|k| 10f64.powf(-5.0 + 0.5 * k as f64)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchKind {
    Passthrough,
    Deconv,
}

impl fmt::Display for BranchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BranchKind::Passthrough => "passthrough",
            BranchKind::Deconv => "deconv",
        })
    }
}

impl FromStr for BranchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "passthrough" => Ok(BranchKind::Passthrough),
            "deconv" => Ok(BranchKind::Deconv),
            _ => Err(Error::invalid(format!("unknown branch kind `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchConfig {
    /// 1-based position, lightest first.
    pub index: usize,
    pub kind: BranchKind,
    /// Wiener regularization; unused (0) for passthrough.
    pub theta: f64,
    /// `[lo, hi)` in pixels of |COC|; closed above for the last branch.
    pub interval: (f64, f64),
    pub closed_above: bool,
}

impl BranchConfig {
    pub fn contains(&self, mag: f64) -> bool {
        let (lo, hi) = self.interval;
        mag >= lo && (mag < hi || (self.closed_above && mag <= hi))
    }

    /// Integer radii whose layers this branch computes.
    pub fn radii(&self) -> std::ops::RangeInclusive<i32> {
        let (lo, hi) = self.interval;
        let first = lo.ceil() as i32;
        let last = if self.closed_above {
            hi.floor() as i32
        } else {
            hi.ceil() as i32 - 1
        };
        first..=last.max(first)
    }

    /// Layer used for a pixel of COC magnitude `mag`: its rounded radius,
    /// clamped to the branch's own radii.
    pub fn layer_for(&self, mag: f64) -> i32 {
        let r = self.radii();
        (mag.round() as i32).clamp(*r.start(), *r.end())
    }
}

/// The M branches of a model together with the thresholds they tile.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchSet {
    branches: Vec<BranchConfig>,
    thresholds: ThresholdSet,
}

pub const MODEL_KEY_CONVERGED: &str = "converged";

impl BranchSet {
    /// Passthrough first, then one deconv branch per entry of `thetas`
    /// (`thetas.len()` must be `M - 1`).
    pub fn new(thresholds: ThresholdSet, thetas: &[f64]) -> Result<Self> {
        let m = thresholds.m();
        if thetas.len() + 1 != m {
            return Err(Error::invalid(format!(
                "{m} branches need {} thetas, got {}",
                m - 1,
                thetas.len()
            )));
        }
        if let Some(t) = thetas.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
            return Err(Error::invalid(format!("theta must be positive, got {t}")));
        }
        let bounds = thresholds.bounds();
        let branches = (0..m)
            .map(|i| BranchConfig {
                index: i + 1,
                kind: if i == 0 {
                    BranchKind::Passthrough
                } else {
                    BranchKind::Deconv
                },
                theta: if i == 0 { 0.0 } else { thetas[i - 1] },
                interval: (bounds[i], bounds[i + 1]),
                closed_above: i + 1 == m,
            })
            .collect();
        Ok(Self {
            branches,
            thresholds,
        })
    }

    /// Uniform thresholds and the default theta everywhere.
    pub fn initial(m: usize) -> Result<Self> {
        Self::new(ThresholdSet::uniform(m)?, &vec![DEFAULT_THETA; m.saturating_sub(1)])
    }

    pub fn branches(&self) -> &[BranchConfig] {
        &self.branches
    }

    pub fn thresholds(&self) -> &ThresholdSet {
        &self.thresholds
    }

    pub fn m(&self) -> usize {
        self.branches.len()
    }

    pub fn thetas(&self) -> Vec<f64> {
        self.branches[1..].iter().map(|b| b.theta).collect()
    }

    pub fn with_thresholds(&self, thresholds: ThresholdSet) -> Result<Self> {
        Self::new(thresholds, &self.thetas())
    }

    pub fn with_thetas(&self, thetas: &[f64]) -> Result<Self> {
        Self::new(self.thresholds.clone(), thetas)
    }

    /// Model file body: `M`, `r0..rM`, `branch<i>.kind`, `branch<i>.theta`.
    pub fn to_model_string(&self, converged: Option<bool>) -> String {
        let mut s = format!("M = {}\n", self.m());
        for (i, r) in self.thresholds.bounds().iter().enumerate() {
            s += &format!("r{i} = {r}\n");
        }
        for b in &self.branches {
            s += &format!("branch{}.kind = {}\n", b.index, b.kind);
            if b.kind == BranchKind::Deconv {
                s += &format!("branch{}.theta = {}\n", b.index, b.theta);
            }
        }
        if let Some(c) = converged {
            s += &format!("{MODEL_KEY_CONVERGED} = {c}\n");
        }
        s
    }

    pub fn from_kv(section: &KvSection) -> Result<Self> {
        let m: usize = section.require("M")?;
        if m == 0 || m > MAX_RADIUS as usize {
            return Err(Error::invalid(format!("M = {m} out of range")));
        }
        let mut allowed: Vec<String> = vec!["M".into(), MODEL_KEY_CONVERGED.into()];
        let mut bounds = Vec::with_capacity(m + 1);
        for i in 0..=m {
            let key = format!("r{i}");
            bounds.push(section.require::<f64>(&key)?);
            allowed.push(key);
        }
        let mut thetas = Vec::with_capacity(m - 1);
        for i in 1..=m {
            let kind_key = format!("branch{i}.kind");
            let kind: BranchKind = section
                .get(&kind_key)
                .ok_or_else(|| Error::invalid(format!("missing key `{kind_key}`")))?
                .parse()?;
            let expected = if i == 1 {
                BranchKind::Passthrough
            } else {
                BranchKind::Deconv
            };
            if kind != expected {
                return Err(Error::invalid(format!("branch {i} must be {expected}, got {kind}")));
            }
            allowed.push(kind_key);
            if kind == BranchKind::Deconv {
                let theta_key = format!("branch{i}.theta");
                thetas.push(section.require::<f64>(&theta_key)?);
                allowed.push(theta_key);
            }
        }
        let allowed: Vec<&str> = allowed.iter().map(String::as_str).collect();
        section.reject_unknown(&allowed)?;
        Self::new(ThresholdSet::new(bounds)?, &thetas)
    }
}

/// Full-aperture equivalent of a DP pair: the per-pixel view average.
pub fn fuse_input<T: Real>(pair: &DpPair<T>) -> Image<T> {
    let planes = pair
        .left()
        .planes()
        .iter()
        .zip(pair.right().planes())
        .map(|(l, r)| {
            let data = l
                .as_slice()
                .iter()
                .zip(r.as_slice())
                .map(|(a, b)| T::of(0.5 * (a.as_f64() + b.as_f64())))
                .collect();
            FloatMap::from_raw(l.height(), l.width(), data)
        })
        .collect();
    Image::from_planes_unchecked(planes)
}

/// 2-D FFT of a row-major `h × w` complex buffer.
struct Fft2 {
    h: usize,
    w: usize,
    rows: [Arc<dyn Fft<f64>>; 2],
    cols: [Arc<dyn Fft<f64>>; 2],
}

impl Fft2 {
    fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            h,
            w,
            rows: [planner.plan_fft_forward(w), planner.plan_fft_inverse(w)],
            cols: [planner.plan_fft_forward(h), planner.plan_fft_inverse(h)],
        }
    }

    /// Unnormalized in both directions.
    fn process(&self, data: &mut [Complex64], inverse: bool) {
        let dir = inverse as usize;
        let (h, w) = (self.h, self.w);
        self.rows[dir].process(data);
        let mut t = vec![Complex64::default(); h * w];
        for y in 0..h {
            for x in 0..w {
                t[x * h + y] = data[y * w + x];
            }
        }
        self.cols[dir].process(&mut t);
        for x in 0..w {
            for y in 0..h {
                data[y * w + x] = t[x * h + y];
            }
        }
    }
}

/// Spectra of the mirror-extended planes of one image, reusable across
/// kernels and regularization strengths.
///
/// Each `h × w` plane is extended to `2h × 2w` by whole-sample symmetric
/// reflection. The extension is periodic without jumps at the borders, so
/// circular deconvolution on it carries no edge ringing, and circular
/// convolution on it matches [`crate::imgcore::convolve`]'s mirror padding.
pub struct WienerPlan {
    h: usize,
    w: usize,
    fft: Fft2,
    planes: Vec<Vec<f64>>,
    spectra: Vec<Vec<Complex64>>,
    disc_transfers: Mutex<HashMap<i32, Arc<Vec<Complex64>>>>,
}

impl WienerPlan {
    pub fn new<T: Real>(img: &Image<T>) -> Self {
        let (h, w) = img.dims();
        let (eh, ew) = (2 * h, 2 * w);
        let fft = Fft2::new(eh, ew);
        let spectra = img
            .planes()
            .par_iter()
            .map(|p| {
                let src = p.as_slice();
                let mut buf: Vec<Complex64> = (0..eh * ew)
                    .map(|i| {
                        let (y, x) = (i / ew, i % ew);
                        let v = src[mirror_index(y as isize, h) * w + mirror_index(x as isize, w)];
                        Complex64::new(v.as_f64(), 0.0)
                    })
                    .collect();
                fft.process(&mut buf, false);
                buf
            })
            .collect();
        let planes = img
            .planes()
            .iter()
            .map(|p| p.as_slice().iter().map(|v| v.as_f64()).collect())
            .collect();
        Self {
            h,
            w,
            fft,
            planes,
            spectra,
            disc_transfers: Mutex::new(HashMap::new()),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    fn transfer<T: Real>(&self, k: &Kernel<T>) -> Vec<Complex64> {
        let (eh, ew) = (2 * self.h, 2 * self.w);
        let mut buf = vec![Complex64::default(); eh * ew];
        let r = k.radius() as isize;
        for dy in -r..=r {
            for dx in -r..=r {
                let v = k.at(dy, dx).as_f64();
                if v != 0.0 {
                    let y = dy.rem_euclid(eh as isize) as usize;
                    let x = dx.rem_euclid(ew as isize) as usize;
                    buf[y * ew + x].re += v;
                }
            }
        }
        self.fft.process(&mut buf, false);
        buf
    }

    fn disc_transfer(&self, radius: i32) -> Result<Arc<Vec<Complex64>>> {
        if let Some(t) = self.disc_transfers.lock().expect("transfer cache").get(&radius) {
            return Ok(t.clone());
        }
        let t = Arc::new(self.transfer(&full_disc_kernel::<f64>(radius)?));
        self.disc_transfers
            .lock()
            .expect("transfer cache")
            .insert(radius, t.clone());
        Ok(t)
    }

    fn apply<T: Real>(&self, transfer: &[Complex64], theta: f64) -> Image<T> {
        let (h, w) = (self.h, self.w);
        let ew = 2 * w;
        let scale = 1.0 / (4 * h * w) as f64;
        let planes = self
            .spectra
            .par_iter()
            .map(|spec| {
                let mut buf: Vec<Complex64> = spec
                    .iter()
                    .zip(transfer)
                    .map(|(x, k)| x * k.conj() / (k.norm_sqr() + theta))
                    .collect();
                self.fft.process(&mut buf, true);
                let data = (0..h * w)
                    .map(|i| T::of((buf[(i / w) * ew + i % w].re * scale).clamp(0.0, 1.0)))
                    .collect();
                FloatMap::from_raw(h, w, data)
            })
            .collect();
        Image::from_planes_unchecked(planes)
    }

    /// Like [`Self::apply`], but first replaces every pixel outside `keep`
    /// by its own blur under `transfer`, so the input is consistent with a
    /// single blur everywhere and content at other depths cannot ring into
    /// the kept region.
    fn apply_focused<T: Real>(&self, transfer: &[Complex64], theta: f64, keep: &[bool]) -> Image<T> {
        let (h, w) = (self.h, self.w);
        let (eh, ew) = (2 * h, 2 * w);
        let scale = 1.0 / (eh * ew) as f64;
        let planes = self
            .spectra
            .par_iter()
            .zip(&self.planes)
            .map(|(spec, src)| {
                let mut buf: Vec<Complex64> = spec.iter().zip(transfer).map(|(x, k)| x * k).collect();
                self.fft.process(&mut buf, true);
                for (i, v) in buf.iter_mut().enumerate() {
                    let p = mirror_index((i / ew) as isize, h) * w + mirror_index((i % ew) as isize, w);
                    *v = Complex64::new(if keep[p] { src[p] } else { v.re * scale }, 0.0);
                }
                self.fft.process(&mut buf, false);
                for (x, k) in buf.iter_mut().zip(transfer) {
                    *x = *x * k.conj() / (k.norm_sqr() + theta);
                }
                self.fft.process(&mut buf, true);
                let data = (0..h * w)
                    .map(|i| T::of((buf[(i / w) * ew + i % w].re * scale).clamp(0.0, 1.0)))
                    .collect();
                FloatMap::from_raw(h, w, data)
            })
            .collect();
        Image::from_planes_unchecked(planes)
    }

    /// Disc deconvolution meant to be read only where `keep` holds.
    pub fn deconv_disc_focused<T: Real>(&self, radius: i32, theta: f64, keep: &[bool]) -> Result<Image<T>> {
        if keep.len() != self.h * self.w {
            return Err(Error::shape("focus mask does not match the image"));
        }
        if keep.iter().all(|k| *k) {
            return self.deconv_disc(radius, theta);
        }
        check_theta(theta)?;
        self.check_kernel(2 * radius.unsigned_abs() as usize + 1)?;
        Ok(self.apply_focused(&self.disc_transfer(radius)?, theta, keep))
    }

    pub fn deconv<T: Real>(&self, k: &Kernel<T>, theta: f64) -> Result<Image<T>> {
        check_theta(theta)?;
        self.check_kernel(k.side())?;
        Ok(self.apply(&self.transfer(k), theta))
    }

    /// Deconvolution by the full disc of `radius`, with cached transfer.
    pub fn deconv_disc<T: Real>(&self, radius: i32, theta: f64) -> Result<Image<T>> {
        check_theta(theta)?;
        self.check_kernel(2 * radius.unsigned_abs() as usize + 1)?;
        Ok(self.apply(&self.disc_transfer(radius)?, theta))
    }

    fn check_kernel(&self, side: usize) -> Result<()> {
        if side > 2 * self.h.min(self.w) {
            return Err(Error::invalid(format!(
                "kernel side {side} too large for a {}x{} image",
                self.h, self.w
            )));
        }
        Ok(())
    }
}

fn check_theta(theta: f64) -> Result<()> {
    if theta.is_finite() && theta > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("theta must be positive, got {theta}")))
    }
}

/// Wiener deconvolution with transfer `conj(K) / (|K|² + θ)` on the mirror
/// extension of `img`; output clamped to `[0, 1]`.
pub fn wiener_deconv<T: Real>(img: &Image<T>, k: &Kernel<T>, theta: f64) -> Result<Image<T>> {
    check_theta(theta)?;
    WienerPlan::new(img).deconv(k, theta)
}

/// Gathers, per pixel, the layer `radius_of(mag)`; layers are computed once
/// each, in parallel.
fn gather_layers<T: Real>(
    plan: &WienerPlan,
    fused: &Image<T>,
    coc_mag: &FloatMap<T>,
    theta: f64,
    radius_of: impl Fn(f64) -> i32,
) -> Result<Image<T>> {
    fused.plane(0).ensure_same_dims(coc_mag, "COC map")?;
    let picks: Vec<i32> = coc_mag.as_slice().iter().map(|m| radius_of(m.as_f64().abs())).collect();
    let mut needed: Vec<i32> = picks.clone();
    needed.sort_unstable();
    needed.dedup();
    let layers: Vec<Image<T>> = needed
        .par_iter()
        .map(|&r| {
            let keep: Vec<bool> = picks.iter().map(|p| *p == r).collect();
            plan.deconv_disc_focused(r, theta, &keep)
        })
        .collect::<Result<_>>()?;
    if layers.len() == 1 {
        return Ok(layers.into_iter().next().expect("one layer"));
    }
    let slot: HashMap<i32, usize> = needed.iter().enumerate().map(|(i, r)| (*r, i)).collect();
    let (h, w) = fused.dims();
    let planes = (0..fused.channels())
        .map(|c| {
            let data = picks
                .iter()
                .enumerate()
                .map(|(p, r)| layers[slot[r]].plane(c).as_slice()[p])
                .collect();
            FloatMap::from_raw(h, w, data)
        })
        .collect();
    Ok(Image::from_planes_unchecked(planes))
}

/// Runs one branch on the fused image. Deconv branches pick, per pixel, the
/// layer of `round(|coc|)`; pixels outside the branch interval get the layer
/// of the nearest interval endpoint.
pub fn apply_branch<T: Real>(b: &BranchConfig, fused: &Image<T>, coc_mag: &FloatMap<T>) -> Result<Image<T>> {
    match b.kind {
        BranchKind::Passthrough => Ok(fused.clone()),
        BranchKind::Deconv => apply_branch_with(&WienerPlan::new(fused), b, fused, coc_mag),
    }
}

pub fn apply_branch_with<T: Real>(
    plan: &WienerPlan,
    b: &BranchConfig,
    fused: &Image<T>,
    coc_mag: &FloatMap<T>,
) -> Result<Image<T>> {
    match b.kind {
        BranchKind::Passthrough => Ok(fused.clone()),
        BranchKind::Deconv => gather_layers(plan, fused, coc_mag, b.theta, |m| b.layer_for(m)),
    }
}

/// The branch operator evaluated at every pixel's own radius, ignoring its
/// interval: what the branch would produce if every COC were assigned to
/// it. This is the per-radius output the threshold search scores.
pub fn apply_branch_unrestricted<T: Real>(
    plan: &WienerPlan,
    b: &BranchConfig,
    fused: &Image<T>,
    coc_mag: &FloatMap<T>,
) -> Result<Image<T>> {
    match b.kind {
        BranchKind::Passthrough => Ok(fused.clone()),
        BranchKind::Deconv => gather_layers(plan, fused, coc_mag, b.theta, |m| bin_of(m) as i32),
    }
}

/// `Σ_i D_i(p) · out_i(p)`, clamped to `[0, 1]`. Branches whose output is
/// `None` must have an all-zero mask.
fn compose_sparse<T: Real>(outputs: &[Option<&Image<T>>], masks: &DefocusMaskSet<T>) -> Result<Image<T>> {
    if outputs.len() != masks.len() {
        return Err(Error::invalid(format!(
            "{} branch outputs for {} masks",
            outputs.len(),
            masks.len()
        )));
    }
    let template = outputs
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::invalid("no branch outputs"))?;
    let (h, w) = template.dims();
    for (out, mask) in outputs.iter().zip(masks.masks()) {
        match out {
            Some(img) => {
                img.ensure_same_shape(template, "branch outputs")?;
                img.plane(0).ensure_same_dims(mask, "defocus masks")?;
            }
            None if mask.as_slice().iter().any(|v| *v != T::zero()) => {
                return Err(Error::invalid("missing output for a branch with nonzero mask"))
            }
            None => {}
        }
    }
    let planes = (0..template.channels())
        .map(|c| {
            let mut data = vec![T::zero(); h * w];
            data.par_iter_mut().enumerate().for_each(|(p, v)| {
                let mut acc = 0.0;
                for (out, mask) in outputs.iter().zip(masks.masks()) {
                    let d = mask.as_slice()[p];
                    if let (Some(img), true) = (out, d != T::zero()) {
                        acc += d.as_f64() * img.plane(c).as_slice()[p].as_f64();
                    }
                }
                *v = T::of(acc.clamp(0.0, 1.0));
            });
            FloatMap::from_raw(h, w, data)
        })
        .collect();
    Ok(Image::from_planes_unchecked(planes))
}

pub fn compose<T: Real>(outputs: &[Image<T>], masks: &DefocusMaskSet<T>) -> Result<Image<T>> {
    let refs: Vec<Option<&Image<T>>> = outputs.iter().map(Some).collect();
    compose_sparse(&refs, masks)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeblurOptions {
    /// Mask feathering sigma in pixels; 0 gives hard masks.
    pub feather_sigma: f64,
    /// 1-based branches to keep. Each dropped branch's interval is merged
    /// into the nearest kept branch (the lighter one on ties), so the
    /// reduced model still covers every radius.
    pub branches: Option<Vec<usize>>,
    /// Route every pixel to the heaviest branch, which then covers all radii.
    pub no_masks: bool,
}

impl Default for DeblurOptions {
    fn default() -> Self {
        Self {
            feather_sigma: 2.0,
            branches: None,
            no_masks: false,
        }
    }
}

pub struct DeblurOutput<T> {
    pub image: Image<T>,
    pub masks: DefocusMaskSet<T>,
    /// Per-branch outputs; `None` for branches no pixel was routed to.
    pub branch_outputs: Vec<Option<Image<T>>>,
}

/// Fuse, quantize `|coc|` (rounded to whole pixels), run each branch that
/// received pixels, compose.
pub fn deblur<T: Real>(
    pair: &DpPair<T>,
    coc: &FloatMap<T>,
    model: &BranchSet,
    opts: &DeblurOptions,
) -> Result<DeblurOutput<T>> {
    let fused = fuse_input(pair);
    fused.plane(0).ensure_same_dims(coc, "COC map")?;
    let m = model.m();
    let mag = coc.map(|v| v.abs().round());
    let mut labels = assign_labels(&mag, model.thresholds());
    let mut active = model.branches().to_vec();
    let route = if opts.no_masks {
        Some(vec![m - 1; m])
    } else {
        opts.branches.as_ref().map(|keep| subset_routing(keep, m)).transpose()?
    };
    if let Some(route) = route {
        labels.iter_mut().for_each(|l| *l = route[*l]);
        for (k, b) in active.iter_mut().enumerate() {
            let owned: Vec<&BranchConfig> = (0..m).filter(|&i| route[i] == k).map(|i| &model.branches()[i]).collect();
            if let (Some(first), Some(last)) = (owned.first(), owned.last()) {
                b.interval = (first.interval.0, last.interval.1);
                b.closed_above = last.closed_above;
            }
        }
    }
    let (h, w) = fused.dims();
    let masks = DefocusMaskSet::from_labels(&labels, h, w, model.thresholds().clone(), opts.feather_sigma)?;
    let used: Vec<bool> = masks
        .masks()
        .iter()
        .map(|d| d.as_slice().iter().any(|v| *v != T::zero()))
        .collect();
    let needs_plan = active.iter().zip(&used).any(|(b, u)| *u && b.kind == BranchKind::Deconv);
    let plan = needs_plan.then(|| WienerPlan::new(&fused));
    let branch_outputs: Vec<Option<Image<T>>> = active
        .iter()
        .zip(&used)
        .map(|(b, &u)| match (u, b.kind) {
            (false, _) => Ok(None),
            (true, BranchKind::Passthrough) => Ok(Some(fused.clone())),
            (true, BranchKind::Deconv) => {
                let plan = plan.as_ref().expect("plan built for active deconv branches");
                apply_branch_with(plan, b, &fused, &mag).map(Some)
            }
        })
        .collect::<Result<_>>()?;
    let refs: Vec<Option<&Image<T>>> = branch_outputs.iter().map(Option::as_ref).collect();
    let image = compose_sparse(&refs, &masks)?;
    Ok(DeblurOutput {
        image,
        masks,
        branch_outputs,
    })
}

/// For each 0-based branch, the 0-based kept branch its pixels go to.
fn subset_routing(keep: &[usize], m: usize) -> Result<Vec<usize>> {
    if keep.is_empty() {
        return Err(Error::invalid("branch subset is empty"));
    }
    if let Some(bad) = keep.iter().find(|&&i| i == 0 || i > m) {
        return Err(Error::invalid(format!("branch {bad} not in 1..={m}")));
    }
    Ok((0..m)
        .map(|i| {
            keep.iter()
                .map(|k| k - 1)
                .min_by_key(|&k| (k.abs_diff(i), k))
                .expect("nonempty subset")
        })
        .collect())
}
