use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dpdefocus::branches::{deblur as run_deblur, fuse_input, BranchSet, DeblurOptions};
use dpdefocus::cocest::{colorize_coc, estimate_coc as run_estimate};
use dpdefocus::dppsf::{add_gaussian_noise, render_dp_pair};
use dpdefocus::imgcore::{load_image, load_pfm, save_image, save_pfm, write_atomic, BitDepth};
use dpdefocus::kv::KvFile;
use dpdefocus::maskgen::{history_csv, search_thresholds, Sample, SearchOptions, ThresholdSet};
use dpdefocus::metrics::{residual_map, QualityReport};
use dpdefocus::{CocMap, DpPair32, Error, Image32};
use rayon::prelude::*;

use crate::config::{InitialThresholds, RunConfig};
use crate::manifest::{Manifest, ManifestRow};
use crate::{DeblurArgs, EstimateArgs, EvalArgs, FitArgs, NotConverged, SynthArgs};

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, |tmp| {
        let mut f = std::fs::File::create(tmp).map_err(|e| Error::Io {
            path: tmp.to_path_buf(),
            source: e,
        })?;
        f.write_all(text.as_bytes())
            .and_then(|_| f.sync_all())
            .map_err(|e| Error::Io {
                path: tmp.to_path_buf(),
                source: e,
            })
    })?;
    Ok(())
}

pub fn load_pair(left: &Path, right: &Path) -> Result<DpPair32> {
    let l: Image32 = load_image(left, false)?;
    let r: Image32 = load_image(right, false)?;
    DpPair32::new(l, r).with_context(|| format!("pair {} / {}", left.display(), right.display()))
}

pub fn synth(a: &SynthArgs, bits: BitDepth) -> Result<()> {
    let cfg = RunConfig::load(Some(&a.config))?;
    let camera = cfg.camera()?;
    let sharp: Image32 = load_image(&a.sharp, false)?;
    let depth = load_pfm(&a.depth)?;
    let coc = camera.depth_to_coc_map(&depth)?;
    let pair = render_dp_pair(&sharp, &coc)?;
    let pair = if a.noise > 0.0 {
        let (l, r) = pair.into_views();
        let seed = a.seed.wrapping_mul(2);
        DpPair32::new(
            add_gaussian_noise(&l, a.noise, seed)?,
            add_gaussian_noise(&r, a.noise, seed.wrapping_add(1))?,
        )?
    } else if a.noise == 0.0 {
        pair
    } else {
        return Err(Error::InvalidArgument(format!("noise sigma {} must be >= 0", a.noise)).into());
    };
    ensure_dir(&a.out)?;
    save_image(pair.left(), a.out.join("left.png"), bits)?;
    save_image(pair.right(), a.out.join("right.png"), bits)?;
    save_pfm(&coc, a.out.join("coc.pfm"))?;
    save_image(&fuse_input(&pair), a.out.join("fused.png"), bits)?;
    Ok(())
}

pub fn estimate_coc(a: &EstimateArgs) -> Result<()> {
    let mut est = RunConfig::load(a.config.as_deref())?.estimation;
    if let Some(l) = a.lambda {
        est.lambda = l;
        est.validate()?;
    }
    let pair = load_pair(&a.left, &a.right)?;
    let e = run_estimate(&pair, &est)?;
    ensure_dir(&a.out)?;
    save_pfm(&e.coc, a.out.join("coc.pfm"))?;
    save_pfm(&e.confidence, a.out.join("confidence.pfm"))?;
    save_image(&colorize_coc(&e.coc), a.out.join("coc_preview.png"), BitDepth::Eight)?;
    Ok(())
}

/// COC for a manifest row: the `coc` column, else depth through the camera,
/// else an estimate from the pair.
fn row_coc(row: &ManifestRow, pair: &DpPair32, cfg: &RunConfig) -> Result<CocMap> {
    if let Some(p) = &row.coc {
        return Ok(load_pfm(p)?);
    }
    if let Some(p) = &row.depth {
        return Ok(cfg.camera()?.depth_to_coc_map(&load_pfm(p)?)?);
    }
    eprintln!(
        "warning: no ground-truth COC for {}; using an estimate (threshold accuracy not guaranteed)",
        row.left.display()
    );
    Ok(run_estimate(pair, &cfg.estimation)?.coc)
}

fn load_samples(path: &Path, cfg: &RunConfig) -> Result<Vec<Sample<f32>>> {
    let manifest = Manifest::load(path)?;
    manifest
        .rows
        .par_iter()
        .map(|row| {
            let target = row.target.as_ref().ok_or_else(|| {
                Error::InvalidArgument(format!("{}: row {} has no target", path.display(), row.left.display()))
            })?;
            let pair = load_pair(&row.left, &row.right)?;
            let sharp: Image32 = load_image(target, false)?;
            let coc = row_coc(row, &pair, cfg)?;
            Ok(Sample::new(pair, sharp, coc)?)
        })
        .collect()
}

pub fn fit(a: &FitArgs) -> Result<()> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let train = load_samples(&a.train, &cfg).context("loading training set")?;
    let val = load_samples(&a.val, &cfg).context("loading validation set")?;
    let mo = &cfg.model;
    let thresholds = match &mo.thresholds {
        InitialThresholds::Uniform => ThresholdSet::uniform(mo.m)?,
        InitialThresholds::Given(t) => t.clone(),
    };
    let initial = BranchSet::new(thresholds, &vec![dpdefocus::branches::DEFAULT_THETA; mo.m - 1])?;
    let opts = SearchOptions {
        max_outer: mo.max_outer,
        ..SearchOptions::default()
    };
    let outcome = search_thresholds(&train, &val, &initial, &opts)?;
    let history = a.history.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".history.csv");
        PathBuf::from(s)
    });
    write_text(&history, &history_csv(&outcome.history, mo.m))?;
    if let Some(&b) = outcome.starved.first() {
        return Err(Error::StarvedBranch { branch: b }.into());
    }
    write_text(&a.out, &outcome.branches.to_model_string(Some(outcome.converged)))?;
    eprintln!("thresholds {} after {} rounds", outcome.thresholds(), outcome.history.len());
    if !outcome.converged {
        return Err(NotConverged {
            rounds: outcome.history.len(),
        }
        .into());
    }
    Ok(())
}

pub fn load_model(path: &Path) -> Result<BranchSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let kv = KvFile::parse(&text)?;
    Ok(BranchSet::from_kv(kv.root()).with_context(|| format!("model {}", path.display()))?)
}

pub fn deblur(a: &DeblurArgs, bits: BitDepth) -> Result<()> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let model = load_model(&a.model)?;
    let pair = load_pair(&a.left, &a.right)?;
    let coc = match &a.coc {
        Some(p) => load_pfm(p)?,
        None => run_estimate(&pair, &cfg.estimation)?.coc,
    };
    let feather_sigma = a.feather.unwrap_or(cfg.model.feather_sigma);
    if !(feather_sigma >= 0.0 && feather_sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("feather sigma {feather_sigma} must be >= 0")).into());
    }
    let opts = DeblurOptions {
        feather_sigma,
        branches: a.branches.clone(),
        no_masks: a.no_masks,
    };
    let out = run_deblur(&pair, &coc, &model, &opts)?;
    if let Some(dir) = &a.emit_branches {
        ensure_dir(dir)?;
        for (i, img) in out.branch_outputs.iter().enumerate() {
            if let Some(img) = img {
                save_image(img, dir.join(format!("branch{}.png", i + 1)), bits)?;
            }
        }
    }
    save_image(&out.image, &a.out, bits)?;
    Ok(())
}

pub fn eval(a: &EvalArgs, bits: BitDepth) -> Result<()> {
    let result: Image32 = load_image(&a.result, false)?;
    let truth: Image32 = load_image(&a.truth, false)?;
    let q = QualityReport::measure(&result, &truth)?;
    println!("psnr={:.4}", q.psnr);
    println!("ssim={:.4}", q.ssim);
    println!("mae={:.4}", q.mae);
    if let Some(p) = &a.residual {
        save_image(&residual_map(&result, &truth, a.gain)?, p, bits)?;
    }
    Ok(())
}
