//! Sliding-window cropping of a manifest (experimental).
//!
//! Windows of `size` pixels overlap by `overlap` of their side; the last
//! window in each direction is pinned to the image edge. All windows of the
//! dataset are ranked by the variance of the Laplacian of their sharpest
//! available image (the target, else the fused pair) and the flattest
//! `discard` fraction is dropped.

use anyhow::Result;
use dpdefocus::imgcore::{load_image, load_pfm, save_image, save_pfm, BitDepth, FloatMap, Image};
use dpdefocus::branches::fuse_input;
use dpdefocus::{DpPair32, Error, Image32};
use rayon::prelude::*;

use crate::commands::{ensure_dir, write_text};
use crate::config::RunConfig;
use crate::manifest::{Manifest, ManifestRow};
use crate::CropArgs;

/// Window origins along one axis of length `len`.
pub fn window_starts(len: usize, size: usize, overlap: f64) -> Vec<usize> {
    let stride = ((size as f64 * (1.0 - overlap)).round() as usize).max(1);
    let last = len - size;
    let mut v: Vec<usize> = (0..=last).step_by(stride).collect();
    if *v.last().expect("at least the origin") != last {
        v.push(last);
    }
    v
}

/// Variance of the 4-neighbour Laplacian over the window's interior.
pub fn laplacian_variance(luma: &FloatMap<f32>, y0: usize, x0: usize, size: usize) -> f64 {
    if size < 3 {
        return 0.0;
    }
    let at = |y: usize, x: usize| luma.get(y0 + y, x0 + x) as f64;
    let (mut s, mut s2, mut n) = (0.0, 0.0, 0.0);
    for y in 1..size - 1 {
        for x in 1..size - 1 {
            let l = at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1) - 4.0 * at(y, x);
            s += l;
            s2 += l * l;
            n += 1.0;
        }
    }
    let mean = s / n;
    (s2 / n - mean * mean).max(0.0)
}

fn crop_map(m: &FloatMap<f32>, y0: usize, x0: usize, size: usize) -> FloatMap<f32> {
    FloatMap::from_fn(size, size, |y, x| m.get(y0 + y, x0 + x))
}

fn crop_image(img: &Image32, y0: usize, x0: usize, size: usize) -> Result<Image32> {
    Ok(Image::from_planes(img.planes().iter().map(|p| crop_map(p, y0, x0, size)).collect())?)
}

struct Loaded {
    left: Image32,
    right: Image32,
    target: Option<Image32>,
    depth: Option<FloatMap<f32>>,
    coc: Option<FloatMap<f32>>,
}

fn load_row(row: &ManifestRow, size: usize) -> Result<Loaded> {
    let left: Image32 = load_image(&row.left, false)?;
    let right: Image32 = load_image(&row.right, false)?;
    let (h, w) = left.dims();
    if right.dims() != (h, w) {
        return Err(Error::ShapeMismatch(format!("{} and {} differ in size", row.left.display(), row.right.display())).into());
    }
    if size > h || size > w {
        return Err(Error::InvalidArgument(format!("crop size {size} exceeds {} ({h}x{w})", row.left.display())).into());
    }
    let target = row.target.as_ref().map(|p| load_image::<f32>(p, false)).transpose()?;
    let depth = row.depth.as_ref().map(load_pfm).transpose()?;
    let coc = row.coc.as_ref().map(load_pfm).transpose()?;
    let same = target.as_ref().map_or(true, |t| t.dims() == (h, w))
        && depth.as_ref().map_or(true, |d| d.dims() == (h, w))
        && coc.as_ref().map_or(true, |c| c.dims() == (h, w));
    if !same {
        return Err(Error::ShapeMismatch(format!("images of row {} differ in size", row.left.display())).into());
    }
    Ok(Loaded {
        left,
        right,
        target,
        depth,
        coc,
    })
}

pub fn run(a: &CropArgs, bits: BitDepth) -> Result<()> {
    let opts = RunConfig::load(a.config.as_deref())?.crop;
    let manifest = Manifest::load(&a.manifest)?;
    let size = opts.size;
    let rows: Vec<Loaded> = manifest.rows.par_iter().map(|r| load_row(r, size)).collect::<Result<_>>()?;

    // (row, y, x, score) for every window, in a fixed order
    let mut windows: Vec<(usize, usize, usize, f64)> = rows
        .par_iter()
        .enumerate()
        .flat_map_iter(|(i, r)| {
            let luma = match &r.target {
                Some(t) => t.luma(),
                None => fuse_input(&DpPair32::new(r.left.clone(), r.right.clone()).expect("dims checked")).luma(),
            };
            let (h, w) = r.left.dims();
            let ys = window_starts(h, size, opts.overlap);
            let xs = window_starts(w, size, opts.overlap);
            ys.into_iter()
                .flat_map(move |y| xs.clone().into_iter().map(move |x| (y, x)))
                .map(move |(y, x)| (i, y, x, laplacian_variance(&luma, y, x, size)))
                .collect::<Vec<_>>()
        })
        .collect();
    let n_drop = (windows.len() as f64 * opts.discard).floor() as usize;
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.sort_by(|&p, &q| windows[p].3.total_cmp(&windows[q].3).then(p.cmp(&q)));
    let mut keep = vec![true; windows.len()];
    for &k in &order[..n_drop] {
        keep[k] = false;
    }
    let mut idx = 0;
    windows.retain(|_| {
        idx += 1;
        keep[idx - 1]
    });

    ensure_dir(&a.out)?;
    let has = |f: fn(&Loaded) -> bool| rows.iter().any(f);
    let (with_t, with_d, with_c) = (has(|r| r.target.is_some()), has(|r| r.depth.is_some()), has(|r| r.coc.is_some()));
    let lines: Vec<String> = windows
        .par_iter()
        .map(|&(i, y, x, _)| -> Result<String> {
            let r = &rows[i];
            let stem = format!("r{i:04}_y{y:05}_x{x:05}");
            let png = |img: &Image32, tag: &str| -> Result<String> {
                let name = format!("{stem}_{tag}.png");
                save_image(&crop_image(img, y, x, size)?, a.out.join(&name), bits)?;
                Ok(name)
            };
            let pfm = |m: &FloatMap<f32>, tag: &str| -> Result<String> {
                let name = format!("{stem}_{tag}.pfm");
                save_pfm(&crop_map(m, y, x, size), a.out.join(&name))?;
                Ok(name)
            };
            let mut cols = vec![png(&r.left, "left")?, png(&r.right, "right")?];
            if with_t {
                cols.push(r.target.as_ref().map(|t| png(t, "target")).transpose()?.unwrap_or_default());
            }
            if with_d {
                cols.push(r.depth.as_ref().map(|d| pfm(d, "depth")).transpose()?.unwrap_or_default());
            }
            if with_c {
                cols.push(r.coc.as_ref().map(|c| pfm(c, "coc")).transpose()?.unwrap_or_default());
            }
            Ok(cols.join(","))
        })
        .collect::<Result<_>>()?;

    let mut header = vec!["left", "right"];
    for (on, name) in [(with_t, "target"), (with_d, "depth"), (with_c, "coc")] {
        if on {
            header.push(name);
        }
    }
    let mut text = header.join(",") + "\n";
    for l in &lines {
        text += l;
        text.push('\n');
    }
    write_text(&a.out.join("manifest.csv"), &text)?;
    eprintln!("kept {} of {} windows", windows.len(), windows.len() + n_drop);
    Ok(())
}
