//! Sectioned run configuration: `[camera]`, `[estimation]`, `[model]`,
//! `[crop]`. Missing sections take defaults; unknown sections and keys are
//! errors.

use std::path::Path;

use anyhow::{bail, Context, Result};
use dpdefocus::cocest::EstimationConfig;
use dpdefocus::kv::{KvFile, KvSection};
use dpdefocus::maskgen::ThresholdSet;
use dpdefocus::CameraModel32;

const SECTIONS: [&str; 4] = ["camera", "estimation", "model", "crop"];
const MODEL_KEYS: [&str; 4] = ["M", "thresholds", "max_outer", "feather_sigma"];
const CROP_KEYS: [&str; 3] = ["size", "overlap", "discard"];

/// Starting thresholds for `fit`.
#[derive(Clone, Debug, PartialEq)]
pub enum InitialThresholds {
    Uniform,
    Given(ThresholdSet),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelOptions {
    pub m: usize,
    pub thresholds: InitialThresholds,
    pub max_outer: usize,
    pub feather_sigma: f64,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            m: 4,
            thresholds: InitialThresholds::Uniform,
            max_outer: 10,
            feather_sigma: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CropOptions {
    pub size: usize,
    /// Fraction of the window shared by neighbouring crops.
    pub overlap: f64,
    /// Fraction of crops (lowest sharpness) dropped.
    pub discard: f64,
}

impl Default for CropOptions {
    fn default() -> Self {
        Self {
            size: 512,
            overlap: 0.6,
            discard: 0.3,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    pub camera: Option<CameraModel32>,
    pub estimation: EstimationConfig,
    pub model: ModelOptions,
    pub crop: CropOptions,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("in config {}", p.display()))
            }
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = KvFile::parse(text)?;
        if let Some(k) = kv.root().keys().next() {
            bail!(dpdefocus::Error::InvalidArgument(format!("key `{k}` outside any section")));
        }
        for name in kv.section_names() {
            if !name.is_empty() && !SECTIONS.contains(&name) {
                bail!(dpdefocus::Error::InvalidArgument(format!("unknown section [{name}]")));
            }
        }
        let camera = kv.section("camera").map(CameraModel32::from_kv).transpose()?;
        let estimation = match kv.section("estimation") {
            Some(s) => EstimationConfig::from_kv(s)?,
            None => EstimationConfig::default(),
        };
        let model = kv.section("model").map(parse_model).transpose()?.unwrap_or_default();
        let crop = kv.section("crop").map(parse_crop).transpose()?.unwrap_or_default();
        Ok(Self {
            camera,
            estimation,
            model,
            crop,
        })
    }

    pub fn camera(&self) -> Result<&CameraModel32> {
        self.camera
            .as_ref()
            .ok_or_else(|| dpdefocus::Error::InvalidArgument("config has no [camera] section".into()).into())
    }
}

fn parse_model(s: &KvSection) -> Result<ModelOptions> {
    s.reject_unknown(&MODEL_KEYS)?;
    let d = ModelOptions::default();
    let m = s.parse("M")?.unwrap_or(d.m);
    let thresholds = match s.get("thresholds") {
        None | Some("fit") | Some("uniform") => InitialThresholds::Uniform,
        Some(list) => {
            let r = list
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| dpdefocus::Error::InvalidArgument(format!("thresholds: {e}")))?;
            InitialThresholds::Given(ThresholdSet::new(r)?)
        }
    };
    if let InitialThresholds::Given(t) = &thresholds {
        if t.m() != m {
            bail!(dpdefocus::Error::InvalidArgument(format!(
                "{} thresholds describe {} branches, M = {m}",
                t.bounds().len(),
                t.m()
            )));
        }
    }
    let opts = ModelOptions {
        m,
        thresholds,
        max_outer: s.parse("max_outer")?.unwrap_or(d.max_outer),
        feather_sigma: s.parse("feather_sigma")?.unwrap_or(d.feather_sigma),
    };
    if opts.m == 0 || opts.max_outer == 0 || !(opts.feather_sigma >= 0.0) {
        bail!(dpdefocus::Error::InvalidArgument("[model] needs M >= 1, max_outer >= 1, feather_sigma >= 0".into()));
    }
    Ok(opts)
}

fn parse_crop(s: &KvSection) -> Result<CropOptions> {
    s.reject_unknown(&CROP_KEYS)?;
    let d = CropOptions::default();
    let c = CropOptions {
        size: s.parse("size")?.unwrap_or(d.size),
        overlap: s.parse("overlap")?.unwrap_or(d.overlap),
        discard: s.parse("discard")?.unwrap_or(d.discard),
    };
    if c.size == 0 || !(0.0..1.0).contains(&c.overlap) || !(0.0..1.0).contains(&c.discard) {
        bail!(dpdefocus::Error::InvalidArgument("[crop] needs size > 0, overlap and discard in [0, 1)".into()));
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_config_parses() {
        let cfg = RunConfig::parse(
            "[camera]\nf0_mm = 50\nf_number = 2\nfocus_mm = 1500\npixel_pitch_mm = 0.004\n\
             [estimation]\nlambda = 4\ncandidates = -10..10\n\
             [model]\nM = 3\nthresholds = 0, 4, 12, 25\n\
             [crop]\nsize = 256\n",
        )
        .unwrap();
        assert!(cfg.camera.is_some());
        assert_eq!(cfg.estimation.lambda, 4.0);
        assert_eq!(cfg.estimation.candidates.len(), 21);
        assert_eq!(cfg.model.m, 3);
        assert_eq!(
            cfg.model.thresholds,
            InitialThresholds::Given(ThresholdSet::new(vec![0.0, 4.0, 12.0, 25.0]).unwrap())
        );
        assert_eq!(cfg.crop.size, 256);
        assert_eq!(cfg.crop.overlap, 0.6);
    }

    #[test]
    fn typos_are_rejected() {
        assert!(RunConfig::parse("[model]\nMM = 3\n").is_err());
        assert!(RunConfig::parse("[modle]\nM = 3\n").is_err());
        assert!(RunConfig::parse("M = 3\n").is_err());
        assert!(RunConfig::parse("[model]\nM = 3\nthresholds = 0, 5, 25\n").is_err());
        assert!(RunConfig::parse("[crop]\noverlap = 1.5\n").is_err());
    }

    #[test]
    fn defaults_without_file() {
        let cfg = RunConfig::load(None).unwrap();
        assert_eq!(cfg.model, ModelOptions::default());
        assert_eq!(cfg.crop, CropOptions::default());
        assert!(cfg.camera().is_err());
    }
}
