//! Dataset manifests: a CSV with a header naming the columns `left`,
//! `right` (required) and `target`, `depth`, `coc` (optional). Relative paths
//! resolve against the manifest's own directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dpdefocus::Error;

const COLUMNS: [&str; 5] = ["left", "right", "target", "depth", "coc"];

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub left: PathBuf,
    pub right: PathBuf,
    pub target: Option<PathBuf>,
    pub depth: Option<PathBuf>,
    /// Ground-truth signed COC map (PFM), e.g. as written by `synth`.
    pub coc: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct Manifest {
    /// Directory relative paths were resolved against.
    #[allow(dead_code)]
    pub base: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e,
            })
            .with_context(|| "reading manifest")?;
        let base = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let m = Self::parse(&text, &base).with_context(|| format!("in manifest {}", path.display()))?;
        for row in &m.rows {
            for p in row.paths() {
                if !p.is_file() {
                    bail!(Error::Io {
                        path: p.to_path_buf(),
                        source: std::io::Error::new(std::io::ErrorKind::NotFound, "listed in manifest but missing"),
                    });
                }
            }
        }
        Ok(m)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let header: Vec<String> = reader
            .headers()
            .map_err(|e| Error::InvalidArgument(format!("manifest header: {e}")))?
            .iter()
            .map(str::to_string)
            .collect();
        for h in &header {
            if !COLUMNS.contains(&h.as_str()) {
                bail!(Error::InvalidArgument(format!("unknown manifest column `{h}`")));
            }
        }
        let col = |name: &str| header.iter().position(|h| h == name);
        let (Some(li), Some(ri)) = (col("left"), col("right")) else {
            bail!(Error::InvalidArgument("manifest needs `left` and `right` columns".into()));
        };
        let (ti, di, ci) = (col("target"), col("depth"), col("coc"));
        let resolve = |s: &str| -> Option<PathBuf> {
            if s.is_empty() {
                None
            } else {
                let p = Path::new(s);
                Some(if p.is_absolute() { p.to_path_buf() } else { base.join(p) })
            }
        };
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Parse {
                line: i + 2,
                msg: e.to_string(),
            })?;
            let field = |idx: Option<usize>| idx.and_then(|k| rec.get(k)).and_then(resolve);
            let (Some(left), Some(right)) = (field(Some(li)), field(Some(ri))) else {
                bail!(Error::Parse {
                    line: i + 2,
                    msg: "empty left or right path".into()
                });
            };
            rows.push(ManifestRow {
                left,
                right,
                target: field(ti),
                depth: field(di),
                coc: field(ci),
            });
        }
        if rows.is_empty() {
            bail!(Error::InvalidArgument("manifest has no rows".into()));
        }
        Ok(Self {
            base: base.to_path_buf(),
            rows,
        })
    }
}

impl ManifestRow {
    pub fn paths(&self) -> impl Iterator<Item = &Path> {
        [Some(&self.left), Some(&self.right), self.target.as_ref(), self.depth.as_ref(), self.coc.as_ref()]
            .into_iter()
            .flatten()
            .map(PathBuf::as_path)
    }
}
