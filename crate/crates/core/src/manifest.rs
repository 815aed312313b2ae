//! Dataset manifests: one `image_path,truth_mask_path,split` line per image.
//!
//! Relative paths resolve against the manifest's directory. Blank lines and
//! lines starting with `#` are skipped. The split column is optional and
//! defaults to `test`; the truth column may be empty for unlabelled images.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    /// Used to fit the association potential.
    Assoc,
    /// Used to select the interaction weight.
    Beta,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "assoc" => Ok(Split::Assoc),
            "beta" => Ok(Split::Beta),
            "test" | "" => Ok(Split::Test),
            other => Err(Error::parse("manifest", format!("unknown split {other:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Assoc => "assoc",
            Split::Beta => "beta",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub truth: Option<PathBuf>,
    pub split: Split,
}

impl ManifestEntry {
    /// Short name used in reports: the image file name.
    pub fn name(&self) -> String {
        self.image
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.image.display().to_string())
    }
}

pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let resolve = |p: &str| {
        let p = Path::new(p.trim());
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 2 || fields.len() > 3 || fields[0].trim().is_empty() {
            return Err(Error::parse(
                "manifest",
                format!("line {}: expected image,truth[,split]", lineno + 1),
            ));
        }
        let truth = (!fields[1].trim().is_empty()).then(|| resolve(fields[1]));
        let split = fields.get(2).copied().unwrap_or("").parse()?;
        entries.push(ManifestEntry {
            image: resolve(fields[0]),
            truth,
            split,
        });
    }
    Ok(entries)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base)
}

/// Render one manifest line with paths as given.
pub fn manifest_line(image: &str, truth: &str, split: Split) -> String {
    format!("{image},{truth},{split}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_relative_paths_and_splits() {
        let text = "# header\nsky_000.png,sky_000.truth.png,assoc\n\n/abs/b.png,,test\nc.png,c.t.png\n";
        let e = parse_manifest(text, Path::new("/data")).unwrap();
        assert_eq!(e.len(), 3);
        assert_eq!(e[0].image, PathBuf::from("/data/sky_000.png"));
        assert_eq!(e[0].split, Split::Assoc);
        assert_eq!(e[1].image, PathBuf::from("/abs/b.png"));
        assert_eq!(e[1].truth, None);
        assert_eq!(e[2].split, Split::Test);
        assert_eq!(e[0].name(), "sky_000.png");
    }

    #[test]
    fn rejects_unknown_split_and_bad_arity() {
        assert!(parse_manifest("a.png,b.png,train", Path::new(".")).is_err());
        assert!(parse_manifest("a.png", Path::new(".")).is_err());
    }
}
