//! Dataset manifest: one JSON document listing every video's ground truth and
//! feature files. Relative paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tensor_file::read_tensor;
use super::StorageError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train, val or test)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    pub mos: f64,
    pub mos_scale: [f64; 2],
    /// `T×D` or `T×D×H×W` frame embeddings.
    pub frames_path: PathBuf,
    /// `C×T'×H'×W'` fragment features.
    pub fragments_path: PathBuf,
    /// `3×T×H×W` clip volume for the temporal context head. When absent the
    /// fragments tensor is used if it has three channels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_path: Option<PathBuf>,
    pub num_frames: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    pub dataset: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEmbeddingPaths {
    pub guide: PathBuf,
    pub pos: PathBuf,
    pub neg: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub entries: Vec<ManifestEntry>,
    pub text_embeddings: TextEmbeddingPaths,
    /// Which encoder produced the embeddings, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<String>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>, text_embeddings: TextEmbeddingPaths) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            entries,
            text_embeddings,
            encoder: None,
            base_dir: PathBuf::new(),
        }
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = dir.into();
        self
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn entry(&self, video_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.video_id == video_id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StorageError> {
        let path = path.as_ref();
        fs::write(path, self.to_json() + "\n").map_err(|e| StorageError::io(path, e))
    }
}

/// Parses a manifest and checks id uniqueness; file contents are checked by
/// [`validate_manifest`].
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest, StorageError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| StorageError::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let m = parse_manifest(&text)?.with_base_dir(base);
    if let Some(id) = first_duplicate(&m) {
        return Err(StorageError::DuplicateVideoId(id));
    }
    Ok(m)
}

pub fn parse_manifest(text: &str) -> Result<Manifest, StorageError> {
    let m: Manifest = serde_json::from_str(text).map_err(|e| StorageError::Json(e.to_string()))?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(StorageError::Unsupported(format!(
            "manifest schema_version {} (expected {SCHEMA_VERSION})",
            m.schema_version
        )));
    }
    Ok(m)
}

fn first_duplicate(m: &Manifest) -> Option<String> {
    let mut seen = HashSet::new();
    m.entries
        .iter()
        .find(|e| !seen.insert(e.video_id.as_str()))
        .map(|e| e.video_id.clone())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValidationIssue {
    DuplicateVideoId { video_id: String },
    MosOutOfRange { video_id: String, mos: f64, lo: f64, hi: f64 },
    BadMosScale { video_id: String },
    UnreadableFile { video_id: String, path: PathBuf, error: String },
    FrameCountMismatch { video_id: String, declared: usize, actual: usize },
    BadRank { video_id: String, path: PathBuf, rank: usize, expected: &'static str },
    EmbeddingWidthMismatch { video_id: String, expected: usize, actual: usize },
    BadTextEmbedding { which: &'static str, error: String },
    Empty,
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DuplicateVideoId { video_id } => write!(f, "duplicate video_id {video_id:?}"),
            Self::MosOutOfRange { video_id, mos, lo, hi } => {
                write!(f, "{video_id}: mos {mos} outside [{lo}, {hi}]")
            }
            Self::BadMosScale { video_id } => write!(f, "{video_id}: mos_scale must satisfy lo < hi"),
            Self::UnreadableFile { video_id, path, error } => {
                write!(f, "{video_id}: cannot read {}: {error}", path.display())
            }
            Self::FrameCountMismatch { video_id, declared, actual } => {
                write!(f, "{video_id}: num_frames {declared} but frames tensor has {actual}")
            }
            Self::BadRank { video_id, path, rank, expected } => {
                write!(f, "{video_id}: {} has rank {rank}, expected {expected}", path.display())
            }
            Self::EmbeddingWidthMismatch { video_id, expected, actual } => {
                write!(f, "{video_id}: embedding width {actual}, text embeddings have {expected}")
            }
            Self::BadTextEmbedding { which, error } => write!(f, "text embedding {which}: {error}"),
            Self::Empty => write!(f, "manifest has no entries"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub entries_checked: usize,
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn into_result(self) -> Result<(), StorageError> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(StorageError::Invalid(self.issues))
        }
    }
}

/// Checks every referenced file and cross-field constraint, collecting all
/// problems rather than stopping at the first.
pub fn validate_manifest(m: &Manifest) -> ValidationReport {
    let mut issues = Vec::new();
    if m.entries.is_empty() {
        issues.push(ValidationIssue::Empty);
    }

    let mut text_width = None;
    for (which, p) in [
        ("guide", &m.text_embeddings.guide),
        ("pos", &m.text_embeddings.pos),
        ("neg", &m.text_embeddings.neg),
    ] {
        match read_tensor(m.resolve(p)) {
            Ok(t) if t.shape().len() == 1 => {
                let w = t.shape()[0];
                if text_width.is_some_and(|tw| tw != w) {
                    issues.push(ValidationIssue::BadTextEmbedding {
                        which,
                        error: format!("width {w} differs from the other text embeddings"),
                    });
                }
                text_width.get_or_insert(w);
                if t.to::<f64>().data().iter().all(|&v| v == 0.0) {
                    issues.push(ValidationIssue::BadTextEmbedding {
                        which,
                        error: "all-zero embedding".into(),
                    });
                }
            }
            Ok(t) => issues.push(ValidationIssue::BadTextEmbedding {
                which,
                error: format!("expected a vector, got shape {:?}", t.shape()),
            }),
            Err(e) => issues.push(ValidationIssue::BadTextEmbedding {
                which,
                error: e.to_string(),
            }),
        }
    }

    let mut seen = HashSet::new();
    for e in &m.entries {
        let id = e.video_id.clone();
        if !seen.insert(e.video_id.as_str()) {
            issues.push(ValidationIssue::DuplicateVideoId { video_id: id.clone() });
        }
        let [lo, hi] = e.mos_scale;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            issues.push(ValidationIssue::BadMosScale { video_id: id.clone() });
        } else if !(e.mos.is_finite() && lo <= e.mos && e.mos <= hi) {
            issues.push(ValidationIssue::MosOutOfRange {
                video_id: id.clone(),
                mos: e.mos,
                lo,
                hi,
            });
        }

        let frames = m.resolve(&e.frames_path);
        match read_tensor(&frames) {
            Ok(t) => {
                let s = t.shape();
                if s.len() != 2 && s.len() != 4 {
                    issues.push(ValidationIssue::BadRank {
                        video_id: id.clone(),
                        path: frames,
                        rank: s.len(),
                        expected: "2 (T×D) or 4 (T×D×H×W)",
                    });
                } else {
                    if s[0] != e.num_frames {
                        issues.push(ValidationIssue::FrameCountMismatch {
                            video_id: id.clone(),
                            declared: e.num_frames,
                            actual: s[0],
                        });
                    }
                    if let Some(w) = text_width.filter(|&w| w != s[1]) {
                        issues.push(ValidationIssue::EmbeddingWidthMismatch {
                            video_id: id.clone(),
                            expected: w,
                            actual: s[1],
                        });
                    }
                }
            }
            Err(err) => issues.push(ValidationIssue::UnreadableFile {
                video_id: id.clone(),
                path: frames,
                error: err.to_string(),
            }),
        }

        let volumes = std::iter::once(&e.fragments_path).chain(e.clip_path.as_ref());
        for p in volumes {
            let path = m.resolve(p);
            match read_tensor(&path) {
                Ok(t) if t.shape().len() == 4 => {}
                Ok(t) => issues.push(ValidationIssue::BadRank {
                    video_id: id.clone(),
                    path,
                    rank: t.shape().len(),
                    expected: "4 (C×T×H×W)",
                }),
                Err(err) => issues.push(ValidationIssue::UnreadableFile {
                    video_id: id.clone(),
                    path,
                    error: err.to_string(),
                }),
            }
        }
    }
    ValidationReport {
        entries_checked: m.entries.len(),
        issues,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use crate::storage::write_tensor;

    fn fixture(dir: &Path, frames_t: usize, num_frames: usize) -> Manifest {
        let d = 4;
        for (name, v) in [("guide", 1.0), ("pos", 2.0), ("neg", -1.0)] {
            write_tensor(&Tensor::<f32>::full(vec![d], v), dir.join(format!("{name}.dvlt"))).unwrap();
        }
        write_tensor(&Tensor::<f32>::ones(vec![frames_t, d]), dir.join("v0_frames.dvlt")).unwrap();
        write_tensor(&Tensor::<f32>::ones(vec![8, 2, 2, 2]), dir.join("v0_frag.dvlt")).unwrap();
        Manifest::new(
            vec![ManifestEntry {
                video_id: "v0".into(),
                mos: 3.5,
                mos_scale: [1.0, 5.0],
                frames_path: "v0_frames.dvlt".into(),
                fragments_path: "v0_frag.dvlt".into(),
                clip_path: None,
                num_frames,
                split: Some(Split::Train),
                dataset: "unit".into(),
            }],
            TextEmbeddingPaths {
                guide: "guide.dvlt".into(),
                pos: "pos.dvlt".into(),
                neg: "neg.dvlt".into(),
            },
        )
    }

    #[test]
    fn minimal_manifest_loads_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let m = fixture(dir.path(), 3, 3);
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded.entries, m.entries);
        let report = validate_manifest(&loaded);
        assert!(report.is_ok(), "{:?}", report.issues);
    }

    #[test]
    fn duplicate_id_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = fixture(dir.path(), 3, 3);
        m.entries.push(m.entries[0].clone());
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("v0"), "{err}");
        let report = validate_manifest(&m.with_base_dir(dir.path()));
        assert!(report.issues.contains(&ValidationIssue::DuplicateVideoId { video_id: "v0".into() }));
    }

    #[test]
    fn frame_count_mismatch_fails_validation() {
        let dir = tempfile::tempdir().unwrap();
        let m = fixture(dir.path(), 5, 3).with_base_dir(dir.path());
        let report = validate_manifest(&m);
        assert_eq!(
            report.issues,
            vec![ValidationIssue::FrameCountMismatch {
                video_id: "v0".into(),
                declared: 3,
                actual: 5
            }]
        );
    }

    #[test]
    fn mos_outside_scale_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = fixture(dir.path(), 3, 3).with_base_dir(dir.path());
        m.entries[0].mos = 9.0;
        m.entries[0].fragments_path = "nope.dvlt".into();
        let report = validate_manifest(&m);
        assert_eq!(report.issues.len(), 2);
        assert!(matches!(report.issues[0], ValidationIssue::MosOutOfRange { .. }));
        assert!(matches!(report.issues[1], ValidationIssue::UnreadableFile { .. }));
    }

    #[test]
    fn garbage_json_is_structured_error() {
        assert!(matches!(parse_manifest("{"), Err(StorageError::Json(_))));
        assert!(matches!(parse_manifest("[]"), Err(StorageError::Json(_))));
    }
}
