//! On-disk phantom corpora: `phantom_NNN.vol` / `phantom_NNN.lbl` pairs plus a
//! `manifest.json` recording seeds, checksums and structure statistics.

use super::{DistillError, Result};
use crate::rng::substream;
use crate::volume::{
    gen_phantom, load_labels, load_volume, save_labels, save_volume, LabelVolume, PhantomSpec,
    StructureStats, Volume,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

pub const MANIFEST: &str = "manifest.json";
const FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub name: String,
    pub image: String,
    pub labels: String,
    /// Random stream of `spec.seed` the phantom was drawn from.
    pub stream: u64,
    pub image_sha256: String,
    pub labels_sha256: String,
    pub stats: StructureStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format: u32,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub spec: PhantomSpec,
    pub entries: Vec<CorpusEntry>,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub name: String,
    pub image: Volume,
    pub labels: LabelVolume,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub samples: Vec<Sample>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DistillError + '_ {
    move |source| DistillError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Generates `count` phantoms into `dir` and writes the manifest last.
pub fn write_corpus(
    dir: impl AsRef<Path>,
    spec: &PhantomSpec,
    count: usize,
    dims: [usize; 3],
    spacing: [f64; 3],
) -> Result<CorpusManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let stream = i as u64;
        let mut rng = substream(spec.seed, stream);
        let p = gen_phantom(spec, dims, spacing, &mut rng)?;
        let name = format!("phantom_{i:03}");
        let image = format!("{name}.vol");
        let labels = format!("{name}.lbl");
        save_volume(&p.image, dir.join(&image))?;
        save_labels(&p.labels, dir.join(&labels))?;
        entries.push(CorpusEntry {
            image_sha256: sha256_file(&dir.join(&image))?,
            labels_sha256: sha256_file(&dir.join(&labels))?,
            name,
            image,
            labels,
            stream,
            stats: p.stats,
        });
    }
    let manifest = CorpusManifest {
        format: FORMAT,
        dims,
        spacing,
        spec: spec.clone(),
        entries,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<CorpusManifest> {
    let path = dir.as_ref().join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let m: CorpusManifest =
        serde_json::from_str(&text).map_err(|e| DistillError::Corpus(format!("{}: {e}", path.display())))?;
    if m.format != FORMAT {
        return Err(DistillError::Corpus(format!(
            "{}: unsupported corpus format {}",
            path.display(),
            m.format
        )));
    }
    if m.entries.is_empty() {
        return Err(DistillError::Corpus(format!("{}: corpus is empty", path.display())));
    }
    Ok(m)
}

/// Loads every pair, verifying checksums and dims against the manifest.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Corpus> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        for (file, sum) in [(&e.image, &e.image_sha256), (&e.labels, &e.labels_sha256)] {
            let path = dir.join(file);
            if &sha256_file(&path)? != sum {
                return Err(DistillError::Corpus(format!("{}: checksum mismatch", path.display())));
            }
        }
        let image = load_volume(dir.join(&e.image))?;
        let labels = load_labels(dir.join(&e.labels))?;
        if image.dims() != manifest.dims || labels.dims() != manifest.dims {
            return Err(DistillError::Corpus(format!(
                "{}: dims {:?} differ from manifest {:?}",
                e.name,
                image.dims(),
                manifest.dims
            )));
        }
        samples.push(Sample {
            name: e.name.clone(),
            image,
            labels,
        });
    }
    Ok(Corpus { manifest, samples })
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn classes(&self) -> u16 {
        self.samples.first().map_or(0, |s| s.labels.classes())
    }

    /// `(train, held_out)` with the trailing `holdout` fraction (at least one
    /// sample, and at least one left for training) held out.
    pub fn split(&self, holdout: f64) -> Result<(&[Sample], &[Sample])> {
        let n = self.samples.len();
        if n < 2 {
            return Err(DistillError::Corpus("need at least two samples to split".into()));
        }
        let k = ((n as f64 * holdout).round() as usize).clamp(1, n - 1);
        Ok(self.samples.split_at(n - k))
    }
}

/// Paths of every file that belongs to the corpus in `dir`.
pub fn corpus_files(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let m = read_manifest(dir)?;
    let mut out = vec![dir.join(MANIFEST)];
    for e in &m.entries {
        out.push(dir.join(&e.image));
        out.push(dir.join(&e.labels));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PhantomSpec::default();
        let m = write_corpus(dir.path(), &spec, 2, [16, 16, 16], [1.5; 3]).unwrap();
        assert_eq!(m.entries.len(), 2);
        let c = load_corpus(dir.path()).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.classes(), 4);
        let (train, test) = c.split(0.25).unwrap();
        assert_eq!((train.len(), test.len()), (1, 1));
        assert_eq!(corpus_files(dir.path()).unwrap().len(), 5);
    }

    #[test]
    fn detects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &PhantomSpec::default(), 1, [8, 8, 8], [1.5; 3]).unwrap();
        let path = dir.path().join("phantom_000.vol");
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_corpus(dir.path()), Err(DistillError::Corpus(_))));
        assert!(load_corpus(dir.path().join("missing")).is_err());
    }
}
