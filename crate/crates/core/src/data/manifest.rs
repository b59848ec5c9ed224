//! On-disk datasets: per-sample `MGIT` files indexed by a tab-separated
//! manifest, plus seeded batching.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::mgit::{read_tensor, write_tensor};
use super::{derive_seed, gen_synthetic_pair, sample_id, DataConfig, GeneMixer, PairedSample};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const MIXER_FILE: &str = "mixer.mgit";
const HEADER: &str = "#sample_id\timage\tgenes\tmask\tsplit";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "test" => Ok(Self::Test),
            _ => Err(Error::Data(format!("unknown split {s:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub sample_id: String,
    /// Paths relative to the manifest directory.
    pub image: PathBuf,
    pub genes: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Accepts either the dataset directory or the manifest file itself.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(Error::Data(format!(
                    "{}:{}: expected 5 tab-separated fields, found {}",
                    file.display(),
                    n + 1,
                    f.len()
                )));
            }
            entries.push(ManifestEntry {
                sample_id: f[0].to_string(),
                image: f[1].into(),
                genes: f[2].into(),
                mask: f[3].into(),
                split: f[4].parse()?,
            });
        }
        Ok(Self { root, entries })
    }

    pub fn save(&self) -> Result<()> {
        let mut text = String::from(HEADER);
        text.push('\n');
        for e in &self.entries {
            text.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.sample_id,
                e.image.display(),
                e.genes.display(),
                e.mask.display(),
                e.split
            ));
        }
        let file = self.root.join(MANIFEST_FILE);
        fs::write(&file, text).map_err(|e| Error::io(&file, e))
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn load_entry(&self, e: &ManifestEntry) -> Result<PairedSample> {
        let sample = PairedSample {
            sample_id: e.sample_id.clone(),
            image: read_tensor(self.root.join(&e.image))?,
            genes: read_tensor(self.root.join(&e.genes))?,
            mask: read_tensor(self.root.join(&e.mask))?,
        };
        let img = sample.image.shape();
        if img.len() != 3
            || img[0] != 1
            || img[1..] != *sample.mask.shape()
            || sample.genes.rank() != 1
        {
            return Err(Error::Data(format!(
                "sample {}: image {:?}, mask {:?}, genes {:?}",
                e.sample_id,
                img,
                sample.mask.shape(),
                sample.genes.shape()
            )));
        }
        Ok(sample)
    }

    /// Loads every sample of a split in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<PairedSample>> {
        let entries = self.split(split);
        if entries.is_empty() {
            return Err(Error::Data(format!("split {split} is empty")));
        }
        entries.par_iter().map(|e| self.load_entry(e)).collect()
    }

    /// Batches of samples from one split for one epoch.
    pub fn batches(
        &self,
        split: Split,
        batch: usize,
        epoch_seed: u64,
        drop_last: bool,
    ) -> Result<Vec<Vec<&ManifestEntry>>> {
        let entries = self.split(split);
        let idx = batch_indices(entries.len(), batch, epoch_seed, drop_last)?;
        Ok(idx
            .into_iter()
            .map(|b| b.into_iter().map(|i| entries[i]).collect())
            .collect())
    }
}

/// Seeded shuffle of `0..n` cut into batches of `batch`. The final partial
/// batch is dropped when `drop_last` is set.
pub fn batch_indices(
    n: usize,
    batch: usize,
    epoch_seed: u64,
    drop_last: bool,
) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::Data("cannot batch an empty split".into()));
    }
    if batch == 0 || batch > n {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch} invalid for a split of {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    Ok(order
        .chunks(batch)
        .filter(|c| !drop_last || c.len() == batch)
        .map(<[usize]>::to_vec)
        .collect())
}

/// Rank of each id under SHA-256(seed ‖ id); the lowest `round(f·n)` are
/// the training split.
pub fn assign_splits(ids: &[String], master_seed: u64, train_fraction: f64) -> Vec<Split> {
    let mut keyed: Vec<([u8; 32], usize)> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let mut h = Sha256::new();
            h.update(master_seed.to_le_bytes());
            h.update(id.as_bytes());
            (h.finalize().into(), i)
        })
        .collect();
    keyed.sort();
    let n_train = (train_fraction * ids.len() as f64).round() as usize;
    let mut out = vec![Split::Test; ids.len()];
    for &(_, i) in &keyed[..n_train] {
        out[i] = Split::Train;
    }
    out
}

/// Generates `n_samples` pairs under `dir`, writes their tensors, the mixing
/// matrix and the manifest.
pub fn build_dataset(
    cfg: &DataConfig,
    n_samples: usize,
    master_seed: u64,
    dir: impl AsRef<Path>,
) -> Result<Manifest> {
    cfg.validate()?;
    if n_samples < 10 {
        return Err(Error::InvalidArgument(format!(
            "need at least 10 samples, got {n_samples}"
        )));
    }
    let root = dir.as_ref().to_path_buf();
    let samples_dir = root.join("samples");
    fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;
    let mixer = GeneMixer::new(cfg, master_seed)?;
    write_tensor(root.join(MIXER_FILE), &mixer.w)?;

    let ids: Vec<String> = (0..n_samples).map(sample_id).collect();
    let splits = assign_splits(&ids, master_seed, cfg.train_fraction);
    let entries = ids
        .par_iter()
        .zip(splits.par_iter())
        .enumerate()
        .map(|(i, (id, &split))| {
            let seed = derive_seed(master_seed, "sample", i as u64);
            let (s, _) = gen_synthetic_pair(seed, id, cfg, &mixer)?;
            let rel = |kind: &str| PathBuf::from("samples").join(format!("{id}.{kind}.mgit"));
            let e = ManifestEntry {
                sample_id: id.clone(),
                image: rel("image"),
                genes: rel("genes"),
                mask: rel("mask"),
                split,
            };
            write_tensor(root.join(&e.image), &s.image)?;
            write_tensor(root.join(&e.genes), &s.genes)?;
            write_tensor(root.join(&e.mask), &s.mask)?;
            Ok(e)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest { root, entries };
    manifest.save()?;
    Ok(manifest)
}
