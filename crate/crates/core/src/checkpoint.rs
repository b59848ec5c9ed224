//! Checkpoint directories:
//!
//! ```text
//! <dir>/config.txt          full run configuration
//! <dir>/params/<name>.mgit  one tensor per parameter, plus stats.gene_mean / stats.gene_std
//! <dir>/meta.txt            stage, step counter and per-step loss history
//! ```

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::data::mgit::{read_tensor, write_tensor};
use crate::error::{Error, Result};
use crate::gene::GeneStats;
use crate::params::ParamStore;
use crate::tensor::Tensor;

const STATS_MEAN: &str = "stats.gene_mean";
const STATS_STD: &str = "stats.gene_std";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ParamStore,
    pub stats: GeneStats,
    /// `pretrain` or `finetune`.
    pub stage: String,
    pub step: u64,
    pub loss_history: Vec<f64>,
}

impl Checkpoint {
    pub fn has_decoder(&self) -> bool {
        self.params.names().any(|n| n.starts_with("decoder."))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let pdir = dir.join("params");
        if pdir.exists() {
            fs::remove_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
        }
        fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
        self.config.save(dir.join("config.txt"))?;
        for (name, t) in self.params.iter() {
            if name.starts_with("stats.") || name.contains(['/', '\\']) {
                return Err(Error::Checkpoint(format!(
                    "unsupported parameter name `{name}`"
                )));
            }
            write_tensor(pdir.join(format!("{name}.mgit")), t)?;
        }
        write_tensor(
            pdir.join(format!("{STATS_MEAN}.mgit")),
            &Tensor::vector(self.stats.mean.clone())?,
        )?;
        write_tensor(
            pdir.join(format!("{STATS_STD}.mgit")),
            &Tensor::vector(self.stats.std.clone())?,
        )?;
        let history: Vec<String> = self.loss_history.iter().map(f64::to_string).collect();
        let meta = format!(
            "stage = {}\nstep = {}\nloss_history = {}\n",
            self.stage,
            self.step,
            history.join(" ")
        );
        let path = dir.join("meta.txt");
        fs::write(&path, meta).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config = RunConfig::load(dir.join("config.txt"))?;
        let pdir = dir.join("params");
        let listing = fs::read_dir(&pdir).map_err(|e| Error::io(&pdir, e))?;
        let mut params = ParamStore::new();
        let (mut mean, mut std) = (None, None);
        for entry in listing {
            let path = entry.map_err(|e| Error::io(&pdir, e))?.path();
            let Some(name) = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_suffix(".mgit"))
            else {
                continue;
            };
            let t = read_tensor(&path)?;
            match name {
                STATS_MEAN => mean = Some(t.into_data()),
                STATS_STD => std = Some(t.into_data()),
                _ => params.insert(name, t),
            }
        }
        let (Some(mean), Some(std)) = (mean, std) else {
            return Err(Error::Checkpoint(format!(
                "{}: missing gene statistics",
                pdir.display()
            )));
        };
        if mean.len() != config.data.n_genes || std.len() != config.data.n_genes {
            return Err(Error::Checkpoint(
                "gene statistics do not match data.n_genes".into(),
            ));
        }

        let path = dir.join("meta.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let (mut stage, mut step, mut loss_history) = (None, None, Vec::new());
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("meta.txt: malformed line {line:?}")))?;
            let v = v.trim();
            match k.trim() {
                "stage" => stage = Some(v.to_string()),
                "step" => {
                    step = Some(
                        v.parse()
                            .map_err(|_| Error::Checkpoint(format!("meta.txt: bad step {v:?}")))?,
                    )
                }
                "loss_history" => {
                    loss_history = v
                        .split_whitespace()
                        .map(|s| s.parse::<f64>())
                        .collect::<Result<_, _>>()
                        .map_err(|_| Error::Checkpoint("meta.txt: bad loss history".into()))?
                }
                other => {
                    return Err(Error::Checkpoint(format!(
                        "meta.txt: unknown key `{other}`"
                    )))
                }
            }
        }
        let (Some(stage), Some(step)) = (stage, step) else {
            return Err(Error::Checkpoint("meta.txt: missing stage or step".into()));
        };
        Ok(Self {
            config,
            params,
            stats: GeneStats { mean, std },
            stage,
            step,
            loss_history,
        })
    }

    /// Fails unless every tensor in `expected` is present here with the same
    /// shape.
    pub fn check_shapes(&self, expected: &ParamStore) -> Result<()> {
        for (name, t) in expected.iter() {
            let have = self
                .params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if have.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, configuration expects {:?}",
                    have.shape(),
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}
