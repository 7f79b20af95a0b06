//! Dataset directories: one latent file per array plus a text manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use neighbor_forcing::io::{format_key_values, load_latents, parse_key_values, save_latents};
use neighbor_forcing::synthdata::{Dataset, LatentSequence, Nonlinearity, SequenceRecord};

pub const MANIFEST: &str = "manifest.txt";

const ARRAYS: [&str; 4] = ["latents", "reference", "condition", "states"];

fn array_path(dir: &Path, i: usize, what: &str) -> std::path::PathBuf {
    dir.join(format!("seq{i:04}.{what}.lat"))
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let dy = &data.dynamics;
    let cfg = dy.config();
    let pairs = vec![
        ("sequences", data.sequences.len().to_string()),
        ("frames", data.frames().to_string()),
        ("seed", data.seed.to_string()),
        ("state_dim", cfg.state_dim.to_string()),
        ("ambient_dim", cfg.ambient_dim.to_string()),
        ("latent_dim", cfg.latent_dim.to_string()),
        ("cond_dim", data.cond_dim().to_string()),
        ("delta_u", format!("{:?}", cfg.delta_u)),
        ("eps_r", format!("{:?}", cfg.eps_r)),
        ("rho", format!("{:?}", cfg.rho)),
        (
            "nonlinearity",
            match cfg.nonlinearity {
                Nonlinearity::Tanh => "tanh",
                Nonlinearity::Identity => "identity",
            }
            .to_string(),
        ),
        ("l_e", format!("{:?}", dy.lipschitz_encoder())),
        ("l_g", format!("{:?}", dy.lipschitz_render())),
        ("prop1_bound", format!("{:?}", dy.neighbor_bound())),
    ];
    fs::write(dir.join(MANIFEST), format_key_values(pairs))?;
    for (i, s) in data.sequences.iter().enumerate() {
        save_latents(&array_path(dir, i, "latents"), s.latents.values())?;
        save_latents(&array_path(dir, i, "reference"), &s.reference)?;
        save_latents(&array_path(dir, i, "condition"), &s.condition)?;
        save_latents(&array_path(dir, i, "states"), &s.states)?;
    }
    Ok(())
}

pub struct LoadedDataset {
    pub manifest: BTreeMap<String, String>,
    pub sequences: Vec<SequenceRecord>,
}

impl LoadedDataset {
    pub fn number(&self, key: &str) -> Result<f64> {
        let raw = self
            .manifest
            .get(key).ok_or_else(|| anyhow!("manifest lacks {key}"))?;
        raw.parse().map_err(|_| anyhow!("manifest {key}: bad number {raw:?}"))
    }

    pub fn latent_dim(&self) -> usize {
        self.sequences[0].latents.dim()
    }

    pub fn cond_dim(&self) -> usize {
        self.sequences[0].condition.cols()
    }
}

pub fn read_dataset(dir: &Path) -> Result<LoadedDataset> {
    let text = fs::read_to_string(dir.join(MANIFEST))
        .with_context(|| format!("reading dataset manifest in {}", dir.display()))?;
    let manifest: BTreeMap<String, String> = parse_key_values(&text)?.into_iter().collect();
    let n: usize = manifest
        .get("sequences")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| anyhow!("manifest lacks a sequence count"))?;
    if n == 0 {
        bail!("dataset in {} is empty", dir.display());
    }
    let mut sequences = Vec::with_capacity(n);
    for i in 0..n {
        let mut arrays = Vec::with_capacity(ARRAYS.len());
        for what in ARRAYS {
            let path = array_path(dir, i, what);
            let (t, _) = load_latents(&path).with_context(|| format!("reading {}", path.display()))?;
            arrays.push(t);
        }
        let states = arrays.pop().expect("four arrays");
        let condition = arrays.pop().expect("four arrays");
        let reference = arrays.pop().expect("four arrays");
        let latents = LatentSequence::new(arrays.pop().expect("four arrays"))?;
        sequences.push(SequenceRecord {
            states,
            latents,
            reference,
            condition,
        });
    }
    Ok(LoadedDataset { manifest, sequences })
}
