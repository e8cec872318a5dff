use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::format::{read_dataset, write_dataset, DATASET_VERSION};
use super::generate::{generate_sample, ClientSpec, GenOptions, RadiusDist, SizeSkew, SliceSample};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, label};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Paper,
    Desk,
}

impl Scale {
    pub fn default_size(self) -> (usize, usize) {
        match self {
            Scale::Paper => (256, 256),
            Scale::Desk => (32, 32),
        }
    }

    fn divisor(self) -> usize {
        match self {
            Scale::Paper => 1,
            Scale::Desk => 5,
        }
    }
}

impl std::str::FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Scale::Paper),
            "desk" => Ok(Scale::Desk),
            other => Err(Error::Config(format!(
                "scale must be 'paper' or 'desk', got '{other}'"
            ))),
        }
    }
}

impl std::fmt::Display for Scale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scale::Paper => "paper",
            Scale::Desk => "desk",
        })
    }
}

/// Everything needed to generate a federation.
#[derive(Clone, Debug, PartialEq)]
pub struct FederationPlan {
    pub scale: Scale,
    pub size: (usize, usize),
    pub clients: Vec<ClientSpec>,
    pub test_count: usize,
    pub shadow_count: usize,
}

const DEFAULT_NOISE: f32 = 0.03;
const HIGH_NOISE: f32 = 0.10;
const LARGE: (f32, f32) = (0.08, 0.25);
const SMALL: (f32, f32) = (0.03, 0.10);

/// The five-site benchmark split: site 1 favours large tumors, site 2 small
/// ones, site 3 is uniform with heavy scanner noise, sites 4–5 are uniform
/// with half the data.
pub fn federation_plan(scale: Scale, size: (usize, usize)) -> FederationPlan {
    let d = scale.divisor();
    let client = |id: u8, n: usize, range: (f32, f32), mode, noise, contrast| ClientSpec {
        client_id: id,
        n_train: n / d,
        tumor_radius: RadiusDist {
            min_frac: range.0,
            max_frac: range.1,
            mode,
        },
        noise_sigma: noise,
        contrast_delta: contrast,
    };
    let uniform = (SMALL.0, LARGE.1);
    FederationPlan {
        scale,
        size,
        clients: vec![
            client(1, 1000, LARGE, SizeSkew::LargeSkew, DEFAULT_NOISE, 0.30),
            client(2, 1000, SMALL, SizeSkew::SmallSkew, DEFAULT_NOISE, 0.30),
            client(3, 1000, uniform, SizeSkew::Uniform, HIGH_NOISE, 0.30),
            client(4, 500, uniform, SizeSkew::Uniform, DEFAULT_NOISE, 0.25),
            client(5, 500, uniform, SizeSkew::Uniform, DEFAULT_NOISE, 0.35),
        ],
        test_count: 1000 / d,
        shadow_count: 1000 / d,
    }
}

#[derive(Clone, Debug)]
pub struct ClientData {
    pub spec: ClientSpec,
    pub train: Vec<SliceSample>,
    pub val: Vec<SliceSample>,
}

/// All generated data of one benchmark instance.
#[derive(Clone, Debug)]
pub struct Federation {
    pub clients: Vec<ClientData>,
    /// Equal mixture of all client specs.
    pub test: Vec<SliceSample>,
    /// Attacker-side pool: first half shadow members, second half
    /// shadow non-members.
    pub shadow: Vec<SliceSample>,
}

impl Federation {
    pub fn shadow_split(&self) -> (&[SliceSample], &[SliceSample]) {
        self.shadow.split_at(self.shadow.len() / 2)
    }

    pub fn pooled_train(&self) -> Vec<&SliceSample> {
        self.clients.iter().flat_map(|c| c.train.iter()).collect()
    }
}

const TEST_STREAM: u64 = 1000;
const SHADOW_STREAM: u64 = 1001;

fn mixture(
    seed: u64,
    stream: u64,
    specs: &[ClientSpec],
    count: usize,
    size: (usize, usize),
) -> Result<Vec<SliceSample>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let spec = &specs[i % specs.len()];
            let s = derive_seed(seed, &[label::DATA, stream, i as u64]);
            generate_sample(s, spec, size, i as u32, GenOptions::default())
        })
        .collect()
}

/// Generates every dataset of `plan` in memory. Each sample has its own
/// substream, so output is independent of thread scheduling.
pub fn generate_federation(global_seed: u64, plan: &FederationPlan) -> Result<Federation> {
    let clients = plan
        .clients
        .iter()
        .map(|spec| {
            spec.validate()?;
            let (n_train, n_val) = spec.split_counts();
            let mut all: Vec<SliceSample> = (0..n_train + n_val)
                .into_par_iter()
                .map(|i| {
                    let s = derive_seed(
                        global_seed,
                        &[label::DATA, spec.client_id as u64, i as u64],
                    );
                    generate_sample(s, spec, plan.size, i as u32, GenOptions::default())
                })
                .collect::<Result<_>>()?;
            let val = all.split_off(n_train);
            Ok(ClientData {
                spec: spec.clone(),
                train: all,
                val,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let test = mixture(global_seed, TEST_STREAM, &plan.clients, plan.test_count, plan.size)?;
    let shadow = mixture(global_seed, SHADOW_STREAM, &plan.clients, plan.shadow_count, plan.size)?;
    Ok(Federation {
        clients,
        test,
        shadow,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientEntry {
    pub spec: ClientSpec,
    pub file: String,
    pub train: usize,
    pub val: usize,
}

/// Key-value description of a generated federation on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub global_seed: u64,
    pub scale: Scale,
    pub height: usize,
    pub width: usize,
    pub test_file: String,
    pub test_count: usize,
    pub shadow_file: String,
    pub shadow_count: usize,
    pub shadow_members: usize,
    pub clients: Vec<ClientEntry>,
}

impl DatasetManifest {
    pub fn train_counts(&self) -> Vec<usize> {
        self.clients.iter().map(|c| c.train).collect()
    }

    pub fn plan(&self) -> FederationPlan {
        FederationPlan {
            scale: self.scale,
            size: (self.height, self.width),
            clients: self.clients.iter().map(|c| c.spec.clone()).collect(),
            test_count: self.test_count,
            shadow_count: self.shadow_count,
        }
    }
}

pub const MANIFEST_FILE: &str = "manifest.toml";

/// Generates the federation for `scale` and writes one dataset file per
/// client (train then validation slices), the test and shadow sets, and
/// `manifest.toml` into `out_dir`. Returns the manifest and its path.
pub fn build_federation(
    global_seed: u64,
    scale: Scale,
    size: (usize, usize),
    out_dir: &Path,
) -> Result<(DatasetManifest, PathBuf)> {
    let plan = federation_plan(scale, size);
    let fed = generate_federation(global_seed, &plan)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut clients = Vec::new();
    for c in &fed.clients {
        let file = format!("client{}.fobd", c.spec.client_id);
        let all: Vec<SliceSample> = c.train.iter().chain(&c.val).cloned().collect();
        write_dataset(&all, &out_dir.join(&file))?;
        clients.push(ClientEntry {
            spec: c.spec.clone(),
            file,
            train: c.train.len(),
            val: c.val.len(),
        });
    }
    write_dataset(&fed.test, &out_dir.join("test.fobd"))?;
    write_dataset(&fed.shadow, &out_dir.join("shadow.fobd"))?;
    let manifest = DatasetManifest {
        format_version: DATASET_VERSION,
        global_seed,
        scale,
        height: size.0,
        width: size.1,
        test_file: "test.fobd".into(),
        test_count: fed.test.len(),
        shadow_file: "shadow.fobd".into(),
        shadow_count: fed.shadow.len(),
        shadow_members: fed.shadow.len() / 2,
        clients,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let text = toml::to_string(&manifest)
        .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok((manifest, path))
}

/// Reads a manifest and every dataset file it names.
pub fn load_federation(manifest_path: &Path) -> Result<(DatasetManifest, Federation)> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: DatasetManifest = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", manifest_path.display())))?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut clients = Vec::new();
    for entry in &manifest.clients {
        let mut all = read_dataset(&dir.join(&entry.file))?;
        if all.len() != entry.train + entry.val {
            return Err(Error::Data(format!(
                "{} holds {} slices, manifest says {}",
                entry.file,
                all.len(),
                entry.train + entry.val
            )));
        }
        let val = all.split_off(entry.train);
        clients.push(ClientData {
            spec: entry.spec.clone(),
            train: all,
            val,
        });
    }
    let test = read_dataset(&dir.join(&manifest.test_file))?;
    let shadow = read_dataset(&dir.join(&manifest.shadow_file))?;
    Ok((
        manifest,
        Federation {
            clients,
            test,
            shadow,
        },
    ))
}
