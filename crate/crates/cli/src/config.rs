//! Run configuration: one JSON document, overridable from flags, hashed
//! into every artifact.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use dnasforge::cost::LatencyTable;
use dnasforge::data::{load_cifar10_bin, split_dataset, synth_blobs, Dataset};
use dnasforge::engine::{config_hash, SearchConfig};
use dnasforge::spaces::SpaceFile;
use dnasforge::supernet::SuperNet;
use dnasforge::Rng;

/// Offset between the training and test seeds of synthetic data, so the
/// two sets never share noise.
const TEST_SEED_OFFSET: u64 = 1_000_003;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Drives network initialization, data generation, splits and the
    /// search itself. `search.seed` is always overwritten with it.
    #[serde(default)]
    pub seed: u64,
    pub space: SpaceFile,
    #[serde(default)]
    pub data: DataSpec,
    /// Fraction of the training data used for weights; the rest trains θ.
    #[serde(default = "default_split")]
    pub split_ratio: f64,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lut: Option<PathBuf>,
}

fn default_split() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    SynthBlobs {
        n: usize,
        test_n: usize,
        classes: usize,
        size: usize,
        noise_sigma: f64,
    },
    Cifar10 {
        train: Vec<PathBuf>,
        test: PathBuf,
        #[serde(default = "default_cifar_classes")]
        classes: Vec<usize>,
        #[serde(default = "default_cifar_limit")]
        limit: usize,
        #[serde(default = "default_cifar_limit")]
        test_limit: usize,
    },
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::SynthBlobs {
            n: 400,
            test_n: 200,
            classes: 4,
            size: 8,
            noise_sigma: 0.1,
        }
    }
}

fn default_cifar_classes() -> Vec<usize> {
    vec![0, 1]
}

fn default_cifar_limit() -> usize {
    2_000
}

/// Training and test data for one run.
pub struct Data {
    pub w: Dataset,
    pub theta: Dataset,
    pub test: Dataset,
}

impl Data {
    pub fn train(&self) -> Result<Dataset> {
        Ok(Dataset::concat(&self.w, &self.theta)?)
    }
}

/// Reads a JSON file, keeping the path in error messages. Parse errors
/// from serde carry the line and column.
pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = read_json(path)?;
        // the space file has a schema check of its own
        SpaceFile::from_json(&cfg.space.to_json()).with_context(|| format!("space in {}", path.display()))?;
        Ok(cfg)
    }

    /// Applies flag overrides and ties the search seed to the run seed.
    pub fn resolve(mut self, seed: Option<u64>, lut: Option<PathBuf>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if lut.is_some() {
            self.lut = lut;
        }
        self.search.seed = self.seed;
        let mut problems = Vec::new();
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            problems.push(format!("split_ratio must be in (0, 1), got {}", self.split_ratio));
        }
        if let Err(dnasforge::Error::InvalidConfig(p)) = self.search.validate() {
            problems.extend(p);
        }
        if self.search.loss.needs_lut() && self.lut.is_none() {
            problems.push("latency loss needs a lookup table (`lut` or --lut)".into());
        }
        if !problems.is_empty() {
            bail!("invalid run config:\n  - {}", problems.join("\n  - "));
        }
        Ok(self)
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn build_net(&self) -> Result<SuperNet> {
        Ok(self.space.space.build(&mut Rng::new(self.seed))?)
    }

    pub fn load_lut(&self) -> Result<Option<LatencyTable>> {
        self.lut
            .as_ref()
            .map(|p| LatencyTable::load(p).with_context(|| format!("loading table {}", p.display())))
            .transpose()
    }

    pub fn load_data(&self) -> Result<Data> {
        let (train, test) = match &self.data {
            DataSpec::SynthBlobs {
                n,
                test_n,
                classes,
                size,
                noise_sigma,
            } => (
                synth_blobs(*n, *classes, *size, *noise_sigma, self.seed)?,
                synth_blobs(*test_n, *classes, *size, *noise_sigma, self.seed.wrapping_add(TEST_SEED_OFFSET))?,
            ),
            DataSpec::Cifar10 {
                train,
                test,
                classes,
                limit,
                test_limit,
            } => {
                let Some((first, rest)) = train.split_first() else {
                    bail!("cifar10 data needs at least one training file");
                };
                let mut all = load_cifar10_bin(first)?;
                for p in rest {
                    all = Dataset::concat(&all, &load_cifar10_bin(p)?)?;
                }
                (
                    all.select_classes(classes, *limit)?,
                    load_cifar10_bin(test)?.select_classes(classes, *test_limit)?,
                )
            }
        };
        let (w, theta) = split_dataset(&train, self.split_ratio, self.seed)?;
        Ok(Data { w, theta, test })
    }
}

/// Worker threads from `DNASFORGE_THREADS`, default 1.
pub fn threads() -> Result<usize> {
    match std::env::var("DNASFORGE_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => bail!("DNASFORGE_THREADS must be a positive integer, got `{v}`"),
        },
    }
}

/// Any output file: the payload plus the run config that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact<T> {
    pub run_config_hash: String,
    pub run_config: RunConfig,
    pub payload: T,
}

impl<T: Serialize + for<'de> Deserialize<'de>> Artifact<T> {
    pub fn new(cfg: &RunConfig, payload: T) -> Self {
        Artifact {
            run_config_hash: cfg.hash(),
            run_config: cfg.clone(),
            payload,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("artifacts serialize");
        s.push('\n');
        s
    }

    /// Loads and checks that the embedded hash matches the embedded config.
    pub fn load(path: &Path) -> Result<Self> {
        let a: Artifact<T> = read_json(path)?;
        let h = a.run_config.hash();
        if h != a.run_config_hash {
            bail!("{}: run_config_hash {} does not match its run_config ({h})", path.display(), a.run_config_hash);
        }
        Ok(a)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }
}

/// Writes through a sibling temp file so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", path.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
