use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::LayerMetrics;
use crate::error::{Error, Result};

/// Identity of a block for latency lookup.
///
/// The canonical text form is
/// `{type}|in={C}x{H}x{W}|out={N}|s={stride}|e={e}|k={K}|g={g}` with an
/// optional `|q={k_w}/{k_a}` suffix, and round-trips through [`FromStr`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockKey {
    pub block_type: String,
    pub input_shape: (usize, usize, usize),
    pub out_channels: usize,
    pub stride: usize,
    pub expansion: usize,
    pub kernel: usize,
    pub groups: usize,
    pub precision: Option<(u32, u32)>,
}

impl BlockKey {
    pub fn new(block_type: impl Into<String>, input_shape: (usize, usize, usize), out_channels: usize) -> Self {
        Self {
            block_type: block_type.into(),
            input_shape,
            out_channels,
            stride: 1,
            expansion: 1,
            kernel: 1,
            groups: 1,
            precision: None,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn expansion(mut self, e: usize) -> Self {
        self.expansion = e;
        self
    }

    pub fn kernel(mut self, k: usize) -> Self {
        self.kernel = k;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn precision(mut self, weight_bits: u32, act_bits: u32) -> Self {
        self.precision = Some((weight_bits, act_bits));
        self
    }
}

impl fmt::Display for BlockKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (c, h, w) = self.input_shape;
        write!(
            f,
            "{}|in={c}x{h}x{w}|out={}|s={}|e={}|k={}|g={}",
            self.block_type, self.out_channels, self.stride, self.expansion, self.kernel, self.groups
        )?;
        if let Some((wb, ab)) = self.precision {
            write!(f, "|q={wb}/{ab}")?;
        }
        Ok(())
    }
}

impl FromStr for BlockKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::BadBlockKey(s.to_string());
        let mut parts = s.split('|');
        let block_type = parts.next().filter(|t| !t.is_empty()).ok_or_else(bad)?;
        let mut field = |name: &str| -> Result<&str> {
            parts
                .next()
                .and_then(|p| p.strip_prefix(name))
                .and_then(|p| p.strip_prefix('='))
                .ok_or_else(bad)
        };
        let num = |v: &str| v.parse::<usize>().map_err(|_| bad());
        let dims: Vec<usize> = field("in")?.split('x').map(num).collect::<Result<_>>()?;
        let [c, h, w] = dims[..] else { return Err(bad()) };
        let out_channels = num(field("out")?)?;
        let stride = num(field("s")?)?;
        let expansion = num(field("e")?)?;
        let kernel = num(field("k")?)?;
        let groups = num(field("g")?)?;
        let precision = match parts.next() {
            None => None,
            Some(q) => {
                let (wb, ab) = q.strip_prefix("q=").and_then(|q| q.split_once('/')).ok_or_else(bad)?;
                let wb = wb.parse().map_err(|_| bad())?;
                let ab = ab.parse().map_err(|_| bad())?;
                Some((wb, ab))
            }
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        let key = BlockKey {
            block_type: block_type.to_string(),
            input_shape: (c, h, w),
            out_channels,
            stride,
            expansion,
            kernel,
            groups,
            precision,
        };
        // reject non-canonical spellings such as leading zeros
        if key.to_string() != s {
            return Err(bad());
        }
        Ok(key)
    }
}

impl Serialize for BlockKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BlockKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyEntry {
    pub key: String,
    pub latency_us: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LatencyFile {
    device: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    note: Option<String>,
    entries: Vec<LatencyEntry>,
}

/// Immutable map from [`BlockKey`] to latency in microseconds.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyTable {
    device: String,
    note: Option<String>,
    entries: BTreeMap<BlockKey, f64>,
}

impl LatencyTable {
    pub fn new(device: impl Into<String>, note: Option<String>, entries: impl IntoIterator<Item = (BlockKey, f64)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (key, lat) in entries {
            if !(lat.is_finite() && lat > 0.0) {
                return Err(Error::Domain(format!("latency for {key} must be positive, got {lat}")));
            }
            if map.insert(key.clone(), lat).is_some() {
                return Err(Error::DuplicateLatency(key.to_string()));
            }
        }
        Ok(Self {
            device: device.into(),
            note,
            entries: map,
        })
    }

    pub fn device(&self) -> &str {
        &self.device
    }

    pub fn note(&self) -> Option<&str> {
        self.note.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&BlockKey, f64)> {
        self.entries.iter().map(|(k, v)| (k, *v))
    }

    pub fn get(&self, key: &BlockKey) -> Option<f64> {
        self.entries.get(key).copied()
    }

    pub fn lookup(&self, key: &BlockKey) -> Result<f64> {
        self.get(key).ok_or_else(|| Error::MissingLatency(key.to_string()))
    }

    /// Keys from `keys` that have no entry.
    pub fn missing<'a>(&self, keys: impl IntoIterator<Item = &'a BlockKey>) -> Vec<BlockKey> {
        let mut out: Vec<BlockKey> = keys.into_iter().filter(|k| !self.entries.contains_key(*k)).cloned().collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: LatencyFile = serde_json::from_str(text)?;
        let entries = file
            .entries
            .into_iter()
            .map(|e| Ok((e.key.parse::<BlockKey>()?, e.latency_us)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(file.device, file.note, entries)
    }

    pub fn to_json(&self) -> String {
        let file = LatencyFile {
            device: self.device.clone(),
            note: self.note.clone(),
            entries: self
                .entries
                .iter()
                .map(|(k, v)| LatencyEntry {
                    key: k.to_string(),
                    latency_us: *v,
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("latency tables serialize");
        s.push('\n');
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

/// Latency model for synthetic tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatencyModel {
    /// `macs / 1e6 + 1.0`
    AnalyticMacs,
    /// `macs / 1e6 + (params + activations) / 1e5 + 1.0`
    MacsPlusMemory,
}

impl LatencyModel {
    pub fn latency_us(self, m: &LayerMetrics) -> f64 {
        let base = m.macs as f64 / 1e6 + 1.0;
        match self {
            LatencyModel::AnalyticMacs => base,
            LatencyModel::MacsPlusMemory => base + (m.params + m.activation_elems) as f64 / 1e5,
        }
    }
}

impl FromStr for LatencyModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "analytic_macs" => Ok(Self::AnalyticMacs),
            "macs_plus_memory" => Ok(Self::MacsPlusMemory),
            other => Err(Error::Domain(format!(
                "unknown latency model '{other}', expected analytic_macs or macs_plus_memory"
            ))),
        }
    }
}

/// Builds a deterministic table from per-block metrics. Repeated keys must
/// carry identical metrics.
pub fn synth_lut(
    blocks: impl IntoIterator<Item = (BlockKey, LayerMetrics)>,
    model: LatencyModel,
    device: &str,
) -> Result<LatencyTable> {
    let mut seen: BTreeMap<BlockKey, LayerMetrics> = BTreeMap::new();
    for (key, m) in blocks {
        if let Some(prev) = seen.get(&key) {
            if *prev != m {
                return Err(Error::DuplicateLatency(key.to_string()));
            }
        } else {
            seen.insert(key, m);
        }
    }
    let note = match model {
        LatencyModel::AnalyticMacs => "synthetic: macs/1e6 + 1.0",
        LatencyModel::MacsPlusMemory => "synthetic: macs/1e6 + (params+activations)/1e5 + 1.0",
    };
    LatencyTable::new(
        device,
        Some(note.to_string()),
        seen.into_iter().map(|(k, m)| {
            let lat = model.latency_us(&m);
            (k, lat)
        }),
    )
}
