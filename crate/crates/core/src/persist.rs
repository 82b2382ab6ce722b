//! Experiment configuration, checkpoints, pruned-network artifacts, and
//! atomic file output.
//!
//! Arrays are stored as base64 of little-endian `f64` bytes inside a
//! versioned JSON envelope, which round-trips every value exactly.

use std::fs;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, CsvSchema, Dataset, Scenario, SyntheticSpec};
use crate::error::{Error, Result};
use crate::gates::Temperature;
use crate::network::{GatedLayer, GatedNetwork, LayerSpec};
use crate::train::{PrunedLayer, PrunedNetwork, TrainConfig};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TaskSpec {
    /// Directory with the four uncompressed MNIST IDX files.
    Mnist {
        dir: PathBuf,
        /// Use only the first `train_limit` training rows.
        #[serde(default)]
        train_limit: Option<usize>,
    },
    Csv {
        path: PathBuf,
        /// Held-out file; without it `path` is split by `test_fraction`.
        #[serde(default)]
        test_path: Option<PathBuf>,
        schema: CsvSchema,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    Synthetic {
        scenario: Scenario,
        n: usize,
        #[serde(default)]
        noise_std: f64,
        /// Defaults to the training seed.
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
}

fn default_test_fraction() -> f64 {
    0.25
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportToggles {
    #[serde(default)]
    pub dot: bool,
    #[serde(default)]
    pub heatmap: bool,
    #[serde(default)]
    pub importance: bool,
    #[serde(default = "yes")]
    pub report: bool,
}

fn yes() -> bool {
    true
}

impl Default for ExportToggles {
    fn default() -> Self {
        Self {
            dot: false,
            heatmap: false,
            importance: false,
            report: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSpec {
    /// Train a random fixed mask of this density instead of learning gates.
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub densities: Vec<f64>,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    /// Full widths, input through output, e.g. `[784, 300, 100, 10]`.
    pub layers: Vec<usize>,
    #[serde(default = "default_retain")]
    pub init_retain_prob: f64,
    #[serde(default)]
    pub train: TrainConfig,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub export: ExportToggles,
    #[serde(default)]
    pub baseline: Option<BaselineSpec>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
}

fn default_retain() -> f64 {
    0.5
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| line_of(text, s.start));
            match line {
                Some(l) => Error::Config(format!("line {l}: {}", e.message())),
                None => Error::Config(e.message().to_string()),
            }
        })
    }

    /// Parses the file and resolves relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String)> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok((cfg, text))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.task {
            TaskSpec::Mnist { dir, .. } => fix(dir),
            TaskSpec::Csv { path, test_path, .. } => {
                fix(path);
                if let Some(t) = test_path {
                    fix(t);
                }
            }
            TaskSpec::Synthetic { .. } => {}
        }
        fix(&mut self.out_dir);
    }

    /// Checks everything that does not need the data itself. Messages name
    /// the offending key and, when `source` is given, its line.
    pub fn validate(&self, source: Option<&str>) -> Result<()> {
        let at = |key: &str, msg: String| {
            let line = source.and_then(|s| find_key_line(s, key));
            Error::Config(match line {
                Some(l) => format!("line {l}: {key}: {msg}"),
                None => format!("{key}: {msg}"),
            })
        };
        self.train.validate().map_err(|e| at("train", e.to_string()))?;
        if self.layers.len() < 2 || self.layers.contains(&0) {
            return Err(at(
                "layers",
                format!("need at least two positive widths, got {:?}", self.layers),
            ));
        }
        if !(self.init_retain_prob > 0.0 && self.init_retain_prob < 1.0) {
            return Err(at(
                "init_retain_prob",
                format!("must lie in (0, 1), got {}", self.init_retain_prob),
            ));
        }
        if let Some(b) = &self.baseline {
            if !(b.density > 0.0 && b.density <= 1.0) {
                return Err(at(
                    "density",
                    format!("baseline density must lie in (0, 1], got {}", b.density),
                ));
            }
        }
        match &self.task {
            TaskSpec::Mnist { dir, .. } => {
                if self.layers[0] != 784 || *self.layers.last().unwrap() != 10 {
                    return Err(at(
                        "layers",
                        format!("MNIST needs 784 inputs and 10 outputs, got {:?}", self.layers),
                    ));
                }
                if !dir.is_dir() {
                    return Err(Error::io(
                        dir,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST directory not found"),
                    ));
                }
            }
            TaskSpec::Csv { path, test_path, .. } => {
                for p in std::iter::once(path).chain(test_path.iter()) {
                    if !p.is_file() {
                        return Err(Error::io(
                            p,
                            std::io::Error::new(std::io::ErrorKind::NotFound, "CSV file not found"),
                        ));
                    }
                }
            }
            TaskSpec::Synthetic { scenario, n, .. } => {
                if *n < 2 {
                    return Err(at("n", "synthetic tasks need at least two rows".into()));
                }
                if self.layers[0] != scenario.n_features() || *self.layers.last().unwrap() != scenario.n_labels() {
                    return Err(at(
                        "layers",
                        format!(
                            "{scenario:?} needs {} inputs and {} outputs, got {:?}",
                            scenario.n_features(),
                            scenario.n_labels(),
                            self.layers
                        ),
                    ));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of this config.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn layer_specs(&self) -> Result<Vec<LayerSpec>> {
        LayerSpec::chain(&self.layers)
    }
}

fn line_of(text: &str, byte: usize) -> usize {
    text[..byte.min(text.len())].matches('\n').count() + 1
}

fn find_key_line(text: &str, key: &str) -> Option<usize> {
    text.lines()
        .position(|l| {
            let t = l.trim_start();
            t.starts_with(&format!("{key} ")) || t.starts_with(&format!("{key}=")) || t == format!("[{key}]")
        })
        .map(|i| i + 1)
}

/// Loads `(train, test)` for a task. `seed` drives synthetic generation
/// (unless the task pins its own) and any split.
pub fn load_task(task: &TaskSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    match task {
        TaskSpec::Mnist { dir, train_limit } => {
            let (train, test) = data::load_mnist_dir(dir)?;
            let train = match train_limit {
                Some(k) if *k < train.len() => train.select(&(0..*k).collect::<Vec<_>>()),
                _ => train,
            };
            Ok((train, test))
        }
        TaskSpec::Csv {
            path,
            test_path,
            schema,
            test_fraction,
        } => {
            let (ds, _stats, encoder) = data::load_csv(path, schema)?;
            match test_path {
                None => data::split(&ds, *test_fraction, seed),
                Some(tp) => {
                    let (mut test, _) = data::load_csv_with(&encoder, tp)?;
                    let mut train = ds;
                    let mm = train.fit_min_max();
                    mm.apply(&mut train);
                    mm.apply(&mut test);
                    Ok((train, test))
                }
            }
        }
        TaskSpec::Synthetic {
            scenario,
            n,
            noise_std,
            seed: own_seed,
            test_fraction,
        } => {
            let s = own_seed.unwrap_or(seed);
            let ds = data::gen_synthetic(&SyntheticSpec {
                scenario: *scenario,
                n: *n,
                noise_std: *noise_std,
                seed: s,
            })?;
            data::split(&ds, *test_fraction, s.wrapping_add(1))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedArray {
    pub shape: Vec<usize>,
    /// Base64 of little-endian `f64` values, row-major.
    pub data: String,
}

impl EncodedArray {
    pub fn encode(shape: &[usize], values: impl IntoIterator<Item = f64>) -> Self {
        let mut bytes = Vec::new();
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Self {
            shape: shape.to_vec(),
            data: B64.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Vec<f64>> {
        let bytes = B64
            .decode(&self.data)
            .map_err(|e| Error::Artifact(format!("bad base64: {e}")))?;
        let expected: usize = self.shape.iter().product();
        if bytes.len() != expected * 8 {
            return Err(Error::Artifact(format!(
                "array of shape {:?} needs {} bytes, found {}",
                self.shape,
                expected * 8,
                bytes.len()
            )));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }

    fn matrix(&self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        if self.shape != [rows, cols] {
            return Err(Error::Artifact(format!(
                "expected shape [{rows}, {cols}], found {:?}",
                self.shape
            )));
        }
        Ok(Array2::from_shape_vec((rows, cols), self.decode()?).expect("length checked"))
    }

    fn vector(&self, len: usize) -> Result<Array1<f64>> {
        if self.shape != [len] {
            return Err(Error::Artifact(format!(
                "expected shape [{len}], found {:?}",
                self.shape
            )));
        }
        Ok(Array1::from(self.decode()?))
    }
}

fn enc2(a: &Array2<f64>) -> EncodedArray {
    EncodedArray::encode(a.shape(), a.iter().copied())
}

fn enc1(a: &Array1<f64>) -> EncodedArray {
    EncodedArray::encode(a.shape(), a.iter().copied())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weights: EncodedArray,
    pub bias: EncodedArray,
    pub logits: EncodedArray,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub layers: Vec<LayerSpec>,
    pub parameters: Vec<LayerParams>,
    pub temperature: f64,
    pub train_config: TrainConfig,
    pub seed: u64,
    pub epoch: usize,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn capture(net: &GatedNetwork, cfg: &TrainConfig, epoch: usize, config_hash: &str) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            layers: net.specs(),
            parameters: net
                .layers
                .iter()
                .map(|l| LayerParams {
                    weights: enc2(&l.weights),
                    bias: enc1(&l.bias),
                    logits: enc2(&l.logits),
                })
                .collect(),
            temperature: net.temperature.get(),
            train_config: cfg.clone(),
            seed: cfg.seed,
            epoch,
            config_hash: config_hash.to_string(),
        }
    }

    pub fn restore(&self) -> Result<GatedNetwork> {
        check_version(self.format_version)?;
        if self.layers.len() != self.parameters.len() {
            return Err(Error::Artifact("layer/parameter count mismatch".into()));
        }
        let layers = self
            .layers
            .iter()
            .zip(&self.parameters)
            .map(|(&spec, p)| {
                Ok(GatedLayer {
                    spec,
                    weights: p.weights.matrix(spec.output_size, spec.input_size)?,
                    bias: p.bias.vector(spec.output_size)?,
                    logits: p.logits.matrix(spec.output_size, spec.input_size)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        GatedNetwork::from_layers(layers, Temperature::new(self.temperature)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let probe: VersionProbe = serde_json::from_str(text)?;
        check_version(probe.format_version)?;
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

fn check_version(found: u32) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(Error::Version {
            found,
            expected: FORMAT_VERSION,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunedLayerParams {
    /// Masked weights.
    pub weights: EncodedArray,
    pub bias: EncodedArray,
    /// Base64 of one byte (0 or 1) per connection, row-major `(out, in)`.
    pub mask: String,
}

/// Serialized [`PrunedNetwork`] with its density summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunedArtifact {
    pub format_version: u32,
    pub layers: Vec<LayerSpec>,
    pub parameters: Vec<PrunedLayerParams>,
    pub gate_count: usize,
    pub retained_count: usize,
    pub density: f64,
    pub layer_densities: Vec<f64>,
    pub config_hash: String,
}

impl PrunedArtifact {
    pub fn capture(pruned: &PrunedNetwork, config_hash: &str) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            layers: pruned.specs(),
            parameters: pruned
                .layers
                .iter()
                .map(|l| PrunedLayerParams {
                    weights: enc2(&l.weights),
                    bias: enc1(&l.bias),
                    mask: B64.encode(l.mask.iter().map(|&m| u8::from(m)).collect::<Vec<u8>>()),
                })
                .collect(),
            gate_count: pruned.gate_count(),
            retained_count: pruned.retained_count(),
            density: pruned.density(),
            layer_densities: pruned.layer_densities(),
            config_hash: config_hash.to_string(),
        }
    }

    pub fn restore(&self) -> Result<PrunedNetwork> {
        check_version(self.format_version)?;
        if self.layers.len() != self.parameters.len() || self.layers.is_empty() {
            return Err(Error::Artifact("layer/parameter count mismatch".into()));
        }
        crate::network::validate_specs(&self.layers)?;
        let layers = self
            .layers
            .iter()
            .zip(&self.parameters)
            .map(|(&spec, p)| {
                let (o, i) = (spec.output_size, spec.input_size);
                let bytes = B64
                    .decode(&p.mask)
                    .map_err(|e| Error::Artifact(format!("bad mask base64: {e}")))?;
                if bytes.len() != o * i || bytes.iter().any(|&b| b > 1) {
                    return Err(Error::Artifact("mask has wrong length or non-binary bytes".into()));
                }
                Ok(PrunedLayer {
                    spec,
                    weights: p.weights.matrix(o, i)?,
                    bias: p.bias.vector(o)?,
                    mask: Array2::from_shape_vec((o, i), bytes.into_iter().map(|b| b == 1).collect())
                        .expect("length checked"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PrunedNetwork { layers })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("artifact serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let probe: VersionProbe = serde_json::from_str(text)?;
        check_version(probe.format_version)?;
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Writes every file to a temporary sibling first and renames them into
/// place only after all writes succeeded. On failure the temporaries are
/// removed and no target is touched.
pub fn write_files_atomic(files: &[(PathBuf, Vec<u8>)]) -> Result<()> {
    let mut staged: Vec<(PathBuf, PathBuf)> = Vec::with_capacity(files.len());
    let cleanup = |staged: &[(PathBuf, PathBuf)]| {
        for (tmp, _) in staged {
            let _ = fs::remove_file(tmp);
        }
    };
    for (target, bytes) in files {
        let dir = target
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        if let Err(e) = fs::create_dir_all(dir) {
            cleanup(&staged);
            return Err(Error::io(dir, e));
        }
        let name = target.file_name().and_then(|n| n.to_str()).unwrap_or("out");
        let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
        if let Err(e) = fs::write(&tmp, bytes) {
            let _ = fs::remove_file(&tmp);
            cleanup(&staged);
            return Err(Error::io(&tmp, e));
        }
        staged.push((tmp, target.clone()));
    }
    for (tmp, target) in &staged {
        fs::rename(tmp, target).map_err(|e| Error::io(target, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gates::Rng;
    use crate::train::finalize;

    fn net() -> GatedNetwork {
        let specs = LayerSpec::chain(&[4, 3, 2]).unwrap();
        let mut rng = Rng::new(21);
        let mut n = GatedNetwork::new(&specs, 0.5, Temperature::new(0.8).unwrap(), &mut rng).unwrap();
        for l in &mut n.layers {
            l.logits.mapv_inplace(|_| rng.normal());
            l.bias.mapv_inplace(|_| rng.normal() * 1e-3);
        }
        n
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let n = net();
        let ck = Checkpoint::capture(&n, &TrainConfig::default(), 3, "abc");
        let back = Checkpoint::from_json(&ck.to_json()).unwrap().restore().unwrap();
        assert_eq!(back, n);
    }

    #[test]
    fn version_mismatch_rejected() {
        let n = net();
        let mut ck = Checkpoint::capture(&n, &TrainConfig::default(), 0, "");
        ck.format_version = 99;
        assert!(matches!(
            Checkpoint::from_json(&ck.to_json()),
            Err(Error::Version { found: 99, .. })
        ));
        let mut art = PrunedArtifact::capture(&finalize(&n), "");
        art.format_version = 2;
        assert!(matches!(
            PrunedArtifact::from_json(&art.to_json()),
            Err(Error::Version { .. })
        ));
    }

    #[test]
    fn pruned_round_trip() {
        let p = finalize(&net());
        let art = PrunedArtifact::capture(&p, "h");
        assert_eq!(art.retained_count, p.flat_mask().iter().filter(|&&m| m).count());
        let back = PrunedArtifact::from_json(&art.to_json()).unwrap().restore().unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn encoded_array_rejects_bad_length() {
        let mut e = EncodedArray::encode(&[2], [1.0, 2.0]);
        e.shape = vec![3];
        assert!(e.decode().is_err());
    }

    #[test]
    fn config_parse_errors_carry_line() {
        let text = "layers = [6, 8, 2]\nout_dir = \"x\"\n[task]\nkind = \"synthetic\"\nscenario = \"bogus\"\nn = 10\n";
        let err = ExperimentConfig::from_toml_str(text).unwrap_err().to_string();
        assert!(err.contains("line ") && err.contains("bogus"), "{err}");
    }

    #[test]
    fn config_validation_points_at_key() {
        let text =
            "layers = [6, 8, 3]\nout_dir = \"x\"\n[task]\nkind = \"synthetic\"\nscenario = \"independence\"\nn = 10\n";
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        let err = cfg.validate(Some(text)).unwrap_err().to_string();
        assert!(err.contains("line 1: layers"), "{err}");
    }

    #[test]
    fn config_hash_is_stable() {
        let text =
            "layers = [4, 1]\nout_dir = \"x\"\n[task]\nkind = \"synthetic\"\nscenario = \"irrelevance\"\nn = 10\n";
        let a = ExperimentConfig::from_toml_str(text).unwrap();
        let b = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.train.seed = 1;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn atomic_write_all_or_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let ok = dir.path().join("a.txt");
        write_files_atomic(&[(ok.clone(), b"hi".to_vec())]).unwrap();
        assert_eq!(fs::read(&ok).unwrap(), b"hi");

        // second target sits under a regular file, so its directory cannot exist
        let good = dir.path().join("b.txt");
        let bad = ok.join("nested.txt");
        assert!(write_files_atomic(&[(good.clone(), b"x".to_vec()), (bad, b"y".to_vec())]).is_err());
        assert!(!good.exists());
        let leftovers: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }
}
