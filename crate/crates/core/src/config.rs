//! Flat `key = value` run configuration with dotted section keys.
//!
//! ```text
//! # comment
//! seed = 7
//! output = runs/toy
//! model.base_channels = 16
//! data.second.root = data/second
//! data.second.layout = scd_pairs
//! data.second.classes = building, water, tree
//! data.second.split.train = train.txt
//! train.datasets = second
//! ```
//!
//! Relative paths are resolved against the config file's directory; split
//! files are resolved against their dataset root. `RCD_SEED` overrides
//! `seed`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::data::{read_split_file, DatasetSpec, LabelEncoding, LayoutKind};
use crate::domain::ClassVocabulary;
use crate::error::{io_err, RcdError, Result};
use crate::nn::OptimConfig;
use crate::rcdgen::{ConditionDropout, DenoiserConfig, Guidance, DEFAULT_TIMESTEPS};
use crate::rcdnet::RcdNetConfig;

pub const SEED_ENV: &str = "RCD_SEED";

/// Parsed `key → value` pairs in key order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| RcdError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || k.split('.').any(str::is_empty) {
                return Err(RcdError::Config(format!("line {}: malformed key `{k}`", n + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(RcdError::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), value.into());
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    fn parsed<V: FromStr>(&self, key: &str) -> Result<Option<V>> {
        self.get(key)
            .map(|v| v.parse::<V>().map_err(|_| RcdError::Config(format!("`{key}`: cannot parse `{v}`"))))
            .transpose()
    }

    fn or<V: FromStr>(&self, key: &str, default: V) -> Result<V> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    fn list(&self, key: &str) -> Vec<String> {
        self.get(key)
            .map(|v| v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect())
            .unwrap_or_default()
    }

    /// SHA-256 over the canonical `key=value` lines.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.entries {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    TrainRcdNet,
    Eval,
    Infer,
    TrainRcdGen,
    Generate,
    Render,
    Aggregate,
}

impl FromStr for TaskKind {
    type Err = RcdError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "train-rcdnet" => Self::TrainRcdNet,
            "eval" => Self::Eval,
            "infer" => Self::Infer,
            "train-rcdgen" => Self::TrainRcdGen,
            "generate" => Self::Generate,
            "render" => Self::Render,
            "aggregate" => Self::Aggregate,
            other => return Err(RcdError::Config(format!("unknown task `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub datasets: Vec<String>,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub dataset: Option<String>,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub timesteps: usize,
    pub steps: usize,
    pub denoiser: DenoiserConfig,
    pub dropout: ConditionDropout,
    pub optim: OptimConfig,
    pub epochs: usize,
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<String>,
    pub split: String,
    /// Class names cycled over generated samples; empty means the source
    /// dataset's vocabulary.
    pub prompts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextConfig {
    pub tokens: usize,
    pub salt: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: Option<TaskKind>,
    pub seed: u64,
    pub output: PathBuf,
    pub model: RcdNetConfig,
    pub text: TextConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub guidance: Guidance,
    pub gen: GenConfig,
    pub datasets: BTreeMap<String, DatasetSpec>,
    pub hash: String,
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() { p.to_path_buf() } else { base.join(p) }
}

fn parse_palette(text: &str) -> Result<LabelEncoding> {
    let mut entries = Vec::new();
    for item in text.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let bad = || RcdError::Config(format!("palette entry `{item}` is not `r:g:b=index`"));
        let (rgb, idx) = item.split_once('=').ok_or_else(bad)?;
        let parts: Vec<u8> = rgb.split(':').map(|c| c.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?;
        let [r, g, b] = parts[..] else { return Err(bad()) };
        entries.push(([r, g, b], idx.trim().parse().map_err(|_| bad())?));
    }
    Ok(LabelEncoding::Palette(entries))
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_kv(&KvConfig::parse(&text)?, &base, std::env::var(SEED_ENV).ok().as_deref())
    }

    /// Builds and validates a config; `seed_override` is the `RCD_SEED`
    /// value if set.
    pub fn from_kv(kv: &KvConfig, base: &Path, seed_override: Option<&str>) -> Result<Self> {
        let d = RcdNetConfig::default();
        let depths: Vec<usize> = match kv.get("model.depths") {
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| RcdError::Config(format!("`model.depths`: bad entry `{s}`"))))
                .collect::<Result<_>>()?,
            None => d.depths.to_vec(),
        };
        let depths: [usize; 4] = depths
            .try_into()
            .map_err(|_| RcdError::Config("`model.depths` needs four entries".into()))?;
        let model = RcdNetConfig {
            base_channels: kv.or("model.base_channels", d.base_channels)?,
            depths,
            state_dim: kv.or("model.state_dim", d.state_dim)?,
            text_width: kv.or("model.text_width", d.text_width)?,
            heads: kv.or("model.heads", d.heads)?,
            threshold: kv.or("model.threshold", d.threshold)?,
        };
        let o = OptimConfig::default();
        let optim = OptimConfig {
            lr: kv.or("optim.lr", o.lr)?,
            weight_decay: kv.or("optim.weight_decay", o.weight_decay)?,
            poly_power: kv.or("optim.poly_power", o.poly_power)?,
            beta1: kv.or("optim.beta1", o.beta1)?,
            beta2: kv.or("optim.beta2", o.beta2)?,
            eps: kv.or("optim.eps", o.eps)?,
        };
        let dd = DenoiserConfig::default();
        let denoiser = DenoiserConfig {
            hidden: kv.or("gen.hidden", dd.hidden)?,
            time_dim: kv.or("gen.time_dim", dd.time_dim)?,
            text_width: model.text_width,
            heads: kv.or("gen.heads", dd.heads)?,
        };
        let cd = ConditionDropout::default();
        let gen = GenConfig {
            timesteps: kv.or("gen.timesteps", DEFAULT_TIMESTEPS)?,
            steps: kv.or("gen.steps", 50)?,
            denoiser,
            dropout: ConditionDropout {
                image: kv.or("gen.drop_image", cd.image)?,
                text: kv.or("gen.drop_text", cd.text)?,
                both: kv.or("gen.drop_both", cd.both)?,
            },
            optim: OptimConfig {
                lr: kv.or("gen.lr", 1e-3)?,
                ..optim
            },
            epochs: kv.or("gen.epochs", 1)?,
            checkpoint: kv.get("gen.checkpoint").map(|p| resolve(base, p)),
            dataset: kv.get("gen.dataset").map(String::from),
            split: kv.or("gen.split", "train".to_string())?,
            prompts: kv.list("gen.prompts"),
        };
        let g = Guidance::default();
        let seed = match seed_override {
            Some(s) => s
                .trim()
                .parse()
                .map_err(|_| RcdError::Config(format!("{SEED_ENV}=`{s}` is not an unsigned integer")))?,
            None => kv.or("seed", 0u64)?,
        };

        let mut datasets = BTreeMap::new();
        let names: std::collections::BTreeSet<&str> = kv
            .keys()
            .filter_map(|k| k.strip_prefix("data."))
            .filter_map(|k| k.split_once('.').map(|(n, _)| n))
            .collect();
        for name in names {
            let key = |s: &str| format!("data.{name}.{s}");
            let root = resolve(
                base,
                kv.get(&key("root")).ok_or_else(|| RcdError::Config(format!("`{}` is missing", key("root"))))?,
            );
            let layout: LayoutKind = kv
                .get(&key("layout"))
                .ok_or_else(|| RcdError::Config(format!("`{}` is missing", key("layout"))))?
                .parse()?;
            let vocab = ClassVocabulary::new(kv.list(&key("classes")))?;
            let mut spec = DatasetSpec::new(name, &root, layout, Arc::new(vocab));
            if let Some(p) = kv.get(&key("palette")) {
                spec.labels = parse_palette(p)?;
            }
            let prefix = key("split.");
            for k in kv.keys().filter(|k| k.starts_with(&prefix)) {
                let split = &k[prefix.len()..];
                let file = resolve(&root, kv.get(k).expect("key listed"));
                spec.splits.insert(split.to_string(), read_split_file(&file)?);
            }
            datasets.insert(name.to_string(), spec);
        }

        let cfg = Self {
            task: kv.parsed("task")?,
            seed,
            output: resolve(base, kv.get("output").unwrap_or("out")),
            model,
            text: TextConfig {
                tokens: kv.or("text.tokens", 4)?,
                salt: kv.or("text.salt", 0)?,
            },
            optim,
            train: TrainConfig {
                epochs: kv.or("train.epochs", 1)?,
                batch: kv.or("train.batch", 4)?,
                datasets: kv.list("train.datasets"),
                split: kv.or("train.split", "train".to_string())?,
            },
            eval: EvalConfig {
                dataset: kv.get("eval.dataset").map(String::from),
                split: kv.or("eval.split", "test".to_string())?,
            },
            guidance: Guidance {
                s_i: kv.or("guidance.s_i", g.s_i)?,
                s_t: kv.or("guidance.s_t", g.s_t)?,
            },
            gen,
            datasets,
            hash: kv.hash(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| RcdError::Config(e.to_string()))?;
        let positive = [
            ("train.epochs", self.train.epochs),
            ("train.batch", self.train.batch),
            ("text.tokens", self.text.tokens),
            ("gen.timesteps", self.gen.timesteps),
            ("gen.steps", self.gen.steps),
            ("gen.epochs", self.gen.epochs),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(RcdError::Config(format!("`{k}` must be positive")));
        }
        if self.gen.steps > self.gen.timesteps {
            return Err(RcdError::Config("`gen.steps` exceeds `gen.timesteps`".into()));
        }
        for (k, v) in [("optim.lr", self.optim.lr), ("gen.lr", self.gen.optim.lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(RcdError::Config(format!("`{k}` must be positive")));
            }
        }
        for spec in self.datasets.values() {
            spec.validate().map_err(|e| RcdError::Config(e.to_string()))?;
        }
        let known = |n: &String| -> Result<()> {
            if self.datasets.contains_key(n) {
                Ok(())
            } else {
                Err(RcdError::Config(format!("dataset `{n}` is not defined")))
            }
        };
        self.train.datasets.iter().try_for_each(known)?;
        self.eval.dataset.iter().try_for_each(known)?;
        self.gen.dataset.iter().try_for_each(known)?;
        if let Some(p) = &self.gen.checkpoint {
            if !p.is_file() {
                return Err(RcdError::Config(format!("generator checkpoint {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn dataset(&self, name: &str) -> Result<&DatasetSpec> {
        self.datasets
            .get(name)
            .ok_or_else(|| RcdError::Config(format!("dataset `{name}` is not defined")))
    }
}
