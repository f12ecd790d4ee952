//! Run configuration: `key = value` files, environment, and flag overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use kgalign::kg::SyntheticSpec;
use kgalign::train::TrainingConfig;
use kgalign::{Error, Result};

pub const SEED_ENV: &str = "KGALIGN_SEED";

/// Deletion-ratio bounds accepted without `allow_any_pr`.
pub const SEARCHED_PR: [f64; 4] = [0.0, 0.05, 0.1, 0.15];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" | "32" => Some(Precision::F32),
            "f64" | "64" => Some(Precision::F64),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

/// A synthetic data source: generator parameters plus an optional fixed
/// data seed (otherwise derived from the run seed).
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSource {
    pub spec: SyntheticSpec,
    pub seed: Option<u64>,
}

impl SyntheticSource {
    /// Parses `n=200 deg=5 rel=20 perturb=0.15 [seed=7]`; commas also separate.
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut out = SyntheticSource {
            spec: SyntheticSpec::default(),
            seed: None,
        };
        for item in text.split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty()) {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| format!("synthetic item `{item}` is not key=value"))?;
            let bad = |e: &dyn std::fmt::Display| format!("synthetic `{k}`: {e}");
            match k {
                "n" => out.spec.n_entities = v.parse().map_err(|e| bad(&e))?,
                "rel" => out.spec.n_relations = v.parse().map_err(|e| bad(&e))?,
                "deg" => out.spec.avg_degree = v.parse().map_err(|e| bad(&e))?,
                "perturb" => out.spec.perturb_ratio = v.parse().map_err(|e| bad(&e))?,
                "seed" => out.seed = Some(v.parse().map_err(|e| bad(&e))?),
                _ => return Err(format!("unknown synthetic key `{k}` (expected n, rel, deg, perturb, seed)")),
            }
        }
        Ok(out)
    }

    pub fn canonical(&self) -> String {
        let s = &self.spec;
        let mut text = format!(
            "n={} rel={} deg={} perturb={}",
            s.n_entities, s.n_relations, s.avg_degree, s.perturb_ratio
        );
        if let Some(seed) = self.seed {
            let _ = write!(text, " seed={seed}");
        }
        text
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainingConfig,
    pub data: Option<PathBuf>,
    pub synthetic: Option<SyntheticSource>,
    pub fold: u8,
    pub out: PathBuf,
    pub precision: Precision,
    pub allow_any_pr: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainingConfig::default(),
            data: None,
            synthetic: None,
            fold: 1,
            out: PathBuf::from("kgalign-out"),
            precision: Precision::F32,
            allow_any_pr: false,
        }
    }
}

/// Every recognized key, in the order `config.resolved` lists them.
pub const KEYS: &[&str] = &[
    "data",
    "synthetic",
    "fold",
    "out",
    "precision",
    "seed",
    "lr",
    "weight_decay",
    "dropout",
    "layers",
    "negatives",
    "epsilon",
    "margin",
    "lambda",
    "d_ent",
    "d_rel",
    "d_proj",
    "pr",
    "allow_any_pr",
    "refresh_period",
    "eval_period",
    "max_epochs",
    "patience",
    "use_relation_channel",
    "use_augmented_alignment",
    "use_contrastive",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| format!("`{key}`: cannot parse `{value}`: {e}"))
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("`{key}`: expected true or false, got `{value}`")),
    }
}

impl RunConfig {
    /// Sets one key. An empty value clears optional keys.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let t = &mut self.train;
        match key {
            "data" => self.data = (!value.is_empty()).then(|| PathBuf::from(value)),
            "synthetic" => {
                self.synthetic = if value.is_empty() {
                    None
                } else {
                    Some(SyntheticSource::parse(value)?)
                }
            }
            "fold" => self.fold = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "precision" => {
                self.precision =
                    Precision::parse(value).ok_or_else(|| format!("`precision`: expected f32 or f64, got `{value}`"))?
            }
            "seed" => t.seed = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "dropout" => t.dropout = parse(key, value)?,
            "layers" => t.layers = parse(key, value)?,
            "negatives" => t.negatives_per_entity = parse(key, value)?,
            "epsilon" => t.epsilon = parse(key, value)?,
            "margin" => t.margin = parse(key, value)?,
            "lambda" => t.lambda = parse(key, value)?,
            "d_ent" => t.d_ent = parse(key, value)?,
            "d_rel" => t.d_rel = parse(key, value)?,
            "d_proj" => t.d_proj = parse(key, value)?,
            "pr" => t.pr = parse(key, value)?,
            "allow_any_pr" => self.allow_any_pr = parse_bool(key, value)?,
            "refresh_period" => t.refresh_period = parse(key, value)?,
            "eval_period" => t.eval_period = parse(key, value)?,
            "max_epochs" => t.max_epochs = parse(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "use_relation_channel" => t.use_relation_channel = parse_bool(key, value)?,
            "use_augmented_alignment" => t.use_augmented_alignment = parse_bool(key, value)?,
            "use_contrastive" => t.use_contrastive = parse_bool(key, value)?,
            _ => return Err(format!("unknown configuration key `{key}`")),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let t = &self.train;
        match key {
            "data" => self.data.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "synthetic" => self.synthetic.as_ref().map(SyntheticSource::canonical).unwrap_or_default(),
            "fold" => self.fold.to_string(),
            "out" => self.out.display().to_string(),
            "precision" => self.precision.name().into(),
            "seed" => t.seed.to_string(),
            "lr" => t.lr.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "dropout" => t.dropout.to_string(),
            "layers" => t.layers.to_string(),
            "negatives" => t.negatives_per_entity.to_string(),
            "epsilon" => t.epsilon.to_string(),
            "margin" => t.margin.to_string(),
            "lambda" => t.lambda.to_string(),
            "d_ent" => t.d_ent.to_string(),
            "d_rel" => t.d_rel.to_string(),
            "d_proj" => t.d_proj.to_string(),
            "pr" => t.pr.to_string(),
            "allow_any_pr" => self.allow_any_pr.to_string(),
            "refresh_period" => t.refresh_period.to_string(),
            "eval_period" => t.eval_period.to_string(),
            "max_epochs" => t.max_epochs.to_string(),
            "patience" => t.patience.to_string(),
            "use_relation_channel" => t.use_relation_channel.to_string(),
            "use_augmented_alignment" => t.use_augmented_alignment.to_string(),
            "use_contrastive" => t.use_contrastive.to_string(),
            _ => unreachable!("key list and accessor disagree on `{key}`"),
        }
    }

    /// Applies a `key = value` document. `origin` names it in errors.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected `key = value`", i + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("{origin}:{}: `{key}` set twice", i + 1)));
            }
            self.set(key, value.trim())
                .map_err(|e| Error::Config(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Overrides the seed from the environment, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.set("seed", v.trim())
                .map_err(|e| Error::Config(format!("{SEED_ENV}: {e}")))?;
        }
        Ok(())
    }

    pub fn apply_pairs(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v).map_err(|e| Error::Config(format!("command line: {e}")))?;
        }
        Ok(())
    }

    /// Every key with its effective value, one `key = value` per line.
    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key));
        }
        out
    }

    pub fn ablations(&self) -> Vec<&'static str> {
        let t = &self.train;
        let mut out = Vec::new();
        if !t.use_relation_channel {
            out.push("no-relation");
        }
        if !t.use_augmented_alignment {
            out.push("no-aug-alignment");
        }
        if !t.use_contrastive {
            out.push("no-contrastive");
        }
        out
    }

    /// Checks everything that can be checked before touching data.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !self.allow_any_pr && !SEARCHED_PR.contains(&self.train.pr) {
            return Err(Error::Config(format!(
                "pr = {} is outside the searched set {{0, 0.05, 0.1, 0.15}}; pass --allow-any-pr to use it",
                self.train.pr
            )));
        }
        if !(1..=5).contains(&self.fold) {
            return Err(Error::Config(format!("fold must be in 1..=5, got {}", self.fold)));
        }
        match (&self.data, &self.synthetic) {
            (Some(_), Some(_)) => Err(Error::Config("set either `data` or `synthetic`, not both".into())),
            (None, None) => Err(Error::Config("no data source: set `data` or `synthetic`".into())),
            _ => Ok(()),
        }
    }
}

pub fn ablation_pair(name: &str) -> std::result::Result<(String, String), String> {
    let key = match name {
        "no-relation" => "use_relation_channel",
        "no-aug-alignment" => "use_augmented_alignment",
        "no-contrastive" => "use_contrastive",
        _ => {
            return Err(format!(
                "unknown ablation `{name}` (expected no-relation, no-aug-alignment, no-contrastive)"
            ))
        }
    };
    Ok((key.to_string(), "false".to_string()))
}
