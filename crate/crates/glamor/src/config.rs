//! Training configuration files and their resolution.
//!
//! A config file is `key = value` lines with `#` comments. Values resolve
//! with precedence command-line flag > config file > profile default. The
//! profile (`desk` or `full`) and the recipe are resolved first because
//! they choose the defaults everything else overrides.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use glamor_core::datamodel::ErasingConfig;
use glamor_core::losses::{LossConfig, Mining, Reduction};
use glamor_core::model::ModelDescriptor;
use glamor_core::teaming::DEFAULT_SHARPNESS;
use glamor_core::training::{ProxyClasses, Recipe, TrainConfig};

use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Full,
}

impl Profile {
    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "desk" => Some(Profile::Desk),
            "full" => Some(Profile::Full),
            _ => None,
        }
    }
}

const MODEL_KEYS: [&str; 8] = [
    "cbam_placement",
    "ga_enabled",
    "cbam_reduction",
    "spatial_kernel",
    "ga_width",
    "embedding_dim",
    "base_width",
    "input_size",
];

/// Ordered `key = value` pairs from one source.
pub type Entries = Vec<(String, String)>;

pub fn parse_entries(text: &str) -> std::result::Result<Entries, Vec<String>> {
    let mut out = Vec::new();
    let mut errors = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) => out.push((k.trim().to_string(), v.trim().to_string())),
            None => errors.push(format!("line {}: `{line}` is not key = value", n + 1)),
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(errors)
    }
}

pub fn read_entries(path: &Path) -> Result<Entries> {
    let text = fs::read_to_string(path).at(path)?;
    parse_entries(&text).map_err(|e| Error::Config(e.into_iter().map(|m| format!("{}: {m}", path.display())).collect()))
}

/// Parses a `--set key=value` flag.
pub fn parse_set(s: &str) -> Result<(String, String)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| Error::Usage(format!("--set expects key=value, got `{s}`")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    pub profile: Profile,
    pub train: TrainConfig,
    pub descriptor: ModelDescriptor,
    pub loss: LossConfig,
    /// Softmax sharpness of the prototype gate written by the brand recipe.
    pub gate_sharpness: f64,
}

fn mining_str(m: Mining) -> &'static str {
    match m {
        Mining::BatchHard => "batch_hard",
        Mining::AllValid => "all_valid",
    }
}

fn reduction_str(r: Reduction) -> &'static str {
    match r {
        Reduction::MeanActive => "mean_active",
        Reduction::Mean => "mean",
        Reduction::Sum => "sum",
    }
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ResolvedConfig {
    /// Resolves `file` then `flags` over the profile defaults. Every bad key
    /// or value is reported, not just the first.
    pub fn resolve(file: &Entries, flags: &Entries) -> Result<Self> {
        let mut errors = Vec::new();
        let lookup =
            |key: &str| -> Option<&str> { flags.iter().chain(file).find(|(k, _)| k == key).map(|(_, v)| v.as_str()) };
        let profile = match lookup("profile") {
            None => Profile::Desk,
            Some(v) => Profile::parse(v).unwrap_or_else(|| {
                errors.push(format!("profile: expected desk or full, got `{v}`"));
                Profile::Desk
            }),
        };
        let recipe = match lookup("recipe") {
            None => Recipe::BrandProxyNca,
            Some(v) => Recipe::parse(v).unwrap_or_else(|| {
                errors.push(format!("recipe: expected brand_proxynca or reid_triplet, got `{v}`"));
                Recipe::BrandProxyNca
            }),
        };
        let seed = 0;
        let (mut train, descriptor) = match profile {
            Profile::Desk => (TrainConfig::desk(recipe, seed), recipe.desk_descriptor()),
            Profile::Full => (TrainConfig::full(recipe, seed), recipe.full_descriptor()),
        };
        let mut loss = recipe.default_loss();
        let mut gate_sharpness = DEFAULT_SHARPNESS;
        // ga_width follows base_width unless set explicitly.
        let mut model_kv: BTreeMap<String, String> =
            descriptor.to_key_values().into_iter().filter(|(k, _)| k != "ga_width").collect();
        let mut erasing_probability = train.erasing.as_ref().map_or(0.0, |e| e.probability);

        for (key, value) in file.iter().chain(flags) {
            let v = value.as_str();
            let mut bad = |what: &str| errors.push(format!("{key}: expected {what}, got `{v}`"));
            macro_rules! set {
                ($slot:expr, $what:expr) => {
                    match v.parse() {
                        Ok(x) => $slot = x,
                        Err(_) => bad($what),
                    }
                };
            }
            match key.as_str() {
                "profile" | "recipe" => {}
                k if MODEL_KEYS.contains(&k) => {
                    model_kv.insert(k.to_string(), v.to_string());
                }
                "base_lr" | "lr" => set!(train.base_lr, "a number"),
                "warmup_epochs" => set!(train.warmup_epochs, "an integer"),
                "total_epochs" | "epochs" => set!(train.total_epochs, "an integer"),
                "decay_milestones" => {
                    match v.split(',').filter(|s| !s.trim().is_empty()).map(|s| s.trim().parse()).collect() {
                        Ok(m) => train.decay_milestones = m,
                        Err(_) => bad("a comma-separated list of integers"),
                    }
                }
                "decay_factor" => set!(train.decay_factor, "a number"),
                "batch_p" => set!(train.batch_pk.0, "an integer"),
                "batch_k" => set!(train.batch_pk.1, "an integer"),
                "seed" => set!(train.seed, "an integer"),
                "steps_per_epoch" => {
                    if v == "auto" {
                        train.steps_per_epoch = None;
                    } else {
                        match v.parse() {
                            Ok(x) => train.steps_per_epoch = Some(x),
                            Err(_) => bad("an integer or `auto`"),
                        }
                    }
                }
                "weight_decay" => set!(train.weight_decay, "a number"),
                "erasing_probability" => set!(erasing_probability, "a number"),
                "color_shuffle" => match v.parse::<f64>() {
                    Ok(x) if x > 0.0 => train.color_shuffle = Some(x),
                    Ok(_) => train.color_shuffle = None,
                    Err(_) => bad("a number"),
                },
                "classes" => match ProxyClasses::parse(v) {
                    Some(c) => train.classes = c,
                    None => bad("identity, brand, color or type"),
                },
                "proxy_lr_scale" => set!(train.proxy_lr_scale, "a number"),
                "validate_every" => set!(train.validate_every, "an integer"),
                "validation_samples" => set!(train.validation_samples, "an integer"),
                "margin" => set!(loss.margin, "a number"),
                "mining" => match v {
                    "batch_hard" => loss.mining = Mining::BatchHard,
                    "all_valid" => loss.mining = Mining::AllValid,
                    _ => bad("batch_hard or all_valid"),
                },
                "reduction" => match v {
                    "mean_active" => loss.reduction = Reduction::MeanActive,
                    "mean" => loss.reduction = Reduction::Mean,
                    "sum" => loss.reduction = Reduction::Sum,
                    _ => bad("mean_active, mean or sum"),
                },
                "proxy_scale" => set!(loss.proxy_scale, "a number"),
                "triplet_normalize" => set!(loss.triplet_normalize, "true or false"),
                "proxy_normalize" => set!(loss.proxy_normalize, "true or false"),
                "gate_sharpness" => set!(gate_sharpness, "a number"),
                _ => errors.push(format!("{key}: unknown key")),
            }
        }
        train.erasing = (erasing_probability > 0.0)
            .then(|| ErasingConfig { probability: erasing_probability, ..ErasingConfig::default() });
        let descriptor = match ModelDescriptor::from_key_values(model_kv.iter().map(|(k, v)| (k.as_str(), v.as_str())))
        {
            Ok(d) => Some(d),
            Err(e) => {
                errors.push(e.to_string());
                None
            }
        };
        if let Err(e) = train.validate() {
            let text = e.to_string();
            let body = text.split_once(": ").map_or(text.as_str(), |(_, b)| b);
            errors.extend(body.split("; ").map(str::to_string));
        }
        if !(gate_sharpness > 0.0 && gate_sharpness.is_finite()) {
            errors.push(format!("gate_sharpness must be positive, got {gate_sharpness}"));
        }
        if errors.is_empty() {
            Ok(Self { profile, train, descriptor: descriptor.unwrap(), loss, gate_sharpness })
        } else {
            Err(Error::Config(errors))
        }
    }

    /// Every resolved value, one `key = value` line each, in a fixed order.
    /// Feeding the dump back through [`ResolvedConfig::resolve`] reproduces
    /// the same config.
    pub fn dump(&self) -> String {
        let t = &self.train;
        let l = &self.loss;
        let mut lines = vec![
            ("profile".to_string(), self.profile.as_str().to_string()),
            ("recipe".into(), t.recipe.as_str().into()),
            ("seed".into(), t.seed.to_string()),
            ("base_lr".into(), format!("{:?}", t.base_lr)),
            ("warmup_epochs".into(), t.warmup_epochs.to_string()),
            ("total_epochs".into(), t.total_epochs.to_string()),
            ("decay_milestones".into(), list(&t.decay_milestones)),
            ("decay_factor".into(), format!("{:?}", t.decay_factor)),
            ("batch_p".into(), t.batch_pk.0.to_string()),
            ("batch_k".into(), t.batch_pk.1.to_string()),
            ("steps_per_epoch".into(), t.steps_per_epoch.map_or("auto".into(), |s| s.to_string())),
            ("weight_decay".into(), format!("{:?}", t.weight_decay)),
            ("erasing_probability".into(), format!("{:?}", t.erasing.as_ref().map_or(0.0, |e| e.probability))),
            ("color_shuffle".into(), format!("{:?}", t.color_shuffle.unwrap_or(0.0))),
            ("classes".into(), t.classes.as_str().into()),
            ("proxy_lr_scale".into(), format!("{:?}", t.proxy_lr_scale)),
            ("validate_every".into(), t.validate_every.to_string()),
            ("validation_samples".into(), t.validation_samples.to_string()),
            ("margin".into(), format!("{:?}", l.margin)),
            ("mining".into(), mining_str(l.mining).into()),
            ("reduction".into(), reduction_str(l.reduction).into()),
            ("proxy_scale".into(), format!("{:?}", l.proxy_scale)),
            ("triplet_normalize".into(), l.triplet_normalize.to_string()),
            ("proxy_normalize".into(), l.proxy_normalize.to_string()),
            ("gate_sharpness".into(), format!("{:?}", self.gate_sharpness)),
        ];
        lines.extend(self.descriptor.to_key_values().into_iter().filter(|(k, _)| k != "backbone"));
        lines.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn hash(&self) -> String {
        crate::sha256_hex(self.dump().as_bytes())
    }
}
