//! Plain-text `key = value` configuration with typed views of every module config.
//!
//! Lines are `key=value`; `#` starts a comment; later keys override earlier ones.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::ccm::{CcmConfig, SinkhornConfig};
use crate::encoder::{EncoderConfig, PretrainConfig};
use crate::episodes::SynthConfig;
use crate::error::{Error, Result};
use crate::gomm::GommConfig;
use crate::model::{ModelConfig, Variant};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    map: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = Self::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{raw}`", n + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            kv.map.insert(k.to_string(), v.trim().to_string());
        }
        Ok(kv)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Sorted `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.map {
            s.push_str(k);
            s.push('=');
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Entries of `other` win.
    pub fn merge(&mut self, other: &KeyValues) {
        for (k, v) in &other.map {
            self.map.insert(k.clone(), v.clone());
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(v) if v.is_empty() => Ok(Some(Vec::new())),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("invalid list item `{s}` for `{key}`")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    pub fn set_list<T: Display>(&mut self, key: &str, values: &[T]) {
        let joined: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        self.set(key, joined.join(","));
    }

    fn pair(&self, key: &str, default: (f64, f64)) -> Result<(f64, f64)> {
        match self.get_list::<f64>(key)? {
            None => Ok(default),
            Some(v) if v.len() == 2 => Ok((v[0], v[1])),
            Some(_) => Err(Error::Config(format!("`{key}` needs two comma-separated values"))),
        }
    }
}

/// Typed configs that read from and write into a [`KeyValues`] map.
pub trait KvConfig: Sized {
    fn write_kv(&self, kv: &mut KeyValues);
    /// Missing keys keep their defaults.
    fn read_kv(kv: &KeyValues) -> Result<Self>;
}

impl KvConfig for EncoderConfig {
    fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("encoder.image_size", self.image_size);
        kv.set_list("encoder.widths", &self.widths);
        kv.set("encoder.mid_stage", self.mid_stage);
        kv.set("encoder.high_stage", self.high_stage);
        kv.set("encoder.frozen", self.frozen);
    }

    fn read_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        Ok(Self {
            image_size: kv.get_or("encoder.image_size", d.image_size)?,
            widths: kv.get_list("encoder.widths")?.unwrap_or(d.widths),
            mid_stage: kv.get_or("encoder.mid_stage", d.mid_stage)?,
            high_stage: kv.get_or("encoder.high_stage", d.high_stage)?,
            frozen: kv.get_or("encoder.frozen", d.frozen)?,
        })
    }
}

impl KvConfig for PretrainConfig {
    fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("pretrain.epochs", self.epochs);
        kv.set("pretrain.batch_size", self.batch_size);
        kv.set("pretrain.lr", self.lr);
        kv.set("pretrain.holdout_fraction", self.holdout_fraction);
        kv.set("pretrain.flip", self.flip);
        kv.set("pretrain.seed", self.seed);
    }

    fn read_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        Ok(Self {
            epochs: kv.get_or("pretrain.epochs", d.epochs)?,
            batch_size: kv.get_or("pretrain.batch_size", d.batch_size)?,
            lr: kv.get_or("pretrain.lr", d.lr)?,
            holdout_fraction: kv.get_or("pretrain.holdout_fraction", d.holdout_fraction)?,
            flip: kv.get_or("pretrain.flip", d.flip)?,
            seed: kv.get_or("pretrain.seed", d.seed)?,
        })
    }
}

impl KvConfig for ModelConfig {
    fn write_kv(&self, kv: &mut KeyValues) {
        self.encoder.write_kv(kv);
        kv.set("gomm.num_prototypes", self.gomm.num_prototypes);
        kv.set("gomm.tau", self.gomm.tau);
        kv.set("gomm.init_std", self.gomm.init_std);
        kv.set("ccm.num_selected", self.ccm.num_selected);
        kv.set("ccm.dct_side", self.ccm.dct_side);
        kv.set("ccm.epsilon", self.ccm.sinkhorn.epsilon);
        kv.set("ccm.sinkhorn_iters", self.ccm.sinkhorn.max_iters);
        kv.set("ccm.sinkhorn_tol", self.ccm.sinkhorn.tol);
        kv.set("ccm.mean_aggregate", self.ccm.mean_aggregate);
        kv.set("ccm.logit_scale", self.ccm.logit_scale);
        kv.set("ccm.global_prototype", self.ccm.global_prototype);
        kv.set("ccm.identity_init", self.ccm.identity_init);
        kv.set("decoder.width", self.decoder_width);
        kv.set("decoder.dropout", self.decoder_dropout);
        kv.set("model.variant", self.variant);
    }

    fn read_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let config = Self {
            encoder: EncoderConfig::read_kv(kv)?,
            gomm: GommConfig {
                num_prototypes: kv.get_or("gomm.num_prototypes", d.gomm.num_prototypes)?,
                tau: kv.get_or("gomm.tau", d.gomm.tau)?,
                init_std: kv.get_or("gomm.init_std", d.gomm.init_std)?,
            },
            ccm: CcmConfig {
                num_selected: kv.get_or("ccm.num_selected", d.ccm.num_selected)?,
                dct_side: kv.get_or("ccm.dct_side", d.ccm.dct_side)?,
                sinkhorn: SinkhornConfig {
                    epsilon: kv.get_or("ccm.epsilon", d.ccm.sinkhorn.epsilon)?,
                    max_iters: kv.get_or("ccm.sinkhorn_iters", d.ccm.sinkhorn.max_iters)?,
                    tol: kv.get_or("ccm.sinkhorn_tol", d.ccm.sinkhorn.tol)?,
                },
                mean_aggregate: kv.get_or("ccm.mean_aggregate", d.ccm.mean_aggregate)?,
                logit_scale: kv.get_or("ccm.logit_scale", d.ccm.logit_scale)?,
                global_prototype: kv.get_or("ccm.global_prototype", d.ccm.global_prototype)?,
                identity_init: kv.get_or("ccm.identity_init", d.ccm.identity_init)?,
            },
            decoder_width: kv.get_or("decoder.width", d.decoder_width)?,
            decoder_dropout: kv.get_or("decoder.dropout", d.decoder_dropout)?,
            variant: kv.get_or::<Variant>("model.variant", d.variant)?,
        };
        config.validate()?;
        Ok(config)
    }
}

impl KvConfig for TrainConfig {
    fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("train.lr", self.lr);
        kv.set("train.momentum", self.momentum);
        kv.set("train.batch_size", self.batch_size);
        kv.set("train.epochs", self.epochs);
        kv.set("train.episodes_per_epoch", self.episodes_per_epoch);
        kv.set("train.shots", self.shots);
        kv.set("train.seed", self.seed);
        kv.set("train.val_episodes", self.val_episodes);
        kv.set("train.flip", self.flip);
        kv.set("train.lr_power", self.lr_power);
        kv.set("train.weight_decay", self.weight_decay);
        kv.set("train.loss_target", self.toggles.target);
        kv.set("train.loss_general", self.toggles.general);
        kv.set("train.loss_allocation", self.toggles.allocation);
    }

    fn read_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let c = Self {
            lr: kv.get_or("train.lr", d.lr)?,
            momentum: kv.get_or("train.momentum", d.momentum)?,
            batch_size: kv.get_or("train.batch_size", d.batch_size)?,
            epochs: kv.get_or("train.epochs", d.epochs)?,
            episodes_per_epoch: kv.get_or("train.episodes_per_epoch", d.episodes_per_epoch)?,
            shots: kv.get_or("train.shots", d.shots)?,
            seed: kv.get_or("train.seed", d.seed)?,
            val_episodes: kv.get_or("train.val_episodes", d.val_episodes)?,
            flip: kv.get_or("train.flip", d.flip)?,
            lr_power: kv.get_or("train.lr_power", d.lr_power)?,
            weight_decay: kv.get_or("train.weight_decay", d.weight_decay)?,
            toggles: crate::trainer::loss::LossToggles {
                target: kv.get_or("train.loss_target", d.toggles.target)?,
                general: kv.get_or("train.loss_general", d.toggles.general)?,
                allocation: kv.get_or("train.loss_allocation", d.toggles.allocation)?,
            },
        };
        c.validate()?;
        Ok(c)
    }
}

impl KvConfig for SynthConfig {
    fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("synth.image_size", self.image_size);
        kv.set("synth.num_classes", self.num_classes);
        kv.set("synth.images_per_class", self.images_per_class);
        kv.set("synth.target_scale", format!("{},{}", self.target_scale.0, self.target_scale.1));
        kv.set("synth.distractor_scale", format!("{},{}", self.distractor_scale.0, self.distractor_scale.1));
        kv.set("synth.distractors", format!("{},{}", self.distractors.0, self.distractors.1));
        kv.set("synth.rotation_jitter", self.rotation_jitter);
        kv.set("synth.noise", self.noise);
        kv.set("synth.seed", self.seed);
    }

    fn read_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let distractors = match kv.get_list::<usize>("synth.distractors")? {
            None => d.distractors,
            Some(v) if v.len() == 2 => (v[0], v[1]),
            Some(_) => return Err(Error::Config("`synth.distractors` needs two values".into())),
        };
        let c = Self {
            image_size: kv.get_or("synth.image_size", d.image_size)?,
            num_classes: kv.get_or("synth.num_classes", d.num_classes)?,
            images_per_class: kv.get_or("synth.images_per_class", d.images_per_class)?,
            target_scale: kv.pair("synth.target_scale", d.target_scale)?,
            distractor_scale: kv.pair("synth.distractor_scale", d.distractor_scale)?,
            distractors,
            rotation_jitter: kv.get_or("synth.rotation_jitter", d.rotation_jitter)?,
            noise: kv.get_or("synth.noise", d.noise)?,
            seed: kv.get_or("synth.seed", d.seed)?,
        };
        c.validate()?;
        Ok(c)
    }
}
