//! Flat `key = value` run configuration with `[section]` headers.
//!
//! Keys are unique across sections, so an override may name a key bare
//! (`steps=20`) or qualified (`sampling.steps=20`). Every value is
//! validated after overrides are applied; failures are [`Error::Config`].

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::correspondence::SearchSpace;
use crate::diffusion::scheduler::MIN_STEPS;
use crate::diffusion::{DenoiserConfig, SamplerSettings};
use crate::error::{Error, Result};
use crate::schemes::{QkInject, Scheme, SchemeOptions, SchemeSpec};

/// Every key, in canonical order, with its section.
pub const KEYS: &[(&str, &str)] = &[
    ("batch", "batch_size"),
    ("batch", "prompts"),
    ("batch", "subject_positions"),
    ("batch", "anchors"),
    ("sampling", "steps"),
    ("sampling", "guidance_scale"),
    ("sampling", "sampling_seed"),
    ("model", "weight_seed"),
    ("model", "grid_height"),
    ("model", "grid_width"),
    ("model", "heads"),
    ("model", "channels"),
    ("intervention", "scheme"),
    ("intervention", "qk_inject"),
    ("intervention", "vsd_inject"),
    ("intervention", "crossing"),
    ("intervention", "adain_in_crossing"),
    ("intervention", "qk_window"),
    ("intervention", "vsd_window"),
    ("intervention", "qk_guided_only"),
    ("intervention", "vsd_both_halves"),
    ("intervention", "crossing_both_halves"),
    ("correspondence", "tau"),
    ("correspondence", "feature_step"),
    ("correspondence", "search"),
    ("stress", "v_shift_sigma"),
    ("stress", "v_shift_image"),
    ("output", "run_id"),
];

const AUTO: &str = "auto";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub batch_size: usize,
    /// Token ids per image; `None` picks distinct style tokens around a
    /// shared subject token.
    pub prompts: Option<Vec<Vec<u32>>>,
    /// One position for every image, or one per image.
    pub subject_positions: Vec<usize>,
    pub anchors: Vec<usize>,
    pub steps: usize,
    pub guidance_scale: f32,
    pub sampling_seed: u64,
    pub model: DenoiserConfig,
    pub scheme: Scheme,
    pub options: SchemeOptions,
    pub tau: f32,
    /// Step whose decoder features drive correspondence; `None` is `⌊n/4⌋`.
    pub feature_step: Option<usize>,
    pub search: SearchSpace,
    /// Adds this many standard deviations to one image's self-attention
    /// values in every pass.
    pub v_shift_sigma: f32,
    pub v_shift_image: usize,
    pub run_id: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            batch_size: 2,
            prompts: None,
            subject_positions: vec![1],
            anchors: vec![0],
            steps: 50,
            guidance_scale: 7.5,
            sampling_seed: 0,
            model: DenoiserConfig::default(),
            scheme: Scheme::ConsiStyle,
            options: SchemeOptions::default(),
            tau: 0.3,
            feature_step: None,
            search: SearchSpace::SubjectPatches,
            v_shift_sigma: 0.0,
            v_shift_image: 0,
            run_id: None,
        }
    }
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::config(key, format!("`{s}` is not a valid list element")))
        })
        .collect()
}

fn scalar<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("invalid value `{value}`")))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got `{value}`"))),
    }
}

fn window(key: &str, value: &str) -> Result<(f64, f64)> {
    match list::<f64>(key, value)?.as_slice() {
        &[lo, hi] => Ok((lo, hi)),
        _ => Err(Error::config(key, "expected two fractions `lo,hi`")),
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn section_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(_, k)| *k == key).map(|(s, _)| *s)
}

impl RunConfig {
    /// Assigns one key from its textual value, without cross-key validation.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = match key.split_once('.') {
            Some((section, bare)) => {
                if section_of(bare) != Some(section) {
                    return Err(Error::config(key, "unknown key"));
                }
                bare
            }
            None => key,
        };
        let value = value.trim();
        match key {
            "batch_size" => self.batch_size = scalar(key, value)?,
            "prompts" => {
                self.prompts = if value == AUTO {
                    None
                } else {
                    Some(value.split(';').map(|p| list(key, p)).collect::<Result<_>>()?)
                }
            }
            "subject_positions" => self.subject_positions = list(key, value)?,
            "anchors" => self.anchors = list(key, value)?,
            "steps" => self.steps = scalar(key, value)?,
            "guidance_scale" => self.guidance_scale = scalar(key, value)?,
            "sampling_seed" => self.sampling_seed = scalar(key, value)?,
            "weight_seed" => self.model.weight_seed = scalar(key, value)?,
            "grid_height" => self.model.grid.0 = scalar(key, value)?,
            "grid_width" => self.model.grid.1 = scalar(key, value)?,
            "heads" => self.model.heads = scalar(key, value)?,
            "channels" => match list::<usize>(key, value)?.as_slice() {
                &[hi, lo] => self.model.channels = [hi, lo],
                _ => return Err(Error::config(key, "expected two widths `high,low`")),
            },
            "scheme" => self.scheme = value.parse().map_err(|e: String| Error::config(key, e))?,
            "qk_inject" => self.options.qk = value.parse().map_err(|e: String| Error::config(key, e))?,
            "vsd_inject" => self.options.vsd = boolean(key, value)?,
            "crossing" => self.options.crossing = boolean(key, value)?,
            "adain_in_crossing" => self.options.adain = boolean(key, value)?,
            "qk_window" => self.options.qk_window = window(key, value)?,
            "vsd_window" => self.options.vsd_window = window(key, value)?,
            "qk_guided_only" => self.options.qk_guided_only = boolean(key, value)?,
            "vsd_both_halves" => self.options.vsd_both_halves = boolean(key, value)?,
            "crossing_both_halves" => self.options.crossing_both_halves = boolean(key, value)?,
            "tau" => self.tau = scalar(key, value)?,
            "feature_step" => self.feature_step = if value == AUTO { None } else { Some(scalar(key, value)?) },
            "search" => {
                self.search = match value {
                    "subject" => SearchSpace::SubjectPatches,
                    "all" => SearchSpace::AllPatches,
                    _ => return Err(Error::config(key, format!("expected subject or all, got `{value}`"))),
                }
            }
            "v_shift_sigma" => self.v_shift_sigma = scalar(key, value)?,
            "v_shift_image" => self.v_shift_image = scalar(key, value)?,
            "run_id" => self.run_id = (value != AUTO).then(|| value.to_string()),
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Textual value of one key, as written to `config.resolved`.
    pub fn get(&self, key: &str) -> Option<String> {
        let on = |b: bool| b.to_string();
        let o = &self.options;
        Some(match key {
            "batch_size" => self.batch_size.to_string(),
            "prompts" => match &self.prompts {
                None => AUTO.into(),
                Some(p) => p.iter().map(|t| join(t)).collect::<Vec<_>>().join(";"),
            },
            "subject_positions" => join(&self.subject_positions),
            "anchors" => join(&self.anchors),
            "steps" => self.steps.to_string(),
            "guidance_scale" => self.guidance_scale.to_string(),
            "sampling_seed" => self.sampling_seed.to_string(),
            "weight_seed" => self.model.weight_seed.to_string(),
            "grid_height" => self.model.grid.0.to_string(),
            "grid_width" => self.model.grid.1.to_string(),
            "heads" => self.model.heads.to_string(),
            "channels" => join(&self.model.channels),
            "scheme" => self.scheme.token().into(),
            "qk_inject" => o.qk.token().into(),
            "vsd_inject" => on(o.vsd),
            "crossing" => on(o.crossing),
            "adain_in_crossing" => on(o.adain),
            "qk_window" => format!("{},{}", o.qk_window.0, o.qk_window.1),
            "vsd_window" => format!("{},{}", o.vsd_window.0, o.vsd_window.1),
            "qk_guided_only" => on(o.qk_guided_only),
            "vsd_both_halves" => on(o.vsd_both_halves),
            "crossing_both_halves" => on(o.crossing_both_halves),
            "tau" => self.tau.to_string(),
            "feature_step" => self.feature_step.map_or_else(|| AUTO.into(), |s| s.to_string()),
            "search" => match self.search {
                SearchSpace::SubjectPatches => "subject".into(),
                SearchSpace::AllPatches => "all".into(),
            },
            "v_shift_sigma" => self.v_shift_sigma.to_string(),
            "v_shift_image" => self.v_shift_image.to_string(),
            "run_id" => self.run_id.clone().unwrap_or_else(|| AUTO.into()),
            _ => return None,
        })
    }

    /// Parses config text and applies `overrides` (`key=value`) last.
    pub fn from_text(text: &str, overrides: &[String]) -> Result<Self> {
        let mut config = Self::default();
        let mut seen = Vec::new();
        let mut section: Option<String> = None;
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = || format!("line {}", k + 1);
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !KEYS.iter().any(|(s, _)| *s == name) {
                    return Err(Error::config(at(), format!("unknown section `[{name}]`")));
                }
                section = Some(name.to_string());
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(at(), format!("expected `key = value`, got `{line}`")));
            };
            let key = key.trim();
            match (section_of(key), section.as_deref()) {
                (None, _) => return Err(Error::config(key, "unknown key")),
                (Some(want), Some(got)) if want != got => {
                    return Err(Error::config(key, format!("belongs in [{want}], found in [{got}]")))
                }
                _ => {}
            }
            if seen.contains(&key) {
                return Err(Error::config(key, "set more than once"));
            }
            seen.push(key);
            config.set(key, value)?;
        }
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o.as_str(), "override must look like key=value"))?;
            config.set(key.trim(), value)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.batch_size;
        if b == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if let Some(prompts) = &self.prompts {
            if prompts.len() != b {
                return Err(Error::config(
                    "prompts",
                    format!("{} prompts for a batch of {b}", prompts.len()),
                ));
            }
        }
        if self.subject_positions.len() != 1 && self.subject_positions.len() != b {
            return Err(Error::config("subject_positions", "give one position or one per image"));
        }
        let tokens = self.prompt_tokens();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::config("prompts", format!("prompt {i} is empty")));
            }
            if self.subject_position(i) >= t.len() {
                return Err(Error::config(
                    "subject_positions",
                    format!("position {} is past the end of prompt {i}", self.subject_position(i)),
                ));
            }
        }
        if self.steps < MIN_STEPS {
            return Err(Error::config(
                "steps",
                format!("must be at least {MIN_STEPS}, got {}", self.steps),
            ));
        }
        if !self.guidance_scale.is_finite() {
            return Err(Error::config("guidance_scale", "must be finite"));
        }
        self.model.validate()?;
        self.spec().validate(b)?;
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::config("tau", format!("must lie in (0, 1], got {}", self.tau)));
        }
        if self.feature_step.is_some_and(|s| s >= self.steps) {
            return Err(Error::config(
                "feature_step",
                format!("must be below steps ({})", self.steps),
            ));
        }
        if !self.v_shift_sigma.is_finite() {
            return Err(Error::config("v_shift_sigma", "must be finite"));
        }
        if self.v_shift_image >= b {
            return Err(Error::config("v_shift_image", format!("outside the batch of {b}")));
        }
        if let Some(id) = &self.run_id {
            let ok = !id.is_empty()
                && !id.starts_with('.')
                && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
            if !ok {
                return Err(Error::config("run_id", "use letters, digits, `-`, `_` and `.` only"));
            }
        }
        Ok(())
    }

    pub fn prompt_tokens(&self) -> Vec<Vec<u32>> {
        match &self.prompts {
            Some(p) => p.clone(),
            None => (0..self.batch_size as u32)
                .map(|i| vec![1, 101, 200 + i, 300 + i])
                .collect(),
        }
    }

    pub fn subject_position(&self, image: usize) -> usize {
        match self.subject_positions.as_slice() {
            [one] => *one,
            many => many[image],
        }
    }

    pub fn feature_step(&self) -> usize {
        self.feature_step.unwrap_or(self.steps / 4)
    }

    pub fn spec(&self) -> SchemeSpec {
        SchemeSpec::new(self.scheme, self.anchors.clone(), self.options)
    }

    pub fn sampler_settings(&self) -> SamplerSettings {
        SamplerSettings {
            steps: self.steps,
            guidance_scale: self.guidance_scale,
            seed: self.sampling_seed,
        }
    }

    /// Every key in canonical order, grouped by section.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for &(s, key) in KEYS {
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                writeln!(out, "[{s}]").unwrap();
                section = s;
            }
            writeln!(out, "{key} = {}", self.get(key).expect("listed key")).unwrap();
        }
        out
    }

    /// `run_id`, or `run-` and twelve hex digits of the SHA-256 of the
    /// resolved configuration.
    pub fn run_id(&self) -> String {
        if let Some(id) = &self.run_id {
            return id.clone();
        }
        let digest = Sha256::digest(self.resolved().as_bytes());
        let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
        format!("run-{hex}")
    }

    pub fn with_options(&self, options: SchemeOptions) -> Self {
        Self {
            options,
            ..self.clone()
        }
    }

    pub fn with_scheme(&self, scheme: Scheme) -> Self {
        Self { scheme, ..self.clone() }
    }

    /// Every intervention component switched off.
    pub fn all_toggles_off(&self) -> Self {
        self.with_options(SchemeOptions {
            qk: QkInject::None,
            vsd: false,
            crossing: false,
            ..self.options
        })
    }
}
