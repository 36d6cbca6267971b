//! Flat `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Keys are the hyperparameter names (`tau`, `w`, `alpha1`, ...), engine
//! switches (`mode`, `entropy_cache`, `loss_align`, `norm`, ...), paths and
//! `synth.*` keys that describe a generated stream. Unknown keys and
//! repeated keys are rejected.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::synth::SynthSpec;
use crate::error::{Error, Result};
use crate::inference::{EngineConfig, FusionNorm, InferViews, Mode};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub engine: EngineConfig,
    pub seed: u64,
    pub stream: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Generated stream used when no stream path is given.
    pub synth: Option<SynthSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            engine: EngineConfig::default(),
            seed: 0,
            stream: None,
            out: None,
            synth: None,
        }
    }
}

fn bad(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("line {line}: {msg}"))
}

fn parse_f64(line: usize, key: &str, v: &str) -> Result<f64> {
    let x: f64 = v
        .parse()
        .map_err(|_| bad(line, format!("{key}: expected a number, got {v:?}")))?;
    if !x.is_finite() {
        return Err(bad(line, format!("{key}: value must be finite")));
    }
    Ok(x)
}

fn parse_usize(line: usize, key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| bad(line, format!("{key}: expected a non-negative integer, got {v:?}")))
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(bad(line, format!("{key}: expected true/false, got {v:?}"))),
    }
}

macro_rules! hp_float_keys {
    ($m:ident) => {
        $m!(tau, alpha, beta, w, alpha1, alpha2, alpha3, lambda, gamma, rho_delta, eps, lr,
            adam_beta1, adam_beta2, adam_eps, weight_decay, h_low_frac, h_high_frac, e_gate_frac, p_mask)
    };
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        let mut synth: Option<SynthSpec> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| bad(line, format!("expected key = value, got {content:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(bad(line, format!("duplicate key {key:?}")));
            }
            if let Some(sk) = key.strip_prefix("synth.") {
                let spec = synth.get_or_insert_with(SynthSpec::default);
                set_synth(spec, sk, value, line)?;
                continue;
            }
            cfg.set(key, value, line)?;
        }
        if let Some(spec) = &mut synth {
            if !seen.contains("synth.seed") {
                spec.seed = cfg.seed;
            }
            spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        cfg.synth = synth;
        cfg.engine.hp.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Apply one `key = value` assignment (also used for CLI overrides).
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let hp = &mut self.engine.hp;
        macro_rules! float_arm {
            ($($f:ident),*) => {
                match key {
                    $(stringify!($f) => { hp.$f = parse_f64(line, key, value)?; return Ok(()); })*
                    _ => {}
                }
            };
        }
        hp_float_keys!(float_arm);
        let e = &mut self.engine;
        match key {
            "m_entropy" => e.hp.m_entropy = parse_usize(line, key, value)?,
            "m_align" => e.hp.m_align = parse_usize(line, key, value)?,
            "m_negative" => e.hp.m_negative = parse_usize(line, key, value)?,
            "mode" => e.mode = Mode::parse(value).map_err(|_| bad(line, format!("unknown mode {value:?}")))?,
            "norm" => e.norm = FusionNorm::parse(value).map_err(|_| bad(line, format!("unknown norm {value:?}")))?,
            "infer_views" => {
                e.infer_views = match value {
                    "original" => InferViews::Original,
                    "confident" => InferViews::Confident,
                    _ => return Err(bad(line, format!("infer_views: expected original|confident, got {value:?}"))),
                }
            }
            "entropy_cache" => e.caches.entropy = parse_bool(line, key, value)?,
            "align_cache" => e.caches.align = parse_bool(line, key, value)?,
            "negative_cache" => e.caches.negative = parse_bool(line, key, value)?,
            "text_term" => e.terms.text = parse_bool(line, key, value)?,
            "visual_term" => e.terms.visual = parse_bool(line, key, value)?,
            "cache_term" => e.terms.cache = parse_bool(line, key, value)?,
            "loss_align" => e.losses.align = parse_bool(line, key, value)?,
            "loss_contrast" => e.losses.contrast = parse_bool(line, key, value)?,
            "persist_residuals" => e.persist_residuals = parse_bool(line, key, value)?,
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| bad(line, format!("seed: expected an integer, got {value:?}")))?
            }
            "stream" => self.stream = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            _ => return Err(bad(line, format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Serialize back to the flat format; `parse(to_config_string())`
    /// reproduces the configuration.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let hp = &self.engine.hp;
        macro_rules! float_line {
            ($($f:ident),*) => {
                $( let _ = writeln!(s, "{} = {:?}", stringify!($f), hp.$f); )*
            };
        }
        hp_float_keys!(float_line);
        let e = &self.engine;
        let _ = writeln!(s, "m_entropy = {}", hp.m_entropy);
        let _ = writeln!(s, "m_align = {}", hp.m_align);
        let _ = writeln!(s, "m_negative = {}", hp.m_negative);
        let _ = writeln!(s, "mode = {}", e.mode.name());
        let _ = writeln!(s, "norm = {}", e.norm.name());
        let views = match e.infer_views {
            InferViews::Original => "original",
            InferViews::Confident => "confident",
        };
        let _ = writeln!(s, "infer_views = {views}");
        for (k, v) in [
            ("entropy_cache", e.caches.entropy),
            ("align_cache", e.caches.align),
            ("negative_cache", e.caches.negative),
            ("text_term", e.terms.text),
            ("visual_term", e.terms.visual),
            ("cache_term", e.terms.cache),
            ("loss_align", e.losses.align),
            ("loss_contrast", e.losses.contrast),
            ("persist_residuals", e.persist_residuals),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "seed = {}", self.seed);
        if let Some(p) = &self.stream {
            let _ = writeln!(s, "stream = {}", p.display());
        }
        if let Some(p) = &self.out {
            let _ = writeln!(s, "out = {}", p.display());
        }
        if let Some(sp) = &self.synth {
            let _ = writeln!(s, "synth.classes = {}", sp.classes);
            let _ = writeln!(s, "synth.dim = {}", sp.dim);
            let _ = writeln!(s, "synth.min_angle_deg = {:?}", sp.min_angle_deg);
            let _ = writeln!(s, "synth.spread = {:?}", sp.spread);
            let _ = writeln!(s, "synth.noise = {:?}", sp.noise);
            let _ = writeln!(s, "synth.shift = {:?}", sp.shift);
            let _ = writeln!(s, "synth.samples = {}", sp.samples);
            let _ = writeln!(s, "synth.views = {}", sp.views);
            let _ = writeln!(s, "synth.prompts_per_class = {}", sp.prompts_per_class);
            let _ = writeln!(s, "synth.prompt_noise = {:?}", sp.prompt_noise);
            let _ = writeln!(s, "synth.unlabeled_frac = {:?}", sp.unlabeled_frac);
            let _ = writeln!(s, "synth.seed = {}", sp.seed);
        }
        s
    }
}

fn set_synth(spec: &mut SynthSpec, key: &str, value: &str, line: usize) -> Result<()> {
    let full = format!("synth.{key}");
    match key {
        "classes" => spec.classes = parse_usize(line, &full, value)?,
        "dim" => spec.dim = parse_usize(line, &full, value)?,
        "min_angle_deg" => spec.min_angle_deg = parse_f64(line, &full, value)?,
        "spread" => spec.spread = parse_f64(line, &full, value)?,
        "noise" => spec.noise = parse_f64(line, &full, value)?,
        "shift" => spec.shift = parse_f64(line, &full, value)?,
        "samples" => spec.samples = parse_usize(line, &full, value)?,
        "views" => spec.views = parse_usize(line, &full, value)?,
        "prompts_per_class" => spec.prompts_per_class = parse_usize(line, &full, value)?,
        "prompt_noise" => spec.prompt_noise = parse_f64(line, &full, value)?,
        "unlabeled_frac" => spec.unlabeled_frac = parse_f64(line, &full, value)?,
        "seed" => {
            spec.seed = value
                .parse()
                .map_err(|_| bad(line, format!("{full}: expected an integer, got {value:?}")))?
        }
        _ => return Err(bad(line, format!("unknown key {full:?}"))),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_from_empty_text() {
        let cfg = RunConfig::parse("# nothing here\n\n").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.engine.hp.m_entropy, 10);
        assert_eq!(cfg.engine.hp.m_negative, 3);
    }

    #[test]
    fn parses_keys_and_comments() {
        let cfg = RunConfig::parse(
            "mode = mcp++   # tuned\nw=0.6\nnegative_cache = off\nnorm = l2\nsynth.spread = 0.3\nseed = 9\n",
        )
        .unwrap();
        assert_eq!(cfg.engine.mode, Mode::McpPlusPlus);
        assert_eq!(cfg.engine.hp.w, 0.6);
        assert!(!cfg.engine.caches.negative);
        assert_eq!(cfg.engine.norm, FusionNorm::L2);
        let synth = cfg.synth.unwrap();
        assert_eq!(synth.spread, 0.3);
        assert_eq!(synth.seed, 9);
    }

    #[test]
    fn rejects_unknown_duplicate_and_invalid() {
        for text in ["bogus = 1", "w = 0.5\nw = 0.6", "w = 2.0", "tau = abc", "synth.nope = 1", "mode = fast", "novalue"] {
            match RunConfig::parse(text) {
                Err(Error::Config(_)) => {}
                other => panic!("{text:?} gave {other:?}"),
            }
        }
    }

    #[test]
    fn string_round_trip() {
        let mut cfg = RunConfig::parse("mode = mcp++\nalpha3 = 2.5\nlr = 0.00025\nsynth.samples = 50\n").unwrap();
        cfg.out = Some(PathBuf::from("/tmp/x.json"));
        let back = RunConfig::parse(&cfg.to_config_string()).unwrap();
        assert_eq!(back, cfg);
    }
}
