//! Flat `key = value` configuration files and content-hash run identifiers.
//!
//! Lines are `key = value`; blank lines and `#` comments are ignored. Nested fields use
//! dotted names (`quantizer.dim`, `encoder.lr`, ...).

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use rdpc_core::{CriticInit, Mode, Objective, OptimizerSettings, QuantizerSpec, RunConfig};
use sha2::{Digest, Sha256};

/// Parses `key = value` lines, preserving order. Duplicate keys are rejected.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected `key = value`", n + 1))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if k.is_empty() {
            bail!("line {}: empty key", n + 1);
        }
        if out.iter().any(|(e, _)| *e == k) {
            bail!("line {}: duplicate key `{k}`", n + 1);
        }
        out.push((k, v));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| anyhow!("`{key}`: cannot parse `{v}`: {e}"))
}

const OPTIMIZERS: [&str; 4] = ["encoder", "decoder", "critic", "classifier"];

fn optimizer_mut<'a>(c: &'a mut RunConfig, name: &str) -> Option<&'a mut OptimizerSettings> {
    Some(match name {
        "encoder" => &mut c.encoder,
        "decoder" => &mut c.decoder,
        "critic" => &mut c.critic,
        "classifier" => &mut c.classifier,
        _ => return None,
    })
}

/// Applies one field to `c`. Returns `false` for unknown keys.
pub fn set_field(c: &mut RunConfig, key: &str, v: &str) -> Result<bool> {
    match key {
        "mode" => c.mode = v.parse::<Mode>().map_err(|e| anyhow!("`mode`: {e}"))?,
        "objective" => c.objective = v.parse::<Objective>().map_err(|e| anyhow!("`objective`: {e}"))?,
        "quantizer.dim" | "quantizer.levels" => {
            let (mut dim, mut levels) = (c.quantizer.dim(), c.quantizer.levels());
            if key == "quantizer.dim" {
                dim = num(key, v)?;
            } else {
                levels = num(key, v)?;
            }
            c.quantizer = QuantizerSpec::new(dim, levels).map_err(|e| anyhow!("`{key}`: {e}"))?;
        }
        "tradeoff.lambda_c" => c.tradeoff.lambda_c = num(key, v)?,
        "tradeoff.lambda_p" => c.tradeoff.lambda_p = num(key, v)?,
        "seed" => c.seed = num(key, v)?,
        "epochs" => c.epochs = num(key, v)?,
        "batch_size" => c.batch_size = num(key, v)?,
        "lambda_gp" => c.lambda_gp = num(key, v)?,
        "critic_steps" => c.critic_steps = num(key, v)?,
        "encoder_source" => c.encoder_source = (!v.is_empty() && v != "none").then(|| v.to_string()),
        "critic_init" => c.critic_init = v.parse::<CriticInit>().map_err(|e| anyhow!("`critic_init`: {e}"))?,
        "temperature" => c.temperature = num(key, v)?,
        "classifier_epochs" => c.classifier_epochs = num(key, v)?,
        "train_samples" => c.train_samples = num(key, v)?,
        "eval_samples" => c.eval_samples = num(key, v)?,
        _ => {
            let Some((comp, field)) = key.split_once('.') else {
                return Ok(false);
            };
            let Some(opt) = optimizer_mut(c, comp) else {
                return Ok(false);
            };
            match field {
                "lr" => opt.lr = num(key, v)?,
                "beta1" => opt.beta1 = num(key, v)?,
                "beta2" => opt.beta2 = num(key, v)?,
                _ => return Ok(false),
            }
        }
    }
    Ok(true)
}

/// Builds a config from defaults plus `pairs`, rejecting unknown keys.
pub fn from_pairs(pairs: &[(String, String)]) -> Result<RunConfig> {
    let mut c = RunConfig::default();
    for (k, v) in pairs {
        if !set_field(&mut c, k, v)? {
            bail!("unknown configuration key `{k}`");
        }
    }
    Ok(c)
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    from_pairs(&parse_pairs(text)?)
}

pub fn read_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_config(&text).with_context(|| format!("in {}", path.display()))
}

/// Every field in a fixed order; parsing this text yields the same config.
pub fn canonical(c: &RunConfig) -> String {
    let mut s = String::new();
    let mut put = |k: &str, v: &dyn std::fmt::Display| {
        let _ = writeln!(s, "{k} = {v}");
    };
    put("mode", &c.mode);
    put("objective", &c.objective);
    put("quantizer.dim", &c.quantizer.dim());
    put("quantizer.levels", &c.quantizer.levels());
    put("tradeoff.lambda_c", &c.tradeoff.lambda_c);
    put("tradeoff.lambda_p", &c.tradeoff.lambda_p);
    put("seed", &c.seed);
    put("epochs", &c.epochs);
    put("batch_size", &c.batch_size);
    for name in OPTIMIZERS {
        let o = match name {
            "encoder" => c.encoder,
            "decoder" => c.decoder,
            "critic" => c.critic,
            _ => c.classifier,
        };
        put(&format!("{name}.lr"), &o.lr);
        put(&format!("{name}.beta1"), &o.beta1);
        put(&format!("{name}.beta2"), &o.beta2);
    }
    put("lambda_gp", &c.lambda_gp);
    put("critic_steps", &c.critic_steps);
    put("encoder_source", &c.encoder_source.as_deref().unwrap_or("none"));
    put("critic_init", &c.critic_init);
    put("temperature", &c.temperature);
    put("classifier_epochs", &c.classifier_epochs);
    put("train_samples", &c.train_samples);
    put("eval_samples", &c.eval_samples);
    s
}

/// First 16 hex digits of the SHA-256 of [`canonical`].
pub fn run_id(c: &RunConfig) -> String {
    let digest = Sha256::digest(canonical(c).as_bytes());
    hex::encode(digest)[..16].to_string()
}
