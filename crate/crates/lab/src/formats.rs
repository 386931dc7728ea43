//! Text formats: spec files, policy checkpoints and batch dumps.

use std::fmt::Write as _;

use gtrpo_core::estimation::Batch;
use gtrpo_core::policy::PolicyParams;
use gtrpo_core::pomdp::{PomdpSpec, SpecParts};
use thiserror::Error;

use crate::kv::{parse_row, KvDoc, KvError};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error("invalid spec: {0}")]
    Spec(#[from] gtrpo_core::pomdp::SpecError),
    #[error("invalid policy: {0}")]
    Policy(#[from] gtrpo_core::policy::PolicyError),
}

fn row(out: &mut String, key: &str, values: &[f64]) {
    out.push_str(key);
    out.push_str(" =");
    for v in values {
        // `Display` for f64 is the shortest string that parses back to the same bits.
        let _ = write!(out, " {v}");
    }
    out.push('\n');
}

/// Writes a spec. Rows are keyed `x a` in [transition], `x` in
/// [observation] and `y a` in [reward] (over the next observation).
pub fn write_spec(spec: &PomdpSpec) -> String {
    let p = spec.parts();
    let (nx, ny, na) = (p.num_latent, p.num_obs, p.num_actions);
    let mut out = String::new();
    let _ = writeln!(out, "[spaces]");
    let _ = writeln!(out, "num_latent = {nx}");
    let _ = writeln!(out, "num_obs = {ny}");
    let _ = writeln!(out, "num_actions = {na}");
    let _ = writeln!(out, "gamma = {}", p.gamma);
    let _ = writeln!(out, "max_steps = {}", p.max_steps);
    let _ = writeln!(out, "reward_noise_std = {}", p.reward_noise_std);
    out.push_str("\n[init]\n");
    row(&mut out, "p", &p.init);
    out.push_str("\n[transition]\n");
    for x in 0..nx {
        for a in 0..na {
            row(&mut out, &format!("{x} {a}"), spec.transition_row(x, a));
        }
    }
    out.push_str("\n[observation]\n");
    for x in 0..nx {
        row(&mut out, &x.to_string(), spec.observation_row(x));
    }
    out.push_str("\n[reward]\n");
    for y in 0..ny {
        for a in 0..na {
            let i = (y * na + a) * ny;
            row(&mut out, &format!("{y} {a}"), &p.reward_mean[i..i + ny]);
        }
    }
    out
}

fn rows(
    doc: &KvDoc,
    section: &str,
    keys: impl Iterator<Item = String>,
    width: usize,
) -> Result<Vec<f64>, KvError> {
    let s = doc.require(section)?;
    let mut out = Vec::new();
    let mut expected = Vec::new();
    for key in keys {
        let e = s.require(&key)?;
        let vals: Vec<f64> = parse_row(&e.value).map_err(|m| KvError::new(e.line, format!("{section}.{key}"), m))?;
        if vals.len() != width {
            return Err(KvError::new(
                e.line,
                format!("{section}.{key}"),
                format!("expected {width} values, got {}", vals.len()),
            ));
        }
        out.extend(vals);
        expected.push(key);
    }
    let keys: Vec<&str> = expected.iter().map(String::as_str).collect();
    s.only_keys(&keys)?;
    Ok(out)
}

pub fn read_spec(text: &str) -> Result<PomdpSpec, FormatError> {
    let doc = KvDoc::parse(text)?;
    doc.only_sections(&["spaces", "init", "transition", "observation", "reward"])?;
    let sp = doc.require("spaces")?;
    sp.only_keys(&["num_latent", "num_obs", "num_actions", "gamma", "max_steps", "reward_noise_std"])?;
    let nx: usize = sp.parse("num_latent")?;
    let ny: usize = sp.parse("num_obs")?;
    let na: usize = sp.parse("num_actions")?;
    if nx < 2 || ny < 2 || na < 1 {
        return Err(KvError::new(sp.line, "spaces", "need at least 2 latent states, 2 observations and 1 action").into());
    }
    let init_sec = doc.require("init")?;
    init_sec.only_keys(&["p"])?;
    let init: Vec<f64> = init_sec.parse_list("p")?;
    let transition = rows(
        &doc,
        "transition",
        (0..nx).flat_map(|x| (0..na).map(move |a| format!("{x} {a}"))),
        nx,
    )?;
    let observation = rows(&doc, "observation", (0..nx).map(|x| x.to_string()), ny)?;
    let reward_mean = rows(
        &doc,
        "reward",
        (0..ny).flat_map(|y| (0..na).map(move |a| format!("{y} {a}"))),
        ny,
    )?;
    Ok(PomdpSpec::new(SpecParts {
        num_latent: nx,
        num_obs: ny,
        num_actions: na,
        init,
        transition,
        observation,
        reward_mean,
        reward_noise_std: sp.parse_or("reward_noise_std", 0.0)?,
        gamma: sp.parse("gamma")?,
        max_steps: sp.parse("max_steps")?,
    })?)
}

/// `policy <num_obs> <num_actions>` then one row of logits per observation.
pub fn write_policy(policy: &PolicyParams) -> String {
    let (ny, na) = policy.shape();
    let mut out = format!("policy {ny} {na}\n");
    for y in 0..ny {
        let line: Vec<String> = policy.logits().row(y).iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn read_policy(text: &str) -> Result<PolicyParams, FormatError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hl, header) = lines.next().ok_or_else(|| KvError::new(1, "header", "empty checkpoint"))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    let (ny, na) = match parts.as_slice() {
        ["policy", ny, na] => (
            ny.parse::<usize>().map_err(|e| KvError::new(hl + 1, "num_obs", e.to_string()))?,
            na.parse::<usize>().map_err(|e| KvError::new(hl + 1, "num_actions", e.to_string()))?,
        ),
        _ => return Err(KvError::new(hl + 1, "header", "expected `policy <num_obs> <num_actions>`").into()),
    };
    let mut data = Vec::with_capacity(ny * na);
    let mut seen = 0;
    for (i, l) in lines {
        let vals: Vec<f64> = parse_row(l).map_err(|m| KvError::new(i + 1, format!("row {seen}"), m))?;
        if vals.len() != na || seen == ny {
            return Err(KvError::new(i + 1, format!("row {seen}"), format!("expected {ny} rows of {na} values")).into());
        }
        data.extend(vals);
        seen += 1;
    }
    if seen != ny {
        return Err(KvError::new(0, "rows", format!("expected {ny} rows, got {seen}")).into());
    }
    Ok(PolicyParams::from_rows(ny, na, data)?)
}

pub const BATCH_HEADER: &str = "episode_id,h,x,y,a,r";

/// One line per step; `h` is 1-based.
pub fn write_batch_csv(batch: &Batch) -> String {
    let mut out = String::from(BATCH_HEADER);
    out.push('\n');
    for (t, traj) in batch.trajectories.iter().enumerate() {
        for (h, e) in traj.events.iter().enumerate() {
            let _ = writeln!(out, "{t},{},{},{},{},{}", h + 1, e.latent, e.obs, e.action, e.reward);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use gtrpo_core::env::{build_env, BaseEnv, EnvConfig};

    #[test]
    fn spec_round_trip_is_bit_exact() {
        for base in BaseEnv::ALL {
            let mut cfg = EnvConfig::new(base);
            cfg.obs_noise = 0.1;
            let spec = build_env(&cfg).unwrap();
            let back = read_spec(&write_spec(&spec)).unwrap();
            assert_eq!(back.parts(), spec.parts());
        }
    }

    #[test]
    fn spec_errors_name_the_row() {
        let text = write_spec(&build_env(&EnvConfig::new(BaseEnv::TwoDoor)).unwrap());
        let broken = text.replace("0 1 = 1 0 0", "0 1 = 1 0");
        let err = read_spec(&broken).unwrap_err().to_string();
        assert!(err.contains("transition.0 1") && err.contains("expected 3 values"), "{err}");
    }

    #[test]
    fn policy_round_trip() {
        let p = PolicyParams::from_rows(2, 3, vec![0.1, -1.0 / 3.0, 2.5e-9, 7.0, 0.0, -1e10]).unwrap();
        let text = write_policy(&p);
        assert!(text.starts_with("policy 2 3\n"));
        assert_eq!(read_policy(&text).unwrap(), p);
        assert!(read_policy("policy 2 3\n1 2 3\n").is_err());
    }
}
