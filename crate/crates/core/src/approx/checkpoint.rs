//! Plain-text checkpoints.
//!
//! ```text
//! underq-checkpoint v1
//! seed 7
//! step 1200
//! meta key value...
//! network critic1
//! spec 3 1 64,64,64 mish
//! params 8705
//! 1.2345678901234567e-1
//! ...
//! end
//! ```
//!
//! Values are written with 17 significant digits, which round-trips every
//! finite `f64` exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::mlp::{Activation, MlpSpec, ParamSet};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "underq-checkpoint v1";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedNetwork {
    pub name: String,
    pub spec: MlpSpec,
    pub params: ParamSet,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub seed: u64,
    pub step: u64,
    pub meta: BTreeMap<String, String>,
    pub networks: Vec<NamedNetwork>,
}

impl Checkpoint {
    pub fn new(seed: u64, step: u64) -> Self {
        Self { seed, step, ..Default::default() }
    }

    pub fn push(&mut self, name: &str, spec: &MlpSpec, params: &ParamSet) {
        self.networks.push(NamedNetwork { name: name.to_string(), spec: spec.clone(), params: params.clone() });
    }

    pub fn network(&self, name: &str) -> Result<&NamedNetwork> {
        self.networks
            .iter()
            .find(|n| n.name == name)
            .ok_or_else(|| Error::param(format!("checkpoint has no network `{name}`")))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(CHECKPOINT_MAGIC);
        out.push('\n');
        out.push_str(&format!("seed {}\nstep {}\n", self.seed, self.step));
        for (k, v) in &self.meta {
            out.push_str(&format!("meta {k} {v}\n"));
        }
        for n in &self.networks {
            let hidden: Vec<String> = n.spec.hidden.iter().map(|h| h.to_string()).collect();
            let hidden = if hidden.is_empty() { "-".to_string() } else { hidden.join(",") };
            out.push_str(&format!("network {}\n", n.name));
            out.push_str(&format!(
                "spec {} {} {} {}\n",
                n.spec.input_dim, n.spec.output_dim, hidden, n.spec.activation
            ));
            out.push_str(&format!("params {}\n", n.params.len()));
            for v in n.params.values() {
                out.push_str(&format!("{v:.16e}\n"));
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let bad = |line: usize, msg: &str| Error::Parse { line, msg: msg.to_string() };
        match lines.next() {
            Some((_, CHECKPOINT_MAGIC)) => {}
            _ => return Err(bad(1, "missing checkpoint header")),
        }
        let mut ck = Checkpoint::default();
        let mut seen_end = false;
        while let Some((ln, line)) = lines.next() {
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            match key {
                "seed" => ck.seed = rest.parse().map_err(|_| bad(ln, "bad seed"))?,
                "step" => ck.step = rest.parse().map_err(|_| bad(ln, "bad step"))?,
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    ck.meta.insert(k.to_string(), v.to_string());
                }
                "network" => {
                    let name = rest.to_string();
                    let (ln, spec_line) = lines.next().ok_or_else(|| bad(ln, "truncated network"))?;
                    let spec = parse_spec(spec_line).ok_or_else(|| bad(ln, "bad spec line"))?;
                    let (ln, count_line) = lines.next().ok_or_else(|| bad(ln, "truncated network"))?;
                    let count: usize = count_line
                        .strip_prefix("params ")
                        .and_then(|c| c.parse().ok())
                        .ok_or_else(|| bad(ln, "bad params line"))?;
                    let mut values = Vec::with_capacity(count);
                    for _ in 0..count {
                        let (ln, v) = lines.next().ok_or_else(|| bad(ln, "truncated parameter list"))?;
                        values.push(v.parse::<f64>().map_err(|_| bad(ln, "bad parameter value"))?);
                    }
                    let params = ParamSet::from_vec(&spec, values).map_err(|e| bad(ln, &e.to_string()))?;
                    ck.networks.push(NamedNetwork { name, spec, params });
                }
                "end" => {
                    seen_end = true;
                    break;
                }
                "" => {}
                _ => return Err(bad(ln, &format!("unexpected key `{key}`"))),
            }
        }
        if !seen_end {
            return Err(bad(text.lines().count(), "missing `end`"));
        }
        Ok(ck)
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

fn parse_spec(line: &str) -> Option<MlpSpec> {
    let mut parts = line.strip_prefix("spec ")?.split_whitespace();
    let input_dim = parts.next()?.parse().ok()?;
    let output_dim = parts.next()?.parse().ok()?;
    let hidden = match parts.next()? {
        "-" => Vec::new(),
        h => h.split(',').map(|x| x.parse().ok()).collect::<Option<Vec<usize>>>()?,
    };
    let activation: Activation = parts.next()?.parse().ok()?;
    MlpSpec::new(input_dim, output_dim, hidden, activation).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let spec = MlpSpec::desk(3, 2);
        let mut p = ParamSet::init(&spec, 11);
        p.values_mut()[0] = 0.1 + 0.2;
        p.values_mut()[1] = f64::MIN_POSITIVE;
        p.values_mut()[2] = -1e300;
        let mut ck = Checkpoint::new(11, 42);
        ck.meta.insert("tau".into(), "0.9".into());
        ck.push("critic", &spec, &p);
        let linear = MlpSpec::new(2, 1, vec![], Activation::Relu).unwrap();
        ck.push("linear", &linear, &ParamSet::init(&linear, 1));
        let back = Checkpoint::parse(&ck.to_text()).unwrap();
        assert_eq!(back, ck);
        for (a, b) in back.network("critic").unwrap().params.values().iter().zip(p.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.to_text(), ck.to_text());
    }

    #[test]
    fn rejects_damaged_files() {
        let spec = MlpSpec::new(1, 1, vec![2], Activation::Mish).unwrap();
        let mut ck = Checkpoint::new(0, 0);
        ck.push("n", &spec, &ParamSet::zeros(&spec));
        let text = ck.to_text();
        assert!(Checkpoint::parse("nonsense").is_err());
        assert!(Checkpoint::parse(text.trim_end_matches("end\n")).is_err());
        let truncated: String = text.lines().take(6).map(|l| format!("{l}\n")).collect();
        assert!(Checkpoint::parse(&truncated).is_err());
        assert!(ck.network("missing").is_err());
    }
}
