//! Run manifest: what was run, with which resolved flags and seed, and
//! which files it read and wrote.

use std::fs;
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use crate::{fail, Failure};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeedSource {
    Flag,
    Env,
    Default,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Subcommand path, e.g. `sim gen`.
    pub command: String,
    /// Arguments as given, program name excluded.
    pub argv: Vec<String>,
    /// Every flag of the subcommand after defaults were applied.
    pub flags: serde_json::Value,
    pub seed: Option<u64>,
    pub seed_source: Option<SeedSource>,
    pub threads: Option<usize>,
    pub inputs: Vec<String>,
    /// Files written next to the manifest.
    pub outputs: Vec<String>,
    pub version: String,
    pub duration_secs: f64,
}

impl Manifest {
    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).context("serializing manifest")?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))
            .context(Failure::Input)?;
        serde_json::from_str(&text).map_err(|e| fail(Failure::Input, format!("manifest {}: {e}", path.display())))
    }

    /// Arguments that reproduce the run: the recorded ones with the
    /// resolved seed made explicit and, optionally, a new output directory.
    pub fn replay_argv(&self, out: Option<&Path>) -> Vec<String> {
        let mut argv = Vec::with_capacity(self.argv.len() + 4);
        let mut args = self.argv.iter();
        while let Some(a) = args.next() {
            let replaced = (a == "--seed" && self.seed.is_some()) || (a == "--out" && out.is_some());
            if replaced {
                args.next();
            } else if !((a.starts_with("--seed=") && self.seed.is_some()) || (a.starts_with("--out=") && out.is_some()))
            {
                argv.push(a.clone());
            }
        }
        if let Some(seed) = self.seed {
            argv.push("--seed".into());
            argv.push(seed.to_string());
        }
        if let Some(out) = out {
            argv.push("--out".into());
            argv.push(out.display().to_string());
        }
        argv
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(argv: &[&str], seed: Option<u64>) -> Manifest {
        Manifest {
            command: "sim gen".into(),
            argv: argv.iter().map(|s| s.to_string()).collect(),
            flags: serde_json::Value::Null,
            seed,
            seed_source: seed.map(|_| SeedSource::Env),
            threads: None,
            inputs: vec![],
            outputs: vec![],
            version: "0".into(),
            duration_secs: 0.0,
        }
    }

    #[test]
    fn replay_makes_seed_explicit_and_moves_output() {
        let m = manifest(&["sim", "gen", "--out", "a", "--vocab", "8"], Some(3));
        assert_eq!(
            m.replay_argv(Some(Path::new("b"))),
            ["sim", "gen", "--vocab", "8", "--seed", "3", "--out", "b"]
        );
        let m = manifest(&["sim", "gen", "--out=a", "--seed=9"], Some(9));
        assert_eq!(m.replay_argv(None), ["sim", "gen", "--out=a", "--seed", "9"]);
    }

    #[test]
    fn seedless_commands_keep_their_arguments() {
        let m = manifest(&["attack", "score", "--trace", "t", "--out", "o"], None);
        assert_eq!(m.replay_argv(None), ["attack", "score", "--trace", "t", "--out", "o"]);
    }
}
