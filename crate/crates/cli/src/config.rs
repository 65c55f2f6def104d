//! `RunConfig`: flat `key=value` settings merged from an architecture file,
//! a config file and command-line flags, in that order.

use std::fs;
use std::path::{Path, PathBuf};

use pdcnn_core::diag::{CONVERGENCE_TOL, CONVERGENCE_WINDOW};
use pdcnn_core::kv::{self, Entry};
use pdcnn_core::search::SearchOptions;
use pdcnn_core::{ArchConfig, SgdConfig};

use crate::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub depths: Option<Vec<usize>>,
    pub variants: Option<Vec<usize>>,
    pub arch: ArchConfig,
    pub sgd: SgdConfig,
    pub rotate: bool,
    /// Side of the square training patch; defaults to `S - S/8` for `S`-sized images.
    pub crop: Option<usize>,
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub wall_clock: bool,
    pub candidates: Vec<usize>,
    pub search: SearchOptions,
    pub window: usize,
    pub tol: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            depths: None,
            variants: None,
            arch: ArchConfig::default(),
            sgd: SgdConfig::default(),
            rotate: false,
            crop: None,
            manifest: None,
            out: None,
            wall_clock: false,
            candidates: vec![3, 4, 5],
            search: SearchOptions::default(),
            window: CONVERGENCE_WINDOW,
            tol: CONVERGENCE_TOL,
        }
    }
}

/// Entries from one source, with a label for error messages.
pub struct Source {
    pub name: String,
    pub entries: Vec<Entry>,
}

impl Source {
    pub fn file(path: &Path) -> Result<Source, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        let entries = kv::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Ok(Source {
            name: path.display().to_string(),
            entries,
        })
    }

    /// Command-line flags that were actually given, as entries.
    pub fn flags(pairs: Vec<(&str, Option<String>)>) -> Source {
        let entries = pairs
            .into_iter()
            .filter_map(|(k, v)| {
                v.map(|value| Entry {
                    key: k.to_string(),
                    value,
                    line: 0,
                })
            })
            .collect();
        Source {
            name: "command line".into(),
            entries,
        }
    }
}

impl RunConfig {
    /// Merges `sources` in order so later ones win. A `preset` anywhere resets
    /// the architecture defaults before any other key is applied.
    pub fn merge(sources: &[Source]) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::default();
        let all = || sources.iter().flat_map(|s| s.entries.iter().map(move |e| (s, e)));
        if let Some((src, e)) = all().rev().find(|(_, e)| norm(&e.key) == "preset") {
            cfg.arch = ArchConfig::preset(&e.value).map_err(|err| usage(src, e, &err.to_string()))?;
        }
        for (src, e) in all().filter(|(_, e)| norm(&e.key) != "preset") {
            cfg.apply(e).map_err(|msg| usage(src, e, &msg))?;
        }
        Ok(cfg)
    }

    fn apply(&mut self, e: &Entry) -> Result<(), String> {
        let key = norm(&e.key);
        let e = &Entry {
            key: key.clone(),
            ..e.clone()
        };
        match key.as_str() {
            "seed" => self.seed = e.parse().map_err(|err| err.to_string())?,
            "depths" => self.depths = Some(list(e)?),
            "variants" => self.variants = Some(list(e)?),
            "lr" | "learning_rate" => self.sgd.learning_rate = num(e)?,
            "momentum" => self.sgd.momentum = num(e)?,
            "weight_decay" => self.sgd.weight_decay = num(e)?,
            "batch_size" => self.sgd.batch_size = num(e)?,
            "epochs" | "max_epochs" => self.sgd.max_epochs = num(e)?,
            "lr_drop" => self.sgd.lr_schedule.drop_factor = num(e)?,
            "lr_patience" => self.sgd.lr_schedule.patience = num(e)?,
            "rotate" => self.rotate = e.flag().map_err(|err| err.to_string())?,
            "wall_clock" => self.wall_clock = e.flag().map_err(|err| err.to_string())?,
            "crop" => self.crop = Some(num(e)?),
            "manifest" => self.manifest = Some(PathBuf::from(&e.value)),
            "out" => self.out = Some(PathBuf::from(&e.value)),
            "candidates" => self.candidates = list(e)?,
            "max_branches" => self.search.max_branches = num(e)?,
            "min_improvement" => self.search.min_improvement = num(e)?,
            "window" => self.window = num(e)?,
            "tol" => self.tol = num(e)?,
            "input" => return Err("input is derived from crop; set crop instead".into()),
            _ => {
                if !self.arch.apply(e).map_err(|err| err.to_string())? {
                    return Err(format!("unknown key {:?}", e.key));
                }
            }
        }
        Ok(())
    }

    /// Patch side for `size`-pixel source images.
    pub fn crop_for(&self, size: usize) -> usize {
        self.crop.unwrap_or(size - size / 8)
    }
}

fn norm(key: &str) -> String {
    key.trim_start_matches("--").replace('-', "_")
}

fn num<T: std::str::FromStr>(e: &Entry) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    e.parse().map_err(|err| err.to_string())
}

fn list<T: std::str::FromStr>(e: &Entry) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    e.list().map_err(|err| err.to_string())
}

fn usage(src: &Source, e: &Entry, msg: &str) -> CliError {
    if e.line == 0 {
        CliError::Usage(format!("--{}: {msg}", e.key.replace('_', "-")))
    } else {
        CliError::Usage(format!("{} line {}: {msg}", src.name, e.line))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn src(text: &str) -> Source {
        Source {
            name: "test.cfg".into(),
            entries: kv::parse(text).unwrap(),
        }
    }

    #[test]
    fn flags_override_file() {
        let file = src("lr=0.5\nmomentum=0.8\ndepths=4,3\n");
        let flags = Source::flags(vec![("lr", Some("0.1".into())), ("momentum", None)]);
        let cfg = RunConfig::merge(&[file, flags]).unwrap();
        assert_eq!(cfg.sgd.learning_rate, 0.1);
        assert_eq!(cfg.sgd.momentum, 0.8);
        assert_eq!(cfg.depths, Some(vec![4, 3]));
    }

    #[test]
    fn unknown_key_is_usage_error() {
        match RunConfig::merge(&[src("seed=3\nlearning_rat=0.1\n")]) {
            Err(CliError::Usage(msg)) => assert!(msg.contains("line 2") && msg.contains("learning_rat"), "{msg}"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            RunConfig::merge(&[src("input=3,56,56\n")]),
            Err(CliError::Usage(_))
        ));
        assert!(matches!(RunConfig::merge(&[src("lr=fast\n")]), Err(CliError::Usage(_))));
    }

    #[test]
    fn preset_applies_before_overrides() {
        let cfg = RunConfig::merge(&[src("init_sigma=0.3\npreset=desk\n")]).unwrap();
        assert_eq!(cfg.arch.filters, ArchConfig::desk().filters);
        assert_eq!(cfg.arch.init_sigma, 0.3);
        let flags = Source::flags(vec![("preset", Some("full".into()))]);
        let cfg = RunConfig::merge(&[src("preset=desk\n"), flags]).unwrap();
        assert_eq!(cfg.arch, ArchConfig::default());
    }

    #[test]
    fn dashed_keys_and_crop_default() {
        let cfg = RunConfig::merge(&[src("weight-decay=0\nbatch-size=8\n")]).unwrap();
        assert_eq!((cfg.sgd.weight_decay, cfg.sgd.batch_size), (0.0, 8));
        assert_eq!(cfg.crop_for(256), 224);
        assert_eq!(cfg.crop_for(64), 56);
    }
}
