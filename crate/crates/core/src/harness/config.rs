//! Flat `key = value` experiment configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Every accepted key.
pub const KNOWN_KEYS: &[&str] = &[
    "mode",
    "T",
    "beta_start",
    "beta_end",
    "ddim_steps",
    "train_steps",
    "batch",
    "lr",
    "seed",
    "K",
    "window_k",
    "t_min",
    "t_opt",
    "eta",
    "N",
    "m",
    "blend_every",
    "t_blend",
    "loss_variant",
    "lambda1",
    "lambda2",
    "mask_path",
    "reference_pixel",
    "output_dir",
    // Extensions.
    "input_path",
    "checkpoint_path",
    "dataset",
    "n_samples",
    "noise_sigma",
    "optimizer",
    "iters",
    "n_pixels",
    "n_images",
    "bottleneck",
    "t_b",
    "timestep",
    "index",
    "blending",
    "method",
    "ema_decay",
    "through_transport",
    "full_marginal",
];

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    /// 0 for command-line overrides.
    line: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Config {
    entries: BTreeMap<String, Entry>,
    base_dir: PathBuf,
}

fn check_key(key: &str, line: usize) -> Result<()> {
    if KNOWN_KEYS.contains(&key) {
        Ok(())
    } else {
        Err(Error::Config {
            line,
            message: format!("unknown key `{key}`"),
        })
    }
}

impl Config {
    /// Parses config text; relative paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body.split_once('=').ok_or_else(|| Error::Config {
                line,
                message: format!("expected `key = value`, found `{body}`"),
            })?;
            let key = k.trim();
            check_key(key, line)?;
            if entries.contains_key(key) {
                return Err(Error::Config {
                    line,
                    message: format!("duplicate key `{key}`"),
                });
            }
            entries.insert(
                key.to_string(),
                Entry {
                    value: v.trim().to_string(),
                    line,
                },
            );
        }
        Ok(Self {
            entries,
            base_dir: base_dir.to_path_buf(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Applies a `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| Error::Config {
            line: 0,
            message: format!("override `{assignment}` is not `key=value`"),
        })?;
        let key = k.trim();
        check_key(key, 0)?;
        self.entries.insert(
            key.to_string(),
            Entry {
                value: v.trim().to_string(),
                line: 0,
            },
        );
        Ok(())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    fn bad(&self, key: &str, what: &str) -> Error {
        let e = &self.entries[key];
        Error::Config {
            line: e.line,
            message: format!("key `{key}`: cannot parse `{}` as {what}", e.value),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(e) => e
                .value
                .parse()
                .map(Some)
                .map_err(|_| self.bad(key, std::any::type_name::<T>())),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?.ok_or_else(|| Error::Config {
            line: 0,
            message: format!("missing required key `{key}`"),
        })
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key) {
            None => Ok(default),
            Some("true" | "1" | "yes") => Ok(true),
            Some("false" | "0" | "no") => Ok(false),
            Some(_) => Err(self.bad(key, "a boolean")),
        }
    }

    /// Resolves a path value against the config directory.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.raw(key).map(|v| self.base_dir.join(v))
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key).ok_or_else(|| Error::Config {
            line: 0,
            message: format!("missing required key `{key}`"),
        })
    }

    /// `row,col` pixel coordinates.
    pub fn pixel(&self, key: &str) -> Result<Option<(usize, usize)>> {
        let Some(v) = self.raw(key) else { return Ok(None) };
        let parts: Vec<&str> = v.split(',').map(str::trim).collect();
        match parts.as_slice() {
            [r, c] => match (r.parse(), c.parse()) {
                (Ok(r), Ok(c)) => Ok(Some((r, c))),
                _ => Err(self.bad(key, "`row,col`")),
            },
            [i] => i.parse().map(|i| Some((0, i))).map_err(|_| self.bad(key, "`row,col`")),
            _ => Err(self.bad(key, "`row,col`")),
        }
    }

    /// Line where `key` was set, 0 for overrides.
    pub fn line_of(&self, key: &str) -> Option<usize> {
        self.entries.get(key).map(|e| e.line)
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let mut c = Config::parse("# header\nmode = image16\nT=1000 # steps\n\n eta = 0.5\n", Path::new("/cfg")).unwrap();
        assert_eq!(c.raw("mode"), Some("image16"));
        assert_eq!(c.get::<usize>("T").unwrap(), Some(1000));
        assert_eq!(c.get_or::<f64>("eta", 0.0).unwrap(), 0.5);
        assert_eq!(c.line_of("eta"), Some(5));
        c.set("eta=0.25").unwrap();
        assert_eq!(c.get::<f64>("eta").unwrap(), Some(0.25));
        c.set("reference_pixel=3,7").unwrap();
        assert_eq!(c.pixel("reference_pixel").unwrap(), Some((3, 7)));
        c.set("output_dir=out").unwrap();
        assert_eq!(c.path("output_dir").unwrap(), PathBuf::from("/cfg/out"));
    }

    #[test]
    fn unknown_key_names_key_and_line() {
        let err = Config::parse("mode = point2d\n\nbogus = 1\n", Path::new(".")).unwrap_err();
        match err {
            Error::Config { line, message } => {
                assert_eq!(line, 3);
                assert!(message.contains("bogus"));
            }
            other => panic!("{other:?}"),
        }
        let mut c = Config::default();
        assert!(matches!(c.set("nope=1"), Err(Error::Config { line: 0, .. })));
    }

    #[test]
    fn malformed_values_are_config_errors() {
        let c = Config::parse("T = many\nblending = maybe\nreference_pixel = 1,2,3\n", Path::new(".")).unwrap();
        assert!(matches!(c.get::<usize>("T"), Err(Error::Config { line: 1, .. })));
        assert!(matches!(c.get_bool("blending", true), Err(Error::Config { line: 2, .. })));
        assert!(matches!(c.pixel("reference_pixel"), Err(Error::Config { line: 3, .. })));
        assert!(Config::parse("no equals sign\n", Path::new(".")).is_err());
        assert!(Config::parse("T=1\nT=2\n", Path::new(".")).is_err());
        assert!(c.require::<f64>("eta").is_err());
    }
}
