//! Line-oriented `key = value` settings files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are the long
//! flag names of the subcommand (`epochs = 50`, `variants = none,res-g`);
//! list values are comma-separated. A flag given on the command line wins
//! over the file.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Default)]
pub struct Settings {
    path: Option<PathBuf>,
    /// key -> (line, value)
    entries: BTreeMap<String, (usize, String)>,
    used: RefCell<BTreeSet<String>>,
}

impl Settings {
    pub fn parse(text: &str, path: Option<&Path>) -> Result<Self> {
        let name = path.map_or("config".into(), |p| p.display().to_string());
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Usage(format!("{name}:{}: expected `key = value`", i + 1)));
            };
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::Usage(format!("{name}:{}: empty key", i + 1)));
            }
            if entries.insert(key.clone(), (i + 1, value.trim().to_string())).is_some() {
                return Err(Error::Usage(format!("{name}:{}: duplicate key `{key}`", i + 1)));
            }
        }
        Ok(Settings {
            path: path.map(Path::to_path_buf),
            entries,
            used: RefCell::default(),
        })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Settings::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(Error::io(p))?;
                Settings::parse(&text, Some(p))
            }
        }
    }

    fn raw(&self, key: &str) -> Option<&(usize, String)> {
        self.used.borrow_mut().insert(key.to_string());
        self.entries.get(key)
    }

    fn bad_value(&self, line: usize, key: &str, detail: impl std::fmt::Display) -> Error {
        let name = self.path.as_ref().map_or("config".into(), |p| p.display().to_string());
        Error::Usage(format!("{name}:{line}: `{key}`: {detail}"))
    }

    /// The flag value if given, else the file value if present.
    pub fn get<T>(&self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        let from_file = self.raw(key);
        if flag.is_some() {
            return Ok(flag);
        }
        from_file
            .map(|(line, v)| v.parse().map_err(|e| self.bad_value(*line, key, e)))
            .transpose()
    }

    pub fn get_or<T>(&self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key, flag)?.unwrap_or(default))
    }

    /// Comma-separated list; an empty flag list counts as absent.
    pub fn get_list<T>(&self, key: &str, flag: Vec<T>) -> Result<Option<Vec<T>>>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        let from_file = self.raw(key);
        if !flag.is_empty() {
            return Ok(Some(flag));
        }
        from_file
            .map(|(line, v)| {
                v.split(',')
                    .map(|item| item.trim().parse().map_err(|e| self.bad_value(*line, key, e)))
                    .collect()
            })
            .transpose()
    }

    /// Rejects file keys that no lookup asked for.
    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        match self.entries.iter().find(|(k, _)| !used.contains(*k)) {
            Some((key, (line, _))) => Err(self.bad_value(*line, key, "unknown setting")),
            None => Ok(()),
        }
    }
}
