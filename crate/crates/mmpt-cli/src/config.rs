//! Effective run values. Command-line flags override the optional
//! `key = value` config file, which overrides built-in defaults; every
//! resolved value is echoed with its source so the run log is
//! self-describing.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use mmpt::error::{Error, Result};
use mmpt::io;

pub struct FileConfig {
    values: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let values = match path {
            Some(p) => io::read_kv_file(p)?,
            None => BTreeMap::new(),
        };
        Ok(Self { values })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }
}

pub struct Resolver<'a> {
    file: &'a FileConfig,
    echo: Vec<String>,
}

impl<'a> Resolver<'a> {
    pub fn new(file: &'a FileConfig) -> Self {
        Self { file, echo: Vec::new() }
    }

    fn lookup(&self, key: &str, flag: Option<String>) -> (Option<String>, &'static str) {
        if let Some(v) = flag {
            (Some(v), "flag")
        } else if let Some(v) = self.file.get(key) {
            (Some(v.to_string()), "config")
        } else {
            (None, "default")
        }
    }

    /// Typed knob: flag beats file beats default.
    pub fn value<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: Display + FromStr,
        T::Err: Display,
    {
        let (raw, src) = self.lookup(key, flag.map(|v| v.to_string()));
        let v = match raw {
            Some(raw) => raw
                .parse::<T>()
                .map_err(|e| Error::Config(format!("{key}: {e} (got {raw:?})")))?,
            None => default,
        };
        self.echo.push(format!("{key} = {v} ({src})"));
        Ok(v)
    }

    /// Knob with its own parser; the echo shows the canonical spelling.
    pub fn parsed<T>(
        &mut self,
        key: &str,
        flag: Option<String>,
        default: &str,
        parse: impl Fn(&str) -> Result<T>,
        canon: impl Fn(&T) -> String,
    ) -> Result<T> {
        let (raw, src) = self.lookup(key, flag);
        let v = parse(raw.as_deref().unwrap_or(default))?;
        self.echo.push(format!("{key} = {} ({src})", canon(&v)));
        Ok(v)
    }

    /// Values that only arrive one way (required flags, checkpoint fields).
    pub fn note(&mut self, key: &str, value: impl Display, src: &str) {
        self.echo.push(format!("{key} = {value} ({src})"));
    }

    pub fn print(&self) {
        for line in &self.echo {
            println!("{line}");
        }
    }
}
