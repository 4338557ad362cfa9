//! Output directory of one invocation.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

/// Collects outputs and records them in `manifest.json` on [`RunDir::finish`].
pub struct RunDir {
    root: PathBuf,
    command: &'static str,
    seed: u64,
    outputs: Vec<String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: u64,
    version: &'a str,
    outputs: &'a [String],
}

impl RunDir {
    /// Creates `root` and snapshots the effective configuration.
    pub fn create(
        root: impl Into<PathBuf>,
        command: &'static str,
        config: &RunConfig,
    ) -> Result<Self, CliError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(CliError::io("output"))?;
        let mut dir = Self {
            root,
            command,
            seed: config.seed,
            outputs: Vec::new(),
        };
        let snapshot = config.to_toml()?;
        dir.write_with("config.toml", |w| {
            w.write_all(snapshot.as_bytes()).map_err(Into::into)
        })?;
        Ok(dir)
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn write_json<T: Serialize + ?Sized>(
        &mut self,
        name: &str,
        value: &T,
    ) -> Result<PathBuf, CliError> {
        self.write_with(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            w.write_all(b"\n")?;
            Ok(())
        })
    }

    /// Writes `name` (relative, parents created) through `f`.
    pub fn write_with<F>(&mut self, name: &str, f: F) -> Result<PathBuf, CliError>
    where
        F: FnOnce(&mut BufWriter<File>) -> profed_core::Result<()>,
    {
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(CliError::io("output"))?;
        }
        let mut w = BufWriter::new(File::create(&path).map_err(CliError::io("output"))?);
        f(&mut w).map_err(CliError::phase("output"))?;
        w.flush().map_err(CliError::io("output"))?;
        self.outputs.push(name.to_owned());
        Ok(path)
    }

    pub fn finish(mut self) -> Result<PathBuf, CliError> {
        let manifest = Manifest {
            command: self.command,
            seed: self.seed,
            version: env!("CARGO_PKG_VERSION"),
            outputs: &self.outputs.clone(),
        };
        self.write_json("manifest.json", &manifest)?;
        Ok(self.root)
    }
}
