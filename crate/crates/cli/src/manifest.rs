//! Run manifests: everything needed to repeat a command and check that it
//! produced the same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use prunekit::graph::{serialize, weights_checksum, ModelGraph};
use prunekit::{Error, FormatError, Result};
use serde::{Deserialize, Serialize};

use crate::args::{Command, Format};
use crate::config::Config;

pub const RUN_MANIFEST_VERSION: u32 = 1;
pub const RUN_MANIFEST_FILE: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    /// CRC-64/XZ of the file bytes, as 16 hex digits.
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub run: u64,
    pub train: u64,
    pub retrain: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_seconds: f64,
    pub phases: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub tool_version: String,
    pub command: Command,
    pub format: Format,
    /// Effective configuration after flags and seeds were applied.
    pub config: Config,
    pub seeds: Seeds,
    /// Files read, with absolute paths.
    pub inputs: Vec<FileDigest>,
    /// Files written, relative to the output directory.
    pub outputs: Vec<FileDigest>,
    pub timings: Timings,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(at(path))?;
        let m: RunManifest = serde_json::from_str(&text).map_err(|e| FormatError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if m.format_version != RUN_MANIFEST_VERSION {
            return Err(FormatError::VersionMismatch {
                found: m.format_version,
                expected: RUN_MANIFEST_VERSION,
            }
            .into());
        }
        Ok(m)
    }
}

/// Attaches the offending path to an I/O error.
pub fn at(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn file_checksum(path: &Path) -> Result<String> {
    Ok(format!("{:016x}", weights_checksum(&fs::read(path).map_err(at(path))?)))
}

/// Collects inputs, outputs and timings while a command runs.
pub struct Run {
    pub out_dir: PathBuf,
    pub format: Format,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
    timings: Timings,
    started: Instant,
}

impl Run {
    pub fn new(out_dir: PathBuf, format: Format) -> Result<Self> {
        fs::create_dir_all(&out_dir).map_err(at(&out_dir))?;
        Ok(Run {
            out_dir,
            format,
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: Timings::default(),
            started: Instant::now(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let abs = fs::canonicalize(path).map_err(at(path))?;
        let checksum = file_checksum(&abs)?;
        if !self.inputs.iter().any(|d| d.path == abs) {
            self.inputs.push(FileDigest { path: abs, checksum });
        }
        Ok(())
    }

    /// Records a model read from `manifest` together with its weight blob.
    pub fn model_input(&mut self, manifest: &Path) -> Result<()> {
        self.input(manifest)?;
        let weights = manifest.with_extension(prunekit::graph::WEIGHTS_EXTENSION);
        if weights.exists() {
            self.input(&weights)?;
        }
        Ok(())
    }

    fn record(&mut self, name: &str) -> Result<()> {
        let checksum = file_checksum(&self.out_dir.join(name))?;
        self.outputs.push(FileDigest {
            path: PathBuf::from(name),
            checksum,
        });
        Ok(())
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        fs::write(&path, contents)?;
        self.record(name)?;
        Ok(path)
    }

    /// Writes a table as CSV or JSON depending on the run's format.
    pub fn table<T: Serialize>(&mut self, stem: &str, csv: impl FnOnce() -> String, value: &T) -> Result<PathBuf> {
        let name = format!("{stem}.{}", self.format.extension());
        let text = match self.format {
            Format::Csv => csv(),
            Format::Json => json(value)?,
        };
        self.write(&name, &text)
    }

    pub fn model(&mut self, graph: &ModelGraph, name: &str) -> Result<PathBuf> {
        let files = serialize(graph, &self.out_dir, name)?;
        for p in [&files.manifest, &files.weights] {
            let file = p.file_name().and_then(|f| f.to_str()).expect("serialize writes named files").to_string();
            self.record(&file)?;
        }
        Ok(files.manifest)
    }

    /// Times `f` under `phase`.
    pub fn phase<T>(&mut self, phase: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f()?;
        self.timings.phases.insert(phase.to_string(), t.elapsed().as_secs_f64());
        Ok(out)
    }

    pub fn note_seconds(&mut self, key: &str, seconds: f64) {
        self.timings.phases.insert(key.to_string(), seconds);
    }

    pub fn finish(mut self, command: &Command, config: &Config) -> Result<RunManifest> {
        self.timings.total_seconds = self.started.elapsed().as_secs_f64();
        let manifest = RunManifest {
            format_version: RUN_MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.clone(),
            format: self.format,
            config: config.clone(),
            seeds: Seeds {
                run: config.seed,
                train: config.train.seed,
                retrain: config.retrain.seed,
            },
            inputs: self.inputs,
            outputs: self.outputs,
            timings: self.timings,
        };
        fs::write(self.out_dir.join(RUN_MANIFEST_FILE), json(&manifest)?)?;
        Ok(manifest)
    }
}

pub fn json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| Error::Invariant(format!("cannot encode JSON: {e}")))
}
