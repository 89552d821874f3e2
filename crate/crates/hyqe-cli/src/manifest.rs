//! Per-command run manifests: config snapshot, inputs and outputs, stage
//! timings, provider call counts, and cache statistics, as one JSON file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use hyqe::cache::CacheStats;
use hyqe::providers::ProviderCounters;

#[derive(Debug, Serialize)]
pub struct ProviderCallCounts {
    pub generate_calls: u64,
    pub embed_calls: u64,
    pub embed_texts: u64,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub timing_secs: BTreeMap<String, f64>,
    pub provider_calls: ProviderCallCounts,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache: Option<CacheStats>,
    pub incidents: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub results: Option<serde_json::Value>,
}

/// Builder that accumulates stages while a command runs.
pub struct ManifestBuilder {
    manifest: RunManifest,
    started: Instant,
    stage_started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        let now = Instant::now();
        ManifestBuilder {
            manifest: RunManifest {
                command: command.to_string(),
                config,
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                timing_secs: BTreeMap::new(),
                provider_calls: ProviderCallCounts {
                    generate_calls: 0,
                    embed_calls: 0,
                    embed_texts: 0,
                },
                cache: None,
                incidents: Vec::new(),
                results: None,
            },
            started: now,
            stage_started: now,
        }
    }

    pub fn input(&mut self, name: &str, path: impl AsRef<Path>) -> &mut Self {
        self.manifest
            .inputs
            .insert(name.to_string(), path.as_ref().display().to_string());
        self
    }

    pub fn output(&mut self, name: &str, path: impl AsRef<Path>) -> &mut Self {
        self.manifest
            .outputs
            .insert(name.to_string(), path.as_ref().display().to_string());
        self
    }

    /// Closes the current stage under `name` and starts the next one.
    pub fn stage(&mut self, name: &str) -> &mut Self {
        let elapsed = self.stage_started.elapsed().as_secs_f64();
        self.manifest.timing_secs.insert(name.to_string(), elapsed);
        self.stage_started = Instant::now();
        self
    }

    pub fn incidents(&mut self, incidents: impl IntoIterator<Item = String>) -> &mut Self {
        self.manifest.incidents.extend(incidents);
        self
    }

    pub fn results(&mut self, value: serde_json::Value) -> &mut Self {
        self.manifest.results = Some(value);
        self
    }

    pub fn finish(
        mut self,
        counters: &ProviderCounters,
        cache: Option<CacheStats>,
        path: &Path,
    ) -> anyhow::Result<RunManifest> {
        let (generate_calls, embed_calls, embed_texts) = counters.snapshot();
        self.manifest.provider_calls = ProviderCallCounts {
            generate_calls,
            embed_calls,
            embed_texts,
        };
        self.manifest.cache = cache;
        self.manifest
            .timing_secs
            .insert("total".to_string(), self.started.elapsed().as_secs_f64());
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(self.manifest)
    }
}

/// Default manifest location for a command anchored to a primary path.
pub fn default_manifest_path(anchor: &Path, command: &str) -> PathBuf {
    if anchor.is_dir() {
        anchor.join(format!("{command}.manifest.json"))
    } else {
        let mut name = anchor.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(format!(".{command}.manifest.json"));
        anchor.with_file_name(name)
    }
}
