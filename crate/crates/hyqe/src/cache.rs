//! Persistent store of hypothetical-query sets and their embeddings.
//!
//! Generation is the expensive step, so its outputs are keyed by
//! `(context_id, generator fingerprint)` and written once: any later query
//! that retrieves the same context reuses the stored set. Changing the
//! embedder invalidates only the embeddings; the stored queries survive and
//! are re-embedded without touching the generator.
//!
//! On-disk layout:
//!
//! ```text
//! <store>/manifest.json            index of record digests
//! <store>/records/<keydigest>.json one record per key
//! ```
//!
//! Records are written to a temp file and renamed into place, and the
//! manifest is rewritten the same way. Any number of processes may read a
//! store; only one process may write.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::hypquery::{generate_for_context, HypotheticalQuerySet, PromptTemplate};
use crate::providers::{Embedder, GenerationParams, Generator, GeneratorFingerprint, PromptWrapper};
use crate::types::ContextDoc;

/// Cache key: one context under one exact generation configuration.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CacheKey {
    pub context_id: String,
    pub fingerprint: GeneratorFingerprint,
}

impl CacheKey {
    pub fn new(context_id: impl Into<String>, fingerprint: GeneratorFingerprint) -> Self {
        CacheKey {
            context_id: context_id.into(),
            fingerprint,
        }
    }

    /// Content-addressed record filename.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for part in [
            self.context_id.as_str(),
            &self.fingerprint.model_name,
            &self.fingerprint.prompt_template_id,
            &self.fingerprint.params_digest,
            &self.fingerprint.wrapper_id,
        ] {
            hasher.update(part.as_bytes());
            hasher.update([0u8]);
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One stored generation result. `embedder_name` travels with the
/// embeddings so a different embedder invalidates their reuse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key: CacheKey,
    pub queries: Vec<String>,
    pub embeddings: Vec<Embedding>,
    pub embedder_name: String,
    pub created_at: u64,
}

impl CacheRecord {
    /// View of the record as an in-memory hypothetical-query set.
    pub fn to_query_set(&self) -> HypotheticalQuerySet {
        HypotheticalQuerySet {
            context_id: self.key.context_id.clone(),
            fingerprint: self.key.fingerprint.clone(),
            queries: self.queries.clone(),
            embeddings: Some(self.embeddings.clone()),
        }
    }
}

/// Monotone counters since the store was opened, plus totals from disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub records: u64,
    pub queries: u64,
    pub hits: u64,
    pub misses: u64,
}

/// Everything `get_or_generate` needs to fill a cold key.
pub struct GenerateDeps<'a> {
    pub generator: &'a dyn Generator,
    pub embedder: &'a dyn Embedder,
    pub template: &'a PromptTemplate,
    pub params: &'a GenerationParams,
    pub wrapper: &'a PromptWrapper,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    context_id: String,
    queries: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    records: BTreeMap<String, ManifestEntry>,
}

/// The on-disk store. Safe for concurrent readers; writers serialize per
/// key so concurrent misses on the same key generate exactly once.
pub struct QueryCache {
    root: PathBuf,
    records_dir: PathBuf,
    index: Mutex<BTreeMap<String, ManifestEntry>>,
    inflight: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl QueryCache {
    /// Opens or creates a store rooted at `root`. A missing manifest is
    /// rebuilt from the record files, so a crash between record and
    /// manifest writes never loses data.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let records_dir = root.join("records");
        std::fs::create_dir_all(&records_dir)?;

        let manifest_path = root.join("manifest.json");
        let index = if manifest_path.exists() {
            let text = std::fs::read_to_string(&manifest_path)?;
            let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::CorruptRecord {
                digest: "manifest".into(),
                message: e.to_string(),
            })?;
            manifest.records
        } else {
            rebuild_index(&records_dir)?
        };

        let cache = QueryCache {
            root,
            records_dir,
            index: Mutex::new(index),
            inflight: Mutex::new(HashMap::new()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        };
        cache.write_manifest()?;
        Ok(cache)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn record_path(&self, digest: &str) -> PathBuf {
        self.records_dir.join(format!("{digest}.json"))
    }

    /// Reads a record if present. No counter side effects.
    pub fn get(&self, key: &CacheKey) -> Result<Option<CacheRecord>> {
        let digest = key.digest();
        let path = self.record_path(&digest);
        let text = match std::fs::read_to_string(&path) {
            Ok(text) => text,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let record: CacheRecord = serde_json::from_str(&text).map_err(|e| Error::CorruptRecord {
            digest: digest.clone(),
            message: e.to_string(),
        })?;
        if record.key != *key {
            return Err(Error::CorruptRecord {
                digest,
                message: "stored key does not match requested key".into(),
            });
        }
        if record.embeddings.len() != record.queries.len() {
            return Err(Error::CorruptRecord {
                digest,
                message: format!(
                    "{} embeddings for {} queries",
                    record.embeddings.len(),
                    record.queries.len()
                ),
            });
        }
        Ok(Some(record))
    }

    /// Writes a record atomically and updates the manifest.
    pub fn put(&self, record: &CacheRecord) -> Result<()> {
        if record.embeddings.len() != record.queries.len() {
            return Err(Error::InvalidInput(format!(
                "record for {} has {} embeddings for {} queries",
                record.key.context_id,
                record.embeddings.len(),
                record.queries.len()
            )));
        }
        if let Some(first) = record.embeddings.first() {
            if let Some(odd) = record.embeddings.iter().find(|e| e.dim() != first.dim()) {
                return Err(Error::Dimension {
                    left: first.dim(),
                    right: odd.dim(),
                });
            }
        }
        let digest = record.key.digest();
        let final_path = self.record_path(&digest);
        let tmp_path = self.records_dir.join(format!(".tmp-{digest}-{}", std::process::id()));
        std::fs::write(&tmp_path, serde_json::to_string_pretty(record)?.as_bytes())?;
        std::fs::rename(&tmp_path, &final_path)?;

        // insert and manifest rewrite share one critical section so the
        // manifest on disk never lags a concurrent writer's record
        let mut index = self.index.lock().expect("cache index lock");
        index.insert(
            digest,
            ManifestEntry {
                context_id: record.key.context_id.clone(),
                queries: record.queries.len() as u64,
            },
        );
        Self::persist_manifest(&self.root, &index)
    }

    fn write_manifest(&self) -> Result<()> {
        let index = self.index.lock().expect("cache index lock");
        Self::persist_manifest(&self.root, &index)
    }

    fn persist_manifest(root: &Path, index: &BTreeMap<String, ManifestEntry>) -> Result<()> {
        let manifest = Manifest {
            version: 1,
            records: index.clone(),
        };
        let tmp = root.join(".manifest.tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        std::fs::rename(&tmp, root.join("manifest.json"))?;
        Ok(())
    }

    /// Cache hit returns the stored record with zero generator calls; a
    /// miss generates, embeds, persists, and returns. Concurrent misses on
    /// one key perform the generation exactly once. A stored record whose
    /// embeddings came from a different embedder keeps its queries and only
    /// re-embeds them.
    pub fn get_or_generate(
        &self,
        key: &CacheKey,
        context: &ContextDoc,
        deps: &GenerateDeps<'_>,
    ) -> Result<CacheRecord> {
        if let Some(record) = self.get(key)? {
            return self.finish_hit(record, deps);
        }

        let key_lock = {
            let mut inflight = self.inflight.lock().expect("inflight lock");
            inflight
                .entry(key.digest())
                .or_insert_with(|| Arc::new(Mutex::new(())))
                .clone()
        };
        let _guard = key_lock.lock().expect("per-key lock");

        // the thread that held the lock before us may have filled the key
        if let Some(record) = self.get(key)? {
            return self.finish_hit(record, deps);
        }

        self.misses.fetch_add(1, Ordering::Relaxed);
        let set = generate_for_context(context, deps.template, deps.generator, deps.params, deps.wrapper)?;
        let embeddings = embed_queries(deps.embedder, &set.queries)?;
        let record = CacheRecord {
            key: key.clone(),
            queries: set.queries,
            embeddings,
            embedder_name: deps.embedder.name().to_string(),
            created_at: unix_now(),
        };
        self.put(&record)?;
        Ok(record)
    }

    fn finish_hit(&self, record: CacheRecord, deps: &GenerateDeps<'_>) -> Result<CacheRecord> {
        self.hits.fetch_add(1, Ordering::Relaxed);
        if record.embedder_name == deps.embedder.name() {
            return Ok(record);
        }
        // embedder changed: queries stay valid, embeddings do not
        let embeddings = embed_queries(deps.embedder, &record.queries)?;
        let refreshed = CacheRecord {
            embeddings,
            embedder_name: deps.embedder.name().to_string(),
            created_at: unix_now(),
            ..record
        };
        self.put(&refreshed)?;
        Ok(refreshed)
    }

    pub fn stats(&self) -> CacheStats {
        let index = self.index.lock().expect("cache index lock");
        CacheStats {
            records: index.len() as u64,
            queries: index.values().map(|e| e.queries).sum(),
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
        }
    }
}

fn embed_queries(embedder: &dyn Embedder, queries: &[String]) -> Result<Vec<Embedding>> {
    if queries.is_empty() {
        return Ok(Vec::new());
    }
    let embeddings = embedder.embed(queries)?;
    if embeddings.len() != queries.len() {
        return Err(Error::provider(
            format!("embedder returned {} vectors for {} queries", embeddings.len(), queries.len()),
            false,
        ));
    }
    Ok(embeddings)
}

fn rebuild_index(records_dir: &Path) -> Result<BTreeMap<String, ManifestEntry>> {
    let mut index = BTreeMap::new();
    for entry in std::fs::read_dir(records_dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(digest) = name.strip_suffix(".json") else {
            continue;
        };
        let text = std::fs::read_to_string(&path)?;
        let record: CacheRecord = serde_json::from_str(&text).map_err(|e| Error::CorruptRecord {
            digest: digest.to_string(),
            message: e.to_string(),
        })?;
        index.insert(
            digest.to_string(),
            ManifestEntry {
                context_id: record.key.context_id,
                queries: record.queries.len() as u64,
            },
        );
    }
    Ok(index)
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypquery::DEFAULT_TEMPLATE_ID;
    use crate::providers::testing::{DerivedGenerator, HashEmbedder};
    use tempfile::TempDir;

    fn fingerprint() -> GeneratorFingerprint {
        GeneratorFingerprint::new(
            "mock-derived",
            DEFAULT_TEMPLATE_ID,
            &GenerationParams::default(),
            &PromptWrapper::openai(),
        )
    }

    fn sample_record(context_id: &str) -> CacheRecord {
        CacheRecord {
            key: CacheKey::new(context_id, fingerprint()),
            queries: vec!["What is a?".into(), "What is b?".into()],
            embeddings: vec![
                Embedding::new(vec![0.1, 0.2]).unwrap(),
                Embedding::new(vec![0.3, 0.4]).unwrap(),
            ],
            embedder_name: "hash-embedder-d2".into(),
            created_at: 12345,
        }
    }

    #[test]
    fn get_on_empty_store_is_absent() {
        let dir = TempDir::new().unwrap();
        let cache = QueryCache::open(dir.path()).unwrap();
        let got = cache.get(&CacheKey::new("d1", fingerprint())).unwrap();
        assert!(got.is_none());
        let stats = cache.stats();
        assert_eq!((stats.records, stats.queries, stats.hits, stats.misses), (0, 0, 0, 0));
    }

    #[test]
    fn put_then_get_round_trips() {
        let dir = TempDir::new().unwrap();
        let cache = QueryCache::open(dir.path()).unwrap();
        let record = sample_record("d1");
        cache.put(&record).unwrap();
        let got = cache.get(&record.key).unwrap().unwrap();
        assert_eq!(got, record);
    }

    #[test]
    fn records_survive_reopen_bit_exactly() {
        let dir = TempDir::new().unwrap();
        let record = sample_record("d1");
        {
            let cache = QueryCache::open(dir.path()).unwrap();
            cache.put(&record).unwrap();
        }
        let reopened = QueryCache::open(dir.path()).unwrap();
        let got = reopened.get(&record.key).unwrap().unwrap();
        assert_eq!(
            serde_json::to_string(&got).unwrap(),
            serde_json::to_string(&record).unwrap()
        );
        assert_eq!(reopened.stats().records, 1);
        assert_eq!(reopened.stats().queries, 2);
    }

    #[test]
    fn manifest_rebuilds_from_records() {
        let dir = TempDir::new().unwrap();
        let record = sample_record("d1");
        {
            let cache = QueryCache::open(dir.path()).unwrap();
            cache.put(&record).unwrap();
        }
        std::fs::remove_file(dir.path().join("manifest.json")).unwrap();
        let reopened = QueryCache::open(dir.path()).unwrap();
        assert_eq!(reopened.stats().records, 1);
        assert!(reopened.get(&record.key).unwrap().is_some());
    }

    #[test]
    fn corrupt_record_names_its_digest() {
        let dir = TempDir::new().unwrap();
        let cache = QueryCache::open(dir.path()).unwrap();
        let key = CacheKey::new("d1", fingerprint());
        let digest = key.digest();
        std::fs::write(
            dir.path().join("records").join(format!("{digest}.json")),
            b"{ not json",
        )
        .unwrap();
        let err = cache.get(&key).unwrap_err();
        match err {
            Error::CorruptRecord { digest: d, .. } => assert_eq!(d, digest),
            other => panic!("expected CorruptRecord, got {other:?}"),
        }
    }

    #[test]
    fn hit_skips_generation_and_counts() {
        let dir = TempDir::new().unwrap();
        let cache = QueryCache::open(dir.path()).unwrap();
        let generator = DerivedGenerator::new(3900);
        let embedder = HashEmbedder::new(4);
        let template = PromptTemplate::builtin(DEFAULT_TEMPLATE_ID).unwrap();
        let params = GenerationParams::default();
        let wrapper = PromptWrapper::openai();
        let deps = GenerateDeps {
            generator: &generator,
            embedder: &embedder,
            template: &template,
            params: &params,
            wrapper: &wrapper,
        };
        let context = ContextDoc::new("d1", "alpha beta gamma delta");
        let key = CacheKey::new("d1", fingerprint());

        let first = cache.get_or_generate(&key, &context, &deps).unwrap();
        assert!(!first.queries.is_empty());
        let second = cache.get_or_generate(&key, &context, &deps).unwrap();
        assert_eq!(first, second);

        let stats = cache.stats();
        assert_eq!(stats.misses, 1);
        assert_eq!(stats.hits, 1);
        assert_eq!(stats.records, 1);
    }

    #[test]
    fn changed_embedder_reembeds_without_generation() {
        let dir = TempDir::new().unwrap();
        let cache = QueryCache::open(dir.path()).unwrap();
        let template = PromptTemplate::builtin(DEFAULT_TEMPLATE_ID).unwrap();
        let params = GenerationParams::default();
        let wrapper = PromptWrapper::openai();
        let context = ContextDoc::new("d1", "alpha beta gamma delta");
        let key = CacheKey::new("d1", fingerprint());

        let counters = Arc::new(crate::providers::ProviderCounters::default());
        let generator = crate::providers::InstrumentedGenerator::new(
            DerivedGenerator::new(3900),
            counters.clone(),
        );

        let embedder_a = HashEmbedder::new(4);
        let deps_a = GenerateDeps {
            generator: &generator,
            embedder: &embedder_a,
            template: &template,
            params: &params,
            wrapper: &wrapper,
        };
        let first = cache.get_or_generate(&key, &context, &deps_a).unwrap();
        let (gen_calls, _, _) = counters.snapshot();
        assert_eq!(gen_calls, 1);

        let counters_b = Arc::new(crate::providers::ProviderCounters::default());
        let embedder_b = crate::providers::InstrumentedEmbedder::new(
            HashEmbedder::new(8),
            counters_b.clone(),
        );
        let deps_b = GenerateDeps {
            generator: &generator,
            embedder: &embedder_b,
            template: &template,
            params: &params,
            wrapper: &wrapper,
        };
        let refreshed = cache.get_or_generate(&key, &context, &deps_b).unwrap();
        assert_eq!(refreshed.queries, first.queries);
        assert_eq!(refreshed.embedder_name, "hash-embedder-d8");
        assert_ne!(refreshed.embeddings, first.embeddings);

        let (gen_calls_after, _, embed_texts) = {
            let (g, _, _) = counters.snapshot();
            let (_, calls_b, texts_b) = counters_b.snapshot();
            (g, calls_b, texts_b)
        };
        assert_eq!(gen_calls_after, 1, "no second generation");
        assert_eq!(embed_texts, first.queries.len() as u64);
    }

    #[test]
    fn empty_query_set_is_cacheable() {
        let dir = TempDir::new().unwrap();
        let cache = QueryCache::open(dir.path()).unwrap();
        let generator = DerivedGenerator::new(3900);
        let embedder = HashEmbedder::new(4);
        let template = PromptTemplate::builtin(DEFAULT_TEMPLATE_ID).unwrap();
        let params = GenerationParams::default();
        let wrapper = PromptWrapper::openai();
        let deps = GenerateDeps {
            generator: &generator,
            embedder: &embedder,
            template: &template,
            params: &params,
            wrapper: &wrapper,
        };
        let context = ContextDoc::new("empty", "");
        let key = CacheKey::new("empty", fingerprint());
        let record = cache.get_or_generate(&key, &context, &deps).unwrap();
        assert!(record.queries.is_empty());
        assert!(record.embeddings.is_empty());
        // and the empty record is a hit next time
        cache.get_or_generate(&key, &context, &deps).unwrap();
        assert_eq!(cache.stats().hits, 1);
    }
}
