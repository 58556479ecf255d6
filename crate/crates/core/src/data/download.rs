use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use sha2::{Digest, Sha256};

use super::DatasetCard;
use crate::error::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Byte source for dataset splits and checkpoints.
pub trait Fetcher: Send + Sync {
    fn fetch(&self, url: &str) -> Result<Vec<u8>>;
}

/// Fetches `http(s)://` URLs over the network and everything else from disk.
#[derive(Debug, Default, Clone, Copy)]
pub struct UrlFetcher;

impl Fetcher for UrlFetcher {
    fn fetch(&self, url: &str) -> Result<Vec<u8>> {
        let failed = |cause: String| Error::FetchFailed {
            url: url.to_string(),
            cause,
        };
        if url.starts_with("http://") || url.starts_with("https://") {
            let mut resp = ureq::get(url).call().map_err(|e| failed(e.to_string()))?;
            resp.body_mut()
                .with_config()
                .limit(1 << 30)
                .read_to_vec()
                .map_err(|e| failed(e.to_string()))
        } else {
            let path = url.strip_prefix("file://").unwrap_or(url);
            fs::read(path).map_err(|e| failed(e.to_string()))
        }
    }
}

/// Wraps a fetcher and counts calls.
pub struct CountingFetcher<F> {
    inner: F,
    count: AtomicUsize,
}

impl<F: Fetcher> CountingFetcher<F> {
    pub fn new(inner: F) -> Self {
        Self {
            inner,
            count: AtomicUsize::new(0),
        }
    }

    pub fn count(&self) -> usize {
        self.count.load(Ordering::SeqCst)
    }
}

impl<F: Fetcher> Fetcher for CountingFetcher<F> {
    fn fetch(&self, url: &str) -> Result<Vec<u8>> {
        self.count.fetch_add(1, Ordering::SeqCst);
        self.inner.fetch(url)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitStatus {
    Fetched,
    Cached,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub status: SplitStatus,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: BTreeMap<String, ManifestEntry>,
}

impl Manifest {
    pub fn path(&self, split: &str) -> Option<&Path> {
        self.entries.get(split).map(|e| e.path.as_path())
    }
}

/// Ensures every split of `card` is present under `<cache_root>/<name>/<split>.ann`
/// with the declared checksum. Files that already verify are left alone; a
/// missing or tampered file is fetched once and must then verify.
pub fn download_and_cache(card: &DatasetCard, cache_root: &Path, fetcher: &dyn Fetcher) -> Result<Manifest> {
    card.validate()?;
    let dir = cache_root.join(&card.name);
    fs::create_dir_all(&dir)?;
    let mut manifest = Manifest::default();
    for split in &card.splits {
        let target = dir.join(format!("{}.ann", split.split_name));
        let cached = fs::read(&target).ok().map(|b| sha256_hex(&b));
        let status = if cached.as_deref() == Some(split.sha256.as_str()) {
            SplitStatus::Cached
        } else {
            if cached.is_some() {
                log::warn!("{}: cached {} fails checksum, refetching", card.name, split.split_name);
            }
            let bytes = fetcher.fetch(&split.url)?;
            let actual = sha256_hex(&bytes);
            if actual != split.sha256 {
                return Err(Error::ChecksumMismatch {
                    split: split.split_name.clone(),
                    expected: split.sha256.clone(),
                    actual,
                });
            }
            write_atomic(&target, &bytes)?;
            SplitStatus::Fetched
        };
        manifest
            .entries
            .insert(split.split_name.clone(), ManifestEntry { path: target, status });
    }
    Ok(manifest)
}

/// Writes to a sibling temp file and renames it into place.
pub(crate) fn write_atomic(target: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = target.with_extension(format!(
        "tmp.{}.{}",
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, target)?;
    Ok(())
}

static TMP_COUNTER: AtomicUsize = AtomicUsize::new(0);
