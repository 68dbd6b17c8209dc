//! Content-addressed result cache: key is a hex digest, value canonical JSON.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

/// Concurrent readers, serialized writers.
pub trait ResultCache: Send + Sync {
    fn get(&self, key: &str) -> Option<String>;
    fn put(&self, key: &str, value: &str);
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Default)]
pub struct MemoryCache {
    entries: RwLock<HashMap<String, String>>,
}

impl MemoryCache {
    pub fn new() -> Self {
        Self::default()
    }
}

impl ResultCache for MemoryCache {
    fn get(&self, key: &str) -> Option<String> {
        self.entries.read().expect("cache lock").get(key).cloned()
    }

    fn put(&self, key: &str, value: &str) {
        self.entries
            .write()
            .expect("cache lock")
            .insert(key.to_string(), value.to_string());
    }

    fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }
}

/// One file per entry, `<dir>/<key>.json`, written atomically via rename.
#[derive(Debug)]
pub struct DirCache {
    dir: PathBuf,
    writer: Mutex<()>,
}

impl DirCache {
    pub fn open(dir: impl AsRef<Path>) -> std::io::Result<Self> {
        fs::create_dir_all(dir.as_ref())?;
        Ok(Self {
            dir: dir.as_ref().to_path_buf(),
            writer: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, key: &str) -> Option<PathBuf> {
        // keys are hex digests; anything else never touches the filesystem
        key.chars()
            .all(|c| c.is_ascii_hexdigit())
            .then(|| self.dir.join(format!("{key}.json")))
    }
}

impl ResultCache for DirCache {
    fn get(&self, key: &str) -> Option<String> {
        fs::read_to_string(self.path_for(key)?).ok()
    }

    fn put(&self, key: &str, value: &str) {
        let Some(path) = self.path_for(key) else { return };
        let _guard = self.writer.lock().expect("cache writer lock");
        let tmp = self.dir.join(format!(".{key}.tmp"));
        let written = fs::File::create(&tmp)
            .and_then(|mut f| f.write_all(value.as_bytes()))
            .and_then(|_| fs::rename(&tmp, &path));
        if let Err(e) = written {
            log::warn!("cache write to {} failed: {e}", path.display());
            let _ = fs::remove_file(&tmp);
        }
    }

    fn len(&self) -> usize {
        fs::read_dir(&self.dir)
            .map(|rd| {
                rd.filter_map(Result::ok)
                    .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
                    .count()
            })
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dir_cache_roundtrip() {
        let tmp = tempfile::tempdir().unwrap();
        let c = DirCache::open(tmp.path().join("cache")).unwrap();
        assert!(c.is_empty());
        c.put("abc123", "{\"x\":1}");
        assert_eq!(c.get("abc123").as_deref(), Some("{\"x\":1}"));
        assert_eq!(c.len(), 1);
        c.put("../evil", "x");
        assert_eq!(c.len(), 1);
        assert!(c.get("missing").is_none());

        let reopened = DirCache::open(c.dir()).unwrap();
        assert_eq!(reopened.get("abc123").as_deref(), Some("{\"x\":1}"));
    }

    #[test]
    fn memory_cache_roundtrip() {
        let c = MemoryCache::new();
        c.put("k", "v");
        assert_eq!(c.get("k").as_deref(), Some("v"));
        assert_eq!(c.len(), 1);
    }
}
