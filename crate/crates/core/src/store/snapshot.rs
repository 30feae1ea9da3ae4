//! Snapshot image encoding and persistence backends.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "NSMO-SS1"
//! count        u64
//! count x record:
//!   key_len    u32
//!   key        key_len bytes, UTF-8 rendered key
//!   value_len  u32
//!   value      value_len bytes
//!   version    u64
//!   written_at u64
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use parking_lot::Mutex;

use super::{StateEntry, StateKey, StoreError, MAX_VALUE_LEN};

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"NSMO-SS1";

pub(crate) fn encode(entries: &[StateEntry]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + entries.len() * 64);
    out.extend_from_slice(SNAPSHOT_MAGIC);
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for e in entries {
        let key = e.key.render();
        out.extend_from_slice(&(key.len() as u32).to_le_bytes());
        out.extend_from_slice(key.as_bytes());
        out.extend_from_slice(&(e.value.len() as u32).to_le_bytes());
        out.extend_from_slice(&e.value);
        out.extend_from_slice(&e.version.to_le_bytes());
        out.extend_from_slice(&e.written_at.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], StoreError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(StoreError::CorruptImage(format!(
                "truncated while reading {what} at offset {}",
                self.pos
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32, StoreError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, StoreError> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub(crate) fn decode(image: &[u8]) -> Result<Vec<StateEntry>, StoreError> {
    let mut r = Reader { buf: image, pos: 0 };
    if r.take(8, "magic")? != SNAPSHOT_MAGIC {
        return Err(StoreError::CorruptImage("bad magic".into()));
    }
    let count = r.u64("record count")?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let key_len = r.u32("key length")? as usize;
        let key_bytes = r.take(key_len, "key")?;
        let key_str = std::str::from_utf8(key_bytes)
            .map_err(|_| StoreError::CorruptImage("key is not UTF-8".into()))?;
        let key = StateKey::parse(key_str)
            .map_err(|e| StoreError::CorruptImage(format!("invalid key {key_str:?}: {e}")))?;
        let value_len = r.u32("value length")? as usize;
        if value_len > MAX_VALUE_LEN {
            return Err(StoreError::CorruptImage(format!(
                "value of {value_len} bytes exceeds limit"
            )));
        }
        let value = r.take(value_len, "value")?.to_vec();
        let version = r.u64("version")?;
        if version == 0 {
            return Err(StoreError::CorruptImage(format!("{key} has version 0")));
        }
        let written_at = r.u64("timestamp")?;
        entries.push(StateEntry {
            key,
            value,
            version,
            written_at,
        });
    }
    if r.pos != image.len() {
        return Err(StoreError::CorruptImage(format!(
            "{} trailing bytes",
            image.len() - r.pos
        )));
    }
    Ok(entries)
}

/// Where snapshot images live.
pub trait SnapshotBackend: Send + Sync {
    /// The stored image, or `None` if nothing has been saved yet.
    fn load(&self) -> io::Result<Option<Vec<u8>>>;
    fn save(&self, image: &[u8]) -> io::Result<()>;
}

/// Keeps the image in a file, replacing it atomically via a temp file.
#[derive(Debug, Clone)]
pub struct FileBackend {
    path: PathBuf,
}

impl FileBackend {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl SnapshotBackend for FileBackend {
    fn load(&self) -> io::Result<Option<Vec<u8>>> {
        match fs::read(&self.path) {
            Ok(bytes) => Ok(Some(bytes)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn save(&self, image: &[u8]) -> io::Result<()> {
        let mut tmp = self.path.clone().into_os_string();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(image)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &self.path)
    }
}

#[derive(Debug, Default)]
pub struct MemoryBackend {
    image: Mutex<Option<Vec<u8>>>,
}

impl MemoryBackend {
    pub fn new() -> Self {
        Self::default()
    }
}

impl SnapshotBackend for MemoryBackend {
    fn load(&self) -> io::Result<Option<Vec<u8>>> {
        Ok(self.image.lock().clone())
    }

    fn save(&self, image: &[u8]) -> io::Result<()> {
        *self.image.lock() = Some(image.to_vec());
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::Clock;
    use crate::store::StateStore;

    #[test]
    fn empty_store_round_trips() {
        let store = StateStore::default();
        let image = store.snapshot();
        assert_eq!(&image[..8], SNAPSHOT_MAGIC);
        let back = StateStore::restore(&image, Clock::new()).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn five_keys_round_trip() {
        let clock = Clock::new();
        let store = StateStore::new(clock.clone());
        for i in 0..5u64 {
            clock.advance_to(i * 3);
            let key = StateKey::parse(&format!("k/{i}")).unwrap();
            for j in 0..=i {
                store.put(&key, format!("v{j}"), None).unwrap();
            }
        }
        let back = StateStore::restore(&store.snapshot(), Clock::new()).unwrap();
        // Structural equality oracle over (key, value, version, written_at).
        assert_eq!(back.entries(), store.entries());
        assert_eq!(back.len(), 5);
        // Versions continue after restore.
        let key = StateKey::parse("k/4").unwrap();
        assert_eq!(back.put(&key, "x", None).unwrap().version, 6);
    }

    #[test]
    fn truncated_image_is_corrupt() {
        let store = StateStore::default();
        store
            .put(&StateKey::parse("a").unwrap(), "value", None)
            .unwrap();
        let image = store.snapshot();
        for cut in [0, 4, 8, 12, 16, image.len() - 1] {
            assert!(
                matches!(
                    StateStore::restore(&image[..cut], Clock::new()),
                    Err(StoreError::CorruptImage(_))
                ),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn bad_magic_and_trailing_bytes_are_corrupt() {
        let mut image = StateStore::default().snapshot();
        image.push(0);
        assert!(matches!(
            StateStore::restore(&image, Clock::new()),
            Err(StoreError::CorruptImage(_))
        ));
        let mut bad = StateStore::default().snapshot();
        bad[0] = b'X';
        assert!(matches!(
            StateStore::restore(&bad, Clock::new()),
            Err(StoreError::CorruptImage(_))
        ));
    }

    #[test]
    fn file_backend_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let backend = FileBackend::new(dir.path().join("state.bin"));
        assert!(backend.load().unwrap().is_none());
        let store = StateStore::default();
        store.put(&StateKey::parse("a/b").unwrap(), "1", None).unwrap();
        store.save_to(&backend).unwrap();
        let back = StateStore::load_from(&backend, Clock::new()).unwrap();
        assert_eq!(back.entries(), store.entries());
    }
}
