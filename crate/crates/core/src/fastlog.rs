//! Fast uncompressed log device.
//!
//! An append-only byte store standing in for the low-latency device that
//! holds the WAL and the redo log. Appends land in a volatile buffer and
//! become durable on [`LogDevice::flush`]. Offsets are absolute and keep
//! growing when a prefix is reclaimed.
//!
//! When file-backed the layout is `"FLOG" u64 base_offset u64 meta` followed
//! by the durable bytes.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

const MAGIC: &[u8; 4] = b"FLOG";
const HEADER_LEN: usize = 20;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("log device full: {needed} bytes needed, {free} free")]
    Full { needed: u64, free: u64 },
    #[error("read of {len} bytes at {offset} outside durable range {start}..{end}")]
    OutOfRange { offset: u64, len: u64, start: u64, end: u64 },
    #[error("corrupt log file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LogStats {
    /// Bytes made durable.
    pub bytes_written: u64,
    pub appends: u64,
    pub flushes: u64,
    pub reads: u64,
    pub bytes_read: u64,
}

#[derive(Debug)]
pub struct LogDevice {
    capacity: u64,
    base_offset: u64,
    meta: u64,
    durable: Vec<u8>,
    pending: Vec<u8>,
    stats: LogStats,
    file: Option<(PathBuf, File)>,
}

impl Clone for LogDevice {
    /// Clones the in-memory state only; the clone is not file-backed.
    fn clone(&self) -> Self {
        LogDevice {
            capacity: self.capacity,
            base_offset: self.base_offset,
            meta: self.meta,
            durable: self.durable.clone(),
            pending: self.pending.clone(),
            stats: self.stats,
            file: None,
        }
    }
}

impl LogDevice {
    pub fn new(capacity: u64) -> Self {
        LogDevice {
            capacity,
            base_offset: 0,
            meta: 0,
            durable: Vec::new(),
            pending: Vec::new(),
            stats: LogStats::default(),
            file: None,
        }
    }

    /// Opens a file-backed log, creating it when missing.
    pub fn open(path: &Path, capacity: u64) -> Result<Self, LogError> {
        let mut dev = LogDevice::new(capacity);
        if path.exists() {
            let buf = std::fs::read(path)?;
            if buf.len() < HEADER_LEN || &buf[..4] != MAGIC {
                return Err(LogError::Corrupt(format!("{} is not a log file", path.display())));
            }
            dev.base_offset = u64::from_le_bytes(buf[4..12].try_into().unwrap());
            dev.meta = u64::from_le_bytes(buf[12..20].try_into().unwrap());
            dev.durable = buf[HEADER_LEN..].to_vec();
            let file = OpenOptions::new().append(true).open(path)?;
            dev.file = Some((path.to_path_buf(), file));
        } else {
            dev.file = Some((path.to_path_buf(), File::create(path)?));
            dev.rewrite_file()?;
        }
        Ok(dev)
    }

    /// Reads a log file written by [`Self::save`] or a file-backed log into
    /// an in-memory log.
    pub fn load(path: &Path, capacity: u64) -> Result<Self, LogError> {
        let buf = std::fs::read(path)?;
        if buf.len() < HEADER_LEN || &buf[..4] != MAGIC {
            return Err(LogError::Corrupt(format!("{} is not a log file", path.display())));
        }
        let mut dev = LogDevice::new(capacity);
        dev.base_offset = u64::from_le_bytes(buf[4..12].try_into().unwrap());
        dev.meta = u64::from_le_bytes(buf[12..20].try_into().unwrap());
        dev.durable = buf[HEADER_LEN..].to_vec();
        if dev.durable.len() as u64 > capacity {
            return Err(LogError::Corrupt(format!("{} holds more than {capacity} bytes", path.display())));
        }
        Ok(dev)
    }

    /// Writes the durable bytes to `path` in the file-backed layout.
    pub fn save(&self, path: &Path) -> Result<(), LogError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.file_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    fn file_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(HEADER_LEN + self.durable.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&self.base_offset.to_le_bytes());
        buf.extend_from_slice(&self.meta.to_le_bytes());
        buf.extend_from_slice(&self.durable);
        buf
    }

    fn rewrite_file(&mut self) -> Result<(), LogError> {
        let Some((path, _)) = &self.file else {
            return Ok(());
        };
        let path = path.clone();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.file_bytes())?;
        std::fs::rename(&tmp, &path)?;
        let file = OpenOptions::new().append(true).open(&path)?;
        self.file = Some((path, file));
        Ok(())
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    /// Bytes held (durable plus buffered).
    pub fn used(&self) -> u64 {
        (self.durable.len() + self.pending.len()) as u64
    }

    /// Absolute offset one past the last appended byte.
    pub fn end_offset(&self) -> u64 {
        self.base_offset + self.used()
    }

    pub fn durable_end(&self) -> u64 {
        self.base_offset + self.durable.len() as u64
    }

    pub fn base_offset(&self) -> u64 {
        self.base_offset
    }

    pub fn meta(&self) -> u64 {
        self.meta
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn stats(&self) -> LogStats {
        self.stats
    }

    /// Buffers `bytes` and returns their absolute offset.
    pub fn append(&mut self, bytes: &[u8]) -> Result<u64, LogError> {
        let free = self.capacity - self.used();
        if bytes.len() as u64 > free {
            return Err(LogError::Full { needed: bytes.len() as u64, free });
        }
        let off = self.end_offset();
        self.pending.extend_from_slice(bytes);
        self.stats.appends += 1;
        Ok(off)
    }

    /// Makes buffered bytes durable.
    pub fn flush(&mut self) -> Result<(), LogError> {
        if self.pending.is_empty() {
            return Ok(());
        }
        if let Some((_, file)) = &mut self.file {
            file.write_all(&self.pending)?;
        }
        self.stats.bytes_written += self.pending.len() as u64;
        self.stats.flushes += 1;
        self.durable.append(&mut self.pending);
        Ok(())
    }

    /// Durable bytes from the current base.
    pub fn durable_bytes(&self) -> &[u8] {
        &self.durable
    }

    /// Reads durable bytes at an absolute offset, counting one device read.
    pub fn read_at(&mut self, offset: u64, len: u64) -> Result<Vec<u8>, LogError> {
        let (start, end) = (self.base_offset, self.durable_end());
        if offset < start || offset + len > end {
            return Err(LogError::OutOfRange { offset, len, start, end });
        }
        let s = (offset - start) as usize;
        self.stats.reads += 1;
        self.stats.bytes_read += len;
        Ok(self.durable[s..s + len as usize].to_vec())
    }

    /// Drops durable bytes before `offset` and records `meta` with the new base.
    pub fn truncate_prefix(&mut self, offset: u64, meta: u64) -> Result<(), LogError> {
        let cut = offset.clamp(self.base_offset, self.durable_end());
        self.durable.drain(..(cut - self.base_offset) as usize);
        self.base_offset = cut;
        self.meta = meta;
        self.rewrite_file()
    }

    /// Replaces all content, durable and buffered, with `bytes`.
    pub fn reset(&mut self, bytes: &[u8], meta: u64) -> Result<(), LogError> {
        self.base_offset = self.end_offset();
        self.durable.clear();
        self.pending.clear();
        self.meta = meta;
        self.durable.extend_from_slice(bytes);
        self.stats.bytes_written += bytes.len() as u64;
        self.rewrite_file()
    }

    /// Drops everything after durable offset `offset` (used to discard a
    /// record that never reached quorum).
    pub fn truncate_suffix(&mut self, offset: u64) -> Result<(), LogError> {
        let dend = self.durable_end();
        if offset >= dend {
            self.pending.truncate((offset - dend) as usize);
            return Ok(());
        }
        let keep = offset.max(self.base_offset) - self.base_offset;
        self.durable.truncate(keep as usize);
        self.pending.clear();
        self.rewrite_file()
    }

    /// Simulates power loss: buffered bytes are lost except for a torn
    /// prefix of `tear` bytes.
    pub fn crash(&mut self, tear: usize) {
        let keep = tear.min(self.pending.len());
        let torn: Vec<u8> = self.pending.drain(..keep).collect();
        self.pending.clear();
        self.durable.extend_from_slice(&torn);
        if let Some((_, file)) = &mut self.file {
            let _ = file.write_all(&torn);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.log");
        let mut log = LogDevice::new(1024);
        log.append(b"abcdef").unwrap();
        log.flush().unwrap();
        log.truncate_prefix(2, 9).unwrap();
        log.append(b"lost").unwrap();
        log.save(&path).unwrap();
        let back = LogDevice::load(&path, 1024).unwrap();
        assert_eq!((back.base_offset(), back.meta(), back.durable_bytes()), (2, 9, &b"cdef"[..]));
        assert!(LogDevice::load(&path, 3).is_err());
    }

    #[test]
    fn append_flush_read() {
        let mut log = LogDevice::new(1024);
        let a = log.append(b"hello").unwrap();
        assert_eq!(a, 0);
        assert!(log.read_at(0, 5).is_err());
        log.flush().unwrap();
        assert_eq!(log.read_at(0, 5).unwrap(), b"hello");
        assert_eq!(log.stats().bytes_written, 5);
        assert_eq!(log.stats().reads, 1);
    }

    #[test]
    fn capacity_enforced_and_reclaimed() {
        let mut log = LogDevice::new(10);
        log.append(&[1; 8]).unwrap();
        assert!(matches!(log.append(&[1; 3]), Err(LogError::Full { needed: 3, free: 2 })));
        log.flush().unwrap();
        log.truncate_prefix(6, 42).unwrap();
        assert_eq!(log.base_offset(), 6);
        assert_eq!(log.meta(), 42);
        assert_eq!(log.append(&[2; 8]).unwrap(), 8);
    }

    #[test]
    fn crash_keeps_torn_prefix() {
        let mut log = LogDevice::new(100);
        log.append(b"abc").unwrap();
        log.flush().unwrap();
        log.append(b"defgh").unwrap();
        log.crash(2);
        assert_eq!(log.durable_bytes(), b"abcde");
        assert_eq!(log.pending_len(), 0);
    }

    #[test]
    fn file_backed_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.log");
        {
            let mut log = LogDevice::open(&path, 1 << 20).unwrap();
            log.append(b"0123456789").unwrap();
            log.flush().unwrap();
            log.truncate_prefix(4, 7).unwrap();
            log.append(b"ab").unwrap();
            log.flush().unwrap();
            log.append(b"lost").unwrap();
        }
        let mut log = LogDevice::open(&path, 1 << 20).unwrap();
        assert_eq!(log.base_offset(), 4);
        assert_eq!(log.meta(), 7);
        assert_eq!(log.read_at(4, 8).unwrap(), b"456789ab");
    }

    #[test]
    fn suffix_truncation() {
        let mut log = LogDevice::new(100);
        log.append(b"abcdef").unwrap();
        log.flush().unwrap();
        log.append(b"gh").unwrap();
        log.truncate_suffix(4).unwrap();
        assert_eq!(log.durable_bytes(), b"abcd");
        assert_eq!(log.end_offset(), 4);
    }
}
