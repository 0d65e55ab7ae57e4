//! Simulated 128 KiB dual-port memory window shared through a mapped file.
//!
//! The window holds two 64 KiB rings, host→kernel then kernel→host. Each
//! ring starts with four u64 words (head, tail, writer claim, reader claim)
//! followed by the circular data area. Head and tail count bytes ever
//! written and consumed, so `head - tail` is the ring fill.
//!
//! A message travels as one or more chunks: u32 LE payload length, one flag
//! byte (bit 0 marks the last chunk), three zero bytes, then the payload.

use std::fs::OpenOptions;
use std::io;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use memmap2::MmapMut;
use thiserror::Error;

pub const WINDOW_SIZE: usize = 131_072;
pub const RING_SIZE: usize = WINDOW_SIZE / 2;
const HEADER: usize = 32;
pub const RING_DATA: usize = RING_SIZE - HEADER;
pub const CHUNK_HEADER: usize = 8;
const FINAL: u8 = 1;

const HEAD: usize = 0;
const TAIL: usize = 8;
const WRITER: usize = 16;
const READER: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ring {
    HostToKernel = 0,
    KernelToHost = 1,
}

#[derive(Debug, Error)]
pub enum DpmError {
    #[error("dpm file: {0}")]
    Io(#[from] io::Error),
    #[error("dpm file is {0} bytes, expected {WINDOW_SIZE}")]
    Size(u64),
    #[error("ring already has a writer")]
    WriterBusy,
    #[error("ring already has a reader")]
    ReaderBusy,
    #[error("timed out")]
    Timeout,
    #[error("corrupt ring: {0}")]
    Corrupt(String),
}

struct Mapping {
    _map: MmapMut,
    base: *mut u8,
}

// SAFETY: the mapping lives as long as `Mapping`; shared words are accessed
// only through atomics and each data byte range has a single owner at a time
// (the writer before publishing head, the reader before publishing tail).
unsafe impl Send for Mapping {}
unsafe impl Sync for Mapping {}

/// Handle to a mapped window file.
#[derive(Clone)]
pub struct DpmWindow {
    map: Arc<Mapping>,
}

fn token() -> u64 {
    static NEXT: AtomicU64 = AtomicU64::new(1);
    ((std::process::id() as u64) << 32) | (NEXT.fetch_add(1, Ordering::Relaxed) & 0xffff_ffff)
}

impl DpmWindow {
    /// Creates (or truncates) the window file with empty rings.
    pub fn create(path: &Path) -> Result<Self, DpmError> {
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(path)?;
        file.set_len(WINDOW_SIZE as u64)?;
        Self::map(&file)
    }

    /// Maps an existing window file.
    pub fn open(path: &Path) -> Result<Self, DpmError> {
        let file = OpenOptions::new().read(true).write(true).open(path)?;
        let len = file.metadata()?.len();
        if len != WINDOW_SIZE as u64 {
            return Err(DpmError::Size(len));
        }
        Self::map(&file)
    }

    fn map(file: &std::fs::File) -> Result<Self, DpmError> {
        // SAFETY: the file is not truncated while mapped by cooperating users.
        let mut map = unsafe { MmapMut::map_mut(file)? };
        let base = map.as_mut_ptr();
        Ok(Self {
            map: Arc::new(Mapping { _map: map, base }),
        })
    }

    fn word(&self, ring: Ring, off: usize) -> &AtomicU64 {
        let at = ring as usize * RING_SIZE + off;
        debug_assert!(at + 8 <= WINDOW_SIZE && at.is_multiple_of(8));
        // SAFETY: in bounds and 8-byte aligned (the mapping is page aligned).
        unsafe { &*(self.map.base.add(at) as *const AtomicU64) }
    }

    fn data(&self, ring: Ring) -> *mut u8 {
        // SAFETY: in bounds.
        unsafe { self.map.base.add(ring as usize * RING_SIZE + HEADER) }
    }

    /// Bytes written but not yet consumed.
    pub fn fill(&self, ring: Ring) -> usize {
        let head = self.word(ring, HEAD).load(Ordering::Acquire);
        let tail = self.word(ring, TAIL).load(Ordering::Acquire);
        (head - tail) as usize
    }

    pub fn writer(&self, ring: Ring) -> Result<RingWriter, DpmError> {
        let t = token();
        self.word(ring, WRITER)
            .compare_exchange(0, t, Ordering::AcqRel, Ordering::Acquire)
            .map_err(|_| DpmError::WriterBusy)?;
        Ok(RingWriter {
            window: self.clone(),
            ring,
        })
    }

    pub fn reader(&self, ring: Ring) -> Result<RingReader, DpmError> {
        let t = token();
        self.word(ring, READER)
            .compare_exchange(0, t, Ordering::AcqRel, Ordering::Acquire)
            .map_err(|_| DpmError::ReaderBusy)?;
        Ok(RingReader {
            window: self.clone(),
            ring,
        })
    }

    fn copy_in(&self, ring: Ring, pos: u64, bytes: &[u8]) {
        let start = (pos % RING_DATA as u64) as usize;
        let first = bytes.len().min(RING_DATA - start);
        let data = self.data(ring);
        // SAFETY: both ranges lie inside the data area; this range is owned
        // by the writer until head moves past it.
        unsafe {
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), data.add(start), first);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().add(first), data, bytes.len() - first);
        }
    }

    fn copy_out(&self, ring: Ring, pos: u64, out: &mut [u8]) {
        let start = (pos % RING_DATA as u64) as usize;
        let first = out.len().min(RING_DATA - start);
        let data = self.data(ring);
        // SAFETY: as in copy_in, owned by the reader until tail moves past it.
        unsafe {
            std::ptr::copy_nonoverlapping(data.add(start), out.as_mut_ptr(), first);
            std::ptr::copy_nonoverlapping(data, out.as_mut_ptr().add(first), out.len() - first);
        }
    }
}

fn backoff(spins: &mut u32) {
    *spins += 1;
    if *spins < 64 {
        std::thread::yield_now();
    } else {
        std::thread::sleep(Duration::from_micros(200));
    }
}

fn expired(deadline: Option<Instant>) -> bool {
    deadline.is_some_and(|d| Instant::now() >= d)
}

/// Sole writer of one ring; releases its claim on drop.
pub struct RingWriter {
    window: DpmWindow,
    ring: Ring,
}

impl RingWriter {
    /// Writes `msg`, blocking while the ring is full.
    pub fn write_message(&mut self, msg: &[u8]) -> Result<usize, DpmError> {
        self.write_message_timeout(msg, None)
    }

    /// Returns the number of chunks used.
    pub fn write_message_timeout(
        &mut self,
        msg: &[u8],
        timeout: Option<Duration>,
    ) -> Result<usize, DpmError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let w = &self.window;
        let mut rest = msg;
        let mut chunks = 0;
        let mut spins = 0;
        loop {
            let head = w.word(self.ring, HEAD).load(Ordering::Acquire);
            let tail = w.word(self.ring, TAIL).load(Ordering::Acquire);
            let free = RING_DATA - (head - tail) as usize;
            if free <= CHUNK_HEADER && !(rest.is_empty() && free == CHUNK_HEADER) {
                if expired(deadline) {
                    return Err(DpmError::Timeout);
                }
                backoff(&mut spins);
                continue;
            }
            spins = 0;
            let n = rest.len().min(free - CHUNK_HEADER);
            let last = n == rest.len();
            let mut header = [0u8; CHUNK_HEADER];
            header[..4].copy_from_slice(&(n as u32).to_le_bytes());
            header[4] = if last { FINAL } else { 0 };
            w.copy_in(self.ring, head, &header);
            w.copy_in(self.ring, head + CHUNK_HEADER as u64, &rest[..n]);
            w.word(self.ring, HEAD)
                .store(head + (CHUNK_HEADER + n) as u64, Ordering::Release);
            chunks += 1;
            rest = &rest[n..];
            if last {
                return Ok(chunks);
            }
        }
    }
}

impl Drop for RingWriter {
    fn drop(&mut self) {
        self.window
            .word(self.ring, WRITER)
            .store(0, Ordering::Release);
    }
}

/// Sole reader of one ring; releases its claim on drop.
pub struct RingReader {
    window: DpmWindow,
    ring: Ring,
}

impl RingReader {
    /// Blocks until a whole message has arrived.
    pub fn read_message(&mut self) -> Result<Vec<u8>, DpmError> {
        self.read_message_timeout(None)?.ok_or(DpmError::Timeout)
    }

    /// `Ok(None)` if no message starts before the timeout. Once the first
    /// chunk of a message is in, waits for the rest regardless.
    pub fn read_message_timeout(
        &mut self,
        timeout: Option<Duration>,
    ) -> Result<Option<Vec<u8>>, DpmError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let w = &self.window;
        let mut msg = Vec::new();
        let mut started = false;
        let mut spins = 0;
        loop {
            let head = w.word(self.ring, HEAD).load(Ordering::Acquire);
            let tail = w.word(self.ring, TAIL).load(Ordering::Acquire);
            if head == tail {
                if !started && expired(deadline) {
                    return Ok(None);
                }
                backoff(&mut spins);
                continue;
            }
            spins = 0;
            if ((head - tail) as usize) < CHUNK_HEADER {
                return Err(DpmError::Corrupt(format!(
                    "partial chunk header, fill {}",
                    head - tail
                )));
            }
            let mut header = [0u8; CHUNK_HEADER];
            w.copy_out(self.ring, tail, &mut header);
            let n = u32::from_le_bytes(header[..4].try_into().unwrap()) as usize;
            if CHUNK_HEADER + n > (head - tail) as usize {
                return Err(DpmError::Corrupt(format!(
                    "chunk of {n} bytes exceeds fill {}",
                    head - tail
                )));
            }
            let at = msg.len();
            msg.resize(at + n, 0);
            w.copy_out(self.ring, tail + CHUNK_HEADER as u64, &mut msg[at..]);
            w.word(self.ring, TAIL)
                .store(tail + (CHUNK_HEADER + n) as u64, Ordering::Release);
            started = true;
            if header[4] & FINAL != 0 {
                return Ok(Some(msg));
            }
        }
    }

    /// Discards everything currently queued.
    pub fn clear(&mut self) {
        let head = self.window.word(self.ring, HEAD).load(Ordering::Acquire);
        self.window
            .word(self.ring, TAIL)
            .store(head, Ordering::Release);
    }
}

impl Drop for RingReader {
    fn drop(&mut self) {
        self.window
            .word(self.ring, READER)
            .store(0, Ordering::Release);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn window() -> (tempfile::TempDir, DpmWindow) {
        let dir = tempfile::tempdir().unwrap();
        let w = DpmWindow::create(&dir.path().join("dpm")).unwrap();
        (dir, w)
    }

    #[test]
    fn layout() {
        assert_eq!(2 * RING_SIZE, 131_072);
        let (dir, _w) = window();
        assert_eq!(
            std::fs::metadata(dir.path().join("dpm")).unwrap().len(),
            131_072
        );
    }

    #[test]
    fn large_message_is_chunked() {
        let (_dir, w) = window();
        let msg: Vec<u8> = (0..200_000u32).map(|i| (i * 7 % 251) as u8).collect();
        let mut writer = w.writer(Ring::HostToKernel).unwrap();
        let mut reader = w.reader(Ring::HostToKernel).unwrap();
        let sent = msg.clone();
        let t = std::thread::spawn(move || writer.write_message(&sent).unwrap());
        let got = reader.read_message().unwrap();
        let chunks = t.join().unwrap();
        assert!(chunks >= 2, "{chunks}");
        assert!(chunks as usize >= 200_000usize.div_ceil(RING_DATA - CHUNK_HEADER));
        assert_eq!(got, msg);
    }

    #[test]
    fn empty_message_once() {
        let (_dir, w) = window();
        let mut writer = w.writer(Ring::KernelToHost).unwrap();
        let mut reader = w.reader(Ring::KernelToHost).unwrap();
        assert_eq!(writer.write_message(b"").unwrap(), 1);
        assert_eq!(
            reader.read_message_timeout(Some(Duration::ZERO)).unwrap(),
            Some(Vec::new())
        );
        assert_eq!(
            reader
                .read_message_timeout(Some(Duration::from_millis(5)))
                .unwrap(),
            None
        );
    }

    #[test]
    fn single_writer_and_reader() {
        let (dir, w) = window();
        let first = w.writer(Ring::HostToKernel).unwrap();
        assert!(matches!(
            w.writer(Ring::HostToKernel),
            Err(DpmError::WriterBusy)
        ));
        let other = DpmWindow::open(&dir.path().join("dpm")).unwrap();
        assert!(matches!(
            other.writer(Ring::HostToKernel),
            Err(DpmError::WriterBusy)
        ));
        assert!(other.writer(Ring::KernelToHost).is_ok());
        drop(first);
        assert!(other.writer(Ring::HostToKernel).is_ok());
        let _r = w.reader(Ring::HostToKernel).unwrap();
        assert!(matches!(
            other.reader(Ring::HostToKernel),
            Err(DpmError::ReaderBusy)
        ));
    }

    #[test]
    fn full_ring_times_out() {
        let (_dir, w) = window();
        let mut writer = w.writer(Ring::HostToKernel).unwrap();
        let big = vec![1u8; RING_DATA * 2];
        let r = writer.write_message_timeout(&big, Some(Duration::from_millis(20)));
        assert!(matches!(r, Err(DpmError::Timeout)));
        assert_eq!(w.fill(Ring::HostToKernel), RING_DATA);
    }

    #[test]
    fn open_rejects_wrong_size() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("short");
        std::fs::write(&p, [0u8; 100]).unwrap();
        assert!(matches!(DpmWindow::open(&p), Err(DpmError::Size(100))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn fifo_through_both_mappings(sizes in prop::collection::vec(0usize..150_000, 1..12)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("dpm");
            let host = DpmWindow::create(&path).unwrap();
            let kernel = DpmWindow::open(&path).unwrap();
            let msgs: Vec<Vec<u8>> = sizes
                .iter()
                .enumerate()
                .map(|(k, &n)| (0..n).map(|i| (i + k * 31) as u8).collect())
                .collect();
            let mut writer = host.writer(Ring::HostToKernel).unwrap();
            let sent = msgs.clone();
            let probe = kernel.clone();
            let t = std::thread::spawn(move || {
                for m in &sent {
                    writer.write_message(m).unwrap();
                    assert!(probe.fill(Ring::HostToKernel) <= RING_DATA);
                }
            });
            let mut reader = kernel.reader(Ring::HostToKernel).unwrap();
            for m in &msgs {
                let got = reader.read_message().unwrap();
                prop_assert_eq!(&got, m);
            }
            t.join().unwrap();
            prop_assert_eq!(kernel.fill(Ring::HostToKernel), 0);
        }
    }
}
