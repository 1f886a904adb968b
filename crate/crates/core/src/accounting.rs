//! Logical allocation ledger.
//!
//! Buffers are recorded where the library allocates them, by name and shape,
//! so the footprint of two pipelines can be compared deterministically
//! without measuring the process allocator. Bytes are always
//! `rows * cols * 4`.

use std::fmt;
use std::io;
use std::sync::{Arc, Mutex};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Forward,
    Backward,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Forward => "forward",
            Self::Backward => "backward",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LedgerEntry {
    pub buffer: String,
    pub phase: Phase,
    pub rows: usize,
    pub cols: usize,
    pub bytes: usize,
}

/// Handle returned by [`AllocationLedger::record`], used to release the
/// buffer again.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BufferId(usize);

#[derive(Debug, Default)]
struct State {
    entries: Vec<LedgerEntry>,
    live: Vec<bool>,
    live_bytes: usize,
    peak_bytes: usize,
    forward_peak: usize,
    backward_peak: usize,
}

/// Shared, cloneable ledger handle. Clones record into the same ledger.
#[derive(Clone, Debug, Default)]
pub struct AllocationLedger {
    state: Arc<Mutex<State>>,
}

impl AllocationLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, buffer: impl Into<String>, rows: usize, cols: usize, phase: Phase) -> BufferId {
        let mut s = self.state.lock().unwrap();
        let bytes = rows * cols * std::mem::size_of::<f32>();
        s.entries.push(LedgerEntry {
            buffer: buffer.into(),
            phase,
            rows,
            cols,
            bytes,
        });
        s.live.push(true);
        s.live_bytes += bytes;
        s.peak_bytes = s.peak_bytes.max(s.live_bytes);
        let live = s.live_bytes;
        match phase {
            Phase::Forward => s.forward_peak = s.forward_peak.max(live),
            Phase::Backward => s.backward_peak = s.backward_peak.max(live),
        }
        BufferId(s.entries.len() - 1)
    }

    /// Marks a buffer dead. Releasing twice is a no-op.
    pub fn release(&self, id: BufferId) {
        let mut s = self.state.lock().unwrap();
        if std::mem::replace(&mut s.live[id.0], false) {
            s.live_bytes -= s.entries[id.0].bytes;
        }
    }

    pub fn entries(&self) -> Vec<LedgerEntry> {
        self.state.lock().unwrap().entries.clone()
    }

    pub fn entries_in(&self, phase: Phase) -> Vec<LedgerEntry> {
        self.entries().into_iter().filter(|e| e.phase == phase).collect()
    }

    /// Highest number of simultaneously live bytes seen so far.
    pub fn peak_bytes(&self) -> usize {
        self.state.lock().unwrap().peak_bytes
    }

    /// Highest live byte count reached while recording buffers of `phase`.
    pub fn phase_peak(&self, phase: Phase) -> usize {
        let s = self.state.lock().unwrap();
        match phase {
            Phase::Forward => s.forward_peak,
            Phase::Backward => s.backward_peak,
        }
    }

    pub fn live_bytes(&self) -> usize {
        self.state.lock().unwrap().live_bytes
    }

    pub fn total_bytes(&self, phase: Phase) -> usize {
        self.entries_in(phase).iter().map(|e| e.bytes).sum()
    }

    /// Writes `buffer,phase,rows,cols,bytes` CSV.
    pub fn write_csv<W: io::Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "buffer,phase,rows,cols,bytes")?;
        for e in self.entries() {
            writeln!(w, "{},{},{},{},{}", e.buffer, e.phase, e.rows, e.cols, e.bytes)?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("ledger CSV is ASCII")
    }
}
