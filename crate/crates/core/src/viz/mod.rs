//! Spectrum sampling, rebinning, lossless compression and the
//! compressed-versus-direct transfer study.

mod bench;
mod codec;

use thiserror::Error;

use crate::residents::{Histogram, HistogramMemory};

pub use bench::{
    crossover_benchmark, golden_fixture, incompressible_fixture, transfer, BenchRow, Benchmark,
    CostModel, LinkModel, Mode, TransferReport, DEFAULT_SWEEP,
};
pub use codec::{
    compress, decode_counts, decompress, direct, encode_counts, read_maks, write_maks,
    CompressedSpectrum, Encoding, MAKS_MAGIC,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VizError {
    #[error("bad rebin factors {factors:?} for dims {dims:?}")]
    BadFactors {
        dims: Vec<usize>,
        factors: Vec<usize>,
    },
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),
    #[error("bandwidth sweep must hold at least two ascending positive points, got {0:?}")]
    BadSweep(Vec<f64>),
}

/// Point-in-time copy of the DAQ histogram memory; `None` before the first
/// acquisition.
pub fn sample(memory: &HistogramMemory) -> Option<Histogram> {
    memory.sample()
}

/// Sums blocks of `factors` cells along each axis. Every factor must be at
/// least 1 and divide its extent.
pub fn rebin(h: &Histogram, factors: &[usize]) -> Result<Histogram, VizError> {
    let bad = || VizError::BadFactors {
        dims: h.dims.clone(),
        factors: factors.to_vec(),
    };
    if factors.len() != h.dims.len()
        || factors
            .iter()
            .zip(&h.dims)
            .any(|(&f, &d)| f == 0 || d % f != 0)
    {
        return Err(bad());
    }
    let out_dims: Vec<usize> = h.dims.iter().zip(factors).map(|(d, f)| d / f).collect();
    let mut out = Histogram::zeros(&out_dims);
    out.monitor = h.monitor;
    out.live_time = h.live_time;
    if factors.iter().all(|&f| f == 1) {
        out.counts.copy_from_slice(&h.counts);
        return Ok(out);
    }
    let n = h.dims.len();
    let mut idx = vec![0usize; n];
    for &c in &h.counts {
        let mut o = 0;
        for a in 0..n {
            o = o * out_dims[a] + idx[a] / factors[a];
        }
        out.counts[o] += c;
        // row-major increment
        for a in (0..n).rev() {
            idx[a] += 1;
            if idx[a] < h.dims[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::residents::{Acquisition, AcquisitionLimits, DaqParams};

    #[test]
    fn rebin_sums_blocks() {
        let h = Histogram {
            dims: vec![2, 4],
            counts: vec![1, 2, 3, 4, 5, 6, 7, 8],
            monitor: 3,
            live_time: 1.5,
        };
        let r = rebin(&h, &[1, 2]).unwrap();
        assert_eq!(r.dims, vec![2, 2]);
        assert_eq!(r.counts, vec![3, 7, 11, 15]);
        let r = rebin(&h, &[2, 4]).unwrap();
        assert_eq!(r.counts, vec![36]);
        assert_eq!((r.monitor, r.live_time), (3, 1.5));
        assert!(matches!(
            rebin(&h, &[1, 3]),
            Err(VizError::BadFactors { .. })
        ));
        assert!(rebin(&h, &[0, 1]).is_err());
        assert!(rebin(&h, &[1]).is_err());
    }

    #[test]
    fn sample_tracks_events() {
        let memory = HistogramMemory::default();
        assert!(sample(&memory).is_none());
        let limits = AcquisitionLimits {
            count_limit: 0,
            time_limit: 0.0,
        };
        Acquisition::new(DaqParams::default(), limits, 1, memory.clone());
        let h = sample(&memory).unwrap();
        assert_eq!(h.total(), 0);
        assert_eq!(h.cells(), 1024);

        let limits = AcquisitionLimits {
            count_limit: u64::MAX,
            time_limit: 20.0,
        };
        let mut acq = Acquisition::new(DaqParams::default(), limits, 9, memory.clone());
        for _ in 0..5 {
            acq.step();
            let a = sample(&memory).unwrap();
            let b = sample(&memory).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.total(), acq.events_generated());
        }
    }
}
