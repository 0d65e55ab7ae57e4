//! Timing model for compressed versus direct spectrum transfer.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::codec::{compress, direct};
use super::VizError;
use crate::residents::{Histogram, SpectrumModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Compressed,
    Direct,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Compressed => "compressed",
            Mode::Direct => "direct",
        })
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "compressed" => Ok(Mode::Compressed),
            "direct" => Ok(Mode::Direct),
            _ => Err(format!(
                "unknown mode {s:?} (expected compressed or direct)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    /// Bytes per second; must be positive.
    pub bandwidth: f64,
    /// Seconds per transfer.
    pub latency: f64,
}

impl LinkModel {
    pub fn new(bandwidth: f64, latency: f64) -> Option<Self> {
        (bandwidth > 0.0 && bandwidth.is_finite() && latency >= 0.0)
            .then_some(Self { bandwidth, latency })
    }
}

/// Simulated CPU cost of the acquisition side, seconds per input cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Copying one cell into the outgoing buffer.
    pub serialize_per_cell: f64,
    /// Scanning one empty cell while compressing.
    pub compress_zero_cell: f64,
    /// Encoding one nonzero cell.
    pub compress_nonzero_cell: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            serialize_per_cell: 0.02e-6,
            compress_zero_cell: 0.01e-6,
            compress_nonzero_cell: 5.0e-6,
        }
    }
}

impl CostModel {
    fn prep(&self, h: &Histogram, mode: Mode) -> f64 {
        match mode {
            Mode::Direct => self.serialize_per_cell * h.cells() as f64,
            Mode::Compressed => {
                let nonzero = h.counts.iter().filter(|&&c| c != 0).count();
                let zero = h.cells() - nonzero;
                self.compress_zero_cell * zero as f64 + self.compress_nonzero_cell * nonzero as f64
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub mode: Mode,
    pub bytes_sent: u64,
    pub prep_time: f64,
    /// Time on the wire, `bytes_sent / bandwidth`.
    pub transfer_time: f64,
    pub total_time: f64,
}

impl TransferReport {
    fn new(mode: Mode, bytes_sent: u64, prep_time: f64, link: &LinkModel) -> Self {
        let transfer_time = bytes_sent as f64 / link.bandwidth;
        Self {
            mode,
            bytes_sent,
            prep_time,
            transfer_time,
            total_time: prep_time + link.latency + transfer_time,
        }
    }
}

fn bytes_for(h: &Histogram, mode: Mode) -> u64 {
    let c = match mode {
        Mode::Direct => direct(h),
        Mode::Compressed => {
            compress(h, &vec![1; h.dims.len()]).expect("unit factors always divide")
        }
    };
    (c.header_len() + c.payload.len()) as u64
}

/// Prepares and sends `h` once over `link`.
pub fn transfer(h: &Histogram, mode: Mode, link: &LinkModel, cost: &CostModel) -> TransferReport {
    TransferReport::new(mode, bytes_for(h, mode), cost.prep(h, mode), link)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub bandwidth: f64,
    pub compressed: TransferReport,
    pub direct: TransferReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub rows: Vec<BenchRow>,
    /// Bandwidth where the total-time curves cross; `None` when one mode
    /// wins across the whole sweep.
    pub crossover: Option<f64>,
}

impl Benchmark {
    /// The faster mode at the lowest and highest bandwidth.
    pub fn winners(&self) -> (Mode, Mode) {
        let w = |r: &BenchRow| {
            if r.compressed.total_time < r.direct.total_time {
                Mode::Compressed
            } else {
                Mode::Direct
            }
        };
        (w(&self.rows[0]), w(self.rows.last().unwrap()))
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("bandwidth\tmode\tbytes\tprep\ttransfer\ttotal\n");
        for row in &self.rows {
            for r in [&row.compressed, &row.direct] {
                let _ = writeln!(
                    out,
                    "{:.0}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}",
                    row.bandwidth, r.mode, r.bytes_sent, r.prep_time, r.transfer_time, r.total_time
                );
            }
        }
        match self.crossover {
            Some(b) => {
                let _ = writeln!(out, "crossover={b:.1}");
            }
            None => out.push_str("crossover=none\n"),
        }
        out
    }
}

/// 10 KB/s to 100 MB/s, four points per decade.
pub const DEFAULT_SWEEP: [f64; 17] = [
    1.0e4,
    1.778_279_41e4,
    3.162_277_66e4,
    5.623_413_25e4,
    1.0e5,
    1.778_279_41e5,
    3.162_277_66e5,
    5.623_413_25e5,
    1.0e6,
    1.778_279_41e6,
    3.162_277_66e6,
    5.623_413_25e6,
    1.0e7,
    1.778_279_41e7,
    3.162_277_66e7,
    5.623_413_25e7,
    1.0e8,
];

/// Runs both modes at every bandwidth of an ascending sweep.
///
/// Totals are affine in 1/bandwidth, so the crossover is found by linear
/// interpolation in 1/bandwidth between the bracketing sweep points.
pub fn crossover_benchmark(
    h: &Histogram,
    sweep: &[f64],
    latency: f64,
    cost: &CostModel,
) -> Result<Benchmark, VizError> {
    if sweep.len() < 2 || sweep.windows(2).any(|w| w[0] >= w[1]) || sweep[0] <= 0.0 || latency < 0.0
    {
        return Err(VizError::BadSweep(sweep.to_vec()));
    }
    let modes = [Mode::Compressed, Mode::Direct];
    let [bc, bd] = modes.map(|m| bytes_for(h, m));
    let [pc, pd] = modes.map(|m| cost.prep(h, m));
    let rows: Vec<BenchRow> = sweep
        .iter()
        .map(|&bandwidth| {
            let link = LinkModel { bandwidth, latency };
            BenchRow {
                bandwidth,
                compressed: TransferReport::new(Mode::Compressed, bc, pc, &link),
                direct: TransferReport::new(Mode::Direct, bd, pd, &link),
            }
        })
        .collect();
    let diff = |r: &BenchRow| r.compressed.total_time - r.direct.total_time;
    let mut crossover = None;
    for w in rows.windows(2) {
        let (d0, d1) = (diff(&w[0]), diff(&w[1]));
        if d0 == 0.0 {
            crossover = Some(w[0].bandwidth);
            break;
        }
        if (d0 < 0.0) != (d1 < 0.0) || d1 == 0.0 {
            let (x0, x1) = (1.0 / w[0].bandwidth, 1.0 / w[1].bandwidth);
            let x = x0 + (x1 - x0) * d0 / (d0 - d1);
            crossover = Some(1.0 / x);
            break;
        }
    }
    Ok(Benchmark { rows, crossover })
}

/// Seeded 64×64×256 PSD spectrum with one Gaussian peak over a flat
/// background, used as the reference input of the transfer study.
pub fn golden_fixture() -> Histogram {
    static FIXTURE: OnceLock<Histogram> = OnceLock::new();
    FIXTURE.get_or_init(synthesize_fixture).clone()
}

fn synthesize_fixture() -> Histogram {
    let model = SpectrumModel {
        center: vec![31.5, 31.5, 100.0],
        sigma: vec![8.0, 8.0, 20.0],
        peak_fraction: 0.8,
    };
    let mut h = model.synthesize(&[64, 64, 256], 400_000, 160_502);
    h.monitor = 40_000;
    h.live_time = 1000.0;
    h
}

/// Same shape as [`golden_fixture`], every count distinct and too large
/// for the codec to shrink.
pub fn incompressible_fixture() -> Histogram {
    let mut h = Histogram::zeros(&[64, 64, 256]);
    for (i, c) in h.counts.iter_mut().enumerate() {
        *c = (1 << 63) + i as u64;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn report_identity() {
        let h = golden_fixture();
        let cost = CostModel::default();
        for mode in [Mode::Compressed, Mode::Direct] {
            for bw in [1e4, 1e6, 1e9] {
                let link = LinkModel::new(bw, 0.003).unwrap();
                let r = transfer(&h, mode, &link, &cost);
                let expect = r.prep_time + link.latency + r.bytes_sent as f64 / link.bandwidth;
                assert!((r.total_time - expect).abs() <= 4.0 * f64::EPSILON * expect);
            }
        }
    }

    #[test]
    fn direct_bytes_are_raw_size() {
        let h = golden_fixture();
        let link = LinkModel::new(1e6, 0.0).unwrap();
        let r = transfer(&h, Mode::Direct, &link, &CostModel::default());
        let header = 5 + 6 * 4 + 8 * 3 + 1 + 8 + 8;
        assert_eq!(r.bytes_sent, (header + 8 * 64 * 64 * 256) as u64);
        assert!((r.prep_time - 0.02e-6 * (64.0 * 64.0 * 256.0)).abs() < 1e-12);
    }

    #[test]
    fn fixture_favours_compression_only_when_slow() {
        let h = golden_fixture();
        let cost = CostModel::default();
        let slow = LinkModel::new(1e4, 0.001).unwrap();
        let fast = LinkModel::new(1e9, 0.001).unwrap();
        let total = |m, l: &LinkModel| transfer(&h, m, l, &cost).total_time;
        assert!(total(Mode::Compressed, &slow) < total(Mode::Direct, &slow));
        assert!(total(Mode::Direct, &fast) < total(Mode::Compressed, &fast));
    }

    #[test]
    fn empty_histogram_sends_header_only() {
        let h = Histogram::zeros(&[0, 0]);
        let link = LinkModel::new(1e6, 0.0).unwrap();
        let c = transfer(&h, Mode::Compressed, &link, &CostModel::default());
        let d = transfer(&h, Mode::Direct, &link, &CostModel::default());
        let header = (5 + 6 * 4 + 8 * 2 + 1 + 8 + 8) as u64;
        assert_eq!((c.bytes_sent, d.bytes_sent), (header, header));
    }

    #[test]
    fn degenerate_sweeps() {
        let cost = CostModel::default();
        let zero = Histogram::zeros(&[64, 64, 256]);
        let b = crossover_benchmark(&zero, &DEFAULT_SWEEP, 0.001, &cost).unwrap();
        assert_eq!(b.crossover, None);
        assert_eq!(b.winners(), (Mode::Compressed, Mode::Compressed));
        assert!(b.to_tsv().ends_with("crossover=none\n"));

        let noisy = incompressible_fixture();
        let c = compress(&noisy, &[1, 1, 1]).unwrap();
        assert!(c.payload.len() >= 8 * noisy.cells());
        let b = crossover_benchmark(&noisy, &DEFAULT_SWEEP, 0.001, &cost).unwrap();
        assert_eq!(b.crossover, None);
        assert_eq!(b.winners(), (Mode::Direct, Mode::Direct));

        assert!(crossover_benchmark(&zero, &[1e6], 0.0, &cost).is_err());
        assert!(crossover_benchmark(&zero, &[1e6, 1e5], 0.0, &cost).is_err());
    }

    #[test]
    fn tsv_layout() {
        let b = crossover_benchmark(
            &golden_fixture(),
            &DEFAULT_SWEEP,
            0.001,
            &CostModel::default(),
        )
        .unwrap();
        let tsv = b.to_tsv();
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines[0], "bandwidth\tmode\tbytes\tprep\ttransfer\ttotal");
        assert_eq!(lines.len(), 1 + 2 * DEFAULT_SWEEP.len() + 1);
        assert!(lines[1].starts_with("10000\tcompressed\t"));
        assert!(lines.last().unwrap().starts_with("crossover="));
    }

    proptest! {
        #[test]
        fn sign_changes_at_most_once(
            counts in prop::collection::vec(prop_oneof![3 => Just(0u64), 1 => 0u64..100_000], 64..512),
            nz in 0.05e-6..50e-6f64,
            latency in 0.0..0.1f64,
        ) {
            let h = Histogram { dims: vec![counts.len()], counts, monitor: 0, live_time: 0.0 };
            let cost = CostModel { compress_nonzero_cell: nz, ..CostModel::default() };
            let sweep: Vec<f64> = (0..40).map(|k| 1e2 * 10f64.powf(k as f64 / 5.0)).collect();
            let b = crossover_benchmark(&h, &sweep, latency, &cost).unwrap();
            let signs: Vec<bool> = b.rows.iter().map(|r| r.compressed.total_time < r.direct.total_time).collect();
            let changes = signs.windows(2).filter(|w| w[0] != w[1]).count();
            prop_assert!(changes <= 1);
            // compressed winning at b implies winning below b
            if let Some(last) = signs.iter().rposition(|&s| s) {
                prop_assert!(signs[..=last].iter().all(|&s| s));
            }
        }
    }
}
