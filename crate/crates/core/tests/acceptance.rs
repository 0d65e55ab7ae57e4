//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use std::time::Duration;

use beamctl_core::clock::{format_iso, parse_iso, Micros, SimClock};
use beamctl_core::gateway::dpm::{DpmWindow, Ring, CHUNK_HEADER, RING_DATA, WINDOW_SIZE};
use beamctl_core::gateway::{Client, FaultModel, FaultProcess, Gateway, GatewayError, Transport};
use beamctl_core::kernel::KernelConfig;
use beamctl_core::residents::{Histogram, ProtocolRecord};
use beamctl_core::rtdb::{Db, Snapshot, VarPath, VarValue};
use beamctl_core::script::{self, ExecStatus, REFERENCE_SCRIPT};
use beamctl_core::supervisor::{FaultKind, Supervisor, SupervisorConfig};
use beamctl_core::viz::{self, CostModel, Mode, DEFAULT_SWEEP};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

// straight to the handle so the line shows without --nocapture
fn report(name: &str, ok: bool, detail: &str, started: Instant) {
    let _ = writeln!(
        std::io::stdout().lock(),
        "{} {name}: {detail} ({:.2} s)",
        if ok { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
}

const SEED: u64 = 2002;

type Files = BTreeMap<String, Vec<String>>;

/// Every protocol file under `root`, keyed by relative path.
fn protocol_files(root: &Path) -> Files {
    let mut out = Files::new();
    for dir in ["txt", "prot"] {
        let Ok(entries) = fs::read_dir(root.join(dir)) else {
            continue;
        };
        for e in entries.flatten() {
            let text = fs::read_to_string(e.path()).unwrap();
            out.insert(
                format!("{dir}/{}", e.file_name().to_string_lossy()),
                text.lines().map(str::to_string).collect(),
            );
        }
    }
    out
}

fn dat_files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    if let Ok(entries) = fs::read_dir(root.join("data")) {
        for e in entries.flatten() {
            out.insert(
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            );
        }
    }
    out
}

/// (statement index, virtual time, protocol files) at each statement start.
type Starts = Arc<Mutex<Vec<(usize, Micros, Files)>>>;

struct Run {
    dir: tempfile::TempDir,
    starts: Starts,
    status: ExecStatus,
    supervisor: Arc<Supervisor>,
}

fn run_corpus(crash_after: Option<usize>) -> Run {
    let dir = tempfile::tempdir().unwrap();
    let sup = Supervisor::boot(
        KernelConfig::standard(dir.path(), SEED),
        SimClock::new(),
        SupervisorConfig::default(),
    )
    .unwrap();
    let starts: Starts = Arc::default();
    {
        let starts = starts.clone();
        let root = dir.path().to_path_buf();
        let clock = sup.clock().clone();
        sup.set_observer(Arc::new(move |i| {
            starts
                .lock()
                .unwrap()
                .push((i, clock.now(), protocol_files(&root)));
        }));
    }
    sup.load_script(REFERENCE_SCRIPT).unwrap();
    sup.kernel().set_crash_after(crash_after);
    sup.start(0).unwrap();
    let exec = sup.wait_with_recovery().unwrap();
    sup.shutdown();
    Run {
        dir,
        starts,
        status: exec.status,
        supervisor: sup,
    }
}

/// Lines of `fin` written after the moment `at` was captured.
fn suffix<'a>(fin: &'a [String], at: Option<&Vec<String>>) -> &'a [String] {
    match at {
        Some(prefix) if fin.starts_with(prefix) => &fin[prefix.len()..],
        _ => fin,
    }
}

fn shift_back(line: &str, delta: Micros) -> String {
    let mut r = ProtocolRecord::parse(line).expect("protocol record");
    let t = parse_iso(&r.wall_time).unwrap() - chrono::Duration::microseconds(delta as i64);
    r.wall_time = format_iso(t);
    r.line()
}

fn restart_delays(log: &Path) -> Vec<i64> {
    let text = fs::read_to_string(log).unwrap();
    let mut hung = None;
    let mut out = Vec::new();
    for line in text.lines() {
        let (t, ev) = line.split_once('\t').unwrap();
        let t = parse_iso(t).unwrap();
        if ev.starts_with("hung") {
            hung = Some(t);
        } else if ev.starts_with("restart") {
            out.push((t - hung.take().unwrap()).num_microseconds().unwrap());
        }
    }
    out
}

#[test]
fn crash_resume_sweep() {
    let started = Instant::now();
    let program = script::parse(REFERENCE_SCRIPT).unwrap();
    let reference = run_corpus(None);
    assert_eq!(reference.status, ExecStatus::Finished);
    let ref_starts = reference.starts.lock().unwrap().clone();
    let ref_final = protocol_files(reference.dir.path());
    let ref_dat = dat_files(reference.dir.path());

    let mut failures = Vec::new();
    let mut compared = 0usize;
    for k in 0..program.len() {
        let crashed = run_corpus(Some(k));
        let c = script::resume_point(&program, Some(k));
        if crashed.status != ExecStatus::Finished {
            failures.push(format!("k={k}: status {:?}", crashed.status));
            continue;
        }
        let (_, t_ref, files_ref) = ref_starts.iter().find(|s| s.0 == c).unwrap();
        let starts = crashed.starts.lock().unwrap();
        let (_, t_act, files_act) = starts.iter().rev().find(|s| s.0 == c).unwrap();
        let delta = t_act - t_ref;
        let act_final = protocol_files(crashed.dir.path());
        for (name, lines) in &ref_final {
            let expected = suffix(lines, files_ref.get(name));
            let Some(act_lines) = act_final.get(name) else {
                failures.push(format!("k={k}: {name} missing"));
                continue;
            };
            let got: Vec<String> = suffix(act_lines, files_act.get(name))
                .iter()
                .map(|l| shift_back(l, delta))
                .collect();
            compared += got.len();
            if got != expected {
                failures.push(format!(
                    "k={k} c={c}: {name} differs ({} vs {} records)",
                    got.len(),
                    expected.len()
                ));
            }
        }
        if dat_files(crashed.dir.path()) != ref_dat {
            failures.push(format!("k={k}: spectra differ"));
        }
        let delays = restart_delays(crashed.supervisor.log_path());
        if delays != vec![1_600_000] {
            failures.push(format!("k={k}: restart delays {delays:?}"));
        }
        if crashed.supervisor.watchdog().crash_count() != 1 {
            failures.push(format!("k={k}: crash count"));
        }
    }
    let ok = failures.is_empty() && compared > 0;
    report(
        "crash-resume sweep",
        ok,
        &format!(
            "{} crash points, {compared} resumed records compared, {} mismatches{}",
            program.len(),
            failures.len(),
            failures
                .first()
                .map(|f| format!(", first: {f}"))
                .unwrap_or_default()
        ),
        started,
    );
    assert!(ok, "{failures:#?}");
}

#[test]
fn corpus_parse() {
    let started = Instant::now();
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus/yumo_pb160502a.snx");
    let text = fs::read_to_string(path).unwrap();
    let (ok, detail) = match script::parse(&text) {
        Ok(program) => {
            let rendered = program.render();
            match script::parse(&rendered) {
                Ok(again) => (
                    again.same_structure(&program),
                    format!(
                        "{} statements, re-parse of rendering structurally identical",
                        program.len()
                    ),
                ),
                Err(e) => (false, format!("rendering does not re-parse: {e}")),
            }
        }
        Err(e) => (false, format!("parse error: {e}")),
    };
    let ok = ok && started.elapsed() < Duration::from_secs(1);
    report("corpus parse", ok, &detail, started);
    assert!(ok, "{detail}");
}

fn random_segment(rng: &mut ChaCha8Rng) -> String {
    const FIRST: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ_";
    const REST: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ_0123456789-";
    let len = rng.random_range(1..10);
    (0..len)
        .map(|i| {
            let set = if i == 0 { FIRST } else { REST };
            set[rng.random_range(0..set.len())] as char
        })
        .collect()
}

fn random_value(rng: &mut ChaCha8Rng) -> VarValue {
    match rng.random_range(0..4) {
        0 => VarValue::Int(match rng.random_range(0..4) {
            0 => i64::MIN,
            1 => i64::MAX,
            _ => rng.random(),
        }),
        1 => VarValue::Real(match rng.random_range(0..6) {
            0 => -0.0,
            1 => f64::MIN_POSITIVE,
            2 => f64::MAX,
            3 => 5e-324,
            _ => rng.random_range(-1e6..1e6) * 10f64.powi(rng.random_range(-30..30)),
        }),
        2 => {
            const PIECES: &[&str] = &[
                "a", " ", "\t", "\n", "\r", "\\", "ü", "温度", "#", ";", "@x", "\\t", "",
            ];
            VarValue::Text(
                (0..rng.random_range(0..12))
                    .map(|_| PIECES[rng.random_range(0..PIECES.len())])
                    .collect(),
            )
        }
        _ => VarValue::IntArray((0..rng.random_range(0..8)).map(|_| rng.random()).collect()),
    }
}

#[test]
fn snapshot_round_trip() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5a17);
    let mut failures = Vec::new();
    let mut vars_checked = 0;
    for state in 0..1000 {
        let db = Db::new(SimClock::new());
        db.clock().advance(rng.random_range(0..1_000_000_000_000));
        for _ in 0..rng.random_range(0..40) {
            let depth = rng.random_range(1..5);
            let path =
                VarPath::from_segments((0..depth).map(|_| random_segment(&mut rng))).unwrap();
            // an existing variable keeps its type, so write a fresh path on mismatch
            let _ = db.set_var(&path, random_value(&mut rng), "fuzz");
        }
        let saved = db.save_snapshot();
        let bytes = saved.to_bytes();
        let restored = Db::new(SimClock::new());
        restored.clock().advance(db.clock().now());
        match Snapshot::from_bytes(&bytes).and_then(|s| restored.restore_snapshot(&s)) {
            Ok(()) => {}
            Err(e) => {
                failures.push(format!("state {state}: {e}"));
                continue;
            }
        }
        let pairs = |d: &Db| -> Vec<(String, VarValue)> {
            d.list_vars(None)
                .iter()
                .map(|p| (p.as_str().to_string(), d.get_var(p).unwrap().value))
                .collect()
        };
        let (a, b) = (pairs(&db), pairs(&restored));
        vars_checked += a.len();
        // bitwise comparison catches -0.0 and lost precision
        let same = a.len() == b.len()
            && a.iter().zip(&b).all(|((pa, va), (pb, vb))| {
                pa == pb
                    && match (va, vb) {
                        (VarValue::Real(x), VarValue::Real(y)) => x.to_bits() == y.to_bits(),
                        _ => va == vb,
                    }
            });
        if !same {
            failures.push(format!("state {state}: variables differ"));
        }
        if restored.save_snapshot().to_bytes() != bytes {
            failures.push(format!("state {state}: snapshot bytes differ"));
        }
    }
    let ok = failures.is_empty() && started.elapsed() < Duration::from_secs(5);
    report(
        "snapshot round-trip",
        ok,
        &format!(
            "1000 states, {vars_checked} variables, {} failures",
            failures.len()
        ),
        started,
    );
    assert!(ok, "{failures:#?}");
}

fn corpus_outputs(blocked: bool) -> (BTreeMap<String, Vec<u8>>, Files, bool) {
    let dir = tempfile::tempdir().unwrap();
    let sup = common::boot(dir.path(), SEED);
    let gateway = Gateway::new(sup.clone());
    let server = gateway.serve_stream("127.0.0.1:0").unwrap();
    let transport = Transport::Stream(server.local_addr().unwrap().to_string());
    let mut client = Client::connect(&transport).unwrap();
    let mut remote_lost = false;
    if blocked {
        client
            .call("inject_fault", json!({"kind": "nonfatal"}))
            .unwrap();
    }
    let exec = std::thread::scope(|s| {
        let run = s.spawn(|| sup.run_script(REFERENCE_SCRIPT, 0).unwrap());
        if blocked {
            client.set_timeout(Duration::from_millis(200));
            remote_lost = matches!(client.call("status", json!({})), Err(GatewayError::Timeout));
        }
        run.join().unwrap()
    });
    assert_eq!(exec.status, ExecStatus::Finished);
    let still_blocked = !blocked || sup.io_blocked();
    server.stop();
    sup.shutdown();
    (
        dat_files(dir.path()),
        protocol_files(dir.path()),
        remote_lost && still_blocked,
    )
}

#[test]
fn nonfatal_isolation() {
    let started = Instant::now();
    let (ref_dat, ref_prot, _) = corpus_outputs(false);
    let (dat, prot, lost) = corpus_outputs(true);
    let ok = !ref_dat.is_empty()
        && dat == ref_dat
        && prot == ref_prot
        && lost
        && started.elapsed() < Duration::from_secs(10);
    report(
        "nonfatal isolation",
        ok,
        &format!(
            "{} .dat files identical: {}, protocol files identical: {}, remote control lost while blocked: {lost}",
            ref_dat.len(),
            dat == ref_dat,
            prot == ref_prot
        ),
        started,
    );
    assert!(ok);
}

#[test]
fn fault_rate_calibration() {
    let started = Instant::now();
    let days = 28.0;
    let horizon = (days * 86_400e6) as Micros;
    let (mut nonfatal, mut fatal) = (0usize, 0usize);
    for seed in 0..100 {
        let model = FaultModel {
            seed,
            ..FaultModel::default()
        };
        for e in FaultProcess::new(&model, 0).drain(horizon) {
            match e.kind {
                FaultKind::Nonfatal => nonfatal += 1,
                FaultKind::Fatal => fatal += 1,
            }
        }
    }
    let per_day = nonfatal as f64 / (100.0 * days);
    let per_week = fatal as f64 / (100.0 * days / 7.0);
    let ok = (per_day - 1.0).abs() <= 0.2
        && (per_week - 1.0).abs() <= 0.2
        && started.elapsed() < Duration::from_secs(10);
    report(
        "fault-rate calibration",
        ok,
        &format!("nonfatal {per_day:.3}/day, fatal {per_week:.3}/week over 100 seeds x 28 days"),
        started,
    );
    assert!(ok);
}

/// Block sums computed from cell coordinates.
fn rebin_oracle(h: &Histogram, factors: &[usize]) -> Vec<u64> {
    let out_dims: Vec<usize> = h.dims.iter().zip(factors).map(|(d, f)| d / f).collect();
    let mut out = vec![0u64; out_dims.iter().product()];
    for (flat, &c) in h.counts.iter().enumerate() {
        let mut rem = flat;
        let mut coords = vec![0; h.dims.len()];
        for a in (0..h.dims.len()).rev() {
            coords[a] = rem % h.dims[a];
            rem /= h.dims[a];
        }
        let o = coords
            .iter()
            .zip(factors)
            .zip(&out_dims)
            .fold(0, |acc, ((x, f), d)| acc * d + x / f);
        out[o] += c;
    }
    out
}

#[test]
fn codec_round_trip() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0dec);
    let mut failures = Vec::new();
    let cases = 400;
    for case in 0..cases {
        let rank = rng.random_range(1..4);
        let dims: Vec<usize> = (0..rank).map(|_| 4 * rng.random_range(1..5)).collect();
        let cells: usize = dims.iter().product();
        let density = rng.random_range(0.0..1.0);
        let counts = (0..cells)
            .map(|_| {
                if rng.random_bool(density) {
                    match rng.random_range(0..3) {
                        0 => rng.random_range(1..4),
                        1 => rng.random_range(1..100_000),
                        _ => rng.random::<u64>() >> 12,
                    }
                } else {
                    0
                }
            })
            .collect();
        let h = Histogram {
            dims: dims.clone(),
            counts,
            monitor: rng.random(),
            live_time: rng.random(),
        };
        let factors: Vec<usize> = (0..rank)
            .map(|_| [1, 2, 4][rng.random_range(0..3)])
            .collect();
        let c = viz::compress(&h, &factors).unwrap();
        let back =
            viz::decompress(&viz::CompressedSpectrum::from_bytes(&c.to_bytes()).unwrap()).unwrap();
        let rebinned = viz::rebin(&h, &factors).unwrap();
        if back != rebinned {
            failures.push(format!("case {case}: decompress(compress) != rebin"));
        }
        if rebinned.counts != rebin_oracle(&h, &factors) {
            failures.push(format!(
                "case {case}: rebin disagrees with coordinate oracle"
            ));
        }
        if rebinned.total() != h.total() {
            failures.push(format!("case {case}: sum not conserved"));
        }
    }
    let ok = failures.is_empty() && started.elapsed() < Duration::from_secs(5);
    report(
        "codec round trip",
        ok,
        &format!(
            "{cases} random histograms, factors in {{1,2,4}}, {} failures",
            failures.len()
        ),
        started,
    );
    assert!(ok, "{failures:#?}");
}

fn golden_values() -> BTreeMap<String, f64> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/viz_golden.txt");
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.parse().unwrap()))
        .collect()
}

#[test]
fn crossover_golden() {
    let started = Instant::now();
    let golden = golden_values();
    let h = viz::golden_fixture();
    let cost = CostModel::default();
    let latency = 0.001;
    let bench = viz::crossover_benchmark(&h, &DEFAULT_SWEEP, latency, &cost).unwrap();
    let wins: Vec<bool> = bench
        .rows
        .iter()
        .map(|r| r.compressed.total_time < r.direct.total_time)
        .collect();
    let changes = wins.windows(2).filter(|w| w[0] != w[1]).count();
    let crossover = bench.crossover.unwrap_or(f64::NAN);
    let below_ok = bench
        .rows
        .iter()
        .zip(&wins)
        .all(|(r, &w)| w == (r.bandwidth < crossover));

    // totals are prep + latency + bytes/bandwidth, so the curves meet where
    // the prep difference equals the wire-time difference
    let link = viz::LinkModel::new(1e6, latency).unwrap();
    let c = viz::transfer(&h, Mode::Compressed, &link, &cost);
    let d = viz::transfer(&h, Mode::Direct, &link, &cost);
    let analytic = (d.bytes_sent as f64 - c.bytes_sent as f64) / (c.prep_time - d.prep_time);

    let payload = viz::compress(&h, &[1, 1, 1]).unwrap().payload.len() as f64;
    let ok = changes == 1
        && below_ok
        && (crossover - analytic).abs() <= 1e-6 * analytic
        && (crossover - golden["crossover"]).abs() <= 0.1
        && payload == golden["payload_bytes"]
        && ((8 * h.cells()) as f64 / payload - golden["compression_ratio"]).abs() < 1e-6
        && started.elapsed() < Duration::from_secs(5);
    report(
        "crossover",
        ok,
        &format!(
            "one crossover at {crossover:.1} B/s (analytic {analytic:.1}, golden {}), compressed wins below, direct above",
            golden["crossover"]
        ),
        started,
    );
    assert!(ok, "{}", bench.to_tsv());
}

#[test]
fn dual_port_transport() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dpm.win");
    let host = DpmWindow::create(&path).unwrap();
    let kernel = DpmWindow::open(&path).unwrap();
    let size_ok =
        fs::metadata(&path).unwrap().len() == WINDOW_SIZE as u64 && WINDOW_SIZE == 131_072;
    let msg: Vec<u8> = (0..200_000u32)
        .map(|i| (i.wrapping_mul(2_654_435_761) >> 24) as u8)
        .collect();
    let mut writer = host.writer(Ring::HostToKernel).unwrap();
    let sent = msg.clone();
    let w = std::thread::spawn(move || writer.write_message(&sent).unwrap());
    let got = kernel
        .reader(Ring::HostToKernel)
        .unwrap()
        .read_message()
        .unwrap();
    let chunks = w.join().unwrap();
    let min_chunks = msg.len().div_ceil(RING_DATA - CHUNK_HEADER);
    let chunk_ok = got == msg && chunks >= 2 && chunks >= min_chunks;

    let stream = common::replay_session(&common::serve_stream(SEED));
    let dpm = common::replay_session(&common::serve_dpm(SEED));
    let golden =
        fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join(common::SESSION_GOLDEN))
            .unwrap();
    let golden: Vec<String> = golden.lines().map(str::to_string).collect();
    let same = stream == dpm && stream == golden && stream.len() == 50;
    let ok = size_ok && chunk_ok && same && started.elapsed() < Duration::from_secs(5);
    report(
        "dual-port transport",
        ok,
        &format!(
            "200000-byte message in {chunks} chunks, reassembled identical: {}; 50-request session stream == dpm == golden: {same}",
            got == msg
        ),
        started,
    );
    assert!(ok);
}
