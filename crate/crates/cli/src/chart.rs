use beamctl_core::residents::Histogram;

/// Horizontal bar chart of the time-of-flight projection, `rows` channel
/// groups tall.
pub fn render(h: &Histogram, rows: usize, width: usize) -> String {
    let proj = h.tof_projection();
    let mut out = format!(
        "dims {:?}  total {}  monitor {}  live {:.1} s\n",
        h.dims,
        h.total(),
        h.monitor,
        h.live_time
    );
    if proj.is_empty() || rows == 0 {
        return out;
    }
    let group = proj.len().div_ceil(rows);
    let sums: Vec<(usize, usize, u64)> = proj
        .chunks(group)
        .enumerate()
        .map(|(i, c)| (i * group, i * group + c.len() - 1, c.iter().sum()))
        .collect();
    let max = sums.iter().map(|s| s.2).max().unwrap_or(0).max(1);
    for (lo, hi, n) in sums {
        let bar = (n as u128 * width as u128).div_ceil(max as u128) as usize;
        out.push_str(&format!("{lo:>5}-{hi:<5} {n:>10} |{}\n", "#".repeat(bar)));
    }
    out
}
