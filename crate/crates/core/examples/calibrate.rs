//! Sweeps the simulated device profile over reference workloads and prints
//! the statistics the default coefficients are tuned against.

use etune::counters::derive_counters;
use etune::measure::{idle_power_share, sim_true_power_and_latency, DeviceConfig};
use etune::opspace::{enumerate_space, OperatorSpec, Schedule, SpaceLimits, Tile};
use etune::stats::spearman;

fn main() {
    let dev = match std::env::args().nth(1) {
        Some(p) => DeviceConfig::load(p.as_ref()).expect("profile"),
        None => DeviceConfig::a100_like(),
    };
    let op: OperatorSpec = "mm:1,512,512,512".parse().unwrap();
    let s = Schedule { batch: Tile::UNIT, m: Tile::new(64, 4), n: Tile::new(64, 4), k_split: 64, unroll: 2, vector: 4 };
    let c = derive_counters(&op, &s, &dev).unwrap();
    let (p, l) = sim_true_power_and_latency(&c, &dev);
    println!("reference schedule {op} 64x64/4x4: grid {} block {} latency {l:.5} ms power {p:.1} W energy {:.3} mJ idle share {:.3}", c.grid, c.block, p * l, idle_power_share(&c, &dev));
    for op in ["mm:1,512,512,512", "mm:1,64,64,64", "mm:1,16,16,16", "mv:1,1,4096,1024", "conv:16,56,56,64,64,1,1,0"] {
        let op: OperatorSpec = op.parse().unwrap();
        let mut rows = Vec::new();
        for s in enumerate_space(&op, &SpaceLimits::default()) {
            let c = derive_counters(&op, &s, &dev).unwrap();
            let (p, l) = sim_true_power_and_latency(&c, &dev);
            rows.push((l, p, p * l, idle_power_share(&c, &dev), c.grid));
        }
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        let lat: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let pow: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let n = rows.len();
        let mid = rows[n / 2];
        let emin = rows.iter().map(|r| r.2).fold(f64::INFINITY, f64::min);
        let top = (n / 50).max(8);
        let fast = &rows[..top];
        let fast_e: Vec<f64> = fast.iter().map(|r| r.2).collect();
        let fastest = rows[0];
        let fmin = fast_e.iter().cloned().fold(f64::INFINITY, f64::min);
        let fmax = fast_e.iter().cloned().fold(0.0, f64::max);
        let mut shares: Vec<f64> = rows.iter().map(|r| r.3).collect();
        shares.sort_by(|a, b| a.total_cmp(b));
        // latency ties with distinct power
        let mut ties = 0usize;
        for i in 0..n.min(4000) {
            let j = (i + 1..n).take_while(|&j| rows[j].0 <= rows[i].0 * 1.02).find(|&j| {
                (rows[j].1 - rows[i].1).abs() / rows[i].1.min(rows[j].1) >= 0.10
            });
            if j.is_some() {
                ties += 1;
            }
        }
        println!("{op}: n={n}");
        println!("  latency ms: min {:.5} median {:.5} max {:.5}", lat[0], lat[n / 2], lat[n - 1]);
        println!("  power W: min {:.1} max {:.1}", pow.iter().cloned().fold(f64::INFINITY, f64::min), pow.iter().cloned().fold(0.0, f64::max));
        println!("  idle share: p10 {:.3} median {:.3} p90 {:.3}; mid-latency schedule share {:.3}", shares[n / 10], shares[n / 2], shares[9 * n / 10], mid.3);
        println!("  spearman(latency, power) = {:.3}", spearman(&lat, &pow).unwrap());
        println!("  global min energy {:.5} mJ; fastest kernel energy {:.5} (grid {}); top-{top} fastest energy range [{:.5}, {:.5}]", emin, fastest.2, fastest.4, fmin, fmax);
        let dec: Vec<f64> = { let mut v: Vec<f64> = rows[..n / 10].iter().map(|r| r.3).collect(); v.sort_by(|a, b| a.total_cmp(b)); v };
        println!("  idle share over fastest decile: median {:.3}", dec[dec.len() / 2]);
        println!("  fastest/emin = {:.3}; latency-tie pairs (2% lat, 10% power) among first 4000: {ties}", fastest.2 / emin);
    }
}
