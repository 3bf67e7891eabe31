//! Execution counters of a scheduled kernel.
//!
//! [`derive_counters`] computes them in closed form. [`interpret_counters`]
//! executes the tiled loop nest step by step with explicit shared-memory tile
//! state and counts every access; it is the ground truth the closed form is
//! checked against on small shapes.
//!
//! Counts are element accesses, not 32-byte sectors. Each thread block stages
//! its A and B tiles in shared memory once per reduction step, every thread
//! reads its operands from shared memory once per inner iteration, and every
//! output element is written to global memory exactly once.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measure::DeviceConfig;
use crate::opspace::{GemmShape, OperatorSpec, Schedule, SpaceError};

/// Block size at which a resident block is treated as fully occupying its SM.
pub const FULL_OCCUPANCY_THREADS: u64 = 256;

/// Largest GEMM volume (`batch*m*n*k`) the interpreter accepts.
pub const INTERPRETER_MAX_VOLUME: u64 = 1 << 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CounterError {
    #[error(transparent)]
    IllegalSchedule(#[from] SpaceError),
    #[error("loop nest volume {volume} exceeds the interpreter cap of {cap}")]
    TooLarge { volume: u64, cap: u64 },
    #[error("interpreter produced a wrong result: {0}")]
    WrongResult(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CounterSet {
    pub grid: u64,
    pub block: u64,
    pub flops: u64,
    pub int_ops: u64,
    pub glb_ld: u64,
    pub glb_st: u64,
    pub shared_ld: u64,
    pub shared_st: u64,
    pub sm_efficiency: f64,
    pub active_sms: u64,
}

impl CounterSet {
    pub fn global_accesses(&self) -> u64 {
        self.glb_ld + self.glb_st
    }

    pub fn shared_accesses(&self) -> u64 {
        self.shared_ld + self.shared_st
    }
}

/// `(active_sms, sm_efficiency)` for a launch of `grid` blocks of `block` threads.
pub fn occupancy(grid: u64, block: u64, num_sms: u64) -> (u64, f64) {
    let active = grid.min(num_sms);
    let fill = (block as f64 / FULL_OCCUPANCY_THREADS as f64).min(1.0);
    (active, active as f64 / num_sms as f64 * fill)
}

/// In-bounds entries of the implicit im2col matrix of a convolution.
fn conv_valid_entries(op: &OperatorSpec) -> u64 {
    let OperatorSpec::Conv {
        batch,
        height,
        width,
        in_channels,
        kernel_size,
        stride,
        padding,
        ..
    } = *op
    else {
        unreachable!("conv only")
    };
    let (oh, ow) = op.conv_output().expect("conv");
    let valid = |out: u64, extent: u64| -> u64 {
        let mut count = 0;
        for o in 0..out {
            for kk in 0..kernel_size {
                let pos = (o * stride + kk) as i64 - padding as i64;
                if pos >= 0 && (pos as u64) < extent {
                    count += 1;
                }
            }
        }
        count
    };
    batch * in_channels * valid(oh, height) * valid(ow, width)
}

/// Closed-form counters for `op` under schedule `s`.
pub fn derive_counters(op: &OperatorSpec, s: &Schedule, dev: &DeviceConfig) -> Result<CounterSet, CounterError> {
    let GemmShape { batch, m, n, k } = op.gemm();
    let shape = op.gemm();
    s.check(&shape)?;

    let grid = s.grid(&shape);
    let block = s.block_threads();

    // Each block stages its A tile once per N-block and its B tile once per M-block.
    let a_tiles = batch * m * k * (n / s.n.block);
    let b_tiles = batch * k * n * (m / s.m.block);
    let a_loads = match op {
        OperatorSpec::Conv { .. } => conv_valid_entries(op) * (n / s.n.block),
        _ => a_tiles,
    };
    let shared_ld = batch * (m / s.m.thread) * (n / s.n.thread) * k * (s.m.thread + s.n.thread);
    let (active_sms, sm_efficiency) = occupancy(grid, block, dev.num_sms);

    Ok(CounterSet {
        grid,
        block,
        flops: 2 * batch * m * n * k,
        int_ops: shared_ld,
        glb_ld: a_loads + b_tiles,
        glb_st: batch * m * n,
        shared_ld,
        shared_st: a_tiles + b_tiles,
        sm_efficiency,
        active_sms,
    })
}

/// Operand values of the lowered GEMM. Convolution A operands are read
/// through the im2col mapping; padded positions read as `None`.
struct Operands {
    op: OperatorSpec,
    shape: GemmShape,
}

impl Operands {
    fn input(nb: u64, ih: u64, iw: u64, c: u64) -> f64 {
        ((nb * 5 + ih * 3 + iw * 7 + c * 2) % 9) as f64 - 4.0
    }

    fn weight(b: u64, kk: u64, nn: u64) -> f64 {
        ((b * 11 + kk * 5 + nn * 3) % 7) as f64 - 3.0
    }

    fn a(&self, b: u64, mm: u64, kk: u64) -> Option<f64> {
        match self.op {
            OperatorSpec::Conv {
                height,
                width,
                in_channels,
                kernel_size,
                stride,
                padding,
                ..
            } => {
                let (oh, ow) = self.op.conv_output().expect("conv");
                let (nb, rest) = (mm / (oh * ow), mm % (oh * ow));
                let (y, x) = (rest / ow, rest % ow);
                let (kh, rest) = (kk / (kernel_size * in_channels), kk % (kernel_size * in_channels));
                let (kw, c) = (rest / in_channels, rest % in_channels);
                let ih = (y * stride + kh) as i64 - padding as i64;
                let iw = (x * stride + kw) as i64 - padding as i64;
                if ih < 0 || iw < 0 || ih as u64 >= height || iw as u64 >= width {
                    None
                } else {
                    Some(Self::input(nb, ih as u64, iw as u64, c))
                }
            }
            _ => Some(((b * 13 + mm * 3 + kk * 7) % 11) as f64 - 5.0),
        }
    }

    fn b(&self, b: u64, kk: u64, nn: u64) -> f64 {
        Self::weight(b, kk, nn)
    }

    /// Direct evaluation of the original operator, indexed like the GEMM output.
    fn reference(&self) -> Vec<f64> {
        let GemmShape { batch, m, n, k } = self.shape;
        let mut out = vec![0.0; (batch * m * n) as usize];
        match self.op {
            OperatorSpec::Conv {
                height,
                width,
                in_channels,
                out_channels,
                kernel_size,
                stride,
                padding,
                batch: images,
            } => {
                let (oh, ow) = self.op.conv_output().expect("conv");
                for nb in 0..images {
                    for y in 0..oh {
                        for x in 0..ow {
                            for co in 0..out_channels {
                                let mut acc = 0.0;
                                for kh in 0..kernel_size {
                                    for kw in 0..kernel_size {
                                        let ih = (y * stride + kh) as i64 - padding as i64;
                                        let iw = (x * stride + kw) as i64 - padding as i64;
                                        if ih < 0 || iw < 0 || ih as u64 >= height || iw as u64 >= width {
                                            continue;
                                        }
                                        for c in 0..in_channels {
                                            let w = Self::weight(0, (kh * kernel_size + kw) * in_channels + c, co);
                                            acc += Self::input(nb, ih as u64, iw as u64, c) * w;
                                        }
                                    }
                                }
                                let row = (nb * oh + y) * ow + x;
                                out[(row * n + co) as usize] = acc;
                            }
                        }
                    }
                }
            }
            _ => {
                for b in 0..batch {
                    for i in 0..m {
                        for j in 0..n {
                            let acc: f64 = (0..k)
                                .map(|kk| self.a(b, i, kk).expect("dense") * self.b(b, kk, j))
                                .sum();
                            out[((b * m + i) * n + j) as usize] = acc;
                        }
                    }
                }
            }
        }
        out
    }
}

/// Executes the tiled loop nest and counts every access.
///
/// Also checks that the computed output equals a direct evaluation of the
/// operator, so a counted nest that computes the wrong thing is an error.
pub fn interpret_counters(op: &OperatorSpec, s: &Schedule, dev: &DeviceConfig) -> Result<CounterSet, CounterError> {
    let shape = op.gemm();
    s.check(&shape)?;
    let volume = shape.volume();
    if volume > INTERPRETER_MAX_VOLUME {
        return Err(CounterError::TooLarge {
            volume,
            cap: INTERPRETER_MAX_VOLUME,
        });
    }
    let GemmShape { batch, m, n, .. } = shape;
    let operands = Operands { op: *op, shape };
    let (bb, bm, bn) = (s.batch.block, s.m.block, s.n.block);
    let (tb, tm, tn) = (s.batch.thread, s.m.thread, s.n.thread);
    let bk = s.k_tile(&shape);

    let mut c = CounterSet {
        grid: 0,
        block: 0,
        flops: 0,
        int_ops: 0,
        glb_ld: 0,
        glb_st: 0,
        shared_ld: 0,
        shared_st: 0,
        sm_efficiency: 0.0,
        active_sms: 0,
    };
    let mut output: Vec<Option<f64>> = vec![None; (batch * m * n) as usize];
    let mut shared_a: Vec<Option<f64>> = vec![None; (bb * bm * bk) as usize];
    let mut shared_b: Vec<Option<f64>> = vec![None; (bb * bk * bn) as usize];
    let threads: Vec<(u64, u64, u64)> = (0..bb / tb)
        .flat_map(|x| (0..bm / tm).flat_map(move |y| (0..bn / tn).map(move |z| (x, y, z))))
        .collect();
    let per_thread = (tb * tm * tn) as usize;

    for gb in 0..batch / bb {
        for gm in 0..m / bm {
            for gn in 0..n / bn {
                c.grid += 1;
                c.block = c.block.max(threads.len() as u64);
                let (b0, m0, n0) = (gb * bb, gm * bm, gn * bn);
                let mut registers = vec![0.0f64; threads.len() * per_thread];

                for step in 0..s.k_split {
                    let k0 = step * bk;
                    shared_a.iter_mut().for_each(|v| *v = None);
                    shared_b.iter_mut().for_each(|v| *v = None);

                    // cooperative staging of the A and B tiles
                    for lb in 0..bb {
                        for lm in 0..bm {
                            for lk in 0..bk {
                                let v = match operands.a(b0 + lb, m0 + lm, k0 + lk) {
                                    Some(v) => {
                                        c.glb_ld += 1;
                                        v
                                    }
                                    None => 0.0,
                                };
                                shared_a[((lb * bm + lm) * bk + lk) as usize] = Some(v);
                                c.shared_st += 1;
                            }
                        }
                        for lk in 0..bk {
                            for ln in 0..bn {
                                let v = operands.b(b0 + lb, k0 + lk, n0 + ln);
                                c.glb_ld += 1;
                                shared_b[((lb * bk + lk) * bn + ln) as usize] = Some(v);
                                c.shared_st += 1;
                            }
                        }
                    }

                    for (t, &(xb, xm, xn)) in threads.iter().enumerate() {
                        let regs = &mut registers[t * per_thread..(t + 1) * per_thread];
                        for lk in 0..bk {
                            let mut a_frag = Vec::with_capacity((tb * tm) as usize);
                            let mut b_frag = Vec::with_capacity((tb * tn) as usize);
                            for ib in 0..tb {
                                let lb = xb * tb + ib;
                                for im in 0..tm {
                                    let lm = xm * tm + im;
                                    let v = shared_a[((lb * bm + lm) * bk + lk) as usize].ok_or_else(|| {
                                        CounterError::WrongResult("read of unstaged A element".into())
                                    })?;
                                    c.shared_ld += 1;
                                    c.int_ops += 1;
                                    a_frag.push(v);
                                }
                                for inn in 0..tn {
                                    let ln = xn * tn + inn;
                                    let v = shared_b[((lb * bk + lk) * bn + ln) as usize].ok_or_else(|| {
                                        CounterError::WrongResult("read of unstaged B element".into())
                                    })?;
                                    c.shared_ld += 1;
                                    c.int_ops += 1;
                                    b_frag.push(v);
                                }
                            }
                            for ib in 0..tb as usize {
                                for im in 0..tm as usize {
                                    for inn in 0..tn as usize {
                                        let r = (ib * tm as usize + im) * tn as usize + inn;
                                        regs[r] += a_frag[ib * tm as usize + im] * b_frag[ib * tn as usize + inn];
                                        c.flops += 2;
                                    }
                                }
                            }
                        }
                    }
                }

                for (t, &(xb, xm, xn)) in threads.iter().enumerate() {
                    for ib in 0..tb {
                        for im in 0..tm {
                            for inn in 0..tn {
                                let (gb_, gm_, gn_) = (b0 + xb * tb + ib, m0 + xm * tm + im, n0 + xn * tn + inn);
                                let r = t * per_thread + ((ib * tm + im) * tn + inn) as usize;
                                let slot = &mut output[((gb_ * m + gm_) * n + gn_) as usize];
                                if slot.is_some() {
                                    return Err(CounterError::WrongResult(format!(
                                        "output ({gb_},{gm_},{gn_}) stored twice"
                                    )));
                                }
                                *slot = Some(registers[r]);
                                c.glb_st += 1;
                            }
                        }
                    }
                }
            }
        }
    }

    let reference = operands.reference();
    for (i, (got, want)) in output.iter().zip(&reference).enumerate() {
        match got {
            Some(v) if v == want => {}
            Some(v) => {
                return Err(CounterError::WrongResult(format!("output {i}: got {v}, expected {want}")));
            }
            None => return Err(CounterError::WrongResult(format!("output {i} never stored"))),
        }
    }
    let (active, eff) = occupancy(c.grid, c.block, dev.num_sms);
    c.active_sms = active;
    c.sm_efficiency = eff;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::opspace::{enumerate_space, SpaceLimits, Tile};

    fn dev() -> DeviceConfig {
        DeviceConfig::a100_like()
    }

    fn mm(b: u64, m: u64, n: u64, k: u64) -> OperatorSpec {
        OperatorSpec::mm(b, m, n, k).unwrap()
    }

    #[test]
    fn trivial_kernel_counts() {
        let c = derive_counters(&mm(1, 1, 1, 1), &Schedule::TRIVIAL, &dev()).unwrap();
        assert_eq!((c.flops, c.glb_ld, c.glb_st), (2, 2, 1));
        assert_eq!((c.grid, c.block, c.active_sms), (1, 1, 1));
        let i = interpret_counters(&mm(1, 1, 1, 1), &Schedule::TRIVIAL, &dev()).unwrap();
        assert_eq!(c, i);
    }

    #[test]
    fn flops_of_large_mm_are_schedule_independent() {
        let op = mm(1, 512, 512, 512);
        for s in enumerate_space(&op, &SpaceLimits::default()).step_by(1009).take(40) {
            assert_eq!(derive_counters(&op, &s, &dev()).unwrap().flops, 268_435_456);
        }
    }

    #[test]
    fn interpreter_small_examples() {
        let i = interpret_counters(&mm(1, 2, 2, 2), &Schedule::TRIVIAL, &dev()).unwrap();
        assert_eq!(i.flops, 16);
        let op = mm(1, 4, 4, 4);
        for s in enumerate_space(&op, &SpaceLimits::default()) {
            assert_eq!(interpret_counters(&op, &s, &dev()).unwrap().glb_st, 16);
        }
    }

    #[test]
    fn blocked_8x8x8_matches_interpreter() {
        let op = mm(1, 8, 8, 8);
        let s = Schedule {
            batch: Tile::UNIT,
            m: Tile::new(4, 2),
            n: Tile::new(4, 1),
            k_split: 2,
            unroll: 2,
            vector: 1,
        };
        let derived = derive_counters(&op, &s, &dev()).unwrap();
        assert_eq!(derived, interpret_counters(&op, &s, &dev()).unwrap());
        assert_eq!(derived.grid, 4);
        assert_eq!(derived.block, 8);
        // 4 blocks x 2 steps x (4x4 A tile + 4x4 B tile)
        assert_eq!(derived.glb_ld, 256);
    }

    #[test]
    fn conv_padding_skips_global_loads() {
        let op: OperatorSpec = "conv:1,3,3,1,1,3,1,1".parse().unwrap();
        let c = derive_counters(&op, &Schedule::TRIVIAL, &dev()).unwrap();
        // 9 outputs x 9 taps staged, but only 49 taps fall inside the image
        assert_eq!(c.shared_st, 81 + 81);
        assert_eq!(c.glb_ld, 49 + 81);
        assert_eq!(c, interpret_counters(&op, &Schedule::TRIVIAL, &dev()).unwrap());
    }

    #[test]
    fn exhaustive_equivalence_small_mm() {
        let op = mm(2, 4, 4, 4);
        for s in enumerate_space(&op, &SpaceLimits::default()) {
            assert_eq!(
                derive_counters(&op, &s, &dev()).unwrap(),
                interpret_counters(&op, &s, &dev()).unwrap(),
                "{s:?}"
            );
        }
    }

    #[test]
    fn illegal_and_oversized_inputs() {
        let op = mm(1, 8, 8, 8);
        let mut s = Schedule::TRIVIAL;
        s.m = Tile::new(3, 1);
        assert!(matches!(derive_counters(&op, &s, &dev()), Err(CounterError::IllegalSchedule(_))));
        assert!(matches!(interpret_counters(&op, &s, &dev()), Err(CounterError::IllegalSchedule(_))));
        let big = mm(1, 64, 64, 64);
        assert!(matches!(
            interpret_counters(&big, &Schedule::TRIVIAL, &dev()),
            Err(CounterError::TooLarge { .. })
        ));
    }

    #[test]
    fn larger_block_tiles_never_increase_global_loads() {
        let op = mm(1, 64, 64, 64);
        let base = |bm: u64, bn: u64| Schedule {
            batch: Tile::UNIT,
            m: Tile::new(bm, 1),
            n: Tile::new(bn, 1),
            k_split: 8,
            unroll: 1,
            vector: 1,
        };
        let mut last = u64::MAX;
        for t in [1, 2, 4, 8, 16, 32] {
            let c = derive_counters(&op, &base(t, t), &dev()).unwrap();
            assert!(c.glb_ld <= last);
            last = c.glb_ld;
        }
    }

    #[test]
    fn doubling_reduction_split_never_decreases_global_loads() {
        let op: OperatorSpec = "conv:2,8,8,4,8,3,1,1".parse().unwrap();
        for s in enumerate_space(&op, &SpaceLimits::default()).step_by(13) {
            let mut d = s;
            d.k_split *= 2;
            d.unroll = 1;
            if d.check(&op.gemm()).is_err() {
                continue;
            }
            let a = derive_counters(&op, &s, &dev()).unwrap();
            let b = derive_counters(&op, &d, &dev()).unwrap();
            assert!(b.glb_ld >= a.glb_ld);
        }
    }

    #[test]
    fn occupancy_tracks_grid_and_block() {
        let (a, e) = occupancy(64, 256, 108);
        assert_eq!(a, 64);
        assert!((e - 64.0 / 108.0).abs() < 1e-12);
        let (a, e) = occupancy(256, 128, 108);
        assert_eq!(a, 108);
        assert!((e - 0.5).abs() < 1e-12);
        let (_, e) = occupancy(1, 1, 108);
        assert!(e > 0.0);
    }
}
