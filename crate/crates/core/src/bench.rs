//! FLOP and wall-time comparison of full and spatially reduced attention.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionConfig, EfficientSelfAttention, StandardMhsa};
use crate::check::random_tensor;
use crate::config::BenchConfig;
use crate::error::Result;
use crate::params::{Init, ParamStore};
use crate::tensor::{FlopCounts, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub side: usize,
    pub tokens: usize,
    pub reduction: usize,
    pub kv_tokens: usize,
    /// `QKᵀ` and `AV` products only.
    pub standard_core: u64,
    pub efficient_core: u64,
    /// Q/K/V/output projections plus, for the reduced variant, the
    /// reduction projection.
    pub standard_linear: u64,
    pub efficient_linear: u64,
    pub standard_ms: f64,
    pub efficient_ms: f64,
}

impl BenchRow {
    pub fn core_ratio(&self) -> f64 {
        self.efficient_core as f64 / self.standard_core as f64
    }
}

pub const CSV_HEADER: &str =
    "side,tokens,reduction,kv_tokens,standard_core_flops,efficient_core_flops,core_ratio,\
standard_linear_flops,efficient_linear_flops,standard_ms,efficient_ms";

/// Notes emitted ahead of the CSV rows.
pub const CSV_NOTES: [&str; 2] = [
    "# core FLOPs count QK^T and AV only; with R applied to both grid sides keys shrink to N/R^2 tokens, so core cost is N^2/R^2",
    "# the O(N^2/R) form corresponds to reducing a 1-D token sequence by R; linear columns hold the projection overhead",
];

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn timed<F: FnMut() -> Result<FlopCounts>>(reps: usize, mut f: F) -> Result<(FlopCounts, f64)> {
    let mut times = Vec::with_capacity(reps.max(1));
    let mut flops = FlopCounts::default();
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        flops = f()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok((flops, median(times)))
}

/// One row per compatible `(side, R)` pair; incompatible pairs are reported
/// in the returned warnings and skipped.
pub fn run_bench(cfg: &BenchConfig) -> Result<(Vec<BenchRow>, Vec<String>)> {
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    let (c, h) = (cfg.channels, cfg.heads);
    for &side in &cfg.grid_sides {
        let n = side * side;
        let x: Tensor<f32> = random_tensor(&[1, n, c], side as u64).cast();
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let std_attn = StandardMhsa::new(
            &mut Init::new(&mut store, &mut rng),
            &AttentionConfig::new(c, h, 1),
        )?;
        let (sf, sms) = timed(cfg.reps, || {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let xv = tape.constant(x.clone());
            std_attn.forward(&mut tape, &p, xv)?;
            Ok(tape.flops())
        })?;
        for &r in &cfg.reductions {
            if r == 0 || side % r != 0 {
                warnings.push(format!(
                    "skipping side {side} with R={r}: grid not divisible"
                ));
                continue;
            }
            let acfg = AttentionConfig::new(c, h, r);
            let mut es = ParamStore::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let eff = EfficientSelfAttention::new(&mut Init::new(&mut es, &mut rng), &acfg)?;
            let (ef, ems) = timed(cfg.reps, || {
                let mut tape = Tape::new();
                let p = es.bind(&mut tape, false);
                let xv = tape.constant(x.clone());
                eff.forward(&mut tape, &p, xv, (side, side))?;
                Ok(tape.flops())
            })?;
            rows.push(BenchRow {
                side,
                tokens: n,
                reduction: r,
                kv_tokens: n / (r * r),
                standard_core: sf.matmul,
                efficient_core: ef.matmul,
                standard_linear: sf.linear,
                efficient_linear: ef.linear,
                standard_ms: sms,
                efficient_ms: ems,
            });
        }
    }
    Ok((rows, warnings))
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::new();
    for n in CSV_NOTES {
        writeln!(s, "{n}").unwrap();
    }
    writeln!(s, "{CSV_HEADER}").unwrap();
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{:.6},{},{},{:.3},{:.3}",
            r.side,
            r.tokens,
            r.reduction,
            r.kv_tokens,
            r.standard_core,
            r.efficient_core,
            r.core_ratio(),
            r.standard_linear,
            r.efficient_linear,
            r.standard_ms,
            r.efficient_ms
        )
        .unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn core_flops_follow_token_reduction() {
        let cfg = BenchConfig {
            grid_sides: vec![8, 6],
            reductions: vec![1, 2, 4],
            channels: 8,
            heads: 1,
            reps: 1,
        };
        let (rows, warnings) = run_bench(&cfg).unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(warnings.len(), 1);
        let r1 = &rows[0];
        assert_eq!(r1.efficient_core, r1.standard_core);
        assert_eq!(r1.standard_core, 2 * 2 * 64 * 64 * 8);
        assert_eq!(rows[1].efficient_core * 4, rows[0].efficient_core);
        assert_eq!(rows[2].efficient_core * 4, rows[1].efficient_core);
        let csv = to_csv(&rows);
        assert!(csv.lines().any(|l| l == CSV_HEADER));
        assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 6);
    }
}
