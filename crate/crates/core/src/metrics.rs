//! Dice and Hausdorff metrics over integer label masks.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Integer label grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegMask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl SegMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::dim(
                "seg_mask",
                format!("{} labels for a {height}x{width} grid", labels.len()),
            ));
        }
        Ok(SegMask {
            height,
            width,
            labels,
        })
    }

    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l as usize >= num_classes) {
            Some(l) => Err(Error::dim(
                "seg_mask",
                format!("label {l} outside 0..{num_classes}"),
            )),
            None => Ok(()),
        }
    }

    fn same_shape(&self, other: &SegMask, op: &'static str) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::shapes(
                op,
                &[self.height, self.width],
                &[other.height, other.width],
            ));
        }
        Ok(())
    }

    fn diagonal(&self) -> f64 {
        ((self.height * self.height + self.width * self.width) as f64).sqrt()
    }

    /// Pixels of class `k` with a 4-neighbor outside the class or on the image border.
    pub fn boundary(&self, k: u8) -> Vec<bool> {
        let (h, w) = (self.height, self.width);
        let at = |y: usize, x: usize| self.labels[y * w + x] == k;
        let mut out = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                if !at(y, x) {
                    continue;
                }
                out[y * w + x] = y == 0
                    || x == 0
                    || y + 1 == h
                    || x + 1 == w
                    || !at(y - 1, x)
                    || !at(y + 1, x)
                    || !at(y, x - 1)
                    || !at(y, x + 1);
            }
        }
        out
    }
}

/// `2|P∩G| / (|P|+|G|)` for class `k`; 1 when both are empty.
pub fn dice_score(pred: &SegMask, gt: &SegMask, k: u8) -> Result<f64> {
    pred.same_shape(gt, "dice_score")?;
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.labels.iter().zip(&gt.labels) {
        let (ia, ib) = (a == k, b == k);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

/// Squared Euclidean distance from every pixel to the nearest `true` pixel
/// of `sites` (exact, separable lower-envelope transform).
pub fn squared_distance_transform(sites: &[bool], h: usize, w: usize) -> Vec<f64> {
    let far = ((h + w) * (h + w)) as f64 * 4.0 + 1.0;
    let mut grid: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { far }).collect();
    let mut buf = Vec::new();
    for y in 0..h {
        let row = &mut grid[y * w..(y + 1) * w];
        buf.clear();
        buf.extend_from_slice(row);
        envelope_1d(&buf, row);
    }
    let mut col = vec![0.0; h];
    let mut out = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        envelope_1d(&col, &mut out);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    grid
}

/// `out[q] = min_p (q − p)² + f[p]`.
fn envelope_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let qf = q as f64;
        let mut s;
        loop {
            let p = v[k] as f64;
            s = ((f[q] + qf * qf) - (f[v[k]] + p * p)) / (2.0 * qf - 2.0 * p);
            if s > z[k] {
                break;
            }
            k -= 1;
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while z[k + 1] < qf {
            k += 1;
        }
        let p = v[k] as f64;
        *o = (qf - p) * (qf - p) + f[v[k]];
    }
}

/// Linear-interpolated percentile of unsorted values (`p` in 0..=100).
pub fn percentile(values: &mut [f64], p: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let pos = p.clamp(0.0, 100.0) / 100.0 * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    values[lo] + frac * (values[hi] - values[lo])
}

fn directed<'a>(from: &'a [bool], to_dist: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
    from.iter()
        .zip(to_dist)
        .filter(|(&f, _)| f)
        .map(|(_, &d2)| d2.sqrt())
}

/// Boundary-to-boundary distance statistic for class `k`, in pixels.
///
/// Distances from each boundary pixel of one mask to the nearest boundary
/// pixel of the other are pooled over both directions and summarized by the
/// given percentile (100 gives the classical maximum). Both masks empty gives
/// 0; exactly one empty gives the image diagonal.
pub fn hausdorff(pred: &SegMask, gt: &SegMask, k: u8, pct: f64) -> Result<f64> {
    pred.same_shape(gt, "hausdorff")?;
    let (h, w) = (pred.height, pred.width);
    let (bp, bg) = (pred.boundary(k), gt.boundary(k));
    let (ep, eg) = (!bp.contains(&true), !bg.contains(&true));
    match (ep, eg) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(pred.diagonal()),
        _ => {}
    }
    let dp = squared_distance_transform(&bp, h, w);
    let dg = squared_distance_transform(&bg, h, w);
    let mut d: Vec<f64> = directed(&bp, &dg).chain(directed(&bg, &dp)).collect();
    Ok(percentile(&mut d, pct))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassScore {
    pub dsc: f64,
    pub hd95: f64,
    pub hd100: f64,
}

/// Per-class scores averaged over samples, foreground classes only.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricTable {
    /// Entry `i` is class `i + 1`.
    pub classes: Vec<ClassScore>,
    pub samples: usize,
}

impl MetricTable {
    pub fn mean(&self) -> ClassScore {
        let n = self.classes.len().max(1) as f64;
        ClassScore {
            dsc: ordered_sum(self.classes.iter().map(|c| c.dsc)) / n,
            hd95: ordered_sum(self.classes.iter().map(|c| c.hd95)) / n,
            hd100: ordered_sum(self.classes.iter().map(|c| c.hd100)) / n,
        }
    }

    /// CSV rows `epoch,split,class,dsc,hd95,hd100`, one per foreground class
    /// plus a `mean` row.
    pub fn csv_rows(&self, epoch: usize, split: &str) -> String {
        let mut s = String::new();
        let row = |s: &mut String, class: &str, c: &ClassScore| {
            writeln!(
                s,
                "{epoch},{split},{class},{:.6},{:.6},{:.6}",
                c.dsc, c.hd95, c.hd100
            )
            .unwrap();
        };
        for (i, c) in self.classes.iter().enumerate() {
            row(&mut s, &(i + 1).to_string(), c);
        }
        row(&mut s, "mean", &self.mean());
        s
    }
}

pub const CSV_HEADER: &str = "epoch,split,class,dsc,hd95,hd100";

/// Sum that does not depend on the order values arrive in.
pub fn ordered_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// Scores of a single prediction for each foreground class.
pub fn score_sample(pred: &SegMask, gt: &SegMask, num_classes: usize) -> Result<Vec<ClassScore>> {
    pred.check_classes(num_classes)?;
    gt.check_classes(num_classes)?;
    (1..num_classes)
        .map(|k| {
            let k = k as u8;
            Ok(ClassScore {
                dsc: dice_score(pred, gt, k)?,
                hd95: hausdorff(pred, gt, k, 95.0)?,
                hd100: hausdorff(pred, gt, k, 100.0)?,
            })
        })
        .collect()
}

/// Averages per-sample scores into a table.
pub fn aggregate(per_sample: &[Vec<ClassScore>], num_classes: usize) -> MetricTable {
    let classes = (0..num_classes.saturating_sub(1))
        .map(|k| {
            let n = per_sample.len().max(1) as f64;
            ClassScore {
                dsc: ordered_sum(per_sample.iter().map(|s| s[k].dsc)) / n,
                hd95: ordered_sum(per_sample.iter().map(|s| s[k].hd95)) / n,
                hd100: ordered_sum(per_sample.iter().map(|s| s[k].hd100)) / n,
            }
        })
        .collect();
    MetricTable {
        classes,
        samples: per_sample.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> SegMask {
        let mut l = vec![0u8; h * w];
        for &(y, x) in on {
            l[y * w + x] = 1;
        }
        SegMask::new(h, w, l).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = mask(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let b = mask(4, 4, &[(0, 1), (0, 2), (1, 1), (1, 2)]);
        let c = mask(4, 4, &[(3, 3)]);
        assert_eq!(dice_score(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dice_score(&a, &c, 1).unwrap(), 0.0);
        assert_eq!(dice_score(&a, &b, 1).unwrap(), 0.5);
        assert_eq!(dice_score(&a, &b, 2).unwrap(), 1.0);
        assert!(dice_score(&a, &mask(2, 8, &[]), 1).is_err());
    }

    #[test]
    fn hausdorff_examples() {
        let a = mask(5, 5, &[(0, 0)]);
        let b = mask(5, 5, &[(3, 4)]);
        assert_eq!(hausdorff(&a, &b, 1, 100.0).unwrap(), 5.0);
        assert_eq!(hausdorff(&a, &a, 1, 95.0).unwrap(), 0.0);
        let empty = mask(5, 5, &[]);
        assert_eq!(hausdorff(&empty, &empty, 1, 95.0).unwrap(), 0.0);
        assert_eq!(hausdorff(&a, &empty, 1, 95.0).unwrap(), 50f64.sqrt());
    }

    #[test]
    fn boundary_skips_interior() {
        let on: Vec<_> = (0..5).flat_map(|y| (0..5).map(move |x| (y, x))).collect();
        let m = mask(7, 7, &on);
        let b = m.boundary(1);
        assert!(!b[2 * 7 + 2]);
        assert!(b[0] && b[4 * 7 + 4] && b[7 + 4]);
        assert!(!b[3 * 7 + 3]);
        assert_eq!(b.iter().filter(|&&v| v).count(), 16);
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&mut [3.0, 1.0, 2.0], 50.0), 2.0);
        assert_eq!(percentile(&mut [0.0, 10.0], 95.0), 9.5);
        assert_eq!(percentile(&mut [4.0], 95.0), 4.0);
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let (h, w) = (9, 13);
        let sites: Vec<bool> = (0..h * w).map(|i| (i * 7919) % 17 == 3).collect();
        let d = squared_distance_transform(&sites, h, w);
        for q in 0..h * w {
            let best = (0..h * w)
                .filter(|&p| sites[p])
                .map(|p| {
                    let dy = (p / w) as f64 - (q / w) as f64;
                    let dx = (p % w) as f64 - (q % w) as f64;
                    dy * dy + dx * dx
                })
                .fold(f64::INFINITY, f64::min);
            assert_eq!(d[q], best);
        }
    }

    fn arb_mask() -> impl Strategy<Value = SegMask> {
        prop::collection::vec(0u8..3, 64).prop_map(|l| SegMask::new(8, 8, l).unwrap())
    }

    proptest! {
        #[test]
        fn dice_is_symmetric(a in arb_mask(), b in arb_mask(), k in 0u8..3) {
            prop_assert_eq!(dice_score(&a, &b, k).unwrap(), dice_score(&b, &a, k).unwrap());
        }

        #[test]
        fn dice_invariant_under_joint_permutation(a in arb_mask(), b in arb_mask(), shift in 1usize..63) {
            let rot = |m: &SegMask| {
                let mut l = m.labels.clone();
                l.rotate_left(shift);
                SegMask::new(8, 8, l).unwrap()
            };
            prop_assert_eq!(dice_score(&a, &b, 1).unwrap(), dice_score(&rot(&a), &rot(&b), 1).unwrap());
        }

        #[test]
        fn max_dominates_percentile(a in arb_mask(), b in arb_mask(), k in 1u8..3) {
            prop_assert!(hausdorff(&a, &b, k, 100.0).unwrap() >= hausdorff(&a, &b, k, 95.0).unwrap());
        }
    }

    #[test]
    fn table_csv_and_mean() {
        let s = vec![
            vec![
                ClassScore {
                    dsc: 1.0,
                    hd95: 0.0,
                    hd100: 0.0,
                },
                ClassScore {
                    dsc: 0.5,
                    hd95: 2.0,
                    hd100: 3.0,
                },
            ],
            vec![
                ClassScore {
                    dsc: 0.0,
                    hd95: 4.0,
                    hd100: 5.0,
                },
                ClassScore {
                    dsc: 0.5,
                    hd95: 2.0,
                    hd100: 3.0,
                },
            ],
        ];
        let t = aggregate(&s, 3);
        assert_eq!(t.classes[0].dsc, 0.5);
        assert_eq!(t.mean().dsc, 0.5);
        let csv = t.csv_rows(3, "val");
        assert_eq!(
            csv.lines().next().unwrap(),
            "3,val,1,0.500000,2.000000,2.500000"
        );
        assert_eq!(csv.lines().count(), 3);
    }
}
