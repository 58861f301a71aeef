//! Label corruption: drop whole panel components and erode the survivors.

use serde::{Deserialize, Serialize};

use super::{ImageryError, MaskTile, Result};
use crate::rng::{tag, SplitMix64};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    /// Fraction of 4-connected foreground components deleted.
    pub drop_rate: f64,
    /// Radius of the square structuring element applied to survivors.
    #[serde(default)]
    pub erode_px: usize,
}

impl CorruptionSpec {
    pub const NONE: CorruptionSpec = CorruptionSpec {
        drop_rate: 0.0,
        erode_px: 0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return Err(ImageryError::InvalidSpec {
                field: "drop_rate",
                reason: format!("{} outside [0, 1]", self.drop_rate),
            });
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.drop_rate == 0.0 && self.erode_px == 0
    }

    /// Compact label used in report rows.
    pub fn label(&self) -> String {
        format!("drop{}_erode{}", self.drop_rate, self.erode_px)
    }
}

/// Label every 4-connected foreground component; components are numbered
/// 1.. in the order their first pixel is met by a row-major scan. Returns the
/// label image and the component count.
pub fn connected_components(mask: &MaskTile) -> (Vec<u32>, usize) {
    let (w, h) = (mask.width(), mask.height());
    let src = mask.labels();
    let mut labels = vec![0u32; w * h];
    let mut count = 0u32;
    let mut stack = Vec::new();
    for start in 0..w * h {
        if src[start] == 0 || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if src[j] == 1 && labels[j] == 0 {
                    labels[j] = count;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
    }
    (labels, count as usize)
}

/// Square-element erosion; the window is clipped at the image border, so
/// out-of-image pixels never erode anything.
fn erode(labels: &[u8], w: usize, h: usize, radius: usize) -> Vec<u8> {
    if radius == 0 {
        return labels.to_vec();
    }
    let mut out = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            if labels[y * w + x] == 0 {
                continue;
            }
            let (y0, y1) = (y.saturating_sub(radius), (y + radius).min(h - 1));
            let (x0, x1) = (x.saturating_sub(radius), (x + radius).min(w - 1));
            let keep =
                (y0..=y1).all(|yy| labels[yy * w + x0..=yy * w + x1].iter().all(|&v| v == 1));
            out[y * w + x] = keep as u8;
        }
    }
    out
}

/// Delete `round_half_up(drop_rate * n)` of the `n` components (picked by a
/// seeded shuffle), then erode what is left.
pub fn corrupt_mask(mask: &MaskTile, spec: &CorruptionSpec, seed: u64) -> Result<MaskTile> {
    spec.validate()?;
    if spec.is_identity() {
        return Ok(mask.clone());
    }
    let (w, h) = (mask.width(), mask.height());
    let (components, n) = connected_components(mask);
    let n_drop = ((spec.drop_rate * n as f64 + 0.5).floor() as usize).min(n);
    let mut order: Vec<u32> = (1..=n as u32).collect();
    SplitMix64::derived(seed, &[tag::CORRUPT]).shuffle(&mut order);
    let mut dropped = vec![false; n + 1];
    for &c in &order[..n_drop] {
        dropped[c as usize] = true;
    }
    let kept: Vec<u8> = components
        .iter()
        .map(|&c| (c != 0 && !dropped[c as usize]) as u8)
        .collect();
    Ok(MaskTile::from_raw_unchecked(
        w,
        h,
        erode(&kept, w, h, spec.erode_px),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Eight 3x3 squares on a 24x16 grid.
    fn eight_squares() -> MaskTile {
        let (w, h) = (24, 16);
        let mut labels = vec![0u8; w * h];
        for r in 0..2 {
            for c in 0..4 {
                for y in 0..3 {
                    for x in 0..3 {
                        labels[(1 + r * 8 + y) * w + 1 + c * 6 + x] = 1;
                    }
                }
            }
        }
        MaskTile::new(w, h, labels).unwrap()
    }

    /// Independent component counter: repeatedly flood one seed pixel with a
    /// queue and clear it, counting floods.
    fn count_components_oracle(mask: &MaskTile) -> usize {
        let (w, h) = (mask.width() as i64, mask.height() as i64);
        let mut grid: Vec<Vec<u8>> = (0..h)
            .map(|y| (0..w).map(|x| mask.get(x as usize, y as usize)).collect())
            .collect();
        let mut count = 0;
        for y in 0..h {
            for x in 0..w {
                if grid[y as usize][x as usize] == 0 {
                    continue;
                }
                count += 1;
                let mut queue = std::collections::VecDeque::from([(x, y)]);
                grid[y as usize][x as usize] = 0;
                while let Some((cx, cy)) = queue.pop_front() {
                    for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                        let (nx, ny) = (cx + dx, cy + dy);
                        if nx >= 0
                            && ny >= 0
                            && nx < w
                            && ny < h
                            && grid[ny as usize][nx as usize] == 1
                        {
                            grid[ny as usize][nx as usize] = 0;
                            queue.push_back((nx, ny));
                        }
                    }
                }
            }
        }
        count
    }

    #[test]
    fn identity_spec_returns_input() {
        let m = eight_squares();
        assert_eq!(corrupt_mask(&m, &CorruptionSpec::NONE, 3).unwrap(), m);
    }

    #[test]
    fn full_drop_clears_mask() {
        let m = eight_squares();
        let spec = CorruptionSpec {
            drop_rate: 1.0,
            erode_px: 0,
        };
        assert_eq!(corrupt_mask(&m, &spec, 3).unwrap().foreground(), 0);
    }

    #[test]
    fn half_drop_keeps_half_the_components() {
        let m = eight_squares();
        assert_eq!(count_components_oracle(&m), 8);
        let spec = CorruptionSpec {
            drop_rate: 0.5,
            erode_px: 0,
        };
        for seed in 0..20 {
            let out = corrupt_mask(&m, &spec, seed).unwrap();
            assert_eq!(count_components_oracle(&out), 4);
            assert_eq!(connected_components(&out).1, 4);
        }
    }

    #[test]
    fn drop_count_rounds_half_up() {
        // 8 components at 0.3125 -> 2.5 -> 3 dropped.
        let m = eight_squares();
        let spec = CorruptionSpec {
            drop_rate: 0.3125,
            erode_px: 0,
        };
        let out = corrupt_mask(&m, &spec, 1).unwrap();
        assert_eq!(count_components_oracle(&out), 5);
    }

    #[test]
    fn erosion_shrinks_squares() {
        let m = eight_squares();
        let spec = CorruptionSpec {
            drop_rate: 0.0,
            erode_px: 1,
        };
        let out = corrupt_mask(&m, &spec, 0).unwrap();
        // each 3x3 square keeps only its centre
        assert_eq!(out.foreground(), 8);
    }

    #[test]
    fn corruption_never_adds_foreground() {
        let m = eight_squares();
        for (drop_rate, erode_px) in [(0.3, 0), (0.5, 1), (0.0, 2), (0.9, 1)] {
            let out = corrupt_mask(
                &m,
                &CorruptionSpec {
                    drop_rate,
                    erode_px,
                },
                9,
            )
            .unwrap();
            for (a, b) in out.labels().iter().zip(m.labels()) {
                assert!(a <= b);
            }
        }
    }

    #[test]
    fn corruption_is_deterministic() {
        let m = eight_squares();
        let spec = CorruptionSpec {
            drop_rate: 0.4,
            erode_px: 0,
        };
        assert_eq!(
            corrupt_mask(&m, &spec, 5).unwrap(),
            corrupt_mask(&m, &spec, 5).unwrap()
        );
    }

    #[test]
    fn invalid_drop_rate_rejected() {
        let m = eight_squares();
        assert!(corrupt_mask(
            &m,
            &CorruptionSpec {
                drop_rate: 1.2,
                erode_px: 0
            },
            0
        )
        .is_err());
    }
}
