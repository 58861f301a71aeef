//! Procedural aerial scenes: a block of dark rectangular panels laid out on
//! a textured background, with the exact mask of the rendered panels.

use serde::{Deserialize, Serialize};

use super::{ImageTile, ImageryError, MaskTile, Result};
use crate::rng::{tag, SplitMix64};

/// Background family of a synthetic domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    /// Striped tiled roofs with chimney shadows; landscape-oriented panels.
    Rooftop,
    /// Smoothly varying vegetation with tree clumps; portrait-oriented panels.
    Field,
}

impl Domain {
    /// Range of panel width / height.
    fn aspect_range(self) -> (f64, f64) {
        match self {
            Domain::Rooftop => (1.4, 2.2),
            Domain::Field => (0.45, 0.75),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub tile_size: usize,
    /// Inclusive range of panel rows in the array.
    pub panel_rows: [usize; 2],
    /// Inclusive range of panel columns in the array.
    pub panel_cols: [usize; 2],
    /// Target foreground fraction `[lo, hi]`.
    pub panel_fill: [f64; 2],
    pub background: Domain,
    pub noise_level: f64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let invalid = |field, reason: &str| {
            Err(ImageryError::InvalidSpec {
                field,
                reason: reason.to_string(),
            })
        };
        if self.tile_size < 16 {
            return invalid("tile_size", "must be at least 16");
        }
        let [lo, hi] = self.panel_fill;
        if !(lo > 0.0 && lo < hi && hi < 1.0) {
            return invalid("panel_fill", "need 0 < lo < hi < 1");
        }
        for (field, [a, b]) in [
            ("panel_rows", self.panel_rows),
            ("panel_cols", self.panel_cols),
        ] {
            if a == 0 || a > b {
                return invalid(field, "need 1 <= lo <= hi");
            }
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return invalid("noise_level", "must be finite and >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PanelRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl PanelRect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }
}

/// Panel geometry of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePlan {
    pub panels: Vec<PanelRect>,
}

struct Layout {
    rows: usize,
    cols: usize,
    w: usize,
    h: usize,
    gap: usize,
}

impl Layout {
    fn block(&self) -> (usize, usize) {
        (
            self.cols * self.w + (self.cols - 1) * self.gap,
            self.rows * self.h + (self.rows - 1) * self.gap,
        )
    }

    fn fill(&self, tile: usize) -> f64 {
        (self.rows * self.cols * self.w * self.h) as f64 / (tile * tile) as f64
    }

    /// Fits with a one pixel margin on every side.
    fn fits(&self, tile: usize) -> bool {
        let (bw, bh) = self.block();
        bw + 2 <= tile && bh + 2 <= tile
    }
}

const ATTEMPTS: usize = 64;

/// Draw panel geometry whose rendered foreground fraction lies in
/// `spec.panel_fill`.
pub fn plan_scene(spec: &SceneSpec, seed: u64) -> Result<ScenePlan> {
    spec.validate()?;
    let t = spec.tile_size;
    let [lo, hi] = spec.panel_fill;
    let mut rng = SplitMix64::derived(seed, &[tag::SCENE, 0]);
    let (a_lo, a_hi) = spec.background.aspect_range();

    let mut chosen = None;
    for _ in 0..ATTEMPTS {
        let rows = rng.range_inclusive(spec.panel_rows[0], spec.panel_rows[1]);
        let cols = rng.range_inclusive(spec.panel_cols[0], spec.panel_cols[1]);
        let fill = rng.uniform(lo, hi);
        let aspect = rng.uniform(a_lo, a_hi);
        let gap = rng.range_inclusive(1, 2);
        let per_panel = fill * (t * t) as f64 / (rows * cols) as f64;
        let h = (per_panel / aspect).sqrt().round().max(1.0) as usize;
        let w = (per_panel / h as f64).round().max(1.0) as usize;
        let layout = Layout {
            rows,
            cols,
            w,
            h,
            gap,
        };
        let f = layout.fill(t);
        if layout.fits(t) && f >= lo && f <= hi {
            chosen = Some(layout);
            break;
        }
    }
    let layout = match chosen {
        Some(l) => l,
        None => fallback_layout(spec).ok_or_else(|| ImageryError::InvalidSpec {
            field: "panel_fill",
            reason: format!(
                "no panel array with {:?} rows and {:?} cols fits a {t}px tile at that fill",
                spec.panel_rows, spec.panel_cols
            ),
        })?,
    };

    let (bw, bh) = layout.block();
    let ox = rng.range_inclusive(1, t - 1 - bw);
    let oy = rng.range_inclusive(1, t - 1 - bh);
    let mut panels = Vec::with_capacity(layout.rows * layout.cols);
    for r in 0..layout.rows {
        for c in 0..layout.cols {
            panels.push(PanelRect {
                x: ox + c * (layout.w + layout.gap),
                y: oy + r * (layout.h + layout.gap),
                w: layout.w,
                h: layout.h,
            });
        }
    }
    Ok(ScenePlan { panels })
}

/// Exhaustive search for the layout closest to the middle of the fill range.
fn fallback_layout(spec: &SceneSpec) -> Option<Layout> {
    let t = spec.tile_size;
    let [lo, hi] = spec.panel_fill;
    let mid = 0.5 * (lo + hi);
    let mut best: Option<(f64, Layout)> = None;
    for rows in spec.panel_rows[0]..=spec.panel_rows[1] {
        for cols in spec.panel_cols[0]..=spec.panel_cols[1] {
            for h in 1..t {
                for w in 1..t {
                    let layout = Layout {
                        rows,
                        cols,
                        w,
                        h,
                        gap: 1,
                    };
                    let f = layout.fill(t);
                    if !layout.fits(t) || f < lo || f > hi {
                        continue;
                    }
                    let score = (f - mid).abs();
                    if best.as_ref().is_none_or(|(s, _)| score < *s) {
                        best = Some((score, layout));
                    }
                }
            }
        }
    }
    best.map(|(_, l)| l)
}

pub fn rasterize(plan: &ScenePlan, tile: usize) -> MaskTile {
    let mut labels = vec![0u8; tile * tile];
    for p in &plan.panels {
        for y in p.y..p.y + p.h {
            labels[y * tile + p.x..y * tile + p.x + p.w].fill(1);
        }
    }
    MaskTile::from_raw_unchecked(tile, tile, labels)
}

fn jitter(rng: &mut SplitMix64, base: [f32; 3], amount: f64) -> [f32; 3] {
    base.map(|c| (c as f64 + rng.uniform(-amount, amount)).clamp(0.0, 1.0) as f32)
}

fn paint_rect(
    buf: &mut [[f32; 3]],
    tile: usize,
    x: usize,
    y: usize,
    w: usize,
    h: usize,
    color: [f32; 3],
) {
    for yy in y..(y + h).min(tile) {
        for xx in x..(x + w).min(tile) {
            buf[yy * tile + xx] = color;
        }
    }
}

fn background(spec: &SceneSpec, rng: &mut SplitMix64) -> Vec<[f32; 3]> {
    let t = spec.tile_size;
    let mut buf = vec![[0.0f32; 3]; t * t];
    match spec.background {
        Domain::Rooftop => {
            const ROOFS: [[f32; 3]; 3] =
                [[0.62, 0.36, 0.28], [0.56, 0.53, 0.50], [0.47, 0.31, 0.25]];
            let pick = ROOFS[rng.below(ROOFS.len() as u64) as usize];
            let base = jitter(rng, pick, 0.05);
            let period = rng.range_inclusive(3, 5);
            for y in 0..t {
                let shade = if y % period == 0 { 0.86 } else { 1.0 };
                for x in 0..t {
                    buf[y * t + x] = base.map(|c| c * shade);
                }
            }
            // chimneys and their shadows
            for _ in 0..rng.range_inclusive(0, 3) {
                let w = rng.range_inclusive(2, 4);
                let h = rng.range_inclusive(2, 4);
                let x = rng.range_inclusive(0, t - w);
                let y = rng.range_inclusive(0, t - h);
                let shadow = jitter(rng, [0.22, 0.18, 0.16], 0.04);
                paint_rect(&mut buf, t, x, y, w, h, shadow);
            }
        }
        Domain::Field => {
            let base = jitter(rng, [0.36, 0.46, 0.21], 0.05);
            let fx = rng.uniform(0.05, 0.25);
            let fy = rng.uniform(0.05, 0.25);
            let phase = rng.uniform(0.0, std::f64::consts::TAU);
            for y in 0..t {
                for x in 0..t {
                    let wave = 0.08 * ((x as f64 * fx + y as f64 * fy + phase).sin());
                    buf[y * t + x] = base.map(|c| (c as f64 * (1.0 + wave)).clamp(0.0, 1.0) as f32);
                }
            }
            // tree clumps
            for _ in 0..rng.range_inclusive(1, 4) {
                let r = rng.uniform(1.5, 3.5);
                let cx = rng.uniform(0.0, t as f64);
                let cy = rng.uniform(0.0, t as f64);
                let tree = jitter(rng, [0.13, 0.23, 0.09], 0.03);
                for y in 0..t {
                    for x in 0..t {
                        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                        if dx * dx + dy * dy <= r * r {
                            buf[y * t + x] = tree;
                        }
                    }
                }
            }
        }
    }
    buf
}

/// Render a scene and its exact panel mask. Identical `(spec, seed)` give
/// bit-identical outputs.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<(ImageTile, MaskTile)> {
    let plan = plan_scene(spec, seed)?;
    let t = spec.tile_size;
    let mut rng = SplitMix64::derived(seed, &[tag::SCENE, 1]);
    let mut buf = background(spec, &mut rng);

    let panel = jitter(&mut rng, [0.08, 0.12, 0.28], 0.03);
    let grid = panel.map(|c| (c + 0.09).min(1.0));
    let cell = rng.range_inclusive(3, 4);
    for p in &plan.panels {
        for y in p.y..p.y + p.h {
            for x in p.x..p.x + p.w {
                let on_grid = (x - p.x) % cell == cell - 1 || (y - p.y) % cell == cell - 1;
                buf[y * t + x] = if on_grid { grid } else { panel };
            }
        }
    }

    let noise = spec.noise_level;
    if noise > 0.0 {
        for px in buf.iter_mut() {
            for c in px.iter_mut() {
                *c = (*c as f64 + rng.uniform(-noise, noise)).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok((
        ImageTile::from_raw_unchecked(t, t, buf),
        rasterize(&plan, t),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(domain: Domain) -> SceneSpec {
        SceneSpec {
            tile_size: 32,
            panel_rows: [1, 3],
            panel_cols: [1, 4],
            panel_fill: [0.15, 0.35],
            background: domain,
            noise_level: 0.03,
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let s = spec(Domain::Rooftop);
        assert_eq!(
            generate_scene(&s, 7).unwrap(),
            generate_scene(&s, 7).unwrap()
        );
    }

    #[test]
    fn different_seeds_differ() {
        let s = spec(Domain::Field);
        let (a, _) = generate_scene(&s, 1).unwrap();
        let (b, _) = generate_scene(&s, 2).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn fill_lands_in_requested_range() {
        for domain in [Domain::Rooftop, Domain::Field] {
            let s = spec(domain);
            for seed in 0..200 {
                let (_, mask) = generate_scene(&s, seed).unwrap();
                let f = mask.foreground_fraction();
                assert!(
                    (0.15..=0.35).contains(&f),
                    "{domain:?} seed {seed}: fill {f}"
                );
            }
        }
    }

    #[test]
    fn mask_matches_panel_geometry() {
        let s = spec(Domain::Rooftop);
        for seed in 0..50 {
            let plan = plan_scene(&s, seed).unwrap();
            let (_, mask) = generate_scene(&s, seed).unwrap();
            for y in 0..32 {
                for x in 0..32 {
                    let inside = plan.panels.iter().any(|p| p.contains(x, y));
                    assert_eq!(mask.get(x, y) == 1, inside);
                }
            }
        }
    }

    #[test]
    fn invalid_specs_name_the_field() {
        let mut s = spec(Domain::Field);
        s.panel_fill = [0.4, 0.2];
        match generate_scene(&s, 0) {
            Err(ImageryError::InvalidSpec { field, .. }) => assert_eq!(field, "panel_fill"),
            other => panic!("unexpected {other:?}"),
        }
        let mut s = spec(Domain::Field);
        s.tile_size = 12;
        assert!(matches!(
            generate_scene(&s, 0),
            Err(ImageryError::InvalidSpec {
                field: "tile_size",
                ..
            })
        ));
    }

    #[test]
    fn unattainable_fill_is_reported() {
        let s = SceneSpec {
            tile_size: 16,
            panel_rows: [4, 4],
            panel_cols: [4, 4],
            panel_fill: [0.9, 0.95],
            background: Domain::Rooftop,
            noise_level: 0.0,
        };
        assert!(matches!(
            generate_scene(&s, 0),
            Err(ImageryError::InvalidSpec {
                field: "panel_fill",
                ..
            })
        ));
    }
}
