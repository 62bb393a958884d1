//! Fixed anchor lattice over the image.

use crate::geom::BBox;

/// Aspect ratio as a `width:height` pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ratio {
    pub w: f64,
    pub h: f64,
}

impl Ratio {
    pub const fn new(w: f64, h: f64) -> Self {
        Self { w, h }
    }

    pub fn value(&self) -> f64 {
        self.w / self.h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSpec {
    pub grid_w: usize,
    pub grid_h: usize,
    /// Square side lengths in pixels.
    pub scales: Vec<f64>,
    pub ratios: Vec<Ratio>,
    pub image_w: u32,
    pub image_h: u32,
}

impl AnchorSpec {
    pub fn anchors_per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    pub fn count(&self) -> usize {
        self.grid_w * self.grid_h * self.anchors_per_cell()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.grid_w * self.grid_h == 0 {
            return Err("anchor grid must have at least one cell".into());
        }
        if self.scales.is_empty() || self.ratios.is_empty() {
            return Err("anchor scales and ratios must be non-empty".into());
        }
        if self.scales.iter().any(|&s| !(s > 0.0)) || self.ratios.iter().any(|r| !(r.w > 0.0 && r.h > 0.0)) {
            return Err("anchor scales and ratios must be positive".into());
        }
        if self.image_w == 0 || self.image_h == 0 {
            return Err("image size must be positive".into());
        }
        Ok(())
    }
}

/// One anchor per (cell, scale, ratio), centered on the cell center, in
/// row-major cell order, then scale-major, then ratio-major. Aspect ratios
/// preserve area: `w = s * sqrt(r)`, `h = s / sqrt(r)`. Anchors crossing the
/// image border are kept as-is.
pub fn generate_anchors(spec: &AnchorSpec) -> Vec<BBox> {
    let pitch_x = spec.image_w as f64 / spec.grid_w as f64;
    let pitch_y = spec.image_h as f64 / spec.grid_h as f64;
    let shapes: Vec<(f64, f64)> = spec
        .scales
        .iter()
        .flat_map(|&s| {
            spec.ratios.iter().map(move |r| {
                let root = r.value().sqrt();
                (s * root, s / root)
            })
        })
        .collect();
    let mut anchors = Vec::with_capacity(spec.count());
    for gy in 0..spec.grid_h {
        let cy = (gy as f64 + 0.5) * pitch_y;
        for gx in 0..spec.grid_w {
            let cx = (gx as f64 + 0.5) * pitch_x;
            anchors.extend(shapes.iter().map(|&(w, h)| BBox::new(cx, cy, w, h)));
        }
    }
    anchors
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(grid: (usize, usize), scales: &[f64], ratios: &[Ratio], image: (u32, u32)) -> AnchorSpec {
        AnchorSpec {
            grid_w: grid.0,
            grid_h: grid.1,
            scales: scales.to_vec(),
            ratios: ratios.to_vec(),
            image_w: image.0,
            image_h: image.1,
        }
    }

    #[test]
    fn single_anchor() {
        let a = generate_anchors(&spec((1, 1), &[32.0], &[Ratio::new(1.0, 1.0)], (32, 32)));
        assert_eq!(a, vec![BBox::new(16.0, 16.0, 32.0, 32.0)]);
    }

    #[test]
    fn wide_ratio_preserves_area() {
        let a = generate_anchors(&spec((1, 1), &[32.0], &[Ratio::new(2.0, 1.0)], (64, 64)));
        assert!((a[0].w - 45.254834).abs() < 1e-5);
        assert!((a[0].h - 22.627417).abs() < 1e-5);
        assert!((a[0].area() - 1024.0).abs() < 1e-9);
    }

    #[test]
    fn ordering_is_cell_then_scale_then_ratio() {
        let ratios = [Ratio::new(1.0, 2.0), Ratio::new(2.0, 1.0)];
        let a = generate_anchors(&spec((2, 1), &[8.0, 16.0], &ratios, (20, 10)));
        assert_eq!(a.len(), 8);
        assert!(a[..4].iter().all(|b| b.cx == 5.0));
        assert!(a[4..].iter().all(|b| b.cx == 15.0));
        assert!(a[0].w < a[0].h && a[1].w > a[1].h);
        assert!((a[2].area() - 256.0).abs() < 1e-9);
    }

    #[test]
    fn validation() {
        assert!(spec((0, 3), &[8.0], &[Ratio::new(1.0, 1.0)], (10, 10)).validate().is_err());
        assert!(spec((1, 1), &[], &[Ratio::new(1.0, 1.0)], (10, 10)).validate().is_err());
        assert!(spec((1, 1), &[8.0], &[Ratio::new(1.0, 1.0)], (10, 10)).validate().is_ok());
    }
}
