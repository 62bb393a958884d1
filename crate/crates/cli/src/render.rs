//! Box overlays drawn directly into image tensors.

use evobox::{BBox, Tensor};

pub const VEHICLE_COLOR: [f32; 3] = [0.0, 1.0, 0.0];
pub const IGNORE_COLOR: [f32; 3] = [1.0, 0.0, 1.0];
const THICKNESS: i64 = 2;

/// Draws the outline of `b` (2 px, inside the box edge) in `color`; the
/// parts outside the image are clipped away.
pub fn draw_box(image: &mut Tensor<f32>, b: &BBox, color: [f32; 3]) {
    let (h, w) = (image.shape()[1] as i64, image.shape()[2] as i64);
    let x0 = b.x_min().round() as i64;
    let y0 = b.y_min().round() as i64;
    let x1 = b.x_max().round() as i64 - 1;
    let y1 = b.y_max().round() as i64 - 1;
    if x1 < x0 || y1 < y0 {
        return;
    }
    let plane = (h * w) as usize;
    let data = image.data_mut();
    let on_edge = |x: i64, y: i64| x - x0 < THICKNESS || x1 - x < THICKNESS || y - y0 < THICKNESS || y1 - y < THICKNESS;
    for y in y0.max(0)..=y1.min(h - 1) {
        for x in x0.max(0)..=x1.min(w - 1) {
            if on_edge(x, y) {
                let i = (y * w + x) as usize;
                for (c, &v) in color.iter().enumerate() {
                    data[c * plane + i] = v;
                }
            }
        }
    }
}
