use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Annotation, Condition, Sample, SceneSpec};
use crate::geom::{iou, BBox};
use crate::tensor::Tensor;

type Rgb = [f32; 3];

struct Canvas {
    w: usize,
    h: usize,
    data: Vec<f32>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        Self { w, h, data: vec![0.0; 3 * w * h] }
    }

    fn blend(&mut self, x: usize, y: usize, c: Rgb, alpha: f32) {
        let plane = self.w * self.h;
        let i = y * self.w + x;
        for (ch, &v) in c.iter().enumerate() {
            let p = &mut self.data[ch * plane + i];
            *p = *p * (1.0 - alpha) + v * alpha;
        }
    }

    /// Pixels whose centers fall in `[x0, x1) x [y0, y1)` and satisfy `inside`.
    fn fill_where(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, c: Rgb, alpha: f32, inside: impl Fn(f64, f64) -> bool) {
        let xs = (x0 - 0.5).ceil().max(0.0) as usize;
        let ys = (y0 - 0.5).ceil().max(0.0) as usize;
        let xe = ((x1 - 0.5).ceil().max(0.0) as usize).min(self.w);
        let ye = ((y1 - 0.5).ceil().max(0.0) as usize).min(self.h);
        for y in ys..ye {
            for x in xs..xe {
                if inside(x as f64 + 0.5, y as f64 + 0.5) {
                    self.blend(x, y, c, alpha);
                }
            }
        }
    }

    fn fill_rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, c: Rgb) {
        self.fill_where(x0, y0, x1, y1, c, 1.0, |_, _| true);
    }

    fn fill_rounded(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, r: f64, c: Rgb) {
        self.fill_where(x0, y0, x1, y1, c, 1.0, |px, py| {
            let dx = (x0 + r - px).max(px - (x1 - r)).max(0.0);
            let dy = (y0 + r - py).max(py - (y1 - r)).max(0.0);
            dx * dx + dy * dy <= r * r
        });
    }
}

struct Look {
    road: Rgb,
    noise: f32,
    body_gain: f32,
    glass: Rgb,
    lights: Rgb,
}

fn look(condition: Condition) -> Look {
    match condition {
        Condition::Sunny => Look { road: [0.62, 0.62, 0.6], noise: 0.03, body_gain: 1.0, glass: [0.15, 0.2, 0.3], lights: [0.9, 0.9, 0.8] },
        Condition::Cloudy => Look { road: [0.48, 0.5, 0.52], noise: 0.04, body_gain: 0.8, glass: [0.2, 0.22, 0.28], lights: [0.8, 0.8, 0.75] },
        Condition::Rainy => Look { road: [0.38, 0.4, 0.44], noise: 0.07, body_gain: 0.7, glass: [0.18, 0.2, 0.25], lights: [0.85, 0.85, 0.8] },
        Condition::Night => Look { road: [0.1, 0.1, 0.13], noise: 0.04, body_gain: 0.35, glass: [0.03, 0.03, 0.05], lights: [1.0, 0.95, 0.6] },
    }
}

const PALETTE: [Rgb; 8] = [
    [0.85, 0.1, 0.1],
    [0.1, 0.3, 0.85],
    [0.95, 0.95, 0.95],
    [0.1, 0.1, 0.1],
    [0.9, 0.75, 0.1],
    [0.2, 0.6, 0.25],
    [0.55, 0.55, 0.6],
    [0.6, 0.3, 0.15],
];

/// Integer pixel rectangle `(x, y, w, h)`.
type Rect = (i64, i64, i64, i64);

fn rect_box(r: Rect) -> BBox {
    BBox::from_xywh(r.0 as f64, r.1 as f64, r.2 as f64, r.3 as f64)
}

fn draw_vehicle(canvas: &mut Canvas, r: Rect, body: Rgb, lk: &Look) {
    let (x, y, w, h) = (r.0 as f64, r.1 as f64, r.2 as f64, r.3 as f64);
    let body = body.map(|v| v * lk.body_gain);
    canvas.fill_rounded(x, y, x + w, y + h, 0.25 * w.min(h), body);
    canvas.fill_rect(x + 0.15 * w, y + 0.12 * h, x + 0.85 * w, y + 0.42 * h, lk.glass);
    let tire = [0.04, 0.04, 0.04];
    canvas.fill_rect(x + 0.12 * w, y + 0.85 * h, x + 0.32 * w, y + h, tire);
    canvas.fill_rect(x + 0.68 * w, y + 0.85 * h, x + 0.88 * w, y + h, tire);
    canvas.fill_rect(x + 0.04 * w, y + 0.6 * h, x + 0.16 * w, y + 0.75 * h, lk.lights);
    canvas.fill_rect(x + 0.84 * w, y + 0.6 * h, x + 0.96 * w, y + 0.75 * h, lk.lights);
}

fn sample_size(spec: &SceneSpec, rng: &mut ChaCha8Rng, max_w: f64, max_h: f64) -> (i64, i64) {
    let w = rng.random_range(spec.vehicle_size.0..=spec.vehicle_size.1).min(max_w);
    let aspect = rng.random_range(spec.vehicle_aspect.0..=spec.vehicle_aspect.1);
    let h = (w / aspect).min(max_h);
    ((w.round() as i64).max(2), (h.round() as i64).max(2))
}

fn place(rng: &mut ChaCha8Rng, w: i64, h: i64, img_w: i64, img_h: i64) -> (i64, i64) {
    (rng.random_range(0..=(img_w - w).max(0)), rng.random_range(0..=(img_h - h).max(0)))
}

/// Renders one scene. The output is a pure function of `(spec, index)`;
/// pixel values are quantized to multiples of 1/255 so the PPM round trip
/// is exact.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.data_seed);
    rng.set_stream(index);
    let (img_w, img_h) = (spec.image_w as i64, spec.image_h as i64);
    let condition = spec.conditions[rng.random_range(0..spec.conditions.len())];
    let lk = look(condition);
    let mut canvas = Canvas::new(img_w as usize, img_h as usize);

    // Road surface with a vertical shading gradient and dashed lane marks.
    for y in 0..img_h as usize {
        let shade = 0.9 + 0.2 * y as f32 / img_h as f32;
        canvas.fill_rect(0.0, y as f64, img_w as f64, y as f64 + 1.0, lk.road.map(|v| (v * shade).min(1.0)));
    }
    let lanes = rng.random_range(1..=3);
    for _ in 0..lanes {
        let ly = rng.random_range(0..img_h) as f64;
        let dash = rng.random_range(6..12) as f64;
        let mut lx = -rng.random_range(0.0..dash * 2.0);
        while lx < img_w as f64 {
            canvas.fill_rect(lx, ly, lx + dash, ly + 1.0, lk.road.map(|v| (v + 0.25).min(1.0)));
            lx += dash * 2.0;
        }
    }

    let mut annotations = Vec::new();

    // Ignore regions: hatched rectangles hiding unlabeled vehicles.
    let n_ignore = rng.random_range(spec.ignore_count.0..=spec.ignore_count.1);
    let mut ignores: Vec<Rect> = Vec::new();
    for _ in 0..n_ignore {
        let w = rng.random_range(spec.vehicle_size.0 * 1.2..=spec.vehicle_size.1 * 1.5).min(img_w as f64 / 2.0).round() as i64;
        let h = rng.random_range(spec.vehicle_size.0..=spec.vehicle_size.1).min(img_h as f64 / 2.0).round() as i64;
        let (x, y) = place(&mut rng, w, h, img_w, img_h);
        let region = (x, y, w, h);
        for _ in 0..rng.random_range(1..=2) {
            let (vw, vh) = sample_size(spec, &mut rng, w as f64, h as f64);
            let (vx, vy) = place(&mut rng, vw, vh, w, h);
            let body = PALETTE[rng.random_range(0..PALETTE.len())];
            draw_vehicle(&mut canvas, (x + vx, y + vy, vw, vh), body, &lk);
        }
        let (x0, y0) = (x as f64, y as f64);
        canvas.fill_where(x0, y0, x0 + w as f64, y0 + h as f64, [1.0, 1.0, 1.0], 0.45, |px, py| {
            (px + py).rem_euclid(6.0) < 2.0
        });
        ignores.push(region);
        annotations.push(Annotation::ignore_region(rect_box(region)));
    }
    let centered_in_ignore = |r: &Rect| {
        let (cx, cy) = (r.0 as f64 + r.2 as f64 / 2.0, r.1 as f64 + r.3 as f64 / 2.0);
        ignores.iter().any(|&g| rect_box(g).contains_point(cx, cy))
    };

    // Labeled vehicles: exact count, some deliberately overlapping.
    let n = rng.random_range(spec.vehicle_count.0..=spec.vehicle_count.1);
    let mut vehicles: Vec<(Rect, Rgb)> = Vec::with_capacity(n);
    while vehicles.len() < n {
        let (w, h) = sample_size(spec, &mut rng, img_w as f64, img_h as f64);
        let occlude = !vehicles.is_empty() && rng.random_bool(spec.occlusion_probability);
        let body = PALETTE[rng.random_range(0..PALETTE.len())];
        let mut chosen = None;
        for attempt in 0..1000 {
            let (x, y) = if occlude {
                let (o, _) = vehicles[rng.random_range(0..vehicles.len())];
                let dx = (rng.random_range(0.3..0.7) * o.2 as f64) as i64 * if rng.random_bool(0.5) { 1 } else { -1 };
                let dy = (rng.random_range(0.1..0.4) * o.3 as f64) as i64 * if rng.random_bool(0.5) { 1 } else { -1 };
                ((o.0 + dx).clamp(0, img_w - w), (o.1 + dy).clamp(0, img_h - h))
            } else {
                place(&mut rng, w, h, img_w, img_h)
            };
            let r = (x, y, w, h);
            let limit = if occlude || attempt >= 50 { 0.5 } else { 0.05 };
            let crowded = vehicles.iter().any(|&(o, _)| iou(&rect_box(o), &rect_box(r)) >= limit);
            if !centered_in_ignore(&r) && (!crowded || attempt == 999) {
                chosen = Some(r);
                break;
            }
        }
        if let Some(r) = chosen {
            vehicles.push((r, body));
        }
    }
    // Painter's order: vehicles lower in the frame are nearer and drawn last.
    let mut order: Vec<usize> = (0..vehicles.len()).collect();
    order.sort_by_key(|&i| (vehicles[i].0 .1 + vehicles[i].0 .3, i));
    for &i in &order {
        draw_vehicle(&mut canvas, vehicles[i].0, vehicles[i].1, &lk);
    }
    annotations.extend(vehicles.iter().map(|&(r, _)| Annotation::vehicle(rect_box(r))));

    if condition == Condition::Rainy {
        for _ in 0..(img_w * img_h / 150) {
            let (sx, sy) = (rng.random_range(0..img_w) as f64, rng.random_range(0..img_h) as f64);
            let len = rng.random_range(3..7);
            for k in 0..len {
                let (px, py) = (sx + k as f64 * 0.5, sy + k as f64);
                canvas.fill_where(px, py, px + 1.0, py + 1.0, [0.8, 0.82, 0.9], 0.35, |_, _| true);
            }
        }
    }

    let noise = lk.noise;
    for v in canvas.data.iter_mut() {
        let jitter = (rng.random::<f32>() - 0.5) * 2.0 * noise;
        *v = ((*v + jitter).clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }

    Sample {
        id: format!("{index:06}"),
        image: Tensor::new(vec![3, img_h as usize, img_w as usize], canvas.data).expect("canvas shape"),
        annotations,
        condition,
    }
}
