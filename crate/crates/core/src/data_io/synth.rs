//! Procedural image generators used for training and tests.

use rand::Rng;

use crate::dense_codec::{DepthMap, InstanceMask, InstanceMaskSet, NormalMap};
use crate::error::{Error, Result};
use crate::par;
use crate::raster::RasterImage;
use crate::rng::keyed_rng;
use crate::sparse_codec::{Keypoint, KeypointSet, NormBox, NormPoint, Visibility};
use crate::taskgen::{LabeledBox, Record, TaskId};

/// Eight saturated colors plus black and white, as unit RGB.
pub const SHAPE_COLORS: [[f64; 3]; 10] = [
    [0.9, 0.1, 0.1],
    [0.1, 0.8, 0.2],
    [0.15, 0.3, 0.9],
    [0.95, 0.85, 0.1],
    [0.8, 0.2, 0.8],
    [0.1, 0.8, 0.85],
    [0.95, 0.5, 0.1],
    [0.5, 0.5, 0.5],
    [0.05, 0.05, 0.05],
    [0.95, 0.95, 0.95],
];

/// A flat background with one to three filled rectangles, discs or triangles.
pub fn shapes_image<R: Rng>(height: usize, width: usize, rng: &mut R) -> RasterImage {
    let bg = SHAPE_COLORS[rng.random_range(0..SHAPE_COLORS.len())];
    let mut data = bg.repeat(height * width);
    let n = rng.random_range(1..=3);
    for _ in 0..n {
        let color = SHAPE_COLORS[rng.random_range(0..SHAPE_COLORS.len())];
        let kind = rng.random_range(0..3);
        let cy = rng.random_range(0.0..height as f64);
        let cx = rng.random_range(0.0..width as f64);
        let ry = rng.random_range(height as f64 * 0.1..height as f64 * 0.3);
        let rx = rng.random_range(width as f64 * 0.1..width as f64 * 0.3);
        for y in 0..height {
            for x in 0..width {
                let (dy, dx) = ((y as f64 + 0.5 - cy) / ry, (x as f64 + 0.5 - cx) / rx);
                let inside = match kind {
                    0 => dy.abs() <= 1.0 && dx.abs() <= 1.0,
                    1 => dy * dy + dx * dx <= 1.0,
                    _ => dy <= 1.0 && dy >= -1.0 && dx.abs() <= (dy + 1.0) / 2.0,
                };
                if inside {
                    data[(y * width + x) * 3..(y * width + x) * 3 + 3].copy_from_slice(&color);
                }
            }
        }
    }
    RasterImage::new(height, width, 3, data).expect("colors are in range")
}


/// Named colors used by the toy scenes, stored as 8-bit values so that
/// records survive a PNM round trip unchanged.
pub const NAMED_COLORS: [(&str, [u8; 3]); 6] = [
    ("red", [230, 40, 40]),
    ("green", [40, 200, 60]),
    ("blue", [50, 80, 230]),
    ("yellow", [240, 220, 40]),
    ("magenta", [210, 50, 210]),
    ("cyan", [40, 210, 220]),
];
const BACKGROUND: [u8; 3] = [16, 16, 16];

/// Grid cell side of the square scenes, in pixels.
pub const CELL: usize = 8;
pub const DEFAULT_SIZE: usize = 32;
pub const MAX_DEPTH: f64 = 10.0;

pub const GENERATORS: [&str; 10] = [
    "colored_square_localization",
    "color_caption",
    "color_vqa",
    "gradient_depth",
    "plane_normals",
    "square_segmentation",
    "stick_keypoints",
    "stick_localization",
    "text_qa",
    "text_classification",
];

/// The task a generator's records are meant for.
pub fn generator_task(name: &str) -> Result<TaskId> {
    Ok(match name {
        "colored_square_localization" | "stick_localization" => TaskId::ObjectLocalization,
        "color_caption" => TaskId::ImageCaptioning,
        "color_vqa" => TaskId::Vqa,
        "gradient_depth" => TaskId::DepthEstimation,
        "plane_normals" => TaskId::SurfaceNormals,
        "square_segmentation" => TaskId::ObjectSegmentation,
        "stick_keypoints" => TaskId::KeypointEstimation,
        "text_qa" => TaskId::QuestionAnswering,
        "text_classification" => TaskId::TextClassification,
        other => return Err(Error::Task(format!("unknown synthetic generator {other:?} (known: {GENERATORS:?})"))),
    })
}

/// Class universe a generator draws labels from.
pub fn generator_classes(name: &str) -> Vec<String> {
    match name {
        "stick_localization" | "stick_keypoints" => vec!["person".to_string()],
        _ => NAMED_COLORS.iter().map(|(n, _)| n.to_string()).collect(),
    }
}

fn unit(c: [u8; 3]) -> [f64; 3] {
    c.map(|v| v as f64 / 255.0)
}

fn u8_unit(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// `n` records from generator `name` at the default 32-pixel size.
pub fn synth_generate(name: &str, n: usize, seed: u64) -> Result<Vec<Record>> {
    synth_generate_sized(name, n, seed, DEFAULT_SIZE)
}

/// Record `i` depends only on `(seed, i)`. `size` must be a multiple of 4*[`CELL`]
/// for the square scenes.
pub fn synth_generate_sized(name: &str, n: usize, seed: u64, size: usize) -> Result<Vec<Record>> {
    generator_task(name)?;
    if size < 4 * CELL || size % CELL != 0 {
        return Err(Error::Config(format!("synthetic image size must be a multiple of {CELL} and at least {}", 4 * CELL)));
    }
    let out = par::map_range(n, |i| {
        let mut rng = keyed_rng(seed, 0, i as u64);
        match name {
            "colored_square_localization" => squares_localization(size, &mut rng),
            "color_caption" => color_caption(size, &mut rng),
            "color_vqa" => color_vqa(size, &mut rng),
            "gradient_depth" => gradient_depth(size, &mut rng),
            "plane_normals" => plane_normals(size, &mut rng),
            "square_segmentation" => square_segmentation(size, &mut rng),
            "stick_keypoints" => stick_figure(size, &mut rng),
            "stick_localization" => {
                let mut r = stick_figure(size, &mut rng);
                r.label = Some("person".into());
                r
            }
            "text_qa" => text_qa(&mut rng),
            _ => text_classification(&mut rng),
        }
    });
    Ok(out)
}

struct Square {
    color: usize,
    row: usize,
    col: usize,
}

/// Up to `max` squares in distinct grid cells with distinct colors.
fn place_squares<R: Rng>(size: usize, max: usize, rng: &mut R) -> Vec<Square> {
    let cells = size / CELL;
    let k = rng.random_range(1..=max);
    let cell_idx = rand::seq::index::sample(rng, cells * cells, k);
    let colors = rand::seq::index::sample(rng, NAMED_COLORS.len(), k);
    cell_idx.iter().zip(colors.iter()).map(|(c, color)| Square { color, row: c / cells, col: c % cells }).collect()
}

fn paint_squares(size: usize, squares: &[Square]) -> RasterImage {
    let bg = unit(BACKGROUND);
    let mut r = RasterImage::new(size, size, 3, bg.repeat(size * size)).expect("valid");
    for s in squares {
        let c = unit(NAMED_COLORS[s.color].1);
        for y in s.row * CELL..(s.row + 1) * CELL {
            for x in s.col * CELL..(s.col + 1) * CELL {
                r.set_pixel(y, x, &c);
            }
        }
    }
    r
}

fn square_box(size: usize, s: &Square) -> NormBox {
    let f = |v: usize| (v * CELL) as f64 / size as f64;
    NormBox::new(f(s.row), f(s.col), f(s.row + 1), f(s.col + 1))
}

fn square_boxes(size: usize, squares: &[Square]) -> Vec<LabeledBox> {
    squares.iter().map(|s| LabeledBox { bbox: square_box(size, s), label: NAMED_COLORS[s.color].0.into() }).collect()
}

fn squares_localization<R: Rng>(size: usize, rng: &mut R) -> Record {
    let sq = place_squares(size, 2, rng);
    let label = NAMED_COLORS[sq[rng.random_range(0..sq.len())].color].0.to_string();
    Record { image: Some(paint_squares(size, &sq)), boxes: square_boxes(size, &sq), label: Some(label), ..Default::default() }
}

/// Squares in row-major order named in the caption.
fn color_caption<R: Rng>(size: usize, rng: &mut R) -> Record {
    let mut sq = place_squares(size, 2, rng);
    sq.sort_by_key(|s| (s.row, s.col));
    let text = sq.iter().map(|s| format!("a {} square", NAMED_COLORS[s.color].0)).collect::<Vec<_>>().join(" and ");
    Record { image: Some(paint_squares(size, &sq)), boxes: square_boxes(size, &sq), text: Some(text), ..Default::default() }
}

fn color_vqa<R: Rng>(size: usize, rng: &mut R) -> Record {
    let sq = place_squares(size, 1, rng);
    Record {
        image: Some(paint_squares(size, &sq)),
        question: Some("what color is the square ?".into()),
        answer: Some(NAMED_COLORS[sq[0].color].0.into()),
        boxes: square_boxes(size, &sq),
        ..Default::default()
    }
}

/// Depth ramps along one of four directions. The image shows the same ramp as
/// brightness (near is bright).
fn gradient_depth<R: Rng>(size: usize, rng: &mut R) -> Record {
    let dir = rng.random_range(0..4);
    let near = [1.0, 3.0][rng.random_range(0..2)];
    let far = [7.0, 9.0][rng.random_range(0..2)];
    let mut data = Vec::with_capacity(size * size);
    let mut img = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let t = match dir {
                0 => y,
                1 => size - 1 - y,
                2 => x,
                _ => size - 1 - x,
            } as f64
                / (size - 1) as f64;
            let d = near + (far - near) * t;
            data.push(d);
            let v = u8_unit(1.0 - d / MAX_DEPTH);
            img.extend([v, v, v]);
        }
    }
    Record {
        image: Some(RasterImage::new(size, size, 3, img).expect("valid")),
        depth: Some(DepthMap { height: size, width: size, data, max_depth: MAX_DEPTH }),
        ..Default::default()
    }
}

/// A single plane filling the frame; the image is Lambert shading from a light
/// along the view axis, tinted per normal direction.
fn plane_normals<R: Rng>(size: usize, rng: &mut R) -> Record {
    const DIRS: [[f64; 3]; 5] = [[0.0, 0.0, 1.0], [0.6, 0.0, 0.8], [-0.6, 0.0, 0.8], [0.0, 0.6, 0.8], [0.0, -0.6, 0.8]];
    let k = rng.random_range(0..DIRS.len());
    let n = DIRS[k];
    let shade = n[2];
    let tint = [u8_unit(shade * (0.5 + 0.5 * n[0].abs())), u8_unit(shade * (0.5 + 0.5 * n[1].abs())), u8_unit(shade)];
    Record {
        image: Some(RasterImage::new(size, size, 3, tint.repeat(size * size)).expect("valid")),
        normals: Some(NormalMap { height: size, width: size, data: vec![n; size * size] }),
        ..Default::default()
    }
}

/// One to three squares; same-colored squares are separate instances of one class.
fn square_segmentation<R: Rng>(size: usize, rng: &mut R) -> Record {
    let cells = size / CELL;
    let k = rng.random_range(1..=3);
    let cell_idx = rand::seq::index::sample(rng, cells * cells, k);
    let sq: Vec<Square> = cell_idx
        .iter()
        .map(|c| Square { color: rng.random_range(0..NAMED_COLORS.len()), row: c / cells, col: c % cells })
        .collect();
    let instances = sq
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut mask = vec![false; size * size];
            for y in s.row * CELL..(s.row + 1) * CELL {
                for x in s.col * CELL..(s.col + 1) * CELL {
                    mask[y * size + x] = true;
                }
            }
            // Placeholder colors; builders recolor per class.
            InstanceMask { label: NAMED_COLORS[s.color].0.into(), mask, color: [48, 48, 48 + 64 * (i as u8 % 4)] }
        })
        .collect();
    let label = NAMED_COLORS[sq[rng.random_range(0..sq.len())].color].0.to_string();
    Record {
        image: Some(paint_squares(size, &sq)),
        boxes: square_boxes(size, &sq),
        masks: Some(InstanceMaskSet { height: size, width: size, instances }),
        label: Some(label),
        ..Default::default()
    }
}

/// Joint positions inside the figure box, `(y, x)`, for two poses (arms down, arms up).
const POSES: [[(f64, f64); 17]; 2] = [
    [
        (0.10, 0.50),
        (0.07, 0.45),
        (0.07, 0.55),
        (0.09, 0.40),
        (0.09, 0.60),
        (0.25, 0.30),
        (0.25, 0.70),
        (0.40, 0.20),
        (0.40, 0.80),
        (0.55, 0.15),
        (0.55, 0.85),
        (0.55, 0.38),
        (0.55, 0.62),
        (0.75, 0.35),
        (0.75, 0.65),
        (0.95, 0.30),
        (0.95, 0.70),
    ],
    [
        (0.10, 0.50),
        (0.07, 0.45),
        (0.07, 0.55),
        (0.09, 0.40),
        (0.09, 0.60),
        (0.25, 0.30),
        (0.25, 0.70),
        (0.12, 0.15),
        (0.12, 0.85),
        (0.02, 0.10),
        (0.02, 0.90),
        (0.55, 0.38),
        (0.55, 0.62),
        (0.75, 0.25),
        (0.75, 0.75),
        (0.95, 0.15),
        (0.95, 0.85),
    ],
];

const LIMBS: [(usize, usize); 14] =
    [(0, 5), (0, 6), (5, 6), (5, 7), (7, 9), (6, 8), (8, 10), (5, 11), (6, 12), (11, 12), (11, 13), (13, 15), (12, 14), (14, 16)];

/// A stick figure in one of four grid placements and two poses.
fn stick_figure<R: Rng>(size: usize, rng: &mut R) -> Record {
    let (y0, x0) = [(0.0, 0.0), (0.0, 0.5), (0.25, 0.0), (0.25, 0.5)][rng.random_range(0..4)];
    let pose = &POSES[rng.random_range(0..2)];
    let (bh, bw) = (0.75, 0.5);
    let joints: Vec<NormPoint> = pose.iter().map(|&(y, x)| NormPoint { y: y0 + y * bh, x: x0 + x * bw }).collect();
    let bg = unit(BACKGROUND);
    let mut img = RasterImage::new(size, size, 3, bg.repeat(size * size)).expect("valid");
    let white = [1.0, 1.0, 1.0];
    let s = size as f64;
    for &(a, b) in &LIMBS {
        let (pa, pb) = (joints[a], joints[b]);
        let steps = (4.0 * s) as usize;
        for t in 0..=steps {
            let u = t as f64 / steps as f64;
            let y = ((pa.y + (pb.y - pa.y) * u) * s).floor().min(s - 1.0) as usize;
            let x = ((pa.x + (pb.x - pa.x) * u) * s).floor().min(s - 1.0) as usize;
            img.set_pixel(y, x, &white);
        }
    }
    let region = NormBox::new(y0, x0, y0 + bh, x0 + bw);
    let kp = KeypointSet { joints: joints.into_iter().map(|p| Keypoint { point: Some(p), visibility: Visibility::Full }).collect() };
    Record {
        image: Some(img),
        region: Some(region),
        boxes: vec![LabeledBox { bbox: region, label: "person".into() }],
        keypoints: Some(kp),
        ..Default::default()
    }
}

const OBJECTS: [&str; 6] = ["ball", "car", "cup", "kite", "hat", "door"];

fn text_qa<R: Rng>(rng: &mut R) -> Record {
    let objs = rand::seq::index::sample(rng, OBJECTS.len(), 3);
    let mut facts = Vec::new();
    let mut colors = Vec::new();
    for o in objs.iter() {
        let c = NAMED_COLORS[rng.random_range(0..NAMED_COLORS.len())].0;
        facts.push(format!("the {} is {c} .", OBJECTS[o]));
        colors.push(c);
    }
    let q = rng.random_range(0..3);
    Record {
        text: Some(facts.join(" ")),
        question: Some(format!("what color is the {} ?", OBJECTS[objs.index(q)])),
        answer: Some(colors[q].into()),
        ..Default::default()
    }
}

fn text_classification<R: Rng>(rng: &mut R) -> Record {
    const GOOD: [&str; 3] = ["great", "lovely", "fine"];
    const BAD: [&str; 3] = ["awful", "broken", "dull"];
    let positive = rng.random_bool(0.5);
    let w = if positive { GOOD } else { BAD }[rng.random_range(0..3)];
    Record {
        text: Some(format!("the {} was {w} .", OBJECTS[rng.random_range(0..OBJECTS.len())])),
        question: Some("positive or negative ?".into()),
        answer: Some(if positive { "positive" } else { "negative" }.into()),
        ..Default::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_are_seeded() {
        let a = shapes_image(16, 16, &mut ChaCha8Rng::seed_from_u64(1));
        let b = shapes_image(16, 16, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert_eq!((a.height(), a.width(), a.channels()), (16, 16, 3));
    }

    #[test]
    fn generators_are_deterministic_and_valid() {
        for name in GENERATORS {
            let a = synth_generate(name, 5, 3).unwrap();
            let b = synth_generate(name, 5, 3).unwrap();
            assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
            let task = generator_task(name).unwrap();
            for r in &a {
                crate::taskgen::validate_record(task, r).unwrap();
            }
        }
        assert!(synth_generate("colored_square_localization", 0, 1).unwrap().is_empty());
        assert!(synth_generate("nope", 1, 1).is_err());
    }

    #[test]
    fn square_box_matches_painted_extent() {
        for r in synth_generate("colored_square_localization", 20, 7).unwrap() {
            let img = r.image.as_ref().unwrap();
            for b in &r.boxes {
                let c = NAMED_COLORS.iter().find(|(n, _)| *n == b.label).unwrap().1;
                let c = unit(c);
                let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
                for y in 0..32 {
                    for x in 0..32 {
                        if img.pixel(y, x) == c {
                            y0 = y0.min(y);
                            x0 = x0.min(x);
                            y1 = y1.max(y + 1);
                            x1 = x1.max(x + 1);
                        }
                    }
                }
                let painted = NormBox::new(y0 as f64 / 32.0, x0 as f64 / 32.0, y1 as f64 / 32.0, x1 as f64 / 32.0);
                assert_eq!(painted, b.bbox);
            }
        }
    }

    #[test]
    fn records_survive_interchange() {
        for name in ["gradient_depth", "stick_keypoints", "square_segmentation"] {
            for r in synth_generate(name, 3, 1).unwrap() {
                let s = serde_json::to_string(&r).unwrap();
                assert_eq!(serde_json::from_str::<Record>(&s).unwrap(), r);
            }
        }
    }
}
