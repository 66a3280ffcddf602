//! Dense per-pixel labels as RGB rasters, and the segmentation clean-up pass.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RasterImage;

pub const DEFAULT_MAX_DEPTH: f64 = 10.0;
/// Maximum L-infinity distance (in 1/255 units) for a pixel to snap to a palette color.
pub const SNAP_THRESHOLD_8BIT: f64 = 12.0;
/// Components smaller than this are dropped.
pub const MIN_COMPONENT_PIXELS: usize = 8;
pub const PALETTE_SIZE: usize = 64;
const PALETTE_LEVELS: [u8; 4] = [48, 112, 176, 240];

pub type Rgb = [u8; 3];

/// Palette entry `i` has levels `(i / 16, (i / 4) % 4, i % 4)` drawn from
/// `{48, 112, 176, 240}`; none is black, and any two differ by at least 64 in
/// some channel.
pub fn palette() -> Vec<Rgb> {
    (0..PALETTE_SIZE).map(|i| [PALETTE_LEVELS[i / 16], PALETTE_LEVELS[(i / 4) % 4], PALETTE_LEVELS[i % 4]]).collect()
}

/// Text name of a palette color, e.g. `r0g3b1`; `None` if not in the palette.
pub fn color_name(c: Rgb) -> Option<String> {
    let lvl = |v: u8| PALETTE_LEVELS.iter().position(|&l| l == v);
    Some(format!("r{}g{}b{}", lvl(c[0])?, lvl(c[1])?, lvl(c[2])?))
}

pub fn color_from_name(name: &str) -> Option<Rgb> {
    let b = name.as_bytes();
    if b.len() != 6 || b[0] != b'r' || b[2] != b'g' || b[4] != b'b' {
        return None;
    }
    let d = |c: u8| (b'0'..=b'3').contains(&c).then(|| PALETTE_LEVELS[(c - b'0') as usize]);
    Some([d(b[1])?, d(b[3])?, d(b[5])?])
}

pub fn rgb_to_unit(c: Rgb) -> [f64; 3] {
    c.map(|v| v as f64 / 255.0)
}

/// Picks `n` distinct palette colors in a seed-determined order.
pub fn assign_instance_colors(n: usize, seed: u64) -> Result<Vec<Rgb>> {
    if n > PALETTE_SIZE {
        return Err(Error::Codec(format!("{n} instances exceed palette capacity {PALETTE_SIZE}")));
    }
    let mut p = palette();
    p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    p.truncate(n);
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    /// Meters, row-major.
    pub data: Vec<f64>,
    pub max_depth: f64,
}

impl DepthMap {
    pub fn rmse(&self, other: &DepthMap) -> Result<f64> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Shape("depth maps differ in size".into()));
        }
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok((s / self.data.len() as f64).sqrt())
    }
}

pub fn depth_to_raster(d: &DepthMap) -> Result<RasterImage> {
    if d.max_depth <= 0.0 {
        return Err(Error::Codec(format!("max_depth must be positive, got {}", d.max_depth)));
    }
    RasterImage::from_clipped(d.height, d.width, 1, d.data.iter().map(|v| v / d.max_depth).collect())
}

pub fn raster_to_depth(r: &RasterImage, max_depth: f64) -> Result<DepthMap> {
    if r.channels() != 1 {
        return Err(Error::Codec(format!("depth raster must be single-channel, got {}", r.channels())));
    }
    Ok(DepthMap { height: r.height(), width: r.width(), data: r.data().iter().map(|v| v * max_depth).collect(), max_depth })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<[f64; 3]>,
}

impl NormalMap {
    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.height * self.width {
            return Err(Error::Shape("normal map size mismatch".into()));
        }
        for n in &self.data {
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if (len - 1.0).abs() > 1e-3 {
                return Err(Error::Codec(format!("normal {n:?} is not unit length")));
            }
        }
        Ok(())
    }
}

pub fn normals_to_raster(n: &NormalMap) -> Result<RasterImage> {
    n.validate()?;
    let data = n.data.iter().flat_map(|v| v.map(|c| (c + 1.0) / 2.0)).collect();
    RasterImage::from_clipped(n.height, n.width, 3, data)
}

/// Inverse of [`normals_to_raster`]. Returns the map and the indices of pixels
/// whose decoded vector was zero (replaced by `(0, 0, 1)`).
pub fn raster_to_normals(r: &RasterImage) -> Result<(NormalMap, Vec<usize>)> {
    if r.channels() != 3 {
        return Err(Error::Codec(format!("normal raster must have 3 channels, got {}", r.channels())));
    }
    let mut flagged = Vec::new();
    let data = r
        .data()
        .chunks(3)
        .enumerate()
        .map(|(i, p)| {
            let v = [2.0 * p[0] - 1.0, 2.0 * p[1] - 1.0, 2.0 * p[2] - 1.0];
            let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if len < 1e-9 {
                flagged.push(i);
                [0.0, 0.0, 1.0]
            } else {
                v.map(|c| c / len)
            }
        })
        .collect();
    Ok((NormalMap { height: r.height(), width: r.width(), data }, flagged))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMask {
    pub label: String,
    /// Row-major `height x width`.
    pub mask: Vec<bool>,
    pub color: Rgb,
}

impl InstanceMask {
    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn iou(&self, other: &InstanceMask) -> f64 {
        mask_iou(&self.mask, &other.mask)
    }
}

pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut i, mut u) = (0usize, 0usize);
    for (x, y) in a.iter().zip(b) {
        i += (*x && *y) as usize;
        u += (*x || *y) as usize;
    }
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMaskSet {
    pub height: usize,
    pub width: usize,
    pub instances: Vec<InstanceMask>,
}

impl InstanceMaskSet {
    pub fn validate(&self) -> Result<()> {
        for (i, m) in self.instances.iter().enumerate() {
            if m.mask.len() != self.height * self.width {
                return Err(Error::Shape(format!("mask {i} has wrong size")));
            }
            if self.instances[..i].iter().any(|o| o.color == m.color) {
                return Err(Error::Codec(format!("instance {i} reuses color {:?}", m.color)));
            }
        }
        Ok(())
    }
}

/// Paints instances on black (later instances win overlaps) and returns the
/// prompt fragment `"<color> : <class> , ..."` in instance order.
pub fn seg_to_raster(m: &InstanceMaskSet) -> Result<(RasterImage, String)> {
    m.validate()?;
    let mut r = RasterImage::filled(m.height, m.width, 3, 0.0)?;
    let mut parts = Vec::new();
    for inst in &m.instances {
        let c = rgb_to_unit(inst.color);
        for (i, &on) in inst.mask.iter().enumerate() {
            if on {
                r.set_pixel(i / m.width, i % m.width, &c);
            }
        }
        let name = color_name(inst.color).unwrap_or_else(|| format!("{:?}", inst.color));
        parts.push(format!("{name} : {}", inst.label));
    }
    Ok((r, parts.join(" , ")))
}

/// Snaps pixels to `palette`, drops 4-connected components under
/// [`MIN_COMPONENT_PIXELS`], and returns one mask per surviving color labelled
/// with the color's name.
pub fn raster_to_masks(r: &RasterImage, palette: &[Rgb]) -> Result<InstanceMaskSet> {
    if r.channels() != 3 {
        return Err(Error::Codec(format!("segmentation raster must have 3 channels, got {}", r.channels())));
    }
    let (h, w) = (r.height(), r.width());
    let thr = SNAP_THRESHOLD_8BIT / 255.0 + 1e-9;
    let units: Vec<[f64; 3]> = palette.iter().map(|&c| rgb_to_unit(c)).collect();
    let labels: Vec<Option<usize>> = r
        .data()
        .chunks(3)
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (i, u) in units.iter().enumerate() {
                let d = (0..3).map(|c| (p[c] - u[c]).abs()).fold(0.0, f64::max);
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((i, d));
                }
            }
            best.filter(|&(_, d)| d <= thr).map(|(i, _)| i)
        })
        .collect();
    let comps = label_components(&labels, h, w);
    let mut instances: Vec<InstanceMask> = Vec::new();
    for comp in comps.into_iter().filter(|c| c.pixels.len() >= MIN_COMPONENT_PIXELS) {
        let color = palette[comp.class];
        let inst = match instances.iter_mut().find(|m| m.color == color) {
            Some(m) => m,
            None => {
                instances.push(InstanceMask {
                    label: color_name(color).unwrap_or_default(),
                    mask: vec![false; h * w],
                    color,
                });
                instances.last_mut().expect("just pushed")
            }
        };
        for p in comp.pixels {
            inst.mask[p] = true;
        }
    }
    Ok(InstanceMaskSet { height: h, width: w, instances })
}

#[derive(Debug)]
pub struct Component {
    pub class: usize,
    pub pixels: Vec<usize>,
}

/// 4-connected components over pixels sharing the same `Some` label, in
/// row-major order of their first pixel.
pub fn label_components(labels: &[Option<usize>], h: usize, w: usize) -> Vec<Component> {
    let mut seen = vec![false; labels.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..labels.len() {
        let Some(class) = labels[start] else { continue };
        if seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        while let Some(p) = stack.pop() {
            pixels.push(p);
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if !seen[q] && labels[q] == Some(class) {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        pixels.sort_unstable();
        out.push(Component { class, pixels });
    }
    out
}
