//! Points, boxes, labeled boxes and keypoints as location/text token sequences.
//!
//! Grammar (EBNF, `LOC` = location-band id, `TXT` = text-band id):
//!
//! ```text
//! point        = LOC(y) LOC(x) ;
//! box          = LOC(y_min) LOC(x_min) LOC(y_max) LOC(x_max) ;
//! labeled      = { box TXT* } ;
//! joint        = point VIS | NO_COORD NO_COORD "1" ;
//! keypoints    = joint * 17 ;
//! VIS          = "1" | "2" | "3" ;   (single-digit text pieces)
//! ```

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, ParseError, Result};
use crate::text_tok::SubwordModel;
use crate::vocab::{Band, VocabLayout, EOS_ID, NO_COORD_ID};

pub const NUM_JOINTS: usize = 17;
pub const DEFAULT_BINS: usize = 1000;

/// Normalized image point; fractions of width (`x`) and height (`y`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormPoint {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormBox {
    pub y_min: f64,
    pub x_min: f64,
    pub y_max: f64,
    pub x_max: f64,
}

impl NormBox {
    pub fn new(y_min: f64, x_min: f64, y_max: f64, x_max: f64) -> Self {
        Self { y_min, x_min, y_max, x_max }
    }

    pub fn validate(&self) -> Result<()> {
        let c = [self.y_min, self.x_min, self.y_max, self.x_max];
        if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Codec(format!("box {c:?} has coordinates outside [0, 1]")));
        }
        if self.y_min > self.y_max || self.x_min > self.x_max {
            return Err(Error::Codec(format!("inverted box {c:?}")));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.y_max - self.y_min).max(0.0) * (self.x_max - self.x_min).max(0.0)
    }

    pub fn iou(&self, other: &NormBox) -> f64 {
        let inter = NormBox::new(
            self.y_min.max(other.y_min),
            self.x_min.max(other.x_min),
            self.y_max.min(other.y_max),
            self.x_max.min(other.x_max),
        );
        let i = if inter.y_min < inter.y_max && inter.x_min < inter.x_max { inter.area() } else { 0.0 };
        let u = self.area() + other.area() - i;
        if u <= 0.0 {
            0.0
        } else {
            i / u
        }
    }

    pub fn contains(&self, p: NormPoint) -> bool {
        (self.y_min..=self.y_max).contains(&p.y) && (self.x_min..=self.x_max).contains(&p.x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Visibility {
    NotVisible = 1,
    Partial = 2,
    Full = 3,
}

impl TryFrom<u8> for Visibility {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Visibility::NotVisible),
            2 => Ok(Visibility::Partial),
            3 => Ok(Visibility::Full),
            _ => Err(format!("visibility must be 1, 2 or 3, got {v}")),
        }
    }
}

impl From<Visibility> for u8 {
    fn from(v: Visibility) -> u8 {
        v as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub point: Option<NormPoint>,
    pub visibility: Visibility,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub joints: Vec<Keypoint>,
}

impl KeypointSet {
    pub fn new(joints: Vec<Keypoint>) -> Result<Self> {
        let k = Self { joints };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints.len() != NUM_JOINTS {
            return Err(Error::Codec(format!("expected {NUM_JOINTS} joints, got {}", self.joints.len())));
        }
        for (i, j) in self.joints.iter().enumerate() {
            match (j.point, j.visibility) {
                (None, Visibility::Partial | Visibility::Full) => {
                    return Err(Error::Codec(format!("joint {} is visible but has no coordinates", i + 1)))
                }
                (Some(p), _) if !(0.0..=1.0).contains(&p.x) || !(0.0..=1.0).contains(&p.y) => {
                    return Err(Error::Codec(format!("joint {} outside [0, 1]", i + 1)))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// `floor(v * bins)`, clamped to the last bin.
pub fn quantize_coord(v: f64, bins: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Codec(format!("coordinate {v} outside [0, 1]; clip before quantizing")));
    }
    if bins == 0 {
        return Err(Error::Codec("zero bins".into()));
    }
    Ok(((v * bins as f64).floor() as usize).min(bins - 1))
}

/// Bin center `(b + 0.5) / bins`.
pub fn dequantize_bin(b: usize, bins: usize) -> Result<f64> {
    if b >= bins {
        return Err(Error::Codec(format!("bin {b} out of range for {bins} bins")));
    }
    Ok((b as f64 + 0.5) / bins as f64)
}

/// Serializer/parser bound to one vocabulary layout and text model.
#[derive(Clone, Copy)]
pub struct SparseCodec<'a> {
    layout: &'a VocabLayout,
    tok: &'a SubwordModel,
}

impl<'a> SparseCodec<'a> {
    pub fn new(layout: &'a VocabLayout, tok: &'a SubwordModel) -> Self {
        Self { layout, tok }
    }

    pub fn bins(&self) -> usize {
        self.layout.num_locations()
    }

    pub fn coord_token(&self, v: f64) -> Result<usize> {
        self.layout.location_id(quantize_coord(v, self.bins())?)
    }

    fn coord_of(&self, id: usize, pos: usize, what: &str) -> std::result::Result<f64, ParseError> {
        match self.layout.classify(id) {
            Ok((Band::Location, bin)) => Ok(dequantize_bin(bin, self.bins()).expect("bin in band")),
            _ => Err(ParseError::new(pos, "location token", format!("{what}: got id {id}"))),
        }
    }

    pub fn encode_point(&self, p: NormPoint) -> Result<[usize; 2]> {
        Ok([self.coord_token(p.y)?, self.coord_token(p.x)?])
    }

    pub fn encode_box(&self, b: &NormBox) -> Result<[usize; 4]> {
        b.validate()?;
        Ok([self.coord_token(b.y_min)?, self.coord_token(b.x_min)?, self.coord_token(b.y_max)?, self.coord_token(b.x_max)?])
    }

    /// Decodes four location tokens; the flag reports whether an inverted axis was swapped.
    pub fn decode_box(&self, ids: &[usize]) -> std::result::Result<(NormBox, bool), ParseError> {
        self.decode_box_at(ids, 0)
    }

    fn decode_box_at(&self, ids: &[usize], base: usize) -> std::result::Result<(NormBox, bool), ParseError> {
        if ids.len() != 4 {
            return Err(ParseError::new(base + ids.len().min(4), "4 location tokens", format!("got {}", ids.len())));
        }
        let c: Vec<f64> =
            ids.iter().enumerate().map(|(i, &id)| self.coord_of(id, base + i, "box")).collect::<std::result::Result<_, _>>()?;
        let mut b = NormBox::new(c[0], c[1], c[2], c[3]);
        let mut swapped = false;
        if b.y_min > b.y_max {
            std::mem::swap(&mut b.y_min, &mut b.y_max);
            swapped = true;
        }
        if b.x_min > b.x_max {
            std::mem::swap(&mut b.x_min, &mut b.x_max);
            swapped = true;
        }
        Ok((b, swapped))
    }

    /// Concatenates `box label` groups. With `order_seed`, the item order is
    /// shuffled deterministically.
    pub fn encode_labeled_boxes(&self, items: &[(NormBox, String)], order_seed: Option<u64>) -> Result<Vec<usize>> {
        let mut order: Vec<usize> = (0..items.len()).collect();
        if let Some(seed) = order_seed {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        let mut out = Vec::new();
        for i in order {
            let (b, label) = &items[i];
            out.extend(self.encode_box(b)?);
            out.extend(self.tok.encode(label));
        }
        Ok(out)
    }

    /// Greedy parse of `{box TXT*}`. A trailing EOS ends the sequence.
    pub fn parse_labeled_boxes(&self, ids: &[usize]) -> std::result::Result<Vec<(NormBox, String)>, ParseError> {
        let ids = strip_eos(ids);
        let mut out = Vec::new();
        let mut i = 0;
        while i < ids.len() {
            for k in 0..4 {
                match ids.get(i + k) {
                    Some(&id) if self.layout.is_location(id) => {}
                    Some(&id) => {
                        return Err(ParseError::new(i + k, "location token", format!("box coordinate {k} is id {id}")))
                    }
                    None => return Err(ParseError::new(i + k, "location token", "sequence ends inside a box")),
                }
            }
            let (b, _) = self.decode_box_at(&ids[i..i + 4], i)?;
            i += 4;
            let start = i;
            while i < ids.len() && !self.layout.is_location(ids[i]) {
                if !self.layout.is_text(ids[i]) {
                    return Err(ParseError::new(i, "text or location token", format!("got id {}", ids[i])));
                }
                i += 1;
            }
            let label = self
                .tok
                .decode(&ids[start..i])
                .map_err(|e| ParseError::new(start, "label text", e.to_string()))?;
            out.push((b, label));
        }
        Ok(out)
    }

    fn digit(&self, v: Visibility) -> usize {
        let ids = self.tok.encode(&(v as u8).to_string());
        debug_assert_eq!(ids.len(), 1);
        ids[0]
    }

    pub fn encode_keypoints(&self, k: &KeypointSet) -> Result<Vec<usize>> {
        k.validate()?;
        let mut out = Vec::with_capacity(3 * NUM_JOINTS);
        for j in &k.joints {
            match (j.visibility, j.point) {
                (Visibility::NotVisible, _) | (_, None) => {
                    out.extend([NO_COORD_ID, NO_COORD_ID, self.digit(Visibility::NotVisible)])
                }
                (v, Some(p)) => {
                    out.extend(self.encode_point(p)?);
                    out.push(self.digit(v));
                }
            }
        }
        Ok(out)
    }

    /// Parses 17 joint groups. With `force_coords`, a group without coordinates
    /// is an error (generation should have banned the no-coordinate token).
    pub fn decode_keypoints(&self, ids: &[usize], force_coords: bool) -> std::result::Result<KeypointSet, ParseError> {
        let ids = strip_eos(ids);
        let digits = [Visibility::NotVisible, Visibility::Partial, Visibility::Full].map(|v| (self.digit(v), v));
        let mut joints = Vec::with_capacity(NUM_JOINTS);
        for j in 0..NUM_JOINTS {
            let base = 3 * j;
            let g = match ids.get(base..base + 3) {
                Some(g) => g,
                None => {
                    return Err(ParseError::new(ids.len(), "keypoint group", format!("joint {} missing", j + 1)))
                }
            };
            let vis = digits
                .iter()
                .find(|(id, _)| *id == g[2])
                .map(|(_, v)| *v)
                .ok_or_else(|| ParseError::new(base + 2, "visibility digit", format!("joint {}: got id {}", j + 1, g[2])))?;
            let point = if g[0] == NO_COORD_ID && g[1] == NO_COORD_ID {
                if force_coords {
                    return Err(ParseError::new(base, "location token", format!("joint {} has no coordinates", j + 1)));
                }
                if vis != Visibility::NotVisible {
                    return Err(ParseError::new(base + 2, "visibility 1", format!("joint {} lacks coordinates", j + 1)));
                }
                None
            } else {
                let what = format!("joint {}", j + 1);
                let y = self.coord_of(g[0], base, &what)?;
                let x = self.coord_of(g[1], base + 1, &what)?;
                Some(NormPoint { x, y })
            };
            joints.push(Keypoint { point, visibility: vis });
        }
        if ids.len() > 3 * NUM_JOINTS {
            return Err(ParseError::new(3 * NUM_JOINTS, "end of sequence", "trailing tokens after joint 17"));
        }
        Ok(KeypointSet { joints })
    }
}

fn strip_eos(ids: &[usize]) -> &[usize] {
    match ids.iter().position(|&i| i == EOS_ID) {
        Some(p) => &ids[..p],
        None => ids,
    }
}
