//! The shared token-id space.
//!
//! Ids are laid out as `[text | location | vision]`. Inside the text band the
//! first [`RESERVED_TEXT`] ids are fixed specials: pad, EOS, the denoising
//! sentinels and the keypoint "no coordinate" marker.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Text,
    Location,
    Vision,
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Band::Text => "text",
            Band::Location => "location",
            Band::Vision => "vision",
        })
    }
}

pub const PAD_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const NUM_SENTINELS: usize = 100;
pub const FIRST_SENTINEL_ID: usize = 2;
pub const NO_COORD_ID: usize = FIRST_SENTINEL_ID + NUM_SENTINELS;
/// Count of special ids at the bottom of the text band.
pub const RESERVED_TEXT: usize = NO_COORD_ID + 1;

pub fn sentinel_id(i: usize) -> usize {
    assert!(i < NUM_SENTINELS, "sentinel {i} out of range");
    FIRST_SENTINEL_ID + i
}

pub fn sentinel_index(id: usize) -> Option<usize> {
    (FIRST_SENTINEL_ID..NO_COORD_ID).contains(&id).then(|| id - FIRST_SENTINEL_ID)
}

/// Sizes of the three bands. Serialized as `{text_size, num_locations, num_vision}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "LayoutRepr", into = "LayoutRepr")]
pub struct VocabLayout {
    text_size: usize,
    num_locations: usize,
    num_vision: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayoutRepr {
    text_size: usize,
    num_locations: usize,
    num_vision: usize,
}

impl TryFrom<LayoutRepr> for VocabLayout {
    type Error = Error;
    fn try_from(r: LayoutRepr) -> Result<Self> {
        VocabLayout::new(r.text_size, r.num_locations, r.num_vision)
    }
}

impl From<VocabLayout> for LayoutRepr {
    fn from(v: VocabLayout) -> Self {
        LayoutRepr { text_size: v.text_size, num_locations: v.num_locations, num_vision: v.num_vision }
    }
}

impl Default for VocabLayout {
    fn default() -> Self {
        Self { text_size: 32152, num_locations: 1000, num_vision: 16384 }
    }
}

impl VocabLayout {
    pub fn new(text_size: usize, num_locations: usize, num_vision: usize) -> Result<Self> {
        if text_size == 0 {
            return Err(Error::Layout("text band must be non-empty (pad/EOS live there)".into()));
        }
        text_size
            .checked_add(num_locations)
            .and_then(|s| s.checked_add(num_vision))
            .ok_or_else(|| Error::Layout("vocabulary size overflows".into()))?;
        Ok(Self { text_size, num_locations, num_vision })
    }

    pub fn text_size(&self) -> usize {
        self.text_size
    }

    pub fn num_locations(&self) -> usize {
        self.num_locations
    }

    pub fn num_vision(&self) -> usize {
        self.num_vision
    }

    pub fn location_offset(&self) -> usize {
        self.text_size
    }

    pub fn vision_offset(&self) -> usize {
        self.text_size + self.num_locations
    }

    pub fn total(&self) -> usize {
        self.text_size + self.num_locations + self.num_vision
    }

    pub fn band_size(&self, band: Band) -> usize {
        match band {
            Band::Text => self.text_size,
            Band::Location => self.num_locations,
            Band::Vision => self.num_vision,
        }
    }

    pub fn band_offset(&self, band: Band) -> usize {
        match band {
            Band::Text => 0,
            Band::Location => self.location_offset(),
            Band::Vision => self.vision_offset(),
        }
    }

    pub fn global_id(&self, band: Band, local: usize) -> Result<usize> {
        let bound = self.band_size(band);
        if local >= bound {
            return Err(Error::OutOfBand { band, index: local, bound });
        }
        Ok(self.band_offset(band) + local)
    }

    pub fn classify(&self, id: usize) -> Result<(Band, usize)> {
        if id < self.text_size {
            Ok((Band::Text, id))
        } else if id < self.vision_offset() {
            Ok((Band::Location, id - self.text_size))
        } else if id < self.total() {
            Ok((Band::Vision, id - self.vision_offset()))
        } else {
            Err(Error::IdOutOfRange { id, total: self.total() })
        }
    }

    pub fn band_of(&self, id: usize) -> Option<Band> {
        self.classify(id).ok().map(|(b, _)| b)
    }

    pub fn location_id(&self, bin: usize) -> Result<usize> {
        self.global_id(Band::Location, bin)
    }

    pub fn vision_id(&self, code: usize) -> Result<usize> {
        self.global_id(Band::Vision, code)
    }

    pub fn is_location(&self, id: usize) -> bool {
        (self.location_offset()..self.vision_offset()).contains(&id)
    }

    pub fn is_vision(&self, id: usize) -> bool {
        (self.vision_offset()..self.total()).contains(&id)
    }

    pub fn is_text(&self, id: usize) -> bool {
        id < self.text_size
    }
}
