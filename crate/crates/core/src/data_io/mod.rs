//! Dataset manifests, synthetic generators, raster files and example interchange.

pub mod manifest;
pub mod pnm;
pub mod synth;

pub use manifest::{load_manifest, Dataset, GeneratorSpec, Manifest};
pub use pnm::{read_raster, write_raster};
pub use synth::synth_generate;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::RasterImage;

/// Base-64 of the binary PNM encoding.
pub fn raster_to_base64(r: &RasterImage) -> String {
    STANDARD.encode(pnm::encode_pnm(r))
}

pub fn raster_from_base64(s: &str) -> Result<RasterImage> {
    let bytes = STANDARD.decode(s).map_err(|e| Error::Format { offset: 0, message: format!("bad base64 raster: {e}") })?;
    pnm::decode_pnm(&bytes)
}

/// Serde adapter storing `Option<RasterImage>` as a base-64 PNM string.
pub mod opt_raster_b64 {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::raster::RasterImage;

    pub fn serialize<S: Serializer>(r: &Option<RasterImage>, s: S) -> Result<S::Ok, S::Error> {
        match r {
            Some(r) => s.serialize_some(&super::raster_to_base64(r)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<RasterImage>, D::Error> {
        match Option::<String>::deserialize(d)? {
            Some(b) => super::raster_from_base64(&b).map(Some).map_err(serde::de::Error::custom),
            None => Ok(None),
        }
    }
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads line-delimited JSON, skipping blank lines. Errors name the 1-based line.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Schema { pointer: format!("line {}", i + 1), message: e.to_string() })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        let recs = synth::synth_generate("color_caption", 4, 2).unwrap();
        write_jsonl(&p, &recs).unwrap();
        assert_eq!(read_jsonl::<crate::taskgen::Record>(&p).unwrap(), recs);
        std::fs::write(&p, "{}\nnot json\n").unwrap();
        let e = read_jsonl::<crate::taskgen::Record>(&p).unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
    }
}
