//! Span corruption for text and patch masking for images.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::vocab::{sentinel_id, sentinel_index, NUM_SENTINELS};

pub const DEFAULT_NOISE_RATE: f64 = 0.15;
pub const DEFAULT_MEAN_SPAN: f64 = 3.0;
pub const DEFAULT_IMAGE_MASK_RATE: f64 = 0.75;

/// Splits `total` items into `parts` positive lengths with uniformly random cut points.
fn random_partition<R: Rng>(total: usize, parts: usize, rng: &mut R) -> Vec<usize> {
    if parts <= 1 {
        return vec![total];
    }
    let mut cuts: Vec<usize> = sample(rng, total - 1, parts - 1).into_iter().map(|c| c + 1).collect();
    cuts.sort_unstable();
    let mut prev = 0;
    let mut out = Vec::with_capacity(parts);
    for c in cuts.into_iter().chain(std::iter::once(total)) {
        out.push(c - prev);
        prev = c;
    }
    out
}

/// Number of tokens dropped from an `n`-token sequence.
pub fn noise_count(n: usize, rate: f64) -> usize {
    if n < 2 || rate <= 0.0 {
        return 0;
    }
    ((n as f64 * rate).round() as usize).clamp(1, n - 1)
}

/// Drops `noise_count(len, rate)` tokens in spans of mean length `mean_span`.
/// Each dropped span becomes one sentinel in the input; the target lists
/// every sentinel followed by the tokens it replaced, then a closing sentinel.
pub fn corrupt_text_spans<R: Rng>(ids: &[usize], rng: &mut R, rate: f64, mean_span: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if ids.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let n = ids.len();
    let noise = noise_count(n, rate);
    if noise == 0 {
        return Ok((ids.to_vec(), vec![sentinel_id(0)]));
    }
    let keep = n - noise;
    let spans = ((noise as f64 / mean_span.max(1.0)).round() as usize).clamp(1, noise.min(keep));
    if spans + 1 > NUM_SENTINELS {
        return Err(Error::Task(format!(
            "span corruption needs {} sentinels but only {NUM_SENTINELS} exist; split the text into shorter chunks",
            spans + 1
        )));
    }
    let noise_lens = random_partition(noise, spans, rng);
    let keep_lens = random_partition(keep, spans, rng);
    let mut input = Vec::with_capacity(keep + spans);
    let mut target = Vec::with_capacity(noise + spans + 1);
    let mut pos = 0;
    for (i, (&k, &m)) in keep_lens.iter().zip(&noise_lens).enumerate() {
        input.extend_from_slice(&ids[pos..pos + k]);
        pos += k;
        input.push(sentinel_id(i));
        target.push(sentinel_id(i));
        target.extend_from_slice(&ids[pos..pos + m]);
        pos += m;
    }
    target.push(sentinel_id(spans));
    Ok((input, target))
}

/// Reinserts the spans of `target` into `input`.
pub fn resplice(input: &[usize], target: &[usize]) -> Result<Vec<usize>> {
    let mut spans: Vec<Vec<usize>> = Vec::new();
    for &t in target {
        match sentinel_index(t) {
            Some(i) if i == spans.len() => spans.push(Vec::new()),
            Some(i) => return Err(Error::Task(format!("target sentinel {i} out of order"))),
            None => spans
                .last_mut()
                .ok_or_else(|| Error::Task("target does not start with a sentinel".into()))?
                .push(t),
        }
    }
    let mut out = Vec::new();
    for &t in input {
        match sentinel_index(t) {
            Some(i) => out.extend(spans.get(i).ok_or_else(|| Error::Task(format!("sentinel {i} missing from target")))?),
            None => out.push(t),
        }
    }
    Ok(out)
}

/// Marks `floor(rate * n)` patches, uniformly without replacement.
pub fn mask_image_patches<R: Rng>(n: usize, rng: &mut R, rate: f64) -> Vec<bool> {
    let k = ((rate.clamp(0.0, 1.0) * n as f64).floor() as usize).min(n);
    let mut m = vec![false; n];
    for i in sample(rng, n, k) {
        m[i] = true;
    }
    m
}
