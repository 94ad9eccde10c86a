//! Synthetic single-example scenes and segmentation metrics.
//!
//! The generators are pure functions of their configuration and seed, so
//! experiments are reproducible byte for byte.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CoreError, Result};
use crate::tensor::{Real, Tensor};

/// A generated scene: multi-channel data, per-pixel class ids, and the
/// generator metadata.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub data: Tensor,
    pub truth: Vec<usize>,
    pub meta: SceneMeta,
}

#[derive(Debug, Clone)]
pub struct SceneMeta {
    pub generator: String,
    pub seed: u64,
    pub class_fractions: Vec<Real>,
}

impl SynthScene {
    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
}

/// A disc of per-channel mean offset +1 against a zero background, plus
/// i.i.d. Gaussian noise. The radius is chosen so the disc pixel count is
/// within 1% (relative) of `area_fraction`; grids too coarse to achieve
/// that are rejected. The disc is class 0, the background class 1.
pub fn gen_disc_scene(
    h: usize,
    w: usize,
    area_fraction: Real,
    noise_sigma: Real,
    n_chan: usize,
    seed: u64,
) -> Result<SynthScene> {
    if !(area_fraction > 0.0 && area_fraction < 1.0) {
        return Err(CoreError::Argument(format!(
            "area fraction must be in (0, 1), got {area_fraction}"
        )));
    }
    if n_chan == 0 || h == 0 || w == 0 {
        return Err(CoreError::Argument("empty scene geometry".into()));
    }
    let n = h * w;
    let (cy, cx) = ((h as Real - 1.0) / 2.0, (w as Real - 1.0) / 2.0);
    let mut dist_sq: Vec<Real> = (0..n)
        .map(|p| {
            let dr = (p / w) as Real - cy;
            let dc = (p % w) as Real - cx;
            dr * dr + dc * dc
        })
        .collect();
    let mut sorted = dist_sq.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));

    // Achievable counts are the points where the sorted distance changes;
    // pick the one closest to the target.
    let target = area_fraction * n as Real;
    let mut best_count = 0usize;
    let mut best_err = Real::INFINITY;
    let mut count = 0usize;
    while count < n {
        let radius_sq = sorted[count];
        let mut next = count + 1;
        while next < n && sorted[next] == radius_sq {
            next += 1;
        }
        let err = (next as Real - target).abs();
        if err < best_err {
            best_err = err;
            best_count = next;
        }
        count = next;
    }
    let achieved = best_count as Real / n as Real;
    if (achieved - area_fraction).abs() > 0.01 * area_fraction {
        return Err(CoreError::Argument(format!(
            "no disc radius reaches fraction {area_fraction} within 1% on a {h}x{w} grid \
             (closest achievable: {achieved})"
        )));
    }
    let radius_sq = sorted[best_count - 1];
    for d in dist_sq.iter_mut() {
        *d = if *d <= radius_sq { 1.0 } else { 0.0 };
    }
    let inside = dist_sq; // now a 0/1 disc mask

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Tensor::zeros(vec![n_chan, h, w]);
    for c in 0..n_chan {
        let ch = data.channel_mut(c);
        for p in 0..n {
            let noise: Real = StandardNormal.sample(&mut rng);
            ch[p] = inside[p] + noise_sigma * noise;
        }
    }
    let truth: Vec<usize> = inside.iter().map(|&m| if m > 0.0 { 0 } else { 1 }).collect();
    let f0 = best_count as Real / n as Real;
    Ok(SynthScene {
        data,
        truth,
        meta: SceneMeta {
            generator: "disc".into(),
            seed,
            class_fractions: vec![f0, 1.0 - f0],
        },
    })
}

/// Zero out a uniformly random set of pixels (the same set across all
/// channels) and append a known-pixel indicator channel so the network can
/// see which pixels are missing. Returns the corrupted data and the
/// known-pixel mask.
pub fn corrupt(data: &Tensor, missing_fraction: Real, seed: u64) -> Result<(Tensor, Vec<bool>)> {
    let (c, h, w) = data.chw()?;
    if !(0.0..1.0).contains(&missing_fraction) {
        return Err(CoreError::Argument(format!(
            "missing fraction must be in [0, 1), got {missing_fraction}"
        )));
    }
    let n = h * w;
    let n_missing = (missing_fraction * n as Real).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut known = vec![true; n];
    for &p in order.iter().take(n_missing) {
        known[p] = false;
    }
    let mut out = Tensor::zeros(vec![c + 1, h, w]);
    for ch in 0..c {
        let src = data.channel(ch);
        let dst = out.channel_mut(ch);
        for p in 0..n {
            dst[p] = if known[p] { src[p] } else { 0.0 };
        }
    }
    let flag = out.channel_mut(c);
    for p in 0..n {
        flag[p] = if known[p] { 1.0 } else { 0.0 };
    }
    Ok((out, known))
}

/// Per-pixel argmax over the class channels; ties resolve to the lowest
/// class id.
pub fn argmax_segmentation(probs: &Tensor) -> Vec<usize> {
    let (c, h, w) = probs.chw().expect("argmax needs [c, h, w]");
    let n = h * w;
    (0..n)
        .map(|p| {
            let mut best = 0usize;
            let mut best_v = probs.data()[p];
            for ch in 1..c {
                let v = probs.data()[ch * n + p];
                if v > best_v {
                    best_v = v;
                    best = ch;
                }
            }
            best
        })
        .collect()
}

/// Intersection-over-union for one class. Both masks empty (empty union)
/// counts as a perfect 1.0: the class is correctly absent.
pub fn iou(pred: &[usize], truth: &[usize], class: usize) -> Result<Real> {
    if pred.len() != truth.len() {
        return Err(CoreError::Argument(format!(
            "label maps differ in size: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    let mut intersection = 0usize;
    let mut union = 0usize;
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        let in_p = p == class;
        let in_t = t == class;
        if in_p && in_t {
            intersection += 1;
        }
        if in_p || in_t {
            union += 1;
        }
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(intersection as Real / union as Real)
    }
}

/// IoU for every class id up to `n_class`.
pub fn iou_all(pred: &[usize], truth: &[usize], n_class: usize) -> Result<Vec<Real>> {
    (0..n_class).map(|c| iou(pred, truth, c)).collect()
}

/// Write one channel as a 16-bit P5 PGM, min-max scaled.
pub fn write_pgm16(path: &Path, field: &[Real], h: usize, w: usize) -> Result<()> {
    if field.len() != h * w {
        return Err(CoreError::Argument(format!(
            "field length {} does not match {h}x{w}",
            field.len()
        )));
    }
    let (mut lo, mut hi) = (Real::INFINITY, Real::NEG_INFINITY);
    for &v in field {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = Vec::with_capacity(32 + 2 * field.len());
    out.extend_from_slice(format!("P5\n{w} {h}\n65535\n").as_bytes());
    for &v in field {
        let scaled = ((v - lo) / span * 65535.0).round().clamp(0.0, 65535.0) as u16;
        out.extend_from_slice(&scaled.to_be_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Write a label map as an 8-bit P5 PGM of raw class ids.
pub fn write_pgm8(path: &Path, labels: &[usize], h: usize, w: usize) -> Result<()> {
    if labels.len() != h * w {
        return Err(CoreError::Argument(format!(
            "label map length {} does not match {h}x{w}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c > 255) {
        return Err(CoreError::Argument(format!(
            "class id {bad} does not fit an 8-bit PGM"
        )));
    }
    let mut out = Vec::with_capacity(32 + labels.len());
    out.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    out.extend(labels.iter().map(|&c| c as u8));
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Read back an 8-bit P5 PGM label map.
pub fn read_pgm8(path: &Path) -> Result<(Vec<usize>, usize, usize)> {
    let bytes = fs::read(path)?;
    let malformed = |what: &str| CoreError::Malformed {
        path: path.display().to_string(),
        what: what.to_string(),
    };
    // header: magic, width, height, maxval, single whitespace, then payload
    let mut fields = Vec::new();
    let mut pos = 0usize;
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| malformed("non-ascii header"))?
                .to_string(),
        );
    }
    if fields.len() != 4 || fields[0] != "P5" {
        return Err(malformed("expected a P5 header"));
    }
    let w: usize = fields[1].parse().map_err(|_| malformed("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| malformed("bad height"))?;
    let maxval: usize = fields[3].parse().map_err(|_| malformed("bad maxval"))?;
    if maxval > 255 {
        return Err(malformed("only 8-bit label PGMs are readable"));
    }
    pos += 1; // single whitespace after maxval
    if bytes.len() < pos + h * w {
        return Err(malformed("truncated payload"));
    }
    let labels = bytes[pos..pos + h * w].iter().map(|&b| b as usize).collect();
    Ok((labels, h, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn noiseless_disc_hits_the_requested_fraction() {
        let scene = gen_disc_scene(64, 64, 0.3, 0.0, 1, 0).unwrap();
        let count = scene.truth.iter().filter(|&&c| c == 0).count();
        let frac = count as Real / 4096.0;
        assert!((0.29..=0.31).contains(&frac), "fraction {frac}");
        // relative tolerance is tighter than the sanity band above
        assert!((frac - 0.3).abs() <= 0.003);
        // data equals the mask exactly with zero noise
        for (p, &cls) in scene.truth.iter().enumerate() {
            let expect = if cls == 0 { 1.0 } else { 0.0 };
            assert_eq!(scene.data.channel(0)[p], expect);
        }
    }

    #[test]
    fn unreachable_fraction_on_a_tiny_grid_is_rejected() {
        assert!(matches!(
            gen_disc_scene(8, 8, 0.01, 0.0, 1, 0),
            Err(CoreError::Argument(_))
        ));
    }

    #[test]
    fn scene_generation_is_deterministic() {
        let a = gen_disc_scene(32, 32, 0.4, 0.25, 3, 7).unwrap();
        let b = gen_disc_scene(32, 32, 0.4, 0.25, 3, 7).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn corruption_zeroes_exactly_the_requested_count() {
        let scene = gen_disc_scene(32, 32, 0.3, 0.1, 2, 1).unwrap();
        let (out, known) = corrupt(&scene.data, 0.5, 3).unwrap();
        let missing = known.iter().filter(|&&k| !k).count();
        assert_eq!(missing, 512);
        assert_eq!(out.shape(), &[3, 32, 32]);
        // zeroed identically across channels, flag channel matches
        for p in 0..1024 {
            if !known[p] {
                assert_eq!(out.channel(0)[p], 0.0);
                assert_eq!(out.channel(1)[p], 0.0);
                assert_eq!(out.channel(2)[p], 0.0);
            } else {
                assert_eq!(out.channel(0)[p], scene.data.channel(0)[p]);
                assert_eq!(out.channel(2)[p], 1.0);
            }
        }
    }

    #[test]
    fn zero_corruption_preserves_the_data() {
        let scene = gen_disc_scene(16, 16, 0.3, 0.1, 1, 2).unwrap();
        let (out, known) = corrupt(&scene.data, 0.0, 9).unwrap();
        assert!(known.iter().all(|&k| k));
        assert_eq!(out.channel(0), scene.data.channel(0));
    }

    #[test]
    fn argmax_works_on_one_hot_and_tied_inputs() {
        let mut probs = Tensor::zeros(vec![3, 1, 2]);
        probs.channel_mut(2)[0] = 1.0;
        probs.channel_mut(1)[1] = 1.0;
        assert_eq!(argmax_segmentation(&probs), vec![2, 1]);
        let uniform = Tensor::from_fn(vec![3, 1, 4], |_| 1.0 / 3.0);
        assert_eq!(argmax_segmentation(&uniform), vec![0; 4]);
    }

    #[test]
    fn argmax_matches_a_per_pixel_exhaustive_max() {
        let probs = Tensor::from_fn(vec![4, 3, 3], |i| ((i * 37 + 11) % 101) as Real / 101.0);
        let fast = argmax_segmentation(&probs);
        let (c, h, w) = probs.chw().unwrap();
        for p in 0..h * w {
            let mut best = 0;
            for ch in 0..c {
                if probs.data()[ch * h * w + p] > probs.data()[best * h * w + p] {
                    best = ch;
                }
            }
            assert_eq!(fast[p], best);
        }
    }

    #[test]
    fn iou_identity_disjoint_and_half_overlap() {
        let truth = vec![0, 0, 1, 1];
        assert_eq!(iou(&truth, &truth, 0).unwrap(), 1.0);
        assert_eq!(iou(&truth, &truth, 1).unwrap(), 1.0);
        let flipped = vec![1, 1, 0, 0];
        assert_eq!(iou(&flipped, &truth, 0).unwrap(), 0.0);
        // pred covers half the truth region with no false positives
        let truth = vec![0, 0, 1, 1];
        let pred = vec![0, 1, 1, 1];
        assert_eq!(iou(&pred, &truth, 0).unwrap(), 0.5);
    }

    #[test]
    fn iou_empty_union_convention() {
        let a = vec![1, 1];
        assert_eq!(iou(&a, &a, 0).unwrap(), 1.0);
    }

    #[test]
    fn iou_shape_mismatch_is_an_error() {
        assert!(iou(&[0, 1], &[0], 0).is_err());
    }

    #[test]
    fn pgm8_round_trip_and_pgm16_header() {
        let dir = std::env::temp_dir().join(format!("setseg-pgm-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let labels = vec![0usize, 1, 1, 0, 1, 0];
        let p8 = dir.join("truth.pgm");
        write_pgm8(&p8, &labels, 2, 3).unwrap();
        let (back, h, w) = read_pgm8(&p8).unwrap();
        assert_eq!((h, w), (2, 3));
        assert_eq!(back, labels);

        let p16 = dir.join("chan.pgm");
        write_pgm16(&p16, &[0.0, 0.5, 1.0, 0.25], 2, 2).unwrap();
        let bytes = fs::read(&p16).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n65535\n"));
        // min-max scaling pins the extremes
        let payload = &bytes[bytes.len() - 8..];
        assert_eq!(u16::from_be_bytes([payload[0], payload[1]]), 0);
        assert_eq!(u16::from_be_bytes([payload[4], payload[5]]), 65535);
        fs::remove_dir_all(&dir).unwrap();
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn prop_iou_is_symmetric_and_bounded(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..40);
            let a: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            let b: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            for class in 0..3 {
                let ab = iou(&a, &b, class).unwrap();
                let ba = iou(&b, &a, class).unwrap();
                prop_assert_eq!(ab, ba);
                prop_assert!((0.0..=1.0).contains(&ab));
            }
        }
    }
}
