//! Label-side objectives: masked cross-entropy over sparse annotations,
//! supervision derived from a bounding box, and the sum-of-output baseline
//! penalty used for comparison runs.

use std::fs;
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::projections::ConstraintSet;
use crate::tensor::{Real, Tensor};

// Clamp inside the log so saturated softmax outputs cannot produce -inf.
const LOG_CLAMP: Real = 1e-12;

/// Default minimum fraction of its bounding box an object is assumed to
/// fill. With a box covering ~23% of the image this reproduces a
/// background cardinality bound of ~90% of the pixels.
pub const DEFAULT_BOX_FILL_MIN: Real = 0.435;

/// Sparse pixel annotations: a set of `(pixel, class)` pairs that may cover
/// any subset of pixels and classes, including none of a class entirely.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupervisionMask {
    entries: Vec<(usize, usize)>,
}

impl SupervisionMask {
    /// Build a mask, rejecting out-of-range indices and duplicate pixels.
    pub fn new(entries: Vec<(usize, usize)>, n_pixels: usize, n_class: usize) -> Result<Self> {
        let mut seen = vec![false; n_pixels];
        for &(pixel, class) in &entries {
            if pixel >= n_pixels {
                return Err(CoreError::Argument(format!(
                    "mask pixel {pixel} out of range ({n_pixels} pixels)"
                )));
            }
            if class >= n_class {
                return Err(CoreError::Argument(format!(
                    "mask class {class} out of range ({n_class} classes)"
                )));
            }
            if seen[pixel] {
                return Err(CoreError::Argument(format!(
                    "duplicate mask entry for pixel {pixel}"
                )));
            }
            seen[pixel] = true;
        }
        Ok(Self { entries })
    }

    pub fn empty() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries restricted to one class.
    pub fn class_count(&self, class: usize) -> usize {
        self.entries.iter().filter(|(_, c)| *c == class).count()
    }

    /// Serialize as CSV rows `(pixel_row, pixel_col, class)`.
    pub fn write_csv(&self, path: &Path, width: usize) -> Result<()> {
        let mut out = String::from("# setseg mask v1: row,col,class\n");
        for &(pixel, class) in &self.entries {
            out.push_str(&format!("{},{},{}\n", pixel / width, pixel % width, class));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read_csv(path: &Path, h: usize, w: usize, n_class: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoreError::Malformed {
            path: path.display().to_string(),
            what: format!("cannot read mask: {e}"),
        })?;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(CoreError::Malformed {
                    path: path.display().to_string(),
                    what: format!("line {}: expected row,col,class", lineno + 1),
                });
            }
            let parse = |s: &str| -> Result<usize> {
                s.parse().map_err(|e| CoreError::Malformed {
                    path: path.display().to_string(),
                    what: format!("line {}: {e}", lineno + 1),
                })
            };
            let (row, col, class) = (parse(fields[0])?, parse(fields[1])?, parse(fields[2])?);
            if row >= h || col >= w {
                return Err(CoreError::Malformed {
                    path: path.display().to_string(),
                    what: format!("line {}: pixel ({row},{col}) outside {h}x{w}", lineno + 1),
                });
            }
            entries.push((row * w + col, class));
        }
        Self::new(entries, h * w, n_class)
    }
}

/// Axis-aligned box with inclusive-exclusive bounds and the output channel
/// of the object it encloses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
    pub channel: usize,
}

impl BoundingBox {
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.row0 >= self.row1 || self.col0 >= self.col1 {
            return Err(CoreError::Argument(format!(
                "degenerate box rows {}..{}, cols {}..{}",
                self.row0, self.row1, self.col0, self.col1
            )));
        }
        if self.row1 > h || self.col1 > w {
            return Err(CoreError::Argument(format!(
                "box rows {}..{}, cols {}..{} outside {h}x{w}",
                self.row0, self.row1, self.col0, self.col1
            )));
        }
        Ok(())
    }

    pub fn area(&self) -> usize {
        (self.row1 - self.row0) * (self.col1 - self.col0)
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.row0 && row < self.row1 && col >= self.col0 && col < self.col1
    }
}

/// Mean negative log-probability over the annotated pixels, with the
/// gradient taken with respect to the probabilities (the caller chains it
/// through the softmax). The gradient is supported exactly on the labeled
/// pixels.
pub fn masked_cross_entropy(probs: &Tensor, mask: &SupervisionMask) -> Result<(Real, Tensor)> {
    let (n_class, h, w) = probs.chw()?;
    let n = h * w;
    if mask.is_empty() {
        return Err(CoreError::Argument(
            "masked cross-entropy needs at least one annotation".into(),
        ));
    }
    let m = mask.len() as Real;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(probs.shape().to_vec());
    for &(pixel, class) in mask.entries() {
        if pixel >= n || class >= n_class {
            return Err(CoreError::Argument(format!(
                "annotation ({pixel}, {class}) out of range for {n_class}x{h}x{w}"
            )));
        }
        let p = probs.data()[class * n + pixel].max(LOG_CLAMP);
        loss += -p.ln();
        grad.data_mut()[class * n + pixel] = -1.0 / (m * p);
    }
    Ok((loss / m, grad))
}

/// Derive supervision from a bounding box: every pixel outside the box is
/// labeled as background (the complement class of the object channel in a
/// two-class output), the object channel gets a cardinality bound equal to
/// the box area, and the background channel gets
/// `n - ceil(min_fill * box area)` from the assumption that the object
/// fills at least `min_fill` of its box.
pub fn bbox_to_supervision(
    bb: &BoundingBox,
    h: usize,
    w: usize,
    min_fill: Real,
) -> Result<(SupervisionMask, Vec<ConstraintSet>)> {
    bb.validate(h, w)?;
    if !(0.0..=1.0).contains(&min_fill) {
        return Err(CoreError::Argument(format!(
            "min_fill must be in [0, 1], got {min_fill}"
        )));
    }
    if bb.channel >= 2 {
        return Err(CoreError::Argument(
            "bounding-box supervision assumes a two-class output".into(),
        ));
    }
    let background = 1 - bb.channel;
    let n = h * w;
    let mut entries = Vec::new();
    for row in 0..h {
        for col in 0..w {
            if !bb.contains(row, col) {
                entries.push((row * w + col, background));
            }
        }
    }
    let object_bound = bb.area().min(n);
    let reserved = (min_fill * bb.area() as Real).ceil() as usize;
    let background_bound = n.saturating_sub(reserved);
    let sets = vec![
        ConstraintSet::Cardinality {
            channel: bb.channel,
            max_count: object_bound,
        },
        ConstraintSet::Cardinality {
            channel: background,
            max_count: background_bound,
        },
    ];
    Ok((SupervisionMask::new(entries, n, 2)?, sets))
}

/// Baseline penalty on the channel total `t = sum(s)`:
/// `lambda * (t - a1)^2` below the band, `lambda * (t - a2)^2` above it,
/// zero inside. The gradient is the same constant `2 lambda (t - a)` at
/// every pixel, in contrast with the sparse distance gradient.
pub fn size_sum_penalty(field: &[Real], a1: Real, a2: Real, lambda: Real) -> (Real, Vec<Real>) {
    debug_assert!(a1 <= a2 && lambda > 0.0);
    let total: Real = field.iter().sum();
    let excess = if total < a1 {
        total - a1
    } else if total > a2 {
        total - a2
    } else {
        return (0.0, vec![0.0; field.len()]);
    };
    let value = lambda * excess * excess;
    let g = 2.0 * lambda * excess;
    (value, vec![g; field.len()])
}
