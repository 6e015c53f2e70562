//! Reversible serialization of bounding boxes into coordinate tokens.
//!
//! A box in corner form is normalized by the image frame, each coordinate is
//! quantized into one of `B` uniform bins, and the four bin tokens are
//! wrapped in sentinels:
//!
//! ```text
//! <BOX> <COORD_x1> <COORD_y1> <COORD_x2> <COORD_y2> <END_BOX>
//! ```
//!
//! Decoding de-quantizes, scales back to pixels, clips to the frame, and
//! swaps corners if the ordering came back inverted, so decoded boxes always
//! satisfy `0 <= x1 <= x2 <= W` and `0 <= y1 <= y2 <= H`.

use std::fmt;

use crate::error::{Error, Result};

pub const DEFAULT_BINS: u32 = 1000;

/// Image extents in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub width: f64,
    pub height: f64,
}

impl Frame {
    pub fn new(width: f64, height: f64) -> Result<Self> {
        if !(width.is_finite() && height.is_finite() && width > 0.0 && height > 0.0) {
            return Err(Error::InvalidValue(format!(
                "frame: extents must be positive and finite, got {width} x {height}"
            )));
        }
        Ok(Frame { width, height })
    }
}

/// An axis-aligned box in pixel corner form, tied to its image frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub frame: Frame,
}

impl BoundingBox {
    /// Builds a box, swapping corners so `x1 <= x2` and `y1 <= y2`.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, frame: Frame) -> Result<Self> {
        for (name, v) in [("x1", x1), ("y1", y1), ("x2", x2), ("y2", y2)] {
            if !v.is_finite() {
                return Err(Error::InvalidValue(format!("box: {name} is not finite")));
            }
        }
        let (x1, x2) = if x1 <= x2 { (x1, x2) } else { (x2, x1) };
        let (y1, y2) = if y1 <= y2 { (y1, y2) } else { (y2, y1) };
        Ok(BoundingBox { x1, y1, x2, y2, frame })
    }
}

/// The six-token serialization of one box over a `B`-bin vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoxTokenSeq {
    bins: [u32; 4],
    bin_count: u32,
}

impl BoxTokenSeq {
    pub fn new(bins: [u32; 4], bin_count: u32) -> Result<Self> {
        if bin_count < 2 {
            return Err(Error::InvalidValue(format!(
                "token sequence: need at least 2 bins, got {bin_count}"
            )));
        }
        for (i, &k) in bins.iter().enumerate() {
            if k >= bin_count {
                return Err(Error::InvalidValue(format!(
                    "token sequence: bin {k} at coordinate {i} out of range 0..{bin_count}"
                )));
            }
        }
        Ok(BoxTokenSeq { bins, bin_count })
    }

    /// Bin indices in serialization order: x1, y1, x2, y2.
    pub fn bins(&self) -> [u32; 4] {
        self.bins
    }

    pub fn bin_count(&self) -> u32 {
        self.bin_count
    }

    /// Parses a whitespace-separated token line. `position` in errors is the
    /// 0-based index of the first offending token.
    pub fn parse(text: &str, bin_count: u32) -> Result<Self> {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        Self::from_tokens(&tokens, bin_count)
    }

    pub fn from_tokens(tokens: &[&str], bin_count: u32) -> Result<Self> {
        if tokens.len() != 6 {
            return Err(Error::Parse {
                position: tokens.len().min(6),
                message: format!("expected 6 tokens, got {}", tokens.len()),
            });
        }
        if tokens[0] != "<BOX>" {
            return Err(Error::Parse {
                position: 0,
                message: format!("expected <BOX>, got {:?}", tokens[0]),
            });
        }
        if tokens[5] != "<END_BOX>" {
            return Err(Error::Parse {
                position: 5,
                message: format!("expected <END_BOX>, got {:?}", tokens[5]),
            });
        }
        let mut bins = [0u32; 4];
        for (i, bin) in bins.iter_mut().enumerate() {
            let tok = tokens[1 + i];
            let inner = tok
                .strip_prefix("<COORD_")
                .and_then(|s| s.strip_suffix('>'))
                .ok_or_else(|| Error::Parse {
                    position: 1 + i,
                    message: format!("expected <COORD_k>, got {tok:?}"),
                })?;
            let k: u32 = inner.parse().map_err(|_| Error::Parse {
                position: 1 + i,
                message: format!("bad bin index {inner:?}"),
            })?;
            if k >= bin_count {
                return Err(Error::Parse {
                    position: 1 + i,
                    message: format!("bin {k} out of range 0..{bin_count}"),
                });
            }
            *bin = k;
        }
        Ok(BoxTokenSeq { bins, bin_count })
    }

    /// Splits a longer token stream into consecutive single-box sequences.
    pub fn parse_many(text: &str, bin_count: u32) -> Result<Vec<Self>> {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.is_empty() || tokens.len() % 6 != 0 {
            return Err(Error::Parse {
                position: tokens.len() - tokens.len() % 6,
                message: format!("token count {} is not a multiple of 6", tokens.len()),
            });
        }
        tokens
            .chunks(6)
            .enumerate()
            .map(|(chunk, toks)| {
                Self::from_tokens(toks, bin_count).map_err(|e| match e {
                    Error::Parse { position, message } => Error::Parse {
                        position: chunk * 6 + position,
                        message,
                    },
                    other => other,
                })
            })
            .collect()
    }
}

impl fmt::Display for BoxTokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "<BOX> <COORD_{}> <COORD_{}> <COORD_{}> <COORD_{}> <END_BOX>",
            self.bins[0], self.bins[1], self.bins[2], self.bins[3]
        )
    }
}

/// Quantizes a normalized coordinate into one of `B` uniform bins:
/// `floor(clip(u, 0, 1) * (B - 1) + 0.5)`.
pub fn quantize(u: f64, bins: u32) -> Result<u32> {
    if bins < 2 {
        return Err(Error::InvalidValue(format!(
            "quantize: need at least 2 bins, got {bins}"
        )));
    }
    if !u.is_finite() {
        return Err(Error::InvalidValue(format!(
            "quantize: coordinate is not finite ({u})"
        )));
    }
    let clipped = u.clamp(0.0, 1.0);
    let k = (clipped * f64::from(bins - 1) + 0.5).floor();
    // The +0.5 can push u = 1 to exactly B - 0.5; floor keeps it at B - 1.
    Ok((k as u32).min(bins - 1))
}

/// De-quantizes a bin index back to its normalized coordinate `k / (B - 1)`.
pub fn dequantize(k: u32, bins: u32) -> Result<f64> {
    if bins < 2 {
        return Err(Error::InvalidValue(format!(
            "dequantize: need at least 2 bins, got {bins}"
        )));
    }
    if k > bins - 1 {
        return Err(Error::InvalidValue(format!(
            "dequantize: bin {k} out of range 0..{bins}"
        )));
    }
    Ok(f64::from(k) / f64::from(bins - 1))
}

/// Serializes a box: corner ordering is enforced, coordinates normalize by
/// the frame, quantize in the order x1, y1, x2, y2, and wrap in sentinels.
pub fn encode_box(b: &BoundingBox, bins: u32) -> Result<BoxTokenSeq> {
    let frame = Frame::new(b.frame.width, b.frame.height)?;
    let (x1, x2) = if b.x1 <= b.x2 { (b.x1, b.x2) } else { (b.x2, b.x1) };
    let (y1, y2) = if b.y1 <= b.y2 { (b.y1, b.y2) } else { (b.y2, b.y1) };
    let ks = [
        quantize(x1 / frame.width, bins)?,
        quantize(y1 / frame.height, bins)?,
        quantize(x2 / frame.width, bins)?,
        quantize(y2 / frame.height, bins)?,
    ];
    BoxTokenSeq::new(ks, bins)
}

/// Decodes a token sequence back to pixels in the given frame, clipping to
/// the image bounds and repairing corner order if needed.
pub fn decode_box(seq: &BoxTokenSeq, frame: Frame) -> Result<BoundingBox> {
    let b = seq.bin_count();
    let x1 = (dequantize(seq.bins[0], b)? * frame.width).clamp(0.0, frame.width);
    let y1 = (dequantize(seq.bins[1], b)? * frame.height).clamp(0.0, frame.height);
    let x2 = (dequantize(seq.bins[2], b)? * frame.width).clamp(0.0, frame.width);
    let y2 = (dequantize(seq.bins[3], b)? * frame.height).clamp(0.0, frame.height);
    BoundingBox::new(x1, y1, x2, y2, frame)
}
