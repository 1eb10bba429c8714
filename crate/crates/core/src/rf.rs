//! Receptive-field geometry of convolution/pooling stacks.
//!
//! Layer indices are 1-based: layer `k` is the output of the k-th entry of
//! the stack and layer 0 is the image itself.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kernel: usize,
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
}

impl LayerSpec {
    pub const fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    /// Output length along one axis, or `None` if the kernel does not fit.
    pub fn output_len(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStackSpec {
    pub layers: Vec<LayerSpec>,
}

impl ConvStackSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        let stack = Self { layers };
        stack.validate()?;
        Ok(stack)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidConfig("convolution stack is empty".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.kernel == 0 || l.stride == 0 {
                return Err(Error::InvalidConfig(format!(
                    "layer {}: kernel and stride must be >= 1 (got kernel {}, stride {})",
                    i + 1,
                    l.kernel,
                    l.stride
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    fn check_layer(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.layers.len() {
            return Err(Error::OutOfRange {
                what: "layer",
                index: k as i64,
                valid: format!("1..={}", self.layers.len()),
            });
        }
        Ok(())
    }

    /// Product of the strides of layers `1..=k`.
    pub fn jump(&self, k: usize) -> usize {
        self.layers[..k].iter().map(|l| l.stride).product()
    }

    /// Side length of the receptive field of layer `k`:
    /// `l_k = l_{k−1} + (f_k − 1)·∏_{i<k} S_i`, `l_0 = 1`.
    pub fn receptive_field_size(&self, k: usize) -> Result<usize> {
        self.check_layer(k)?;
        let mut size = 1;
        let mut jump = 1;
        for l in &self.layers[..k] {
            size += (l.kernel - 1) * jump;
            jump *= l.stride;
        }
        Ok(size)
    }

    /// Feature-grid size `(rows, cols)` of layer `k` for an `H×W` image.
    pub fn grid_size(&self, k: usize, image: (usize, usize)) -> Result<(usize, usize)> {
        self.check_layer(k)?;
        let (mut h, mut w) = image;
        for (i, l) in self.layers[..k].iter().enumerate() {
            match (l.output_len(h), l.output_len(w)) {
                (Some(nh), Some(nw)) => (h, w) = (nh, nw),
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "layer {} does not fit a {h}x{w} input",
                        i + 1
                    )))
                }
            }
        }
        Ok((h, w))
    }

    /// Image-plane offset of the first pixel seen by index 0 of layer `k`
    /// (negative when padding reaches outside the image).
    fn offset(&self, k: usize) -> i64 {
        let mut offset = 0i64;
        let mut jump = 1i64;
        for l in &self.layers[..k] {
            offset -= l.padding as i64 * jump;
            jump *= l.stride as i64;
        }
        offset
    }

    /// Unclipped footprint of position `(u, v)` (row, col) of layer `k`.
    pub fn raw_field(&self, k: usize, u: usize, v: usize) -> Result<FieldRect> {
        let size = self.receptive_field_size(k)? as i64;
        let jump = self.jump(k) as i64;
        let off = self.offset(k);
        let y0 = u as i64 * jump + off;
        let x0 = v as i64 * jump + off;
        Ok(FieldRect {
            x0,
            y0,
            x1: x0 + size,
            y1: y0 + size,
        })
    }

    /// Footprint of feature `(u, v)` of layer `k`, clipped to the image.
    pub fn project_field(&self, k: usize, u: usize, v: usize, image: (usize, usize)) -> Result<FieldRect> {
        let (rows, cols) = self.grid_size(k, image)?;
        if u >= rows || v >= cols {
            return Err(Error::OutOfRange {
                what: "feature position",
                index: (if u >= rows { u } else { v }) as i64,
                valid: format!("{rows}x{cols} grid"),
            });
        }
        let rect = self.raw_field(k, u, v)?;
        rect.clip(image.0, image.1).ok_or(Error::ZeroAreaField)
    }
}

/// Layer indices of the three backbone taps (F1 local, F2 mid, F3 global).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taps {
    pub f1: usize,
    pub f2: usize,
    pub f3: usize,
}

impl Taps {
    pub fn validate(&self, stack: &ConvStackSpec) -> Result<()> {
        if !(1 <= self.f1 && self.f1 < self.f2 && self.f2 < self.f3 && self.f3 <= stack.len()) {
            return Err(Error::InvalidConfig(format!(
                "taps must satisfy 1 <= f1 < f2 < f3 <= {} (got {}, {}, {})",
                stack.len(),
                self.f1,
                self.f2,
                self.f3
            )));
        }
        Ok(())
    }
}

/// On-disk stack description: the layers plus optional tap names.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackConfig {
    pub layers: Vec<LayerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taps: Option<Taps>,
}

impl StackConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: StackConfig = toml::from_str(text)?;
        let stack = cfg.stack()?;
        if let Some(t) = &cfg.taps {
            t.validate(&stack)?;
        }
        Ok(cfg)
    }

    pub fn stack(&self) -> Result<ConvStackSpec> {
        ConvStackSpec::new(self.layers.clone())
    }
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FieldRect {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl FieldRect {
    pub const fn new(x0: i64, y0: i64, x1: i64, y1: i64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> i64 {
        (self.x1 - self.x0).max(0)
    }

    pub fn height(&self) -> i64 {
        (self.y1 - self.y0).max(0)
    }

    pub fn area(&self) -> i64 {
        self.width() * self.height()
    }

    pub fn intersection_area(&self, other: &FieldRect) -> i64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0);
        w * h
    }

    /// Clips to `[0, width) × [0, height)`; `None` if nothing is left.
    pub fn clip(&self, height: usize, width: usize) -> Option<FieldRect> {
        let r = FieldRect {
            x0: self.x0.max(0),
            y0: self.y0.max(0),
            x1: self.x1.min(width as i64),
            y1: self.y1.min(height as i64),
        };
        (r.x0 < r.x1 && r.y0 < r.y1).then_some(r)
    }
}

impl std::fmt::Display for FieldRect {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{},{})x[{},{})", self.x0, self.x1, self.y0, self.y1)
    }
}
