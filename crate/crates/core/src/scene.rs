//! Annotated scenes and their line-delimited JSON annotation records.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rf::FieldRect;

/// H×W×C pixel buffer, interleaved, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Channel-first copy, `(C, H, W)` flattened.
    pub fn to_chw(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * self.channels];
        for (i, px) in self.data.chunks(self.channels).enumerate() {
            for (c, v) in px.iter().enumerate() {
                out[c * plane + i] = *v;
            }
        }
        out
    }

    /// Quantizes to 8-bit and writes a PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.to_rgb8();
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, image::ColorType::Rgb8)?;
        Ok(())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        image::write_buffer_with_format(
            &mut out,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            image::ColorType::Rgb8,
            image::ImageFormat::Png,
        )?;
        Ok(out.into_inner())
    }

    fn to_rgb8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.height * self.width * 3);
        for px in self.data.chunks(self.channels) {
            for c in 0..3 {
                let v = px[c.min(self.channels - 1)];
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Ok(Self {
            height: img.height() as usize,
            width: img.width() as usize,
            channels: 3,
            data: img.as_raw().iter().map(|&b| b as f64 / 255.0).collect(),
        })
    }
}

/// Ground-truth box `[x0, x1) × [y0, y1)` with its class id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
    #[serde(rename = "class")]
    pub class_id: usize,
}

impl BoxAnnotation {
    pub fn new(x0: i64, y0: i64, x1: i64, y1: i64, class_id: usize) -> Self {
        Self {
            x0,
            y0,
            x1,
            y1,
            class_id,
        }
    }

    pub fn rect(&self) -> FieldRect {
        FieldRect::new(self.x0, self.y0, self.x1, self.y1)
    }
}

/// Clips boxes to the image and drops those left with zero area.
pub fn sanitize_boxes(boxes: &[BoxAnnotation], height: usize, width: usize) -> Vec<BoxAnnotation> {
    boxes
        .iter()
        .filter_map(|b| match b.rect().clip(height, width) {
            Some(r) => Some(BoxAnnotation::new(r.x0, r.y0, r.x1, r.y1, b.class_id)),
            None => {
                tracing::warn!(?b, "dropping degenerate box");
                None
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedScene {
    pub image: Image,
    pub boxes: Vec<BoxAnnotation>,
}

impl AnnotatedScene {
    pub fn size(&self) -> (usize, usize) {
        (self.image.height, self.image.width)
    }
}

/// One line of an annotation file: `{image, boxes:[{x0,y0,x1,y1,class}]}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image: String,
    pub boxes: Vec<BoxAnnotation>,
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(std::io::BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn parse_annotations(reader: impl BufRead) -> Result<Vec<AnnotationRecord>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io("<annotations>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_annotations(mut w: impl Write, records: &[AnnotationRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io("<annotations>", e))?;
    }
    Ok(())
}
