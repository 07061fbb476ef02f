//! Signal-to-raster rendering on a paper-style grid, and PGM I/O.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::signal::EcgSignal;

pub const BACKGROUND: u8 = 255;
pub const MINOR_GRID: u8 = 230;
pub const MAJOR_GRID: u8 = 200;
pub const TRACE: u8 = 0;
/// Pixels between minor gridlines.
pub const MINOR_PX: usize = 4;
/// Minor cells per major cell.
pub const MAJOR_EVERY: usize = 5;
/// Vertical scale.
pub const MV_PER_PX: f64 = 0.1;

/// 8-bit grayscale raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    /// Binary PGM (P5, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
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
            if start == pos {
                return Err("truncated header".into());
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P5" {
            return Err(format!("magic {:?} is not P5", fields[0]));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|e| format!("{s:?}: {e}"));
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(format!("maxval {maxval} unsupported"));
        }
        let data = &bytes[pos + 1..];
        if data.len() != width * height {
            return Err(format!("expected {} pixel bytes, found {}", width * height, data.len()));
        }
        Ok(GrayImage {
            width,
            height,
            pixels: data.to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        GrayImage::from_pgm(&bytes).map_err(|m| Error::format(path, m))
    }

    /// `[H × W × channels]` ink-intensity tensor: `1 − pixel/255`, so blank
    /// paper is 0 and the trace is 1. Gray is repeated across channels.
    pub fn to_tensor(&self, channels: usize) -> Tensor {
        let mut data = Vec::with_capacity(self.pixels.len() * channels);
        for &p in &self.pixels {
            let v = 1.0 - f64::from(p) / 255.0;
            data.extend(std::iter::repeat_n(v, channels));
        }
        Tensor::new(data, &[self.height, self.width, channels]).expect("consistent shape")
    }
}

/// Grid arrangement of lead cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub rows: usize,
    pub cols: usize,
}

/// Smallest cell that still holds a visible trace.
const MIN_CELL: usize = 4;

pub fn grid_value(x: usize, y: usize) -> u8 {
    let major = MINOR_PX * MAJOR_EVERY;
    if x % major == 0 || y % major == 0 {
        MAJOR_GRID
    } else if x % MINOR_PX == 0 || y % MINOR_PX == 0 {
        MINOR_GRID
    } else {
        BACKGROUND
    }
}

/// Draws each lead into its layout cell (row-major cell order) over the grid.
/// The zero-millivolt line sits at the cell's vertical centre; time spans the
/// cell width.
pub fn render_image(signal: &EcgSignal, layout: Layout, size: usize) -> Result<GrayImage> {
    if layout.rows * layout.cols < signal.leads {
        return Err(Error::Layout(format!(
            "{}x{} layout cannot hold {} leads",
            layout.rows, layout.cols, signal.leads
        )));
    }
    if layout.rows == 0 || layout.cols == 0 || size / layout.rows < MIN_CELL || size / layout.cols < MIN_CELL {
        return Err(Error::Layout(format!(
            "{size}px image too small for a {}x{} layout",
            layout.rows, layout.cols
        )));
    }
    let mut img = GrayImage::filled(size, size, BACKGROUND);
    for y in 0..size {
        for x in 0..size {
            img.set(x, y, grid_value(x, y));
        }
    }
    let cell_h = size / layout.rows;
    let cell_w = size / layout.cols;
    for lead in 0..signal.leads {
        let (r, c) = (lead / layout.cols, lead % layout.cols);
        let (x0, y0) = (c * cell_w, r * cell_h);
        let centre = y0 as f64 + (cell_h / 2) as f64;
        let n = signal.samples_per_lead;
        let to_y = |v: f64| -> i64 {
            let y = (centre - v / MV_PER_PX).round() as i64;
            y.clamp(y0 as i64, (y0 + cell_h - 1) as i64)
        };
        // Column-wise span of the polyline, joined to the previous column.
        let mut prev: Option<i64> = None;
        for px in 0..cell_w {
            let lo = px * n / cell_w;
            let hi = ((px + 1) * n / cell_w).max(lo + 1).min(n);
            let samples = &signal.lead(lead)[lo..hi];
            let mut ymin = samples.iter().map(|&v| to_y(v)).min().expect("non-empty");
            let mut ymax = samples.iter().map(|&v| to_y(v)).max().expect("non-empty");
            if let Some(p) = prev {
                ymin = ymin.min(p);
                ymax = ymax.max(p);
            }
            for y in ymin..=ymax {
                img.set(x0 + px, y as usize, TRACE);
            }
            prev = Some(to_y(*samples.last().expect("non-empty")));
        }
    }
    Ok(img)
}
