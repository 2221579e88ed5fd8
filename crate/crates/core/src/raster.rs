//! Categorical label grids and boundary extraction.

use crate::geometry::BBox;

/// Row-major grid of part-category indices; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRaster {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl LabelRaster {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height, "raster data does not match {width}x{height}");
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Distinct nonzero labels in ascending order.
    pub fn present_labels(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (1..=255u8).filter(|&v| seen[v as usize]).collect()
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Tight pixel bounds `[x0, x1) x [y0, y1)` of the nonzero support.
    pub fn foreground_bounds(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) != 0 {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x0 != usize::MAX).then(|| BBox { x0: x0 as f64, y0: y0 as f64, x1: x1 as f64, y1: y1 as f64 })
    }

    /// Resample the part of the raster under `bx` onto an `size x size` grid by
    /// nearest neighbour; samples falling off the raster read as background.
    pub fn crop_resample(&self, bx: &BBox, size: usize) -> LabelRaster {
        let mut out = LabelRaster::new(size, size);
        let sx = bx.width() / size as f64;
        let sy = bx.height() / size as f64;
        for i in 0..size {
            let y = (bx.y0 + (i as f64 + 0.5) * sy).floor();
            for j in 0..size {
                let x = (bx.x0 + (j as f64 + 0.5) * sx).floor();
                if x >= 0.0 && y >= 0.0 && (x as usize) < self.width && (y as usize) < self.height {
                    out.set(j, i, self.get(x as usize, y as usize));
                }
            }
        }
        out
    }
}

/// Binary boundary map; 1 marks an edge pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeRaster {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl EdgeRaster {
    pub fn from_vec(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height, "edge data does not match {width}x{height}");
        assert!(data.iter().all(|&v| v <= 1), "edge rasters are binary");
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn edge_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

/// Mark every pixel whose in-bounds 8-neighbourhood holds a different label.
///
/// Works as four directional scans (horizontal, vertical and both
/// diagonals): a label change between two neighbours flags both of them.
pub fn extract_edge_labels(parsing: &LabelRaster) -> EdgeRaster {
    let (w, h) = (parsing.width, parsing.height);
    let src = &parsing.data;
    let mut data = vec![0u8; w * h];
    let mut mark = |a: usize, b: usize| {
        if src[a] != src[b] {
            data[a] = 1;
            data[b] = 1;
        }
    };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                mark(i, i + 1);
            }
            if y + 1 < h {
                mark(i, i + w);
                if x + 1 < w {
                    mark(i, i + w + 1);
                }
                if x > 0 {
                    mark(i, i + w - 1);
                }
            }
        }
    }
    EdgeRaster { width: w, height: h, data }
}
