use super::polygon::{Point, Polygon, PolygonSet};
use super::GeometryError;

/// Per-pixel label raster in row-major order.
///
/// Binary masks hold `{0, 1}`; instance maps hold `0` for background and the
/// instance id elsewhere.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterMask {
    height: usize,
    width: usize,
    data: Vec<u32>,
}

impl RasterMask {
    pub fn zeros(height: usize, width: usize) -> Result<Self, GeometryError> {
        if height == 0 || width == 0 {
            return Err(GeometryError::EmptyCanvas);
        }
        Ok(Self { height, width, data: vec![0; height * width] })
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u32>) -> Result<Self, GeometryError> {
        if height == 0 || width == 0 {
            return Err(GeometryError::EmptyCanvas);
        }
        if data.len() != height * width {
            return Err(GeometryError::DimensionMismatch {
                expected: (height, width),
                found: (data.len(), 1),
            });
        }
        Ok(Self { height, width, data })
    }

    /// Binary mask from booleans.
    pub fn from_bools(height: usize, width: usize, bits: &[bool]) -> Result<Self, GeometryError> {
        Self::from_vec(height, width, bits.iter().map(|&b| u32::from(b)).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u32] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u32) {
        self.data[y * self.width + x] = v;
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }

    pub fn max_label(&self) -> u32 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// `1` where the label equals `id`.
    pub fn select(&self, id: u32) -> RasterMask {
        let data = self.data.iter().map(|&v| u32::from(v == id)).collect();
        RasterMask { height: self.height, width: self.width, data }
    }

    /// `1` wherever the label is non-zero.
    pub fn binarize(&self) -> RasterMask {
        let data = self.data.iter().map(|&v| u32::from(v != 0)).collect();
        RasterMask { height: self.height, width: self.width, data }
    }

    pub fn to_bools(&self) -> Vec<bool> {
        self.data.iter().map(|&v| v != 0).collect()
    }

    /// Nearest-neighbour resample to a new canvas size.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Result<RasterMask, GeometryError> {
        let mut out = RasterMask::zeros(height, width)?;
        for y in 0..height {
            let sy = (((y as f64 + 0.5) * self.height as f64 / height as f64) as usize)
                .min(self.height - 1);
            for x in 0..width {
                let sx = (((x as f64 + 0.5) * self.width as f64 / width as f64) as usize)
                    .min(self.width - 1);
                out.data[y * width + x] = self.data[sy * self.width + sx];
            }
        }
        Ok(out)
    }

    /// Horizontal mirror.
    pub fn flip_horizontal(&self) -> RasterMask {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.width) {
            row.reverse();
        }
        out
    }
}

/// Fills `mask` with `label` at every pixel whose center lies inside
/// `polygon` (even-odd rule).
pub fn fill_polygon(mask: &mut RasterMask, polygon: &Polygon, label: u32) {
    let v = polygon.vertices();
    let n = v.len();
    let (_, min_y, _, max_y) = polygon.bounds();
    let y_start = (min_y - 0.5).floor().max(0.0) as usize;
    let y_end = ((max_y - 0.5).ceil().max(0.0) as usize + 1).min(mask.height);
    let mut xs: Vec<f64> = Vec::with_capacity(n);
    for y in y_start..y_end {
        let cy = y as f64 + 0.5;
        xs.clear();
        let mut j = n - 1;
        for i in 0..n {
            let (vi, vj) = (v[i], v[j]);
            if (vi.y > cy) != (vj.y > cy) {
                xs.push(vj.x + (cy - vj.y) * (vi.x - vj.x) / (vi.y - vj.y));
            }
            j = i;
        }
        if xs.is_empty() {
            continue;
        }
        xs.sort_by(f64::total_cmp);
        // pixel center cx is inside iff an odd number of crossings lie
        // strictly to its right
        for pair in xs.chunks(2) {
            if pair.len() < 2 {
                break;
            }
            let (a, b) = (pair[0], pair[1]);
            // cx >= a and cx < b  <=>  x >= a - 0.5 and x < b - 0.5
            let x0 = (a - 0.5).ceil().max(0.0);
            let x1 = (b - 0.5).ceil().min(mask.width as f64);
            if x1 <= x0 {
                continue;
            }
            let row = &mut mask.data[y * mask.width..(y + 1) * mask.width];
            for px in &mut row[x0 as usize..x1 as usize] {
                *px = label;
            }
        }
    }
}

/// Instance-id map of a polygon set; later (higher-id) polygons win overlaps.
pub fn rasterize(polygons: &PolygonSet, height: usize, width: usize) -> Result<RasterMask, GeometryError> {
    let mut mask = RasterMask::zeros(height, width)?;
    let mut ordered: Vec<_> = polygons.iter().collect();
    ordered.sort_by_key(|p| p.id);
    for p in ordered {
        fill_polygon(&mut mask, &p.polygon, p.id);
    }
    Ok(mask)
}

/// Binary mask of a single polygon.
pub fn rasterize_polygon(polygon: &Polygon, height: usize, width: usize) -> Result<RasterMask, GeometryError> {
    let mut mask = RasterMask::zeros(height, width)?;
    fill_polygon(&mut mask, polygon, 1);
    Ok(mask)
}

/// Connectivity used for component labelling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Connectivity {
    #[serde(rename = "4")]
    Four,
    #[serde(rename = "8")]
    Eight,
}

/// Labels connected components of the non-zero pixels of `fg`.
///
/// Labels are `1..=count`, numbered in raster order of each component's first
/// pixel. Returns `(labels, count)`.
pub fn label_components(
    fg: &[bool],
    height: usize,
    width: usize,
    connectivity: Connectivity,
) -> (Vec<u32>, u32) {
    let mut labels = vec![0u32; height * width];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..fg.len() {
        if !fg[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (y, x) = ((i / width) as isize, (i % width) as isize);
            for (dy, dx) in neighbours(connectivity) {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= height as isize || nx >= width as isize {
                    continue;
                }
                let j = ny as usize * width + nx as usize;
                if fg[j] && labels[j] == 0 {
                    labels[j] = next;
                    stack.push(j);
                }
            }
        }
    }
    (labels, next)
}

fn neighbours(c: Connectivity) -> &'static [(isize, isize)] {
    match c {
        Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Connectivity::Eight => &[
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ],
    }
}

/// Traces each 4-connected component of a binary mask to its outer boundary
/// polygon along pixel edges.
///
/// Holes are not represented, so rasterizing the result fills them.
pub fn mask_to_polygons(mask: &RasterMask) -> PolygonSet {
    let (h, w) = mask.dims();
    let fg = mask.to_bools();
    let (labels, count) = label_components(&fg, h, w, Connectivity::Four);
    let mut set = PolygonSet::new();
    let mut seen = vec![false; count as usize + 1];
    for (i, &l) in labels.iter().enumerate() {
        if l == 0 || seen[l as usize] {
            continue;
        }
        seen[l as usize] = true;
        // first pixel in raster order: its top edge is on the outer boundary
        let ring = trace_outer(&labels, h, w, l, i % w, i / w);
        if let Ok(p) = Polygon::from_ring(ring) {
            set.push(p);
        }
    }
    set
}

/// Walks pixel-corner lattice points keeping the component on the right-hand
/// side in image coordinates (y down).
fn trace_outer(labels: &[u32], h: usize, w: usize, label: u32, sx: usize, sy: usize) -> Vec<Point> {
    let inside = |x: isize, y: isize| -> bool {
        x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && labels[y as usize * w + x as usize] == label
    };
    // directions: 0 = +x, 1 = +y, 2 = -x, 3 = -y
    const DX: [isize; 4] = [1, 0, -1, 0];
    const DY: [isize; 4] = [0, 1, 0, -1];
    let start = (sx as isize, sy as isize);
    let mut pos = start;
    let mut dir = 0usize;
    let mut corners: Vec<(isize, isize)> = vec![start];
    loop {
        // pixels ahead-left and ahead-right of the current edge end
        let (x, y) = (pos.0 + DX[dir], pos.1 + DY[dir]);
        let (lx, ly, rx, ry) = match dir {
            0 => (x, y - 1, x, y),
            1 => (x, y, x - 1, y),
            2 => (x - 1, y, x - 1, y - 1),
            _ => (x - 1, y - 1, x, y - 1),
        };
        pos = (x, y);
        let l = inside(lx, ly);
        let r = inside(rx, ry);
        let new_dir = if l {
            (dir + 3) % 4 // turn towards the occupied left pixel
        } else if r {
            dir
        } else {
            (dir + 1) % 4
        };
        if pos == start && new_dir == 0 {
            break;
        }
        if new_dir != dir {
            corners.push(pos);
        }
        dir = new_dir;
    }
    corners
        .into_iter()
        .map(|(x, y)| Point::new(x as f64, y as f64))
        .collect()
}
