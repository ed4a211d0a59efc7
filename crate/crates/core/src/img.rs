//! Operations on the H x W grid view of a flattened pixel vector.
//!
//! Pixels are stored row-major: index = row * width + col.

use nalgebra::DVector;

use crate::error::{CoreError, Result};

/// Grid shape of a flattened image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridDims {
    pub height: usize,
    pub width: usize,
}

impl GridDims {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.len() {
            return Err(CoreError::Shape(format!(
                "pixel vector has length {}, grid is {}x{}",
                x.len(),
                self.height,
                self.width
            )));
        }
        Ok(())
    }
}

/// Truncated, normalized Gaussian kernel (radius 3 sigma). A vanishing
/// sigma yields the identity kernel.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 1e-12 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let sum: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= sum;
    }
    kernel
}

fn reflect(mut i: i64, len: i64) -> usize {
    // symmetric reflection: ... 2 1 0 | 0 1 2 ... n-1 | n-1 n-2 ...
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= len {
            i = 2 * len - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(x: &DVector<f64>, dims: GridDims, sigma: f64) -> Result<DVector<f64>> {
    dims.check(x)?;
    let kernel = gaussian_kernel(sigma);
    if kernel.len() == 1 {
        return Ok(x.clone());
    }
    let radius = (kernel.len() / 2) as i64;
    let (h, w) = (dims.height as i64, dims.width as i64);

    // rows
    let mut tmp = vec![0.0; dims.len()];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                let cc = reflect(c + j as i64 - radius, w);
                acc += k * x[(r as usize) * dims.width + cc];
            }
            tmp[(r as usize) * dims.width + c as usize] = acc;
        }
    }
    // columns
    let mut out = DVector::zeros(dims.len());
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                let rr = reflect(r + j as i64 - radius, h);
                acc += k * tmp[rr * dims.width + c as usize];
            }
            out[(r as usize) * dims.width + c as usize] = acc;
        }
    }
    Ok(out)
}

/// Integer-pixel shift with zero fill.
pub fn translate(x: &DVector<f64>, dims: GridDims, dy: i64, dx: i64) -> Result<DVector<f64>> {
    dims.check(x)?;
    let (h, w) = (dims.height as i64, dims.width as i64);
    let mut out = DVector::zeros(dims.len());
    for r in 0..h {
        for c in 0..w {
            let (sr, sc) = (r - dy, c - dx);
            if sr >= 0 && sr < h && sc >= 0 && sc < w {
                out[(r * w + c) as usize] = x[(sr * w + sc) as usize];
            }
        }
    }
    Ok(out)
}

/// Mirror columns.
pub fn hflip(x: &DVector<f64>, dims: GridDims) -> Result<DVector<f64>> {
    dims.check(x)?;
    let mut out = DVector::zeros(dims.len());
    for r in 0..dims.height {
        for c in 0..dims.width {
            out[r * dims.width + c] = x[r * dims.width + (dims.width - 1 - c)];
        }
    }
    Ok(out)
}

const BLOCK: usize = 8;

/// Orthonormal 8-point DCT-II matrix.
fn dct8_matrix() -> [[f64; BLOCK]; BLOCK] {
    let mut t = [[0.0; BLOCK]; BLOCK];
    let n = BLOCK as f64;
    for (u, row) in t.iter_mut().enumerate() {
        let alpha = if u == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = alpha * ((std::f64::consts::PI * (2.0 * x as f64 + 1.0) * u as f64) / (2.0 * n)).cos();
        }
    }
    t
}

/// 8x8-block DCT with coefficient truncation and uniform quantization.
///
/// Within each block, coefficients are ordered by spatial frequency
/// (ascending u+v); only the lowest `keep_fraction` of the 64 slots is
/// kept, and kept coefficients snap to a uniform grid with `levels` steps
/// (step 8/levels for DC, 2/levels for AC). Requires H and W divisible
/// by 8.
pub fn dct_quantize(
    x: &DVector<f64>,
    dims: GridDims,
    levels: u32,
    keep_fraction: f64,
) -> Result<DVector<f64>> {
    dims.check(x)?;
    if !dims.height.is_multiple_of(BLOCK) || !dims.width.is_multiple_of(BLOCK) {
        return Err(CoreError::Shape(format!(
            "dct_quantize needs dimensions divisible by {}, got {}x{}",
            BLOCK, dims.height, dims.width
        )));
    }
    if levels < 2 {
        return Err(CoreError::InvalidConfig(format!(
            "dct_quantize levels must be >= 2, got {levels}"
        )));
    }
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(CoreError::InvalidConfig(format!(
            "dct_quantize keep_fraction must lie in (0, 1], got {keep_fraction}"
        )));
    }

    let t = dct8_matrix();
    let keep = ((keep_fraction * (BLOCK * BLOCK) as f64).ceil() as usize).max(1);
    let mut order: Vec<(usize, usize)> = (0..BLOCK)
        .flat_map(|u| (0..BLOCK).map(move |v| (u, v)))
        .collect();
    order.sort_by_key(|&(u, v)| (u + v, u));
    let dc_step = 8.0 / levels as f64;
    let ac_step = 2.0 / levels as f64;

    let mut out = x.clone();
    for br in (0..dims.height).step_by(BLOCK) {
        for bc in (0..dims.width).step_by(BLOCK) {
            let mut block = [[0.0; BLOCK]; BLOCK];
            for (r, row) in block.iter_mut().enumerate() {
                for (c, v) in row.iter_mut().enumerate() {
                    *v = x[(br + r) * dims.width + bc + c];
                }
            }
            // forward: C = T B T^t
            let mut tb = [[0.0; BLOCK]; BLOCK];
            for u in 0..BLOCK {
                for c in 0..BLOCK {
                    tb[u][c] = (0..BLOCK).map(|r| t[u][r] * block[r][c]).sum();
                }
            }
            let mut coef = [[0.0; BLOCK]; BLOCK];
            for u in 0..BLOCK {
                for v in 0..BLOCK {
                    coef[u][v] = (0..BLOCK).map(|c| tb[u][c] * t[v][c]).sum();
                }
            }
            // truncate + quantize in frequency order
            for (rank, &(u, v)) in order.iter().enumerate() {
                if rank >= keep {
                    coef[u][v] = 0.0;
                } else {
                    let step = if u == 0 && v == 0 { dc_step } else { ac_step };
                    coef[u][v] = (coef[u][v] / step).round() * step;
                }
            }
            // inverse: B = T^t C T
            let mut tc = [[0.0; BLOCK]; BLOCK];
            for r in 0..BLOCK {
                for v in 0..BLOCK {
                    tc[r][v] = (0..BLOCK).map(|u| t[u][r] * coef[u][v]).sum();
                }
            }
            for r in 0..BLOCK {
                for c in 0..BLOCK {
                    let val: f64 = (0..BLOCK).map(|v| tc[r][v] * t[v][c]).sum();
                    out[(br + r) * dims.width + bc + c] = val;
                }
            }
        }
    }
    Ok(out)
}
