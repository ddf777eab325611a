//! Closed-form matting Laplacian of the content image and the affine
//! (photorealism) loss built on it.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CACHE_MAGIC: &[u8; 4] = b"MATL";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MattingParams {
    pub radius: usize,
    pub eps: f64,
}

impl Default for MattingParams {
    fn default() -> Self {
        Self {
            radius: 1,
            eps: 1e-7,
        }
    }
}

/// Symmetric sparse matrix in compressed-row form. Both triangles are
/// stored; columns within a row are ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSymmetricMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    values: Vec<f64>,
}

impl SparseSymmetricMatrix {
    /// Builds from `(row, col, value)` triplets sorted row-major without
    /// duplicates. Symmetry is checked to within `1e-10`.
    pub fn from_sorted_triplets(n: usize, triplets: &[(u32, u32, f64)]) -> Result<Self> {
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        let mut prev: Option<(u32, u32)> = None;
        for &(r, c, v) in triplets {
            if r as usize >= n || c as usize >= n {
                return Err(Error::CacheFormat(format!("entry ({r}, {c}) outside {n}x{n}")));
            }
            if prev.is_some_and(|p| p >= (r, c)) {
                return Err(Error::CacheFormat("triplets are not sorted row-major".into()));
            }
            prev = Some((r, c));
            row_ptr[r as usize + 1] += 1;
            cols.push(c);
            values.push(v);
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        let m = Self {
            n,
            row_ptr,
            cols,
            values,
        };
        for (r, c, v) in m.triplets() {
            let t = m.get(c as usize, r as usize);
            if (v - t).abs() > 1e-10 {
                return Err(Error::CacheFormat(format!("asymmetric at ({r}, {c})")));
            }
        }
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_nnz(&self, row: usize) -> usize {
        self.row_ptr[row + 1] - self.row_ptr[row]
    }

    pub fn row(&self, row: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[row]..self.row_ptr[row + 1];
        self.cols[span.clone()]
            .iter()
            .zip(&self.values[span])
            .map(|(&c, &v)| (c as usize, v))
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        let span = self.row_ptr[row]..self.row_ptr[row + 1];
        match self.cols[span.clone()].binary_search(&(col as u32)) {
            Ok(k) => self.values[span.start + k],
            Err(_) => 0.0,
        }
    }

    /// Row-major `(row, col, value)` triplets.
    pub fn triplets(&self) -> impl Iterator<Item = (u32, u32, f64)> + '_ {
        (0..self.n).flat_map(move |r| self.row(r).map(move |(c, v)| (r as u32, c as u32, v)))
    }

    /// `y = L x`, accumulated in double precision.
    pub fn matvec<T: Scalar>(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_len(x.len())?;
        Ok((0..self.n)
            .map(|r| {
                let s: f64 = self.row(r).map(|(c, v)| v * x[c].as_f64()).sum();
                T::from_f64_lossy(s)
            })
            .collect())
    }

    /// `xᵀ L x` in double precision.
    pub fn quadratic_form<T: Scalar>(&self, x: &[T]) -> Result<f64> {
        self.check_len(x.len())?;
        Ok((0..self.n)
            .map(|r| {
                let row: f64 = self.row(r).map(|(c, v)| v * x[c].as_f64()).sum();
                row * x[r].as_f64()
            })
            .sum())
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n * self.n];
        for (r, c, v) in self.triplets() {
            d[r as usize * self.n + c as usize] = v;
        }
        d
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.n {
            return Err(Error::ShapeMismatch {
                context: "matting Laplacian".into(),
                left: vec![self.n],
                right: vec![len],
            });
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(CACHE_MAGIC)?;
        w.write_u64::<LittleEndian>(self.n as u64)?;
        w.write_u64::<LittleEndian>(self.nnz() as u64)?;
        for (r, c, v) in self.triplets() {
            w.write_u32::<LittleEndian>(r)?;
            w.write_u32::<LittleEndian>(c)?;
            w.write_f64::<LittleEndian>(v)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let bad = |what: &str| Error::CacheFormat(what.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("missing header"))?;
        if &magic != CACHE_MAGIC {
            return Err(bad("bad magic"));
        }
        let n = r.read_u64::<LittleEndian>().map_err(|_| bad("missing dimension"))? as usize;
        let nnz = r.read_u64::<LittleEndian>().map_err(|_| bad("missing nonzero count"))? as usize;
        if n > u32::MAX as usize || nnz > n.saturating_mul(n) {
            return Err(bad("implausible header"));
        }
        let mut triplets = Vec::with_capacity(nnz.min(1 << 24));
        for _ in 0..nnz {
            let row = r.read_u32::<LittleEndian>();
            let col = r.read_u32::<LittleEndian>();
            let val = r.read_f64::<LittleEndian>();
            match (row, col, val) {
                (Ok(row), Ok(col), Ok(val)) => triplets.push((row, col, val)),
                _ => return Err(bad("truncated triplets")),
            }
        }
        Self::from_sorted_triplets(n, &triplets)
    }
}

fn invert3(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let adj = [
        [c(1, 2, 1, 2), -c(0, 2, 1, 2), c(0, 1, 1, 2)],
        [-c(1, 2, 0, 2), c(0, 2, 0, 2), -c(0, 1, 0, 2)],
        [c(1, 2, 0, 1), -c(0, 2, 0, 1), c(0, 1, 0, 1)],
    ];
    let det = m[0][0] * adj[0][0] + m[0][1] * adj[1][0] + m[0][2] * adj[2][0];
    adj.map(|row| row.map(|v| v / det))
}

/// Closed-form matting Laplacian of an `H x W x 3` image in `[0, 1]`.
///
/// Every window of side `2r+1` lying fully inside the image contributes
/// `δ_ij - (1 + (I_i-μ)ᵀ(Σ + eps/k·I)⁻¹(I_j-μ)) / k` to each pixel pair of
/// the window, `k` being the window size.
pub fn build_matting_laplacian<T: Scalar>(image: &Tensor<T>, params: MattingParams) -> Result<SparseSymmetricMatrix> {
    let (h, w, c) = image.dims3()?;
    if c != 3 {
        return Err(Error::InvalidShape {
            shape: image.shape().to_vec(),
            reason: "expected H x W x 3".into(),
        });
    }
    let r = params.radius;
    let side = 2 * r + 1;
    if h < side || w < side {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            window: side,
        });
    }
    if let Some(i) = image.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinitePixel(i / 3));
    }
    let px: Vec<[f64; 3]> = image
        .data()
        .chunks_exact(3)
        .map(|p| [p[0].as_f64(), p[1].as_f64(), p[2].as_f64()])
        .collect();

    // band[(p, dy, dx)] for neighbor offsets in [-2r, 2r]^2
    let reach = 2 * r;
    let band_side = 2 * reach + 1;
    let band_len = band_side * band_side;
    let n = h * w;
    let mut band = vec![0.0f64; n * band_len];
    let mut touched = vec![false; n * band_len];

    let k = (side * side) as f64;
    let mut win = vec![0usize; side * side];
    let mut centered = vec![[0.0f64; 3]; side * side];
    for cy in r..h - r {
        for cx in r..w - r {
            for (t, slot) in win.iter_mut().enumerate() {
                *slot = (cy + t / side - r) * w + (cx + t % side - r);
            }
            let mut mu = [0.0; 3];
            for &p in &win {
                for ch in 0..3 {
                    mu[ch] += px[p][ch];
                }
            }
            mu = mu.map(|v| v / k);
            let mut cov = [[0.0; 3]; 3];
            for (t, &p) in win.iter().enumerate() {
                let d = [px[p][0] - mu[0], px[p][1] - mu[1], px[p][2] - mu[2]];
                centered[t] = d;
                for a in 0..3 {
                    for b in 0..3 {
                        cov[a][b] += d[a] * d[b];
                    }
                }
            }
            for (a, row) in cov.iter_mut().enumerate() {
                for v in row.iter_mut() {
                    *v /= k;
                }
                row[a] += params.eps / k;
            }
            let inv = invert3(cov);
            for (ti, &pi) in win.iter().enumerate() {
                let di = centered[ti];
                let q = [
                    inv[0][0] * di[0] + inv[0][1] * di[1] + inv[0][2] * di[2],
                    inv[1][0] * di[0] + inv[1][1] * di[1] + inv[1][2] * di[2],
                    inv[2][0] * di[0] + inv[2][1] * di[1] + inv[2][2] * di[2],
                ];
                for (tj, &pj) in win.iter().enumerate() {
                    let dj = centered[tj];
                    let delta = if ti == tj { 1.0 } else { 0.0 };
                    let v = delta - (1.0 + q[0] * dj[0] + q[1] * dj[1] + q[2] * dj[2]) / k;
                    let dy = (tj / side + reach) - ti / side;
                    let dx = (tj % side + reach) - ti % side;
                    let slot = pi * band_len + dy * band_side + dx;
                    band[slot] += v;
                    touched[slot] = true;
                    debug_assert_eq!(pj, pi + (dy * w + dx) - (reach * w + reach));
                }
            }
        }
    }

    let mut row_ptr = Vec::with_capacity(n + 1);
    row_ptr.push(0);
    let mut cols = Vec::new();
    let mut values = Vec::new();
    for p in 0..n {
        let (y, x) = (p / w, p % w);
        for off in 0..band_len {
            let slot = p * band_len + off;
            if touched[slot] {
                let ny = y + off / band_side - reach;
                let nx = x + off % band_side - reach;
                cols.push((ny * w + nx) as u32);
                values.push(band[slot]);
            }
        }
        row_ptr.push(cols.len());
    }
    Ok(SparseSymmetricMatrix {
        n,
        row_ptr,
        cols,
        values,
    })
}

fn channel_vectors<T: Scalar>(l: &SparseSymmetricMatrix, image: &Tensor<T>) -> Result<[Vec<T>; 3]> {
    let (h, w, c) = image.dims3()?;
    if c != 3 || h * w != l.n() {
        return Err(Error::ShapeMismatch {
            context: "affine loss".into(),
            left: vec![l.n()],
            right: image.shape().to_vec(),
        });
    }
    let d = image.data();
    Ok([0, 1, 2].map(|ch| d.iter().skip(ch).step_by(3).copied().collect()))
}

/// `Σ_c V_cᵀ L V_c` over the three color channels of an `H x W x 3` image.
pub fn affine_loss<T: Scalar>(l: &SparseSymmetricMatrix, image: &Tensor<T>) -> Result<f64> {
    channel_vectors(l, image)?
        .iter()
        .map(|v| l.quadratic_form(v))
        .sum()
}

/// Gradient `2 L V_c` per channel, laid out like `image`.
pub fn affine_loss_grad<T: Scalar>(l: &SparseSymmetricMatrix, image: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(affine_loss_with_grad(l, image)?.1)
}

/// Loss and gradient from one pass of products.
pub fn affine_loss_with_grad<T: Scalar>(l: &SparseSymmetricMatrix, image: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    let channels = channel_vectors(l, image)?;
    let mut grad = vec![T::zero(); image.len()];
    let mut loss = 0.0;
    let two = T::from_f64_lossy(2.0);
    for (ch, v) in channels.iter().enumerate() {
        let lv = l.matvec(v)?;
        loss += lv.iter().zip(v).map(|(a, b)| a.as_f64() * b.as_f64()).sum::<f64>();
        for (p, g) in lv.into_iter().enumerate() {
            grad[p * 3 + ch] = two * g;
        }
    }
    Ok((loss, Tensor::new(image.shape().to_vec(), grad)?))
}

/// Hex SHA-256 over the image geometry, pixel values and construction
/// parameters. Used as the cache file stem.
pub fn laplacian_digest<T: Scalar>(image: &Tensor<T>, params: MattingParams) -> String {
    let mut hasher = Sha256::new();
    for &d in image.shape() {
        hasher.update((d as u64).to_le_bytes());
    }
    for v in image.data() {
        hasher.update(v.as_f64().to_le_bytes());
    }
    hasher.update((params.radius as u64).to_le_bytes());
    hasher.update(params.eps.to_le_bytes());
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn cache_path<T: Scalar>(dir: &Path, image: &Tensor<T>, params: MattingParams) -> PathBuf {
    dir.join(format!("{}.matl", laplacian_digest(image, params)))
}

pub fn save_laplacian(path: &Path, l: &SparseSymmetricMatrix) -> Result<()> {
    let tmp = path.with_extension("matl.tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        l.write_to(&mut w)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_laplacian(path: &Path) -> Result<SparseSymmetricMatrix> {
    SparseSymmetricMatrix::read_from(BufReader::new(File::open(path)?))
}

/// Returns the cached Laplacian for `image` from `dir` when present and
/// consistent with the image size, otherwise builds and stores it.
pub fn load_or_build<T: Scalar>(dir: &Path, image: &Tensor<T>, params: MattingParams) -> Result<SparseSymmetricMatrix> {
    let path = cache_path(dir, image, params);
    if path.exists() {
        let (h, w, _) = image.dims3()?;
        match load_laplacian(&path) {
            Ok(l) if l.n() == h * w => return Ok(l),
            // unreadable or stale entries are rebuilt below
            _ => {}
        }
    }
    let l = build_matting_laplacian(image, params)?;
    std::fs::create_dir_all(dir)?;
    save_laplacian(&path, &l)?;
    Ok(l)
}
