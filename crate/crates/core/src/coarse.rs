//! Coarse matching on 1/8-resolution features: temperature-scaled
//! similarity, dual-softmax and mutual-nearest-neighbour extraction.

use std::fmt::Write as _;

use crate::error::{shape_err, Error, Result};
use crate::numerics::log_softmax_into;
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, Tensor};

/// Pixel stride of one coarse cell.
pub const COARSE_STRIDE: usize = 8;

/// Representative pixel coordinate of coarse cell `c` along one axis.
///
/// Pixel `u` has its center at `u`; half-resolution cell `m` is centered at
/// `2m + 0.5`, and coarse cell `c` is represented by half-resolution cell
/// `4c + 2`, i.e. pixel coordinate `8c + 4.5`. The fine stage crops around
/// that half-resolution cell, so coarse and fine coordinates share one frame.
pub fn cell_anchor(c: usize) -> f64 {
    (COARSE_STRIDE * c) as f64 + 4.5
}

/// Half-resolution cell used as the crop center for coarse cell `c`.
pub fn cell_anchor_half(c: usize) -> usize {
    COARSE_STRIDE / 2 * c + 2
}

/// Coarse cell containing pixel coordinate `x`, if inside `0..cells`.
pub fn cell_of(x: f64, cells: usize) -> Option<usize> {
    let c = ((x + 0.5) / COARSE_STRIDE as f64).floor();
    (c >= 0.0 && (c as usize) < cells).then_some(c as usize)
}

/// `S(i, j) = tau <f_i, g_j>` over flattened maps.
pub fn similarity_matrix<T: Scalar>(f_ref: &FeatureMap<T>, f_src: &FeatureMap<T>, tau: T) -> Result<Tensor<T>> {
    if f_ref.channels != f_src.channels {
        return shape_err(format!("similarity of {} vs {} channels", f_ref.channels, f_src.channels));
    }
    let (n, m, c) = (f_ref.tokens(), f_src.tokens(), f_ref.channels);
    let mut s = vec![T::zero(); n * m];
    if n > 0 && m > 0 && c > 0 {
        T::gemm(n, c, m, tau, &f_ref.data, (c, 1), &f_src.data, (1, c), T::zero(), &mut s, (m, 1));
    }
    Tensor::from_vec(&[n, m], s)
}

/// Row and column log-softmax of a score matrix; `log P = log_row + log_col`.
///
/// A row-only variant (`log_col` all zero) gives plain row-softmax
/// probabilities through the same interface.
#[derive(Clone, Debug)]
pub struct DualSoftmax<T> {
    pub rows: usize,
    pub cols: usize,
    pub log_row: Vec<T>,
    pub log_col: Vec<T>,
    pub columns: bool,
}

impl<T: Scalar> DualSoftmax<T> {
    pub fn new(s: &Tensor<T>) -> Result<Self> {
        if s.rank() != 2 {
            return shape_err("dual-softmax needs a matrix");
        }
        if !s.all_finite() {
            return Err(Error::NonFinite("dual-softmax scores"));
        }
        let (rows, cols) = (s.shape()[0], s.shape()[1]);
        let mut log_row = vec![T::zero(); rows * cols];
        for (src, dst) in s.data().chunks(cols.max(1)).zip(log_row.chunks_mut(cols.max(1))) {
            log_softmax_into(src, dst);
        }
        let st = s.transpose2();
        let mut lct = vec![T::zero(); rows * cols];
        for (src, dst) in st.data().chunks(rows.max(1)).zip(lct.chunks_mut(rows.max(1))) {
            log_softmax_into(src, dst);
        }
        let log_col = Tensor::from_vec(&[cols, rows], lct)?.transpose2().into_data();
        Ok(Self { rows, cols, log_row, log_col, columns: true })
    }

    /// Row softmax only.
    pub fn row_only(s: &Tensor<T>) -> Result<Self> {
        if s.rank() != 2 {
            return shape_err("row softmax needs a matrix");
        }
        if !s.all_finite() {
            return Err(Error::NonFinite("row-softmax scores"));
        }
        let (rows, cols) = (s.shape()[0], s.shape()[1]);
        let mut log_row = vec![T::zero(); rows * cols];
        for (src, dst) in s.data().chunks(cols.max(1)).zip(log_row.chunks_mut(cols.max(1))) {
            log_softmax_into(src, dst);
        }
        Ok(Self { rows, cols, log_row, log_col: vec![T::zero(); rows * cols], columns: false })
    }

    /// The same dual-softmax matrix with rows and columns exchanged. A
    /// row-only matrix has no such view; recompute it from `S^T` instead.
    pub fn transposed(&self) -> Self {
        debug_assert!(self.columns, "row-only softmax is not transpose-symmetric");
        let t = |v: &[T]| Tensor::from_vec(&[self.rows, self.cols], v.to_vec()).expect("shape").transpose2().into_data();
        Self { rows: self.cols, cols: self.rows, log_row: t(&self.log_col), log_col: t(&self.log_row), columns: self.columns }
    }

    #[inline]
    pub fn log_prob(&self, i: usize, j: usize) -> T {
        self.log_row[i * self.cols + j] + self.log_col[i * self.cols + j]
    }

    pub fn probs(&self) -> Tensor<T> {
        let data = self.log_row.iter().zip(&self.log_col).map(|(&a, &b)| (a + b).exp()).collect();
        Tensor::from_vec(&[self.rows, self.cols], data).expect("dual-softmax shape")
    }

    /// Gradient of `sum_n w_n (-log P(i_n, j_n))` with respect to the scores.
    pub fn nll_grad(&self, targets: &[(usize, usize)], weight: T) -> Tensor<T> {
        let (rows, cols) = (self.rows, self.cols);
        let mut g = vec![T::zero(); rows * cols];
        for &(i, j) in targets {
            for k in 0..cols {
                g[i * cols + k] += weight * self.log_row[i * cols + k].exp();
            }
            g[i * cols + j] -= weight;
            if self.columns {
                for k in 0..rows {
                    g[k * cols + j] += weight * self.log_col[k * cols + j].exp();
                }
                g[i * cols + j] -= weight;
            }
        }
        Tensor::from_vec(&[rows, cols], g).expect("dual-softmax shape")
    }
}

/// `P(i, j) = softmax_row(S)(i, j) * softmax_col(S)(i, j)`.
pub fn dual_softmax<T: Scalar>(s: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(DualSoftmax::new(s)?.probs())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoarseMatch {
    pub i: usize,
    pub j: usize,
    pub confidence: f64,
}

/// Mutually exclusive coarse matches between two 1/8 grids.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchSet {
    pub matches: Vec<CoarseMatch>,
    /// `(height, width)` of the reference and source coarse grids.
    pub ref_grid: (usize, usize),
    pub src_grid: (usize, usize),
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    /// Anchor pixel coordinates `(x, y)` of a reference cell.
    pub fn ref_point(&self, i: usize) -> (f64, f64) {
        (cell_anchor(i % self.ref_grid.1), cell_anchor(i / self.ref_grid.1))
    }

    pub fn src_point(&self, j: usize) -> (f64, f64) {
        (cell_anchor(j % self.src_grid.1), cell_anchor(j / self.src_grid.1))
    }

    /// Coarse-only correspondences at cell anchors.
    pub fn correspondences(&self) -> Vec<Correspondence> {
        self.matches
            .iter()
            .map(|m| {
                let (x_ref, y_ref) = self.ref_point(m.i);
                let (x_src, y_src) = self.src_point(m.j);
                Correspondence { x_ref, y_ref, x_src, y_src, confidence: m.confidence }
            })
            .collect()
    }

    /// The same matches seen from the source side.
    pub fn swapped(&self) -> Self {
        let mut matches: Vec<CoarseMatch> =
            self.matches.iter().map(|m| CoarseMatch { i: m.j, j: m.i, confidence: m.confidence }).collect();
        matches.sort_by_key(|m| m.i);
        Self { matches, ref_grid: self.src_grid, src_grid: self.ref_grid }
    }
}

/// A point correspondence in image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub x_ref: f64,
    pub y_ref: f64,
    pub x_src: f64,
    pub y_src: f64,
    pub confidence: f64,
}

/// One `x_ref y_ref x_src y_src conf` line per correspondence.
pub fn export_matches(matches: &[Correspondence]) -> String {
    let mut s = String::new();
    for m in matches {
        let _ = writeln!(s, "{:.4} {:.4} {:.4} {:.4} {:.6}", m.x_ref, m.y_ref, m.x_src, m.y_src, m.confidence);
    }
    s
}

pub fn parse_matches(text: &str) -> Result<Vec<Correspondence>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let v: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format { what: "match list", detail: format!("`{line}`: {e}") })?;
            if v.len() != 5 {
                return Err(Error::Format { what: "match list", detail: format!("`{line}` needs 5 fields") });
            }
            Ok(Correspondence { x_ref: v[0], y_ref: v[1], x_src: v[2], y_src: v[3], confidence: v[4] })
        })
        .collect()
}

/// First index of the maximum.
pub(crate) fn argmax<T: Scalar>(xs: impl Iterator<Item = T>) -> Option<(usize, T)> {
    let mut best: Option<(usize, T)> = None;
    for (i, x) in xs.enumerate() {
        if best.is_none_or(|(_, b)| x > b) {
            best = Some((i, x));
        }
    }
    best
}

/// Mutual nearest neighbours of `P` with `P(i, j) >= threshold`; ties go to
/// the lowest index.
pub fn extract_matches<T: Scalar>(
    p: &Tensor<T>,
    threshold: f64,
    ref_grid: (usize, usize),
    src_grid: (usize, usize),
) -> Result<MatchSet> {
    if p.rank() != 2 || p.shape() != [ref_grid.0 * ref_grid.1, src_grid.0 * src_grid.1] {
        return shape_err(format!("probability matrix {:?} does not fit grids {ref_grid:?} / {src_grid:?}", p.shape()));
    }
    let (rows, cols) = (p.shape()[0], p.shape()[1]);
    let d = p.data();
    let mut col_best = vec![(0usize, T::neg_infinity()); cols];
    for i in 0..rows {
        for (j, cb) in col_best.iter_mut().enumerate() {
            if d[i * cols + j] > cb.1 {
                *cb = (i, d[i * cols + j]);
            }
        }
    }
    let mut matches = Vec::new();
    for i in 0..rows {
        let Some((j, v)) = argmax(d[i * cols..(i + 1) * cols].iter().copied()) else { continue };
        if col_best[j].0 == i && v.as_f64() >= threshold {
            matches.push(CoarseMatch { i, j, confidence: v.as_f64() });
        }
    }
    Ok(MatchSet { matches, ref_grid, src_grid })
}
