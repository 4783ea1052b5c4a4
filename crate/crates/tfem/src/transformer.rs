//! Forward-only transformer engine for constructed weights.
//!
//! A layer is residual attention followed by a residual two-matrix MLP:
//!
//! ```text
//! H' = H + Σ_m (V_m H) · act((Q_m H)ᵀ (K_m H))      (act applied column-wise)
//! H'' = H' + W₂ · relu(W₁ H')
//! ```
//!
//! There is deliberately no `1/√D` score scaling and no layer norm; the
//! constructions bake any scaling into the weights themselves. `act` is
//! column-wise softmax, elementwise relu, or the identity.
//!
//! Constructed heads have only a handful of nonzero entries in a `D x D`
//! frame, so head weights are stored as [`SparseMat`] (a many-head layer
//! would otherwise cost gigabytes) and the engine computes `QH`, `KH`, `VH`
//! row-sparsely, assembling the `N x N` score matrix from the few shared
//! nonzero rows. Results are identical to the dense formula (see the
//! `matches_naive_reference` test).
//!
//! # Binary container (`.tfem`)
//!
//! Little-endian throughout:
//!
//! ```text
//! magic  b"TFEM"
//! u32    version (currently 1)
//! u32    D      (context rows)
//! u32    L      (layer count)
//! mat    readout_left          (u32 rows, u32 cols, rows*cols f64)
//! mat    readout_right
//! L x layer:
//!   u8   activation            (0 softmax, 1 relu, 2 none)
//!   u32  head count M
//!   M x  head: smat q, smat k, smat v
//!        (smat = u32 rows, u32 cols, u32 nnz, nnz x (u32 row, u32 col, f64))
//!   u8   has_fc                (0 or 1)
//!   mat  w1, mat w2            (only if has_fc = 1)
//! ```

use crate::linalg::{op_norm, op_norm_sparse, relu, softmax_cols, Mat, SparseMat};
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransformerError {
    #[error("bad magic bytes, not a TFEM container")]
    BadMagic,
    #[error("unsupported container version {0}")]
    BadVersion(u32),
    #[error("corrupt container: {0}")]
    Corrupt(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Column-wise activation applied to the attention score matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Softmax,
    Relu,
    None,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Softmax => "softmax",
            Activation::Relu => "relu",
            Activation::None => "none",
        }
    }
}

/// One attention head; all three matrices are `D x D`.
#[derive(Debug, Clone)]
pub struct AttnHead {
    pub q: SparseMat,
    pub k: SparseMat,
    pub v: SparseMat,
}

/// Residual MLP `H + W₂ relu(W₁ H)`.
#[derive(Debug, Clone)]
pub struct Fc {
    pub w1: Mat,
    pub w2: Mat,
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub heads: Vec<AttnHead>,
    pub activation: Activation,
    pub fc: Option<Fc>,
}

/// A constructed transformer: layers plus fixed linear readouts applied as
/// `readout_left · H_L · readout_right`.
#[derive(Debug, Clone)]
pub struct TransformerParams {
    pub layers: Vec<Layer>,
    pub readout_left: Mat,
    pub readout_right: Mat,
}

/// Attention contribution of one head: `(V H) act((Q H)ᵀ (K H))`, returned
/// as the touched rows only.
fn head_delta(head: &AttnHead, h: &Mat, act: Activation) -> Vec<(usize, Vec<f64>)> {
    let n = h.cols();
    let q_rows = head.q.nonzero_rows();
    let k_rows = head.k.nonzero_rows();
    let v_rows = head.v.nonzero_rows();
    if v_rows.is_empty() {
        return Vec::new();
    }
    let shared: Vec<usize> = q_rows.iter().copied().filter(|r| k_rows.contains(r)).collect();
    if shared.is_empty() && act != Activation::Softmax {
        // Scores are identically zero; relu/identity contribute nothing.
        return Vec::new();
    }

    // scores[i][j] = Σ_r (QH)[r,i] (KH)[r,j], built rank-one row by row.
    let mut scores = Mat::zeros(n, n);
    for &r in &shared {
        let qrow = sparse_row_times(&head.q, r, h);
        let krow = sparse_row_times(&head.k, r, h);
        for i in 0..n {
            let qi = qrow[i];
            if qi == 0.0 {
                continue;
            }
            let srow = scores.row_mut(i);
            for (s, &kv) in srow.iter_mut().zip(krow.iter()) {
                *s += qi * kv;
            }
        }
    }
    let weights = match act {
        Activation::Softmax => softmax_cols(&scores),
        Activation::Relu => relu(&scores),
        Activation::None => scores,
    };

    let mut out = Vec::with_capacity(v_rows.len());
    for &t in &v_rows {
        let vrow = sparse_row_times(&head.v, t, h);
        let mut acc = vec![0.0; n];
        for i in 0..n {
            let vi = vrow[i];
            if vi == 0.0 {
                continue;
            }
            let wrow = weights.row(i);
            for (a, &w) in acc.iter_mut().zip(wrow.iter()) {
                *a += vi * w;
            }
        }
        out.push((t, acc));
    }
    out
}

/// Row `r` of `M * H`, visiting only the nonzero entries of that row of `M`.
fn sparse_row_times(m: &SparseMat, r: usize, h: &Mat) -> Vec<f64> {
    let n = h.cols();
    let mut out = vec![0.0; n];
    for &(_, l, coef) in m.row_entries(r) {
        let hrow = h.row(l as usize);
        for (o, &hv) in out.iter_mut().zip(hrow.iter()) {
            *o += coef * hv;
        }
    }
    out
}

/// One layer: residual attention then residual MLP.
pub fn layer_forward(layer: &Layer, h: &Mat) -> Mat {
    let mut h1 = h.clone();

    #[cfg(feature = "parallel")]
    let deltas: Vec<Vec<(usize, Vec<f64>)>> = {
        use rayon::prelude::*;
        if layer.heads.len() >= 32 {
            layer.heads.par_iter().map(|hd| head_delta(hd, h, layer.activation)).collect()
        } else {
            layer.heads.iter().map(|hd| head_delta(hd, h, layer.activation)).collect()
        }
    };
    #[cfg(not(feature = "parallel"))]
    let deltas: Vec<Vec<(usize, Vec<f64>)>> =
        layer.heads.iter().map(|hd| head_delta(hd, h, layer.activation)).collect();

    for delta in &deltas {
        for (row, vals) in delta {
            let target = h1.row_mut(*row);
            for (t, &v) in target.iter_mut().zip(vals.iter()) {
                *t += v;
            }
        }
    }

    if let Some(fc) = &layer.fc {
        let hidden = relu(&fc.w1.matmul(&h1));
        let upd = fc.w2.matmul(&hidden);
        h1.scaled_add(&upd, 1.0);
    }
    h1
}

/// Run all layers and apply the readouts.
pub fn tf_forward(params: &TransformerParams, h: &Mat) -> Result<Mat, TransformerError> {
    check_dims(params, h)?;
    let mut cur = h.clone();
    for layer in &params.layers {
        cur = layer_forward(layer, &cur);
    }
    Ok(params.readout_left.matmul(&cur).matmul(&params.readout_right))
}

/// Like [`tf_forward`] but also returns the context matrix after every
/// layer, for fidelity checks on intermediate blocks.
pub fn tf_forward_trace(
    params: &TransformerParams,
    h: &Mat,
) -> Result<(Vec<Mat>, Mat), TransformerError> {
    check_dims(params, h)?;
    let mut states = Vec::with_capacity(params.layers.len());
    let mut cur = h.clone();
    for layer in &params.layers {
        cur = layer_forward(layer, &cur);
        states.push(cur.clone());
    }
    let out = params.readout_left.matmul(&cur).matmul(&params.readout_right);
    Ok((states, out))
}

fn check_dims(params: &TransformerParams, h: &Mat) -> Result<(), TransformerError> {
    let d = h.rows();
    if params.readout_left.cols() != d {
        return Err(TransformerError::DimensionMismatch(format!(
            "readout_left expects {} context rows, got {d}",
            params.readout_left.cols()
        )));
    }
    if params.readout_right.rows() != h.cols() {
        return Err(TransformerError::DimensionMismatch(format!(
            "readout_right expects {} columns, got {}",
            params.readout_right.rows(),
            h.cols()
        )));
    }
    for (l, layer) in params.layers.iter().enumerate() {
        for head in &layer.heads {
            for (m, name) in [(&head.q, "Q"), (&head.k, "K"), (&head.v, "V")] {
                if m.rows() != d || m.cols() != d {
                    return Err(TransformerError::DimensionMismatch(format!(
                        "layer {l}: {name} is {}x{}, context has {d} rows",
                        m.rows(),
                        m.cols()
                    )));
                }
            }
        }
        if let Some(fc) = &layer.fc {
            if fc.w1.cols() != d || fc.w2.rows() != d || fc.w1.rows() != fc.w2.cols() {
                return Err(TransformerError::DimensionMismatch(format!(
                    "layer {l}: fc shapes {}x{} / {}x{} incompatible with D={d}",
                    fc.w1.rows(),
                    fc.w1.cols(),
                    fc.w2.rows(),
                    fc.w2.cols()
                )));
            }
        }
    }
    Ok(())
}

/// Layer-wise parameter norm: the maximum over layers of
/// `max_m max(‖Q_m‖₂, ‖K_m‖₂) + ‖readout_left‖₂ + ‖readout_right‖₂
///  + Σ_m ‖V_m‖₂ + ‖W₁‖₂ + ‖W₂‖₂`.
pub fn param_norm(params: &TransformerParams) -> f64 {
    let ro = op_norm(&params.readout_left) + op_norm(&params.readout_right);
    params
        .layers
        .iter()
        .map(|layer| {
            let qk = layer
                .heads
                .iter()
                .map(|h| op_norm_sparse(&h.q).max(op_norm_sparse(&h.k)))
                .fold(0.0f64, f64::max);
            let vs: f64 = layer.heads.iter().map(|h| op_norm_sparse(&h.v)).sum();
            let fc = layer
                .fc
                .as_ref()
                .map(|fc| op_norm(&fc.w1) + op_norm(&fc.w2))
                .unwrap_or(0.0);
            qk + ro + vs + fc
        })
        .fold(0.0, f64::max)
}

/// Membership check for the bounded parameter class: parameter norm at most
/// `b_theta`, at most `b_m` heads per layer, at most `b_l` layers.
pub fn space_check(params: &TransformerParams, b_theta: f64, b_m: usize, b_l: usize) -> bool {
    params.layers.len() <= b_l
        && params.layers.iter().all(|l| l.heads.len() <= b_m)
        && param_norm(params) <= b_theta
}

// ---------------------------------------------------------------------------
// Binary container
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"TFEM";
const VERSION: u32 = 1;

fn write_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_mat<W: Write>(w: &mut W, m: &Mat) -> std::io::Result<()> {
    write_u32(w, m.rows() as u32)?;
    write_u32(w, m.cols() as u32)?;
    for &v in m.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn write_smat<W: Write>(w: &mut W, m: &SparseMat) -> std::io::Result<()> {
    write_u32(w, m.rows() as u32)?;
    write_u32(w, m.cols() as u32)?;
    write_u32(w, m.nnz() as u32)?;
    for &(i, j, v) in m.entries() {
        write_u32(w, i)?;
        write_u32(w, j)?;
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, TransformerError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8, TransformerError> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64, TransformerError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_mat<R: Read>(r: &mut R) -> Result<Mat, TransformerError> {
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    if rows.saturating_mul(cols) > 1 << 28 {
        return Err(TransformerError::Corrupt(format!("matrix {rows}x{cols} too large")));
    }
    let mut m = Mat::zeros(rows, cols);
    for i in 0..rows * cols {
        m.data_mut()[i] = read_f64(r)?;
    }
    Ok(m)
}

fn read_smat<R: Read>(r: &mut R) -> Result<SparseMat, TransformerError> {
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    let nnz = read_u32(r)? as usize;
    if nnz > rows.saturating_mul(cols) || nnz > 1 << 26 {
        return Err(TransformerError::Corrupt(format!("sparse {rows}x{cols} with nnz={nnz}")));
    }
    let mut entries = Vec::with_capacity(nnz);
    for _ in 0..nnz {
        let i = read_u32(r)? as usize;
        let j = read_u32(r)? as usize;
        let v = read_f64(r)?;
        if i >= rows || j >= cols {
            return Err(TransformerError::Corrupt(format!("entry ({i},{j}) out of bounds")));
        }
        entries.push((i, j, v));
    }
    Ok(SparseMat::from_entries(rows, cols, entries))
}

pub fn write_tfem<W: Write>(params: &TransformerParams, w: &mut W) -> Result<(), TransformerError> {
    w.write_all(MAGIC)?;
    write_u32(w, VERSION)?;
    let d = params.readout_left.cols() as u32;
    write_u32(w, d)?;
    write_u32(w, params.layers.len() as u32)?;
    write_mat(w, &params.readout_left)?;
    write_mat(w, &params.readout_right)?;
    for layer in &params.layers {
        let act = match layer.activation {
            Activation::Softmax => 0u8,
            Activation::Relu => 1,
            Activation::None => 2,
        };
        w.write_all(&[act])?;
        write_u32(w, layer.heads.len() as u32)?;
        for head in &layer.heads {
            write_smat(w, &head.q)?;
            write_smat(w, &head.k)?;
            write_smat(w, &head.v)?;
        }
        match &layer.fc {
            Some(fc) => {
                w.write_all(&[1])?;
                write_mat(w, &fc.w1)?;
                write_mat(w, &fc.w2)?;
            }
            None => w.write_all(&[0])?,
        }
    }
    Ok(())
}

pub fn read_tfem<R: Read>(r: &mut R) -> Result<TransformerParams, TransformerError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TransformerError::BadMagic);
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(TransformerError::BadVersion(version));
    }
    let _d = read_u32(r)?;
    let n_layers = read_u32(r)? as usize;
    let readout_left = read_mat(r)?;
    let readout_right = read_mat(r)?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let activation = match read_u8(r)? {
            0 => Activation::Softmax,
            1 => Activation::Relu,
            2 => Activation::None,
            other => return Err(TransformerError::Corrupt(format!("bad activation tag {other}"))),
        };
        let n_heads = read_u32(r)? as usize;
        let mut heads = Vec::with_capacity(n_heads);
        for _ in 0..n_heads {
            let q = read_smat(r)?;
            let k = read_smat(r)?;
            let v = read_smat(r)?;
            heads.push(AttnHead { q, k, v });
        }
        let fc = match read_u8(r)? {
            0 => None,
            1 => {
                let w1 = read_mat(r)?;
                let w2 = read_mat(r)?;
                Some(Fc { w1, w2 })
            }
            other => return Err(TransformerError::Corrupt(format!("bad fc tag {other}"))),
        };
        layers.push(Layer { heads, activation, fc });
    }
    Ok(TransformerParams { layers, readout_left, readout_right })
}
