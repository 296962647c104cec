use crate::error::{Error, Result};
use crate::tensor::{layer_norm, matmul, softmax_rows, Tensor};

use super::weights::{LayerWeights, Norm};

pub(crate) fn norm_affine(x: &Tensor, norm: &Norm, eps: f64) -> Result<Tensor> {
    let mut y = layer_norm(x, eps)?;
    let c = y.cols();
    for row in y.data_mut().chunks_mut(c) {
        for ((v, g), b) in row.iter_mut().zip(&norm.gain).zip(&norm.bias) {
            *v = *v * g + b;
        }
    }
    Ok(y)
}

/// Scaled dot-product attention split over `heads` column groups.
pub fn multi_head_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let width = q.cols();
    if k.cols() != width || v.cols() != width || k.rows() != v.rows() {
        return Err(Error::dim(format!("attention q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape())));
    }
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(Error::dim(format!("width {width} over {heads} heads")));
    }
    let d = width / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let rows = q.rows();
    let mut out = vec![0.0; rows * width];
    for hd in 0..heads {
        let (lo, hi) = (hd * d, (hd + 1) * d);
        let qh = q.slice_cols(lo, hi)?;
        let kh = k.slice_cols(lo, hi)?;
        let vh = v.slice_cols(lo, hi)?;
        let scores = matmul(&qh, &kh.transpose()?)?.scale(scale);
        let probs = softmax_rows(&scores)?;
        let oh = matmul(&probs, &vh)?;
        for i in 0..rows {
            out[i * width + lo..i * width + hi].copy_from_slice(oh.row(i));
        }
    }
    Tensor::matrix(rows, width, out)
}

/// Fresh projections of the explicit tokens for one layer.
pub struct SelfAttentionProjections {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

pub fn project_self_attention(layer: &LayerWeights, x: &Tensor, eps: f64) -> Result<SelfAttentionProjections> {
    let a = norm_affine(x, &layer.ln1, eps)?;
    Ok(SelfAttentionProjections { q: matmul(&a, &layer.wq)?, k: matmul(&a, &layer.wk)?, v: matmul(&a, &layer.wv)? })
}

/// Residual update of the self-attention sublayer. `keys`/`values` cover the
/// explicit rows followed by any later-context rows.
pub fn self_attention_update(
    layer: &LayerWeights,
    x: &Tensor,
    q: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    heads: usize,
) -> Result<Tensor> {
    let o = multi_head_attention(q, keys, values, heads)?;
    x.add(&matmul(&o, &layer.wo)?)
}

/// Cross-attention against the fixed context. Acts on each row independently.
pub fn cross_attention_sublayer(layer: &LayerWeights, x: &Tensor, heads: usize, eps: f64) -> Result<Tensor> {
    let a = norm_affine(x, &layer.ln2, eps)?;
    let q = matmul(&a, &layer.cq)?;
    let o = multi_head_attention(&q, &layer.context_k, &layer.context_v, heads)?;
    x.add(&matmul(&o, &layer.co)?)
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Position-wise feed-forward block with tanh-GELU.
pub fn ffn_sublayer(layer: &LayerWeights, x: &Tensor, eps: f64) -> Result<Tensor> {
    let a = norm_affine(x, &layer.ln3, eps)?;
    let hidden = matmul(&a, &layer.w1)?.add_row_vector(&layer.b1)?.map(gelu);
    let out = matmul(&hidden, &layer.w2)?.add_row_vector(&layer.b2)?;
    x.add(&out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomSource;

    #[test]
    fn single_key_attention_returns_value() {
        let mut r = RandomSource::new(1);
        let q = Tensor::matrix(3, 4, r.normals(12)).unwrap();
        let k = Tensor::matrix(1, 4, r.normals(4)).unwrap();
        let v = Tensor::matrix(1, 4, r.normals(4)).unwrap();
        let o = multi_head_attention(&q, &k, &v, 2).unwrap();
        for i in 0..3 {
            assert_eq!(o.row(i), v.row(0));
        }
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_191_990_608_276_8).abs() < 1e-12);
        assert!((gelu(-3.0) + 0.003_637_392_081_77).abs() < 1e-8);
    }
}
