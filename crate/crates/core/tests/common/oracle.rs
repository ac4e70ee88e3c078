//! Straight-line reference implementations on plain row-major `Vec<f64>`,
//! independent of the graph engine.
#![allow(dead_code)]

use gar::params::Linear;
use gar::transformer::EncoderLayerWeights;
use gar::Tensor;

pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub v: Vec<f64>,
}

impl Mat {
    pub fn of(t: &Tensor) -> Mat {
        let (rows, cols) = match t.shape() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => panic!("not a matrix: {s:?}"),
        };
        Mat { rows, cols, v: t.data().to_vec() }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.v[i * self.cols + j]
    }
}

pub fn mm(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows);
    let mut v = vec![0.0; a.rows * b.cols];
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut s = 0.0;
            for k in 0..a.cols {
                s += a.at(i, k) * b.at(k, j);
            }
            v[i * b.cols + j] = s;
        }
    }
    Mat { rows: a.rows, cols: b.cols, v }
}

pub fn transpose(a: &Mat) -> Mat {
    let mut v = vec![0.0; a.v.len()];
    for i in 0..a.rows {
        for j in 0..a.cols {
            v[j * a.rows + i] = a.at(i, j);
        }
    }
    Mat { rows: a.cols, cols: a.rows, v }
}

pub fn softmax(a: &Mat) -> Mat {
    let mut v = a.v.clone();
    for row in v.chunks_mut(a.cols) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
        for x in row.iter_mut() {
            *x = (*x - m).exp() / z;
        }
    }
    Mat { rows: a.rows, cols: a.cols, v }
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    Mat { rows: a.rows, cols: a.cols, v: a.v.iter().zip(&b.v).map(|(x, y)| x + y).collect() }
}

pub fn linear(x: &Mat, l: &Linear<Tensor>) -> Mat {
    let mut y = mm(x, &Mat::of(&l.weight));
    if let Some(b) = &l.bias {
        for row in y.v.chunks_mut(b.len()) {
            for (r, bv) in row.iter_mut().zip(b.data()) {
                *r += bv;
            }
        }
    }
    y
}

pub fn relu(a: &Mat) -> Mat {
    Mat { rows: a.rows, cols: a.cols, v: a.v.iter().map(|x| x.max(0.0)).collect() }
}

pub fn layer_norm(a: &Mat, gain: &Tensor, bias: &Tensor) -> Mat {
    let d = a.cols as f64;
    let mut v = Vec::with_capacity(a.v.len());
    for row in a.v.chunks(a.cols) {
        let mu = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / d;
        for (j, x) in row.iter().enumerate() {
            v.push((x - mu) / (var + 1e-5).sqrt() * gain.data()[j] + bias.data()[j]);
        }
    }
    Mat { rows: a.rows, cols: a.cols, v }
}

/// `softmax(Q Kᵀ / √d) V`.
pub fn attention(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let scale = 1.0 / (q.cols as f64).sqrt();
    let mut s = mm(q, &transpose(k));
    s.v.iter_mut().for_each(|x| *x *= scale);
    mm(&softmax(&s), v)
}

/// Per-head attention, concatenated along columns, then projected.
pub fn multi_head(s: &Mat, w: &EncoderLayerWeights<Tensor>) -> Mat {
    let heads: Vec<Mat> = w
        .heads
        .iter()
        .map(|h| {
            let q = mm(s, &Mat::of(&h.query));
            let k = mm(s, &Mat::of(&h.key));
            let v = mm(s, &Mat::of(&h.value));
            attention(&q, &k, &v)
        })
        .collect();
    let width: usize = heads.iter().map(|h| h.cols).sum();
    let mut cat = vec![0.0; s.rows * width];
    let mut off = 0;
    for h in &heads {
        for i in 0..s.rows {
            for j in 0..h.cols {
                cat[i * width + off + j] = h.at(i, j);
            }
        }
        off += h.cols;
    }
    mm(&Mat { rows: s.rows, cols: width, v: cat }, &Mat::of(&w.output))
}

/// Inference-mode encoder layer, post-norm.
pub fn encoder_layer(s: &Mat, w: &EncoderLayerWeights<Tensor>) -> Mat {
    let e_hat = layer_norm(&add(s, &multi_head(s, w)), &w.norm_attn.gain, &w.norm_attn.bias);
    let ff = linear(&relu(&linear(&e_hat, &w.ff_in)), &w.ff_out);
    layer_norm(&add(&e_hat, &ff), &w.norm_ff.gain, &w.norm_ff.bias)
}
