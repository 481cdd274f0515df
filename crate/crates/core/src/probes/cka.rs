use serde::{Deserialize, Serialize};

use super::{ProbeReport, Record};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::{Scalar, Tensor};

/// A linear CKA value; `degenerate` marks an input with zero variance, for
/// which the value is reported as 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaValue {
    pub value: f64,
    pub degenerate: bool,
}

fn centered(x: &Tensor<impl Scalar>, op: &'static str) -> Result<(usize, usize, Vec<f64>)> {
    let &[n, p] = x.shape() else {
        return Err(Error::dim(op, "rank", 2, x.ndim()));
    };
    if n < 2 {
        return Err(Error::Parameter(format!("{op} needs at least 2 rows, got {n}")));
    }
    let mut data = x.to_f64_vec();
    for j in 0..p {
        let mean = (0..n).map(|i| data[i * p + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            data[i * p + j] -= mean;
        }
    }
    Ok((n, p, data))
}

/// `X Xᵀ` for a row-major `n×p` matrix.
fn gram(n: usize, p: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    // SAFETY: x is n×p row-major and out is n×n; the strides describe
    // exactly those buffers, and xᵀ is read through swapped strides.
    unsafe {
        matrixmultiply::dgemm(
            n,
            p,
            n,
            1.0,
            x.as_ptr(),
            p as isize,
            1,
            x.as_ptr(),
            1,
            p as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

/// Linear CKA of two representations of the same `n` items (`n×p1` and
/// `n×p2`), computed after column centering as
/// `⟨K, L⟩ / (‖K‖ ‖L‖)` with `K = XXᵀ`, `L = YYᵀ`, which equals
/// `‖YᵀX‖² / (‖XᵀX‖ ‖YᵀY‖)`.
pub fn linear_cka<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<CkaValue> {
    let (n, px, xc) = centered(x, "linear_cka")?;
    let (m, py, yc) = centered(y, "linear_cka")?;
    if n != m {
        return Err(Error::dim("linear_cka", "0 (items)", n, m));
    }
    let (k, l) = (gram(n, px, &xc), gram(n, py, &yc));
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
    let (kl, kk, ll) = (dot(&k, &l), dot(&k, &k), dot(&l, &l));
    let denom = (kk * ll).sqrt();
    if !(denom > 0.0) || !denom.is_finite() {
        return Ok(CkaValue {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(CkaValue {
        value: (kl / denom).clamp(0.0, 1.0),
        degenerate: false,
    })
}

/// Layerwise CKA between two models on the same images; entry `(i, j)`
/// compares `taps_a[i]` of model A with `taps_b[j]` of model B.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaMatrix {
    pub taps_a: Vec<String>,
    pub taps_b: Vec<String>,
    pub values: Vec<Vec<CkaValue>>,
}

impl CkaMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i][j].value
    }

    pub fn mean_diagonal(&self) -> f64 {
        let n = self.values.len();
        (0..n).map(|i| self.get(i, i)).sum::<f64>() / n as f64
    }
}

fn tap_features(model: &Model, images: &Tensor<f32>, taps: &[&str]) -> Result<Vec<Tensor<f32>>> {
    let n = images.shape()[0];
    let mut rows: Vec<Vec<f32>> = vec![Vec::new(); taps.len()];
    for start in (0..n).step_by(50) {
        let idx: Vec<usize> = (start..(start + 50).min(n)).collect();
        let acts = model.forward_with_taps(&images.gather(&idx), taps)?;
        for (k, tap) in taps.iter().enumerate() {
            let f = if *tap == crate::nn::TAP_LOGITS {
                &acts.logits
            } else {
                acts.feature(tap)?
            };
            rows[k].extend_from_slice(f.data());
        }
    }
    rows.into_iter()
        .map(|r| {
            let p = r.len() / n.max(1);
            Tensor::new([n, p], r)
        })
        .collect()
}

/// CKA matrix over flattened per-image features. Models run in their
/// current mode; callers normally pass eval-mode models.
pub fn cka_matrix(
    model_a: &Model,
    model_b: &Model,
    taps_a: &[&str],
    taps_b: &[&str],
    images: &Tensor<f32>,
) -> Result<CkaMatrix> {
    if taps_a.len() != taps_b.len() {
        return Err(Error::dim("cka_matrix", "tap list", taps_a.len(), taps_b.len()));
    }
    let cast = |m: &Model| {
        let c = images.shape().get(1).copied().unwrap_or(0);
        if c == m.in_channels() {
            Ok(images.clone())
        } else if c == 1 && m.in_channels() == 3 {
            let [n, _, h, w] = images.shape()[..] else { unreachable!() };
            let data = images
                .data()
                .chunks(h * w)
                .flat_map(|p| p.iter().chain(p).chain(p).copied())
                .collect();
            Tensor::new([n, 3, h, w], data)
        } else {
            Err(Error::dim("cka_matrix", "1 (channels)", m.in_channels(), c))
        }
    };
    let fa = tap_features(model_a, &cast(model_a)?, taps_a)?;
    let fb = tap_features(model_b, &cast(model_b)?, taps_b)?;
    let values = fa
        .iter()
        .map(|x| fb.iter().map(|y| linear_cka(x, y)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    Ok(CkaMatrix {
        taps_a: taps_a.iter().map(|s| s.to_string()).collect(),
        taps_b: taps_b.iter().map(|s| s.to_string()).collect(),
        values,
    })
}

/// Flattens a CKA matrix into a report: one `cka:i:j` record per entry and
/// a `diagonal` record per diagonal entry (the summary).
pub fn cka_report(matrix: &CkaMatrix, seed: u64) -> ProbeReport {
    let nb = matrix.taps_b.len();
    let mut records = Vec::new();
    for (i, row) in matrix.values.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            records.push(Record::new(i * nb + j, format!("cka:{i}:{j}"), v.value));
            if i == j {
                records.push(Record::new(i, "diagonal", v.value));
            }
        }
    }
    let config = serde_json::json!({ "taps_a": matrix.taps_a, "taps_b": matrix.taps_b });
    ProbeReport::from_records("cka", "diagonal", 1.0, records, config, seed)
}
