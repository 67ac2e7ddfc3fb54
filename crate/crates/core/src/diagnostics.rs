//! Activation- and weight-level diagnostics: the correction-to-output
//! ratio (COR), whitened KV correlation, covariance-probe alignment (CPA),
//! attention sink, entropy, score range, and stable ranks of projections
//! and bilinear circuits.

use crate::attention::{softmax_attention_dense, softmax_stats, weighted_kv_stats, AttnInputs};
use crate::error::{Error, Result};
use crate::linalg::{inv_sqrt_psd, spectral_norm_sq, stable_rank};
use crate::model::BlockParams;
use crate::tensor::{norm2, Tensor};

/// Quantile levels mirrored by every dotted-quantile report.
pub const QUANTILES: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

/// Linear-interpolation quantile of an unsorted slice.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of empty slice");
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        v[lo]
    } else {
        v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
    }
}

/// Correction-to-output ratio per query:
/// `COR_i = ||sigma_kv rho_i|| / ||o_i^SA||`.
pub fn cor(inp: &AttnInputs) -> Result<Vec<f64>> {
    inp.validate()?;
    let (p, _, _) = softmax_stats(inp)?;
    let o_sa = softmax_attention_dense(inp)?;
    let mut out = Vec::with_capacity(inp.l_q());
    for i in 0..inp.l_q() {
        let denom = norm2(o_sa.row(i));
        if denom == 0.0 {
            return Err(Error::non_finite(format!(
                "zero softmax output norm at query {i}; COR undefined"
            )));
        }
        let (_, _, sigma_kv) = weighted_kv_stats(inp, &p, i);
        let corr: Vec<f64> = (0..inp.d_v())
            .map(|a| crate::tensor::dot(sigma_kv.row(a), inp.r.row(i)))
            .collect();
        out.push(norm2(&corr) / denom);
    }
    Ok(out)
}

/// Whitened KV correlation norm and covariance-probe alignment per query.
///
/// `corr_fro[i] = || sigma_vv^{-1/2} sigma_kv sigma_kk^{-1/2} ||_F` with
/// `jitter * trace/d` added to each covariance diagonal before the inverse
/// square roots (pass 0 to disable), and
/// `cpa[i] = ||sigma_kv rho|| / (||rho|| ||sigma_kv||_2)`, defined as 0 at
/// `rho = 0`.
pub fn corr_cpa(inp: &AttnInputs, jitter: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    inp.validate()?;
    if jitter < 0.0 {
        return Err(Error::Config("jitter must be nonnegative".into()));
    }
    let (p, _, _) = softmax_stats(inp)?;
    let (d_k, d_v) = (inp.d_k(), inp.d_v());
    let mut corr_out = Vec::with_capacity(inp.l_q());
    let mut cpa_out = Vec::with_capacity(inp.l_q());
    for i in 0..inp.l_q() {
        let hi = inp.visible(i);
        let (vbar, kbar, sigma_kv) = weighted_kv_stats(inp, &p, i);
        // weighted self-covariances
        let mut sigma_vv = Tensor::zeros(&[d_v, d_v]);
        let mut sigma_kk = Tensor::zeros(&[d_k, d_k]);
        for j in 0..hi {
            let w = p.at(i, j);
            let vj = inp.v.row(j);
            let kj = inp.k.row(j);
            for a in 0..d_v {
                let da = vj[a] - vbar[a];
                let row = sigma_vv.row_mut(a);
                for (b2, x) in row.iter_mut().enumerate() {
                    *x += w * da * (vj[b2] - vbar[b2]);
                }
            }
            for a in 0..d_k {
                let da = kj[a] - kbar[a];
                let row = sigma_kk.row_mut(a);
                for (b2, x) in row.iter_mut().enumerate() {
                    *x += w * da * (kj[b2] - kbar[b2]);
                }
            }
        }
        if jitter > 0.0 {
            let tv = (0..d_v).map(|a| sigma_vv.at(a, a)).sum::<f64>() / d_v as f64;
            let tk = (0..d_k).map(|a| sigma_kk.at(a, a)).sum::<f64>() / d_k as f64;
            for a in 0..d_v {
                sigma_vv.set(a, a, sigma_vv.at(a, a) + jitter * tv);
            }
            for a in 0..d_k {
                sigma_kk.set(a, a, sigma_kk.at(a, a) + jitter * tk);
            }
        }
        let vv_inv_sqrt = inv_sqrt_psd(&sigma_vv, 1e-300)?;
        let kk_inv_sqrt = inv_sqrt_psd(&sigma_kk, 1e-300)?;
        let corr = vv_inv_sqrt.matmul(&sigma_kv).matmul(&kk_inv_sqrt);
        corr_out.push(corr.frob_norm());

        let rho = inp.r.row(i);
        let rho_norm = norm2(rho);
        if rho_norm == 0.0 {
            cpa_out.push(0.0);
        } else {
            let proj: Vec<f64> = (0..d_v)
                .map(|a| crate::tensor::dot(sigma_kv.row(a), rho))
                .collect();
            let spec = spectral_norm_sq(&sigma_kv).unwrap_or(0.0).sqrt();
            if spec == 0.0 {
                cpa_out.push(0.0);
            } else {
                cpa_out.push(norm2(&proj) / (rho_norm * spec));
            }
        }
    }
    Ok((corr_out, cpa_out))
}

/// Per-query score-structure measurements over the visible prefix.
#[derive(Debug, Clone)]
pub struct ScoreStats {
    pub sink_sa: Vec<f64>,
    pub sink_plx: Vec<f64>,
    pub entropy: Vec<f64>,
    pub s_min: Vec<f64>,
    pub s_max: Vec<f64>,
}

/// First-token weight share (plain for the base softmax, squared share for
/// the signed combined weights), Shannon entropy of the base softmax, and
/// the combined-score range.
pub fn sink_entropy_range(inp: &AttnInputs) -> Result<ScoreStats> {
    inp.validate()?;
    let (p, _, _) = softmax_stats(inp)?;
    let l = inp.l_q();
    let mut st = ScoreStats {
        sink_sa: Vec::with_capacity(l),
        sink_plx: Vec::with_capacity(l),
        entropy: Vec::with_capacity(l),
        s_min: Vec::with_capacity(l),
        s_max: Vec::with_capacity(l),
    };
    for i in 0..l {
        let hi = inp.visible(i);
        let rho = inp.r.row(i);
        let t: Vec<f64> = (0..hi)
            .map(|j| crate::tensor::dot(inp.k.row(j), rho))
            .collect();
        let tbar: f64 = (0..hi).map(|j| p.at(i, j) * t[j]).sum();
        let s: Vec<f64> = (0..hi)
            .map(|j| p.at(i, j) * (1.0 + tbar - t[j]))
            .collect();
        let sq_sum: f64 = s.iter().map(|x| x * x).sum();
        st.sink_sa.push(p.at(i, 0));
        st.sink_plx.push(if sq_sum > 0.0 { s[0] * s[0] / sq_sum } else { 0.0 });
        let ent: f64 = (0..hi)
            .map(|j| {
                let w = p.at(i, j);
                if w > 0.0 {
                    -w * w.ln()
                } else {
                    0.0
                }
            })
            .sum();
        st.entropy.push(ent);
        st.s_min
            .push(s.iter().cloned().fold(f64::INFINITY, f64::min));
        st.s_max
            .push(s.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    }
    Ok(st)
}

/// Stable ranks of the projection matrices and per-head bilinear circuits
/// of one block, circuits averaged across heads. Zero matrices report as
/// absent rather than erroring.
#[derive(Debug, Clone, serde::Serialize)]
pub struct WeightSpectra {
    pub w_q: Option<f64>,
    pub w_k: Option<f64>,
    pub w_v: Option<f64>,
    pub w_o: Option<f64>,
    pub w_r: Option<f64>,
    pub w_qk: Option<f64>,
    pub w_ov: Option<f64>,
    pub w_rk: Option<f64>,
}

fn srank_opt(x: &Tensor<f64>) -> Result<Option<f64>> {
    if x.frob_norm() == 0.0 {
        return Ok(None);
    }
    Ok(Some(stable_rank(x)?))
}

/// Rows `[h*d_head, (h+1)*d_head)` of a `[heads*d_head, d]` projection.
fn head_rows(w: &Tensor<f64>, h: usize, d_head: usize) -> Tensor<f64> {
    let d = w.cols();
    let mut out = Tensor::zeros(&[d_head, d]);
    for r in 0..d_head {
        out.row_mut(r).copy_from_slice(w.row(h * d_head + r));
    }
    out
}

/// Columns `[h*d_head, (h+1)*d_head)` of a `[d, heads*d_head]` projection.
fn head_cols(w: &Tensor<f64>, h: usize, d_head: usize) -> Tensor<f64> {
    let d = w.rows();
    let mut out = Tensor::zeros(&[d, d_head]);
    for r in 0..d {
        out.row_mut(r)
            .copy_from_slice(&w.row(r)[h * d_head..(h + 1) * d_head]);
    }
    out
}

/// Mean stable rank over heads of the bilinear circuit built per head,
/// `None` when every head circuit is zero.
fn circuit_srank(
    left: &Tensor<f64>,
    right: &Tensor<f64>,
    heads: usize,
    d_head: usize,
    left_is_cols: bool,
) -> Result<Option<f64>> {
    let mut vals = Vec::new();
    for h in 0..heads {
        let circuit = if left_is_cols {
            // W_O W_V per head: [d, d_head] x [d_head, d]
            head_cols(left, h, d_head).matmul(&head_rows(right, h, d_head))
        } else {
            // W_Q^T W_K per head: [d, d_head] x [d_head, d]
            head_rows(left, h, d_head)
                .transpose()
                .matmul(&head_rows(right, h, d_head))
        };
        if circuit.frob_norm() == 0.0 {
            continue;
        }
        vals.push(stable_rank(&circuit)?);
    }
    if vals.is_empty() {
        Ok(None)
    } else {
        Ok(Some(vals.iter().sum::<f64>() / vals.len() as f64))
    }
}

pub fn weight_spectra(block: &BlockParams, heads: usize, d_head: usize) -> Result<WeightSpectra> {
    let w_r = block.w_r.as_ref();
    Ok(WeightSpectra {
        w_q: srank_opt(&block.w_q)?,
        w_k: srank_opt(&block.w_k)?,
        w_v: srank_opt(&block.w_v)?,
        w_o: srank_opt(&block.w_o)?,
        w_r: w_r.map(srank_opt).transpose()?.flatten(),
        w_qk: circuit_srank(&block.w_q, &block.w_k, heads, d_head, false)?,
        w_ov: circuit_srank(&block.w_o, &block.w_v, heads, d_head, true)?,
        w_rk: match w_r {
            Some(wr) => circuit_srank(wr, &block.w_k, heads, d_head, false)?,
            None => None,
        },
    })
}
