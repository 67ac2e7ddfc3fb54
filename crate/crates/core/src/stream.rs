//! Tiled one-pass streaming forward with two-branch online softmax, the
//! split-KV decode path, and element/FLOP accounting.
//!
//! The kernel mirrors the row-block/column-block structure of a
//! FlashAttention-style pass:
//!
//! ```text
//! for each column tile c:
//!     S1 <- Q_r K_c^T * s          (masked)
//!     m  <- max(m_r, rowmax(S1))
//!     a  <- exp2(m_r - m)
//!     P1 <- exp2(S1 - m)
//!     S2 <- R_r K_c^T
//!     P2 <- P1 .* S2
//!     d1 <- a d1 + rowsum(P1);  d2 <- a d2 + rowsum(P2)
//!     O1 <- a O1 + P1 V_c;      O2 <- a O2 + P2 V_c
//! O_r <- O1/d1 * (1 + d2/d1) - O2/d1
//! ```
//!
//! Exponentials are base-2 with the logit scale pre-multiplied by log2(e),
//! so the kernel state lives in the exp2 frame; the backward cache converts
//! the row max back to the natural frame on write-out.
//!
//! The ledger counts K/V column tiles once per row block whether or not the
//! tile survives the causal mask, mirroring the rectangular traffic model
//! the arithmetic-intensity formulas assume; fully masked tiles skip the
//! compute but not the fetch.

use crate::attention::AttnInputs;
use crate::backward::BackwardCache;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, LOG2_E};

/// Row/column tile extents and the decode split count.
#[derive(Debug, Clone, Copy)]
pub struct TileConfig {
    pub b_r: usize,
    pub b_c: usize,
    /// Number of decode shards over the KV tile loop; a power of two.
    pub split: usize,
}

impl TileConfig {
    pub fn new(b_r: usize, b_c: usize, split: usize) -> Result<Self> {
        if b_r == 0 || b_c == 0 {
            return Err(Error::Config("tile extents must be >= 1".into()));
        }
        if split == 0 || !split.is_power_of_two() {
            return Err(Error::Config(format!(
                "decode split must be a power of two, got {split}"
            )));
        }
        Ok(TileConfig { b_r, b_c, split })
    }
}

/// Monotone counters of tensor elements moved and floating point work done
/// during one pass. Elements convert to bytes by the dtype width.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IoLedger {
    pub elements_read: u64,
    pub elements_written: u64,
    pub flops: u64,
}

impl IoLedger {
    pub fn bytes_read(&self, width: usize) -> u64 {
        self.elements_read * width as u64
    }

    pub fn merge(&mut self, other: &IoLedger) {
        self.elements_read += other.elements_read;
        self.elements_written += other.elements_written;
        self.flops += other.flops;
    }
}

/// Running one-pass state for one row block.
struct StreamState<T> {
    m: Vec<T>,
    d1: Vec<T>,
    d2: Vec<T>,
    o1: Tensor<T>,
    o2: Tensor<T>,
}

impl<T: Scalar> StreamState<T> {
    fn new(rows: usize, d_v: usize) -> Self {
        StreamState {
            m: vec![T::NEG_INF; rows],
            d1: vec![T::ZERO; rows],
            d2: vec![T::ZERO; rows],
            o1: Tensor::zeros(&[rows, d_v]),
            o2: Tensor::zeros(&[rows, d_v]),
        }
    }
}

/// Whether the kernel also runs the probe branch (Parallax) or only the
/// softmax branch (the FlashAttention-equivalent traffic baseline).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Branch {
    Parallax,
    SoftmaxOnly,
}

/// Streaming Parallax forward. Returns the output, the per-row backward
/// cache `(o, vbar, tbar, omega, m)` in f64, and the I/O ledger.
pub fn parallax_stream_forward<T: Scalar>(
    inp: &AttnInputs<T>,
    cfg: &TileConfig,
) -> Result<(Tensor<T>, BackwardCache, IoLedger)> {
    let (out, cache, ledger) = stream_forward(inp, cfg, Branch::Parallax)?;
    Ok((out, cache.expect("parallax branch always builds a cache"), ledger))
}

/// Softmax-only streaming run of the same kernel; the traffic/FLOP baseline.
pub fn softmax_stream_forward<T: Scalar>(
    inp: &AttnInputs<T>,
    cfg: &TileConfig,
) -> Result<(Tensor<T>, IoLedger)> {
    let (out, _, ledger) = stream_forward(inp, cfg, Branch::SoftmaxOnly)?;
    Ok((out, ledger))
}

fn stream_forward<T: Scalar>(
    inp: &AttnInputs<T>,
    cfg: &TileConfig,
    branch: Branch,
) -> Result<(Tensor<T>, Option<BackwardCache>, IoLedger)> {
    inp.validate()?;
    let (l_q, l_kv, d_k, d_v) = (inp.l_q(), inp.l_kv(), inp.d_k(), inp.d_v());
    let n_c = l_kv.div_ceil(cfg.b_c);
    let scale2 = inp.scale * LOG2_E;

    let mut out = Tensor::zeros(&[l_q, d_v]);
    let mut cache = match branch {
        Branch::Parallax => Some(BackwardCache::zeros(l_q, d_v)),
        Branch::SoftmaxOnly => None,
    };
    let mut ledger = IoLedger::default();

    for r0 in (0..l_q).step_by(cfg.b_r) {
        let r1 = (r0 + cfg.b_r).min(l_q);
        let rows = r1 - r0;
        // Q row block read once; R only when the probe branch runs.
        ledger.elements_read += (rows * d_k) as u64;
        if branch == Branch::Parallax {
            ledger.elements_read += (rows * d_k) as u64;
        }

        let mut st = StreamState::<T>::new(rows, d_v);
        for c in 0..n_c {
            let c0 = c * cfg.b_c;
            let c1 = (c0 + cfg.b_c).min(l_kv);
            let cols = c1 - c0;
            // K and V column tiles are fetched once per row block.
            ledger.elements_read += (cols * (d_k + d_v)) as u64;
            if inp.causal && c0 > r1 - 1 {
                // Entire tile sits above the causal diagonal for every row
                // in this block; nothing to compute.
                continue;
            }
            process_tile(inp, branch, &mut st, &mut ledger, r0, rows, c0, cols, scale2)?;
        }

        // O_r <- O1/d1 * (1 + d2/d1) - O2/d1
        for i in 0..rows {
            let d1 = st.d1[i];
            if !(d1 > T::ZERO) {
                return Err(Error::non_finite(format!(
                    "empty softmax mass for query row {}",
                    r0 + i
                )));
            }
            let o_row = out.row_mut(r0 + i);
            let o1 = st.o1.row(i);
            match branch {
                Branch::Parallax => {
                    let d2 = st.d2[i];
                    let o2 = st.o2.row(i);
                    let gain = T::ONE + d2 / d1;
                    for (x, (&a, &b)) in o_row.iter_mut().zip(o1.iter().zip(o2)) {
                        *x = a / d1 * gain - b / d1;
                    }
                    ledger.flops += (4 * d_v) as u64 + 2;
                    let ch = cache.as_mut().unwrap();
                    let o_f64: Vec<f64> = o_row.iter().map(|x| x.to_f64()).collect();
                    let vbar: Vec<f64> =
                        o1.iter().map(|x| (x.to_f64()) / d1.to_f64()).collect();
                    ch.set_row(
                        r0 + i,
                        &o_f64,
                        &vbar,
                        (d2 / d1).to_f64(),
                        d1.to_f64(),
                        // exp2-frame row max back to the natural frame
                        st.m[i].to_f64() * std::f64::consts::LN_2,
                    );
                }
                Branch::SoftmaxOnly => {
                    for (x, &a) in o_row.iter_mut().zip(o1) {
                        *x = a / d1;
                    }
                    ledger.flops += d_v as u64;
                }
            }
            if o_row.iter().any(|x| !x.is_finite()) {
                return Err(Error::non_finite(format!(
                    "streaming output row {} (row block at {})",
                    r0 + i,
                    r0
                )));
            }
        }
        ledger.elements_written += (rows * d_v) as u64;
    }
    Ok((out, cache, ledger))
}

#[allow(clippy::too_many_arguments)]
fn process_tile<T: Scalar>(
    inp: &AttnInputs<T>,
    branch: Branch,
    st: &mut StreamState<T>,
    ledger: &mut IoLedger,
    r0: usize,
    rows: usize,
    c0: usize,
    cols: usize,
    scale2: f64,
) -> Result<()> {
    let (d_k, d_v) = (inp.d_k(), inp.d_v());
    let s2 = T::from_f64(scale2);
    let mut flops: u64 = 0;

    for i in 0..rows {
        let gi = r0 + i;
        let qi = inp.q.row(gi);
        // visible prefix of this tile under the causal mask
        let vis = if inp.causal {
            (gi + 1).saturating_sub(c0).min(cols)
        } else {
            cols
        };
        if vis == 0 {
            continue;
        }

        // S1 row, masked, in the exp2 frame.
        let mut s1 = vec![T::NEG_INF; vis];
        let mut tile_max = T::NEG_INF;
        for (jj, s) in s1.iter_mut().enumerate() {
            let l = crate::tensor::dot(qi, inp.k.row(c0 + jj)) * s2;
            if !l.is_finite() {
                return Err(Error::non_finite(format!(
                    "logit at tile (row block {r0}, col block {c0}), row {gi}"
                )));
            }
            *s = l;
            tile_max = tile_max.maximum(l);
        }
        flops += (2 * vis * d_k + vis) as u64;

        let m_old = st.m[i];
        let m_new = m_old.maximum(tile_max);
        // alpha = exp2(m_old - m_new); both -inf means nothing seen yet.
        let alpha = if m_new == T::NEG_INF {
            T::ONE
        } else {
            (m_old - m_new).exp2()
        };
        st.m[i] = m_new;
        flops += (vis + 1) as u64;

        let mut p1 = vec![T::ZERO; vis];
        for (p, &s) in p1.iter_mut().zip(&s1) {
            *p = (s - m_new).exp2();
        }
        flops += (2 * vis) as u64;

        let mut row_d1 = T::ZERO;
        for &p in &p1 {
            row_d1 += p;
        }
        st.d1[i] = alpha * st.d1[i] + row_d1;
        flops += (vis + 2) as u64;

        let o1 = st.o1.row_mut(i);
        for x in o1.iter_mut() {
            *x *= alpha;
        }
        for (jj, &p) in p1.iter().enumerate() {
            let vj = inp.v.row(c0 + jj);
            for (x, &vv) in o1.iter_mut().zip(vj) {
                *x += p * vv;
            }
        }
        flops += (d_v + 2 * vis * d_v) as u64;

        if branch == Branch::Parallax {
            let ri = inp.r.row(gi);
            // S2 = R_r K_c^T, no scale, no shift: the -rho.q term cancels
            // in the final combine.
            let mut p2 = vec![T::ZERO; vis];
            for (jj, p) in p2.iter_mut().enumerate() {
                let s = crate::tensor::dot(ri, inp.k.row(c0 + jj));
                *p = p1[jj] * s;
            }
            flops += (2 * vis * d_k + vis) as u64;

            let mut row_d2 = T::ZERO;
            for &p in &p2 {
                row_d2 += p;
            }
            st.d2[i] = alpha * st.d2[i] + row_d2;
            flops += (vis + 2) as u64;

            let o2 = st.o2.row_mut(i);
            for x in o2.iter_mut() {
                *x *= alpha;
            }
            for (jj, &p) in p2.iter().enumerate() {
                let vj = inp.v.row(c0 + jj);
                for (x, &vv) in o2.iter_mut().zip(vj) {
                    *x += p * vv;
                }
            }
            flops += (d_v + 2 * vis * d_v) as u64;
        }

        if !(st.d1[i].is_finite() && st.d2[i].is_finite() && st.m[i] == st.m[i]) {
            return Err(Error::non_finite(format!(
                "running state at tile (row block {r0}, col block {c0}), row {gi}"
            )));
        }
    }
    ledger.flops += flops;
    Ok(())
}

/// Partial decode state produced by one KV shard.
#[derive(Debug, Clone)]
pub struct DecodePartial<T> {
    pub m: T,
    pub d1: T,
    pub d2: T,
    pub o1: Vec<T>,
    pub o2: Vec<T>,
}

impl<T: Scalar> DecodePartial<T> {
    /// Neutral element: an empty shard contributes nothing to the merge.
    pub fn neutral(d_v: usize) -> Self {
        DecodePartial {
            m: T::NEG_INF,
            d1: T::ZERO,
            d2: T::ZERO,
            o1: vec![T::ZERO; d_v],
            o2: vec![T::ZERO; d_v],
        }
    }
}

/// Accumulate the decode state of one contiguous KV shard `[j0, j1)` for a
/// single query row.
pub fn decode_shard<T: Scalar>(
    q: &[T],
    rho: &[T],
    k: &Tensor<T>,
    v: &Tensor<T>,
    scale: f64,
    j0: usize,
    j1: usize,
) -> DecodePartial<T> {
    let d_v = v.cols();
    let s2 = T::from_f64(scale * LOG2_E);
    let mut part: DecodePartial<T> = DecodePartial::neutral(d_v);
    for j in j0..j1 {
        let l = crate::tensor::dot(q, k.row(j)) * s2;
        let m_new = part.m.maximum(l);
        let alpha = if m_new == T::NEG_INF {
            T::ONE
        } else {
            (part.m - m_new).exp2()
        };
        part.m = m_new;
        let p1 = (l - m_new).exp2();
        let p2 = p1 * crate::tensor::dot(rho, k.row(j));
        part.d1 = alpha * part.d1 + p1;
        part.d2 = alpha * part.d2 + p2;
        for ((a, b), &vv) in part.o1.iter_mut().zip(&mut part.o2).zip(v.row(j)) {
            *a = alpha * *a + p1 * vv;
            *b = alpha * *b + p2 * vv;
        }
    }
    part
}

/// Merge shard partials in fixed shard-index order (completion order of the
/// workers never matters) and evaluate the final combine.
pub fn decode_merge<T: Scalar>(partials: &[DecodePartial<T>]) -> Result<Vec<T>> {
    let d_v = partials
        .first()
        .map(|p| p.o1.len())
        .ok_or_else(|| Error::Config("decode merge needs at least one shard".into()))?;
    let mut m_g = T::NEG_INF;
    for p in partials {
        m_g = m_g.maximum(p.m);
    }
    let mut merged = DecodePartial::<T>::neutral(d_v);
    merged.m = m_g;
    for p in partials {
        if p.m == T::NEG_INF {
            continue; // empty shard
        }
        let f = (p.m - m_g).exp2();
        merged.d1 += f * p.d1;
        merged.d2 += f * p.d2;
        for ((a, &b), (c, &d)) in merged
            .o1
            .iter_mut()
            .zip(&p.o1)
            .zip(merged.o2.iter_mut().zip(&p.o2))
        {
            *a += f * b;
            *c += f * d;
        }
    }
    if !(merged.d1 > T::ZERO) {
        return Err(Error::non_finite("decode merge: no softmax mass"));
    }
    let gain = T::ONE + merged.d2 / merged.d1;
    let out: Vec<T> = merged
        .o1
        .iter()
        .zip(&merged.o2)
        .map(|(&a, &b)| a / merged.d1 * gain - b / merged.d1)
        .collect();
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::non_finite("decode output"));
    }
    Ok(out)
}

/// Shard boundaries in KV rows: `split` contiguous spans of the KV tile
/// loop (trailing shards may be empty when the split exceeds the tiles).
pub fn decode_shard_bounds(l_kv: usize, cfg: &TileConfig) -> Vec<(usize, usize)> {
    let n_tiles = l_kv.div_ceil(cfg.b_c);
    let per_shard = n_tiles.div_ceil(cfg.split);
    (0..cfg.split)
        .map(|s| {
            let t0 = (s * per_shard).min(n_tiles);
            let t1 = ((s + 1) * per_shard).min(n_tiles);
            ((t0 * cfg.b_c).min(l_kv), (t1 * cfg.b_c).min(l_kv))
        })
        .collect()
}

/// Split-KV decode for a single query: `split` workers take contiguous
/// spans of the KV tile loop, then a deterministic fixed-order merge
/// combines their partials.
pub fn decode_step<T: Scalar>(
    q: &[T],
    rho: &[T],
    k: &Tensor<T>,
    v: &Tensor<T>,
    scale: f64,
    cfg: &TileConfig,
) -> Result<Vec<T>> {
    if k.rows() == 0 {
        return Err(Error::shape("decode needs at least one KV row"));
    }
    if q.len() != k.cols() || rho.len() != k.cols() {
        return Err(Error::shape("decode q/rho dims must match K"));
    }
    let partials: Vec<DecodePartial<T>> = decode_shard_bounds(k.rows(), cfg)
        .into_iter()
        .map(|(j0, j1)| {
            if j0 >= j1 {
                DecodePartial::neutral(v.cols())
            } else {
                decode_shard(q, rho, k, v, scale, j0, j1)
            }
        })
        .collect();
    decode_merge(&partials)
}

/// Arithmetic-intensity model: FLOPs over HBM traffic for the softmax-only
/// and Parallax kernels. `n_r = ceil(l_q / b_r)`; the head dimension cancels
/// between the FLOP and traffic terms.
pub fn ai_model(l_q: usize, l_kv: usize, d_h: usize, b_r: usize) -> (f64, f64) {
    assert!(l_q > 0 && l_kv > 0 && d_h > 0 && b_r > 0, "ai_model wants positive extents");
    let n_r = l_q.div_ceil(b_r);
    let num = 2.0 * l_q as f64 * l_kv as f64;
    let ai_fa = num / (l_q as f64 + 2.0 * (n_r * l_kv) as f64);
    let ai_plx = num / (l_q as f64 + (n_r * l_kv) as f64);
    (ai_fa, ai_plx)
}
