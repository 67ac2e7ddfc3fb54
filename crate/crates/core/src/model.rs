//! A small trainable transformer: interleaved mixer and SwiGLU blocks with
//! pre-norm residuals, tied embeddings, and a swappable sequence mixer
//! (softmax attention or Parallax, with optional RoPE on the probe and an
//! optional sigmoid gate).
//!
//! Gradients are manual reverse-mode over the fixed graph. The attention
//! adjoint comes from the streaming backward; RMSNorm, RoPE, SwiGLU, the
//! gate and the tied cross-entropy head have hand-derived adjoints here.
//! Everything runs in f64.
//!
//! Mixer data flow per layer (per head h):
//!
//! ```text
//! xn = rmsnorm(x)
//! q/k/v/rho = xn W_{Q,K,V,R}^T           (rho only for Parallax)
//! q, k, rho <- headwise rmsnorm          (own gains)
//! q, k      <- rope;  rho <- rope iff rope_on_rho
//! rho       <- sigmoid(xn . w_g) * rho   (iff gate)
//! attn_h = stream_forward(q_h, rho_h, k_h, v_h)   (causal)
//! y = concat_h(attn_h) W_O^T;  x <- x + y
//! ```
//!
//! The softmax mixer is the same kernel with the probe branch pinned to
//! zero, which makes a Parallax block with `W_R = 0` bit-identical to it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::AttnInputs;
use crate::backward::{parallax_stream_backward, BackwardCache};
use crate::error::{Error, Result};
use crate::optim::GroupTag;
use crate::stream::{parallax_stream_forward, TileConfig};
use crate::tasks::IGNORE;
use crate::tensor::{rope_freqs, rope_rotate_row, Tensor};
use crate::testutil::randn;

pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixerKind {
    Softmax,
    Parallax,
}

/// How `W_R` starts: zero realizes the softmax-equivalent start, random the
/// usual truncated-normal init.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeInit {
    Zero,
    Normal,
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "d2")]
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_head: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub mixer: MixerKind,
    #[serde(default)]
    pub rope_on_rho: bool,
    #[serde(default)]
    pub gate: bool,
    #[serde(default = "dtrue")]
    pub tie_embeddings: bool,
    #[serde(default = "drope")]
    pub rope_base: f64,
    #[serde(default = "dprobe")]
    pub probe_init: ProbeInit,
    /// SwiGLU hidden width; 0 derives round(8/3 * d_model).
    #[serde(default)]
    pub mlp_hidden: usize,
}

fn d2() -> usize {
    2
}
fn dtrue() -> bool {
    true
}
fn drope() -> f64 {
    1e6
}
fn dprobe() -> ProbeInit {
    ProbeInit::Normal
}

impl ModelConfig {
    pub fn mlp_width(&self) -> usize {
        if self.mlp_hidden > 0 {
            self.mlp_hidden
        } else {
            (self.d_model * 8).div_ceil(3)
        }
    }

    pub fn d_attn(&self) -> usize {
        self.heads * self.d_head
    }

    pub fn is_parallax(&self) -> bool {
        matches!(self.mixer, MixerKind::Parallax)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d_head == 0 {
            return Err(Error::Config("layers, heads, d_head must be positive".into()));
        }
        if self.d_attn() > self.d_model {
            return Err(Error::Config(format!(
                "heads*d_head = {} exceeds d_model = {}",
                self.d_attn(),
                self.d_model
            )));
        }
        if self.d_head % 2 != 0 {
            return Err(Error::Config("d_head must be even for rope".into()));
        }
        if self.seq_len == 0 || self.vocab < 2 {
            return Err(Error::Config("need seq_len >= 1 and vocab >= 2".into()));
        }
        if self.gate && !self.is_parallax() {
            return Err(Error::Config("the gate modulates the probe; parallax only".into()));
        }
        if self.rope_on_rho && !self.is_parallax() {
            return Err(Error::Config("rope_on_rho applies to parallax only".into()));
        }
        Ok(())
    }
}

/// Per-block parameters. Probe-side fields exist only for Parallax.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub attn_gamma: Tensor<f64>,
    pub w_q: Tensor<f64>,
    pub w_k: Tensor<f64>,
    pub w_v: Tensor<f64>,
    pub w_r: Option<Tensor<f64>>,
    pub q_gamma: Tensor<f64>,
    pub k_gamma: Tensor<f64>,
    pub r_gamma: Option<Tensor<f64>>,
    pub w_gate_vec: Option<Tensor<f64>>,
    pub w_o: Tensor<f64>,
    pub mlp_gamma: Tensor<f64>,
    pub w_mlp_gate: Tensor<f64>,
    pub w_mlp_up: Tensor<f64>,
    pub w_mlp_down: Tensor<f64>,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub embed: Tensor<f64>,
    pub lm_head: Option<Tensor<f64>>,
    pub final_gamma: Tensor<f64>,
    pub blocks: Vec<BlockParams>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ModelParams,
}

fn trunc_normal(rng: &mut ChaCha8Rng, dims: &[usize], std: f64) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let x = randn(rng);
            if x.abs() <= 2.0 {
                break x * std;
            }
        })
        .collect();
    Tensor::from_vec(dims, data).unwrap()
}

fn ones(dims: &[usize]) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    Tensor::from_vec(dims, vec![1.0; n]).unwrap()
}

impl Model {
    /// Truncated-normal init (std 0.02) for projections, unit gains, zero
    /// gate vector; `W_R` starts zero or normal per the config switch.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        let (d, da, h) = (cfg.d_model, cfg.d_attn(), cfg.mlp_width());
        let blocks = (0..cfg.layers)
            .map(|_| BlockParams {
                attn_gamma: ones(&[d]),
                w_q: trunc_normal(&mut rng, &[da, d], std),
                w_k: trunc_normal(&mut rng, &[da, d], std),
                w_v: trunc_normal(&mut rng, &[da, d], std),
                w_r: cfg.is_parallax().then(|| match cfg.probe_init {
                    ProbeInit::Zero => Tensor::zeros(&[da, d]),
                    ProbeInit::Normal => trunc_normal(&mut rng, &[da, d], std),
                }),
                q_gamma: ones(&[cfg.d_head]),
                k_gamma: ones(&[cfg.d_head]),
                r_gamma: cfg.is_parallax().then(|| ones(&[cfg.d_head])),
                w_gate_vec: (cfg.is_parallax() && cfg.gate).then(|| Tensor::zeros(&[d])),
                w_o: trunc_normal(&mut rng, &[d, da], std),
                mlp_gamma: ones(&[d]),
                w_mlp_gate: trunc_normal(&mut rng, &[h, d], std),
                w_mlp_up: trunc_normal(&mut rng, &[h, d], std),
                w_mlp_down: trunc_normal(&mut rng, &[d, h], std),
            })
            .collect();
        let embed = trunc_normal(&mut rng, &[cfg.vocab, d], std);
        let lm_head = (!cfg.tie_embeddings).then(|| trunc_normal(&mut rng, &[cfg.vocab, d], std));
        Ok(Model {
            cfg,
            params: ModelParams {
                embed,
                lm_head,
                final_gamma: ones(&[d]),
                blocks,
            },
        })
    }

    /// Named traversal of every trainable parameter, with its group tag.
    /// Ordering is fixed and shared with `ModelGrads::visit`.
    pub fn param_names_and_tags(&self) -> Vec<(String, GroupTag, Vec<usize>)> {
        let mut out = vec![(
            "embed".to_string(),
            GroupTag::Embed,
            self.params.embed.dims().to_vec(),
        )];
        if let Some(h) = &self.params.lm_head {
            out.push(("lm_head".into(), GroupTag::Embed, h.dims().to_vec()));
        }
        out.push((
            "final_gamma".into(),
            GroupTag::Norm,
            self.params.final_gamma.dims().to_vec(),
        ));
        for (l, b) in self.params.blocks.iter().enumerate() {
            let mut push = |name: &str, tag: GroupTag, t: &Tensor<f64>| {
                out.push((format!("blocks.{l}.{name}"), tag, t.dims().to_vec()));
            };
            push("attn_gamma", GroupTag::Norm, &b.attn_gamma);
            push("w_q", GroupTag::Matrix, &b.w_q);
            push("w_k", GroupTag::Matrix, &b.w_k);
            push("w_v", GroupTag::Matrix, &b.w_v);
            if let Some(w) = &b.w_r {
                push("w_r", GroupTag::Matrix, w);
            }
            push("q_gamma", GroupTag::Norm, &b.q_gamma);
            push("k_gamma", GroupTag::Norm, &b.k_gamma);
            if let Some(g) = &b.r_gamma {
                push("r_gamma", GroupTag::Norm, g);
            }
            if let Some(g) = &b.w_gate_vec {
                push("w_gate_vec", GroupTag::Norm, g);
            }
            push("w_o", GroupTag::Matrix, &b.w_o);
            push("mlp_gamma", GroupTag::Norm, &b.mlp_gamma);
            push("w_mlp_gate", GroupTag::Matrix, &b.w_mlp_gate);
            push("w_mlp_up", GroupTag::Matrix, &b.w_mlp_up);
            push("w_mlp_down", GroupTag::Matrix, &b.w_mlp_down);
        }
        out
    }

    /// Mutable references to parameters, in `param_names_and_tags` order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        let p = &mut self.params;
        let mut out: Vec<&mut Tensor<f64>> = vec![&mut p.embed];
        if let Some(h) = &mut p.lm_head {
            out.push(h);
        }
        out.push(&mut p.final_gamma);
        for b in &mut p.blocks {
            out.push(&mut b.attn_gamma);
            out.push(&mut b.w_q);
            out.push(&mut b.w_k);
            out.push(&mut b.w_v);
            if let Some(w) = &mut b.w_r {
                out.push(w);
            }
            out.push(&mut b.q_gamma);
            out.push(&mut b.k_gamma);
            if let Some(g) = &mut b.r_gamma {
                out.push(g);
            }
            if let Some(g) = &mut b.w_gate_vec {
                out.push(g);
            }
            out.push(&mut b.w_o);
            out.push(&mut b.mlp_gamma);
            out.push(&mut b.w_mlp_gate);
            out.push(&mut b.w_mlp_up);
            out.push(&mut b.w_mlp_down);
        }
        out
    }

    pub fn params_flat(&self) -> Vec<&Tensor<f64>> {
        let p = &self.params;
        let mut out: Vec<&Tensor<f64>> = vec![&p.embed];
        if let Some(h) = &p.lm_head {
            out.push(h);
        }
        out.push(&p.final_gamma);
        for b in &p.blocks {
            out.push(&b.attn_gamma);
            out.push(&b.w_q);
            out.push(&b.w_k);
            out.push(&b.w_v);
            if let Some(w) = &b.w_r {
                out.push(w);
            }
            out.push(&b.q_gamma);
            out.push(&b.k_gamma);
            if let Some(g) = &b.r_gamma {
                out.push(g);
            }
            if let Some(g) = &b.w_gate_vec {
                out.push(g);
            }
            out.push(&b.w_o);
            out.push(&b.mlp_gamma);
            out.push(&b.w_mlp_gate);
            out.push(&b.w_mlp_up);
            out.push(&b.w_mlp_down);
        }
        out
    }
}

/// Gradients as a flat vector of tensors in `param_names_and_tags` order.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub tensors: Vec<Tensor<f64>>,
}

impl ModelGrads {
    pub fn zeros_like(model: &Model) -> Self {
        ModelGrads {
            tensors: model
                .params_flat()
                .iter()
                .map(|t| Tensor::zeros(t.dims()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.scale_in_place(s);
        }
    }
}

/// Everything the backward pass needs from one layer's forward.
struct LayerTrace {
    x_in: Tensor<f64>,
    xn_attn: Tensor<f64>,
    q_proj: Tensor<f64>,
    k_proj: Tensor<f64>,
    v_proj: Tensor<f64>,
    r_proj: Option<Tensor<f64>>,
    /// per-head final attention inputs (post-norm, post-rope, post-gate)
    heads: Vec<(AttnInputs, BackwardCache)>,
    /// probe rows before the gate (post-rope), per head; needed for dgate
    r_pregate: Option<Tensor<f64>>,
    /// gate values per position
    gate: Option<Vec<f64>>,
    attn_concat: Tensor<f64>,
    x_mid: Tensor<f64>,
    xn_mlp: Tensor<f64>,
    mlp_u: Tensor<f64>,
    mlp_b: Tensor<f64>,
    mlp_h: Tensor<f64>,
}

/// Full forward trace for one sequence.
pub struct Trace {
    layers: Vec<LayerTrace>,
    x_final: Tensor<f64>,
    xf_normed: Tensor<f64>,
    pub logits: Tensor<f64>,
    tokens: Vec<u32>,
}

impl Trace {
    /// Per-layer, per-head attention inputs (for diagnostics).
    pub fn attn_inputs(&self) -> Vec<Vec<&AttnInputs>> {
        self.layers
            .iter()
            .map(|l| l.heads.iter().map(|(inp, _)| inp).collect())
            .collect()
    }
}

fn rmsnorm_rows(x: &Tensor<f64>, gamma: &Tensor<f64>) -> Tensor<f64> {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let y = crate::tensor::rmsnorm(x.row(i), gamma.data(), RMS_EPS);
        out.row_mut(i).copy_from_slice(&y);
    }
    out
}

/// Adjoint of row-wise RMSNorm. Returns dx; accumulates dgamma.
fn rmsnorm_rows_backward(
    x: &Tensor<f64>,
    gamma: &Tensor<f64>,
    dy: &Tensor<f64>,
    dgamma: &mut Tensor<f64>,
) -> Tensor<f64> {
    let d = gamma.len() as f64;
    let mut dx = Tensor::zeros(x.dims());
    for i in 0..x.rows() {
        let xi = x.row(i);
        let dyi = dy.row(i);
        let ms = xi.iter().map(|v| v * v).sum::<f64>() / d;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        // dgamma += dy * x * inv
        for ((dg, &xv), &dv) in dgamma.data_mut().iter_mut().zip(xi).zip(dyi) {
            *dg += dv * xv * inv;
        }
        // g = dy .* gamma; dx = g*inv - x * inv^3 * (g.x)/d
        let gdotx: f64 = dyi
            .iter()
            .zip(gamma.data())
            .zip(xi)
            .map(|((dv, gm), xv)| dv * gm * xv)
            .sum();
        let c = gdotx / d * inv * inv * inv;
        for ((out, (&dv, &gm)), &xv) in dx
            .row_mut(i)
            .iter_mut()
            .zip(dyi.iter().zip(gamma.data()))
            .zip(xi)
        {
            *out = dv * gm * inv - xv * c;
        }
    }
    dx
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Headwise RMSNorm over `[l, heads*d_head]`, gains shared across heads.
fn head_rmsnorm(x: &Tensor<f64>, gamma: &Tensor<f64>, heads: usize, d_head: usize) -> Tensor<f64> {
    let mut out = x.clone();
    for i in 0..x.rows() {
        for h in 0..heads {
            let lo = h * d_head;
            let y = crate::tensor::rmsnorm(&x.row(i)[lo..lo + d_head], gamma.data(), RMS_EPS);
            out.row_mut(i)[lo..lo + d_head].copy_from_slice(&y);
        }
    }
    out
}

fn head_rmsnorm_backward(
    x: &Tensor<f64>,
    gamma: &Tensor<f64>,
    dy: &Tensor<f64>,
    heads: usize,
    d_head: usize,
    dgamma: &mut Tensor<f64>,
) -> Tensor<f64> {
    let d = d_head as f64;
    let mut dx = Tensor::zeros(x.dims());
    for i in 0..x.rows() {
        for h in 0..heads {
            let lo = h * d_head;
            let xi = &x.row(i)[lo..lo + d_head];
            let dyi = &dy.row(i)[lo..lo + d_head];
            let ms = xi.iter().map(|v| v * v).sum::<f64>() / d;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            for ((dg, &xv), &dv) in dgamma.data_mut().iter_mut().zip(xi).zip(dyi) {
                *dg += dv * xv * inv;
            }
            let gdotx: f64 = dyi
                .iter()
                .zip(gamma.data())
                .zip(xi)
                .map(|((dv, gm), xv)| dv * gm * xv)
                .sum();
            let c = gdotx / d * inv * inv * inv;
            for (k, (out, (&dv, &gm))) in dx.row_mut(i)[lo..lo + d_head]
                .iter_mut()
                .zip(dyi.iter().zip(gamma.data()))
                .enumerate()
            {
                *out = dv * gm * inv - xi[k] * c;
            }
        }
    }
    dx
}

/// Apply RoPE headwise over `[l, heads*d_head]` in place.
fn rope_heads(x: &mut Tensor<f64>, heads: usize, d_head: usize, base: f64, inverse: bool) {
    let freqs = rope_freqs(d_head, base);
    for i in 0..x.rows() {
        let pos = i as f64;
        let row = x.row_mut(i);
        for h in 0..heads {
            let lo = h * d_head;
            rope_rotate_row(&mut row[lo..lo + d_head], pos, &freqs, inverse);
        }
    }
}

fn head_slice(x: &Tensor<f64>, h: usize, d_head: usize) -> Tensor<f64> {
    let l = x.rows();
    let mut out = Tensor::zeros(&[l, d_head]);
    for i in 0..l {
        out.row_mut(i)
            .copy_from_slice(&x.row(i)[h * d_head..(h + 1) * d_head]);
    }
    out
}

impl Model {
    fn attn_scale(&self) -> f64 {
        1.0 / (self.cfg.d_head as f64).sqrt()
    }

    fn stream_cfg(&self) -> TileConfig {
        // Tile extents sized for cache-friendly micro-model runs.
        TileConfig::new(16, 32, 1).expect("static tile config")
    }

    /// Forward one sequence, recording the full trace.
    pub fn forward_trace(&self, tokens: &[u32]) -> Result<Trace> {
        let cfg = &self.cfg;
        let (l, d) = (tokens.len(), cfg.d_model);
        if l == 0 || l > cfg.seq_len {
            return Err(Error::shape(format!(
                "sequence length {l} outside [1, {}]",
                cfg.seq_len
            )));
        }
        for &t in tokens {
            if t as usize >= cfg.vocab {
                return Err(Error::Config(format!("token {t} outside vocab")));
            }
        }
        let mut x = Tensor::zeros(&[l, d]);
        for (i, &t) in tokens.iter().enumerate() {
            x.row_mut(i)
                .copy_from_slice(self.params.embed.row(t as usize));
        }

        let mut layers = Vec::with_capacity(cfg.layers);
        for b in &self.params.blocks {
            let x_in = x.clone();
            let xn_attn = rmsnorm_rows(&x_in, &b.attn_gamma);
            let q_proj = xn_attn.matmul_transb(&b.w_q);
            let k_proj = xn_attn.matmul_transb(&b.w_k);
            let v_proj = xn_attn.matmul_transb(&b.w_v);
            let r_proj = b.w_r.as_ref().map(|w| xn_attn.matmul_transb(w));

            let mut q = head_rmsnorm(&q_proj, &b.q_gamma, cfg.heads, cfg.d_head);
            let mut k = head_rmsnorm(&k_proj, &b.k_gamma, cfg.heads, cfg.d_head);
            rope_heads(&mut q, cfg.heads, cfg.d_head, cfg.rope_base, false);
            rope_heads(&mut k, cfg.heads, cfg.d_head, cfg.rope_base, false);

            let (r_final, r_pregate, gate) = if let Some(rp) = &r_proj {
                let mut r = head_rmsnorm(rp, b.r_gamma.as_ref().unwrap(), cfg.heads, cfg.d_head);
                if cfg.rope_on_rho {
                    rope_heads(&mut r, cfg.heads, cfg.d_head, cfg.rope_base, false);
                }
                if let Some(wg) = &b.w_gate_vec {
                    let g: Vec<f64> = (0..l)
                        .map(|i| sigmoid(crate::tensor::dot(xn_attn.row(i), wg.data())))
                        .collect();
                    let pregate = r.clone();
                    for i in 0..l {
                        for v in r.row_mut(i) {
                            *v *= g[i];
                        }
                    }
                    (r, Some(pregate), Some(g))
                } else {
                    (r, None, None)
                }
            } else {
                (Tensor::zeros(&[l, cfg.d_attn()]), None, None)
            };

            let mut attn_concat = Tensor::zeros(&[l, cfg.d_attn()]);
            let mut heads = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let inp = AttnInputs::new(
                    head_slice(&q, h, cfg.d_head),
                    head_slice(&r_final, h, cfg.d_head),
                    head_slice(&k, h, cfg.d_head),
                    head_slice(&v_proj, h, cfg.d_head),
                    self.attn_scale(),
                    true,
                )?;
                let (out, cache, _) = parallax_stream_forward(&inp, &self.stream_cfg())?;
                for i in 0..l {
                    attn_concat.row_mut(i)[h * cfg.d_head..(h + 1) * cfg.d_head]
                        .copy_from_slice(out.row(i));
                }
                heads.push((inp, cache));
            }
            let y = attn_concat.matmul_transb(&b.w_o);
            let mut x_mid = x_in.clone();
            x_mid.add_assign(&y);

            let xn_mlp = rmsnorm_rows(&x_mid, &b.mlp_gamma);
            let mlp_u = xn_mlp.matmul_transb(&b.w_mlp_gate);
            let mlp_b = xn_mlp.matmul_transb(&b.w_mlp_up);
            let mut mlp_h = Tensor::zeros(mlp_u.dims());
            for ((h, &u), &bb) in mlp_h
                .data_mut()
                .iter_mut()
                .zip(mlp_u.data())
                .zip(mlp_b.data())
            {
                *h = silu(u) * bb;
            }
            let mlp_out = mlp_h.matmul_transb(&b.w_mlp_down);
            let mut x_out = x_mid.clone();
            x_out.add_assign(&mlp_out);

            layers.push(LayerTrace {
                x_in,
                xn_attn,
                q_proj,
                k_proj,
                v_proj,
                r_proj,
                heads,
                r_pregate,
                gate,
                attn_concat,
                x_mid,
                xn_mlp,
                mlp_u,
                mlp_b,
                mlp_h,
            });
            x = x_out;
        }

        let xf_normed = rmsnorm_rows(&x, &self.params.final_gamma);
        let head = self.params.lm_head.as_ref().unwrap_or(&self.params.embed);
        let logits = xf_normed.matmul_transb(head);
        logits.check_finite("logits")?;
        Ok(Trace {
            layers,
            x_final: x,
            xf_normed,
            logits,
            tokens: tokens.to_vec(),
        })
    }

    /// Cross-entropy over supervised positions of one traced sequence:
    /// returns `(sum_ce, count, dlogits_of_sum)`.
    fn ce_and_dlogits(&self, trace: &Trace, targets: &[i64]) -> (f64, usize, Tensor<f64>) {
        let (l, v) = (trace.logits.rows(), trace.logits.cols());
        let mut dlogits = Tensor::zeros(&[l, v]);
        let mut loss = 0.0;
        let mut count = 0;
        for i in 0..l {
            let t = targets[i];
            if t == IGNORE {
                continue;
            }
            count += 1;
            let row = trace.logits.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            loss += z.ln() + mx - row[t as usize];
            let drow = dlogits.row_mut(i);
            for (j, (dv, &x)) in drow.iter_mut().zip(row).enumerate() {
                let p = (x - mx).exp() / z;
                *dv = p - if j == t as usize { 1.0 } else { 0.0 };
            }
        }
        (loss, count, dlogits)
    }

    /// Backward through one traced sequence given `dlogits`; returns
    /// parameter gradients (of the same scalar `dlogits` came from).
    fn backward_trace(&self, trace: &Trace, dlogits: &Tensor<f64>) -> Result<ModelGrads> {
        let cfg = &self.cfg;
        let mut grads = ModelGrads::zeros_like(self);
        // Index map: grads.tensors parallels params_flat ordering.
        let mut idx = 0usize;
        let embed_idx = idx;
        idx += 1;
        let lm_head_idx = if self.params.lm_head.is_some() {
            idx += 1;
            Some(idx - 1)
        } else {
            None
        };
        let final_gamma_idx = idx;
        idx += 1;
        let per_block = |parallax: bool, gate: bool| -> usize {
            // attn_gamma, w_q, w_k, w_v, [w_r], q_gamma, k_gamma, [r_gamma],
            // [w_gate_vec], w_o, mlp_gamma, w_mlp_gate, w_mlp_up, w_mlp_down
            11 + usize::from(parallax) * 2 + usize::from(gate)
        };
        let block_base = idx;
        let stride = per_block(cfg.is_parallax(), cfg.gate && cfg.is_parallax());

        // Head of the network.
        let head = self.params.lm_head.as_ref().unwrap_or(&self.params.embed);
        let head_grad_idx = lm_head_idx.unwrap_or(embed_idx);
        // d head += dlogits^T xf ; dxf = dlogits @ head
        {
            let g = dlogits.transpose().matmul(&trace.xf_normed);
            grads.tensors[head_grad_idx].add_assign(&g);
        }
        let dxf = dlogits.matmul(head);
        let mut dx = {
            let mut dgamma = Tensor::zeros(self.params.final_gamma.dims());
            let dxn = rmsnorm_rows_backward(&trace.x_final, &self.params.final_gamma, &dxf, &mut dgamma);
            grads.tensors[final_gamma_idx].add_assign(&dgamma);
            dxn
        };

        for (lidx, lt) in trace.layers.iter().enumerate().rev() {
            let b = &self.params.blocks[lidx];
            let base = block_base + lidx * stride;
            // Field offsets within this block, in params_flat order.
            let mut off = 0usize;
            let mut next = || {
                off += 1;
                base + off - 1
            };
            let attn_gamma_i = next();
            let w_q_i = next();
            let w_k_i = next();
            let w_v_i = next();
            let w_r_i = cfg.is_parallax().then(&mut next);
            let q_gamma_i = next();
            let k_gamma_i = next();
            let r_gamma_i = cfg.is_parallax().then(&mut next);
            let w_gate_i = (cfg.is_parallax() && cfg.gate).then(&mut next);
            let w_o_i = next();
            let mlp_gamma_i = next();
            let w_mlp_gate_i = next();
            let w_mlp_up_i = next();
            let w_mlp_down_i = next();

            // --- MLP branch ---
            // x_out = x_mid + h W_down^T
            let dmlp_out = &dx;
            grads.tensors[w_mlp_down_i].add_assign(&dmlp_out.transpose().matmul(&lt.mlp_h));
            let dh = dmlp_out.matmul(&b.w_mlp_down);
            let mut du = Tensor::zeros(lt.mlp_u.dims());
            let mut db = Tensor::zeros(lt.mlp_b.dims());
            for (((du_v, db_v), (&dh_v, &u)), &bb) in du
                .data_mut()
                .iter_mut()
                .zip(db.data_mut())
                .zip(dh.data().iter().zip(lt.mlp_u.data()))
                .zip(lt.mlp_b.data())
            {
                *db_v = dh_v * silu(u);
                *du_v = dh_v * bb * silu_prime(u);
            }
            grads.tensors[w_mlp_gate_i].add_assign(&du.transpose().matmul(&lt.xn_mlp));
            grads.tensors[w_mlp_up_i].add_assign(&db.transpose().matmul(&lt.xn_mlp));
            let mut dxn_mlp = du.matmul(&b.w_mlp_gate);
            dxn_mlp.add_assign(&db.matmul(&b.w_mlp_up));
            let mut dgamma_mlp = Tensor::zeros(b.mlp_gamma.dims());
            let dx_from_norm =
                rmsnorm_rows_backward(&lt.x_mid, &b.mlp_gamma, &dxn_mlp, &mut dgamma_mlp);
            grads.tensors[mlp_gamma_i].add_assign(&dgamma_mlp);
            let mut dx_mid = dx.clone();
            dx_mid.add_assign(&dx_from_norm);

            // --- attention branch ---
            // x_mid = x_in + a W_o^T
            grads.tensors[w_o_i].add_assign(&dx_mid.transpose().matmul(&lt.attn_concat));
            let da = dx_mid.matmul(&b.w_o);
            let l = lt.x_in.rows();
            let mut dq_rope = Tensor::zeros(&[l, cfg.d_attn()]);
            let mut dk_rope = Tensor::zeros(&[l, cfg.d_attn()]);
            let mut dv_full = Tensor::zeros(&[l, cfg.d_attn()]);
            let mut dr_final = Tensor::zeros(&[l, cfg.d_attn()]);
            for h in 0..cfg.heads {
                let (inp, cache) = &lt.heads[h];
                let dout_h = head_slice(&da, h, cfg.d_head);
                let g = parallax_stream_backward(inp, cache, &dout_h, &self.stream_cfg())?;
                for i in 0..l {
                    let lo = h * cfg.d_head;
                    dq_rope.row_mut(i)[lo..lo + cfg.d_head].copy_from_slice(g.dq.row(i));
                    dk_rope.row_mut(i)[lo..lo + cfg.d_head].copy_from_slice(g.dk.row(i));
                    dv_full.row_mut(i)[lo..lo + cfg.d_head].copy_from_slice(g.dv.row(i));
                    dr_final.row_mut(i)[lo..lo + cfg.d_head].copy_from_slice(g.dr.row(i));
                }
            }

            let mut dxn_attn = Tensor::zeros(&[l, cfg.d_model]);

            // probe path: gate -> rope -> head norm -> projection
            if let Some(w_r) = &b.w_r {
                let mut dr = dr_final;
                if let (Some(gate), Some(pregate)) = (&lt.gate, &lt.r_pregate) {
                    let wg = b.w_gate_vec.as_ref().unwrap();
                    let mut dz = vec![0.0; l];
                    for i in 0..l {
                        let dgate: f64 =
                            crate::tensor::dot(dr.row(i), pregate.row(i));
                        dz[i] = dgate * gate[i] * (1.0 - gate[i]);
                        for v in dr.row_mut(i) {
                            *v *= gate[i];
                        }
                    }
                    let wg_grad_idx = w_gate_i.unwrap();
                    for i in 0..l {
                        for (gw, &xn) in grads.tensors[wg_grad_idx]
                            .data_mut()
                            .iter_mut()
                            .zip(lt.xn_attn.row(i))
                        {
                            *gw += dz[i] * xn;
                        }
                        for (dxn_v, &wgv) in dxn_attn.row_mut(i).iter_mut().zip(wg.data()) {
                            *dxn_v += dz[i] * wgv;
                        }
                    }
                }
                if cfg.rope_on_rho {
                    rope_heads(&mut dr, cfg.heads, cfg.d_head, cfg.rope_base, true);
                }
                let mut dr_gamma = Tensor::zeros(&[cfg.d_head]);
                let dr_proj = head_rmsnorm_backward(
                    lt.r_proj.as_ref().unwrap(),
                    b.r_gamma.as_ref().unwrap(),
                    &dr,
                    cfg.heads,
                    cfg.d_head,
                    &mut dr_gamma,
                );
                grads.tensors[r_gamma_i.unwrap()].add_assign(&dr_gamma);
                grads.tensors[w_r_i.unwrap()].add_assign(&dr_proj.transpose().matmul(&lt.xn_attn));
                dxn_attn.add_assign(&dr_proj.matmul(w_r));
            }

            // q path
            {
                let mut dq = dq_rope;
                rope_heads(&mut dq, cfg.heads, cfg.d_head, cfg.rope_base, true);
                let mut dq_gamma = Tensor::zeros(&[cfg.d_head]);
                let dq_proj = head_rmsnorm_backward(
                    &lt.q_proj,
                    &b.q_gamma,
                    &dq,
                    cfg.heads,
                    cfg.d_head,
                    &mut dq_gamma,
                );
                grads.tensors[q_gamma_i].add_assign(&dq_gamma);
                grads.tensors[w_q_i].add_assign(&dq_proj.transpose().matmul(&lt.xn_attn));
                dxn_attn.add_assign(&dq_proj.matmul(&b.w_q));
            }
            // k path
            {
                let mut dk = dk_rope;
                rope_heads(&mut dk, cfg.heads, cfg.d_head, cfg.rope_base, true);
                let mut dk_gamma = Tensor::zeros(&[cfg.d_head]);
                let dk_proj = head_rmsnorm_backward(
                    &lt.k_proj,
                    &b.k_gamma,
                    &dk,
                    cfg.heads,
                    cfg.d_head,
                    &mut dk_gamma,
                );
                grads.tensors[k_gamma_i].add_assign(&dk_gamma);
                grads.tensors[w_k_i].add_assign(&dk_proj.transpose().matmul(&lt.xn_attn));
                dxn_attn.add_assign(&dk_proj.matmul(&b.w_k));
            }
            // v path (no norm, no rope)
            {
                grads.tensors[w_v_i].add_assign(&dv_full.transpose().matmul(&lt.xn_attn));
                dxn_attn.add_assign(&dv_full.matmul(&b.w_v));
            }

            let mut dgamma_attn = Tensor::zeros(b.attn_gamma.dims());
            let dx_from_attn_norm =
                rmsnorm_rows_backward(&lt.x_in, &b.attn_gamma, &dxn_attn, &mut dgamma_attn);
            grads.tensors[attn_gamma_i].add_assign(&dgamma_attn);

            dx = dx_mid;
            dx.add_assign(&dx_from_attn_norm);
        }

        // embedding gather
        for (i, &t) in trace.tokens.iter().enumerate() {
            let emb = &mut grads.tensors[embed_idx];
            let row_start = t as usize * cfg.d_model;
            for (g, &d) in emb.data_mut()[row_start..row_start + cfg.d_model]
                .iter_mut()
                .zip(dx.row(i))
            {
                *g += d;
            }
        }
        Ok(grads)
    }

    /// Loss and gradients over a batch: mean cross-entropy over all
    /// supervised positions in the batch. Errors if nothing is supervised.
    pub fn loss_and_grads(&self, batch: &[crate::tasks::TaskSample]) -> Result<(f64, ModelGrads)> {
        let mut total_loss = 0.0;
        let mut total_count = 0usize;
        let mut grads = ModelGrads::zeros_like(self);
        let per_sample: Vec<(f64, usize, ModelGrads)> = {
            use rayon::prelude::*;
            batch
                .par_iter()
                .map(|s| {
                    let trace = self.forward_trace(&s.tokens)?;
                    let (loss, count, dlogits) = self.ce_and_dlogits(&trace, &s.targets);
                    if count == 0 {
                        return Ok((0.0, 0, ModelGrads { tensors: vec![] }));
                    }
                    let g = self.backward_trace(&trace, &dlogits)?;
                    Ok((loss, count, g))
                })
                .collect::<Result<Vec<_>>>()?
        };
        // fixed-order reduction keeps results identical across thread counts
        for (loss, count, g) in per_sample {
            total_loss += loss;
            total_count += count;
            if count > 0 {
                grads.add_assign(&g);
            }
        }
        if total_count == 0 {
            return Err(Error::Task("batch has no supervised positions".into()));
        }
        let inv = 1.0 / total_count as f64;
        grads.scale(inv);
        let loss = total_loss * inv;
        if !loss.is_finite() {
            return Err(Error::non_finite("batch loss"));
        }
        Ok((loss, grads))
    }

    /// Argmax accuracy over supervised positions of the given batches.
    pub fn eval_accuracy(&self, batches: &[Vec<crate::tasks::TaskSample>]) -> Result<f64> {
        let mut correct = 0usize;
        let mut total = 0usize;
        for batch in batches {
            for s in batch {
                let trace = self.forward_trace(&s.tokens)?;
                for (i, &t) in s.targets.iter().enumerate() {
                    if t == IGNORE {
                        continue;
                    }
                    let row = trace.logits.row(i);
                    let argmax = row
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .map(|(j, _)| j)
                        .unwrap();
                    total += 1;
                    if argmax == t as usize {
                        correct += 1;
                    }
                }
            }
        }
        if total == 0 {
            return Err(Error::Task("no supervised positions to evaluate".into()));
        }
        Ok(correct as f64 / total as f64)
    }
}

/// Checkpoint manifest: the config plus the tensor list in traversal order.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct CheckpointManifest {
    schema_version: u32,
    model: ModelConfig,
    tensors: Vec<String>,
}

impl Model {
    /// Write the model to `dir` as a manifest plus one PLXT file per
    /// parameter (parameter names have dots replaced by double
    /// underscores on disk).
    pub fn save_checkpoint(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("tensors"))?;
        let names: Vec<String> = self
            .param_names_and_tags()
            .into_iter()
            .map(|(n, _, _)| n)
            .collect();
        let manifest = CheckpointManifest {
            schema_version: crate::config::SCHEMA_VERSION,
            model: self.cfg,
            tensors: names.clone(),
        };
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        for (name, tensor) in names.iter().zip(self.params_flat()) {
            let file = dir.join("tensors").join(format!("{}.plxt", mangle(name)));
            crate::io::save_tensor(&file, tensor)?;
        }
        Ok(())
    }

    pub fn load_checkpoint(dir: &std::path::Path) -> Result<Model> {
        let text = std::fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        crate::config::check_schema(manifest.schema_version)?;
        let mut model = Model::init(manifest.model, 0)?;
        let expected: Vec<String> = model
            .param_names_and_tags()
            .into_iter()
            .map(|(n, _, _)| n)
            .collect();
        if expected != manifest.tensors {
            return Err(Error::Format(
                "checkpoint tensor list does not match the model config".into(),
            ));
        }
        for (name, slot) in expected.iter().zip(model.params_mut()) {
            let file = dir.join("tensors").join(format!("{}.plxt", mangle(name)));
            let loaded = crate::io::load_tensor(&file)?.to_f64();
            if loaded.dims() != slot.dims() {
                return Err(Error::Format(format!(
                    "tensor {name} has dims {:?}, expected {:?}",
                    loaded.dims(),
                    slot.dims()
                )));
            }
            *slot = loaded;
        }
        Ok(model)
    }
}

fn mangle(name: &str) -> String {
    name.replace('.', "__")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{gen_batch, TaskKind, TaskSpec};
    use crate::testutil::assert_close;

    fn micro_cfg(mixer: MixerKind) -> ModelConfig {
        ModelConfig {
            layers: 1,
            d_model: 8,
            heads: 2,
            d_head: 4,
            vocab: 11,
            seq_len: 8,
            mixer,
            rope_on_rho: false,
            gate: false,
            tie_embeddings: true,
            rope_base: 1e4,
            probe_init: ProbeInit::Normal,
            mlp_hidden: 12,
        }
    }

    fn micro_task() -> TaskSpec {
        TaskSpec {
            kind: TaskKind::Icr,
            vocab: 11,
            seq_len: 8,
            kv_pairs: 2,
            queries: 2,
            noise_frac: 0.0,
            seed: 3,
        }
    }

    #[test]
    fn fresh_init_loss_near_chance() {
        let model = Model::init(micro_cfg(MixerKind::Parallax), 1).unwrap();
        let batch = gen_batch(&micro_task(), 0, 16).unwrap();
        let (loss, _) = model.loss_and_grads(&batch).unwrap();
        let chance = (11.0_f64).ln();
        assert!(
            (loss - chance).abs() / chance < 0.1,
            "loss {loss} vs ln(vocab) {chance}"
        );
    }

    #[test]
    fn doubling_supervised_positions_keeps_mean_loss() {
        let model = Model::init(micro_cfg(MixerKind::Softmax), 2).unwrap();
        let batch = gen_batch(&micro_task(), 0, 4).unwrap();
        let (loss1, _) = model.loss_and_grads(&batch).unwrap();
        let doubled: Vec<_> = batch.iter().chain(batch.iter()).cloned().collect();
        let (loss2, _) = model.loss_and_grads(&doubled).unwrap();
        assert_close(loss1, loss2, 1e-12);
    }

    #[test]
    fn all_masked_batch_errors() {
        let model = Model::init(micro_cfg(MixerKind::Softmax), 2).unwrap();
        let mut batch = gen_batch(&micro_task(), 0, 2).unwrap();
        for s in &mut batch {
            for t in &mut s.targets {
                *t = IGNORE;
            }
        }
        assert!(model.loss_and_grads(&batch).is_err());
    }

    #[test]
    fn zero_residual_branches_are_identity() {
        let cfg = micro_cfg(MixerKind::Parallax);
        let mut model = Model::init(cfg, 3).unwrap();
        for b in &mut model.params.blocks {
            for t in [&mut b.w_o, &mut b.w_mlp_down] {
                *t = Tensor::zeros(t.dims());
            }
        }
        let tokens = [1u32, 2, 3, 4];
        let trace = model.forward_trace(&tokens).unwrap();
        // with W_O = W_down = 0 both residual branches vanish
        for (i, &t) in tokens.iter().enumerate() {
            for (a, b) in trace
                .x_final
                .row(i)
                .iter()
                .zip(model.params.embed.row(t as usize))
            {
                assert_close(*a, *b, 1e-15);
            }
        }
    }

    #[test]
    fn zero_probe_matches_softmax_model_bitwise() {
        let cfg_p = ModelConfig {
            probe_init: ProbeInit::Zero,
            ..micro_cfg(MixerKind::Parallax)
        };
        let model_p = Model::init(cfg_p, 7).unwrap();
        let mut model_s = Model::init(micro_cfg(MixerKind::Softmax), 7).unwrap();
        // copy the shared weights so the two models agree exactly
        copy_shared_params(&model_p, &mut model_s);
        let tokens = [1u32, 5, 2, 9, 3, 4];
        let tp = model_p.forward_trace(&tokens).unwrap();
        let ts = model_s.forward_trace(&tokens).unwrap();
        assert_eq!(tp.logits.data(), ts.logits.data());
    }

    /// Copy every parameter that exists in both mixers from `src` to `dst`.
    pub(crate) fn copy_shared_params(src: &Model, dst: &mut Model) {
        dst.params.embed = src.params.embed.clone();
        dst.params.final_gamma = src.params.final_gamma.clone();
        if let (Some(a), Some(b)) = (&src.params.lm_head, &mut dst.params.lm_head) {
            *b = a.clone();
        }
        for (sb, db) in src.params.blocks.iter().zip(&mut dst.params.blocks) {
            db.attn_gamma = sb.attn_gamma.clone();
            db.w_q = sb.w_q.clone();
            db.w_k = sb.w_k.clone();
            db.w_v = sb.w_v.clone();
            db.q_gamma = sb.q_gamma.clone();
            db.k_gamma = sb.k_gamma.clone();
            db.w_o = sb.w_o.clone();
            db.mlp_gamma = sb.mlp_gamma.clone();
            db.w_mlp_gate = sb.w_mlp_gate.clone();
            db.w_mlp_up = sb.w_mlp_up.clone();
            db.w_mlp_down = sb.w_mlp_down.clone();
        }
    }

    #[test]
    fn gate_half_open_at_zero_init_and_saturates() {
        let cfg = ModelConfig {
            gate: true,
            ..micro_cfg(MixerKind::Parallax)
        };
        let model = Model::init(cfg, 5).unwrap();
        let tokens = [1u32, 2, 3];
        let trace = model.forward_trace(&tokens).unwrap();
        let lt = &trace.layers[0];
        for &g in lt.gate.as_ref().unwrap() {
            assert_close(g, 0.5, 1e-15); // w_g starts at zero
        }

        // push the gate shut on a single-token input: w_g = -c * xn makes
        // the gate logit -c ||xn||^2, so g -> 0 and the probe branch
        // turns off, leaving the softmax mixer
        let tokens = [4u32];
        let probe_trace = model.forward_trace(&tokens).unwrap();
        let xn0: Vec<f64> = probe_trace.layers[0].xn_attn.row(0).to_vec();
        let mut closed = model.clone();
        {
            let b = &mut closed.params.blocks[0];
            let wg = b.w_gate_vec.as_mut().unwrap();
            for (v, &x) in wg.data_mut().iter_mut().zip(&xn0) {
                *v = -1e3 * x;
            }
        }
        let t_closed = closed.forward_trace(&tokens).unwrap();
        let mut softmax_twin = Model::init(micro_cfg(MixerKind::Softmax), 5).unwrap();
        copy_shared_params(&closed, &mut softmax_twin);
        let t_soft = softmax_twin.forward_trace(&tokens).unwrap();
        let max_dev = t_closed
            .logits
            .data()
            .iter()
            .zip(t_soft.logits.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        assert!(max_dev < 1e-8, "gate saturation deviation {max_dev}");
    }

    fn full_model_gradcheck(cfg: ModelConfig, seed: u64) {
        let model = Model::init(cfg, seed).unwrap();
        let spec = TaskSpec {
            vocab: cfg.vocab,
            seq_len: cfg.seq_len.min(6),
            kv_pairs: 1,
            queries: 2,
            ..micro_task()
        };
        let batch = gen_batch(&spec, 0, 1).unwrap();
        let (_, grads) = model.loss_and_grads(&batch).unwrap();
        let names = model.param_names_and_tags();
        let flat = model.params_flat();
        for (pi, (name, _, _)) in names.iter().enumerate() {
            let base = flat[pi].clone();
            let mut f = |x: &Tensor<f64>| -> crate::error::Result<f64> {
                let mut m = model.clone();
                *m.params_mut()[pi] = x.clone();
                let (loss, _) = m.loss_and_grads(&batch)?;
                Ok(loss)
            };
            let fd = crate::backward::finite_diff_grad(&mut f, &base, 1e-6).unwrap();
            let rel = crate::testutil::rel_frob_diff(&grads.tensors[pi], &fd);
            assert!(rel <= 1e-4, "{name}: rel err {rel}");
        }
    }

    #[test]
    fn gradcheck_parallax_plain() {
        full_model_gradcheck(micro_cfg(MixerKind::Parallax), 11);
    }

    #[test]
    fn gradcheck_softmax() {
        full_model_gradcheck(micro_cfg(MixerKind::Softmax), 12);
    }

    #[test]
    fn gradcheck_gate_and_rope_on_rho() {
        let cfg = ModelConfig {
            gate: true,
            rope_on_rho: true,
            ..micro_cfg(MixerKind::Parallax)
        };
        full_model_gradcheck(cfg, 13);
        let cfg = ModelConfig {
            gate: true,
            ..micro_cfg(MixerKind::Parallax)
        };
        full_model_gradcheck(cfg, 14);
        let cfg = ModelConfig {
            rope_on_rho: true,
            ..micro_cfg(MixerKind::Parallax)
        };
        full_model_gradcheck(cfg, 15);
    }

    #[test]
    fn gradcheck_untied_embeddings() {
        let cfg = ModelConfig {
            tie_embeddings: false,
            ..micro_cfg(MixerKind::Parallax)
        };
        full_model_gradcheck(cfg, 16);
    }

    #[test]
    fn wr_zero_gradients_match_softmax_twin() {
        let cfg_p = ModelConfig {
            probe_init: ProbeInit::Zero,
            ..micro_cfg(MixerKind::Parallax)
        };
        let model_p = Model::init(cfg_p, 21).unwrap();
        let mut model_s = Model::init(micro_cfg(MixerKind::Softmax), 21).unwrap();
        copy_shared_params(&model_p, &mut model_s);
        let batch = gen_batch(&micro_task(), 1, 4).unwrap();
        let (lp, gp) = model_p.loss_and_grads(&batch).unwrap();
        let (ls, gs) = model_s.loss_and_grads(&batch).unwrap();
        assert_close(lp, ls, 1e-14);
        let names_p = model_p.param_names_and_tags();
        let names_s = model_s.param_names_and_tags();
        for ((name_s, _, _), gs_t) in names_s.iter().zip(&gs.tensors) {
            let pi = names_p.iter().position(|(n, _, _)| n == name_s).unwrap();
            let dev = gp.tensors[pi]
                .data()
                .iter()
                .zip(gs_t.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0_f64, f64::max);
            assert!(dev <= 1e-12, "{name_s}: grad deviation {dev}");
        }
        // the probe projection still receives gradient signal
        let wr_idx = names_p.iter().position(|(n, _, _)| n.ends_with("w_r")).unwrap();
        assert!(gp.tensors[wr_idx].frob_norm() > 1e-9);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let model = Model::init(micro_cfg(MixerKind::Parallax), 41).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save_checkpoint(dir.path()).unwrap();
        let back = Model::load_checkpoint(dir.path()).unwrap();
        for (a, b) in model.params_flat().iter().zip(back.params_flat()) {
            assert_eq!(a.data(), b.data());
        }
        let tokens = [1u32, 2, 3];
        let ta = model.forward_trace(&tokens).unwrap();
        let tb = back.forward_trace(&tokens).unwrap();
        assert_eq!(ta.logits.data(), tb.logits.data());
    }

    #[test]
    fn single_thread_determinism() {
        let model = Model::init(micro_cfg(MixerKind::Parallax), 31).unwrap();
        let batch = gen_batch(&micro_task(), 2, 4).unwrap();
        let (l1, g1) = model.loss_and_grads(&batch).unwrap();
        let (l2, g2) = model.loss_and_grads(&batch).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
        for (a, b) in g1.tensors.iter().zip(&g2.tensors) {
            assert_eq!(a.data(), b.data());
        }
    }
}
