//! Flow transformer `f(x_t, r, t, C)`: joint-attention blocks over label
//! pseudo-tokens and data tokens, followed by data-only blocks, all modulated
//! by a global condition through AdaLN.

use meanflow_autodiff::{BoundParams, Element, Graph, ParamSet, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, CoreError, Result};

const NORM_EPS: f64 = 1e-6;
const MLP_RATIO: usize = 4;
const CONV_TAPS: usize = 3;
const ROPE_BASE: f64 = 10_000.0;
/// Highest angular frequency of the timestep feature ladder.
pub const TIME_FREQ_MAX: f64 = 16.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowNetConfig {
    pub n_mm_blocks: usize,
    pub n_sm_blocks: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub latent_dim: usize,
    pub max_seq_len: usize,
    pub n_labels: usize,
    pub pseudo_token_count: usize,
    pub time_embed_dim: usize,
}

impl Default for FlowNetConfig {
    fn default() -> Self {
        FlowNetConfig {
            n_mm_blocks: 2,
            n_sm_blocks: 4,
            hidden_dim: 96,
            n_heads: 4,
            latent_dim: 2,
            max_seq_len: 32,
            n_labels: 8,
            pseudo_token_count: 4,
            time_embed_dim: 64,
        }
    }
}

impl FlowNetConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.n_mm_blocks >= 1, "model.n_mm_blocks", || "must be at least 1".into())?;
        ensure(self.n_heads >= 1, "model.n_heads", || "must be at least 1".into())?;
        ensure(
            self.hidden_dim > 0 && self.hidden_dim % self.n_heads == 0,
            "model.hidden_dim",
            || format!("{} is not divisible by n_heads {}", self.hidden_dim, self.n_heads),
        )?;
        ensure(self.head_dim() % 2 == 0, "model.hidden_dim", || {
            format!("head_dim {} must be even for rotary embeddings", self.head_dim())
        })?;
        ensure(self.latent_dim > 0, "model.latent_dim", || "must be positive".into())?;
        ensure(self.max_seq_len > 0, "model.max_seq_len", || "must be positive".into())?;
        ensure(self.n_labels > 0, "model.n_labels", || "must be positive".into())?;
        ensure(self.pseudo_token_count > 0, "model.pseudo_token_count", || "must be positive".into())?;
        ensure(self.time_embed_dim > 0, "model.time_embed_dim", || "must be positive".into())?;
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads.max(1)
    }
}

/// A class label, or the null condition used for guidance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Label(usize),
    Null,
}

impl Condition {
    /// Row in the embedding tables; the null condition owns the last row.
    pub fn row(self, n_labels: usize) -> Result<usize> {
        match self {
            Condition::Label(k) if k < n_labels => Ok(k),
            Condition::Label(k) => Err(CoreError::InvalidInput(format!(
                "label {k} out of range 0..{n_labels}"
            ))),
            Condition::Null => Ok(n_labels),
        }
    }
}

/// Parameter layout and forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowNet {
    cfg: FlowNetConfig,
}

enum Init {
    Xavier { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
    Normal(f64),
}

impl FlowNet {
    pub fn new(cfg: FlowNetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(FlowNet { cfg })
    }

    pub fn config(&self) -> &FlowNetConfig {
        &self.cfg
    }

    /// Names, shapes and initializers of every parameter, in a fixed order.
    fn layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let c = &self.cfg;
        let (h, d, e, hd) = (c.hidden_dim, c.latent_dim, c.time_embed_dim, c.head_dim());
        let mut out = Vec::new();
        let linear = |out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, i: usize, o: usize, zero: bool| {
            let w = if zero { Init::Zeros } else { Init::Xavier { fan_in: i, fan_out: o } };
            out.push((format!("{name}.w"), vec![i, o], w));
            out.push((format!("{name}.b"), vec![o], Init::Zeros));
        };
        linear(&mut out, "x_in", d, h, false);
        for emb in ["t_embed", "r_embed"] {
            linear(&mut out, &format!("{emb}.fc1"), 2 * e, h, false);
            linear(&mut out, &format!("{emb}.fc2"), h, h, false);
        }
        out.push(("label.tokens".into(), vec![c.n_labels + 1, c.pseudo_token_count * h], Init::Normal(0.02)));
        out.push(("label.global".into(), vec![c.n_labels + 1, h], Init::Normal(0.02)));

        let stream = |out: &mut Vec<(String, Vec<usize>, Init)>, p: &str, conv: bool, pre_only: bool| {
            linear(out, &format!("{p}.mod"), h, if pre_only { 2 } else { 6 } * h, true);
            linear(out, &format!("{p}.qkv"), h, 3 * h, false);
            out.push((format!("{p}.q_norm"), vec![hd], Init::Ones));
            out.push((format!("{p}.k_norm"), vec![hd], Init::Ones));
            if pre_only {
                return;
            }
            linear(out, &format!("{p}.proj"), h, h, false);
            let wide = MLP_RATIO * h;
            if conv {
                for (name, i, o) in [("mlp.conv1", h, wide), ("mlp.conv2", wide, h)] {
                    out.push((
                        format!("{p}.{name}.w"),
                        vec![CONV_TAPS, i, o],
                        Init::Xavier { fan_in: CONV_TAPS * i, fan_out: CONV_TAPS * o },
                    ));
                    out.push((format!("{p}.{name}.b"), vec![o], Init::Zeros));
                }
            } else {
                linear(out, &format!("{p}.mlp.fc1"), h, wide, false);
                linear(out, &format!("{p}.mlp.fc2"), wide, h, false);
            }
        };
        for i in 0..c.n_mm_blocks {
            stream(&mut out, &format!("mm{i}.x"), true, false);
            stream(&mut out, &format!("mm{i}.txt"), false, i + 1 == c.n_mm_blocks);
        }
        for j in 0..c.n_sm_blocks {
            stream(&mut out, &format!("sm{j}.x"), true, false);
        }
        linear(&mut out, "final.mod", h, 2 * h, true);
        linear(&mut out, "final", h, d, true);
        out
    }

    /// Expected shape of every parameter.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layout().into_iter().map(|(n, s, _)| (n, s)).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
    }

    /// Xavier-uniform linear and convolution weights, zero biases, zero
    /// AdaLN modulation and output projection, N(0, 0.02) embedding tables.
    pub fn init_params<T: Element, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet<T> {
        let mut params = ParamSet::new();
        for (name, shape, init) in self.layout() {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(sd) => {
                    let dist = Normal::new(0.0, sd).expect("positive sd");
                    (0..n).map(|_| dist.sample(rng)).collect()
                }
                Init::Xavier { fan_in, fan_out } => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
                    (0..n).map(|_| dist.sample(rng)).collect()
                }
            };
            let t = Tensor::from_f64(shape, &data).expect("finite init");
            params.insert(name, t).expect("layout names are unique");
        }
        params
    }

    /// Check that `params` carries exactly the layout of this network.
    pub fn check_params<T: Element>(&self, params: &ParamSet<T>) -> Result<()> {
        let shapes = self.param_shapes();
        for (name, shape) in &shapes {
            let found = params
                .get(name)
                .map_err(|_| CoreError::InvalidInput(format!("missing parameter `{name}`")))?;
            if found.shape() != shape.as_slice() {
                return Err(CoreError::ParamShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: found.shape().to_vec(),
                });
            }
        }
        if params.len() != shapes.len() {
            let extra = params
                .names()
                .find(|n| !shapes.iter().any(|(s, _)| s == n))
                .unwrap_or_default();
            return Err(CoreError::InvalidInput(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }

    /// Average velocity `u(x_t, r, t | cond)` for `x` of shape `[B, L, latent]`
    /// and `r`, `t` of shape `[B]`.
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        x: Var,
        r: Var,
        t: Var,
        cond: &[Condition],
    ) -> Result<Var> {
        let c = &self.cfg;
        let xs = g.shape(x).to_vec();
        if xs.len() != 3 || xs[2] != c.latent_dim || xs[1] == 0 || xs[1] > c.max_seq_len {
            return Err(CoreError::InvalidInput(format!(
                "x must be [B, 1..={}, {}], got {xs:?}",
                c.max_seq_len, c.latent_dim
            )));
        }
        let (b, l) = (xs[0], xs[1]);
        for (name, v) in [("r", r), ("t", t)] {
            if g.shape(v) != [b] {
                return Err(CoreError::InvalidInput(format!("{name} must have shape [{b}], got {:?}", g.shape(v))));
            }
        }
        if cond.len() != b {
            return Err(CoreError::InvalidInput(format!("{} conditions for batch {b}", cond.len())));
        }
        for (&rv, &tv) in g.value(r).data().iter().zip(g.value(t).data()) {
            let (rv, tv) = (rv.as_f64(), tv.as_f64());
            if !(0.0..=1.0).contains(&rv) || !(0.0..=1.0).contains(&tv) || rv > tv {
                return Err(CoreError::InvalidInput(format!("need 0 <= r <= t <= 1, got r={rv}, t={tv}")));
            }
        }

        let h = linear(g, p, "x_in", x)?;
        let t_emb = timestep_embed(g, p, "t_embed", t, c.time_embed_dim)?;
        let r_emb = timestep_embed(g, p, "r_embed", r, c.time_embed_dim)?;
        let (tokens, global) = embed_condition(g, p, c, cond)?;
        let cvec = g.add(t_emb, r_emb)?;
        let cvec = g.add(cvec, global)?;
        let sc = g.silu(cvec)?;

        let mut h = h;
        let mut txt = tokens;
        for i in 0..c.n_mm_blocks {
            let pre_only = i + 1 == c.n_mm_blocks;
            (h, txt) = self.mm_block(g, p, &format!("mm{i}"), h, txt, sc, pre_only)?;
        }
        for j in 0..c.n_sm_blocks {
            h = self.sm_block(g, p, &format!("sm{j}"), h, sc)?;
        }
        let m = linear(g, p, "final.mod", sc)?;
        let m = chunks(g, m, 2, c.hidden_dim)?;
        let hn = layer_norm(g, h)?;
        let hn = modulate(g, hn, m[0], m[1])?;
        let out = linear(g, p, "final", hn)?;
        debug_assert_eq!(g.shape(out), [b, l, c.latent_dim]);
        Ok(out)
    }

    /// Evaluate with parameters as constants.
    pub fn eval<T: Element>(
        &self,
        params: &ParamSet<T>,
        x: &Tensor<T>,
        r: &[f64],
        t: &[f64],
        cond: &[Condition],
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = params.bind_constant(&mut g);
        let xv = g.constant(x.clone());
        let rv = g.constant(Tensor::from_f64(vec![r.len()], r)?);
        let tv = g.constant(Tensor::from_f64(vec![t.len()], t)?);
        let out = self.forward(&mut g, &p, xv, rv, tv, cond)?;
        Ok(g.value(out).clone())
    }

    /// Per-stream attention inputs: pre-normed, modulated, projected to
    /// heads with RMS-normalized and rotated queries and keys.
    fn stream_qkv<T: Element>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        prefix: &str,
        h: Var,
        shift: Var,
        scale: Var,
    ) -> Result<(Var, Var, Var)> {
        let c = &self.cfg;
        let hn = layer_norm(g, h)?;
        let hn = modulate(g, hn, shift, scale)?;
        let qkv = linear(g, p, &format!("{prefix}.qkv"), hn)?;
        let len = g.shape(h)[1];
        let mut parts = Vec::with_capacity(3);
        for i in 0..3 {
            let s = g.slice(qkv, 2, i * c.hidden_dim, c.hidden_dim)?;
            parts.push(split_heads(g, s, c.n_heads)?);
        }
        let q = rms_norm(g, parts[0], p.get(&format!("{prefix}.q_norm"))?)?;
        let k = rms_norm(g, parts[1], p.get(&format!("{prefix}.k_norm"))?)?;
        let positions: Vec<usize> = (0..len).collect();
        let (q, k) = rope_apply(g, q, k, &positions)?;
        Ok((q, k, parts[2]))
    }

    #[allow(clippy::too_many_arguments)]
    fn mm_block<T: Element>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        prefix: &str,
        h: Var,
        txt: Var,
        sc: Var,
        pre_only: bool,
    ) -> Result<(Var, Var)> {
        let hd = self.cfg.hidden_dim;
        let xp = format!("{prefix}.x");
        let tp = format!("{prefix}.txt");
        let xm = linear(g, p, &format!("{xp}.mod"), sc)?;
        let xm = chunks(g, xm, 6, hd)?;
        let tm = linear(g, p, &format!("{tp}.mod"), sc)?;
        let tm = chunks(g, tm, if pre_only { 2 } else { 6 }, hd)?;

        let (xq, xk, xv) = self.stream_qkv(g, p, &xp, h, xm[0], xm[1])?;
        let (tq, tk, tv) = self.stream_qkv(g, p, &tp, txt, tm[0], tm[1])?;
        let m = g.shape(txt)[1];
        let q = g.concat(&[tq, xq], 2)?;
        let k = g.concat(&[tk, xk], 2)?;
        let v = g.concat(&[tv, xv], 2)?;
        let a = attention(g, q, k, v)?;
        let a = merge_heads(g, a)?;
        let l = g.shape(h)[1];
        let a_txt = g.slice(a, 1, 0, m)?;
        let a_x = g.slice(a, 1, m, l)?;

        let h = self.stream_out(g, p, &xp, h, a_x, &xm, true)?;
        let txt = if pre_only {
            txt
        } else {
            self.stream_out(g, p, &tp, txt, a_txt, &tm, false)?
        };
        Ok((h, txt))
    }

    fn sm_block<T: Element>(&self, g: &mut Graph<T>, p: &BoundParams, prefix: &str, h: Var, sc: Var) -> Result<Var> {
        let xp = format!("{prefix}.x");
        let xm = linear(g, p, &format!("{xp}.mod"), sc)?;
        let xm = chunks(g, xm, 6, self.cfg.hidden_dim)?;
        let (q, k, v) = self.stream_qkv(g, p, &xp, h, xm[0], xm[1])?;
        let a = attention(g, q, k, v)?;
        let a = merge_heads(g, a)?;
        self.stream_out(g, p, &xp, h, a, &xm, true)
    }

    /// Gated attention residual followed by the gated MLP residual.
    #[allow(clippy::too_many_arguments)]
    fn stream_out<T: Element>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        prefix: &str,
        h: Var,
        attn: Var,
        m: &[Var],
        conv: bool,
    ) -> Result<Var> {
        let o = linear(g, p, &format!("{prefix}.proj"), attn)?;
        let o = g.mul_bcast(o, m[2])?;
        let h = g.add(h, o)?;
        let hn = layer_norm(g, h)?;
        let hn = modulate(g, hn, m[3], m[4])?;
        let f = if conv {
            conv_mlp(g, p, &format!("{prefix}.mlp"), hn)?
        } else {
            let f = linear(g, p, &format!("{prefix}.mlp.fc1"), hn)?;
            let f = g.silu(f)?;
            linear(g, p, &format!("{prefix}.mlp.fc2"), f)?
        };
        let f = g.mul_bcast(f, m[5])?;
        Ok(g.add(h, f)?)
    }
}

/// `x W + b` over the last axis.
pub fn linear<T: Element>(g: &mut Graph<T>, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let y = g.matmul(x, p.get(&format!("{name}.w"))?)?;
    Ok(g.add_bcast(y, p.get(&format!("{name}.b"))?)?)
}

/// Split `[B, n*H]` into `n` tensors of shape `[B, 1, H]`.
fn chunks<T: Element>(g: &mut Graph<T>, m: Var, n: usize, h: usize) -> Result<Vec<Var>> {
    let b = g.shape(m)[0];
    (0..n)
        .map(|i| {
            let s = g.slice(m, 1, i * h, h)?;
            Ok(g.reshape(s, &[b, 1, h])?)
        })
        .collect()
}

/// Zero-mean, unit-RMS normalization over the feature axis.
pub fn layer_norm<T: Element>(g: &mut Graph<T>, h: Var) -> Result<Var> {
    let mean = g.mean_last(h)?;
    let centered = g.sub_bcast(h, mean)?;
    Ok(g.rms_normalize(centered, NORM_EPS)?)
}

/// `h * (1 + scale) + shift`.
pub fn modulate<T: Element>(g: &mut Graph<T>, h: Var, shift: Var, scale: Var) -> Result<Var> {
    let scaled = g.mul_bcast(h, scale)?;
    let h = g.add(h, scaled)?;
    Ok(g.add_bcast(h, shift)?)
}

/// AdaLN: layer-normalize `h` then apply the condition's shift and scale.
pub fn adaln_modulate<T: Element>(g: &mut Graph<T>, h: Var, shift: Var, scale: Var) -> Result<Var> {
    let hn = layer_norm(g, h)?;
    modulate(g, hn, shift, scale)
}

/// `h / rms(h) * scale` over the last axis.
pub fn rms_norm<T: Element>(g: &mut Graph<T>, h: Var, scale: Var) -> Result<Var> {
    let n = g.rms_normalize(h, NORM_EPS)?;
    Ok(g.mul_bcast(n, scale)?)
}

fn split_heads<T: Element>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let x = g.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    Ok(g.permute(x, &[0, 2, 1, 3])?)
}

fn merge_heads<T: Element>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let x = g.permute(x, &[0, 2, 1, 3])?;
    Ok(g.reshape(x, &[s[0], s[2], s[1] * s[3]])?)
}

/// Scaled dot-product attention on `[B, heads, T, head_dim]`.
fn attention<T: Element>(g: &mut Graph<T>, q: Var, k: Var, v: Var) -> Result<Var> {
    let hd = *g.shape(q).last().unwrap();
    let s = g.matmul_ext(q, k, true)?;
    let s = g.scale(s, 1.0 / (hd as f64).sqrt())?;
    let a = g.softmax(s)?;
    Ok(g.matmul(a, v)?)
}

/// Rotary embedding: feature pair `(2j, 2j+1)` at position `p` is rotated by
/// `p * base^(-2j / head_dim)`.
pub fn rope_apply<T: Element>(g: &mut Graph<T>, q: Var, k: Var, positions: &[usize]) -> Result<(Var, Var)> {
    let hd = *g.shape(q).last().ok_or_else(|| CoreError::InvalidInput("rope on rank-0 input".into()))?;
    if hd % 2 != 0 {
        return Err(CoreError::InvalidInput(format!("rope needs an even head_dim, got {hd}")));
    }
    let len = positions.len();
    for v in [q, k] {
        let s = g.shape(v);
        if s.len() < 2 || s[s.len() - 2] != len || s[s.len() - 1] != hd {
            return Err(CoreError::InvalidInput(format!("rope expects [.., {len}, {hd}], got {s:?}")));
        }
    }
    let mut cos = Vec::with_capacity(len * hd);
    let mut sin = Vec::with_capacity(len * hd);
    for &pos in positions {
        for j in 0..hd / 2 {
            let theta = pos as f64 * ROPE_BASE.powf(-2.0 * j as f64 / hd as f64);
            cos.extend([theta.cos(); 2]);
            sin.extend([theta.sin(); 2]);
        }
    }
    // (a, b) -> (-b, a) on each pair
    let mut rot = vec![0.0; hd * hd];
    for j in 0..hd / 2 {
        rot[(2 * j + 1) * hd + 2 * j] = -1.0;
        rot[2 * j * hd + 2 * j + 1] = 1.0;
    }
    let cos = g.constant(Tensor::from_f64(vec![len, hd], &cos)?);
    let sin = g.constant(Tensor::from_f64(vec![len, hd], &sin)?);
    let rot = g.constant(Tensor::from_f64(vec![hd, hd], &rot)?);
    let mut apply = |x: Var| -> Result<Var> {
        let a = g.mul_bcast(x, cos)?;
        let r = g.matmul(x, rot)?;
        let b = g.mul_bcast(r, sin)?;
        Ok(g.add(a, b)?)
    };
    let q2 = apply(q)?;
    let k2 = apply(k)?;
    Ok((q2, k2))
}

/// Angular frequencies of the timestep features, geometric in `[1, TIME_FREQ_MAX]`.
pub fn time_frequencies(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| TIME_FREQ_MAX.powf(i as f64 / (n - 1) as f64))
        .collect()
}

/// Sinusoidal features of `s` (shape `[B]`) through a two-layer MLP; `[B, H]`.
pub fn timestep_embed<T: Element>(g: &mut Graph<T>, p: &BoundParams, name: &str, s: Var, dim: usize) -> Result<Var> {
    if let Some(bad) = g.value(s).data().iter().map(|v| v.as_f64()).find(|v| !(0.0..=1.0).contains(v)) {
        return Err(CoreError::InvalidInput(format!("timestep {bad} outside [0, 1]")));
    }
    let b = g.shape(s)[0];
    let freqs = g.constant(Tensor::from_f64(vec![1, dim], &time_frequencies(dim))?);
    let s2 = g.reshape(s, &[b, 1])?;
    let phase = g.mul_bcast(s2, freqs)?;
    let sn = g.sin(phase)?;
    let cs = g.cos(phase)?;
    let feats = g.concat(&[sn, cs], 1)?;
    let h = linear(g, p, &format!("{name}.fc1"), feats)?;
    let h = g.silu(h)?;
    linear(g, p, &format!("{name}.fc2"), h)
}

/// Label lookups: pseudo-tokens `[B, M, H]` for the text stream and the
/// global vector `[B, H]` for the condition sum.
pub fn embed_condition<T: Element>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &FlowNetConfig,
    cond: &[Condition],
) -> Result<(Var, Var)> {
    let rows = cond.iter().map(|c| c.row(cfg.n_labels)).collect::<Result<Vec<_>>>()?;
    let tokens = g.gather(p.get("label.tokens")?, &rows)?;
    let tokens = g.reshape(tokens, &[cond.len(), cfg.pseudo_token_count, cfg.hidden_dim])?;
    let global = g.gather(p.get("label.global")?, &rows)?;
    Ok((tokens, global))
}

/// Two token-axis convolutions (kernel 3, zero padding 1) with a SiLU between.
pub fn conv_mlp<T: Element>(g: &mut Graph<T>, p: &BoundParams, name: &str, h: Var) -> Result<Var> {
    let a = g.conv1d(h, p.get(&format!("{name}.conv1.w"))?)?;
    let a = g.add_bcast(a, p.get(&format!("{name}.conv1.b"))?)?;
    let a = g.silu(a)?;
    let o = g.conv1d(a, p.get(&format!("{name}.conv2.w"))?)?;
    Ok(g.add_bcast(o, p.get(&format!("{name}.conv2.b"))?)?)
}
