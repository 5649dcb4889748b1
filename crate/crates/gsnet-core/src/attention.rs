//! Window attention: partitioning, cyclic shift with cross-region masking,
//! relative position bias, multi-head attention (W-MSA / SW-MSA), the
//! two-block transformer stage unit, patch merging, and guided
//! cross-attention where queries come from one stream and keys/values from
//! another.
//!
//! Feature maps here are channels-last [B,H,W,C]; windows are [N, M*M, C]
//! with N = B * (H/M) * (W/M), tokens in raster order within each window.

use std::sync::Arc;

use crate::error::{GsError, Result};
use crate::init::{he_uniform, ones_param, zeros_param};
use crate::rng::Rng;
use crate::tensor::ops::{concat, gather_op};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
/// Additive mask for cross-region pairs. Large negative rather than -inf so
/// gradients stay finite.
pub const MASK_VALUE: f64 = -1e9;

#[derive(Debug, Clone, Copy)]
pub struct AttentionConfig {
    /// channels per token
    pub dim: usize,
    pub num_heads: usize,
    /// window side M
    pub window_size: usize,
}

impl AttentionConfig {
    pub fn new(dim: usize, num_heads: usize, window_size: usize) -> Result<Self> {
        if num_heads == 0 || dim % num_heads != 0 {
            return Err(GsError::Config(format!(
                "attention dim {dim} must be divisible by num_heads {num_heads}"
            )));
        }
        if window_size == 0 {
            return Err(GsError::Config("window_size must be >= 1".to_string()));
        }
        Ok(AttentionConfig {
            dim,
            num_heads,
            window_size,
        })
    }

    /// Per-head query/key dimension.
    pub fn d_k(&self) -> usize {
        self.dim / self.num_heads
    }
}

/// Learnable relative position bias: a [(2M-1)^2, num_heads] table plus the
/// precomputed [M^2, M^2] index map from relative token coordinates.
pub struct RelPosBias {
    pub table: Tensor,
    index: Arc<Vec<usize>>,
    pub window_size: usize,
    pub num_heads: usize,
}

impl RelPosBias {
    /// Table starts at zero and is learnable.
    pub fn new(window_size: usize, num_heads: usize) -> RelPosBias {
        let span = 2 * window_size - 1;
        RelPosBias {
            table: zeros_param(&[span * span, num_heads]),
            index: Arc::new(Self::index_map(window_size)),
            window_size,
            num_heads,
        }
    }

    /// idx[i*L+j] for tokens i,j of an M x M window, raster order.
    pub fn index_map(m: usize) -> Vec<usize> {
        let span = 2 * m - 1;
        let l = m * m;
        let mut map = vec![0usize; l * l];
        for i in 0..l {
            let (yi, xi) = (i / m, i % m);
            for j in 0..l {
                let (yj, xj) = (j / m, j % m);
                let dy = yi + m - 1 - yj;
                let dx = xi + m - 1 - xj;
                map[i * l + j] = dy * span + dx;
            }
        }
        map
    }

    /// Materialize the per-head bias [num_heads, L, L]; gradient scatters
    /// back into the table.
    pub fn gather(&self) -> Tensor {
        let l = self.window_size * self.window_size;
        let nh = self.num_heads;
        let mut map = Vec::with_capacity(nh * l * l);
        for h in 0..nh {
            for ij in 0..l * l {
                map.push(self.index[ij] * nh + h);
            }
        }
        gather_op(&self.table, Arc::new(map), vec![nh, l, l])
    }
}

/// Additive attention mask for shifted windows: 0 for same-region pairs,
/// MASK_VALUE for pairs split by the cyclic shift.
pub struct ShiftMask {
    /// [num_windows, L, L]
    pub mask: Tensor,
    pub num_windows: usize,
    pub window_size: usize,
}

/// Build the SW-MSA mask for an H x W map, window M, cyclic shift `shift`.
/// Region labels follow the three-band construction over the rolled frame,
/// so tokens that were not neighbors before the roll cannot attend.
pub fn build_shift_mask(h: usize, w: usize, m: usize, shift: usize) -> Result<ShiftMask> {
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(GsError::Dim(format!(
            "window {m} must divide feature map {h}x{w}"
        )));
    }
    if shift >= m {
        return Err(GsError::Input(format!("shift {shift} must be < window {m}")));
    }
    let l = m * m;
    let num_windows = (h / m) * (w / m);
    if shift == 0 {
        return Ok(ShiftMask {
            mask: Tensor::zeros(&[num_windows, l, l]),
            num_windows,
            window_size: m,
        });
    }
    let band = |coord: usize, extent: usize| -> usize {
        if coord < extent - m {
            0
        } else if coord < extent - shift {
            1
        } else {
            2
        }
    };
    let mut labels = vec![0usize; h * w];
    for y in 0..h {
        for x in 0..w {
            labels[y * w + x] = band(y, h) * 3 + band(x, w);
        }
    }
    let mut mask = vec![0.0; num_windows * l * l];
    let wins_x = w / m;
    for win in 0..num_windows {
        let (wy, wx) = (win / wins_x, win % wins_x);
        let label_of = |t: usize| labels[(wy * m + t / m) * w + (wx * m + t % m)];
        for i in 0..l {
            for j in 0..l {
                if label_of(i) != label_of(j) {
                    mask[(win * l + i) * l + j] = MASK_VALUE;
                }
            }
        }
    }
    Ok(ShiftMask {
        mask: Tensor::from_vec(mask, &[num_windows, l, l])?,
        num_windows,
        window_size: m,
    })
}

/// [B,H,W,C] -> [B*(H/M)*(W/M), M*M, C], non-overlapping raster tiles.
pub fn window_partition(x: &Tensor, m: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(GsError::Dim(format!("window_partition expects [B,H,W,C], got {s:?}")));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(GsError::Dim(format!(
            "window {m} does not divide feature map {h}x{w}"
        )));
    }
    let (wins_y, wins_x) = (h / m, w / m);
    let mut map = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for wy in 0..wins_y {
            for wx in 0..wins_x {
                for my in 0..m {
                    for mx in 0..m {
                        let y = wy * m + my;
                        let xx = wx * m + mx;
                        let base = ((bi * h + y) * w + xx) * c;
                        for ch in 0..c {
                            map.push(base + ch);
                        }
                    }
                }
            }
        }
    }
    Ok(gather_op(x, Arc::new(map), vec![b * wins_y * wins_x, m * m, c]))
}

/// Inverse of [`window_partition`]: [N, M*M, C] -> [B,H,W,C].
pub fn window_reverse(windows: &Tensor, h: usize, w: usize, m: usize) -> Result<Tensor> {
    let s = windows.shape();
    if s.len() != 3 || s[1] != m * m {
        return Err(GsError::Dim(format!(
            "window_reverse expects [N,{},C], got {s:?}",
            m * m
        )));
    }
    let per_image = (h / m) * (w / m);
    if m == 0 || h % m != 0 || w % m != 0 || per_image == 0 || s[0] % per_image != 0 {
        return Err(GsError::Dim(format!(
            "cannot reassemble {} windows into {h}x{w} with window {m}",
            s[0]
        )));
    }
    let b = s[0] / per_image;
    let c = s[2];
    let (wins_y, wins_x) = (h / m, w / m);
    // gather map indexed by output position
    let mut map = vec![0usize; b * h * w * c];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let (wy, my) = (y / m, y % m);
                let (wx, mx) = (xx / m, xx % m);
                let win = (bi * wins_y + wy) * wins_x + wx;
                let tok = my * m + mx;
                for ch in 0..c {
                    map[((bi * h + y) * w + xx) * c + ch] = (win * m * m + tok) * c + ch;
                }
            }
        }
    }
    Ok(gather_op(windows, Arc::new(map), vec![b, h, w, c]))
}

/// Torus roll: out[b,i,j,c] = x[b, (i+shift) mod H, (j+shift) mod W, c].
/// `cyclic_shift(s)` then `cyclic_shift(-s)` restores the input exactly.
pub fn cyclic_shift(x: &Tensor, shift: i64) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(GsError::Dim(format!("cyclic_shift expects [B,H,W,C], got {s:?}")));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let mut map = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for y in 0..h {
            let sy = (y as i64 + shift).rem_euclid(h as i64) as usize;
            for xx in 0..w {
                let sx = (xx as i64 + shift).rem_euclid(w as i64) as usize;
                let base = ((bi * h + sy) * w + sx) * c;
                for ch in 0..c {
                    map.push(base + ch);
                }
            }
        }
    }
    Ok(gather_op(x, Arc::new(map), vec![b, h, w, c]))
}

/// [B,H,W,C] -> [B,H/2,W/2,4C], concatenating the 2x2 neighborhood as
/// (0,0),(1,0),(0,1),(1,1) blocks along channels.
pub fn space_to_depth2(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(GsError::Dim(format!("space_to_depth2 expects [B,H,W,C], got {s:?}")));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(GsError::Dim(format!(
            "space_to_depth2 requires even sides, got {h}x{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    const OFFSETS: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];
    let mut map = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for y in 0..ho {
            for xx in 0..wo {
                for (dy, dx) in OFFSETS {
                    let base = ((bi * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                    for ch in 0..c {
                        map.push(base + ch);
                    }
                }
            }
        }
    }
    Ok(gather_op(x, Arc::new(map), vec![b, ho, wo, 4 * c]))
}

/// [N,L,D] -> [N*num_heads, L, d_k]
fn split_heads(x: &Tensor, num_heads: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 || s[2] % num_heads != 0 {
        return Err(GsError::Dim(format!(
            "split_heads: shape {s:?} incompatible with {num_heads} heads"
        )));
    }
    let (n, l, d) = (s[0], s[1], s[2]);
    let dk = d / num_heads;
    let mut map = Vec::with_capacity(n * l * d);
    for ni in 0..n {
        for h in 0..num_heads {
            for li in 0..l {
                let base = (ni * l + li) * d + h * dk;
                for t in 0..dk {
                    map.push(base + t);
                }
            }
        }
    }
    Ok(gather_op(x, Arc::new(map), vec![n * num_heads, l, dk]))
}

/// [N*num_heads, L, d_k] -> [N,L,D]
fn merge_heads(x: &Tensor, num_heads: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 || s[0] % num_heads != 0 {
        return Err(GsError::Dim(format!(
            "merge_heads: shape {s:?} incompatible with {num_heads} heads"
        )));
    }
    let (nh_total, l, dk) = (s[0], s[1], s[2]);
    let n = nh_total / num_heads;
    let d = num_heads * dk;
    let mut map = vec![0usize; n * l * d];
    for ni in 0..n {
        for li in 0..l {
            for h in 0..num_heads {
                for t in 0..dk {
                    map[(ni * l + li) * d + h * dk + t] =
                        (((ni * num_heads + h) * l) + li) * dk + t;
                }
            }
        }
    }
    Ok(gather_op(x, Arc::new(map), vec![n, l, d]))
}

/// Scaled-dot-product attention over windows, per head:
/// softmax(q_h k_h^T / sqrt(d_k) + B_h + mask) v_h, heads concatenated and
/// projected by `out_w`/`out_b`.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    bias: &RelPosBias,
    mask: Option<&ShiftMask>,
    cfg: &AttentionConfig,
    out_w: &Tensor,
    out_b: &Tensor,
) -> Result<Tensor> {
    let s = q.shape().to_vec();
    if k.shape() != s.as_slice() || v.shape() != s.as_slice() {
        return Err(GsError::Dim(format!(
            "q/k/v shapes differ: {:?} / {:?} / {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let l_expect = cfg.window_size * cfg.window_size;
    if s.len() != 3 || s[1] != l_expect || s[2] != cfg.dim {
        return Err(GsError::Dim(format!(
            "attention expects [N,{l_expect},{}], got {s:?}",
            cfg.dim
        )));
    }
    let (n, l) = (s[0], s[1]);
    let nh = cfg.num_heads;
    let qh = split_heads(q, nh)?;
    let kh = split_heads(k, nh)?;
    let vh = split_heads(v, nh)?;
    let scale = 1.0 / (cfg.d_k() as f64).sqrt();
    let mut scores = qh.bmm_nt(&kh)?.mul_scalar(scale); // [N*nh, L, L]
    scores = scores
        .reshape(&[n, nh, l, l])?
        .add(&bias.gather())?;
    if let Some(m) = mask {
        let nw = m.num_windows;
        if n % nw != 0 {
            return Err(GsError::Dim(format!(
                "{n} window batches not divisible by mask windows {nw}"
            )));
        }
        let b = n / nw;
        scores = scores
            .reshape(&[b, nw, nh, l, l])?
            .add(&m.mask.reshape(&[nw, 1, l, l])?)?;
    }
    let attn = scores.reshape(&[n * nh, l, l])?.softmax(2)?;
    let ctx = attn.bmm(&vh)?;
    merge_heads(&ctx, nh)?.linear(out_w, out_b)
}

/// Projection weights for one window-attention layer (q/k/v/out) plus its
/// relative position bias table.
pub struct WindowAttention {
    pub q_w: Tensor,
    pub q_b: Tensor,
    pub k_w: Tensor,
    pub k_b: Tensor,
    pub v_w: Tensor,
    pub v_b: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
    pub bias: RelPosBias,
}

impl WindowAttention {
    pub fn new(rng: &mut Rng, cfg: &AttentionConfig) -> WindowAttention {
        let d = cfg.dim;
        WindowAttention {
            q_w: he_uniform(rng, d, &[d, d]),
            q_b: zeros_param(&[d]),
            k_w: he_uniform(rng, d, &[d, d]),
            k_b: zeros_param(&[d]),
            v_w: he_uniform(rng, d, &[d, d]),
            v_b: zeros_param(&[d]),
            out_w: he_uniform(rng, d, &[d, d]),
            out_b: zeros_param(&[d]),
            bias: RelPosBias::new(cfg.window_size, cfg.num_heads),
        }
    }

    /// Self-attention over window tokens [N,L,C].
    pub fn forward(
        &self,
        windows: &Tensor,
        mask: Option<&ShiftMask>,
        cfg: &AttentionConfig,
    ) -> Result<Tensor> {
        let q = windows.linear(&self.q_w, &self.q_b)?;
        let k = windows.linear(&self.k_w, &self.k_b)?;
        let v = windows.linear(&self.v_w, &self.v_b)?;
        multi_head_attention(&q, &k, &v, &self.bias, mask, cfg, &self.out_w, &self.out_b)
    }

    /// Cross-attention: queries from `q_src`, keys/values from `kv_src`.
    pub fn forward_cross(
        &self,
        q_src: &Tensor,
        kv_src: &Tensor,
        cfg: &AttentionConfig,
    ) -> Result<Tensor> {
        let q = q_src.linear(&self.q_w, &self.q_b)?;
        let k = kv_src.linear(&self.k_w, &self.k_b)?;
        let v = kv_src.linear(&self.v_w, &self.v_b)?;
        multi_head_attention(&q, &k, &v, &self.bias, None, cfg, &self.out_w, &self.out_b)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (name, t) in [
            ("q.w", &self.q_w),
            ("q.b", &self.q_b),
            ("k.w", &self.k_w),
            ("k.b", &self.k_b),
            ("v.w", &self.v_w),
            ("v.b", &self.v_b),
            ("out.w", &self.out_w),
            ("out.b", &self.out_b),
            ("rel_bias", &self.bias.table),
        ] {
            out.push((format!("{prefix}.{name}"), t.clone()));
        }
    }
}

/// One transformer block: pre-norm attention residual, then pre-norm MLP
/// residual. `shift = 0` is W-MSA; `shift = M/2` is SW-MSA.
pub struct SwinBlockParams {
    pub norm1_gamma: Tensor,
    pub norm1_beta: Tensor,
    pub attn: WindowAttention,
    pub norm2_gamma: Tensor,
    pub norm2_beta: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

pub const MLP_RATIO: usize = 4;

impl SwinBlockParams {
    pub fn new(rng: &mut Rng, cfg: &AttentionConfig) -> SwinBlockParams {
        let d = cfg.dim;
        let hidden = d * MLP_RATIO;
        SwinBlockParams {
            norm1_gamma: ones_param(&[d]),
            norm1_beta: zeros_param(&[d]),
            attn: WindowAttention::new(rng, cfg),
            norm2_gamma: ones_param(&[d]),
            norm2_beta: zeros_param(&[d]),
            mlp_w1: he_uniform(rng, d, &[d, hidden]),
            mlp_b1: zeros_param(&[hidden]),
            mlp_w2: he_uniform(rng, hidden, &[hidden, d]),
            mlp_b2: zeros_param(&[d]),
        }
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.norm1.gamma"), self.norm1_gamma.clone()));
        out.push((format!("{prefix}.norm1.beta"), self.norm1_beta.clone()));
        self.attn.collect_params(&format!("{prefix}.attn"), out);
        out.push((format!("{prefix}.norm2.gamma"), self.norm2_gamma.clone()));
        out.push((format!("{prefix}.norm2.beta"), self.norm2_beta.clone()));
        out.push((format!("{prefix}.mlp.w1"), self.mlp_w1.clone()));
        out.push((format!("{prefix}.mlp.b1"), self.mlp_b1.clone()));
        out.push((format!("{prefix}.mlp.w2"), self.mlp_w2.clone()));
        out.push((format!("{prefix}.mlp.b2"), self.mlp_b2.clone()));
    }
}

/// x + Attn(LN(x)) followed by + MLP(LN(.)), over a [B,H,W,C] map.
pub fn swin_block(
    x: &Tensor,
    shift: usize,
    cfg: &AttentionConfig,
    params: &SwinBlockParams,
) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || s[3] != cfg.dim {
        return Err(GsError::Dim(format!(
            "swin_block expects [B,H,W,{}], got {s:?}",
            cfg.dim
        )));
    }
    let (h, w) = (s[1], s[2]);
    let m = cfg.window_size;
    if shift != 0 && shift != m / 2 {
        return Err(GsError::Input(format!(
            "swin_block shift must be 0 or M/2 = {}, got {shift}",
            m / 2
        )));
    }
    let mut y = x.layer_norm(&params.norm1_gamma, &params.norm1_beta, LN_EPS)?;
    if shift > 0 {
        y = cyclic_shift(&y, shift as i64)?;
    }
    let windows = window_partition(&y, m)?;
    let mask = if shift > 0 {
        Some(build_shift_mask(h, w, m, shift)?)
    } else {
        None
    };
    let attended = params.attn.forward(&windows, mask.as_ref(), cfg)?;
    let mut back = window_reverse(&attended, h, w, m)?;
    if shift > 0 {
        back = cyclic_shift(&back, -(shift as i64))?;
    }
    let x = x.add(&back)?;
    let z = x
        .layer_norm(&params.norm2_gamma, &params.norm2_beta, LN_EPS)?
        .linear(&params.mlp_w1, &params.mlp_b1)?
        .relu()
        .linear(&params.mlp_w2, &params.mlp_b2)?;
    x.add(&z)
}

/// 2x2 neighborhoods concatenated to 4C, layer-normed, reduced to 2C.
pub struct PatchMergingParams {
    pub norm_gamma: Tensor,
    pub norm_beta: Tensor,
    pub reduce_w: Tensor,
    pub reduce_b: Tensor,
}

impl PatchMergingParams {
    pub fn new(rng: &mut Rng, in_dim: usize) -> PatchMergingParams {
        PatchMergingParams {
            norm_gamma: ones_param(&[4 * in_dim]),
            norm_beta: zeros_param(&[4 * in_dim]),
            reduce_w: he_uniform(rng, 4 * in_dim, &[4 * in_dim, 2 * in_dim]),
            reduce_b: zeros_param(&[2 * in_dim]),
        }
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.norm.gamma"), self.norm_gamma.clone()));
        out.push((format!("{prefix}.norm.beta"), self.norm_beta.clone()));
        out.push((format!("{prefix}.reduce.w"), self.reduce_w.clone()));
        out.push((format!("{prefix}.reduce.b"), self.reduce_b.clone()));
    }
}

/// [B,H,W,C] -> [B,H/2,W/2,2C]
pub fn patch_merging(x: &Tensor, params: &PatchMergingParams) -> Result<Tensor> {
    let merged = space_to_depth2(x)?;
    merged
        .layer_norm(&params.norm_gamma, &params.norm_beta, LN_EPS)?
        .linear(&params.reduce_w, &params.reduce_b)
}

/// Guided attention: Q from `stream_s`, K/V from `stream_e`, computed per
/// window with the layer's relative position bias, output projected back to
/// C. With `stream_e == stream_s` this is exactly W-MSA.
pub fn guided_self_attention(
    stream_s: &Tensor,
    stream_e: &Tensor,
    params: &WindowAttention,
    cfg: &AttentionConfig,
) -> Result<Tensor> {
    if stream_s.shape() != stream_e.shape() {
        return Err(GsError::Dim(format!(
            "guided attention streams differ: {:?} vs {:?}",
            stream_s.shape(),
            stream_e.shape()
        )));
    }
    let s = stream_s.shape();
    if s.len() != 4 || s[3] != cfg.dim {
        return Err(GsError::Dim(format!(
            "guided attention expects [B,H,W,{}], got {s:?}",
            cfg.dim
        )));
    }
    let (h, w) = (s[1], s[2]);
    let m = cfg.window_size;
    let sw = window_partition(stream_s, m)?;
    let ew = window_partition(stream_e, m)?;
    let out = params.forward_cross(&sw, &ew, cfg)?;
    window_reverse(&out, h, w, m)
}
