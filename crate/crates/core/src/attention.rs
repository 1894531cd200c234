//! Standard and coupled multi-head self-attention over an `h×w` token grid.
//!
//! Tokens are laid out in raster order, token `i` sitting at column
//! `i % w` and row `i / w`. Coupled attention scores whole grid rows against
//! each other (`A`, `h×h`) and whole grid columns against each other (`B`,
//! `w×w`), so that the token map is `softmax(A) ⊗ softmax(B)`:
//!
//! * [`coupled_attention_fast`] applies it as `softmax(A)·V·softmax(B)ᵀ` per
//!   channel and never allocates an `hw×hw` matrix.
//! * [`coupled_attention_explicit`] builds the Kronecker product and
//!   multiplies it into every vectorized channel. It exists to check the fast
//!   path and refuses grids larger than [`EXPLICIT_MAX_TOKENS`].
//!
//! Projections follow the row convention `y = x·W`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::init::trunc_normal;
use crate::probe;
use crate::tensor::Tensor;

/// Largest `h·w` accepted by the explicit Kronecker path.
pub const EXPLICIT_MAX_TOKENS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionGeometry {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub heads: usize,
}

impl AttentionGeometry {
    pub fn new(h: usize, w: usize, d: usize, heads: usize) -> Result<Self> {
        if h == 0 || w == 0 || d == 0 || heads == 0 {
            return Err(Error::Invalid(format!("degenerate geometry h={h} w={w} d={d} heads={heads}")));
        }
        if !d.is_multiple_of(heads) {
            return Err(Error::Invalid(format!("embed dim {d} not divisible by {heads} heads")));
        }
        Ok(AttentionGeometry { h, w, d, heads })
    }

    /// Sequence length `L = h·w`.
    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    pub fn d_head(&self) -> usize {
        self.d / self.heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    Standard,
    CoupledFast,
    CoupledExplicit,
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionKind::Standard => "standard",
            AttentionKind::CoupledFast => "coupled_fast",
            AttentionKind::CoupledExplicit => "coupled_explicit",
        })
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(AttentionKind::Standard),
            "coupled_fast" | "coupled" => Ok(AttentionKind::CoupledFast),
            "coupled_explicit" => Ok(AttentionKind::CoupledExplicit),
            other => Err(Error::Config(format!("unknown attention kind `{other}`"))),
        }
    }
}

/// Token index of grid cell (`x`, `y`) on an `h×w` grid.
pub fn raster_index(x: usize, y: usize, h: usize, w: usize) -> Result<usize> {
    if x >= w || y >= h {
        return Err(Error::Invalid(format!("cell ({x}, {y}) outside {h}x{w} grid")));
    }
    Ok(x + y * w)
}

/// Inverse of [`raster_index`]: returns `(x, y)`.
pub fn raster_coords(i: usize, h: usize, w: usize) -> Result<(usize, usize)> {
    if w == 0 || i >= h * w {
        return Err(Error::Invalid(format!("token {i} outside {h}x{w} grid")));
    }
    Ok((i % w, i / w))
}

/// Projection weights of one attention layer. Both attention mechanisms use
/// the same four `d×d` matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingAttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    /// Optional `d` biases for q, k, v, o.
    pub biases: Option<[Tensor; 4]>,
    pub geometry: AttentionGeometry,
}

impl CouplingAttentionParams {
    pub fn init<R: Rng + ?Sized>(geometry: AttentionGeometry, bias: bool, rng: &mut R) -> Self {
        let d = geometry.d;
        let mut proj = || trunc_normal(&[d, d], 0.02, rng);
        let (wq, wk, wv, wo) = (proj(), proj(), proj(), proj());
        let biases = bias.then(|| std::array::from_fn(|_| Tensor::zeros(&[d])));
        CouplingAttentionParams {
            wq,
            wk,
            wv,
            wo,
            biases,
            geometry,
        }
    }

    pub fn param_count(&self) -> usize {
        let d = self.geometry.d;
        4 * d * d + if self.biases.is_some() { 4 * d } else { 0 }
    }

    /// Registers all weights as trainable leaves of `g`.
    pub fn bind(&self, g: &mut Graph) -> AttentionVars {
        AttentionVars {
            wq: g.param(self.wq.clone()),
            wk: g.param(self.wk.clone()),
            wv: g.param(self.wv.clone()),
            wo: g.param(self.wo.clone()),
            biases: self
                .biases
                .as_ref()
                .map(|b| std::array::from_fn(|i| g.param(b[i].clone()))),
        }
    }
}

/// Graph handles for [`CouplingAttentionParams`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub biases: Option<[Var; 4]>,
}

fn project(g: &mut Graph, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add_row(y, b),
        None => Ok(y),
    }
}

fn check_input(g: &Graph, x: Var, geom: &AttentionGeometry) -> Result<()> {
    if g.shape(x) != [geom.tokens(), geom.d] {
        return Err(Error::shape(
            "attention",
            format!("input {:?} vs geometry {}x{} tokens, d={}", g.shape(x), geom.h, geom.w, geom.d),
        ));
    }
    Ok(())
}

/// `L×d` → `heads×L×d_head`.
fn split_heads(g: &mut Graph, t: Var, geom: &AttentionGeometry) -> Result<Var> {
    let r = g.reshape(t, &[geom.tokens(), geom.heads, geom.d_head()])?;
    g.permute(r, &[1, 0, 2])
}

/// `heads×L×d_head` → `L×d`.
fn merge_heads(g: &mut Graph, t: Var, geom: &AttentionGeometry) -> Result<Var> {
    let p = g.permute(t, &[1, 0, 2])?;
    g.reshape(p, &[geom.tokens(), geom.d])
}

fn qkv(g: &mut Graph, x: Var, vars: &AttentionVars, geom: &AttentionGeometry) -> Result<[Var; 3]> {
    check_input(g, x, geom)?;
    let b = vars.biases;
    let q = project(g, x, vars.wq, b.map(|b| b[0]))?;
    let k = project(g, x, vars.wk, b.map(|b| b[1]))?;
    let v = project(g, x, vars.wv, b.map(|b| b[2]))?;
    Ok([split_heads(g, q, geom)?, split_heads(g, k, geom)?, split_heads(g, v, geom)?])
}

fn output(g: &mut Graph, heads_out: Var, vars: &AttentionVars, geom: &AttentionGeometry) -> Result<Var> {
    let merged = merge_heads(g, heads_out, geom)?;
    project(g, merged, vars.wo, vars.biases.map(|b| b[3]))
}

/// Multi-head dot-product attention: per head
/// `softmax(Q·Kᵀ/√d_head)·V`, heads concatenated and projected by `W_o`.
pub fn standard_attention(g: &mut Graph, x: Var, vars: &AttentionVars, geom: &AttentionGeometry) -> Result<Var> {
    probe::begin_layer();
    let [q, k, v] = qkv(g, x, vars, geom)?;
    let (l, dh) = (geom.tokens(), geom.d_head());
    let kt = g.permute(k, &[0, 2, 1])?;
    let raw = g.matmul(q, kt)?;
    probe::record_scores(g.value(raw).numel());
    probe::record_score_flops(probe::matmul_flops(geom.heads, l, dh, l));
    let scores = g.scale(raw, 1.0 / (dh as f64).sqrt());
    let weights = g.softmax_rows(scores)?;
    let out = g.matmul(weights, v)?;
    probe::record_apply_flops(probe::matmul_flops(geom.heads, l, l, dh));
    let y = output(g, out, vars, geom)?;
    probe::end_layer();
    Ok(y)
}

/// Row and column alignment scores from `heads×h×w×d_head` queries and keys.
///
/// `A[y1, y2] = ⟨q[y1, :, :], k[y2, :, :]⟩ / √(w·d_head)` and
/// `B[x1, x2] = ⟨q[:, x1, :], k[:, x2, :]⟩ / √(h·d_head)`, per head.
pub fn coupling_scores_var(g: &mut Graph, q: Var, k: Var) -> Result<(Var, Var)> {
    let qs = g.shape(q).to_vec();
    if qs.len() != 4 || g.shape(k) != qs.as_slice() {
        return Err(Error::shape("coupling_scores", format!("q {:?}, k {:?}", qs, g.shape(k))));
    }
    let (heads, h, w, dh) = (qs[0], qs[1], qs[2], qs[3]);

    let qa = g.reshape(q, &[heads, h, w * dh])?;
    let ka = g.reshape(k, &[heads, h, w * dh])?;
    let kat = g.permute(ka, &[0, 2, 1])?;
    let a_raw = g.matmul(qa, kat)?;
    let a = g.scale(a_raw, 1.0 / ((w * dh) as f64).sqrt());

    let qt = g.permute(q, &[0, 2, 1, 3])?;
    let kt = g.permute(k, &[0, 2, 1, 3])?;
    let qb = g.reshape(qt, &[heads, w, h * dh])?;
    let kb = g.reshape(kt, &[heads, w, h * dh])?;
    let kbt = g.permute(kb, &[0, 2, 1])?;
    let b_raw = g.matmul(qb, kbt)?;
    let b = g.scale(b_raw, 1.0 / ((h * dh) as f64).sqrt());

    probe::record_scores(heads * (h * h + w * w));
    probe::record_score_flops(probe::matmul_flops(heads, h, w * dh, h) + probe::matmul_flops(heads, w, h * dh, w));
    Ok((a, b))
}

/// Tensor-level [`coupling_scores_var`]: returns `(A, B)` with shapes
/// `heads×h×h` and `heads×w×w`.
pub fn coupling_scores(q: &Tensor, k: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let (qv, kv) = (g.constant(q.clone()), g.constant(k.clone()));
    let (a, b) = coupling_scores_var(&mut g, qv, kv)?;
    Ok((g.value(a).clone(), g.value(b).clone()))
}

/// Applies `left·V_c·rightᵀ` to every channel `c` of `v` (`heads×h×w×d_head`)
/// with per-head `left: heads×h×h` and `right: heads×w×w`.
pub fn coupled_apply(g: &mut Graph, left: Var, right: Var, v: Var) -> Result<Var> {
    let vs = g.shape(v).to_vec();
    if vs.len() != 4 {
        return Err(Error::shape("coupled_apply", format!("v {vs:?}")));
    }
    let (heads, h, w, dh) = (vs[0], vs[1], vs[2], vs[3]);
    if g.shape(left) != [heads, h, h] || g.shape(right) != [heads, w, w] {
        return Err(Error::shape(
            "coupled_apply",
            format!("left {:?}, right {:?}, v {vs:?}", g.shape(left), g.shape(right)),
        ));
    }
    // Height mixing: left · V viewed as h × (w·d_head).
    let vr = g.reshape(v, &[heads, h, w * dh])?;
    let mixed_h = g.matmul(left, vr)?;
    // Width mixing: bring the width axis to the front and multiply by right.
    let m4 = g.reshape(mixed_h, &[heads, h, w, dh])?;
    let mt = g.permute(m4, &[0, 2, 1, 3])?;
    let mr = g.reshape(mt, &[heads, w, h * dh])?;
    let mixed_w = g.matmul(right, mr)?;
    let back = g.reshape(mixed_w, &[heads, w, h, dh])?;
    probe::record_apply_flops(probe::matmul_flops(heads, h, h, w * dh) + probe::matmul_flops(heads, w, w, h * dh));
    g.permute(back, &[0, 2, 1, 3])
}

fn coupled_scores_softmaxed(
    g: &mut Graph,
    q: Var,
    k: Var,
    geom: &AttentionGeometry,
) -> Result<(Var, Var)> {
    let grid = [geom.heads, geom.h, geom.w, geom.d_head()];
    let q4 = g.reshape(q, &grid)?;
    let k4 = g.reshape(k, &grid)?;
    let (a, b) = coupling_scores_var(g, q4, k4)?;
    Ok((g.softmax_rows(a)?, g.softmax_rows(b)?))
}

/// Coupled attention via `row(softmax(A)·V·softmax(B)ᵀ)`; memory for scores
/// is `heads·(h² + w²)`.
pub fn coupled_attention_fast(g: &mut Graph, x: Var, vars: &AttentionVars, geom: &AttentionGeometry) -> Result<Var> {
    probe::begin_layer();
    let [q, k, v] = qkv(g, x, vars, geom)?;
    let (sa, sb) = coupled_scores_softmaxed(g, q, k, geom)?;
    let v4 = g.reshape(v, &[geom.heads, geom.h, geom.w, geom.d_head()])?;
    let mixed = coupled_apply(g, sa, sb, v4)?;
    let flat = g.reshape(mixed, &[geom.heads, geom.tokens(), geom.d_head()])?;
    let y = output(g, flat, vars, geom)?;
    probe::end_layer();
    Ok(y)
}

/// Coupled attention by materializing `softmax(A) ⊗ softmax(B)` per head and
/// multiplying it into each channel's row-vectorized `h×w` slice of `V`.
pub fn coupled_attention_explicit(
    g: &mut Graph,
    x: Var,
    vars: &AttentionVars,
    geom: &AttentionGeometry,
) -> Result<Var> {
    let l = geom.tokens();
    if l > EXPLICIT_MAX_TOKENS {
        return Err(Error::Invalid(format!(
            "explicit coupled attention limited to h*w <= {EXPLICIT_MAX_TOKENS}, got {l}"
        )));
    }
    probe::begin_layer();
    let [q, k, v] = qkv(g, x, vars, geom)?;
    let (sa, sb) = coupled_scores_softmaxed(g, q, k, geom)?;
    let dh = geom.d_head();
    let mut per_head = Vec::with_capacity(geom.heads);
    for head in 0..geom.heads {
        let a = g.slice_axis(sa, 0, head, head + 1)?;
        let a = g.reshape(a, &[geom.h, geom.h])?;
        let b = g.slice_axis(sb, 0, head, head + 1)?;
        let b = g.reshape(b, &[geom.w, geom.w])?;
        let map = g.kron(a, b)?;
        probe::record_scores(l * l);
        // Column c of this L×d_head slice is row(V_c) in raster order.
        let vh = g.slice_axis(v, 0, head, head + 1)?;
        let vh = g.reshape(vh, &[l, dh])?;
        let oh = g.matmul(map, vh)?;
        per_head.push(g.reshape(oh, &[1, l, dh])?);
    }
    let stacked = g.concat(&per_head, 0)?;
    let y = output(g, stacked, vars, geom)?;
    probe::end_layer();
    Ok(y)
}

pub fn attend(
    g: &mut Graph,
    kind: AttentionKind,
    x: Var,
    vars: &AttentionVars,
    geom: &AttentionGeometry,
) -> Result<Var> {
    match kind {
        AttentionKind::Standard => standard_attention(g, x, vars, geom),
        AttentionKind::CoupledFast => coupled_attention_fast(g, x, vars, geom),
        AttentionKind::CoupledExplicit => coupled_attention_explicit(g, x, vars, geom),
    }
}

/// `row(a·x·bᵀ)`, which equals `kron(a, b)·row(x)`.
pub fn lemma1_apply(a: &Tensor, b: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (xs, as_, bs) = (x.shape(), a.shape(), b.shape());
    if xs.len() != 2 || as_ != [xs[0], xs[0]] || bs != [xs[1], xs[1]] {
        return Err(Error::shape("lemma1_apply", format!("a {as_:?}, b {bs:?}, x {xs:?}")));
    }
    a.matmul(x)?.matmul(&b.transpose2d()?)?.row_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::fd_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn random_params(geom: AttentionGeometry, rng: &mut ChaCha8Rng) -> CouplingAttentionParams {
        let d = geom.d;
        CouplingAttentionParams {
            wq: random(&[d, d], rng),
            wk: random(&[d, d], rng),
            wv: random(&[d, d], rng),
            wo: random(&[d, d], rng),
            biases: None,
            geometry: geom,
        }
    }

    fn run(kind: AttentionKind, x: &Tensor, params: &CouplingAttentionParams) -> Tensor {
        let mut g = Graph::new();
        let vars = params.bind(&mut g);
        let xv = g.constant(x.clone());
        let y = attend(&mut g, kind, xv, &vars, &params.geometry).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn raster_examples() {
        assert_eq!(raster_index(0, 0, 4, 5).unwrap(), 0);
        assert_eq!(raster_index(3, 2, 4, 5).unwrap(), 13);
        assert!(raster_index(5, 0, 4, 5).is_err());
        assert!(raster_index(0, 4, 4, 5).is_err());
        for i in 0..49 {
            let (x, y) = raster_coords(i, 7, 7).unwrap();
            assert_eq!(raster_index(x, y, 7, 7).unwrap(), i);
        }
        assert!(raster_coords(49, 7, 7).is_err());
    }

    #[test]
    fn geometry_validation() {
        assert!(AttentionGeometry::new(2, 2, 6, 4).is_err());
        assert!(AttentionGeometry::new(0, 2, 4, 1).is_err());
        assert_eq!(AttentionGeometry::new(3, 5, 8, 2).unwrap().tokens(), 15);
    }

    #[test]
    fn standard_single_token_ignores_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let geom = AttentionGeometry::new(1, 1, 4, 2).unwrap();
        let p = random_params(geom, &mut rng);
        let x = random(&[1, 4], &mut rng);
        let y = run(AttentionKind::Standard, &x, &p);
        let expect = x.matmul(&p.wv).unwrap().matmul(&p.wo).unwrap();
        assert!(y.max_abs_diff(&expect).unwrap() < 1e-14);
    }

    #[test]
    fn standard_identical_keys_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let geom = AttentionGeometry::new(2, 3, 4, 1).unwrap();
        let mut p = random_params(geom, &mut rng);
        p.wk = Tensor::zeros(&[4, 4]);
        p.wo = Tensor::eye(4);
        let x = random(&[6, 4], &mut rng);
        let y = run(AttentionKind::Standard, &x, &p);
        let v = x.matmul(&p.wv).unwrap();
        for j in 0..4 {
            let mean = (0..6).map(|i| v.at2(i, j)).sum::<f64>() / 6.0;
            for i in 0..6 {
                assert!((y.at2(i, j) - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn standard_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let geom = AttentionGeometry::new(2, 2, 4, 1).unwrap();
        let p = random_params(geom, &mut rng);
        let x = random(&[4, 4], &mut rng);
        let y = run(AttentionKind::Standard, &x, &p);

        let (q, k, v) = (x.matmul(&p.wq).unwrap(), x.matmul(&p.wk).unwrap(), x.matmul(&p.wv).unwrap());
        let mut o = vec![[0.0f64; 4]; 4];
        for (i, oi) in o.iter_mut().enumerate() {
            let mut s = [0.0f64; 4];
            for (j, sj) in s.iter_mut().enumerate() {
                *sj = (0..4).map(|c| q.at2(i, c) * k.at2(j, c)).sum::<f64>() / 2.0;
            }
            let z: f64 = s.iter().map(|v| v.exp()).sum();
            for (c, oic) in oi.iter_mut().enumerate() {
                *oic = (0..4).map(|j| s[j].exp() / z * v.at2(j, c)).sum();
            }
        }
        let expect = Tensor::from_rows(&o).matmul(&p.wo).unwrap();
        assert!(y.max_abs_diff(&expect).unwrap() <= 1e-12);
    }

    #[test]
    fn coupling_scores_closed_forms() {
        let ones = Tensor::ones(&[1, 2, 2, 1]);
        let (a, b) = coupling_scores(&ones, &ones).unwrap();
        let v = 2.0 / 2f64.sqrt();
        assert_eq!(a.shape(), &[1, 2, 2]);
        for t in [&a, &b] {
            assert!(t.data().iter().all(|x| (x - v).abs() < 1e-15));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random(&[1, 1, 3, 2], &mut rng);
        let k = random(&[1, 1, 3, 2], &mut rng);
        let (a, _) = coupling_scores(&q, &k).unwrap();
        let dot: f64 = q.data().iter().zip(k.data()).map(|(x, y)| x * y).sum();
        assert_eq!(a.shape(), &[1, 1, 1]);
        assert!((a.data()[0] - dot / 6f64.sqrt()).abs() < 1e-15);

        assert!(coupling_scores(&q, &Tensor::zeros(&[1, 3, 1, 2])).is_err());
    }

    #[test]
    fn swapping_q_and_k_transposes_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random(&[2, 3, 4, 2], &mut rng);
        let k = random(&[2, 3, 4, 2], &mut rng);
        let (a, b) = coupling_scores(&q, &k).unwrap();
        let (a2, b2) = coupling_scores(&k, &q).unwrap();
        assert!(a.permute(&[0, 2, 1]).unwrap().max_abs_diff(&a2).unwrap() < 1e-15);
        assert!(b.permute(&[0, 2, 1]).unwrap().max_abs_diff(&b2).unwrap() < 1e-15);
    }

    #[test]
    fn coupling_scores_match_index_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (heads, h, w, dh) = (2, 3, 4, 2);
        let q = random(&[heads, h, w, dh], &mut rng);
        let k = random(&[heads, h, w, dh], &mut rng);
        let (a, b) = coupling_scores(&q, &k).unwrap();
        for hd in 0..heads {
            for y1 in 0..h {
                for y2 in 0..h {
                    let mut s = 0.0;
                    for x in 0..w {
                        for c in 0..dh {
                            s += q.get(&[hd, y1, x, c]).unwrap() * k.get(&[hd, y2, x, c]).unwrap();
                        }
                    }
                    let expect = s / ((w * dh) as f64).sqrt();
                    assert!((a.get(&[hd, y1, y2]).unwrap() - expect).abs() < 1e-14);
                }
            }
            for x1 in 0..w {
                for x2 in 0..w {
                    let mut s = 0.0;
                    for y in 0..h {
                        for c in 0..dh {
                            s += q.get(&[hd, y, x1, c]).unwrap() * k.get(&[hd, y, x2, c]).unwrap();
                        }
                    }
                    let expect = s / ((h * dh) as f64).sqrt();
                    assert!((b.get(&[hd, x1, x2]).unwrap() - expect).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn explicit_on_single_cell_is_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let geom = AttentionGeometry::new(1, 1, 4, 2).unwrap();
        let p = random_params(geom, &mut rng);
        let x = random(&[1, 4], &mut rng);
        let y = run(AttentionKind::CoupledExplicit, &x, &p);
        let expect = x.matmul(&p.wv).unwrap().matmul(&p.wo).unwrap();
        assert!(y.max_abs_diff(&expect).unwrap() < 1e-14);
    }

    #[test]
    fn explicit_guard() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let geom = AttentionGeometry::new(17, 16, 2, 1).unwrap();
        let p = random_params(geom, &mut rng);
        let mut g = Graph::new();
        let vars = p.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[272, 2]));
        assert!(matches!(
            coupled_attention_explicit(&mut g, x, &vars, &geom),
            Err(Error::Invalid(_))
        ));
        // The fast path has no such limit.
        assert!(coupled_attention_fast(&mut g, x, &vars, &geom).is_ok());
    }

    #[test]
    fn fast_matches_explicit() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for case in 0..50 {
            let heads = [1, 2, 4][case % 3];
            let h = rng.random_range(1..=8);
            let w = rng.random_range(1..=8);
            let geom = AttentionGeometry::new(h, w, 2 * heads, heads).unwrap();
            let p = random_params(geom, &mut rng);
            let x = random(&[h * w, geom.d], &mut rng);
            let fast = run(AttentionKind::CoupledFast, &x, &p);
            let explicit = run(AttentionKind::CoupledExplicit, &x, &p);
            let err = fast.max_abs_diff(&explicit).unwrap();
            assert!(err <= 1e-10, "case {case}: {err:e}");
        }
    }

    #[test]
    fn raw_identity_scores_leave_values_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (heads, h, w, dh) = (2, 3, 5, 2);
        let v = random(&[heads, h, w, dh], &mut rng);
        let eye = |n: usize| Tensor::concat(&vec![&Tensor::eye(n).reshape(&[1, n, n]).unwrap(); heads], 0).unwrap();
        let mut g = Graph::new();
        let (a, b, vv) = (g.constant(eye(h)), g.constant(eye(w)), g.constant(v.clone()));
        let out = coupled_apply(&mut g, a, b, vv).unwrap();
        assert_eq!(g.value(out), &v);
    }

    #[test]
    fn score_storage_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let geom = AttentionGeometry::new(14, 14, 4, 1).unwrap();
        let p = random_params(geom, &mut rng);
        let x = random(&[196, 4], &mut rng);
        probe::enable();
        run(AttentionKind::CoupledFast, &x, &p);
        assert_eq!(probe::snapshot().unwrap().0.score_elements, 392);
        probe::enable();
        run(AttentionKind::Standard, &x, &p);
        assert_eq!(probe::snapshot().unwrap().0.score_elements, 38416);
        probe::disable();
    }

    #[test]
    fn coupled_fast_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let geom = AttentionGeometry::new(2, 2, 8, 2).unwrap();
        let p = random_params(geom, &mut rng);
        let x = random(&[4, 8], &mut rng);
        let err = fd_check(
            |g, xv| {
                let vars = p.bind(g);
                let y = coupled_attention_fast(g, xv, &vars, &geom)?;
                Ok(g.sum(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-5, "{err:e}");
    }

    #[test]
    fn lemma1_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random(&[3, 4], &mut rng);
        let id = lemma1_apply(&Tensor::eye(3), &Tensor::eye(4), &x).unwrap();
        assert_eq!(id, x.row_vec().unwrap());
        let swap = Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0]]);
        let x = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let r = lemma1_apply(&swap, &Tensor::eye(2), &x).unwrap();
        assert_eq!(r.data(), &[3.0, 4.0, 1.0, 2.0]);
        assert!(lemma1_apply(&swap, &Tensor::eye(3), &x).is_err());
    }

    #[test]
    fn lemma1_matches_kron() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..200 {
            let h = rng.random_range(1..=10);
            let w = rng.random_range(1..=10);
            let a = random(&[h, h], &mut rng);
            let b = random(&[w, w], &mut rng);
            let x = random(&[h, w], &mut rng);
            let fast = lemma1_apply(&a, &b, &x).unwrap();
            let slow = a.kron(&b).unwrap().matmul(&x.row_vec().unwrap().reshape(&[h * w, 1]).unwrap()).unwrap();
            let err = fast.max_rel_diff(&slow.reshape(&[h * w]).unwrap()).unwrap();
            assert!(err <= 1e-12, "{err:e}");
        }
    }
}
