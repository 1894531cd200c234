//! Seeded property suites behind `couplformer verify`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    attend, coupling_scores, lemma1_apply, AttentionGeometry, AttentionKind, CouplingAttentionParams,
};
use crate::autograd::{fd_check, Graph, Var};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, PosEmbedding, StemStage};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Lemma1,
    Eq6,
    Kron,
    Stochastic,
    Grad,
    All,
}

impl Suite {
    pub const EACH: [Suite; 5] = [Suite::Lemma1, Suite::Eq6, Suite::Kron, Suite::Stochastic, Suite::Grad];
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Lemma1 => "lemma1",
            Suite::Eq6 => "eq6",
            Suite::Kron => "kron",
            Suite::Stochastic => "stochastic",
            Suite::Grad => "grad",
            Suite::All => "all",
        })
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lemma1" => Ok(Suite::Lemma1),
            "eq6" => Ok(Suite::Eq6),
            "kron" => Ok(Suite::Kron),
            "stochastic" => Ok(Suite::Stochastic),
            "grad" => Ok(Suite::Grad),
            "all" => Ok(Suite::All),
            other => Err(Error::Config(format!("unknown suite `{other}`"))),
        }
    }
}

/// Outcome of one property over all its cases.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub suite: Suite,
    pub property: &'static str,
    pub cases: usize,
    pub worst: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}/{} cases={} worst={:.3e} tol={:.0e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.suite,
            self.property,
            self.cases,
            self.worst,
            self.tolerance
        )
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

pub fn run(suite: Suite, seed: u64) -> Result<Vec<Check>> {
    match suite {
        Suite::Lemma1 => lemma1(seed).map(|c| vec![c]),
        Suite::Eq6 => fast_matches_explicit(seed).map(|c| vec![c]),
        Suite::Kron => kron_element_law(seed).map(|c| vec![c]),
        Suite::Stochastic => row_stochastic(seed).map(|c| vec![c]),
        Suite::Grad => Ok(vec![block_gradients(seed)?, model_gradients(seed)?]),
        Suite::All => {
            let mut all = Vec::new();
            for s in Suite::EACH {
                all.extend(run(s, seed)?);
            }
            Ok(all)
        }
    }
}

/// `row(a·x·bᵀ)` against `kron(a, b)·row(x)`; relative to the largest entry.
pub fn lemma1(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (h, w) = (rng.random_range(1..=10), rng.random_range(1..=10));
        let a = random(&[h, h], &mut rng, 1.0);
        let b = random(&[w, w], &mut rng, 1.0);
        let x = random(&[h, w], &mut rng, 1.0);
        let fast = lemma1_apply(&a, &b, &x)?;
        let oracle = a.kron(&b)?.matmul(&x.row_vec()?.reshape(&[h * w, 1])?)?.reshape(&[h * w])?;
        worst = worst.max(fast.max_rel_diff(&oracle)?);
    }
    Ok(Check {
        suite: Suite::Lemma1,
        property: "row(AXB^T)=(A(x)B)row(X)",
        cases: 200,
        worst,
        tolerance: 1e-12,
    })
}

pub fn fast_matches_explicit(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let d = heads * rng.random_range(1..=4);
        let geom = AttentionGeometry::new(h, w, d, heads)?;
        let mut p = CouplingAttentionParams::init(geom, rng.random(), &mut rng);
        for t in [&mut p.wq, &mut p.wk, &mut p.wv, &mut p.wo] {
            *t = random(t.shape(), &mut rng, 1.0);
        }
        let x = random(&[h * w, d], &mut rng, 1.0);
        let out = |kind| -> Result<Tensor> {
            let mut g = Graph::new();
            let vars = p.bind(&mut g);
            let xv = g.constant(x.clone());
            let y = attend(&mut g, kind, xv, &vars, &geom)?;
            Ok(g.value(y).clone())
        };
        let diff = out(AttentionKind::CoupledFast)?.max_abs_diff(&out(AttentionKind::CoupledExplicit)?)?;
        worst = worst.max(diff);
    }
    Ok(Check {
        suite: Suite::Eq6,
        property: "fast_vs_explicit_block",
        cases: 50,
        worst,
        tolerance: 1e-10,
    })
}

pub fn kron_element_law(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for h in 1..=6 {
        for w in 1..=6 {
            let a = random(&[h, h], &mut rng, 1.0);
            let b = random(&[w, w], &mut rng, 1.0);
            let k = a.kron(&b)?;
            for i in 0..h * w {
                for j in 0..h * w {
                    let law = a.at2(i / w, j / w) * b.at2(i % w, j % w);
                    worst = worst.max((k.at2(i, j) - law).abs());
                    cases += 1;
                }
            }
        }
    }
    Ok(Check {
        suite: Suite::Kron,
        property: "element_law",
        cases,
        worst,
        tolerance: 1e-14,
    })
}

pub fn row_stochastic(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let dh = rng.random_range(1..=4);
        let q = random(&[1, h, w, dh], &mut rng, 2.0);
        let k = random(&[1, h, w, dh], &mut rng, 2.0);
        let (a, b) = coupling_scores(&q, &k)?;
        let sa = a.reshape(&[h, h])?.softmax_rows()?;
        let sb = b.reshape(&[w, w])?.softmax_rows()?;
        let map = sa.kron(&sb)?;
        for i in 0..h * w {
            let s: f64 = (0..h * w).map(|j| map.at2(i, j)).sum();
            worst = worst.max((s - 1.0).abs());
        }
    }
    Ok(Check {
        suite: Suite::Stochastic,
        property: "kron_of_softmaxes_rows_sum_to_1",
        cases: 50,
        worst,
        tolerance: 1e-12,
    })
}

/// Finite differences through one coupled attention block, w.r.t. its input.
pub fn block_gradients(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let geom = AttentionGeometry::new(rng.random_range(2..=4), rng.random_range(2..=4), 8, 2)?;
        let mut p = CouplingAttentionParams::init(geom, false, &mut rng);
        for t in [&mut p.wq, &mut p.wk, &mut p.wv, &mut p.wo] {
            *t = random(t.shape(), &mut rng, 1.0);
        }
        let x = random(&[geom.tokens(), geom.d], &mut rng, 1.0);
        let weights = random(&[geom.tokens(), geom.d], &mut rng, 1.0);
        let err = fd_check(
            |g, xv| {
                let vars = p.bind(g);
                let y = attend(g, AttentionKind::CoupledFast, xv, &vars, &geom)?;
                let wv = g.constant(weights.clone());
                let prod = g.mul(y, wv)?;
                Ok(g.sum(prod))
            },
            &x,
            1e-5,
        )?;
        worst = worst.max(err);
    }
    Ok(Check {
        suite: Suite::Grad,
        property: "coupled_block_fd",
        cases: 5,
        worst,
        tolerance: 1e-5,
    })
}

/// The two-block, `d = 16` configuration on `8×8` inputs used for
/// whole-model gradient checks.
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig {
        img_h: 8,
        img_w: 8,
        in_channels: 1,
        stem: vec![StemStage {
            out_channels: 16,
            stride: 1,
            pool: true,
        }],
        embed_dim: 16,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        pos_embedding: PosEmbedding::Learnable,
        num_classes: 3,
        attention: AttentionKind::CoupledFast,
        qkv_bias: false,
    }
}

/// A model with every parameter drawn uniformly from ±0.5 (LayerNorm scales
/// from 1 ± 0.5): init-scale weights leave most gradients below
/// finite-difference noise.
pub fn randomized_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    let mut model = Model::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let names = model.params().names().to_vec();
    for (name, t) in names.iter().zip(model.params_mut().tensors_mut()) {
        let offset = if name.ends_with("gamma") { 1.0 } else { 0.0 };
        *t = random(t.shape(), &mut rng, 0.5).add_scalar(offset);
    }
    Ok(model)
}

/// `fd_check` of the cross-entropy loss with respect to a random input image.
pub fn model_gradient_error(config: &ModelConfig, seed: u64) -> Result<f64> {
    let model = randomized_model(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x51));
    let image = random(&[config.in_channels, config.img_h, config.img_w], &mut rng, 1.0);
    let label = rng.random_range(0..config.num_classes);
    let params = model.params().tensors().to_vec();
    fd_check(
        |g, xv| {
            let bound: Vec<Var> = params.iter().map(|t| g.constant(t.clone())).collect();
            let logits = model.forward(g, &bound, xv)?;
            g.cross_entropy(logits, label)
        },
        &image,
        1e-5,
    )
}

pub fn model_gradients(seed: u64) -> Result<Check> {
    let cfg = gradcheck_model_config();
    let mut worst: f64 = 0.0;
    for case in 0..5 {
        worst = worst.max(model_gradient_error(&cfg, seed.wrapping_add(case))?);
    }
    Ok(Check {
        suite: Suite::Grad,
        property: "model_fd",
        cases: 5,
        worst,
        tolerance: 1e-4,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cheap_suites_pass() {
        for s in [Suite::Lemma1, Suite::Eq6, Suite::Kron, Suite::Stochastic] {
            for c in run(s, 0).unwrap() {
                assert!(c.passed(), "{c}");
            }
        }
    }

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::EACH.into_iter().chain([Suite::All]) {
            assert_eq!(s.to_string().parse::<Suite>().unwrap(), s);
        }
        assert!("bogus".parse::<Suite>().is_err());
    }

    #[test]
    fn failing_check_reports_fail() {
        let c = Check {
            suite: Suite::Kron,
            property: "p",
            cases: 1,
            worst: 1.0,
            tolerance: 0.5,
        };
        assert!(c.to_string().starts_with("FAIL kron/p"));
    }
}
