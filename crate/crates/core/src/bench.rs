//! Attention cost accounting: closed-form score storage and FLOPs, the same
//! numbers measured by running a forward pass with the probe enabled, and
//! a CSV sweep over image sizes.
//!
//! Per attention layer, with `L = h·w` and one multiply-add counted as 2:
//!
//! | mechanism | score elements  | score FLOPs                     | apply FLOPs              |
//! |-----------|-----------------|---------------------------------|--------------------------|
//! | standard  | `heads·L²`      | `2·heads·L²·d_head`             | `2·heads·L²·d_head`      |
//! | coupled   | `heads·(h²+w²)` | `2·heads·d_head·(h²·w + w²·h)`  | `2·d·(h²·w + w²·h)`      |

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::attention::{AttentionGeometry, AttentionKind};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::probe;
use crate::tensor::Tensor;

pub const CSV_HEADER: &str = "mechanism,H,W,h,w,d,heads,score_elements,flops_scores,flops_apply,params";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mechanism {
    Standard,
    Coupled,
}

impl Mechanism {
    pub const ALL: [Mechanism; 2] = [Mechanism::Standard, Mechanism::Coupled];

    pub fn attention_kind(self) -> AttentionKind {
        match self {
            Mechanism::Standard => AttentionKind::Standard,
            Mechanism::Coupled => AttentionKind::CoupledFast,
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mechanism::Standard => "standard",
            Mechanism::Coupled => "coupled",
        })
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Mechanism::Standard),
            "coupled" => Ok(Mechanism::Coupled),
            other => Err(Error::Config(format!("unknown mechanism `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub mechanism: Mechanism,
    pub geometry: AttentionGeometry,
    pub score_elements: u64,
    pub flops_scores: u64,
    pub flops_apply: u64,
    /// Projection parameters of one attention layer (`4d²`).
    pub params: u64,
    pub measured_peak_elements: Option<u64>,
    pub measured_flops_scores: Option<u64>,
    pub measured_flops_apply: Option<u64>,
}

pub fn analytic_cost(mechanism: Mechanism, geometry: AttentionGeometry) -> CostReport {
    let AttentionGeometry { h, w, d, heads } = geometry;
    let (h, w, d, heads) = (h as u64, w as u64, d as u64, heads as u64);
    let dh = d / heads;
    let l = h * w;
    let (score_elements, flops_scores, flops_apply) = match mechanism {
        Mechanism::Standard => (heads * l * l, 2 * heads * l * l * dh, 2 * heads * l * l * dh),
        Mechanism::Coupled => {
            let mix = h * h * w + w * w * h;
            (heads * (h * h + w * w), 2 * heads * dh * mix, 2 * d * mix)
        }
    };
    CostReport {
        mechanism,
        geometry,
        score_elements,
        flops_scores,
        flops_apply,
        params: 4 * d * d,
        measured_peak_elements: None,
        measured_flops_scores: None,
        measured_flops_apply: None,
    }
}

/// Runs one forward pass of `config` (with its attention kind replaced by
/// `mechanism`) on a `channels×height×width` input and records the largest
/// attention layer's score storage and FLOPs.
pub fn measured_cost(mechanism: Mechanism, config: &ModelConfig, input: [usize; 3]) -> Result<CostReport> {
    let [channels, height, width] = input;
    let cfg = ModelConfig {
        in_channels: channels,
        img_h: height,
        img_w: width,
        attention: mechanism.attention_kind(),
        ..config.clone()
    };
    if cfg.depth == 0 {
        return Err(Error::Config("a model without encoder blocks has no attention cost".into()));
    }
    let model = Model::new(cfg, 0)?;
    let was_enabled = probe::is_enabled();
    probe::enable();
    let run = model.predict(&Tensor::zeros(&input));
    let snap = probe::snapshot();
    if !was_enabled {
        probe::disable();
    }
    run?;
    let (peak, _) = snap?;
    let mut report = analytic_cost(mechanism, model.geometry());
    report.measured_peak_elements = Some(peak.score_elements);
    report.measured_flops_scores = Some(peak.flops_scores);
    report.measured_flops_apply = Some(peak.flops_apply);
    Ok(report)
}

/// One CSV row of a sweep: the input size, the analytic layer cost and the
/// full model's parameter count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SweepRow {
    pub img_h: usize,
    pub img_w: usize,
    pub cost: CostReport,
    pub model_params: u64,
}

impl SweepRow {
    pub fn csv_row(&self) -> String {
        let g = self.cost.geometry;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.cost.mechanism,
            self.img_h,
            self.img_w,
            g.h,
            g.w,
            g.d,
            g.heads,
            self.cost.score_elements,
            self.cost.flops_scores,
            self.cost.flops_apply,
            self.model_params
        )
    }
}

/// Analytic costs for every `(size, mechanism)` pair in grid order, keeping
/// the stem and widths of `base`.
pub fn sweep(sizes: &[(usize, usize)], mechanisms: &[Mechanism], base: &ModelConfig) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(sizes.len() * mechanisms.len());
    for &(img_h, img_w) in sizes {
        for &mechanism in mechanisms {
            let cfg = ModelConfig {
                img_h,
                img_w,
                attention: mechanism.attention_kind(),
                ..base.clone()
            };
            cfg.validate()?;
            rows.push(SweepRow {
                img_h,
                img_w,
                cost: analytic_cost(mechanism, cfg.geometry()?),
                model_params: cfg.analytic_param_count()? as u64,
            });
        }
    }
    Ok(rows)
}

pub fn write_csv<W: Write>(out: &mut W, rows: &[SweepRow]) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

/// The often-quoted closed form `4(hw)²d + hw·(4 − hw − d − 8√(hw))` for
/// the FLOPs coupled attention saves. Shown next to the counted difference
/// for comparison only; it does not follow from the counts in this module.
pub fn quoted_flops_saving(h: usize, w: usize, d: usize) -> f64 {
    let l = (h * w) as f64;
    let d = d as f64;
    4.0 * l * l * d + l * (4.0 - l - d - 8.0 * l.sqrt())
}

/// Counted FLOPs difference (standard − coupled) for one layer.
pub fn counted_flops_saving(geometry: AttentionGeometry) -> i128 {
    let total = |m| {
        let c = analytic_cost(m, geometry);
        (c.flops_scores + c.flops_apply) as i128
    };
    total(Mechanism::Standard) - total(Mechanism::Coupled)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(h: usize, w: usize, d: usize, heads: usize) -> AttentionGeometry {
        AttentionGeometry::new(h, w, d, heads).unwrap()
    }

    #[test]
    fn degenerate_grid() {
        // One token: a single standard score, but coupled keeps a 1×1 A and a 1×1 B.
        assert_eq!(analytic_cost(Mechanism::Standard, geom(1, 1, 8, 1)).score_elements, 1);
        assert_eq!(analytic_cost(Mechanism::Coupled, geom(1, 1, 8, 1)).score_elements, 2);
        let cfg = ModelConfig {
            img_h: 4,
            img_w: 4,
            ..ModelConfig::default()
        };
        for m in Mechanism::ALL {
            let r = measured_cost(m, &cfg, [1, 4, 4]).unwrap();
            assert_eq!(r.geometry.tokens(), 1);
            assert_eq!(r.measured_peak_elements, Some(r.score_elements));
        }
    }

    #[test]
    fn fourteen_by_fourteen_ratio() {
        let s = analytic_cost(Mechanism::Standard, geom(14, 14, 8, 1));
        let c = analytic_cost(Mechanism::Coupled, geom(14, 14, 8, 1));
        assert_eq!((s.score_elements, c.score_elements), (38416, 392));
        assert_eq!(s.score_elements / c.score_elements, 98);
    }

    #[test]
    fn storage_ratio_formula() {
        for (h, w) in [(2, 3), (7, 7), (5, 11), (16, 4)] {
            let s = analytic_cost(Mechanism::Standard, geom(h, w, 8, 2));
            let c = analytic_cost(Mechanism::Coupled, geom(h, w, 8, 2));
            let l = (h * w) as u64;
            assert_eq!(c.score_elements * l * l, s.score_elements * (h * h + w * w) as u64);
        }
    }

    #[test]
    fn measured_matches_analytic() {
        let base = ModelConfig::default();
        for heads in [1, 2, 4] {
            let cfg = ModelConfig { heads, ..base.clone() };
            for m in Mechanism::ALL {
                let r = measured_cost(m, &cfg, [1, 28, 28]).unwrap();
                assert_eq!(r.measured_peak_elements, Some(r.score_elements), "{m} heads {heads}");
                assert_eq!(r.measured_flops_scores, Some(r.flops_scores), "{m} heads {heads}");
                assert_eq!(r.measured_flops_apply, Some(r.flops_apply), "{m} heads {heads}");
            }
        }
        let c = measured_cost(Mechanism::Coupled, &ModelConfig { heads: 4, ..base.clone() }, [1, 28, 28]).unwrap();
        assert_eq!(c.measured_peak_elements, Some(392));
        let s = measured_cost(Mechanism::Standard, &ModelConfig { heads: 4, ..base }, [1, 28, 28]).unwrap();
        assert_eq!(s.measured_peak_elements, Some(9604));
        assert!(!probe::is_enabled());
    }

    #[test]
    fn sweep_scaling_laws() {
        let sizes = [(32, 32), (64, 64), (128, 128), (256, 256)];
        let rows = sweep(&sizes, &Mechanism::ALL, &ModelConfig::default()).unwrap();
        assert_eq!(rows.len(), 8);
        let col = |m| rows.iter().filter(|r| r.cost.mechanism == m).map(|r| r.cost.score_elements).collect::<Vec<_>>();
        let (s, c) = (col(Mechanism::Standard), col(Mechanism::Coupled));
        for i in 1..4 {
            assert_eq!(s[i], 16 * s[i - 1]);
            assert_eq!(c[i], 4 * c[i - 1]);
            assert!((c[i] as f64 / s[i] as f64) < (c[i - 1] as f64 / s[i - 1] as f64));
        }
        for pair in rows.chunks(2) {
            assert_eq!(pair[0].model_params, pair[1].model_params);
        }
        let mut buf = Vec::new();
        write_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 9);
        assert!(text.lines().nth(1).unwrap().starts_with("standard,32,32,8,8,32,2,"));
    }

    #[test]
    fn quoted_saving_is_only_reported() {
        let g = geom(14, 14, 64, 1);
        assert!(quoted_flops_saving(14, 14, 64).is_finite());
        assert!(counted_flops_saving(g) > 0);
    }
}
