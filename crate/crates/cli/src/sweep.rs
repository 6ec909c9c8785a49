//! Sweep plans: a cross-product of plan axes minus explicit exclusions.

use serde::Deserialize;

use mxquant::formats::{Format, Scheme};
use mxquant::harness::QuantPlan;

use crate::config::RunFields;
use crate::Failure;

/// Values to sweep per axis. An absent axis takes the single base value.
/// `formats` pairs each entry with itself for activations and weights; it
/// cannot be combined with the separate `act_format`/`wgt_format` axes.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub formats: Option<Vec<Format>>,
    pub act_format: Option<Vec<Format>>,
    pub wgt_format: Option<Vec<Format>>,
    pub scheme: Option<Vec<Scheme>>,
    pub sq_aw: Option<Vec<bool>>,
    pub sq_aa: Option<Vec<bool>>,
    pub gptq: Option<Vec<bool>>,
    pub alpha: Option<Vec<f64>>,
}

/// Drops every cell whose values equal all of the fields that are set.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Exclusion {
    pub act_format: Option<Format>,
    pub wgt_format: Option<Format>,
    pub scheme: Option<Scheme>,
    pub sq_aw: Option<bool>,
    pub sq_aa: Option<bool>,
    pub gptq: Option<bool>,
    pub alpha: Option<f64>,
}

impl Exclusion {
    fn matches(&self, plan: &QuantPlan) -> bool {
        fn hit<T: PartialEq>(want: &Option<T>, got: &T) -> bool {
            want.as_ref().is_none_or(|w| w == got)
        }
        hit(&self.act_format, &plan.linear.act)
            && hit(&self.wgt_format, &plan.linear.wgt)
            && hit(&self.scheme, &plan.scheme)
            && hit(&self.sq_aw, &plan.sq_aw)
            && hit(&self.sq_aa, &plan.sq_aa)
            && hit(&self.gptq, &plan.gptq)
            && hit(&self.alpha, &plan.alpha)
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPlan {
    /// Shared settings, with the same keys as a run config file.
    #[serde(default)]
    pub base: RunFields,
    #[serde(default)]
    pub grid: Grid,
    #[serde(default)]
    pub exclude: Vec<Exclusion>,
}

fn axis<T: Clone>(values: &Option<Vec<T>>, base: T, name: &str) -> Result<Vec<T>, Failure> {
    match values {
        Some(v) if v.is_empty() => Err(Failure::usage(format!("sweep axis {name} is empty"))),
        Some(v) => Ok(v.clone()),
        None => Ok(vec![base]),
    }
}

impl SweepPlan {
    /// Cells in plan order. Axes nest in the field order of [`Grid`], with
    /// format pairs outermost.
    pub fn cells(&self, base: &QuantPlan) -> Result<Vec<QuantPlan>, Failure> {
        let g = &self.grid;
        let pairs: Vec<(Format, Format)> = match (&g.formats, &g.act_format, &g.wgt_format) {
            (Some(_), Some(_), _) | (Some(_), _, Some(_)) => {
                return Err(Failure::usage(
                    "sweep grid sets formats together with act_format or wgt_format",
                ))
            }
            (Some(_), None, None) => axis(&g.formats, base.linear.act, "formats")?
                .into_iter()
                .map(|f| (f, f))
                .collect(),
            _ => {
                let acts = axis(&g.act_format, base.linear.act, "act_format")?;
                let wgts = axis(&g.wgt_format, base.linear.wgt, "wgt_format")?;
                acts.iter().flat_map(|&a| wgts.iter().map(move |&w| (a, w))).collect()
            }
        };
        let schemes = axis(&g.scheme, base.scheme, "scheme")?;
        let aws = axis(&g.sq_aw, base.sq_aw, "sq_aw")?;
        let aas = axis(&g.sq_aa, base.sq_aa, "sq_aa")?;
        let gptqs = axis(&g.gptq, base.gptq, "gptq")?;
        let alphas = axis(&g.alpha, base.alpha, "alpha")?;

        let mut cells = Vec::new();
        for &(act, wgt) in &pairs {
            for &scheme in &schemes {
                for &sq_aw in &aws {
                    for &sq_aa in &aas {
                        for &gptq in &gptqs {
                            for &alpha in &alphas {
                                let plan = QuantPlan {
                                    scheme,
                                    sq_aw,
                                    sq_aa,
                                    gptq,
                                    alpha,
                                    b1: base.b1,
                                    b2: base.b2,
                                    rederive_qparams: base.rederive_qparams,
                                    ..QuantPlan::uniform(act, wgt)
                                };
                                if self.exclude.iter().any(|e| e.matches(&plan)) {
                                    continue;
                                }
                                plan.validate()
                                    .map_err(|e| Failure::usage(format!("sweep cell {}: {e}", label(&plan))))?;
                                cells.push(plan);
                            }
                        }
                    }
                }
            }
        }
        if cells.is_empty() {
            return Err(Failure::usage("sweep plan has no cells after exclusions"));
        }
        Ok(cells)
    }
}

/// Human-readable row label such as `W=MXINT4-16 A=MXINT8-16 +sq_aw +gptq`.
pub fn label(plan: &QuantPlan) -> String {
    let (act, wgt) = (plan.linear.act, plan.linear.wgt);
    let mut s = format!("W={wgt} A={act}");
    if matches!(act, Format::Int(_)) || matches!(wgt, Format::Int(_)) {
        s.push_str(&format!(" {}", plan.scheme));
    }
    for (on, tag) in [(plan.sq_aw, "sq_aw"), (plan.sq_aa, "sq_aa"), (plan.gptq, "gptq")] {
        if on {
            s.push_str(&format!(" +{tag}"));
        }
    }
    if (plan.sq_aw || plan.sq_aa) && plan.alpha != mxquant::smooth::DEFAULT_ALPHA {
        s.push_str(&format!(" alpha={}", plan.alpha));
    }
    s
}
