//! SmoothQuant: per-channel factors that migrate activation outliers into the
//! weights, applied as output-preserving rewrites of the model.

use std::collections::BTreeMap;

use crate::calibrate::ChannelAbsMax;
use crate::error::{Error, Result};
use crate::harness::model::{GptModel, Site};
use crate::nn::{LayerNorm, Linear};

/// Default migration strength.
pub const DEFAULT_ALPHA: f64 = 0.5;

/// Channel maxima below this are treated as this value, so dead channels
/// never divide by zero.
pub const ABSMAX_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct SmoothingFactors {
    s: Vec<f64>,
    alpha: f64,
}

impl SmoothingFactors {
    /// Wraps explicit factors, which must be positive and finite.
    pub fn new(s: Vec<f64>, alpha: f64) -> Result<Self> {
        if let Some((j, v)) = s.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Domain(format!("smoothing factor {j} is {v}")));
        }
        Ok(SmoothingFactors { s, alpha })
    }

    pub fn ones(n: usize) -> Self {
        SmoothingFactors {
            s: vec![1.0; n],
            alpha: DEFAULT_ALPHA,
        }
    }

    pub fn s(&self) -> &[f64] {
        &self.s
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.s
    }
}

/// `s_j = max|X_j|^α / max|W_j|^(1-α)`, with both maxima floored.
pub fn smoothing_factors(act_absmax: &[f64], wgt_absmax: &[f64], alpha: f64) -> Result<SmoothingFactors> {
    if act_absmax.len() != wgt_absmax.len() {
        return Err(Error::shape(format!(
            "{} activation channels but {} weight channels",
            act_absmax.len(),
            wgt_absmax.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("migration strength {alpha} outside [0, 1]")));
    }
    let s = act_absmax
        .iter()
        .zip(wgt_absmax)
        .map(|(&a, &w)| a.max(ABSMAX_FLOOR).powf(alpha) / w.max(ABSMAX_FLOOR).powf(1.0 - alpha))
        .collect();
    SmoothingFactors::new(s, alpha)
}

/// Where the divide-by-`s` of an activation-weight rewrite goes.
pub enum Producer<'a> {
    /// Folded into the normalization's gain and bias.
    LayerNorm(&'a mut LayerNorm),
    /// No foldable producer: the layer gets an explicit input divisor.
    None,
}

/// Scales the weight's input channels by `s` and divides the activation by
/// `s` upstream, leaving the full-precision output unchanged.
///
/// With `strict`, a missing foldable producer is a rewrite error instead of
/// an explicit divisor.
pub fn apply_aw_smoothing(
    layer: &mut Linear,
    s: &SmoothingFactors,
    producer: Producer<'_>,
    strict: bool,
) -> Result<()> {
    let n = layer.in_features();
    if s.len() != n {
        return Err(Error::shape(format!(
            "{} smoothing factors for {n} input channels",
            s.len()
        )));
    }
    match producer {
        Producer::LayerNorm(ln) => {
            if ln.dim() != n {
                return Err(Error::shape(format!("producer has {} channels, layer {n}", ln.dim())));
            }
            for ((g, b), f) in ln.gamma.iter_mut().zip(&mut ln.beta).zip(s.s()) {
                *g /= f;
                *b /= f;
            }
        }
        Producer::None if strict => {
            return Err(Error::Rewrite(format!(
                "layer with {n} inputs has no foldable producer for its smoothing divide"
            )));
        }
        Producer::None => {
            let div = layer.input_divisor.get_or_insert_with(|| vec![1.0; n]);
            div.iter_mut().zip(s.s()).for_each(|(d, f)| *d *= f);
        }
    }
    for r in 0..layer.weight.rows() {
        layer.weight.row_mut(r).iter_mut().zip(s.s()).for_each(|(w, f)| *w *= f);
    }
    Ok(())
}

/// Divides the query projection by `s` and multiplies the key projection by
/// `s`, so every attention score `q·k` is unchanged.
///
/// `s` covers either all `d_model` query channels or one head, in which case
/// it is shared by every head.
pub fn apply_aa_smoothing(qkv: &mut Linear, s: &SmoothingFactors, n_head: usize) -> Result<()> {
    let out = qkv.out_features();
    if !out.is_multiple_of(3) || n_head == 0 || !(out / 3).is_multiple_of(n_head) {
        return Err(Error::shape(format!(
            "{out} fused outputs do not split into {n_head} heads"
        )));
    }
    let d = out / 3;
    if s.len() != d && s.len() != d / n_head {
        return Err(Error::shape(format!(
            "{} smoothing factors for {d} channels in heads of {}",
            s.len(),
            d / n_head
        )));
    }
    let has_bias = !qkv.bias.is_empty();
    for r in 0..2 * d {
        let f = s.s()[(r % d) % s.len()];
        let row = qkv.weight.row_mut(r);
        if r < d {
            row.iter_mut().for_each(|w| *w /= f);
            if has_bias {
                qkv.bias[r] /= f;
            }
        } else {
            row.iter_mut().for_each(|w| *w *= f);
            if has_bias {
                qkv.bias[r] *= f;
            }
        }
    }
    Ok(())
}

/// Which rewrites to apply.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmoothOptions {
    /// Activation-weight rewrites of every block linear.
    pub aw: bool,
    /// Query-key rewrite inside attention.
    pub aa: bool,
    pub alpha: f64,
}

/// Applies the requested rewrites using calibrated channel maxima and
/// records each site's factors on the model. The language-model head is left
/// alone because its weight is the shared token embedding.
pub fn smooth_model(model: &mut GptModel, stats: &BTreeMap<Site, ChannelAbsMax>, opts: SmoothOptions) -> Result<()> {
    let lookup = |site: Site| {
        stats
            .get(&site)
            .ok_or_else(|| Error::Calibration(format!("no channel statistics for {site}")))
    };
    let n_head = model.config.n_head;
    let mut recorded = BTreeMap::new();
    for (l, block) in model.blocks.iter_mut().enumerate() {
        if opts.aw {
            for site in [Site::Qkv(l), Site::AttnProj(l), Site::Fc(l), Site::MlpProj(l)] {
                let st = lookup(site)?;
                let s = smoothing_factors(&st.act, &st.wgt, opts.alpha)?;
                match site {
                    Site::Qkv(_) => {
                        apply_aw_smoothing(&mut block.attn_qkv, &s, Producer::LayerNorm(&mut block.ln_1), true)?
                    }
                    Site::AttnProj(_) => apply_aw_smoothing(&mut block.attn_proj, &s, Producer::None, false)?,
                    Site::Fc(_) => apply_aw_smoothing(&mut block.fc, &s, Producer::LayerNorm(&mut block.ln_2), true)?,
                    _ => apply_aw_smoothing(&mut block.mlp_proj, &s, Producer::None, false)?,
                }
                recorded.insert(site, s.into_vec());
            }
        }
        if opts.aa {
            let st = lookup(Site::Qk(l))?;
            let s = smoothing_factors(&st.act, &st.wgt, opts.alpha)?;
            apply_aa_smoothing(&mut block.attn_qkv, &s, n_head)?;
            recorded.insert(Site::Qk(l), s.into_vec());
        }
    }
    model.smoothing.extend(recorded);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrate::{collect_channel_absmax, draw_samples};
    use crate::exec::Exec;
    use crate::harness::toy::{plant_outlier_channels, random_model, toy_config};
    use crate::nn::column_absmax;
    use crate::tensor::{Mat, Rng};

    fn rel_err(a: &Mat, b: &Mat) -> f64 {
        let num: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let den: f64 = b.data().iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    #[test]
    fn factor_examples() {
        assert_eq!(
            smoothing_factors(&[4.0, 4.0], &[4.0, 4.0], 0.5).unwrap().s(),
            &[1.0, 1.0]
        );
        assert_eq!(smoothing_factors(&[16.0], &[1.0], 0.5).unwrap().s(), &[4.0]);
        assert_eq!(smoothing_factors(&[3.0], &[2.0], 0.0).unwrap().s(), &[0.5]);
        assert!(matches!(
            smoothing_factors(&[1.0], &[1.0, 2.0], 0.5),
            Err(Error::Shape(_))
        ));
        assert!(smoothing_factors(&[1.0], &[1.0], 1.5).is_err());
        // dead channels are floored rather than dividing by zero
        let s = smoothing_factors(&[0.0], &[0.0], 0.5).unwrap();
        assert_eq!(s.s(), &[1.0]);
    }

    #[test]
    fn alpha_split_identity() {
        let mut rng = Rng::new(11);
        for _ in 0..200 {
            let act: Vec<f64> = (0..8).map(|_| rng.uniform_in(0.01, 50.0)).collect();
            let wgt: Vec<f64> = (0..8).map(|_| rng.uniform_in(0.01, 5.0)).collect();
            let alpha = rng.uniform();
            let a = smoothing_factors(&act, &wgt, alpha).unwrap();
            let b = smoothing_factors(&act, &wgt, 1.0 - alpha).unwrap();
            let swapped = smoothing_factors(&wgt, &act, 1.0 - alpha).unwrap();
            for j in 0..8 {
                let ratio = act[j] / wgt[j];
                assert!((a.s()[j] * b.s()[j] - ratio).abs() <= 1e-12 * ratio);
                assert!((a.s()[j] * swapped.s()[j] - 1.0).abs() <= 1e-12);
            }
        }
    }

    fn random_linear(out: usize, inp: usize, rng: &mut Rng) -> Linear {
        Linear::new(
            Mat::from_fn(out, inp, |_, _| rng.normal()),
            (0..out).map(|_| rng.normal()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_smoothing_is_bit_exact() {
        let mut rng = Rng::new(1);
        let layer = random_linear(4, 4, &mut rng);
        let ln = LayerNorm::new(vec![1.5; 4], vec![0.1; 4], 1e-5).unwrap();
        let (mut l2, mut ln2) = (layer.clone(), ln.clone());
        apply_aw_smoothing(&mut l2, &SmoothingFactors::ones(4), Producer::LayerNorm(&mut ln2), true).unwrap();
        assert_eq!((l2, ln2), (layer.clone(), ln));

        let x = Mat::from_fn(3, 4, |_, _| rng.normal());
        let mut l3 = layer.clone();
        apply_aw_smoothing(&mut l3, &SmoothingFactors::ones(4), Producer::None, false).unwrap();
        assert_eq!(
            l3.forward(&x, Exec::Serial).unwrap(),
            layer.forward(&x, Exec::Serial).unwrap()
        );
    }

    #[test]
    fn aw_rewrite_preserves_output() {
        let mut rng = Rng::new(2);
        for _ in 0..50 {
            let layer = random_linear(4, 4, &mut rng);
            let ln = LayerNorm::new(
                (0..4).map(|_| rng.normal()).collect(),
                (0..4).map(|_| rng.normal()).collect(),
                1e-5,
            )
            .unwrap();
            let s = SmoothingFactors::new((0..4).map(|_| rng.uniform_in(0.1, 10.0)).collect(), 0.5).unwrap();
            let x = Mat::from_fn(5, 4, |_, _| 3.0 * rng.normal());

            let reference = layer.forward(&ln.forward(&x), Exec::Serial).unwrap();
            let (mut l2, mut ln2) = (layer.clone(), ln.clone());
            apply_aw_smoothing(&mut l2, &s, Producer::LayerNorm(&mut ln2), true).unwrap();
            let folded = l2.forward(&ln2.forward(&x), Exec::Serial).unwrap();
            assert!(rel_err(&folded, &reference) < 1e-12);

            let mut l3 = layer.clone();
            apply_aw_smoothing(&mut l3, &s, Producer::None, false).unwrap();
            let explicit = l3.forward(&ln.forward(&x), Exec::Serial).unwrap();
            assert!(rel_err(&explicit, &reference) < 1e-12);
        }
    }

    #[test]
    fn strict_rewrite_requires_a_producer() {
        let mut layer = random_linear(2, 3, &mut Rng::new(3));
        let s = SmoothingFactors::ones(3);
        assert!(matches!(
            apply_aw_smoothing(&mut layer, &s, Producer::None, true),
            Err(Error::Rewrite(_))
        ));
        assert!(matches!(
            apply_aw_smoothing(&mut layer, &SmoothingFactors::ones(2), Producer::None, false),
            Err(Error::Shape(_))
        ));
    }

    fn qk_scores(qkv: &Linear, x: &Mat, d: usize) -> Mat {
        let y = qkv.forward(x, Exec::Serial).unwrap();
        let q = y.slice(0..x.rows(), 0..d);
        let k = y.slice(0..x.rows(), d..2 * d);
        q.matmul_nt(&k).unwrap()
    }

    #[test]
    fn aa_rewrite_preserves_scores() {
        let mut rng = Rng::new(4);
        for per_head in [false, true] {
            let d = 8;
            let qkv = random_linear(3 * d, d, &mut rng);
            let x = Mat::from_fn(6, d, |_, _| rng.normal());
            let n = if per_head { 4 } else { d };
            let s = SmoothingFactors::new((0..n).map(|_| rng.uniform_in(0.1, 10.0)).collect(), 0.5).unwrap();
            let mut q2 = qkv.clone();
            apply_aa_smoothing(&mut q2, &s, 2).unwrap();
            assert!(rel_err(&qk_scores(&q2, &x, d), &qk_scores(&qkv, &x, d)) < 1e-12);
            // values are untouched
            assert_eq!(
                q2.weight.slice(2 * d..3 * d, 0..d),
                qkv.weight.slice(2 * d..3 * d, 0..d)
            );
        }
        let mut q = random_linear(24, 8, &mut rng);
        assert!(matches!(
            apply_aa_smoothing(&mut q, &SmoothingFactors::ones(3), 2),
            Err(Error::Shape(_))
        ));
        let before = q.clone();
        apply_aa_smoothing(&mut q, &SmoothingFactors::ones(8), 2).unwrap();
        assert_eq!(q, before);
    }

    #[test]
    fn full_strength_equalizes_queries() {
        let mut rng = Rng::new(5);
        let d = 8;
        let qkv = random_linear(3 * d, d, &mut rng);
        let x = Mat::from_fn(10, d, |_, _| rng.normal());
        let y = qkv.forward(&x, Exec::Serial).unwrap();
        let q_max = column_absmax(&y.slice(0..10, 0..d));
        let k_max = column_absmax(&y.slice(0..10, d..2 * d));
        let s = smoothing_factors(&q_max, &k_max, 1.0).unwrap();
        let mut q2 = qkv.clone();
        apply_aa_smoothing(&mut q2, &s, 2).unwrap();
        let after = column_absmax(&q2.forward(&x, Exec::Serial).unwrap().slice(0..10, 0..d));
        assert!(
            after.iter().all(|v| (v - after[0]).abs() <= 1e-6 * after[0]),
            "{after:?}"
        );
    }

    #[test]
    fn full_strength_flattens_activations() {
        let mut rng = Rng::new(6);
        let x = Mat::from_fn(20, 6, |_, j| rng.normal() * (1 + 30 * (j == 2) as usize) as f64);
        let wgt = vec![0.7; 6];
        let s = smoothing_factors(&column_absmax(&x), &wgt, 1.0).unwrap();
        let mut layer = random_linear(3, 6, &mut rng);
        apply_aw_smoothing(&mut layer, &s, Producer::None, false).unwrap();
        let m = column_absmax(&layer.prepare_input(&x));
        assert!(m.iter().all(|v| (v - m[0]).abs() <= 1e-6 * m[0]), "{m:?}");
    }

    #[test]
    fn model_rewrite_preserves_logits_and_shrinks_outliers() {
        let cfg = toy_config(2, 16, 2, 32, 12);
        let mut model = random_model(&cfg, &mut Rng::new(7)).unwrap();
        plant_outlier_channels(&mut model, &[3, 9], 40.0);
        let corpus: Vec<u32> = (0..300).map(|i| (i * 7 % 32) as u32).collect();
        let samples = draw_samples(&corpus, 8, 12, &mut Rng::new(8)).unwrap();
        let stats = collect_channel_absmax(&model, &samples, Exec::Serial).unwrap();
        let mut smoothed = model.clone();
        let opts = SmoothOptions {
            aw: true,
            aa: true,
            alpha: 0.5,
        };
        smooth_model(&mut smoothed, &stats, opts).unwrap();
        for s in &samples {
            let a = model.forward_logits(s).unwrap();
            let b = smoothed.forward_logits(s).unwrap();
            assert!(rel_err(&b, &a) < 1e-10);
        }
        assert_eq!(smoothed.smoothing.len(), 2 * 5);
        assert_eq!(smoothed.lm_head, model.lm_head);

        let ratio = |v: &[f64]| {
            let max = v.iter().cloned().fold(0.0, f64::max);
            let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
            max / min
        };
        let after = collect_channel_absmax(&smoothed, &samples, Exec::Serial).unwrap();
        let site = Site::Qkv(0);
        assert!(ratio(&after[&site].act) <= ratio(&stats[&site].act));
    }
}
