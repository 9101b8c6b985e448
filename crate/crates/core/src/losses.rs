//! Objective terms. Every norm is reduced by a mean over its elements.

use facetex_grad::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::PerceptualExtractor;

/// Probability clamp used by the mask cross entropy.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub l2: f64,
    pub vgg: f64,
    pub mask: f64,
    pub kl: f64,
    pub adv: f64,
    /// Applied only when the RGB texture term is enabled.
    pub rgb: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { l2: 1.0, vgg: 2.0, mask: 1.0, kl: 0.1, adv: 1.0, rgb: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.l2, self.vgg, self.mask, self.kl, self.adv, self.rgb];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidInput(format!("loss weights must be finite and ≥ 0: {self:?}")));
        }
        Ok(())
    }

    /// `[l2, vgg, mask, kl, adv]`.
    pub fn as_array(&self) -> [f64; 5] {
        [self.l2, self.vgg, self.mask, self.kl, self.adv]
    }
}

fn same_shape<T: Scalar>(g: &Graph<T>, a: Var, b: Var, what: &str) -> Result<()> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb {
        return Err(Error::Dimension(format!("{what}: shapes {sa:?} and {sb:?} differ")));
    }
    Ok(())
}

/// Mean squared error.
pub fn photometric_l2<T: Scalar>(g: &Graph<T>, pred: Var, target: Var) -> Result<Var> {
    same_shape(g, pred, target, "photometric loss")?;
    Ok(g.mean(g.square(g.sub(pred, target))))
}

/// `Σ_j v_j · mean|φ_j(pred) − φ_j(target)|`.
pub fn perceptual<T: Scalar>(g: &Graph<T>, pred: Var, target: Var, extractor: &dyn PerceptualExtractor<T>) -> Result<Var> {
    same_shape(g, pred, target, "perceptual loss")?;
    let fp = extractor.features(g, pred);
    let ft = extractor.features(g, target);
    let weights = extractor.layer_weights();
    if fp.len() != weights.len() {
        return Err(Error::Dimension("extractor returned a feature count different from its weights".into()));
    }
    let mut total = g.constant(Tensor::scalar(T::zero()));
    for ((&a, &b), &v) in fp.iter().zip(&ft).zip(&weights) {
        total = g.add(total, g.scale(g.mean(g.abs(g.sub(a, b))), v));
    }
    Ok(total)
}

/// Binary cross entropy of mask probabilities against a 0/1 target, with the
/// probabilities clamped to `[ε, 1 − ε]`.
pub fn mask_bce<T: Scalar>(g: &Graph<T>, prob: Var, target: Var) -> Result<Var> {
    same_shape(g, prob, target, "mask loss")?;
    let p = g.clamp(prob, BCE_EPS, 1.0 - BCE_EPS);
    let log_p = g.log(p);
    let log_q = g.log(g.offset(g.scale(p, -1.0), 1.0));
    let one_minus_t = g.offset(g.scale(target, -1.0), 1.0);
    let ll = g.add(g.mul(target, log_p), g.mul(one_minus_t, log_q));
    Ok(g.scale(g.mean(ll), -1.0))
}

/// KL divergence of `N(μ, diag σ²)` from `N(0, I)`, averaged over batch and
/// latent dimensions: `½ · mean(σ² + μ² − 1 − log σ²)`.
pub fn kl_divergence<T: Scalar>(g: &Graph<T>, mu: Var, log_var: Var) -> Result<Var> {
    same_shape(g, mu, log_var, "KL term")?;
    let inner = g.sub(g.add(g.exp(log_var), g.square(mu)), g.offset(log_var, 1.0));
    Ok(g.scale(g.mean(inner), 0.5))
}

/// Least-squares realism term plus feature matching against (detached) real
/// features: `mean_k mean((1 − D_k)²) + mean_{k,j} mean|φ_kj(fake) − φ_kj(real)|`.
pub fn adv_generator<T: Scalar>(
    g: &Graph<T>,
    fake_scores: &[Var],
    fake_features: &[Vec<Var>],
    real_features: &[Vec<Var>],
) -> Result<Var> {
    if fake_scores.is_empty() {
        return Err(Error::InvalidInput("no discriminator scales".into()));
    }
    if fake_features.len() != real_features.len() || fake_features.iter().zip(real_features).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::Dimension("fake and real feature lists differ in length".into()));
    }
    let mut realism = g.constant(Tensor::scalar(T::zero()));
    for &s in fake_scores {
        realism = g.add(realism, g.mean(g.square(g.offset(s, -1.0))));
    }
    let realism = g.scale(realism, 1.0 / fake_scores.len() as f64);
    let n_layers: usize = fake_features.iter().map(Vec::len).sum();
    if n_layers == 0 {
        return Ok(realism);
    }
    let mut fm = g.constant(Tensor::scalar(T::zero()));
    for (fs, rs) in fake_features.iter().zip(real_features) {
        for (&f, &r) in fs.iter().zip(rs) {
            same_shape(g, f, r, "feature matching")?;
            fm = g.add(fm, g.mean(g.abs(g.sub(f, g.detach(r)))));
        }
    }
    Ok(g.add(realism, g.scale(fm, 1.0 / n_layers as f64)))
}

/// `λ_adv · ½ · mean_k [mean(D_k(fake)²) + mean((1 − D_k(real))²)]`.
pub fn adv_discriminator<T: Scalar>(g: &Graph<T>, fake_scores: &[Var], real_scores: &[Var], lambda_adv: f64) -> Result<Var> {
    if fake_scores.is_empty() || fake_scores.len() != real_scores.len() {
        return Err(Error::Dimension("fake and real score lists differ in length".into()));
    }
    let mut total = g.constant(Tensor::scalar(T::zero()));
    for (&f, &r) in fake_scores.iter().zip(real_scores) {
        total = g.add(total, g.mean(g.square(f)));
        total = g.add(total, g.mean(g.square(g.offset(r, -1.0))));
    }
    Ok(g.scale(total, 0.5 * lambda_adv / fake_scores.len() as f64))
}

/// Mean squared difference between the first three feature channels and the
/// RGB target.
pub fn rgb_texture_loss<T: Scalar>(g: &Graph<T>, feature_image: Var, target: Var) -> Result<Var> {
    let fs = g.shape(feature_image);
    if fs.len() != 4 || fs[1] < 3 {
        return Err(Error::Dimension(format!("RGB texture term needs ≥ 3 feature channels, got {fs:?}")));
    }
    let rgb = g.narrow(feature_image, 0, 3);
    same_shape(g, rgb, target, "RGB texture term")?;
    Ok(g.mean(g.square(g.sub(rgb, target))))
}

/// Raw generator-side terms of one batch.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorTerms {
    pub l2: Var,
    pub vgg: Var,
    pub mask: Var,
    pub kl: Var,
    pub adv: Var,
    pub rgb: Option<Var>,
}

/// Weighted sum. Terms with weight zero are left out of the graph entirely.
pub fn total_generator_loss<T: Scalar>(g: &Graph<T>, terms: &GeneratorTerms, weights: &LossWeights) -> Var {
    let mut parts = vec![
        (terms.l2, weights.l2),
        (terms.vgg, weights.vgg),
        (terms.mask, weights.mask),
        (terms.kl, weights.kl),
        (terms.adv, weights.adv),
    ];
    if let Some(rgb) = terms.rgb {
        parts.push((rgb, weights.rgb));
    }
    let mut total = g.constant(Tensor::scalar(T::zero()));
    for (v, w) in parts {
        if w != 0.0 {
            total = g.add(total, g.scale(v, w));
        }
    }
    total
}

/// Scalar form of [`total_generator_loss`] over `[l2, vgg, mask, kl, adv]`.
pub fn weighted_total(raw: &[f64; 5], weights: &LossWeights) -> f64 {
    raw.iter().zip(weights.as_array()).map(|(r, w)| r * w).sum()
}

/// One training step's scalars.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub l2: f64,
    pub vgg: f64,
    pub mask: f64,
    pub kl: f64,
    pub adv: f64,
    /// Zero when the RGB texture term is disabled.
    pub rgb: f64,
    pub generator_total: f64,
    pub discriminator: f64,
}

impl LossRecord {
    /// Column names of [`LossRecord::csv_line`]: the step, the six raw terms,
    /// the six weighted terms, then the generator and discriminator totals.
    pub const CSV_HEADER: &'static str =
        "step,l2,vgg,mask,kl,adv,rgb,w_l2,w_vgg,w_mask,w_kl,w_adv,w_rgb,generator_total,discriminator";

    pub fn raw(&self) -> [f64; 5] {
        [self.l2, self.vgg, self.mask, self.kl, self.adv]
    }

    pub fn csv_line(&self, weights: &LossWeights) -> String {
        let raw = [self.l2, self.vgg, self.mask, self.kl, self.adv, self.rgb];
        let w = [weights.l2, weights.vgg, weights.mask, weights.kl, weights.adv, weights.rgb];
        let mut cols = vec![self.step.to_string()];
        cols.extend(raw.iter().map(|v| format!("{v:.6e}")));
        cols.extend(raw.iter().zip(w).map(|(v, w)| format!("{:.6e}", v * w)));
        cols.push(format!("{:.6e}", self.generator_total));
        cols.push(format!("{:.6e}", self.discriminator));
        cols.join(",")
    }

    pub fn is_finite(&self) -> bool {
        [self.l2, self.vgg, self.mask, self.kl, self.adv, self.rgb, self.generator_total, self.discriminator]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::IdentityExtractor;

    fn c(g: &Graph<f64>, shape: &[usize], v: Vec<f64>) -> Var {
        g.constant(Tensor::new(shape, v))
    }

    fn val(g: &Graph<f64>, v: Var) -> f64 {
        g.value(v)[0]
    }

    #[test]
    fn fixed_points() {
        let g = Graph::<f64>::new();
        let a = c(&g, &[1, 1, 2, 2], vec![0.1, -0.2, 0.3, 0.9]);
        let b = c(&g, &[1, 1, 2, 2], vec![0.6, 0.3, 0.8, 1.4]);
        assert_eq!(val(&g, photometric_l2(&g, a, a).unwrap()), 0.0);
        assert!((val(&g, photometric_l2(&g, b, a).unwrap()) - 0.25).abs() < 1e-12);
        assert_eq!(val(&g, perceptual(&g, a, a, &IdentityExtractor).unwrap()), 0.0);
        assert!((val(&g, perceptual(&g, a, b, &IdentityExtractor).unwrap()) - 0.5).abs() < 1e-12);

        let half = c(&g, &[4], vec![0.5; 4]);
        let m = c(&g, &[4], vec![1.0, 0.0, 1.0, 0.0]);
        assert!((val(&g, mask_bce(&g, half, m).unwrap()) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(val(&g, mask_bce(&g, m, m).unwrap()) < 1e-5);

        let zero = c(&g, &[1, 1], vec![0.0]);
        let one = c(&g, &[1, 1], vec![1.0]);
        assert_eq!(val(&g, kl_divergence(&g, zero, zero).unwrap()), 0.0);
        assert_eq!(val(&g, kl_divergence(&g, one, zero).unwrap()), 0.5);

        let ones = c(&g, &[1, 1, 2, 2], vec![1.0; 4]);
        let zeros = c(&g, &[1, 1, 2, 2], vec![0.0; 4]);
        assert_eq!(val(&g, adv_generator(&g, &[ones], &[vec![a]], &[vec![a]]).unwrap()), 0.0);
        assert_eq!(val(&g, adv_generator(&g, &[zeros], &[vec![]], &[vec![]]).unwrap()), 1.0);
        assert!(adv_generator(&g, &[zeros], &[vec![a]], &[vec![]]).is_err());
        assert_eq!(val(&g, adv_discriminator(&g, &[zeros], &[ones], 1.0).unwrap()), 0.0);
        assert_eq!(val(&g, adv_discriminator(&g, &[ones], &[zeros], 1.0).unwrap()), 1.0);
    }

    #[test]
    fn rgb_term_uses_first_three_channels() {
        let g = Graph::<f64>::new();
        // Offset of 1 on the left half of a 1×2 image, over 4 channels.
        let mut f = vec![0.0; 8];
        for ch in 0..3 {
            f[ch * 2] = 1.0;
        }
        f[6] = 7.0;
        let feat = c(&g, &[1, 4, 1, 2], f);
        let target = c(&g, &[1, 3, 1, 2], vec![0.0; 6]);
        assert!((val(&g, rgb_texture_loss(&g, feat, target).unwrap()) - 0.5).abs() < 1e-12);
        let two = c(&g, &[1, 2, 1, 2], vec![0.0; 4]);
        assert!(rgb_texture_loss(&g, two, target).is_err());
    }

    #[test]
    fn paper_weights_total() {
        assert!((weighted_total(&[1.0; 5], &LossWeights::default()) - 5.1).abs() < 1e-12);
        let g = Graph::<f64>::new();
        let one = g.constant(Tensor::scalar(1.0));
        let terms = GeneratorTerms { l2: one, vgg: one, mask: one, kl: one, adv: one, rgb: None };
        assert!((val(&g, total_generator_loss(&g, &terms, &LossWeights::default())) - 5.1).abs() < 1e-12);
    }

    #[test]
    fn csv_line_has_header_arity() {
        let r = LossRecord { step: 3, l2: 0.5, ..Default::default() };
        let line = r.csv_line(&LossWeights::default());
        assert_eq!(line.split(',').count(), LossRecord::CSV_HEADER.split(',').count());
        assert!(line.starts_with("3,5.000000e-1"));
    }
}
