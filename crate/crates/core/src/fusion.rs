//! Feature fusion (frame concatenation) and decision fusion of two
//! single-stream models with a per-utterance stream weight driven by the
//! divergence between their posteriors.

use crate::ctc::{LabelSequence, PosteriorGram};
use crate::decode::{best_path_decode, cer};
use crate::error::{Error, Result};
use crate::features::{concat, FeatureSequence};
use crate::numerics::Matrix;

pub const PRIOR_FLOOR: f64 = 1e-8;
pub const PROB_FLOOR: f64 = 1e-12;

fn floored_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// Per-frame concatenation `[audio_t ‖ video_t]`.
pub fn concat_features(audio: &FeatureSequence, video: &FeatureSequence) -> Result<FeatureSequence> {
    concat(audio, video)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassPriors {
    probs: Vec<f64>,
    floor: f64,
}

impl ClassPriors {
    /// Floors every entry and renormalizes so the floor still holds.
    pub fn new(probs: Vec<f64>, floor: f64) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("class priors"));
        }
        if !(floor > 0.0) || floor * probs.len() as f64 >= 1.0 {
            return Err(Error::InvalidArgument(format!("prior floor {floor} is unusable")));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidArgument("priors must be finite and non-negative".into()));
        }
        let total: f64 = probs.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidArgument("priors sum to zero".into()));
        }
        // Entries below the floor are pinned to it; the remaining mass is
        // shared among the others in proportion. Pinning may push further
        // entries below the floor, so repeat until stable.
        let mut pinned = vec![false; probs.len()];
        loop {
            let free_mass: f64 = probs.iter().zip(&pinned).filter(|(_, &f)| !f).map(|(p, _)| p).sum();
            let budget = 1.0 - floor * pinned.iter().filter(|&&f| f).count() as f64;
            let mut changed = false;
            for (p, f) in probs.iter().zip(pinned.iter_mut()) {
                if !*f && (free_mass <= 0.0 || p / free_mass * budget < floor) {
                    *f = true;
                    changed = true;
                }
            }
            if !changed {
                let out = probs
                    .iter()
                    .zip(&pinned)
                    .map(|(&p, &f)| if f { floor } else { p / free_mass * budget })
                    .collect();
                return Ok(ClassPriors { probs: out, floor });
            }
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn log_probs(&self) -> Vec<f64> {
        self.probs.iter().map(|p| p.ln()).collect()
    }
}

/// Relative class frequencies over all frames of all label sequences.
pub fn estimate_priors<'a, I>(labels: I, classes: usize) -> Result<ClassPriors>
where
    I: IntoIterator<Item = &'a [usize]>,
{
    let mut counts = vec![0u64; classes];
    let mut total = 0u64;
    for seq in labels {
        for &k in seq {
            let slot = counts
                .get_mut(k)
                .ok_or_else(|| Error::InvalidArgument(format!("frame label {k} outside {classes} classes")))?;
            *slot += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Empty("frame labels"));
    }
    ClassPriors::new(counts.iter().map(|&c| c as f64 / total as f64).collect(), PRIOR_FLOOR)
}

fn check_classes(post: &PosteriorGram, priors: &ClassPriors) -> Result<()> {
    if post.classes() != priors.len() {
        return Err(Error::DimensionMismatch {
            context: "posterior classes vs priors",
            expected: priors.len(),
            found: post.classes(),
        });
    }
    Ok(())
}

/// `log max(p, 1e-12) − log prior` for every frame and class.
pub fn pseudo_log_likelihood(post: &PosteriorGram, priors: &ClassPriors) -> Result<Matrix> {
    check_classes(post, priors)?;
    let log_prior = priors.log_probs();
    let mut out = Matrix::zeros(post.frames(), post.classes());
    for t in 0..post.frames() {
        for (o, (&p, lp)) in out.row_mut(t).iter_mut().zip(post.row(t).iter().zip(&log_prior)) {
            *o = floored_ln(p) - lp;
        }
    }
    Ok(out)
}

/// `D(p_v ‖ p_a) = Σ p_v log(p_v / p_a)`, with `p_a` floored at 1e-12 and
/// `0·log 0 = 0`.
pub fn kl_divergence(p_v: &[f64], p_a: &[f64]) -> Result<f64> {
    if p_v.len() != p_a.len() {
        return Err(Error::DimensionMismatch {
            context: "kl_divergence",
            expected: p_v.len(),
            found: p_a.len(),
        });
    }
    Ok(p_v
        .iter()
        .zip(p_a)
        .filter(|(&v, _)| v > 0.0)
        .map(|(&v, &a)| v * (v.ln() - floored_ln(a)))
        .sum())
}

/// Mean per-frame divergence of the video posteriors from the audio ones.
pub fn utterance_kl(post_v: &PosteriorGram, post_a: &PosteriorGram) -> Result<f64> {
    check_lengths(post_a, post_v)?;
    let mut total = 0.0;
    for t in 0..post_v.frames() {
        total += kl_divergence(post_v.row(t), post_a.row(t))?;
    }
    Ok(total / post_v.frames() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    /// sigmoid offset `b`
    pub bias: f64,
    /// fixed audio weight used instead of the divergence rule
    pub gamma_override: Option<f64>,
}

impl FusionConfig {
    pub fn with_bias(bias: f64) -> Self {
        FusionConfig {
            bias,
            gamma_override: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.bias.is_finite() {
            return Err(Error::Config(format!("fusion bias must be finite, got {}", self.bias)));
        }
        if let Some(g) = self.gamma_override {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::Config(format!("gamma override {g} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Audio stream weight `γ = 1 / (1 + exp(−d + b))`, or the override.
pub fn gamma_from_kl(d_kl: f64, config: &FusionConfig) -> f64 {
    if let Some(g) = config.gamma_override {
        return g;
    }
    let z = d_kl - config.bias;
    // both branches avoid overflow of exp
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_lengths(post_a: &PosteriorGram, post_v: &PosteriorGram) -> Result<()> {
    if post_a.frames() != post_v.frames() {
        return Err(Error::DimensionMismatch {
            context: "decision fusion (frame count)",
            expected: post_a.frames(),
            found: post_v.frames(),
        });
    }
    if post_a.classes() != post_v.classes() {
        return Err(Error::DimensionMismatch {
            context: "decision fusion (classes)",
            expected: post_a.classes(),
            found: post_v.classes(),
        });
    }
    Ok(())
}

/// `γ·log p_a + (1 − γ)·log p_v − log prior` per frame and class.
pub fn decision_fuse(
    post_a: &PosteriorGram,
    post_v: &PosteriorGram,
    gamma: f64,
    priors: &ClassPriors,
) -> Result<Matrix> {
    check_lengths(post_a, post_v)?;
    check_classes(post_a, priors)?;
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma {gamma} outside [0, 1]")));
    }
    let log_prior = priors.log_probs();
    let mut out = Matrix::zeros(post_a.frames(), post_a.classes());
    for t in 0..post_a.frames() {
        let (ra, rv) = (post_a.row(t), post_v.row(t));
        for (k, o) in out.row_mut(t).iter_mut().enumerate() {
            *o = (gamma * floored_ln(ra[k]) + (1.0 - gamma) * floored_ln(rv[k])) - log_prior[k];
        }
    }
    Ok(out)
}

/// Fused scores for one utterance with the weight chosen by `config`.
pub fn fuse_utterance(
    post_a: &PosteriorGram,
    post_v: &PosteriorGram,
    priors: &ClassPriors,
    config: &FusionConfig,
) -> Result<(f64, Matrix)> {
    let gamma = gamma_from_kl(utterance_kl(post_v, post_a)?, config);
    Ok((gamma, decision_fuse(post_a, post_v, gamma, priors)?))
}

/// Posteriors of both streams for one validation utterance.
#[derive(Clone, Debug)]
pub struct FusionItem {
    pub audio: PosteriorGram,
    pub video: PosteriorGram,
    pub reference: LabelSequence,
}

/// Evaluates every bias in `grid` by decision-fusion CER over `items` and
/// returns the best one (lowest CER, then smallest bias) with the full
/// `(bias, cer)` table in grid order.
pub fn tune_bias(items: &[FusionItem], priors: &ClassPriors, grid: &[f64]) -> Result<(f64, Vec<(f64, f64)>)> {
    if grid.is_empty() {
        return Err(Error::Empty("bias grid"));
    }
    if items.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let divergences = items
        .iter()
        .map(|it| utterance_kl(&it.video, &it.audio))
        .collect::<Result<Vec<_>>>()?;
    let references: Vec<LabelSequence> = items.iter().map(|it| it.reference.clone()).collect();
    let mut table = Vec::with_capacity(grid.len());
    for &b in grid {
        let config = FusionConfig::with_bias(b);
        config.validate()?;
        let hyps = items
            .iter()
            .zip(&divergences)
            .map(|(it, &d)| {
                let scores = decision_fuse(&it.audio, &it.video, gamma_from_kl(d, &config), priors)?;
                Ok(best_path_decode(&scores)?.hypothesis)
            })
            .collect::<Result<Vec<_>>>()?;
        table.push((b, cer(&hyps, &references)?));
    }
    let best = table
        .iter()
        .copied()
        .min_by(|x, y| x.1.total_cmp(&y.1).then(x.0.total_cmp(&y.0)))
        .expect("non-empty grid");
    Ok((best.0, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{argmax, softmax_row, Rng};

    fn post(rows: &[&[f64]]) -> PosteriorGram {
        PosteriorGram::new(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    fn random_post(frames: usize, classes: usize, rng: &mut Rng) -> PosteriorGram {
        PosteriorGram::from_logits(&Matrix::random_uniform(frames, classes, -4.0, 4.0, rng)).unwrap()
    }

    #[test]
    fn concat_dims() {
        let a = FeatureSequence::new(Matrix::filled(3, 120, 1.0)).unwrap();
        let v = FeatureSequence::new(Matrix::filled(3, 120, 2.0)).unwrap();
        let av = concat_features(&a, &v).unwrap();
        assert_eq!(av.dim(), 240);
        assert_eq!(&av.frame(1)[118..122], &[1.0, 1.0, 2.0, 2.0]);
        let empty = FeatureSequence::new(Matrix::zeros(3, 0)).unwrap();
        assert_eq!(concat_features(&a, &empty).unwrap(), a);
        let short = FeatureSequence::new(Matrix::filled(2, 1, 0.0)).unwrap();
        assert!(concat_features(&a, &short).is_err());
    }

    #[test]
    fn priors_from_counts() {
        let labels: Vec<Vec<usize>> = vec![vec![0, 0, 1], vec![2, 0], vec![1, 0, 0, 0]];
        let p = estimate_priors(labels.iter().map(Vec::as_slice), 3).unwrap();
        let expect = [6.0 / 9.0, 2.0 / 9.0, 1.0 / 9.0];
        for (a, b) in p.probs().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn all_blank_priors_keep_floor() {
        let labels = [vec![0usize; 50]];
        let p = estimate_priors(labels.iter().map(Vec::as_slice), 28).unwrap();
        assert!((p.probs()[0] - (1.0 - 27.0 * PRIOR_FLOOR)).abs() < 1e-15);
        assert!(p.probs()[1..].iter().all(|&v| v == PRIOR_FLOOR));
        assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pseudo_likelihood_hand_example() {
        let priors = ClassPriors::new(vec![0.25, 0.5, 0.25], PRIOR_FLOOR).unwrap();
        let s = pseudo_log_likelihood(&post(&[&[0.5, 0.25, 0.25]]), &priors).unwrap();
        let ln2 = 2f64.ln();
        for (a, b) in s.row(0).iter().zip([ln2, -ln2, 0.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let same = pseudo_log_likelihood(&post(&[&[0.25, 0.5, 0.25]]), &priors).unwrap();
        assert!(same.as_slice().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn kl_cases() {
        assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let mut rng = Rng::new(1);
        for _ in 0..1000 {
            let a = softmax_row(&[rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0)]).unwrap();
            let v = softmax_row(&[rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0)]).unwrap();
            assert!(kl_divergence(&v, &a).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn gamma_shape() {
        let c = FusionConfig::with_bias(2.5);
        assert!((gamma_from_kl(2.5, &c) - 0.5).abs() < 1e-12);
        assert!(gamma_from_kl(1e6, &c) > 1.0 - 1e-12);
        let mut last = 0.0;
        for i in 0..100 {
            let g = gamma_from_kl(i as f64 * 0.1, &c);
            assert!(g > last && g < 1.0);
            last = g;
        }
        let fixed = FusionConfig {
            bias: 0.0,
            gamma_override: Some(0.3),
        };
        assert_eq!(gamma_from_kl(10.0, &fixed), 0.3);
        assert!(FusionConfig { bias: 0.0, gamma_override: Some(1.5) }.validate().is_err());
    }

    #[test]
    fn boundary_weights_reproduce_single_streams() {
        let mut rng = Rng::new(2);
        let (a, v) = (random_post(7, 5, &mut rng), random_post(7, 5, &mut rng));
        let priors = ClassPriors::new(vec![0.4, 0.1, 0.2, 0.2, 0.1], PRIOR_FLOOR).unwrap();
        assert_eq!(decision_fuse(&a, &v, 1.0, &priors).unwrap(), pseudo_log_likelihood(&a, &priors).unwrap());
        assert_eq!(decision_fuse(&a, &v, 0.0, &priors).unwrap(), pseudo_log_likelihood(&v, &priors).unwrap());
        assert!(decision_fuse(&a, &random_post(6, 5, &mut rng), 0.5, &priors).is_err());
    }

    #[test]
    fn equal_streams_keep_argmax() {
        let mut rng = Rng::new(3);
        let a = random_post(9, 4, &mut rng);
        let priors = ClassPriors::new(vec![0.25; 4], PRIOR_FLOOR).unwrap();
        let fused = decision_fuse(&a, &a, 0.5, &priors).unwrap();
        let single = pseudo_log_likelihood(&a, &priors).unwrap();
        for t in 0..9 {
            assert_eq!(argmax(fused.row(t)), argmax(single.row(t)));
        }
    }

    #[test]
    fn stream_offset_keeps_argmax() {
        let mut rng = Rng::new(4);
        let (a, v) = (random_post(9, 4, &mut rng), random_post(9, 4, &mut rng));
        let priors = ClassPriors::new(vec![0.1, 0.2, 0.3, 0.4], PRIOR_FLOOR).unwrap();
        let fused = decision_fuse(&a, &v, 0.7, &priors).unwrap();
        // scaling every audio probability of a frame by c shifts log p_a by log c
        let mut scaled = a.matrix().clone();
        for t in 0..9 {
            scaled.row_mut(t).iter_mut().for_each(|p| *p *= 0.5);
        }
        let log_a: Vec<f64> = scaled.as_slice().iter().map(|p| p.ln()).collect();
        let log_v: Vec<f64> = v.matrix().as_slice().iter().map(|p| p.ln()).collect();
        let lp = priors.log_probs();
        for t in 0..9 {
            let row: Vec<f64> = (0..4).map(|k| 0.7 * log_a[t * 4 + k] + 0.3 * log_v[t * 4 + k] - lp[k]).collect();
            assert_eq!(argmax(&row), argmax(fused.row(t)));
            let shift = row[0] - fused.get(t, 0);
            for k in 0..4 {
                assert!((row[k] - fused.get(t, k) - shift).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tune_bias_grid_rules() {
        let mut rng = Rng::new(5);
        let items: Vec<FusionItem> = (0..3)
            .map(|_| FusionItem {
                audio: random_post(6, 3, &mut rng),
                video: random_post(6, 3, &mut rng),
                reference: LabelSequence::new(vec![1, 2]).unwrap(),
            })
            .collect();
        let priors = ClassPriors::new(vec![1.0 / 3.0; 3], PRIOR_FLOOR).unwrap();
        assert!(tune_bias(&items, &priors, &[]).is_err());
        assert_eq!(tune_bias(&items, &priors, &[1.5]).unwrap().0, 1.5);
        let grid: Vec<f64> = (0..10).map(|i| i as f64 - 5.0).collect();
        let (b, table) = tune_bias(&items, &priors, &grid).unwrap();
        let best = table.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
        let first = table.iter().find(|r| r.1 == best).unwrap().0;
        assert_eq!(b, first);
        assert_eq!(tune_bias(&items, &priors, &grid).unwrap().1, table);
    }
}
