//! Weighted cross-entropy with per-pixel feedback weights.
//!
//! The loss is `E = -(1/M) * sum_x w(x) * ln p_true(x)` over all `M = N*H*W`
//! pixels. Uniform mode fixes `w = 1` everywhere (the baseline networks);
//! feedback mode recomputes `w(x) = exp(-ln(100) * p_true(x)^beta)` from the
//! current predictions each iteration, so poorly predicted pixels keep
//! weights near 1 while confident ones decay toward the 0.01 floor. The
//! weight map is a constant during backward: gradients flow through the
//! probabilities only.

use crate::error::{Error, Result};
use crate::tensor::{Tape, TensorId};
use std::fmt;

/// Smallest feedback weight, attained at `p = 1`.
pub const MIN_WEIGHT: f64 = 0.01;

/// How per-pixel loss weights are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    Uniform,
    Feedback,
}

impl WeightMode {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightMode::Uniform => "uniform",
            WeightMode::Feedback => "feedback",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(WeightMode::Uniform),
            "feedback" => Ok(WeightMode::Feedback),
            _ => Err(Error::Config(format!(
                "unknown loss mode {s:?} (expected uniform or feedback)"
            ))),
        }
    }
}

impl fmt::Display for WeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub mode: WeightMode,
    /// Exponent on the true-class probability inside the feedback weight.
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            mode: WeightMode::Feedback,
            beta: 3.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Config(format!(
                "beta must be finite and positive, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Per-pixel true-class indices, shape `[N, H, W]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    shape: Vec<usize>,
    data: Vec<usize>,
}

impl LabelMap {
    pub fn new(shape: Vec<usize>, data: Vec<usize>) -> Result<Self> {
        if shape.len() != 3 {
            return Err(Error::shape("label_map", "rank", 3, shape.len()));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "label_map",
                format!("product({shape:?})"),
                numel,
                data.len(),
            ));
        }
        Ok(LabelMap { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[usize] {
        &self.data
    }
}

/// Per-pixel loss weights, shape `[N, H, W]`, all in `[0.01, 1]` (or exactly
/// 1 in uniform mode). Held constant by the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl WeightMap {
    pub fn uniform(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        WeightMap {
            shape,
            data: vec![1.0; numel],
        }
    }

    /// A weight map from explicit values, each within `[0.01, 1]`.
    pub fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.len() != 3 {
            return Err(Error::shape("weight_map", "rank", 3, shape.len()));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "weight_map",
                format!("product({shape:?})"),
                numel,
                data.len(),
            ));
        }
        if let Some(v) = data.iter().find(|v| !(MIN_WEIGHT..=1.0).contains(*v)) {
            return Err(Error::Numerical(format!(
                "weight map value {v} outside [{MIN_WEIGHT}, 1]"
            )));
        }
        Ok(WeightMap { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// The closed-form feedback weight `exp(-ln(100) * p^beta)`: 1 at `p = 0`,
/// 0.01 at `p = 1`, strictly decreasing in between.
pub fn weight(p: f64, beta: f64) -> f64 {
    (-(100f64.ln()) * p.powf(beta)).exp()
}

/// Evaluates the feedback weight over a tape tensor of true-class
/// probabilities, producing a detached map.
///
/// Errors if any probability leaves `[0, 1]` — that indicates a broken
/// softmax upstream, not a recoverable state.
pub fn feedback_weight(tape: &Tape, p_true: TensorId, beta: f64) -> Result<WeightMap> {
    let p = tape.data(p_true);
    if let Some(&bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Numerical(format!(
            "feedback weight input {bad} outside [0, 1]; upstream softmax is broken"
        )));
    }
    Ok(WeightMap {
        shape: tape.shape(p_true).to_vec(),
        data: p.iter().map(|&pi| weight(pi, beta)).collect(),
    })
}

/// Gathers the predicted probability of each pixel's true class; stays on
/// the tape (differentiable).
pub fn true_class_prob(tape: &mut Tape, probs: TensorId, labels: &LabelMap) -> Result<TensorId> {
    let ps = tape.shape(probs);
    if ps.len() != 4 {
        return Err(Error::shape("true_class_prob", "rank", 4, ps.len()));
    }
    let expect = [ps[0], ps[2], ps[3]];
    if labels.shape() != expect {
        return Err(Error::shape(
            "true_class_prob",
            "labels",
            format!("{expect:?}"),
            format!("{:?}", labels.shape()),
        ));
    }
    tape.gather_channels(probs, labels.data())
}

/// The weighted cross-entropy scalar from already-gathered true-class
/// probabilities.
pub fn weighted_cross_entropy(
    tape: &mut Tape,
    p_true: TensorId,
    weights: &WeightMap,
) -> Result<TensorId> {
    if tape.shape(p_true) != weights.shape() {
        return Err(Error::shape(
            "weighted_cross_entropy",
            "weights",
            format!("{:?}", tape.shape(p_true)),
            format!("{:?}", weights.shape()),
        ));
    }
    tape.weighted_nll(p_true, weights.data())
}

/// One full loss evaluation: gather true-class probabilities, derive the
/// weight map for the configured mode, reduce. Returns the map alongside the
/// loss so training can log its mean.
pub struct LossOutcome {
    pub loss: TensorId,
    pub weights: WeightMap,
}

pub fn loss_step(
    tape: &mut Tape,
    probs: TensorId,
    labels: &LabelMap,
    config: &LossConfig,
) -> Result<LossOutcome> {
    config.validate()?;
    let p_true = true_class_prob(tape, probs, labels)?;
    let weights = match config.mode {
        WeightMode::Uniform => WeightMap::uniform(tape.shape(p_true).to_vec()),
        WeightMode::Feedback => feedback_weight(tape, p_true, config.beta)?,
    };
    let loss = weighted_cross_entropy(tape, p_true, &weights)?;
    Ok(LossOutcome { loss, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn weight_endpoints() {
        for beta in [1.0, 2.0, 3.0, 4.0] {
            assert_eq!(weight(0.0, beta), 1.0);
            assert!((weight(1.0, beta) - MIN_WEIGHT).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_closed_form_values() {
        // 100^(-1/8) and friends, frozen from a high-precision evaluation.
        assert_relative_eq!(weight(0.5, 3.0), 0.56234132519034908, epsilon = 1e-9);
        assert_relative_eq!(weight(0.5, 1.0), 0.1, epsilon = 1e-12);
        assert_relative_eq!(weight(0.5, 4.0), 0.74989420933245583, epsilon = 1e-9);
        assert_relative_eq!(weight(0.3, 3.0), 0.88307990041856277, epsilon = 1e-9);
        assert_relative_eq!(weight(0.9, 3.0), 0.03483373150360117, epsilon = 1e-9);
    }

    proptest! {
        #[test]
        fn weight_strictly_decreasing_in_p(
            beta in 0.25f64..6.0,
            p in 0.0f64..0.99,
            step in 0.001f64..0.01,
        ) {
            prop_assert!(weight(p, beta) > weight(p + step, beta));
        }

        #[test]
        fn weight_increases_with_beta(
            p in 0.01f64..0.99,
            beta in 0.5f64..5.0,
        ) {
            prop_assert!(weight(p, beta + 0.5) > weight(p, beta));
        }

        #[test]
        fn weight_stays_in_range(p in 0.0f64..=1.0, beta in 0.25f64..6.0) {
            let w = weight(p, beta);
            prop_assert!((MIN_WEIGHT..=1.0).contains(&w));
        }
    }

    #[test]
    fn feedback_weight_rejects_bad_probabilities() {
        let mut tape = Tape::new();
        let p = tape.leaf_from(vec![1, 1, 2], vec![0.5, 1.5], false).unwrap();
        assert!(feedback_weight(&tape, p, 3.0).is_err());
    }

    #[test]
    fn true_class_prob_gathers() {
        let mut tape = Tape::new();
        let probs = tape
            .leaf_from(vec![1, 2, 1, 1], vec![0.2, 0.8], false)
            .unwrap();
        let labels = LabelMap::new(vec![1, 1, 1], vec![1]).unwrap();
        let t = true_class_prob(&mut tape, probs, &labels).unwrap();
        assert_eq!(tape.data(t), &[0.8]);
    }

    #[test]
    fn one_hot_probs_give_all_ones() {
        let mut tape = Tape::new();
        // Pixel 0 is class 1, pixel 1 is class 0, one-hot probabilities.
        let probs = tape
            .leaf_from(vec![1, 2, 1, 2], vec![0.0, 1.0, 1.0, 0.0], false)
            .unwrap();
        let labels = LabelMap::new(vec![1, 1, 2], vec![1, 0]).unwrap();
        let t = true_class_prob(&mut tape, probs, &labels).unwrap();
        assert_eq!(tape.data(t), &[1.0, 1.0]);
    }

    #[test]
    fn perfect_prediction_zero_loss() {
        let mut tape = Tape::new();
        let p = tape.leaf_from(vec![1, 1, 2], vec![1.0, 1.0], true).unwrap();
        let w = WeightMap {
            shape: vec![1, 1, 2],
            data: vec![0.3, 0.7],
        };
        let e = weighted_cross_entropy(&mut tape, p, &w).unwrap();
        assert_eq!(tape.data(e)[0], 0.0);
    }

    #[test]
    fn single_pixel_half_probability() {
        let mut tape = Tape::new();
        let p = tape.leaf_from(vec![1, 1, 1], vec![0.5], false).unwrap();
        let w = WeightMap::uniform(vec![1, 1, 1]);
        let e = weighted_cross_entropy(&mut tape, p, &w).unwrap();
        assert_relative_eq!(tape.data(e)[0], 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn loss_linear_in_weights() {
        let probs = [0.5, 0.25, 0.9, 0.1];
        let mut tape = Tape::new();
        let p = tape.leaf_from(vec![1, 2, 2], probs.to_vec(), false).unwrap();
        let ones = WeightMap::uniform(vec![1, 2, 2]);
        let scaled = WeightMap {
            shape: vec![1, 2, 2],
            data: vec![0.01; 4],
        };
        let e1 = weighted_cross_entropy(&mut tape, p, &ones).unwrap();
        let e2 = weighted_cross_entropy(&mut tape, p, &scaled).unwrap();
        assert_eq!(tape.data(e2)[0], 0.01 * tape.data(e1)[0]);
    }

    #[test]
    fn uniform_mode_equals_all_ones_map() {
        let mut tape = Tape::new();
        let probs = tape
            .leaf_from(vec![1, 2, 1, 2], vec![0.3, 0.6, 0.7, 0.4], false)
            .unwrap();
        let labels = LabelMap::new(vec![1, 1, 2], vec![0, 1]).unwrap();
        let out = loss_step(
            &mut tape,
            probs,
            &labels,
            &LossConfig {
                mode: WeightMode::Uniform,
                beta: 3.0,
            },
        )
        .unwrap();
        assert!(out.weights.data().iter().all(|&w| w == 1.0));
        let t = true_class_prob(&mut tape, probs, &labels).unwrap();
        let direct = weighted_cross_entropy(&mut tape, t, &out.weights).unwrap();
        assert_eq!(tape.data(out.loss)[0], tape.data(direct)[0]);
    }

    #[test]
    fn feedback_on_perfect_prediction() {
        let mut tape = Tape::new();
        let probs = tape
            .leaf_from(vec![1, 2, 1, 2], vec![0.0, 1.0, 1.0, 0.0], false)
            .unwrap();
        let labels = LabelMap::new(vec![1, 1, 2], vec![1, 0]).unwrap();
        let out = loss_step(&mut tape, probs, &labels, &LossConfig::default()).unwrap();
        for &w in out.weights.data() {
            assert!((w - MIN_WEIGHT).abs() < 1e-12);
        }
        assert_eq!(tape.data(out.loss)[0], 0.0);
    }

    #[test]
    fn feedback_emphasizes_uncertain_pixels() {
        let mut tape = Tape::new();
        let probs = tape
            .leaf_from(vec![1, 2, 1, 2], vec![0.3, 0.9, 0.7, 0.1], false)
            .unwrap();
        let labels = LabelMap::new(vec![1, 1, 2], vec![0, 0]).unwrap();
        let out = loss_step(&mut tape, probs, &labels, &LossConfig::default()).unwrap();
        // p_true = (0.3, 0.9): the uncertain pixel gets the larger weight.
        assert!(out.weights.data()[0] > out.weights.data()[1]);
    }

    #[test]
    fn loss_nonnegative_and_zero_only_at_one() {
        let mut tape = Tape::new();
        let p = tape
            .leaf_from(vec![1, 1, 3], vec![0.999, 1.0, 0.2], false)
            .unwrap();
        let w = WeightMap::uniform(vec![1, 1, 3]);
        let e = weighted_cross_entropy(&mut tape, p, &w).unwrap();
        assert!(tape.data(e)[0] > 0.0);
    }

    proptest! {
        #[test]
        fn loss_positivity(probs in prop::collection::vec(0.01f64..=1.0, 6)) {
            let mut tape = Tape::new();
            let all_one = probs.iter().all(|&p| p == 1.0);
            let p = tape.leaf_from(vec![1, 2, 3], probs, false).unwrap();
            let w = WeightMap::uniform(vec![1, 2, 3]);
            let e = weighted_cross_entropy(&mut tape, p, &w).unwrap();
            let loss = tape.data(e)[0];
            if all_one {
                prop_assert_eq!(loss, 0.0);
            } else {
                prop_assert!(loss > 0.0);
            }
        }
    }

    #[test]
    fn invalid_beta_rejected() {
        for beta in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            let cfg = LossConfig {
                mode: WeightMode::Feedback,
                beta,
            };
            assert!(cfg.validate().is_err());
        }
    }

    /// The feedback gradient must treat the weight map as a constant: the
    /// tape gradient of `loss_step` (weights recomputed in the forward) has
    /// to match finite differences of the loss evaluated with the weight map
    /// frozen at its unperturbed value.
    #[test]
    fn feedback_weights_are_stop_gradient() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let logits: Vec<f64> = (0..2 * 3 * 2 * 2).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let labels = LabelMap::new(
            vec![2, 2, 2],
            (0..8).map(|_| (rng.random::<f64>() * 3.0) as usize).collect(),
        )
        .unwrap();
        let config = LossConfig::default();

        // Analytic gradient with weights recomputed inside the step.
        let mut tape = Tape::new();
        let x = tape.leaf_from(vec![2, 3, 2, 2], logits.clone(), true).unwrap();
        let probs = tape.softmax_channels(x).unwrap();
        let out = loss_step(&mut tape, probs, &labels, &config).unwrap();
        tape.backward(out.loss).unwrap();
        let analytic = tape.grad(x).unwrap().to_vec();
        let frozen = out.weights.clone();

        // Finite differences of the frozen-weight loss.
        let report = gradcheck::check(&[logits], |xs| {
            let mut tape = Tape::new();
            let x = tape.leaf_from(vec![2, 3, 2, 2], xs[0].clone(), true).unwrap();
            let probs = tape.softmax_channels(x).unwrap();
            let t = true_class_prob(&mut tape, probs, &labels).unwrap();
            let e = weighted_cross_entropy(&mut tape, t, &frozen).unwrap();
            (tape.data(e)[0], vec![analytic.clone()])
        });
        assert!(
            report.max_rel_err < 1e-4,
            "feedback gradient differs from frozen-weight finite differences: {report:?}"
        );
    }

    /// Gradient of the plain gather (sum of true-class probabilities)
    /// against finite differences.
    #[test]
    fn true_class_prob_gradient() {
        use rand::{Rng, SeedableRng};
        for seed in 0..5 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(20 + seed);
            let logits: Vec<f64> = (0..1 * 3 * 2 * 2).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let labels = LabelMap::new(
                vec![1, 2, 2],
                (0..4).map(|_| (rng.random::<f64>() * 3.0) as usize).collect(),
            )
            .unwrap();
            let report = gradcheck::check(&[logits], |xs| {
                let mut tape = Tape::new();
                let x = tape.leaf_from(vec![1, 3, 2, 2], xs[0].clone(), true).unwrap();
                let probs = tape.softmax_channels(x).unwrap();
                let t = true_class_prob(&mut tape, probs, &labels).unwrap();
                let s = tape.sum(t);
                tape.backward(s).unwrap();
                (tape.data(s)[0], vec![tape.grad(x).unwrap().to_vec()])
            });
            assert!(report.max_rel_err < 1e-4, "{report:?}");
        }
    }
}
