//! Domain types shared by the quantizer, trainer, oracle and result tooling.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::{Error, Result};

/// Representation dimensionality and per-dimension level count of the scalar quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawQuantizerSpec", into = "RawQuantizerSpec")]
pub struct QuantizerSpec {
    dim: usize,
    levels: usize,
}

#[derive(Serialize, Deserialize)]
struct RawQuantizerSpec {
    dim: usize,
    levels: usize,
}

impl TryFrom<RawQuantizerSpec> for QuantizerSpec {
    type Error = Error;

    fn try_from(raw: RawQuantizerSpec) -> Result<Self> {
        QuantizerSpec::new(raw.dim, raw.levels)
    }
}

impl From<QuantizerSpec> for RawQuantizerSpec {
    fn from(spec: QuantizerSpec) -> Self {
        RawQuantizerSpec {
            dim: spec.dim,
            levels: spec.levels,
        }
    }
}

impl QuantizerSpec {
    pub fn new(dim: usize, levels: usize) -> Result<Self> {
        if dim == 0 || levels < 2 {
            return Err(Error::InvalidQuantizer { dim, levels });
        }
        Ok(Self { dim, levels })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn levels(&self) -> usize {
        self.levels
    }

    /// Bits per transmitted code, see [`rate_of`].
    pub fn rate(&self) -> f64 {
        rate_of(*self)
    }
}

impl fmt::Display for QuantizerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.dim, self.levels)
    }
}

impl FromStr for QuantizerSpec {
    type Err = Error;

    /// Parses the `DIMxLEVELS` shorthand, e.g. `3x4`.
    fn from_str(s: &str) -> Result<Self> {
        let (d, l) = s
            .trim()
            .split_once(['x', 'X'])
            .ok_or(Error::InvalidArgument("quantizer must be written as DIMxLEVELS"))?;
        let dim = d
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument("quantizer dim is not an integer"))?;
        let levels = l
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument("quantizer levels is not an integer"))?;
        QuantizerSpec::new(dim, levels)
    }
}

/// Fixed rate of a quantizer in bits: `dim * log2(levels)`.
pub fn rate_of(spec: QuantizerSpec) -> f64 {
    spec.dim as f64 * libm::log2(spec.levels as f64)
}

/// Weights of the classification and perception terms of the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TradeoffParams {
    pub lambda_c: f64,
    pub lambda_p: f64,
}

impl TradeoffParams {
    pub fn classification(lambda_c: f64) -> Self {
        Self {
            lambda_c,
            lambda_p: 0.0,
        }
    }

    pub fn perception(lambda_p: f64) -> Self {
        Self {
            lambda_c: 0.0,
            lambda_p,
        }
    }
}

macro_rules! text_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim() {
                    $($text => Ok($name::$variant),)+
                    _ => Err(Error::InvalidArgument(concat!("unknown ", stringify!($name), " value"))),
                }
            }
        }
    };
}

text_enum! {
    /// Whether a run trains its own encoder or reuses a frozen one.
    Mode { EndToEnd => "end_to_end", Universal => "universal" }
}

text_enum! {
    /// Which composite loss a run minimizes.
    Objective { Rdc => "rdc", Rdp => "rdp" }
}

text_enum! {
    /// Initialization of the critic in universal runs.
    CriticInit { Random => "random", FromSource => "from_source" }
}

/// Adaptive-moment optimizer settings for one network component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl OptimizerSettings {
    pub const fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { lr, beta1, beta2 }
    }
}

/// Full recipe of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub objective: Objective,
    pub quantizer: QuantizerSpec,
    pub tradeoff: TradeoffParams,
    pub seed: u64,
    pub epochs: u32,
    pub batch_size: u32,
    pub encoder: OptimizerSettings,
    pub decoder: OptimizerSettings,
    pub critic: OptimizerSettings,
    pub classifier: OptimizerSettings,
    pub lambda_gp: f64,
    pub critic_steps: u32,
    /// Checkpoint reference of the frozen encoder; required iff `mode` is universal.
    pub encoder_source: Option<String>,
    pub critic_init: CriticInit,
    /// Softmax temperature of the soft quantizer used for gradients.
    pub temperature: f64,
    /// Epochs of classifier pretraining when this config drives `pretrain-classifier`.
    pub classifier_epochs: u32,
    /// Number of training images used per epoch, 0 for the full split.
    pub train_samples: u32,
    /// Number of held-out images used for evaluation, 0 for the full split.
    pub eval_samples: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::EndToEnd,
            objective: Objective::Rdc,
            quantizer: QuantizerSpec { dim: 3, levels: 3 },
            tradeoff: TradeoffParams::default(),
            seed: 0,
            epochs: 40,
            batch_size: 128,
            encoder: OptimizerSettings::new(1e-2, 0.5, 0.9),
            decoder: OptimizerSettings::new(1e-2, 0.5, 0.9),
            critic: OptimizerSettings::new(2e-4, 0.5, 0.9),
            classifier: OptimizerSettings::new(1e-3, 0.9, 0.999),
            lambda_gp: 10.0,
            critic_steps: 5,
            encoder_source: None,
            critic_init: CriticInit::FromSource,
            temperature: 1.0,
            classifier_epochs: 5,
            train_samples: 0,
            eval_samples: 0,
        }
    }
}

/// One failed rule of [`RunConfig::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub rule: &'static str,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.rule)
    }
}

impl RunConfig {
    /// Checks every invariant and cross-field constraint; an empty list means valid.
    ///
    /// Whether `encoder_source` resolves to a compatible checkpoint needs file access and
    /// is checked by the trainer.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut push = |field, rule| out.push(Violation { field, rule });

        let TradeoffParams { lambda_c, lambda_p } = self.tradeoff;
        if !(lambda_c >= 0.0 && lambda_c.is_finite()) {
            push("tradeoff.lambda_c", "lambda_c must be finite and >= 0");
        }
        if !(lambda_p >= 0.0 && lambda_p.is_finite()) {
            push("tradeoff.lambda_p", "lambda_p must be finite and >= 0");
        }
        if lambda_c != 0.0 && lambda_p != 0.0 {
            push("tradeoff", "exactly one tradeoff weight may be nonzero");
        } else {
            match self.objective {
                Objective::Rdc if lambda_p != 0.0 => {
                    push("tradeoff.lambda_p", "rdc objective requires lambda_p = 0")
                }
                Objective::Rdp if lambda_c != 0.0 => {
                    push("tradeoff.lambda_c", "rdp objective requires lambda_c = 0")
                }
                _ => {}
            }
        }

        if self.epochs == 0 {
            push("epochs", "epochs must be positive");
        }
        if self.batch_size == 0 {
            push("batch_size", "batch_size must be positive");
        }
        if self.critic_steps == 0 {
            push("critic_steps", "critic_steps must be positive");
        }
        if self.classifier_epochs == 0 {
            push("classifier_epochs", "classifier_epochs must be positive");
        }
        if !(self.lambda_gp >= 0.0 && self.lambda_gp.is_finite()) {
            push("lambda_gp", "lambda_gp must be finite and >= 0");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            push("temperature", "temperature must be positive");
        }

        let components = [
            ("encoder", self.encoder),
            ("decoder", self.decoder),
            ("critic", self.critic),
            ("classifier", self.classifier),
        ];
        for (name, opt) in components {
            if !(opt.lr > 0.0 && opt.lr.is_finite()) {
                push(name, "learning rate must be positive");
            }
            if !((0.0..1.0).contains(&opt.beta1) && (0.0..1.0).contains(&opt.beta2)) {
                push(name, "momentum coefficients must lie in [0, 1)");
            }
        }

        let has_source = self
            .encoder_source
            .as_deref()
            .is_some_and(|s| !s.trim().is_empty());
        match self.mode {
            Mode::Universal if !has_source => {
                push("encoder_source", "encoder_source required")
            }
            Mode::EndToEnd if self.encoder_source.is_some() => push(
                "encoder_source",
                "encoder_source is only valid in universal mode",
            ),
            _ => {}
        }
        out
    }

    /// The nonzero tradeoff weight of this run (0 for pure rate-distortion runs).
    pub fn active_lambda(&self) -> f64 {
        match self.objective {
            Objective::Rdc => self.tradeoff.lambda_c,
            Objective::Rdp => self.tradeoff.lambda_p,
        }
    }
}

/// One evaluated operating point. Cross-entropy is in nats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub run_id: String,
    pub mode: Mode,
    pub objective: Objective,
    pub dim: usize,
    #[serde(rename = "L")]
    pub levels: usize,
    pub rate: f64,
    pub lambda_c: f64,
    pub lambda_p: f64,
    pub mse: f64,
    pub ce: f64,
    pub accuracy: f64,
    /// Critic-based Wasserstein-1 estimate; absent for runs trained without a critic.
    pub w1_proxy: Option<f64>,
    pub seed: u64,
}

impl CurvePoint {
    pub fn quantizer(&self) -> Result<QuantizerSpec> {
        QuantizerSpec::new(self.dim, self.levels)
    }

    pub fn check_invariants(&self) -> Result<()> {
        if !(self.mse >= 0.0) {
            return Err(Error::InvalidArgument("mse must be >= 0"));
        }
        if !(self.ce >= 0.0) {
            return Err(Error::InvalidArgument("ce must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.accuracy) {
            return Err(Error::InvalidArgument("accuracy must lie in [0, 1]"));
        }
        let expected = rate_of(self.quantizer()?);
        if (self.rate - expected).abs() > 1e-9 {
            return Err(Error::InvalidArgument("rate does not match dim * log2(L)"));
        }
        Ok(())
    }
}

/// Tolerance on the probability-vector and row-sum invariants of [`DiscreteSource`].
pub const PROBABILITY_TOL: f64 = 1e-12;

/// Finite-alphabet source with K label channels and a distortion matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteSource {
    px: Vec<f64>,
    label_channels: Vec<Matrix>,
    delta: Matrix,
}

impl DiscreteSource {
    pub fn new(px: Vec<f64>, label_channels: Vec<Matrix>, delta: Matrix) -> Result<Self> {
        let nx = px.len();
        if nx == 0 {
            return Err(Error::InvalidSource("empty source alphabet"));
        }
        if px.iter().any(|&p| !(p >= 0.0)) || (px.iter().sum::<f64>() - 1.0).abs() > PROBABILITY_TOL {
            return Err(Error::InvalidSource("px must be a probability vector"));
        }
        for ch in &label_channels {
            if ch.rows() != nx || ch.cols() == 0 {
                return Err(Error::InvalidSource("label channel must have one row per source symbol"));
            }
            if !ch.is_row_stochastic(PROBABILITY_TOL) {
                return Err(Error::InvalidSource("label channel rows must sum to 1"));
            }
        }
        if delta.rows() != nx || delta.cols() == 0 {
            return Err(Error::InvalidSource("distortion matrix must be nx x nxhat"));
        }
        if delta.as_slice().iter().any(|&d| !(d >= 0.0) || !d.is_finite()) {
            return Err(Error::InvalidSource("distortions must be finite and >= 0"));
        }
        Ok(Self {
            px,
            label_channels,
            delta,
        })
    }

    /// Uniform binary source with Hamming distortion and no labels.
    pub fn binary_uniform_hamming() -> Self {
        Self::new(
            alloc::vec![0.5, 0.5],
            Vec::new(),
            Matrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]).unwrap(),
        )
        .unwrap()
    }

    /// Uniform binary source under Hamming distortion whose label is `X` flipped with
    /// probability `flip`.
    pub fn binary_noisy_label(flip: f64) -> Result<Self> {
        Self::new(
            alloc::vec![0.5, 0.5],
            alloc::vec![Matrix::from_rows(&[&[1.0 - flip, flip], &[flip, 1.0 - flip]])?],
            Self::hamming(2),
        )
    }

    /// Hamming distortion on an `n`-symbol alphabet.
    pub fn hamming(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    m.set(i, j, 1.0);
                }
            }
        }
        m
    }

    #[inline]
    pub fn nx(&self) -> usize {
        self.px.len()
    }

    #[inline]
    pub fn nxhat(&self) -> usize {
        self.delta.cols()
    }

    pub fn px(&self) -> &[f64] {
        &self.px
    }

    pub fn label_channels(&self) -> &[Matrix] {
        &self.label_channels
    }

    pub fn num_labels(&self) -> usize {
        self.label_channels.len()
    }

    pub fn delta(&self) -> &Matrix {
        &self.delta
    }
}

/// One `(D, P, C)` constraint triple; infinite entries disable the constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintPoint {
    pub distortion: f64,
    pub perception: f64,
    pub classification: Vec<f64>,
}

impl ConstraintPoint {
    pub fn new(distortion: f64, perception: f64, classification: Vec<f64>) -> Self {
        Self {
            distortion,
            perception,
            classification,
        }
    }

    /// Distortion-only constraint.
    pub fn distortion(d: f64) -> Self {
        Self::new(d, f64::INFINITY, Vec::new())
    }

    /// Distortion plus one classification constraint (perception disabled).
    pub fn rdc(d: f64, c: f64) -> Self {
        Self::new(d, f64::INFINITY, alloc::vec![c])
    }

    /// Distortion plus perception constraint (classification disabled).
    pub fn rdp(d: f64, p: f64) -> Self {
        Self::new(d, p, Vec::new())
    }

    pub fn check(&self) -> Result<()> {
        let ok = |v: f64| v >= 0.0 && !v.is_nan();
        if !ok(self.distortion) || !ok(self.perception) || !self.classification.iter().all(|&c| ok(c)) {
            return Err(Error::InvalidArgument("constraint entries must be >= 0 or +inf"));
        }
        Ok(())
    }

    /// Classification bound for label `k`, `+inf` when not given.
    pub fn classification_bound(&self, k: usize) -> f64 {
        self.classification.get(k).copied().unwrap_or(f64::INFINITY)
    }
}

/// A finite set of constraint points served by one universal representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintRegion {
    points: Vec<ConstraintPoint>,
}

impl ConstraintRegion {
    pub fn new(points: Vec<ConstraintPoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyRegion);
        }
        for p in &points {
            p.check()?;
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[ConstraintPoint] {
        &self.points
    }
}

impl fmt::Display for ConstraintPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(D={}, P={}, C=[", self.distortion, self.perception)?;
        for (i, c) in self.classification.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{c}")?;
        }
        f.write_str("])")
    }
}

impl CurvePoint {
    /// Short human-readable label used in logs and plots.
    pub fn label(&self) -> String {
        let mut s = self.objective.to_string();
        s.push('/');
        s.push_str(self.mode.as_str());
        s
    }
}
