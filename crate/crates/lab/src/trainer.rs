//! Classifier pretraining, end-to-end codec training and the frozen-encoder universal
//! protocol.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context as _, Result};
use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rdpc_core::objectives::{ce_loss, composite_loss, LossTerms};
use rdpc_core::quantizer::{dither_bound, quantize_scalar, soft_quantize_derivative};
use rdpc_core::{CriticInit, CurvePoint, Mode, Objective, QuantizerSpec, RunConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{self, Header};
use crate::config::{canonical, read_config, run_id};
use crate::mnist::{Dataset, Mnist};
use crate::networks::{fingerprint, Classifier, Critic, Decoder, Encoder, CLASSES, ENCODER_WIDTHS, PIXELS};
use crate::nn::act::softmax_columns;
use crate::nn::adam::Adam;
use crate::nn::{transpose, Module, Param, Tensor};
use crate::results::TableMeta;

/// Minimum held-out accuracy of the pretrained classifier.
pub const ACCURACY_FLOOR: f64 = 0.97;
const EVAL_BATCH: usize = 500;

/// Independent random streams of one run.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Dither = 3,
    Interpolate = 4,
    EvalDither = 5,
    CriticInit = 6,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic generator for `(seed, epoch, stream)`.
pub fn stream_rng(seed: u64, epoch: u64, stream: Stream) -> ChaCha8Rng {
    let s = splitmix(splitmix(splitmix(seed) ^ epoch) ^ stream as u64);
    ChaCha8Rng::seed_from_u64(s)
}

fn params<M: Module + ?Sized>(m: &mut M) -> Vec<&mut Param> {
    let mut v = Vec::new();
    m.params_mut(&mut v);
    v
}

fn step<M: Module + ?Sized>(adam: &mut Adam, m: &mut M) {
    adam.update(params(m));
}

/// Output-directory layout shared by all commands.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn classifier(&self) -> PathBuf {
        self.root.join("classifier.ckpt")
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(run_id)
    }

    pub fn results_csv(&self) -> PathBuf {
        self.root.join("results.csv")
    }

    pub fn results_json(&self) -> PathBuf {
        self.root.join("results.json")
    }
}

pub mod files {
    pub const CONFIG: &str = "config.txt";
    pub const ENCODER: &str = "encoder.ckpt";
    pub const DECODER: &str = "decoder.ckpt";
    pub const CRITIC: &str = "critic.ckpt";
    pub const STATE: &str = "state.ckpt";
    pub const POINT: &str = "curve_point.json";
    pub const FREEZE: &str = "freeze.json";
}

pub fn encoder_arch(dim: usize) -> serde_json::Value {
    json!({"network": "encoder", "input": PIXELS, "widths": ENCODER_WIDTHS, "dim": dim})
}

pub fn decoder_arch(dim: usize) -> serde_json::Value {
    json!({"network": "decoder", "dim": dim, "hidden": crate::networks::DECODER_HIDDEN,
           "channels": crate::networks::DECODER_CHANNELS})
}

pub fn critic_arch() -> serde_json::Value {
    json!({"network": "critic", "channels": crate::networks::CRITIC_CHANNELS})
}

pub fn classifier_arch() -> serde_json::Value {
    json!({"network": "classifier", "filters": crate::networks::CLASSIFIER_FILTERS,
           "hidden": crate::networks::CLASSIFIER_HIDDEN})
}

// ---------------------------------------------------------------------------------------
// Classifier

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub accuracy: f64,
    pub fingerprint: String,
    pub run_id: String,
}

/// Accuracy of `clf` on `test`.
pub fn classifier_accuracy(clf: &mut Classifier, test: &Dataset) -> f64 {
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..test.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = test.gather(chunk);
        let p = clf.probabilities(&x, chunk.len());
        for (row, &label) in p.chunks(CLASSES).zip(&y) {
            if argmax(row) == label {
                correct += 1;
            }
        }
    }
    correct as f64 / test.len().max(1) as f64
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains the digit classifier with `cfg.classifier` settings for
/// `cfg.classifier_epochs` epochs and saves it. An existing checkpoint produced by the
/// same config is reused. Fails when held-out accuracy is below [`ACCURACY_FLOOR`].
pub fn pretrain_classifier(data: &Mnist, cfg: &RunConfig, ws: &Workspace) -> Result<ClassifierReport> {
    let id = run_id(&classifier_config(cfg));
    let path = ws.classifier();
    if path.exists() {
        let (header, _) = checkpoint::read(&path)?;
        if header.run_id == id {
            let report: ClassifierReport = serde_json::from_value(header.extra.clone())?;
            info!("classifier {id} already trained (accuracy {:.4})", report.accuracy);
            return check_floor(report);
        }
    }
    let mut clf = Classifier::new(&mut stream_rng(cfg.seed, 0, Stream::Init));
    let mut adam = Adam::new(&cfg.classifier);
    let train = data.train.truncated(cfg.train_samples as usize);
    let batch = cfg.batch_size as usize;
    for epoch in 0..cfg.classifier_epochs as u64 {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, epoch, Stream::Shuffle));
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(batch) {
            let (x, y) = train.gather(chunk);
            let b = chunk.len();
            let logits = clf.logits(&x, b, true);
            let mut d = softmax_columns(&logits, CLASSES);
            let mut loss = 0.0;
            for (s, &label) in y.iter().enumerate() {
                loss -= (d[label * b + s].max(1e-12) as f64).ln();
                d[label * b + s] -= 1.0;
            }
            for v in &mut d {
                *v /= b as f32;
            }
            ensure!(loss.is_finite(), "non-finite classifier loss at epoch {epoch}");
            clf.backward(&d, true);
            step(&mut adam, &mut clf);
            total += loss / b as f64;
            batches += 1;
        }
        info!("classifier epoch {} loss {:.4}", epoch + 1, total / batches.max(1) as f64);
    }
    let accuracy = classifier_accuracy(&mut clf, &data.test);
    let report = ClassifierReport {
        accuracy,
        fingerprint: fingerprint(&clf),
        run_id: id.clone(),
    };
    info!("classifier test accuracy {accuracy:.4}");
    checkpoint::save_module(&path, "classifier", classifier_arch(), &clf, &id, cfg.seed, serde_json::to_value(&report)?)?;
    check_floor(report)
}

fn check_floor(report: ClassifierReport) -> Result<ClassifierReport> {
    ensure!(
        report.accuracy >= ACCURACY_FLOOR,
        "classifier accuracy {:.4} is below the {ACCURACY_FLOOR} floor",
        report.accuracy
    );
    Ok(report)
}

/// The fields that determine the classifier; everything else is reset to defaults so
/// codec configs sharing these settings share one classifier.
pub fn classifier_config(cfg: &RunConfig) -> RunConfig {
    RunConfig {
        seed: cfg.seed,
        batch_size: cfg.batch_size,
        classifier: cfg.classifier,
        classifier_epochs: cfg.classifier_epochs,
        train_samples: cfg.train_samples,
        ..RunConfig::default()
    }
}

pub fn load_classifier(ws: &Workspace) -> Result<(Classifier, Header)> {
    let mut clf = Classifier::new(&mut ChaCha8Rng::seed_from_u64(0));
    let header = checkpoint::load_module(&ws.classifier(), "classifier", &classifier_arch(), &mut clf)
        .context("loading the pretrained classifier (run `rdpc pretrain-classifier` first)")?;
    let report: ClassifierReport = serde_json::from_value(header.extra.clone())?;
    check_floor(report)?;
    Ok((clf, header))
}

// ---------------------------------------------------------------------------------------
// Codec

/// Encoder, decoder and (for perception runs) critic of one run.
#[derive(Debug, Clone)]
pub struct Codec {
    pub spec: QuantizerSpec,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub critic: Option<Critic>,
}

/// Latent batch after dithered quantization.
struct Quantized {
    /// Encoder output `[dim, B]`.
    y: Vec<f32>,
    /// Dither `[dim, B]`.
    u: Vec<f32>,
    /// Decoder input `z - u`.
    zhat: Vec<f32>,
}

fn quantize_batch(y: Vec<f32>, spec: QuantizerSpec, rng: &mut ChaCha8Rng) -> Quantized {
    let bound = dither_bound(spec.levels()) as f32;
    let u: Vec<f32> = (0..y.len()).map(|_| rng.gen_range(-bound..=bound)).collect();
    let zhat = y
        .iter()
        .zip(&u)
        .map(|(&a, &d)| (quantize_scalar((a + d) as f64, spec.levels()) - d as f64) as f32)
        .collect();
    Quantized { y, u, zhat }
}

/// Evaluation metrics of a codec on held-out data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub ce: f64,
    pub accuracy: f64,
    pub w1_proxy: Option<f64>,
}

impl Codec {
    pub fn new(spec: QuantizerSpec, with_critic: bool, seed: u64) -> Self {
        let mut rng = stream_rng(seed, 0, Stream::Init);
        let encoder = Encoder::new(spec.dim(), &ENCODER_WIDTHS, &mut rng);
        let decoder = Decoder::new(spec.dim(), &mut rng);
        let critic = with_critic.then(|| Critic::new(&mut rng));
        Self {
            spec,
            encoder,
            decoder,
            critic,
        }
    }

    /// Reconstructs `images` (`[B, 784]`) with eval-mode normalization and the given dither.
    pub fn reconstruct(&mut self, images: &[f32], batch: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let y = self.encoder.forward(images, batch, false, false);
        let q = quantize_batch(y, self.spec, rng);
        self.decoder.forward(&q.zhat, batch, false, false)
    }

    /// Held-out metrics with dither active, seeded by `seed`.
    pub fn evaluate(&mut self, test: &Dataset, clf: &mut Classifier, seed: u64) -> Metrics {
        let mut rng = stream_rng(seed, 0, Stream::EvalDither);
        let (mut sq, mut ce, mut correct) = (0.0f64, 0.0f64, 0usize);
        let (mut real, mut fake) = (0.0f64, 0.0f64);
        let idx: Vec<usize> = (0..test.len()).collect();
        for chunk in idx.chunks(EVAL_BATCH) {
            let b = chunk.len();
            let (x, labels) = test.gather(chunk);
            let xhat = self.reconstruct(&x, b, &mut rng);
            sq += x.iter().zip(&xhat).map(|(a, c)| ((a - c) as f64).powi(2)).sum::<f64>();
            let p = clf.probabilities(&xhat, b);
            let p64: Vec<f64> = p.iter().map(|&v| v as f64).collect();
            ce += ce_loss(&labels, &p64, CLASSES).expect("consistent batch").value * b as f64;
            correct += p.chunks(CLASSES).zip(&labels).filter(|(row, &l)| argmax(row) == l).count();
            if let Some(critic) = &self.critic {
                real += critic.scores(&x, b).iter().map(|&v| v as f64).sum::<f64>();
                fake += critic.scores(&xhat, b).iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        let n = test.len().max(1) as f64;
        Metrics {
            mse: sq / (n * PIXELS as f64),
            ce: ce / n,
            accuracy: correct as f64 / n,
            w1_proxy: self.critic.as_ref().map(|_| (real - fake) / n),
        }
    }
}

// ---------------------------------------------------------------------------------------
// Training

/// Shared inputs of training runs.
pub struct Context<'a> {
    pub data: &'a Mnist,
    pub classifier: Classifier,
    pub classifier_fingerprint: String,
    pub ws: Workspace,
}

impl<'a> Context<'a> {
    pub fn new(data: &'a Mnist, ws: Workspace) -> Result<Self> {
        let (classifier, header) = load_classifier(&ws)?;
        Ok(Self {
            data,
            classifier,
            classifier_fingerprint: header.fingerprint,
            ws,
        })
    }

    /// Results-table stamp: short digests of the training data and the classifier.
    pub fn table_meta(&self) -> TableMeta {
        TableMeta {
            dataset: format!("mnist:{}", &self.data.train.digest()[..16]),
            classifier: self.classifier_fingerprint[..16].to_string(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue a partially trained run from its last saved epoch instead of restarting.
    pub resume: bool,
}

/// Encoder fingerprints observed by a universal run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezeRecord {
    pub source: String,
    pub source_fingerprint: String,
    pub per_epoch: Vec<String>,
    pub after: String,
}

impl FreezeRecord {
    pub fn intact(&self) -> bool {
        self.per_epoch.iter().all(|f| *f == self.source_fingerprint) && self.after == self.source_fingerprint
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub point: CurvePoint,
    pub dir: PathBuf,
    /// True when the run had already completed and nothing was trained.
    pub cached: bool,
}

/// Where a universal run's encoder comes from.
#[derive(Debug, Clone)]
pub struct Source {
    pub encoder: PathBuf,
    pub dir: Option<PathBuf>,
}

/// Resolves `encoder_source`: a checkpoint path, a run directory, or a run id under the
/// workspace.
pub fn resolve_source(ws: &Workspace, reference: &str) -> Result<Source> {
    let p = PathBuf::from(reference);
    if p.is_file() {
        return Ok(Source {
            dir: p.parent().map(Path::to_path_buf),
            encoder: p,
        });
    }
    let dir = if p.is_dir() { p } else { ws.run_dir(reference) };
    let encoder = dir.join(files::ENCODER);
    ensure!(encoder.is_file(), "encoder_source `{reference}`: no encoder checkpoint at {}", encoder.display());
    Ok(Source { encoder, dir: Some(dir) })
}

/// Loads the config and trained networks of a completed run (a run directory or a run id
/// under the workspace). A universal run takes its encoder from its source.
pub fn load_run(ws: &Workspace, reference: &str) -> Result<(RunConfig, Codec)> {
    let p = PathBuf::from(reference);
    let dir = if p.is_dir() { p } else { ws.run_dir(reference) };
    let cfg = read_config(&dir.join(files::CONFIG))?;
    let dim = cfg.quantizer.dim();
    let mut codec = Codec::new(cfg.quantizer, false, cfg.seed);
    let encoder = match (cfg.mode, &cfg.encoder_source) {
        (Mode::Universal, Some(src)) => resolve_source(ws, src)?.encoder,
        _ => dir.join(files::ENCODER),
    };
    let header = checkpoint::load_module(&encoder, "encoder", &encoder_arch(dim), &mut codec.encoder)?;
    let levels = header.extra.get("levels").and_then(|v| v.as_u64());
    ensure!(
        levels == Some(cfg.quantizer.levels() as u64),
        "{}: encoder levels {levels:?} do not match the run's quantizer",
        encoder.display()
    );
    checkpoint::load_module(&dir.join(files::DECODER), "decoder", &decoder_arch(dim), &mut codec.decoder)?;
    Ok((cfg, codec))
}

/// Runs `cfg` (end-to-end or universal) and returns its evaluated point. A run whose
/// `curve_point.json` exists is returned without training.
pub fn train(cfg: &RunConfig, ctx: &mut Context<'_>, opts: &RunOptions) -> Result<RunOutcome> {
    let violations = cfg.validate();
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(|v| format!("{}: {v}", v.field)).collect();
        bail!("invalid config: {}", list.join("; "));
    }
    let id = run_id(cfg);
    let dir = ctx.ws.run_dir(&id);
    let point_path = dir.join(files::POINT);
    if point_path.exists() {
        let point: CurvePoint = serde_json::from_str(&fs::read_to_string(&point_path)?)?;
        info!("run {id} already complete");
        return Ok(RunOutcome { point, dir, cached: true });
    }
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(files::CONFIG), canonical(cfg))?;
    let point = match cfg.mode {
        Mode::EndToEnd => Trainer::end_to_end(cfg, &id, &dir)?.run(ctx, opts)?,
        Mode::Universal => Trainer::universal(cfg, &id, &dir, &ctx.ws)?.run(ctx, opts)?,
    };
    point.check_invariants().map_err(|e| anyhow::anyhow!("curve point: {e}"))?;
    fs::write(&point_path, serde_json::to_string_pretty(&point)?)?;
    Ok(RunOutcome { point, dir, cached: false })
}

struct Trainer {
    cfg: RunConfig,
    id: String,
    dir: PathBuf,
    codec: Codec,
    enc_opt: Adam,
    dec_opt: Adam,
    critic_opt: Adam,
    /// Frozen-encoder bookkeeping for universal runs.
    freeze: Option<FreezeRecord>,
    start_epoch: u32,
}

const STATE_KIND: &str = "train_state";

impl Trainer {
    fn end_to_end(cfg: &RunConfig, id: &str, dir: &Path) -> Result<Self> {
        let codec = Codec::new(cfg.quantizer, cfg.objective == Objective::Rdp, cfg.seed);
        Ok(Self::with_codec(cfg, id, dir, codec, None))
    }

    fn universal(cfg: &RunConfig, id: &str, dir: &Path, ws: &Workspace) -> Result<Self> {
        let reference = cfg.encoder_source.as_deref().context("universal run without encoder_source")?;
        let source = resolve_source(ws, reference)?;
        let dim = cfg.quantizer.dim();
        let mut codec = Codec::new(cfg.quantizer, cfg.objective == Objective::Rdp, cfg.seed);
        let header = checkpoint::load_module(&source.encoder, "encoder", &encoder_arch(dim), &mut codec.encoder)
            .with_context(|| format!("encoder_source `{reference}`"))?;
        let levels = header.extra.get("levels").and_then(|v| v.as_u64());
        ensure!(
            levels == Some(cfg.quantizer.levels() as u64),
            "encoder_source `{reference}` was trained with {levels:?} levels, config uses {}",
            cfg.quantizer.levels()
        );
        if let Some(src) = &source.dir {
            let dec = src.join(files::DECODER);
            if dec.is_file() {
                checkpoint::load_module(&dec, "decoder", &decoder_arch(dim), &mut codec.decoder)?;
            }
            if let (Some(critic), CriticInit::FromSource) = (codec.critic.as_mut(), cfg.critic_init) {
                let path = src.join(files::CRITIC);
                if path.is_file() {
                    checkpoint::load_module(&path, "critic", &critic_arch(), critic)?;
                } else {
                    *critic = Critic::new(&mut stream_rng(cfg.seed, 0, Stream::CriticInit));
                }
            }
        }
        let freeze = FreezeRecord {
            source: source.encoder.display().to_string(),
            source_fingerprint: header.fingerprint.clone(),
            per_epoch: Vec::new(),
            after: String::new(),
        };
        ensure!(fingerprint(&codec.encoder) == freeze.source_fingerprint, "loaded encoder differs from its checkpoint");
        Ok(Self::with_codec(cfg, id, dir, codec, Some(freeze)))
    }

    fn with_codec(cfg: &RunConfig, id: &str, dir: &Path, codec: Codec, freeze: Option<FreezeRecord>) -> Self {
        Self {
            cfg: cfg.clone(),
            id: id.to_string(),
            dir: dir.to_path_buf(),
            codec,
            enc_opt: Adam::new(&cfg.encoder),
            dec_opt: Adam::new(&cfg.decoder),
            critic_opt: Adam::new(&cfg.critic),
            freeze,
            start_epoch: 0,
        }
    }

    fn frozen(&self) -> bool {
        self.freeze.is_some()
    }

    fn run(mut self, ctx: &mut Context<'_>, opts: &RunOptions) -> Result<CurvePoint> {
        let state = self.dir.join(files::STATE);
        if opts.resume && state.is_file() {
            self.load_state(&state)?;
            info!("run {} resumed after epoch {}", self.id, self.start_epoch);
        }
        let train = ctx.data.train.truncated(self.cfg.train_samples as usize);
        for epoch in self.start_epoch..self.cfg.epochs {
            let stats = self.epoch(epoch as u64, &train, &mut ctx.classifier)?;
            info!(
                "run {} epoch {}/{}: loss {:.5} mse {:.5} ce {:.4} w1 {:.4}",
                self.id,
                epoch + 1,
                self.cfg.epochs,
                stats.total,
                stats.mse,
                stats.ce,
                stats.w1
            );
            if let Some(freeze) = &mut self.freeze {
                let now = fingerprint(&self.codec.encoder);
                ensure!(
                    now == freeze.source_fingerprint,
                    "frozen encoder changed during epoch {} of run {}",
                    epoch + 1,
                    self.id
                );
                freeze.per_epoch.push(now);
            }
            self.start_epoch = epoch + 1;
            self.save_state(&state)?;
        }
        let eval = ctx.data.test.truncated(self.cfg.eval_samples as usize);
        let m = self.codec.evaluate(&eval, &mut ctx.classifier, self.cfg.seed);
        self.save_networks()?;
        if let Some(freeze) = &mut self.freeze {
            freeze.after = fingerprint(&self.codec.encoder);
            ensure!(freeze.intact(), "frozen encoder changed during run {}", self.id);
            fs::write(self.dir.join(files::FREEZE), serde_json::to_string_pretty(freeze)?)?;
        }
        Ok(CurvePoint {
            run_id: self.id.clone(),
            mode: self.cfg.mode,
            objective: self.cfg.objective,
            dim: self.cfg.quantizer.dim(),
            levels: self.cfg.quantizer.levels(),
            rate: self.cfg.quantizer.rate(),
            lambda_c: self.cfg.tradeoff.lambda_c,
            lambda_p: self.cfg.tradeoff.lambda_p,
            mse: m.mse,
            ce: m.ce,
            accuracy: m.accuracy,
            w1_proxy: m.w1_proxy,
            seed: self.cfg.seed,
        })
    }

    fn epoch(&mut self, epoch: u64, train: &Dataset, clf: &mut Classifier) -> Result<EpochStats> {
        let seed = self.cfg.seed;
        let b = self.cfg.batch_size as usize;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream_rng(seed, epoch, Stream::Shuffle));
        let mut dither = stream_rng(seed, epoch, Stream::Dither);
        let mut interp = stream_rng(seed, epoch, Stream::Interpolate);
        let mut stats = EpochStats::default();
        let critic_steps = self.cfg.critic_steps as usize;
        // Batches of one sample would make batch statistics degenerate.
        for (i, chunk) in order.chunks(b).filter(|c| c.len() > 1).enumerate() {
            let (x, labels) = train.gather(chunk);
            let n = chunk.len();
            let generator_step = self.codec.critic.is_none() || (i + 1) % critic_steps == 0;
            let train_encoder = !self.frozen();
            let y = self.codec.encoder.forward(&x, n, train_encoder, train_encoder && generator_step);
            let q = quantize_batch(y, self.codec.spec, &mut dither);
            let xhat = self.codec.decoder.forward(&q.zhat, n, true, generator_step);
            if self.codec.critic.is_some() {
                let w1 = self.critic_step(&x, &xhat, n, &mut interp);
                stats.w1 += w1;
                stats.critic_steps += 1;
            }
            if generator_step {
                let loss = self.generator_step(&x, &xhat, &labels, &q, n, clf)?;
                ensure!(
                    loss.total.is_finite(),
                    "non-finite loss at epoch {} step {} of run {}",
                    epoch + 1,
                    i + 1,
                    self.id
                );
                stats.total += loss.total;
                stats.mse += loss.mse;
                stats.ce += loss.ce;
                stats.steps += 1;
            }
        }
        Ok(stats.averaged())
    }

    /// One gradient-penalized critic update on `x` (real) against `xhat` (fake); returns
    /// the batch's score gap `mean h(x) - mean h(xhat)` before the update.
    fn critic_step(&mut self, x: &[f32], xhat: &[f32], n: usize, rng: &mut ChaCha8Rng) -> f64 {
        let critic = self.codec.critic.as_mut().expect("critic present");
        let mut both = Vec::with_capacity(2 * n * PIXELS);
        both.extend_from_slice(x);
        both.extend_from_slice(xhat);
        let scores = critic.forward(&both, 2 * n);
        let inv = 1.0 / n as f32;
        let mut d = vec![-inv; n];
        d.extend(std::iter::repeat_n(inv, n));
        critic.backward(&d, true, false);
        let mut points = Vec::with_capacity(n * PIXELS);
        for s in 0..n {
            let eps: f32 = rng.gen_range(0.0..=1.0);
            let (r, f) = (&x[s * PIXELS..(s + 1) * PIXELS], &xhat[s * PIXELS..(s + 1) * PIXELS]);
            points.extend(r.iter().zip(f).map(|(a, b)| eps * a + (1.0 - eps) * b));
        }
        let norms = critic.gradient_penalty(&points, n, self.cfg.lambda_gp as f32, true);
        step(&mut self.critic_opt, critic);
        let real: f64 = scores[..n].iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let fake: f64 = scores[n..].iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        debug!(
            "critic gap {:.4} penalty {:.4}",
            real - fake,
            rdpc_core::objectives::gradient_penalty_from_norms(&norms, self.cfg.lambda_gp)
        );
        real - fake
    }

    fn generator_step(
        &mut self,
        x: &[f32],
        xhat: &[f32],
        labels: &[usize],
        q: &Quantized,
        n: usize,
        clf: &mut Classifier,
    ) -> Result<rdpc_core::objectives::LossBreakdown> {
        let cfg = &self.cfg;
        let scale = 2.0 / (n * PIXELS) as f32;
        let mut dxhat: Vec<f32> = xhat.iter().zip(x).map(|(a, b)| scale * (a - b)).collect();
        let mse = xhat.iter().zip(x).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / (n * PIXELS) as f64;
        let mut terms = LossTerms {
            mse,
            ..LossTerms::default()
        };
        match cfg.objective {
            Objective::Rdc => {
                let logits = clf.logits(xhat, n, true);
                let mut d = softmax_columns(&logits, CLASSES);
                let probs: Vec<f64> = transpose(&d, CLASSES, n).iter().map(|&v| v as f64).collect();
                terms.ce = ce_loss(labels, &probs, CLASSES)?.value;
                let lc = cfg.tradeoff.lambda_c as f32;
                if lc > 0.0 {
                    for (s, &l) in labels.iter().enumerate() {
                        d[l * n + s] -= 1.0;
                    }
                    for v in &mut d {
                        *v *= lc / n as f32;
                    }
                    for (a, g) in dxhat.iter_mut().zip(clf.backward(&d, false)) {
                        *a += g;
                    }
                }
            }
            Objective::Rdp => {
                let critic = self.codec.critic.as_mut().expect("perception runs have a critic");
                let fake = critic.forward(xhat, n);
                let real = critic.scores(x, n);
                let mean = |v: &[f32]| v.iter().map(|&s| s as f64).sum::<f64>() / n as f64;
                terms.w1_term = mean(&real) - mean(&fake);
                let lp = cfg.tradeoff.lambda_p as f32;
                if lp > 0.0 {
                    let d = vec![-lp / n as f32; n];
                    let g = critic.backward(&d, false, true).expect("input gradient requested");
                    for (a, g) in dxhat.iter_mut().zip(g) {
                        *a += g;
                    }
                }
            }
        }
        let loss = composite_loss(cfg.objective, cfg.mode, terms, cfg.tradeoff)?;
        let dzhat = self.codec.decoder.backward(&dxhat, true);
        step(&mut self.dec_opt, &mut self.codec.decoder);
        if !self.frozen() {
            let levels = self.codec.spec.levels();
            let t = cfg.temperature;
            let dy: Vec<f32> = dzhat
                .iter()
                .zip(q.y.iter().zip(&q.u))
                .map(|(&g, (&y, &u))| g * soft_quantize_derivative((y + u) as f64, levels, t) as f32)
                .collect();
            self.codec.encoder.backward(&dy, n);
            step(&mut self.enc_opt, &mut self.codec.encoder);
        }
        Ok(loss)
    }

    fn save_networks(&self) -> Result<()> {
        let c = &self.codec;
        let seed = self.cfg.seed;
        let extra = json!({"levels": c.spec.levels(), "mode": self.cfg.mode, "objective": self.cfg.objective});
        if !self.frozen() {
            checkpoint::save_module(&self.dir.join(files::ENCODER), "encoder", encoder_arch(c.spec.dim()), &c.encoder, &self.id, seed, extra.clone())?;
        }
        checkpoint::save_module(&self.dir.join(files::DECODER), "decoder", decoder_arch(c.spec.dim()), &c.decoder, &self.id, seed, extra.clone())?;
        if let Some(critic) = &c.critic {
            checkpoint::save_module(&self.dir.join(files::CRITIC), "critic", critic_arch(), critic, &self.id, seed, extra)?;
        }
        Ok(())
    }

    /// Every tensor needed to continue training: network states and optimizer moments.
    fn state_tensors(&mut self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = Vec::new();
        let mut push_module = |prefix: &str, m: &dyn Module| {
            let mut items = Vec::new();
            m.state(prefix, &mut items);
            out.extend(items.into_iter().map(|(n, t)| (n, t.clone())));
        };
        push_module("encoder", &self.codec.encoder);
        push_module("decoder", &self.codec.decoder);
        if let Some(c) = &self.codec.critic {
            push_module("critic", c);
        }
        for (name, opt) in [("adam.encoder", &self.enc_opt), ("adam.decoder", &self.dec_opt), ("adam.critic", &self.critic_opt)] {
            for (i, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
                out.push((format!("{name}.m{i}"), Tensor { shape: vec![m.len()], data: m.clone() }));
                out.push((format!("{name}.v{i}"), Tensor { shape: vec![v.len()], data: v.clone() }));
            }
        }
        out
    }

    fn save_state(&mut self, path: &Path) -> Result<()> {
        let tensors = self.state_tensors();
        let header = Header {
            kind: STATE_KIND.into(),
            arch: json!({"config": canonical(&self.cfg)}),
            fingerprint: String::new(),
            run_id: self.id.clone(),
            seed: self.cfg.seed,
            tensors: tensors
                .iter()
                .map(|(n, t)| checkpoint::TensorInfo { name: n.clone(), shape: t.shape.clone() })
                .collect(),
            extra: json!({
                "epochs_done": self.start_epoch,
                "steps": [self.enc_opt.step, self.dec_opt.step, self.critic_opt.step],
                "freeze": self.freeze,
            }),
        };
        let refs: Vec<(String, &Tensor)> = tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
        checkpoint::write(path, &header, &refs)
    }

    fn load_state(&mut self, path: &Path) -> Result<()> {
        let (header, tensors) = checkpoint::read(path)?;
        ensure!(header.kind == STATE_KIND && header.run_id == self.id, "{} belongs to another run", path.display());
        let mut by_name: std::collections::HashMap<String, Tensor> =
            header.tensors.iter().map(|t| t.name.clone()).zip(tensors).collect();
        let mut take = |name: &str| by_name.remove(name).with_context(|| format!("state is missing `{name}`"));
        {
            let mut slots = Vec::new();
            self.codec.encoder.state_mut("encoder", &mut slots);
            self.codec.decoder.state_mut("decoder", &mut slots);
            if let Some(c) = &mut self.codec.critic {
                c.state_mut("critic", &mut slots);
            }
            for (name, slot) in slots {
                let t = take(&name)?;
                ensure!(t.shape == slot.shape, "state tensor `{name}` has the wrong shape");
                *slot = t;
            }
        }
        for (name, opt) in [
            ("adam.encoder", &mut self.enc_opt),
            ("adam.decoder", &mut self.dec_opt),
            ("adam.critic", &mut self.critic_opt),
        ] {
            opt.m.clear();
            opt.v.clear();
            let mut i = 0;
            while let Ok(m) = take(&format!("{name}.m{i}")) {
                opt.m.push(m.data);
                opt.v.push(take(&format!("{name}.v{i}"))?.data);
                i += 1;
            }
        }
        let steps: Vec<u64> = serde_json::from_value(header.extra["steps"].clone())?;
        ensure!(steps.len() == 3, "malformed optimizer step counts");
        self.enc_opt.step = steps[0];
        self.dec_opt.step = steps[1];
        self.critic_opt.step = steps[2];
        self.start_epoch = serde_json::from_value(header.extra["epochs_done"].clone())?;
        if let Some(freeze) = &mut self.freeze {
            let saved: Option<FreezeRecord> = serde_json::from_value(header.extra["freeze"].clone())?;
            if let Some(saved) = saved {
                ensure!(saved.source_fingerprint == freeze.source_fingerprint, "encoder source changed since the run started");
                *freeze = saved;
            }
            ensure!(fingerprint(&self.codec.encoder) == freeze.source_fingerprint, "saved state holds a different encoder");
        }
        Ok(())
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct EpochStats {
    total: f64,
    mse: f64,
    ce: f64,
    w1: f64,
    steps: usize,
    critic_steps: usize,
}

impl EpochStats {
    fn averaged(self) -> Self {
        let g = self.steps.max(1) as f64;
        Self {
            total: self.total / g,
            mse: self.mse / g,
            ce: self.ce / g,
            w1: self.w1 / self.critic_steps.max(1) as f64,
            ..self
        }
    }
}
