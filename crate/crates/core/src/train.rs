//! Training: augmentation policies, the two-phase optimization protocol,
//! and the repeated stratified k-fold evaluation harness.
//!
//! Phase 1 pretrains the fusion extractor (conv stack + alpha) with a
//! throwaway linear probe on single slices; phase 2 trains the full depth
//! encoder end to end starting from the phase-1 extractor weights. The
//! optimizer is seeded SGD with momentum. Batch members are processed in
//! parallel but gradients accumulate in sample order, so a fixed seed gives
//! a bit-identical checkpoint regardless of thread count.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::fusion::{rgb_dropout, RgbImage};
use crate::model::{
    backward_sample, forward_sample, predict, probe_backward, probe_forward, ModelInput,
};
use crate::params::{ModelConfig, ModelParams, ProbeHead};
use crate::recon::{depth_stack, SarSlice};
use crate::scene::{wind_perturb, Wetness};

/// Per-sample augmentation: camera dropout, lighting scale, breeze motion.
/// Each knob uses an independently derived seed.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    /// Probability of removing the camera modality entirely.
    pub rgb_dropout_p: f64,
    /// Uniform lighting factor range; `None` leaves the image untouched.
    pub lighting: Option<(f64, f64)>,
    /// Range-jitter amplitude applied to the data cube (mm); 0 disables.
    pub wind_mm: f64,
}

impl AugmentPolicy {
    /// No-op policy: every field is an exact identity.
    pub fn null() -> Self {
        AugmentPolicy { rgb_dropout_p: 0.0, lighting: None, wind_mm: 0.0 }
    }

    /// Training default: 20% camera dropout, lighting in [0.4, 1.2], no wind.
    pub fn default_policy() -> Self {
        AugmentPolicy { rgb_dropout_p: 0.2, lighting: Some((0.4, 1.2)), wind_mm: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rgb_dropout_p) {
            return Err(Error::config("rgb_dropout_p must be in [0, 1]"));
        }
        if let Some((lo, hi)) = self.lighting {
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::config("lighting range must satisfy 0 < lo <= hi"));
            }
        }
        if !(0.0..=2.0).contains(&self.wind_mm) {
            return Err(Error::config("wind amplitude must be in [0, 2] mm"));
        }
        Ok(())
    }
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Apply the policy to one sample. The null policy returns a bit-identical
/// copy; each enabled knob draws from its own seeded stream.
pub fn augment(sample: &Sample, policy: &AugmentPolicy, seed: u64) -> Result<Sample> {
    policy.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wind_seed: u64 = rng.gen();
    let light_seed: u64 = rng.gen();
    let drop_seed: u64 = rng.gen();

    let mut out = sample.clone();
    if policy.wind_mm > 0.0 {
        out.cube = wind_perturb(&sample.cube, policy.wind_mm, wind_seed)?;
        out.stack =
            depth_stack(&out.cube, sample.stack.z_min, sample.stack.z_max, sample.stack.step)?;
        out.meta.wind_mm = policy.wind_mm;
    }
    let factor = match policy.lighting {
        None => 1.0,
        Some((lo, hi)) if hi > lo => ChaCha8Rng::seed_from_u64(light_seed).gen_range(lo..hi),
        Some((lo, _)) => lo,
    };
    out.rgb = out.rgb.scaled(factor);
    out.meta.lighting = sample.meta.lighting * factor;
    out.rgb = rgb_dropout(&out.rgb, policy.rgb_dropout_p, drop_seed)?;
    Ok(out)
}

/// Hyperparameters for the two-phase protocol. The optimizer is SGD with
/// momentum; each phase's learning rate follows a half-cosine decay to
/// zero over its epoch budget (`cosine_decay = false` keeps it constant),
/// and `stop_loss > 0` ends a phase early once the epoch loss falls below
/// it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainHyper {
    pub model: ModelConfig,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub momentum: f64,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: AugmentPolicy,
    pub cosine_decay: bool,
    pub stop_loss: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            model: ModelConfig::default(),
            lr_phase1: 0.003,
            lr_phase2: 0.003,
            momentum: 0.9,
            epochs_phase1: 4,
            epochs_phase2: 20,
            batch_size: 8,
            seed: 0,
            augment: AugmentPolicy::default_policy(),
            cosine_decay: true,
            stop_loss: 0.0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.augment.validate()?;
        if !(self.lr_phase1 >= 0.0 && self.lr_phase2 >= 0.0) {
            return Err(Error::config("learning rates must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must be in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(self.stop_loss >= 0.0) {
            return Err(Error::config("stop_loss must be non-negative"));
        }
        Ok(())
    }

    /// Learning rate for one epoch of a phase.
    fn lr_at(&self, base: f64, epoch: usize, total: usize) -> f64 {
        if !self.cosine_decay || total <= 1 {
            return base;
        }
        base * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos())
    }
}

/// One history row.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub phase: u8,
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Trained parameters plus the per-epoch history.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub history: Vec<EpochStats>,
}

/// History rows as CSV (`phase,epoch,loss,accuracy`).
pub fn history_to_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("phase,epoch,loss,accuracy\n");
    for row in history {
        out.push_str(&format!("{},{},{},{}\n", row.phase, row.epoch, row.loss, row.accuracy));
    }
    out
}

struct Sgd {
    velocity: Vec<f64>,
    lr: f64,
    momentum: f64,
}

impl Sgd {
    fn new(len: usize, lr: f64, momentum: f64) -> Self {
        Sgd { velocity: vec![0.0; len], lr, momentum }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        for i in 0..params.len() {
            self.velocity[i] = self.momentum * self.velocity[i] + grads[i];
            params[i] -= self.lr * self.velocity[i];
        }
    }
}

/// The per-epoch augmented view of one sample: normalized slices (shared
/// with the base cache when wind is off) and the augmented camera image.
struct EpochView<'a> {
    slices: std::borrow::Cow<'a, [SarSlice]>,
    rgb: RgbImage,
}

fn build_views<'a>(
    samples: &[&Sample],
    base_slices: &'a [Vec<SarSlice>],
    policy: &AugmentPolicy,
    seed: u64,
    phase: u64,
    epoch: usize,
) -> Result<Vec<EpochView<'a>>> {
    samples
        .par_iter()
        .enumerate()
        .map(|(i, sample)| {
            let aug_seed = mix_seed(seed, phase << 32 | epoch as u64, i as u64);
            if policy.wind_mm > 0.0 {
                let augmented = augment(sample, policy, aug_seed)?;
                let slices: Vec<SarSlice> =
                    augmented.stack.slices.iter().map(|s| s.normalized01()).collect();
                Ok(EpochView { slices: std::borrow::Cow::Owned(slices), rgb: augmented.rgb })
            } else {
                // only the camera changes; reuse the cached radar slices
                let factor = {
                    let mut rng = ChaCha8Rng::seed_from_u64(aug_seed);
                    let _wind: u64 = rng.gen();
                    let light_seed: u64 = rng.gen();
                    match policy.lighting {
                        None => 1.0,
                        Some((lo, hi)) if hi > lo => {
                            ChaCha8Rng::seed_from_u64(light_seed).gen_range(lo..hi)
                        }
                        Some((lo, _)) => lo,
                    }
                };
                let drop_seed = {
                    let mut rng = ChaCha8Rng::seed_from_u64(aug_seed);
                    let _wind: u64 = rng.gen();
                    let _light: u64 = rng.gen();
                    rng.gen()
                };
                let rgb = rgb_dropout(&sample.rgb.scaled(factor), policy.rgb_dropout_p, drop_seed)?;
                Ok(EpochView { slices: std::borrow::Cow::Borrowed(&base_slices[i]), rgb })
            }
        })
        .collect()
}

/// Train on the full dataset.
pub fn train(dataset: &[Sample], hyper: &TrainHyper) -> Result<TrainOutput> {
    let refs: Vec<&Sample> = dataset.iter().collect();
    train_subset(&refs, hyper)
}

/// Train on a subset given by reference (used by the k-fold harness).
pub fn train_subset(samples: &[&Sample], hyper: &TrainHyper) -> Result<TrainOutput> {
    if samples.is_empty() {
        return Err(Error::domain("cannot train on an empty dataset"));
    }
    hyper.validate()?;
    let mut params = ModelParams::init(&hyper.model, hyper.seed)?;
    let mut history = Vec::new();

    let base_slices: Vec<Vec<SarSlice>> =
        samples.par_iter().map(|s| s.normalized_slices()).collect();
    let depths: Vec<Vec<f64>> = samples.iter().map(|s| s.depths()).collect();
    let labels: Vec<f64> = samples.iter().map(|s| s.label.label()).collect();
    let n_slices = base_slices[0].len();

    // ---- phase 1: extractor + probe on single slices ----
    let mut probe = ProbeHead::init(hyper.model.d_model(), mix_seed(hyper.seed, 0xbeef, 0));
    let mut flat = params.to_flat();
    let mut probe_flat: Vec<f64> = probe.linear.w.iter().chain(&probe.linear.b).cloned().collect();
    let mut opt = Sgd::new(flat.len(), hyper.lr_phase1, hyper.momentum);
    let mut probe_opt = Sgd::new(probe_flat.len(), hyper.lr_phase1, hyper.momentum);
    let mut order: Vec<(usize, usize)> =
        (0..samples.len()).flat_map(|i| (0..n_slices).map(move |j| (i, j))).collect();

    for epoch in 0..hyper.epochs_phase1 {
        let lr = hyper.lr_at(hyper.lr_phase1, epoch, hyper.epochs_phase1);
        opt.lr = lr;
        probe_opt.lr = lr;
        let views = build_views(samples, &base_slices, &hyper.augment, hyper.seed, 1, epoch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(hyper.seed, 1, epoch as u64));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(hyper.batch_size) {
            let results: Vec<_> = batch
                .par_iter()
                .map(|&(i, j)| {
                    let trace = probe_forward(&params, &probe, &views[i].slices[j], &views[i].rgb)?;
                    let (loss, grads, pgrads) =
                        probe_backward(&params, &probe, &trace, labels[i])?;
                    Ok((loss, trace.prob, grads.to_flat(), pgrads, labels[i]))
                })
                .collect::<Result<_>>()?;

            let inv = 1.0 / batch.len() as f64;
            let mut gsum = vec![0.0; flat.len()];
            let mut pgsum = vec![0.0; probe_flat.len()];
            for (loss, prob, g, pg, label) in &results {
                epoch_loss += loss;
                if (*prob >= 0.5) == (*label >= 0.5) {
                    correct += 1;
                }
                for (a, b) in gsum.iter_mut().zip(g) {
                    *a += b * inv;
                }
                for (a, b) in
                    pgsum.iter_mut().zip(pg.linear.w.iter().chain(&pg.linear.b))
                {
                    *a += b * inv;
                }
            }
            opt.step(&mut flat, &gsum);
            probe_opt.step(&mut probe_flat, &pgsum);
            params.assign_from_flat(&flat)?;
            let d = probe.linear.n_in;
            probe.linear.w.copy_from_slice(&probe_flat[..d]);
            probe.linear.b[0] = probe_flat[d];
        }
        let loss = epoch_loss / order.len() as f64;
        if !loss.is_finite() {
            return Err(Error::numeric(format!("phase 1 diverged at epoch {epoch}: loss {loss}")));
        }
        history.push(EpochStats {
            phase: 1,
            epoch,
            loss,
            accuracy: correct as f64 / order.len() as f64,
        });
        if hyper.stop_loss > 0.0 && loss < hyper.stop_loss {
            break;
        }
    }
    // the probe is discarded here; phase 2 keeps the pretrained extractor

    // ---- phase 2: full model end to end ----
    let mut opt = Sgd::new(flat.len(), hyper.lr_phase2, hyper.momentum);
    let mut sample_order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..hyper.epochs_phase2 {
        opt.lr = hyper.lr_at(hyper.lr_phase2, epoch, hyper.epochs_phase2);
        let views = build_views(samples, &base_slices, &hyper.augment, hyper.seed, 2, epoch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(hyper.seed, 2, epoch as u64));
        sample_order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut correct = 0usize;
        for batch in sample_order.chunks(hyper.batch_size) {
            let results: Vec<_> = batch
                .par_iter()
                .map(|&i| {
                    let input = ModelInput {
                        norm_slices: &views[i].slices,
                        depths: &depths[i],
                        rgb: &views[i].rgb,
                    };
                    let trace = forward_sample(&params, &input)?;
                    let (loss, grads) = backward_sample(&params, &trace, labels[i])?;
                    Ok((loss, trace.prob(), grads.to_flat(), labels[i]))
                })
                .collect::<Result<_>>()?;

            let inv = 1.0 / batch.len() as f64;
            let mut gsum = vec![0.0; flat.len()];
            for (loss, prob, g, label) in &results {
                epoch_loss += loss;
                if (*prob >= 0.5) == (*label >= 0.5) {
                    correct += 1;
                }
                for (a, b) in gsum.iter_mut().zip(g) {
                    *a += b * inv;
                }
            }
            opt.step(&mut flat, &gsum);
            params.assign_from_flat(&flat)?;
        }
        let loss = epoch_loss / samples.len() as f64;
        if !loss.is_finite() {
            return Err(Error::numeric(format!("phase 2 diverged at epoch {epoch}: loss {loss}")));
        }
        history.push(EpochStats {
            phase: 2,
            epoch,
            loss,
            accuracy: correct as f64 / samples.len() as f64,
        });
    }

    if !params.all_finite() {
        return Err(Error::numeric("training produced non-finite parameters"));
    }
    Ok(TrainOutput { params, history })
}

/// Accuracy plus the 2x2 confusion matrix (wet = positive class).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub true_pos: usize,
    pub true_neg: usize,
    pub false_pos: usize,
    pub false_neg: usize,
}

impl Metrics {
    pub fn total(&self) -> usize {
        self.true_pos + self.true_neg + self.false_pos + self.false_neg
    }
}

/// Evaluation-time perturbations for resilience studies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalCondition {
    Normal,
    /// Camera failure: the RGB input is zeroed.
    RgbBlackout,
    /// Breeze at capture time: range jitter on the cube, re-imaged.
    Wind { amplitude_mm: f64, seed: u64 },
}

/// Threshold predictions at 0.5 and count the confusion matrix.
pub fn evaluate(params: &ModelParams, samples: &[Sample]) -> Result<Metrics> {
    evaluate_under(params, samples, EvalCondition::Normal)
}

/// Evaluate with an optional perturbation applied to every sample.
pub fn evaluate_under(
    params: &ModelParams,
    samples: &[Sample],
    condition: EvalCondition,
) -> Result<Metrics> {
    let refs: Vec<&Sample> = samples.iter().collect();
    evaluate_refs(params, &refs, condition)
}

pub fn evaluate_refs(
    params: &ModelParams,
    samples: &[&Sample],
    condition: EvalCondition,
) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::domain("cannot evaluate on an empty sample list"));
    }
    let preds: Vec<(f64, f64)> = samples
        .par_iter()
        .enumerate()
        .map(|(i, sample)| {
            let (slices, rgb) = match condition {
                EvalCondition::Normal => (sample.normalized_slices(), sample.rgb.clone()),
                EvalCondition::RgbBlackout => (
                    sample.normalized_slices(),
                    RgbImage::zeros(sample.rgb.w, sample.rgb.h),
                ),
                EvalCondition::Wind { amplitude_mm, seed } => {
                    let cube =
                        wind_perturb(&sample.cube, amplitude_mm, mix_seed(seed, 3, i as u64))?;
                    let stack = depth_stack(
                        &cube,
                        sample.stack.z_min,
                        sample.stack.z_max,
                        sample.stack.step,
                    )?;
                    let slices = stack.slices.iter().map(|s| s.normalized01()).collect();
                    (slices, sample.rgb.clone())
                }
            };
            let depths = sample.depths();
            let input = ModelInput { norm_slices: &slices, depths: &depths, rgb: &rgb };
            Ok((predict(params, &input)?, sample.label.label()))
        })
        .collect::<Result<_>>()?;

    let (mut tp, mut tn, mut fp, mut fnn) = (0usize, 0usize, 0usize, 0usize);
    for (prob, label) in preds {
        let wet = prob >= 0.5;
        match (wet, label >= 0.5) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
        }
    }
    Ok(Metrics {
        accuracy: (tp + tn) as f64 / samples.len() as f64,
        true_pos: tp,
        true_neg: tn,
        false_pos: fp,
        false_neg: fnn,
    })
}

/// One held-out fold's result.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub repeat: usize,
    pub fold: usize,
    pub n_eval: usize,
    pub accuracy: f64,
}

/// All fold results plus the aggregate accuracy, reported as
/// mean +/- sample standard deviation over the fold accuracies.
#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub k: usize,
    pub repeats: usize,
    pub folds: Vec<FoldResult>,
    pub mean: f64,
    pub std: f64,
}

impl CvReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("repeat,fold,n_eval,accuracy\n");
        for f in &self.folds {
            out.push_str(&format!("{},{},{},{}\n", f.repeat, f.fold, f.n_eval, f.accuracy));
        }
        out
    }

    pub fn summary_json(&self) -> String {
        format!(
            "{{\"k\": {}, \"repeats\": {}, \"accuracy_mean\": {:.6}, \"accuracy_std\": {:.6}}}",
            self.k, self.repeats, self.mean, self.std
        )
    }

    /// `xx.xx% +/- yy.yy%`.
    pub fn summary_line(&self) -> String {
        format!("accuracy {:.2}% \u{00b1} {:.2}%", 100.0 * self.mean, 100.0 * self.std)
    }
}

/// Aggregate a list of accuracies into mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Stratified fold assignment: per class, a seeded shuffle dealt round
/// robin, so fold sizes differ by at most one and class ratios are
/// preserved within one sample.
pub fn stratified_folds(
    labels: &[Wetness],
    k: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if k < 2 || k > labels.len() {
        return Err(Error::domain(format!("fold count {k} invalid for {} samples", labels.len())));
    }
    let mut assignment = vec![0usize; labels.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next_fold = 0usize;
    for class in [Wetness::Dry, Wetness::Wet] {
        let mut idx: Vec<usize> =
            (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            assignment[i] = next_fold % k;
            next_fold += 1;
        }
    }
    Ok(assignment)
}

/// Repeated stratified k-fold cross validation. Every training set must
/// contain both classes; otherwise a stratification error is raised.
pub fn kfold_cv(
    dataset: &[Sample],
    k: usize,
    repeats: usize,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<CvReport> {
    if dataset.len() < k {
        return Err(Error::domain("dataset smaller than fold count"));
    }
    if repeats == 0 {
        return Err(Error::domain("need at least one repeat"));
    }
    let labels: Vec<Wetness> = dataset.iter().map(|s| s.label).collect();
    let mut folds = Vec::with_capacity(k * repeats);
    for repeat in 0..repeats {
        let assignment = stratified_folds(&labels, k, mix_seed(seed, 0xf01d, repeat as u64))?;
        for fold in 0..k {
            let train_set: Vec<&Sample> = dataset
                .iter()
                .zip(&assignment)
                .filter(|(_, &a)| a != fold)
                .map(|(s, _)| s)
                .collect();
            let eval_set: Vec<&Sample> = dataset
                .iter()
                .zip(&assignment)
                .filter(|(_, &a)| a == fold)
                .map(|(s, _)| s)
                .collect();
            let has_both = |set: &[&Sample]| {
                set.iter().any(|s| s.label == Wetness::Dry)
                    && set.iter().any(|s| s.label == Wetness::Wet)
            };
            if !has_both(&train_set) {
                return Err(Error::config(format!(
                    "stratification failed: training set for repeat {repeat} fold {fold} \
                     is missing a class"
                )));
            }
            let mut fold_hyper = hyper.clone();
            fold_hyper.seed = mix_seed(hyper.seed, repeat as u64, fold as u64);
            let out = train_subset(&train_set, &fold_hyper)?;
            let metrics = evaluate_refs(&out.params, &eval_set, EvalCondition::Normal)?;
            folds.push(FoldResult {
                repeat,
                fold,
                n_eval: eval_set.len(),
                accuracy: metrics.accuracy,
            });
        }
    }
    let accs: Vec<f64> = folds.iter().map(|f| f.accuracy).collect();
    let (mean, std) = mean_std(&accs);
    Ok(CvReport { k, repeats, folds, mean, std })
}

/// Write metrics rows as CSV (used by the evaluation subcommands).
pub fn metrics_to_csv(metrics: &Metrics) -> String {
    format!(
        "accuracy,true_pos,true_neg,false_pos,false_neg,total\n{},{},{},{},{},{}\n",
        metrics.accuracy,
        metrics.true_pos,
        metrics.true_neg,
        metrics.false_pos,
        metrics.false_neg,
        metrics.total()
    )
}
