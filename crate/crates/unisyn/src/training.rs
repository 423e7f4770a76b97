//! Training orchestration: experiment configuration, the LR schedule,
//! per-iteration condition sampling, generator/discriminator alternation,
//! the JSON-lines loss log and periodic checkpoints.

use crate::conditioning::{
    curriculum_missing_count, sample_condition, zero_impute, AvailabilityCondition,
    CurriculumSchedule, UniformPolicy,
};
use crate::data::{extract_center_slices, mean_normalize, Dataset, NormalizationMode, Split};
use crate::decoder::DecoderConfig;
use crate::discriminator::{DiscriminatorConfig, Discriminators};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::generator::Generator;
use crate::losses::{
    discriminator_loss, discriminator_score_grads, generator_adversarial_loss,
    generator_adversarial_score_grad, reconstruction_loss, reconstruction_loss_grad,
    synthesis_loss, synthesis_loss_grad, total_generator_loss, LossRecord, LossWeights,
};
use crate::nn::param::Parameterized;
use crate::optim::{Optimizer, OptimizerKind};
use crate::scalar::Scalar;
use ndarray::{Array3, Array4, ArrayView4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub modality_names: Vec<String>,
    /// Square slice size fed to the model.
    pub image_size: usize,
    /// Axial slices taken from the center of each volume.
    pub n_slices: usize,
    pub normalization: NormalizationMode,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
    pub discriminator: DiscriminatorConfig,
    pub loss_weights: LossWeights,
    pub curriculum: CurriculumSchedule,
    pub uniform_policy: UniformPolicy,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Epoch at which the linear decay to zero begins.
    pub decay_start_epoch: usize,
    pub batch_size: usize,
    /// Checkpoint cadence in epochs.
    pub checkpoint_every: usize,
    /// Disable for pure supervised regression (with lambda_adv = 0).
    pub train_discriminator: bool,
    pub seed: u64,
    pub dataset_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            modality_names: vec!["m1".into(), "m2".into(), "m3".into(), "m4".into()],
            image_size: 64,
            n_slices: 4,
            normalization: NormalizationMode::default(),
            encoder: EncoderConfig::default(),
            fusion: FusionConfig::default(),
            decoder: DecoderConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            loss_weights: LossWeights::default(),
            curriculum: CurriculumSchedule::default(),
            uniform_policy: UniformPolicy::default(),
            optimizer: OptimizerKind::default(),
            learning_rate: 2e-4,
            epochs: 200,
            decay_start_epoch: 50,
            batch_size: 32,
            checkpoint_every: 10,
            train_discriminator: true,
            seed: 17,
            dataset_dir: PathBuf::from("dataset"),
            run_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn modalities(&self) -> usize {
        self.modality_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities() < 2 {
            return Err(Error::Config(
                "need at least two modalities to train imputation".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.decay_start_epoch > self.epochs {
            return Err(Error::Config(
                "decay start epoch must not exceed total epochs".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint cadence must be positive".into()));
        }
        self.encoder.validate()?;
        self.loss_weights.validate()?;
        self.optimizer.validate()?;
        let down = 1usize << (self.encoder.n_scales() - 1);
        if self.image_size == 0 || self.image_size % down != 0 {
            return Err(Error::Config(format!(
                "image size {} must be divisible by {down} (one halving per scale)",
                self.image_size
            )));
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| Error::Config(format!("bad experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }
}

/// Per-step learning rate: constant before `decay_start_epoch`, then linear
/// to zero at `epochs`.
pub fn lr_at_epoch(epoch: usize, cfg: &ExperimentConfig) -> Result<f64> {
    if epoch > cfg.epochs {
        return Err(Error::Misuse(format!(
            "epoch {epoch} beyond configured total {}",
            cfg.epochs
        )));
    }
    if epoch < cfg.decay_start_epoch {
        Ok(cfg.learning_rate)
    } else {
        let span = (cfg.epochs - cfg.decay_start_epoch) as f64;
        Ok(cfg.learning_rate * (cfg.epochs - epoch) as f64 / span)
    }
}

/// Everything that evolves during a run.
#[derive(Debug)]
pub struct TrainState<F> {
    pub cfg: ExperimentConfig,
    pub generator: Generator<F>,
    pub discriminators: Discriminators<F>,
    pub gen_opt: Optimizer<F>,
    pub dis_opt: Optimizer<F>,
    /// Next epoch to run.
    pub epoch: usize,
    /// Global iteration counter.
    pub iter: usize,
    pub rng: ChaCha8Rng,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub record: LossRecord,
    pub condition: AvailabilityCondition,
    pub lr: f64,
}

impl<F: Scalar> TrainState<F> {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let m = cfg.modalities();
        let generator =
            Generator::new(&mut rng, m, &cfg.encoder, &cfg.fusion, &cfg.decoder)?;
        let discriminators = Discriminators::new(&mut rng, m, &cfg.discriminator);
        let (gen_opt, dis_opt) = (
            Optimizer::new(cfg.optimizer),
            Optimizer::new(cfg.optimizer),
        );
        Ok(TrainState {
            cfg,
            generator,
            discriminators,
            gen_opt,
            dis_opt,
            epoch: 0,
            iter: 0,
            rng,
        })
    }

    fn adversarial_active(&self) -> bool {
        self.cfg.train_discriminator && self.cfg.loss_weights.lambda_adv > 0.0
    }

    /// One optimization iteration on a complete target batch [B, M, H, W]:
    /// sample a missing scenario, update the discriminators on it, then the
    /// generator.
    pub fn training_step(&mut self, targets: &ArrayView4<F>) -> Result<StepOutcome> {
        let m = self.cfg.modalities();
        let rule = curriculum_missing_count(
            self.epoch,
            &self.cfg.curriculum,
            m,
            self.cfg.uniform_policy,
        );
        let ac = sample_condition(&mut self.rng, rule, m)?;
        ac.check_training()?;
        let lr = lr_at_epoch(self.epoch, &self.cfg)?;
        let pixels = zero_impute(targets, &ac)?;
        let (out, cache) = self.generator.forward(&pixels.view(), &ac)?;

        let w = self.cfg.loss_weights;
        let mut l_adv = 0.0;
        let mut l_dis = 0.0;
        let mut g_adv_images: Option<Array4<F>> = None;

        if self.adversarial_active() {
            // discriminator update on detached fakes, per missing modality
            self.discriminators.zero_grads();
            let mut fake_scores = vec![Array4::<F>::zeros((0, 0, 0, 0)); m];
            let mut real_scores = vec![Array4::<F>::zeros((0, 0, 0, 0)); m];
            for i in ac.missing_indices() {
                let fake = out.images.slice(ndarray::s![.., i..i + 1, .., ..]);
                let real = targets.slice(ndarray::s![.., i..i + 1, .., ..]);
                let disc = &mut self.discriminators.discs[i];
                let (fs, fcache) = disc.forward(&fake)?;
                let (rs, rcache) = disc.forward(&real)?;
                let (gf, gr) = discriminator_score_grads(&fs.view(), &rs.view());
                disc.backward(&fcache, &gf.view())?;
                disc.backward(&rcache, &gr.view())?;
                fake_scores[i] = fs;
                real_scores[i] = rs;
            }
            l_dis = discriminator_loss(&fake_scores, &real_scores, &ac)?.to_f64c();
            self.dis_opt.step(&mut self.discriminators, lr);

            // generator adversarial signal from the updated discriminators
            self.discriminators.zero_grads();
            let mut g_images = Array4::<F>::zeros(out.images.raw_dim());
            let mut fake_scores2 = vec![Array4::<F>::zeros((0, 0, 0, 0)); m];
            for i in ac.missing_indices() {
                let fake = out.images.slice(ndarray::s![.., i..i + 1, .., ..]);
                let disc = &mut self.discriminators.discs[i];
                let (fs, fcache) = disc.forward(&fake)?;
                let g_score = generator_adversarial_score_grad(&fs.view());
                let g_fake = disc.backward(&fcache, &g_score.view())?;
                g_images
                    .slice_mut(ndarray::s![.., i..i + 1, .., ..])
                    .assign(&g_fake);
                fake_scores2[i] = fs;
            }
            // the pass-through backward above left stale grads behind
            self.discriminators.zero_grads();
            l_adv = generator_adversarial_loss(&fake_scores2, &real_scores, &ac)?.to_f64c();
            g_adv_images = Some(g_images);
        }

        let l_syn = synthesis_loss(&out.images.view(), targets, &ac)?;
        let l_rec = reconstruction_loss(&out.images.view(), targets, &ac)?;
        let mut g_images = synthesis_loss_grad(&out.images.view(), targets, &ac)?
            .mapv(|v| v * F::from_f64c(w.lambda_syn));
        g_images.zip_mut_with(
            &reconstruction_loss_grad(&out.images.view(), targets, &ac)?,
            |g, &r| *g += F::from_f64c(w.lambda_rec) * r,
        );
        if let Some(ga) = g_adv_images {
            g_images.zip_mut_with(&ga, |g, &a| *g += F::from_f64c(w.lambda_adv) * a);
        }
        self.generator.zero_grads();
        self.generator.backward(&cache, &g_images.view())?;
        self.gen_opt.step(&mut self.generator, lr);

        let record = LossRecord {
            l_syn: l_syn.to_f64c(),
            l_rec: l_rec.to_f64c(),
            l_adv,
            l_gen_total: total_generator_loss(
                l_syn.to_f64c(),
                l_rec.to_f64c(),
                l_adv,
                &w,
            ),
            l_dis,
        };
        if let Some(term) = record.all_finite() {
            return Err(Error::Divergence {
                epoch: self.epoch,
                iter: self.iter,
                term: term.to_string(),
            });
        }
        self.iter += 1;
        Ok(StepOutcome {
            record,
            condition: ac,
            lr,
        })
    }
}

/// Flatten the train split into model-ready slice samples.
pub fn load_training_samples(cfg: &ExperimentConfig, split: Split) -> Result<Vec<Array3<f32>>> {
    let ds = Dataset::open(&cfg.dataset_dir)?;
    let mut samples = Vec::new();
    for id in ds.subject_ids(split) {
        let vol = mean_normalize(&ds.load(id)?, cfg.normalization)?;
        samples.extend(extract_center_slices(
            &vol,
            cfg.n_slices,
            (cfg.image_size, cfg.image_size),
        )?);
    }
    Ok(samples)
}

/// Per-subject slice stacks for evaluation.
pub fn load_eval_subjects(
    cfg: &ExperimentConfig,
    split: Split,
) -> Result<Vec<Vec<Array3<f32>>>> {
    let ds = Dataset::open(&cfg.dataset_dir)?;
    let mut subjects = Vec::new();
    for id in ds.subject_ids(split) {
        let vol = mean_normalize(&ds.load(id)?, cfg.normalization)?;
        subjects.push(extract_center_slices(
            &vol,
            cfg.n_slices,
            (cfg.image_size, cfg.image_size),
        )?);
    }
    Ok(subjects)
}

pub fn stack_targets<F: Scalar>(samples: &[&Array3<f32>]) -> Array4<F> {
    let (m, h, w) = samples[0].dim();
    let mut targets = Array4::<F>::zeros((samples.len(), m, h, w));
    for (bi, s) in samples.iter().enumerate() {
        targets
            .index_axis_mut(Axis(0), bi)
            .assign(&s.mapv(|v| F::from_f64c(v as f64)));
    }
    targets
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub last_record: Option<LossRecord>,
}

/// Run (or resume) a full training loop. On resume the checkpoint's embedded
/// configuration is authoritative.
pub fn train<F: Scalar>(
    cfg: ExperimentConfig,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut state: TrainState<F> = match resume {
        Some(path) => crate::checkpoint::load_checkpoint(path)?,
        None => TrainState::new(cfg)?,
    };
    let cfg = state.cfg.clone();
    std::fs::create_dir_all(&cfg.run_dir).map_err(|e| Error::io(&cfg.run_dir, e))?;
    // echo the effective configuration into the run directory
    let cfg_path = cfg.run_dir.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml_string()).map_err(|e| Error::io(&cfg_path, e))?;
    let log_path = cfg.run_dir.join("log.jsonl");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let samples = load_training_samples(&cfg, Split::Train)?;
    if samples.is_empty() {
        return Err(Error::InsufficientSamples(
            "training split is empty".into(),
        ));
    }

    let mut last_record = None;
    while state.epoch < cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        // Fisher-Yates off the run rng keeps the whole loop deterministic
        for i in (1..order.len()).rev() {
            let j = state.rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Array3<f32>> = chunk.iter().map(|&i| &samples[i]).collect();
            let targets = stack_targets::<F>(&batch);
            let out = state.training_step(&targets.view())?;
            let row = serde_json::json!({
                "epoch": state.epoch,
                "iter": state.iter - 1,
                "ac": out.condition.to_string(),
                "l_syn": out.record.l_syn,
                "l_rec": out.record.l_rec,
                "l_adv": out.record.l_adv,
                "l_gen": out.record.l_gen_total,
                "l_dis": out.record.l_dis,
                "lr": out.lr,
            });
            writeln!(log, "{row}").map_err(|e| Error::io(&log_path, e))?;
            last_record = Some(out.record);
        }
        state.epoch += 1;
        if state.epoch % cfg.checkpoint_every == 0 && state.epoch < cfg.epochs {
            let path = cfg.run_dir.join(format!("ckpt_epoch{:04}.umsc", state.epoch));
            crate::checkpoint::save_checkpoint(&mut state, &path)?;
        }
    }
    let final_checkpoint = cfg.run_dir.join("ckpt_final.umsc");
    crate::checkpoint::save_checkpoint(&mut state, &final_checkpoint)?;
    Ok(TrainOutcome {
        run_dir: cfg.run_dir.clone(),
        final_checkpoint,
        log_path,
        last_record,
    })
}
