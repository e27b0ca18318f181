//! Signature GAN training: critic with gradient penalty, triplet encoder and
//! class-conditioned generator, one bundle per fault type.

mod early_stop;
mod losses;
mod mining;

pub use early_stop::{aux_accuracy, early_stop_check, synthetic_set, SignatureSource};
pub use losses::{
    critic_loss, generator_loss, gradient_penalty, interpolate, CriticLoss, GeneratorLoss, GeneratorWeights, Standardizer,
};
pub use mining::{mine, semi_hard_triplets, triplet_loss, triplet_loss_aligned, triplet_loss_value, Triplet};

use std::path::{Path, PathBuf};

use fsgan_autodiff::{AdamConfig, AdamState, Checkpoint, Tape, Tensor};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierTraining;
use crate::data::{mean_spectrum, stack, ClassId, DomainDataset, DomainId, SpectrumSample, SPECTRUM_BINS};
use crate::error::{Error, Result};
use crate::nn::{
    build_discriminator, build_generator, build_triplet_encoder, DenseSchedule, GeneratorSchedule, Model, ModelSpec,
    Pass,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    pub lambda_gp: f64,
    pub lambda_d: f64,
    pub lambda_c: f64,
    pub alpha: f64,
    pub n_critic: usize,
    pub batch_size: usize,
    pub early_stop_threshold: f64,
    pub callback_period: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub generator_adam: AdamConfig,
    pub critic_adam: AdamConfig,
    pub encoder_adam: AdamConfig,
    pub generator: GeneratorSchedule,
    pub networks: DenseSchedule,
    pub aux_classifier: ClassifierTraining,
    /// Where to dump the last batch and parameters on a non-finite loss.
    pub dump_dir: Option<PathBuf>,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            lambda_gp: 10.0,
            lambda_d: 1.0,
            lambda_c: 1.0,
            alpha: 0.2,
            n_critic: 5,
            batch_size: 64,
            early_stop_threshold: 0.98,
            callback_period: 50,
            max_epochs: 2000,
            seed: 0,
            generator_adam: AdamConfig::gan(),
            critic_adam: AdamConfig::gan(),
            encoder_adam: AdamConfig::gan(),
            generator: GeneratorSchedule::default(),
            networks: DenseSchedule::default(),
            aux_classifier: ClassifierTraining {
                epochs: 5,
                ..Default::default()
            },
            dump_dir: None,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("gan: {m}")));
        if [self.lambda_gp, self.lambda_d, self.lambda_c, self.alpha]
            .iter()
            .any(|v| !(*v >= 0.0 && v.is_finite()))
        {
            return bad("loss weights and margin must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.early_stop_threshold) {
            return bad("early_stop_threshold must be in [0, 1]");
        }
        if self.n_critic == 0 || self.batch_size == 0 || self.callback_period == 0 {
            return bad("n_critic, batch_size and callback_period must be >= 1");
        }
        Ok(())
    }

    fn weights(&self) -> GeneratorWeights {
        GeneratorWeights {
            lambda_d: self.lambda_d,
            lambda_c: self.lambda_c,
            alpha: self.alpha,
        }
    }
}

/// Generator, critic and encoder for one fault type.
#[derive(Clone, Debug)]
pub struct GanBundle {
    pub fault_type: String,
    /// Covered severity classes; the generator input for `classes[i]` is `i + 1`.
    pub classes: Vec<ClassId>,
    pub source_domain: DomainId,
    pub config: GanConfig,
    pub generator: Model,
    pub discriminator: Model,
    pub encoder: Model,
    /// Fitted on the training pool; applied to every encoder input.
    pub encoder_input: Standardizer,
    pub generator_opt: AdamState,
    pub critic_opt: AdamState,
    pub encoder_opt: AdamState,
    /// Mean healthy spectrum of the training domain.
    pub source_healthy_mean: Vec<f64>,
    pub critic_steps: u64,
    pub generator_steps: u64,
    pub encoder_steps: u64,
    pub epochs: usize,
}

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    kind: String,
    fault_type: String,
    classes: Vec<ClassId>,
    source_domain: DomainId,
    config: GanConfig,
    generator: ModelSpec,
    discriminator: ModelSpec,
    encoder: ModelSpec,
    adam_steps: [u64; 3],
    critic_steps: u64,
    generator_steps: u64,
    encoder_steps: u64,
    epochs: usize,
}

const BUNDLE_KIND: &str = "gan_bundle";

impl GanBundle {
    pub fn new<R: Rng + ?Sized>(
        fault_type: &str,
        classes: &[ClassId],
        source_domain: DomainId,
        source_healthy_mean: Vec<f64>,
        encoder_input: Standardizer,
        config: &GanConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if classes.is_empty() || classes.iter().any(|c| c.is_healthy()) {
            return Err(Error::Config(format!("fault type {fault_type} needs non-healthy classes")));
        }
        let nets = &config.networks;
        let generator = Model::new(build_generator(classes.len(), SPECTRUM_BINS, &config.generator)?, rng)?;
        let discriminator = Model::new(build_discriminator(SPECTRUM_BINS, &nets.critic_hidden)?, rng)?;
        let encoder = Model::new(
            build_triplet_encoder(SPECTRUM_BINS, &nets.encoder_hidden, nets.embedding_dim)?,
            rng,
        )?;
        Ok(GanBundle {
            fault_type: fault_type.to_string(),
            classes: classes.to_vec(),
            source_domain,
            generator_opt: AdamState::new(config.generator_adam, generator.params())?,
            critic_opt: AdamState::new(config.critic_adam, discriminator.params())?,
            encoder_opt: AdamState::new(config.encoder_adam, encoder.params())?,
            config: config.clone(),
            generator,
            discriminator,
            encoder,
            encoder_input,
            source_healthy_mean,
            critic_steps: 0,
            generator_steps: 0,
            encoder_steps: 0,
            epochs: 0,
        })
    }

    /// Generator input values for the given classes.
    pub fn class_codes(&self, classes: &[ClassId]) -> Result<Tensor> {
        let mut codes = Vec::with_capacity(classes.len());
        for c in classes {
            let i = self.classes.iter().position(|k| k == c).ok_or_else(|| Error::ClassNotCovered {
                class: c.0,
                covered: self.classes.iter().map(|k| k.0).collect(),
            })?;
            codes.push((i + 1) as f64);
        }
        Ok(Tensor::new(vec![classes.len(), 1], codes)?)
    }

    /// Signatures in inference mode; stochastic through the sampling layer.
    pub fn generate<R: Rng + ?Sized>(&self, class: ClassId, count: usize, rng: &mut R) -> Result<Tensor> {
        let codes = self.class_codes(&vec![class; count])?;
        if count == 0 {
            return Ok(Tensor::zeros(vec![0, SPECTRUM_BINS]));
        }
        Ok(self.generator.predict(&codes, &Pass::infer(), rng)?.0)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        self.generator.save_into(&mut ck, "generator")?;
        self.discriminator.save_into(&mut ck, "discriminator")?;
        self.encoder.save_into(&mut ck, "encoder")?;
        for (name, opt) in [
            ("generator", &self.generator_opt),
            ("discriminator", &self.critic_opt),
            ("encoder", &self.encoder_opt),
        ] {
            for (i, (m, v)) in opt.first_moment.iter().zip(&opt.second_moment).enumerate() {
                ck.insert(format!("adam.{name}.m.{i}"), m.clone())?;
                ck.insert(format!("adam.{name}.v.{i}"), v.clone())?;
            }
        }
        ck.insert("source_healthy_mean", Tensor::vector(self.source_healthy_mean.clone()))?;
        ck.insert("encoder_input.mean", self.encoder_input.mean.clone())?;
        ck.insert("encoder_input.scale", self.encoder_input.scale.clone())?;
        let meta = BundleMeta {
            kind: BUNDLE_KIND.into(),
            fault_type: self.fault_type.clone(),
            classes: self.classes.clone(),
            source_domain: self.source_domain,
            config: self.config.clone(),
            generator: self.generator.spec().clone(),
            discriminator: self.discriminator.spec().clone(),
            encoder: self.encoder.spec().clone(),
            adam_steps: [
                self.generator_opt.step_count,
                self.critic_opt.step_count,
                self.encoder_opt.step_count,
            ],
            critic_steps: self.critic_steps,
            generator_steps: self.generator_steps,
            encoder_steps: self.encoder_steps,
            epochs: self.epochs,
        };
        ck.metadata = serde_json::to_value(meta).map_err(|e| Error::Config(e.to_string()))?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: BundleMeta = serde_json::from_value(ck.metadata.clone())
            .map_err(|e| Error::Spec(format!("bundle manifest: {e}")))?;
        if meta.kind != BUNDLE_KIND {
            return Err(Error::Spec(format!("checkpoint holds `{}`, not a bundle", meta.kind)));
        }
        let generator = Model::load_from(meta.generator, ck, "generator")?;
        let discriminator = Model::load_from(meta.discriminator, ck, "discriminator")?;
        let encoder = Model::load_from(meta.encoder, ck, "encoder")?;
        let load_opt = |name: &str, cfg: AdamConfig, model: &Model, steps: u64| -> Result<AdamState> {
            let mut opt = AdamState::new(cfg, model.params())?;
            for i in 0..opt.first_moment.len() {
                opt.first_moment[i] = ck.require(&format!("adam.{name}.m.{i}"))?.clone();
                opt.second_moment[i] = ck.require(&format!("adam.{name}.v.{i}"))?.clone();
            }
            opt.step_count = steps;
            Ok(opt)
        };
        Ok(GanBundle {
            generator_opt: load_opt("generator", meta.config.generator_adam, &generator, meta.adam_steps[0])?,
            critic_opt: load_opt("discriminator", meta.config.critic_adam, &discriminator, meta.adam_steps[1])?,
            encoder_opt: load_opt("encoder", meta.config.encoder_adam, &encoder, meta.adam_steps[2])?,
            fault_type: meta.fault_type,
            classes: meta.classes,
            source_domain: meta.source_domain,
            config: meta.config,
            generator,
            discriminator,
            encoder,
            encoder_input: Standardizer {
                mean: ck.require("encoder_input.mean")?.clone(),
                scale: ck.require("encoder_input.scale")?.clone(),
            },
            source_healthy_mean: ck.require("source_healthy_mean")?.data().to_vec(),
            critic_steps: meta.critic_steps,
            generator_steps: meta.generator_steps,
            encoder_steps: meta.encoder_steps,
            epochs: meta.epochs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.to_checkpoint()?.save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingData(format!("{} does not exist", path.display())));
        }
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl SignatureSource for GanBundle {
    fn covered_classes(&self) -> &[ClassId] {
        &self.classes
    }

    fn signatures(&self, class: ClassId, count: usize, rng: &mut dyn RngCore) -> Result<Vec<Vec<f64>>> {
        let t = self.generate(class, count, rng)?;
        Ok(t.rows().map(|r| r.to_vec()).collect())
    }
}

/// Per-epoch means of the step losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub critic_loss: f64,
    pub gen_loss: f64,
    pub triplet_loss: f64,
    pub gp: f64,
    /// Set on epochs where the stopping criterion ran.
    pub aux_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::format(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Observation points inside the training loop.
pub trait TrainHooks {
    /// Every synthetic fault batch, before it reaches any network.
    fn on_fake(&mut self, _signature: &Tensor, _carriers: &Tensor, _fake: &Tensor) {}

    fn on_epoch(&mut self, _row: &LogRow) {}
}

pub struct NoHooks;

impl TrainHooks for NoHooks {}

pub struct TrainOutcome {
    pub bundle: GanBundle,
    pub log: TrainingLog,
    pub stopped_early: bool,
}

struct Pools<'a> {
    healthy: Vec<&'a SpectrumSample>,
    faults: Vec<&'a SpectrumSample>,
    labeled: Vec<&'a SpectrumSample>,
}

fn draw<'a, R: Rng + ?Sized>(pool: &[&'a SpectrumSample], m: usize, rng: &mut R) -> Vec<&'a SpectrumSample> {
    (0..m).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
}

#[derive(Default)]
struct Sums {
    critic: f64,
    gp: f64,
    critic_n: usize,
    gen: f64,
    triplet: f64,
    gen_n: usize,
}

fn check_finite(value: f64, what: &str, step: u64, bundle: &GanBundle, batch: &[(&str, &Tensor)]) -> Result<()> {
    if value.is_finite() {
        return Ok(());
    }
    let dump = match &bundle.config.dump_dir {
        Some(dir) => {
            let path = dir.join(format!("nonfinite_{}_{what}_{step}.ckpt", bundle.fault_type));
            let mut ck = bundle.to_checkpoint()?;
            for (name, t) in batch {
                ck.insert(format!("batch.{name}"), (*t).clone())?;
            }
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            ck.save(&path)?;
            Some(path)
        }
        None => None,
    };
    log::error!("{} training: non-finite {what} at step {step}", bundle.fault_type);
    Err(Error::NonFinite {
        what: what.to_string(),
        step,
        dump,
    })
}

fn critic_step<R: Rng + ?Sized>(
    b: &mut GanBundle,
    pools: &Pools,
    rng: &mut R,
    hooks: &mut dyn TrainHooks,
    sums: &mut Sums,
) -> Result<()> {
    let m = b.config.batch_size;
    let real = stack(draw(&pools.faults, m, rng));
    let codes: Vec<ClassId> = draw(&pools.faults, m, rng).iter().map(|s| s.class).collect();
    let carriers = stack(draw(&pools.healthy, m, rng));
    let (sig, trace) = b.generator.predict(&b.class_codes(&codes)?, &Pass::train(), rng)?;
    b.generator.update_running_stats(&trace);
    let fake = Tensor::new(
        sig.shape().to_vec(),
        sig.data().iter().zip(carriers.data()).map(|(s, c)| s + c).collect(),
    )?;
    hooks.on_fake(&sig, &carriers, &fake);
    let eps: Vec<f64> = (0..m).map(|_| rng.gen::<f64>()).collect();
    let tape = Tape::new();
    let bound = b.discriminator.bind(&tape, true);
    let loss = critic_loss(&b.discriminator, &bound, &fake, &real, &eps, b.config.lambda_gp, &Pass::train(), rng)?;
    let value = loss.total.value().item();
    check_finite(value, "critic_loss", b.critic_steps, b, &[("real", &real), ("fake", &fake)])?;
    let grads = bound.gradients(&tape.backward(loss.total)?);
    let mut params: Vec<&mut Tensor> = b.discriminator.params_mut().iter_mut().collect();
    b.critic_opt.step(&mut params, &grads)?;
    b.critic_steps += 1;
    sums.critic += value;
    sums.gp += loss.penalty;
    sums.critic_n += 1;
    Ok(())
}

fn encoder_step<R: Rng + ?Sized>(b: &mut GanBundle, pools: &Pools, rng: &mut R) -> Result<()> {
    let batch = draw(&pools.labeled, b.config.batch_size, rng);
    let labels: Vec<ClassId> = batch.iter().map(|s| s.class).collect();
    let x = b.encoder_input.apply(&stack(batch))?;
    let tape = Tape::new();
    let bound = b.encoder.bind(&tape, true);
    let (emb, _) = b.encoder.forward(&bound, tape.constant(x.clone()), &Pass::train(), rng)?;
    let triplets = semi_hard_triplets(&emb.value(), &labels, b.config.alpha);
    if triplets.is_empty() {
        return Ok(());
    }
    let loss = triplet_loss(emb, emb, &triplets, b.config.alpha)?;
    check_finite(loss.value().item(), "encoder_loss", b.encoder_steps, b, &[("batch", &x)])?;
    let grads = bound.gradients(&tape.backward(loss)?);
    let mut params: Vec<&mut Tensor> = b.encoder.params_mut().iter_mut().collect();
    b.encoder_opt.step(&mut params, &grads)?;
    b.encoder_steps += 1;
    Ok(())
}

fn generator_step<R: Rng + ?Sized>(
    b: &mut GanBundle,
    pools: &Pools,
    rng: &mut R,
    hooks: &mut dyn TrainHooks,
    sums: &mut Sums,
) -> Result<()> {
    let m = b.config.batch_size;
    let codes: Vec<ClassId> = draw(&pools.faults, m, rng).iter().map(|s| s.class).collect();
    let carriers = stack(draw(&pools.healthy, m, rng));
    let real = draw(&pools.faults, m, rng);
    let real_labels: Vec<ClassId> = real.iter().map(|s| s.class).collect();
    let (real_emb, _) = b.encoder.predict(&b.encoder_input.apply(&stack(real))?, &Pass::infer(), rng)?;

    let tape = Tape::new();
    let g_bound = b.generator.bind(&tape, true);
    let d_bound = b.discriminator.bind(&tape, false);
    let e_bound = b.encoder.bind(&tape, false);
    let (sig, trace) = b
        .generator
        .forward(&g_bound, tape.constant(b.class_codes(&codes)?), &Pass::train(), rng)?;
    let fake = sig.add(tape.constant(carriers.clone()))?;
    hooks.on_fake(&sig.value(), &carriers, &fake.value());
    let loss = generator_loss(
        &b.discriminator,
        &d_bound,
        &Pass::train(),
        &b.encoder,
        &e_bound,
        &b.encoder_input,
        fake,
        &codes,
        &real_emb,
        &real_labels,
        b.config.weights(),
        rng,
    )?;
    let value = loss.total.value().item();
    check_finite(value, "generator_loss", b.generator_steps, b, &[("carriers", &carriers)])?;
    let grads = g_bound.gradients(&tape.backward(loss.total)?);
    let mut params: Vec<&mut Tensor> = b.generator.params_mut().iter_mut().collect();
    b.generator_opt.step(&mut params, &grads)?;
    b.generator.update_running_stats(&trace);
    b.generator_steps += 1;
    sums.gen += value;
    sums.triplet += loss.triplet;
    sums.gen_n += 1;
    Ok(())
}

/// Trains a bundle for the fault type made of `classes` on one source domain.
///
/// An epoch is `ceil(n_faults / batch_size)` iterations of `n_critic` critic
/// steps, one encoder step and one generator step. The stopping criterion
/// runs every `callback_period` epochs.
pub fn train(
    source: &DomainDataset,
    fault_type: &str,
    classes: &[ClassId],
    config: &GanConfig,
    hooks: &mut dyn TrainHooks,
) -> Result<TrainOutcome> {
    config.validate()?;
    let healthy = source.healthy();
    if healthy.is_empty() {
        return Err(Error::MissingData(format!(
            "domain {} has no healthy samples",
            source.domain()
        )));
    }
    for c in classes {
        if source.of_class(*c).next().is_none() {
            return Err(Error::MissingData(format!(
                "domain {} has no samples of fault class {c}",
                source.domain()
            )));
        }
    }
    let faults: Vec<&SpectrumSample> = source.samples().iter().filter(|s| classes.contains(&s.class)).collect();
    let labeled: Vec<&SpectrumSample> = healthy.iter().chain(faults.iter()).copied().collect();
    let pools = Pools {
        healthy,
        faults,
        labeled,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let healthy_mean = mean_spectrum(pools.healthy.iter().copied()).expect("healthy pool is not empty");
    let standardizer = Standardizer::fit(&pools.labeled)?;
    let mut bundle = GanBundle::new(fault_type, classes, source.domain(), healthy_mean, standardizer, config, &mut rng)?;
    let iterations = pools.faults.len().div_ceil(config.batch_size);
    let mut log = TrainingLog::default();
    let mut stopped_early = false;
    for epoch in 1..=config.max_epochs {
        let mut sums = Sums::default();
        for _ in 0..iterations {
            for _ in 0..config.n_critic {
                critic_step(&mut bundle, &pools, &mut rng, hooks, &mut sums)?;
            }
            encoder_step(&mut bundle, &pools, &mut rng)?;
            generator_step(&mut bundle, &pools, &mut rng, hooks, &mut sums)?;
        }
        bundle.epochs = epoch;
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        let mut row = LogRow {
            epoch,
            critic_loss: mean(sums.critic, sums.critic_n),
            gen_loss: mean(sums.gen, sums.gen_n),
            triplet_loss: mean(sums.triplet, sums.gen_n),
            gp: mean(sums.gp, sums.critic_n),
            aux_accuracy: None,
        };
        if epoch % config.callback_period == 0 {
            let (stop, acc) = early_stop_check(
                &bundle,
                source,
                config.early_stop_threshold,
                &config.aux_classifier,
                rng.gen(),
            )?;
            row.aux_accuracy = Some(acc);
            stopped_early = stop;
        }
        log::debug!(
            "{fault_type} epoch {epoch}: critic {:.4} gen {:.4} triplet {:.4} gp {:.4} aux {:?}",
            row.critic_loss,
            row.gen_loss,
            row.triplet_loss,
            row.gp,
            row.aux_accuracy
        );
        hooks.on_epoch(&row);
        log.rows.push(row);
        if stopped_early {
            log::info!("{fault_type}: stopping criterion met after epoch {epoch}");
            break;
        }
    }
    Ok(TrainOutcome {
        bundle,
        log,
        stopped_early,
    })
}
