//! The four training stages: prior pretraining, classifier training,
//! restorer fine-tuning against a frozen classifier, and classifier
//! fine-tuning on restored images.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::batch::{epoch_batches, images_to_tensor, tensor_to_image, BatchCycler};
use super::checkpoint::Checkpoint;
use super::log::{LogEntry, RunLog};
use super::optim::OptimizerState;
use super::plan::{Stage, StagePlan};
use crate::config::RunConfig;
use crate::data::{derive_seed, Dataset, Role};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::losses::{adv_discriminator_loss, adv_generator_loss, total_generator_loss};
use crate::networks::{
    classifier, classifier_forward, decoder_forward, discriminator, discriminator_forward, encoder,
    mapping_forward, restore, restorer, DiscriminatorConfig, RestorerConfig,
};
use crate::nn::layers::RunState;
use crate::nn::{Graph, ParamStore, Tensor, Var};

// Seed streams split off the master seed.
const INIT: u64 = 0;
const ORDER: u64 = 1;
const NOISE: u64 = 2;
const DROPOUT: u64 = 3;
const EVAL: u64 = 4;

/// Images pushed through a network at once outside training.
const INFER_CHUNK: usize = 16;

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, s))
}

fn scalar(g: &Graph<f32>, v: Var) -> f64 {
    g.value(v).item() as f64
}

fn gather(images: &[&Image], idx: &[usize]) -> Result<Tensor<f32>> {
    images_to_tensor(&idx.iter().map(|&i| images[i]).collect::<Vec<_>>())
}

fn group(plan: &StagePlan, prefixes: &[&str]) -> Vec<(String, f64)> {
    plan.lr_groups
        .iter()
        .filter(|(p, _)| prefixes.contains(&p.as_str()))
        .cloned()
        .collect()
}

fn pre(prefix: &str) -> String {
    format!("{prefix}.")
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub plan: StagePlan,
    /// Running training accuracy of each epoch (classifier stages).
    pub epoch_accuracy: Vec<f64>,
    /// Inference-mode accuracy on the training images after the last
    /// epoch (classifier stages).
    pub train_accuracy: Option<f64>,
    /// Discriminator loss on held-out real images before and after
    /// prior pretraining.
    pub held_out_d_loss: Option<(f64, f64)>,
}

impl StageReport {
    fn new(plan: StagePlan) -> Self {
        Self {
            plan,
            epoch_accuracy: Vec::new(),
            train_accuracy: None,
            held_out_d_loss: None,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = self.plan.describe();
        for (i, a) in self.epoch_accuracy.iter().enumerate() {
            let _ = writeln!(s, "epoch {}: accuracy {a:.4}", i + 1);
        }
        if let Some(a) = self.train_accuracy {
            let _ = writeln!(s, "train_accuracy: {a:.6}");
        }
        if let Some((a, b)) = self.held_out_d_loss {
            let _ = writeln!(s, "held_out_d_loss_initial: {a:.6}\nheld_out_d_loss_final: {b:.6}");
        }
        s
    }
}

pub struct StageOutput {
    pub checkpoint: Checkpoint,
    /// Every array the stage held after its last step, frozen groups and
    /// the discriminator included.
    pub working: ParamStore<f32>,
    pub log: RunLog,
    pub report: StageReport,
}

fn checkpoint(stage: Stage, seed: u64, cfg: &RunConfig, store: &ParamStore<f32>, keep: &[String]) -> Checkpoint {
    let mut params = ParamStore::new();
    for p in keep {
        params.extend(&store.filter_prefix(p));
    }
    Checkpoint {
        stage: stage.tag().to_string(),
        seed,
        config: cfg.to_toml(),
        params,
        optimizer: None,
    }
}

/// Overwrites every entry under `prefixes` in `store` from `source`,
/// which must supply exactly those names with matching shapes.
pub(crate) fn load_groups(store: &mut ParamStore<f32>, source: &ParamStore<f32>, prefixes: &[String], what: &str) -> Result<()> {
    for p in prefixes {
        let part = source.filter_prefix(p);
        let expected = store.filter_prefix(p);
        store
            .load_from(&part)
            .map_err(|e| Error::IncompatibleCheckpoint(format!("{what}: {e}")))?;
        let missing = expected
            .params()
            .chain(expected.buffers())
            .map(|(k, _)| k.to_string())
            .find(|k| !part.contains(k));
        if let Some(k) = missing {
            return Err(Error::IncompatibleCheckpoint(format!("{what} lacks `{k}`")));
        }
    }
    Ok(())
}

fn verify_frozen(before: &ParamStore<f32>, after: &ParamStore<f32>, plan: &StagePlan) -> Result<()> {
    for p in &plan.frozen {
        if !before.same_prefix(after, p) {
            return Err(Error::invalid(format!("{}: frozen group `{p}` changed", plan.stage)));
        }
    }
    Ok(())
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    if let Some(&c) = labels.iter().find(|&&c| c >= num_classes) {
        return Err(Error::invalid(format!("class {c} exceeds the classifier's {num_classes} classes")));
    }
    let first = labels.first().ok_or_else(|| Error::invalid("no labelled images"))?;
    if labels.iter().all(|c| c == first) {
        return Err(Error::invalid("classifier training needs at least two classes"));
    }
    Ok(())
}

fn argmax_rows(t: &Tensor<f32>) -> Vec<usize> {
    let k = t.shape()[1];
    t.data()
        .chunks_exact(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Inference-mode predictions and embeddings for `images`.
pub fn classify_images(
    store: &ParamStore<f32>,
    cfg: &classifier::ClassifierConfig,
    images: &[&Image],
) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let mut preds = Vec::with_capacity(images.len());
    let mut embeds = Vec::with_capacity(images.len());
    for chunk in images.chunks(INFER_CHUNK) {
        let mut g = Graph::new();
        let x = g.constant(images_to_tensor(chunk)?);
        let out = classifier_forward(&mut g, store, &mut RunState::infer(), cfg, x)?;
        preds.extend(argmax_rows(g.value(out.logits)));
        let e = g.value(out.embedding);
        let d = e.shape()[1];
        embeds.extend(e.data().chunks_exact(d).map(|r| r.iter().map(|&v| v as f64).collect::<Vec<_>>()));
    }
    Ok((preds, embeds))
}

fn restore_tensor(store: &ParamStore<f32>, cfg: &RestorerConfig, lq: Tensor<f32>) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let x = g.constant(lq);
    let y = restore(&mut g, store, cfg, x)?;
    Ok(g.value(y).clone())
}

/// Runs the restorer over `images` in inference mode.
pub fn restore_images(store: &ParamStore<f32>, cfg: &RestorerConfig, images: &[&Image]) -> Result<Vec<Image>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(INFER_CHUNK) {
        let t = restore_tensor(store, cfg, images_to_tensor(chunk)?)?;
        for b in 0..chunk.len() {
            out.push(tensor_to_image(&t, b)?);
        }
    }
    Ok(out)
}

fn generate(store: &ParamStore<f32>, cfg: &RestorerConfig, z: Tensor<f32>) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let z = g.constant(z);
    let w = mapping_forward(&mut g, store, cfg, z)?;
    let x = decoder_forward(&mut g, store, cfg, &[w], None)?;
    Ok(g.value(x).clone())
}

/// Logistic discriminator loss on a real and a fake batch, plus the
/// optional gradient penalty on the reals.
fn discriminator_step(
    store: &mut ParamStore<f32>,
    cfg: &DiscriminatorConfig,
    opt: &mut OptimizerState,
    real: &Tensor<f32>,
    fake: Tensor<f32>,
    r1_gamma: f64,
    (stage, step): (Stage, usize),
) -> Result<f64> {
    let mut g = Graph::new();
    let r = g.constant(real.clone());
    let f = g.constant(fake);
    let dr = discriminator_forward(&mut g, store, cfg, r)?;
    let df = discriminator_forward(&mut g, store, cfg, f)?;
    let mut loss = adv_discriminator_loss(&mut g, dr, df)?;
    if r1_gamma > 0.0 {
        if let Some(pen) = r1_surrogate(&mut g, store, cfg, real)? {
            let pen = g.scale(pen, r1_gamma);
            loss = g.add(loss, pen)?;
        }
    }
    let value = scalar(&g, loss);
    if !value.is_finite() {
        return Err(Error::NonFinite {
            stage: stage.tag().into(),
            step,
            detail: format!("discriminator loss = {value}"),
        });
    }
    let grads = g.backward(loss)?;
    opt.step(store, &g.param_grads(&grads))?;
    Ok(value)
}

/// Differentiable stand-in for mean‖∇ₓD(x)‖² that needs no second-order
/// gradients: with `u = ∇ₓD(x)` held fixed, the central difference
/// `(D(x+δu) − D(x−δu)) / 2δ` equals `u·∇ₓD(x)`, whose parameter gradient
/// matches that of `½‖∇ₓD‖²` at `u`.
fn r1_surrogate(g: &mut Graph<f32>, store: &ParamStore<f32>, cfg: &DiscriminatorConfig, real: &Tensor<f32>) -> Result<Option<Var>> {
    let mut probe = Graph::new();
    let x = probe.input(real.clone());
    let d = discriminator_forward(&mut probe, store, cfg, x)?;
    let s = probe.sum(d);
    let grads = probe.backward(s)?;
    let Some(u) = grads.get(x) else { return Ok(None) };
    let max = u.data().iter().fold(0f32, |m, v| m.max(v.abs()));
    if max == 0.0 || !max.is_finite() {
        return Ok(None);
    }
    let delta = 1e-2 / max as f64;
    let shift = |sign: f32| {
        let data = real
            .data()
            .iter()
            .zip(u.data())
            .map(|(&r, &ui)| r + sign * delta as f32 * ui)
            .collect();
        Tensor::new(real.shape().to_vec(), data)
    };
    let xp = g.constant(shift(1.0)?);
    let xm = g.constant(shift(-1.0)?);
    let dp = discriminator_forward(g, store, cfg, xp)?;
    let dm = discriminator_forward(g, store, cfg, xm)?;
    let diff = g.sub(dp, dm)?;
    let m = g.mean(diff);
    Ok(Some(g.scale(m, 0.5 / delta)))
}

fn held_out_d_loss(
    store: &ParamStore<f32>,
    rcfg: &RestorerConfig,
    dcfg: &DiscriminatorConfig,
    real: &Tensor<f32>,
    z: &Tensor<f32>,
) -> Result<f64> {
    let fake = generate(store, rcfg, z.clone())?;
    let mut g = Graph::new();
    let r = g.constant(real.clone());
    let f = g.constant(fake);
    let dr = discriminator_forward(&mut g, store, dcfg, r)?;
    let df = discriminator_forward(&mut g, store, dcfg, f)?;
    let l = adv_discriminator_loss(&mut g, dr, df)?;
    Ok(scalar(&g, l))
}

/// Per-sample ‖G(w + δu) − G(w)‖/δ: a forward-difference estimate of
/// how far the output moves for a unit step in style space.
fn path_lengths(
    g: &mut Graph<f32>,
    store: &ParamStore<f32>,
    cfg: &RestorerConfig,
    w: Var,
    base: Var,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    const DELTA: f64 = 1e-2;
    let shape = g.shape(w).to_vec();
    let u = Tensor::<f32>::randn(&shape, 1.0 / (shape[1] as f64).sqrt(), rng).map(|v| v * DELTA as f32);
    let u = g.constant(u);
    let w2 = g.add(w, u)?;
    let moved = decoder_forward(g, store, cfg, &[w2], None)?;
    let diff = g.sub(moved, base)?;
    let sq = g.mul(diff, diff)?;
    let flat = g.reshape(sq, &[shape[0], g.value(sq).numel() / shape[0]])?;
    let norm2 = g.sum_last(flat)?;
    let norm2 = g.add_scalar(norm2, 1e-12);
    let norm = g.powf(norm2, 0.5);
    Ok(g.scale(norm, 1.0 / DELTA))
}

/// Trains the mapping network and style decoder from random codes (zero
/// skip inputs) against the discriminator, one discriminator step per
/// generator step.
pub fn run_prior_pretrain(hq: &Dataset, cfg: &RunConfig, seed: u64) -> Result<StageOutput> {
    cfg.validate()?;
    let plan = cfg.prior_plan();
    let pc = &cfg.training.prior;
    let rcfg = cfg.restorer_config();
    let dcfg = cfg.discriminator_config();
    let mut all: Vec<&Image> = hq.hq_indices().into_iter().map(|i| &hq.images[i]).collect();
    if all.is_empty() {
        return Err(Error::invalid("prior pretraining needs at least one hq image"));
    }
    rand::seq::SliceRandom::shuffle(all.as_mut_slice(), &mut stream(seed, ORDER));
    let n_held = ((all.len() as f64) * pc.held_out_fraction).floor() as usize;
    let n_held = n_held.min(all.len() - 1);
    let (held, train) = all.split_at(n_held);
    let held = if held.is_empty() { train } else { held };

    let mut store = ParamStore::new();
    let mut init = stream(seed, INIT);
    rcfg.init_generator(&mut store, &mut init);
    dcfg.init_params(&mut store, &mut init);

    let (map, dec, disc) = (pre(restorer::MAPPING_PREFIX), pre(restorer::DECODER_PREFIX), pre(discriminator::PREFIX));
    let mut opt_g = OptimizerState::new(cfg.training.adam, group(&plan, &[&map, &dec]));
    let mut opt_d = OptimizerState::new(cfg.training.adam, group(&plan, &[&disc]));

    let sd = rcfg.style_dim();
    let held_t = images_to_tensor(held)?;
    let eval_z = Tensor::randn(&[held.len(), sd], 1.0, &mut stream(seed, EVAL));
    let d_initial = held_out_d_loss(&store, &rcfg, &dcfg, &held_t, &eval_z)?;

    let mut noise = stream(seed, NOISE);
    let mut cycler = BatchCycler::new(train.len(), stream(seed, ORDER + 100))?;
    let n_blocks = rcfg.num_blocks();
    let bs = plan.batch_size;
    let mut pl_mean: Option<f64> = None;
    let mut log = RunLog::default();

    for step in 1..=plan.iterations {
        let real = gather(train, &cycler.next_batch(bs))?;
        let z = Tensor::randn(&[bs, sd], 1.0, &mut noise);
        let fake = generate(&store, &rcfg, z)?;
        discriminator_step(&mut store, &dcfg, &mut opt_d, &real, fake, pc.r1_gamma, (plan.stage, step))?;

        let mut g = Graph::new();
        g.freeze(disc.clone());
        let z = g.constant(Tensor::randn(&[bs, sd], 1.0, &mut noise));
        let w = mapping_forward(&mut g, &store, &rcfg, z)?;
        let mix = pc.style_mixing_prob > 0.0 && noise.random::<f64>() < pc.style_mixing_prob;
        let styles = if mix {
            let z2 = g.constant(Tensor::randn(&[bs, sd], 1.0, &mut noise));
            let w2 = mapping_forward(&mut g, &store, &rcfg, z2)?;
            let cross = noise.random_range(1..n_blocks);
            (0..n_blocks).map(|i| if i < cross { w } else { w2 }).collect()
        } else {
            vec![w]
        };
        let fake = decoder_forward(&mut g, &store, &rcfg, &styles, None)?;
        let d_fake = discriminator_forward(&mut g, &store, &dcfg, fake)?;
        let adv = adv_generator_loss(&mut g, d_fake);
        let mut total = adv;
        if pc.path_length_weight > 0.0 {
            let base = if mix { decoder_forward(&mut g, &store, &rcfg, &[w], None)? } else { fake };
            let lengths = path_lengths(&mut g, &store, &rcfg, w, base, &mut noise)?;
            let batch_mean = g.value(lengths).data().iter().map(|&v| v as f64).sum::<f64>() / bs as f64;
            let target = *pl_mean.get_or_insert(batch_mean);
            let dev = g.add_scalar(lengths, -target);
            let sq = g.mul(dev, dev)?;
            let pen = g.mean(sq);
            let pen = g.scale(pen, pc.path_length_weight);
            total = g.add(total, pen)?;
            pl_mean = Some(0.99 * target + 0.01 * batch_mean);
        }
        log.push(LogEntry {
            step,
            stage: plan.stage.tag().into(),
            loss_total: scalar(&g, total),
            loss_adv: Some(scalar(&g, adv)),
            loss_l1: None,
            loss_id: None,
            lr: pc.lr_generator,
        })?;
        let grads = g.backward(total)?;
        opt_g.step(&mut store, &g.param_grads(&grads))?;
    }

    let d_final = held_out_d_loss(&store, &rcfg, &dcfg, &held_t, &eval_z)?;
    let mut report = StageReport::new(plan.clone());
    report.held_out_d_loss = Some((d_initial, d_final));
    Ok(StageOutput {
        checkpoint: checkpoint(plan.stage, seed, cfg, &store, &[map, dec, disc]),
        working: store,
        log,
        report,
    })
}

/// Cross-entropy training of the classifier in `store` on `images`.
/// Returns the log, per-epoch running accuracy, and final
/// inference-mode accuracy.
fn fit_classifier(
    store: &mut ParamStore<f32>,
    images: &[&Image],
    labels: &[usize],
    cfg: &RunConfig,
    plan: &StagePlan,
    seed: u64,
) -> Result<(RunLog, Vec<f64>, f64)> {
    check_labels(labels, cfg.classifier.num_classes)?;
    let mut opt = OptimizerState::new(cfg.training.adam, plan.lr_groups.clone());
    let mut order = stream(seed, ORDER);
    let dropout_seed = derive_seed(seed, DROPOUT);
    let lr = plan.lr_groups[0].1;
    let mut log = RunLog::default();
    let mut epoch_acc = Vec::with_capacity(plan.iterations);
    let mut step = 0;
    for _ in 0..plan.iterations {
        let mut correct = 0;
        for batch in epoch_batches(images.len(), plan.batch_size, &mut order) {
            step += 1;
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            for p in &plan.frozen {
                g.freeze(p.clone());
            }
            let x = g.constant(gather(images, &batch)?);
            let mut st = RunState::train(ChaCha8Rng::seed_from_u64(derive_seed(dropout_seed, step as u64)));
            let out = classifier_forward(&mut g, store, &mut st, &cfg.classifier, x)?;
            correct += argmax_rows(g.value(out.logits)).iter().zip(&y).filter(|(p, t)| p == t).count();
            let loss = g.cross_entropy(out.logits, &y)?;
            log.push(LogEntry {
                step,
                stage: plan.stage.tag().into(),
                loss_total: scalar(&g, loss),
                loss_adv: None,
                loss_l1: None,
                loss_id: None,
                lr,
            })?;
            let grads = g.backward(loss)?;
            opt.step(store, &g.param_grads(&grads))?;
            st.apply_bn_updates(store)?;
        }
        epoch_acc.push(correct as f64 / images.len() as f64);
    }
    let (preds, _) = classify_images(store, &cfg.classifier, images)?;
    let acc = preds.iter().zip(labels).filter(|(p, t)| p == t).count() as f64 / labels.len() as f64;
    Ok((log, epoch_acc, acc))
}

/// Trains the classifier from scratch on every image of `train`.
pub fn run_classifier_train(train: &Dataset, cfg: &RunConfig, seed: u64) -> Result<StageOutput> {
    cfg.validate()?;
    let plan = cfg.classifier_plan();
    let images: Vec<&Image> = train.images.iter().collect();
    let labels = train.labels(&(0..images.len()).collect::<Vec<_>>());
    check_labels(&labels, cfg.classifier.num_classes)?;
    let mut store = ParamStore::new();
    cfg.classifier.init_params(&mut store, &mut stream(seed, INIT));
    let (log, epoch_accuracy, acc) = fit_classifier(&mut store, &images, &labels, cfg, &plan, seed)?;
    let mut report = StageReport::new(plan.clone());
    report.epoch_accuracy = epoch_accuracy;
    report.train_accuracy = Some(acc);
    Ok(StageOutput {
        checkpoint: checkpoint(plan.stage, seed, cfg, &store, &[pre(classifier::PREFIX)]),
        working: store,
        log,
        report,
    })
}

/// `(lq, hq)` record indices of every LQ record with a source.
fn pair_indices(pairs: &Dataset) -> Result<Vec<(usize, usize)>> {
    let v: Vec<(usize, usize)> = pairs
        .manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.role == Role::Lq)
        .filter_map(|(i, r)| r.pair_id.map(|p| (i, p)))
        .collect();
    if v.is_empty() {
        return Err(Error::invalid("no lq/hq pairs in the dataset"));
    }
    Ok(v)
}

/// Fresh arrays for every network, with the encoder drawn from `seed`.
pub(crate) fn full_template(cfg: &RunConfig, seed: u64) -> ParamStore<f32> {
    let rcfg = cfg.restorer_config();
    let mut store = ParamStore::new();
    let mut init = stream(seed, INIT);
    rcfg.encoder.init_params(&mut store, &mut init);
    rcfg.init_generator(&mut store, &mut init);
    cfg.discriminator_config().init_params(&mut store, &mut init);
    cfg.classifier.init_params(&mut store, &mut init);
    store
}

/// Restorer arrays (encoder, mapping network, decoder) from a checkpoint,
/// checked against the configured architecture.
pub fn restorer_from_checkpoint(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<ParamStore<f32>> {
    let rcfg = cfg.restorer_config();
    let mut store = ParamStore::new();
    rcfg.init_params(&mut store, &mut stream(0, INIT));
    let groups: Vec<String> = [encoder::PREFIX, restorer::MAPPING_PREFIX, restorer::DECODER_PREFIX]
        .iter()
        .map(|p| pre(p))
        .collect();
    load_groups(&mut store, &ckpt.params, &groups, "restorer checkpoint")?;
    Ok(store)
}

/// Fine-tunes encoder, mapping network, decoder and discriminator on
/// LQ/HQ pairs. The generator minimizes the weighted adversarial, smooth
/// L1 and identity loss; the classifier supplies identity features and
/// stays frozen.
pub fn run_restorer_finetune(
    pairs: &Dataset,
    prior: &Checkpoint,
    classifier_ckpt: &Checkpoint,
    cfg: &RunConfig,
    seed: u64,
) -> Result<StageOutput> {
    cfg.validate()?;
    let plan = cfg.restorer_plan();
    let rcfg = cfg.restorer_config();
    let dcfg = cfg.discriminator_config();
    let idx = pair_indices(pairs)?;
    let lq: Vec<&Image> = idx.iter().map(|&(l, _)| &pairs.images[l]).collect();
    let hq: Vec<&Image> = idx.iter().map(|&(_, h)| &pairs.images[h]).collect();

    let (enc, map, dec, disc, cls) = (
        pre(encoder::PREFIX),
        pre(restorer::MAPPING_PREFIX),
        pre(restorer::DECODER_PREFIX),
        pre(discriminator::PREFIX),
        pre(classifier::PREFIX),
    );
    let mut store = full_template(cfg, seed);
    load_groups(&mut store, &prior.params, &[map.clone(), dec.clone(), disc.clone()], "prior checkpoint")?;
    load_groups(&mut store, &classifier_ckpt.params, std::slice::from_ref(&cls), "classifier checkpoint")?;
    let before = store.clone();

    let mut opt_g = OptimizerState::new(cfg.training.adam, group(&plan, &[&enc, &map, &dec]));
    let mut opt_d = OptimizerState::new(cfg.training.adam, group(&plan, &[&disc]));
    let lr_enc = plan.lr(&enc).expect("encoder group");
    let mut cycler = BatchCycler::new(idx.len(), stream(seed, ORDER))?;
    let mut log = RunLog::default();

    for step in 1..=plan.iterations {
        let batch = cycler.next_batch(plan.batch_size);
        let lq_t = gather(&lq, &batch)?;
        let hq_t = gather(&hq, &batch)?;
        // Generator first, so the logged loss at step s is measured against
        // the discriminator as it stood before step s.
        let mut g = Graph::new();
        g.freeze(disc.clone());
        for p in &plan.frozen {
            g.freeze(p.clone());
        }
        let x = g.constant(lq_t);
        let y = g.constant(hq_t.clone());
        let restored = restore(&mut g, &store, &rcfg, x)?;
        let d_fake = discriminator_forward(&mut g, &store, &dcfg, restored)?;
        let mut st = RunState::infer();
        let f_real = classifier_forward(&mut g, &store, &mut st, &cfg.classifier, y)?.embedding;
        let f_fake = classifier_forward(&mut g, &store, &mut st, &cfg.classifier, restored)?.embedding;
        let loss = total_generator_loss(&mut g, &cfg.losses, d_fake, y, restored, f_real, f_fake)?;
        log.push(LogEntry {
            step,
            stage: plan.stage.tag().into(),
            loss_total: scalar(&g, loss.total),
            loss_adv: Some(scalar(&g, loss.adv)),
            loss_l1: Some(scalar(&g, loss.l1)),
            loss_id: Some(scalar(&g, loss.id)),
            lr: lr_enc,
        })?;
        let grads = g.backward(loss.total)?;
        opt_g.step(&mut store, &g.param_grads(&grads))?;
        let fake = g.value(restored).clone();
        discriminator_step(&mut store, &dcfg, &mut opt_d, &hq_t, fake, cfg.training.restorer.r1_gamma, (plan.stage, step))?;
    }

    verify_frozen(&before, &store, &plan)?;
    Ok(StageOutput {
        checkpoint: checkpoint(plan.stage, seed, cfg, &store, &[enc, map, dec]),
        working: store,
        log,
        report: StageReport::new(plan),
    })
}

/// Restores every LQ image of `lq` with the frozen restorer, then
/// fine-tunes the classifier on the restored images.
pub fn run_classifier_finetune(
    lq: &Dataset,
    restorer_ckpt: &Checkpoint,
    classifier_ckpt: &Checkpoint,
    cfg: &RunConfig,
    seed: u64,
) -> Result<StageOutput> {
    cfg.validate()?;
    let plan = cfg.classifier_finetune_plan();
    let rcfg = cfg.restorer_config();
    let lq_idx = lq.lq_indices();
    if lq_idx.is_empty() {
        return Err(Error::invalid("classifier fine-tuning needs lq images"));
    }
    let cls = pre(classifier::PREFIX);
    let mut store = full_template(cfg, seed);
    load_groups(&mut store, &restorer_ckpt.params, &plan.frozen, "restorer checkpoint")?;
    load_groups(&mut store, &classifier_ckpt.params, std::slice::from_ref(&cls), "classifier checkpoint")?;
    let before = store.clone();

    let inputs: Vec<&Image> = lq_idx.iter().map(|&i| &lq.images[i]).collect();
    let restored = restore_images(&store, &rcfg, &inputs)?;
    let images: Vec<&Image> = restored.iter().collect();
    let labels = lq.labels(&lq_idx);
    let (log, epoch_accuracy, acc) = fit_classifier(&mut store, &images, &labels, cfg, &plan, seed)?;

    verify_frozen(&before, &store, &plan)?;
    let mut report = StageReport::new(plan.clone());
    report.epoch_accuracy = epoch_accuracy;
    report.train_accuracy = Some(acc);
    Ok(StageOutput {
        checkpoint: checkpoint(plan.stage, seed, cfg, &store, &[cls]),
        working: store,
        log,
        report,
    })
}
