//! Training loop: seeded shuffling, mini-batch gradient steps, per-epoch
//! validation, best-checkpoint selection, early stopping, and a resume
//! sidecar carrying the optimizer moments and epoch counters.

use crate::config::TrainSection;
use anyhow::{bail, Context, Result};
use equijet_core::autodiff::{clip_grad_norm, AdamConfig, AdamState, Tape};
use equijet_core::geometry::rotation_from_axis_angle;
use equijet_core::metrics::{roc_auc, ScoredSample};
use equijet_core::models::{decode_checkpoint, encode_checkpoint};
use equijet_core::{build_model, JetEvent, Model, ModelConfig, Vec3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Batch size used for inference-only passes.
const EVAL_BATCH: usize = 256;

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub best_checkpoint: PathBuf,
}

/// Persistent trainer state between invocations (resume support).
struct TrainerState {
    next_epoch: usize,
    best_epoch: usize,
    best_val_loss: f64,
    since_best: usize,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
    adam_step: u64,
}

const STATE_MAGIC: &[u8; 8] = b"EQJTTRN1";

fn save_state(path: &Path, st: &TrainerState) -> Result<()> {
    let mut out = Vec::with_capacity(48 + 16 * st.adam_m.len());
    out.extend_from_slice(STATE_MAGIC);
    out.extend_from_slice(&(st.next_epoch as u64).to_le_bytes());
    out.extend_from_slice(&(st.best_epoch as u64).to_le_bytes());
    out.extend_from_slice(&st.best_val_loss.to_le_bytes());
    out.extend_from_slice(&(st.since_best as u64).to_le_bytes());
    out.extend_from_slice(&st.adam_step.to_le_bytes());
    out.extend_from_slice(&(st.adam_m.len() as u64).to_le_bytes());
    for v in st.adam_m.iter().chain(&st.adam_v) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

fn load_state(path: &Path, n_params: usize) -> Result<TrainerState> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.len() < 56 || &bytes[..8] != STATE_MAGIC {
        bail!("corrupt trainer state {}", path.display());
    }
    let u = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().expect("len"));
    let f = |at: usize| f64::from_le_bytes(bytes[at..at + 8].try_into().expect("len"));
    let len = u(48) as usize;
    if len != n_params || bytes.len() != 56 + 16 * len {
        bail!("trainer state {} does not match the model size", path.display());
    }
    let mut adam_m = Vec::with_capacity(len);
    let mut adam_v = Vec::with_capacity(len);
    for i in 0..len {
        adam_m.push(f(56 + 8 * i));
        adam_v.push(f(56 + 8 * (len + i)));
    }
    Ok(TrainerState {
        next_epoch: u(8) as usize,
        best_epoch: u(16) as usize,
        best_val_loss: f(24),
        since_best: u(32) as usize,
        adam_step: u(40),
        adam_m,
        adam_v,
    })
}

fn write_checkpoint(path: &Path, model: &Model) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model))
        .with_context(|| format!("writing checkpoint {}", path.display()))
}

/// Loads a model checkpoint from disk.
pub fn read_checkpoint(path: &Path) -> Result<Model> {
    let bytes =
        std::fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    decode_checkpoint(&bytes)
        .map_err(|e| anyhow::anyhow!("{e}"))
        .with_context(|| format!("parsing checkpoint {}", path.display()))
}

/// Mean cross-entropy and AUC of a model over a labeled set, evaluated in
/// fixed-size batches.
pub fn evaluate(model: &Model, events: &[JetEvent]) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut samples = Vec::with_capacity(events.len());
    for chunk in events.chunks(EVAL_BATCH) {
        let labels: Vec<u8> = chunk.iter().map(|e| e.label).collect();
        let mut tape = Tape::new();
        let (logits, loss) = model
            .record_loss(&mut tape, chunk, &labels)
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        loss_sum += tape.value(loss).scalar(0, 0, 0) * chunk.len() as f64;
        let z = tape.value(logits);
        for (i, e) in chunk.iter().enumerate() {
            samples.push(ScoredSample::new(z.scalar(i, 0, 1) - z.scalar(i, 0, 0), e.label));
        }
    }
    let auc = roc_auc(&samples).map_err(|e| anyhow::anyhow!("{e}"))?;
    Ok((loss_sum / events.len() as f64, auc))
}

/// Scores (signal-minus-background logit) for a labeled set.
pub fn score_events(model: &Model, events: &[JetEvent]) -> Result<Vec<ScoredSample>> {
    let mut samples = Vec::with_capacity(events.len());
    for chunk in events.chunks(EVAL_BATCH) {
        for (s, e) in model
            .scores(chunk)
            .map_err(|e| anyhow::anyhow!("{e}"))?
            .into_iter()
            .zip(chunk)
        {
            samples.push(ScoredSample::new(s, e.label));
        }
    }
    Ok(samples)
}

fn beam_axis_rotate(events: &[JetEvent], angle: f64) -> Vec<JetEvent> {
    let r = rotation_from_axis_angle(Vec3::Z, angle).expect("unit axis");
    events.iter().map(|e| e.rotated(&r)).collect()
}

/// Trains a model, writing `model.ckpt` (best validation loss), `last.ckpt`,
/// `trainer.state`, and `metrics.log` into `run_dir`.
pub fn train_run(
    model_cfg: &ModelConfig,
    train_events: &[JetEvent],
    val_events: &[JetEvent],
    params: &TrainSection,
    run_dir: &Path,
    resume: bool,
) -> Result<TrainOutcome> {
    if train_events.is_empty() || val_events.is_empty() {
        bail!("training and validation sets must be nonempty");
    }
    if params.batch_size == 0 {
        bail!("batch size must be positive");
    }
    std::fs::create_dir_all(run_dir)
        .with_context(|| format!("creating run directory {}", run_dir.display()))?;
    let best_path = run_dir.join("model.ckpt");
    let last_path = run_dir.join("last.ckpt");
    let state_path = run_dir.join("trainer.state");
    let log_path = run_dir.join("metrics.log");

    let adam_cfg = AdamConfig { lr: params.lr, ..AdamConfig::default() };
    let (mut model, mut adam, mut state, mut log) = if resume {
        let model = read_checkpoint(&last_path)?;
        if model.config() != model_cfg {
            bail!(
                "checkpoint {} was trained with a different model configuration",
                last_path.display()
            );
        }
        let st = load_state(&state_path, model.param_count())?;
        let adam = AdamState::from_parts(
            adam_cfg,
            st.adam_m.clone(),
            st.adam_v.clone(),
            st.adam_step,
        );
        let log = std::fs::OpenOptions::new()
            .append(true)
            .open(&log_path)
            .with_context(|| format!("appending to {}", log_path.display()))?;
        (model, adam, st, log)
    } else {
        let model = build_model(model_cfg).map_err(|e| anyhow::anyhow!("{e}"))?;
        let adam = AdamState::new(model.param_count(), adam_cfg);
        let state = TrainerState {
            next_epoch: 1,
            best_epoch: 0,
            best_val_loss: f64::INFINITY,
            since_best: 0,
            adam_m: Vec::new(),
            adam_v: Vec::new(),
            adam_step: 0,
        };
        let mut log = std::fs::File::create(&log_path)
            .with_context(|| format!("creating {}", log_path.display()))?;
        writeln!(log, "epoch,train_loss,val_loss,val_auc")?;
        (model, adam, state, log)
    };

    let n = train_events.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut epochs_run = 0;
    let mut stopped_early = false;

    for epoch in state.next_epoch..=params.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(
            model_cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        // Shuffle from the identity ordering so each epoch's batch order is
        // a pure function of the seed and epoch number; a resumed run then
        // replays exactly the schedule an uninterrupted run would use.
        for (i, slot) in order.iter_mut().enumerate() {
            *slot = i;
        }
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for (batch_idx, batch) in order.chunks(params.batch_size).enumerate() {
            let mut events: Vec<JetEvent> =
                batch.iter().map(|&i| train_events[i].clone()).collect();
            if params.augment {
                let angle = rng.random_range(0.0..core::f64::consts::TAU);
                events = beam_axis_rotate(&events, angle);
            }
            let labels: Vec<u8> = events.iter().map(|e| e.label).collect();
            let mut tape = Tape::new();
            let (_, loss) = model
                .record_loss(&mut tape, &events, &labels)
                .map_err(|e| anyhow::anyhow!("{e}"))?;
            let value = tape.value(loss).scalar(0, 0, 0);
            if !value.is_finite() {
                bail!(
                    "training diverged: loss {value} at epoch {epoch}, batch {batch_idx} \
                     (try a smaller --lr or batch size)"
                );
            }
            loss_sum += value * events.len() as f64;
            tape.backward(model.store_mut(), loss, 1.0)
                .map_err(|e| anyhow::anyhow!("{e}"))?;
            if params.clip_norm > 0.0 {
                clip_grad_norm(model.store_mut(), params.clip_norm);
            }
            adam.adam_step(model.store_mut());
        }
        let train_loss = loss_sum / n as f64;

        let (val_loss, val_auc) = evaluate(&model, val_events)?;
        writeln!(log, "{epoch},{train_loss:.6},{val_loss:.6},{val_auc:.6}")?;
        epochs_run += 1;

        if val_loss < state.best_val_loss {
            state.best_val_loss = val_loss;
            state.best_epoch = epoch;
            state.since_best = 0;
            write_checkpoint(&best_path, &model)?;
        } else {
            state.since_best += 1;
        }

        state.next_epoch = epoch + 1;
        let (m, v, step) = adam.to_parts();
        state.adam_m = m.to_vec();
        state.adam_v = v.to_vec();
        state.adam_step = step;
        write_checkpoint(&last_path, &model)?;
        save_state(&state_path, &state)?;

        if state.since_best >= params.patience {
            stopped_early = true;
            break;
        }
    }

    if state.best_epoch == 0 {
        // Zero-epoch run (e.g. resume past the end): keep artifacts coherent.
        write_checkpoint(&best_path, &model)?;
    }

    Ok(TrainOutcome {
        best_epoch: state.best_epoch,
        best_val_loss: state.best_val_loss,
        epochs_run,
        stopped_early,
        best_checkpoint: best_path,
    })
}
