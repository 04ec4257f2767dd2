//! Harness modes: synthetic data generation, augmentation preview,
//! training, evaluation, prediction and whole-pipeline gradient checking.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{select_slices, Mode, RunConfig};
use crate::data::{encode_image, generate_synthetic_scene, load_dataset, write_scene, LfScene};
use crate::diagnostics::HistogramReport;
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossReport};
use crate::metrics::{aggregate, mae, score_pair, SaliencyScores};
use crate::mixld::{augment_scene, AugmentedScene, MixTrace};
use crate::model::LfTracy;
use crate::tensor::{check_gradients, GradCheckOptions, Graph, OpKind};

pub const LOG_FILE: &str = "train_log.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const EVAL_LOG_FILE: &str = "eval_log.csv";
pub const FINAL_CHECKPOINT: &str = "model.lft";
pub const SCORES_FILE: &str = "scores.csv";
pub const AGGREGATE_FILE: &str = "aggregate.json";
pub const TRACE_FILE: &str = "augment_trace.json";
pub const HISTOGRAM_FILE: &str = "hist_report.json";

const LOG_HEADER: &str = "epoch,step,total,s1,s2,s3,s4,final,tversky";

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Bucket in `0..100` from the first eight bytes of SHA-256 of the name.
pub fn holdout_bucket(name: &str) -> u32 {
    let digest = Sha256::digest(name.as_bytes());
    let head: [u8; 8] = digest[..8].try_into().expect("digest has 32 bytes");
    (u64::from_le_bytes(head) % 100) as u32
}

/// Splits scenes into (train, held-out); a scene is held out when its
/// bucket is below `percent`.
pub fn split_holdout(scenes: Vec<LfScene>, percent: u32) -> (Vec<LfScene>, Vec<LfScene>) {
    scenes.into_iter().partition(|s| holdout_bucket(&s.name) >= percent)
}

/// Applies the configured focal-slice reduction.
pub fn prepare_scenes(cfg: &RunConfig, scenes: Vec<LfScene>) -> Result<Vec<LfScene>> {
    scenes.iter().map(|s| select_slices(s, cfg.stack_slices)).collect()
}

/// Loads `dataset_root` at the mode's image size with the slice reduction
/// applied.
pub fn load_scenes(cfg: &RunConfig, mode: Mode) -> Result<Vec<LfScene>> {
    let scenes = load_dataset(&cfg.dataset_root, Some(cfg.image_size(mode)))?;
    prepare_scenes(cfg, scenes)
}

/// One optimizer step: batch-averaged loss terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossReport,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        let mut cols = vec![self.epoch.to_string(), self.step.to_string(), l.total.to_string()];
        cols.extend(l.structure_per_stage.iter().map(|v| v.to_string()));
        cols.push(l.structure_final.to_string());
        cols.push(l.tversky.to_string());
        cols.join(",")
    }
}

pub struct TrainOutcome {
    pub model: LfTracy,
    pub steps: Vec<StepRecord>,
    /// `(epoch, mean MAE)` on the held-out scenes after each epoch.
    pub holdout_mae: Vec<(usize, f64)>,
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len() as f64;
    let stages = reports[0].structure_per_stage.len();
    LossReport {
        total: reports.iter().map(|r| r.total).sum::<f64>() / n,
        structure_per_stage: (0..stages)
            .map(|i| reports.iter().map(|r| r.structure_per_stage[i]).sum::<f64>() / n)
            .collect(),
        structure_final: reports.iter().map(|r| r.structure_final).sum::<f64>() / n,
        tversky: reports.iter().map(|r| r.tversky).sum::<f64>() / n,
    }
}

/// Mean MAE of the model's predictions over `scenes`.
pub fn dataset_mae(model: &LfTracy, scenes: &[LfScene]) -> Result<f64> {
    if scenes.is_empty() {
        return Err(Error::Usage("no scenes to evaluate".into()));
    }
    let mut total = 0.0;
    for s in scenes {
        total += mae(&model.predict_mask(s)?, &s.gt)?;
    }
    Ok(total / scenes.len() as f64)
}

/// Trains a fresh model on `train_set`. Every epoch shuffles the scenes;
/// scene `i` of epoch `e` is augmented with index `e·n + i`. With `out`,
/// the step log, wall-time log, held-out log and checkpoints are written
/// there as training proceeds.
pub fn train(cfg: &RunConfig, train_set: &[LfScene], held_out: &[LfScene], out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate(Mode::Train)?;
    if train_set.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    let mut model = LfTracy::new(cfg.model_config(Mode::Train), cfg.seed)?;
    let optimizer = cfg.optimizer();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);

    let mut log = String::from(LOG_HEADER);
    log.push('\n');
    let mut timing = String::from("epoch,step,seconds\n");
    let mut eval_log = String::from("epoch,holdout_mae\n");
    let flush = |name: &str, text: &str| -> Result<()> {
        match out {
            Some(dir) => write_file(&dir.join(name), text),
            None => Ok(()),
        }
    };

    let n = train_set.len();
    let mut steps = Vec::new();
    let mut holdout_mae = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut shuffle_rng);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let started = Instant::now();
            step += 1;
            model.store.zero_grad();
            let mut reports = Vec::with_capacity(batch.len());
            for (j, &idx) in batch.iter().enumerate() {
                let position = b * cfg.batch_size + j;
                let index = (epoch * n + position) as u64;
                let aug = augment_scene(&train_set[idx], &cfg.augment, index)?;
                let mut g = Graph::new();
                let fwd = model.forward_augmented(&mut g, &aug, true)?;
                let (loss, report) = total_loss(&mut g, &fwd.decoded, &aug.gt.to_tensor(), &cfg.loss)?;
                if !report.total.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, step });
                }
                g.backward(loss, &mut model.store)?;
                reports.push(report);
            }
            model.store.scale_grads(1.0 / batch.len() as f64);
            optimizer.step(&mut model.store)?;
            let record = StepRecord {
                epoch,
                step,
                loss: mean_report(&reports),
            };
            log.push_str(&record.csv_row());
            log.push('\n');
            timing.push_str(&format!("{epoch},{step},{:.6}\n", started.elapsed().as_secs_f64()));
            steps.push(record);
        }
        if !held_out.is_empty() {
            let m = dataset_mae(&model, held_out)?;
            eval_log.push_str(&format!("{epoch},{m}\n"));
            holdout_mae.push((epoch, m));
        }
        flush(LOG_FILE, &log)?;
        flush(TIMING_FILE, &timing)?;
        flush(EVAL_LOG_FILE, &eval_log)?;
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                model
                    .store
                    .save_checkpoint(&dir.join(format!("checkpoint_epoch{:04}.lft", epoch + 1)))?;
            }
        }
    }
    flush(LOG_FILE, &log)?;
    flush(TIMING_FILE, &timing)?;
    flush(EVAL_LOG_FILE, &eval_log)?;
    if let Some(dir) = out {
        model.store.save_checkpoint(&dir.join(FINAL_CHECKPOINT))?;
        write_file(&dir.join("config.json"), cfg.to_json())?;
    }
    Ok(TrainOutcome {
        model,
        steps,
        holdout_mae,
    })
}

/// `train` mode: load, split, train, write artifacts under `output_dir`.
pub fn run_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate(Mode::Train)?;
    let scenes = load_scenes(cfg, Mode::Train)?;
    let (train_set, held_out) = split_holdout(scenes, cfg.holdout_percent);
    train(cfg, &train_set, &held_out, Some(&cfg.output_dir))
}

/// Builds the model for `mode` and loads the configured checkpoint.
pub fn load_model(cfg: &RunConfig, mode: Mode) -> Result<LfTracy> {
    let mut model = LfTracy::new(cfg.model_config(mode), cfg.seed)?;
    model.store.load_checkpoint(&cfg.checkpoint_path())?;
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneScores {
    pub scene: String,
    pub scores: SaliencyScores,
}

/// Scores every scene, in dataset order.
pub fn evaluate_dataset(model: &LfTracy, scenes: &[LfScene]) -> Result<Vec<SceneScores>> {
    if scenes.is_empty() {
        return Err(Error::Usage("dataset contains no scenes".into()));
    }
    scenes
        .iter()
        .map(|s| {
            Ok(SceneScores {
                scene: s.name.clone(),
                scores: score_pair(&model.predict_mask(s)?, &s.gt)?,
            })
        })
        .collect()
}

/// Writes `scores.csv` and `aggregate.json`, returning the aggregate.
pub fn write_scores(dir: &Path, rows: &[SceneScores]) -> Result<SaliencyScores> {
    let agg = aggregate(&rows.iter().map(|r| r.scores).collect::<Vec<_>>())?;
    let mut csv = String::from("scene,mae,f_mean,e_mean,s_measure\n");
    for r in rows {
        let s = &r.scores;
        csv.push_str(&format!("{},{},{},{},{}\n", r.scene, s.mae, s.f_mean, s.e_mean, s.s_measure));
    }
    write_file(&dir.join(SCORES_FILE), csv)?;
    write_file(&dir.join(AGGREGATE_FILE), serde_json::to_string_pretty(&agg)?)?;
    Ok(agg)
}

/// `eval` mode over every scene of `dataset_root`.
pub fn run_eval(cfg: &RunConfig) -> Result<SaliencyScores> {
    cfg.validate(Mode::Eval)?;
    let scenes = load_scenes(cfg, Mode::Eval)?;
    if scenes.is_empty() {
        return Err(Error::Usage(format!(
            "dataset {} contains no scenes",
            cfg.dataset_root.display()
        )));
    }
    let model = load_model(cfg, Mode::Eval)?;
    let rows = evaluate_dataset(&model, &scenes)?;
    write_scores(&cfg.output_dir, &rows)
}

/// `predict` mode: writes `<output_dir>/masks/<scene>.pgm` per scene.
pub fn run_predict(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate(Mode::Predict)?;
    let scenes = load_scenes(cfg, Mode::Predict)?;
    if scenes.is_empty() {
        return Err(Error::Usage(format!(
            "dataset {} contains no scenes",
            cfg.dataset_root.display()
        )));
    }
    let model = load_model(cfg, Mode::Predict)?;
    let dir = cfg.output_dir.join("masks");
    scenes
        .iter()
        .map(|s| {
            let path = dir.join(format!("{}.pgm", s.name));
            write_file(&path, encode_image(&model.predict_mask(s)?))?;
            Ok(path)
        })
        .collect()
}

/// Name of the `i`-th synthetic scene.
pub fn synthetic_name(i: usize) -> String {
    format!("scene_{i:04}")
}

/// The synthetic scenes `gen-data` would write.
pub fn synthetic_dataset(cfg: &RunConfig) -> Result<Vec<LfScene>> {
    let g = &cfg.gen_data;
    (0..g.num_scenes)
        .map(|i| {
            let mut s = generate_synthetic_scene(
                crate::mixld::scene_seed(cfg.seed, i as u64),
                cfg.image_size(Mode::GenData),
                g.num_slices,
                g.num_shapes,
            )?;
            s.name = synthetic_name(i);
            Ok(s)
        })
        .collect()
}

/// `gen-data` mode: writes synthetic scenes under `dataset_root`.
pub fn run_gen_data(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    synthetic_dataset(cfg)?
        .iter()
        .map(|s| write_scene(&cfg.dataset_root, s))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub scene: String,
    pub index: u64,
    pub trace: MixTrace,
}

pub struct AugmentOutcome {
    pub scenes: Vec<AugmentedScene>,
    pub histograms: Option<HistogramReport>,
}

/// `augment` mode: augments every scene with its dataset position as the
/// scene index, writes the results under `<output_dir>/augmented`, the
/// trace as JSON, and optionally the histogram report.
pub fn run_augment(cfg: &RunConfig, histograms: bool) -> Result<AugmentOutcome> {
    cfg.augment.validate()?;
    let scenes = prepare_scenes(cfg, load_dataset(&cfg.dataset_root, cfg.image_size)?)?;
    let mut report = histograms.then(HistogramReport::new);
    let mut traces = Vec::with_capacity(scenes.len());
    let mut out = Vec::with_capacity(scenes.len());
    let root = cfg.output_dir.join("augmented");
    for (i, s) in scenes.iter().enumerate() {
        let aug = augment_scene(s, &cfg.augment, i as u64)?;
        write_scene(&root, &aug.to_scene())?;
        if let Some(r) = report.as_mut() {
            r.add(s, &aug)?;
        }
        traces.push(TraceEntry {
            scene: s.name.clone(),
            index: i as u64,
            trace: aug.trace.clone(),
        });
        out.push(aug);
    }
    write_file(&cfg.output_dir.join(TRACE_FILE), serde_json::to_string_pretty(&traces)?)?;
    if let Some(r) = &report {
        write_file(&cfg.output_dir.join(HISTOGRAM_FILE), serde_json::to_string(r)?)?;
    }
    Ok(AugmentOutcome {
        scenes: out,
        histograms: report,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: String,
    pub tensors: usize,
    pub entries: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSummary {
    pub tol: f64,
    pub groups: Vec<GroupCheck>,
}

impl GradCheckSummary {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn worst(&self) -> Option<&GroupCheck> {
        self.groups.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn group(&self, name: &str) -> Option<&GroupCheck> {
        self.groups.iter().find(|g| g.group == name)
    }
}

/// The probe scene of a gradient check: a synthetic scene with
/// `distinct_slices` slices duplicated up to 12.
pub fn gradcheck_scene(cfg: &RunConfig) -> Result<LfScene> {
    generate_synthetic_scene(
        cfg.seed,
        cfg.image_size(Mode::Gradcheck),
        cfg.gradcheck.distinct_slices,
        cfg.gen_data.num_shapes,
    )
}

/// Finite-difference check of the full training loss for every parameter
/// group. `fault` corrupts one backward rule, for testing the checker.
pub fn gradcheck(cfg: &RunConfig, fault: Option<OpKind>) -> Result<GradCheckSummary> {
    cfg.validate(Mode::Gradcheck)?;
    let size = cfg.image_size(Mode::Gradcheck);
    if size > 64 || cfg.gradcheck.distinct_slices > 3 || cfg.encoder.blocks_per_stage != 1 {
        return Err(Error::Config(
            "gradcheck needs image_size ≤ 64, ≤ 3 distinct slices and blocks_per_stage = 1".into(),
        ));
    }
    let scene = gradcheck_scene(cfg)?;
    let gt = scene.gt.to_tensor();
    let mut model = LfTracy::new(cfg.model_config(Mode::Gradcheck), cfg.seed)?;
    let groups = model.param_groups();
    let ids: Vec<_> = groups.iter().flat_map(|(_, ids)| ids.iter().copied()).collect();
    let opts = GradCheckOptions {
        eps: cfg.gradcheck.eps,
        tol: cfg.gradcheck.tol,
        floor: cfg.gradcheck.floor,
        max_entries: cfg.gradcheck.max_entries,
        seed: cfg.seed,
    };
    let mut store = std::mem::take(&mut model.store);
    let report = check_gradients(&mut store, &ids, &opts, |g, store| {
        if let Some(kind) = fault {
            g.corrupt_backward(kind);
        }
        let fwd = model.forward_images(g, store, &scene.af, scene.fs.slices(), true)?;
        Ok(total_loss(g, &fwd.decoded, &gt, &cfg.loss)?.0)
    });
    model.store = store;
    let report = report?;

    let mut checks = report.params.iter();
    let groups = groups
        .into_iter()
        .map(|(name, ids)| {
            let members: Vec<_> = checks.by_ref().take(ids.len()).collect();
            let worst = members
                .iter()
                .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
                .expect("every group has parameters");
            GroupCheck {
                group: name.to_string(),
                tensors: members.len(),
                entries: members.iter().map(|m| m.checked).sum(),
                max_rel_err: worst.max_rel_err,
                worst_param: worst.name.clone(),
                worst_index: worst.worst_index,
                analytic: worst.analytic,
                numeric: worst.numeric,
                passed: worst.max_rel_err <= opts.tol,
            }
        })
        .collect();
    Ok(GradCheckSummary { tol: opts.tol, groups })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn holdout_split_is_stable_and_near_eighty_twenty() {
        let held = (0..1000)
            .filter(|i| holdout_bucket(&synthetic_name(*i)) < 20)
            .count();
        assert!((150..250).contains(&held), "{held}");
        assert_eq!(holdout_bucket("a"), holdout_bucket("a"));
    }

    #[test]
    fn zero_percent_holds_nothing_out() {
        let mut cfg = RunConfig::default();
        cfg.image_size = Some(16);
        cfg.gen_data.num_scenes = 5;
        cfg.gen_data.num_slices = 2;
        let scenes = synthetic_dataset(&cfg).unwrap();
        let (train, held) = split_holdout(scenes, 0);
        assert_eq!((train.len(), held.len()), (5, 0));
    }
}
