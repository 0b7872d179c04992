//! Joint optimization of the total loss, run directories and gradient checks.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{ConvergenceRecord, ConvergenceWindow};
use crate::checkpoint::save_checkpoint;
use crate::data::{generate_dataset, make_batch, sample_batch, Bag, Batch, GenConfig, MIN_T_TRAIN};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalSummary};
use crate::model::{total_loss, FrozenTargets, LossConfig, LossOptions, LossOutput, Model, Term};
use crate::tensor::{grad_check, AdamConfig, AdamState, GradCheckOptions, GradCheckReport, Graph, Precision};

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const RUNLOG_FILE: &str = "runlog.jsonl";
pub const CONVERGENCE_FILE: &str = "convergence.jsonl";
pub const SPLIT_FILE: &str = "split.json";
pub const LOCK_FILE: &str = "run.lock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub t_train: usize,
    /// Sliding window length for the convergence indicators.
    pub window: usize,
    pub seed: u64,
    /// Evaluate on the held-out split every this many iterations (0: only at the end).
    pub eval_every: usize,
    pub holdout_fraction: f64,
    pub precision: Precision,
    pub loss: LossConfig,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            iterations: 300,
            t_train: 64,
            window: 50,
            seed: 7,
            eval_every: 50,
            holdout_fraction: 0.2,
            precision: Precision::F64,
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let mut bad = Vec::new();
        if self.batch_size == 0 {
            bad.push("batch_size must be positive".to_string());
        }
        if self.loss.enabled(Term::Triplet) && self.batch_size < 2 {
            bad.push("batch_size must be at least 2 when the triplet term is enabled".into());
        }
        if self.t_train < MIN_T_TRAIN {
            bad.push(format!("t_train {} < {MIN_T_TRAIN}", self.t_train));
        }
        if self.window == 0 {
            bad.push("window must be positive".into());
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            bad.push(format!("holdout_fraction {} outside (0, 1)", self.holdout_fraction));
        }
        let a = &self.adam;
        if !(a.lr >= 0.0 && a.weight_decay >= 0.0 && a.eps > 0.0) {
            bad.push("adam lr, weight_decay must be nonnegative and eps positive".into());
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            bad.push("adam betas must lie in [0, 1)".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub u_mil: f64,
    pub ma: f64,
    pub m_mil: f64,
    pub triplet: f64,
    pub total: f64,
    pub m_ra: f64,
    pub m_rf: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_ap: Option<f64>,
}

/// Everything that changes from one step to the next.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    pub cfg: TrainConfig,
    pub win_ra: ConvergenceWindow,
    pub win_rf: ConvergenceWindow,
    pub iteration: usize,
    pub rng: ChaCha8Rng,
    pub last: Option<ConvergenceRecord>,
}

impl TrainState {
    pub fn new(model: Model, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let e = &model.encoder_cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self {
            adam: AdamState::new(cfg.adam, model.store.tensors()),
            win_ra: ConvergenceWindow::new(cfg.window, e.d_audio, e.d_rgb)?,
            win_rf: ConvergenceWindow::new(cfg.window, e.d_flow, e.d_rgb)?,
            model,
            cfg: cfg.clone(),
            iteration: 0,
            rng,
            last: None,
        })
    }
}

fn non_finite_diagnostic(g: &Graph, out: &LossOutput) -> String {
    let Some(term) = out.components.first_non_finite() else {
        return "total".into();
    };
    if let (Term::Ma, Some(a)) = (term, &out.align) {
        let parts = [
            ("cos_ra", a.cos_ra),
            ("sce_ra", a.sce_ra),
            ("cos_rf", a.cos_rf),
            ("sce_rf", a.sce_rf),
            ("cos_af", a.cos_af),
            ("sce_af", a.sce_af),
            ("aux_a", a.aux_a),
            ("aux_f", a.aux_f),
        ];
        if let Some((name, _)) = parts.iter().find(|(_, v)| !g.value(*v).item().is_finite()) {
            return format!("ma.{name}");
        }
    }
    term.as_str().into()
}

/// One forward/backward/update on `batch`.
pub fn train_step(state: &mut TrainState, batch: &Batch) -> Result<IterationRecord> {
    let mut g = Graph::with_precision(state.cfg.precision);
    let p = state.model.store.bind(&mut g);
    let out = total_loss(
        &state.model,
        &mut g,
        &p,
        batch,
        &state.cfg.loss,
        &LossOptions::default(),
    )?;
    if !out.components.total.is_finite() {
        return Err(Error::NonFinite(non_finite_diagnostic(&g, &out)));
    }
    let mut grads = g.backward(out.total)?;
    let grads: Vec<_> = p.vars().iter().map(|&v| grads.take(v)).collect();
    if let Some(i) = grads.iter().position(|t| !t.all_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient of {}",
            state.model.store.names()[i]
        )));
    }
    state.adam.step(state.model.store.tensors_mut(), &grads)?;
    let m_ra = state.win_ra.update(&out.assign_ra)?;
    let m_rf = state.win_rf.update(&out.assign_rf)?;
    state.iteration += 1;
    state.last = Some(ConvergenceRecord {
        iteration: state.iteration,
        m_ra,
        m_rf,
        theta_ra: out.assign_ra.theta.clone(),
        theta_rf: out.assign_rf.theta.clone(),
    });
    let c = out.components;
    Ok(IterationRecord {
        iteration: state.iteration,
        u_mil: c.u_mil,
        ma: c.ma,
        m_mil: c.m_mil,
        triplet: c.triplet,
        total: c.total,
        m_ra,
        m_rf,
        eval_ap: None,
    })
}

/// Bag indices of a stratified train/held-out partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub holdout: Vec<String>,
}

/// Holds out `fraction` of each class (at least one bag per class when the
/// class has two or more), chosen by `seed`.
pub fn split_holdout(bags: &[Bag], fraction: f64, seed: u64) -> Result<Split> {
    if bags.len() < 2 {
        return Err(Error::Empty("dataset too small to split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let mut held = vec![false; bags.len()];
    for y in [0u8, 1] {
        let mut idx: Vec<usize> = (0..bags.len()).filter(|&i| bags[i].label == y).collect();
        idx.shuffle(&mut rng);
        let n = idx.len();
        let k = if n >= 2 {
            ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
        } else {
            0
        };
        for &i in &idx[..k] {
            held[i] = true;
        }
    }
    let pick = |want: bool| {
        bags.iter()
            .zip(&held)
            .filter(|(_, &h)| h == want)
            .map(|(b, _)| b.id.clone())
            .collect()
    };
    Ok(Split {
        train: pick(false),
        holdout: pick(true),
    })
}

fn select<'a>(bags: &'a [Bag], ids: &[String]) -> Vec<&'a Bag> {
    bags.iter().filter(|b| ids.contains(&b.id)).collect()
}

/// A run directory owned by one command; the lock file is removed on drop.
#[derive(Debug)]
pub struct RunDir {
    path: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    pub fn acquire(path: &Path) -> Result<Self> {
        fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        let lock = path.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(Error::Locked(path.to_path_buf()));
            }
            Err(e) => return Err(Error::io(&lock, e)),
        }
        Ok(Self {
            path: path.to_path_buf(),
            lock,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<()> {
        let p = self.file(name);
        fs::write(&p, contents).map_err(|e| Error::io(&p, e))
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

struct JsonLines {
    out: BufWriter<File>,
    path: PathBuf,
}

impl JsonLines {
    fn create(path: PathBuf) -> Result<Self> {
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            out: BufWriter::new(f),
            path,
        })
    }

    fn push<T: Serialize>(&mut self, v: &T) -> Result<()> {
        let line = serde_json::to_string(v).expect("record serializes");
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<IterationRecord>,
    pub convergence: Vec<ConvergenceRecord>,
    pub split: Split,
    /// Held-out metrics after the last iteration.
    pub eval: EvalSummary,
}

/// Splits `bags`, trains for `cfg.iterations` steps on the training part and
/// evaluates on the held-out part. With a run directory, writes the split,
/// the run log and convergence trace as it goes and the checkpoint at the end.
pub fn train_run(model: Model, cfg: &TrainConfig, bags: &[Bag], run: Option<&RunDir>) -> Result<TrainOutcome> {
    let split = split_holdout(bags, cfg.holdout_fraction, cfg.seed)?;
    let train: Vec<Bag> = select(bags, &split.train).into_iter().cloned().collect();
    let holdout: Vec<Bag> = select(bags, &split.holdout).into_iter().cloned().collect();
    let mut state = TrainState::new(model, cfg)?;

    let (mut runlog, mut convlog) = match run {
        Some(r) => {
            r.write(
                SPLIT_FILE,
                &serde_json::to_string_pretty(&split).expect("split serializes"),
            )?;
            (
                Some(JsonLines::create(r.file(RUNLOG_FILE))?),
                Some(JsonLines::create(r.file(CONVERGENCE_FILE))?),
            )
        }
        None => (None, None),
    };

    let mut log = Vec::with_capacity(cfg.iterations);
    let mut convergence = Vec::with_capacity(cfg.iterations);
    let mut eval = None;
    for it in 1..=cfg.iterations {
        let batch = sample_batch(&train, cfg.batch_size, cfg.t_train, &mut state.rng)?;
        let mut rec = train_step(&mut state, &batch)?;
        if it == cfg.iterations || (cfg.eval_every > 0 && it % cfg.eval_every == 0) {
            let s = evaluate(&state.model, &holdout)?.summary;
            rec.eval_ap = Some(s.ap_fused);
            eval = Some(s);
            log::info!(
                "iter {it}: total {:.4} u_mil {:.4} ma {:.4} m_mil {:.4} m_ra {:.3} m_rf {:.3} ap {:.4}",
                rec.total,
                rec.u_mil,
                rec.ma,
                rec.m_mil,
                rec.m_ra,
                rec.m_rf,
                s.ap_fused
            );
        }
        let conv = state.last.clone().expect("step recorded");
        if let Some(w) = runlog.as_mut() {
            w.push(&rec)?;
        }
        if let Some(w) = convlog.as_mut() {
            w.push(&conv)?;
        }
        log.push(rec);
        convergence.push(conv);
    }
    let eval = match eval {
        Some(e) => e,
        None => evaluate(&state.model, &holdout)?.summary,
    };
    if let Some(r) = run {
        save_checkpoint(&r.file(CHECKPOINT_FILE), &state.model.store)?;
    }
    Ok(TrainOutcome {
        model: state.model,
        log,
        convergence,
        split,
        eval,
    })
}

/// One normal and one anomalous bag of exactly `t` steps from `gen`'s
/// distribution, as a full-length batch.
pub fn micro_batch(gen: &GenConfig, t: usize, seed: u64) -> Result<Batch> {
    let cfg = GenConfig {
        n_bags: 2,
        anomaly_fraction: 0.5,
        t_min: t,
        t_max: t,
        seed,
        ..gen.clone()
    };
    let bags = generate_dataset(&cfg)?;
    let refs: Vec<&Bag> = bags.iter().collect();
    make_batch(&refs, t, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Gradient-check result for one parameter group (a layer).
#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    pub tensors: usize,
    pub components: usize,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone)]
pub struct ModelGradCheck {
    pub report: GradCheckReport,
    pub groups: Vec<GroupCheck>,
}

fn group_of(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(g, _)| g)
}

/// Finite-difference check of the total loss with respect to every model
/// parameter. The subspace assignments are searched once and then held
/// fixed, since they are piecewise constant in the parameters, and so are
/// the values behind every stop-gradient.
pub fn gradcheck_model(
    model: &Model,
    batch: &Batch,
    loss: &LossConfig,
    opts: GradCheckOptions,
    inject_fault: bool,
) -> Result<ModelGradCheck> {
    let lopts = {
        let mut g = Graph::new();
        let p = model.store.bind_frozen(&mut g);
        let out = total_loss(model, &mut g, &p, batch, loss, &LossOptions::default())?;
        let f = out.forward;
        LossOptions {
            fixed: Some((out.assign_ra, out.assign_rf)),
            frozen: Some(FrozenTargets {
                z_r: g.value(f.z_r).clone(),
                s_r: g.value(f.s_r).clone(),
                z_a: g.value(f.z_a).clone(),
                z_f: g.value(f.z_f).clone(),
            }),
            inject_fault,
        }
    };
    let leaves: Vec<(String, _)> = model
        .store
        .names()
        .iter()
        .cloned()
        .zip(model.store.tensors().iter().cloned())
        .collect();
    let report = grad_check(&leaves, opts, |g, vars| {
        let p = crate::nn::Bound::from_vars(vars.to_vec());
        Ok(total_loss(model, g, &p, batch, loss, &lopts)?.total)
    })?;
    let mut groups: Vec<GroupCheck> = Vec::new();
    for leaf in &report.leaves {
        let name = group_of(&leaf.name);
        match groups.last_mut() {
            Some(gc) if gc.name == name => {
                gc.tensors += 1;
                gc.components += leaf.components_checked;
                gc.max_relative_error = gc.max_relative_error.max(leaf.max_relative_error);
            }
            _ => groups.push(GroupCheck {
                name: name.to_string(),
                tensors: 1,
                components: leaf.components_checked,
                max_relative_error: leaf.max_relative_error,
            }),
        }
    }
    Ok(ModelGradCheck { report, groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dims;
    use crate::encoder::EncoderConfig;
    use crate::fusion::FusionConfig;

    fn micro() -> (Model, Vec<Bag>, TrainConfig) {
        let enc = EncoderConfig {
            d_rgb: 12,
            d_flow: 8,
            d_audio: 4,
            heads: 2,
            layers: 1,
            ..EncoderConfig::default()
        };
        let fus = FusionConfig {
            hidden: 10,
            dim: 8,
            ..FusionConfig::default()
        };
        let gen = GenConfig {
            n_bags: 12,
            t_min: 20,
            t_max: 30,
            rgb_dim: 10,
            audio_dim: 6,
            flow_dim: 8,
            audio_signal_dims: 4,
            flow_signal_dims: 6,
            segment_min: 5,
            segment_max: 10,
            audio_lag_min: -1,
            audio_lag_max: 2,
            ..GenConfig::default()
        };
        let dims = Dims {
            rgb: 10,
            audio: 6,
            flow: 8,
        };
        let cfg = TrainConfig {
            batch_size: 4,
            iterations: 6,
            t_train: 16,
            window: 3,
            eval_every: 3,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        (
            Model::new(&enc, &fus, dims, 1).unwrap(),
            generate_dataset(&gen).unwrap(),
            cfg,
        )
    }

    #[test]
    fn same_seed_same_trace() {
        let (model, bags, cfg) = micro();
        let a = train_run(model.clone(), &cfg, &bags, None).unwrap();
        let b = train_run(model, &cfg, &bags, None).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.model.store.tensors(), b.model.store.tensors());
        assert_eq!(a.log.len(), 6);
        assert!(a.log.windows(2).all(|w| w[1].iteration == w[0].iteration + 1));
        assert_eq!(a.log.iter().filter(|r| r.eval_ap.is_some()).count(), 2);
    }

    #[test]
    fn zero_learning_rate_freezes_everything() {
        let (model, bags, mut cfg) = micro();
        cfg.adam.lr = 0.0;
        cfg.adam.weight_decay = 0.0;
        let before = model.store.tensors().to_vec();
        let out = train_run(model, &cfg, &bags, None).unwrap();
        assert_eq!(out.model.store.tensors(), &before[..]);
        let train: Vec<Bag> = select(&bags, &out.split.train).into_iter().cloned().collect();
        let batch = make_batch(&train.iter().collect::<Vec<_>>(), 16, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut state = TrainState::new(out.model, &cfg).unwrap();
        let a = train_step(&mut state, &batch).unwrap();
        let b = train_step(&mut state, &batch).unwrap();
        assert_eq!((a.total, a.u_mil, a.ma), (b.total, b.u_mil, b.ma));
    }

    #[test]
    fn zero_iterations_return_initialization() {
        let (model, bags, mut cfg) = micro();
        cfg.iterations = 0;
        let before = model.store.tensors().to_vec();
        let out = train_run(model, &cfg, &bags, None).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(out.model.store.tensors(), &before[..]);
    }

    #[test]
    fn components_recompose_every_iteration() {
        let (model, bags, cfg) = micro();
        let out = train_run(model, &cfg, &bags, None).unwrap();
        let l = &cfg.loss;
        for r in &out.log {
            let hand = r.u_mil + l.lambda_align * r.ma + l.lambda_mmil * r.m_mil + l.lambda_triplet * r.triplet;
            assert!((hand - r.total).abs() < 1e-12);
            assert!(r.m_ra >= 1.0 && r.m_rf >= 1.0);
        }
    }

    #[test]
    fn rgb_encoder_is_untouched_by_alignment_alone() {
        let (model, bags, mut cfg) = micro();
        cfg.loss.ablate = vec![Term::Umil];
        cfg.loss.lambda_mmil = 0.0;
        cfg.loss.lambda_triplet = 0.0;
        cfg.adam.weight_decay = 0.0;
        let rgb = |m: &Model| -> Vec<_> {
            m.store
                .names()
                .iter()
                .zip(m.store.tensors())
                .filter(|(n, _)| n.starts_with("enc.rgb"))
                .map(|(_, t)| t.clone())
                .collect()
        };
        let before = rgb(&model);
        let with_ma = train_run(model.clone(), &cfg, &bags, None).unwrap();
        cfg.loss.ablate.push(Term::Ma);
        let without = train_run(model, &cfg, &bags, None).unwrap();
        assert_eq!(rgb(&with_ma.model), before);
        assert_eq!(rgb(&with_ma.model), rgb(&without.model));
        assert!(without.log.iter().all(|r| r.ma == 0.0));
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let (_, bags, _) = micro();
        let s = split_holdout(&bags, 0.25, 3).unwrap();
        assert_eq!(s.train.len() + s.holdout.len(), bags.len());
        assert!(s.holdout.iter().all(|id| !s.train.contains(id)));
        for y in [0, 1] {
            assert!(bags.iter().any(|b| b.label == y && s.holdout.contains(&b.id)));
        }
        assert_eq!(s, split_holdout(&bags, 0.25, 3).unwrap());
    }

    #[test]
    fn run_directory_is_exclusive_and_complete() {
        let dir = tempfile::tempdir().unwrap();
        let (model, bags, cfg) = micro();
        {
            let run = RunDir::acquire(dir.path()).unwrap();
            assert!(matches!(RunDir::acquire(dir.path()), Err(Error::Locked(_))));
            train_run(model, &cfg, &bags, Some(&run)).unwrap();
        }
        assert!(!dir.path().join(LOCK_FILE).exists());
        let lines = fs::read_to_string(dir.path().join(RUNLOG_FILE)).unwrap();
        let recs: Vec<IterationRecord> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(recs.len(), cfg.iterations);
        let conv = fs::read_to_string(dir.path().join(CONVERGENCE_FILE)).unwrap();
        assert_eq!(conv.lines().count(), cfg.iterations);
        assert!(dir.path().join(CHECKPOINT_FILE).exists());
        assert!(dir.path().join(SPLIT_FILE).exists());
    }

    #[test]
    fn nan_inputs_name_the_failing_term() {
        let (model, bags, cfg) = micro();
        let refs: Vec<&Bag> = bags.iter().take(4).collect();
        let mut batch = make_batch(&refs, 16, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        batch.audio.data_mut()[0] = f64::NAN;
        let mut state = TrainState::new(model, &cfg).unwrap();
        match train_step(&mut state, &batch) {
            Err(Error::NonFinite(name)) => assert_eq!(name, "u_mil"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn single_class_batches_do_not_abort() {
        let (model, bags, cfg) = micro();
        let normals: Vec<&Bag> = bags.iter().filter(|b| b.label == 0).take(3).collect();
        let batch = make_batch(&normals, 16, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut state = TrainState::new(model, &cfg).unwrap();
        let r = train_step(&mut state, &batch).unwrap();
        assert_eq!(r.triplet, 0.0);
        assert!(r.total.is_finite());
    }

    #[test]
    fn micro_gradcheck_passes_and_fault_is_caught() {
        let (model, bags, cfg) = micro();
        let pair: Vec<&Bag> = [0u8, 1]
            .iter()
            .map(|&y| bags.iter().find(|b| b.label == y).unwrap())
            .collect();
        let batch = make_batch(&pair, 16, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let opts = GradCheckOptions {
            eps: 1e-5,
            max_components_per_leaf: Some(4),
        };
        let ok = gradcheck_model(&model, &batch, &cfg.loss, opts, false).unwrap();
        assert!(ok.report.passed(1e-4), "{}", ok.report.max_relative_error);
        assert_eq!(ok.groups.iter().map(|g| g.tensors).sum::<usize>(), model.store.len());
        let bad = gradcheck_model(&model, &batch, &cfg.loss, opts, true).unwrap();
        assert!(!bad.report.passed(1e-4));
        let detached = LossConfig {
            align_reaches_encoders: false,
            ..cfg.loss.clone()
        };
        let ok = gradcheck_model(&model, &batch, &detached, opts, false).unwrap();
        assert!(ok.report.passed(1e-4), "{}", ok.report.max_relative_error);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        c.loss.ablate = vec![Term::Triplet];
        assert!(c.validate().is_ok());
        c.loss.lambda_align = -1.0;
        assert!(c.validate().is_err());
    }
}
