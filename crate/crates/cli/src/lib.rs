//! Reproducible command-line runs: configuration, training, evaluation,
//! ablations, cost benchmarks and gradient checks.
//!
//! Every command reads one [`RunConfig`] and writes plain files (CSV, JSON
//! lines, checkpoints) under its output directory. All randomness flows from
//! `RunConfig::seed` and the dataset's own seed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use vit_tad_core::cost::{attn_cost_1d, attn_cost_3d, pipeline_cost};
use vit_tad_core::eval::{
    errors_csv, mean_ap, metrics_csv, EvalReport, Outcome, Segment, VideoDetection, THUMOS_THRESHOLDS,
};
use vit_tad_core::head::detections_jsonl;
use vit_tad_core::post_backbone::{spatial_pool, TemporalEncoder};
use vit_tad_core::propagation::PropagationBlock;
use vit_tad_core::rng::named_rng;
use vit_tad_core::synth::{generate_dataset, generate_samples, load_split, split_indices, Sample, SynthSpec};
use vit_tad_core::train::{loss_csv, train, StepRecord, TrainConfig};
use vit_tad_core::{DetectConfig, ModelConfig, Placement, PropKind, VitTad};
use vit_tad_tensor::{count_macs, grad_check, GradCheckOptions, Graph, ParamStore, Tensor};

pub const CHECKPOINT_FILE: &str = "checkpoint.vtad";
/// Largest relative error a gradient check may report and still pass.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Width and heads of the stand-alone component checks. At the toy width the
/// smallest sampled gradients sit within a few ulps of the objective, where a
/// central difference at eps 1e-5 cannot resolve them.
pub const COMPONENT_DIM: usize = 8;
pub const COMPONENT_HEADS: usize = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] vit_tad_core::Error),
    #[error(transparent)]
    Tensor(#[from] vit_tad_tensor::TensorError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    /// 2 for configuration problems, 3 for everything that fails at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(vit_tad_core::Error::Config(_)) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub spec: SynthSpec,
    pub n_train: usize,
    pub n_val: usize,
    /// Existing dataset directory; clips are generated in memory when absent.
    pub root: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            spec: SynthSpec::default(),
            n_train: 8,
            n_val: 8,
            root: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub detect: DetectConfig,
    /// `train` or `val`.
    pub split: String,
    /// Defaults to `{out}/checkpoint.vtad`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: THUMOS_THRESHOLDS.to_vec(),
            detect: DetectConfig::default(),
            split: "val".into(),
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    /// Arm names, see [`Arm::parse`].
    pub arms: Vec<String>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            arms: vec!["none".into(), "local-1".into(), "global1d-1".into(), "global1d-1+nopost".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    /// The toy run: default model, SGD with momentum for 2000 steps on 8 clips.
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/toy"),
            model: ModelConfig::default(),
            train: TrainConfig {
                steps: 2000,
                cosine: true,
                roll_augment: true,
                ..TrainConfig::default()
            },
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Checks every section and their mutual consistency.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        m.validate()?;
        self.train.validate()?;
        let s = &self.data.spec;
        s.validate(2 * m.tubelet[0])?;
        if (s.frames, s.height, s.width) != (m.frames, m.height, m.width) {
            return Err(CliError::Config(format!(
                "data clips are {}x{}x{} but the model expects {}x{}x{}",
                s.frames, s.height, s.width, m.frames, m.height, m.width
            )));
        }
        if s.num_classes != m.num_classes || s.fps != m.fps {
            return Err(CliError::Config(format!(
                "data has {} classes at {} fps, model has {} at {}",
                s.num_classes, s.fps, m.num_classes, m.fps
            )));
        }
        if self.data.n_train == 0 {
            return Err(CliError::Config("data.n_train must be at least 1".into()));
        }
        let t = &self.eval.thresholds;
        if t.is_empty() || t.windows(2).any(|w| w[0] >= w[1]) || t.iter().any(|&x| !(x > 0.0 && x <= 1.0)) {
            return Err(CliError::Config(format!("eval.thresholds must be ascending in (0, 1]: {t:?}")));
        }
        if !["train", "val"].contains(&self.eval.split.as_str()) {
            return Err(CliError::Config(format!("eval.split must be train or val, got {}", self.eval.split)));
        }
        if let Some(root) = &self.data.root {
            if !root.is_dir() {
                return Err(CliError::Config(format!("data.root {} does not exist", root.display())));
            }
        }
        for a in &self.ablate.arms {
            Arm::parse(a)?.apply(m)?;
        }
        Ok(())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.eval.checkpoint.clone().unwrap_or_else(|| self.out.join(CHECKPOINT_FILE))
    }

    /// Samples of one split, from `data.root` or generated in memory.
    pub fn samples(&self, split: &str) -> Result<Vec<Sample>> {
        if let Some(root) = &self.data.root {
            return Ok(load_split(root, split)?);
        }
        let range = split_indices(self.data.n_train, self.data.n_val)
            .into_iter()
            .find(|(s, _)| *s == split)
            .map(|(_, r)| r)
            .ok_or_else(|| CliError::Config(format!("unknown split {split}")))?;
        Ok(generate_samples(&self.data.spec, split, range)?)
    }
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io(dir))
}

fn write(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(io(&path))?;
    Ok(path)
}

/// Result of [`cmd_train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<StepRecord>,
    pub checkpoint: PathBuf,
}

/// Trains on the training split and writes `checkpoint.vtad`, `loss.csv`
/// and the resolved `config.json`.
pub fn cmd_train(cfg: &RunConfig, on_step: impl FnMut(&StepRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let samples = cfg.samples("train")?;
    create_out(&cfg.out)?;
    let mut store = ParamStore::new();
    let model = VitTad::new(&mut store, &cfg.model, cfg.seed)?;
    let records = train(&model, &mut store, &samples, &cfg.train, cfg.seed, on_step)?;
    let checkpoint = cfg.out.join(CHECKPOINT_FILE);
    store.save(&checkpoint)?;
    write(&cfg.out, "loss.csv", &loss_csv(&records))?;
    let resolved = serde_json::to_string_pretty(cfg).expect("config serializes");
    write(&cfg.out, "config.json", &(resolved + "\n"))?;
    Ok(TrainOutcome { records, checkpoint })
}

/// Loads a checkpoint into a freshly built model.
pub fn load_model(cfg: &ModelConfig, seed: u64, path: &Path) -> Result<(VitTad, ParamStore)> {
    if !path.is_file() {
        return Err(CliError::Config(format!("checkpoint {} does not exist", path.display())));
    }
    let mut store = ParamStore::new();
    let model = VitTad::new(&mut store, cfg, seed)?;
    store.load(path)?;
    Ok((model, store))
}

/// Scores `dets` against `gts` and writes `metrics.csv` and `errors.csv`.
pub fn write_eval_outputs(
    out: &Path,
    dets: &[VideoDetection],
    gts: &[Segment],
    thresholds: &[f64],
) -> Result<EvalReport> {
    create_out(out)?;
    let report = mean_ap(dets, gts, thresholds)?;
    write(out, "metrics.csv", &metrics_csv(&report))?;
    write(out, "errors.csv", &errors_csv(&report.errors))?;
    Ok(report)
}

/// Detections of a split with NMS applied per clip.
pub fn detect_split(model: &VitTad, store: &ParamStore, samples: &[Sample], dc: &DetectConfig) -> Result<Vec<VideoDetection>> {
    Ok(model.detect_samples(store, samples, dc)?)
}

/// Runs the checkpoint on `eval.split` and writes `detections.jsonl`,
/// `metrics.csv` and `errors.csv`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let (model, store) = load_model(&cfg.model, cfg.seed, &cfg.checkpoint_path())?;
    let samples = cfg.samples(&cfg.eval.split)?;
    let dets = detect_split(&model, &store, &samples, &cfg.eval.detect)?;
    create_out(&cfg.out)?;
    let mut jsonl = String::new();
    for s in &samples {
        let own: Vec<_> = dets.iter().filter(|d| d.video_id == s.video_id).map(|d| d.det).collect();
        jsonl.push_str(&detections_jsonl(&s.video_id, &own));
    }
    write(&cfg.out, "detections.jsonl", &jsonl)?;
    let gts: Vec<Segment> = samples.iter().flat_map(|s| s.segments.clone()).collect();
    write_eval_outputs(&cfg.out, &dets, &gts, &cfg.eval.thresholds)
}

/// Writes the dataset described by `data` under `dir`.
pub fn cmd_generate(cfg: &RunConfig, dir: &Path) -> Result<()> {
    cfg.validate()?;
    Ok(generate_dataset(&cfg.data.spec, cfg.data.n_train, cfg.data.n_val, dir)?)
}

/// One ablation arm: `<kind>[-<k>][@<placement>][+post|+nopost]`, e.g.
/// `none`, `local-2`, `global1d-4@first`, `global1d-1+nopost`.
#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub name: String,
    pub kind: PropKind,
    pub k: Option<usize>,
    pub placement: Option<Placement>,
    pub post: Option<bool>,
}

impl Arm {
    pub fn parse(name: &str) -> Result<Self> {
        let bad = |why: &str| CliError::Config(format!("ablation arm {name:?}: {why}"));
        let (rest, post) = match name.split_once('+') {
            Some((r, "post")) => (r, Some(true)),
            Some((r, "nopost")) => (r, Some(false)),
            Some(_) => return Err(bad("suffix must be +post or +nopost")),
            None => (name, None),
        };
        let (rest, placement) = match rest.split_once('@') {
            Some((r, p)) => {
                let p = serde_json::from_value(serde_json::Value::String(p.into()))
                    .map_err(|_| bad("placement must be evenly, first or last"))?;
                (r, Some(p))
            }
            None => (rest, None),
        };
        let (kind, k) = match rest.split_once('-') {
            Some((kind, k)) => (kind, Some(k.parse::<usize>().map_err(|_| bad("k must be a number"))?)),
            None => (rest, None),
        };
        let kind: PropKind = serde_json::from_value(serde_json::Value::String(kind.into()))
            .map_err(|_| bad("kind must be none, local, global1d or global3d"))?;
        if kind == PropKind::None && (k.is_some() || placement.is_some()) {
            return Err(bad("none takes no block count or placement"));
        }
        Ok(Self {
            name: name.into(),
            kind,
            k,
            placement,
            post,
        })
    }

    /// The model of this arm; unspecified parts keep the base values.
    pub fn apply(&self, base: &ModelConfig) -> Result<ModelConfig> {
        let mut m = base.clone();
        m.prop_kind = self.kind;
        if let Some(k) = self.k {
            m.k_prop = k;
        }
        if let Some(p) = self.placement {
            m.placement = p;
        }
        if self.post == Some(false) {
            m.post_layers = 0;
        } else if self.post == Some(true) && m.post_layers == 0 {
            return Err(CliError::Config(format!("arm {} asks for post layers but L_post is 0", self.name)));
        }
        m.validate()?;
        Ok(m)
    }
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub arm: Arm,
    pub model: ModelConfig,
    pub params: usize,
    pub mult_adds: u64,
    pub final_loss: f64,
    pub train_avg_map: f64,
    pub val_avg_map: Option<f64>,
}

pub fn ablation_csv(rows: &[ArmResult]) -> String {
    let mut out = String::from(
        "arm,prop_kind,k_prop,placement,post_layers,params,mult_adds,final_loss,train_avg_map,val_avg_map\n",
    );
    for r in rows {
        let m = &r.model;
        let enum_name = |v: serde_json::Value| v.as_str().unwrap_or_default().to_string();
        let k = if m.prop_kind == PropKind::None { 0 } else { m.k_prop };
        writeln!(
            out,
            "{},{},{},{},{},{},{},{:.6},{:.6},{}",
            r.arm.name,
            enum_name(serde_json::to_value(m.prop_kind).expect("enum serializes")),
            k,
            enum_name(serde_json::to_value(m.placement).expect("enum serializes")),
            m.post_layers,
            r.params,
            r.mult_adds,
            r.final_loss,
            r.train_avg_map,
            r.val_avg_map.map_or(String::new(), |v| format!("{v:.6}")),
        )
        .expect("write to string");
    }
    out
}

/// Trains and evaluates every arm under the same seed, data and budget and
/// writes `ablation.csv`.
pub fn cmd_ablate(cfg: &RunConfig, mut on_arm: impl FnMut(&ArmResult)) -> Result<Vec<ArmResult>> {
    cfg.validate()?;
    if cfg.ablate.arms.is_empty() {
        return Err(CliError::Config("ablate.arms is empty".into()));
    }
    let train_samples = cfg.samples("train")?;
    let val_samples = cfg.samples("val")?;
    let mut rows = Vec::new();
    for name in &cfg.ablate.arms {
        let arm = Arm::parse(name)?;
        let model_cfg = arm.apply(&cfg.model)?;
        let mut store = ParamStore::new();
        let model = VitTad::new(&mut store, &model_cfg, cfg.seed)?;
        let params = store.numel();
        let records = train(&model, &mut store, &train_samples, &cfg.train, cfg.seed, |_| {})?;
        let score = |samples: &[Sample]| -> Result<Option<f64>> {
            let gts: Vec<Segment> = samples.iter().flat_map(|s| s.segments.clone()).collect();
            if gts.is_empty() {
                return Ok(None);
            }
            let dets = detect_split(&model, &store, samples, &cfg.eval.detect)?;
            Ok(Some(mean_ap(&dets, &gts, &cfg.eval.thresholds)?.average))
        };
        let row = ArmResult {
            final_loss: records.last().map_or(f64::NAN, |r| r.loss),
            train_avg_map: score(&train_samples)?.unwrap_or(f64::NAN),
            val_avg_map: score(&val_samples)?,
            mult_adds: pipeline_cost(&model_cfg).total().mult_adds(),
            params,
            model: model_cfg,
            arm,
        };
        on_arm(&row);
        rows.push(row);
    }
    create_out(&cfg.out)?;
    write(&cfg.out, "ablation.csv", &ablation_csv(&rows))?;
    Ok(rows)
}

/// Files written by [`cmd_bench`].
#[derive(Debug, Clone, PartialEq)]
pub struct BenchOutcome {
    pub analytic_mult_adds: u64,
    pub instrumented_mult_adds: u64,
    pub analytic_params: u64,
    pub store_params: u64,
    /// 3D over 1D attention-matrix elements and score mult-adds.
    pub elems_ratio: f64,
    pub score_ratio: f64,
}

/// Writes `cost.csv` (analytic per-stage counts), `instrumented.csv`
/// (analytic vs counted forward), `attention.csv` (1D vs 3D propagation)
/// and `variants.csv` (every propagation kind at the configured `k_prop`).
pub fn cmd_bench(cfg: &RunConfig) -> Result<BenchOutcome> {
    cfg.validate()?;
    create_out(&cfg.out)?;
    let m = &cfg.model;
    let cost = pipeline_cost(m);
    write(&cfg.out, "cost.csv", &cost.to_csv())?;

    let mut store = ParamStore::new();
    let model = VitTad::new(&mut store, m, cfg.seed)?;
    let clip = cfg.samples("train")?.remove(0).clip;
    let g = Graph::new();
    let p = store.bind_frozen(&g);
    let (fwd, counted) = count_macs(|| model.forward(&g, &clip, &p));
    fwd?;
    let analytic = cost.total();
    let rel = (analytic.mult_adds() as f64 - counted.total() as f64).abs() / counted.total().max(1) as f64;
    let mut text = String::from("quantity,analytic,instrumented,rel_diff\n");
    writeln!(text, "mult_adds,{},{},{rel:.3e}", analytic.mult_adds(), counted.total()).expect("write to string");
    writeln!(text, "attn_mult_adds,{},{},", analytic.attn_mult_adds, counted.attention()).expect("write to string");
    writeln!(text, "params,{},{},", analytic.params, store.numel()).expect("write to string");
    write(&cfg.out, "instrumented.csv", &text)?;

    let gm = m.geometry();
    let (h, w, t) = (gm.tokens_h as u64, gm.tokens_w as u64, gm.tokens_t as u64);
    let (c, heads) = (m.embed_dim as u64, m.heads as u64);
    let (one, three) = (attn_cost_1d(h, w, t, c, heads), attn_cost_3d(h, w, t, c, heads));
    let elems_ratio = three.attn_matrix_elems as f64 / one.attn_matrix_elems as f64;
    let score_ratio = three.attn_mult_adds as f64 / one.attn_mult_adds as f64;
    let mut text = String::from("strategy,H,W,T,C,heads,attn_mult_adds,proj_mult_adds,attn_matrix_elems,params\n");
    for (name, e) in [("1d", one), ("3d", three)] {
        writeln!(
            text,
            "{name},{h},{w},{t},{c},{heads},{},{},{},{}",
            e.attn_mult_adds, e.proj_mult_adds, e.attn_matrix_elems, e.params
        )
        .expect("write to string");
    }
    writeln!(text, "ratio_3d_over_1d,{h},{w},{t},{c},{heads},{score_ratio},,{elems_ratio},").expect("write to string");
    write(&cfg.out, "attention.csv", &text)?;

    let mut text = String::from("prop_kind,k_prop,params,mult_adds,attn_matrix_elems\n");
    for kind in [PropKind::None, PropKind::Local, PropKind::Global1d, PropKind::Global3d] {
        let v = ModelConfig {
            prop_kind: kind,
            ..m.clone()
        };
        if v.validate().is_err() {
            continue;
        }
        let total = pipeline_cost(&v).total();
        let name = serde_json::to_value(kind).expect("enum serializes");
        writeln!(
            text,
            "{},{},{},{},{}",
            name.as_str().unwrap_or_default(),
            v.active_prop_blocks(),
            total.params,
            total.mult_adds(),
            total.attn_matrix_elems
        )
        .expect("write to string");
    }
    write(&cfg.out, "variants.csv", &text)?;

    Ok(BenchOutcome {
        analytic_mult_adds: analytic.mult_adds(),
        instrumented_mult_adds: counted.total(),
        analytic_params: analytic.params,
        store_params: store.numel() as u64,
        elems_ratio,
        score_ratio,
    })
}

/// One row of `gradcheck.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckRow {
    pub component: String,
    pub entries: usize,
    pub max_rel_error: f64,
    /// Parameter holding the worst entry, with its analytic and numeric gradients.
    pub worst: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradCheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

fn randomize(store: &mut ParamStore, rng: &mut impl Rng, scale: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.tensor_mut(id).data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

fn random_input(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).expect("valid shape")
}

/// Central-difference checks (float64, eps 1e-5). Every propagation block
/// and the post-backbone stack (with `L_post` layers) are checked entry by
/// entry at a small width with random weights, so that no branch is
/// trivially zero; the full model loss is checked at the configured size on
/// a sample of entries. Writes `gradcheck.csv`; a failing component is a
/// runtime error.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<Vec<GradCheckRow>> {
    cfg.validate()?;
    let m = &cfg.model;
    let (c, heads) = (COMPONENT_DIM, COMPONENT_HEADS);
    let mut rng = named_rng(cfg.seed, "gradcheck");
    let opts = |k| GradCheckOptions {
        max_entries_per_param: k,
        ..GradCheckOptions::default()
    };
    let mut rows = Vec::new();
    let mut push = |component: &str, report: vit_tad_tensor::GradCheckReport| {
        rows.push(GradCheckRow {
            component: component.into(),
            entries: report.entries_checked,
            max_rel_error: report.max_rel_error,
            worst_analytic: report.worst.as_ref().map_or(0.0, |w| w.analytic),
            worst_numeric: report.worst.as_ref().map_or(0.0, |w| w.numeric),
            worst: report.worst.map(|w| w.param).unwrap_or_default(),
        })
    };

    // uniform with variance 1/C keeps activations O(1)
    let unit_gain = (3.0 / c as f64).sqrt();
    let x = random_input(&[4, 2, 2, c], &mut rng);
    let weights = random_input(&[4, 2, 2, c], &mut rng);
    for (name, kind) in [("local", PropKind::Local), ("global1d", PropKind::Global1d), ("global3d", PropKind::Global3d)] {
        let mut store = ParamStore::new();
        let Some(block) = PropagationBlock::new(kind, &mut store, &mut rng, name, c, heads)? else {
            continue;
        };
        randomize(&mut store, &mut rng, unit_gain);
        let report = grad_check(
            &store,
            |g, p| {
                let y = block.forward(g.constant(x.clone()), p)?;
                y.mul(g.constant(weights.clone()))?.sum()
            },
            &opts(None),
        )?;
        push(name, report);
    }

    let mut store = ParamStore::new();
    let layers = m.post_layers.max(1);
    let post = TemporalEncoder::new(&mut store, &mut rng, "post", layers, c, heads)?;
    randomize(&mut store, &mut rng, unit_gain);
    let w_seq = random_input(&[4, c], &mut rng);
    let report = grad_check(
        &store,
        |g, p| {
            let seq = spatial_pool(g.constant(x.clone()))?;
            post.forward(seq, p)?.mul(g.constant(w_seq.clone()))?.sum()
        },
        &opts(None),
    )?;
    push("post_backbone", report);

    let mut store = ParamStore::new();
    let model = VitTad::new(&mut store, m, cfg.seed)?;
    // wake the zero-initialized propagation branches
    let mut prop_rng = named_rng(cfg.seed, "gradcheck.prop");
    for id in store.ids().collect::<Vec<_>>() {
        if store.get(id).name.starts_with("backbone.prop") {
            for v in store.tensor_mut(id).data_mut() {
                *v = prop_rng.random_range(-0.05..0.05);
            }
        }
    }
    let sample = cfg.samples("train")?.remove(0);
    let report = grad_check(
        &store,
        |g, p| Ok(model.loss(g, &sample, p).map_err(to_tensor)?.total),
        &opts(Some(2)),
    )?;
    push("full_model_loss", report);

    create_out(&cfg.out)?;
    let mut text = String::from("component,entries,max_rel_error,worst_param,worst_analytic,worst_numeric,pass\n");
    for r in &rows {
        writeln!(
            text,
            "{},{},{:.3e},{},{:.6e},{:.6e},{}",
            r.component,
            r.entries,
            r.max_rel_error,
            r.worst,
            r.worst_analytic,
            r.worst_numeric,
            r.passed()
        ).expect("write to string");
    }
    write(&cfg.out, "gradcheck.csv", &text)?;
    if let Some(bad) = rows.iter().find(|r| !r.passed()) {
        return Err(CliError::Runtime(format!(
            "gradient check failed for {}: max relative error {:.3e}",
            bad.component, bad.max_rel_error
        )));
    }
    Ok(rows)
}

fn to_tensor(e: vit_tad_core::Error) -> vit_tad_tensor::TensorError {
    match e {
        vit_tad_core::Error::Tensor(t) => t,
        other => vit_tad_tensor::TensorError::GradCheck(other.to_string()),
    }
}

/// Five error rates plus the true-positive rate, in report order.
pub fn error_rates(report: &EvalReport) -> Vec<(&'static str, f64)> {
    std::iter::once(Outcome::TruePositive)
        .chain(Outcome::ERRORS)
        .map(|o| (o.name(), report.errors.rate(o)))
        .collect()
}
