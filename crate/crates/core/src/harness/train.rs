//! Training loop, evaluation, metrics export and the ablation grid.

use std::fmt::Write as _;
use std::path::Path;

use super::config::{RunConfig, Toggles};
use super::data::{Dataset, Degradation};
use super::model::{Prepared, TrackerModel};
use crate::error::{Error, Result};
use crate::losses::{total_loss, BBox, LossBundle, LossComponents};
use crate::numerics::{Checkpoint, Gradients, Graph, Parameter, Parameterized, RngStream};

/// One line of the metrics file.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: LossBundle,
    /// Routed (token, slot) pairs per expert, summed over layers and samples.
    pub usage: Vec<usize>,
    /// Natural-log entropy of `usage`.
    pub entropy: f64,
    pub mean_iou: f64,
    pub success_50: f64,
    pub success_70: f64,
}

impl MetricsRecord {
    pub const HEADER: &'static str = "step\ttotal\tcls\tiou\tl1\teb\tentropy\tmean_iou\tsuccess_50\tsuccess_70\tusage";

    /// Tab-separated; floats use fixed 10-digit scientific notation and the
    /// usage histogram is comma-joined.
    pub fn to_line(&self) -> String {
        let usage: Vec<String> = self.usage.iter().map(usize::to_string).collect();
        let l = &self.loss;
        format!(
            "{}\t{:.10e}\t{:.10e}\t{:.10e}\t{:.10e}\t{:.10e}\t{:.10e}\t{:.10e}\t{:.10e}\t{:.10e}\t{}",
            self.step,
            l.total,
            l.cls,
            l.iou,
            l.l1,
            l.eb,
            self.entropy,
            self.mean_iou,
            self.success_50,
            self.success_70,
            usage.join(",")
        )
    }
}

pub fn metrics_text(records: &[MetricsRecord]) -> String {
    let mut s = String::from(MetricsRecord::HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.to_line());
        s.push('\n');
    }
    s
}

/// Shannon entropy (nats) of a count histogram; 0 for an empty histogram.
pub fn usage_entropy(usage: &[usize]) -> f64 {
    let total: usize = usage.iter().sum();
    if total == 0 {
        return 0.0;
    }
    usage
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// Mean IoU and success rates at IoU 0.5 and 0.7.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub mean_iou: f64,
    pub success_50: f64,
    pub success_70: f64,
}

pub fn score_predictions(preds: &[BBox], gts: &[BBox]) -> Result<Scores> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::contract(format!(
            "cannot score {} predictions against {} targets",
            preds.len(),
            gts.len()
        )));
    }
    let n = preds.len() as f64;
    let ious: Vec<f64> = preds.iter().zip(gts).map(|(p, g)| p.iou(g)).collect();
    let rate = |tau: f64| ious.iter().filter(|&&v| v >= tau).count() as f64 / n;
    Ok(Scores {
        mean_iou: ious.iter().sum::<f64>() / n,
        success_50: rate(0.5),
        success_70: rate(0.7),
    })
}

struct PassTotals {
    components: LossComponents,
    usage: Vec<usize>,
    grads: Option<Gradients>,
    preds: Vec<BBox>,
}

fn check_component(step: usize, name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("step {step}: loss component `{name}` is {v}")))
    }
}

/// Forward (and optionally backward) over a sample set. Losses and gradients
/// are averaged over samples, accumulated in sample order.
fn run_pass(model: &TrackerModel, samples: &[Prepared], step: usize, with_grads: bool) -> Result<PassTotals> {
    if samples.is_empty() {
        return Err(Error::contract("empty dataset"));
    }
    let n = samples.len() as f64;
    let mut c = LossComponents::default();
    let mut usage = vec![0; model.cfg.moe.n_experts];
    let mut grads: Option<Gradients> = None;
    let mut preds = Vec::with_capacity(samples.len());
    for s in samples {
        let mut g = Graph::new(&model.store);
        let fp = model.forward(&mut g, s)?;
        c.cls += check_component(step, "cls", g.value(fp.cls).item())? / n;
        c.iou += check_component(step, "iou", g.value(fp.iou).item())? / n;
        c.l1 += check_component(step, "l1", g.value(fp.l1).item())? / n;
        c.eb += check_component(step, "eb", g.value(fp.eb).item())? / n;
        check_component(step, "total", g.value(fp.loss).item())?;
        for (u, k) in usage.iter_mut().zip(&fp.usage) {
            *u += k;
        }
        preds.push(BBox::from_slice(g.value(fp.pred).data())?);
        if with_grads {
            let bw = g.backward(fp.loss)?;
            let sample_grads = g.param_grads(&bw);
            let acc = grads.get_or_insert_with(Gradients::new);
            for (id, t) in sample_grads {
                match acc.get_mut(&id) {
                    Some(slot) => *slot = slot.add(&t)?,
                    None => {
                        acc.insert(id, t);
                    }
                }
            }
        }
    }
    if let Some(acc) = grads.as_mut() {
        for (&id, t) in acc.iter_mut() {
            *t = t.scale(1.0 / n);
            if !t.is_finite() {
                let name = &model.store.get(id).name;
                return Err(Error::Numeric(format!("step {step}: non-finite gradient for `{name}`")));
            }
        }
    }
    Ok(PassTotals {
        components: c,
        usage,
        grads,
        preds,
    })
}

/// Losses, routing statistics and scores of `model` on `dataset`.
pub fn evaluate(model: &TrackerModel, dataset: &[Prepared], step: usize) -> Result<MetricsRecord> {
    let pass = run_pass(model, dataset, step, false)?;
    let gts: Vec<BBox> = dataset.iter().map(|s| s.gt).collect();
    let scores = score_predictions(&pass.preds, &gts)?;
    Ok(MetricsRecord {
        step,
        loss: total_loss(pass.components, &model.cfg.loss)?,
        entropy: usage_entropy(&pass.usage),
        usage: pass.usage,
        mean_iou: scores.mean_iou,
        success_50: scores.success_50,
        success_70: scores.success_70,
    })
}

pub fn prepare_all(model: &TrackerModel, ds: &Dataset) -> Result<Vec<Prepared>> {
    ds.samples.iter().map(|s| model.prepare(s)).collect()
}

/// Training and held-out sets for a config: training tags cycle through all
/// degradations, the held-out set through the complementary ones.
pub fn datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let root = RngStream::new(cfg.seed);
    let train = Dataset::generate(&cfg.dims, cfg.data.train_size, &Degradation::ALL, &mut root.fork(10))?;
    let test = Dataset::generate(
        &cfg.dims,
        cfg.data.test_size,
        &Degradation::COMPLEMENTARY,
        &mut root.fork(11),
    )?;
    Ok((train, test))
}

pub struct TrainOutcome {
    pub model: TrackerModel,
    /// Training-set losses and routing stats with held-out scores, one per
    /// logging step; the last record is taken after the final update.
    pub records: Vec<MetricsRecord>,
}

/// Full-batch gradient descent on the training set.
pub fn train_model(
    mut model: TrackerModel,
    train: &[Prepared],
    test: &[Prepared],
    mut on_record: impl FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    let steps = model.cfg.optim.steps;
    let every = model.cfg.optim.log_every;
    let lr = model.cfg.optim.lr;
    let mut records = Vec::new();
    for step in 0..=steps {
        let last = step == steps;
        let pass = run_pass(&model, train, step, !last)?;
        if step % every == 0 || last {
            let held = evaluate(&model, test, step)?;
            let rec = MetricsRecord {
                step,
                loss: total_loss(pass.components, &model.cfg.loss)?,
                entropy: usage_entropy(&pass.usage),
                usage: pass.usage,
                mean_iou: held.mean_iou,
                success_50: held.success_50,
                success_70: held.success_70,
            };
            on_record(&rec);
            records.push(rec);
        }
        if let Some(grads) = pass.grads {
            model.store.sgd_step(&grads, lr)?;
        }
    }
    Ok(TrainOutcome { model, records })
}

/// Builds the model and data for `cfg` and trains it.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let model = TrackerModel::new(cfg)?;
    let (train_set, test_set) = datasets(cfg)?;
    let train_p = prepare_all(&model, &train_set)?;
    let test_p = prepare_all(&model, &test_set)?;
    train_model(model, &train_p, &test_p, |_| {})
}

/// Frozen backbone values only.
pub fn backbone_checkpoint(model: &TrackerModel) -> Checkpoint {
    Checkpoint::from_store(&model.store, |p: &Parameter| !p.trainable)
}

/// Writes `config.txt`, `metrics.tsv` and the `model` checkpoint pair.
pub fn write_run(dir: &Path, model: &TrackerModel, records: &[MetricsRecord]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.txt"), model.cfg.to_text())?;
    std::fs::write(dir.join("metrics.tsv"), metrics_text(records))?;
    Checkpoint::from_store(&model.store, |_| true).write(dir, "model")
}

/// Restores parameters saved by [`write_run`] into a model built from `cfg`.
pub fn load_model(cfg: &RunConfig, dir: &Path) -> Result<TrackerModel> {
    let mut model = TrackerModel::new(cfg)?;
    let ck = Checkpoint::read(dir, "model")?;
    model.store.load_values(ck.entries)?;
    Ok(model)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: &'static str,
    pub toggles: Toggles,
    pub trainable_params: usize,
    /// Adapter parameters touched by this variant.
    pub adapter_params: usize,
    pub record: MetricsRecord,
}

pub const VARIANTS: [(&str, Toggles); 4] = [
    ("baseline", Toggles::NONE),
    (
        "+SDMoE",
        Toggles {
            sdmoe: true,
            mff: false,
            gsahf_gram: false,
            gsahf_mhg: false,
        },
    ),
    (
        "+SDMoE+MFF",
        Toggles {
            sdmoe: true,
            mff: true,
            gsahf_gram: false,
            gsahf_mhg: false,
        },
    ),
    ("full", Toggles::ALL),
];

/// Trains every variant on the same data and seed; each row carries the
/// final held-out record.
pub fn ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let (train_set, test_set) = datasets(cfg)?;
    VARIANTS
        .iter()
        .map(|&(variant, toggles)| {
            let mut c = cfg.clone();
            c.toggles = toggles;
            let model = TrackerModel::new(&c)?;
            let trainable_params = model.trainable_count();
            let adapter_params = model.adapters.iter().map(|a| a.param_count(&model.store)).sum();
            let tr = prepare_all(&model, &train_set)?;
            let te = prepare_all(&model, &test_set)?;
            let out = train_model(model, &tr, &te, |_| {})?;
            let record = evaluate(&out.model, &te, c.optim.steps)?;
            Ok(AblationRow {
                variant,
                toggles,
                trainable_params,
                adapter_params,
                record,
            })
        })
        .collect()
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant\tparams\tmean_iou\tsuccess_50\tsuccess_70\tentropy\n");
    for r in rows {
        writeln!(
            s,
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            r.variant,
            r.trainable_params,
            r.record.mean_iou,
            r.record.success_50,
            r.record.success_70,
            r.record.entropy
        )
        .unwrap();
    }
    s
}
