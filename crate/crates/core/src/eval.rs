//! Segmentation metrics and the ablation runner.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::labeling::make_channel;
use crate::numeric::{argmax_map, LabelMap, ProbMap, Tensor};
use crate::segnet::{forward, SegNetParams};
use crate::trainer::Trainer;

/// `K×K` counts, rows = ground truth, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if pred.height() != truth.height() || pred.width() != truth.width() {
            return Err(Error::shape(
                &[truth.height(), truth.width()],
                &[pred.height(), pred.width()],
            ));
        }
        let k = self.num_classes;
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            if p as usize >= k || t as usize >= k {
                return Err(Error::Domain(format!("class {} not below K={k}", p.max(t))));
            }
            self.counts[t as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::shape(&[self.num_classes], &[other.num_classes]));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

pub fn confusion(pred: &LabelMap, truth: &LabelMap, num_classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.add(pred, truth)?;
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// `None` for classes absent from both prediction and truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Domain("empty confusion matrix".into()));
    }
    let k = cm.num_classes;
    let trace: u64 = (0..k).map(|c| cm.get(c, c)).sum();
    let per_class_iou: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let tp = cm.get(c, c);
            let row: u64 = (0..k).map(|p| cm.get(c, p)).sum();
            let col: u64 = (0..k).map(|t| cm.get(t, c)).sum();
            let union = row + col - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    Ok(Metrics {
        accuracy: trace as f64 / total as f64,
        miou: present.iter().sum::<f64>() / present.len() as f64,
        per_class_iou,
    })
}

pub fn predict(params: &SegNetParams<f64>, input: &Tensor<f64>) -> Result<LabelMap> {
    let t = forward(params, input)?;
    Ok(argmax_map(&ProbMap::from_logits(&t.logits)?))
}

/// Metrics of the dataset-level confusion matrix summed over all samples.
pub fn evaluate<'a>(
    params: &SegNetParams<f64>,
    samples: impl Iterator<Item = (&'a Tensor<f64>, &'a LabelMap)>,
) -> Result<Metrics> {
    let samples: Vec<_> = samples.collect();
    let k = params.config.num_classes;
    let parts = samples
        .par_iter()
        .map(|(x, y)| confusion(&predict(params, x)?, y, k))
        .collect::<Result<Vec<_>>>()?;
    let mut cm = ConfusionMatrix::new(k);
    for p in &parts {
        cm.merge(p)?;
    }
    metrics(&cm)
}

/// One ablation configuration: a label and the overrides applied to the base
/// config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub overrides: Vec<String>,
}

fn row(label: &str, overrides: &[&str]) -> AblationRow {
    AblationRow {
        label: label.to_string(),
        overrides: overrides.iter().map(|s| s.to_string()).collect(),
    }
}

pub const PRESETS: [&str; 3] = ["table3", "table4", "table5"];

pub fn preset(name: &str) -> Result<Vec<AblationRow>> {
    let flags = |h: bool, n: bool, s: bool| {
        [
            format!("use_hybrid={h}"),
            format!("use_nll={n}"),
            format!("use_spa={s}"),
        ]
    };
    let mk = |label: &str, f: [String; 3]| AblationRow {
        label: label.to_string(),
        overrides: f.to_vec(),
    };
    match name {
        "table3" => Ok(vec![
            mk("baseline", flags(false, false, false)),
            mk("+eti", flags(true, false, false)),
            mk("+nll", flags(true, true, false)),
            mk("+spa", flags(true, false, true)),
            mk("full", flags(true, true, true)),
        ]),
        "table4" => Ok([0.0, 0.01, 0.05, 0.1, 0.5, 0.8, 1.0]
            .iter()
            .map(|p| AblationRow {
                label: format!("proportion={p}"),
                overrides: vec![format!("proportion={p}")],
            })
            .collect()),
        "table5" => Ok(vec![
            row("offline", &["online_recon_labels=false"]),
            row("online", &["online_recon_labels=true"]),
        ]),
        other => Err(Error::Config(format!(
            "unknown preset `{other}` (expected one of {})",
            PRESETS.join(", ")
        ))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub overrides: Vec<String>,
    pub seeds: Vec<u64>,
    pub accuracy: Vec<f64>,
    pub miou: Vec<f64>,
    pub mean_accuracy: f64,
    pub mean_miou: f64,
    /// Resolved config of the first seed.
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<ReportRow>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Final metrics of one training run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Metrics> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let data = Dataset::generate(&cfg.data)?;
    run_on(&cfg, &data)
}

fn run_on(cfg: &ExperimentConfig, data: &Dataset) -> Result<Metrics> {
    let recon = make_channel(&cfg.recon)?;
    let trainer = Trainer::new(&cfg.train, data, recon.as_ref())?;
    let state = trainer.run(&cfg.segnet_config())?;
    trainer.evaluate(&state.student)
}

/// Runs every (row, seed) cell; data depends only on the seed, so all rows
/// of one seed see identical samples. Cells run in parallel and are merged
/// in (row, seed) order.
pub fn run_ablation(base: &ExperimentConfig, rows: &[AblationRow], seeds: &[u64]) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut configs = Vec::with_capacity(rows.len());
    for r in rows {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &s in seeds {
            let mut c = base.clone();
            c.seed = s;
            for o in &r.overrides {
                c.apply_override(o)?;
            }
            let c = c.resolved();
            c.validate()?;
            per_seed.push(c);
        }
        configs.push(per_seed);
    }
    let datasets = seeds
        .iter()
        .map(|&s| {
            let mut c = base.clone();
            c.seed = s;
            Dataset::generate(&c.resolved().data)
        })
        .collect::<Result<Vec<_>>>()?;
    let cells: Vec<(usize, usize)> = (0..rows.len())
        .flat_map(|r| (0..seeds.len()).map(move |s| (r, s)))
        .collect();
    let results = cells
        .par_iter()
        .map(|&(r, s)| {
            let cfg = &configs[r][s];
            // Rows may not change the data section; the shared dataset must match.
            if cfg.data != datasets[s].config {
                Dataset::generate(&cfg.data).and_then(|d| run_on(cfg, &d))
            } else {
                run_on(cfg, &datasets[s])
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let report_rows = rows
        .iter()
        .enumerate()
        .map(|(r, row)| {
            let ms = &results[r * seeds.len()..(r + 1) * seeds.len()];
            let accuracy: Vec<f64> = ms.iter().map(|m| m.accuracy).collect();
            let miou: Vec<f64> = ms.iter().map(|m| m.miou).collect();
            ReportRow {
                label: row.label.clone(),
                overrides: row.overrides.clone(),
                seeds: seeds.to_vec(),
                mean_accuracy: mean(&accuracy),
                mean_miou: mean(&miou),
                accuracy,
                miou,
                config: configs[r][0].clone(),
            }
        })
        .collect();
    Ok(AblationReport { rows: report_rows })
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,overrides,seeds,mean_accuracy,mean_miou,accuracy,miou\n");
        for r in &self.rows {
            let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.label,
                r.overrides.join(";"),
                seeds.join(";"),
                r.mean_accuracy,
                r.mean_miou,
                join(&r.accuracy),
                join(&r.miou)
            );
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("report.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("report.json");
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(&json, text).map_err(|e| Error::io(&json, e))
    }

    pub fn row(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lm(h: usize, w: usize, v: Vec<u8>) -> LabelMap {
        LabelMap::from_vec(h, w, v).unwrap()
    }

    #[test]
    fn confusion_cases() {
        let x = lm(2, 2, vec![0, 1, 2, 1]);
        let cm = confusion(&x, &x, 3).unwrap();
        assert_eq!(cm.counts, vec![1, 0, 0, 0, 2, 0, 0, 0, 1]);
        let y = lm(2, 2, vec![1, 1, 0, 2]);
        let cm = confusion(&x, &y, 3).unwrap();
        assert_eq!(cm.total(), 4);
        // truth 1 / pred 0, truth 1 / pred 1, truth 0 / pred 2, truth 2 / pred 1
        assert_eq!((cm.get(1, 0), cm.get(1, 1), cm.get(0, 2), cm.get(2, 1)), (1, 1, 1, 1));
        assert!(matches!(confusion(&x, &lm(2, 2, vec![3, 0, 0, 0]), 3), Err(Error::Domain(_))));
    }

    #[test]
    fn metric_closed_forms() {
        let truth = lm(1, 4, vec![0, 0, 1, 1]);
        let pred = lm(1, 4, vec![0, 0, 0, 0]);
        let m = metrics(&confusion(&pred, &truth, 2).unwrap()).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.per_class_iou, vec![Some(0.5), Some(0.0)]);
        assert_eq!(m.miou, 0.25);

        let m = metrics(&confusion(&truth, &truth, 4).unwrap()).unwrap();
        assert_eq!((m.accuracy, m.miou), (1.0, 1.0));
        assert_eq!(m.per_class_iou, vec![Some(1.0), Some(1.0), None, None]);

        assert!(metrics(&ConfusionMatrix::new(3)).is_err());
    }

    #[test]
    fn presets_have_expected_rows() {
        assert_eq!(preset("table3").unwrap().len(), 5);
        assert_eq!(preset("table5").unwrap()[0].label, "offline");
        assert!(preset("table9").is_err());
    }

    fn maps(k: u8) -> impl Strategy<Value = (LabelMap, LabelMap)> {
        (
            proptest::collection::vec(0..k, 12),
            proptest::collection::vec(0..k, 12),
        )
            .prop_map(|(a, b)| (lm(3, 4, a), lm(3, 4, b)))
    }

    proptest! {
        #[test]
        fn permuting_classes_keeps_scores((p, t) in maps(3), perm in Just([2u8, 0, 1])) {
            let m = metrics(&confusion(&p, &t, 3).unwrap()).unwrap();
            let pp = lm(3, 4, p.data().iter().map(|&c| perm[c as usize]).collect());
            let tt = lm(3, 4, t.data().iter().map(|&c| perm[c as usize]).collect());
            let q = metrics(&confusion(&pp, &tt, 3).unwrap()).unwrap();
            prop_assert_eq!(m.accuracy, q.accuracy);
            prop_assert!((m.miou - q.miou).abs() < 1e-15);
            for (c, &to) in perm.iter().enumerate() {
                prop_assert_eq!(m.per_class_iou[c], q.per_class_iou[to as usize]);
            }
        }
    }
}
