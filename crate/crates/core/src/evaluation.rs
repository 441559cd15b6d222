//! Pixel-level metrics: sampled Pearson correlation and 10-bin confusion
//! matrices.
//!
//! Pixel values `v` in `0..=255` map to `v / 255` and then to bin
//! `floor(10 v / 255)`, with the top bin closed so that 255 lands in bin 9.
//! Pearson correlations are estimated from pixels drawn without
//! replacement from the pooled test images of a task, repeated with
//! per-repetition seeds derived from one master seed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::{load_gray, GrayImage, Manifest, Split};
use crate::error::{Error, Result};
use crate::network::Reduction;

pub const BINS: usize = 10;

/// Bin of an 8-bit value.
pub fn value_bin(v: u8) -> usize {
    (usize::from(v) * BINS / 255).min(BINS - 1)
}

/// Sample Pearson correlation, computed in two passes.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dims(
            "pearson",
            format!("{} vs {} values", x.len(), y.len()),
        ));
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument("pearson needs at least two values".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument(
            "pearson is undefined for a constant sequence".into(),
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PearsonSummary {
    pub mean: f64,
    /// Sample standard deviation over repetitions; 0 for one repetition.
    pub std: f64,
    pub repetitions: usize,
    pub sample_size: usize,
    pub population: usize,
}

/// Repeated Pearson estimates over pooled `(pred, truth)` pixel pairs.
///
/// Repetition `r` draws `sample_size` distinct pixels with a ChaCha8
/// stream seeded by `seed` on stream `r`; the drawn indices are visited in
/// ascending order, so a full-population sample reproduces [`pearson`]
/// exactly.
pub fn sampled_pearson_pooled(
    pred: &[u8],
    truth: &[u8],
    sample_size: usize,
    repetitions: usize,
    seed: u64,
) -> Result<PearsonSummary> {
    if pred.len() != truth.len() {
        return Err(Error::dims(
            "sampled_pearson",
            "prediction and truth pixel counts differ",
        ));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("empty image set".into()));
    }
    if repetitions == 0 {
        return Err(Error::InvalidArgument("repetitions must be positive".into()));
    }
    if sample_size > pred.len() {
        return Err(Error::InvalidArgument(format!(
            "sample size {sample_size} exceeds the {} available pixels",
            pred.len()
        )));
    }
    let rs = (0..repetitions)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let mut picks = index::sample(&mut rng, pred.len(), sample_size).into_vec();
            picks.sort_unstable();
            let x: Vec<f64> = picks.iter().map(|&i| f64::from(pred[i])).collect();
            let y: Vec<f64> = picks.iter().map(|&i| f64::from(truth[i])).collect();
            pearson(&x, &y)
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = rs.len() as f64;
    let mean = rs.iter().sum::<f64>() / n;
    let std = if rs.len() > 1 {
        (rs.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(PearsonSummary {
        mean,
        std,
        repetitions,
        sample_size,
        population: pred.len(),
    })
}

/// [`sampled_pearson_pooled`] over aligned image sets.
pub fn sampled_pearson(
    pred: &[GrayImage],
    truth: &[GrayImage],
    sample_size: usize,
    repetitions: usize,
    seed: u64,
) -> Result<PearsonSummary> {
    let (p, t) = pool(pred, truth)?;
    sampled_pearson_pooled(&p, &t, sample_size, repetitions, seed)
}

fn pool(pred: &[GrayImage], truth: &[GrayImage]) -> Result<(Vec<u8>, Vec<u8>)> {
    if pred.len() != truth.len() {
        return Err(Error::dims(
            "pool",
            format!("{} vs {} images", pred.len(), truth.len()),
        ));
    }
    let mut p = Vec::new();
    let mut t = Vec::new();
    for (a, b) in pred.iter().zip(truth) {
        if (a.height, a.width) != (b.height, b.width) {
            return Err(Error::dims(
                "pool",
                format!("{}x{} vs {}x{}", a.height, a.width, b.height, b.width),
            ));
        }
        p.extend_from_slice(&a.pixels);
        t.extend_from_slice(&b.pixels);
    }
    Ok((p, t))
}

/// Counts indexed `[true bin][predicted bin]`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: [[u64; BINS]; BINS],
}

impl Confusion {
    pub fn add(&mut self, pred: u8, truth: u8) {
        self.counts[value_bin(truth)][value_bin(pred)] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> [u64; BINS] {
        self.counts.map(|row| row.iter().sum())
    }

    pub fn column_sums(&self) -> [u64; BINS] {
        std::array::from_fn(|j| self.counts.iter().map(|row| row[j]).sum())
    }

    /// Diagonal over row sum; `None` for bins with no true pixels.
    pub fn per_bin_accuracy(&self) -> [Option<f64>; BINS] {
        std::array::from_fn(|i| {
            let row: u64 = self.counts[i].iter().sum();
            (row > 0).then(|| self.counts[i][i] as f64 / row as f64)
        })
    }

    /// Trace over total; `None` when empty.
    pub fn overall_accuracy(&self) -> Option<f64> {
        let total = self.total();
        let trace: u64 = (0..BINS).map(|i| self.counts[i][i]).sum();
        (total > 0).then(|| trace as f64 / total as f64)
    }

    /// Counts scaled so the whole matrix sums to 1000.
    pub fn per_thousand(&self) -> [[f64; BINS]; BINS] {
        let total = self.total().max(1) as f64;
        self.counts.map(|row| row.map(|c| c as f64 * 1000.0 / total))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("true_bin");
        for j in 0..BINS {
            let _ = write!(s, ",pred_{j}");
        }
        s.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            let _ = write!(s, "{i}");
            for c in row {
                let _ = write!(s, ",{c}");
            }
            s.push('\n');
        }
        s
    }
}

/// Confusion matrix of aligned prediction and truth pixels.
pub fn confusion(pred: &[u8], truth: &[u8]) -> Result<Confusion> {
    if pred.len() != truth.len() {
        return Err(Error::dims(
            "confusion",
            format!("{} vs {} values", pred.len(), truth.len()),
        ));
    }
    let mut m = Confusion::default();
    for (&p, &t) in pred.iter().zip(truth) {
        m.add(p, t);
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub sample_size: usize,
    pub repetitions: usize,
    pub seed: u64,
    pub render: Reduction,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            sample_size: 10_000,
            repetitions: 30,
            seed: 0,
            render: Reduction::Expectation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: usize,
    pub images: usize,
    pub pixels: usize,
    pub pearson: Option<PearsonSummary>,
    /// Why `pearson` is absent, e.g. a constant target.
    pub pearson_error: Option<String>,
    pub confusion: Confusion,
    pub per_thousand: [[f64; BINS]; BINS],
    pub per_bin_accuracy: [Option<f64>; BINS],
    pub overall_accuracy: Option<f64>,
}

impl TaskReport {
    /// Scores one task from aligned prediction and truth images.
    pub fn compute(task: usize, pred: &[GrayImage], truth: &[GrayImage], opts: &EvalOptions) -> Result<Self> {
        let (p, t) = pool(pred, truth)?;
        let (pearson, pearson_error) = match sampled_pearson_pooled(
            &p,
            &t,
            opts.sample_size.min(p.len()),
            opts.repetitions,
            opts.seed,
        ) {
            Ok(s) => (Some(s), None),
            Err(Error::InvalidArgument(msg)) => (None, Some(msg)),
            Err(e) => return Err(e),
        };
        let confusion = confusion(&p, &t)?;
        Ok(TaskReport {
            task,
            images: pred.len(),
            pixels: p.len(),
            pearson,
            pearson_error,
            per_thousand: confusion.per_thousand(),
            per_bin_accuracy: confusion.per_bin_accuracy(),
            overall_accuracy: confusion.overall_accuracy(),
            confusion,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub options: EvalOptions,
    pub tasks: Vec<TaskReport>,
}

impl EvalReport {
    /// Per-bin and overall accuracies, one row per task; absent bins
    /// print as `-`.
    pub fn table(&self) -> String {
        let mut s = format!("{:<6}", "task");
        for b in 0..BINS {
            let _ = write!(s, "{:>7}", format!("bin{b}"));
        }
        let _ = writeln!(s, "{:>9}{:>9}{:>8}", "overall", "pearson", "std");
        let cell = |v: Option<f64>, w: usize| match v {
            Some(v) => format!("{v:>w$.3}"),
            None => format!("{:>w$}", "-"),
        };
        for t in &self.tasks {
            let _ = write!(s, "{:<6}", t.task);
            for a in t.per_bin_accuracy {
                s += &cell(a, 7);
            }
            s += &cell(t.overall_accuracy, 9);
            s += &cell(t.pearson.map(|p| p.mean), 9);
            s += &cell(t.pearson.map(|p| p.std), 8);
            s.push('\n');
        }
        s
    }

    /// Writes `report.json`, `table.txt` and `confusion_task{t}.csv`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: String, text: String| {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))
        };
        put("report.json".into(), serde_json::to_string_pretty(self)? + "\n")?;
        put("table.txt".into(), self.table())?;
        for t in &self.tasks {
            put(format!("confusion_task{}.csv", t.task), t.confusion.to_csv())?;
        }
        Ok(())
    }
}

/// Where `predict` writes a rendered task image.
pub fn prediction_path(pred_dir: &Path, id: &str, task: usize, render: Reduction) -> PathBuf {
    pred_dir
        .join(id)
        .join(format!("task{task}_{}.pgm", render.name()))
}

/// Scores every labeled task of the chosen manifest samples against
/// predictions stored under `pred_dir`.
pub fn evaluate(
    manifest: &Manifest,
    pred_dir: &Path,
    split: Option<Split>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let samples: Vec<_> = manifest.split(split).collect();
    if samples.is_empty() {
        return Err(Error::Data("no samples to evaluate".into()));
    }
    let mut tasks = Vec::new();
    for task in 0..manifest.task_count {
        let mut pred = Vec::new();
        let mut truth = Vec::new();
        for s in &samples {
            let Some((_, path)) = s.tasks().find(|&(t, _)| t == task) else {
                continue;
            };
            truth.push(load_gray(manifest.resolve(path))?);
            pred.push(load_gray(prediction_path(pred_dir, &s.id, task, opts.render))?);
        }
        if !truth.is_empty() {
            tasks.push(TaskReport::compute(task, &pred, &truth, opts)?);
        }
    }
    if tasks.is_empty() {
        return Err(Error::Data("no labeled tasks among the evaluated samples".into()));
    }
    Ok(EvalReport {
        options: *opts,
        tasks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_matches_closed_form() {
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]).unwrap(), -1.0);
        // means 2 and 7/3; sxy = 3, sxx = 2, syy = 14/3
        let r = pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
        assert!((r - 3.0 / (2.0f64 * 14.0 / 3.0).sqrt()).abs() < 1e-15);
        assert!(pearson(&[1.0, 1.0], &[2.0, 3.0]).is_err());
        assert!(pearson(&[1.0], &[2.0]).is_err());
    }

    #[test]
    fn bins_follow_the_rule() {
        let got: Vec<usize> = [0u8, 25, 26, 51, 127, 229, 230, 254, 255].map(value_bin).to_vec();
        assert_eq!(got, vec![0, 0, 1, 2, 4, 8, 9, 9, 9]);
        // bin i is [i/10, (i+1)/10) on v/255, compared as exact rationals
        for v in 0..=255u8 {
            let v10 = 10 * u32::from(v);
            let expect = if v == 255 {
                9
            } else {
                (0..10).find(|&i| v10 < 255 * (i + 1)).unwrap() as usize
            };
            assert_eq!(value_bin(v), expect, "value {v}");
        }
    }

    #[test]
    fn shifted_predictions_score_zero() {
        let m = confusion(&[80; 50], &[55; 50]).unwrap();
        assert_eq!(m.overall_accuracy(), Some(0.0));
        let acc = m.per_bin_accuracy();
        assert_eq!(acc[2], Some(0.0));
        assert!(acc.iter().enumerate().all(|(i, a)| i == 2 || a.is_none()));
        assert!((m.per_thousand()[2][3] - 1000.0).abs() < 1e-12);
    }

    #[test]
    fn full_population_sample_equals_pearson() {
        let p: Vec<u8> = (0..400u32).map(|i| ((i * 37) % 251) as u8).collect();
        let t: Vec<u8> = (0..400u32).map(|i| ((i * 11 + 7) % 256) as u8).collect();
        let s = sampled_pearson_pooled(&p, &t, 400, 1, 5).unwrap();
        let x: Vec<f64> = p.iter().map(|&v| v.into()).collect();
        let y: Vec<f64> = t.iter().map(|&v| v.into()).collect();
        assert_eq!(s.mean, pearson(&x, &y).unwrap());
        assert_eq!(s.std, 0.0);
        let a = sampled_pearson_pooled(&p, &t, 50, 30, 5).unwrap();
        assert_eq!(a, sampled_pearson_pooled(&p, &t, 50, 30, 5).unwrap());
        assert!(a.std > 0.0);
        assert!(sampled_pearson_pooled(&p, &t, 401, 1, 5).is_err());
        assert!(sampled_pearson_pooled(&[], &[], 0, 1, 5).is_err());
    }

    #[test]
    fn table_marks_absent_bins() {
        let img = GrayImage::new(2, 2, vec![0, 30, 60, 255]).unwrap();
        let opts = EvalOptions {
            sample_size: 4,
            repetitions: 3,
            ..EvalOptions::default()
        };
        let t =
            TaskReport::compute(0, std::slice::from_ref(&img), std::slice::from_ref(&img), &opts).unwrap();
        assert_eq!(t.overall_accuracy, Some(1.0));
        assert_eq!(t.pearson.unwrap().mean, 1.0);
        let report = EvalReport {
            options: opts,
            tasks: vec![t],
        };
        let table = report.table();
        let row = table.lines().nth(1).unwrap();
        assert_eq!(row.split_whitespace().filter(|c| *c == "-").count(), 6);
        assert_eq!(report.tasks[0].confusion.to_csv().lines().count(), 11);
    }
}
