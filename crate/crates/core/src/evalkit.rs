//! Token accuracy, per-pair grids, category summaries and their CSV/SVG
//! renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{decode, TokenSeq, Vocab, VOCAB_SIZE};
use crate::composers::parse_fixed;
use crate::coperset::{Dataset, Split};
use crate::par;
use crate::seqmodel::{Checkpoint, Transformer};
use crate::trainer::{encode_records, teacher_forced, EncodedSample, LossRegion, RunLog, TokenStats};
use crate::{Error, Result};

/// Fraction of target positions where `pred` agrees; missing predictions
/// count as wrong.
pub fn token_accuracy(pred: &TokenSeq, target: &TokenSeq) -> Result<f64> {
    if target.is_empty() {
        return Err(Error::InvalidTarget("the target sequence is empty".into()));
    }
    let hits = pred.ids().iter().zip(target.ids()).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / target.len() as f64)
}

/// Anything that can answer a prompt.
pub trait Predictor: Sync {
    fn name(&self) -> String;

    /// Answer tokens for `sample`, usually `sample.answer().len()` of them.
    fn predict(&self, sample: &EncodedSample) -> Result<Vec<u32>>;

    /// Teacher-forced statistics over the answer region, if the predictor has
    /// a notion of likelihood.
    fn losses(&self, _samples: &[EncodedSample]) -> Result<Option<TokenStats>> {
        Ok(None)
    }
}

impl Predictor for Transformer<f32> {
    fn name(&self) -> String {
        format!("transformer-{}", self.config.pe_kind)
    }

    fn predict(&self, sample: &EncodedSample) -> Result<Vec<u32>> {
        Ok(self
            .generate_greedy(&TokenSeq(sample.prompt().to_vec()), sample.answer().len())?
            .0)
    }

    fn losses(&self, samples: &[EncodedSample]) -> Result<Option<TokenStats>> {
        teacher_forced(self, samples, LossRegion::AnswerOnly).map(Some)
    }
}

/// Harness self-test: returns the ground truth.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoOracle;

impl Predictor for EchoOracle {
    fn name(&self) -> String {
        "echo-oracle".into()
    }

    fn predict(&self, sample: &EncodedSample) -> Result<Vec<u32>> {
        Ok(sample.answer().to_vec())
    }
}

/// Uniform guesses over the ten digit tokens, seeded per sample.
#[derive(Debug, Clone, Copy)]
pub struct UniformRandom {
    pub seed: u64,
}

impl Predictor for UniformRandom {
    fn name(&self) -> String {
        "uniform-random".into()
    }

    fn predict(&self, sample: &EncodedSample) -> Result<Vec<u32>> {
        // FNV-1a over the tokens keeps guesses independent of evaluation order.
        let h = sample
            .tokens
            .iter()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, &t| (h ^ t as u64).wrapping_mul(0x100_0000_01b3));
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ h);
        Ok((0..sample.answer().len()).map(|_| rng.random_range(0..10)).collect())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellCounts {
    pub correct: u64,
    pub total: u64,
}

impl CellCounts {
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCell {
    pub p1: u32,
    pub p2: u32,
    pub correct: u64,
    pub total: u64,
}

/// Correct and total answer tokens per `(p1, p2)`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "Vec<GridCell>", from = "Vec<GridCell>")]
pub struct PairAccuracyGrid {
    cells: BTreeMap<(u32, u32), CellCounts>,
}

impl PairAccuracyGrid {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, p1: u32, p2: u32, correct: u64, total: u64) {
        let c = self.cells.entry((p1, p2)).or_default();
        c.correct += correct.min(total);
        c.total += total;
    }

    pub fn merge(&mut self, other: &PairAccuracyGrid) {
        for (&(p1, p2), c) in &other.cells {
            self.add(p1, p2, c.correct, c.total);
        }
    }

    pub fn get(&self, p1: u32, p2: u32) -> Option<CellCounts> {
        self.cells.get(&(p1, p2)).copied()
    }

    pub fn accuracy(&self, p1: u32, p2: u32) -> Option<f64> {
        self.get(p1, p2).and_then(|c| c.accuracy())
    }

    pub fn cells(&self) -> impl Iterator<Item = ((u32, u32), CellCounts)> + '_ {
        self.cells.iter().map(|(k, v)| (*k, *v))
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Token-weighted accuracy over all cells.
    pub fn pooled(&self) -> CellCounts {
        self.cells.values().fold(CellCounts::default(), |a, c| CellCounts {
            correct: a.correct + c.correct,
            total: a.total + c.total,
        })
    }

    /// Inclusive `(p1 range, p2 range)` covering every cell.
    pub fn bounds(&self) -> Option<((u32, u32), (u32, u32))> {
        let p1s = self.cells.keys().map(|k| k.0);
        let p2s = self.cells.keys().map(|k| k.1);
        Some((
            (p1s.clone().min()?, p1s.max()?),
            (p2s.clone().min()?, p2s.max()?),
        ))
    }
}

impl From<PairAccuracyGrid> for Vec<GridCell> {
    fn from(g: PairAccuracyGrid) -> Self {
        g.cells
            .into_iter()
            .map(|((p1, p2), c)| GridCell {
                p1,
                p2,
                correct: c.correct,
                total: c.total,
            })
            .collect()
    }
}

impl From<Vec<GridCell>> for PairAccuracyGrid {
    fn from(cells: Vec<GridCell>) -> Self {
        let mut g = PairAccuracyGrid::new();
        for c in cells {
            g.add(c.p1, c.p2, c.correct, c.total);
        }
        g
    }
}

/// Losses and accuracies in the shape of a results table row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub id_loss: Option<f64>,
    pub ood_loss: Option<f64>,
    pub id_accuracy: Option<f64>,
    pub hollow_accuracy: Option<f64>,
    pub extrapolation_accuracy: Option<f64>,
    /// Mean of the accuracies that exist.
    pub average: f64,
}

impl CategoryReport {
    pub fn accuracy(&self, split: Split) -> Option<f64> {
        match split {
            Split::TestId => self.id_accuracy,
            Split::TestHollow => self.hollow_accuracy,
            Split::TestExtrapolation => self.extrapolation_accuracy,
            Split::Train => None,
        }
    }
}

/// Per-sample evaluation result, in dataset order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub p1: u32,
    pub p2: u32,
    pub correct: u64,
    pub total: u64,
    pub prediction: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    /// All test splits together.
    pub grid: PairAccuracyGrid,
    pub split_grids: BTreeMap<Split, PairAccuracyGrid>,
    /// Teacher-forced statistics, when the predictor provides them.
    pub split_losses: BTreeMap<Split, TokenStats>,
    pub outcomes: BTreeMap<Split, Vec<SampleOutcome>>,
    pub category: CategoryReport,
}

impl EvalReport {
    /// Decoded token accuracy of one split.
    pub fn accuracy(&self, split: Split) -> Option<f64> {
        self.split_grids.get(&split).and_then(|g| g.pooled().accuracy())
    }

    /// Mean absolute error of fixed-width decimal answers; an unreadable
    /// prediction scores `unreadable`.
    pub fn mean_abs_error(&self, split: Split, unreadable: f64) -> Option<f64> {
        let outs = self.outcomes.get(&split).filter(|o| !o.is_empty())?;
        let sum: f64 = outs
            .iter()
            .map(|o| match (parse_fixed(&o.prediction), parse_fixed(&o.target)) {
                (Ok(p), Ok(t)) => (p - t).abs(),
                _ => unreadable,
            })
            .sum();
        Some(sum / outs.len() as f64)
    }
}

/// Greedy-decodes every sample of every split and accumulates the grids.
pub fn evaluate_samples<P: Predictor + ?Sized>(
    predictor: &P,
    splits: &BTreeMap<Split, Vec<EncodedSample>>,
) -> Result<EvalReport> {
    let mut grid = PairAccuracyGrid::new();
    let mut split_grids = BTreeMap::new();
    let mut split_losses = BTreeMap::new();
    let mut outcomes = BTreeMap::new();
    for (&split, samples) in splits {
        let preds = par::map_slice(samples, |s| predictor.predict(s));
        let mut g = PairAccuracyGrid::new();
        let mut outs = Vec::with_capacity(samples.len());
        for (s, pred) in samples.iter().zip(preds) {
            let pred = pred?;
            let target = s.answer();
            let correct = pred.iter().zip(target).filter(|(a, b)| a == b).count() as u64;
            g.add(s.p1, s.p2, correct, target.len() as u64);
            outs.push(SampleOutcome {
                p1: s.p1,
                p2: s.p2,
                correct,
                total: target.len() as u64,
                prediction: decode(&pred),
                target: decode(target),
            });
        }
        if let Some(stats) = predictor.losses(samples)? {
            split_losses.insert(split, stats);
        }
        grid.merge(&g);
        split_grids.insert(split, g);
        outcomes.insert(split, outs);
    }
    let acc = |s: Split| split_grids.get(&s).and_then(|g: &PairAccuracyGrid| g.pooled().accuracy());
    let (id_accuracy, hollow_accuracy, extrapolation_accuracy) =
        (acc(Split::TestId), acc(Split::TestHollow), acc(Split::TestExtrapolation));
    let present: Vec<f64> = [id_accuracy, hollow_accuracy, extrapolation_accuracy]
        .into_iter()
        .flatten()
        .collect();
    let mut ood = TokenStats::default();
    for s in [Split::TestHollow, Split::TestExtrapolation] {
        if let Some(st) = split_losses.get(&s) {
            ood.merge(*st);
        }
    }
    let category = CategoryReport {
        id_loss: split_losses.get(&Split::TestId).map(|s| s.mean_loss()),
        ood_loss: (ood.tokens > 0).then(|| ood.mean_loss()),
        id_accuracy,
        hollow_accuracy,
        extrapolation_accuracy,
        average: if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        },
    };
    Ok(EvalReport {
        model: predictor.name(),
        grid,
        split_grids,
        split_losses,
        outcomes,
        category,
    })
}

/// Evaluates a checkpoint on the test splits of a dataset.
pub fn evaluate(checkpoint: &Checkpoint, dataset: &Dataset, limit: Option<usize>) -> Result<EvalReport> {
    let model = &checkpoint.model;
    if dataset.manifest.vocab != Vocab.table() || model.config.vocab_size != VOCAB_SIZE {
        return Err(Error::Config(format!(
            "dataset vocabulary ({} symbols) does not match the model ({})",
            dataset.manifest.vocab.len(),
            model.config.vocab_size
        )));
    }
    let mut splits = BTreeMap::new();
    for split in Split::TEST {
        let recs = dataset.split(split);
        if recs.is_empty() {
            continue;
        }
        let n = limit.map_or(recs.len(), |l| l.min(recs.len()));
        let samples = encode_records(&recs[..n])?;
        if let Some(s) = samples.iter().find(|s| s.tokens.len() > model.config.max_seq_len) {
            return Err(Error::Config(format!(
                "a {split} sample needs {} positions but the model holds {}",
                s.tokens.len(),
                model.config.max_seq_len
            )));
        }
        splits.insert(split, samples);
    }
    evaluate_samples(model, &splits)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const STOPS: [(f64, f64, f64); 5] = [
    (68.0, 1.0, 84.0),
    (59.0, 82.0, 139.0),
    (33.0, 145.0, 140.0),
    (94.0, 201.0, 98.0),
    (253.0, 231.0, 37.0),
];

/// Dark for 0, light for 1.
pub fn color(accuracy: f64) -> String {
    let x = accuracy.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    let mix = |u: f64, v: f64| (u + (v - u) * f).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

/// `p1,p2,correct,total,accuracy` over the full bounding rectangle, row-major
/// by `(p1, p2)`; never-sampled pairs have empty fields.
pub fn heatmap_csv(grid: &PairAccuracyGrid) -> String {
    let mut out = String::from("p1,p2,correct,total,accuracy\n");
    if let Some(((a1, b1), (a2, b2))) = grid.bounds() {
        for p1 in a1..=b1 {
            for p2 in a2..=b2 {
                match grid.get(p1, p2) {
                    Some(c) => {
                        let _ = writeln!(out, "{p1},{p2},{},{},{}", c.correct, c.total, fmt_opt(c.accuracy()));
                    }
                    None => {
                        let _ = writeln!(out, "{p1},{p2},,,");
                    }
                }
            }
        }
    }
    out
}

fn legend(out: &mut String, x: f64, y: f64, h: f64) {
    let steps = 20;
    for k in 0..steps {
        let v = 1.0 - (k as f64 + 0.5) / steps as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{x:.1}" y="{:.1}" width="14" height="{:.1}" fill="{}"/>"#,
            y + h * k as f64 / steps as f64,
            h / steps as f64 + 0.5,
            color(v)
        );
    }
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="10">1.0</text>"#, x + 18.0, y + 8.0);
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="10">0.0</text>"#, x + 18.0, y + h);
}

/// Accuracy heatmap with `p1` on rows and `p2` on columns.
pub fn heatmap_svg(grid: &PairAccuracyGrid, title: &str) -> String {
    const CELL: f64 = 28.0;
    const LEFT: f64 = 50.0;
    const TOP: f64 = 40.0;
    let ((a1, b1), (a2, b2)) = grid.bounds().unwrap_or(((0, 0), (0, 0)));
    let (rows, cols) = ((b1 - a1 + 1) as f64, (b2 - a2 + 1) as f64);
    let width = LEFT + cols * CELL + 70.0;
    let height = TOP + rows * CELL + 40.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{LEFT:.1}" y="20" font-size="13">{}</text>"#, esc(title));
    if !grid.is_empty() {
        for p1 in a1..=b1 {
            let y = TOP + (p1 - a1) as f64 * CELL;
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{p1}</text>"#,
                LEFT - 4.0,
                y + CELL / 2.0 + 3.0
            );
            for p2 in a2..=b2 {
                let x = LEFT + (p2 - a2) as f64 * CELL;
                if let Some(acc) = grid.accuracy(p1, p2) {
                    let _ = writeln!(
                        out,
                        r#"<rect x="{x:.1}" y="{y:.1}" width="{CELL:.1}" height="{CELL:.1}" fill="{}"><title>({p1},{p2}) {acc:.3}</title></rect>"#,
                        color(acc)
                    );
                    let ink = if acc > 0.6 { "black" } else { "white" };
                    let _ = writeln!(
                        out,
                        r#"<text x="{:.1}" y="{:.1}" font-size="8" text-anchor="middle" fill="{ink}">{:.0}</text>"#,
                        x + CELL / 2.0,
                        y + CELL / 2.0 + 3.0,
                        acc * 100.0
                    );
                } else {
                    let _ = writeln!(
                        out,
                        r##"<rect x="{x:.1}" y="{y:.1}" width="{CELL:.1}" height="{CELL:.1}" fill="none" stroke="#dddddd"/>"##
                    );
                }
            }
        }
        for p2 in a2..=b2 {
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{p2}</text>"#,
                LEFT + (p2 - a2) as f64 * CELL + CELL / 2.0,
                TOP + rows * CELL + 14.0
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">P2</text>"#,
            LEFT + cols * CELL / 2.0,
            TOP + rows * CELL + 30.0
        );
        let _ = writeln!(out, r#"<text x="12" y="{:.1}" font-size="11">P1</text>"#, TOP + rows * CELL / 2.0);
    }
    legend(&mut out, LEFT + cols * CELL + 16.0, TOP, (rows * CELL).max(60.0));
    out.push_str("</svg>\n");
    out
}

/// Rows `model,split,loss,accuracy`.
pub fn category_csv(reports: &[(String, CategoryReport)]) -> String {
    let mut out = String::from("model,split,loss,accuracy\n");
    for (model, r) in reports {
        let rows = [
            ("ID", r.id_loss, r.id_accuracy),
            ("HOLLOW", None, r.hollow_accuracy),
            ("EXTRAPOLATION", None, r.extrapolation_accuracy),
            ("OOD", r.ood_loss, None),
            ("AVERAGE", None, Some(r.average)),
        ];
        for (split, loss, acc) in rows {
            let _ = writeln!(out, "{},{split},{},{}", model.replace(',', ";"), fmt_opt(loss), fmt_opt(acc));
        }
    }
    out
}

const SERIES: [&str; 5] = ["#1f4e79", "#c0504d", "#4f8f3a", "#8064a2", "#d98c1f"];

/// Grouped bars of ID, Hollow, Extrapolation and average accuracy per model.
pub fn category_svg(reports: &[(String, CategoryReport)], title: &str) -> String {
    const LEFT: f64 = 50.0;
    const TOP: f64 = 40.0;
    const H: f64 = 200.0;
    const BAR: f64 = 18.0;
    let cats = ["ID", "Hollow", "Extrapolation", "Avg"];
    let group = BAR * cats.len() as f64 + 24.0;
    let width = LEFT + group * reports.len().max(1) as f64 + 130.0;
    let height = TOP + H + 50.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{LEFT:.1}" y="20" font-size="13">{}</text>"#, esc(title));
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        let y = TOP + H - v * H;
        let _ = writeln!(
            out,
            r##"<line x1="{LEFT:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#e0e0e0"/>"##,
            width - 130.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{v:.2}</text>"#,
            LEFT - 4.0,
            y + 3.0
        );
    }
    for (g, (model, r)) in reports.iter().enumerate() {
        let x0 = LEFT + 12.0 + g as f64 * group;
        let vals = [r.id_accuracy, r.hollow_accuracy, r.extrapolation_accuracy, Some(r.average)];
        for (c, v) in vals.iter().enumerate() {
            if let Some(v) = v {
                let h = v.clamp(0.0, 1.0) * H;
                let _ = writeln!(
                    out,
                    r#"<rect x="{:.1}" y="{:.1}" width="{BAR:.1}" height="{h:.1}" fill="{}"><title>{} {} {v:.3}</title></rect>"#,
                    x0 + c as f64 * BAR,
                    TOP + H - h,
                    SERIES[c],
                    esc(model),
                    cats[c]
                );
            }
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{}</text>"#,
            x0 + BAR * cats.len() as f64 / 2.0,
            TOP + H + 14.0,
            esc(model)
        );
    }
    for (c, name) in cats.iter().enumerate() {
        let y = TOP + c as f64 * 16.0;
        let x = width - 120.0;
        let _ = writeln!(out, r#"<rect x="{x:.1}" y="{y:.1}" width="10" height="10" fill="{}"/>"#, SERIES[c]);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="10">{name}</text>"#, x + 14.0, y + 9.0);
    }
    out.push_str("</svg>\n");
    out
}

fn curve_series(log: &RunLog) -> BTreeMap<String, Vec<(usize, f64)>> {
    let mut series: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    for r in &log.records {
        series.entry("TRAIN".into()).or_default().push((r.epoch, r.train_loss));
        for (s, l) in &r.split_loss {
            series.entry(s.to_string()).or_default().push((r.epoch, *l));
        }
        series.entry("OOD".into()).or_default().push((r.epoch, r.ood_loss));
    }
    series
}

/// Rows `epoch,split,loss`.
pub fn curves_csv(log: &RunLog) -> String {
    let mut out = String::from("epoch,split,loss\n");
    for r in &log.records {
        let _ = writeln!(out, "{},TRAIN,{:.6}", r.epoch, r.train_loss);
        for (s, l) in &r.split_loss {
            let _ = writeln!(out, "{},{s},{l:.6}", r.epoch);
        }
        let _ = writeln!(out, "{},OOD,{:.6}", r.epoch, r.ood_loss);
    }
    out
}

/// Loss against epoch, one polyline per split.
pub fn curves_svg(log: &RunLog, title: &str) -> String {
    const LEFT: f64 = 56.0;
    const TOP: f64 = 40.0;
    const W: f64 = 420.0;
    const H: f64 = 240.0;
    let series = curve_series(log);
    let points = series.values().flatten();
    let max_epoch = points.clone().map(|p| p.0).max().unwrap_or(1).max(1) as f64;
    let max_loss = points.map(|p| p.1).filter(|v| v.is_finite()).fold(0.0f64, f64::max).max(1e-9);
    let width = LEFT + W + 170.0;
    let height = TOP + H + 50.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{LEFT:.1}" y="20" font-size="13">{}</text>"#, esc(title));
    let _ = writeln!(
        out,
        r#"<rect x="{LEFT:.1}" y="{TOP:.1}" width="{W:.1}" height="{H:.1}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let v = max_loss * k as f64 / 4.0;
        let y = TOP + H - H * k as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{v:.3}</text>"#,
            LEFT - 4.0,
            y + 3.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">epoch (max {max_epoch:.0})</text>"#,
        LEFT + W / 2.0,
        TOP + H + 16.0
    );
    for (i, (name, pts)) in series.iter().enumerate() {
        let c = SERIES[i % SERIES.len()];
        let path: Vec<String> = pts
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(e, l)| format!("{:.1},{:.1}", LEFT + W * e as f64 / max_epoch, TOP + H - H * (l / max_loss)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{}"/>"#,
            path.join(" ")
        );
        let y = TOP + i as f64 * 16.0;
        let x = LEFT + W + 16.0;
        let _ = writeln!(out, r#"<rect x="{x:.1}" y="{y:.1}" width="10" height="10" fill="{c}"/>"#);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="10">{}</text>"#, x + 14.0, y + 9.0, esc(name));
    }
    out.push_str("</svg>\n");
    out
}

fn write_pair(dir: &Path, stem: &str, csv: &str, svg: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (ext, body) in [("csv", csv), ("svg", svg)] {
        let path = dir.join(format!("{stem}.{ext}"));
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn emit_heatmap(grid: &PairAccuracyGrid, dir: &Path, stem: &str, title: &str) -> Result<()> {
    write_pair(dir, stem, &heatmap_csv(grid), &heatmap_svg(grid, title))
}

pub fn emit_category_bar(reports: &[(String, CategoryReport)], dir: &Path, stem: &str, title: &str) -> Result<()> {
    write_pair(dir, stem, &category_csv(reports), &category_svg(reports, title))
}

pub fn emit_loss_curves(log: &RunLog, dir: &Path, stem: &str, title: &str) -> Result<()> {
    write_pair(dir, stem, &curves_csv(log), &curves_svg(log, title))
}
