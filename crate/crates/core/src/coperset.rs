//! Dataset construction: cycle sampling, split policy, JSONL emission and
//! independent verification.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{digits_to_text, parse_sample, serialize_sample, Vocab};
use crate::composers::{
    compose, gen_scaled_single, gen_sine_pair, gen_single_continuation, parse_fixed,
    AnswerLenPolicy, ComposeRule,
};
use crate::error::{Error, Result};
use crate::par;
use crate::periodcore::{extend, lcm_usize, minimal_period, minimal_period_of, PeriodicCycle};

pub const FORMAT_VERSION: &str = "coper-1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Split {
    Train,
    TestId,
    TestHollow,
    TestExtrapolation,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::Train,
        Split::TestId,
        Split::TestHollow,
        Split::TestExtrapolation,
    ];
    pub const TEST: [Split; 3] = [Split::TestId, Split::TestHollow, Split::TestExtrapolation];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "TRAIN",
            Split::TestId => "TEST_ID",
            Split::TestHollow => "TEST_HOLLOW",
            Split::TestExtrapolation => "TEST_EXTRAPOLATION",
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.jsonl",
            Split::TestId => "test_id.jsonl",
            Split::TestHollow => "test_hollow.jsonl",
            Split::TestExtrapolation => "test_extrapolation.jsonl",
        }
    }

    /// The pair class a split draws from.
    pub fn class(self) -> PairClass {
        match self {
            Split::Train | Split::TestId => PairClass::TrainId,
            Split::TestHollow => PairClass::Hollow,
            Split::TestExtrapolation => PairClass::Extrapolation,
        }
    }

    pub fn is_ood(self) -> bool {
        matches!(self, Split::TestHollow | Split::TestExtrapolation)
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown split {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PairClass {
    TrainId,
    Hollow,
    Extrapolation,
}

/// Training range `[train_lo, train_hi]`, total range, and held-out pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPolicy {
    pub train_lo: u32,
    pub train_hi: u32,
    pub total_lo: u32,
    pub total_hi: u32,
    pub hollow: BTreeSet<(u32, u32)>,
}

impl SplitPolicy {
    pub fn new(
        train_lo: u32,
        train_hi: u32,
        total_lo: u32,
        total_hi: u32,
        hollow: impl IntoIterator<Item = (u32, u32)>,
    ) -> Result<Self> {
        let hollow: BTreeSet<_> = hollow.into_iter().collect();
        if !(1 <= total_lo && total_lo <= train_lo && train_lo <= train_hi && train_hi <= total_hi) {
            return Err(Error::InvalidSpec(format!(
                "need 1 <= total_lo <= L <= U <= total_hi, got [{total_lo}, {total_hi}] / [{train_lo}, {train_hi}]"
            )));
        }
        let inside = |p: u32| (train_lo..=train_hi).contains(&p);
        if let Some(&(a, b)) = hollow.iter().find(|(a, b)| !inside(*a) || !inside(*b)) {
            return Err(Error::InvalidSpec(format!(
                "hollow pair ({a}, {b}) is outside the training range [{train_lo}, {train_hi}]"
            )));
        }
        Ok(Self {
            train_lo,
            train_hi,
            total_lo,
            total_hi,
            hollow,
        })
    }

    /// Expand a square block `[lo, hi]²` into pairs.
    pub fn block(lo: u32, hi: u32) -> impl Iterator<Item = (u32, u32)> {
        (lo..=hi).flat_map(move |a| (lo..=hi).map(move |b| (a, b)))
    }

    /// Training range [4, 14], total range [2, 16], hollow block [8, 11]².
    pub fn paper_default() -> Self {
        Self::new(4, 14, 2, 16, Self::block(8, 11)).expect("valid default policy")
    }

    /// Training range [3, 10] with hollow pairs {(5, 6), (6, 7)}.
    pub fn enumerated_example() -> Self {
        Self::new(3, 10, 2, 12, [(5, 6), (6, 7)]).expect("valid example policy")
    }

    /// Denser range [2, 11] keeping only the hollow {(6, 7), (7, 7)}.
    pub fn dense() -> Self {
        Self::new(3, 10, 2, 11, [(6, 7), (7, 7)]).expect("valid dense policy")
    }

    /// Reduced desk-scale range [3, 9] with hollow {(5, 6), (6, 6)}.
    pub fn desk() -> Self {
        Self::new(3, 9, 2, 10, [(5, 6), (6, 6)]).expect("valid desk policy")
    }

    /// Single-period splits: train T ∈ {4,5,6,8,9,10}, hollow T = 7,
    /// extrapolation T ∈ {2,3,11,12}. Periods are stored as `(T, T)`.
    pub fn single_period() -> Self {
        Self::new(4, 10, 2, 12, [(7, 7)]).expect("valid single-period policy")
    }

    pub fn in_total(&self, p: u32) -> bool {
        (self.total_lo..=self.total_hi).contains(&p)
    }

    fn in_train(&self, p: u32) -> bool {
        (self.train_lo..=self.train_hi).contains(&p)
    }

    /// Pairs of a class in row-major order; `diagonal` restricts to `(T, T)`.
    pub fn pairs(&self, class: PairClass, diagonal: bool) -> Vec<(u32, u32)> {
        let range = self.total_lo..=self.total_hi;
        range
            .clone()
            .flat_map(|a| range.clone().map(move |b| (a, b)))
            .filter(|&(a, b)| !diagonal || a == b)
            .filter(|&(a, b)| classify_pair(a, b, self).ok() == Some(class))
            .collect()
    }
}

/// Hollow membership wins over range membership.
pub fn classify_pair(p1: u32, p2: u32, policy: &SplitPolicy) -> Result<PairClass> {
    if !policy.in_total(p1) || !policy.in_total(p2) {
        return Err(Error::OutOfRange { p1, p2 });
    }
    Ok(if policy.hollow.contains(&(p1, p2)) {
        PairClass::Hollow
    } else if !policy.in_train(p1) || !policy.in_train(p2) {
        PairClass::Extrapolation
    } else {
        PairClass::TrainId
    })
}

/// A cycle over `[0, base)` with minimal period exactly `period`.
pub fn sample_cycle<R: Rng + ?Sized>(period: usize, base: u32, rng: &mut R) -> Result<PeriodicCycle> {
    sample_cycle_in(period, 0, base, rng)
}

/// Rejection sampling of uniform values in `[lo, hi)` until the minimal
/// period equals `period`.
pub fn sample_cycle_in<R: Rng + ?Sized>(
    period: usize,
    lo: u32,
    hi: u32,
    rng: &mut R,
) -> Result<PeriodicCycle> {
    if period < 1 {
        return Err(Error::InvalidPeriod("period must be >= 1".into()));
    }
    if hi < lo + 2 && period > 1 {
        return Err(Error::InvalidSpec(format!(
            "a value range [{lo}, {hi}) cannot realise period {period}"
        )));
    }
    if hi <= lo {
        return Err(Error::InvalidSpec(format!("empty value range [{lo}, {hi})")));
    }
    loop {
        let values: Vec<u32> = (0..period).map(|_| rng.random_range(lo..hi)).collect();
        let cycle = PeriodicCycle::new(values, hi)?;
        if minimal_period(&cycle) == period {
            return Ok(cycle);
        }
    }
}

/// Everything needed to regenerate a dataset besides the counts and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub rule: ComposeRule,
    pub policy: SplitPolicy,
    pub answer_len_policy: AnswerLenPolicy,
    pub modulus: u32,
    /// Answer length of the single-period continuation task.
    pub continuation_answer_len: usize,
    /// Block repeats of the scaled task, inclusive range.
    pub scaled_repeats: (usize, usize),
    /// In-distribution half-width for the sine task.
    pub sine_train_radius: f64,
    /// Out-of-distribution outer half-width for the sine task.
    pub sine_ood_radius: f64,
}

impl TaskConfig {
    pub fn new(rule: ComposeRule, policy: SplitPolicy, answer_len_policy: AnswerLenPolicy) -> Self {
        Self {
            rule,
            policy,
            answer_len_policy,
            modulus: 10,
            continuation_answer_len: 12,
            scaled_repeats: (3, 4),
            sine_train_radius: 3.0 * PI,
            sine_ood_radius: 6.0 * PI,
        }
    }

    fn diagonal(&self) -> bool {
        !self.rule.is_binary()
    }

    /// Admissible pairs of a split; empty for the sine task, which splits by `x`.
    pub fn pairs_for(&self, split: Split) -> Vec<(u32, u32)> {
        if self.rule == ComposeRule::Sine {
            return Vec::new();
        }
        self.policy.pairs(split.class(), self.diagonal())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub input: String,
    pub target: String,
    pub p1: u32,
    pub p2: u32,
    pub split: Split,
    pub rule: ComposeRule,
    pub seed_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub test_id: usize,
    pub test_hollow: usize,
    pub test_extrapolation: usize,
}

impl SplitCounts {
    pub fn new(train: usize, test_id: usize, test_hollow: usize, test_extrapolation: usize) -> Self {
        Self {
            train,
            test_id,
            test_hollow,
            test_extrapolation,
        }
    }

    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::TestId => self.test_id,
            Split::TestHollow => self.test_hollow,
            Split::TestExtrapolation => self.test_extrapolation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: String,
    pub task: TaskConfig,
    pub counts: SplitCounts,
    pub master_seed: u64,
    pub files: BTreeMap<Split, String>,
    pub vocab: Vec<(String, u32)>,
    /// How circular-convolution values are reduced to digits.
    pub circconv_reduction: String,
}

/// An in-memory dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub splits: BTreeMap<Split, Vec<SampleRecord>>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[SampleRecord] {
        self.splits.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Write the manifest and one JSONL file per non-empty split.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (split, name) in &self.manifest.files {
            let path = dir.join(name);
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(file);
            for rec in self.split(*split) {
                serde_json::to_writer(&mut w, rec)?;
                w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let mut splits = BTreeMap::new();
        for (split, name) in &manifest.files {
            splits.insert(*split, read_jsonl(&dir.join(name))?);
        }
        Ok(Self { manifest, splits })
    }
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "manifest format {:?} is not {FORMAT_VERSION:?}",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<SampleRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .enumerate()
        .map(|(i, line)| {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// SplitMix64 finaliser over (master seed, split, index).
pub fn sample_seed(master: u64, split: Split, index: u64) -> u64 {
    let mut z = master
        ^ split.index().wrapping_mul(0xD1B5_4A32_D192_ED03)
        ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn join_values<T: fmt::Display>(values: &[T]) -> String {
    values
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

/// Generate one record for a given pair and seed.
pub fn generate_record(
    task: &TaskConfig,
    split: Split,
    (p1, p2): (u32, u32),
    seed_id: u64,
) -> Result<SampleRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed_id);
    let rule = task.rule;
    let (input, target) = match rule {
        ComposeRule::ModAdd | ComposeRule::AddSubAlt | ComposeRule::CircConv => {
            let c1 = sample_cycle(p1 as usize, task.modulus, &mut rng)?;
            let c2 = sample_cycle(p2 as usize, task.modulus, &mut rng)?;
            let n = lcm_usize(p1 as usize, p2 as usize);
            let answer_len = task.answer_len_policy.answer_len(p1 as usize, p2 as usize);
            let answer = compose(rule, &c1, &c2, task.modulus, answer_len)?;
            serialize_sample(
                &digits_to_text(&extend(&c1, n)),
                &digits_to_text(&extend(&c2, n)),
                &digits_to_text(&answer),
            )?
        }
        ComposeRule::SinglePeriod => {
            let t = p1 as usize;
            let c = sample_cycle(t, task.modulus, &mut rng)?;
            let prompt_len = rng.random_range(2 * t + 1..=3 * t);
            let (prompt, answer) = gen_single_continuation(&c, prompt_len, task.continuation_answer_len)?;
            (digits_to_text(&prompt), digits_to_text(&answer))
        }
        ComposeRule::ScaledSingle => {
            let t = p1 as usize;
            let c = sample_cycle_in(t, 1, 5, &mut rng)?;
            let (lo, hi) = task.scaled_repeats;
            let repeats = rng.random_range(lo..=hi);
            let values = gen_scaled_single(&c, repeats, 2)?;
            let split_at = (repeats - 1) * t;
            (
                format!("{},", join_values(&values[..split_at])),
                join_values(&values[split_at..]),
            )
        }
        ComposeRule::Sine => {
            let (r_in, r_out) = (task.sine_train_radius, task.sine_ood_radius);
            let x = match split {
                Split::Train | Split::TestId => rng.random_range(-r_in..=r_in),
                Split::TestExtrapolation => {
                    let m = rng.random_range(r_in..=r_out);
                    if rng.random::<bool>() {
                        m
                    } else {
                        -m
                    }
                }
                Split::TestHollow => {
                    return Err(Error::InfeasiblePolicy("the sine task has no hollow split".into()))
                }
            };
            gen_sine_pair(x)?
        }
    };
    Ok(SampleRecord {
        input,
        target,
        p1,
        p2,
        split,
        rule,
        seed_id,
    })
}

/// Build every split in memory. Output is a pure function of the arguments.
pub fn build_dataset(task: &TaskConfig, counts: SplitCounts, master_seed: u64) -> Result<Dataset> {
    if task.rule.is_binary() {
        if let AnswerLenPolicy::Capped { max_len } = task.answer_len_policy {
            if (max_len as u32) < task.policy.total_hi {
                return Err(Error::InvalidSpec(format!(
                    "answer cap {max_len} is shorter than the largest period {}",
                    task.policy.total_hi
                )));
            }
        }
    }
    let mut splits = BTreeMap::new();
    let mut files = BTreeMap::new();
    for split in Split::ALL {
        let n = counts.get(split);
        if n == 0 {
            continue;
        }
        let pairs = if task.rule == ComposeRule::Sine {
            if split == Split::TestHollow {
                return Err(Error::InfeasiblePolicy("the sine task has no hollow split".into()));
            }
            vec![(0, 0)]
        } else {
            task.pairs_for(split)
        };
        if pairs.is_empty() {
            return Err(Error::InfeasiblePolicy(format!(
                "no admissible pair for split {split}"
            )));
        }
        let records = par::try_map_range(n, |i| {
            let seed_id = sample_seed(master_seed, split, i as u64);
            let mut pick = ChaCha8Rng::seed_from_u64(seed_id ^ 0xA5A5_A5A5_A5A5_A5A5);
            let pair = pairs[pick.random_range(0..pairs.len())];
            generate_record(task, split, pair, seed_id)
        })?;
        splits.insert(split, records);
        files.insert(split, split.file_name().to_string());
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION.to_string(),
        task: task.clone(),
        counts,
        master_seed,
        files,
        vocab: Vocab.table(),
        circconv_reduction: format!("mod {}", task.modulus),
    };
    Ok(Dataset { manifest, splits })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyFailure {
    pub file: String,
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checked: usize,
    pub failure: Option<VerifyFailure>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

fn digit_at(text: &[u8], i: usize) -> std::result::Result<u32, String> {
    match text[i % text.len()] {
        b @ b'0'..=b'9' => Ok((b - b'0') as u32),
        b => Err(format!("non-digit {:?} in operand", b as char)),
    }
}

/// Smallest shift under which a finite string agrees with itself.
fn sliding_period(s: &[u8]) -> usize {
    (1..=s.len())
        .find(|&d| s.iter().zip(&s[d..]).all(|(a, b)| a == b))
        .unwrap_or(s.len())
}

/// Recompute a record's target directly from its input characters.
fn check_record(task: &TaskConfig, rec: &SampleRecord) -> std::result::Result<(), String> {
    if rec.rule != task.rule {
        return Err(format!("rule {} does not match manifest rule {}", rec.rule, task.rule));
    }
    let expected_class = if task.rule == ComposeRule::Sine {
        let x = parse_fixed(&rec.input).map_err(|e| e.to_string())?;
        if x.abs() <= task.sine_train_radius {
            PairClass::TrainId
        } else if x.abs() <= task.sine_ood_radius {
            PairClass::Extrapolation
        } else {
            return Err(format!("x = {x} lies outside every sine range"));
        }
    } else {
        classify_pair(rec.p1, rec.p2, &task.policy).map_err(|e| e.to_string())?
    };
    if expected_class != rec.split.class() {
        return Err(format!(
            "split violation: pair ({}, {}) classifies as {:?} but is labelled {}",
            rec.p1, rec.p2, expected_class, rec.split
        ));
    }
    let (p1, p2) = (rec.p1 as usize, rec.p2 as usize);
    let expected: String = match task.rule {
        ComposeRule::ModAdd | ComposeRule::AddSubAlt | ComposeRule::CircConv => {
            let (a, b, _) = parse_sample(&rec.input, &rec.target).map_err(|e| e.to_string())?;
            let (a, b) = (a.as_bytes(), b.as_bytes());
            let n = p1 / crate::periodcore::gcd(p1 as u64, p2 as u64) as usize * p2;
            if a.len() != n || b.len() != n {
                return Err(format!("operands have lengths ({}, {}), expected {n}", a.len(), b.len()));
            }
            if minimal_period_of(a).ok() != Some(p1) || minimal_period_of(b).ok() != Some(p2) {
                return Err(format!("operand periods do not equal ({p1}, {p2})"));
            }
            let m = task.modulus;
            let len = task.answer_len_policy.answer_len(p1, p2);
            let mut out = String::with_capacity(len);
            for t in 0..len {
                let v = match task.rule {
                    ComposeRule::ModAdd => (digit_at(a, t)? + digit_at(b, t)?) % m,
                    ComposeRule::AddSubAlt => {
                        let s = if t % 2 == 0 { 1i64 } else { -1 };
                        (digit_at(a, t)? as i64 + s * digit_at(b, t)? as i64).rem_euclid(m as i64) as u32
                    }
                    _ => {
                        let mut acc = 0u64;
                        for k in 0..n {
                            acc += digit_at(a, k)? as u64 * digit_at(b, (t % n + n - k) % n)? as u64;
                        }
                        (acc % m as u64) as u32
                    }
                };
                out.push(char::from_digit(v, 10).ok_or("modulus above 10")?);
            }
            out
        }
        ComposeRule::SinglePeriod => {
            let prompt = rec.input.as_bytes();
            if prompt.is_empty() || !prompt.iter().all(u8::is_ascii_digit) {
                return Err("prompt must be a non-empty digit string".into());
            }
            if prompt.len() < 2 * p1 || p1 != p2 {
                return Err(format!("prompt of {} is too short for period {p1}", prompt.len()));
            }
            if sliding_period(prompt) != p1 {
                return Err(format!("prompt period is {}, expected {p1}", sliding_period(prompt)));
            }
            (0..rec.target.len())
                .map(|i| prompt[(prompt.len() + i - p1 * (1 + i / p1)) % prompt.len()] as char)
                .collect()
        }
        ComposeRule::ScaledSingle => {
            let body = rec.input.strip_suffix(',').ok_or("prompt must end with ','")?;
            let values: Vec<u64> = body
                .split(',')
                .map(|v| v.parse::<u64>().map_err(|_| format!("bad value {v:?}")))
                .collect::<std::result::Result<_, _>>()?;
            if p1 == 0 || !values.len().is_multiple_of(p1) || values.len() < p1 {
                return Err(format!("prompt of {} values is not whole blocks of {p1}", values.len()));
            }
            if minimal_period_of(&values[..p1]).ok() != Some(p1) {
                return Err(format!("first block does not have period {p1}"));
            }
            if (p1..values.len()).any(|t| values[t] != 2 * values[t - p1]) {
                return Err("prompt blocks do not double".into());
            }
            join_values(&values[values.len() - p1..].iter().map(|v| 2 * v).collect::<Vec<_>>())
        }
        ComposeRule::Sine => {
            let x = parse_fixed(&rec.input).map_err(|e| e.to_string())?;
            crate::composers::format_fixed(x.sin()).map_err(|e| e.to_string())?
        }
    };
    if expected != rec.target {
        let at = expected
            .bytes()
            .zip(rec.target.bytes())
            .position(|(a, b)| a != b)
            .unwrap_or(expected.len().min(rec.target.len()));
        return Err(format!(
            "target mismatch at position {at}: expected {expected:?}, found {:?}",
            rec.target
        ));
    }
    Ok(())
}

/// Verify the records of an in-memory dataset against the oracle.
pub fn verify_records(dataset: &Dataset) -> VerifyReport {
    let task = &dataset.manifest.task;
    let mut checked = 0;
    for (split, name) in &dataset.manifest.files {
        let records = dataset.split(*split);
        if records.len() != dataset.manifest.counts.get(*split) {
            return VerifyReport {
                checked,
                failure: Some(VerifyFailure {
                    file: name.clone(),
                    line: records.len(),
                    reason: format!(
                        "manifest declares {} records, file holds {}",
                        dataset.manifest.counts.get(*split),
                        records.len()
                    ),
                }),
            };
        }
        let results = par::map_slice(records, |rec| {
            check_record(task, rec).and_then(|_| {
                if rec.split == *split {
                    Ok(())
                } else {
                    Err(format!("record labelled {} found in the {split} file", rec.split))
                }
            })
        });
        if let Some((i, Err(reason))) = results.into_iter().enumerate().find(|(_, r)| r.is_err()) {
            return VerifyReport {
                checked: checked + i,
                failure: Some(VerifyFailure {
                    file: name.clone(),
                    line: i + 1,
                    reason,
                }),
            };
        }
        checked += records.len();
    }
    VerifyReport {
        checked,
        failure: None,
    }
}

/// Load a dataset directory and verify every line.
pub fn verify_dataset(dir: &Path) -> Result<VerifyReport> {
    let dataset = Dataset::load(dir)?;
    Ok(verify_records(&dataset))
}

pub fn split_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(split.file_name())
}
