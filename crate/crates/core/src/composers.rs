//! Generators for composite and single periodicity tasks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::periodcore::{extend, lcm_usize, PeriodicCycle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ComposeRule {
    /// `(f1(t mod P1) + f2(t mod P2)) mod P`
    ModAdd,
    /// `(f1(t mod P1) + (-1)^t f2(t mod P2)) mod P`
    AddSubAlt,
    /// Circular convolution over `Z_lcm(P1, P2)`, reduced mod P.
    CircConv,
    /// `f(t + T) = 2 f(t)` continuation.
    ScaledSingle,
    /// Plain periodic continuation.
    SinglePeriod,
    /// `y = sin(x)` on fixed-width decimal strings.
    Sine,
}

impl ComposeRule {
    pub const ALL: [ComposeRule; 6] = [
        ComposeRule::ModAdd,
        ComposeRule::AddSubAlt,
        ComposeRule::CircConv,
        ComposeRule::ScaledSingle,
        ComposeRule::SinglePeriod,
        ComposeRule::Sine,
    ];

    /// Rules that combine two periodic operands.
    pub fn is_binary(self) -> bool {
        matches!(
            self,
            ComposeRule::ModAdd | ComposeRule::AddSubAlt | ComposeRule::CircConv
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            ComposeRule::ModAdd => "MOD_ADD",
            ComposeRule::AddSubAlt => "ADD_SUB_ALT",
            ComposeRule::CircConv => "CIRC_CONV",
            ComposeRule::ScaledSingle => "SCALED_SINGLE",
            ComposeRule::SinglePeriod => "SINGLE_PERIOD",
            ComposeRule::Sine => "SINE",
        }
    }
}

impl fmt::Display for ComposeRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ComposeRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ComposeRule::ALL
            .into_iter()
            .find(|r| r.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown rule {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AnswerLenPolicy {
    FullLcm,
    Capped { max_len: usize },
}

impl AnswerLenPolicy {
    pub fn answer_len(&self, p1: usize, p2: usize) -> usize {
        let n = lcm_usize(p1, p2);
        match *self {
            AnswerLenPolicy::FullLcm => n,
            AnswerLenPolicy::Capped { max_len } => n.min(max_len),
        }
    }
}

impl Default for AnswerLenPolicy {
    fn default() -> Self {
        AnswerLenPolicy::Capped { max_len: 120 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComposeSpec {
    pub rule: ComposeRule,
    pub p1: usize,
    pub p2: usize,
    pub modulus: u32,
    pub answer_len_policy: AnswerLenPolicy,
}

impl ComposeSpec {
    pub fn new(
        rule: ComposeRule,
        p1: usize,
        p2: usize,
        modulus: u32,
        answer_len_policy: AnswerLenPolicy,
    ) -> Result<Self> {
        if p1 < 1 || p2 < 1 {
            return Err(Error::InvalidSpec(format!("periods must be >= 1, got ({p1}, {p2})")));
        }
        if modulus < 2 {
            return Err(Error::InvalidSpec(format!("modulus must be >= 2, got {modulus}")));
        }
        if let AnswerLenPolicy::Capped { max_len } = answer_len_policy {
            if max_len < p1 || (rule.is_binary() && max_len < p2) {
                return Err(Error::InvalidSpec(format!(
                    "answer cap {max_len} is shorter than a period of ({p1}, {p2})"
                )));
            }
        }
        Ok(Self {
            rule,
            p1,
            p2,
            modulus,
            answer_len_policy,
        })
    }

    pub fn answer_len(&self) -> usize {
        self.answer_len_policy.answer_len(self.p1, self.p2)
    }
}

fn check_operands(c1: &PeriodicCycle, c2: &PeriodicCycle, modulus: u32) -> Result<()> {
    if modulus < 2 {
        return Err(Error::InvalidSpec(format!("modulus must be >= 2, got {modulus}")));
    }
    for (name, c) in [("first", c1), ("second", c2)] {
        if let Some(v) = c.values().iter().find(|&&v| v >= modulus) {
            return Err(Error::InvalidValue(format!(
                "{name} operand holds {v}, which is not below the modulus {modulus}"
            )));
        }
    }
    Ok(())
}

/// Modular addition of two periodic sequences.
pub fn compose_modadd(
    c1: &PeriodicCycle,
    c2: &PeriodicCycle,
    modulus: u32,
    out_len: usize,
) -> Result<Vec<u32>> {
    check_operands(c1, c2, modulus)?;
    Ok((0..out_len as i64)
        .map(|t| (c1.at(t) + c2.at(t)) % modulus)
        .collect())
}

/// Alternating addition (even `t`) and subtraction (odd `t`).
pub fn compose_addsub(
    c1: &PeriodicCycle,
    c2: &PeriodicCycle,
    modulus: u32,
    out_len: usize,
) -> Result<Vec<u32>> {
    check_operands(c1, c2, modulus)?;
    let m = modulus as i64;
    Ok((0..out_len as i64)
        .map(|t| {
            let b = c2.at(t) as i64;
            let signed = if t % 2 == 0 { b } else { -b };
            (c1.at(t) as i64 + signed).rem_euclid(m) as u32
        })
        .collect())
}

/// Unreduced circular convolution over one common period `N = lcm(P1, P2)`.
pub fn circconv_raw(c1: &PeriodicCycle, c2: &PeriodicCycle) -> Vec<u64> {
    let n = lcm_usize(c1.len(), c2.len()) as i64;
    (0..n)
        .map(|t| {
            (0..n)
                .map(|k| c1.at(k) as u64 * c2.at(t - k) as u64)
                .sum()
        })
        .collect()
}

/// Circular convolution reduced modulo `modulus`; length `lcm(P1, P2)`.
pub fn compose_circconv(c1: &PeriodicCycle, c2: &PeriodicCycle, modulus: u32) -> Result<Vec<u32>> {
    check_operands(c1, c2, modulus)?;
    Ok(circconv_raw(c1, c2)
        .into_iter()
        .map(|v| (v % modulus as u64) as u32)
        .collect())
}

/// Dispatch for the binary rules; circular convolution is truncated or
/// repeated periodically to `out_len`.
pub fn compose(
    rule: ComposeRule,
    c1: &PeriodicCycle,
    c2: &PeriodicCycle,
    modulus: u32,
    out_len: usize,
) -> Result<Vec<u32>> {
    match rule {
        ComposeRule::ModAdd => compose_modadd(c1, c2, modulus, out_len),
        ComposeRule::AddSubAlt => compose_addsub(c1, c2, modulus, out_len),
        ComposeRule::CircConv => {
            let full = compose_circconv(c1, c2, modulus)?;
            Ok(full.iter().copied().cycle().take(out_len).collect())
        }
        other => Err(Error::InvalidSpec(format!("{other} is not a two-operand rule"))),
    }
}

/// Blocks `c, f·c, f²·c, …`; values are left unreduced.
pub fn gen_scaled_single(c: &PeriodicCycle, repeats: usize, factor: u64) -> Result<Vec<u64>> {
    if repeats < 2 {
        return Err(Error::InvalidSpec(format!("need at least 2 repeats, got {repeats}")));
    }
    if c.values().contains(&0) {
        return Err(Error::InvalidValue("scaled cycles must hold values >= 1".into()));
    }
    let mut out = Vec::with_capacity(repeats * c.len());
    let mut scale = 1u64;
    for _ in 0..repeats {
        out.extend(c.values().iter().map(|&v| v as u64 * scale));
        scale = scale
            .checked_mul(factor)
            .ok_or_else(|| Error::InvalidSpec("scaled values overflow u64".into()))?;
    }
    Ok(out)
}

/// Prompt of `prompt_len` values followed by the next `answer_len` values.
pub fn gen_single_continuation(
    c: &PeriodicCycle,
    prompt_len: usize,
    answer_len: usize,
) -> Result<(Vec<u32>, Vec<u32>)> {
    if prompt_len < 2 * c.len() {
        return Err(Error::InvalidSpec(format!(
            "prompt of {prompt_len} holds fewer than two cycles of length {}",
            c.len()
        )));
    }
    if answer_len < 1 {
        return Err(Error::InvalidSpec("answer must be non-empty".into()));
    }
    let mut all = extend(c, prompt_len + answer_len);
    let answer = all.split_off(prompt_len);
    Ok((all, answer))
}

pub const FIXED_WIDTH: usize = 10;

/// Fixed 10-character decimal: sign, integer digit(s), '.', fraction.
/// One integer digit with 7 decimals below 10, two with 6 decimals below 100.
pub fn format_fixed(x: f64) -> Result<String> {
    if !x.is_finite() {
        return Err(Error::FormatOverflow(x));
    }
    let a = x.abs();
    let body = [7usize, 6]
        .into_iter()
        .map(|decimals| format!("{a:.decimals$}"))
        .find(|s| s.len() == FIXED_WIDTH - 1)
        .ok_or(Error::FormatOverflow(x))?;
    let is_zero = body.bytes().all(|b| b == b'0' || b == b'.');
    let sign = if x < 0.0 && !is_zero { '-' } else { '+' };
    Ok(format!("{sign}{body}"))
}

/// Inverse of [`format_fixed`].
pub fn parse_fixed(text: &str) -> Result<f64> {
    let bad = || Error::InvalidValue(format!("{text:?} is not a fixed-width decimal"));
    if text.len() != FIXED_WIDTH {
        return Err(bad());
    }
    let (sign, body) = text.split_at(1);
    let sign = match sign {
        "+" => 1.0,
        "-" => -1.0,
        _ => return Err(bad()),
    };
    let (int, frac) = body.split_once('.').ok_or_else(bad)?;
    if int.is_empty()
        || frac.is_empty()
        || !int.bytes().chain(frac.bytes()).all(|b| b.is_ascii_digit())
    {
        return Err(bad());
    }
    body.parse::<f64>().map(|v| sign * v).map_err(|_| bad())
}

/// `(x_text, y_text)` with `y = sin(x)` evaluated at the value `x_text` encodes.
pub fn gen_sine_pair(x: f64) -> Result<(String, String)> {
    if x.is_nan() || x.abs() >= 100.0 {
        return Err(Error::FormatOverflow(x));
    }
    let x_text = format_fixed(x)?;
    let y = parse_fixed(&x_text)?.sin();
    Ok((x_text, format_fixed(y)?))
}
