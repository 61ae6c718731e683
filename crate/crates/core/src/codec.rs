//! Fixed character vocabulary and sample (de)serialization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PLUS: u32 = 10;
pub const MINUS: u32 = 11;
pub const EQUALS: u32 = 12;
pub const DOT: u32 = 13;
pub const COMMA: u32 = 14;
pub const BOS: u32 = 15;
pub const PAD: u32 = 16;
pub const VOCAB_SIZE: usize = 17;

const SYMBOLS: [char; 15] = [
    '0', '1', '2', '3', '4', '5', '6', '7', '8', '9', '+', '-', '=', '.', ',',
];

/// The symbol table; ids are stable.
#[derive(Debug, Clone, Copy, Default)]
pub struct Vocab;

impl Vocab {
    pub fn size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn id(&self, c: char) -> Option<u32> {
        SYMBOLS.iter().position(|&s| s == c).map(|i| i as u32)
    }

    /// Printable form of an id; BOS and PAD have no character.
    pub fn symbol(&self, id: u32) -> Option<char> {
        SYMBOLS.get(id as usize).copied()
    }

    /// `(symbol, id)` rows, emitted into manifests.
    pub fn table(&self) -> Vec<(String, u32)> {
        let mut rows: Vec<(String, u32)> = SYMBOLS
            .iter()
            .enumerate()
            .map(|(i, c)| (c.to_string(), i as u32))
            .collect();
        rows.push(("<bos>".into(), BOS));
        rows.push(("<pad>".into(), PAD));
        rows
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct TokenSeq(pub Vec<u32>);

impl TokenSeq {
    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn encode(text: &str) -> Result<TokenSeq> {
    text.chars()
        .enumerate()
        .map(|(offset, c)| {
            Vocab
                .id(c)
                .ok_or(Error::UnknownSymbol { symbol: c, offset })
        })
        .collect::<Result<Vec<_>>>()
        .map(TokenSeq)
}

/// Ids without a printable symbol (BOS, PAD, out of range) are skipped.
pub fn decode(ids: &[u32]) -> String {
    ids.iter().filter_map(|&i| Vocab.symbol(i)).collect()
}

/// `seq1 + "+" + seq2 + "="` and the answer.
pub fn serialize_sample(seq1: &str, seq2: &str, answer: &str) -> Result<(String, String)> {
    if seq1.is_empty() || seq2.is_empty() {
        return Err(Error::InvalidSpec("operand texts must be non-empty".into()));
    }
    for (i, c) in seq1.chars().chain(seq2.chars()).enumerate() {
        if !c.is_ascii_digit() {
            return Err(Error::UnknownSymbol { symbol: c, offset: i });
        }
    }
    Ok((format!("{seq1}+{seq2}="), answer.to_string()))
}

/// Inverse of [`serialize_sample`].
pub fn parse_sample(input: &str, target: &str) -> Result<(String, String, String)> {
    let bad = || Error::InvalidSpec(format!("{input:?} is not of the form A+B="));
    let body = input.strip_suffix('=').ok_or_else(bad)?;
    let (a, b) = body.split_once('+').ok_or_else(bad)?;
    if a.is_empty() || b.is_empty() || b.contains('+') {
        return Err(bad());
    }
    Ok((a.to_string(), b.to_string(), target.to_string()))
}

pub fn digits_to_text(values: &[u32]) -> String {
    values
        .iter()
        .map(|&v| char::from_digit(v, 10).expect("digit value below 10"))
        .collect()
}

pub fn text_to_digits(text: &str) -> Result<Vec<u32>> {
    text.chars()
        .enumerate()
        .map(|(offset, c)| c.to_digit(10).ok_or(Error::UnknownSymbol { symbol: c, offset }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encode_examples() {
        assert_eq!(encode("12+34=").unwrap().0, vec![1, 2, 10, 3, 4, 12]);
        assert_eq!(encode("+3.1415926").unwrap().len(), 10);
        assert!(encode("").unwrap().is_empty());
        assert!(matches!(
            encode("12x"),
            Err(Error::UnknownSymbol { symbol: 'x', offset: 2 })
        ));
    }

    #[test]
    fn table_is_a_bijection() {
        let t = Vocab.table();
        assert_eq!(t.len(), VOCAB_SIZE);
        for (i, (_, id)) in t.iter().enumerate() {
            assert_eq!(*id as usize, i);
        }
        assert_eq!(Vocab.symbol(BOS), None);
        assert_eq!(decode(&[BOS, 1, PAD]), "1");
    }

    #[test]
    fn serialize_examples() {
        assert_eq!(
            serialize_sample("123123", "1212", "244334").unwrap(),
            ("123123+1212=".to_string(), "244334".to_string())
        );
        assert_eq!(
            serialize_sample("5", "0", "5").unwrap(),
            ("5+0=".to_string(), "5".to_string())
        );
        assert!(serialize_sample("", "1", "1").is_err());
        let (a, b, t) = parse_sample("123123+1212=", "244334").unwrap();
        assert_eq!((a.as_str(), b.as_str(), t.as_str()), ("123123", "1212", "244334"));
        assert!(parse_sample("1212", "1").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn round_trip(s in "[0-9+\\-=.,]{0,40}") {
            prop_assert_eq!(decode(encode(&s).unwrap().ids()), s);
        }

        #[test]
        fn sample_round_trip(a in "[0-9]{1,20}", b in "[0-9]{1,20}", t in "[0-9]{1,20}") {
            let (input, target) = serialize_sample(&a, &b, &t).unwrap();
            prop_assert_eq!(parse_sample(&input, &target).unwrap(), (a, b, t));
        }
    }
}
