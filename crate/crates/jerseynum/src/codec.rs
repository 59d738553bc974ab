//! Jersey number labels and the mapping between the holistic (one class per
//! number) and digit-wise (two 11-way digit classes) representations.
//!
//! A label is either a number in 0..=99 or null ("no number visible"). The
//! digit-wise view splits a number into a first-digit slot (tens place,
//! `Absent` for numbers below 10) and a second-digit slot (units place).
//! Null maps to `(Absent, Absent)`.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("unknown class: label {0} is not in the class set")]
    UnknownClass(String),
    #[error("invalid label: {0}")]
    InvalidLabel(String),
    #[error("invalid class set: {0}")]
    InvalidClassSet(String),
}

/// A jersey number label: a number in 0..=99, or null ("not visible").
///
/// The inner representation is private so out-of-range numbers are
/// unrepresentable; construct via [`JerseyLabel::number`] or [`JerseyLabel::NULL`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct JerseyLabel(Option<u8>);

impl JerseyLabel {
    pub const NULL: JerseyLabel = JerseyLabel(None);

    pub fn number(n: u8) -> Result<Self, CodecError> {
        if n > 99 {
            return Err(CodecError::InvalidLabel(format!(
                "jersey number {n} out of range 0..=99"
            )));
        }
        Ok(JerseyLabel(Some(n)))
    }

    pub fn is_null(&self) -> bool {
        self.0.is_none()
    }

    pub fn as_number(&self) -> Option<u8> {
        self.0
    }

    /// All 101 representable labels: null followed by 0..=99.
    pub fn all() -> impl Iterator<Item = JerseyLabel> {
        std::iter::once(JerseyLabel::NULL).chain((0..=99).map(|n| JerseyLabel(Some(n))))
    }
}

impl fmt::Display for JerseyLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            None => write!(f, "null"),
            Some(n) => write!(f, "{n}"),
        }
    }
}

impl FromStr for JerseyLabel {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "null" {
            return Ok(JerseyLabel::NULL);
        }
        let n: u8 = s
            .parse()
            .map_err(|_| CodecError::InvalidLabel(format!("cannot parse label token {s:?}")))?;
        JerseyLabel::number(n)
    }
}

/// One of the 11 digit classes: a digit 0..=9 or `Absent`.
///
/// `Absent` covers both the null label and the missing tens digit of
/// single-digit numbers. In one-hot encodings `Absent` occupies index 10.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DigitClass {
    Digit(u8),
    Absent,
}

/// Number of digit classes (digits 0-9 plus `Absent`).
pub const DIGIT_CLASSES: usize = 11;

impl DigitClass {
    pub fn digit(d: u8) -> Result<Self, CodecError> {
        if d > 9 {
            return Err(CodecError::InvalidLabel(format!("digit {d} out of range 0..=9")));
        }
        Ok(DigitClass::Digit(d))
    }

    /// Index into an 11-way one-hot: digits map to themselves, `Absent` to 10.
    pub fn index(&self) -> usize {
        match self {
            DigitClass::Digit(d) => *d as usize,
            DigitClass::Absent => 10,
        }
    }

    pub fn from_index(i: usize) -> Result<Self, CodecError> {
        match i {
            0..=9 => Ok(DigitClass::Digit(i as u8)),
            10 => Ok(DigitClass::Absent),
            _ => Err(CodecError::InvalidLabel(format!(
                "digit class index {i} out of range 0..=10"
            ))),
        }
    }
}

/// Splits a label into its (first digit, second digit) classes.
///
/// Null maps to `(Absent, Absent)`; a two-digit number to (tens, units); a
/// single-digit number to `(Absent, units)`.
pub fn decompose_digits(label: JerseyLabel) -> (DigitClass, DigitClass) {
    match label.as_number() {
        None => (DigitClass::Absent, DigitClass::Absent),
        Some(n) if n >= 10 => (DigitClass::Digit(n / 10), DigitClass::Digit(n % 10)),
        Some(n) => (DigitClass::Absent, DigitClass::Digit(n)),
    }
}

/// Inverse of [`decompose_digits`] on its image, extended to a total function.
///
/// The pair `(Digit(t), Absent)` never arises from a real label but can arise
/// from two independent digit-head argmaxes at inference time; it collapses to
/// null so digit-wise prediction is always defined.
pub fn compose_digits(d1: DigitClass, d2: DigitClass) -> JerseyLabel {
    match (d1, d2) {
        (DigitClass::Absent, DigitClass::Absent) => JerseyLabel::NULL,
        (DigitClass::Absent, DigitClass::Digit(u)) => JerseyLabel(Some(u)),
        (DigitClass::Digit(t), DigitClass::Digit(u)) => JerseyLabel(Some(t * 10 + u)),
        (DigitClass::Digit(_), DigitClass::Absent) => JerseyLabel::NULL,
    }
}

/// The ordered set of labels a model classifies over.
///
/// Index 0 is always null. The ordering is stable and is persisted alongside
/// any trained model so head indices stay meaningful across save/load.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSet {
    labels: Vec<JerseyLabel>,
    index: HashMap<JerseyLabel, usize>,
}

impl ClassSet {
    /// Builds a class set from `labels`. The list must start with null,
    /// contain no duplicates, and have at most 101 entries (null plus 0..=99).
    pub fn new(labels: Vec<JerseyLabel>) -> Result<Self, CodecError> {
        if labels.len() < 2 {
            return Err(CodecError::InvalidClassSet(format!(
                "need at least 2 classes, got {}",
                labels.len()
            )));
        }
        if labels.len() > 101 {
            return Err(CodecError::InvalidClassSet(format!(
                "at most 101 classes are representable, got {}",
                labels.len()
            )));
        }
        if !labels[0].is_null() {
            return Err(CodecError::InvalidClassSet(
                "index 0 must be the null class".into(),
            ));
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (i, &label) in labels.iter().enumerate() {
            if index.insert(label, i).is_some() {
                return Err(CodecError::InvalidClassSet(format!(
                    "duplicate label {label}"
                )));
            }
        }
        Ok(ClassSet { labels, index })
    }

    /// Null plus the numbers `lo..=hi`.
    pub fn from_number_range(lo: u8, hi: u8) -> Result<Self, CodecError> {
        if lo > hi {
            return Err(CodecError::InvalidClassSet(format!(
                "empty number range {lo}..={hi}"
            )));
        }
        let mut labels = vec![JerseyLabel::NULL];
        for n in lo..=hi {
            labels.push(JerseyLabel::number(n)?);
        }
        ClassSet::new(labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        false // invariant: len >= 2
    }

    pub fn labels(&self) -> &[JerseyLabel] {
        &self.labels
    }

    pub fn contains(&self, label: JerseyLabel) -> bool {
        self.index.contains_key(&label)
    }

    pub fn label_at(&self, i: usize) -> Option<JerseyLabel> {
        self.labels.get(i).copied()
    }

    /// Serializes as one label token per line (line 0 is "null").
    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for label in &self.labels {
            s.push_str(&label.to_string());
            s.push('\n');
        }
        s
    }

    pub fn from_lines(s: &str) -> Result<Self, CodecError> {
        let labels = s
            .lines()
            .map(|line| line.trim().parse())
            .collect::<Result<Vec<_>, _>>()?;
        ClassSet::new(labels)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_lines())
    }

    pub fn load(path: &Path) -> Result<Self, CodecError> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| CodecError::InvalidClassSet(format!("read {}: {e}", path.display())))?;
        Self::from_lines(&s)
    }

    /// Comma-joined token list, used in manifest headers.
    pub fn to_token_list(&self) -> String {
        self.labels
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn from_token_list(s: &str) -> Result<Self, CodecError> {
        let labels = s
            .split(',')
            .map(|t| t.trim().parse())
            .collect::<Result<Vec<_>, _>>()?;
        ClassSet::new(labels)
    }
}

/// Stable index of `label` in the class set.
pub fn holistic_index(label: JerseyLabel, classes: &ClassSet) -> Result<usize, CodecError> {
    classes
        .index
        .get(&label)
        .copied()
        .ok_or_else(|| CodecError::UnknownClass(label.to_string()))
}

/// The (y, y1, y2) ground-truth encoding of one label: a one-hot over the
/// class set plus one-hots over the two 11-way digit classes.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetTriple {
    pub y: Vec<f64>,
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    pub holistic_idx: usize,
    pub digit1_idx: usize,
    pub digit2_idx: usize,
}

/// Encodes a label into its [`TargetTriple`].
pub fn encode_targets(label: JerseyLabel, classes: &ClassSet) -> Result<TargetTriple, CodecError> {
    let holistic_idx = holistic_index(label, classes)?;
    let (d1, d2) = decompose_digits(label);

    let mut y = vec![0.0; classes.len()];
    y[holistic_idx] = 1.0;
    let mut y1 = vec![0.0; DIGIT_CLASSES];
    y1[d1.index()] = 1.0;
    let mut y2 = vec![0.0; DIGIT_CLASSES];
    y2[d2.index()] = 1.0;

    Ok(TargetTriple {
        y,
        y1,
        y2,
        holistic_idx,
        digit1_idx: d1.index(),
        digit2_idx: d2.index(),
    })
}

/// Decodes a target triple back to its label via the holistic one-hot.
pub fn decode_targets(t: &TargetTriple, classes: &ClassSet) -> Result<JerseyLabel, CodecError> {
    classes
        .label_at(t.holistic_idx)
        .ok_or_else(|| CodecError::UnknownClass(format!("index {}", t.holistic_idx)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_class_set() -> ClassSet {
        ClassSet::new(JerseyLabel::all().collect()).unwrap()
    }

    #[test]
    fn decompose_two_digit() {
        let (d1, d2) = decompose_digits(JerseyLabel::number(72).unwrap());
        assert_eq!(d1, DigitClass::Digit(7));
        assert_eq!(d2, DigitClass::Digit(2));
    }

    #[test]
    fn decompose_null() {
        assert_eq!(
            decompose_digits(JerseyLabel::NULL),
            (DigitClass::Absent, DigitClass::Absent)
        );
    }

    #[test]
    fn decompose_single_digit() {
        let (d1, d2) = decompose_digits(JerseyLabel::number(2).unwrap());
        assert_eq!(d1, DigitClass::Absent);
        assert_eq!(d2, DigitClass::Digit(2));
    }

    #[test]
    fn compose_cases() {
        assert_eq!(
            compose_digits(DigitClass::Digit(7), DigitClass::Digit(7)),
            JerseyLabel::number(77).unwrap()
        );
        assert_eq!(
            compose_digits(DigitClass::Absent, DigitClass::Absent),
            JerseyLabel::NULL
        );
        // The unrepresentable (digit, Absent) pair collapses to null.
        assert_eq!(
            compose_digits(DigitClass::Digit(3), DigitClass::Absent),
            JerseyLabel::NULL
        );
    }

    #[test]
    fn roundtrip_all_labels() {
        for label in JerseyLabel::all() {
            let (d1, d2) = decompose_digits(label);
            assert_eq!(compose_digits(d1, d2), label, "roundtrip failed for {label}");
        }
    }

    #[test]
    fn encode_null() {
        let classes = full_class_set();
        let t = encode_targets(JerseyLabel::NULL, &classes).unwrap();
        assert_eq!(t.holistic_idx, 0);
        assert_eq!(t.y[0], 1.0);
        assert_eq!(t.y.iter().sum::<f64>(), 1.0);
        assert_eq!(t.digit1_idx, 10);
        assert_eq!(t.digit2_idx, 10);
        assert_eq!(t.y1[10], 1.0);
        assert_eq!(t.y2[10], 1.0);
    }

    #[test]
    fn encode_72() {
        let classes = full_class_set();
        let t = encode_targets(JerseyLabel::number(72).unwrap(), &classes).unwrap();
        assert_eq!(t.y.iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(t.y1[7], 1.0);
        assert_eq!(t.y2[2], 1.0);
        assert_eq!(t.y1.iter().sum::<f64>(), 1.0);
        assert_eq!(t.y2.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn encode_decode_roundtrip_full_set() {
        let classes = full_class_set();
        for label in JerseyLabel::all() {
            let t = encode_targets(label, &classes).unwrap();
            assert_eq!(decode_targets(&t, &classes).unwrap(), label);
        }
    }

    #[test]
    fn encode_unknown_class_is_error() {
        let classes = ClassSet::from_number_range(10, 20).unwrap();
        let err = encode_targets(JerseyLabel::number(99).unwrap(), &classes).unwrap_err();
        assert_eq!(err, CodecError::UnknownClass("99".into()));
    }

    #[test]
    fn holistic_index_contract() {
        let classes = full_class_set();
        assert_eq!(holistic_index(JerseyLabel::NULL, &classes).unwrap(), 0);
        assert_eq!(
            holistic_index(classes.label_at(1).unwrap(), &classes).unwrap(),
            1
        );
        for (i, &label) in classes.labels().iter().enumerate() {
            assert_eq!(holistic_index(label, &classes).unwrap(), i);
            assert_eq!(classes.label_at(i).unwrap(), label);
        }
    }

    #[test]
    fn distinct_labels_distinct_digit_pairs() {
        // No two labels share a digit decomposition; the collapse pair
        // (digit, Absent) never arises from decompose_digits.
        let mut seen = std::collections::HashMap::new();
        for label in JerseyLabel::all() {
            let pair = decompose_digits(label);
            assert!(
                !matches!(pair, (DigitClass::Digit(_), DigitClass::Absent)),
                "collapse pair arose from {label}"
            );
            if let Some(prev) = seen.insert((pair.0.index(), pair.1.index()), label) {
                panic!("labels {prev} and {label} share digit pair {pair:?}");
            }
        }
    }

    #[test]
    fn class_set_rejects_bad_input() {
        assert!(ClassSet::new(vec![JerseyLabel::NULL]).is_err());
        assert!(ClassSet::new(vec![
            JerseyLabel::number(1).unwrap(),
            JerseyLabel::NULL
        ])
        .is_err());
        assert!(ClassSet::new(vec![
            JerseyLabel::NULL,
            JerseyLabel::number(7).unwrap(),
            JerseyLabel::number(7).unwrap()
        ])
        .is_err());
        assert!(JerseyLabel::number(100).is_err());
    }

    #[test]
    fn class_set_line_roundtrip() {
        let classes = ClassSet::from_number_range(1, 20).unwrap();
        let text = classes.to_lines();
        assert!(text.starts_with("null\n1\n"));
        let back = ClassSet::from_lines(&text).unwrap();
        assert_eq!(back, classes);

        let tokens = classes.to_token_list();
        assert_eq!(ClassSet::from_token_list(&tokens).unwrap(), classes);
    }
}
