//! Dataset ingestion, tokenization, feature standardization, stratified
//! splitting and the synthetic interaction task.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// One raw labelled example: free text, auxiliary feature vector and a binary label.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub text: String,
    pub aux: Vec<f64>,
    pub label: u8,
}

/// A list of examples sharing the same auxiliary width.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub d_struct: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(d_struct: usize, examples: Vec<Example>) -> Result<Self> {
        for (i, ex) in examples.iter().enumerate() {
            if ex.aux.len() != d_struct {
                return Err(Error::Data(format!(
                    "example {i}: expected {d_struct} aux values, got {}",
                    ex.aux.len()
                )));
            }
            if ex.aux.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("example {i}: non-finite aux value")));
            }
            if ex.label > 1 {
                return Err(Error::Data(format!(
                    "example {i}: label {} not in {{0,1}}",
                    ex.label
                )));
            }
        }
        Ok(Dataset { d_struct, examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            d_struct: self.d_struct,
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
        }
    }

    /// Writes the `text,aux_0,...,aux_{d-1},label` format. Text is always
    /// double-quoted; aux values use shortest round-trip formatting.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = vec!["text".to_string()];
        header.extend((0..self.d_struct).map(|j| format!("aux_{j}")));
        header.push("label".into());
        writeln!(w, "{}", header.join(","))?;
        for ex in &self.examples {
            write!(w, "\"{}\"", ex.text.replace('"', "\"\""))?;
            for v in &ex.aux {
                write!(w, ",{v}")?;
            }
            writeln!(w, ",{}", ex.label)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let headers = reader.headers()?.clone();
        let n = headers.len();
        if n < 2 || &headers[0] != "text" || &headers[n - 1] != "label" {
            return Err(Error::Data("header must be text,aux_0,...,label".into()));
        }
        for (j, h) in headers.iter().skip(1).take(n - 2).enumerate() {
            if h != format!("aux_{j}") {
                return Err(Error::Data(format!(
                    "column {}: expected aux_{j}, got {h}",
                    j + 1
                )));
            }
        }
        let d_struct = n - 2;
        let mut examples = Vec::new();
        for (row, rec) in reader.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| Error::Data(format!("row {}: {what}", row + 1));
            let aux = (1..=d_struct)
                .map(|j| {
                    rec[j]
                        .trim()
                        .parse::<f64>()
                        .map_err(|_| bad(&format!("bad aux_{}", j - 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            let label = match rec[n - 1].trim() {
                "0" => 0,
                "1" => 1,
                other => return Err(bad(&format!("label {other:?} not in {{0,1}}"))),
            };
            examples.push(Example {
                text: rec[0].to_string(),
                aux,
                label,
            });
        }
        Dataset::new(d_struct, examples)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

/// Token-string to id map with `PAD=0`, `UNK=1`, `CLS=2`, `SEP=3` reserved.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: std::collections::HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Data(
                "vocabulary must start with [PAD], [UNK], [CLS], [SEP]".into(),
            ));
        }
        Ok(Self::from_tokens(tokens))
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Builds a vocabulary from the given words in order, after the reserved ids.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        for w in words {
            let w = w.into();
            if seen.insert(w.clone()) {
                tokens.push(w);
            }
        }
        Self::from_tokens(tokens)
    }

    /// Collects every distinct lowercased whitespace token, sorted.
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(split_words).collect();
        Self::from_words(words)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Token ids plus attention mask, both exactly `max_len` long.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenized {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

/// Lowercase whitespace tokenization into `[CLS] tokens.. [SEP] [PAD]..`.
/// Over-long texts keep their first `max_len - 2` tokens.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<Tokenized> {
    if max_len < 2 {
        return Err(Error::invalid("max_len", "must be at least 2"));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(split_words(text).take(max_len - 2).map(|w| vocab.id(&w)));
    ids.push(SEP);
    let used = ids.len();
    ids.resize(max_len, PAD);
    let mask = (0..max_len).map(|i| i < used).collect();
    Ok(Tokenized { ids, mask })
}

/// Per-column mean and population standard deviation of the auxiliary features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardizerStats {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl StandardizerStats {
    /// Fits on training rows. A column whose values are all equal gets its
    /// value as mean and a standard deviation of 1.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("fit_standardizer"));
        }
        if rows.len() < 2 {
            return Err(Error::invalid(
                "train_aux",
                "need at least 2 rows to fit a standardizer",
            ));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Data("aux rows have differing widths".into()));
        }
        let n = rows.len() as f64;
        let mut means = Vec::with_capacity(d);
        let mut stds = Vec::with_capacity(d);
        for j in 0..d {
            let first = rows[0][j];
            if rows.iter().all(|r| r[j] == first) {
                means.push(first);
                stds.push(1.0);
                continue;
            }
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
            means.push(mean);
            stds.push(var.sqrt());
        }
        Ok(StandardizerStats { means, stds })
    }

    pub fn apply(&self, aux: &[f64]) -> Result<Vec<f64>> {
        if aux.len() != self.means.len() {
            return Err(Error::invalid(
                "aux",
                format!("expected {} features, got {}", self.means.len(), aux.len()),
            ));
        }
        Ok(aux
            .iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(x, (m, s))| (x - m) / s)
            .collect())
    }

    pub fn width(&self) -> usize {
        self.means.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::invalid(
                "split.test_fraction",
                "must lie strictly between 0 and 1",
            ));
        }
        Ok(())
    }
}

/// Stratified shuffle split over binary labels, returning `(train, test)` indices.
///
/// Each class contributes `round(count * test_fraction)` examples to the test
/// side, clamped so that both sides keep at least one example of every class.
pub fn stratified_split(labels: &[u8], config: &SplitConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    let classes: BTreeSet<u8> = labels.iter().copied().collect();
    for class in classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < 2 {
            return Err(Error::Data(format!(
                "class {class} has {} example(s); stratified split needs at least 2",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let n_test = ((members.len() as f64 * config.test_fraction).round() as usize)
            .clamp(1, members.len() - 1);
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    if labels.is_empty() {
        return Err(Error::Empty("stratified_split"));
    }
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);
    Ok((train, test))
}

/// Configuration of the synthetic text-by-feature interaction task.
///
/// Each example carries a hidden text bit `t`, expressed as a single marker
/// token (`alpha` for 1, `omega` for 0) among random filler words, and a
/// feature bit `s`, expressed as the sign of `aux_0`. The clean label is
/// `t XOR s`, where `s = 1` occurs with probability `interaction`. Clean
/// labels are drawn in exact balance and then flipped with probability
/// `noise`. The remaining aux columns are standard normal noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTask {
    pub n_examples: usize,
    /// Number of distinct filler words.
    pub vocab_size: usize,
    /// Maximum number of content tokens per text.
    pub seq_len: usize,
    pub d_struct: usize,
    pub interaction: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        SyntheticTask {
            n_examples: 2000,
            vocab_size: 40,
            seq_len: 12,
            d_struct: 4,
            interaction: 0.3,
            noise: 0.0,
            seed: 0,
        }
    }
}

/// Closed-form Bayes-optimal accuracies of a [`SyntheticTask`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BayesAccuracy {
    /// Using both the text and the auxiliary features: `1 - noise`.
    pub joint: f64,
    /// Using the text alone: `max(a, 1-a)(1-noise) + min(a, 1-a) noise`.
    pub text_only: f64,
    /// Using the auxiliary features alone: 0.5, since `s` is independent of the clean label.
    pub aux_only: f64,
}

pub const MARKER_ON: &str = "alpha";
pub const MARKER_OFF: &str = "omega";

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        if self.n_examples < 4 {
            return Err(Error::invalid("n_examples", "must be at least 4"));
        }
        if self.vocab_size == 0 {
            return Err(Error::invalid("vocab_size", "must be positive"));
        }
        if self.seq_len == 0 {
            return Err(Error::invalid("seq_len", "must be positive"));
        }
        if self.d_struct == 0 {
            return Err(Error::invalid("d_struct", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.interaction) {
            return Err(Error::invalid("interaction", "must lie in [0, 1]"));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::invalid("noise", "must lie in [0, 0.5]"));
        }
        Ok(())
    }

    pub fn bayes_accuracy(&self) -> BayesAccuracy {
        let a = self.interaction;
        let eta = self.noise;
        let (hi, lo) = (a.max(1.0 - a), a.min(1.0 - a));
        BayesAccuracy {
            joint: 1.0 - eta,
            text_only: hi * (1.0 - eta) + lo * eta,
            aux_only: 0.5,
        }
    }

    /// The vocabulary covering every word the generator can emit.
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from_words(
            [MARKER_ON.to_string(), MARKER_OFF.to_string()]
                .into_iter()
                .chain((0..self.vocab_size).map(|k| format!("w{k}"))),
        )
    }

    pub fn generate(&self) -> Result<Dataset> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let n = self.n_examples;
        let mut clean: Vec<u8> = (0..n).map(|i| u8::from(i >= n / 2)).collect();
        clean.shuffle(&mut rng);
        let min_len = (self.seq_len / 2).max(1);
        let mut examples = Vec::with_capacity(n);
        for &y_clean in &clean {
            let s = rng.random::<f64>() < self.interaction;
            let t = (y_clean == 1) ^ s;

            let len = rng.random_range(min_len..=self.seq_len);
            let marker_at = rng.random_range(0..len);
            let words: Vec<String> = (0..len)
                .map(|i| {
                    if i == marker_at {
                        (if t { MARKER_ON } else { MARKER_OFF }).to_string()
                    } else {
                        format!("w{}", rng.random_range(0..self.vocab_size))
                    }
                })
                .collect();

            let magnitude = rng.random_range(0.5..1.5);
            let mut aux = Vec::with_capacity(self.d_struct);
            aux.push(if s { magnitude } else { -magnitude });
            for _ in 1..self.d_struct {
                aux.push(StandardNormal.sample(&mut rng));
            }

            let flip = rng.random::<f64>() < self.noise;
            examples.push(Example {
                text: words.join(" "),
                aux,
                label: y_clean ^ u8::from(flip),
            });
        }
        Dataset::new(self.d_struct, examples)
    }
}

/// Tokenized and standardized example ready for batching.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub aux: Vec<f64>,
    pub label: usize,
}

pub fn encode(
    dataset: &Dataset,
    vocab: &Vocabulary,
    stats: &StandardizerStats,
    max_len: usize,
) -> Result<Vec<Encoded>> {
    if stats.width() != dataset.d_struct {
        return Err(Error::invalid(
            "d_struct",
            format!(
                "standardizer expects {} aux features but dataset has {}",
                stats.width(),
                dataset.d_struct
            ),
        ));
    }
    dataset
        .examples
        .iter()
        .map(|ex| {
            let tok = tokenize(&ex.text, vocab, max_len)?;
            Ok(Encoded {
                ids: tok.ids,
                mask: tok.mask,
                aux: stats.apply(&ex.aux)?,
                label: ex.label as usize,
            })
        })
        .collect()
}
