//! Synthetic multi-task seq2seq suite.
//!
//! Six tasks share one vocabulary: three transductions (copy, reverse,
//! sort) and three classifications whose targets are a single digit token
//! (`0`, `1` or `2`) followed by `</s>`, so all classification tasks emit
//! the same label tokens. Parity and mod-sum both count vowels, so they
//! share a skill. Every task also has an out-of-domain variant with
//! longer inputs that include symbols never seen in training.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// First of the three label tokens `0`, `1`, `2`.
pub const DIGIT0: usize = 3;
pub const NUM_LABELS: usize = 3;
/// First task-prefix token.
pub const PREFIX0: usize = 6;
pub const NUM_TASKS: usize = 6;
/// First symbol token (`a`).
pub const SYMBOL0: usize = 12;
pub const NUM_SYMBOLS: usize = 26;
/// Symbols `a`..`r` appear in training; `s`..`z` only out of domain.
pub const IN_DOMAIN_SYMBOLS: usize = 18;
pub const VOCAB_SIZE: usize = SYMBOL0 + NUM_SYMBOLS;

const TASK_NAMES: [&str; NUM_TASKS] = ["copy", "reverse", "sort", "parity", "max_class", "mod_sum"];

/// Printable form of a token id.
pub fn token_str(id: usize) -> String {
    match id {
        PAD => "<pad>".into(),
        BOS => "<s>".into(),
        EOS => "</s>".into(),
        x if (DIGIT0..DIGIT0 + NUM_LABELS).contains(&x) => (x - DIGIT0).to_string(),
        x if (PREFIX0..PREFIX0 + NUM_TASKS).contains(&x) => format!("{}:", TASK_NAMES[x - PREFIX0]),
        x if (SYMBOL0..VOCAB_SIZE).contains(&x) => ((b'a' + (x - SYMBOL0) as u8) as char).to_string(),
        x => format!("<unk{x}>"),
    }
}

pub fn parse_token(s: &str) -> Result<usize> {
    (0..VOCAB_SIZE)
        .find(|&id| token_str(id) == s)
        .ok_or_else(|| Error::Parse(format!("unknown token `{s}`")))
}

pub fn tokens_to_string(ids: &[usize]) -> String {
    ids.iter().map(|&t| token_str(t)).collect::<Vec<_>>().join(" ")
}

pub fn parse_tokens(s: &str) -> Result<Vec<usize>> {
    s.split_whitespace().map(parse_token).collect()
}

pub fn symbol(i: usize) -> usize {
    SYMBOL0 + i
}

fn symbol_index(tok: usize) -> usize {
    tok - SYMBOL0
}

fn is_vowel(tok: usize) -> bool {
    matches!(token_str(tok).as_str(), "a" | "e" | "i" | "o" | "u" | "y")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Transduction,
}

/// Whether inputs start with a token naming their task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PrefixPolicy {
    #[default]
    Named,
    Unnamed,
}

/// Which labelling rule a task applies to its symbol sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    Copy,
    Reverse,
    Sort,
    /// Number of vowels, mod 2.
    Parity,
    /// Index of the largest symbol, mod 3.
    MaxClass,
    /// Number of vowels, mod 3.
    ModSum,
}

impl Rule {
    pub fn kind(self) -> TaskKind {
        match self {
            Rule::Copy | Rule::Reverse | Rule::Sort => TaskKind::Transduction,
            _ => TaskKind::Classification,
        }
    }

    /// Label class for classification rules.
    pub fn label(self, symbols: &[usize]) -> Option<usize> {
        let idx = symbols.iter().map(|&t| symbol_index(t));
        match self {
            Rule::Parity => Some(symbols.iter().filter(|&&t| is_vowel(t)).count() % 2),
            Rule::MaxClass => idx.max().map(|m| m % 3),
            Rule::ModSum => Some(symbols.iter().filter(|&&t| is_vowel(t)).count() % 3),
            _ => None,
        }
    }

    /// Target tokens (ending with `</s>`).
    pub fn target(self, symbols: &[usize]) -> Vec<usize> {
        let mut t = match self {
            Rule::Copy => symbols.to_vec(),
            Rule::Reverse => symbols.iter().rev().copied().collect(),
            Rule::Sort => {
                let mut s = symbols.to_vec();
                s.sort_unstable();
                s
            }
            _ => vec![DIGIT0 + self.label(symbols).unwrap()],
        };
        t.push(EOS);
        t
    }
}

/// Length range and symbol pool of a generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Distribution {
    pub min_len: usize,
    pub max_len: usize,
    /// Symbols are drawn from `0..symbols`.
    pub symbols: usize,
    /// Require at least one symbol from `IN_DOMAIN_SYMBOLS..symbols`.
    pub force_unseen: bool,
}

impl Distribution {
    pub const IN_DOMAIN: Distribution = Distribution {
        min_len: 3,
        max_len: 6,
        symbols: IN_DOMAIN_SYMBOLS,
        force_unseen: false,
    };

    /// Inputs up to 50% longer, always containing an unseen symbol.
    pub const OUT_OF_DOMAIN: Distribution = Distribution {
        min_len: 7,
        max_len: 9,
        symbols: NUM_SYMBOLS,
        force_unseen: true,
    };

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        let len = rng.gen_range(self.min_len..=self.max_len);
        let mut s: Vec<usize> = (0..len).map(|_| symbol(rng.gen_range(0..self.symbols))).collect();
        if self.force_unseen && !s.iter().any(|&t| symbol_index(t) >= IN_DOMAIN_SYMBOLS) {
            let pos = rng.gen_range(0..len);
            s[pos] = symbol(rng.gen_range(IN_DOMAIN_SYMBOLS..self.symbols));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub id: usize,
    pub rule: Rule,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub ood_size: usize,
    pub distribution: Distribution,
    pub ood_variant: Option<Distribution>,
}

impl TaskSpec {
    pub fn kind(&self) -> TaskKind {
        self.rule.kind()
    }

    pub fn metric_name(&self) -> &'static str {
        match self.kind() {
            TaskKind::Classification => "accuracy",
            TaskKind::Transduction => "exact_match",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    pub task: usize,
    pub label: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
    Ood,
}

impl Split {
    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
            Split::Ood => "ood",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Dev => 2,
            Split::Test => 3,
            Split::Ood => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
    pub ood: Vec<Example>,
}

impl TaskData {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
            Split::Ood => &self.ood,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSuite {
    pub seed: u64,
    pub prefix_policy: PrefixPolicy,
    pub tasks: Vec<TaskData>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOptions {
    pub prefix_policy: PrefixPolicy,
    /// Train-split sizes, one per task in canonical order.
    pub train_sizes: [usize; NUM_TASKS],
    pub dev_size: usize,
    pub test_size: usize,
    pub ood_size: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            prefix_policy: PrefixPolicy::Named,
            train_sizes: [1500, 1500, 1000, 2000, 1000, 1500],
            dev_size: 100,
            test_size: 200,
            ood_size: 200,
        }
    }
}

fn task_specs(opts: &SuiteOptions) -> Vec<TaskSpec> {
    let rules = [
        Rule::Copy,
        Rule::Reverse,
        Rule::Sort,
        Rule::Parity,
        Rule::MaxClass,
        Rule::ModSum,
    ];
    rules
        .iter()
        .enumerate()
        .map(|(id, &rule)| TaskSpec {
            name: TASK_NAMES[id].to_string(),
            id,
            rule,
            train_size: opts.train_sizes[id],
            dev_size: opts.dev_size,
            test_size: opts.test_size,
            ood_size: opts.ood_size,
            distribution: Distribution::IN_DOMAIN,
            ood_variant: Some(Distribution::OUT_OF_DOMAIN),
        })
        .collect()
}

fn make_example(spec: &TaskSpec, symbols: Vec<usize>, policy: PrefixPolicy) -> Example {
    let target = spec.rule.target(&symbols);
    let label = spec.rule.label(&symbols);
    let mut input = Vec::with_capacity(symbols.len() + 1);
    if policy == PrefixPolicy::Named {
        input.push(PREFIX0 + spec.id);
    }
    input.extend(symbols);
    Example {
        input,
        target,
        task: spec.id,
        label,
    }
}

fn split_rng(seed: u64, task: usize, split: Split) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split.stream() * 1000 + task as u64);
    rng
}

fn generate(spec: &TaskSpec, seed: u64, split: Split, size: usize, policy: PrefixPolicy, exclude: &HashSet<Vec<usize>>) -> Vec<Example> {
    let dist = match split {
        Split::Ood => match spec.ood_variant {
            Some(d) => d,
            None => return Vec::new(),
        },
        _ => spec.distribution,
    };
    let mut rng = split_rng(seed, spec.id, split);
    let mut out = Vec::with_capacity(size);
    let mut attempts = 0usize;
    while out.len() < size {
        attempts += 1;
        let symbols = dist.sample(&mut rng);
        if exclude.contains(&symbols) && attempts < size * 100 {
            continue;
        }
        out.push(make_example(spec, symbols, policy));
    }
    out
}

/// Builds the six-task suite with default sizes and named prefixes.
pub fn build_suite(seed: u64) -> TaskSuite {
    build_suite_with(seed, &SuiteOptions::default())
}

/// Builds the suite. Splits come from disjoint random streams, and dev and
/// test inputs never repeat a training input.
pub fn build_suite_with(seed: u64, opts: &SuiteOptions) -> TaskSuite {
    let tasks = task_specs(opts)
        .into_iter()
        .map(|spec| {
            let none = HashSet::new();
            let train = generate(&spec, seed, Split::Train, spec.train_size, opts.prefix_policy, &none);
            let seen: HashSet<Vec<usize>> = train.iter().map(|e| strip_prefix(&e.input, opts.prefix_policy).to_vec()).collect();
            let dev = generate(&spec, seed, Split::Dev, spec.dev_size, opts.prefix_policy, &seen);
            let test = generate(&spec, seed, Split::Test, spec.test_size, opts.prefix_policy, &seen);
            let ood = generate(&spec, seed, Split::Ood, spec.ood_size, opts.prefix_policy, &seen);
            TaskData {
                spec,
                train,
                dev,
                test,
                ood,
            }
        })
        .collect();
    TaskSuite {
        seed,
        prefix_policy: opts.prefix_policy,
        tasks,
    }
}

fn strip_prefix(input: &[usize], policy: PrefixPolicy) -> &[usize] {
    match policy {
        PrefixPolicy::Named => &input[1..],
        PrefixPolicy::Unnamed => input,
    }
}

impl TaskSuite {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn task(&self, id: usize) -> Result<&TaskData> {
        self.tasks.get(id).ok_or(Error::UnknownTask(id))
    }

    pub fn train_sizes(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.train.len()).collect()
    }

    /// Longest input and target over every split.
    pub fn max_lengths(&self) -> (usize, usize) {
        let all = self.tasks.iter().flat_map(|t| {
            t.train.iter().chain(&t.dev).chain(&t.test).chain(&t.ood)
        });
        all.fold((0, 0), |(i, o), e| (i.max(e.input.len()), o.max(e.target.len())))
    }

    pub fn classification_tasks(&self) -> Vec<usize> {
        self.tasks
            .iter()
            .filter(|t| t.spec.kind() == TaskKind::Classification)
            .map(|t| t.spec.id)
            .collect()
    }

    /// Dumps one split as `task<TAB>input<TAB>target` lines.
    pub fn dump_split(&self, split: Split) -> String {
        let mut s = String::new();
        for t in &self.tasks {
            for e in t.split(split) {
                let _ = writeln!(
                    s,
                    "{}\t{}\t{}",
                    t.spec.name,
                    tokens_to_string(&e.input),
                    tokens_to_string(&e.target)
                );
            }
        }
        s
    }

    pub fn write_split(&self, split: Split, path: &Path) -> Result<()> {
        std::fs::write(path, self.dump_split(split)).map_err(|e| Error::io(path, e))
    }
}

/// Parses a dump produced by [`TaskSuite::dump_split`].
pub fn load_examples(text: &str) -> Result<Vec<Example>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let mut parts = line.split('\t');
            let (Some(task), Some(input), Some(target), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(Error::Parse(format!("line {}: expected three tab-separated fields", n + 1)));
            };
            let id = TASK_NAMES
                .iter()
                .position(|&t| t == task)
                .ok_or_else(|| Error::Parse(format!("line {}: unknown task `{task}`", n + 1)))?;
            let input = parse_tokens(input)?;
            let target = parse_tokens(target)?;
            let label = match target.as_slice() {
                &[d, EOS] if (DIGIT0..DIGIT0 + NUM_LABELS).contains(&d) => Some(d - DIGIT0),
                _ => None,
            };
            Ok(Example {
                input,
                target,
                task: id,
                label,
            })
        })
        .collect()
}

/// Classification accuracy or exact-sequence match rate. Sequences are
/// compared up to (excluding) their first `</s>`.
pub fn metric(kind: TaskKind, predictions: &[Vec<usize>], targets: &[Vec<usize>]) -> Result<f32> {
    if predictions.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Ok(0.0);
    }
    let content = |s: &[usize]| -> Vec<usize> { s.iter().copied().take_while(|&t| t != EOS).collect() };
    let correct = predictions
        .iter()
        .zip(targets)
        .filter(|(p, t)| match kind {
            TaskKind::Transduction => content(p) == content(t),
            TaskKind::Classification => content(p).first() == content(t).first() && content(p).len() == 1,
        })
        .count();
    Ok(correct as f32 / targets.len() as f32)
}
