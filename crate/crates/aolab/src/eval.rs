//! Word-level generation quality: coherence (valid long words) and diversity
//! (unique words), swept over sampling temperature to trace a frontier, plus
//! the dominance comparison between two frontiers.
//!
//! Both metrics are bag-of-words quantities over space-delimited letter runs.
//! Coherence counts words of four or more characters that appear in an
//! externally supplied wordlist; generations with no qualifying word are
//! flagged undefined rather than scored, and sweep averages skip them.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelMode, Weights};
use crate::rope::RotaryTable;
use crate::sampling::{sample_drope, sample_mdlm, SampleConfig};

/// Deduplicated lowercase dictionary, one word per line on disk.
#[derive(Debug, Clone)]
pub struct WordList {
    words: HashSet<String>,
}

impl WordList {
    pub fn from_lines(text: &str) -> Result<Self> {
        let mut words = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let w = line.trim();
            if w.is_empty() {
                continue;
            }
            if !w.bytes().all(|b| b.is_ascii_lowercase()) {
                return Err(Error::invalid(format!(
                    "wordlist line {}: '{}' is not lowercase a-z",
                    i + 1,
                    w
                )));
            }
            words.insert(w.to_string());
        }
        Ok(WordList { words })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_lines(&fs::read_to_string(path)?)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Split text over {a-z, space} into maximal letter runs.
pub fn tokenize_words(text: &str) -> Result<Vec<&str>> {
    for b in text.bytes() {
        if !(b.is_ascii_lowercase() || b == b' ') {
            return Err(Error::invalid(format!(
                "character '{}' outside the a-z/space alphabet",
                b as char
            )));
        }
    }
    Ok(text.split(' ').filter(|w| !w.is_empty()).collect())
}

/// Which words enter the coherence denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoherenceDenominator {
    /// Words with ≥ 4 characters only (isolates long-word correctness).
    #[default]
    LongWordsOnly,
    /// Every word, still crediting only valid long words.
    AllWords,
}

impl CoherenceDenominator {
    pub fn tag(self) -> &'static str {
        match self {
            CoherenceDenominator::LongWordsOnly => "long_words",
            CoherenceDenominator::AllWords => "all_words",
        }
    }
}

/// Fraction of qualifying words found in the wordlist; `None` when the
/// denominator is empty (no word qualifies).
pub fn coherence(
    text: &str,
    wordlist: &WordList,
    denominator: CoherenceDenominator,
) -> Result<Option<f64>> {
    let words = tokenize_words(text)?;
    let valid_long = words
        .iter()
        .filter(|w| w.len() >= 4 && wordlist.contains(w))
        .count();
    let denom = match denominator {
        CoherenceDenominator::LongWordsOnly => words.iter().filter(|w| w.len() >= 4).count(),
        CoherenceDenominator::AllWords => words.len(),
    };
    if denom == 0 {
        return Ok(None);
    }
    Ok(Some(valid_long as f64 / denom as f64))
}

/// Unique words over total words; `None` on zero words.
pub fn diversity(text: &str) -> Result<Option<f64>> {
    let words = tokenize_words(text)?;
    if words.is_empty() {
        return Ok(None);
    }
    let unique: HashSet<&str> = words.iter().copied().collect();
    Ok(Some(unique.len() as f64 / words.len() as f64))
}

/// One swept temperature: averaged metrics plus everything needed to rerun it.
#[derive(Debug, Clone, PartialEq)]
pub struct FrontierPoint {
    pub method: &'static str,
    pub seq_len: usize,
    pub temperature: f64,
    pub coherence: f64,
    pub diversity: f64,
    pub n_samples: usize,
    pub sampler_steps: usize,
    pub seed: u64,
    pub denominator: CoherenceDenominator,
}

pub const FRONTIER_HEADER: &str =
    "method,seq_len,temperature,coherence,diversity,n_samples,sampler_steps,seed";

impl FrontierPoint {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{},{},{}",
            self.method,
            self.seq_len,
            self.temperature,
            self.coherence,
            self.diversity,
            self.n_samples,
            self.sampler_steps,
            self.seed
        )
    }
}

/// Render a frontier as the documented CSV, header included.
pub fn frontier_csv(points: &[FrontierPoint]) -> String {
    let mut out = String::from(FRONTIER_HEADER);
    for p in points {
        out.push('\n');
        out.push_str(&p.csv());
    }
    out.push('\n');
    out
}

/// Ten temperatures geometrically spaced over [0.5, 2.0].
pub fn default_temperature_grid() -> Vec<f64> {
    let (lo, hi, k) = (0.5f64, 2.0f64, 10usize);
    (0..k)
        .map(|i| lo * (hi / lo).powf(i as f64 / (k - 1) as f64))
        .collect()
}

/// Sweep parameters; `mdlm_steps` falls back to the sampler default
/// (seq_len/4) when unset and is ignored by the causal sampler.
#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub seq_len: usize,
    pub temperatures: Vec<f64>,
    pub n_samples: usize,
    pub seed: u64,
    pub mdlm_steps: Option<usize>,
    pub denominator: CoherenceDenominator,
}

impl SweepConfig {
    pub fn new(seq_len: usize, n_samples: usize, seed: u64) -> Self {
        SweepConfig {
            seq_len,
            temperatures: default_temperature_grid(),
            n_samples,
            seed,
            mdlm_steps: None,
            denominator: CoherenceDenominator::default(),
        }
    }
}

/// Generate and score `n_samples` sequences per temperature. Deterministic in
/// (weights, sweep config): sample index `t·n_samples + s` keys every stream.
pub fn frontier_sweep(
    weights: &Weights,
    config: &ModelConfig,
    table: &RotaryTable,
    sweep: &SweepConfig,
    wordlist: &WordList,
) -> Result<Vec<FrontierPoint>> {
    if sweep.temperatures.is_empty() {
        return Err(Error::invalid("temperature grid is empty"));
    }
    if sweep.n_samples == 0 {
        return Err(Error::invalid("need at least one sample per temperature"));
    }
    let method = match config.mode {
        ModelMode::DropeDecoder => "drope",
        ModelMode::MdlmEncoder => "mdlm",
    };
    let mut points = Vec::with_capacity(sweep.temperatures.len());
    for (ti, &t) in sweep.temperatures.iter().enumerate() {
        let mut sc = SampleConfig::new(sweep.seq_len, t, sweep.seed)?;
        if config.mode == ModelMode::MdlmEncoder {
            if let Some(steps) = sweep.mdlm_steps {
                sc = sc.with_steps(steps)?;
            }
        }
        let sampler_steps = match config.mode {
            ModelMode::DropeDecoder => sweep.seq_len,
            ModelMode::MdlmEncoder => sc.n_steps(),
        };
        let mut coh_sum = 0.0;
        let mut coh_n = 0usize;
        let mut div_sum = 0.0;
        let mut div_n = 0usize;
        for s in 0..sweep.n_samples {
            let idx = (ti * sweep.n_samples + s) as u64;
            let tokens = match config.mode {
                ModelMode::DropeDecoder => sample_drope(weights, config, table, &sc, idx)?,
                ModelMode::MdlmEncoder => sample_mdlm(weights, config, table, &sc, idx)?,
            };
            let text = crate::data::decode_tokens(&tokens);
            if let Some(c) = coherence(&text, wordlist, sweep.denominator)? {
                coh_sum += c;
                coh_n += 1;
            }
            if let Some(d) = diversity(&text)? {
                div_sum += d;
                div_n += 1;
            }
        }
        if coh_n == 0 || div_n == 0 {
            return Err(Error::invalid(format!(
                "no generation at T={} produced a defined metric (coherence {}, diversity {})",
                t, coh_n, div_n
            )));
        }
        points.push(FrontierPoint {
            method,
            seq_len: sweep.seq_len,
            temperature: t,
            coherence: coh_sum / coh_n as f64,
            diversity: div_sum / div_n as f64,
            n_samples: sweep.n_samples,
            sampler_steps,
            seed: sweep.seed,
            denominator: sweep.denominator,
        });
    }
    Ok(points)
}

/// Signed coherence gaps of frontier `a` over frontier `b` at matched
/// diversity values.
#[derive(Debug, Clone, PartialEq)]
pub enum Dominance {
    /// The diversity ranges do not overlap; no comparison is possible.
    Incomparable,
    Compared(DominanceSummary),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DominanceSummary {
    /// Mean of coherence(a) − coherence(b) over the shared grid.
    pub mean_gap: f64,
    /// Most positive gap (a above b).
    pub max_gap: f64,
    /// Most negative gap (a below b).
    pub min_gap: f64,
    /// Shared diversity grid the gaps were measured on.
    pub grid: Vec<f64>,
}

/// Piecewise-linear coherence at diversity `x` on a frontier sorted by
/// diversity (duplicate diversities averaged).
fn interpolate(curve: &[(f64, f64)], x: f64) -> f64 {
    match curve.iter().position(|&(d, _)| d >= x) {
        Some(0) => curve[0].1,
        Some(i) => {
            let (d0, c0) = curve[i - 1];
            let (d1, c1) = curve[i];
            if d1 == d0 {
                c1
            } else {
                c0 + (c1 - c0) * (x - d0) / (d1 - d0)
            }
        }
        None => curve.last().expect("nonempty curve").1,
    }
}

fn sorted_curve(points: &[FrontierPoint]) -> Vec<(f64, f64)> {
    let mut pairs: Vec<(f64, f64)> = points.iter().map(|p| (p.diversity, p.coherence)).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // merge exact duplicates so interpolation stays single-valued
    let mut merged: Vec<(f64, f64, usize)> = Vec::new();
    for (d, c) in pairs {
        match merged.last_mut() {
            Some((d0, c0, k)) if *d0 == d => {
                *c0 += c;
                *k += 1;
            }
            _ => merged.push((d, c, 1)),
        }
    }
    merged.into_iter().map(|(d, c, k)| (d, c / k as f64)).collect()
}

/// Compare two frontiers on a shared diversity grid across their overlap.
pub fn frontier_dominance(a: &[FrontierPoint], b: &[FrontierPoint]) -> Result<Dominance> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("cannot compare an empty frontier"));
    }
    let ca = sorted_curve(a);
    let cb = sorted_curve(b);
    let lo = ca[0].0.max(cb[0].0);
    let hi = ca[ca.len() - 1].0.min(cb[cb.len() - 1].0);
    if lo > hi {
        return Ok(Dominance::Incomparable);
    }
    let grid: Vec<f64> = if hi == lo {
        vec![lo]
    } else {
        let k = 65;
        (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect()
    };
    let gaps: Vec<f64> = grid
        .iter()
        .map(|&x| interpolate(&ca, x) - interpolate(&cb, x))
        .collect();
    let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let max_gap = gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_gap = gaps.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(Dominance::Compared(DominanceSummary {
        mean_gap,
        max_gap,
        min_gap,
        grid,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_list() -> WordList {
        WordList::from_lines("the\ncat\nsat\nquick\nbrown\nfox\njumps\nover\nlazy\ndog\nwith\nword\nlist\nhere").unwrap()
    }

    #[test]
    fn tokenizer_splits_on_spaces_and_drops_empties() {
        assert_eq!(tokenize_words("the cat sat").unwrap(), vec!["the", "cat", "sat"]);
        assert_eq!(
            tokenize_words(" double  spaces ").unwrap(),
            vec!["double", "spaces"]
        );
        assert_eq!(tokenize_words("").unwrap(), Vec::<&str>::new());
        assert!(tokenize_words("Uppercase no").is_err());
        assert!(tokenize_words("digits 123").is_err());
    }

    #[test]
    fn wordlist_validates_and_dedups() {
        let wl = WordList::from_lines("cat\ndog\ncat\n\n dog \n").unwrap();
        assert_eq!(wl.len(), 2);
        assert!(wl.contains("cat") && wl.contains("dog"));
        assert!(!wl.contains("fox"));
        assert!(WordList::from_lines("Bad-Word").is_err());
    }

    #[test]
    fn coherence_counts_valid_long_words() {
        let wl = fixture_list();
        let d = CoherenceDenominator::LongWordsOnly;
        assert_eq!(coherence("the quick brown fox", &wl, d).unwrap(), Some(1.0));
        assert_eq!(coherence("xxxx yyyy", &wl, d).unwrap(), Some(0.0));
        assert_eq!(coherence("quick zzzz", &wl, d).unwrap(), Some(0.5));
        // nothing reaches four characters → undefined, not zero
        assert_eq!(coherence("the cat sat", &wl, d).unwrap(), None);
    }

    #[test]
    fn alternative_denominator_counts_all_words() {
        let wl = fixture_list();
        let got = coherence("the quick brown fox", &wl, CoherenceDenominator::AllWords)
            .unwrap()
            .unwrap();
        // quick and brown are valid long words out of four words total
        assert!((got - 0.5).abs() < 1e-12);
        assert_eq!(
            coherence("", &wl, CoherenceDenominator::AllWords).unwrap(),
            None
        );
    }

    #[test]
    fn diversity_is_unique_over_total() {
        assert_eq!(diversity("a b c").unwrap(), Some(1.0));
        assert_eq!(diversity("a a a a").unwrap(), Some(0.25));
        let d = diversity("a b a").unwrap().unwrap();
        assert!((d - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(diversity("   ").unwrap(), None);
    }

    #[test]
    fn metrics_are_bag_of_words() {
        let wl = fixture_list();
        let d = CoherenceDenominator::LongWordsOnly;
        for (x, y) in [
            ("quick brown zzzz", "zzzz quick brown"),
            ("a b a b b", "b b b a a"),
        ] {
            assert_eq!(coherence(x, &wl, d).unwrap(), coherence(y, &wl, d).unwrap());
            assert_eq!(diversity(x).unwrap(), diversity(y).unwrap());
        }
    }

    #[test]
    fn metrics_stay_in_unit_interval() {
        let wl = fixture_list();
        let texts = [
            "zzzz", "a", " ", "quick quick quick", "the fox with here list word",
        ];
        for t in texts {
            if let Some(c) = coherence(t, &wl, CoherenceDenominator::LongWordsOnly).unwrap() {
                assert!((0.0..=1.0).contains(&c));
            }
            if let Some(d) = diversity(t).unwrap() {
                assert!((0.0..=1.0).contains(&d));
            }
        }
    }

    fn point(diversity: f64, coherence: f64) -> FrontierPoint {
        FrontierPoint {
            method: "drope",
            seq_len: 64,
            temperature: 1.0,
            coherence,
            diversity,
            n_samples: 4,
            sampler_steps: 64,
            seed: 0,
            denominator: CoherenceDenominator::LongWordsOnly,
        }
    }

    #[test]
    fn identical_frontiers_have_zero_gap() {
        let a = vec![point(0.2, 0.8), point(0.5, 0.6), point(0.9, 0.3)];
        match frontier_dominance(&a, &a).unwrap() {
            Dominance::Compared(s) => {
                assert!(s.mean_gap.abs() < 1e-12);
                assert!(s.max_gap.abs() < 1e-12 && s.min_gap.abs() < 1e-12);
            }
            other => panic!("expected comparison, got {:?}", other),
        }
    }

    #[test]
    fn uniform_shift_reports_as_mean_gap() {
        let a = vec![point(0.2, 0.9), point(0.5, 0.7), point(0.9, 0.4)];
        let b: Vec<FrontierPoint> = a
            .iter()
            .map(|p| point(p.diversity, p.coherence - 0.1))
            .collect();
        match frontier_dominance(&a, &b).unwrap() {
            Dominance::Compared(s) => {
                assert!((s.mean_gap - 0.1).abs() < 1e-12);
                assert!((s.max_gap - 0.1).abs() < 1e-12);
                assert!((s.min_gap - 0.1).abs() < 1e-12);
            }
            other => panic!("expected comparison, got {:?}", other),
        }
    }

    #[test]
    fn crossing_curves_report_both_signs() {
        // a falls from 0.9 to 0.1 while b rises from 0.1 to 0.9
        let a = vec![point(0.1, 0.9), point(0.9, 0.1)];
        let b = vec![point(0.1, 0.1), point(0.9, 0.9)];
        match frontier_dominance(&a, &b).unwrap() {
            Dominance::Compared(s) => {
                assert!((s.max_gap - 0.8).abs() < 1e-12);
                assert!((s.min_gap + 0.8).abs() < 1e-12);
                assert!(s.mean_gap.abs() < 1e-9);
            }
            other => panic!("expected comparison, got {:?}", other),
        }
    }

    #[test]
    fn disjoint_ranges_are_incomparable() {
        let a = vec![point(0.1, 0.9), point(0.3, 0.8)];
        let b = vec![point(0.6, 0.5), point(0.9, 0.2)];
        assert_eq!(frontier_dominance(&a, &b).unwrap(), Dominance::Incomparable);
        assert!(frontier_dominance(&a, &[]).is_err());
    }

    #[test]
    fn default_grid_is_geometric_in_bounds() {
        let g = default_temperature_grid();
        assert_eq!(g.len(), 10);
        assert!((g[0] - 0.5).abs() < 1e-12);
        assert!((g[9] - 2.0).abs() < 1e-12);
        let r = g[1] / g[0];
        for w in g.windows(2) {
            assert!((w[1] / w[0] - r).abs() < 1e-9, "not geometric: {:?}", g);
        }
    }

    #[test]
    fn frontier_csv_matches_documented_schema() {
        let p = point(0.25, 0.75);
        let text = frontier_csv(&[p]);
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(FRONTIER_HEADER));
        assert_eq!(
            lines.next(),
            Some("drope,64,1.000000,0.750000,0.250000,4,64,0")
        );
    }
}
