//! Corpus BLEU and the experiment grid.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use crate::error::{NmtError, Result};
use crate::translator::{Decoding, Route, TranslationRequest, Translator};

pub const MAX_ORDER: usize = 4;

/// Corpus-level 4-gram BLEU on whitespace tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct BleuReport {
    /// 0 to 100.
    pub bleu: f64,
    pub precisions: [f64; MAX_ORDER],
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
    pub smoothed: bool,
}

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram precisions pooled over the corpus, with brevity penalty
/// `exp(1 − r/c)` when the hypotheses are shorter than the references. With
/// `smoothing`, orders n ≥ 2 add one to both numerator and denominator.
pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R], smoothing: bool) -> Result<BleuReport> {
    if hypotheses.len() != references.len() {
        return Err(NmtError::Bleu(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(NmtError::Bleu("cannot score an empty corpus".into()));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        let h: Vec<&str> = h.as_ref().split_whitespace().collect();
        let r: Vec<&str> = r.as_ref().split_whitespace().collect();
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            matches[n - 1] += hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        let (m, t) = if smoothing && n >= 1 {
            (matches[n] + 1, totals[n] + 1)
        } else {
            (matches[n], totals[n])
        };
        precisions[n] = if t == 0 { 0.0 } else { m as f64 / t as f64 };
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let bleu = if precisions.contains(&0.0) {
        0.0
    } else {
        let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * brevity_penalty * mean_log.exp()
    };
    Ok(BleuReport {
        bleu,
        precisions,
        matches,
        totals,
        brevity_penalty,
        hyp_len,
        ref_len,
        smoothed: smoothing,
    })
}

/// Translates `sources` along the request and scores against `references`.
pub fn evaluate_direction<S: AsRef<str>, R: AsRef<str>>(
    translator: &Translator<'_>,
    request: &TranslationRequest,
    sources: &[S],
    references: &[R],
) -> Result<BleuReport> {
    if sources.len() != references.len() {
        return Err(NmtError::Bleu(format!(
            "{} sources for {} references",
            sources.len(),
            references.len()
        )));
    }
    let hyps = translator.translate(request, sources)?;
    corpus_bleu(&hyps, references, false)
}

/// What a grid row stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SystemLabel {
    Baseline,
    Joint,
    Added,
    ZeroShot,
    Pivot,
}

impl SystemLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            SystemLabel::Baseline => "baseline",
            SystemLabel::Joint => "joint",
            SystemLabel::Added => "added",
            SystemLabel::ZeroShot => "zero_shot",
            SystemLabel::Pivot => "pivot",
        }
    }
}

impl fmt::Display for SystemLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SystemLabel {
    type Err = NmtError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "baseline" => SystemLabel::Baseline,
            "joint" => SystemLabel::Joint,
            "added" => SystemLabel::Added,
            "zero_shot" | "zero-shot" => SystemLabel::ZeroShot,
            "pivot" => SystemLabel::Pivot,
            other => return Err(NmtError::Config(format!("unknown system label `{other}`"))),
        })
    }
}

/// One configured direction of the grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridDirection {
    pub label: SystemLabel,
    pub src: String,
    pub tgt: String,
    pub route: Route,
}

impl GridDirection {
    pub fn new(label: SystemLabel, src: &str, tgt: &str, via: Option<&str>) -> Result<Self> {
        let route = match (label, via) {
            (SystemLabel::Pivot, Some(v)) => Route::Pivot { via: v.to_string() },
            (SystemLabel::Pivot, None) => {
                return Err(NmtError::Config(format!("pivot direction {src}-{tgt} needs a via language")))
            }
            (SystemLabel::ZeroShot, None) => Route::ZeroShot,
            (_, None) => Route::Direct,
            (_, Some(_)) => {
                return Err(NmtError::Config(format!("only pivot directions take a via language ({label})")))
            }
        };
        Ok(Self {
            label,
            src: src.to_string(),
            tgt: tgt.to_string(),
            route,
        })
    }

    /// Parses grid lines `label src tgt [via]`; `#` starts a comment.
    pub fn parse_list(text: &str) -> Result<Vec<Self>> {
        text.lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split_whitespace().collect();
                if !(3..=4).contains(&f.len()) {
                    return Err(NmtError::Config(format!("grid line `{l}` must be: label src tgt [via]")));
                }
                Self::new(f[0].parse()?, f[1], f[2], f.get(3).copied())
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub direction: GridDirection,
    pub report: BleuReport,
}

/// Pivot vs zero-shot comparison on one language pair.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderingCheck {
    pub src: String,
    pub tgt: String,
    pub pivot: f64,
    pub zero_shot: f64,
}

impl OrderingCheck {
    pub fn holds(&self) -> bool {
        self.pivot >= self.zero_shot
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentGrid {
    pub rows: Vec<GridRow>,
    pub decoding: Decoding,
}

pub const GRID_CSV_HEADER: &str = "route,src,tgt,bleu,p1,p2,p3,p4,bp";

impl ExperimentGrid {
    /// One line per row; the route column carries the system label, with the
    /// intermediate language for pivot rows (`pivot:x`).
    pub fn to_csv(&self) -> String {
        let mut out = format!("{GRID_CSV_HEADER}\n");
        for r in &self.rows {
            let route = match &r.direction.route {
                Route::Pivot { via } => format!("pivot:{via}"),
                _ => r.direction.label.to_string(),
            };
            let p = &r.report.precisions;
            out.push_str(&format!(
                "{route},{},{},{:.2},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
                r.direction.src, r.direction.tgt, r.report.bleu, p[0], p[1], p[2], p[3], r.report.brevity_penalty
            ));
        }
        out
    }

    /// Systems as rows, directions as columns; unconfigured cells stay blank.
    pub fn to_markdown(&self) -> String {
        let dirs: BTreeSet<(String, String)> = self
            .rows
            .iter()
            .map(|r| (r.direction.src.clone(), r.direction.tgt.clone()))
            .collect();
        let mut cells: BTreeMap<SystemLabel, BTreeMap<(String, String), f64>> = BTreeMap::new();
        for r in &self.rows {
            cells
                .entry(r.direction.label)
                .or_default()
                .insert((r.direction.src.clone(), r.direction.tgt.clone()), r.report.bleu);
        }
        let mut out = String::from("| system |");
        for (s, t) in &dirs {
            out.push_str(&format!(" {s}→{t} |"));
        }
        out.push_str("\n|---|");
        out.push_str(&"---:|".repeat(dirs.len()));
        out.push('\n');
        for (label, row) in &cells {
            out.push_str(&format!("| {label} |"));
            for d in &dirs {
                match row.get(d) {
                    Some(b) => out.push_str(&format!(" {b:.2} |")),
                    None => out.push_str("  |"),
                }
            }
            out.push('\n');
        }
        out.push_str(&format!(
            "\nBLEU: corpus-level, 4-gram, unsmoothed, whitespace tokens after subword join; decoding {}.\n",
            self.decoding
        ));
        for c in self.ordering_checks() {
            out.push_str(&format!(
                "ordering {}→{}: pivot {:.2} {} zero-shot {:.2}\n",
                c.src,
                c.tgt,
                c.pivot,
                if c.holds() { ">=" } else { "<" },
                c.zero_shot
            ));
        }
        out
    }

    /// Checks for every pair that has both a pivot and a zero-shot row.
    pub fn ordering_checks(&self) -> Vec<OrderingCheck> {
        let find = |label: SystemLabel, s: &str, t: &str| {
            self.rows
                .iter()
                .find(|r| r.direction.label == label && r.direction.src == s && r.direction.tgt == t)
                .map(|r| r.report.bleu)
        };
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for r in self.rows.iter().filter(|r| r.direction.label == SystemLabel::ZeroShot) {
            let key = (r.direction.src.clone(), r.direction.tgt.clone());
            if !seen.insert(key.clone()) {
                continue;
            }
            if let Some(pivot) = find(SystemLabel::Pivot, &key.0, &key.1) {
                out.push(OrderingCheck {
                    src: key.0,
                    tgt: key.1,
                    pivot,
                    zero_shot: r.report.bleu,
                });
            }
        }
        out
    }
}

/// Evaluates every direction on the same multi-way test set (sentence `i` of
/// each language is a translation of sentence `i` of every other).
pub fn experiment_grid(
    translator: &Translator<'_>,
    directions: &[GridDirection],
    test: &BTreeMap<String, Vec<String>>,
    decoding: Decoding,
) -> Result<ExperimentGrid> {
    let side = |lang: &str| {
        test.get(lang)
            .ok_or_else(|| NmtError::Config(format!("no test text for language `{lang}`")))
    };
    let mut rows = Vec::with_capacity(directions.len());
    for d in directions {
        let req = TranslationRequest::new(&d.src, &d.tgt, d.route.clone()).with_decoding(decoding);
        let report = evaluate_direction(translator, &req, side(&d.src)?, side(&d.tgt)?)?;
        rows.push(GridRow {
            direction: d.clone(),
            report,
        });
    }
    Ok(ExperimentGrid { rows, decoding })
}
