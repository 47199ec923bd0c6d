//! Representation-space diagnostics: extraction, distance reports, collapse
//! indicators and PCA projection.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use modnmt_tensor::{Graph, Tensor};
use nalgebra::{DMatrix, SymmetricEigen};

use crate::corpus::TokenMatrix;
use crate::error::{NmtError, Result};
use crate::model::{decode, encode, ModuleRegistry};
use crate::tokenizer::Vocabularies;

/// Fewest sentences a collapse indicator is computed on.
pub const MIN_COLLAPSE_ROWS: usize = 30;
/// Default number of sentences for a representation dump.
pub const DEFAULT_DUMP_SENTENCES: usize = 130;

const EXTRACT_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Stage {
    /// Pooled final encoder states.
    EncoderFinal,
    /// Pooled final states of the named language's decoder, run with teacher
    /// forcing on the reference sentences of that language.
    DecoderLast { decoder: String },
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::EncoderFinal => f.write_str("encoder_final"),
            Stage::DecoderLast { decoder } => write!(f, "decoder_last:{decoder}"),
        }
    }
}

impl FromStr for Stage {
    type Err = NmtError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "encoder_final" {
            return Ok(Stage::EncoderFinal);
        }
        match s.strip_prefix("decoder_last:") {
            Some(d) if !d.is_empty() => Ok(Stage::DecoderLast { decoder: d.to_string() }),
            _ => Err(NmtError::Analysis(format!(
                "unknown stage `{s}` (expected encoder_final or decoder_last:<lang>)"
            ))),
        }
    }
}

/// Pooled vectors of one language at one stage; row `i` belongs to sentence
/// `indices[i]` of the multi-way corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationDump {
    pub language: String,
    pub stage: Stage,
    pub matrix: Tensor,
    pub indices: Vec<usize>,
}

impl RepresentationDump {
    pub fn rows(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.matrix.data()[i * d..(i + 1) * d]
    }
}

/// Pooled representations of every language in `multi` that has an encoder,
/// at the requested stage. Parameters are only read.
pub fn extract_representations(
    registry: &ModuleRegistry,
    vocabs: &Vocabularies,
    multi: &BTreeMap<String, Vec<String>>,
    stage: &Stage,
) -> Result<Vec<RepresentationDump>> {
    let n = multi.values().next().map_or(0, Vec::len);
    if n == 0 || multi.values().any(|v| v.len() != n) {
        return Err(NmtError::Analysis("the multi-way corpus must be non-empty and aligned".into()));
    }
    let decoder = match stage {
        Stage::EncoderFinal => None,
        Stage::DecoderLast { decoder } => {
            let refs = multi
                .get(decoder)
                .ok_or_else(|| NmtError::Analysis(format!("no reference text for decoder language `{decoder}`")))?;
            let vocab = vocabs.get(decoder)?;
            let ids: Vec<Vec<usize>> = refs.iter().map(|s| vocab.encode(s).ids).collect();
            Some((registry.decoder(decoder)?, ids))
        }
    };
    let mut dumps = Vec::new();
    for (lang, lines) in multi {
        let Ok(enc) = registry.encoder(lang) else { continue };
        let vocab = vocabs.get(lang)?;
        let src: Vec<Vec<usize>> = lines.iter().map(|s| vocab.encode(s).ids).collect();
        let mut g = Graph::new();
        let enc_b = enc.bind_constant(&mut g)?;
        let dec_b = match &decoder {
            Some((d, _)) => Some(d.bind_constant(&mut g)?),
            None => None,
        };
        let mark = g.len();
        let mut data = Vec::with_capacity(n * enc.arch().d_model);
        for start in (0..n).step_by(EXTRACT_BATCH) {
            let end = (start + EXTRACT_BATCH).min(n);
            let memory = encode(&mut g, &enc_b, &TokenMatrix::from_rows(&src[start..end]))?;
            let pooled = match (&dec_b, &decoder) {
                (Some(db), Some((_, tgt))) => {
                    let full = TokenMatrix::from_rows(&tgt[start..end]);
                    let input = full.slice_cols(0, full.cols - 1);
                    let out = decode(&mut g, db, &memory, &input)?;
                    g.masked_mean_pool(out.hidden, &input.pad)?
                }
                _ => memory.pooled,
            };
            data.extend_from_slice(g.value(pooled));
            g.truncate(mark);
        }
        let d = data.len() / n;
        dumps.push(RepresentationDump {
            language: lang.clone(),
            stage: stage.clone(),
            matrix: Tensor::new([n, d], data)?,
            indices: (0..n).collect(),
        });
    }
    Ok(dumps)
}

/// Correlation distance for diagnostics: `1 − mean_j corr_j`, where a
/// dimension with zero variance on either side contributes correlation 0.
/// Unlike the training loss this uses no epsilon, so `d(X, X)` is exactly 0.
pub fn correlation_distance_exact(a: &RepresentationDump, b: &RepresentationDump) -> Result<f64> {
    check_aligned(a, b)?;
    let (n, d) = (a.rows(), a.dim());
    if n < 2 {
        return Err(NmtError::Analysis("correlation needs at least 2 sentences".into()));
    }
    let mut total = 0.0;
    for j in 0..d {
        let col = |m: &RepresentationDump| -> Vec<f64> { (0..n).map(|i| m.row(i)[j]).collect() };
        let (x, y) = (col(a), col(b));
        let mx = x.iter().sum::<f64>() / n as f64;
        let my = y.iter().sum::<f64>() / n as f64;
        let (mut num, mut vx, mut vy) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let (cx, cy) = (x[i] - mx, y[i] - my);
            num += cx * cy;
            vx += cx * cx;
            vy += cy * cy;
        }
        let vv = vx * vy;
        total += if vv > 0.0 { num / vv.sqrt() } else { 0.0 };
    }
    Ok(1.0 - total / d as f64)
}

fn check_aligned(a: &RepresentationDump, b: &RepresentationDump) -> Result<()> {
    if a.indices != b.indices || a.dim() != b.dim() {
        return Err(NmtError::Analysis(format!(
            "dumps {} ({} rows, D={}) and {} ({} rows, D={}) are not row-aligned",
            a.language,
            a.rows(),
            a.dim(),
            b.language,
            b.rows(),
            b.dim()
        )));
    }
    Ok(())
}

/// How tightly one language's sentence representations bunch together.
#[derive(Debug, Clone, PartialEq)]
pub struct CollapseIndicator {
    pub language: String,
    /// Mean cosine similarity over all pairs of distinct sentences.
    pub mean_cosine: f64,
    pub mean_variance: f64,
    pub min_variance: f64,
    pub max_variance: f64,
}

pub fn collapse_indicator(dump: &RepresentationDump) -> Result<CollapseIndicator> {
    let (n, d) = (dump.rows(), dump.dim());
    if n < MIN_COLLAPSE_ROWS {
        return Err(NmtError::Analysis(format!(
            "collapse indicators need at least {MIN_COLLAPSE_ROWS} sentences, got {n}"
        )));
    }
    let norms: Vec<f64> = (0..n).map(|i| dump.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let denom = norms[i] * norms[j];
            if denom > 0.0 {
                let dot: f64 = dump.row(i).iter().zip(dump.row(j)).map(|(a, b)| a * b).sum();
                sum += (dot / denom).clamp(-1.0, 1.0);
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    let variances: Vec<f64> = (0..d)
        .map(|j| {
            let mean = (0..n).map(|i| dump.row(i)[j]).sum::<f64>() / n as f64;
            (0..n).map(|i| (dump.row(i)[j] - mean).powi(2)).sum::<f64>() / n as f64
        })
        .collect();
    Ok(CollapseIndicator {
        language: dump.language.clone(),
        mean_cosine: sum / pairs,
        mean_variance: variances.iter().sum::<f64>() / d as f64,
        min_variance: variances.iter().cloned().fold(f64::INFINITY, f64::min),
        max_variance: variances.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationReport {
    /// `label` of each dump (`lang@stage`), in input order.
    pub labels: Vec<String>,
    /// Pairwise correlation distances, `distances[i][j]` for dumps `i`, `j`.
    pub distances: Vec<Vec<f64>>,
    pub collapse: Vec<CollapseIndicator>,
}

impl RepresentationReport {
    pub fn to_text(&self) -> String {
        let mut out = String::from("correlation distance\n");
        out.push_str(&format!("{:>24}", ""));
        for l in &self.labels {
            out.push_str(&format!(" {l:>24}"));
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.distances) {
            out.push_str(&format!("{l:>24}"));
            for v in row {
                out.push_str(&format!(" {v:>24.6}"));
            }
            out.push('\n');
        }
        out.push_str("\ncollapse indicators\nlabel,mean_cosine,mean_variance,min_variance,max_variance\n");
        for (l, c) in self.labels.iter().zip(&self.collapse) {
            out.push_str(&format!(
                "{l},{},{},{},{}\n",
                c.mean_cosine, c.mean_variance, c.min_variance, c.max_variance
            ));
        }
        out
    }
}

/// Pairwise distances and per-dump collapse indicators of aligned dumps.
pub fn representation_report(dumps: &[RepresentationDump]) -> Result<RepresentationReport> {
    if dumps.len() < 2 {
        return Err(NmtError::Analysis(format!("a report needs at least 2 dumps, got {}", dumps.len())));
    }
    for d in &dumps[1..] {
        check_aligned(&dumps[0], d)?;
    }
    let mut distances = vec![vec![0.0; dumps.len()]; dumps.len()];
    for i in 0..dumps.len() {
        for j in 0..dumps.len() {
            distances[i][j] = correlation_distance_exact(&dumps[i], &dumps[j])?;
        }
    }
    Ok(RepresentationReport {
        labels: dumps.iter().map(|d| format!("{}@{}", d.language, d.stage)).collect(),
        distances,
        collapse: dumps.iter().map(collapse_indicator).collect::<Result<_>>()?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// `[n, k]` coordinates, rows in input order.
    pub coords: Tensor,
    /// Variance along each component, non-increasing.
    pub explained_variance: Vec<f64>,
    /// Unit principal directions, one per component.
    pub components: Vec<Vec<f64>>,
}

/// Projects the rows of `data` (`[n, D]`) onto the top `k` principal
/// components. Statistics are accumulated over rows in a canonical sorted
/// order, so the result does not depend on input row order; each component's
/// largest-magnitude entry is made positive.
pub fn pca_project(data: &Tensor, k: usize) -> Result<Projection> {
    let shape = data.shape();
    if shape.len() != 2 {
        return Err(NmtError::Analysis(format!("PCA needs an [n, D] matrix, got {shape:?}")));
    }
    let (n, d) = (shape[0], shape[1]);
    if k == 0 || k > d {
        return Err(NmtError::Analysis(format!("cannot take {k} components of {d}-dimensional data")));
    }
    if n < k {
        return Err(NmtError::Analysis(format!("{n} rows are too few for {k} components")));
    }
    let row = |i: usize| &data.data()[i * d..(i + 1) * d];
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        row(a)
            .iter()
            .zip(row(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut mean = vec![0.0; d];
    for &i in &order {
        for (m, v) in mean.iter_mut().zip(row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for &i in &order {
        let c: Vec<f64> = row(i).iter().zip(&mean).map(|(v, m)| v - m).collect();
        for a in 0..d {
            for b in a..d {
                cov[(a, b)] += c[a] * c[b];
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    for a in 0..d {
        for b in a..d {
            let v = cov[(a, b)] / denom;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut idx: Vec<usize> = (0..d).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut components = Vec::with_capacity(k);
    let mut explained_variance = Vec::with_capacity(k);
    for &c in &idx[..k] {
        let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        let lead = v
            .iter()
            .enumerate()
            .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        explained_variance.push(eig.eigenvalues[c].max(0.0));
    }
    let mut coords = Vec::with_capacity(n * k);
    for i in 0..n {
        let c: Vec<f64> = row(i).iter().zip(&mean).map(|(v, m)| v - m).collect();
        for comp in &components {
            coords.push(c.iter().zip(comp).map(|(a, b)| a * b).sum());
        }
    }
    Ok(Projection {
        coords: Tensor::new([n, k], coords)?,
        explained_variance,
        components,
    })
}

/// Stacks dumps into one `[Σn, D]` matrix with a `(language, sentence)` label
/// per row.
pub fn stack_dumps(dumps: &[RepresentationDump]) -> Result<(Tensor, Vec<(String, usize)>)> {
    let d = dumps.first().map(RepresentationDump::dim).ok_or_else(|| NmtError::Analysis("no dumps".into()))?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for dump in dumps {
        if dump.dim() != d {
            return Err(NmtError::Analysis("dumps have different widths".into()));
        }
        data.extend_from_slice(dump.matrix.data());
        labels.extend(dump.indices.iter().map(|&i| (dump.language.clone(), i)));
    }
    Ok((Tensor::new([labels.len(), d], data)?, labels))
}

/// `lang,sentence_idx,stage,v0..v{D-1}`
pub fn dumps_csv(dumps: &[RepresentationDump]) -> String {
    let d = dumps.first().map_or(0, RepresentationDump::dim);
    let mut out = String::from("lang,sentence_idx,stage");
    for j in 0..d {
        out.push_str(&format!(",v{j}"));
    }
    out.push('\n');
    for dump in dumps {
        for (r, idx) in dump.indices.iter().enumerate() {
            out.push_str(&format!("{},{idx},{}", dump.language, dump.stage));
            for v in dump.row(r) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    out
}

/// `lang,sentence_idx,x,y` from the first two components.
pub fn projection_csv(labels: &[(String, usize)], projection: &Projection) -> Result<String> {
    let shape = projection.coords.shape();
    if shape[1] < 2 || shape[0] != labels.len() {
        return Err(NmtError::Analysis("projection CSV needs two components and one label per row".into()));
    }
    let mut out = String::from("lang,sentence_idx,x,y\n");
    for (i, (lang, idx)) in labels.iter().enumerate() {
        let c = &projection.coords.data()[i * shape[1]..];
        out.push_str(&format!("{lang},{idx},{},{}\n", c[0], c[1]));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_parse() {
        assert_eq!("encoder_final".parse::<Stage>().unwrap(), Stage::EncoderFinal);
        assert_eq!(
            "decoder_last:x".parse::<Stage>().unwrap(),
            Stage::DecoderLast { decoder: "x".into() }
        );
        assert!("decoder_block_1".parse::<Stage>().is_err());
    }
}
