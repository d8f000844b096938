//! MAPE, AUROC and histogram binning, plus their CSV forms.
//!
//! AUROC is the normalized Mann–Whitney statistic with ties credited one
//! half. It is accumulated as an integer count of half-credits, so the result
//! is exactly `count / (2·n_in·n_out)` with one final division.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `mean(|z_out − z_in|) / max(|z_in|)`, as a fraction.
pub fn mape(z_out: &Tensor, z_in: &Tensor) -> Result<f64> {
    if z_out.shape() != z_in.shape() {
        return Err(Error::Shape(format!(
            "mape of {:?} against {:?}",
            z_out.shape(),
            z_in.shape()
        )));
    }
    let denom = z_in.norm_linf();
    if denom == 0.0 {
        return Err(Error::Domain("mape undefined: reference latent is all zeros".into()));
    }
    let mean = z_out
        .data()
        .iter()
        .zip(z_in.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / z_in.len() as f64;
    Ok(mean / denom)
}

/// Which direction of a score indicates in-distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    HigherIsInDistribution,
    HigherIsOod,
}

impl Orientation {
    /// Maps a raw score so that larger means "more in-distribution".
    pub fn normalize(self, score: f64) -> f64 {
        match self {
            Orientation::HigherIsInDistribution => score,
            Orientation::HigherIsOod => -score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    pub in_scores: Vec<f64>,
    pub out_scores: Vec<f64>,
    pub orientation: Orientation,
}

impl ScorePair {
    pub fn new(in_scores: Vec<f64>, out_scores: Vec<f64>, orientation: Orientation) -> Result<Self> {
        if in_scores.is_empty() || out_scores.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "auroc needs both sides: {} in, {} out",
                in_scores.len(),
                out_scores.len()
            )));
        }
        if let Some(v) = in_scores.iter().chain(&out_scores).find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("score {v} in auroc input")));
        }
        Ok(Self {
            in_scores,
            out_scores,
            orientation,
        })
    }

    pub fn swapped(&self) -> Self {
        Self {
            in_scores: self.out_scores.clone(),
            out_scores: self.in_scores.clone(),
            orientation: self.orientation,
        }
    }
}

/// Twice the Mann–Whitney U of the in-side: 2 per strict win, 1 per tie.
fn doubled_u(pos: &[f64], neg: &[f64]) -> u128 {
    let mut neg: Vec<f64> = neg.to_vec();
    neg.sort_by(f64::total_cmp);
    let mut u = 0u128;
    for &p in pos {
        let below = neg.partition_point(|&n| n < p);
        let not_above = neg.partition_point(|&n| n <= p);
        u += 2 * below as u128 + (not_above - below) as u128;
    }
    u
}

pub fn auroc(pair: &ScorePair) -> Result<f64> {
    let pair = ScorePair::new(pair.in_scores.clone(), pair.out_scores.clone(), pair.orientation)?;
    let o = pair.orientation;
    let pos: Vec<f64> = pair.in_scores.iter().map(|&s| o.normalize(s)).collect();
    let neg: Vec<f64> = pair.out_scores.iter().map(|&s| o.normalize(s)).collect();
    let total = 2 * pos.len() as u128 * neg.len() as u128;
    Ok(doubled_u(&pos, &neg) as f64 / total as f64)
}

pub fn auroc_scores(in_scores: &[f64], out_scores: &[f64], orientation: Orientation) -> Result<f64> {
    auroc(&ScorePair::new(in_scores.to_vec(), out_scores.to_vec(), orientation)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RangePolicy {
    /// Span the observed minimum and maximum.
    MinMax,
    /// Fixed `[lo, hi]`; values outside land in the end bins.
    Fixed { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `counts.len() + 1` ascending edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn bins(&self) -> impl Iterator<Item = (f64, f64, u64)> + '_ {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, &c)| (self.edges[i], self.edges[i + 1], c))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["bin_lo", "bin_hi", "count"]).map_err(csv_err)?;
        for (lo, hi, c) in self.bins() {
            out.write_record([lo.to_string(), hi.to_string(), c.to_string()])
                .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn histogram(values: &[f64], bins: usize, policy: RangePolicy) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("histogram value {v}")));
    }
    let (mut lo, mut hi) = match policy {
        RangePolicy::MinMax if values.is_empty() => (0.0, 1.0),
        RangePolicy::MinMax => (
            values.iter().copied().fold(f64::INFINITY, f64::min),
            values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ),
        RangePolicy::Fixed { lo, hi } => {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidArgument(format!("bad histogram range [{lo}, {hi}]")));
            }
            (lo, hi)
        }
    };
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins)
        .map(|i| if i == bins { hi } else { lo + width * i as f64 })
        .collect();
    let mut counts = vec![0u64; bins];
    for &v in values {
        // Index arithmetic rather than edge comparison, so grid values that
        // sit on a bin boundary are not pushed down by edge rounding.
        let idx = ((v - lo) * bins as f64 / (hi - lo)).floor();
        let above = if idx < 0.0 { 0 } else { (idx as usize).min(bins - 1) };
        counts[above] += 1;
    }
    Ok(Histogram { edges, counts })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    In,
    Out,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::In => "in",
            Side::Out => "out",
        }
    }
}

impl std::str::FromStr for Side {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in" => Ok(Side::In),
            "out" => Ok(Side::Out),
            other => Err(Error::Format(format!("side must be in/out, got {other:?}"))),
        }
    }
}

/// One line of the per-sample score CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub sample_id: usize,
    pub detector_id: String,
    pub side: Side,
    pub score: f64,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

pub const SCORE_CSV_HEADER: [&str; 4] = ["sample_id", "detector_id", "side", "score"];

/// Writes `sample_id,detector_id,side,score`. Scores use the shortest
/// representation that parses back to the same `f64`.
pub fn write_scores_csv<W: Write>(w: W, rows: &[ScoreRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SCORE_CSV_HEADER).map_err(csv_err)?;
    for r in rows {
        out.write_record([
            r.sample_id.to_string(),
            r.detector_id.clone(),
            r.side.as_str().to_string(),
            r.score.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_scores_csv<R: std::io::Read>(r: R) -> Result<Vec<ScoreRow>> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers().map_err(csv_err)?.clone();
    if header.iter().ne(SCORE_CSV_HEADER) {
        return Err(Error::Format(format!("unexpected score CSV header {header:?}")));
    }
    let mut rows = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let field = |i: usize| rec.get(i).unwrap_or_default();
        let bad = |what: &str| Error::Format(format!("score CSV row {}: bad {what}", line + 2));
        rows.push(ScoreRow {
            sample_id: field(0).parse().map_err(|_| bad("sample_id"))?,
            detector_id: field(1).to_string(),
            side: field(2).parse()?,
            score: field(3).parse().map_err(|_| bad("score"))?,
        });
    }
    Ok(rows)
}
