//! Report assembly and emission.
//!
//! Everything in a report is derived from two persisted tables: the
//! per-sample detector scores (`scores.csv`) and the per-pair attack
//! outcomes (`attacks.csv`). Regenerating from those files reproduces every
//! other artifact byte for byte. The report hash covers the config and both
//! tables, never wall-clock time or output paths.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detectors::orientation_of;
use crate::error::{Error, Result};
use crate::metrics::{auroc_scores, histogram, read_scores_csv, write_scores_csv, Histogram, RangePolicy, ScoreRow, Side};

use super::config::ExperimentConfig;

/// Outcome of one attack.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRow {
    pub attack_set: String,
    pub sample_id: usize,
    pub mape: Option<f64>,
    pub loss: f64,
    pub slack: f64,
    /// Rows in the loss trace: start evaluation plus every iterate.
    pub evaluations: usize,
    /// Failure message when the pair was excluded.
    pub excluded: Option<String>,
}

const PAIR_CSV_HEADER: [&str; 7] = ["attack_set", "sample_id", "mape", "loss", "slack", "evaluations", "excluded"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AurocCell {
    pub attack_set: String,
    pub detector: String,
    pub hyperparameters: BTreeMap<String, f64>,
    pub auroc: f64,
    pub n_in: usize,
    pub n_out: usize,
}

impl AurocCell {
    pub fn cell_id(&self) -> String {
        format!(
            "{}/{}",
            self.attack_set,
            super::experiment::with_params(&self.detector, &self.hyperparameters)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub config_hash: String,
    pub report_hash: String,
    pub attempted: usize,
    pub exclusions: usize,
    /// Model quality figures (test accuracy, reconstruction error).
    pub quality: BTreeMap<String, f64>,
    pub cells: Vec<AurocCell>,
    pub wall_clock_seconds: f64,
    #[serde(skip)]
    pub config: Option<ExperimentConfig>,
    #[serde(skip)]
    pub scores: Vec<ScoreRow>,
    #[serde(skip)]
    pub pairs: Vec<PairRow>,
    #[serde(skip)]
    pub mape_histograms: Vec<(String, Histogram)>,
    #[serde(skip)]
    pub histogram_bins: usize,
}

impl ExperimentReport {
    pub fn cell(&self, attack_set: &str, detector: &str) -> Option<&AurocCell> {
        self.cells.iter().find(|c| c.attack_set == attack_set && c.detector == detector)
    }

    /// Every MAPE value of an attack set, excluded pairs omitted.
    pub fn mapes(&self, attack_set: &str) -> Vec<f64> {
        self.pairs
            .iter()
            .filter(|p| p.attack_set == attack_set)
            .filter_map(|p| p.mape)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    SvgHistogram,
    TextTable,
}

pub(crate) fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-._".contains(c) { c } else { '_' })
        .collect()
}

fn hex_digest(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

/// Hash of the config with filesystem locations removed.
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    let mut c = cfg.clone();
    c.output_dir = PathBuf::new();
    c.data_dir = PathBuf::new();
    c.models_dir = None;
    let json = serde_json::to_vec(&c).map_err(|e| Error::Format(e.to_string()))?;
    Ok(hex_digest(&[&json]))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

pub fn write_pairs_csv<W: std::io::Write>(w: W, rows: &[PairRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(PAIR_CSV_HEADER).map_err(csv_err)?;
    for r in rows {
        out.write_record([
            r.attack_set.clone(),
            r.sample_id.to_string(),
            r.mape.map(|m| m.to_string()).unwrap_or_default(),
            r.loss.to_string(),
            r.slack.to_string(),
            r.evaluations.to_string(),
            r.excluded.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_pairs_csv<R: std::io::Read>(r: R) -> Result<Vec<PairRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.iter().ne(PAIR_CSV_HEADER) {
        return Err(Error::Format(format!("unexpected attacks header {header:?}")));
    }
    let num = |s: &str, what: &str| -> Result<f64> {
        s.parse().map_err(|_| Error::Format(format!("bad {what} {s:?}")))
    };
    rdr.records()
        .map(|rec| {
            let rec = rec.map_err(csv_err)?;
            Ok(PairRow {
                attack_set: rec[0].to_string(),
                sample_id: rec[1].parse().map_err(|_| Error::Format(format!("bad sample id {:?}", &rec[1])))?,
                mape: if rec[2].is_empty() { None } else { Some(num(&rec[2], "mape")?) },
                loss: num(&rec[3], "loss")?,
                slack: num(&rec[4], "slack")?,
                evaluations: rec[5].parse().map_err(|_| Error::Format(format!("bad count {:?}", &rec[5])))?,
                excluded: (!rec[6].is_empty()).then(|| rec[6].to_string()),
            })
        })
        .collect()
}

/// Splits `set/detector[k=v,...]` into its parts.
fn parse_cell_id(id: &str) -> Result<(String, String, BTreeMap<String, f64>)> {
    let bad = || Error::Format(format!("malformed detector id {id:?}"));
    let (set, det) = id.split_once('/').ok_or_else(bad)?;
    // Attack-set ids may themselves carry `[..]`, but never a '/'.
    let (name, hyper) = match det.split_once('[') {
        None => (det.to_string(), BTreeMap::new()),
        Some((name, rest)) => {
            let inner = rest.strip_suffix(']').ok_or_else(bad)?;
            let mut map = BTreeMap::new();
            for kv in inner.split(',') {
                let (k, v) = kv.split_once('=').ok_or_else(bad)?;
                map.insert(k.to_string(), v.parse::<f64>().map_err(|_| bad())?);
            }
            (name.to_string(), map)
        }
    };
    Ok((set.to_string(), name, hyper))
}

/// Derives AUROC cells, histograms and hashes from the raw tables.
pub fn assemble_report(
    cfg: &ExperimentConfig,
    quality: BTreeMap<String, f64>,
    scores: Vec<ScoreRow>,
    pairs: Vec<PairRow>,
) -> Result<ExperimentReport> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for row in &scores {
        let g = groups.entry(row.detector_id.clone()).or_insert_with(|| {
            order.push(row.detector_id.clone());
            (Vec::new(), Vec::new())
        });
        match row.side {
            Side::In => g.0.push(row.score),
            Side::Out => g.1.push(row.score),
        }
    }
    let mut cells = Vec::with_capacity(order.len());
    for id in order {
        let (set, detector, hyper) = parse_cell_id(&id)?;
        let orientation =
            orientation_of(&detector).ok_or_else(|| Error::Format(format!("unknown detector {detector:?}")))?;
        let (ins, outs) = &groups[&id];
        let auroc = if ins.is_empty() || outs.is_empty() {
            f64::NAN
        } else {
            auroc_scores(ins, outs, orientation)?
        };
        cells.push(AurocCell {
            attack_set: set,
            detector,
            hyperparameters: hyper,
            auroc,
            n_in: ins.len(),
            n_out: outs.len(),
        });
    }

    let mut set_order: Vec<String> = Vec::new();
    for p in &pairs {
        if !set_order.contains(&p.attack_set) {
            set_order.push(p.attack_set.clone());
        }
    }
    let mape_histograms = set_order
        .iter()
        .map(|set| {
            let values: Vec<f64> = pairs
                .iter()
                .filter(|p| &p.attack_set == set)
                .filter_map(|p| p.mape)
                .collect();
            let h = histogram(
                &values,
                cfg.histogram_bins,
                RangePolicy::Fixed {
                    lo: 0.0,
                    hi: cfg.mape_histogram_max,
                },
            )?;
            Ok((set.clone(), h))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut score_bytes = Vec::new();
    write_scores_csv(&mut score_bytes, &scores)?;
    let mut pair_bytes = Vec::new();
    write_pairs_csv(&mut pair_bytes, &pairs)?;
    let config_hash = config_hash(cfg)?;
    let report_hash = hex_digest(&[config_hash.as_bytes(), &score_bytes, &pair_bytes]);

    Ok(ExperimentReport {
        name: cfg.name.clone(),
        config_hash,
        report_hash,
        attempted: pairs.len(),
        exclusions: pairs.iter().filter(|p| p.excluded.is_some()).count(),
        quality,
        cells,
        wall_clock_seconds: 0.0,
        config: Some(cfg.clone()),
        scores,
        pairs,
        mape_histograms,
        histogram_bins: cfg.histogram_bins,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

/// Writes one family of artifacts into `dir` and returns the paths.
pub fn emit_report(report: &ExperimentReport, format: ReportFormat, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Config(format!("output directory {} is not writable: {e}", dir.display())))?;
    let mut written = Vec::new();
    match format {
        ReportFormat::Csv => {
            let p = dir.join("scores.csv");
            write_scores_csv(create(&p)?, &report.scores)?;
            written.push(p);
            let p = dir.join("attacks.csv");
            write_pairs_csv(create(&p)?, &report.pairs)?;
            written.push(p);
            let p = dir.join("auroc.csv");
            let mut w = csv::Writer::from_writer(create(&p)?);
            w.write_record(["attack_set", "detector", "hyperparameters", "auroc", "n_in", "n_out"])
                .map_err(csv_err)?;
            for c in &report.cells {
                let hyper: Vec<String> = c.hyperparameters.iter().map(|(k, v)| format!("{k}={v}")).collect();
                w.write_record([
                    c.attack_set.clone(),
                    c.detector.clone(),
                    hyper.join(";"),
                    c.auroc.to_string(),
                    c.n_in.to_string(),
                    c.n_out.to_string(),
                ])
                .map_err(csv_err)?;
            }
            w.flush()?;
            written.push(p);
            for (set, h) in &report.mape_histograms {
                let p = dir.join(format!("mape_histogram__{}.csv", file_stem(set)));
                h.write_csv(create(&p)?)?;
                written.push(p);
            }
        }
        ReportFormat::SvgHistogram => {
            for (set, h) in &report.mape_histograms {
                let p = dir.join(format!("mape_histogram__{}.svg", file_stem(set)));
                let svg = svg_histogram(&format!("MAPE, attack set {set}"), "MAPE", &[("attacked pairs", "#4a6fa5", h)]);
                std::fs::write(&p, svg)?;
                written.push(p);
            }
            for c in &report.cells {
                let id = c.cell_id();
                let (ins, outs): (Vec<f64>, Vec<f64>) = {
                    let mut i = Vec::new();
                    let mut o = Vec::new();
                    for r in report.scores.iter().filter(|r| r.detector_id == id) {
                        match r.side {
                            Side::In => i.push(r.score),
                            Side::Out => o.push(r.score),
                        }
                    }
                    (i, o)
                };
                let all: Vec<f64> = ins.iter().chain(&outs).copied().filter(|v| v.is_finite()).collect();
                if all.is_empty() {
                    continue;
                }
                let policy = {
                    let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    if hi > lo {
                        RangePolicy::Fixed { lo, hi }
                    } else {
                        RangePolicy::Fixed { lo: lo - 0.5, hi: lo + 0.5 }
                    }
                };
                let hi = histogram(&ins, report.histogram_bins, policy)?;
                let ho = histogram(&outs, report.histogram_bins, policy)?;
                let p = dir.join(format!("scores__{}.svg", file_stem(&id)));
                let svg = svg_histogram(
                    &format!("{id}: AUROC {:.3}", c.auroc),
                    "OOD score",
                    &[("in-distribution", "#3b6fd1", &hi), ("attacked OOD", "#d13b3b", &ho)],
                );
                std::fs::write(&p, svg)?;
                written.push(p);
            }
        }
        ReportFormat::TextTable => {
            let p = dir.join("table.txt");
            std::fs::write(&p, text_table(report))?;
            written.push(p);
        }
    }
    Ok(written)
}

/// Writes every artifact: CSVs, SVGs, the text table, `config.toml` and
/// `report.json`.
pub fn persist_report(report: &ExperimentReport, dir: &Path) -> Result<()> {
    for f in [ReportFormat::Csv, ReportFormat::SvgHistogram, ReportFormat::TextTable] {
        emit_report(report, f, dir)?;
    }
    if let Some(cfg) = &report.config {
        std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    }
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(dir.join("report.json"), json + "\n")?;
    Ok(())
}

/// Rebuilds a report from the persisted config, score and attack tables in
/// `dir`, rewriting every derived artifact.
pub fn regenerate_report(dir: &Path) -> Result<ExperimentReport> {
    let cfg = ExperimentConfig::load(&dir.join("config.toml"))?;
    let open = |name: &str| {
        File::open(dir.join(name)).map_err(|e| Error::Config(format!("cannot read {}: {e}", dir.join(name).display())))
    };
    let scores = read_scores_csv(open("scores.csv")?)?;
    let pairs = read_pairs_csv(open("attacks.csv")?)?;
    let previous: Option<ExperimentReport> = std::fs::read_to_string(dir.join("report.json"))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    let quality = previous.as_ref().map(|p| p.quality.clone()).unwrap_or_default();
    let mut report = assemble_report(&cfg, quality, scores, pairs)?;
    report.wall_clock_seconds = previous.map_or(0.0, |p| p.wall_clock_seconds);
    persist_report(&report, dir)?;
    Ok(report)
}

pub fn format_auroc(v: f64) -> String {
    if v.is_nan() {
        "  n/a".into()
    } else {
        format!("{v:.3}")
    }
}

fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub fn text_table(report: &ExperimentReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "experiment: {}", report.name);
    let _ = writeln!(s, "config hash: {}", report.config_hash);
    let _ = writeln!(s, "report hash: {}", report.report_hash);
    let _ = writeln!(s, "attacks: {} attempted, {} excluded", report.attempted, report.exclusions);
    for (k, v) in &report.quality {
        let _ = writeln!(s, "{k}: {v:.4}");
    }
    let _ = writeln!(s);

    let set_w = report.cells.iter().map(|c| c.attack_set.len()).max().unwrap_or(0).max(10);
    let det_w = report
        .cells
        .iter()
        .map(|c| super::experiment::with_params(&c.detector, &c.hyperparameters).len())
        .max()
        .unwrap_or(0)
        .max(8);
    let _ = writeln!(s, "{:<set_w$}  {:<det_w$}  {:>5}  {:>5}  {:>5}", "attack set", "detector", "AUROC", "n_in", "n_out");
    for c in &report.cells {
        let _ = writeln!(
            s,
            "{:<set_w$}  {:<det_w$}  {:>5}  {:>5}  {:>5}",
            c.attack_set,
            super::experiment::with_params(&c.detector, &c.hyperparameters),
            format_auroc(c.auroc),
            c.n_in,
            c.n_out
        );
    }

    // ODIN grids in the usual T × PM layout.
    let odin: Vec<&AurocCell> = report
        .cells
        .iter()
        .filter(|c| c.detector == "odin" && c.hyperparameters.contains_key("T") && c.hyperparameters.contains_key("PM"))
        .collect();
    if !odin.is_empty() {
        let mut ts: Vec<f64> = odin.iter().map(|c| c.hyperparameters["T"]).collect();
        let mut pms: Vec<f64> = odin.iter().map(|c| c.hyperparameters["PM"]).collect();
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        pms.sort_by(f64::total_cmp);
        pms.dedup();
        let _ = writeln!(s, "\nODIN AUROC (rows T, columns PM)");
        let _ = write!(s, "{:>8}", "T \\ PM");
        for pm in &pms {
            let _ = write!(s, "  {:>7}", pm.to_string());
        }
        let _ = writeln!(s);
        for t in &ts {
            let _ = write!(s, "{:>8}", t.to_string());
            for pm in &pms {
                let cell = odin.iter().find(|c| c.hyperparameters["T"] == *t && c.hyperparameters["PM"] == *pm);
                let _ = write!(s, "  {:>7}", cell.map_or("-".to_string(), |c| format_auroc(c.auroc)));
            }
            let _ = writeln!(s);
        }
    }

    for (set, _) in &report.mape_histograms {
        let m = report.mapes(set);
        let below = m.iter().filter(|&&v| v < 1e-3).count();
        let _ = writeln!(
            s,
            "\nMAPE [{set}]: median {}, below 0.1%: {below}/{}",
            median(&m).map_or("n/a".into(), |v| format!("{:.4}%", 100.0 * v)),
            m.len()
        );
    }
    s
}

fn esc(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Bar histogram(s) sharing one set of bin edges, with labeled axes.
pub fn svg_histogram(title: &str, x_label: &str, series: &[(&str, &str, &Histogram)]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (64.0, 16.0, 40.0, 56.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let max_count = series.iter().flat_map(|(_, _, hist)| hist.counts.iter().copied()).max().unwrap_or(0).max(1);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" font-size="15" text-anchor="middle" font-family="sans-serif">{}</text>"#, w / 2.0, esc(title));
    for (k, (label, color, hist)) in series.iter().enumerate() {
        let n = hist.counts.len().max(1) as f64;
        let bw = pw / n;
        for (i, &c) in hist.counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let bh = ph * c as f64 / max_count as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="0.6"/>"#,
                left + i as f64 * bw,
                top + ph - bh,
                bw,
                bh
            );
        }
        let ly = top + 14.0 + 16.0 * k as f64;
        let _ = writeln!(s, r#"<rect x="{:.2}" y="{:.2}" width="10" height="10" fill="{color}" fill-opacity="0.6"/>"#, w - right - 150.0, ly - 9.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{ly:.2}" font-size="11" font-family="sans-serif">{}</text>"#, w - right - 135.0, esc(label));
    }
    // Axes with end ticks.
    let _ = writeln!(s, r#"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, top + ph, left + pw, top + ph);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#, top + ph);
    if let Some((_, _, hist)) = series.first() {
        let (lo, hi) = (hist.edges[0], *hist.edges.last().expect("edges"));
        for (x, v) in [(left, lo), (left + pw / 2.0, 0.5 * (lo + hi)), (left + pw, hi)] {
            let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" font-size="11" text-anchor="middle" font-family="sans-serif">{}</text>"#, top + ph + 16.0, format_tick(v));
        }
    }
    let _ = writeln!(s, r#"<text x="{left}" y="{:.2}" font-size="11" text-anchor="end" font-family="sans-serif">{max_count}</text>"#, top + 4.0);
    let _ = writeln!(s, r#"<text x="{}" y="{:.2}" font-size="11" text-anchor="end" font-family="sans-serif">0</text>"#, left - 4.0, top + ph);
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="13" text-anchor="middle" font-family="sans-serif">{}</text>"#, left + pw / 2.0, h - 14.0, esc(x_label));
    let _ = writeln!(s, r#"<text x="16" y="{:.2}" font-size="13" text-anchor="middle" font-family="sans-serif" transform="rotate(-90 16 {:.2})">count</text>"#, top + ph / 2.0, top + ph / 2.0);
    s.push_str("</svg>\n");
    s
}

fn format_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e-2 && v.abs() < 1e4 {
        format!("{v:.3}")
    } else {
        format!("{v:.2e}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_ids_round_trip() {
        let (set, det, hyper) = parse_cell_id("odin[PM=0.001,T=10]/odin[PM=0.001,T=10]").unwrap();
        assert_eq!(set, "odin[PM=0.001,T=10]");
        assert_eq!(det, "odin");
        assert_eq!(hyper["PM"], 0.001);
        assert_eq!(hyper["T"], 10.0);
        assert!(parse_cell_id("no-slash").is_err());
        let (_, det, hyper) = parse_cell_id("latent/max_softmax").unwrap();
        assert_eq!(det, "max_softmax");
        assert!(hyper.is_empty());
    }

    #[test]
    fn auroc_formatting_uses_three_decimals() {
        assert_eq!(format_auroc(0.5), "0.500");
        assert_eq!(format_auroc(0.643), "0.643");
    }

    #[test]
    fn pair_csv_round_trip() {
        let rows = vec![
            PairRow {
                attack_set: "latent".into(),
                sample_id: 3,
                mape: Some(1.25e-4),
                loss: 0.1,
                slack: 0.0,
                evaluations: 11,
                excluded: None,
            },
            PairRow {
                attack_set: "latent".into(),
                sample_id: 4,
                mape: None,
                loss: f64::NAN,
                slack: f64::NAN,
                evaluations: 0,
                excluded: Some("attack failed: boom".into()),
            },
        ];
        let mut buf = Vec::new();
        write_pairs_csv(&mut buf, &rows).unwrap();
        let back = read_pairs_csv(buf.as_slice()).unwrap();
        assert_eq!(back[0], rows[0]);
        assert!(back[1].loss.is_nan() && back[1].excluded == rows[1].excluded);
    }
}
