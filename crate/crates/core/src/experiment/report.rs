//! Aggregating sub-runs into table rows and rendering them.

use serde::{Deserialize, Serialize};

use super::config::Condition;
use super::run::RunResult;
use super::ExperimentError;
use crate::audio::AugmentRegime;
use crate::losses::SpeakerLoss;

/// Mean and sample standard deviation over the repeats of one condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub speaker_loss: SpeakerLoss,
    pub regime: AugmentRegime,
    pub augment_both_segments: bool,
    pub lambda: f64,
    pub aat_enabled: bool,
    pub dataset: String,
    pub n_runs: usize,
    pub eer_mean: f64,
    /// `None` with fewer than two runs.
    pub eer_std: Option<f64>,
    pub mindcf_mean: f64,
    pub mindcf_std: Option<f64>,
    pub probe_accuracy_mean: Option<f64>,
    pub seeds: Vec<u64>,
    pub config_hashes: Vec<String>,
}

impl ResultRow {
    pub fn condition(&self) -> Condition {
        Condition {
            speaker_loss: self.speaker_loss,
            regime: self.regime,
            augment_both_segments: self.augment_both_segments,
            lambda: self.lambda,
            aat_enabled: self.aat_enabled,
        }
    }
}

fn mean_std(v: &[f64]) -> (f64, Option<f64>) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.len() >= 2).then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

fn sort_key(r: &ResultRow) -> (u8, AugmentRegime, bool, f64, bool, String) {
    let loss = match r.speaker_loss {
        SpeakerLoss::Prototypical => 0,
        SpeakerLoss::AngularPrototypical => 1,
    };
    (loss, r.regime, r.augment_both_segments, r.lambda, r.aat_enabled, r.dataset.clone())
}

/// Groups results by (condition, dataset) and orders rows by loss, regime,
/// one/both segments and lambda.
pub fn aggregate(results: &[RunResult]) -> Vec<ResultRow> {
    let mut groups: Vec<(Condition, String, Vec<&RunResult>)> = Vec::new();
    for r in results {
        match groups.iter_mut().find(|(c, d, _)| *c == r.condition && *d == r.dataset) {
            Some(g) => g.2.push(r),
            None => groups.push((r.condition.clone(), r.dataset.clone(), vec![r])),
        }
    }
    let mut rows: Vec<ResultRow> = groups
        .into_iter()
        .map(|(c, dataset, mut rs)| {
            rs.sort_by_key(|r| r.seed);
            let eers: Vec<f64> = rs.iter().map(|r| r.eer).collect();
            let dcfs: Vec<f64> = rs.iter().map(|r| r.min_dcf).collect();
            let probes: Vec<f64> = rs.iter().filter_map(|r| r.probe.as_ref().map(|p| p.test_accuracy)).collect();
            let (eer_mean, eer_std) = mean_std(&eers);
            let (mindcf_mean, mindcf_std) = mean_std(&dcfs);
            ResultRow {
                speaker_loss: c.speaker_loss,
                regime: c.regime,
                augment_both_segments: c.augment_both_segments,
                lambda: c.lambda,
                aat_enabled: c.aat_enabled,
                dataset,
                n_runs: rs.len(),
                eer_mean,
                eer_std,
                mindcf_mean,
                mindcf_std,
                probe_accuracy_mean: (probes.len() == rs.len()).then(|| mean_std(&probes).0),
                seeds: rs.iter().map(|r| r.seed).collect(),
                config_hashes: rs.iter().map(|r| r.config_hash.clone()).collect(),
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        let (ka, kb) = (sort_key(a), sort_key(b));
        ka.0.cmp(&kb.0)
            .then(ka.1.cmp(&kb.1))
            .then(ka.2.cmp(&kb.2))
            .then(ka.3.total_cmp(&kb.3))
            .then(ka.4.cmp(&kb.4))
            .then(ka.5.cmp(&kb.5))
    });
    rows
}

fn loss_label(l: SpeakerLoss) -> &'static str {
    match l {
        SpeakerLoss::Prototypical => "P",
        SpeakerLoss::AngularPrototypical => "AP",
    }
}

fn with_std(mean: f64, std: Option<f64>, scale: f64, decimals: usize) -> String {
    match std {
        Some(s) => format!("{:.*}±{:.*}", decimals, mean * scale, decimals, s * scale),
        None => format!("{:.*}±—", decimals, mean * scale),
    }
}

/// Fixed-width text table. EER is in percent with 2 decimals, minDCF has 3.
pub fn render_text(rows: &[ResultRow]) -> String {
    let header = ["loss", "augment", "segments", "lambda", "dataset", "runs", "EER (%)", "minDCF", "probe acc"];
    let body: Vec<[String; 9]> = rows
        .iter()
        .map(|r| {
            [
                loss_label(r.speaker_loss).to_string(),
                r.regime.label().to_string(),
                if r.augment_both_segments { "both" } else { "one" }.to_string(),
                if r.aat_enabled { format!("{}", r.lambda) } else { "off".to_string() },
                r.dataset.clone(),
                r.n_runs.to_string(),
                with_std(r.eer_mean, r.eer_std, 100.0, 2),
                with_std(r.mindcf_mean, r.mindcf_std, 1.0, 3),
                r.probe_accuracy_mean.map_or("—".to_string(), |p| format!("{:.3}", p)),
            ]
        })
        .collect();
    let mut widths = header.map(|h| h.chars().count());
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}", w = *w))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    for row in &body {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

const CSV_HEADER: [&str; 14] = [
    "speaker_loss",
    "regime",
    "augment_both_segments",
    "lambda",
    "aat_enabled",
    "dataset",
    "n_runs",
    "eer_mean",
    "eer_std",
    "mindcf_mean",
    "mindcf_std",
    "probe_accuracy_mean",
    "seeds",
    "config_hashes",
];

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// Full-precision CSV that [`parse_csv`] reads back to identical rows.
pub fn render_csv(rows: &[ResultRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("writing to memory");
    for r in rows {
        w.write_record([
            serde_json::to_value(r.speaker_loss).unwrap().as_str().unwrap().to_string(),
            r.regime.label().to_string(),
            r.augment_both_segments.to_string(),
            r.lambda.to_string(),
            r.aat_enabled.to_string(),
            r.dataset.clone(),
            r.n_runs.to_string(),
            r.eer_mean.to_string(),
            opt(r.eer_std),
            r.mindcf_mean.to_string(),
            opt(r.mindcf_std),
            opt(r.probe_accuracy_mean),
            r.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" "),
            r.config_hashes.join(" "),
        ])
        .expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("writing to memory")).expect("csv is utf-8")
}

pub fn parse_csv(text: &str) -> Result<Vec<ResultRow>, ExperimentError> {
    let bad = |e: String| ExperimentError::Report(e);
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = rdr.headers().map_err(|e| bad(e.to_string()))?.iter().map(String::from).collect();
    if header != CSV_HEADER {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let f = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize| f(i).parse::<f64>().map_err(|e| bad(format!("column {}: {e}", CSV_HEADER[i])));
        let opt_num = |i: usize| if f(i).is_empty() { Ok(None) } else { num(i).map(Some) };
        let flag = |i: usize| f(i).parse::<bool>().map_err(|e| bad(format!("column {}: {e}", CSV_HEADER[i])));
        let enum_of = |i: usize| serde_json::Value::String(f(i).to_string());
        rows.push(ResultRow {
            speaker_loss: serde_json::from_value(enum_of(0)).map_err(|e| bad(e.to_string()))?,
            regime: serde_json::from_value(enum_of(1)).map_err(|e| bad(e.to_string()))?,
            augment_both_segments: flag(2)?,
            lambda: num(3)?,
            aat_enabled: flag(4)?,
            dataset: f(5).to_string(),
            n_runs: f(6).parse().map_err(|e| bad(format!("n_runs: {e}")))?,
            eer_mean: num(7)?,
            eer_std: opt_num(8)?,
            mindcf_mean: num(9)?,
            mindcf_std: opt_num(10)?,
            probe_accuracy_mean: opt_num(11)?,
            seeds: f(12)
                .split_whitespace()
                .map(|s| s.parse().map_err(|e| bad(format!("seeds: {e}"))))
                .collect::<Result<_, _>>()?,
            config_hashes: f(13).split_whitespace().map(String::from).collect(),
        });
    }
    Ok(rows)
}
